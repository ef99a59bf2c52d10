use crate::tensor::Tensor;

use super::ModelError;

/// Fixed 3D sinusoidal table with one row per token plus a leading CLS row.
///
/// Each axis (d, then h, then w) gets a block of `⌊dim/3⌋` columns holding
/// `sin(pos·ω_i)` for `i < half` followed by `cos(pos·ω_i)`, with
/// `half = ⌊block/2⌋` and `ω_i = 10000^(−i/half)`. An odd block leaves its
/// last column zero; the `dim − 3·block` trailing columns are zero too. Row 0
/// (CLS) is all zeros, and patch `t` in raster order sits at row `t + 1`.
pub fn positional_encoding_3d(grid: [usize; 3], dim: usize) -> Result<Tensor<f64>, ModelError> {
    if dim < 6 {
        return Err(ModelError::Config(format!("positional encoding needs dim >= 6, got {dim}")));
    }
    let block = dim / 3;
    let half = block / 2;
    let omega: Vec<f64> = (0..half).map(|i| 10000f64.powf(-(i as f64) / half as f64)).collect();
    let k: usize = grid.iter().product();
    let mut data = vec![0.0; (k + 1) * dim];
    for t in 0..k {
        let coords = [t / (grid[1] * grid[2]), (t / grid[2]) % grid[1], t % grid[2]];
        let row = &mut data[(t + 1) * dim..(t + 2) * dim];
        for (axis, &pos) in coords.iter().enumerate() {
            let base = axis * block;
            for (i, &w) in omega.iter().enumerate() {
                let angle = pos as f64 * w;
                row[base + i] = angle.sin();
                row[base + half + i] = angle.cos();
            }
        }
    }
    Ok(Tensor::new(vec![k + 1, dim], data).expect("sized above"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_row_has_sin_zero_cos_one() {
        let t = positional_encoding_3d([4, 4, 4], 64).unwrap();
        let (block, half) = (21, 10);
        let row = &t.data()[64..128];
        for axis in 0..3 {
            for i in 0..half {
                assert_eq!(row[axis * block + i], 0.0);
                assert_eq!(row[axis * block + half + i], 1.0);
            }
            assert_eq!(row[axis * block + 2 * half], 0.0, "odd block padding");
        }
        assert_eq!(row[63], 0.0, "remainder column");
        assert!(t.data()[..64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn axis_blocks_depend_only_on_their_coordinate() {
        let dim = 32;
        let block = dim / 3;
        let t = positional_encoding_3d([3, 3, 3], dim).unwrap();
        let row = |tok: usize| &t.data()[(tok + 1) * dim..(tok + 2) * dim];
        // (1, 2, 0) vs (1, 2, 2): only the w block changes.
        let (a, b) = (row(9 + 6), row(9 + 6 + 2));
        assert_eq!(&a[..2 * block], &b[..2 * block]);
        assert_ne!(&a[2 * block..3 * block], &b[2 * block..3 * block]);
    }

    #[test]
    fn small_dim_is_rejected() {
        assert!(positional_encoding_3d([2, 2, 2], 5).is_err());
        assert!(positional_encoding_3d([2, 2, 2], 6).is_ok());
    }
}
