use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::Volume;

use super::{ModelConfig, ModelError};

/// Splits a volume into `p³` patches.
///
/// Token `t` is patch `(bz, by, bx)` in raster order over the patch grid
/// (`t = (bz·gh + by)·gw + bx`). Inside a token, element
/// `((c·p + dz)·p + dy)·p + dx` holds voxel `(c, bz·p + dz, by·p + dy, bx·p + dx)`.
pub fn patchify<T: Real>(v: &Volume<T>, patch: usize) -> Result<Tensor<T>, ModelError> {
    let grid = patch_grid(v.dims, patch)?;
    let k: usize = grid.iter().product();
    let pv = v.channels * patch.pow(3);
    let mut out = Vec::with_capacity(k * pv);
    for bz in 0..grid[0] {
        for by in 0..grid[1] {
            for bx in 0..grid[2] {
                for c in 0..v.channels {
                    for dz in 0..patch {
                        for dy in 0..patch {
                            let start = v.index(c, bz * patch + dz, by * patch + dy, bx * patch);
                            out.extend_from_slice(&v.voxels[start..start + patch]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![k, pv], out)?)
}

/// Inverse of [`patchify`] for an arbitrary grid.
pub fn unpatchify_dims<T: Real>(
    t: &Tensor<T>,
    channels: usize,
    dims: [usize; 3],
    patch: usize,
) -> Result<Volume<T>, ModelError> {
    let grid = patch_grid(dims, patch)?;
    let k: usize = grid.iter().product();
    let pv = channels * patch.pow(3);
    if t.shape() != [k, pv] {
        return Err(ModelError::Config(format!(
            "token tensor {:?} does not match {k} patches of {pv} values",
            t.shape()
        )));
    }
    let mut v = Volume::zeros(channels, dims);
    let mut src = t.data().chunks_exact(patch);
    for bz in 0..grid[0] {
        for by in 0..grid[1] {
            for bx in 0..grid[2] {
                for c in 0..channels {
                    for dz in 0..patch {
                        for dy in 0..patch {
                            let start = v.index(c, bz * patch + dz, by * patch + dy, bx * patch);
                            v.voxels[start..start + patch].copy_from_slice(src.next().expect("sized above"));
                        }
                    }
                }
            }
        }
    }
    Ok(v)
}

pub fn unpatchify<T: Real>(t: &Tensor<T>, cfg: &ModelConfig) -> Result<Volume<T>, ModelError> {
    unpatchify_dims(t, cfg.channels, [cfg.input_side; 3], cfg.patch_side)
}

/// Differentiable [`unpatchify`]: `[k, patch_voxels]` tokens to a
/// `[C, D, H, W]` volume.
pub fn unpatchify_var<T: Real>(g: &mut Graph<T>, tokens: Var, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let (n, p, c) = (cfg.grid_side(), cfg.patch_side, cfg.channels);
    let s = cfg.input_side;
    let x = g.reshape(tokens, &[n, n, n, c, p, p, p])?;
    let x = g.transpose(x, &[3, 0, 4, 1, 5, 2, 6])?;
    Ok(g.reshape(x, &[c, s, s, s])?)
}

fn patch_grid(dims: [usize; 3], patch: usize) -> Result<[usize; 3], ModelError> {
    if patch == 0 || dims.iter().any(|&d| d == 0 || d % patch != 0) {
        return Err(ModelError::Config(format!("dims {dims:?} are not divisible by patch side {patch}")));
    }
    Ok(dims.map(|d| d / patch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_volume(channels: usize, dims: [usize; 3], seed: u64) -> Volume<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = channels * dims.iter().product::<usize>();
        Volume::new(channels, dims, (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
    }

    #[test]
    fn paper_token_shape() {
        let v = Volume::<f32>::zeros(4, [96; 3]);
        let t = patchify(&v, 8).unwrap();
        assert_eq!(t.shape(), &[1728, 2048]);
        assert_eq!(patchify(&Volume::<f32>::zeros(1, [16; 3]), 8).unwrap().shape()[0], 8);
    }

    #[test]
    fn element_order_is_channel_then_raster() {
        let v = random_volume(2, [4, 4, 4], 3);
        let t = patchify(&v, 2).unwrap();
        // token (1, 0, 1) = 4 + 1 = 5; element (c=1, dz=1, dy=0, dx=1) = 8 + 4 + 1 = 13.
        assert_eq!(t.data()[5 * 16 + 13], v.get(1, 3, 0, 3));
    }

    #[test]
    fn indivisible_and_wrong_count_are_rejected() {
        assert!(patchify(&Volume::<f64>::zeros(1, [10, 8, 8]), 4).is_err());
        let cfg = ModelConfig::desk();
        let t = Tensor::<f64>::zeros(&[63, 512]);
        assert!(unpatchify(&t, &cfg).is_err());
    }

    #[test]
    fn graph_unpatchify_matches_plain() {
        let cfg = ModelConfig {
            input_side: 8,
            patch_side: 4,
            channels: 2,
            ..ModelConfig::desk()
        };
        let v = random_volume(2, [8; 3], 9);
        let t = patchify(&v, 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = unpatchify_var(&mut g, x, &cfg).unwrap();
        assert_eq!(g.value(y).data(), &v.voxels[..]);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(
            channels in 1usize..3,
            grid in prop::array::uniform3(1usize..4),
            patch in 1usize..4,
            seed in any::<u64>(),
        ) {
            let dims = grid.map(|g| g * patch);
            let v = random_volume(channels, dims, seed);
            let t = patchify(&v, patch).unwrap();
            prop_assert_eq!(unpatchify_dims(&t, channels, dims, patch).unwrap(), v);
        }
    }
}
