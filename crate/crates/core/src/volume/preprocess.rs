use std::collections::BTreeMap;

use super::{Result, SegmentationMask, Volume, VolumeError};
use crate::tensor::Real;

/// Mean foreground coordinate per axis, rounded half-up.
pub fn centroid(mask: &SegmentationMask) -> Result<[i64; 3]> {
    let [_, h, w] = mask.dims;
    let mut sum = [0u64; 3];
    let mut n = 0u64;
    for (i, _) in mask.voxels.iter().enumerate().filter(|(_, &on)| on) {
        sum[0] += (i / (h * w)) as u64;
        sum[1] += ((i / w) % h) as u64;
        sum[2] += (i % w) as u64;
        n += 1;
    }
    if n == 0 {
        return Err(VolumeError::Domain("segmentation mask has no foreground voxels".into()));
    }
    // floor((2·sum + n) / (2n)) == floor(sum/n + 1/2), exact in integers.
    Ok(sum.map(|s| ((2 * s + n) / (2 * n)) as i64))
}

/// Per-channel background estimate: the most frequent integer-rounded
/// intensity inside the eight corner cubes (side `min(8, dim)`). Ties go to
/// the smaller value.
pub fn background_intensity<T: Real>(v: &Volume<T>) -> Vec<T> {
    let [d, h, w] = v.dims;
    let (cd, ch, cw) = (d.min(8), h.min(8), w.min(8));
    let ranges = |len: usize, side: usize| [(0, side), (len - side, len)];
    (0..v.channels)
        .map(|c| {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            let mut seen = std::collections::HashSet::new();
            for (z0, z1) in ranges(d, cd) {
                for (y0, y1) in ranges(h, ch) {
                    for (x0, x1) in ranges(w, cw) {
                        for z in z0..z1 {
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    // Small volumes make corner cubes overlap.
                                    if seen.insert((z, y, x)) {
                                        let key = v.get(c, z, y, x).to_f64c().round() as i64;
                                        *counts.entry(key).or_default() += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut best = (0usize, 0i64);
            for (&k, &n) in &counts {
                if n > best.0 {
                    best = (n, k);
                }
            }
            T::from_f64c(best.1 as f64)
        })
        .collect()
}

/// Cube of `side` voxels centred on the mask centroid. The cube starts at
/// `centroid - side/2` on each axis; voxels outside the source take the
/// channel's background intensity.
pub fn crop_to_bbox<T: Real>(v: &Volume<T>, mask: &SegmentationMask, side: usize) -> Result<Volume<T>> {
    if side == 0 {
        return Err(VolumeError::Domain("crop side must be at least 1".into()));
    }
    if mask.dims != v.dims {
        return Err(VolumeError::Shape(format!(
            "mask dims {:?} differ from volume dims {:?}",
            mask.dims, v.dims
        )));
    }
    let center = centroid(mask)?;
    let start = center.map(|c| c - (side / 2) as i64);
    let fill = background_intensity(v);
    let [d, h, w] = v.dims;
    let mut out = Vec::with_capacity(v.channels * side * side * side);
    for (c, &bg) in fill.iter().enumerate() {
        for z in 0..side as i64 {
            let sz = start[0] + z;
            for y in 0..side as i64 {
                let sy = start[1] + y;
                for x in 0..side as i64 {
                    let sx = start[2] + x;
                    let inside = (0..d as i64).contains(&sz)
                        && (0..h as i64).contains(&sy)
                        && (0..w as i64).contains(&sx);
                    out.push(if inside {
                        v.get(c, sz as usize, sy as usize, sx as usize)
                    } else {
                        bg
                    });
                }
            }
        }
    }
    Ok(Volume {
        voxels: out,
        dims: [side; 3],
        ..v.clone()
    })
}

/// Per-channel affine map of `[min, max]` onto `[0, 255]`. A constant
/// channel maps to all zeros.
pub fn rescale_intensity<T: Real>(v: &Volume<T>) -> Volume<T> {
    let mut out = v.clone();
    let top = T::from_f64c(255.0);
    for c in 0..v.channels {
        let ch = out.channel_mut(c);
        let lo = ch.iter().copied().fold(T::infinity(), T::min);
        let hi = ch.iter().copied().fold(T::neg_infinity(), T::max);
        if hi > lo {
            let span = hi - lo;
            ch.iter_mut().for_each(|x| *x = (*x - lo) / span * top);
        } else {
            ch.iter_mut().for_each(|x| *x = T::zero());
        }
    }
    out
}

/// Concatenates single-channel volumes into one multi-channel volume,
/// preserving input order. Metadata comes from the first input.
pub fn stack_modalities<T: Real>(vs: &[Volume<T>]) -> Result<Volume<T>> {
    let first = vs
        .first()
        .ok_or_else(|| VolumeError::Shape("no modalities to stack".into()))?;
    let mut voxels = Vec::with_capacity(vs.len() * first.voxels_per_channel());
    for v in vs {
        if v.channels != 1 {
            return Err(VolumeError::Shape(format!(
                "modality {} has {} channels, expected 1",
                v.id, v.channels
            )));
        }
        if v.dims != first.dims {
            return Err(VolumeError::Shape(format!(
                "modality dims {:?} differ from {:?}",
                v.dims, first.dims
            )));
        }
        voxels.extend_from_slice(&v.voxels);
    }
    Ok(Volume {
        channels: vs.len(),
        voxels,
        ..first.clone()
    })
}

/// Crop around the mask, then rescale each channel to `[0, 255]`.
pub fn preprocess_volume<T: Real>(v: &Volume<T>, mask: &SegmentationMask, side: usize) -> Result<Volume<T>> {
    Ok(rescale_intensity(&crop_to_bbox(v, mask, side)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume<f64> {
        let n = dims.iter().product::<usize>();
        Volume::new(1, dims, (0..n).map(|i| (i % 251) as f64).collect()).unwrap()
    }

    #[test]
    fn centered_crop_needs_no_padding() {
        let v = ramp([128, 128, 128]);
        let mut m = SegmentationMask::empty(v.dims);
        m.set(48, 48, 48, true);
        let c = crop_to_bbox(&v, &m, 96).unwrap();
        assert_eq!(c.dims, [96, 96, 96]);
        for &(z, y, x) in &[(0, 0, 0), (95, 95, 95), (10, 50, 90)] {
            assert_eq!(c.get(0, z, y, x), v.get(0, z, y, x));
        }
    }

    #[test]
    fn off_center_crop_pads_with_background() {
        let dims = [128, 128, 128];
        let mut v = Volume::<f64>::new(1, dims, vec![7.0; 128 * 128 * 128]).unwrap();
        let i = v.index(0, 0, 64, 64);
        v.voxels[i] = 200.0;
        let mut m = SegmentationMask::empty(dims);
        m.set(10, 48, 48, true);
        let c = crop_to_bbox(&v, &m, 96).unwrap();
        // start on axis 0 is 10 - 48 = -38: rows 0..38 are outside the source.
        for z in 0..38 {
            assert_eq!(c.get(0, z, 5, 5), 7.0);
        }
        assert_eq!(c.get(0, 38, 64, 64), 200.0);
        assert_eq!(c.dims, [96; 3]);
    }

    #[test]
    fn blob_centroid_matches_bruteforce_mean() {
        let dims = [20, 20, 20];
        let mut m = SegmentationMask::empty(dims);
        let mut coords = Vec::new();
        for z in 3..8 {
            for y in 11..16 {
                for x in 6..11 {
                    if (z + y + x) % 3 != 0 {
                        m.set(z, y, x, true);
                        coords.push([z as f64, y as f64, x as f64]);
                    }
                }
            }
        }
        let n = coords.len() as f64;
        let want: Vec<i64> = (0..3)
            .map(|a| (coords.iter().map(|c| c[a]).sum::<f64>() / n + 0.5).floor() as i64)
            .collect();
        assert_eq!(centroid(&m).unwrap().to_vec(), want);
    }

    #[test]
    fn centroid_rounds_half_up() {
        let mut m = SegmentationMask::empty([4, 4, 4]);
        m.set(1, 0, 2, true);
        m.set(2, 1, 2, true);
        assert_eq!(centroid(&m).unwrap(), [2, 1, 2]);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let v = ramp([8, 8, 8]);
        let m = SegmentationMask::empty(v.dims);
        assert!(matches!(crop_to_bbox(&v, &m, 4), Err(VolumeError::Domain(_))));
    }

    #[test]
    fn rescale_examples() {
        let v = Volume::<f64>::new(1, [1, 1, 2], vec![0.0, 255.0]).unwrap();
        assert_eq!(rescale_intensity(&v), v);
        let v = Volume::<f64>::new(1, [1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(rescale_intensity(&v).voxels, vec![0.0, 127.5, 255.0]);
        let v = Volume::<f64>::new(2, [1, 1, 2], vec![3.0, 3.0, 1.0, 5.0]).unwrap();
        assert_eq!(rescale_intensity(&v).voxels, vec![0.0, 0.0, 0.0, 255.0]);
    }

    #[test]
    fn stack_examples() {
        let vs: Vec<Volume<f32>> = (0..4).map(|i| Volume::new(1, [96; 3], vec![i as f32; 96 * 96 * 96]).unwrap()).collect();
        let s = stack_modalities(&vs).unwrap();
        assert_eq!(s.channels, 4);
        assert_eq!(s.get(2, 1, 1, 1), 2.0);
        let one = stack_modalities(&vs[..1]).unwrap();
        assert_eq!(one, vs[0]);
        let odd = Volume::<f32>::zeros(1, [96, 96, 95]);
        assert!(stack_modalities(&[vs[0].clone(), odd]).is_err());
    }

    #[test]
    fn background_uses_corner_mode() {
        let mut v = Volume::<f64>::new(1, [20, 20, 20], vec![100.0; 8000]).unwrap();
        for z in 0..20 {
            for y in 0..20 {
                for x in 0..20 {
                    let corner = [z, y, x].iter().all(|&a| !(8..12).contains(&a));
                    if corner && (x + y) % 5 != 0 {
                        let i = v.index(0, z, y, x);
                        v.voxels[i] = 12.2;
                    }
                }
            }
        }
        assert_eq!(background_intensity(&v), vec![12.0]);
    }
}
