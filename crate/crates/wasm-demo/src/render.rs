//! Pure image and curve builders behind the exported functions.

use vitae_core::losses::sobel3d;
use vitae_core::model::{make_mask_plan, patchify, unpatchify_dims};
use vitae_core::optim::{lambda1_at, lr_at, DecayTarget, Granularity, TrainSchedule};
use vitae_core::volume::{synthesize, SyntheticConfig, Volume};

/// One synthetic volume of the requested class (0 or 1).
pub fn demo_volume(side: usize, seed: u64, class: u32) -> Result<Volume<f64>, String> {
    if class > 1 {
        return Err(format!("class must be 0 or 1, got {class}"));
    }
    let mut recs = synthesize::<f64>(&SyntheticConfig::new(2, side, seed)).map_err(|e| e.to_string())?;
    Ok(recs.swap_remove(class as usize).volume)
}

fn check_slice(v: &Volume<f64>, z: usize) -> Result<(), String> {
    if z >= v.dims[0] {
        return Err(format!("slice {z} is outside 0..{}", v.dims[0]));
    }
    Ok(())
}

fn gray(value: f64, max: f64) -> u8 {
    (255.0 * (value / max).clamp(0.0, 1.0)).round() as u8
}

/// RGBA pixels of axial slice `z` with a fraction `ratio` of the patches
/// hidden. Hidden patches are drawn as a dark red tint over the original.
pub fn masked_slice(v: &Volume<f64>, patch: usize, ratio: f64, seed: u64, z: usize) -> Result<Vec<u8>, String> {
    check_slice(v, z)?;
    let tokens = patchify(v, patch).map_err(|e| e.to_string())?;
    let k = tokens.shape()[0];
    let plan = make_mask_plan(k, ratio, seed).map_err(|e| e.to_string())?;
    let mut flags = tokens.clone();
    let pv = tokens.shape()[1];
    flags.data_mut().iter_mut().for_each(|x| *x = 0.0);
    for &h in &plan.hidden {
        flags.data_mut()[h * pv..(h + 1) * pv].iter_mut().for_each(|x| *x = 1.0);
    }
    let hidden = unpatchify_dims(&flags, v.channels, v.dims, patch).map_err(|e| e.to_string())?;
    let [_, h, w] = v.dims;
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let g = gray(v.get(0, z, y, x), 255.0);
            if hidden.get(0, z, y, x) > 0.5 {
                out.extend_from_slice(&[g / 4 + 90, g / 4, g / 4, 255]);
            } else {
                out.extend_from_slice(&[g, g, g, 255]);
            }
        }
    }
    Ok(out)
}

/// RGBA pixels of the Sobel gradient magnitude on axial slice `z`, scaled
/// so the brightest voxel of the slice is white.
pub fn edge_slice(v: &Volume<f64>, z: usize) -> Result<Vec<u8>, String> {
    check_slice(v, z)?;
    let e = sobel3d(v).map_err(|e| e.to_string())?;
    let [_, h, w] = v.dims;
    let plane = &e.channel(0)[z * h * w..(z + 1) * h * w];
    let max = plane.iter().copied().fold(0.0, f64::max).max(1e-12);
    Ok(plane.iter().flat_map(|&m| {
        let g = gray(m, max);
        [g, g, g, 255]
    }).collect())
}

/// `[lr(0), λ₁(0), lr(1), λ₁(1), …]` for every epoch from 0 to `total`.
pub fn schedule_curves(total: usize, warmup: usize, base_lr: f64, lambda1_init: f64) -> Result<Vec<f64>, String> {
    let s = TrainSchedule {
        base_lr,
        warmup_epochs: warmup,
        total_epochs: total,
        lambda1_init,
        lambda1_final: 0.0,
        decay_target: DecayTarget::Lambda1,
        granularity: Granularity::Epoch,
    };
    s.validate().map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(2 * (total + 1));
    for e in 0..=total {
        out.push(lr_at(e as f64, &s).map_err(|e| e.to_string())?);
        out.push(lambda1_at(e as f64, &s).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_slice_hides_the_requested_share_of_pixels() {
        let v = demo_volume(32, 3, 1).unwrap();
        let mut hidden = 0;
        for z in 0..32 {
            let px = masked_slice(&v, 8, 0.75, 9, z).unwrap();
            assert_eq!(px.len(), 32 * 32 * 4);
            hidden += px.chunks(4).filter(|p| p[0] > p[1]).count();
        }
        assert_eq!(hidden, 48 * 512);
    }

    #[test]
    fn edge_slice_is_dark_inside_flat_background() {
        let v = Volume::new(1, [16; 3], vec![40.0; 16 * 16 * 16]).unwrap();
        let px = edge_slice(&v, 8).unwrap();
        assert!(px.chunks(4).all(|p| p[0] == 0));
        let blob = demo_volume(24, 1, 0).unwrap();
        assert!(edge_slice(&blob, 12).unwrap().chunks(4).any(|p| p[0] == 255));
    }

    #[test]
    fn schedule_curves_start_and_end_where_expected() {
        let c = schedule_curves(100, 2, 1e-3, 0.01).unwrap();
        assert_eq!(c.len(), 202);
        assert_eq!((c[0], c[1]), (5e-4, 0.01));
        assert_eq!(c[4], 1e-3);
        assert!(c[200].abs() < 1e-18 && c[201] == 0.0);
    }

    #[test]
    fn bad_inputs_are_reported() {
        let v = demo_volume(16, 0, 0).unwrap();
        assert!(masked_slice(&v, 8, 1.0, 0, 0).is_err());
        assert!(masked_slice(&v, 5, 0.5, 0, 0).is_err());
        assert!(edge_slice(&v, 16).is_err());
        assert!(demo_volume(16, 0, 2).is_err());
        assert!(schedule_curves(10, 10, 1e-3, 0.01).is_err());
    }
}
