//! Two-class synthetic volumes standing in for labeled MRI crops.
//!
//! Class 0 holds a single smooth ellipsoid. Class 1 holds a two-lobed blob
//! whose interior carries a high-frequency texture and a brighter mean
//! intensity (`class_margin`). Both sit on a flat background with additive
//! Gaussian noise.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use super::{write_manifest, write_volume, ManifestEntry, Result, SegmentationMask, Volume, VolumeDataset, VolumeError};
use crate::rng::{rng_for, stream};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub side: usize,
    pub seed: u64,
    pub channels: usize,
    pub background: f64,
    pub peak: f64,
    /// Extra mean brightness of class-1 blobs, in intensity units.
    pub class_margin: f64,
    /// Relative amplitude of the class-1 interior texture.
    pub texture_amplitude: f64,
    pub noise_sigma: f64,
}

impl SyntheticConfig {
    pub fn new(n: usize, side: usize, seed: u64) -> Self {
        Self {
            n,
            side,
            seed,
            channels: 1,
            background: 30.0,
            peak: 150.0,
            class_margin: 20.0,
            texture_amplitude: 0.25,
            noise_sigma: 4.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(VolumeError::Domain(format!("need at least 2 records, got {}", self.n)));
        }
        if self.side < 16 {
            return Err(VolumeError::Domain(format!("side must be at least 16, got {}", self.side)));
        }
        if self.channels == 0 {
            return Err(VolumeError::Domain("channels must be positive".into()));
        }
        Ok(())
    }
}

pub struct SyntheticRecord<T> {
    pub volume: Volume<T>,
    pub mask: SegmentationMask,
}

fn soft_inside(rho: f64) -> f64 {
    // Smooth step around the unit iso-surface, about 1.5 voxels wide for
    // typical radii.
    1.0 / (1.0 + (8.0 * (rho - 1.0)).exp())
}

/// In-memory generation; a pure function of the config.
pub fn synthesize<T: Real>(cfg: &SyntheticConfig) -> Result<Vec<SyntheticRecord<T>>> {
    cfg.validate()?;
    let s = cfg.side;
    let sf = s as f64;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| VolumeError::Domain(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let class = (i % 2) as u32;
        let mut rng = rng_for(cfg.seed, &[stream::SYNTHETIC, i as u64]);
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.4..0.6) * sf);
        let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.14..0.22) * sf);
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        let freq = std::f64::consts::TAU / 4.0;
        let peak = cfg.peak + if class == 1 { cfg.class_margin } else { 0.0 };

        let rho = |p: [f64; 3], c: [f64; 3], scale: f64| {
            (0..3).map(|a| ((p[a] - c[a]) / (radii[a] * scale)).powi(2)).sum::<f64>().sqrt()
        };
        let lobes: Vec<[f64; 3]> = if class == 0 {
            vec![center]
        } else {
            let off = 0.55 * radii.iter().sum::<f64>() / 3.0;
            vec![
                std::array::from_fn(|a| center[a] + off * dir[a]),
                std::array::from_fn(|a| center[a] - off * dir[a]),
            ]
        };
        let lobe_scale = if class == 0 { 1.0 } else { 0.75 };

        let mut density = vec![0.0; s * s * s];
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let p = [z as f64, y as f64, x as f64];
                    let d = lobes.iter().map(|&c| soft_inside(rho(p, c, lobe_scale))).fold(0.0, f64::max);
                    density[(z * s + y) * s + x] = d;
                }
            }
        }
        let mut mask = SegmentationMask::empty([s; 3]);
        mask.voxels = density.iter().map(|&d| d > 0.5).collect();

        let mut voxels = Vec::with_capacity(cfg.channels * s * s * s);
        for c in 0..cfg.channels {
            // Later channels are dimmer copies, loosely mimicking modality contrast.
            let gain = 1.0 - 0.15 * c as f64;
            for z in 0..s {
                for y in 0..s {
                    for x in 0..s {
                        let d = density[(z * s + y) * s + x];
                        let texture = if class == 1 {
                            1.0 + cfg.texture_amplitude
                                * (freq * z as f64 + phase[0]).sin()
                                * (freq * y as f64 + phase[1]).sin()
                                * (freq * x as f64 + phase[2]).sin()
                        } else {
                            1.0
                        };
                        let clean = cfg.background + gain * (peak - cfg.background) * d * texture;
                        voxels.push(T::from_f64c(clean + noise.sample(&mut rng)));
                    }
                }
            }
        }
        let mut volume = Volume::new(cfg.channels, [s; 3], voxels)?;
        volume.id = format!("syn-{i:04}");
        volume.label = Some(class);
        volume.provenance = format!("synthetic seed={} index={i} class={class}", cfg.seed);
        out.push(SyntheticRecord { volume, mask });
    }
    Ok(out)
}

/// Writes `volumes/`, `masks/` and `manifest.jsonl` under `dir`.
pub fn generate_synthetic<T: Real>(dir: &Path, cfg: &SyntheticConfig) -> Result<VolumeDataset> {
    let records = synthesize::<T>(cfg)?;
    let mut entries = Vec::with_capacity(records.len());
    for r in &records {
        let path = format!("volumes/{}.vvol", r.volume.id);
        let mask_path = format!("masks/{}.vvol", r.volume.id);
        write_volume(&dir.join(&path), &r.volume)?;
        let mut mv = r.mask.to_volume::<T>();
        mv.id = format!("{}-mask", r.volume.id);
        write_volume(&dir.join(&mask_path), &mv)?;
        entries.push(ManifestEntry {
            id: r.volume.id.clone(),
            path,
            label: r.volume.label,
            mask: Some(mask_path),
        });
    }
    write_manifest(&dir.join(VolumeDataset::MANIFEST), &entries)?;
    VolumeDataset::open(dir)
}
