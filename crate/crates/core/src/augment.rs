//! Gamma, affine and noise augmentations used to build the two views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Real;
use crate::volume::Volume;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub gamma_range: [f64; 2],
    pub max_rotation_degrees: f64,
    pub max_translation_voxels: f64,
    pub max_scale_delta: f64,
    /// Noise standard deviation range on the `[0, 255]` intensity scale.
    pub noise_sigma_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            gamma_range: [0.7, 1.5],
            max_rotation_degrees: 10.0,
            max_translation_voxels: 4.0,
            max_scale_delta: 0.1,
            noise_sigma_range: [0.0, 8.0],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every range collapsed onto its identity value.
    pub fn identity() -> Self {
        Self {
            gamma_range: [1.0, 1.0],
            max_rotation_degrees: 0.0,
            max_translation_voxels: 0.0,
            max_scale_delta: 0.0,
            noise_sigma_range: [0.0, 0.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let [glo, ghi] = self.gamma_range;
        let [nlo, nhi] = self.noise_sigma_range;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(AugmentError::Domain(format!("gamma range [{glo}, {ghi}] must satisfy 0 < lo <= hi")));
        }
        if !(nlo >= 0.0 && nlo <= nhi) {
            return Err(AugmentError::Domain(format!("noise range [{nlo}, {nhi}] must satisfy 0 <= lo <= hi")));
        }
        if self.max_rotation_degrees < 0.0 || self.max_translation_voxels < 0.0 || !(0.0..1.0).contains(&self.max_scale_delta) {
            return Err(AugmentError::Domain("affine bounds must be non-negative and scale delta below 1".into()));
        }
        Ok(())
    }
}

/// `255 · (v / 255)^gamma` per voxel.
pub fn gamma_correct<T: Real>(v: &Volume<T>, gamma: f64) -> Result<Volume<T>, AugmentError> {
    if !(gamma > 0.0) {
        return Err(AugmentError::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(v.clone());
    }
    let top = T::from_f64c(255.0);
    let g = T::from_f64c(gamma);
    Ok(v.map_voxels(|x| top * (x.max(T::zero()) / top).powf(g)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    /// Rotation angles in degrees about the d, h and w axes.
    pub rotation_degrees: [f64; 3],
    pub scale: f64,
    /// Shift in voxels along d, h, w.
    pub translation: [f64; 3],
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            rotation_degrees: [0.0; 3],
            scale: 1.0,
            translation: [0.0; 3],
        }
    }
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Rotation in `(z, y, x) = (d, h, w)` coordinates, composed as
/// `Rz · Ry · Rx` (applied x first).
fn rotation(deg: [f64; 3]) -> Mat3 {
    let [az, ay, ax] = deg.map(f64::to_radians);
    let (sz, cz) = az.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sx, cx) = ax.sin_cos();
    // Rows/columns ordered (z, y, x).
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn snap(c: f64) -> f64 {
    let r = c.round();
    if (c - r).abs() < 1e-9 {
        r
    } else {
        c
    }
}

/// Resamples `v` under `p ↦ R·s·(p − c) + c + t` about the volume centre
/// `c`, pulling each output voxel from the inverse-mapped source point with
/// trilinear interpolation. Source points outside the grid read 0.
pub fn affine_transform<T: Real>(v: &Volume<T>, p: &AffineParams) -> Volume<T> {
    if *p == AffineParams::identity() {
        return v.clone();
    }
    let [d, h, w] = v.dims;
    let center = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let r = rotation(p.rotation_degrees);
    let mut out = Volume {
        voxels: vec![T::zero(); v.voxels.len()],
        ..v.clone()
    };
    let n = v.voxels_per_channel();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [
                    z as f64 - center[0] - p.translation[0],
                    y as f64 - center[1] - p.translation[1],
                    x as f64 - center[2] - p.translation[2],
                ];
                // Inverse rotation is the transpose.
                let src: [f64; 3] = std::array::from_fn(|i| {
                    snap((0..3).map(|k| r[k][i] * q[k]).sum::<f64>() / p.scale + center[i])
                });
                let base = src.map(f64::floor);
                let frac: [f64; 3] = std::array::from_fn(|i| src[i] - base[i]);
                let dst = (z * h + y) * w + x;
                for c in 0..v.channels {
                    let mut acc = T::zero();
                    for corner in 0..8 {
                        let offs = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                        let mut weight = 1.0;
                        let mut idx = [0i64; 3];
                        for a in 0..3 {
                            let o = offs[a] as f64;
                            weight *= if offs[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                            idx[a] = (base[a] + o) as i64;
                        }
                        if weight == 0.0 {
                            continue;
                        }
                        let inside = idx[0] >= 0
                            && idx[0] < d as i64
                            && idx[1] >= 0
                            && idx[1] < h as i64
                            && idx[2] >= 0
                            && idx[2] < w as i64;
                        if inside {
                            let s = v.voxels[c * n + ((idx[0] as usize * h) + idx[1] as usize) * w + idx[2] as usize];
                            acc = acc + T::from_f64c(weight) * s;
                        }
                    }
                    out.voxels[c * n + dst] = acc;
                }
            }
        }
    }
    out
}

/// Zero-mean Gaussian field, before any clamping.
pub fn noise_field<T: Real>(len: usize, sigma: f64, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..len).map(|_| T::from_f64c(normal.sample(&mut rng))).collect()
}

/// Adds i.i.d. `N(0, sigma²)` noise, then clamps to `[0, 255]`.
pub fn gaussian_noise<T: Real>(v: &Volume<T>, sigma: f64, seed: u64) -> Result<Volume<T>, AugmentError> {
    if !(sigma >= 0.0) {
        return Err(AugmentError::Domain(format!("sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let top = T::from_f64c(255.0);
    let noise = noise_field::<T>(v.voxels.len(), sigma, seed);
    let mut out = v.clone();
    for (x, e) in out.voxels.iter_mut().zip(noise) {
        *x = (*x + e).max(T::zero()).min(top);
    }
    Ok(out)
}

/// Parameters drawn by [`random_view`], kept for logging and tests.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewParams {
    pub gamma: f64,
    pub affine: AffineParams,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_view_params(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ViewParams {
    let gamma = uniform(rng, cfg.gamma_range[0], cfg.gamma_range[1]);
    let rot = cfg.max_rotation_degrees;
    let rotation_degrees = std::array::from_fn(|_| uniform(rng, -rot, rot));
    let sd = cfg.max_scale_delta;
    let scale = 1.0 + uniform(rng, -sd, sd);
    let tr = cfg.max_translation_voxels;
    let translation = std::array::from_fn(|_| uniform(rng, -tr, tr));
    let noise_sigma = uniform(rng, cfg.noise_sigma_range[0], cfg.noise_sigma_range[1]);
    let noise_seed = rng.random();
    ViewParams {
        gamma,
        affine: AffineParams {
            rotation_degrees,
            scale,
            translation,
        },
        noise_sigma,
        noise_seed,
    }
}

/// Samples parameters uniformly from `cfg` and applies gamma, then affine,
/// then noise.
pub fn random_view<T: Real>(v: &Volume<T>, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Volume<T>, AugmentError> {
    cfg.validate()?;
    let p = sample_view_params(cfg, rng);
    apply_view(v, &p)
}

pub fn apply_view<T: Real>(v: &Volume<T>, p: &ViewParams) -> Result<Volume<T>, AugmentError> {
    let g = gamma_correct(v, p.gamma)?;
    let a = affine_transform(&g, &p.affine);
    gaussian_noise(&a, p.noise_sigma, p.noise_seed)
}
