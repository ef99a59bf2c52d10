use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, stream};
use crate::tensor::{Graph, Real, Tensor, Var};

use super::LossError;

/// Which slicing directions feed the perceptual net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptualAxes {
    /// Slices along the depth axis only.
    Axial,
    /// Average of the depth, height and width slicings.
    All,
}

/// Frozen random 2D feature pyramid applied slice by slice.
///
/// Every stage is conv3×3, GELU, conv3×3, GELU; the stage output is the
/// compared feature and a 2×2 average pool feeds the next stage. Weights are
/// `N(0, 2 / (9·c_in))`, drawn in 64-bit from the perceptual seed stream.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualNet<T> {
    pub widths: Vec<usize>,
    pub in_channels: usize,
    pub seed: u64,
    weights: Vec<Tensor<T>>,
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Result<Self, LossError> {
        if in_channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(LossError::Domain(format!(
                "perceptual net needs positive channel counts, got in {in_channels}, widths {widths:?}"
            )));
        }
        let mut rng = rng_for(seed, &[stream::PERCEPTUAL]);
        let mut weights = Vec::with_capacity(2 * widths.len());
        let mut cin = in_channels;
        for &w in widths {
            for layer_in in [cin, w] {
                let std = (2.0 / (9 * layer_in) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let values: Vec<f64> = (0..w * layer_in * 9).map(|_| dist.sample(&mut rng)).collect();
                weights.push(Tensor::from_f64(&[w, layer_in, 3, 3], &values).expect("sized above"));
            }
            cin = w;
        }
        Ok(Self {
            widths: widths.to_vec(),
            in_channels,
            seed,
            weights,
        })
    }

    /// Default pyramid with widths 16, 32 and 64.
    pub fn standard(in_channels: usize, seed: u64) -> Result<Self, LossError> {
        Self::new(in_channels, &[16, 32, 64], seed)
    }

    /// Side lengths must survive one halving per stage except the last.
    pub fn min_side(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Stage features of `[S, C, H, W]` slices.
    pub fn features(&self, g: &mut Graph<T>, slices: Var) -> Result<Vec<Var>, LossError> {
        let shape = g.shape(slices).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(LossError::Shape(format!(
                "perceptual net expects [S, {}, H, W], got {shape:?}",
                self.in_channels
            )));
        }
        let mut x = slices;
        let mut out = Vec::with_capacity(self.widths.len());
        for (stage, pair) in self.weights.chunks_exact(2).enumerate() {
            if stage > 0 {
                x = g.avg_pool2(x)?;
            }
            for w in pair {
                let wv = g.constant(w.clone());
                x = g.conv2d(x, wv)?;
                x = g.gelu(x);
            }
            out.push(x);
        }
        Ok(out)
    }
}

/// `Σ_stage mean((F(x) − F(x̂))²)` over slices of `x, x_hat: [C, D, H, W]`.
/// With equal slice sizes the mean over all slices of the per-slice sum
/// equals the per-stage mean over the whole batch of slices.
pub fn perceptual_loss_var<T: Real>(
    g: &mut Graph<T>,
    net: &PerceptualNet<T>,
    axes: PerceptualAxes,
    x: Var,
    x_hat: Var,
) -> Result<Var, LossError> {
    let (sx, sh) = (g.shape(x).to_vec(), g.shape(x_hat).to_vec());
    if sx != sh || sx.len() != 4 {
        return Err(LossError::Shape(format!("perceptual loss inputs {sx:?} and {sh:?}")));
    }
    let perms: &[[usize; 4]] = match axes {
        PerceptualAxes::Axial => &[[1, 0, 2, 3]],
        PerceptualAxes::All => &[[1, 0, 2, 3], [2, 0, 1, 3], [3, 0, 1, 2]],
    };
    let mut total = None;
    for perm in perms {
        let a = g.transpose(x, perm)?;
        let b = g.transpose(x_hat, perm)?;
        let fa = net.features(g, a)?;
        let fb = net.features(g, b)?;
        for (u, v) in fa.into_iter().zip(fb) {
            let d = g.sub(u, v)?;
            let sq = g.mul(d, d)?;
            let m = g.mean(sq)?;
            total = Some(match total {
                None => m,
                Some(t) => g.add(t, m)?,
            });
        }
    }
    let total = total.expect("at least one stage");
    Ok(if perms.len() > 1 {
        g.scale(total, T::from_f64c(1.0 / perms.len() as f64))
    } else {
        total
    })
}
