use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::Volume;

use super::LossError;

/// Kernel gain. `Unit` scales smoothing to `[1, 2, 1]/4` and the difference to
/// `[−1, 0, 1]/2`, so a ramp of slope 1 gives a response of exactly 1. `Raw`
/// keeps the integer weights, 32 times larger.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SobelScale {
    #[default]
    Unit,
    Raw,
}

/// The three 3×3×3 Sobel kernels as one `[3, 1, 3, 3, 3]` tensor, in x, y, z
/// order. Kernel index `[a][b][e]` runs over (d, h, w) offsets; x is the w
/// axis, y the h axis and z the d axis. Each kernel is the central
/// difference along its own axis times `[1, 2, 1]` smoothing on the other two.
#[derive(Clone, Debug, PartialEq)]
pub struct SobelBank {
    kernels: Tensor<f64>,
}

impl Default for SobelBank {
    fn default() -> Self {
        Self::new()
    }
}

impl SobelBank {
    pub fn new() -> Self {
        Self::with_scale(SobelScale::Unit)
    }

    pub fn with_scale(scale: SobelScale) -> Self {
        let (smooth, diff) = match scale {
            SobelScale::Unit => ([0.25, 0.5, 0.25], [-0.5, 0.0, 0.5]),
            SobelScale::Raw => ([1.0, 2.0, 1.0], [-1.0, 0.0, 1.0]),
        };
        let mut data = Vec::with_capacity(81);
        for axis in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    for e in 0..3 {
                        data.push(match axis {
                            0 => smooth[a] * smooth[b] * diff[e],
                            1 => smooth[a] * diff[b] * smooth[e],
                            _ => diff[a] * smooth[b] * smooth[e],
                        });
                    }
                }
            }
        }
        Self {
            kernels: Tensor::new(vec![3, 1, 3, 3, 3], data).expect("81 entries"),
        }
    }

    pub fn kernels(&self) -> &Tensor<f64> {
        &self.kernels
    }

    /// Kernel `axis` (0 = x, 1 = y, 2 = z) as a flat `[d][h][w]` array.
    pub fn kernel(&self, axis: usize) -> &[f64] {
        &self.kernels.data()[axis * 27..(axis + 1) * 27]
    }
}

/// Edge map `sqrt(g_x² + g_y² + g_z²)` of every channel of `x: [C, D, H, W]`.
///
/// Borders are extended by replicating the outermost voxel before the
/// cross-correlation, so a constant volume has an all-zero edge map.
pub fn sobel3d_var<T: Real>(g: &mut Graph<T>, bank: &SobelBank, x: Var) -> Result<Var, LossError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[1..].iter().any(|&d| d < 3) {
        return Err(LossError::Domain(format!("sobel3d needs [C, D, H, W] with spatial dims >= 3, got {shape:?}")));
    }
    let kernels = g.constant(bank.kernels.cast());
    let mut maps = Vec::with_capacity(shape[0]);
    for c in 0..shape[0] {
        let mut v = g.slice(x, 0, c, c + 1)?;
        for axis in 1..4 {
            v = replicate_pad(g, v, axis)?;
        }
        let mut resp = g.conv3d(v, kernels)?;
        for axis in 1..4 {
            let n = g.shape(resp)[axis];
            resp = g.slice(resp, axis, 1, n - 1)?;
        }
        let sq = g.mul(resp, resp)?;
        let norm2 = g.sum_axis(sq, 0)?;
        let edge = g.sqrt(norm2);
        let [d, h, w] = [shape[1], shape[2], shape[3]];
        maps.push(g.reshape(edge, &[1, d, h, w])?);
    }
    if maps.len() == 1 {
        Ok(maps[0])
    } else {
        Ok(g.concat(&maps, 0)?)
    }
}

fn replicate_pad<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var, LossError> {
    let n = g.shape(x)[axis];
    let first = g.slice(x, axis, 0, 1)?;
    let last = g.slice(x, axis, n - 1, n)?;
    Ok(g.concat(&[first, x, last], axis)?)
}

/// Edge map of a volume, one output channel per input channel.
pub fn sobel3d<T: Real>(v: &Volume<T>) -> Result<Volume<T>, LossError> {
    let mut g = Graph::new();
    let x = g.constant(volume_tensor(v));
    let y = sobel3d_var(&mut g, &SobelBank::new(), x)?;
    let data = g.value(y).data().to_vec();
    Ok(Volume {
        voxels: data,
        ..v.clone()
    })
}

pub(crate) fn volume_tensor<T: Real>(v: &Volume<T>) -> Tensor<T> {
    let [d, h, w] = v.dims;
    Tensor::new(vec![v.channels, d, h, w], v.voxels.clone()).expect("volume invariant")
}
