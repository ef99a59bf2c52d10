//! Reconstruction, perceptual, edge and contrastive objectives and their
//! weighted sum.

mod perceptual;
mod sobel;

#[cfg(test)]
mod tests;

pub use perceptual::{perceptual_loss_var, PerceptualAxes, PerceptualNet};
pub use sobel::{sobel3d, sobel3d_var, SobelBank, SobelScale};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{unpatchify_var, Bound, MaskPlan, MaskedVit3d, ModelError, INTENSITY_SCALE};
use crate::tensor::{Graph, Real, TensorError, Var};
use crate::volume::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss shape mismatch: {0}")]
    Shape(String),
    #[error("loss domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Region scored by the reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecTarget {
    Full,
    Hidden,
}

/// Encoder output compared by the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Cls,
    /// Mean of the visible patch tokens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda2: f64,
    pub predictor: bool,
    pub rec_target: RecTarget,
    pub perceptual_axes: PerceptualAxes,
    pub perceptual_widths: Vec<usize>,
    pub perceptual_seed: u64,
    pub feature: FeatureSource,
    pub decode_both: bool,
    pub use_perceptual: bool,
    pub use_edge: bool,
    pub use_contrastive: bool,
    pub sobel_scale: SobelScale,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda2: 10.0,
            predictor: true,
            rec_target: RecTarget::Full,
            perceptual_axes: PerceptualAxes::Axial,
            perceptual_widths: vec![16, 32, 64],
            perceptual_seed: 0,
            feature: FeatureSource::Cls,
            decode_both: false,
            use_perceptual: true,
            use_edge: true,
            use_contrastive: true,
            sobel_scale: SobelScale::Unit,
        }
    }
}

impl LossConfig {
    /// Reconstruction term only.
    pub fn rec_only() -> Self {
        Self {
            use_perceptual: false,
            use_edge: false,
            use_contrastive: false,
            ..Self::default()
        }
    }
}

/// Per-step loss terms and the weights they were combined with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_per: f64,
    pub l_edge: f64,
    pub l_cl: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recompute_total(&self) -> f64 {
        self.l_rec + self.lambda1 * self.l_per + self.lambda2 * self.l_edge + self.l_cl
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            l_rec: sum(|r| r.l_rec),
            l_per: sum(|r| r.l_per),
            l_edge: sum(|r| r.l_edge),
            l_cl: sum(|r| r.l_cl),
            lambda1: sum(|r| r.lambda1),
            lambda2: sum(|r| r.lambda2),
            total: sum(|r| r.total),
        }
    }
}

/// Mean of squared differences.
pub fn mse_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::Shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq)?)
}

/// Mean squared voxel difference over all channels.
pub fn reconstruction_loss<T: Real>(x: &Volume<T>, x_hat: &Volume<T>) -> Result<T, LossError> {
    if !x.same_shape(x_hat) {
        return Err(LossError::Shape(format!(
            "{}×{:?} vs {}×{:?}",
            x.channels, x.dims, x_hat.channels, x_hat.dims
        )));
    }
    let mut g = Graph::new();
    let a = g.constant(sobel::volume_tensor(x));
    let b = g.constant(sobel::volume_tensor(x_hat));
    let l = mse_var(&mut g, a, b)?;
    Ok(g.value(l).item())
}

pub fn edge_loss_var<T: Real>(g: &mut Graph<T>, bank: &SobelBank, x: Var, x_hat: Var) -> Result<Var, LossError> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(LossError::Shape(format!("{:?} vs {:?}", g.shape(x), g.shape(x_hat))));
    }
    let ex = sobel3d_var(g, bank, x)?;
    let eh = sobel3d_var(g, bank, x_hat)?;
    mse_var(g, ex, eh)
}

pub fn edge_loss<T: Real>(x: &Volume<T>, x_hat: &Volume<T>) -> Result<T, LossError> {
    if !x.same_shape(x_hat) {
        return Err(LossError::Shape("edge loss inputs differ in shape".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(sobel::volume_tensor(x));
    let b = g.constant(sobel::volume_tensor(x_hat));
    let l = edge_loss_var(&mut g, &SobelBank::new(), a, b)?;
    Ok(g.value(l).item())
}

pub fn perceptual_loss<T: Real>(
    x: &Volume<T>,
    x_hat: &Volume<T>,
    net: &PerceptualNet<T>,
    axes: PerceptualAxes,
) -> Result<T, LossError> {
    if !x.same_shape(x_hat) {
        return Err(LossError::Shape("perceptual loss inputs differ in shape".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(sobel::volume_tensor(x));
    let b = g.constant(sobel::volume_tensor(x_hat));
    let l = perceptual_loss_var(&mut g, net, axes, a, b)?;
    Ok(g.value(l).item())
}

/// `a·b / (|a|·|b| + eps)` for two vectors of equal shape.
pub fn cosine_var<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var, LossError> {
    let ab = g.mul(a, b)?;
    let dot = g.sum(ab);
    let aa = g.mul(a, a)?;
    let aa = g.sum(aa);
    let na = g.sqrt(aa);
    let bb = g.mul(b, b)?;
    let bb = g.sum(bb);
    let nb = g.sqrt(bb);
    let den = g.mul(na, nb)?;
    Ok(g.div(dot, den)?)
}

/// `½·[−cos(p1, sg(z2)) − cos(p2, sg(z1))]`. With `stop = false` the two
/// targets stay differentiable.
pub fn symmetric_negative_cosine<T: Real>(
    g: &mut Graph<T>,
    p1: Var,
    z1: Var,
    p2: Var,
    z2: Var,
    stop: bool,
) -> Result<Var, LossError> {
    let (t1, t2) = if stop {
        (g.stop_gradient(z1), g.stop_gradient(z2))
    } else {
        (z1, z2)
    };
    let c1 = cosine_var(g, p1, t2)?;
    let c2 = cosine_var(g, p2, t1)?;
    let s = g.add(c1, c2)?;
    Ok(g.scale(s, T::from_f64c(-0.5)))
}

/// Contrastive term between the features of two views. The predictor head
/// is applied on the gradient side when `predictor` is set, identity otherwise.
/// `targets` replaces the stopped copies of `f1` and `f2` with given values.
pub fn contrastive_loss_var<T: Real>(
    g: &mut Graph<T>,
    model: &MaskedVit3d,
    p: &Bound,
    f1: Var,
    f2: Var,
    predictor: bool,
    targets: Option<(Var, Var)>,
) -> Result<Var, LossError> {
    let (p1, p2) = if predictor {
        (model.predictor_head(g, p, f1)?, model.predictor_head(g, p, f2)?)
    } else {
        (f1, f2)
    };
    match targets {
        None => symmetric_negative_cosine(g, p1, f1, p2, f2, true),
        Some((t1, t2)) => symmetric_negative_cosine(g, p1, t1, p2, t2, false),
    }
}

/// λ values for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Fixed pieces shared by every loss evaluation of a run.
pub struct LossContext<'a, T> {
    pub model: &'a MaskedVit3d,
    pub net: &'a PerceptualNet<T>,
    pub sobel: &'a SobelBank,
    pub cfg: &'a LossConfig,
}

/// One training sample: two augmented views and their mask plans.
pub struct ViewPair<'a, T> {
    pub view1: &'a Volume<T>,
    pub view2: &'a Volume<T>,
    pub plan1: &'a MaskPlan,
    pub plan2: &'a MaskPlan,
}

/// Result of [`total_loss`].
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub report: LossReport,
    /// The two contrastive features, when that term is active.
    pub features: Option<(Var, Var)>,
}

/// Builds `l_rec + λ₁·l_per + λ₂·l_edge + l_cl` for one sample on `g`.
///
/// Both views are masked and encoded. View 1 is decoded (view 2 as well with
/// `decode_both`, averaging the reconstruction terms) and compared with the
/// augmented view it was encoded from, in intensity/255 units.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ctx: &LossContext<'_, T>,
    pair: &ViewPair<'_, T>,
    w: LossWeights,
) -> Result<LossOutput, LossError> {
    total_loss_frozen(g, p, ctx, pair, w, None)
}

/// [`total_loss`] with the stop-gradient targets of the contrastive term
/// pinned to fixed values. The analytic gradient of [`total_loss`] is the
/// true derivative of this function with the targets pinned at their current
/// values, which makes it the reference for finite-difference checks.
pub fn total_loss_frozen<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ctx: &LossContext<'_, T>,
    pair: &ViewPair<'_, T>,
    w: LossWeights,
    frozen_targets: Option<(&crate::tensor::Tensor<T>, &crate::tensor::Tensor<T>)>,
) -> Result<LossOutput, LossError> {
    let model = ctx.model;
    let cfg = ctx.cfg;
    let mut report = LossReport {
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        ..LossReport::default()
    };

    let in1 = model.model_input(pair.view1)?;
    let enc1 = model.encode(g, p, &in1, pair.plan1)?;
    let need_view2 = cfg.use_contrastive || cfg.decode_both;
    let view2 = if need_view2 {
        let in2 = model.model_input(pair.view2)?;
        let enc2 = model.encode(g, p, &in2, pair.plan2)?;
        Some((in2, enc2))
    } else {
        None
    };

    let mut decoded = vec![(&in1, &enc1, pair.plan1, pair.view1)];
    if cfg.decode_both {
        let (in2, enc2) = view2.as_ref().expect("encoded above");
        decoded.push((in2, enc2, pair.plan2, pair.view2));
    }
    let mut terms: Vec<Var> = Vec::new();
    let (mut rec_sum, mut per_sum, mut edge_sum) = (Vec::new(), Vec::new(), Vec::new());
    for (input, enc, plan, view) in decoded {
        let rec = model.decode(g, p, enc, plan)?;
        let target = g.constant(input.clone());
        let l_rec = match cfg.rec_target {
            RecTarget::Hidden if !plan.hidden.is_empty() => {
                let a = g.gather_rows(rec, &plan.hidden)?;
                let b = g.gather_rows(target, &plan.hidden)?;
                mse_var(g, a, b)?
            }
            _ => mse_var(g, rec, target)?,
        };
        rec_sum.push(l_rec);
        if cfg.use_perceptual || cfg.use_edge {
            let x_hat = unpatchify_var(g, rec, &model.cfg)?;
            let x = g.constant(normalized_tensor(view));
            if cfg.use_perceptual {
                per_sum.push(perceptual_loss_var(g, ctx.net, cfg.perceptual_axes, x, x_hat)?);
            }
            if cfg.use_edge {
                edge_sum.push(edge_loss_var(g, ctx.sobel, x, x_hat)?);
            }
        }
    }

    let average = |g: &mut Graph<T>, vs: &[Var]| -> Result<Option<Var>, LossError> {
        let Some((&first, rest)) = vs.split_first() else {
            return Ok(None);
        };
        let mut s = first;
        for &v in rest {
            s = g.add(s, v)?;
        }
        Ok(Some(if vs.len() > 1 {
            g.scale(s, T::from_f64c(1.0 / vs.len() as f64))
        } else {
            s
        }))
    };
    let l_rec = average(g, &rec_sum)?.expect("view 1 is always decoded");
    report.l_rec = g.value(l_rec).item().to_f64c();
    terms.push(l_rec);
    if let Some(l_per) = average(g, &per_sum)? {
        report.l_per = g.value(l_per).item().to_f64c();
        terms.push(g.scale(l_per, T::from_f64c(w.lambda1)));
    }
    if let Some(l_edge) = average(g, &edge_sum)? {
        report.l_edge = g.value(l_edge).item().to_f64c();
        terms.push(g.scale(l_edge, T::from_f64c(w.lambda2)));
    }
    let mut features = None;
    if cfg.use_contrastive {
        let (_, enc2) = view2.as_ref().expect("encoded above");
        let f1 = feature(g, cfg.feature, &enc1)?;
        let f2 = feature(g, cfg.feature, enc2)?;
        let targets = frozen_targets.map(|(a, b)| (g.constant(a.clone()), g.constant(b.clone())));
        let l_cl = contrastive_loss_var(g, model, p, f1, f2, cfg.predictor, targets)?;
        features = Some((f1, f2));
        report.l_cl = g.value(l_cl).item().to_f64c();
        terms.push(l_cl);
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    report.total = g.value(total).item().to_f64c();
    Ok(LossOutput {
        loss: total,
        report,
        features,
    })
}

fn feature<T: Real>(
    g: &mut Graph<T>,
    source: FeatureSource,
    enc: &crate::model::EncoderOutput,
) -> Result<Var, LossError> {
    Ok(match source {
        FeatureSource::Cls => enc.cls,
        FeatureSource::Mean => {
            let s = g.sum_axis(enc.tokens, 0)?;
            let [n, e] = [g.shape(enc.tokens)[0], g.shape(enc.tokens)[1]];
            let s = g.reshape(s, &[1, e])?;
            g.scale(s, T::from_f64c(1.0 / n as f64))
        }
    })
}

/// `[C, D, H, W]` tensor of a volume in intensity/255 units.
pub fn normalized_tensor<T: Real>(v: &Volume<T>) -> crate::tensor::Tensor<T> {
    let mut t = sobel::volume_tensor(v);
    let s = T::from_f64c(1.0 / INTENSITY_SCALE);
    t.data_mut().iter_mut().for_each(|x| *x = *x * s);
    t
}

/// Contrastive term for two plain feature vectors with an identity predictor.
pub fn contrastive_loss<T: Real>(f1: &[T], f2: &[T]) -> Result<T, LossError> {
    if f1.len() != f2.len() {
        return Err(LossError::Shape(format!("feature lengths {} and {}", f1.len(), f2.len())));
    }
    let mut g = Graph::new();
    let a = g.constant(crate::tensor::Tensor::new(vec![f1.len()], f1.to_vec())?);
    let b = g.constant(crate::tensor::Tensor::new(vec![f2.len()], f2.to_vec())?);
    let l = symmetric_negative_cosine(&mut g, a, a, b, b, true)?;
    Ok(g.value(l).item())
}
