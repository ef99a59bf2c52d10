//! AdamW with decoupled weight decay, plus the epoch schedules for the
//! learning rate and the decayed loss weight.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("optimizer shape mismatch: {0}")]
    Shape(String),
    #[error("schedule: {0}")]
    Domain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates for every parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with bias-corrected moments:
    /// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), OptimError> {
        if !(lr >= 0.0) {
            return Err(OptimError::Domain(format!("learning rate must be non-negative, got {lr}")));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(OptimError::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.tensors.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(OptimError::Shape(format!(
                    "{}: parameter {:?}, gradient {:?}, moments {:?}",
                    params.names[i],
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let f = T::from_f64c;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let (one, eps, lr_t, decay) = (T::one(), f(c.eps), f(lr), f(lr * c.weight_decay));
        let bc1 = f(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = f(1.0 - c.beta2.powi(self.t as i32));
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *p;
            }
        }
        Ok(())
    }
}

/// Which loss weight follows the linear decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayTarget {
    Lambda1,
    Lambda2,
    /// Both weights stay at their initial values.
    None,
}

/// Whether schedules advance once per epoch or continuously per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub lambda1_init: f64,
    pub lambda1_final: f64,
    pub decay_target: DecayTarget,
    pub granularity: Granularity,
}

impl TrainSchedule {
    /// 1000 epochs with 40 warmup epochs.
    pub fn paper() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_epochs: 40,
            total_epochs: 1000,
            lambda1_init: 0.01,
            lambda1_final: 0.0,
            decay_target: DecayTarget::Lambda1,
            granularity: Granularity::Epoch,
        }
    }

    /// 100 epochs with 2 warmup epochs.
    pub fn desk() -> Self {
        Self {
            warmup_epochs: 2,
            total_epochs: 100,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(OptimError::Domain(format!(
                "warmup {} must be below total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0) || !(self.lambda1_init >= 0.0) || !(self.lambda1_final >= 0.0) {
            return Err(OptimError::Domain("learning rate and lambda values must be non-negative".into()));
        }
        Ok(())
    }

    /// Schedule position for `step` of `steps_per_epoch` inside `epoch`.
    pub fn position(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        match self.granularity {
            Granularity::Epoch => epoch as f64,
            Granularity::Step => epoch as f64 + step as f64 / steps_per_epoch.max(1) as f64,
        }
    }

    fn check_epoch(&self, epoch: f64) -> Result<(), OptimError> {
        if !(0.0..=self.total_epochs as f64).contains(&epoch) {
            return Err(OptimError::Domain(format!(
                "epoch {epoch} outside [0, {}]",
                self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup `base·min((e+1)/warmup, 1)` for `e < warmup`, then cosine
/// decay from `base` at `warmup` to 0 at `total`. The warmup ramp reaches
/// `base` at `e = warmup − 1` and holds it until the cosine starts, so the
/// curve is continuous for fractional (per-step) positions too.
pub fn lr_at(epoch: f64, s: &TrainSchedule) -> Result<f64, OptimError> {
    s.check_epoch(epoch)?;
    let warmup = s.warmup_epochs as f64;
    if epoch < warmup {
        return Ok(s.base_lr * ((epoch + 1.0) / warmup).min(1.0));
    }
    let span = (s.total_epochs - s.warmup_epochs) as f64;
    let progress = (epoch - warmup) / span;
    Ok(s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `lambda1_init·(1 − epoch/total)`, floored at `lambda1_final`.
pub fn lambda1_at(epoch: f64, s: &TrainSchedule) -> Result<f64, OptimError> {
    s.check_epoch(epoch)?;
    let v = s.lambda1_init * (1.0 - epoch / s.total_epochs as f64);
    Ok(v.max(s.lambda1_final))
}

/// Loss weights at a schedule position. `lambda2` is the configured fixed
/// edge weight; under [`DecayTarget::Lambda2`] it decays by the same factor
/// instead of λ₁.
pub fn loss_weights(epoch: f64, s: &TrainSchedule, lambda2: f64) -> Result<LossWeights, OptimError> {
    let decayed = lambda1_at(epoch, s)?;
    Ok(match s.decay_target {
        DecayTarget::Lambda1 => LossWeights {
            lambda1: decayed,
            lambda2,
        },
        DecayTarget::Lambda2 => {
            let factor = if s.lambda1_init > 0.0 { decayed / s.lambda1_init } else { 0.0 };
            LossWeights {
                lambda1: s.lambda1_init,
                lambda2: lambda2 * factor,
            }
        }
        DecayTarget::None => LossWeights {
            lambda1: s.lambda1_init,
            lambda2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        ParamStore {
            names: vec!["p".into()],
            tensors: vec![Tensor::from_f64(&[values.len()], values).unwrap()],
        }
    }

    #[test]
    fn first_step_example() {
        let mut p = store(&[1.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        st.step(&mut p, &[Tensor::from_f64(&[1], &[1.0]).unwrap()], 1e-3).unwrap();
        let want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.05;
        assert!((p.tensors[0].data()[0] - want).abs() < 1e-15);
        assert!((p.tensors[0].data()[0] - 0.998950).abs() < 5e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = store(&[0.3, -2.0, 7.5]);
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &p);
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::zeros(&[3])], 1e-2).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn memoryless_adam_is_rms_normalized_sgd() {
        let cfg = AdamWConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = store(&[1.0, 1.0, 1.0]);
        let mut st = AdamWState::new(cfg, &p);
        let g = [0.5, -3.0, 1e-3];
        st.step(&mut p, &[Tensor::from_f64(&[3], &g).unwrap()], 0.1).unwrap();
        for (x, gi) in p.tensors[0].data().iter().zip(g) {
            let want = 1.0 - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), &p);
        assert!(st.step(&mut p, &[Tensor::zeros(&[3])], 1e-3).is_err());
        assert!(st.step(&mut p, &[], 1e-3).is_err());
        assert_eq!(st.t, 0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p = store(&[0.1, -0.2, 0.3]);
            let mut st = AdamWState::new(AdamWConfig::default(), &p);
            for i in 0..20 {
                let g: Vec<f64> = p.tensors[0].data().iter().map(|x| x * x - 0.01 * i as f64).collect();
                st.step(&mut p, &[Tensor::from_f64(&[3], &g).unwrap()], 1e-2).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_examples() {
        let s = TrainSchedule::paper();
        assert_eq!(lr_at(40.0, &s).unwrap(), 1e-3);
        assert!((lr_at(39.0, &s).unwrap() - 1e-3).abs() < 1e-18);
        assert!(lr_at(1000.0, &s).unwrap().abs() < 1e-15);
        assert!((lr_at(0.0, &s).unwrap() - 2.5e-5).abs() < 1e-18);
        assert_eq!(lambda1_at(0.0, &s).unwrap(), 0.01);
        assert_eq!(lambda1_at(1000.0, &s).unwrap(), 0.0);
        assert!((lambda1_at(500.0, &s).unwrap() - 0.005).abs() < 1e-18);
        assert!(lr_at(1000.5, &s).is_err());
        assert!(lambda1_at(-1.0, &s).is_err());
        let w = loss_weights(0.0, &s, 10.0).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (0.01, 10.0));
    }

    #[test]
    fn decay_targets() {
        let mut s = TrainSchedule::paper();
        s.decay_target = DecayTarget::Lambda2;
        let w = loss_weights(500.0, &s, 10.0).unwrap();
        assert_eq!(w.lambda1, 0.01);
        assert!((w.lambda2 - 5.0).abs() < 1e-12);
        s.decay_target = DecayTarget::None;
        let w = loss_weights(900.0, &s, 10.0).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (0.01, 10.0));
    }

    #[test]
    fn step_granularity_position() {
        let mut s = TrainSchedule::desk();
        assert_eq!(s.position(3, 1, 4), 3.0);
        s.granularity = Granularity::Step;
        assert_eq!(s.position(3, 1, 4), 3.25);
    }

    proptest! {
        #[test]
        fn lr_bounded_and_lambda_monotone(warmup in 0usize..50, extra in 1usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = TrainSchedule { warmup_epochs: warmup, total_epochs: warmup + extra, ..TrainSchedule::paper() };
            let total = s.total_epochs as f64;
            let (lo, hi) = if a < b { (a * total, b * total) } else { (b * total, a * total) };
            for e in [lo, hi] {
                let lr = lr_at(e, &s).unwrap();
                prop_assert!((0.0..=s.base_lr * (1.0 + 1e-12)).contains(&lr));
            }
            prop_assert!(lambda1_at(hi, &s).unwrap() <= lambda1_at(lo, &s).unwrap());
            if warmup > 0 {
                let w = warmup as f64;
                prop_assert_eq!(lr_at(w, &s).unwrap(), s.base_lr);
                prop_assert!((lr_at(w - 1e-9, &s).unwrap() - s.base_lr).abs() < 1e-15);
            }
        }
    }
}
