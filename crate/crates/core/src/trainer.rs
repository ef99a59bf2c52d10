//! Self-supervised training loop, training log and masked reconstruction.
//!
//! Randomness is split per use: the epoch order comes from
//! `(seed, SHUFFLE, epoch)`, the augmentation of view `v ∈ {1, 2}` of dataset
//! item `i` in epoch `e` from `(seed, VIEW, e, i, v)` and its mask plan from
//! `(seed, MASK, e, i, v)`. A run resumed at epoch `e` therefore draws exactly
//! what the uninterrupted run would have drawn.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::augment::{random_view, AugmentError};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CheckpointMeta};
use crate::config::{ConfigError, RunConfig};
use crate::losses::{total_loss, LossContext, LossError, LossReport, PerceptualNet, SobelBank, ViewPair};
use crate::model::{make_mask_plan, patchify, unpatchify, MaskPlan, MaskedVit3d, ModelError, ParamStore, INTENSITY_SCALE};
use crate::optim::{loss_weights, lr_at, AdamWState, OptimError};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{Graph, Real, Tensor};
use crate::volume::{Volume, VolumeDataset, VolumeError};

pub const TRAINLOG_HEADER: &str = "epoch,step,lr,lambda1,l_rec,l_per,l_edge,l_cl,total,wall_ms";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at epoch {epoch}, step {step}: non-finite {what}")]
    Divergence {
        epoch: usize,
        step: u64,
        what: String,
        /// The last (up to) 10 log rows, the failing step included.
        rows: Vec<LogRow>,
    },
    #[error("bad training log: {0}")]
    Log(String),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One optimizer step. `step` counts optimizer steps from the start of the
/// run; the loss columns are means over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub lambda1: f64,
    pub l_rec: f64,
    pub l_per: f64,
    pub l_edge: f64,
    pub l_cl: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl LogRow {
    /// Everything except the wall-clock column.
    pub fn same_values(&self, other: &LogRow) -> bool {
        let bits = |r: &LogRow| {
            [r.lr, r.lambda1, r.l_rec, r.l_per, r.l_edge, r.l_cl, r.total].map(f64::to_bits)
        };
        self.epoch == other.epoch && self.step == other.step && bits(self) == bits(other)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAINLOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:.3}",
                r.epoch, r.step, r.lr, r.lambda1, r.l_rec, r.l_per, r.l_edge, r.l_cl, r.total, r.wall_ms
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAINLOG_HEADER) {
            return Err(TrainError::Log("missing or unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| TrainError::Log(format!("row {}: {what}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad("expected 10 fields"));
            }
            let num = |j: usize| f[j].trim().parse::<f64>().map_err(|_| bad(f[j]));
            rows.push(LogRow {
                epoch: f[0].trim().parse().map_err(|_| bad(f[0]))?,
                step: f[1].trim().parse().map_err(|_| bad(f[1]))?,
                lr: num(2)?,
                lambda1: num(3)?,
                l_rec: num(4)?,
                l_per: num(5)?,
                l_edge: num(6)?,
                l_cl: num(7)?,
                total: num(8)?,
                wall_ms: num(9)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_csv(&text)
    }

    /// Same rows, ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
    }

    fn tail(&self, n: usize) -> Vec<LogRow> {
        self.rows[self.rows.len().saturating_sub(n)..].to_vec()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<T> {
    /// Receives `checkpoints/` and `trainlog.csv` when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint<T>>,
    /// Stop before this epoch (the schedule still spans all epochs).
    pub stop_before: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub checkpoint: Checkpoint<T>,
    /// Rows produced by this invocation.
    pub log: TrainLog,
}

/// Fixed pieces of a run built from its configuration.
pub struct Setup<T> {
    pub cfg: RunConfig,
    pub model: MaskedVit3d,
    pub net: PerceptualNet<T>,
    pub sobel: SobelBank,
}

impl<T: Real> Setup<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = MaskedVit3d::new(cfg.model.clone())?;
        let widths = if cfg.loss.use_perceptual { cfg.loss.perceptual_widths.clone() } else { vec![1] };
        let net = PerceptualNet::new(cfg.model.channels, &widths, cfg.loss.perceptual_seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            net,
            sobel: SobelBank::with_scale(cfg.loss.sobel_scale),
        })
    }

    fn context(&self) -> LossContext<'_, T> {
        LossContext {
            model: &self.model,
            net: &self.net,
            sobel: &self.sobel,
            cfg: &self.cfg.loss,
        }
    }

    /// Loss and gradients of one sample.
    pub fn sample_gradients(
        &self,
        params: &ParamStore<T>,
        pair: &ViewPair<'_, T>,
        weights: crate::losses::LossWeights,
    ) -> Result<(LossReport, Vec<Tensor<T>>), TrainError> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = total_loss(&mut g, &bound, &self.context(), pair, weights)?;
        g.backward(out.loss).map_err(|e| TrainError::Model(e.into()))?;
        Ok((out.report, bound.grads(&g)))
    }

    pub fn checkpoint(&self, params: ParamStore<T>, opt: AdamWState<T>, next_epoch: usize) -> Checkpoint<T> {
        Checkpoint {
            meta: CheckpointMeta {
                config: serde_json::to_value(&self.cfg).expect("config serializes"),
                next_epoch,
                step: opt.t,
                adamw: Some(opt.cfg.clone()),
            },
            params,
            optimizer: Some(opt),
        }
    }
}

/// Epoch visiting order of the dataset.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[stream::SHUFFLE, epoch as u64]));
    order
}

/// The two augmented views and mask plans of dataset item `item` in `epoch`.
pub fn sample_views<T: Real>(
    cfg: &RunConfig,
    v: &Volume<T>,
    epoch: usize,
    item: usize,
) -> Result<[(Volume<T>, MaskPlan); 2], TrainError> {
    let seed = cfg.train.seed;
    let k = cfg.model.num_patches();
    let make = |which: u64| -> Result<(Volume<T>, MaskPlan), TrainError> {
        let path = [epoch as u64, item as u64, which];
        let mut rng = rng_for(seed, &[stream::VIEW, path[0], path[1], path[2]]);
        let view = random_view(v, &cfg.augment, &mut rng)?;
        let plan = make_mask_plan(k, cfg.model.mask_ratio, derive_seed(seed, &[stream::MASK, path[0], path[1], path[2]]))?;
        Ok((view, plan))
    };
    Ok([make(1)?, make(2)?])
}

fn check_finite<T: Real>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(Tensor::all_finite)
}

/// Trains on in-memory volumes.
pub fn train<T: Real>(cfg: &RunConfig, volumes: &[Volume<T>], opts: TrainOptions<T>) -> Result<TrainOutcome<T>, TrainError> {
    let setup = Setup::<T>::new(cfg)?;
    if volumes.is_empty() {
        return Err(TrainError::Data(VolumeError::Domain("training set is empty".into())));
    }
    let ckpt_dir = match &opts.out_dir {
        Some(dir) => {
            let d = dir.join("checkpoints");
            std::fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
            Some(d)
        }
        None => None,
    };

    let (mut params, mut opt, start) = match opts.resume {
        Some(ck) => {
            ck.params.check_layout(&setup.model.layout)?;
            let opt = ck.optimizer.ok_or_else(|| CheckpointError::Meta("checkpoint has no optimizer state".into()))?;
            (ck.params, opt, ck.meta.next_epoch)
        }
        None => {
            let params = setup.model.init_params::<T>(cfg.train.seed);
            let opt = AdamWState::new(cfg.optim.clone(), &params);
            (params, opt, 0)
        }
    };
    let total_epochs = cfg.schedule.total_epochs;
    let end = opts.stop_before.unwrap_or(total_epochs).min(total_epochs);

    let batch = cfg.train.batch_size;
    let n = volumes.len();
    let steps_per_epoch = n.div_ceil(batch);
    let mut log = TrainLog::default();

    for epoch in start..end {
        let order = epoch_order(cfg.train.seed, epoch, n);
        for (bi, chunk) in order.chunks(batch).enumerate() {
            let clock = Instant::now();
            let pos = cfg.schedule.position(epoch, bi, steps_per_epoch);
            let lr = lr_at(pos, &cfg.schedule)?;
            let w = loss_weights(pos, &cfg.schedule, cfg.loss.lambda2)?;
            let mut reports = Vec::with_capacity(chunk.len());
            let mut acc: Vec<Tensor<T>> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for &item in chunk {
                let [(v1, p1), (v2, p2)] = sample_views(cfg, &volumes[item], epoch, item)?;
                let pair = ViewPair {
                    view1: &v1,
                    view2: &v2,
                    plan1: &p1,
                    plan2: &p2,
                };
                let (report, grads) = setup.sample_gradients(&params, &pair, w)?;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(a, &g)| *a = *a + g);
                }
                reports.push(report);
            }
            let inv = T::from_f64c(1.0 / chunk.len() as f64);
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|x| *x = *x * inv);
            }
            let mean = LossReport::mean(&reports);
            let row = LogRow {
                epoch,
                step: opt.t,
                lr,
                lambda1: w.lambda1,
                l_rec: mean.l_rec,
                l_per: mean.l_per,
                l_edge: mean.l_edge,
                l_cl: mean.l_cl,
                total: mean.total,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            };
            let loss_ok = row.total.is_finite();
            let grads_ok = loss_ok && check_finite(&acc);
            log.rows.push(row);
            if !grads_ok {
                let step = opt.t;
                if let Some(dir) = &opts.out_dir {
                    log.write(&dir.join("trainlog.csv"))?;
                }
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    what: if loss_ok { "gradient" } else { "loss" }.into(),
                    rows: log.tail(10),
                });
            }
            opt.step(&mut params, &acc, lr)?;
        }
        let every = cfg.train.checkpoint_every;
        if let Some(dir) = &ckpt_dir {
            if every > 0 && (epoch + 1) % every == 0 && epoch + 1 != end {
                let ck = setup.checkpoint(params.clone(), opt.clone(), epoch + 1);
                write_checkpoint(&dir.join(format!("epoch_{:04}.vckpt", epoch + 1)), &ck)?;
            }
        }
    }

    let checkpoint = setup.checkpoint(params, opt, end.max(start));
    if let (Some(dir), Some(ck_dir)) = (&opts.out_dir, &ckpt_dir) {
        write_checkpoint(&ck_dir.join(format!("epoch_{:04}.vckpt", checkpoint.meta.next_epoch)), &checkpoint)?;
        write_checkpoint(&ck_dir.join("final.vckpt"), &checkpoint)?;
        log.write(&dir.join("trainlog.csv"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

/// Loads every volume of the dataset at `cfg.train.dataset` and trains.
pub fn train_dataset<T: Real>(cfg: &RunConfig, opts: TrainOptions<T>) -> Result<TrainOutcome<T>, TrainError> {
    let ds = VolumeDataset::open(Path::new(&cfg.train.dataset))?;
    let volumes = ds.load_all::<T>()?;
    train(cfg, &volumes, opts)
}

/// Checkpoint together with the run configuration stored in it.
pub fn load_run<T: Real>(path: &Path) -> Result<(RunConfig, Checkpoint<T>), TrainError> {
    let (ck, _) = read_checkpoint::<T>(path)?;
    let cfg: RunConfig = serde_json::from_value(ck.meta.config.clone())
        .map_err(|e| CheckpointError::Meta(format!("stored config: {e}")))?;
    let model = MaskedVit3d::new(cfg.model.clone())?;
    ck.params.check_layout(&model.layout)?;
    Ok((cfg, ck))
}

/// Output of [`reconstruct`], both in the 0–255 intensity scale.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub plan: MaskPlan,
    /// The input with hidden patches set to zero.
    pub masked: Volume<T>,
    pub reconstruction: Volume<T>,
}

/// Hides a fraction `p` of the patches of `v` with a plan drawn from
/// `(seed, RECONSTRUCT)` and decodes the full volume.
pub fn reconstruct<T: Real>(
    model: &MaskedVit3d,
    params: &ParamStore<T>,
    v: &Volume<T>,
    p: f64,
    seed: u64,
) -> Result<Reconstruction<T>, TrainError> {
    params.check_layout(&model.layout)?;
    let cfg = &model.cfg;
    let plan = make_mask_plan(cfg.num_patches(), p, derive_seed(seed, &[stream::RECONSTRUCT]))?;
    let input = model.model_input(v)?;

    let mut tokens = patchify(v, cfg.patch_side)?;
    let pv = cfg.patch_voxels();
    for &h in &plan.hidden {
        tokens.data_mut()[h * pv..(h + 1) * pv].iter_mut().for_each(|x| *x = T::zero());
    }
    let masked = unpatchify(&tokens, cfg)?.with_id(v.id.clone());

    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let enc = model.encode(&mut g, &bound, &input, &plan)?;
    let rec = model.decode(&mut g, &bound, &enc, &plan)?;
    let mut out = g.value(rec).clone();
    let s = T::from_f64c(INTENSITY_SCALE);
    out.data_mut().iter_mut().for_each(|x| *x = *x * s);
    let reconstruction = unpatchify(&out, cfg)?.with_id(v.id.clone());
    Ok(Reconstruction {
        plan,
        masked,
        reconstruction,
    })
}

#[cfg(test)]
mod tests;
