//! Linear probing of frozen encoder features: feature tables, a linear SVM,
//! ROC metrics and stratified nested cross-validation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ProbeConfig;
use crate::model::{MaskedVit3d, ModelError, ParamStore};
use crate::rng::{rng_for, stream};
use crate::tensor::Real;
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("probe domain error: {0}")]
    Domain(String),
    #[error("records without a label: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("feature table: {0}")]
    Table(String),
    #[error("leakage: fold {0} weights changed when held-out features were perturbed")]
    Leakage(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub id: String,
    pub label: u32,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
    /// CRC32 of the checkpoint the features came from, as 8 hex digits.
    pub checkpoint_hash: Option<String>,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if let Some(r) = self.rows.iter().find(|r| r.features.len() != d) {
            return Err(ProbeError::Table(format!("row {} has {} features, expected {d}", r.id, r.features.len())));
        }
        if let Some(r) = self.rows.iter().find(|r| r.label > 1) {
            return Err(ProbeError::Table(format!("row {} has label {}, expected 0 or 1", r.id, r.label)));
        }
        if let Some(r) = self.rows.iter().find(|r| r.features.iter().any(|x| !x.is_finite())) {
            return Err(ProbeError::Table(format!("row {} has non-finite features", r.id)));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u32> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// `id,label,f0,…` with an optional leading `# checkpoint <hash>` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.checkpoint_hash {
            let _ = writeln!(out, "# checkpoint {h}");
        }
        out.push_str("id,label");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.id, r.label);
            for x in &r.features {
                let _ = write!(out, ",{x:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = FeatureTable::default();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(h) = c.trim().strip_prefix("checkpoint") {
                    table.checkpoint_hash = Some(h.trim().to_string());
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if !header_seen {
                if fields.len() < 2 || fields[0] != "id" || fields[1] != "label" {
                    return Err(ProbeError::Table("header must start with id,label".into()));
                }
                header_seen = true;
                continue;
            }
            let bad = |m: String| ProbeError::Table(format!("line {}: {m}", i + 1));
            let label = fields
                .get(1)
                .ok_or_else(|| bad("missing label".into()))?
                .parse()
                .map_err(|_| bad(format!("bad label `{}`", fields[1])))?;
            let features = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad value `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(FeatureRow {
                id: fields[0].to_string(),
                label,
                features,
            });
        }
        table.validate()?;
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_csv(&text)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ProbeError {
    ProbeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Raw CLS features of every volume, without augmentation or masking.
pub fn build_feature_table<T: Real>(
    model: &MaskedVit3d,
    params: &ParamStore<T>,
    volumes: &[Volume<T>],
    checkpoint_hash: Option<String>,
) -> Result<FeatureTable> {
    let unlabeled: Vec<String> = volumes.iter().filter(|v| v.label.is_none()).map(|v| v.id.clone()).collect();
    if !unlabeled.is_empty() {
        return Err(ProbeError::Unlabeled(unlabeled));
    }
    let rows = volumes
        .iter()
        .map(|v| {
            let f = model.extract_features(params, v)?;
            Ok(FeatureRow {
                id: v.id.clone(),
                label: v.label.expect("checked above"),
                features: f.iter().map(|x| x.to_f64c()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = FeatureTable { rows, checkpoint_hash };
    table.validate()?;
    Ok(table)
}

fn class_counts(labels: &[u32]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    (labels.len() - pos, pos)
}

fn require_both_classes(labels: &[u32]) -> Result<()> {
    let (neg, pos) = class_counts(labels);
    if neg == 0 || pos == 0 {
        return Err(ProbeError::Domain(format!("need both classes, got {neg} negatives and {pos} positives")));
    }
    Ok(())
}

/// Standardized linear decision function `w·((x − mean)/std) + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut s = self.b;
        for j in 0..self.w.len() {
            s += self.w[j] * (x[j] - self.mean[j]) / self.std[j];
        }
        s
    }

    pub fn scores(&self, xs: &[&[f64]]) -> Vec<f64> {
        xs.iter().map(|x| self.score(x)).collect()
    }
}

/// `½‖w‖² + C·Σ max(0, 1 − yᵢ(w·xᵢ + b))` with `yᵢ ∈ {−1, +1}`.
pub fn hinge_objective(xs: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg: f64 = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear SVM on standardized features.
///
/// Full-batch subgradient descent on [`hinge_objective`] divided by `C·n`,
/// which is `λ/2·‖w‖² + mean hinge` with `λ = 1/(C·n)`. Step `t` (from 1)
/// uses `η_t = min(1/(λt), 1/√t)`, so early steps stay bounded when `λ` is
/// small. The iterate with the lowest objective is returned.
pub fn train_linear_svm(xs: &[&[f64]], labels: &[u32], c: f64, iterations: usize) -> Result<LinearModel> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(ProbeError::Domain(format!("C must be positive, got {c}")));
    }
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(ProbeError::Domain("features and labels must be non-empty and equally long".into()));
    }
    require_both_classes(labels)?;
    let n = xs.len();
    let d = xs[0].len();
    if xs.iter().any(|x| x.len() != d) {
        return Err(ProbeError::Domain("ragged feature rows".into()));
    }

    let mut mean = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            std[j] += (x[j] - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| {
        *s = (*s / n as f64).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    });
    let z: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect())
        .collect();
    let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    let lambda = 1.0 / (c * n as f64);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = (f64::INFINITY, w.clone(), b);
    let mut gw = vec![0.0; d];
    for t in 1..=iterations + 1 {
        // One pass gives both the objective at the current iterate and its
        // subgradient.
        gw.iter_mut().zip(&w).for_each(|(g, &wj)| *g = lambda * wj);
        let mut gb = 0.0;
        let mut hinge = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            let margin = yi * (dot(&w, zi) + b);
            if margin < 1.0 {
                hinge += 1.0 - margin;
                for j in 0..d {
                    gw[j] -= yi * zi[j] / n as f64;
                }
                gb -= yi / n as f64;
            }
        }
        let obj = 0.5 * dot(&w, &w) + c * hinge;
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
        if t > iterations {
            break;
        }
        let tf = t as f64;
        let eta = (1.0 / (lambda * tf)).min(1.0 / tf.sqrt());
        for j in 0..d {
            w[j] -= eta * gw[j];
        }
        b -= eta * gb;
    }
    Ok(LinearModel {
        w: best.1,
        b: best.2,
        mean,
        std,
    })
}

/// Mann–Whitney AUC; a tied positive/negative pair counts ½.
pub fn auc(scores: &[f64], labels: &[u32]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ProbeError::Domain("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ProbeError::Domain("NaN score".into()));
    }
    require_both_classes(labels)?;
    let (neg, pos) = class_counts(labels);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives, in integers: a tie group covering
    // 1-based ranks lo..=hi gives each member the rank (lo + hi)/2.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let (lo, hi) = (i as u64 + 1, j as u64 + 1);
        let group_pos = idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += group_pos * (lo + hi);
        i = j + 1;
    }
    let (n0, n1) = (neg as u64, pos as u64);
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n0 * n1) as f64)
}

/// Sensitivity and specificity when `score ≥ threshold` predicts class 1.
pub fn sensitivity_specificity(scores: &[f64], labels: &[u32], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(ProbeError::Domain("scores and labels differ in length".into()));
    }
    require_both_classes(labels)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l == 1, s >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok((tp as f64 / (tp + fn_) as f64, tn as f64 / (tn + fp) as f64))
}

/// Threshold maximizing `sensitivity + specificity − 1`. Candidates are the
/// midpoints between consecutive distinct scores plus one value below and one
/// above all scores; ties go to the smallest candidate.
pub fn youden_threshold(scores: &[f64], labels: &[u32]) -> Result<f64> {
    require_both_classes(labels)?;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let (lo, hi) = (distinct[0], distinct[distinct.len() - 1]);
    let mut cands = vec![lo - 1.0];
    cands.extend(distinct.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    cands.push(hi + 1.0);
    let mut best = (f64::NEG_INFINITY, cands[0]);
    for &t in &cands {
        let (se, sp) = sensitivity_specificity(scores, labels, t)?;
        if se + sp - 1.0 > best.0 {
            best = (se + sp - 1.0, t);
        }
    }
    Ok(best.1)
}

/// Outer folds and per-fold inner tuning splits.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub inner_fraction: f64,
    pub seed: u64,
    /// Outer fold of every sample.
    pub fold_of: Vec<usize>,
    /// Per fold: indices of the inner validation split, all from that fold's
    /// training portion.
    pub inner_val: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Stratified assignment: each class is shuffled and dealt round-robin
    /// into the folds, the deal continuing across classes so fold sizes
    /// differ by at most one.
    pub fn new(labels: &[u32], k: usize, inner_fraction: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(ProbeError::Domain(format!("need at least 2 folds, got {k}")));
        }
        if !(inner_fraction > 0.0 && inner_fraction < 1.0) {
            return Err(ProbeError::Domain(format!("inner fraction {inner_fraction} outside (0, 1)")));
        }
        let (neg, pos) = class_counts(labels);
        if neg.min(pos) < k {
            return Err(ProbeError::Domain(format!(
                "class too small for {k}-fold stratification: {neg} negatives, {pos} positives"
            )));
        }
        let mut fold_of = vec![0; labels.len()];
        let mut deal = 0;
        for class in [0u32, 1] {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(&mut rng_for(seed, &[stream::FOLDS, class as u64]));
            for i in members {
                fold_of[i] = deal % k;
                deal += 1;
            }
        }
        let mut inner_val = Vec::with_capacity(k);
        for f in 0..k {
            let mut val = Vec::new();
            for class in [0u32, 1] {
                let mut members: Vec<usize> = (0..labels.len())
                    .filter(|&i| fold_of[i] != f && labels[i] == class)
                    .collect();
                members.shuffle(&mut rng_for(seed, &[stream::FOLDS, 100 + f as u64, class as u64]));
                let take = ((inner_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
                val.extend_from_slice(&members[..take]);
            }
            val.sort_unstable();
            inner_val.push(val);
        }
        Ok(Self {
            k,
            inner_fraction,
            seed,
            fold_of,
            inner_val,
        })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn inner_train_indices(&self, fold: usize) -> Vec<usize> {
        self.train_indices(fold)
            .into_iter()
            .filter(|i| self.inner_val[fold].binary_search(i).is_err())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub c: f64,
    pub inner_auc: f64,
    pub threshold: f64,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub folds: Vec<FoldResult>,
    pub mean_auc: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    pub checkpoint_hash: Option<String>,
    /// Every fold was refit with perturbed held-out features and gave
    /// identical weights.
    pub leakage_checked: bool,
}

/// The fitted pieces of one outer fold; only training-portion rows are
/// passed in.
struct FoldFit {
    model: LinearModel,
    c: f64,
    inner_auc: f64,
    threshold: f64,
}

fn fit_fold(
    rows: &[&FeatureRow],
    inner_train: &[usize],
    inner_val: &[usize],
    c_grid: &[f64],
    iterations: usize,
) -> Result<FoldFit> {
    let pick = |ix: &[usize]| -> (Vec<&[f64]>, Vec<u32>) {
        (
            ix.iter().map(|&i| rows[i].features.as_slice()).collect(),
            ix.iter().map(|&i| rows[i].label).collect(),
        )
    };
    let (xt, yt) = pick(inner_train);
    let (xv, yv) = pick(inner_val);
    let mut best: Option<(f64, f64)> = None;
    for &c in c_grid {
        let m = train_linear_svm(&xt, &yt, c, iterations)?;
        let a = auc(&m.scores(&xv), &yv)?;
        // Grid order is irrelevant: ties go to the smaller C.
        best = match best {
            Some((bc, ba)) if ba > a || (ba == a && bc <= c) => Some((bc, ba)),
            _ => Some((c, a)),
        };
    }
    let (c, inner_auc) = best.ok_or_else(|| ProbeError::Domain("empty C grid".into()))?;
    let all: Vec<usize> = (0..rows.len()).collect();
    let (xa, ya) = pick(&all);
    let model = train_linear_svm(&xa, &ya, c, iterations)?;
    let threshold = youden_threshold(&model.scores(&xv), &yv)?;
    Ok(FoldFit {
        model,
        c,
        inner_auc,
        threshold,
    })
}

/// Fits fold `fold` from its training portion alone.
fn fit_outer_fold(table: &FeatureTable, plan: &FoldPlan, fold: usize, cfg: &ProbeConfig) -> Result<FoldFit> {
    let train = plan.train_indices(fold);
    let rows: Vec<&FeatureRow> = train.iter().map(|&i| &table.rows[i]).collect();
    let local = |ix: &[usize]| -> Vec<usize> {
        ix.iter()
            .map(|i| train.binary_search(i).expect("inner indices lie in the training portion"))
            .collect()
    };
    let inner_train = local(&plan.inner_train_indices(fold));
    let inner_val = local(&plan.inner_val[fold]);
    fit_fold(&rows, &inner_train, &inner_val, &cfg.c_grid, cfg.svm_iterations)
}

/// Stratified nested cross-validation with the leakage assertion: every
/// fold is refit after replacing its held-out features with noise and must
/// give bit-identical weights.
pub fn nested_cv(table: &FeatureTable, plan: &FoldPlan, cfg: &ProbeConfig) -> Result<ProbeResult> {
    table.validate()?;
    if plan.fold_of.len() != table.rows.len() {
        return Err(ProbeError::Domain("fold plan does not match the table".into()));
    }
    let (neg, pos) = class_counts(&table.labels());
    if neg.min(pos) < 5 {
        return Err(ProbeError::Domain(format!("need at least 5 samples per class, got {neg} and {pos}")));
    }
    let mut folds = Vec::with_capacity(plan.k);
    for f in 0..plan.k {
        let fit = fit_outer_fold(table, plan, f, cfg)?;

        let test = plan.test_indices(f);
        let mut perturbed = table.clone();
        for (n, &i) in test.iter().enumerate() {
            for (j, x) in perturbed.rows[i].features.iter_mut().enumerate() {
                *x = *x * -3.0 + 1e3 * ((n * 31 + j * 17) % 7) as f64;
            }
        }
        let refit = fit_outer_fold(&perturbed, plan, f, cfg)?;
        if refit.model != fit.model || refit.c != fit.c || refit.threshold.to_bits() != fit.threshold.to_bits() {
            return Err(ProbeError::Leakage(f));
        }

        let xs: Vec<&[f64]> = test.iter().map(|&i| table.rows[i].features.as_slice()).collect();
        let ys: Vec<u32> = test.iter().map(|&i| table.rows[i].label).collect();
        let scores = fit.model.scores(&xs);
        let (sensitivity, specificity) = sensitivity_specificity(&scores, &ys, fit.threshold)?;
        folds.push(FoldResult {
            fold: f,
            c: fit.c,
            inner_auc: fit.inner_auc,
            threshold: fit.threshold,
            auc: auc(&scores, &ys)?,
            sensitivity,
            specificity,
            n_train: table.rows.len() - test.len(),
            n_test: test.len(),
        });
    }
    let mean = |f: fn(&FoldResult) -> f64| folds.iter().map(f).sum::<f64>() / folds.len() as f64;
    Ok(ProbeResult {
        mean_auc: mean(|r| r.auc),
        mean_sensitivity: mean(|r| r.sensitivity),
        mean_specificity: mean(|r| r.specificity),
        folds,
        checkpoint_hash: table.checkpoint_hash.clone(),
        leakage_checked: true,
    })
}

/// Single predefined split scored by accuracy, the 2D linear-probing mode.
pub fn split_accuracy(train: &FeatureTable, test: &FeatureTable, c: f64, iterations: usize) -> Result<f64> {
    let xs: Vec<&[f64]> = train.rows.iter().map(|r| r.features.as_slice()).collect();
    let m = train_linear_svm(&xs, &train.labels(), c, iterations)?;
    if test.rows.is_empty() {
        return Err(ProbeError::Domain("empty test split".into()));
    }
    let correct = test
        .rows
        .iter()
        .filter(|r| (m.score(&r.features) >= 0.0) == (r.label == 1))
        .count();
    Ok(correct as f64 / test.rows.len() as f64)
}
