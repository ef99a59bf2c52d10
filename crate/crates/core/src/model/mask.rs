use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Partition of patch indices into the encoder-visible set and the hidden set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub total: usize,
    pub visible: Vec<usize>,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

/// `round(p·k)` with halves rounded up.
pub fn hidden_count(k: usize, p: f64) -> usize {
    (p * k as f64 + 0.5).floor() as usize
}

impl MaskPlan {
    pub fn all_visible(k: usize) -> Self {
        Self {
            total: k,
            visible: (0..k).collect(),
            hidden: Vec::new(),
            seed: 0,
        }
    }

    pub fn from_hidden(k: usize, hidden: &[usize]) -> Result<Self, ModelError> {
        let mut is_hidden = vec![false; k];
        for &i in hidden {
            if i >= k || std::mem::replace(&mut is_hidden[i], true) {
                return Err(ModelError::Plan(format!("hidden index {i} out of range or repeated (k = {k})")));
            }
        }
        let visible = (0..k).filter(|&i| !is_hidden[i]).collect();
        let hidden = (0..k).filter(|&i| is_hidden[i]).collect();
        Ok(Self {
            total: k,
            visible,
            hidden,
            seed: 0,
        })
    }

    pub fn check(&self, k: usize) -> Result<(), ModelError> {
        if self.total != k || self.visible.len() + self.hidden.len() != k {
            return Err(ModelError::Plan(format!(
                "plan covers {} patches ({} visible, {} hidden) but the model has {k}",
                self.total,
                self.visible.len(),
                self.hidden.len()
            )));
        }
        if self.visible.is_empty() {
            return Err(ModelError::Plan("plan hides every patch".into()));
        }
        Ok(())
    }
}

/// Uniformly random subset of `round(p·k)` hidden patches drawn from a
/// seeded permutation. Both index lists come back sorted.
pub fn make_mask_plan(k: usize, p: f64, seed: u64) -> Result<MaskPlan, ModelError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ModelError::Plan(format!("mask ratio {p} must lie in (0, 1)")));
    }
    if k < 2 {
        return Err(ModelError::Plan(format!("need at least 2 patches, got {k}")));
    }
    let hidden_n = hidden_count(k, p).min(k - 1);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut visible = perm[..k - hidden_n].to_vec();
    let mut hidden = perm[k - hidden_n..].to_vec();
    visible.sort_unstable();
    hidden.sort_unstable();
    Ok(MaskPlan {
        total: k,
        visible,
        hidden,
        seed,
    })
}
