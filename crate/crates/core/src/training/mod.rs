//! Losses, the pretrain → joint schedule, and the point-wise baseline.

mod loss;
mod model;
mod pointwise;
mod trainer;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{combined_loss, contrastive_node, loss_bce, loss_contrastive, loss_contrastive_signed, Contrastive};
pub use model::{ModelConfig, PierModel};
pub use pointwise::{train_pointwise_baseline, PointRow, PointwiseConfig, PointwiseModel};
pub use trainer::{joint_objective, joint_train, pretrain_ocpm, sample_unselected, LossCurve, Phase, StepRecord, Trainer};

use crate::error::{PierError, Result};
use crate::permgen::{BehaviorSequence, CandidateSet, Permutation};

/// One logged request as the trainer sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub request_id: u64,
    pub candidate_set: CandidateSet,
    pub displayed: Permutation,
    pub clicks: Vec<u8>,
    pub behaviors: BehaviorSequence,
}

impl TrainingExample {
    pub fn new(request_id: u64, candidate_set: CandidateSet, displayed: Permutation, clicks: Vec<u8>, behaviors: BehaviorSequence) -> Result<Self> {
        displayed.validate(candidate_set.len(), displayed.len())?;
        if clicks.len() != displayed.len() {
            return Err(PierError::dim("clicks", &[clicks.len()], &[displayed.len()]));
        }
        if clicks.iter().any(|&c| c > 1) {
            return Err(PierError::Contract(format!("request {request_id}: click labels must be 0 or 1")));
        }
        Ok(Self {
            request_id,
            candidate_set,
            displayed,
            clicks,
            behaviors,
        })
    }

    pub fn labels(&self) -> Vec<f64> {
        self.clicks.iter().map(|&c| c as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub seed: u64,
    pub contrastive: Contrastive,
    /// Cap on examples visited per joint epoch; joint steps evaluate `2K+1`
    /// permutations per example, so full passes are expensive.
    pub joint_examples_per_epoch: Option<usize>,
    /// Examples per gradient chunk; chunk sums are combined in a fixed order.
    pub chunk_size: usize,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k: 100,
            learning_rate: 1e-3,
            batch_size: 1024,
            pretrain_epochs: 3,
            joint_epochs: 2,
            seed: 0,
            contrastive: Contrastive::Squared,
            joint_examples_per_epoch: None,
            chunk_size: 16,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(PierError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PierError::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.k == 0 {
            return Err(PierError::Config("batch_size, chunk_size and k must be positive".into()));
        }
        Ok(())
    }
}

/// Seed derived from a base seed and a stream of integers.
pub(crate) fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(z << 6).wrapping_add(z >> 2);
        z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z ^= z >> 31;
    }
    z
}

/// Visit order of `n` examples in epoch `epoch`.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[epoch as u64, 0xE90C]));
    order.shuffle(&mut rng);
    order
}
