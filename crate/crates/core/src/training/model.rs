use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{PierError, Result};
use crate::fpsm::{Fpsm, FpsmConfig};
use crate::numerics::{ParamId, ParamStore};
use crate::ocpm::{ListwisePrediction, Ocpm, OcpmConfig, PermInput};
use crate::permgen::{BehaviorSequence, CandidateSet, Permutation};

/// Everything needed to rebuild a [`PierModel`]'s structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_sizes: Vec<usize>,
    pub ocpm: OcpmConfig,
    pub fpsm: FpsmConfig,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_sizes: Vec<usize>, dim: usize, n_items: usize) -> Self {
        let ocpm = OcpmConfig::new(dim, vocab_sizes.len(), n_items);
        Self {
            vocab_sizes,
            ocpm,
            fpsm: FpsmConfig::default(),
            init_seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.ocpm.dim
    }

    pub fn n_fields(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn n_items(&self) -> usize {
        self.ocpm.n_items
    }

    pub fn validate(&self) -> Result<()> {
        if self.ocpm.n_fields != self.vocab_sizes.len() {
            return Err(PierError::Config(format!(
                "evaluator expects {} fields, vocabulary lists {}",
                self.ocpm.n_fields,
                self.vocab_sizes.len()
            )));
        }
        Ok(())
    }
}

/// Shared embeddings, evaluator weights and the frozen selector.
#[derive(Clone, Debug)]
pub struct PierModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub table: EmbeddingTable,
    pub ocpm: Ocpm,
    pub fpsm: Fpsm,
}

impl PierModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "emb", &config.vocab_sizes, config.dim(), &mut rng)?;
        let ocpm = Ocpm::new(config.ocpm.clone(), &mut store, &mut rng)?;
        let fpsm = Fpsm::new(config.fpsm, config.dim(), config.n_items())?;
        Ok(Self {
            config,
            store,
            table,
            ocpm,
            fpsm,
        })
    }

    /// Evaluator parameters followed by the embedding tables.
    pub fn trainable(&self) -> Vec<ParamId> {
        let mut ids = self.ocpm.params.param_ids();
        ids.extend(self.table.fields.iter().copied());
        ids
    }

    /// List-wise predictions for `perms` drawn from `cands`.
    pub fn predict(&self, cands: &CandidateSet, perms: &[Permutation], behaviors: &BehaviorSequence) -> Result<Vec<ListwisePrediction>> {
        let feats: Vec<Vec<Vec<u32>>> = perms.iter().map(|p| cands.features_of(p)).collect();
        let scores: Vec<Vec<f64>> = perms.iter().map(|p| cands.pctrs_of(p)).collect();
        let targets: Vec<PermInput<'_>> = feats
            .iter()
            .zip(&scores)
            .map(|(items, s)| PermInput { items, point_scores: s })
            .collect();
        let hist = self.history(behaviors);
        self.ocpm.predict(&self.store, &self.table, &targets, &hist)
    }

    /// The behaviors the model reads: at most `M`, most recent first.
    pub fn history<'b>(&self, behaviors: &'b BehaviorSequence) -> Vec<&'b [Vec<u32>]> {
        behaviors
            .iter()
            .take(self.config.fpsm.history_len)
            .map(|b| b.items_features.as_slice())
            .collect()
    }
}
