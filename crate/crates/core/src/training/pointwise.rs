use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_order, TrainingExample};
use crate::embedding::EmbeddingTable;
use crate::error::{PierError, Result};
use crate::numerics::{Activation, Adam, AdamConfig, Gradients, Graph, Mlp, ParamStore, Var};
use crate::permgen::BehaviorSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointwiseConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Number of display slots the position one-hot covers.
    pub n_positions: usize,
    pub history_len: usize,
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            hidden: vec![64, 32],
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 3,
            seed: 0,
            n_positions: 3,
            history_len: 5,
        }
    }
}

/// Single-item click model over `[item embedding, user profile, position]`,
/// where the profile is the mean embedding of the user's recent clicked items.
#[derive(Clone, Debug)]
pub struct PointwiseModel {
    pub config: PointwiseConfig,
    pub store: ParamStore,
    pub table: EmbeddingTable,
    pub mlp: Mlp,
}

/// One item to score.
#[derive(Clone, Copy, Debug)]
pub struct PointRow<'a> {
    pub features: &'a [u32],
    pub behaviors: &'a BehaviorSequence,
    pub position: usize,
}

impl PointwiseModel {
    pub fn new(vocab_sizes: &[usize], config: PointwiseConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let table = EmbeddingTable::new(&mut store, "pw.emb", vocab_sizes, config.dim, &mut rng)?;
        let width = 2 * vocab_sizes.len() * config.dim + config.n_positions;
        let mut sizes = config.hidden.clone();
        sizes.push(1);
        let mlp = Mlp::new(&mut store, "pw.mlp", width, &sizes, Activation::Relu, Activation::Identity, &mut rng);
        Ok(Self {
            config,
            store,
            table,
            mlp,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, rows: &[PointRow<'_>]) -> Result<Var> {
        let n_f = self.table.num_fields();
        let n_pos = self.config.n_positions;
        let feats: Vec<&[u32]> = rows.iter().map(|r| r.features).collect();
        let mut hist_items: Vec<&[u32]> = Vec::new();
        let mut spans = Vec::with_capacity(rows.len());
        for r in rows {
            let start = hist_items.len();
            for b in r.behaviors.iter().take(self.config.history_len) {
                hist_items.extend(b.items_features.iter().map(|f| f.as_slice()));
            }
            spans.push((start, hist_items.len() - start));
        }
        let mut parts = Vec::with_capacity(2 * n_f + 1);
        for j in 0..n_f {
            parts.push(self.table.gather_field(g, j, &feats)?);
        }
        let total = hist_items.len();
        if total == 0 {
            let width = n_f * self.config.dim;
            parts.push(g.input_raw(rows.len(), width, vec![0.0; rows.len() * width])?);
        } else {
            let hist_fields = (0..n_f)
                .map(|j| self.table.gather_field(g, j, &hist_items))
                .collect::<Result<Vec<_>>>()?;
            let hist = g.concat_cols(&hist_fields)?;
            parts.push(g.segment_mean(hist, &spans)?);
        }
        let mut onehot = vec![0.0; rows.len() * n_pos];
        for (r, row) in rows.iter().enumerate() {
            if row.position >= n_pos {
                return Err(PierError::Contract(format!("position {} beyond {n_pos} slots", row.position)));
            }
            onehot[r * n_pos + row.position] = 1.0;
        }
        parts.push(g.input_raw(rows.len(), n_pos, onehot)?);
        let x = g.concat_cols(&parts)?;
        let logits = self.mlp.forward(g, x)?;
        Ok(g.sigmoid(logits))
    }

    pub fn predict_rows(&self, rows: &[PointRow<'_>]) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, rows)?;
        Ok(g.value(out).to_vec())
    }

    /// Predictions for every displayed slot of an example.
    pub fn predict_displayed(&self, ex: &TrainingExample) -> Result<Vec<f64>> {
        let feats = ex.candidate_set.features_of(&ex.displayed);
        let rows: Vec<PointRow<'_>> = feats
            .iter()
            .enumerate()
            .map(|(t, f)| PointRow {
                features: f,
                behaviors: &ex.behaviors,
                position: t,
            })
            .collect();
        self.predict_rows(&rows)
    }
}

/// BCE on every displayed (item, slot, click) triple.
pub fn train_pointwise_baseline(examples: &[TrainingExample], vocab_sizes: &[usize], config: &PointwiseConfig) -> Result<PointwiseModel> {
    if examples.is_empty() {
        return Err(PierError::Contract("training on an empty dataset".into()));
    }
    let mut model = PointwiseModel::new(vocab_sizes, config.clone())?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let feats: Vec<Vec<Vec<u32>>> = examples.iter().map(|e| e.candidate_set.features_of(&e.displayed)).collect();
    for epoch in 0..config.epochs {
        let order = epoch_order(examples.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for &i in batch {
                for (t, f) in feats[i].iter().enumerate() {
                    rows.push(PointRow {
                        features: f,
                        behaviors: &examples[i].behaviors,
                        position: t,
                    });
                    labels.push(examples[i].clicks[t] as f64);
                }
            }
            let mut grads = Gradients::zeros_like(&model.store);
            {
                let mut g = Graph::new(&model.store);
                let pred = model.forward(&mut g, &rows)?;
                let loss = g.bce(pred, &labels)?;
                if !g.scalar(loss).is_finite() {
                    return Err(PierError::Diverged {
                        step: adam.steps(),
                        example: examples[batch[0]].request_id.to_string(),
                    });
                }
                let mean = g.scale(loss, 1.0 / rows.len() as f64);
                g.backward_into(mean, &mut grads)?;
            }
            adam.step(&mut model.store, &grads);
        }
    }
    Ok(model)
}
