//! List-wise CTR evaluator.
//!
//! Three units run in sequence over a batch of `P` permutations:
//!
//! * OAU: per-field self-attention across the `N_d` items (separate Q/K/V
//!   per field), a shared MLP₁ over each field's flattened output, then
//!   self-attention across the `N_f` field vectors and MLP₂, giving one
//!   context vector `u` per permutation.
//! * TAU: a scalar attention weight per (target, behavior) pair from
//!   MLP_Att over `[u_p, u_b, u_p ⊙ u_b, u_p − u_b]`; the interest vector is
//!   the weighted sum of behavior contexts.
//! * CPU: a position-shared MLP₃ over `[u, w, point scores, item row, PE row]`
//!   followed by a sigmoid, one output per displayed slot.
//!
//! Row layouts inside the graph: per-field item matrices are
//! `(P·N_d) × D` with rows `p·N_d + t`; the stacked field vectors are
//! `(P·N_f) × Z` with rows `p·N_f + j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{position_encoding, EmbeddingTable, PermEmbedding};
use crate::error::{PierError, Result};
use crate::numerics::{Activation, Graph, Mlp, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpmConfig {
    pub dim: usize,
    pub n_fields: usize,
    pub n_items: usize,
    pub mlp1: Vec<usize>,
    pub mlp2: Vec<usize>,
    pub mlp_att: Vec<usize>,
    pub mlp3: Vec<usize>,
    /// When false, each field's item rows are replaced by their mean and
    /// both attention layers are bypassed.
    pub use_oau: bool,
    /// When false, the interest vector is identically zero.
    pub use_tau: bool,
}

impl OcpmConfig {
    pub fn new(dim: usize, n_fields: usize, n_items: usize) -> Self {
        Self {
            dim,
            n_fields,
            n_items,
            mlp1: vec![128, 64, 32],
            mlp2: vec![60, 32, 20],
            mlp_att: vec![32],
            mlp3: vec![50, 20],
            use_oau: true,
            use_tau: true,
        }
    }

    /// Tiny widths for finite-difference checks.
    pub fn tiny(dim: usize, n_fields: usize, n_items: usize) -> Self {
        Self {
            mlp1: vec![6, 5],
            mlp2: vec![7, 4],
            mlp_att: vec![5],
            mlp3: vec![6, 3],
            ..Self::new(dim, n_fields, n_items)
        }
    }

    pub fn field_width(&self) -> usize {
        *self.mlp1.last().unwrap_or(&0)
    }

    pub fn context_dim(&self) -> usize {
        *self.mlp2.last().unwrap_or(&0)
    }

    pub fn cpu_input_dim(&self) -> usize {
        2 * self.context_dim() + self.n_items + self.n_fields * self.dim + self.dim
    }
}

#[derive(Clone, Debug)]
struct FieldAttention {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

/// Trainable weights of the evaluator. The embedding table is held
/// separately because the selector reads it too.
#[derive(Clone, Debug)]
pub struct OcpmParams {
    field_attn: Vec<FieldAttention>,
    inter_attn: FieldAttention,
    mlp1: Mlp,
    mlp2: Mlp,
    mlp_att: Mlp,
    mlp3: Mlp,
}

impl OcpmParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for a in self.field_attn.iter().chain(std::iter::once(&self.inter_attn)) {
            ids.extend([a.query, a.key, a.value]);
        }
        for m in [&self.mlp1, &self.mlp2, &self.mlp_att, &self.mlp3] {
            ids.extend(m.param_ids());
        }
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PermContext(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct InterestVector(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ListwisePrediction(pub Vec<f64>);

/// Sum of the list-wise pCTRs.
pub fn ocpm_score(pred: &ListwisePrediction) -> f64 {
    pred.0.iter().sum()
}

/// One permutation to evaluate: its item feature rows in display order and
/// the point-wise pCTRs of those items.
#[derive(Clone, Copy, Debug)]
pub struct PermInput<'a> {
    pub items: &'a [Vec<u32>],
    pub point_scores: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct Ocpm {
    pub config: OcpmConfig,
    pub params: OcpmParams,
    pe: Tensor,
}

fn glorot<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    store.add(name, Tensor::new(vec![rows, cols], data).expect("shape"))
}

impl Ocpm {
    pub fn new<R: Rng>(config: OcpmConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let (d, n_f, n_d) = (config.dim, config.n_fields, config.n_items);
        if n_f == 0 || n_d == 0 || config.mlp1.is_empty() || config.mlp2.is_empty() || config.mlp3.is_empty() {
            return Err(PierError::Config(format!("degenerate evaluator config {config:?}")));
        }
        let pe = position_encoding(n_d, d)?;
        let field_attn = (0..n_f)
            .map(|j| FieldAttention {
                query: glorot(store, format!("ocpm.field{j}.wq"), d, d, rng),
                key: glorot(store, format!("ocpm.field{j}.wk"), d, d, rng),
                value: glorot(store, format!("ocpm.field{j}.wv"), d, d, rng),
            })
            .collect();
        let z = config.field_width();
        let inter_attn = FieldAttention {
            query: glorot(store, "ocpm.inter.wq".into(), z, z, rng),
            key: glorot(store, "ocpm.inter.wk".into(), z, z, rng),
            value: glorot(store, "ocpm.inter.wv".into(), z, z, rng),
        };
        let relu = Activation::Relu;
        let mlp1 = Mlp::new(store, "ocpm.mlp1", n_d * d, &config.mlp1, relu, relu, rng);
        let mlp2 = Mlp::new(store, "ocpm.mlp2", n_f * z, &config.mlp2, relu, relu, rng);
        let du = config.context_dim();
        let mut att_sizes = config.mlp_att.clone();
        att_sizes.push(1);
        let mlp_att = Mlp::new(store, "ocpm.mlp_att", 4 * du, &att_sizes, relu, Activation::Identity, rng);
        let mut head_sizes = config.mlp3.clone();
        head_sizes.push(1);
        let mlp3 = Mlp::new(store, "ocpm.mlp3", config.cpu_input_dim(), &head_sizes, relu, Activation::Identity, rng);
        Ok(Self {
            config,
            params: OcpmParams {
                field_attn,
                inter_attn,
                mlp1,
                mlp2,
                mlp_att,
                mlp3,
            },
            pe,
        })
    }

    pub fn position_encoding(&self) -> &Tensor {
        &self.pe
    }

    /// Per-field `(P·N_d) × D` lookups for a batch of permutations.
    pub fn gather_fields(&self, g: &mut Graph<'_>, table: &EmbeddingTable, perms: &[&[Vec<u32>]]) -> Result<Vec<Var>> {
        let n_d = self.config.n_items;
        let mut rows: Vec<&[u32]> = Vec::with_capacity(perms.len() * n_d);
        for p in perms {
            if p.len() != n_d {
                return Err(PierError::dim("permutation length", &[p.len()], &[n_d]));
            }
            rows.extend(p.iter().map(|f| f.as_slice()));
        }
        (0..self.config.n_fields).map(|j| table.gather_field(g, j, &rows)).collect()
    }

    /// OAU over `n_perms` permutations given per-field item matrices.
    pub fn oau(&self, g: &mut Graph<'_>, fields: &[Var], n_perms: usize) -> Result<Var> {
        let cfg = &self.config;
        let (d, n_d, n_f) = (cfg.dim, cfg.n_items, cfg.n_fields);
        if fields.len() != n_f {
            return Err(PierError::dim("oau fields", &[fields.len()], &[n_f]));
        }
        let mut per_field = Vec::with_capacity(n_f);
        for (j, &e) in fields.iter().enumerate() {
            if g.shape(e) != (n_perms * n_d, d) {
                let (r, c) = g.shape(e);
                return Err(PierError::dim("oau per-field input", &[r, c], &[n_perms * n_d, d]));
            }
            let h = if cfg.use_oau {
                let a = &self.params.field_attn[j];
                let (wq, wk, wv) = (g.param(a.query), g.param(a.key), g.param(a.value));
                let q = g.matmul(e, wq)?;
                let k = g.matmul(e, wk)?;
                let v = g.matmul(e, wv)?;
                g.block_attention(q, k, v, n_d)?
            } else {
                g.block_mean_rows(e, n_d)?
            };
            per_field.push(g.reshape(h, n_perms, n_d * d)?);
        }
        let stacked = g.interleave_rows(&per_field)?;
        let z = self.params.mlp1.forward(g, stacked)?;
        let zw = cfg.field_width();
        let attended = if cfg.use_oau {
            let a = &self.params.inter_attn;
            let (wq, wk, wv) = (g.param(a.query), g.param(a.key), g.param(a.value));
            let q = g.matmul(z, wq)?;
            let k = g.matmul(z, wk)?;
            let v = g.matmul(z, wv)?;
            g.block_attention(q, k, v, n_f)?
        } else {
            z
        };
        let flat = g.reshape(attended, n_perms, n_f * zw)?;
        self.params.mlp2.forward(g, flat)
    }

    /// TAU: `(P × Du)` interest vectors; `behaviors` is `(M × Du)` or absent.
    pub fn tau(&self, g: &mut Graph<'_>, targets: Var, behaviors: Option<Var>) -> Result<Var> {
        let (p, du) = g.shape(targets);
        let behaviors = match behaviors {
            Some(b) if self.config.use_tau && g.shape(b).0 > 0 => b,
            _ => return g.input_raw(p, du, vec![0.0; p * du]),
        };
        let (m, du_b) = g.shape(behaviors);
        if du_b != du {
            return Err(PierError::dim("tau", &[p, du], &[m, du_b]));
        }
        let t = g.repeat_rows(targets, m);
        let b = g.tile_rows(behaviors, p);
        let prod = g.mul(t, b)?;
        let diff = g.sub(t, b)?;
        let feats = g.concat_cols(&[t, b, prod, diff])?;
        let weights = self.params.mlp_att.forward(g, feats)?;
        let weights = g.reshape(weights, p, m)?;
        g.matmul(weights, behaviors)
    }

    /// CPU: `(P × N_d)` list-wise pCTRs.
    pub fn cpu(&self, g: &mut Graph<'_>, contexts: Var, interest: Var, point_scores: &[&[f64]], fields: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let (n_d, d) = (cfg.n_items, cfg.dim);
        let p = point_scores.len();
        if g.shape(contexts).0 != p || g.shape(interest).0 != p {
            return Err(PierError::dim("cpu batch", &[g.shape(contexts).0, g.shape(interest).0], &[p]));
        }
        let mut v = Vec::with_capacity(p * n_d * n_d);
        for scores in point_scores {
            if scores.len() != n_d {
                return Err(PierError::dim("point scores", &[scores.len()], &[n_d]));
            }
            for _ in 0..n_d {
                v.extend_from_slice(scores);
            }
        }
        let v = g.input_raw(p * n_d, n_d, v)?;
        let mut pe_rows = Vec::with_capacity(p * n_d * d);
        for _ in 0..p {
            pe_rows.extend_from_slice(self.pe.data());
        }
        let pe_rows = g.input_raw(p * n_d, d, pe_rows)?;
        let u = g.repeat_rows(contexts, n_d);
        let w = g.repeat_rows(interest, n_d);
        let mut parts = vec![u, w, v];
        parts.extend_from_slice(fields);
        parts.push(pe_rows);
        let x = g.concat_cols(&parts)?;
        let logits = self.params.mlp3.forward(g, x)?;
        let probs = g.sigmoid(logits);
        g.reshape(probs, p, n_d)
    }

    /// Full evaluator over a batch of targets sharing one behavior history.
    pub fn forward(&self, g: &mut Graph<'_>, table: &EmbeddingTable, targets: &[PermInput<'_>], behaviors: &[&[Vec<u32>]]) -> Result<Var> {
        let n_t = targets.len();
        let mut all: Vec<&[Vec<u32>]> = targets.iter().map(|t| t.items).collect();
        all.extend_from_slice(behaviors);
        let fields = self.gather_fields(g, table, &all)?;
        let contexts = self.oau(g, &fields, all.len())?;
        let n_d = self.config.n_items;
        let target_ctx = g.slice_rows(contexts, 0, n_t)?;
        let behavior_ctx = if behaviors.is_empty() {
            None
        } else {
            Some(g.slice_rows(contexts, n_t, behaviors.len())?)
        };
        let interest = self.tau(g, target_ctx, behavior_ctx)?;
        let target_fields = fields
            .iter()
            .map(|&f| g.slice_rows(f, 0, n_t * n_d))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<&[f64]> = targets.iter().map(|t| t.point_scores).collect();
        self.cpu(g, target_ctx, interest, &scores, &target_fields)
    }

    /// Inference without a persistent graph: one prediction per target.
    pub fn predict(&self, store: &ParamStore, table: &EmbeddingTable, targets: &[PermInput<'_>], behaviors: &[&[Vec<u32>]]) -> Result<Vec<ListwisePrediction>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, table, targets, behaviors)?;
        let n_d = self.config.n_items;
        Ok(g.value(out).chunks(n_d).map(|c| ListwisePrediction(c.to_vec())).collect())
    }

    fn fields_from_embedding(&self, g: &mut Graph<'_>, emb: &PermEmbedding) -> Result<Vec<Var>> {
        let (n_d, n_f, d) = (emb.n_items(), emb.n_fields(), emb.dim());
        if (n_d, n_f, d) != (self.config.n_items, self.config.n_fields, self.config.dim) {
            return Err(PierError::dim(
                "perm embedding",
                &[n_d, n_f, d],
                &[self.config.n_items, self.config.n_fields, self.config.dim],
            ));
        }
        (0..n_f)
            .map(|j| {
                let data = (0..n_d).flat_map(|i| emb.get(i, j).to_vec()).collect();
                g.input_raw(n_d, d, data)
            })
            .collect()
    }

    /// OAU on an already-looked-up embedding.
    pub fn oau_forward(&self, store: &ParamStore, emb: &PermEmbedding) -> Result<PermContext> {
        let mut g = Graph::new(store);
        let fields = self.fields_from_embedding(&mut g, emb)?;
        let u = self.oau(&mut g, &fields, 1)?;
        Ok(PermContext(g.value(u).to_vec()))
    }

    pub fn tau_forward(&self, store: &ParamStore, target: &PermContext, behaviors: &[PermContext]) -> Result<InterestVector> {
        let mut g = Graph::new(store);
        let du = target.0.len();
        let t = g.input_raw(1, du, target.0.clone())?;
        let b = if behaviors.is_empty() {
            None
        } else {
            let data: Vec<f64> = behaviors.iter().flat_map(|c| c.0.clone()).collect();
            Some(g.input_raw(behaviors.len(), du, data)?)
        };
        let w = self.tau(&mut g, t, b)?;
        Ok(InterestVector(g.value(w).to_vec()))
    }

    pub fn cpu_forward(&self, store: &ParamStore, u: &PermContext, w: &InterestVector, point_scores: &[f64], emb: &PermEmbedding) -> Result<ListwisePrediction> {
        let mut g = Graph::new(store);
        let uv = g.input_raw(1, u.0.len(), u.0.clone())?;
        let wv = g.input_raw(1, w.0.len(), w.0.clone())?;
        let fields = self.fields_from_embedding(&mut g, emb)?;
        let out = self.cpu(&mut g, uv, wv, &[point_scores], &fields)?;
        Ok(ListwisePrediction(g.value(out).to_vec()))
    }

    /// MLP_Att output for one (target, behavior) pair.
    pub fn attention_weight(&self, store: &ParamStore, target: &PermContext, behavior: &PermContext) -> Result<f64> {
        let mut g = Graph::new(store);
        let t = g.input_raw(1, target.0.len(), target.0.clone())?;
        let b = g.input_raw(1, behavior.0.len(), behavior.0.clone())?;
        let prod = g.mul(t, b)?;
        let diff = g.sub(t, b)?;
        let feats = g.concat_cols(&[t, b, prod, diff])?;
        let out = self.params.mlp_att.forward(&mut g, feats)?;
        Ok(g.scalar(out))
    }
}
