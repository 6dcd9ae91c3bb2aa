use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PierError, Result};
use crate::permgen::{enumerate_permutations, CandidateSet, Permutation};

pub const MIN_CLICK_PROB: f64 = 0.01;
pub const MAX_CLICK_PROB: f64 = 0.99;

/// Effect of an earlier item's value in one field on a later item's value
/// in the same field: `values[later * size + earlier]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTable {
    pub field: usize,
    pub size: usize,
    pub values: Vec<f64>,
}

impl InteractionTable {
    fn get(&self, later: u32, earlier: u32) -> f64 {
        self.values[later as usize * self.size + earlier as usize]
    }
}

/// Hidden click model of the synthetic world.
///
/// `P(click at slot t) = clamp(b_i · pos_t · max(0, 1 + s·Σ_{j before i} Γ_ij) · fit(u, i), 0.01, 0.99)`
/// where `Γ_ij` sums the field interaction tables and `fit` is the
/// exponentiated user preference for the item's attribute values, drifting
/// linearly from a start to an end preference over the request horizon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    /// Features of every catalog item; field 0 is the item's own id.
    pub catalog: Vec<Vec<u32>>,
    pub base: Vec<f64>,
    pub interactions: Vec<InteractionTable>,
    pub context_strength: f64,
    pub position_factors: Vec<f64>,
    /// Fields that carry user preferences and interactions.
    pub attribute_fields: Vec<usize>,
    /// `[user][k][value]` for attribute field `attribute_fields[k]`.
    pub prefs_start: Vec<Vec<Vec<f64>>>,
    pub prefs_end: Vec<Vec<Vec<f64>>>,
    pub horizon: u64,
}

pub(crate) struct WorldShape<'a> {
    pub vocab_sizes: &'a [usize],
    pub n_d: usize,
    pub n_users: usize,
    pub context_strength: f64,
    pub position_decay: f64,
    pub drift: f64,
    pub preference_scale: f64,
    pub horizon: u64,
}

impl GroundTruthModel {
    pub(crate) fn sample(shape: &WorldShape<'_>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let vocab = shape.vocab_sizes;
        let n_items = vocab[0];
        let attribute_fields: Vec<usize> = if vocab.len() > 1 { (1..vocab.len()).collect() } else { vec![0] };
        let unit = Normal::new(0.0, 1.0).expect("unit normal");

        let catalog: Vec<Vec<u32>> = (0..n_items)
            .map(|c| {
                let mut f = vec![c as u32];
                f.extend(vocab[1..].iter().map(|&v| rng.random_range(0..v as u32)));
                f
            })
            .collect();
        // base attractiveness: a per-value effect for every attribute plus item noise
        let value_effects: Vec<Vec<f64>> = attribute_fields
            .iter()
            .map(|&f| (0..vocab[f]).map(|_| 0.5 * unit.sample(rng)).collect())
            .collect();
        let base = catalog
            .iter()
            .map(|feat| {
                let mut z = -1.0 + 0.5 * unit.sample(rng);
                for (k, &f) in attribute_fields.iter().enumerate() {
                    z += value_effects[k][feat[f] as usize];
                }
                crate::numerics::sigmoid(z)
            })
            .collect();
        let interactions = attribute_fields
            .iter()
            .map(|&f| {
                let size = vocab[f];
                let values = (0..size * size)
                    .map(|idx| if idx / size == idx % size { -0.5 } else { rng.random_range(-0.3..0.3) })
                    .collect();
                InteractionTable { field: f, size, values }
            })
            .collect();
        let position_factors = (0..shape.n_d).map(|t| shape.position_decay.powi(t as i32)).collect();
        let draw_prefs = |rng: &mut ChaCha8Rng| -> Vec<Vec<Vec<f64>>> {
            (0..shape.n_users)
                .map(|_| {
                    attribute_fields
                        .iter()
                        .map(|&f| (0..vocab[f]).map(|_| shape.preference_scale * unit.sample(rng)).collect())
                        .collect()
                })
                .collect()
        };
        let prefs_start = draw_prefs(rng);
        let fresh = draw_prefs(rng);
        let d = shape.drift;
        let prefs_end = prefs_start
            .iter()
            .zip(&fresh)
            .map(|(s, n)| {
                s.iter()
                    .zip(n)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (1.0 - d) * x + d * y).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            catalog,
            base,
            interactions,
            context_strength: shape.context_strength,
            position_factors,
            attribute_fields,
            prefs_start,
            prefs_end,
            horizon: shape.horizon,
        })
    }

    pub fn n_users(&self) -> usize {
        self.prefs_start.len()
    }

    fn catalog_index(&self, features: &[u32]) -> Result<usize> {
        let c = *features.first().ok_or_else(|| PierError::Contract("item without features".into()))? as usize;
        if c >= self.catalog.len() || self.catalog[c] != features {
            return Err(PierError::Contract(format!("features {features:?} are not a catalog item")));
        }
        Ok(c)
    }

    fn fit(&self, user: usize, time: u64, item: usize) -> f64 {
        let tau = (time as f64 / self.horizon.max(1) as f64).min(1.0);
        let feat = &self.catalog[item];
        let mut z = 0.0;
        for (k, &f) in self.attribute_fields.iter().enumerate() {
            let v = feat[f] as usize;
            z += (1.0 - tau) * self.prefs_start[user][k][v] + tau * self.prefs_end[user][k][v];
        }
        z.exp()
    }

    /// True click probability of every slot of a displayed list.
    pub fn click_probs(&self, user: u64, time: u64, items: &[Vec<u32>]) -> Result<Vec<f64>> {
        let user = user as usize;
        if user >= self.n_users() {
            return Err(PierError::Contract(format!("user {user} beyond {} users", self.n_users())));
        }
        if items.len() > self.position_factors.len() {
            return Err(PierError::dim("displayed list", &[items.len()], &[self.position_factors.len()]));
        }
        let idx = items.iter().map(|f| self.catalog_index(f)).collect::<Result<Vec<_>>>()?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(t, &i)| {
                let mut ctx = 0.0;
                for &j in &idx[..t] {
                    for table in &self.interactions {
                        ctx += table.get(self.catalog[i][table.field], self.catalog[j][table.field]);
                    }
                }
                let context = (1.0 + self.context_strength * ctx).max(0.0);
                let p = self.base[i] * self.position_factors[t] * context * self.fit(user, time, i);
                p.clamp(MIN_CLICK_PROB, MAX_CLICK_PROB)
            })
            .collect())
    }

    /// Expected clicks of a permutation.
    pub fn expected_clicks(&self, user: u64, time: u64, cands: &CandidateSet, perm: &Permutation) -> Result<f64> {
        Ok(self.click_probs(user, time, &cands.features_of(perm))?.iter().sum())
    }
}

/// Argmax of expected clicks over every arrangement; ties go to the earliest
/// in enumeration order.
pub fn oracle_best_permutation(cands: &CandidateSet, n_d: usize, user: u64, time: u64, model: &GroundTruthModel) -> Result<Permutation> {
    let mut perms = enumerate_permutations(cands.len(), n_d)?;
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, p) in perms.iter().enumerate() {
        let v = model.expected_clicks(user, time, cands, p)?;
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    Ok(perms.swap_remove(best))
}
