//! Permutation selection by time-weighted SimHash distance.
//!
//! A permutation is reduced to a single `D`-vector: each field's item
//! embeddings are multiplied elementwise by the position encoding, averaged
//! over items, then averaged over fields. Behavior `m` of the user's history
//! and every candidate are hashed with projection bank `m`; a candidate's
//! distance is the recency-weighted sum of the per-behavior Hamming
//! distances, and the `K` closest candidates survive.
//!
//! Nothing here is trainable. The only state that moves during training is
//! the shared embedding table, so signatures follow the embeddings without
//! any refresh step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_permutation, position_encoding, EmbeddingTable, PermEmbedding};
use crate::error::{PierError, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::permgen::{BehaviorSequence, CandidateSet, Permutation};

pub const DEFAULT_SIGNATURE_BITS: usize = 48;
pub const DEFAULT_DECAY: f64 = 0.8;
pub const DEFAULT_HISTORY_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PermRepresentation(pub Vec<f64>);

/// `h = (1/N_f) Σ_j mean_i(E[i][j] ⊙ PE[i])`.
pub fn perm_representation(emb: &PermEmbedding, pe: &Tensor) -> Result<PermRepresentation> {
    let (n_d, n_f, d) = (emb.n_items(), emb.n_fields(), emb.dim());
    if pe.rows() < n_d || pe.cols() != d {
        return Err(PierError::dim("perm_representation", &[n_d, d], pe.shape()));
    }
    let mut h = vec![0.0; d];
    for j in 0..n_f {
        let mut pooled = vec![0.0; d];
        for i in 0..n_d {
            for ((p, e), w) in pooled.iter_mut().zip(emb.get(i, j)).zip(pe.row(i)) {
                *p += e * w;
            }
        }
        for (hv, p) in h.iter_mut().zip(&pooled) {
            *hv += p / n_d as f64;
        }
    }
    h.iter_mut().for_each(|v| *v /= n_f as f64);
    Ok(PermRepresentation(h))
}

/// `B`-bit signature packed into one word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    bits: u64,
    len: u32,
}

impl Signature {
    pub fn from_bits(bits: u64, len: u32) -> Result<Self> {
        if len > 64 {
            return Err(PierError::Contract(format!("signature of {len} bits exceeds 64")));
        }
        let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
        Ok(Self { bits: bits & mask, len })
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, b: u32) -> bool {
        (self.bits >> b) & 1 == 1
    }

    pub fn raw(&self) -> u64 {
        self.bits
    }

    pub fn complement(&self) -> Self {
        Self::from_bits(!self.bits, self.len).expect("same length")
    }
}

/// Bit `b` is set iff `bank_b · h >= 0`.
pub fn simhash(h: &PermRepresentation, bank: &Tensor) -> Result<Signature> {
    if bank.cols() != h.0.len() {
        return Err(PierError::dim("simhash", bank.shape(), &[h.0.len()]));
    }
    let mut bits = 0u64;
    for b in 0..bank.rows() {
        let dot: f64 = bank.row(b).iter().zip(&h.0).map(|(x, y)| x * y).sum();
        if dot >= 0.0 {
            bits |= 1 << b;
        }
    }
    Signature::from_bits(bits, bank.rows() as u32)
}

pub fn hamming(a: &Signature, b: &Signature) -> Result<u32> {
    if a.len != b.len {
        return Err(PierError::Contract(format!(
            "hamming over signatures of {} and {} bits",
            a.len, b.len
        )));
    }
    Ok((a.bits ^ b.bits).count_ones())
}

/// `M` fixed Gaussian projection banks, one per behavior slot.
#[derive(Clone, Debug, PartialEq)]
pub struct HashFamily {
    seed: u64,
    bits: usize,
    dim: usize,
    banks: Vec<Tensor>,
}

impl HashFamily {
    pub fn new(seed: u64, n_banks: usize, bits: usize, dim: usize) -> Result<Self> {
        if bits == 0 || bits > 64 {
            return Err(PierError::Config(format!("signature bits must be in 1..=64, got {bits}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let banks = (0..n_banks)
            .map(|_| {
                let data = (0..bits * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::new(vec![bits, dim], data).expect("bank shape")
            })
            .collect();
        Ok(Self { seed, bits, dim, banks })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn bank(&self, m: usize) -> &Tensor {
        &self.banks[m]
    }
}

/// Nonnegative, nonincreasing from most recent, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeWeights(Vec<f64>);

impl TimeWeights {
    /// `w_m ∝ γ^m`, normalised.
    pub fn decay(m: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(PierError::Config(format!("decay must be in (0, 1], got {gamma}")));
        }
        Ok(Self::normalised((0..m).map(|i| gamma.powi(i as i32)).collect()))
    }

    pub fn uniform(m: usize) -> Self {
        Self::normalised(vec![1.0; m])
    }

    pub fn from_raw(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PierError::Contract(format!("invalid time weights {weights:?}")));
        }
        if weights.windows(2).any(|w| w[1] > w[0]) {
            return Err(PierError::Contract("time weights must be nonincreasing".into()));
        }
        Ok(Self::normalised(weights))
    }

    fn normalised(mut w: Vec<f64>) -> Self {
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        }
        Self(w)
    }

    /// First `n` weights renormalised, for histories shorter than `M`.
    pub fn truncated(&self, n: usize) -> Self {
        Self::normalised(self.0[..n.min(self.0.len())].to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Weighting {
    Decay { gamma: f64 },
    Uniform,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Decay { gamma: DEFAULT_DECAY }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsmConfig {
    pub bits: usize,
    pub history_len: usize,
    pub weighting: Weighting,
    pub hash_seed: u64,
}

impl Default for FpsmConfig {
    fn default() -> Self {
        Self {
            bits: DEFAULT_SIGNATURE_BITS,
            history_len: DEFAULT_HISTORY_LEN,
            weighting: Weighting::default(),
            hash_seed: 0x5EED,
        }
    }
}

/// Signatures of the user's history, bank `m` for behavior `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistorySignatures {
    signatures: Vec<Signature>,
    weights: TimeWeights,
}

/// Embeds one permutation and reduces it to its representation.
pub fn represent(items: &[Vec<u32>], table: &EmbeddingTable, store: &ParamStore, pe: &Tensor) -> Result<PermRepresentation> {
    let emb = embed_permutation(items, table, store)?;
    perm_representation(&emb, pe)
}

/// `d = Σ_m w_m · hamming(simhash(h_p, bank_m), simhash(h_{b_m}, bank_m))`.
///
/// An empty history scores `B/2`. Histories longer than the family are cut
/// to the first `n_banks` (most recent) behaviors.
pub fn time_aware_distance(
    perm_items: &[Vec<u32>],
    behaviors: &BehaviorSequence,
    family: &HashFamily,
    weights: &TimeWeights,
    table: &EmbeddingTable,
    store: &ParamStore,
    pe: &Tensor,
) -> Result<f64> {
    if behaviors.is_empty() {
        return Ok(family.bits() as f64 / 2.0);
    }
    let h_p = represent(perm_items, table, store, pe)?;
    let used = behaviors.len().min(family.n_banks()).min(weights.len());
    let w = weights.truncated(used);
    let mut d = 0.0;
    for (m, behavior) in behaviors.iter().take(used).enumerate() {
        let h_b = represent(&behavior.items_features, table, store, pe)?;
        let bank = family.bank(m);
        d += w.as_slice()[m] * hamming(&simhash(&h_p, bank)?, &simhash(&h_b, bank)?)? as f64;
    }
    Ok(d)
}

/// The selection module: hash family, time weights, cached position encoding.
#[derive(Clone, Debug)]
pub struct Fpsm {
    pub config: FpsmConfig,
    family: HashFamily,
    weights: TimeWeights,
    pe: Tensor,
}

impl Fpsm {
    pub fn new(config: FpsmConfig, dim: usize, n_d: usize) -> Result<Self> {
        let family = HashFamily::new(config.hash_seed, config.history_len, config.bits, dim)?;
        let weights = match config.weighting {
            Weighting::Decay { gamma } => TimeWeights::decay(config.history_len, gamma)?,
            Weighting::Uniform => TimeWeights::uniform(config.history_len),
        };
        Ok(Self {
            config,
            family,
            weights,
            pe: position_encoding(n_d, dim)?,
        })
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn weights(&self) -> &TimeWeights {
        &self.weights
    }

    pub fn position_encoding(&self) -> &Tensor {
        &self.pe
    }

    /// Same selector with a different weighting scheme.
    pub fn with_weighting(&self, weighting: Weighting) -> Result<Self> {
        let mut config = self.config;
        config.weighting = weighting;
        Fpsm::new(config, self.family.dim(), self.pe.rows())
    }

    pub fn history_signatures(&self, behaviors: &BehaviorSequence, table: &EmbeddingTable, store: &ParamStore) -> Result<HistorySignatures> {
        let used = behaviors.len().min(self.family.n_banks());
        let signatures = behaviors
            .iter()
            .take(used)
            .enumerate()
            .map(|(m, b)| simhash(&represent(&b.items_features, table, store, &self.pe)?, self.family.bank(m)))
            .collect::<Result<Vec<_>>>()?;
        Ok(HistorySignatures {
            signatures,
            weights: self.weights.truncated(used),
        })
    }

    pub fn distance(&self, items: &[Vec<u32>], history: &HistorySignatures, table: &EmbeddingTable, store: &ParamStore) -> Result<f64> {
        if history.signatures.is_empty() {
            return Ok(self.family.bits() as f64 / 2.0);
        }
        let h = represent(items, table, store, &self.pe)?;
        let mut d = 0.0;
        for (m, (sig_b, w)) in history.signatures.iter().zip(history.weights.as_slice()).enumerate() {
            let sig_p = simhash(&h, self.family.bank(m))?;
            d += w * hamming(&sig_p, sig_b)? as f64;
        }
        Ok(d)
    }

    /// Distance of every candidate permutation, in input order.
    pub fn score(
        &self,
        cands: &CandidateSet,
        perms: &[Permutation],
        behaviors: &BehaviorSequence,
        table: &EmbeddingTable,
        store: &ParamStore,
        parallel: bool,
    ) -> Result<Vec<f64>> {
        let history = self.history_signatures(behaviors, table, store)?;
        let one = |p: &Permutation| self.distance(&cands.features_of(p), &history, table, store);
        if parallel {
            perms.par_iter().map(one).collect()
        } else {
            perms.iter().map(one).collect()
        }
    }

    /// Indices into `perms` of the `k` smallest distances, ascending, ties by index.
    #[allow(clippy::too_many_arguments)]
    pub fn select_top_k_indices(
        &self,
        cands: &CandidateSet,
        perms: &[Permutation],
        k: usize,
        behaviors: &BehaviorSequence,
        table: &EmbeddingTable,
        store: &ParamStore,
        parallel: bool,
    ) -> Result<Vec<usize>> {
        if k > perms.len() {
            return Err(PierError::Contract(format!(
                "cannot select top {k} of {} candidates",
                perms.len()
            )));
        }
        let dist = self.score(cands, perms, behaviors, table, store, parallel)?;
        Ok(bottom_k(&dist, k))
    }

    pub fn select_top_k(
        &self,
        cands: &CandidateSet,
        perms: &[Permutation],
        k: usize,
        behaviors: &BehaviorSequence,
        table: &EmbeddingTable,
        store: &ParamStore,
    ) -> Result<Vec<Permutation>> {
        let idx = self.select_top_k_indices(cands, perms, k, behaviors, table, store, false)?;
        Ok(idx.into_iter().map(|i| perms[i].clone()).collect())
    }
}

/// Indices of the `k` smallest values, ascending by (value, index).
pub fn bottom_k(values: &[f64], k: usize) -> Vec<usize> {
    let cmp = |&a: &usize, &b: &usize| values[a].total_cmp(&values[b]).then(a.cmp(&b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::embedding::position_encoding;
    use crate::permgen::Behavior;

    fn emb_from(n_d: usize, n_f: usize, d: usize, data: Vec<f64>) -> PermEmbedding {
        PermEmbedding::from_tensor(Tensor::new(vec![n_d, n_f, d], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_embedding_zero_representation() {
        let pe = position_encoding(3, 4).unwrap();
        let h = perm_representation(&emb_from(3, 2, 4, vec![0.0; 24]), &pe).unwrap();
        assert!(h.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_item_uses_row_zero_encoding() {
        let pe = position_encoding(1, 2).unwrap();
        let c = 0.7;
        let h = perm_representation(&emb_from(1, 1, 2, vec![c, c]), &pe).unwrap();
        assert_eq!(h.0, vec![0.0, c]);
    }

    #[test]
    fn swapping_items_changes_representation() {
        // two items, one field, D=4; item a at position 0 vs position 1
        let a = [0.9, -0.4, 0.3, 1.2];
        let b = [-0.5, 0.8, -1.1, 0.2];
        let pe = position_encoding(2, 4).unwrap();
        let ab = perm_representation(&emb_from(2, 1, 4, [a, b].concat()), &pe).unwrap();
        let ba = perm_representation(&emb_from(2, 1, 4, [b, a].concat()), &pe).unwrap();
        // direct formula: h[d] = (x0[d]·PE[0][d] + x1[d]·PE[1][d]) / 2
        let direct = |x0: &[f64; 4], x1: &[f64; 4]| -> Vec<f64> {
            (0..4).map(|d| (x0[d] * pe.get2(0, d) + x1[d] * pe.get2(1, d)) / 2.0).collect()
        };
        let want_ab = direct(&a, &b);
        let want_ba = direct(&b, &a);
        for d in 0..4 {
            assert!((ab.0[d] - want_ab[d]).abs() < 1e-15);
            assert!((ba.0[d] - want_ba[d]).abs() < 1e-15);
        }
        assert_ne!(ab, ba);
    }

    #[test]
    fn simhash_determinism_and_antisymmetry() {
        let fam = HashFamily::new(11, 1, 48, 8).unwrap();
        let h = PermRepresentation(vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.05, 0.4, -0.33]);
        let s1 = simhash(&h, fam.bank(0)).unwrap();
        assert_eq!(s1, simhash(&h, fam.bank(0)).unwrap());
        let neg = PermRepresentation(h.0.iter().map(|v| -v).collect());
        assert_eq!(simhash(&neg, fam.bank(0)).unwrap(), s1.complement());
        assert_eq!(s1.len(), 48);
    }

    #[test]
    fn simhash_estimates_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = 1.1f64;
        let u = PermRepresentation(vec![1.0, 0.0]);
        let v = PermRepresentation(vec![theta.cos(), theta.sin()]);
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let fam = HashFamily::new(rng.random(), 1, 48, 2).unwrap();
            let (a, b) = (simhash(&u, fam.bank(0)).unwrap(), simhash(&v, fam.bank(0)).unwrap());
            total += hamming(&a, &b).unwrap() as f64 / 48.0;
        }
        let mean = total / trials as f64;
        assert!((mean - theta / std::f64::consts::PI).abs() < 0.02, "{mean}");
    }

    #[test]
    fn hamming_examples() {
        let a = Signature::from_bits(0b1011, 4).unwrap();
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert_eq!(hamming(&a, &a.complement()).unwrap(), 4);
        assert_eq!(hamming(&a, &Signature::from_bits(0b1010, 4).unwrap()).unwrap(), 1);
        assert!(hamming(&a, &Signature::from_bits(0, 5).unwrap()).is_err());
    }

    #[test]
    fn time_weights_shape() {
        let w = TimeWeights::decay(5, 0.8).unwrap();
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.as_slice().windows(2).all(|p| p[0] >= p[1]));
        let t = w.truncated(2);
        assert!((t.as_slice()[0] - 1.0 / 1.8).abs() < 1e-12);
        assert!(TimeWeights::from_raw(vec![0.2, 0.5]).is_err());
        assert!(TimeWeights::decay(3, 1.5).is_err());
    }

    fn small_world() -> (ParamStore, EmbeddingTable, Tensor, HashFamily) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = EmbeddingTable::new(&mut store, "emb", &[6, 3], 8, &mut rng).unwrap();
        let pe = position_encoding(2, 8).unwrap();
        let fam = HashFamily::new(9, 2, 48, 8).unwrap();
        (store, table, pe, fam)
    }

    #[test]
    fn distance_to_identical_behavior_is_zero() {
        let (store, table, pe, fam) = small_world();
        let items = vec![vec![1, 2], vec![4, 0]];
        let hist = BehaviorSequence(vec![Behavior {
            items_features: items.clone(),
            recency_rank: 0,
        }]);
        let w = TimeWeights::from_raw(vec![1.0]).unwrap();
        assert_eq!(time_aware_distance(&items, &hist, &fam, &w, &table, &store, &pe).unwrap(), 0.0);
    }

    #[test]
    fn distance_is_weighted_sum() {
        let (store, table, pe, fam) = small_world();
        let items = vec![vec![1, 2], vec![4, 0]];
        let b1 = vec![vec![5, 1], vec![0, 2]];
        let b2 = vec![vec![3, 0], vec![2, 1]];
        let hist = BehaviorSequence(vec![
            Behavior {
                items_features: b1.clone(),
                recency_rank: 0,
            },
            Behavior {
                items_features: b2.clone(),
                recency_rank: 1,
            },
        ]);
        let hp = represent(&items, &table, &store, &pe).unwrap();
        let per: Vec<f64> = [&b1, &b2]
            .iter()
            .enumerate()
            .map(|(m, b)| {
                let hb = represent(b, &table, &store, &pe).unwrap();
                hamming(&simhash(&hp, fam.bank(m)).unwrap(), &simhash(&hb, fam.bank(m)).unwrap()).unwrap() as f64
            })
            .collect();
        let half = TimeWeights::from_raw(vec![0.5, 0.5]).unwrap();
        let d = time_aware_distance(&items, &hist, &fam, &half, &table, &store, &pe).unwrap();
        assert!((d - (per[0] + per[1]) / 2.0).abs() < 1e-12);
        let first = TimeWeights::from_raw(vec![1.0, 0.0]).unwrap();
        let d = time_aware_distance(&items, &hist, &fam, &first, &table, &store, &pe).unwrap();
        assert_eq!(d, per[0]);
    }

    #[test]
    fn empty_history_is_neutral() {
        let (store, table, pe, fam) = small_world();
        let w = TimeWeights::uniform(2);
        let d = time_aware_distance(&[vec![0, 0], vec![1, 1]], &BehaviorSequence::default(), &fam, &w, &table, &store, &pe).unwrap();
        assert_eq!(d, 24.0);
    }

    #[test]
    fn bottom_k_tie_break() {
        assert_eq!(bottom_k(&[3.0, 1.0, 1.0, 0.5], 3), vec![3, 1, 2]);
        assert_eq!(bottom_k(&[2.0; 5], 2), vec![0, 1]);
    }
}
