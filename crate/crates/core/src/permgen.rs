//! Candidate sets, permutations, and the three candidate generators:
//! exhaustive k-permutations, cumulative-score beam search, and uniform
//! random sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PierError, Result};

/// Largest list the enumerator accepts without the explicit override.
pub const MAX_ENUM_ITEMS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub features: Vec<u32>,
    pub point_pctr: f64,
}

/// The ranking-stage list a request re-ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub items: Vec<Item>,
}

impl CandidateSet {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| !(i.point_pctr > 0.0 && i.point_pctr < 1.0)) {
            return Err(PierError::Contract(format!(
                "point pCTR {} outside (0, 1)",
                bad.point_pctr
            )));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn point_pctrs(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.point_pctr).collect()
    }

    /// Feature rows of the items a permutation places, in display order.
    pub fn features_of(&self, perm: &Permutation) -> Vec<Vec<u32>> {
        perm.indices().iter().map(|&i| self.items[i].features.clone()).collect()
    }

    pub fn pctrs_of(&self, perm: &Permutation) -> Vec<f64> {
        perm.indices().iter().map(|&i| self.items[i].point_pctr).collect()
    }
}

/// Ordered, duplicate-free indices into a [`CandidateSet`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(PierError::Contract(format!("permutation {indices:?} repeats an index")));
        }
        Ok(Self(indices))
    }

    /// Checks the permutation against a candidate list and display length.
    pub fn validate(&self, n_o: usize, n_d: usize) -> Result<()> {
        if self.0.len() != n_d {
            return Err(PierError::Contract(format!(
                "permutation has {} items, expected {n_d}",
                self.0.len()
            )));
        }
        if let Some(&i) = self.0.iter().find(|&&i| i >= n_o) {
            return Err(PierError::Contract(format!("index {i} outside candidate list of {n_o}")));
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A clicked permutation from the user's history, stored by features since
/// it comes from an earlier request's candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Behavior {
    pub items_features: Vec<Vec<u32>>,
    /// 0 is the most recent.
    pub recency_rank: usize,
}

/// Most-recent-first clicked permutations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BehaviorSequence(pub Vec<Behavior>);

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Behavior> {
        self.0.iter()
    }
}

/// `n_o! / (n_o − n_d)!`, saturating.
pub fn permutation_count(n_o: usize, n_d: usize) -> u128 {
    if n_d > n_o {
        return 0;
    }
    ((n_o - n_d + 1)..=n_o).fold(1u128, |acc, v| acc.saturating_mul(v as u128))
}

/// All k-permutations in lexicographic index order.
pub fn enumerate_permutations(n_o: usize, n_d: usize) -> Result<Vec<Permutation>> {
    if n_o > MAX_ENUM_ITEMS {
        return Err(PierError::Contract(format!(
            "enumerating {n_o} items choose-ordered {n_d} would yield {} permutations; limit is {MAX_ENUM_ITEMS} items",
            permutation_count(n_o, n_d)
        )));
    }
    enumerate_permutations_unbounded(n_o, n_d)
}

/// [`enumerate_permutations`] without the list-length guard.
pub fn enumerate_permutations_unbounded(n_o: usize, n_d: usize) -> Result<Vec<Permutation>> {
    if n_d == 0 || n_d > n_o {
        return Err(PierError::Contract(format!(
            "need 1 <= N_d <= N_o, got N_d={n_d}, N_o={n_o} ({} permutations)",
            permutation_count(n_o, n_d)
        )));
    }
    let total = usize::try_from(permutation_count(n_o, n_d))
        .map_err(|_| PierError::Contract("permutation count overflows usize".into()))?;
    let mut out = Vec::with_capacity(total);
    let mut prefix = Vec::with_capacity(n_d);
    let mut used = vec![false; n_o];
    fn rec(n_o: usize, n_d: usize, prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Permutation>) {
        if prefix.len() == n_d {
            out.push(Permutation(prefix.clone()));
            return;
        }
        for i in 0..n_o {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(n_o, n_d, prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    rec(n_o, n_d, &mut prefix, &mut used, &mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub permutations: Vec<Permutation>,
    pub scores: Vec<f64>,
    /// Set when fewer than the requested number of sequences exist.
    pub short: bool,
}

/// Grows sequences one position at a time, keeping the `k` partials with the
/// highest cumulative point pCTR (ties: lexicographically smaller index
/// sequence first).
pub fn beam_search_generate(cands: &CandidateSet, n_d: usize, k: usize) -> Result<BeamOutput> {
    if k == 0 {
        return Err(PierError::Contract("beam width must be >= 1".into()));
    }
    let n_o = cands.len();
    if n_d == 0 || n_d > n_o {
        return Err(PierError::Contract(format!("need 1 <= N_d <= N_o, got {n_d} / {n_o}")));
    }
    let pctr = cands.point_pctrs();
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..n_d {
        let mut next = Vec::with_capacity(beams.len() * n_o);
        for (seq, score) in &beams {
            for (i, p) in pctr.iter().enumerate() {
                if seq.contains(&i) {
                    continue;
                }
                let mut s = seq.clone();
                s.push(i);
                next.push((s, score + p));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(k);
        beams = next;
    }
    let short = beams.len() < k;
    let (permutations, scores) = beams.into_iter().map(|(s, v)| (Permutation(s), v)).unzip();
    Ok(BeamOutput {
        permutations,
        scores,
        short,
    })
}

/// `k` distinct arrangements drawn uniformly without replacement.
pub fn random_generate(n_o: usize, n_d: usize, k: usize, seed: u64) -> Result<Vec<Permutation>> {
    let all = enumerate_permutations(n_o, n_d)?;
    if k > all.len() {
        return Err(PierError::Contract(format!(
            "requested {k} random permutations but only {} exist",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, all.len(), k);
    Ok(picks.into_iter().map(|i| all[i].clone()).collect())
}
