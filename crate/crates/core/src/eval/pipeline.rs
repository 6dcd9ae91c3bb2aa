use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, hr_at_1, logloss};
use crate::data::{best_for_record, GroundTruthModel, LogRecord};
use crate::error::{PierError, Result};
use crate::ocpm::ocpm_score;
use crate::permgen::{beam_search_generate, enumerate_permutations, permutation_count, random_generate, BehaviorSequence, CandidateSet, Permutation};
use crate::training::{mix_seed, PierModel, PointwiseModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Full,
    Beam,
    Random,
    Fpsm,
}

impl Generator {
    pub const ALL: [Generator; 4] = [Generator::Full, Generator::Fpsm, Generator::Beam, Generator::Random];

    pub fn name(self) -> &'static str {
        match self {
            Generator::Full => "full",
            Generator::Beam => "beam",
            Generator::Random => "random",
            Generator::Fpsm => "fpsm",
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Generator {
    type Err = PierError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Generator::Full),
            "beam" => Ok(Generator::Beam),
            "random" => Ok(Generator::Random),
            "fpsm" => Ok(Generator::Fpsm),
            other => Err(PierError::Config(format!("unknown generator `{other}` (full, beam, random, fpsm)"))),
        }
    }
}

/// Generation settings shared by hit-ratio evaluation and benchmarking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub generator: Generator,
    pub k: usize,
    pub n_d: usize,
    pub seed: u64,
    pub parallel: bool,
}

/// Candidate permutations the generator hands to the evaluator.
/// K is capped at the number of arrangements.
pub fn generate(model: &PierModel, cfg: &PipelineConfig, request_id: u64, cands: &CandidateSet, behaviors: &BehaviorSequence) -> Result<Vec<Permutation>> {
    let k = usize::try_from(permutation_count(cands.len(), cfg.n_d)).map_or(cfg.k, |n| cfg.k.min(n));
    match cfg.generator {
        Generator::Full => enumerate_permutations(cands.len(), cfg.n_d),
        Generator::Beam => Ok(beam_search_generate(cands, cfg.n_d, k)?.permutations),
        Generator::Random => random_generate(cands.len(), cfg.n_d, k, mix_seed(cfg.seed, &[request_id])),
        Generator::Fpsm => {
            let perms = enumerate_permutations(cands.len(), cfg.n_d)?;
            let idx = model.fpsm.select_top_k_indices(
                cands,
                &perms,
                k,
                behaviors,
                &model.table,
                &model.store,
                cfg.parallel,
            )?;
            Ok(idx.into_iter().map(|i| perms[i].clone()).collect())
        }
    }
}

/// Evaluator scores (sum of list-wise pCTRs) for each permutation.
pub fn score_all(model: &PierModel, cands: &CandidateSet, perms: &[Permutation], behaviors: &BehaviorSequence, parallel: bool) -> Result<Vec<f64>> {
    const CHUNK: usize = 120;
    let scored = |chunk: &[Permutation]| -> Result<Vec<f64>> {
        Ok(model.predict(cands, chunk, behaviors)?.iter().map(ocpm_score).collect())
    };
    let parts: Vec<Result<Vec<f64>>> = if parallel {
        perms.par_chunks(CHUNK).map(scored).collect()
    } else {
        perms.chunks(CHUNK).map(scored).collect()
    };
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

/// First index of the largest score.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// generate → evaluate → argmax; the permutation a request would display.
pub fn rerank(model: &PierModel, cfg: &PipelineConfig, request_id: u64, cands: &CandidateSet, behaviors: &BehaviorSequence) -> Result<Permutation> {
    let perms = generate(model, cfg, request_id, cands, behaviors)?;
    let scores = score_all(model, cands, &perms, behaviors, cfg.parallel)?;
    let i = argmax(&scores).ok_or_else(|| PierError::Contract("generator produced no permutations".into()))?;
    Ok(perms[i].clone())
}

/// Oracle-best permutation of every record.
pub fn oracle_bests(records: &[LogRecord], n_d: usize, truth: &GroundTruthModel) -> Result<Vec<Permutation>> {
    records.par_iter().map(|r| best_for_record(r, n_d, truth)).collect()
}

/// Fraction of records whose generated set contains the oracle best.
pub fn hit_ratio(model: &PierModel, cfg: &PipelineConfig, records: &[LogRecord], bests: &[Permutation]) -> Result<f64> {
    if records.is_empty() || records.len() != bests.len() {
        return Err(PierError::dim("hit ratio", &[records.len()], &[bests.len()]));
    }
    let one = |(r, best): (&LogRecord, &Permutation)| -> Result<u8> {
        let cands = r.candidate_set()?;
        let behaviors = BehaviorSequence(r.behaviors.clone());
        let sel = generate(model, &PipelineConfig { parallel: false, ..*cfg }, r.request_id, &cands, &behaviors)?;
        Ok(hr_at_1(&sel, best))
    };
    let hits: Vec<u8> = if cfg.parallel {
        records.par_iter().zip(bests).map(one).collect::<Result<_>>()?
    } else {
        records.iter().zip(bests).map(one).collect::<Result<_>>()?
    };
    Ok(hits.iter().map(|&h| h as f64).sum::<f64>() / hits.len() as f64)
}

/// Predictions and labels of every displayed slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlotPredictions {
    pub preds: Vec<f64>,
    pub labels: Vec<u8>,
}

impl SlotPredictions {
    pub fn auc(&self) -> Result<f64> {
        auc(&self.preds, &self.labels)
    }

    pub fn logloss(&self) -> Result<f64> {
        logloss(&self.preds, &self.labels)
    }
}

/// Evaluator predictions on the displayed permutations.
pub fn predict_displayed(model: &PierModel, records: &[LogRecord]) -> Result<SlotPredictions> {
    let per: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| {
            let cands = r.candidate_set()?;
            let perm = Permutation::new(r.displayed.clone())?;
            Ok(model.predict(&cands, &[perm], &BehaviorSequence(r.behaviors.clone()))?[0].0.clone())
        })
        .collect::<Result<_>>()?;
    Ok(SlotPredictions {
        preds: per.concat(),
        labels: records.iter().flat_map(|r| r.clicks.clone()).collect(),
    })
}

/// Point-wise predictions on the displayed permutations.
pub fn predict_displayed_pointwise(model: &PointwiseModel, records: &[LogRecord]) -> Result<SlotPredictions> {
    let per: Vec<Vec<f64>> = records
        .par_iter()
        .map(|r| model.predict_displayed(&r.to_example()?))
        .collect::<Result<_>>()?;
    Ok(SlotPredictions {
        preds: per.concat(),
        labels: records.iter().flat_map(|r| r.clicks.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, WorldConfig};
    use crate::eval::checkpoint::{from_bytes, to_bytes};
    use crate::ocpm::OcpmConfig;
    use crate::permgen::{Behavior, Item};
    use crate::training::{ModelConfig, PointwiseConfig};

    fn model(vocab: Vec<usize>, n_d: usize) -> PierModel {
        let n_f = vocab.len();
        let mut cfg = ModelConfig::new(vocab, 4, n_d);
        cfg.ocpm = OcpmConfig::tiny(4, n_f, n_d);
        cfg.init_seed = 21;
        PierModel::new(cfg).unwrap()
    }

    fn request(n: usize, seed: u32) -> (CandidateSet, BehaviorSequence) {
        let items = (0..n as u32)
            .map(|i| Item {
                features: vec![(i * 7 + seed) % 30, (i + seed) % 4],
                point_pctr: 0.1 + 0.8 * ((i * 13 + seed) % 17) as f64 / 17.0,
            })
            .collect();
        let behaviors = (0..3)
            .map(|r| Behavior {
                items_features: vec![vec![(r * 5 + seed) % 30, r % 4], vec![(r + 11) % 30, (r + 1) % 4], vec![r % 30, 2]],
                recency_rank: r as usize,
            })
            .collect();
        (CandidateSet::new(items).unwrap(), BehaviorSequence(behaviors))
    }

    #[test]
    fn generator_names_round_trip() {
        for g in Generator::ALL {
            assert_eq!(g.to_string().parse::<Generator>().unwrap(), g);
        }
        assert!(matches!("greedy".parse::<Generator>(), Err(PierError::Config(_))));
    }

    #[test]
    fn evaluator_argmax_matches_linear_scan() {
        let m = model(vec![30, 4], 3);
        let (cands, behaviors) = request(10, 1);
        let perms = enumerate_permutations(10, 3).unwrap();
        assert_eq!(perms.len(), 720);
        let batched = score_all(&m, &cands, &perms, &behaviors, false).unwrap();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in perms.iter().enumerate() {
            let s: f64 = m.predict(&cands, std::slice::from_ref(p), &behaviors).unwrap()[0].0.iter().sum();
            assert!((s - batched[i]).abs() < 1e-12);
            if s > best.1 {
                best = (i, s);
            }
        }
        assert_eq!(argmax(&batched), Some(best.0));
        assert_eq!(score_all(&m, &cands, &perms, &behaviors, true).unwrap(), batched);
    }

    #[test]
    fn selection_survives_a_checkpoint() {
        let m = model(vec![30, 4], 3);
        let (cands, behaviors) = request(20, 3);
        // 20 candidates exceed the enumeration guard, so drive the selector directly
        let perms = crate::permgen::enumerate_permutations_unbounded(20, 3).unwrap();
        let select = |m: &PierModel| {
            m.fpsm
                .select_top_k_indices(&cands, &perms, 100, &behaviors, &m.table, &m.store, false)
                .unwrap()
        };
        let before = select(&m);
        let restored = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(select(&restored), before);
        assert_eq!(restored.fpsm.family(), m.fpsm.family());
    }

    #[test]
    fn generators_on_a_synthetic_log() {
        let world = WorldConfig {
            n_requests: 30,
            n_o: 5,
            n_d: 2,
            vocab_sizes: vec![20, 4],
            n_users: 3,
            burn_in: 10,
            pointwise: PointwiseConfig {
                epochs: 1,
                ..PointwiseConfig::default()
            },
            ..WorldConfig::default()
        };
        let data = generate_synthetic_dataset(&world).unwrap();
        let m = model(vec![20, 4], 2);
        let bests = oracle_bests(&data.records, 2, &data.truth).unwrap();
        let cfg = |generator, k| PipelineConfig {
            generator,
            k,
            n_d: 2,
            seed: 5,
            parallel: false,
        };
        assert_eq!(hit_ratio(&m, &cfg(Generator::Full, 1), &data.records, &bests).unwrap(), 1.0);
        // K covering every arrangement makes every generator exhaustive
        for g in [Generator::Fpsm, Generator::Beam, Generator::Random] {
            assert_eq!(hit_ratio(&m, &cfg(g, 20), &data.records, &bests).unwrap(), 1.0, "{g}");
        }
        let r = data.records[0].clone();
        let (cands, b) = (r.candidate_set().unwrap(), BehaviorSequence(r.behaviors.clone()));
        let one = generate(&m, &cfg(Generator::Random, 4), 7, &cands, &b).unwrap();
        assert_eq!(one, generate(&m, &cfg(Generator::Random, 4), 7, &cands, &b).unwrap());
        assert_eq!(rerank(&m, &cfg(Generator::Full, 1), 0, &cands, &b).unwrap().len(), 2);
        assert!(hit_ratio(&m, &cfg(Generator::Full, 1), &data.records, &bests[1..]).is_err());
    }
}
