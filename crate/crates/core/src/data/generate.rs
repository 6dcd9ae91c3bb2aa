use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{GroundTruthModel, WorldShape};
use super::LogRecord;
use crate::error::{PierError, Result};
use crate::permgen::{Behavior, BehaviorSequence, CandidateSet, Item, Permutation};
use crate::training::{mix_seed, train_pointwise_baseline, PointRow, PointwiseConfig, PointwiseModel, TrainingExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_requests: usize,
    pub n_o: usize,
    pub n_d: usize,
    /// Field 0 is the item id, so its vocabulary is the catalog size.
    pub vocab_sizes: Vec<usize>,
    pub n_users: usize,
    pub history_len: usize,
    pub seed: u64,
    /// Scale on the interaction tables; 0 makes the world point-wise.
    pub context_strength: f64,
    /// Per-slot multiplicative click decay; 1 disables position effects.
    pub position_decay: f64,
    pub exploration: f64,
    /// Requests displayed at random before logging starts; the point-wise
    /// model that supplies `point_pctr` is fitted on them.
    pub burn_in: usize,
    /// Fraction of each user's preferences replaced over the horizon.
    pub drift: f64,
    /// Standard deviation of each user's per-value log-preference.
    pub preference_scale: f64,
    pub pointwise: PointwiseConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_requests: 10_000,
            n_o: 10,
            n_d: 3,
            vocab_sizes: vec![200, 10, 5],
            n_users: 500,
            history_len: 5,
            seed: 0,
            context_strength: 1.5,
            position_decay: 0.75,
            exploration: 0.2,
            burn_in: 5_000,
            drift: 0.5,
            preference_scale: 0.6,
            pointwise: PointwiseConfig {
                batch_size: 256,
                epochs: 5,
                ..PointwiseConfig::default()
            },
        }
    }
}

impl WorldConfig {
    pub fn new(n_requests: usize, n_o: usize, n_d: usize, vocab_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            n_requests,
            n_o,
            n_d,
            vocab_sizes,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.n_requests > 0 && self.n_o > 0 && self.n_d > 0 && self.n_users > 0 && self.history_len > 0;
        if !positive || self.vocab_sizes.is_empty() || self.vocab_sizes.contains(&0) {
            return Err(PierError::Config(format!("world sizes must be positive: {self:?}")));
        }
        if self.n_d > self.n_o || self.n_o > self.vocab_sizes[0] {
            return Err(PierError::Config(format!(
                "need N_d <= N_o <= catalog size, got {} / {} / {}",
                self.n_d, self.n_o, self.vocab_sizes[0]
            )));
        }
        if !(0.0..=1.0).contains(&self.exploration) || !(0.0..=1.0).contains(&self.drift) {
            return Err(PierError::Config("exploration and drift must lie in [0, 1]".into()));
        }
        if self.preference_scale < 0.0 || self.context_strength < 0.0 || !(self.position_decay > 0.0 && self.position_decay <= 1.0) {
            return Err(PierError::Config(
                "preference_scale >= 0, context_strength >= 0 and position_decay in (0, 1] required".into(),
            ));
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.vocab_sizes.len()
    }
}

/// Generated log plus the hidden model that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub config: WorldConfig,
    pub truth: GroundTruthModel,
    pub records: Vec<LogRecord>,
    /// Model behind every record's `point_pctr`.
    pub point_model: PointwiseModel,
}

/// Keeps `x` to 9 significant digits so the JSONL text stays short and
/// round-trips exactly.
pub(crate) fn round_sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

struct Simulator<'a> {
    cfg: &'a WorldConfig,
    truth: &'a GroundTruthModel,
    rng: ChaCha8Rng,
    histories: Vec<Vec<Vec<Vec<u32>>>>,
}

impl Simulator<'_> {
    fn behaviors(&self, user: usize) -> BehaviorSequence {
        BehaviorSequence(
            self.histories[user]
                .iter()
                .enumerate()
                .map(|(r, items)| Behavior {
                    items_features: items.clone(),
                    recency_rank: r,
                })
                .collect(),
        )
    }

    fn draw_request(&mut self) -> (usize, Vec<Vec<u32>>) {
        let user = self.rng.random_range(0..self.cfg.n_users);
        let picks = index::sample(&mut self.rng, self.truth.catalog.len(), self.cfg.n_o);
        let items = picks.into_iter().map(|c| self.truth.catalog[c].clone()).collect();
        (user, items)
    }

    fn random_arrangement(&mut self) -> Vec<usize> {
        index::sample(&mut self.rng, self.cfg.n_o, self.cfg.n_d).into_vec()
    }

    /// Samples clicks and files the list into the user's history if clicked.
    fn show(&mut self, user: usize, time: u64, shown: Vec<Vec<u32>>) -> Result<Vec<u8>> {
        let probs = self.truth.click_probs(user as u64, time, &shown)?;
        let clicks: Vec<u8> = probs.iter().map(|&p| u8::from(self.rng.random::<f64>() < p)).collect();
        if clicks.contains(&1) {
            let h = &mut self.histories[user];
            h.insert(0, shown);
            h.truncate(self.cfg.history_len);
        }
        Ok(clicks)
    }
}

/// Simulates `burn_in` randomly displayed requests, fits the point-wise
/// model on them, then logs `n_requests` requests whose candidates are
/// sorted by that model's pCTR and displayed ε-greedily.
pub fn generate_synthetic_dataset(cfg: &WorldConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let horizon = (cfg.burn_in + cfg.n_requests) as u64;
    let mut world_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[1]));
    let truth = GroundTruthModel::sample(
        &WorldShape {
            vocab_sizes: &cfg.vocab_sizes,
            n_d: cfg.n_d,
            n_users: cfg.n_users,
            context_strength: cfg.context_strength,
            position_decay: cfg.position_decay,
            drift: cfg.drift,
            preference_scale: cfg.preference_scale,
            horizon,
        },
        &mut world_rng,
    )?;
    let mut sim = Simulator {
        cfg,
        truth: &truth,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[2])),
        histories: vec![Vec::new(); cfg.n_users],
    };

    let mut burn = Vec::with_capacity(cfg.burn_in);
    for t in 0..cfg.burn_in as u64 {
        let (user, feats) = sim.draw_request();
        let behaviors = sim.behaviors(user);
        let order = sim.random_arrangement();
        let shown: Vec<Vec<u32>> = order.iter().map(|&i| feats[i].clone()).collect();
        let clicks = sim.show(user, t, shown)?;
        let items = feats
            .into_iter()
            .map(|features| Item { features, point_pctr: 0.5 })
            .collect();
        burn.push(TrainingExample::new(t, CandidateSet::new(items)?, Permutation::new(order)?, clicks, behaviors)?);
    }
    let mut pw_cfg = cfg.pointwise.clone();
    pw_cfg.n_positions = cfg.n_d;
    pw_cfg.history_len = cfg.history_len;
    pw_cfg.seed = mix_seed(cfg.seed, &[3]);
    let point_model = if burn.is_empty() {
        crate::training::PointwiseModel::new(&cfg.vocab_sizes, pw_cfg)?
    } else {
        train_pointwise_baseline(&burn, &cfg.vocab_sizes, &pw_cfg)?
    };
    log::info!("burn-in: {} requests, point-wise model fitted", burn.len());

    let mut records = Vec::with_capacity(cfg.n_requests);
    for r in 0..cfg.n_requests {
        let t = (cfg.burn_in + r) as u64;
        let (user, feats) = sim.draw_request();
        let behaviors = sim.behaviors(user);
        let rows: Vec<PointRow<'_>> = feats
            .iter()
            .map(|f| PointRow {
                features: f,
                behaviors: &behaviors,
                position: 0,
            })
            .collect();
        let pctr: Vec<f64> = point_model
            .predict_rows(&rows)?
            .into_iter()
            .map(|p| round_sig9(p.clamp(1e-6, 1.0 - 1e-6)))
            .collect();
        let mut items: Vec<Item> = feats
            .into_iter()
            .zip(pctr)
            .map(|(features, point_pctr)| Item { features, point_pctr })
            .collect();
        items.sort_by(|a, b| b.point_pctr.total_cmp(&a.point_pctr));
        let displayed: Vec<usize> = if sim.rng.random::<f64>() < cfg.exploration {
            sim.random_arrangement()
        } else {
            (0..cfg.n_d).collect()
        };
        let shown: Vec<Vec<u32>> = displayed.iter().map(|&i| items[i].features.clone()).collect();
        let clicks = sim.show(user, t, shown)?;
        records.push(LogRecord {
            request_id: t,
            user_id: user as u64,
            items,
            displayed,
            clicks,
            behaviors: behaviors.0,
        });
    }
    Ok(SyntheticData {
        config: cfg.clone(),
        truth,
        records,
        point_model,
    })
}
