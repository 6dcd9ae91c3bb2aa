use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{contrastive_node, epoch_order, mix_seed, PierModel, TrainConfig, TrainingExample};
use crate::error::{PierError, Result};
use crate::numerics::{Adam, AdamConfig, Gradients, Graph, Var};
use crate::ocpm::PermInput;
use crate::permgen::{enumerate_permutations, Permutation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    /// Batch mean of `l1 + α·l2`.
    pub loss: f64,
    pub bce: f64,
    pub contrastive: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossCurve {
    pub steps: Vec<StepRecord>,
}

impl LossCurve {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,step,loss,bce,contrastive\n");
        for s in &self.steps {
            let phase = match s.phase {
                Phase::Pretrain => "pretrain",
                Phase::Joint => "joint",
            };
            out.push_str(&format!("{phase},{},{},{},{},{}\n", s.epoch, s.step, s.loss, s.bce, s.contrastive));
        }
        out
    }
}

/// Draws `k` indices uniformly without replacement from `0..n` minus `selected`.
pub fn sample_unselected(n: usize, selected: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut taken = vec![false; n];
    for &s in selected {
        taken[s] = true;
    }
    let complement: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    if k > complement.len() {
        return Err(PierError::Contract(format!(
            "cannot draw {k} unselected permutations from {}",
            complement.len()
        )));
    }
    Ok(index::sample(rng, complement.len(), k).into_iter().map(|i| complement[i]).collect())
}

struct ExampleLoss {
    node: Var,
    bce: f64,
    contrastive: f64,
}

/// Optimizer state carried across phases, so a joint epoch continues the
/// same Adam moments a pretrain epoch would.
pub struct Trainer {
    pub config: TrainConfig,
    adam: Adam,
    epoch: usize,
    pub curve: LossCurve,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        });
        Ok(Self {
            config,
            adam,
            epoch: 0,
            curve: LossCurve::default(),
        })
    }

    /// Epoch counter used for shuffling; shared by both phases.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn pretrain_epoch(&mut self, model: &mut PierModel, examples: &[TrainingExample]) -> Result<()> {
        self.run_epoch(model, examples, Phase::Pretrain, None)
    }

    pub fn joint_epoch(&mut self, model: &mut PierModel, examples: &[TrainingExample]) -> Result<()> {
        let cap = self.config.joint_examples_per_epoch;
        self.run_epoch(model, examples, Phase::Joint, cap)
    }

    fn run_epoch(&mut self, model: &mut PierModel, examples: &[TrainingExample], phase: Phase, cap: Option<usize>) -> Result<()> {
        if examples.is_empty() {
            return Err(PierError::Contract("training on an empty dataset".into()));
        }
        let mut order = epoch_order(examples.len(), self.config.seed, self.epoch);
        if let Some(cap) = cap {
            order.truncate(cap.max(1));
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in order.chunks(self.config.batch_size) {
            let rec = self.step(model, examples, batch, phase)?;
            sum += rec.loss * batch.len() as f64;
            n += batch.len();
            log::debug!("{phase:?} epoch {} step {}: loss {:.5}", rec.epoch, rec.step, rec.loss);
            self.curve.steps.push(rec);
        }
        log::info!("{phase:?} epoch {} done: mean loss {:.5} over {n} examples", self.epoch, sum / n as f64);
        self.epoch += 1;
        Ok(())
    }

    fn step(&mut self, model: &mut PierModel, examples: &[TrainingExample], batch: &[usize], phase: Phase) -> Result<StepRecord> {
        let cfg = &self.config;
        let scale = 1.0 / batch.len() as f64;
        let step = self.adam.steps();
        let epoch = self.epoch;
        let shared: &PierModel = model;
        let chunk = |ids: &[usize]| -> Result<(Gradients, f64, f64)> {
            let mut grads = Gradients::zeros_like(&shared.store);
            let (mut bce, mut con) = (0.0, 0.0);
            for &i in ids {
                let ex = &examples[i];
                let mut g = Graph::new(&shared.store);
                let out = match phase {
                    Phase::Pretrain => pretrain_loss(shared, &mut g, ex)?,
                    Phase::Joint => {
                        let seed = mix_seed(cfg.seed, &[epoch as u64, i as u64, 0x101]);
                        joint_loss(shared, &mut g, ex, cfg, seed)?
                    }
                };
                let total = g.scalar(out.node);
                if !total.is_finite() {
                    return Err(PierError::Diverged {
                        step,
                        example: ex.request_id.to_string(),
                    });
                }
                let scaled = g.scale(out.node, scale);
                g.backward_into(scaled, &mut grads)?;
                bce += out.bce;
                con += out.contrastive;
            }
            Ok((grads, bce, con))
        };
        let parts: Vec<Result<(Gradients, f64, f64)>> = if cfg.parallel {
            batch.par_chunks(cfg.chunk_size).map(chunk).collect()
        } else {
            batch.chunks(cfg.chunk_size).map(chunk).collect()
        };
        let mut total: Option<Gradients> = None;
        let (mut bce, mut con) = (0.0, 0.0);
        for part in parts {
            let (g, b, c) = part?;
            bce += b;
            con += c;
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.add_assign(&g),
            }
        }
        let grads = total.expect("nonempty batch");
        if !grads.is_finite() {
            return Err(PierError::Diverged {
                step,
                example: format!("batch of {} starting at request {}", batch.len(), examples[batch[0]].request_id),
            });
        }
        self.adam.step(&mut model.store, &grads);
        let (bce, con) = (bce * scale, con * scale);
        Ok(StepRecord {
            phase,
            epoch,
            step,
            loss: bce + cfg.alpha * con,
            bce,
            contrastive: con,
        })
    }
}

fn pretrain_loss(model: &PierModel, g: &mut Graph<'_>, ex: &TrainingExample) -> Result<ExampleLoss> {
    let items = ex.candidate_set.features_of(&ex.displayed);
    let scores = ex.candidate_set.pctrs_of(&ex.displayed);
    let hist = model.history(&ex.behaviors);
    let preds = model.ocpm.forward(g, &model.table, &[PermInput { items: &items, point_scores: &scores }], &hist)?;
    let node = g.bce(preds, &ex.labels())?;
    Ok(ExampleLoss {
        node,
        bce: g.scalar(node),
        contrastive: 0.0,
    })
}

/// Displayed permutation, then K selector picks, then K sampled others.
fn joint_loss(model: &PierModel, g: &mut Graph<'_>, ex: &TrainingExample, cfg: &TrainConfig, seed: u64) -> Result<ExampleLoss> {
    let cands = &ex.candidate_set;
    let perms = enumerate_permutations(cands.len(), ex.displayed.len())?;
    let k = cfg.k;
    if 2 * k > perms.len() {
        return Err(PierError::Contract(format!(
            "K = {k} exceeds half of the {} candidate permutations",
            perms.len()
        )));
    }
    let selected = model
        .fpsm
        .select_top_k_indices(cands, &perms, k, &ex.behaviors, &model.table, &model.store, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unselected = sample_unselected(perms.len(), &selected, k, &mut rng)?;

    let chosen: Vec<&Permutation> = std::iter::once(&ex.displayed)
        .chain(selected.iter().map(|&i| &perms[i]))
        .chain(unselected.iter().map(|&i| &perms[i]))
        .collect();
    let feats: Vec<Vec<Vec<u32>>> = chosen.iter().map(|p| cands.features_of(p)).collect();
    let scores: Vec<Vec<f64>> = chosen.iter().map(|p| cands.pctrs_of(p)).collect();
    let targets: Vec<PermInput<'_>> = feats
        .iter()
        .zip(&scores)
        .map(|(items, s)| PermInput { items, point_scores: s })
        .collect();
    let hist = model.history(&ex.behaviors);
    let preds = model.ocpm.forward(g, &model.table, &targets, &hist)?;
    let displayed = g.slice_rows(preds, 0, 1)?;
    let l1 = g.bce(displayed, &ex.labels())?;
    let l2 = contrastive_node(g, preds, 1, 1 + k, k, cfg.contrastive)?;
    let weighted = g.scale(l2, cfg.alpha);
    let node = g.add(l1, weighted)?;
    Ok(ExampleLoss {
        node,
        bce: g.scalar(l1),
        contrastive: g.scalar(l2),
    })
}

/// Per-example `l1 + α·l2` node, with the unselected draw seeded by `seed`.
/// Selection reads `model.store`, while the differentiable part reads
/// whatever store `g` was built on; grad checks perturb only the latter.
pub fn joint_objective(model: &PierModel, g: &mut Graph<'_>, ex: &TrainingExample, cfg: &TrainConfig, seed: u64) -> Result<Var> {
    Ok(joint_loss(model, g, ex, cfg, seed)?.node)
}

/// Loss₁ on displayed permutations for `config.pretrain_epochs` epochs.
pub fn pretrain_ocpm(model: &mut PierModel, examples: &[TrainingExample], config: &TrainConfig) -> Result<LossCurve> {
    let mut t = Trainer::new(config.clone())?;
    for _ in 0..config.pretrain_epochs {
        t.pretrain_epoch(model, examples)?;
    }
    Ok(t.curve)
}

/// Loss₁ + α·Loss₂ for `config.joint_epochs` epochs, starting from `model`.
pub fn joint_train(model: &mut PierModel, examples: &[TrainingExample], config: &TrainConfig) -> Result<LossCurve> {
    let mut t = Trainer::new(config.clone())?;
    t.set_epoch(config.pretrain_epochs);
    for _ in 0..config.joint_epochs {
        t.joint_epoch(model, examples)?;
    }
    Ok(t.curve)
}
