use serde::{Deserialize, Serialize};

use super::metrics::{bench_cost, CostSummary};
use super::pipeline::{self, Generator, PipelineConfig};
use super::report::{run_id, MetricsReport};
use crate::data::{to_examples, GroundTruthModel, LogRecord, WorldConfig};
use crate::error::{PierError, Result};
use crate::fpsm::FpsmConfig;
use crate::ocpm::OcpmConfig;
use crate::permgen::{BehaviorSequence, Permutation};
use crate::training::{mix_seed, LossCurve, ModelConfig, PierModel, PointwiseConfig, TrainConfig, Trainer};

/// Evaluator widths and selector settings; vocabularies come from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    pub mlp1: Vec<usize>,
    pub mlp2: Vec<usize>,
    pub mlp_att: Vec<usize>,
    pub mlp3: Vec<usize>,
    pub use_oau: bool,
    pub use_tau: bool,
    pub fpsm: FpsmConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let o = OcpmConfig::new(8, 1, 1);
        Self {
            dim: 8,
            mlp1: o.mlp1,
            mlp2: o.mlp2,
            mlp_att: o.mlp_att,
            mlp3: o.mlp3,
            use_oau: true,
            use_tau: true,
            fpsm: FpsmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `None` evaluates every generator.
    pub generator: Option<Generator>,
    pub k: usize,
    /// Requests cycled through when timing.
    pub bench_requests: usize,
    pub repetitions: usize,
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            generator: None,
            k: 100,
            bench_requests: 50,
            repetitions: 30,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.0, 0.01, 0.05, 0.1, 0.3, 0.5],
            ks: vec![50, 100, 200],
        }
    }
}

/// Everything one run needs. The top-level `seed` is propagated into every
/// component by [`ExperimentConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    /// The last `n_test` generated requests are held out.
    pub n_test: usize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub baseline: PointwiseConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig {
                n_requests: 55_000,
                ..WorldConfig::default()
            },
            n_test: 5_000,
            model: ModelSpec::default(),
            train: TrainConfig {
                joint_examples_per_epoch: Some(8_192),
                ..TrainConfig::default()
            },
            baseline: PointwiseConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.world.seed = self.seed;
        c.train.seed = mix_seed(self.seed, &[10]);
        c.baseline.seed = mix_seed(self.seed, &[11]);
        c.baseline.n_positions = c.world.n_d;
        c.baseline.history_len = c.world.history_len;
        c.model.fpsm.history_len = c.world.history_len;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.n_test == 0 || self.n_test >= self.world.n_requests {
            return Err(PierError::Config(format!(
                "n_test must be in 1..{}, got {}",
                self.world.n_requests, self.n_test
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let mut cfg = ModelConfig::new(self.world.vocab_sizes.clone(), m.dim, self.world.n_d);
        cfg.ocpm.mlp1 = m.mlp1.clone();
        cfg.ocpm.mlp2 = m.mlp2.clone();
        cfg.ocpm.mlp_att = m.mlp_att.clone();
        cfg.ocpm.mlp3 = m.mlp3.clone();
        cfg.ocpm.use_oau = m.use_oau;
        cfg.ocpm.use_tau = m.use_tau;
        cfg.fpsm = m.fpsm;
        cfg.init_seed = mix_seed(self.seed, &[12]);
        cfg
    }

    /// Generators an `eval` or `bench` run covers.
    pub fn generators(&self) -> Vec<Generator> {
        self.eval.generator.map_or_else(|| Generator::ALL.to_vec(), |g| vec![g])
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            generator: self.eval.generator.unwrap_or(Generator::Fpsm),
            k: self.eval.k,
            n_d: self.world.n_d,
            seed: mix_seed(self.seed, &[13]),
            parallel: self.eval.parallel,
        }
    }
}

/// `(train, test)` with the last `n_test` records held out.
pub fn split(records: &[LogRecord], n_test: usize) -> Result<(&[LogRecord], &[LogRecord])> {
    if n_test >= records.len() {
        return Err(PierError::Config(format!("n_test {n_test} leaves no training data out of {}", records.len())));
    }
    Ok(records.split_at(records.len() - n_test))
}

/// Pretrain then joint-train, continuing one optimizer state.
pub fn train_pier(model: &mut PierModel, train: &[LogRecord], cfg: &TrainConfig) -> Result<LossCurve> {
    let examples = to_examples(train)?;
    let mut t = Trainer::new(cfg.clone())?;
    for _ in 0..cfg.pretrain_epochs {
        t.pretrain_epoch(model, &examples)?;
    }
    for _ in 0..cfg.joint_epochs {
        t.joint_epoch(model, &examples)?;
    }
    Ok(t.curve)
}

/// Prediction metrics plus hit ratio of `pipe` on `test`.
pub fn evaluate(
    model: &PierModel,
    test: &[LogRecord],
    bests: &[Permutation],
    pipe: &PipelineConfig,
    label: &str,
    snapshot: &serde_json::Value,
    fingerprint: &[u8],
) -> Result<MetricsReport> {
    let slots = pipeline::predict_displayed(model, test)?;
    let hr = pipeline::hit_ratio(model, pipe, test, bests)?;
    let snap = serde_json::to_vec(snapshot).expect("snapshot serializes");
    Ok(MetricsReport {
        run_id: run_id(&[&snap, fingerprint, label.as_bytes(), pipe.generator.name().as_bytes()]),
        label: label.into(),
        generator: pipe.generator.name().into(),
        k: pipe.k,
        n_requests: test.len(),
        auc: Some(slots.auc()?),
        logloss: Some(slots.logloss()?),
        hr_at_1: Some(hr),
        mean_cost_ms: None,
        p99_cost_ms: None,
        config: snapshot.clone(),
    })
}

/// Per-request latency of generate → select → evaluate → argmax.
pub fn bench_pipeline(model: &PierModel, pipe: &PipelineConfig, requests: &[LogRecord], repetitions: usize) -> Result<CostSummary> {
    let prepared: Vec<_> = requests
        .iter()
        .map(|r| Ok((r.request_id, r.candidate_set()?, BehaviorSequence(r.behaviors.clone()))))
        .collect::<Result<_>>()?;
    bench_cost(&prepared, repetitions, |(id, cands, behaviors)| {
        pipeline::rerank(model, pipe, *id, cands, behaviors).map(|_| ())
    })
}

pub fn oracle(test: &[LogRecord], n_d: usize, truth: &GroundTruthModel) -> Result<Vec<Permutation>> {
    pipeline::oracle_bests(test, n_d, truth)
}

/// Runs the pretrain → joint schedule at each α and reports AUC and HR.
/// Every α starts from the same pretrained state.
pub fn sweep_alpha(
    pretrained: &PierModel,
    train: &[LogRecord],
    test: &[LogRecord],
    bests: &[Permutation],
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricsReport>> {
    let examples = to_examples(train)?;
    let mut out = Vec::new();
    for &alpha in &cfg.sweep.alphas {
        let mut model = pretrained.clone();
        let tc = TrainConfig { alpha, ..cfg.train.clone() };
        let mut t = Trainer::new(tc.clone())?;
        t.set_epoch(tc.pretrain_epochs);
        for _ in 0..tc.joint_epochs {
            t.joint_epoch(&mut model, &examples)?;
        }
        let snapshot = serde_json::json!({ "alpha": alpha, "k": tc.k, "seed": cfg.seed });
        let r = evaluate(&model, test, bests, &cfg.pipeline(), &format!("alpha={alpha}"), &snapshot, &[])?;
        log::info!("sweep alpha={alpha}: auc {:?} hr {:?}", r.auc, r.hr_at_1);
        out.push(r);
    }
    Ok(out)
}

/// Joint-trains with each K and evaluates FPSM at that K, timing the pipeline.
pub fn sweep_k(
    pretrained: &PierModel,
    train: &[LogRecord],
    test: &[LogRecord],
    bests: &[Permutation],
    cfg: &ExperimentConfig,
) -> Result<Vec<MetricsReport>> {
    let examples = to_examples(train)?;
    let mut out = Vec::new();
    for &k in &cfg.sweep.ks {
        let mut model = pretrained.clone();
        let tc = TrainConfig { k, ..cfg.train.clone() };
        let mut t = Trainer::new(tc.clone())?;
        t.set_epoch(tc.pretrain_epochs);
        for _ in 0..tc.joint_epochs {
            t.joint_epoch(&mut model, &examples)?;
        }
        let pipe = PipelineConfig {
            k,
            generator: Generator::Fpsm,
            ..cfg.pipeline()
        };
        let snapshot = serde_json::json!({ "alpha": tc.alpha, "k": k, "seed": cfg.seed });
        let mut r = evaluate(&model, test, bests, &pipe, &format!("K={k}"), &snapshot, &[])?;
        let n = cfg.eval.bench_requests.clamp(1, test.len());
        let cost = bench_pipeline(&model, &pipe, &test[..n], cfg.eval.repetitions)?;
        r.mean_cost_ms = Some(cost.mean_ms);
        r.p99_cost_ms = Some(cost.p99_ms);
        out.push(r);
    }
    Ok(out)
}
