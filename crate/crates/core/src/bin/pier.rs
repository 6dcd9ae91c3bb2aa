use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::Value;

use pier::data::{generate_synthetic_dataset, load_jsonl, to_examples, write_jsonl, LogRecord, Sidecar};
use pier::eval::{
    bench_pipeline, evaluate, format_table, load_checkpoint, oracle, pipeline, run_id, save_checkpoint, split, sweep_alpha, sweep_k,
    ExperimentConfig, Generator, MetricsReport,
};
use pier::training::{train_pointwise_baseline, LossCurve, PierModel, Trainer};
use pier::PierError;

const DATA_FILE: &str = "data.jsonl";
const TRUTH_FILE: &str = "truth.json";

#[derive(Parser, Debug)]
#[command(name = "pier", version, about = "Permutation generation and evaluation for list re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic log; writes data.jsonl, truth.json and config.json.
    GenData,
    /// Fit the evaluator on displayed lists; writes pretrained.ckpt and pretrain_loss.csv.
    Pretrain,
    /// Pretrain (or start from --checkpoint) then joint-train; writes model.ckpt and train_loss.csv.
    Train,
    /// Held-out AUC, LogLoss and HR@1; writes metrics.json and metrics.txt.
    Eval,
    /// Per-request latency of each generator's pipeline; writes bench.json and bench.txt.
    Bench,
    /// Alpha and K sweeps from a pretrained model; writes sweep.json and sweep.txt.
    Sweep,
}

#[derive(Args, Debug)]
struct Flags {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true, value_parser = parse_generator)]
    generator: Option<Generator>,
    /// Output directory.
    #[arg(long, global = true, default_value = "pier-out")]
    out: PathBuf,
    /// Dataset directory holding data.jsonl and truth.json; defaults to --out.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Use all cores for training, evaluation and timing.
    #[arg(long, global = true)]
    parallel: bool,
}

fn parse_generator(s: &str) -> Result<Generator, String> {
    s.parse().map_err(|e: PierError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIER_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already name their cause; anyhow context chains do not
            let (kind, msg) = match e.downcast_ref::<PierError>() {
                Some(p) => (p.kind(), p.to_string()),
                None => ("other", format!("{e:#}")),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.flags)?;
    let f = &cli.flags;
    fs::create_dir_all(&f.out).with_context(|| format!("creating {}", f.out.display()))?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &f.out),
        Command::Pretrain => {
            let ds = Dataset::load(f, &cfg)?;
            let (train, _) = split(&ds.records, ds.cfg.n_test)?;
            let mut model = PierModel::new(ds.cfg.model_config())?;
            let mut t = Trainer::new(ds.cfg.train.clone())?;
            let examples = to_examples(train)?;
            for _ in 0..ds.cfg.train.pretrain_epochs {
                t.pretrain_epoch(&mut model, &examples)?;
            }
            write_model(&model, &t.curve, &f.out, "pretrained.ckpt", "pretrain_loss.csv")
        }
        Command::Train => {
            let ds = Dataset::load(f, &cfg)?;
            let (train, _) = split(&ds.records, ds.cfg.n_test)?;
            let examples = to_examples(train)?;
            let mut t = Trainer::new(ds.cfg.train.clone())?;
            let mut model = match &f.checkpoint {
                Some(path) => {
                    info!("starting from {}; optimizer state restarts", path.display());
                    t.set_epoch(ds.cfg.train.pretrain_epochs);
                    load_model(path, &ds.cfg)?
                }
                None => {
                    let mut m = PierModel::new(ds.cfg.model_config())?;
                    for _ in 0..ds.cfg.train.pretrain_epochs {
                        t.pretrain_epoch(&mut m, &examples)?;
                    }
                    m
                }
            };
            for _ in 0..ds.cfg.train.joint_epochs {
                t.joint_epoch(&mut model, &examples)?;
            }
            write_model(&model, &t.curve, &f.out, "model.ckpt", "train_loss.csv")
        }
        Command::Eval => {
            let ds = Dataset::load(f, &cfg)?;
            let (path, model) = model_for(f, &ds.cfg, "model.ckpt")?;
            let reports = eval(&ds, &model, &fs::read(&path).with_context(|| path.display().to_string())?)?;
            write_reports(&reports, &f.out, "metrics")
        }
        Command::Bench => {
            let ds = Dataset::load(f, &cfg)?;
            let (_, model) = model_for(f, &ds.cfg, "model.ckpt")?;
            let reports = bench(&ds, &model)?;
            write_reports(&reports, &f.out, "bench")
        }
        Command::Sweep => {
            let ds = Dataset::load(f, &cfg)?;
            let (train, test) = split(&ds.records, ds.cfg.n_test)?;
            let pretrained = match &f.checkpoint {
                Some(path) => load_model(path, &ds.cfg)?,
                None => {
                    let mut m = PierModel::new(ds.cfg.model_config())?;
                    let mut t = Trainer::new(ds.cfg.train.clone())?;
                    let examples = to_examples(train)?;
                    for _ in 0..ds.cfg.train.pretrain_epochs {
                        t.pretrain_epoch(&mut m, &examples)?;
                    }
                    m
                }
            };
            let bests = oracle(test, ds.cfg.world.n_d, &ds.sidecar.truth)?;
            let mut reports = sweep_alpha(&pretrained, train, test, &bests, &ds.cfg)?;
            reports.extend(sweep_k(&pretrained, train, test, &bests, &ds.cfg)?);
            write_reports(&reports, &f.out, "sweep")
        }
    }
}

/// Config file (or defaults) with flag overrides applied; a flag that
/// changes a value the file set is logged.
fn resolve_config(f: &Flags) -> Result<ExperimentConfig> {
    let mut cfg = match &f.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| PierError::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| PierError::Parse {
                line: e.line(),
                field: "config".into(),
                detail: format!("{}: {e}", path.display()),
            })?
        }
        None => ExperimentConfig::default(),
    };
    let from_file = f.config.is_some();
    let set = |name: &str, old: String, new: String| {
        if from_file && old != new {
            info!("flag --{name}={new} overrides config value {old}");
        }
    };
    if let Some(seed) = f.seed {
        set("seed", cfg.seed.to_string(), seed.to_string());
        cfg.seed = seed;
    }
    if let Some(alpha) = f.alpha {
        set("alpha", cfg.train.alpha.to_string(), alpha.to_string());
        cfg.train.alpha = alpha;
    }
    if let Some(k) = f.k {
        set("k", cfg.train.k.to_string(), k.to_string());
        cfg.train.k = k;
        cfg.eval.k = k;
    }
    if let Some(g) = f.generator {
        set("generator", cfg.eval.generator.map_or("all", |g| g.name()).into(), g.name().into());
        cfg.eval.generator = Some(g);
    }
    if f.parallel {
        set("parallel", cfg.eval.parallel.to_string(), "true".into());
        cfg.eval.parallel = true;
        cfg.train.parallel = true;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = generate_synthetic_dataset(&cfg.world)?;
    write_jsonl(&data.records, &out.join(DATA_FILE))?;
    data.sidecar().save(&out.join(TRUTH_FILE))?;
    write_text(&out.join("config.json"), &pretty(&serde_json::to_value(cfg)?))?;
    info!("wrote {} requests to {}", data.records.len(), out.join(DATA_FILE).display());
    Ok(())
}

struct Dataset {
    /// Run config with the world replaced by the one that generated the data.
    cfg: ExperimentConfig,
    sidecar: Sidecar,
    records: Vec<LogRecord>,
}

impl Dataset {
    fn load(f: &Flags, cfg: &ExperimentConfig) -> Result<Self> {
        let dir = f.data.as_deref().unwrap_or(&f.out);
        let sidecar = Sidecar::load(&dir.join(TRUTH_FILE))?;
        let records = load_jsonl(&dir.join(DATA_FILE), &sidecar.schema())?;
        let mut cfg = cfg.clone();
        if cfg.world != sidecar.world {
            info!("world settings taken from {}", dir.join(TRUTH_FILE).display());
            cfg.world = sidecar.world.clone();
        }
        if cfg.n_test >= records.len() {
            let n = (records.len() / 10).max(1);
            warn!("n_test {} leaves no training data; holding out {n}", cfg.n_test);
            cfg.n_test = n;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(Self { cfg, sidecar, records })
    }
}

fn load_model(path: &Path, cfg: &ExperimentConfig) -> Result<PierModel> {
    let model = load_checkpoint(path)?;
    let want = cfg.model_config();
    if model.config.vocab_sizes != want.vocab_sizes || model.config.n_items() != want.n_items() {
        return Err(PierError::Config(format!("checkpoint {} was trained for a different world", path.display())).into());
    }
    Ok(model)
}

fn model_for(f: &Flags, cfg: &ExperimentConfig, default: &str) -> Result<(PathBuf, PierModel)> {
    let path = f.checkpoint.clone().unwrap_or_else(|| f.out.join(default));
    let model = load_model(&path, cfg)?;
    Ok((path, model))
}

fn write_model(model: &PierModel, curve: &LossCurve, out: &Path, ckpt: &str, csv: &str) -> Result<()> {
    save_checkpoint(model, &out.join(ckpt))?;
    write_text(&out.join(csv), &curve.to_csv())?;
    info!("wrote {} and {} ({} steps)", out.join(ckpt).display(), out.join(csv).display(), curve.steps.len());
    Ok(())
}

fn label(g: Generator) -> &'static str {
    match g {
        Generator::Full => "Full-Permutation",
        Generator::Beam => "Beam-Search",
        Generator::Random => "Random",
        Generator::Fpsm => "PIER",
    }
}

fn eval(ds: &Dataset, model: &PierModel, fingerprint: &[u8]) -> Result<Vec<MetricsReport>> {
    let cfg = &ds.cfg;
    let (train, test) = split(&ds.records, cfg.n_test)?;
    let bests = oracle(test, cfg.world.n_d, &ds.sidecar.truth)?;
    let snapshot = serde_json::to_value(cfg)?;
    let mut reports = Vec::new();

    let baseline = train_pointwise_baseline(&to_examples(train)?, &cfg.world.vocab_sizes, &cfg.baseline)?;
    let slots = pipeline::predict_displayed_pointwise(&baseline, test)?;
    let snap_bytes = serde_json::to_vec(&snapshot)?;
    reports.push(MetricsReport {
        run_id: run_id(&[&snap_bytes, b"DNN"]),
        label: "DNN".into(),
        generator: "-".into(),
        k: cfg.eval.k,
        n_requests: test.len(),
        auc: Some(slots.auc()?),
        logloss: Some(slots.logloss()?),
        hr_at_1: None,
        mean_cost_ms: None,
        p99_cost_ms: None,
        config: snapshot.clone(),
    });
    for g in cfg.generators() {
        let pipe = pier::eval::PipelineConfig { generator: g, ..cfg.pipeline() };
        let r = evaluate(model, test, &bests, &pipe, label(g), &snapshot, fingerprint)?;
        info!("{}: auc {:?} hr {:?}", r.label, r.auc, r.hr_at_1);
        reports.push(r);
    }
    Ok(reports)
}

fn bench(ds: &Dataset, model: &PierModel) -> Result<Vec<MetricsReport>> {
    let cfg = &ds.cfg;
    let (_, test) = split(&ds.records, cfg.n_test)?;
    let n = cfg.eval.bench_requests.clamp(1, test.len());
    let snapshot = serde_json::to_value(cfg)?;
    let snap_bytes = serde_json::to_vec(&snapshot)?;
    let mut reports = Vec::new();
    for g in cfg.generators() {
        let pipe = pier::eval::PipelineConfig { generator: g, ..cfg.pipeline() };
        let cost = bench_pipeline(model, &pipe, &test[..n], cfg.eval.repetitions)?;
        info!("{}: mean {:.3} ms p99 {:.3} ms", label(g), cost.mean_ms, cost.p99_ms);
        reports.push(MetricsReport {
            run_id: run_id(&[&snap_bytes, g.name().as_bytes(), b"bench"]),
            label: label(g).into(),
            generator: g.name().into(),
            k: pipe.k,
            n_requests: n,
            auc: None,
            logloss: None,
            hr_at_1: None,
            mean_cost_ms: Some(cost.mean_ms),
            p99_cost_ms: Some(cost.p99_ms),
            config: snapshot.clone(),
        });
    }
    Ok(reports)
}

fn write_reports(reports: &[MetricsReport], out: &Path, stem: &str) -> Result<()> {
    write_text(&out.join(format!("{stem}.json")), &pretty(&serde_json::to_value(reports)?))?;
    let table = format_table(reports);
    write_text(&out.join(format!("{stem}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PierError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}
