//! Command-line entry point shared by the `equicaps` binary and tests.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::capsnet::ModelConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    object_views, pose_manipulation_demo, retrieval_metrics, run_probe, DemoConfig, DemoMode, Distance, FeatureSource,
    ProbeConfig, ProbeTask, RetrievalConfig, ViewFeatures,
};
use crate::selfcheck::{self, LossTerm, LossToy, ModelToy};
use crate::synthscene::{generate_dataset, Dataset, DatasetConfig, Split};
use crate::tensor::gradcheck::{self, GradCheckOptions};
use crate::tensor::checkpoint::write_atomic;
use crate::training::{self, load_model_params, TrainConfig, TrainOptions, TrainState, CHECKPOINT_FILE};

pub const RUN_MANIFEST: &str = "run.json";

fn version_text() -> &'static str {
    concat!(
        env!("CARGO_PKG_VERSION"),
        " (",
        env!("CARGO_PKG_NAME"),
        ", built for ",
        env!("EQUICAPS_TARGET"),
        ", ",
        env!("EQUICAPS_PROFILE"),
        ")"
    )
}

#[derive(Parser, Debug)]
#[command(name = "equicaps", version = version_text(), about = "Equivariant capsule embeddings on synthetic 3D scenes")]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 is the deterministic reference.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic dataset to disk.
    GenerateDataset(GenerateArgs),
    /// Pretrain the encoder and capsule projector.
    Train(TrainArgs),
    /// Train probes on frozen features.
    Evaluate(EvaluateArgs),
    /// Equivariance retrieval metrics.
    Retrieve(RetrieveArgs),
    /// Rotate an object in embedding space and retrieve views.
    DemoPose(DemoArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run the built-in correctness suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub instances: usize,
    #[arg(long, default_value_t = 25)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON or TOML file mirroring the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub capsules: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from the checkpoint and state in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training configuration of the checkpoint; defaults to `config.json`
    /// next to it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated probe tasks.
    #[arg(long, value_delimiter = ',', default_value = "classification,rotation,translation-object,translation-base,colour")]
    pub tasks: Vec<String>,
    #[arg(long, default_value = "repr")]
    pub source: String,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 25)]
    pub pairs_per_instance: usize,
    /// Report file (`.json`) or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    /// Views of the query's own object.
    Instance,
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = PoolArg::Instance)]
    pub pool: PoolArg,
    #[arg(long, default_value = "euclidean")]
    pub distance: String,
    #[arg(long, default_value_t = 5000)]
    pub max_pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub instance: usize,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// x, y, z or a comma-separated vector.
    #[arg(long, default_value = "z")]
    pub axis: String,
    #[arg(long, default_value_t = 5.0)]
    pub step: f64,
    #[arg(long, default_value_t = 90.0)]
    pub range: f64,
    #[arg(long, default_value = "inverse")]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    /// Dataset for the metric oracle; the default mini dataset is generated
    /// in memory otherwise.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config: Value,
    pub dataset_hash: Option<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Where a subcommand's report and run manifest go: `--out x.json` names the
/// report file directly, anything else is a directory.
fn output_paths(out: &Path, report: &str) -> Result<(PathBuf, PathBuf)> {
    if out.extension().is_some_and(|e| e == "json") {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        Ok((out.to_path_buf(), dir.join(format!("{stem}.{RUN_MANIFEST}"))))
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok((out.join(report), out.join(RUN_MANIFEST)))
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

struct Run {
    subcommand: &'static str,
    seed: u64,
    threads: usize,
    started: f64,
}

impl Run {
    fn finish(&self, path: &Path, config: Value, dataset_hash: Option<String>, outputs: Vec<PathBuf>) -> Result<()> {
        let m = RunManifest {
            subcommand: self.subcommand.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: self.seed,
            threads: self.threads,
            config,
            dataset_hash,
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        write_json(path, &m)
    }
}

fn model_config(args: &ModelArgs) -> Result<ModelConfig> {
    let path = match &args.config {
        Some(p) => p.clone(),
        None => args
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.json"),
    };
    Ok(TrainConfig::load(&path, None)?.model)
}

struct Loaded {
    model: ModelConfig,
    params: crate::tensor::ParamStore<f32>,
    dataset: Dataset,
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let model = model_config(args)?;
    let params = load_model_params(&args.checkpoint)?;
    eprintln!("loading dataset {}", args.dataset.display());
    let dataset = Dataset::load(&args.dataset)?;
    Ok(Loaded { model, params, dataset })
}

fn parse_axis(s: &str) -> Result<[f64; 3]> {
    match s {
        "x" => Ok([1.0, 0.0, 0.0]),
        "y" => Ok([0.0, 1.0, 0.0]),
        "z" => Ok([0.0, 0.0, 1.0]),
        _ => {
            let v: Vec<f64> = s
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("invalid axis `{s}`")))?;
            <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("axis `{s}` needs three components")))
        }
    }
}

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        // already initialized in this process (tests call run repeatedly)
        let _ = e;
    }
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let mut run = Run {
        subcommand: "",
        seed: cli.seed,
        threads: cli.threads,
        started: now(),
    };
    match &cli.command {
        Command::GenerateDataset(a) => {
            run.subcommand = "generate-dataset";
            let cfg = DatasetConfig {
                seed: cli.seed,
                classes: a.classes,
                instances_per_class: a.instances,
                views: a.views,
                resolution: a.res,
            };
            cfg.validate()?;
            eprintln!("rendering {} images", cfg.num_images());
            let manifest = generate_dataset(&cfg, &a.out)?;
            let hash = manifest.hash();
            println!("{hash}");
            run.finish(
                &a.out.join(RUN_MANIFEST),
                serde_json::to_value(cfg).expect("config serializes"),
                Some(hash),
                vec![a.out.clone()],
            )?;
            Ok(0)
        }
        Command::Train(a) => {
            run.subcommand = "train";
            let mut cfg = match (&a.config, &a.preset) {
                (Some(path), preset) => TrainConfig::load(path, preset.as_deref())?,
                (None, Some(preset)) => training::preset(preset)?,
                (None, None) => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            if let Some(d) = &a.dataset {
                cfg.dataset = Some(d.clone());
            }
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.lr {
                cfg.optimizer.lr = v;
            }
            if let Some(v) = a.capsules {
                cfg.model.capsules = v;
            }
            if a.max_steps.is_some() {
                cfg.max_steps = a.max_steps;
            }
            cfg.validate()?;
            let root = cfg
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("no dataset: pass --dataset or set `dataset` in the config".into()))?;
            let ds = Dataset::load(&root)?;
            let state = if a.resume { Some(TrainState::load(&a.out)?) } else { None };
            let outcome = training::train(
                &cfg,
                &ds,
                state,
                &TrainOptions {
                    out: Some(a.out.clone()),
                    verbose: true,
                },
            )?;
            let last = outcome.steps.last().map(|s| s.1.loss.total);
            println!("{}", json!({ "step": outcome.state.step, "epoch": outcome.state.epoch, "final_loss": last }));
            run.finish(
                &a.out.join(RUN_MANIFEST),
                serde_json::to_value(&cfg).expect("config serializes"),
                Some(ds.manifest.hash()),
                [CHECKPOINT_FILE, training::STATE_FILE, training::LOSS_LOG, training::EPOCH_LOG, "config.json"]
                    .iter()
                    .map(|f| a.out.join(f))
                    .collect(),
            )?;
            Ok(0)
        }
        Command::Evaluate(a) => {
            run.subcommand = "evaluate";
            let (report_path, manifest_path) = output_paths(&a.out, "evaluation.json")?;
            let source: FeatureSource = a.source.parse()?;
            let tasks: Vec<ProbeTask> = a.tasks.iter().map(|t| t.parse()).collect::<Result<_>>()?;
            let m = load_model(&a.model)?;
            eprintln!("extracting features");
            let feats = ViewFeatures::extract(&m.params, &m.model, &m.dataset, 256)?;
            let mut reports = Vec::new();
            for task in tasks {
                let mut pc = ProbeConfig::new(task, source);
                pc.epochs = a.probe_epochs;
                pc.pairs_per_instance = a.pairs_per_instance;
                pc.seed = cli.seed;
                eprintln!("probe {task} on {source}");
                let r = run_probe(&feats, &m.dataset, &pc)?;
                eprintln!("  {} train {:.4} val {:.4}", r.metric, r.train, r.val);
                reports.push(r);
            }
            let body = json!({ "checkpoint": a.model.checkpoint, "dataset": a.model.dataset, "probes": reports });
            write_json(&report_path, &body)?;
            println!("{}", serde_json::to_string(&body).expect("report serializes"));
            run.finish(
                &manifest_path,
                json!({ "source": source, "tasks": a.tasks, "probe_epochs": a.probe_epochs, "pairs_per_instance": a.pairs_per_instance }),
                Some(m.dataset.manifest.hash()),
                vec![report_path],
            )?;
            Ok(0)
        }
        Command::Retrieve(a) => {
            run.subcommand = "retrieve";
            let (report_path, manifest_path) = output_paths(&a.out, "retrieval.json")?;
            let m = load_model(&a.model)?;
            let feats = ViewFeatures::extract(&m.params, &m.model, &m.dataset, 256)?;
            let manifest = &m.dataset.manifest;
            let queries = object_views(&feats, &m.dataset, &manifest.instances(split_of(a.split)));
            let pool_instances: Option<Vec<usize>> = match a.pool {
                PoolArg::Instance => None,
                PoolArg::Train => Some(manifest.instances(Split::Train)),
                PoolArg::Val => Some(manifest.instances(Split::Val)),
                PoolArg::All => Some((0..manifest.num_instances()).collect()),
            };
            let pool = pool_instances.map(|p| object_views(&feats, &m.dataset, &p));
            let cfg = RetrievalConfig {
                distance: a.distance.parse::<Distance>()?,
                max_pairs_per_instance: a.max_pairs,
                seed: cli.seed,
                ..RetrievalConfig::default()
            };
            let mut report = retrieval_metrics(&queries, pool.as_deref(), &cfg)?;
            report.split = format!("{:?}", a.split).to_lowercase();
            report.pool = format!("{:?}", a.pool).to_lowercase();
            let body = json!({ "checkpoint": a.model.checkpoint, "config": cfg, "report": report });
            write_json(&report_path, &body)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            run.finish(&manifest_path, serde_json::to_value(&cfg).expect("config"), Some(manifest.hash()), vec![report_path])?;
            Ok(0)
        }
        Command::DemoPose(a) => {
            run.subcommand = "demo-pose";
            let (report_path, manifest_path) = output_paths(&a.out, "demo.json")?;
            let m = load_model(&a.model)?;
            let cfg = DemoConfig {
                instance: a.instance,
                base_view: a.view,
                axis: parse_axis(&a.axis)?,
                step_degrees: a.step,
                range_degrees: a.range,
                mode: a.mode.parse::<DemoMode>()?,
            };
            let report = pose_manipulation_demo(&m.params, &m.model, &m.dataset.manifest, &cfg)?;
            for r in &report.rows {
                println!(
                    "{:>3}  {:>6.1} deg  ->  view {:>3} ({:>6.1} deg){}",
                    r.step,
                    r.angle_degrees,
                    r.nn_view,
                    r.nn_angle_degrees,
                    if r.within_one_step { "" } else { "  miss" }
                );
            }
            println!("success rate {:.3}", report.success_rate);
            write_json(&report_path, &json!({ "config": cfg, "report": report }))?;
            run.finish(
                &manifest_path,
                serde_json::to_value(&cfg).expect("config"),
                Some(m.dataset.manifest.hash()),
                vec![report_path],
            )?;
            Ok(0)
        }
        Command::Gradcheck(a) => {
            run.subcommand = "gradcheck";
            let mut rows = Vec::new();
            let mut rng_transforms = {
                use rand::SeedableRng;
                rand_chacha::ChaCha8Rng::seed_from_u64(cli.seed)
            };
            let transforms = vec![
                selfcheck::random_transform(&mut rng_transforms, 0.5),
                selfcheck::random_transform(&mut rng_transforms, 0.5),
            ];
            let params = LossToy::params(2, 4, cli.seed);
            for term in LossTerm::ALL {
                let toy = LossToy {
                    term,
                    transforms: transforms.clone(),
                };
                for (bits, reports) in [
                    (32, gradcheck::check::<f32, _>(&toy, &params, GradCheckOptions::for_bits(32))?),
                    (64, gradcheck::check::<f64, _>(&toy, &params, GradCheckOptions::for_bits(64))?),
                ] {
                    for r in reports {
                        rows.push(json!({ "objective": format!("{term:?}"), "bits": bits, "group": r.name, "max_rel_error": r.max_rel_error, "max_abs_error": r.max_abs_error }));
                    }
                }
            }
            let (toy, params) = ModelToy::new(cli.seed);
            for (bits, reports) in [
                (32, gradcheck::check::<f32, _>(&toy, &params, GradCheckOptions::for_bits(32))?),
                (64, gradcheck::check::<f64, _>(&toy, &params, GradCheckOptions::for_bits(64))?),
            ] {
                for r in reports {
                    rows.push(json!({ "objective": "Model", "bits": bits, "group": r.name, "max_rel_error": r.max_rel_error, "max_abs_error": r.max_abs_error }));
                }
            }
            for r in &rows {
                println!(
                    "{:<13} f{}  {:<32} {:.3e}",
                    r["objective"].as_str().unwrap_or(""),
                    r["bits"],
                    r["group"].as_str().unwrap_or(""),
                    r["max_rel_error"].as_f64().unwrap_or(f64::NAN)
                );
            }
            if let Some(out) = &a.out {
                let (report_path, manifest_path) = output_paths(out, "gradcheck.json")?;
                write_json(&report_path, &rows)?;
                run.finish(&manifest_path, json!({}), None, vec![report_path])?;
            }
            Ok(0)
        }
        Command::Selftest(a) => {
            run.subcommand = "selftest";
            let ds = match &a.dataset {
                Some(p) => Dataset::load(p)?,
                None => {
                    eprintln!("generating the mini dataset in memory");
                    Dataset::generate(&DatasetConfig {
                        seed: cli.seed,
                        ..DatasetConfig::default()
                    })?
                }
            };
            let results = selfcheck::run_all(&ds, cli.seed);
            for r in &results {
                println!(
                    "{} {:<16} {:>7.2}s  {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            if let Some(out) = &a.out {
                let (report_path, manifest_path) = output_paths(out, "selftest.json")?;
                write_json(&report_path, &results)?;
                run.finish(&manifest_path, json!({}), Some(ds.manifest.hash()), vec![report_path])?;
            }
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
    }
}
