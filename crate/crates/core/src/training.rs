//! Pretraining loop, configuration, ablation presets and train-state persistence.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capsnet::{forward, images_to_tensor, init_params, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{relative_transform, RigidTransform};
use crate::losses::{representation_tensor, total_loss, BatchEmbeddings, LossBreakdown, LossWeights, CSV_HEADER};
use crate::synthscene::dataset::{derive_seed, sample_distinct_pair};
use crate::synthscene::{Dataset, Split};
use crate::tensor::checkpoint::{self, write_atomic};
use crate::tensor::{adam_step, AdamConfig, AdamState, Bound, Graph, ParamStore, Var};

pub const CHECKPOINT_FILE: &str = "checkpoint.eqcp";
pub const STATE_FILE: &str = "state.json";
pub const LOSS_LOG: &str = "losses.csv";
pub const EPOCH_LOG: &str = "epochs.csv";
pub const EPOCH_CSV_HEADER: &str = "epoch,seconds,steps,mean_total,mean_entropy,max_act_sum_dev";

const STREAM_INIT: u64 = 11;
const STREAM_EPOCH: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// View pairs drawn per training instance in one epoch.
    pub pairs_per_instance: usize,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub model: ModelConfig,
    /// Epochs between checkpoints; the final state is always written.
    pub checkpoint_every: usize,
    /// Stop early after this many optimizer steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            seed: 0,
            epochs: 200,
            batch_size: 256,
            pairs_per_instance: 16,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            checkpoint_every: 50,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.pairs_per_instance == 0 {
            return Err(Error::Config("pairs_per_instance must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config("Adam eps must be positive and weight decay non-negative".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Reads a JSON or TOML file, layered over a preset (or the defaults).
    pub fn load(path: &Path, preset: Option<&str>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let overlay: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
            let v: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = match preset {
            Some(name) => self::preset(name)?,
            None => Self::default(),
        };
        let mut value = serde_json::to_value(base).expect("config serializes");
        merge(&mut value, overlay);
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub const PRESET_NAMES: [&str; 5] = ["full", "only-equi", "no-inv", "no-memax-no-inv", "invariance-only"];

/// Loss configurations of the ablation study.
pub fn ablation_presets() -> Vec<(&'static str, TrainConfig)> {
    PRESET_NAMES.iter().map(|&n| (n, preset(n).expect("known preset"))).collect()
}

pub fn preset(name: &str) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let loss = match name {
        "full" => base.loss,
        "only-equi" => LossWeights {
            enable_inv: false,
            enable_memax: false,
            reg_poses_only: true,
            ..base.loss
        },
        "no-inv" => LossWeights {
            enable_inv: false,
            ..base.loss
        },
        "no-memax-no-inv" => LossWeights {
            enable_inv: false,
            enable_memax: false,
            ..base.loss
        },
        "invariance-only" => LossWeights {
            enable_equi: false,
            ..base.loss
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(TrainConfig { loss, ..base })
}

/// Everything needed to continue training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches within the current epoch.
    pub batch: usize,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    batch: usize,
    step: u64,
    adam_step: u64,
    seed: u64,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT, 0));
        Ok(Self {
            params: init_params(&cfg.model, &mut rng)?,
            adam: AdamState::new(),
            epoch: 0,
            batch: 0,
            step: 0,
        })
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let mut all = self.params.clone();
        for (prefix, store) in [("optim.m.", &self.adam.m), ("optim.v.", &self.adam.v)] {
            for (name, t) in store.iter() {
                all.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        checkpoint::save(&all, &dir.join(CHECKPOINT_FILE))?;
        let state = StateFile {
            epoch: self.epoch,
            batch: self.batch,
            step: self.step,
            adam_step: self.adam.step,
            seed,
        };
        let json = serde_json::to_string_pretty(&state).expect("state serializes");
        write_atomic(&dir.join(STATE_FILE), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let all: ParamStore<f32> = checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
        let spath = dir.join(STATE_FILE);
        let text = fs::read_to_string(&spath).map_err(|e| Error::io(&spath, e))?;
        let st: StateFile = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", spath.display())))?;
        let mut state = Self {
            params: ParamStore::new(),
            adam: AdamState::new(),
            epoch: st.epoch,
            batch: st.batch,
            step: st.step,
        };
        state.adam.step = st.adam_step;
        for (name, t) in all.iter() {
            if let Some(n) = name.strip_prefix("optim.m.") {
                state.adam.m.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix("optim.v.") {
                state.adam.v.insert(n, t.clone());
            } else {
                state.params.insert(name, t.clone());
            }
        }
        Ok(state)
    }
}

/// Loads only the model parameters from a checkpoint file.
pub fn load_model_params(path: &Path) -> Result<ParamStore<f32>> {
    let all: ParamStore<f32> = checkpoint::load(path)?;
    let mut p = all.filter_prefix("encoder.");
    for (n, t) in all.filter_prefix("projector.").iter() {
        p.insert(n, t.clone());
    }
    if p.is_empty() {
        return Err(Error::Format(format!("{}: no model parameters", path.display())));
    }
    Ok(p)
}

/// One training example: an instance and two distinct view indices.
pub type PairIndex = (usize, usize, usize);

/// The shuffled batches of one epoch, a pure function of seed and epoch.
pub fn epoch_plan(cfg: &TrainConfig, ds: &Dataset, epoch: usize) -> Vec<Vec<PairIndex>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64));
    let mut order: Vec<usize> = ds
        .manifest
        .instances(Split::Train)
        .into_iter()
        .flat_map(|i| std::iter::repeat_n(i, cfg.pairs_per_instance))
        .collect();
    order.shuffle(&mut rng);
    let pairs: Vec<PairIndex> = order
        .into_iter()
        .map(|i| {
            let (a, b) = sample_distinct_pair(ds.manifest.views, &mut rng);
            (i, a, b)
        })
        .collect();
    pairs
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[PairIndex]>::to_vec)
        .collect()
}

pub fn relative_transforms(ds: &Dataset, batch: &[PairIndex]) -> Vec<RigidTransform> {
    batch
        .iter()
        .map(|&(i, a, b)| {
            relative_transform(&ds.manifest.view(i, a).transform(), &ds.manifest.view(i, b).transform())
        })
        .collect()
}

/// Diagnostics of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: LossBreakdown,
    /// Largest `|Σ_j a_j − 1|` over both views.
    pub act_sum_dev: f64,
    /// Entropy of the batch-mean activation, averaged over both views.
    pub mean_entropy: f64,
}

struct Built {
    graph: Graph<f32>,
    bound: Bound,
    total: Var,
    stats: StepStats,
}

fn build(params: &ParamStore<f32>, cfg: &TrainConfig, ds: &Dataset, batch: &[PairIndex], trainable: bool) -> Result<Built> {
    let b = batch.len();
    let mut refs: Vec<&[u8]> = batch.iter().map(|&(i, v, _)| ds.image_bytes(i, v)).collect();
    refs.extend(batch.iter().map(|&(i, _, v)| ds.image_bytes(i, v)));
    let images = images_to_tensor::<f32>(&refs, ds.manifest.resolution)?;

    let mut g = Graph::new();
    let bound = if trainable { params.bind(&mut g) } else { params.bind_frozen(&mut g) };
    let x = g.constant(images);
    // one pass over both views: the two branches share every parameter node
    let out = forward(&mut g, &bound, &cfg.model, x)?;
    let act = out.capsules.activations;
    let poses = out.capsules.poses;
    let v1 = BatchEmbeddings {
        activations: g.slice(act, 0, 0, b)?,
        poses: g.slice(poses, 0, 0, b)?,
    };
    let v2 = BatchEmbeddings {
        activations: g.slice(act, 0, b, b)?,
        poses: g.slice(poses, 0, b, b)?,
    };
    let rho = g.constant(representation_tensor(&relative_transforms(ds, batch)));
    let terms = total_loss(&mut g, &v1, &v2, rho, &cfg.loss)?;

    let n = cfg.model.capsules;
    let a = g.value(act).data();
    let act_sum_dev = a
        .chunks(n)
        .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let mean_entropy = 0.5 * (batch_mean_entropy(&a[..b * n], n) + batch_mean_entropy(&a[b * n..], n));
    let stats = StepStats {
        loss: LossBreakdown::read(&g, &terms),
        act_sum_dev,
        mean_entropy,
    };
    Ok(Built {
        graph: g,
        bound,
        total: terms.total,
        stats,
    })
}

/// Shannon entropy of the mean of the rows of `act`.
pub fn batch_mean_entropy(act: &[f32], n: usize) -> f64 {
    let rows = act.len() / n;
    let mut mean = vec![0.0f64; n];
    for r in act.chunks(n) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v as f64 / rows as f64;
        }
    }
    -mean.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Loss and diagnostics of a batch without updating anything.
pub fn evaluate_batch(params: &ParamStore<f32>, cfg: &TrainConfig, ds: &Dataset, batch: &[PairIndex]) -> Result<StepStats> {
    Ok(build(params, cfg, ds, batch, false)?.stats)
}

/// Forward, backward and one Adam update.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, ds: &Dataset, batch: &[PairIndex]) -> Result<StepStats> {
    let mut built = build(&state.params, cfg, ds, batch, true)?;
    if !built.stats.loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    if built.graph.requires_grad(built.total) {
        built.graph.backward(built.total)?;
    }
    let grads = built.bound.gradients(&built.graph);
    adam_step(&mut state.params, &grads, &mut state.adam, &cfg.optimizer)?;
    state.step += 1;
    Ok(built.stats)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub seconds: f64,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_entropy: f64,
    pub max_act_sum_dev: f64,
}

impl EpochSummary {
    fn csv_row(&self) -> String {
        format!(
            "{},{:.3},{},{},{},{}",
            self.epoch, self.seconds, self.steps, self.mean_total, self.mean_entropy, self.max_act_sum_dev
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Output directory for logs and checkpoints.
    pub out: Option<PathBuf>,
    /// Progress lines on standard error.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<(u64, StepStats)>,
    pub epochs: Vec<EpochSummary>,
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs (or continues) pretraining until `cfg.epochs` or `cfg.max_steps`.
pub fn train(cfg: &TrainConfig, ds: &Dataset, state: Option<TrainState>, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.manifest.resolution != cfg.model.encoder.resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match encoder resolution {}",
            ds.manifest.resolution, cfg.model.encoder.resolution
        )));
    }
    let mut state = match state {
        Some(s) => s,
        None => TrainState::init(cfg)?,
    };
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(cfg).expect("config serializes");
        write_atomic(&dir.join("config.json"), json.as_bytes())?;
    }
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let done = |s: &TrainState| cfg.max_steps.is_some_and(|m| s.step >= m);

    while state.epoch < cfg.epochs && !done(&state) {
        let plan = epoch_plan(cfg, ds, state.epoch);
        let started = Instant::now();
        let (mut total, mut entropy, mut dev, mut count) = (0.0, 0.0, 0.0f64, 0usize);
        while state.batch < plan.len() && !done(&state) {
            let batch = &plan[state.batch];
            let stats = train_step(&mut state, cfg, ds, batch)?;
            state.batch += 1;
            total += stats.loss.total;
            entropy += stats.mean_entropy;
            dev = dev.max(stats.act_sum_dev);
            count += 1;
            if let Some(dir) = &opts.out {
                append_line(&dir.join(LOSS_LOG), CSV_HEADER, &stats.loss.csv_row(state.step))?;
            }
            steps.push((state.step, stats));
        }
        let finished = state.batch >= plan.len();
        if finished {
            state.epoch += 1;
            state.batch = 0;
        }
        let summary = EpochSummary {
            epoch: state.epoch,
            seconds: started.elapsed().as_secs_f64(),
            steps: count,
            mean_total: total / count.max(1) as f64,
            mean_entropy: entropy / count.max(1) as f64,
            max_act_sum_dev: dev,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>4}  steps {:>3}  loss {:>9.4}  H(mean act) {:.3}  {:.1}s",
                summary.epoch, count, summary.mean_total, summary.mean_entropy, summary.seconds
            );
        }
        if let Some(dir) = &opts.out {
            append_line(&dir.join(EPOCH_LOG), EPOCH_CSV_HEADER, &summary.csv_row())?;
            if finished && cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                state.save(dir, cfg.seed)?;
            }
        }
        epochs.push(summary);
    }
    if let Some(dir) = &opts.out {
        state.save(dir, cfg.seed)?;
    }
    Ok(TrainOutcome { state, steps, epochs })
}
