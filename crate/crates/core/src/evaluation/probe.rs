//! Linear and MLP heads trained on frozen features.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{r_squared, ViewFeatures};
use crate::error::{Error, Result};
use crate::geometry::relative_transform;
use crate::synthscene::dataset::{derive_seed, sample_distinct_pair};
use crate::synthscene::{Dataset, Split, ViewRecord};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};

const STREAM_PAIRS: u64 = 31;
const STREAM_PROBE: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    Representation,
    Embedding,
}

impl FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repr" | "representation" => Ok(Self::Representation),
            "embed" | "embedding" => Ok(Self::Embedding),
            _ => Err(Error::Config(format!("unknown feature source `{s}` (expected repr or embed)"))),
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Representation => "representation",
            Self::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeTask {
    Classification,
    Rotation,
    TranslationObject,
    TranslationBase,
    Colour,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 5] = [
        Self::Classification,
        Self::Rotation,
        Self::TranslationObject,
        Self::TranslationBase,
        Self::Colour,
    ];

    pub fn output_dim(self, classes: usize) -> usize {
        match self {
            Self::Classification => classes,
            Self::Rotation | Self::Colour => 4,
            Self::TranslationObject | Self::TranslationBase => 3,
        }
    }

    /// Hidden widths of the default head.
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Self::Rotation | Self::TranslationObject | Self::TranslationBase => vec![1024, 1024],
            Self::Classification | Self::Colour => Vec::new(),
        }
    }

    pub fn uses_pairs(self) -> bool {
        self != Self::Classification
    }
}

impl FromStr for ProbeTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" | "class" => Ok(Self::Classification),
            "rotation" => Ok(Self::Rotation),
            "translation-object" | "translation" => Ok(Self::TranslationObject),
            "translation-base" => Ok(Self::TranslationBase),
            "colour" | "color" => Ok(Self::Colour),
            _ => Err(Error::Config(format!("unknown probe task `{s}`"))),
        }
    }
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Classification => "classification",
            Self::Rotation => "rotation",
            Self::TranslationObject => "translation-object",
            Self::TranslationBase => "translation-base",
            Self::Colour => "colour",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub source: FeatureSource,
    pub task: ProbeTask,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// View pairs drawn per instance for the pair tasks.
    pub pairs_per_instance: usize,
    /// Z-score inputs with training-set statistics.
    pub standardize: bool,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(task: ProbeTask, source: FeatureSource) -> Self {
        Self {
            source,
            task,
            hidden: task.default_hidden(),
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            pairs_per_instance: 25,
            standardize: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.pairs_per_instance == 0 {
            return Err(Error::Config("probe epochs, batch size and pairs must be positive".into()));
        }
        if !(self.lr > 0.0) || self.hidden.contains(&0) {
            return Err(Error::Config("probe lr and hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTargets {
    Labels { labels: Vec<usize>, classes: usize },
    Values { values: Vec<f64>, dim: usize },
}

impl ProbeTargets {
    pub fn len(&self) -> usize {
        match self {
            Self::Labels { labels, .. } => labels.len(),
            Self::Values { values, dim } => values.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn out_dim(&self) -> usize {
        match self {
            Self::Labels { classes, .. } => *classes,
            Self::Values { dim, .. } => *dim,
        }
    }
}

/// Probe inputs (`M × dim`, row-major) and their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeData {
    pub inputs: Vec<f32>,
    pub dim: usize,
    pub targets: ProbeTargets,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.inputs.len() != self.len() * self.dim {
            return Err(Error::shape("probe data", &[self.inputs.len()], &[self.len(), self.dim]));
        }
        Ok(())
    }
}

/// Canonical quaternion of the rotation carrying view 1 onto view 2.
pub fn rotation_target(v1: &ViewRecord, v2: &ViewRecord) -> [f64; 4] {
    relative_transform(&v1.transform(), &v2.transform()).rotation.quaternion()
}

fn pair_target(task: ProbeTask, v1: &ViewRecord, v2: &ViewRecord) -> Vec<f64> {
    let diff = |a: [f64; 3], b: [f64; 3]| vec![b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    match task {
        ProbeTask::Rotation => rotation_target(v1, v2).to_vec(),
        ProbeTask::TranslationObject => diff(v1.translation, v2.translation),
        ProbeTask::TranslationBase => diff(v1.base_translation, v2.base_translation),
        ProbeTask::Colour => vec![v1.floor_hue, v1.light_hue, v2.floor_hue, v2.light_hue],
        ProbeTask::Classification => unreachable!("classification uses single views"),
    }
}

/// Inputs and targets of one split: every view for classification, sampled
/// concatenated view pairs otherwise.
pub fn build_probe_data(feats: &ViewFeatures, ds: &Dataset, split: Split, cfg: &ProbeConfig) -> Result<ProbeData> {
    let m = &ds.manifest;
    if feats.len() != m.num_instances() * m.views {
        return Err(Error::Invalid(format!(
            "{} feature rows for {} views",
            feats.len(),
            m.num_instances() * m.views
        )));
    }
    let instances = m.instances(split);
    let src = cfg.source;
    let mut inputs = Vec::new();
    if !cfg.task.uses_pairs() {
        let mut labels = Vec::new();
        for &i in &instances {
            for v in 0..m.views {
                inputs.extend(feats.features(src, m.view_index(i, v)));
                labels.push(ds.class_of(i));
            }
        }
        return Ok(ProbeData {
            inputs,
            dim: feats.dim(src),
            targets: ProbeTargets::Labels {
                labels,
                classes: m.classes,
            },
        });
    }
    let split_id = match split {
        Split::Train => 0,
        Split::Val => 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PAIRS, split_id));
    let mut values = Vec::new();
    for &i in &instances {
        for _ in 0..cfg.pairs_per_instance {
            let (a, b) = sample_distinct_pair(m.views, &mut rng);
            inputs.extend(feats.features(src, m.view_index(i, a)));
            inputs.extend(feats.features(src, m.view_index(i, b)));
            values.extend(pair_target(cfg.task, m.view(i, a), m.view(i, b)));
        }
    }
    Ok(ProbeData {
        inputs,
        dim: 2 * feats.dim(src),
        targets: ProbeTargets::Values {
            values,
            dim: cfg.task.output_dim(m.classes),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub source: FeatureSource,
    /// `top1` for classification, `r2` otherwise.
    pub metric: String,
    pub train: f64,
    pub val: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub final_loss: f64,
    pub config: ProbeConfig,
}

struct Head {
    params: ParamStore<f32>,
    layers: usize,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Head {
    fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = ParamStore::new();
        for (l, w) in dims.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut u = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
            params.insert(format!("l{l}.weight"), Tensor::from_f64(&[w[0], w[1]], &u(w[0] * w[1])).expect("shape"));
            params.insert(format!("l{l}.bias"), Tensor::from_f64(&[w[1]], &u(w[1])).expect("shape"));
        }
        Self {
            params,
            layers: dims.len() - 1,
            mean: Vec::new(),
            inv_std: Vec::new(),
        }
    }

    fn input(&self, data: &ProbeData, rows: &[usize]) -> Tensor<f32> {
        let d = data.dim;
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let row = &data.inputs[r * d..(r + 1) * d];
            if self.mean.is_empty() {
                x.extend_from_slice(row);
            } else {
                x.extend(row.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s));
            }
        }
        Tensor::new(&[rows.len(), d], x).expect("row block")
    }

    fn forward(&self, g: &mut Graph<f32>, bound: &crate::tensor::Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.layers {
            let w = bound.var(&format!("l{l}.weight"))?;
            let b = bound.var(&format!("l{l}.bias"))?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if l + 1 < self.layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    fn predict(&self, data: &ProbeData) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        let rows: Vec<usize> = (0..data.len()).collect();
        for chunk in rows.chunks(1024) {
            let mut g = Graph::new();
            let bound = self.params.bind_frozen(&mut g);
            let x = g.constant(self.input(data, chunk));
            let y = self.forward(&mut g, &bound, x)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }
}

fn metric(targets: &ProbeTargets, pred: &[f32]) -> Result<f64> {
    match targets {
        ProbeTargets::Labels { labels, classes } => {
            let correct = labels
                .iter()
                .zip(pred.chunks(*classes))
                .filter(|(&y, row)| {
                    let best = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
                    best == y
                })
                .count();
            Ok(correct as f64 / labels.len().max(1) as f64)
        }
        ProbeTargets::Values { values, dim } => {
            let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
            r_squared(values, &p, *dim)
        }
    }
}

fn batch_loss(g: &mut Graph<f32>, out: Var, targets: &ProbeTargets, rows: &[usize]) -> Result<Var> {
    match targets {
        ProbeTargets::Labels { labels, classes } => {
            let mut onehot = vec![0.0f32; rows.len() * classes];
            for (k, &r) in rows.iter().enumerate() {
                onehot[k * classes + labels[r]] = 1.0;
            }
            let y = g.constant(Tensor::new(&[rows.len(), *classes], onehot)?);
            let p = g.softmax(out)?;
            let lp = g.log(p, 1e-30);
            let picked = g.mul(lp, y)?;
            let s = g.sum_all(picked);
            Ok(g.scale(s, -1.0 / rows.len() as f32))
        }
        ProbeTargets::Values { values, dim } => {
            let mut t = Vec::with_capacity(rows.len() * dim);
            for &r in rows {
                t.extend(values[r * dim..(r + 1) * dim].iter().map(|&v| v as f32));
            }
            let y = g.constant(Tensor::new(&[rows.len(), *dim], t)?);
            let d = g.sub(out, y)?;
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        }
    }
}

/// Trains a head with Adam (no weight decay) and reports the metric on both sets.
pub fn train_probe(train: &ProbeData, val: &ProbeData, cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    train.validate()?;
    val.validate()?;
    if train.dim != val.dim || train.targets.out_dim() != val.targets.out_dim() {
        return Err(Error::shape("train_probe", &[train.dim, train.targets.out_dim()], &[val.dim, val.targets.out_dim()]));
    }
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::Invalid("probes need at least two training and two validation samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_PROBE, 0));
    let mut dims = vec![train.dim];
    dims.extend(&cfg.hidden);
    dims.push(train.targets.out_dim());
    let mut head = Head::new(&dims, &mut rng);
    if cfg.standardize {
        let d = train.dim;
        let n = train.len() as f64;
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for row in train.inputs.chunks(d) {
            for j in 0..d {
                mean[j] += row[j] as f64 / n;
            }
        }
        for row in train.inputs.chunks(d) {
            for j in 0..d {
                sq[j] += (row[j] as f64 - mean[j]).powi(2) / n;
            }
        }
        head.mean = mean.iter().map(|&m| m as f32).collect();
        head.inv_std = sq.iter().map(|&v| (1.0 / v.sqrt().max(1e-6)) as f32).collect();
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for rows in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = head.params.bind(&mut g);
            let x = g.constant(head.input(train, rows));
            let out = head.forward(&mut g, &bound, x)?;
            let loss = batch_loss(&mut g, out, &train.targets, rows)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: state.step });
            }
            sum += value * rows.len() as f64;
            g.backward(loss)?;
            adam_step(&mut head.params, &bound.gradients(&g), &mut state, &adam)?;
        }
        final_loss = sum / train.len() as f64;
    }
    let train_metric = metric(&train.targets, &head.predict(train)?)?;
    let val_metric = metric(&val.targets, &head.predict(val)?)?;
    Ok(ProbeReport {
        task: cfg.task,
        source: cfg.source,
        metric: if cfg.task.uses_pairs() { "r2" } else { "top1" }.into(),
        train: train_metric,
        val: val_metric,
        train_samples: train.len(),
        val_samples: val.len(),
        final_loss,
        config: cfg.clone(),
    })
}

/// Builds the train and val sets from frozen features and trains the probe.
pub fn run_probe(feats: &ViewFeatures, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let train = build_probe_data(feats, ds, Split::Train, cfg)?;
    let val = build_probe_data(feats, ds, Split::Val, cfg)?;
    train_probe(&train, &val, cfg)
}
