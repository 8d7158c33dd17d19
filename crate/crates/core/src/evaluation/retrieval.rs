//! Nearest-neighbour retrieval of transformed pose embeddings.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ViewFeatures;
use crate::capsnet::POSE_DIM;
use crate::error::{Error, Result};
use crate::geometry::{quaternion_distance, relative_transform, translation_distance, RigidTransform};
use crate::losses::{align_poses, representation_tensor};
use crate::synthscene::dataset::derive_seed;
use crate::synthscene::{Dataset, ViewRecord};
use crate::tensor::{Graph, Tensor};

const STREAM_RETRIEVAL: u64 = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Config(format!("unknown distance `{s}`"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub distance: Distance,
    /// All ordered pairs are used when `V·(V−1)` is at most this, otherwise
    /// a uniform sample of this many.
    pub max_pairs_per_instance: usize,
    /// Keep the query's source view among the candidates.
    pub include_source: bool,
    pub seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            distance: Distance::Euclidean,
            max_pairs_per_instance: 5000,
            include_source: true,
            seed: 0,
        }
    }
}

/// Normalized pose embeddings and latents of every view of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectViews {
    pub instance: usize,
    /// One flattened `N × 16` block per view.
    pub embeddings: Vec<Vec<f64>>,
    pub latents: Vec<ViewRecord>,
}

pub fn object_views(feats: &ViewFeatures, ds: &Dataset, instances: &[usize]) -> Vec<ObjectViews> {
    let m = &ds.manifest;
    instances
        .iter()
        .map(|&i| ObjectViews {
            instance: i,
            embeddings: (0..m.views).map(|v| feats.normalized_poses(m.view_index(i, v))).collect(),
            latents: (0..m.views).map(|v| *m.view(i, v)).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mrr: f64,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub pre_rotation: f64,
    pub pre_translation: f64,
    pub queries: usize,
    pub instances: usize,
    pub skipped_instances: usize,
    /// Split whose instances were queried.
    pub split: String,
    /// Candidate set of each query.
    pub pool: String,
}

/// Transforms flattened `N × 16` pose blocks by the matching transform, on the
/// same code path as the equivariance loss.
pub fn predict_embeddings(poses: &[Vec<f64>], transforms: &[RigidTransform]) -> Result<Vec<Vec<f64>>> {
    if poses.len() != transforms.len() {
        return Err(Error::shape("predict_embeddings", &[poses.len()], &[transforms.len()]));
    }
    if poses.is_empty() {
        return Ok(Vec::new());
    }
    let block = poses[0].len();
    if block == 0 || !block.is_multiple_of(POSE_DIM) || poses.iter().any(|p| p.len() != block) {
        return Err(Error::Invalid("pose blocks must be equal multiples of 16".into()));
    }
    let n = block / POSE_DIM;
    let mut g = Graph::<f64>::new();
    let flat: Vec<f64> = poses.iter().flatten().copied().collect();
    let z = g.constant(Tensor::new(&[poses.len(), n, 4, 4], flat)?);
    let rho = g.constant(representation_tensor(transforms));
    let out = align_poses(&mut g, z, rho)?;
    Ok(g.value(out).data().chunks(block).map(<[f64]>::to_vec).collect())
}

pub fn predict_embedding(poses: &[f64], g: &RigidTransform) -> Result<Vec<f64>> {
    Ok(predict_embeddings(&[poses.to_vec()], std::slice::from_ref(g))?.remove(0))
}

fn distance(kind: Distance, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(1e-300)
        }
    }
}

/// `E[1/rank]` when the target's rank is uniform over `1..=v`.
pub fn expected_random_mrr(v: usize) -> f64 {
    (1..=v).map(|r| 1.0 / r as f64).sum::<f64>() / v as f64
}

fn pairs_for(obj: &ObjectViews, cfg: &RetrievalConfig) -> Vec<(usize, usize)> {
    let v = obj.embeddings.len();
    let all: Vec<(usize, usize)> = (0..v)
        .flat_map(|s| (0..v).filter(move |&t| t != s).map(move |t| (s, t)))
        .collect();
    if all.len() <= cfg.max_pairs_per_instance {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_RETRIEVAL, obj.instance as u64));
    let mut picked = sample(&mut rng, all.len(), cfg.max_pairs_per_instance).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|k| all[k]).collect()
}

/// Outcome of one (source, target) query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Query {
    pub rank: usize,
    pub d_rotation: f64,
    pub d_translation: f64,
}

pub(crate) fn summarize(queries: &[Query]) -> RetrievalReport {
    let n = queries.len() as f64;
    let mean = |f: &dyn Fn(&Query) -> f64| queries.iter().map(f).sum::<f64>() / n;
    RetrievalReport {
        mrr: mean(&|q| 1.0 / q.rank as f64),
        hit_at_1: mean(&|q| (q.rank <= 1) as u8 as f64),
        hit_at_5: mean(&|q| (q.rank <= 5) as u8 as f64),
        pre_rotation: mean(&|q| q.d_rotation),
        pre_translation: mean(&|q| q.d_translation),
        queries: queries.len(),
        ..RetrievalReport::default()
    }
}

/// Ranks the prediction of each (source, target) view pair among the views
/// of the same object, or among every view of `pool` when given.
///
/// The target's rank counts every other candidate at distance less than or
/// equal to its own, so ties never help.
pub fn retrieval_metrics(queries: &[ObjectViews], pool: Option<&[ObjectViews]>, cfg: &RetrievalConfig) -> Result<RetrievalReport> {
    let per_object: Vec<Result<Option<Vec<Query>>>> = queries
        .par_iter()
        .map(|obj| -> Result<Option<Vec<Query>>> {
            let v = obj.embeddings.len();
            if v < 2 || obj.latents.len() != v {
                return Ok(None);
            }
            // this object's views first, so view k is candidate k
            let mut cands: Vec<(&[f64], &ViewRecord)> =
                obj.embeddings.iter().map(Vec::as_slice).zip(&obj.latents).collect();
            if let Some(pool) = pool {
                for other in pool.iter().filter(|o| o.instance != obj.instance) {
                    cands.extend(other.embeddings.iter().map(Vec::as_slice).zip(&other.latents));
                }
            }
            let pairs = pairs_for(obj, cfg);
            let sources: Vec<Vec<f64>> = pairs.iter().map(|&(s, _)| obj.embeddings[s].clone()).collect();
            let rels: Vec<RigidTransform> = pairs
                .iter()
                .map(|&(s, t)| relative_transform(&obj.latents[s].transform(), &obj.latents[t].transform()))
                .collect();
            let preds = predict_embeddings(&sources, &rels)?;
            let mut out = Vec::with_capacity(pairs.len());
            let mut d = vec![0.0; cands.len()];
            for (&(s, t), pred) in pairs.iter().zip(&preds) {
                for (dk, c) in d.iter_mut().zip(&cands) {
                    *dk = distance(cfg.distance, pred, c.0);
                }
                if !cfg.include_source {
                    d[s] = f64::INFINITY;
                }
                let dt = d[t];
                let rank = 1 + d
                    .iter()
                    .enumerate()
                    .filter(|&(k, &x)| k != t && x <= dt && (cfg.include_source || k != s))
                    .count();
                let top = (0..d.len()).fold(0, |b, k| if d[k] < d[b] { k } else { b });
                let (target, found) = (&obj.latents[t], cands[top].1);
                out.push(Query {
                    rank,
                    d_rotation: quaternion_distance(found.quaternion, target.quaternion),
                    d_translation: translation_distance(found.translation, target.translation),
                });
            }
            Ok(Some(out))
        })
        .collect();

    let mut all = Vec::new();
    let (mut instances, mut skipped) = (0, 0);
    for r in per_object {
        match r? {
            Some(q) => {
                instances += 1;
                all.extend(q);
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} instance(s) with fewer than two views");
    }
    if all.is_empty() {
        return Err(Error::Invalid("no retrieval queries".into()));
    }
    Ok(RetrievalReport {
        instances,
        skipped_instances: skipped,
        pool: if pool.is_some() { "split" } else { "instance" }.into(),
        ..summarize(&all)
    })
}
