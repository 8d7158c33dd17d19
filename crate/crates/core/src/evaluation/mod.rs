//! Frozen-feature probes, equivariance retrieval and the pose-manipulation demo.

mod demo;
mod probe;
mod retrieval;

pub use demo::{analytic_embedding, demo_from_embeddings, pose_manipulation_demo, sweep_transforms, DemoConfig, DemoMode, DemoReport, DemoRow};
pub use probe::{
    build_probe_data, rotation_target, run_probe, train_probe, FeatureSource, ProbeConfig, ProbeData, ProbeReport, ProbeTask,
    ProbeTargets,
};
pub use retrieval::{
    expected_random_mrr, object_views, predict_embedding, predict_embeddings, retrieval_metrics, Distance, ObjectViews,
    RetrievalConfig, RetrievalReport,
};

use rayon::prelude::*;

use crate::capsnet::{forward, images_to_tensor, ModelConfig, POSE_DIM};
use crate::error::{Error, Result};
use crate::synthscene::Dataset;
use crate::tensor::{Graph, ParamStore};

/// Coefficient of determination over all `M × D` entries, with a per-column mean.
pub fn r_squared(targets: &[f64], predictions: &[f64], dim: usize) -> Result<f64> {
    if dim == 0 || !targets.len().is_multiple_of(dim) || targets.len() != predictions.len() {
        return Err(Error::shape("r_squared", &[targets.len(), dim], &[predictions.len(), dim]));
    }
    let m = targets.len() / dim;
    if m < 2 {
        return Err(Error::Invalid("r_squared needs at least two samples".into()));
    }
    let mut mean = vec![0.0; dim];
    for row in targets.chunks(dim) {
        for (acc, &y) in mean.iter_mut().zip(row) {
            *acc += y;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let (mut res, mut tot) = (0.0, 0.0);
    for (row, pred) in targets.chunks(dim).zip(predictions.chunks(dim)) {
        for d in 0..dim {
            res += (row[d] - pred[d]).powi(2);
            tot += (row[d] - mean[d]).powi(2);
        }
    }
    if tot <= 0.0 {
        return Err(Error::Degenerate("targets have zero total variance".into()));
    }
    Ok(1.0 - res / tot)
}

/// Frozen outputs of a trained model for every view of a dataset, indexed
/// like the dataset's latents.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    pub representation_dim: usize,
    pub capsules: usize,
    pub representation: Vec<f32>,
    pub activations: Vec<f32>,
    /// Raw `N × 4 × 4` poses.
    pub poses: Vec<f32>,
}

impl ViewFeatures {
    pub fn extract(params: &ParamStore<f32>, model: &ModelConfig, ds: &Dataset, batch: usize) -> Result<Self> {
        model.validate()?;
        if ds.manifest.resolution != model.encoder.resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} does not match encoder resolution {}",
                ds.manifest.resolution, model.encoder.resolution
            )));
        }
        let m = &ds.manifest;
        let total = m.num_instances() * m.views;
        let index: Vec<(usize, usize)> = (0..m.num_instances()).flat_map(|i| (0..m.views).map(move |v| (i, v))).collect();
        let chunks: Vec<_> = index
            .par_chunks(batch.max(1))
            .map(|chunk| -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
                let refs: Vec<&[u8]> = chunk.iter().map(|&(i, v)| ds.image_bytes(i, v)).collect();
                let mut g = Graph::new();
                let bound = params.bind_frozen(&mut g);
                let x = g.constant(images_to_tensor(&refs, m.resolution)?);
                let out = forward(&mut g, &bound, model, x)?;
                Ok((
                    g.value(out.encoded.representation).data().to_vec(),
                    g.value(out.capsules.activations).data().to_vec(),
                    g.value(out.capsules.poses).data().to_vec(),
                ))
            })
            .collect();
        let mut f = Self {
            representation_dim: model.encoder.representation_dim(),
            capsules: model.capsules,
            representation: Vec::with_capacity(total * model.encoder.representation_dim()),
            activations: Vec::with_capacity(total * model.capsules),
            poses: Vec::with_capacity(total * model.capsules * POSE_DIM),
        };
        for c in chunks {
            let (r, a, p) = c?;
            f.representation.extend(r);
            f.activations.extend(a);
            f.poses.extend(p);
        }
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.activations.len() / self.capsules.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn representation(&self, idx: usize) -> &[f32] {
        &self.representation[idx * self.representation_dim..(idx + 1) * self.representation_dim]
    }

    /// Per-capsule Frobenius-normalized poses, flattened.
    pub fn normalized_poses(&self, idx: usize) -> Vec<f64> {
        let block = self.capsules * POSE_DIM;
        normalize_pose_blocks(&self.poses[idx * block..(idx + 1) * block])
    }

    /// Activations followed by normalized poses.
    pub fn embedding(&self, idx: usize) -> Vec<f32> {
        let n = self.capsules;
        let mut out: Vec<f32> = self.activations[idx * n..(idx + 1) * n].to_vec();
        out.extend(self.normalized_poses(idx).into_iter().map(|v| v as f32));
        out
    }

    pub fn dim(&self, source: FeatureSource) -> usize {
        match source {
            FeatureSource::Representation => self.representation_dim,
            FeatureSource::Embedding => self.capsules * (1 + POSE_DIM),
        }
    }

    pub fn features(&self, source: FeatureSource, idx: usize) -> Vec<f32> {
        match source {
            FeatureSource::Representation => self.representation(idx).to_vec(),
            FeatureSource::Embedding => self.embedding(idx),
        }
    }
}

/// Divides each 16-value pose block by its Frobenius norm.
pub(crate) fn normalize_pose_blocks(raw: &[f32]) -> Vec<f64> {
    let mut out: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    for c in out.chunks_mut(POSE_DIM) {
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::losses::NORM_EPS);
        c.iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[cfg(test)]
mod tests;
