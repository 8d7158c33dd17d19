//! Rotating an object in embedding space and retrieving the matching view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::retrieval::predict_embeddings;
use crate::capsnet::{forward, images_to_tensor, ModelConfig, POSE_DIM};
use crate::error::{Error, Result};
use crate::geometry::{compose, RigidTransform, Rotation, Vec3};
use crate::synthscene::dataset::object_for;
use crate::synthscene::latents::Appearance;
use crate::synthscene::render::{render_with, Camera};
use crate::synthscene::DatasetManifest;
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoMode {
    /// Move the source embedding by each sweep transform.
    Forward,
    /// Move each swept embedding back by the inverse transform.
    Inverse,
}

impl FromStr for DemoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "inverse" => Ok(Self::Inverse),
            _ => Err(Error::Config(format!("unknown demo mode `{s}`"))),
        }
    }
}

impl fmt::Display for DemoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Inverse => "inverse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub instance: usize,
    /// View whose pose and appearance start the sweep.
    pub base_view: usize,
    pub axis: Vec3,
    pub step_degrees: f64,
    pub range_degrees: f64,
    pub mode: DemoMode,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            instance: 0,
            base_view: 0,
            axis: [0.0, 0.0, 1.0],
            step_degrees: 5.0,
            range_degrees: 90.0,
            mode: DemoMode::Inverse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoRow {
    pub step: usize,
    pub angle_degrees: f64,
    /// Sweep index of the nearest neighbour.
    pub nn_view: usize,
    pub nn_angle_degrees: f64,
    pub nn_quaternion: [f64; 4],
    /// Sweep index the prediction should land on.
    pub expected_view: usize,
    pub within_one_step: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub mode: DemoMode,
    pub step_degrees: f64,
    pub rows: Vec<DemoRow>,
    pub success_rate: f64,
}

/// `h_k ∘ g_base` with `h_k` a rotation by `k·step` about `axis`, for every
/// step in `[0, range]`.
pub fn sweep_transforms(base: &RigidTransform, axis: Vec3, step_degrees: f64, range_degrees: f64) -> Result<Vec<RigidTransform>> {
    if !(step_degrees > 0.0) || !(range_degrees >= 0.0) {
        return Err(Error::Config("sweep step must be positive and range non-negative".into()));
    }
    let steps = (range_degrees / step_degrees + 1e-9).floor() as usize;
    (0..=steps)
        .map(|k| {
            let h = Rotation::from_axis_angle(axis, (k as f64 * step_degrees).to_radians())?;
            Ok(compose(&RigidTransform::from_rotation(h), base))
        })
        .collect()
}

/// Normalized `ρ(g)` repeated for each capsule: a perfectly equivariant embedding.
pub fn analytic_embedding(g: &RigidTransform, capsules: usize) -> Vec<f64> {
    let rho = g.representation();
    let norm = rho.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let block: Vec<f64> = rho.iter().flatten().map(|v| v / norm).collect();
    block.repeat(capsules)
}

fn nearest(pred: &[f64], pool: &[Vec<f64>]) -> usize {
    let d = |e: &Vec<f64>| pred.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..pool.len()).fold(0, |b, k| if d(&pool[k]) < d(&pool[b]) { k } else { b })
}

/// Retrieval table for pose embeddings of a sweep rendered at `transforms`.
pub fn demo_from_embeddings(
    embeddings: &[Vec<f64>],
    transforms: &[RigidTransform],
    step_degrees: f64,
    mode: DemoMode,
) -> Result<DemoReport> {
    if embeddings.len() != transforms.len() || embeddings.is_empty() {
        return Err(Error::shape("demo", &[embeddings.len()], &[transforms.len()]));
    }
    let rel: Vec<RigidTransform> = transforms
        .iter()
        .map(|g| crate::geometry::relative_transform(&transforms[0], g))
        .collect();
    let (sources, moves): (Vec<Vec<f64>>, Vec<RigidTransform>) = match mode {
        DemoMode::Forward => (vec![embeddings[0].clone(); embeddings.len()], rel.clone()),
        DemoMode::Inverse => (embeddings.to_vec(), rel.iter().map(RigidTransform::inverse).collect()),
    };
    let preds = predict_embeddings(&sources, &moves)?;
    let rows: Vec<DemoRow> = preds
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let nn = nearest(p, embeddings);
            let expected = match mode {
                DemoMode::Forward => k,
                DemoMode::Inverse => 0,
            };
            DemoRow {
                step: k,
                angle_degrees: k as f64 * step_degrees,
                nn_view: nn,
                nn_angle_degrees: nn as f64 * step_degrees,
                nn_quaternion: transforms[nn].rotation.quaternion(),
                expected_view: expected,
                within_one_step: nn.abs_diff(expected) <= 1,
            }
        })
        .collect();
    let success_rate = rows.iter().filter(|r| r.within_one_step).count() as f64 / rows.len() as f64;
    Ok(DemoReport {
        mode,
        step_degrees,
        rows,
        success_rate,
    })
}

/// Renders a rotation sweep of one dataset object, embeds it with the model
/// and runs the retrieval table.
pub fn pose_manipulation_demo(
    params: &ParamStore<f32>,
    model: &ModelConfig,
    manifest: &DatasetManifest,
    cfg: &DemoConfig,
) -> Result<DemoReport> {
    if cfg.instance >= manifest.num_instances() || cfg.base_view >= manifest.views {
        return Err(Error::Invalid(format!(
            "instance {} / view {} out of range",
            cfg.instance, cfg.base_view
        )));
    }
    let object = object_for(&manifest.config(), cfg.instance)?;
    let base = manifest.view(cfg.instance, cfg.base_view);
    let look = Appearance::from(&base.latents());
    let transforms = sweep_transforms(&base.transform(), cfg.axis, cfg.step_degrees, cfg.range_degrees)?;
    let res = manifest.resolution;
    let images = transforms
        .iter()
        .map(|g| Ok(render_with(&object, g, &look, res, &Camera::default())?.image.to_u8()))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[u8]> = images.iter().map(Vec::as_slice).collect();
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(images_to_tensor::<f32>(&refs, res)?);
    let out = forward(&mut g, &bound, model, x)?;
    let block = model.capsules * POSE_DIM;
    let embeddings: Vec<Vec<f64>> = g
        .value(out.capsules.poses)
        .data()
        .chunks(block)
        .map(super::normalize_pose_blocks)
        .collect();
    demo_from_embeddings(&embeddings, &transforms, cfg.step_degrees, cfg.mode)
}
