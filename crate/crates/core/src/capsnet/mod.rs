//! Convolutional encoder followed by a self-routing capsule projector.
//!
//! Parameters live in a [`ParamStore`] under `encoder.*` and `projector.*`;
//! every forward function records onto a caller-owned [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamStore, Real, Tensor, Var};

pub mod reference;

pub const POSE_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Group normalization after every convolution; 0 disables it. Stages
    /// whose channel count is not a multiple use the greatest common divisor.
    #[serde(default)]
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: vec![32, 64, 128, 128],
            strides: vec![2, 2, 2, 2],
            kernel: 3,
            norm_groups: 8,
        }
    }
}

impl EncoderConfig {
    /// Spatial extent of the final feature map.
    pub fn feature_size(&self) -> usize {
        let pad = self.kernel / 2;
        self.strides
            .iter()
            .fold(self.resolution, |s, &st| (s + 2 * pad - self.kernel) / st + 1)
    }

    /// Normalization groups used after stage `i`, if any.
    pub fn groups(&self, i: usize) -> Option<usize> {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 { a } else { gcd(b, a % b) }
        }
        (self.norm_groups > 0).then(|| gcd(self.norm_groups, self.channels[i]))
    }

    /// Pooled representation size R.
    pub fn representation_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config("encoder needs one stride per stage".into()));
        }
        if self.kernel.is_multiple_of(2) || self.strides.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("encoder kernel must be odd and strides/channels positive".into()));
        }
        if self.resolution < self.kernel || self.feature_size() < 2 {
            return Err(Error::Config(format!(
                "final feature map is {0}x{0}, at least 2x2 required",
                self.feature_size()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub primary_types: usize,
    pub capsules: usize,
    /// Learnable `N × 16` offset added to the routed poses.
    #[serde(default = "default_true")]
    pub pose_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            primary_types: 16,
            capsules: 32,
            pose_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.primary_types == 0 || self.capsules == 0 {
            return Err(Error::Config("capsule counts must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated activation-and-pose embedding.
    pub fn embedding_dim(&self) -> usize {
        self.capsules * (1 + POSE_DIM)
    }

    pub fn lower_capsules(&self) -> usize {
        let s = self.encoder.feature_size();
        self.primary_types * s * s
    }
}

fn uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>())
        .expect("shape product")
}

/// Fresh parameters: uniform(±1/√fan_in) weights, zero biases.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let k = cfg.encoder.kernel;
    let mut cin = 3;
    for (i, &c) in cfg.encoder.channels.iter().enumerate() {
        p.insert(format!("encoder.conv{i}.weight"), uniform(&[c, cin, k, k], cin * k * k, rng));
        p.insert(format!("encoder.conv{i}.bias"), Tensor::zeros(&[c]));
        if cfg.encoder.groups(i).is_some() {
            p.insert(format!("encoder.norm{i}.weight"), Tensor::full(&[c], T::one()));
            p.insert(format!("encoder.norm{i}.bias"), Tensor::zeros(&[c]));
        }
        cin = c;
    }
    let (t, n) = (cfg.primary_types, cfg.capsules);
    p.insert("projector.primary.weight", uniform(&[cin, t * (POSE_DIM + 1)], cin, rng));
    p.insert("projector.primary.bias", Tensor::zeros(&[t * (POSE_DIM + 1)]));
    p.insert("projector.route.weight", uniform(&[t, POSE_DIM, n], POSE_DIM, rng));
    p.insert("projector.pose.weight", uniform(&[t * n, POSE_DIM, POSE_DIM], POSE_DIM, rng));
    if cfg.pose_bias {
        p.insert("projector.pose.bias", Tensor::zeros(&[n, POSE_DIM]));
    }
    Ok(p)
}

/// Packs RGB byte images (`H × W × 3`) into a `B × 3 × H × W` tensor in [0, 1].
pub fn images_to_tensor<T: Real>(images: &[&[u8]], res: usize) -> Result<Tensor<T>> {
    let plane = res * res;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    let scale = T::lit(1.0 / 255.0);
    for (b, img) in images.iter().enumerate() {
        if img.len() != plane * 3 {
            return Err(Error::Invalid(format!(
                "image {b} has {} bytes, expected {res}x{res}x3",
                img.len()
            )));
        }
        let base = b * 3 * plane;
        for (p, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = T::lit(px[c] as f64) * scale;
            }
        }
    }
    Tensor::new(&[images.len(), 3, res, res], data)
}

pub struct Encoded {
    /// `B × C × h × w`.
    pub features: Var,
    /// `B × C`, spatial mean of the features.
    pub representation: Var,
}

pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &EncoderConfig, images: Var) -> Result<Encoded> {
    let shape = g.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.resolution || shape[3] != cfg.resolution {
        return Err(Error::Invalid(format!(
            "encoder expects B×3×{0}×{0} images, got {shape:?}",
            cfg.resolution
        )));
    }
    let mut x = images;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let w = p.var(&format!("encoder.conv{i}.weight"))?;
        let b = p.var(&format!("encoder.conv{i}.bias"))?;
        let mut y = g.conv2d(x, w, Some(b), stride, cfg.kernel / 2)?;
        if let Some(groups) = cfg.groups(i) {
            let gamma = p.var(&format!("encoder.norm{i}.weight"))?;
            let beta = p.var(&format!("encoder.norm{i}.bias"))?;
            y = g.group_norm(y, gamma, beta, groups, T::lit(NORM_EPS))?;
        }
        x = g.relu(y);
    }
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let representation = g.mean_axis(flat, 2)?;
    Ok(Encoded {
        features: x,
        representation,
    })
}

const NORM_EPS: f64 = 1e-5;

/// Lower capsules over all positions and types.
pub struct LowerCapsules {
    /// `B × P × T × 16`.
    pub poses: Var,
    /// `B × P × T`, each in (0, 1).
    pub activations: Var,
}

pub fn primary_capsules<T: Real>(g: &mut Graph<T>, p: &Bound, features: Var, types: usize) -> Result<LowerCapsules> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 {
        return Err(Error::Invalid(format!("feature map must be B×C×h×w, got {s:?}")));
    }
    let (b, c, pos) = (s[0], s[1], s[2] * s[3]);
    let w = p.var("projector.primary.weight")?;
    let bias = p.var("projector.primary.bias")?;
    if g.shape(w) != [c, types * (POSE_DIM + 1)] {
        return Err(Error::shape("primary_capsules", g.shape(w), &[c, types * (POSE_DIM + 1)]));
    }
    let hwc = g.permute(features, &[0, 2, 3, 1])?;
    let rows = g.reshape(hwc, &[b * pos, c])?;
    let lin = g.matmul(rows, w)?;
    let lin = g.add(lin, bias)?;
    let caps = g.reshape(lin, &[b, pos, types, POSE_DIM + 1])?;
    let poses = g.slice(caps, 3, 0, POSE_DIM)?;
    let logits = g.slice(caps, 3, POSE_DIM, 1)?;
    let logits = g.reshape(logits, &[b, pos, types])?;
    let activations = g.sigmoid(logits);
    Ok(LowerCapsules { poses, activations })
}

pub struct CapsuleOutput {
    /// `B × N`, rows sum to one.
    pub activations: Var,
    /// `B × N × 4 × 4`.
    pub poses: Var,
}

/// Routing parameters for [`self_route`].
#[derive(Debug, Clone, Copy)]
pub struct RouteParams {
    /// `T × 16 × N`.
    pub route: Var,
    /// `(T·N) × 16 × 16`, entry `[t·N + j]` maps type-`t` poses to capsule `j`.
    pub pose: Var,
    /// `N × 16`, optional.
    pub pose_bias: Option<Var>,
}

impl RouteParams {
    pub fn from_bound(p: &Bound) -> Result<Self> {
        Ok(Self {
            route: p.var("projector.route.weight")?,
            pose: p.var("projector.pose.weight")?,
            pose_bias: p.var("projector.pose.bias").ok(),
        })
    }
}

/// Single-pass self-routing.
///
/// With `w_ij = c_ij a_i`, the vote average for capsule `j` is
/// `Σ_t W[t,j] · (Σ_{i∈t} w_ij u_i) / Σ_i w_ij`, so the per-vote tensor is
/// never materialized.
pub fn self_route<T: Real>(g: &mut Graph<T>, lower: &LowerCapsules, params: &RouteParams) -> Result<CapsuleOutput> {
    let s = g.shape(lower.poses).to_vec();
    if s.len() != 4 || s[3] != POSE_DIM || g.shape(lower.activations) != &s[..3] {
        return Err(Error::Invalid(format!("lower capsules must be B×P×T×16, got {s:?}")));
    }
    let (b, pos, t) = (s[0], s[1], s[2]);
    let rs = g.shape(params.route).to_vec();
    if rs.len() != 3 || rs[0] != t || rs[1] != POSE_DIM {
        return Err(Error::shape("self_route", &rs, &[t, POSE_DIM, 0]));
    }
    let n = rs[2];
    if g.shape(params.pose) != [t * n, POSE_DIM, POSE_DIM] {
        return Err(Error::shape("self_route", g.shape(params.pose), &[t * n, POSE_DIM, POSE_DIM]));
    }

    let flat_a = g.reshape(lower.activations, &[b, pos * t])?;
    let a_sum = g.sum_axis(flat_a, 1)?;
    if g.value(a_sum).data().iter().any(|&v| !(v > T::zero())) {
        return Err(Error::Degenerate("lower capsule activations sum to zero".into()));
    }

    let u = g.permute(lower.poses, &[2, 0, 1, 3])?;
    let u = g.reshape(u, &[t, b * pos, POSE_DIM])?;
    let logits = g.matmul(u, params.route)?;
    let c = g.softmax(logits)?;
    let a = g.permute(lower.activations, &[2, 0, 1])?;
    let a = g.reshape(a, &[t, b * pos, 1])?;
    let w = g.mul(c, a)?;

    let w_tb = g.reshape(w, &[t * b, pos, n])?;
    let u_tb = g.reshape(u, &[t * b, pos, POSE_DIM])?;
    let agg = g.matmul_t(w_tb, u_tb, true, false)?;
    let agg = g.reshape(agg, &[t, b, n, POSE_DIM])?;
    let agg = g.permute(agg, &[0, 2, 1, 3])?;
    let agg = g.reshape(agg, &[t * n, b, POSE_DIM])?;
    let votes = g.matmul_t(agg, params.pose, false, true)?;
    let votes = g.reshape(votes, &[t, n, b, POSE_DIM])?;
    let num = g.sum_axis(votes, 0)?;
    let num = g.permute(num, &[1, 0, 2])?;

    let mass = g.reshape(w, &[t, b, pos, n])?;
    let mass = g.sum_axis(mass, 2)?;
    let mass = g.sum_axis(mass, 0)?;
    let mass3 = g.reshape(mass, &[b, n, 1])?;
    let mut pose = g.div(num, mass3)?;
    if let Some(bias) = params.pose_bias {
        pose = g.add(pose, bias)?;
    }
    let poses = g.reshape(pose, &[b, n, 4, 4])?;
    let a_sum = g.reshape(a_sum, &[b, 1])?;
    let activations = g.div(mass, a_sum)?;
    Ok(CapsuleOutput { activations, poses })
}

pub fn project<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, features: Var) -> Result<CapsuleOutput> {
    let lower = primary_capsules(g, p, features, cfg.primary_types)?;
    self_route(g, &lower, &RouteParams::from_bound(p)?)
}

pub struct Forward {
    pub encoded: Encoded,
    pub capsules: CapsuleOutput,
}

/// Encoder and projector on a batch of `B × 3 × H × W` images.
pub fn forward<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, images: Var) -> Result<Forward> {
    let encoded = encode(g, p, &cfg.encoder, images)?;
    let capsules = project(g, p, cfg, encoded.features)?;
    Ok(Forward { encoded, capsules })
}
