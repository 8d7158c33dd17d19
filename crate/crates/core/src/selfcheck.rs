//! Built-in correctness checks that need no trained model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::capsnet::reference::RoutingInstance;
use crate::capsnet::{forward, init_params, EncoderConfig, ModelConfig};
use crate::error::Result;
use crate::evaluation::{analytic_embedding, expected_random_mrr, retrieval_metrics, ObjectViews, RetrievalConfig};
use crate::geometry::{compose, mat4_max_abs_diff, mat4_mul, RigidTransform, Rotation};
use crate::losses::{
    covariance_term, equivariance_loss, invariance_loss, memax_term, representation_tensor, total_loss, variance_term,
    BatchEmbeddings, LossWeights,
};
use crate::synthscene::{Dataset, Split};
use crate::tensor::gradcheck::{self, GradCheckOptions, Objective};
use crate::tensor::{Bound, Graph, ParamStore, Real, Tensor, Var};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn random_transform(rng: &mut impl Rng, max_translation: f64) -> RigidTransform {
    let q = loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if q.iter().map(|c| c * c).sum::<f64>() > 1e-2 {
            break q;
        }
    };
    let t = std::array::from_fn(|_| rng.gen_range(-max_translation..max_translation));
    RigidTransform::new(Rotation::from_quaternion(q).expect("non-zero quaternion"), t)
}

/// Identity, inverse, associativity and the matrix homomorphism on random
/// rigid transforms; reports the largest deviation.
pub fn group_axioms(samples: usize, seed: u64) -> CheckResult {
    timed("group axioms", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = RigidTransform::identity();
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let (a, b, c) = (
                random_transform(&mut rng, 2.0),
                random_transform(&mut rng, 2.0),
                random_transform(&mut rng, 2.0),
            );
            let m = a.matrix();
            for e in [
                mat4_max_abs_diff(&compose(&a, &id).matrix(), &m),
                mat4_max_abs_diff(&compose(&id, &a).matrix(), &m),
                mat4_max_abs_diff(&compose(&a, &a.inverse()).matrix(), &id.matrix()),
                mat4_max_abs_diff(&compose(&a.inverse(), &a).matrix(), &id.matrix()),
                mat4_max_abs_diff(
                    &compose(&compose(&a, &b), &c).matrix(),
                    &compose(&a, &compose(&b, &c)).matrix(),
                ),
                mat4_max_abs_diff(&compose(&a, &b).matrix(), &mat4_mul(&a.matrix(), &b.matrix())),
                mat4_max_abs_diff(
                    &compose(&a, &b).representation(),
                    &mat4_mul(&b.representation(), &a.representation()),
                ),
            ] {
                worst = worst.max(e);
            }
        }
        Ok((worst <= 1e-9, format!("{samples} samples, max deviation {worst:.3e}")))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossTerm {
    Invariance,
    Memax,
    Equivariance,
    Variance,
    Covariance,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        Self::Invariance,
        Self::Memax,
        Self::Equivariance,
        Self::Variance,
        Self::Covariance,
        Self::Total,
    ];
}

/// One loss term on a toy batch; activations come from a softmax over free logits.
pub struct LossToy {
    pub term: LossTerm,
    pub transforms: Vec<RigidTransform>,
}

impl LossToy {
    pub fn params(batch: usize, capsules: usize, seed: u64) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut put = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            let n = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            p.insert(name, Tensor::new(shape, data).expect("shape"));
        };
        put("logits1", &[batch, capsules], &mut rng);
        put("logits2", &[batch, capsules], &mut rng);
        put("poses1", &[batch, capsules, 4, 4], &mut rng);
        put("poses2", &[batch, capsules, 4, 4], &mut rng);
        p
    }
}

impl Objective for LossToy {
    fn build<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let l1 = p.var("logits1")?;
        let l2 = p.var("logits2")?;
        let a1 = g.softmax(l1)?;
        let a2 = g.softmax(l2)?;
        let z1 = p.var("poses1")?;
        let z2 = p.var("poses2")?;
        let rho = g.constant(representation_tensor(&self.transforms));
        let b = g.shape(z1)[0];
        let flat = |g: &mut Graph<T>, z: Var| {
            let n = g.shape(z)[1];
            g.reshape(z, &[b, n * 16])
        };
        match self.term {
            LossTerm::Invariance => invariance_loss(g, a1, a2),
            LossTerm::Memax => memax_term(g, a1),
            LossTerm::Equivariance => equivariance_loss(g, z1, z2, rho),
            LossTerm::Variance => {
                let z = flat(g, z1)?;
                variance_term(g, z)
            }
            LossTerm::Covariance => {
                let z = flat(g, z1)?;
                covariance_term(g, z)
            }
            LossTerm::Total => {
                let v1 = BatchEmbeddings {
                    activations: a1,
                    poses: z1,
                };
                let v2 = BatchEmbeddings {
                    activations: a2,
                    poses: z2,
                };
                Ok(total_loss(g, &v1, &v2, rho, &LossWeights::default())?.total)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TermGradients {
    pub term: LossTerm,
    pub max_rel_error_f32: f64,
    pub max_rel_error_f64: f64,
}

/// Gradient check of every loss term on 2 samples and 4 capsules.
pub fn loss_gradients(seed: u64) -> Result<Vec<TermGradients>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transforms = vec![random_transform(&mut rng, 0.5), random_transform(&mut rng, 0.5)];
    let params = LossToy::params(2, 4, seed);
    LossTerm::ALL
        .iter()
        .map(|&term| {
            let toy = LossToy {
                term,
                transforms: transforms.clone(),
            };
            let worst = |r: Vec<gradcheck::GroupReport>| r.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
            Ok(TermGradients {
                term,
                max_rel_error_f32: worst(gradcheck::check::<f32, _>(&toy, &params, GradCheckOptions::for_bits(32))?),
                max_rel_error_f64: worst(gradcheck::check::<f64, _>(&toy, &params, GradCheckOptions::for_bits(64))?),
            })
        })
        .collect()
}

pub fn loss_gradient_check(seed: u64) -> CheckResult {
    timed("loss gradients", || {
        let terms = loss_gradients(seed)?;
        let ok = terms
            .iter()
            .all(|t| t.max_rel_error_f32 < 1e-2 && t.max_rel_error_f64 < 1e-4);
        let detail = terms
            .iter()
            .map(|t| format!("{:?} f32 {:.1e} f64 {:.1e}", t.term, t.max_rel_error_f32, t.max_rel_error_f64))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((ok, detail))
    })
}

/// The full model and total loss on two tiny random image pairs.
pub struct ModelToy {
    pub model: ModelConfig,
    pub images: Tensor<f64>,
    pub transforms: Vec<RigidTransform>,
}

impl ModelToy {
    pub fn new(seed: u64) -> (Self, ParamStore<f64>) {
        let model = ModelConfig {
            encoder: EncoderConfig {
                resolution: 8,
                channels: vec![3, 4],
                strides: vec![2, 2],
                kernel: 3,
                norm_groups: 2,
            },
            primary_types: 2,
            capsules: 4,
            pose_bias: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: ParamStore<f64> = init_params(&model, &mut rng).expect("valid toy model");
        // non-zero biases keep pre-activations away from ReLU kinks
        for (name, t) in params.iter_mut() {
            if name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let data: Vec<f64> = (0..4 * 3 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let toy = Self {
            model,
            images: Tensor::new(&[4, 3, 8, 8], data).expect("shape"),
            transforms: vec![random_transform(&mut rng, 0.5), random_transform(&mut rng, 0.5)],
        };
        (toy, params)
    }
}

impl Objective for ModelToy {
    fn build<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var> {
        let x = g.constant(self.images.cast());
        let out = forward(g, p, &self.model, x)?;
        let (act, poses) = (out.capsules.activations, out.capsules.poses);
        let v1 = BatchEmbeddings {
            activations: g.slice(act, 0, 0, 2)?,
            poses: g.slice(poses, 0, 0, 2)?,
        };
        let v2 = BatchEmbeddings {
            activations: g.slice(act, 0, 2, 2)?,
            poses: g.slice(poses, 0, 2, 2)?,
        };
        let rho = g.constant(representation_tensor(&self.transforms));
        Ok(total_loss(g, &v1, &v2, rho, &LossWeights::default())?.total)
    }
}

/// Vectorized routing against the loop reference on random small instances.
pub fn routing_oracle(instances: usize, seed: u64) -> CheckResult {
    timed("routing oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut worst, mut sum_dev) = (0.0f64, 0.0f64);
        for _ in 0..instances {
            let (b, pos, t, n) = (
                rng.gen_range(1..=3),
                rng.gen_range(1..=6),
                rng.gen_range(1..=3),
                rng.gen_range(1..=5),
            );
            let inst = RoutingInstance::random(b, pos, t, n, &mut rng);
            let (a1, p1) = inst.run();
            let (a2, p2) = inst.naive();
            for (x, y) in a1.iter().chain(&p1).zip(a2.iter().chain(&p2)) {
                worst = worst.max((x - y).abs());
            }
            for row in a1.chunks(n) {
                sum_dev = sum_dev.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((
            worst <= 1e-5 && sum_dev <= 1e-5,
            format!("{instances} instances, max deviation {worst:.3e}, max |sum a - 1| {sum_dev:.3e}"),
        ))
    })
}

/// Retrieval on perfectly equivariant embeddings of a split, and on random
/// embeddings against the uniform-rank expectation.
pub fn metric_oracle(ds: &Dataset, split: Split, capsules: usize, seed: u64) -> CheckResult {
    timed("metric oracle", || {
        let m = &ds.manifest;
        let instances = m.instances(split);
        let analytic: Vec<ObjectViews> = instances
            .iter()
            .map(|&i| ObjectViews {
                instance: i,
                embeddings: (0..m.views).map(|v| analytic_embedding(&m.view(i, v).transform(), capsules)).collect(),
                latents: (0..m.views).map(|v| *m.view(i, v)).collect(),
            })
            .collect();
        let cfg = RetrievalConfig {
            seed,
            ..RetrievalConfig::default()
        };
        let exact = retrieval_metrics(&analytic, None, &cfg)?;
        let exact_ok = exact.mrr == 1.0
            && exact.hit_at_1 == 1.0
            && exact.hit_at_5 == 1.0
            && exact.pre_rotation < 1e-9
            && exact.pre_translation < 1e-9;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random: Vec<ObjectViews> = analytic
            .iter()
            .map(|o| ObjectViews {
                embeddings: (0..m.views)
                    .map(|_| {
                        let raw: Vec<f32> = (0..capsules * 16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                        crate::evaluation::normalize_pose_blocks(&raw)
                    })
                    .collect(),
                ..o.clone()
            })
            .collect();
        // the uniform-rank expectation needs the prediction to be exchangeable
        // with every candidate, so the source view is left out here
        let rcfg = RetrievalConfig {
            include_source: false,
            ..cfg
        };
        let rand = retrieval_metrics(&random, None, &rcfg)?;
        let expected = expected_random_mrr(m.views - 1);
        let rand_ok = (rand.mrr - expected).abs() <= 0.02;
        Ok((
            exact_ok && rand_ok,
            format!(
                "oracle MRR {} H@1 {} H@5 {} PRE_r {:.1e} PRE_t {:.1e}; random MRR {:.4} vs {:.4} over {} queries",
                exact.mrr, exact.hit_at_1, exact.hit_at_5, exact.pre_rotation, exact.pre_translation, rand.mrr, expected, rand.queries
            ),
        ))
    })
}

/// Every check, on the given dataset's validation split.
pub fn run_all(ds: &Dataset, seed: u64) -> Vec<CheckResult> {
    vec![
        group_axioms(1000, seed),
        loss_gradient_check(seed),
        routing_oracle(50, seed),
        metric_oracle(ds, Split::Val, 32, seed),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::DatasetConfig;

    #[test]
    fn checks_pass_on_a_small_dataset() {
        let ds = Dataset::generate(&DatasetConfig {
            seed: 1,
            classes: 2,
            instances_per_class: 5,
            views: 6,
            resolution: 8,
        })
        .unwrap();
        for r in run_all(&ds, 3) {
            assert!(r.name == "metric oracle" || r.passed, "{}: {}", r.name, r.detail);
        }
        assert!(metric_oracle(&ds, Split::Train, 4, 0).detail.contains("oracle MRR 1 "));
    }

    #[test]
    fn model_toy_gradients_match() {
        let (toy, params) = ModelToy::new(2);
        for r in gradcheck::check::<f64, _>(&toy, &params, GradCheckOptions::for_bits(64)).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn loss_gradients_meet_tolerances() {
        for t in loss_gradients(11).unwrap() {
            assert!(t.max_rel_error_f32 < 1e-2, "{:?} {}", t.term, t.max_rel_error_f32);
            assert!(t.max_rel_error_f64 < 1e-4, "{:?} {}", t.term, t.max_rel_error_f64);
        }
    }
}
