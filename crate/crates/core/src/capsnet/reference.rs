//! Loop-level reference implementation of self-routing.

use rand::Rng;

use super::{self_route, LowerCapsules, RouteParams};
use crate::tensor::{Graph, Tensor};

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Random routing inputs at 64-bit.
#[derive(Debug, Clone)]
pub struct RoutingInstance {
    pub u: Tensor<f64>,
    pub a: Tensor<f64>,
    pub route: Tensor<f64>,
    pub pose: Tensor<f64>,
    pub bias: Tensor<f64>,
}

impl RoutingInstance {
    pub fn random(b: usize, pos: usize, t: usize, n: usize, rng: &mut impl Rng) -> Self {
        Self {
            u: uniform(&[b, pos, t, 16], -1.0, 1.0, rng),
            a: uniform(&[b, pos, t], 0.01, 1.0, rng),
            route: uniform(&[t, 16, n], -1.0, 1.0, rng),
            pose: uniform(&[t * n, 16, 16], -0.5, 0.5, rng),
            bias: uniform(&[n, 16], -0.1, 0.1, rng),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.u.shape();
        (s[0], s[1], s[2], self.route.shape()[2])
    }

    /// Vectorized [`self_route`].
    pub fn run(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let lower = LowerCapsules {
            poses: g.constant(self.u.clone()),
            activations: g.constant(self.a.clone()),
        };
        let params = RouteParams {
            route: g.constant(self.route.clone()),
            pose: g.constant(self.pose.clone()),
            pose_bias: Some(g.constant(self.bias.clone())),
        };
        let out = self_route(&mut g, &lower, &params).expect("valid instance");
        (g.value(out.activations).data().to_vec(), g.value(out.poses).data().to_vec())
    }

    /// Direct loops over samples, upper capsules and lower capsules.
    pub fn naive(&self) -> (Vec<f64>, Vec<f64>) {
        let (b, pos, t, n) = self.dims();
        let (u, a, wr, wp, bias) = (self.u.data(), self.a.data(), self.route.data(), self.pose.data(), self.bias.data());
        let mut acts = vec![0.0; b * n];
        let mut poses = vec![0.0; b * n * 16];
        for s in 0..b {
            let lower: Vec<(usize, usize)> = (0..pos).flat_map(|p| (0..t).map(move |ty| (p, ty))).collect();
            let mut c = vec![vec![0.0; n]; lower.len()];
            for (i, &(p, ty)) in lower.iter().enumerate() {
                let ui = &u[((s * pos + p) * t + ty) * 16..][..16];
                let logits: Vec<f64> = (0..n)
                    .map(|j| (0..16).map(|k| ui[k] * wr[(ty * 16 + k) * n + j]).sum())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..n {
                    c[i][j] = (logits[j] - m).exp() / z;
                }
            }
            let a_of = |p: usize, ty: usize| a[(s * pos + p) * t + ty];
            let a_total: f64 = lower.iter().map(|&(p, ty)| a_of(p, ty)).sum();
            for j in 0..n {
                let mut mass = 0.0;
                let mut acc = [0.0; 16];
                for (i, &(p, ty)) in lower.iter().enumerate() {
                    let w = c[i][j] * a_of(p, ty);
                    mass += w;
                    let ui = &u[((s * pos + p) * t + ty) * 16..][..16];
                    let m = &wp[(ty * n + j) * 256..][..256];
                    for r in 0..16 {
                        let vote: f64 = (0..16).map(|k| m[r * 16 + k] * ui[k]).sum();
                        acc[r] += w * vote;
                    }
                }
                acts[s * n + j] = mass / a_total;
                for r in 0..16 {
                    poses[(s * n + j) * 16 + r] = acc[r] / mass + bias[j * 16 + r];
                }
            }
        }
        (acts, poses)
    }
}
