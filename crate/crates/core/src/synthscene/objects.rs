//! Parametric object classes built from boxes and wedges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    /// Grey-level surface reflectance in [0, 1].
    pub albedo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
enum Kind {
    Box,
    /// Right-triangle prism along z, tall side at −x.
    Wedge,
}

#[derive(Debug, Clone, Copy)]
struct Part {
    kind: Kind,
    center: Vec3,
    half: Vec3,
}

const fn bx(center: Vec3, half: Vec3) -> Part {
    Part { kind: Kind::Box, center, half }
}

const fn wedge(center: Vec3, half: Vec3) -> Part {
    Part { kind: Kind::Wedge, center, half }
}

pub const CLASS_NAMES: [&str; 10] = [
    "chair", "table", "airplane", "lamp", "stairs", "car", "arch", "hammer", "ramp", "signpost",
];

pub const MAX_CLASSES: usize = CLASS_NAMES.len();

const ALBEDO: [f64; 6] = [0.92, 0.72, 0.84, 0.62, 0.78, 0.68];

fn template(class: usize) -> Vec<Part> {
    match class {
        0 => vec![
            bx([0.0, 0.0, 0.0], [0.5, 0.08, 0.5]),
            bx([0.0, 0.55, -0.42], [0.5, 0.5, 0.08]),
            bx([0.42, -0.45, 0.42], [0.07, 0.4, 0.07]),
            bx([-0.42, -0.45, 0.42], [0.07, 0.4, 0.07]),
            bx([0.42, -0.45, -0.42], [0.07, 0.4, 0.07]),
            bx([-0.42, -0.45, -0.42], [0.07, 0.4, 0.07]),
        ],
        1 => vec![
            bx([0.0, 0.4, 0.0], [0.8, 0.07, 0.5]),
            bx([0.7, -0.1, 0.4], [0.06, 0.45, 0.06]),
            bx([-0.7, -0.1, 0.4], [0.06, 0.45, 0.06]),
            bx([0.7, -0.1, -0.4], [0.06, 0.45, 0.06]),
            bx([-0.7, -0.1, -0.4], [0.06, 0.45, 0.06]),
        ],
        2 => vec![
            bx([0.0, 0.0, 0.0], [0.15, 0.15, 0.9]),
            bx([0.0, 0.0, 0.1], [0.9, 0.04, 0.2]),
            bx([0.0, 0.3, -0.8], [0.03, 0.3, 0.12]),
            bx([0.0, 0.0, -0.8], [0.35, 0.03, 0.1]),
            wedge([0.0, 0.0, 1.0], [0.15, 0.15, 0.1]),
        ],
        3 => vec![
            bx([0.0, -0.8, 0.0], [0.4, 0.08, 0.4]),
            bx([0.0, -0.1, 0.0], [0.06, 0.65, 0.06]),
            bx([0.3, 0.55, 0.0], [0.3, 0.05, 0.05]),
            wedge([0.6, 0.4, 0.0], [0.2, 0.2, 0.2]),
        ],
        4 => (0..4)
            .map(|i| {
                let h = 0.4 * (i as f64 + 1.0);
                bx([0.0, -0.8 + h / 2.0, -0.6 + 0.4 * i as f64], [0.5, h / 2.0, 0.2])
            })
            .collect(),
        5 => vec![
            bx([0.0, -0.2, 0.0], [0.45, 0.2, 0.9]),
            bx([0.0, 0.2, -0.1], [0.4, 0.2, 0.45]),
            bx([0.5, -0.4, 0.55], [0.06, 0.2, 0.2]),
            bx([-0.5, -0.4, 0.55], [0.06, 0.2, 0.2]),
            bx([0.5, -0.4, -0.55], [0.06, 0.2, 0.2]),
            bx([-0.5, -0.4, -0.55], [0.06, 0.2, 0.2]),
        ],
        6 => vec![
            bx([0.6, 0.0, 0.0], [0.2, 0.8, 0.3]),
            bx([-0.6, 0.0, 0.0], [0.2, 0.8, 0.3]),
            bx([0.0, 0.7, 0.0], [0.8, 0.15, 0.3]),
            wedge([-0.2, 1.0, 0.0], [0.4, 0.15, 0.3]),
        ],
        7 => vec![
            bx([0.0, -0.2, 0.0], [0.07, 0.8, 0.07]),
            bx([0.15, 0.6, 0.0], [0.45, 0.15, 0.15]),
            wedge([-0.45, 0.6, 0.0], [0.15, 0.12, 0.12]),
        ],
        8 => vec![
            wedge([0.0, -0.2, 0.0], [0.8, 0.4, 0.5]),
            bx([-0.9, 0.2, 0.0], [0.1, 0.8, 0.5]),
        ],
        9 => vec![
            bx([0.0, 0.0, 0.0], [0.08, 0.9, 0.08]),
            bx([0.35, 0.6, 0.0], [0.35, 0.2, 0.04]),
            bx([0.0, -0.85, 0.0], [0.3, 0.05, 0.3]),
        ],
        _ => unreachable!("class id checked by caller"),
    }
}

/// A triangulated object instance in unit-box normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub instance_id: usize,
    pub triangles: Vec<Triangle>,
}

impl ObjectSpec {
    /// Class template with per-instance dimension jitter, deterministic in `seed`.
    pub fn generate(class_id: usize, instance_id: usize, seed: u64) -> Result<Self> {
        if class_id >= MAX_CLASSES {
            return Err(Error::Invalid(format!(
                "class id {class_id} out of range (at most {MAX_CLASSES} classes)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let global: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..1.2));
        let mut triangles = Vec::new();
        for (p, part) in template(class_id).into_iter().enumerate() {
            let center: Vec3 = std::array::from_fn(|k| part.center[k] * global[k]);
            let half: Vec3 = std::array::from_fn(|k| part.half[k] * global[k] * rng.gen_range(0.85..1.15));
            let albedo = ALBEDO[p % ALBEDO.len()];
            triangles.extend(part_triangles(part.kind, center, half, albedo));
        }
        let mut spec = Self {
            class_id,
            instance_id,
            triangles,
        };
        spec.normalize();
        Ok(spec)
    }

    /// Centers the bounding box and scales uniformly so the longest side is 1.
    fn normalize(&mut self) {
        let (lo, hi) = self.bounds();
        let center: Vec3 = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0f64, f64::max);
        let s = if extent > 0.0 { 1.0 / extent } else { 1.0 };
        for t in &mut self.triangles {
            for v in &mut t.vertices {
                for k in 0..3 {
                    // clamp guards the last ulp after scaling
                    v[k] = ((v[k] - center[k]) * s).clamp(-0.5, 0.5);
                }
            }
        }
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in &self.triangles {
            for v in &t.vertices {
                for k in 0..3 {
                    lo[k] = lo[k].min(v[k]);
                    hi[k] = hi[k].max(v[k]);
                }
            }
        }
        (lo, hi)
    }

    pub fn class_name(&self) -> &'static str {
        CLASS_NAMES[self.class_id]
    }
}

fn part_triangles(kind: Kind, c: Vec3, h: Vec3, albedo: f64) -> Vec<Triangle> {
    let p = |sx: f64, sy: f64, sz: f64| [c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2]];
    let quad = |a: Vec3, b: Vec3, cc: Vec3, d: Vec3| {
        [
            Triangle { vertices: [a, b, cc], albedo },
            Triangle { vertices: [a, cc, d], albedo },
        ]
    };
    let mut out = Vec::new();
    match kind {
        Kind::Box => {
            let v: Vec<Vec3> = (0..8)
                .map(|i| {
                    let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
                    p(s(0), s(1), s(2))
                })
                .collect();
            for f in [[0, 1, 3, 2], [4, 6, 7, 5], [0, 4, 5, 1], [2, 3, 7, 6], [0, 2, 6, 4], [1, 5, 7, 3]] {
                out.extend(quad(v[f[0]], v[f[1]], v[f[2]], v[f[3]]));
            }
        }
        Kind::Wedge => {
            let (a0, b0, c0) = (p(-1.0, -1.0, -1.0), p(1.0, -1.0, -1.0), p(-1.0, 1.0, -1.0));
            let (a1, b1, c1) = (p(-1.0, -1.0, 1.0), p(1.0, -1.0, 1.0), p(-1.0, 1.0, 1.0));
            out.push(Triangle { vertices: [a0, c0, b0], albedo });
            out.push(Triangle { vertices: [a1, b1, c1], albedo });
            out.extend(quad(a0, b0, b1, a1));
            out.extend(quad(b0, c0, c1, b1));
            out.extend(quad(c0, a0, a1, c1));
        }
    }
    out
}
