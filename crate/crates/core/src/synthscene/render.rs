//! Software z-buffer rasterizer with flat Lambertian shading.

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

use super::latents::{Appearance, SceneLatents};
use super::objects::ObjectSpec;

/// An RGB image, row-major `H × W × 3`, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                bytes.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Fixed pinhole camera on the +z axis looking at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub distance: f64,
    pub tan_half_fov: f64,
}

impl Default for Camera {
    /// Any point within √3 of the origin (unit-box mesh plus maximal
    /// translation) stays inside the frustum: sin(half fov) ≥ √3 / 4.
    fn default() -> Self {
        Self {
            distance: 4.0,
            tan_half_fov: 0.5,
        }
    }
}

impl Camera {
    /// Continuous pixel coordinates and camera depth of a world point.
    pub fn project(&self, p: Vec3, res: usize) -> (f64, f64, f64) {
        let depth = self.distance - p[2];
        let f = 1.0 / self.tan_half_fov;
        let half = res as f64 / 2.0;
        let sx = f * p[0] / depth;
        let sy = f * p[1] / depth;
        (half + sx * half, half - sy * half, depth)
    }
}

const AMBIENT: f64 = 0.25;
const DIFFUSE: f64 = 0.75;

/// Standard HSV to RGB with S = V = 1.
pub fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = (hue.rem_euclid(1.0)) * 6.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (q, t) = (1.0 - f, f);
    match sector {
        0 => [1.0, t, 0.0],
        1 => [q, 1.0, 0.0],
        2 => [0.0, 1.0, t],
        3 => [0.0, q, 1.0],
        4 => [t, 0.0, 1.0],
        _ => [1.0, 0.0, q],
    }
}

/// Unit vector from the scene towards the light; θ is the tilt away from the camera axis.
pub fn light_direction(theta: f64, phi: f64) -> Vec3 {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]
}

pub struct Rendered {
    pub image: Image,
    /// Foreground coverage, row-major `H × W`.
    pub mask: Vec<bool>,
}

pub fn render(object: &ObjectSpec, latents: &SceneLatents, res: usize) -> Result<Image> {
    Ok(render_with(object, &latents.transform(), &Appearance::from(latents), res, &Camera::default())?.image)
}

pub fn render_with(
    object: &ObjectSpec,
    pose: &RigidTransform,
    look: &Appearance,
    res: usize,
    camera: &Camera,
) -> Result<Rendered> {
    if object.triangles.is_empty() {
        return Err(Error::Invalid("cannot render an empty mesh".into()));
    }
    if res == 0 {
        return Err(Error::Invalid("resolution must be positive".into()));
    }
    let bg = hue_to_rgb(look.floor_hue).map(|v| v as f32);
    let light_rgb = hue_to_rgb(look.light_hue);
    let light = light_direction(look.light_theta, look.light_phi);
    let eye = [0.0, 0.0, camera.distance];

    let mut image = Image::filled(res, res, bg);
    let mut mask = vec![false; res * res];
    // 1/depth is affine in screen space, so it interpolates exactly
    let mut inv_depth = vec![0.0f64; res * res];

    for tri in &object.triangles {
        let w = tri.vertices.map(|v| pose.apply(v));
        let e1 = sub(w[1], w[0]);
        let e2 = sub(w[2], w[0]);
        let mut n = cross(e1, e2);
        let len = dot(n, n).sqrt();
        if len < 1e-15 {
            continue;
        }
        n = n.map(|v| v / len);
        let centroid: Vec3 = std::array::from_fn(|k| (w[0][k] + w[1][k] + w[2][k]) / 3.0);
        if dot(n, sub(eye, centroid)) < 0.0 {
            n = n.map(|v| -v);
        }
        let lambert = dot(n, light).max(0.0);
        let shade: [f32; 3] =
            std::array::from_fn(|k| (tri.albedo * (AMBIENT + DIFFUSE * lambert * light_rgb[k])).min(1.0) as f32);

        let p = w.map(|v| camera.project(v, res));
        let area = edge(p[0], p[1], p[2].0, p[2].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let ymin = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let xmax = (p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(res as isize - 1);
        let ymax = (p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).ceil() as isize).min(res as isize - 1);
        if xmax < 0 || ymax < 0 {
            continue;
        }
        for y in ymin..=ymax as usize {
            for x in xmin..=xmax as usize {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let b0 = edge(p[1], p[2], cx, cy) / area;
                let b1 = edge(p[2], p[0], cx, cy) / area;
                let b2 = 1.0 - b0 - b1;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = b0 / p[0].2 + b1 / p[1].2 + b2 / p[2].2;
                let idx = y * res + x;
                if z > inv_depth[idx] {
                    inv_depth[idx] = z;
                    mask[idx] = true;
                    image.data[idx * 3..idx * 3 + 3].copy_from_slice(&shade);
                }
            }
        }
    }
    Ok(Rendered { image, mask })
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
