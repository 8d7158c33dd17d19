use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{scene_transform, tait_bryan_to_rotation, RigidTransform, TaitBryanAngles, Vec3};

pub const ROTATION_RANGE: (f64, f64) = (-FRAC_PI_2, FRAC_PI_2);
pub const TRANSLATION_RANGE: (f64, f64) = (-0.5, 0.5);
pub const HUE_RANGE: (f64, f64) = (0.0, 1.0);
pub const LIGHT_THETA_RANGE: (f64, f64) = (0.0, FRAC_PI_4);
pub const LIGHT_PHI_RANGE: (f64, f64) = (0.0, 2.0 * PI);

/// Generative parameters of one rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneLatents {
    pub rotation: TaitBryanAngles,
    /// Object-frame translation, applied before the rotation.
    pub translation: Vec3,
    pub floor_hue: f64,
    pub light_hue: f64,
    pub light_theta: f64,
    pub light_phi: f64,
}

impl SceneLatents {
    /// Independent uniform draws over the closed parameter ranges.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        let rotation = TaitBryanAngles::new(u(ROTATION_RANGE), u(ROTATION_RANGE), u(ROTATION_RANGE));
        let translation = [u(TRANSLATION_RANGE), u(TRANSLATION_RANGE), u(TRANSLATION_RANGE)];
        Self {
            rotation,
            translation,
            floor_hue: u(HUE_RANGE),
            light_hue: u(HUE_RANGE),
            light_theta: u(LIGHT_THETA_RANGE),
            light_phi: u(LIGHT_PHI_RANGE),
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let r = self.rotation;
        [r.rx, r.ry, r.rz].iter().all(|&a| within(a, ROTATION_RANGE))
            && self.translation.iter().all(|&t| within(t, TRANSLATION_RANGE))
            && within(self.floor_hue, HUE_RANGE)
            && within(self.light_hue, HUE_RANGE)
            && within(self.light_theta, LIGHT_THETA_RANGE)
            && within(self.light_phi, LIGHT_PHI_RANGE)
    }

    /// World-frame rigid transform `[[R, R t], [0, 1]]`.
    pub fn transform(&self) -> RigidTransform {
        scene_transform(self).expect("sampled latents are finite")
    }

    /// Canonical quaternion of the object rotation.
    pub fn quaternion(&self) -> [f64; 4] {
        tait_bryan_to_rotation(self.rotation)
            .expect("finite angles")
            .quaternion()
    }

    /// Base-frame translation `R t`.
    pub fn base_translation(&self) -> Vec3 {
        self.transform().translation
    }
}

pub fn sample_latents(seed: u64) -> SceneLatents {
    SceneLatents::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Appearance of a rendered view, separated from its geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub floor_hue: f64,
    pub light_hue: f64,
    pub light_theta: f64,
    pub light_phi: f64,
}

impl From<&SceneLatents> for Appearance {
    fn from(l: &SceneLatents) -> Self {
        Self {
            floor_hue: l.floor_hue,
            light_hue: l.light_hue,
            light_theta: l.light_theta,
            light_phi: l.light_phi,
        }
    }
}
