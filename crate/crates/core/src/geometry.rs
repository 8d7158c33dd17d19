//! SE(3) and SO(3) algebra in 64-bit floating point.
//!
//! Rotations are stored as canonical unit quaternions `(w, x, y, z)` with
//! `w >= 0`. Rigid transforms act on column vectors as `p' = R p + t`, with
//! homogeneous matrix `[[R, t], [0, 1]]`.
//!
//! Pose embeddings are transformed by *right* multiplication `Z · ρ(g)`. For
//! that to be a consistent group action with the world-frame relative
//! transform `g2 · g1⁻¹`, the pose representation is the transpose of the
//! homogeneous matrix (see [`RigidTransform::representation`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthscene::SceneLatents;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];
pub type Mat4 = [[f64; 4]; 4];

/// Components below this magnitude count as zero when picking the quaternion sign.
const SIGN_TOLERANCE: f64 = 1e-12;

pub const IDENTITY4: Mat4 = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

/// Extrinsic Tait–Bryan angles in radians.
///
/// The rotation is applied about the fixed X axis first, then Y, then Z,
/// i.e. `R = Rz(rz) · Ry(ry) · Rx(rx)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaitBryanAngles {
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl TaitBryanAngles {
    pub fn new(rx: f64, ry: f64, rz: f64) -> Self {
        Self { rx, ry, rz }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    quaternion: [f64; 4],
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            quaternion: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// Builds a rotation from any nonzero finite quaternion `(w, x, y, z)`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        if q.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite quaternion {q:?}")));
        }
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Err(Error::Domain("zero quaternion".into()));
        }
        Ok(Self::normalized(q))
    }

    fn normalized(q: [f64; 4]) -> Self {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut unit = q.map(|c| c / norm);
        if needs_flip(&unit) {
            unit = unit.map(|c| -c);
        }
        Self { quaternion: unit }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm3(axis);
        if !angle.is_finite() || !n.is_finite() || n < 1e-300 {
            return Err(Error::Domain(format!(
                "invalid axis-angle ({axis:?}, {angle})"
            )));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Ok(Self::normalized([
            c,
            s * axis[0] / n,
            s * axis[1] / n,
            s * axis[2] / n,
        ]))
    }

    /// Canonical unit quaternion `(w, x, y, z)`.
    pub fn quaternion(&self) -> [f64; 4] {
        self.quaternion
    }

    pub fn matrix(&self) -> Mat3 {
        let [w, x, y, z] = self.quaternion;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Recovers the canonical quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            [
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            ]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            ]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            ]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            ]
        };
        Self::from_quaternion(q)
    }

    /// Hamilton product `self ∘ rhs` (apply `rhs` first).
    pub fn compose(&self, rhs: &Rotation) -> Rotation {
        Self::normalized(quat_mul(self.quaternion, rhs.quaternion))
    }

    pub fn inverse(&self) -> Rotation {
        let [w, x, y, z] = self.quaternion;
        Self::normalized([w, -x, -y, -z])
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat3_vec(&self.matrix(), v)
    }
}

fn needs_flip(q: &[f64; 4]) -> bool {
    for &c in q {
        if c > SIGN_TOLERANCE {
            return false;
        }
        if c < -SIGN_TOLERANCE {
            return true;
        }
    }
    false
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Extrinsic X-then-Y-then-Z rotation.
pub fn tait_bryan_to_rotation(angles: TaitBryanAngles) -> Result<Rotation> {
    let TaitBryanAngles { rx, ry, rz } = angles;
    if !(rx.is_finite() && ry.is_finite() && rz.is_finite()) {
        return Err(Error::Domain(format!("non-finite Tait-Bryan angles {angles:?}")));
    }
    let half = |a: f64| (a / 2.0).sin_cos();
    let (sx, cx) = half(rx);
    let (sy, cy) = half(ry);
    let (sz, cz) = half(rz);
    let qx = [cx, sx, 0.0, 0.0];
    let qy = [cy, 0.0, sy, 0.0];
    let qz = [cz, 0.0, 0.0, sz];
    Ok(Rotation::normalized(quat_mul(qz, quat_mul(qy, qx))))
}

/// An element of SE(3): `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, [0.0; 3])
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    /// Homogeneous matrix `[[R, t], [0, 0, 0, 1]]`.
    pub fn matrix(&self) -> Mat4 {
        let r = self.rotation.matrix();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// Pose-space representation ρ(g) = `matrix(g)ᵀ`.
    ///
    /// With this choice `ρ(a·b) = ρ(b)·ρ(a)`, so right multiplication of a
    /// pose by `ρ(g2·g1⁻¹)` maps `C·ρ(g1)` exactly onto `C·ρ(g2)`.
    pub fn representation(&self) -> Mat4 {
        mat4_transpose(&self.matrix())
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_inv = self.rotation.inverse();
        let t = rot_inv.rotate(self.translation);
        RigidTransform::new(rot_inv, [-t[0], -t[1], -t[2]])
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = self.rotation.rotate(p);
        [
            r[0] + self.translation[0],
            r[1] + self.translation[1],
            r[2] + self.translation[2],
        ]
    }
}

/// `g2 ∘ g1`: apply `g1` first.
pub fn compose(g2: &RigidTransform, g1: &RigidTransform) -> RigidTransform {
    let rotation = g2.rotation.compose(&g1.rotation);
    let moved = g2.rotation.rotate(g1.translation);
    RigidTransform::new(
        rotation,
        [
            moved[0] + g2.translation[0],
            moved[1] + g2.translation[1],
            moved[2] + g2.translation[2],
        ],
    )
}

pub fn inverse(g: &RigidTransform) -> RigidTransform {
    g.inverse()
}

/// `g2 · g1⁻¹`, the transform carrying view 1 onto view 2.
pub fn relative_transform(g1: &RigidTransform, g2: &RigidTransform) -> RigidTransform {
    compose(g2, &g1.inverse())
}

/// World-frame transform of a scene: translate by the object-frame `t`, then
/// rotate by `R`, giving `[[R, R t], [0, 1]]`.
pub fn scene_transform(latents: &SceneLatents) -> Result<RigidTransform> {
    let rotation = tait_bryan_to_rotation(latents.rotation)?;
    Ok(RigidTransform::new(
        rotation,
        rotation.rotate(latents.translation),
    ))
}

/// `1 − ⟨q1, q2⟩²`, insensitive to the quaternion double cover.
pub fn rotation_distance(q1: &Rotation, q2: &Rotation) -> f64 {
    let a = q1.quaternion();
    let b = q2.quaternion();
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    (1.0 - dot * dot).clamp(0.0, 1.0)
}

/// Same as [`rotation_distance`] on raw quaternion components.
pub fn quaternion_distance(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    (1.0 - dot * dot).clamp(0.0, 1.0)
}

/// Squared Euclidean distance.
pub fn translation_distance(t1: Vec3, t2: Vec3) -> f64 {
    t1.iter().zip(t2.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn mat3_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat3_det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat4_transpose(m: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[j][i] = *v;
        }
    }
    out
}

/// Largest absolute entry of `a − b`.
pub fn mat4_max_abs_diff(a: &Mat4, b: &Mat4) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rx(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
    }
    fn ry(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
    }
    fn rz(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Gauss-Jordan inverse, independent of the closed-form SE(3) inverse.
    fn gauss_jordan_inverse(m: &Mat4) -> Mat4 {
        let mut a = *m;
        let mut inv = IDENTITY4;
        for col in 0..4 {
            let pivot = (col..4)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            inv.swap(col, pivot);
            let p = a[col][col];
            for j in 0..4 {
                a[col][j] /= p;
                inv[col][j] /= p;
            }
            for i in 0..4 {
                if i != col {
                    let f = a[i][col];
                    for j in 0..4 {
                        a[i][j] -= f * a[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
        inv
    }

    pub(crate) fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let q = loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            if q.iter().map(|c| c * c).sum::<f64>() > 1e-2 {
                break q;
            }
        };
        let t = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
        RigidTransform::new(Rotation::from_quaternion(q).unwrap(), t)
    }

    #[test]
    fn tait_bryan_zero_is_identity() {
        let r = tait_bryan_to_rotation(TaitBryanAngles::default()).unwrap();
        assert_eq!(r.quaternion(), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tait_bryan_pure_x_matches_axis_angle() {
        let r = tait_bryan_to_rotation(TaitBryanAngles::new(FRAC_PI_2, 0.0, 0.0)).unwrap();
        let expected = Rotation::from_axis_angle([1.0, 0.0, 0.0], FRAC_PI_2).unwrap();
        for (a, b) in r.quaternion().iter().zip(expected.quaternion()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tait_bryan_matches_matrix_product() {
        let r = tait_bryan_to_rotation(TaitBryanAngles::new(0.3, -0.2, 0.1)).unwrap();
        let expected = mat3_mul(&rz(0.1), &mat3_mul(&ry(-0.2), &rx(0.3)));
        let got = r.matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(got[i][j], expected[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tait_bryan_rejects_nan() {
        let err = tait_bryan_to_rotation(TaitBryanAngles::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn matrix_conventions() {
        assert_eq!(RigidTransform::identity().matrix(), IDENTITY4);
        let m = RigidTransform::from_translation([0.1, 0.2, 0.3]).matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
        assert_eq!([m[0][3], m[1][3], m[2][3], m[3][3]], [0.1, 0.2, 0.3, 1.0]);
        assert_eq!(m[3], [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn random_rotation_has_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r = random_transform(&mut rng).rotation.matrix();
            assert_abs_diff_eq!(mat3_det(&r), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn inverse_matches_gauss_jordan() {
        let g = RigidTransform::new(
            Rotation::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2).unwrap(),
            [1.0, 0.0, 0.0],
        );
        let expected = gauss_jordan_inverse(&g.matrix());
        assert!(mat4_max_abs_diff(&g.inverse().matrix(), &expected) < 1e-12);
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
    }

    #[test]
    fn relative_transform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g1 = random_transform(&mut rng);
        let g2 = random_transform(&mut rng);
        let same = relative_transform(&g1, &g1);
        assert!(mat4_max_abs_diff(&same.matrix(), &IDENTITY4) < 1e-12);
        let from_id = relative_transform(&RigidTransform::identity(), &g2);
        assert!(mat4_max_abs_diff(&from_id.matrix(), &g2.matrix()) < 1e-12);
        let rel = relative_transform(&g1, &g2);
        let lhs = mat4_mul(&rel.matrix(), &g1.matrix());
        assert!(mat4_max_abs_diff(&lhs, &g2.matrix()) < 1e-9);
    }

    #[test]
    fn scene_transform_is_translate_then_rotate() {
        let mut latents = SceneLatents::default();
        latents.translation = [0.5, 0.0, 0.0];
        let g = scene_transform(&latents).unwrap();
        assert_eq!(g.translation, [0.5, 0.0, 0.0]);

        latents.rotation = TaitBryanAngles::new(0.0, 0.0, FRAC_PI_2);
        latents.translation = [1.0, 0.0, 0.0];
        let g = scene_transform(&latents).unwrap();
        let r = rz(FRAC_PI_2);
        let expected = mat3_vec(&r, [1.0, 0.0, 0.0]);
        for k in 0..3 {
            assert_abs_diff_eq!(g.translation[k], expected[k], epsilon = 1e-9);
        }
        assert_abs_diff_eq!(g.translation[1], 1.0, epsilon = 1e-9);

        latents.translation = [0.0; 3];
        assert_eq!(scene_transform(&latents).unwrap().translation, [0.0; 3]);
    }

    #[test]
    fn distances() {
        let q = Rotation::from_axis_angle([1.0, 2.0, 3.0], 0.7).unwrap();
        assert_abs_diff_eq!(rotation_distance(&q, &q), 0.0, epsilon = 1e-15);
        let x = Rotation::from_quaternion([0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(rotation_distance(&Rotation::identity(), &x), 1.0);
        let raw = q.quaternion();
        assert_abs_diff_eq!(quaternion_distance(raw, raw.map(|c| -c)), 0.0, epsilon = 1e-15);
        assert_eq!(translation_distance([0.0; 3], [1.0; 3]), 3.0);
        let (a, b) = ([0.1, -2.0, 3.0], [4.0, 0.5, -1.0]);
        assert_eq!(translation_distance(a, b), translation_distance(b, a));
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_quaternion([-0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(r.quaternion()[0] > 0.0);
        let half_turn = Rotation::from_axis_angle([0.0, -1.0, 0.0], PI).unwrap();
        let q = half_turn.quaternion();
        assert_abs_diff_eq!(q[0], 0.0, epsilon = 1e-12);
        assert!(q[2] > 0.0);
    }

    #[test]
    fn group_axioms_on_random_elements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let id = RigidTransform::identity();
            assert!(mat4_max_abs_diff(&compose(&a, &id).matrix(), &a.matrix()) < 1e-9);
            assert!(mat4_max_abs_diff(&compose(&a, &a.inverse()).matrix(), &IDENTITY4) < 1e-9);
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert!(mat4_max_abs_diff(&left.matrix(), &right.matrix()) < 1e-9);
            let product = mat4_mul(&a.matrix(), &b.matrix());
            assert!(mat4_max_abs_diff(&compose(&a, &b).matrix(), &product) < 1e-9);
            assert!(mat4_max_abs_diff(&a.inverse().inverse().matrix(), &a.matrix()) < 1e-9);
        }
    }

    #[test]
    fn representation_is_a_right_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g1 = random_transform(&mut rng);
        let g2 = random_transform(&mut rng);
        let rel = relative_transform(&g1, &g2);
        let moved = mat4_mul(&g1.representation(), &rel.representation());
        assert!(mat4_max_abs_diff(&moved, &g2.representation()) < 1e-9);
    }

    fn arb_quaternion() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0..1.0f64)
            .prop_filter("non-degenerate", |q| q.iter().map(|c| c * c).sum::<f64>() > 1e-2)
    }

    proptest! {
        #[test]
        fn quaternion_matrix_round_trip(q in arb_quaternion()) {
            let r = Rotation::from_quaternion(q).unwrap();
            let back = Rotation::from_matrix(&r.matrix()).unwrap();
            for (a, b) in r.quaternion().iter().zip(back.quaternion()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let n: f64 = r.quaternion().iter().map(|c| c * c).sum();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn rotation_distance_in_unit_range(a in arb_quaternion(), b in arb_quaternion()) {
            let d = rotation_distance(
                &Rotation::from_quaternion(a).unwrap(),
                &Rotation::from_quaternion(b).unwrap(),
            );
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
