//! Training criteria on capsule embeddings.
//!
//! All functions record onto a [`Graph`] and return scalar [`Var`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RigidTransform;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LOG_EPS: f64 = 1e-8;
pub const NORM_EPS: f64 = 1e-8;
pub const VAR_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemaxSign {
    /// Entropies are maximized: subtracted from the minimized loss.
    Subtract,
    /// Entropies added to the loss as literally written.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_inv: f64,
    pub lambda_equi: f64,
    pub lambda_var: f64,
    pub lambda_cov: f64,
    pub enable_inv: bool,
    pub enable_memax: bool,
    pub enable_equi: bool,
    pub enable_reg: bool,
    /// Regularize only the flattened poses instead of activations and poses.
    pub reg_poses_only: bool,
    pub memax_sign: MemaxSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_inv: 0.1,
            lambda_equi: 5.0,
            lambda_var: 10.0,
            lambda_cov: 1.0,
            enable_inv: true,
            enable_memax: true,
            enable_equi: true,
            enable_reg: true,
            reg_poses_only: false,
            memax_sign: MemaxSign::Subtract,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_inv", self.lambda_inv),
            ("lambda_equi", self.lambda_equi),
            ("lambda_var", self.lambda_var),
            ("lambda_cov", self.lambda_cov),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        Ok(())
    }

    /// Every term switched off.
    pub fn none() -> Self {
        Self {
            enable_inv: false,
            enable_memax: false,
            enable_equi: false,
            enable_reg: false,
            ..Self::default()
        }
    }
}

/// `(1/B) Σ_i −Σ_j p_ij ln max(q_ij, ε)`.
pub fn invariance_loss<T: Real>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let b = batch_of(g, p)?;
    let lq = g.log(q, T::lit(LOG_EPS));
    let prod = g.mul(p, lq)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, T::lit(-1.0 / b as f64)))
}

/// Entropy of the batch-mean activation distribution.
pub fn memax_term<T: Real>(g: &mut Graph<T>, act: Var) -> Result<Var> {
    let mean = g.mean_axis(act, 0)?;
    let lm = g.log(mean, T::lit(LOG_EPS));
    let prod = g.mul(mean, lm)?;
    let s = g.sum_all(prod);
    Ok(g.neg(s))
}

/// Divides every 4×4 pose of a `B × N × 4 × 4` tensor by its Frobenius norm.
pub fn normalize_poses<T: Real>(g: &mut Graph<T>, poses: Var) -> Result<Var> {
    let s = pose_shape(g, poses)?;
    let sq = g.square(poses);
    let flat = g.reshape(sq, &[s[0], s[1], 16])?;
    let ss = g.sum_axis(flat, 2)?;
    let ss = g.clamp_min(ss, T::lit(NORM_EPS * NORM_EPS));
    let norm = g.sqrt(ss);
    let norm = g.reshape(norm, &[s[0], s[1], 1, 1])?;
    g.div(poses, norm)
}

/// `B × 4 × 4` tensor of the right-acting representation of each transform.
pub fn representation_tensor<T: Real>(transforms: &[RigidTransform]) -> Tensor<T> {
    let data: Vec<f64> = transforms
        .iter()
        .flat_map(|g| g.representation().into_iter().flatten())
        .collect();
    Tensor::from_f64(&[transforms.len(), 4, 4], &data).expect("4x4 blocks")
}

/// Per-capsule right multiplication `Z_n · ρ` followed by normalization.
pub fn align_poses<T: Real>(g: &mut Graph<T>, poses: Var, rho: Var) -> Result<Var> {
    let s = pose_shape(g, poses)?;
    if g.shape(rho) != [s[0], 4, 4] {
        return Err(Error::shape("align_poses", g.shape(rho), &[s[0], 4, 4]));
    }
    let rows = g.reshape(poses, &[s[0], s[1] * 4, 4])?;
    let moved = g.matmul(rows, rho)?;
    let moved = g.reshape(moved, &[s[0], s[1], 4, 4])?;
    normalize_poses(g, moved)
}

/// Mean over samples and capsules of `‖norm(Z·ρ) − norm(Z')‖²_F`.
pub fn equivariance_loss<T: Real>(g: &mut Graph<T>, z: Var, z2: Var, rho: Var) -> Result<Var> {
    let aligned = align_poses(g, z, rho)?;
    equivariance_from_aligned(g, aligned, z2)
}

fn equivariance_from_aligned<T: Real>(g: &mut Graph<T>, aligned: Var, z2: Var) -> Result<Var> {
    let s = pose_shape(g, z2)?;
    if g.shape(aligned) != s.as_slice() {
        return Err(Error::shape("equivariance_loss", g.shape(aligned), &s));
    }
    let target = normalize_poses(g, z2)?;
    let d = g.sub(aligned, target)?;
    let sq = g.square(d);
    let s_all = g.sum_all(sq);
    Ok(g.scale(s_all, T::lit(1.0 / (s[0] * s[1]) as f64)))
}

/// Mean hinge `max(0, 1 − √(Var + ε))` over the columns of `B × d`.
pub fn variance_term<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let (b, d) = matrix_dims(g, z)?;
    if b < 2 {
        return Err(Error::Invalid(format!("variance term needs a batch of at least 2, got {b}")));
    }
    let var = g.variance_axis(z, 0)?;
    let var = g.add_scalar(var, T::lit(VAR_EPS));
    let std = g.sqrt(var);
    let neg = g.neg(std);
    let gap = g.add_scalar(neg, T::one());
    let hinge = g.relu(gap);
    let s = g.sum_all(hinge);
    Ok(g.scale(s, T::lit(1.0 / d as f64)))
}

/// Sum of squared off-diagonal covariances of `B × d`, divided by d.
pub fn covariance_term<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let (b, d) = matrix_dims(g, z)?;
    if b < 2 {
        return Err(Error::Invalid(format!("covariance term needs a batch of at least 2, got {b}")));
    }
    let mean = g.mean_axis(z, 0)?;
    let centered = g.sub(z, mean)?;
    let cov = g.matmul_t(centered, centered, true, false)?;
    let cov = g.scale(cov, T::lit(1.0 / (b - 1) as f64));
    let mut mask = Tensor::full(&[d, d], T::one());
    for i in 0..d {
        mask.data_mut()[i * d + i] = T::zero();
    }
    let mask = g.constant(mask);
    let off = g.mul(cov, mask)?;
    let sq = g.square(off);
    let off = g.sum_all(sq);
    Ok(g.scale(off, T::lit(1.0 / d as f64)))
}

/// One view's projector output.
#[derive(Debug, Clone, Copy)]
pub struct BatchEmbeddings {
    /// `B × N`.
    pub activations: Var,
    /// `B × N × 4 × 4`.
    pub poses: Var,
}

/// `B × (N + 16N)` concatenation of activations and flattened poses.
pub fn z_cat<T: Real>(g: &mut Graph<T>, act: Var, poses: Var) -> Result<Var> {
    let s = pose_shape(g, poses)?;
    let flat = g.reshape(poses, &[s[0], s[1] * 16])?;
    g.concat(&[act, flat], 1)
}

/// Every term of the total loss, absent where disabled.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub inv: Option<Var>,
    pub memax1: Option<Var>,
    pub memax2: Option<Var>,
    pub equi: Option<Var>,
    pub var1: Option<Var>,
    pub var2: Option<Var>,
    pub cov1: Option<Var>,
    pub cov2: Option<Var>,
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    v1: &BatchEmbeddings,
    v2: &BatchEmbeddings,
    rho: Var,
    w: &LossWeights,
) -> Result<LossTerms> {
    let b = batch_of(g, v1.activations)?;
    if batch_of(g, v2.activations)? != b || pose_shape(g, v1.poses)?[0] != b || pose_shape(g, v2.poses)?[0] != b {
        return Err(Error::Invalid("views have inconsistent batch sizes".into()));
    }
    let mut parts: Vec<Var> = Vec::new();
    let mut terms = LossTerms {
        total: rho,
        inv: None,
        memax1: None,
        memax2: None,
        equi: None,
        var1: None,
        var2: None,
        cov1: None,
        cov2: None,
    };

    if w.enable_inv {
        let inv = invariance_loss(g, v1.activations, v2.activations)?;
        terms.inv = Some(inv);
        parts.push(g.scale(inv, T::lit(w.lambda_inv)));
    }
    if w.enable_memax {
        let sign = match w.memax_sign {
            MemaxSign::Subtract => -1.0,
            MemaxSign::Add => 1.0,
        };
        let m1 = memax_term(g, v1.activations)?;
        let m2 = memax_term(g, v2.activations)?;
        terms.memax1 = Some(m1);
        terms.memax2 = Some(m2);
        parts.push(g.scale(m1, T::lit(sign)));
        parts.push(g.scale(m2, T::lit(sign)));
    }
    let p2 = normalize_poses(g, v2.poses)?;
    let p1 = if w.enable_equi {
        let aligned = align_poses(g, v1.poses, rho)?;
        let equi = equivariance_from_aligned(g, aligned, v2.poses)?;
        terms.equi = Some(equi);
        parts.push(g.scale(equi, T::lit(w.lambda_equi)));
        aligned
    } else {
        normalize_poses(g, v1.poses)?
    };
    if w.enable_reg {
        let (z1, z2) = if w.reg_poses_only {
            let s = pose_shape(g, p1)?;
            (g.reshape(p1, &[b, s[1] * 16])?, g.reshape(p2, &[b, s[1] * 16])?)
        } else {
            (z_cat(g, v1.activations, p1)?, z_cat(g, v2.activations, p2)?)
        };
        let var1 = variance_term(g, z1)?;
        let var2 = variance_term(g, z2)?;
        let cov1 = covariance_term(g, z1)?;
        let cov2 = covariance_term(g, z2)?;
        terms.var1 = Some(var1);
        terms.var2 = Some(var2);
        terms.cov1 = Some(cov1);
        terms.cov2 = Some(cov2);
        for (v, l) in [(var1, w.lambda_var), (var2, w.lambda_var), (cov1, w.lambda_cov), (cov2, w.lambda_cov)] {
            parts.push(g.scale(v, T::lit(l)));
        }
    }
    let mut total = match parts.first() {
        Some(&p) => p,
        None => g.scalar(T::zero()),
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    terms.total = total;
    Ok(terms)
}

/// Unweighted term values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub inv: f64,
    pub memax1: f64,
    pub memax2: f64,
    pub equi: f64,
    pub var1: f64,
    pub var2: f64,
    pub cov1: f64,
    pub cov2: f64,
}

pub const CSV_HEADER: &str = "step,total,inv,memax1,memax2,equi,var1,var2,cov1,cov2";

impl LossBreakdown {
    pub fn read<T: Real>(g: &Graph<T>, t: &LossTerms) -> Self {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().to_f64().unwrap_or(f64::NAN));
        Self {
            total: v(Some(t.total)),
            inv: v(t.inv),
            memax1: v(t.memax1),
            memax2: v(t.memax2),
            equi: v(t.equi),
            var1: v(t.var1),
            var2: v(t.var2),
            cov1: v(t.cov1),
            cov2: v(t.cov2),
        }
    }

    /// Recombines the terms with the weights and toggles that produced them.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        let mut s = 0.0;
        if w.enable_inv {
            s += w.lambda_inv * self.inv;
        }
        if w.enable_memax {
            let sign = if w.memax_sign == MemaxSign::Subtract { -1.0 } else { 1.0 };
            s += sign * (self.memax1 + self.memax2);
        }
        if w.enable_equi {
            s += w.lambda_equi * self.equi;
        }
        if w.enable_reg {
            s += w.lambda_var * (self.var1 + self.var2) + w.lambda_cov * (self.cov1 + self.cov2);
        }
        s
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.total, self.inv, self.memax1, self.memax2, self.equi, self.var1, self.var2, self.cov1, self.cov2
        )
    }
}

fn batch_of<T: Real>(g: &Graph<T>, x: Var) -> Result<usize> {
    matrix_dims(g, x).map(|(b, _)| b)
}

fn matrix_dims<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        &[b, d] => Ok((b, d)),
        s => Err(Error::Invalid(format!("expected a B×d matrix, got shape {s:?}"))),
    }
}

fn pose_shape<T: Real>(g: &Graph<T>, x: Var) -> Result<Vec<usize>> {
    let s = g.shape(x);
    if s.len() == 4 && s[2] == 4 && s[3] == 4 {
        Ok(s.to_vec())
    } else {
        Err(Error::Invalid(format!("expected B×N×4×4 poses, got shape {s:?}")))
    }
}

#[cfg(test)]
mod tests;
