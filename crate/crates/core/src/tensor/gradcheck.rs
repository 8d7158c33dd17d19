//! Central finite-difference verification of analytic gradients.
//!
//! The finite differences are always evaluated in 64-bit so that the
//! 32-bit analytic gradients are compared against an accurate reference.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Bound, ParamStore};
use super::{Graph, Real, Var};
use crate::error::{Error, Result};

/// A scalar function of named parameters, buildable at any precision.
pub trait Objective {
    fn build<T: Real>(&self, graph: &mut Graph<T>, params: &Bound) -> Result<Var>;
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries per parameter tensor to probe; larger tensors are subsampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    /// Step sizes used for the 32-bit and 64-bit analytic gradients.
    pub fn for_bits(bits: u32) -> Self {
        Self {
            step: if bits == 32 { 1e-3 } else { 1e-5 },
            max_entries: 24,
            seed: 0,
        }
    }
}

pub fn loss_value<O: Objective>(obj: &O, params: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let bound = params.bind_frozen(&mut g);
    let loss = obj.build(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

pub fn analytic_gradients<T: Real, O: Objective>(
    obj: &O,
    params: &ParamStore<f64>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let cast: ParamStore<T> = params.cast();
    let mut g = Graph::<T>::new();
    let bound = cast.bind(&mut g);
    let loss = obj.build(&mut g, &bound)?;
    g.backward(loss)?;
    Ok(bound
        .gradients(&g)
        .into_iter()
        .map(|(n, v)| (n, v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()))
        .collect())
}

/// Compares `T`-precision analytic gradients against 64-bit central differences.
///
/// The per-entry relative error is `|a − n| / max(|a|, |n|, floor)` where the
/// floor is 1e-3 of the largest reference magnitude in the same tensor, so
/// entries that are negligible relative to their group are judged on scale.
pub fn check<T: Real, O: Objective>(
    obj: &O,
    params: &ParamStore<f64>,
    opts: GradCheckOptions,
) -> Result<Vec<GroupReport>> {
    let analytic = analytic_gradients::<T, O>(obj, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    for (name, grad) in analytic {
        let n = grad.len();
        let entries: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, opts.max_entries).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut numeric = Vec::with_capacity(entries.len());
        let mut probe = params.clone();
        for &e in &entries {
            let orig = probe.get(&name).expect("bound parameter").data()[e];
            probe.get_mut(&name).expect("bound").data_mut()[e] = orig + opts.step;
            let plus = loss_value(obj, &probe)?;
            probe.get_mut(&name).expect("bound").data_mut()[e] = orig - opts.step;
            let minus = loss_value(obj, &probe)?;
            probe.get_mut(&name).expect("bound").data_mut()[e] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
        if numeric.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite finite difference for `{name}`")));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (&e, &num) in entries.iter().zip(&numeric) {
            let a = grad[e];
            let err = (a - num).abs();
            max_abs = max_abs.max(err);
            max_rel = max_rel.max(err / a.abs().max(num.abs()).max(floor));
        }
        if !max_rel.is_finite() {
            max_rel = f64::INFINITY;
        }
        reports.push(GroupReport {
            name,
            checked: entries.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(reports)
}

pub fn max_rel_error(reports: &[GroupReport]) -> f64 {
    reports.iter().fold(0.0, |m, r| m.max(r.max_rel_error))
}
