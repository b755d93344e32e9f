//! Checks behind `allo verify`: equilibria of every eigenvector selection,
//! instability witnesses and the Jacobian against finite differences.

use allo_core::dynamics::{
    all_witnesses, flatten_state, jacobian_at, unflatten_state, update_field, verify_equilibrium, TabularState,
};
use ndarray::{Array2, ArrayView2};

use crate::error::HarnessError;
use crate::experiments::{is_sorted_equivalent, selections, MapContext, Summary};

pub const EQUILIBRIUM_TOL: f64 = 1e-8;
pub const WITNESS_TOL: f64 = 1e-8;
pub const JACOBIAN_TOL: f64 = 1e-5;

/// Central differences of the update field around `state`, one column per
/// coordinate of the flattened `(U, β)` vector.
pub fn finite_difference_jacobian(l: ArrayView2<'_, f64>, state: &TabularState, step: f64) -> Array2<f64> {
    let (n, d) = state.u.dim();
    let x = flatten_state(state);
    let dim = x.len();
    let mut jac = Array2::zeros((dim, dim));
    for k in 0..dim {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += step;
        minus[k] -= step;
        let fp = update_field(l, &unflatten_state(&plus, n, d, state.b));
        let fm = update_field(l, &unflatten_state(&minus, n, d, state.b));
        jac.column_mut(k).assign(&((fp - fm) / (2.0 * step)));
    }
    jac
}

/// Largest entrywise gap between the analytic and finite-difference Jacobians.
pub fn jacobian_gap(l: ArrayView2<'_, f64>, state: &TabularState) -> f64 {
    let analytic = jacobian_at(l, state);
    let numeric = finite_difference_jacobian(l, state, 1e-5);
    (&analytic - &numeric).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone)]
pub struct Verification {
    pub summary: Summary,
    pub passed: bool,
}

/// Run every check for selections of `d` eigenvectors of `ctx` at barrier `b`.
pub fn verify_map(ctx: &MapContext, d: usize, b: f64) -> Result<Verification, HarnessError> {
    let n = ctx.sys.dim();
    if d == 0 || d > n {
        return Err(HarnessError::Config(format!("d = {d} must lie in 1..={n}")));
    }
    let l = ctx.model.laplacian().view();
    let mut max_residual = 0.0f64;
    let mut max_witness_residual = 0.0f64;
    let (mut unsorted, mut certified, mut sorted_negative) = (0usize, 0usize, 0usize);
    let all = selections(n, d);
    for sel in &all {
        let r = verify_equilibrium(l, &ctx.sys, sel, b)?;
        max_residual = max_residual.max(r.primal_inf).max(r.dual_inf);
        let ws = all_witnesses(l, &ctx.sys, sel, b)?;
        max_witness_residual = ws.iter().map(|w| w.residual).fold(max_witness_residual, f64::max);
        let negative = ws.iter().any(|w| w.certifies_instability());
        if is_sorted_equivalent(&ctx.sys, sel) {
            sorted_negative += negative as usize;
        } else {
            unsorted += 1;
            certified += negative as usize;
        }
    }
    let identity: Vec<usize> = (0..d).collect();
    let state = TabularState::permuted_equilibrium(&ctx.sys, &identity, b)?;
    let gap = jacobian_gap(l, &state);

    let passed = max_residual < EQUILIBRIUM_TOL
        && max_witness_residual < WITNESS_TOL
        && certified == unsorted
        && sorted_negative == 0
        && gap < JACOBIAN_TOL;
    let mut summary = Summary::default();
    summary.push("map", &ctx.label);
    summary.push("d", d);
    summary.push("b", b);
    summary.push("selections", all.len());
    summary.push("max_equilibrium_residual", max_residual);
    summary.push("unsorted_selections", unsorted);
    summary.push("certified_unstable", certified);
    summary.push("sorted_with_negative_witness", sorted_negative);
    summary.push("max_witness_residual", max_witness_residual);
    summary.push("jacobian_fd_gap", gap);
    summary.push("passed", passed);
    Ok(Verification { summary, passed })
}
