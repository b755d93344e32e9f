//! Full-gradient ascent-descent on tabular representations.
//!
//! The state is `(U, β, b)` with `U` an `|S| x d` matrix. One iteration is
//!
//! ```text
//! U ← U - α_primal · g(U, β, b)
//! β ← β + α_dual   · r(U)
//! b ← b + α_barrier · Σ r²
//! ```
//!
//! where `g` is the stop-gradient ALLO direction and `r` the packed
//! orthonormality residuals. Besides running the dynamics, this module
//! checks that permutations of eigenvectors are equilibria, assembles the
//! Jacobian of the update field `F = (g, -r)` at such equilibria, and builds
//! explicit Jacobian eigenvectors that certify (in)stability.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{Cell, MetricsError, MetricsLog};
use crate::objectives::{allo_dual_direction, allo_primal_direction, tri_index, tri_len, DualVariables};
use crate::spectral::{eigendecompose, similarity_report, EigenSystem, SpectralError, MULTIPLICITY_TOL};

const DIVERGENCE_LIMIT: f64 = 1e6;
const EQUILIBRIUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid dynamics config: {0}")]
    Config(String),
    #[error("dynamics diverged at iteration {iter} (|U|_inf = {norm:e})")]
    Diverged { iter: usize, norm: f64 },
    #[error("invalid permutation {0:?}")]
    Permutation(Vec<usize>),
    #[error("not an equilibrium: primal residual {primal:e}, dual residual {dual:e}")]
    NotEquilibrium { primal: f64, dual: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    pub d: usize,
    pub alpha_primal: f64,
    pub alpha_dual: f64,
    pub alpha_barrier: f64,
    pub b0: f64,
    pub max_iters: usize,
    pub tol_converge: f64,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization of `U`.
    pub init_scale: f64,
    /// Iterations between recorded checkpoints.
    pub checkpoint_every: usize,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            d: 2,
            alpha_primal: 0.1,
            alpha_dual: 0.01,
            alpha_barrier: 0.0,
            b0: 3.0,
            max_iters: 100_000,
            tol_converge: 1e-9,
            seed: 0,
            init_scale: 0.1,
            checkpoint_every: 1000,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self, num_states: usize) -> Result<(), DynamicsError> {
        let fail = |m: String| Err(DynamicsError::Config(m));
        if self.d == 0 || self.d > num_states {
            return fail(format!("d = {} must be in 1..={num_states}", self.d));
        }
        if !(self.alpha_primal > 0.0 && self.alpha_dual > 0.0) {
            return fail("primal and dual step sizes must be positive".into());
        }
        if !(self.alpha_barrier >= 0.0) {
            return fail("barrier step must be non-negative".into());
        }
        if !(self.b0 > 0.0) {
            return fail("initial barrier must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        Ok(())
    }
}

/// A point of the ascent-descent dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularState {
    pub u: Array2<f64>,
    pub duals: DualVariables,
    pub b: f64,
}

impl TabularState {
    /// `U = (e_σ(1), ..., e_σ(d))`, `β_jk = -2 λ_σ(j) δ_jk`.
    pub fn permuted_equilibrium(sys: &EigenSystem, perm: &[usize], b: f64) -> Result<Self, DynamicsError> {
        check_injective(perm, sys.dim())?;
        let n = sys.dim();
        let mut u = Array2::<f64>::zeros((n, perm.len()));
        for (i, &p) in perm.iter().enumerate() {
            u.column_mut(i).assign(&sys.eigenvector(p));
        }
        let diag: Vec<f64> = perm.iter().map(|&p| -2.0 * sys.eigenvalues()[p]).collect();
        Ok(TabularState { u, duals: DualVariables::from_diagonal(&diag), b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `max |g|` over all entries of the primal direction.
    pub primal_inf: f64,
    /// `max |r_jk|`.
    pub dual_inf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iter: usize,
    pub state: TabularState,
    pub residuals: Residuals,
    /// Similarity of every component to the true eigenvectors.
    pub similarity: Vec<f64>,
    pub avg_similarity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainTrajectory {
    pub iterates: Vec<Checkpoint>,
    pub converged: bool,
    pub iterations: usize,
}

impl TrainTrajectory {
    pub fn last(&self) -> &Checkpoint {
        self.iterates.last().expect("trajectory has at least the initial checkpoint")
    }

    pub fn residual_history(&self) -> Vec<Residuals> {
        self.iterates.iter().map(|c| c.residuals).collect()
    }

    pub fn similarity_history(&self) -> Vec<f64> {
        self.iterates.iter().map(|c| c.avg_similarity).collect()
    }

    pub fn metrics_log(&self) -> MetricsLog {
        let d = self.iterates.first().map(|c| c.state.duals.d()).unwrap_or(0);
        let mut header = vec!["iteration".to_string(), "primal_residual_inf".into(), "dual_residual_inf".into()];
        header.push("avg_cos_sim".into());
        header.extend((2..=d).map(|i| format!("cos_sim_{i}")));
        header.extend((1..=d).map(|i| format!("beta_{i}")));
        header.push("b".into());
        let mut log = MetricsLog::new(header);
        for c in &self.iterates {
            let mut row: Vec<Cell> = vec![c.iter.into(), c.residuals.primal_inf.into(), c.residuals.dual_inf.into()];
            row.push(c.avg_similarity.into());
            row.extend(c.similarity.iter().skip(1).map(|&v| Cell::from(v)));
            row.extend(c.state.duals.diagonal().into_iter().map(Cell::from));
            row.push(c.state.b.into());
            log.push(row).expect("row matches header");
        }
        log
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DynamicsError> {
        Ok(self.metrics_log().write_csv(path)?)
    }
}

fn inf_norm<'a>(it: impl IntoIterator<Item = &'a f64>) -> f64 {
    it.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn residuals(l: ArrayView2<'_, f64>, state: &TabularState) -> Residuals {
    let g = allo_primal_direction(state.u.view(), &state.duals, l, state.b);
    let r = allo_dual_direction(state.u.view());
    Residuals { primal_inf: inf_norm(g.iter()), dual_inf: inf_norm(r.iter()) }
}

fn checkpoint(l: ArrayView2<'_, f64>, sys: &EigenSystem, state: &TabularState, iter: usize) -> Checkpoint {
    let residuals = residuals(l, state);
    let (similarity, avg_similarity) = match similarity_report(state.u.view(), sys) {
        Ok(rep) => (rep.all_components, rep.average),
        Err(_) => (vec![0.0; state.u.ncols()], 0.0),
    };
    Checkpoint { iter, state: state.clone(), residuals, similarity, avg_similarity }
}

/// Random initialization: Gaussian `U` with the configured scale, `β = 0`, `b = b0`.
pub fn initial_state(num_states: usize, config: &DynamicsConfig) -> TabularState {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_scale).expect("finite scale");
    let u = Array2::from_shape_simple_fn((num_states, config.d), || normal.sample(&mut rng));
    TabularState { u, duals: DualVariables::zeros(config.d), b: config.b0 }
}

/// Run the dynamics from a seeded random initialization.
pub fn run_ascent_descent(l: ArrayView2<'_, f64>, config: &DynamicsConfig) -> Result<TrainTrajectory, DynamicsError> {
    config.validate(l.nrows())?;
    let sys = eigendecompose(l)?;
    let init = initial_state(l.nrows(), config);
    run_from(l, &sys, init, config)
}

/// Run the dynamics from an explicit starting point. `sys` is only used for
/// the similarity metrics recorded at checkpoints.
pub fn run_from(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    init: TabularState,
    config: &DynamicsConfig,
) -> Result<TrainTrajectory, DynamicsError> {
    config.validate(l.nrows())?;
    if init.u.ncols() != config.d || init.duals.d() != config.d || init.u.nrows() != l.nrows() {
        return Err(DynamicsError::Config("initial state does not match (|S|, d)".into()));
    }
    let mut state = init;
    let mut iterates = vec![checkpoint(l, sys, &state, 0)];
    let mut converged = false;
    let mut iter = 0;
    while iter < config.max_iters {
        let g = allo_primal_direction(state.u.view(), &state.duals, l, state.b);
        let r = allo_dual_direction(state.u.view());
        if inf_norm(g.iter()) < config.tol_converge && inf_norm(r.iter()) < config.tol_converge {
            converged = true;
            break;
        }
        state.u.scaled_add(-config.alpha_primal, &g);
        state.duals.ascend(&r, config.alpha_dual);
        state.b += config.alpha_barrier * r.iter().map(|x| x * x).sum::<f64>();
        iter += 1;

        let norm = inf_norm(state.u.iter());
        if !norm.is_finite() || norm > DIVERGENCE_LIMIT {
            return Err(DynamicsError::Diverged { iter, norm });
        }
        if iter % config.checkpoint_every == 0 {
            iterates.push(checkpoint(l, sys, &state, iter));
        }
    }
    if iterates.last().map(|c| c.iter) != Some(iter) {
        iterates.push(checkpoint(l, sys, &state, iter));
    }
    Ok(TrainTrajectory { iterates, converged, iterations: iter })
}

fn check_injective(perm: &[usize], n: usize) -> Result<(), DynamicsError> {
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(DynamicsError::Permutation(perm.to_vec()));
        }
        seen[p] = true;
    }
    if perm.is_empty() {
        return Err(DynamicsError::Permutation(Vec::new()));
    }
    Ok(())
}

/// Extend an injective `perm: {0..d} → {0..n}` to a full permutation of
/// `{0..n}`, filling the remaining positions with unused indices in order.
pub fn extend_permutation(perm: &[usize], n: usize) -> Vec<usize> {
    let mut full = perm.to_vec();
    full.extend((0..n).filter(|i| !perm.contains(i)));
    full
}

/// Residuals of the ascent-descent field at the permuted eigenvector point.
pub fn verify_equilibrium(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    perm: &[usize],
    b: f64,
) -> Result<Residuals, DynamicsError> {
    let state = TabularState::permuted_equilibrium(sys, perm, b)?;
    Ok(residuals(l, &state))
}

/// Concatenated update field `F = (g_1, ..., g_d, -r)`; `U` is flattened column by column.
pub fn update_field(l: ArrayView2<'_, f64>, state: &TabularState) -> Array1<f64> {
    let (n, d) = state.u.dim();
    let g = allo_primal_direction(state.u.view(), &state.duals, l, state.b);
    let r = allo_dual_direction(state.u.view());
    let mut out = Array1::<f64>::zeros(n * d + tri_len(d));
    for i in 0..d {
        out.slice_mut(s![i * n..(i + 1) * n]).assign(&g.column(i));
    }
    for (k, v) in r.iter().enumerate() {
        out[n * d + k] = -v;
    }
    out
}

/// Flatten `(U, β)` in the same layout as [`update_field`].
pub fn flatten_state(state: &TabularState) -> Array1<f64> {
    let (n, d) = state.u.dim();
    let mut out = Array1::<f64>::zeros(n * d + tri_len(d));
    for i in 0..d {
        out.slice_mut(s![i * n..(i + 1) * n]).assign(&state.u.column(i));
    }
    for (k, v) in state.duals.packed().iter().enumerate() {
        out[n * d + k] = *v;
    }
    out
}

pub fn unflatten_state(x: &Array1<f64>, n: usize, d: usize, b: f64) -> TabularState {
    let mut u = Array2::<f64>::zeros((n, d));
    for i in 0..d {
        u.column_mut(i).assign(&x.slice(s![i * n..(i + 1) * n]));
    }
    let duals = DualVariables::from_packed(d, x.slice(s![n * d..]).to_vec()).expect("packed length");
    TabularState { u, duals, b }
}

/// Jacobian `∂F/∂(U, β)` at an arbitrary point, rows indexed by field
/// entries and columns by state entries.
pub fn jacobian_at(l: ArrayView2<'_, f64>, state: &TabularState) -> Array2<f64> {
    let (n, d) = state.u.dim();
    let u = &state.u;
    let b = state.b;
    let gram = u.t().dot(u);
    let dim = n * d + tri_len(d);
    let mut jac = Array2::<f64>::zeros((dim, dim));

    for m in 0..d {
        let rows = m * n..(m + 1) * n;
        // ∂g_m/∂u_m
        {
            let mut blk = jac.slice_mut(s![rows.clone(), m * n..(m + 1) * n]);
            blk.scaled_add(2.0, &l);
            let um = u.column(m);
            for a in 0..n {
                blk[[a, a]] += state.duals.get(m, m) + 2.0 * b * (gram[[m, m]] - 1.0);
                for c in 0..n {
                    let mut v = 4.0 * b * um[a] * um[c];
                    for k in 0..m {
                        v += 2.0 * b * u[[a, k]] * u[[c, k]];
                    }
                    blk[[a, c]] += v;
                }
            }
        }
        // ∂g_m/∂u_i for i < m: β_mi I + 2b (r_mi I + u_i u_mᵀ)
        for i in 0..m {
            let mut blk = jac.slice_mut(s![rows.clone(), i * n..(i + 1) * n]);
            for a in 0..n {
                blk[[a, a]] += state.duals.get(m, i) + 2.0 * b * gram[[m, i]];
                for c in 0..n {
                    blk[[a, c]] += 2.0 * b * u[[a, i]] * u[[c, m]];
                }
            }
        }
        // ∂g_m/∂β_mk = u_k
        for k in 0..=m {
            let col = n * d + tri_index(m, k);
            for a in 0..n {
                jac[[m * n + a, col]] = u[[a, k]];
            }
        }
    }
    // ∂(-r_jk)/∂u_i = -(δ_ij u_k + δ_ik u_j)
    for j in 0..d {
        for k in 0..=j {
            let row = n * d + tri_index(j, k);
            for a in 0..n {
                jac[[row, j * n + a]] -= u[[a, k]];
                jac[[row, k * n + a]] -= u[[a, j]];
            }
        }
    }
    jac
}

/// Jacobian of the update field at an equilibrium; rejects points whose
/// residuals exceed `1e-6`.
pub fn assemble_jacobian(l: ArrayView2<'_, f64>, state: &TabularState) -> Result<Array2<f64>, DynamicsError> {
    let res = residuals(l, state);
    if res.primal_inf > EQUILIBRIUM_TOL || res.dual_inf > EQUILIBRIUM_TOL {
        return Err(DynamicsError::NotEquilibrium { primal: res.primal_inf, dual: res.dual_inf });
    }
    Ok(jacobian_at(l, state))
}

/// A candidate Jacobian eigenpair at a permuted equilibrium.
#[derive(Debug, Clone)]
pub struct Witness {
    /// Component (zero-based) whose column carries the perturbation.
    pub i: usize,
    /// Index (zero-based) of the permuted eigenvector placed there.
    pub j: usize,
    pub eta: f64,
    pub vector: Array1<f64>,
    /// `‖J v - η v‖_∞` with `v` normalized to unit max-norm.
    pub residual: f64,
    /// `false` when `η` comes from a repeated eigenvalue (no stability
    /// conclusion possible) or from a defective coupling.
    pub conclusive: bool,
}

impl Witness {
    pub fn certifies_instability(&self) -> bool {
        self.conclusive && self.eta < 0.0
    }
}

fn normalize_inf(mut v: Array1<f64>) -> Array1<f64> {
    let m = inf_norm(v.iter());
    if m > 0.0 {
        v /= m;
    }
    v
}

fn jacobian_residual(jac: &Array2<f64>, v: &Array1<f64>, eta: f64) -> f64 {
    let jv = jac.dot(v);
    inf_norm((&jv - &(v * eta)).iter())
}

/// Jacobian eigenvector with eigenvalue `η = 2(λ_σ(j) - λ_σ(i))`.
///
/// The perturbation puts `e_σ(j)` into column `i`. When `j` is itself one of
/// the learned components, that move also excites column `j` (along
/// `e_σ(i)`) and the dual `β_ji`; the exact eigenvector then carries
/// corrections on those two coordinates, computed from the 3x3 block the
/// Jacobian restricts to.
pub fn instability_witness(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    perm: &[usize],
    i: usize,
    j: usize,
    b: f64,
) -> Result<Witness, DynamicsError> {
    let state = TabularState::permuted_equilibrium(sys, perm, b)?;
    let jac = assemble_jacobian(l, &state)?;
    witness_from_jacobian(&jac, sys, perm, i, j, b)
}

fn witness_from_jacobian(
    jac: &Array2<f64>,
    sys: &EigenSystem,
    perm: &[usize],
    i: usize,
    j: usize,
    b: f64,
) -> Result<Witness, DynamicsError> {
    let n = sys.dim();
    let d = perm.len();
    if i >= d || j <= i || j >= n {
        return Err(DynamicsError::Config(format!("witness needs i < d and i < j < |S|, got ({i}, {j})")));
    }
    let full = extend_permutation(perm, n);
    let lam = sys.eigenvalues();
    let gap = lam[full[j]] - lam[full[i]];
    let eta = 2.0 * gap;
    let mut conclusive = gap.abs() >= MULTIPLICITY_TOL;

    let mut v = Array1::<f64>::zeros(n * d + tri_len(d));
    v.slice_mut(s![i * n..(i + 1) * n]).assign(&sys.eigenvector(full[j]));
    if j < d {
        let denom = 1.0 - 4.0 * b * gap + 8.0 * gap * gap;
        if denom.abs() < 1e-12 {
            conclusive = false;
        } else {
            let z = -4.0 * gap / denom;
            let y = -1.0 - 2.0 * gap * z;
            v.slice_mut(s![j * n..(j + 1) * n]).scaled_add(y, &sys.eigenvector(full[i]));
            v[n * d + tri_index(j, i)] = z;
        }
    }
    let v = normalize_inf(v);
    let residual = jacobian_residual(jac, &v, eta);
    Ok(Witness { i, j, eta, vector: v, residual, conclusive })
}

/// All witnesses `(i, j)`, `i < d`, `i < j < |S|`, at a permuted equilibrium.
pub fn all_witnesses(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    perm: &[usize],
    b: f64,
) -> Result<Vec<Witness>, DynamicsError> {
    let state = TabularState::permuted_equilibrium(sys, perm, b)?;
    let jac = assemble_jacobian(l, &state)?;
    let mut out = Vec::new();
    for i in 0..perm.len() {
        for j in (i + 1)..sys.dim() {
            out.push(witness_from_jacobian(&jac, sys, perm, i, j, b)?);
        }
    }
    Ok(out)
}

/// Eigenvalues of the Jacobian restricted to `(u_i along e_σ(i), β_ii)`:
/// roots of `η² - 4bη + 2 = 0`. `None` when they are complex.
pub fn dual_block_eigenvalues(b: f64) -> Option<(f64, f64)> {
    let disc = 4.0 * b * b - 2.0;
    (disc >= 0.0).then(|| (2.0 * b + disc.sqrt(), 2.0 * b - disc.sqrt()))
}

/// Jacobian eigenvectors living in the `(u_i ∥ e_σ(i), β_ii)` plane, one per
/// real root of [`dual_block_eigenvalues`].
pub fn dual_block_witnesses(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    perm: &[usize],
    i: usize,
    b: f64,
) -> Result<Vec<Witness>, DynamicsError> {
    let state = TabularState::permuted_equilibrium(sys, perm, b)?;
    let jac = assemble_jacobian(l, &state)?;
    let n = sys.dim();
    let d = perm.len();
    if i >= d {
        return Err(DynamicsError::Config(format!("component {i} out of range for d = {d}")));
    }
    let Some((hi, lo)) = dual_block_eigenvalues(b) else {
        return Ok(Vec::new());
    };
    Ok([hi, lo]
        .into_iter()
        .map(|eta| {
            let mut v = Array1::<f64>::zeros(n * d + tri_len(d));
            v.slice_mut(s![i * n..(i + 1) * n]).assign(&sys.eigenvector(perm[i]));
            v[n * d + tri_index(i, i)] = -2.0 / eta;
            let v = normalize_inf(v);
            let residual = jacobian_residual(&jac, &v, eta);
            Witness { i, j: i, eta, vector: v, residual, conclusive: true }
        })
        .collect())
}

/// Mean block-projected similarity of each column to its permuted target.
pub fn target_similarity(u: ArrayView2<'_, f64>, sys: &EigenSystem, perm: &[usize]) -> f64 {
    let d = perm.len();
    let mut total = 0.0;
    for (i, &p) in perm.iter().enumerate() {
        let col = u.column(i);
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 {
            continue;
        }
        let proj: f64 = sys.block_of(p).map(|k| sys.eigenvector(k).dot(&col).powi(2)).sum();
        total += (proj.sqrt() / norm).min(1.0);
    }
    total / d as f64
}

#[derive(Debug, Clone)]
pub struct StabilityOutcome {
    /// Similarity to the permuted target stayed at or above 0.999.
    pub stayed: bool,
    /// Similarity to the permuted target fell below 0.9.
    pub departed: bool,
    pub target_similarity: f64,
    /// Average similarity to the sorted eigenvectors at the end of the run.
    pub sorted_similarity: f64,
    pub trajectory: TrainTrajectory,
}

/// Perturb a permuted equilibrium with Gaussian noise and follow the
/// dynamics for `steps` iterations with a fixed barrier.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_stability_test(
    l: ArrayView2<'_, f64>,
    sys: &EigenSystem,
    perm: &[usize],
    b: f64,
    noise: f64,
    steps: usize,
    seed: u64,
    base: &DynamicsConfig,
) -> Result<StabilityOutcome, DynamicsError> {
    let mut state = TabularState::permuted_equilibrium(sys, perm, b)?;
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).map_err(|e| DynamicsError::Config(e.to_string()))?;
        state.u.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    let config = DynamicsConfig {
        d: perm.len(),
        alpha_barrier: 0.0,
        b0: b,
        max_iters: steps,
        tol_converge: 0.0,
        checkpoint_every: steps.max(1),
        seed,
        ..base.clone()
    };
    let trajectory = run_from(l, sys, state, &config)?;
    let last = trajectory.last();
    let target = target_similarity(last.state.u.view(), sys, perm);
    Ok(StabilityOutcome {
        stayed: target >= 0.999,
        departed: target < 0.9,
        target_similarity: target,
        sorted_similarity: last.avg_similarity,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{build_transition_model, parse_grid_map};

    fn corridor() -> (Array2<f64>, EigenSystem) {
        let m = build_transition_model(&parse_grid_map("####\n#..#\n####").unwrap());
        let l = m.laplacian().clone();
        let sys = eigendecompose(l.view()).unwrap();
        (l, sys)
    }

    #[test]
    fn config_validation() {
        let c = DynamicsConfig { d: 3, ..Default::default() };
        assert!(c.validate(2).is_err());
        let c = DynamicsConfig { alpha_primal: 0.0, ..Default::default() };
        assert!(c.validate(2).is_err());
        assert!(DynamicsConfig::default().validate(2).is_ok());
    }

    #[test]
    fn equilibria_identity_and_swap() {
        let (l, sys) = corridor();
        for perm in [[0, 1], [1, 0]] {
            let r = verify_equilibrium(l.view(), &sys, &perm, 3.0).unwrap();
            assert!(r.primal_inf < 1e-12 && r.dual_inf < 1e-12, "{perm:?}: {r:?}");
        }
        assert!(verify_equilibrium(l.view(), &sys, &[0, 0], 3.0).is_err());
        assert!(verify_equilibrium(l.view(), &sys, &[2], 3.0).is_err());
    }

    #[test]
    fn perturbed_dual_shows_up_linearly() {
        let (l, sys) = corridor();
        let mut state = TabularState::permuted_equilibrium(&sys, &[0, 1], 3.0).unwrap();
        let b22 = state.duals.get(1, 1);
        state.duals.set(1, 1, b22 + 0.1);
        let g = allo_primal_direction(state.u.view(), &state.duals, l.view(), 3.0);
        let e2 = sys.eigenvector(1);
        let col_norm = g.column(1).dot(&g.column(1)).sqrt();
        assert!((col_norm - 0.1).abs() < 1e-12);
        let r = residuals(l.view(), &state);
        assert!((r.primal_inf - 0.1 * inf_norm(e2.iter())).abs() < 1e-12);
    }

    #[test]
    fn assemble_rejects_non_equilibrium() {
        let (l, sys) = corridor();
        let mut state = TabularState::permuted_equilibrium(&sys, &[0, 1], 3.0).unwrap();
        state.u[[0, 0]] += 0.1;
        assert!(matches!(assemble_jacobian(l.view(), &state), Err(DynamicsError::NotEquilibrium { .. })));
    }

    #[test]
    fn two_state_single_component_jacobian_by_hand() {
        // d = 1, U = e_1 = (h, h), β_11 = 0, b = 3. Field: g = 2Lu + βu + 2b(uᵀu - 1)u, -r = 1 - uᵀu.
        // ∂g/∂u = 2L + β I + 2b(|u|² - 1) I + 4b u uᵀ = 2L + 12 u uᵀ, ∂g/∂β = u, ∂(-r)/∂u = -2uᵀ.
        let (l, sys) = corridor();
        let state = TabularState::permuted_equilibrium(&sys, &[0], 3.0).unwrap();
        let jac = assemble_jacobian(l.view(), &state).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expected = ndarray::array![
            [0.5 + 6.0, -0.5 + 6.0, h],
            [-0.5 + 6.0, 0.5 + 6.0, h],
            [-2.0 * h, -2.0 * h, 0.0],
        ];
        for (a, e) in jac.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12, "{jac:?}");
        }
    }

    #[test]
    fn swap_witness_is_negative() {
        let (l, sys) = corridor();
        let w = instability_witness(l.view(), &sys, &[1, 0], 0, 1, 3.0).unwrap();
        assert!((w.eta + 1.0).abs() < 1e-12);
        assert!(w.residual < 1e-8, "{}", w.residual);
        assert!(w.certifies_instability());

        let w = instability_witness(l.view(), &sys, &[0, 1], 0, 1, 3.0).unwrap();
        assert!((w.eta - 1.0).abs() < 1e-12 && w.residual < 1e-8);
    }

    #[test]
    fn dual_block_roots() {
        let (l, sys) = corridor();
        let ws = dual_block_witnesses(l.view(), &sys, &[0, 1], 1, 3.0).unwrap();
        assert_eq!(ws.len(), 2);
        for w in &ws {
            assert!(w.residual < 1e-10, "{}", w.residual);
            assert!((w.eta * w.eta - 12.0 * w.eta + 2.0).abs() < 1e-10);
        }
        assert!(dual_block_eigenvalues(0.5).is_none());
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let (l, sys) = corridor();
        let init = TabularState::permuted_equilibrium(&sys, &[0, 1], 3.0).unwrap();
        let config = DynamicsConfig { d: 2, max_iters: 100, tol_converge: 0.0, ..Default::default() };
        let traj = run_from(l.view(), &sys, init.clone(), &config).unwrap();
        let end = &traj.last().state;
        assert!(inf_norm((&end.u - &init.u).iter()) < 1e-12);
        let db: Vec<f64> = end.duals.packed().iter().zip(init.duals.packed()).map(|(a, b)| a - b).collect();
        assert!(inf_norm(db.iter()) < 1e-12);
    }

    #[test]
    fn large_step_diverges() {
        let (l, _) = corridor();
        let config = DynamicsConfig { d: 2, alpha_primal: 10.0, ..Default::default() };
        assert!(matches!(run_ascent_descent(l.view(), &config), Err(DynamicsError::Diverged { .. })));
    }

    #[test]
    fn flatten_round_trip() {
        let (_, sys) = corridor();
        let state = TabularState::permuted_equilibrium(&sys, &[1, 0], 2.0).unwrap();
        let back = unflatten_state(&flatten_state(&state), 2, 2, 2.0);
        assert_eq!(back, state);
    }
}
