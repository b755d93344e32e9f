//! Graph drawing objectives (GDO, GGDO) and the augmented Lagrangian
//! Laplacian objective (ALLO), with the descent/ascent directions that drive
//! the learning dynamics.
//!
//! Representations are `|S| x d` matrices whose column `i` is the function
//! `u_i`. Exact functions here use the Euclidean inner product `uᵀv`; the
//! `*_uniform` variants and the sampled estimators use the uniform-state
//! inner product `uᵀv / |S|`.
//!
//! The ALLO primal direction is not the gradient of [`allo_value`]. In the
//! constraint terms `<u_j, u_k>` with `k <= j` the second argument is held
//! fixed, so `u_i` only reacts to constraints with itself and the columns
//! before it. That asymmetry is what makes the sorted eigenvectors the only
//! stable equilibrium.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::TransitionModel;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("GGDO coefficients must be positive and strictly decreasing: {0:?}")]
    Coefficients(Vec<f64>),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("column {0} has zero norm on the batch")]
    ZeroColumn(usize),
}

/// Packed lower-triangular index of `(j, k)` with `k <= j`, zero-based.
pub fn tri_index(j: usize, k: usize) -> usize {
    debug_assert!(k <= j);
    j * (j + 1) / 2 + k
}

pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Lagrange multipliers `β_jk`, `1 <= k <= j <= d`, packed row by row:
/// `β_11, β_21, β_22, β_31, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    d: usize,
    beta: Vec<f64>,
}

impl DualVariables {
    pub fn zeros(d: usize) -> Self {
        DualVariables { d, beta: vec![0.0; tri_len(d)] }
    }

    pub fn from_packed(d: usize, beta: Vec<f64>) -> Result<Self, ObjectiveError> {
        if beta.len() != tri_len(d) {
            return Err(ObjectiveError::Shape(format!("{} duals for d = {d}", beta.len())));
        }
        Ok(DualVariables { d, beta })
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut out = Self::zeros(diag.len());
        for (i, &v) in diag.iter().enumerate() {
            out.set(i, i, v);
        }
        out
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.beta[tri_index(j, k)]
    }

    pub fn set(&mut self, j: usize, k: usize, v: f64) {
        self.beta[tri_index(j, k)] = v;
    }

    pub fn packed(&self) -> &[f64] {
        &self.beta
    }

    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.d).map(|i| self.get(i, i)).collect()
    }

    /// Eigenvalue estimates `-β_ii / 2`.
    pub fn eigenvalue_estimates(&self) -> Vec<f64> {
        self.diagonal().into_iter().map(|b| -0.5 * b).collect()
    }

    /// `β += step * direction`.
    pub fn ascend(&mut self, direction: &[f64], step: f64) {
        for (b, r) in self.beta.iter_mut().zip(direction) {
            *b += step * r;
        }
    }

    /// Relabel coordinates so that old coordinate `i` becomes `perm[i]`.
    /// Entries are treated as a symmetric matrix and stored back in the
    /// lower triangle.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.d);
        for j in 0..self.d {
            for k in 0..=j {
                let (a, b) = (perm[j], perm[k]);
                let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                out.set(hi, lo, self.get(j, k));
            }
        }
        out
    }
}

/// Barrier coefficient with its ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierState {
    pub b: f64,
    pub alpha_barrier: f64,
}

impl BarrierState {
    pub fn new(b: f64, alpha_barrier: f64) -> Self {
        assert!(b > 0.0, "barrier coefficient must be positive");
        assert!(alpha_barrier >= 0.0, "barrier step must be non-negative");
        BarrierState { b, alpha_barrier }
    }

    /// Ascend along a (clamped non-negative) barrier direction.
    pub fn ascend(&mut self, direction: f64) {
        self.b += self.alpha_barrier * direction.max(0.0);
    }
}

/// Decreasing GGDO weights `c_1 > ... > c_d > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GgdoCoefficients {
    c: Vec<f64>,
}

impl GgdoCoefficients {
    pub fn new(c: Vec<f64>) -> Result<Self, ObjectiveError> {
        let ok = !c.is_empty() && c.iter().all(|&v| v > 0.0) && c.windows(2).all(|w| w[0] > w[1]);
        if ok {
            Ok(GgdoCoefficients { c })
        } else {
            Err(ObjectiveError::Coefficients(c))
        }
    }

    /// `c_i = d - i + 1`.
    pub fn linear(d: usize) -> Self {
        GgdoCoefficients { c: (0..d).map(|i| (d - i) as f64).collect() }
    }

    /// All ones. Not a valid GGDO weighting (it reduces GGDO to GDO); kept
    /// for checking that identity.
    pub fn uniform(d: usize) -> Self {
        GgdoCoefficients { c: vec![1.0; d] }
    }

    pub fn is_degenerate(&self) -> bool {
        !self.c.windows(2).all(|w| w[0] > w[1])
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

fn check_shapes(u: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>) {
    assert_eq!(l.nrows(), l.ncols(), "Laplacian must be square");
    assert_eq!(u.nrows(), l.nrows(), "representation rows must match |S|");
}

/// `scale * UᵀU - I`.
fn residual_matrix(u: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let mut r = u.t().dot(&u) * scale;
    for i in 0..r.nrows() {
        r[[i, i]] -= 1.0;
    }
    r
}

/// `Σ_i <u_i, L u_i>` under the Euclidean inner product.
fn dirichlet_terms(u: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>) -> Vec<f64> {
    let lu = l.dot(&u);
    (0..u.ncols()).map(|i| u.column(i).dot(&lu.column(i))).collect()
}

pub fn gdo_value(u: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>, b: f64) -> f64 {
    check_shapes(u, l);
    let r = residual_matrix(u, 1.0);
    dirichlet_terms(u, l).iter().sum::<f64>() + b * r.iter().map(|x| x * x).sum::<f64>()
}

pub fn ggdo_value(u: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>, b: f64, c: &GgdoCoefficients) -> f64 {
    check_shapes(u, l);
    assert_eq!(c.len(), u.ncols(), "one coefficient per component");
    let c = c.values();
    let r = residual_matrix(u, 1.0);
    let energy: f64 = dirichlet_terms(u, l).iter().zip(c).map(|(e, ci)| ci * e).sum();
    let mut penalty = 0.0;
    for j in 0..c.len() {
        for k in 0..c.len() {
            penalty += c[j].min(c[k]) * r[[j, k]] * r[[j, k]];
        }
    }
    energy + b * penalty
}

/// Exact gradient of [`ggdo_value`]:
/// `2 c_i L u_i + 4b Σ_k min(c_i, c_k) (<u_i, u_k> - δ_ik) u_k`.
pub fn ggdo_gradient(u: ArrayView2<'_, f64>, l: ArrayView2<'_, f64>, b: f64, c: &GgdoCoefficients) -> Array2<f64> {
    check_shapes(u, l);
    ggdo_direction_scaled(u, l, b, c, 1.0)
}

fn ggdo_direction_scaled(
    u: ArrayView2<'_, f64>,
    l: ArrayView2<'_, f64>,
    b: f64,
    c: &GgdoCoefficients,
    scale: f64,
) -> Array2<f64> {
    let c = c.values();
    let d = c.len();
    let r = residual_matrix(u, scale);
    let mut coupling = Array2::<f64>::zeros((d, d));
    for k in 0..d {
        for i in 0..d {
            coupling[[k, i]] = 4.0 * b * c[k].min(c[i]) * r[[k, i]];
        }
    }
    let mut grad = l.dot(&u);
    for i in 0..d {
        grad.column_mut(i).mapv_inplace(|v| 2.0 * c[i] * v);
    }
    grad += &u.dot(&coupling);
    grad * scale
}

/// `Σ_i <u_i, L u_i> + Σ_{k<=j} β_jk r_jk + b Σ_{k<=j} r_jk²` with
/// `r_jk = <u_j, u_k> - δ_jk`.
pub fn allo_value(u: ArrayView2<'_, f64>, duals: &DualVariables, l: ArrayView2<'_, f64>, b: f64) -> f64 {
    check_shapes(u, l);
    allo_value_scaled(u, duals, l, b, 1.0)
}

/// [`allo_value`] under the uniform-state inner product.
pub fn allo_value_uniform(u: ArrayView2<'_, f64>, duals: &DualVariables, l: ArrayView2<'_, f64>, b: f64) -> f64 {
    check_shapes(u, l);
    allo_value_scaled(u, duals, l, b, 1.0 / u.nrows() as f64)
}

fn allo_value_scaled(u: ArrayView2<'_, f64>, duals: &DualVariables, l: ArrayView2<'_, f64>, b: f64, scale: f64) -> f64 {
    let d = u.ncols();
    let r = residual_matrix(u, scale);
    let energy: f64 = dirichlet_terms(u, l).iter().sum::<f64>() * scale;
    let mut linear = 0.0;
    let mut quadratic = 0.0;
    for j in 0..d {
        for k in 0..=j {
            linear += duals.get(j, k) * r[[j, k]];
            quadratic += r[[j, k]] * r[[j, k]];
        }
    }
    energy + linear + b * quadratic
}

/// Stop-gradient descent direction of ALLO:
/// `g_i = 2 L u_i + Σ_{j<=i} β_ij u_j + 2b Σ_{j<=i} (<u_i, u_j> - δ_ij) u_j`.
pub fn allo_primal_direction(
    u: ArrayView2<'_, f64>,
    duals: &DualVariables,
    l: ArrayView2<'_, f64>,
    b: f64,
) -> Array2<f64> {
    check_shapes(u, l);
    allo_primal_direction_scaled(u, duals, l, b, 1.0)
}

/// [`allo_primal_direction`] under the uniform-state inner product; every
/// inner product (including the one defining the direction) carries `1/|S|`.
pub fn allo_primal_direction_uniform(
    u: ArrayView2<'_, f64>,
    duals: &DualVariables,
    l: ArrayView2<'_, f64>,
    b: f64,
) -> Array2<f64> {
    check_shapes(u, l);
    allo_primal_direction_scaled(u, duals, l, b, 1.0 / u.nrows() as f64)
}

fn allo_primal_direction_scaled(
    u: ArrayView2<'_, f64>,
    duals: &DualVariables,
    l: ArrayView2<'_, f64>,
    b: f64,
    scale: f64,
) -> Array2<f64> {
    let d = u.ncols();
    assert_eq!(duals.d(), d, "dual dimension must match d");
    let r = residual_matrix(u, scale);
    // coupling[j, i] multiplies u_j in g_i; nonzero only for j <= i.
    let mut coupling = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            coupling[[j, i]] = duals.get(i, j) + 2.0 * b * r[[i, j]];
        }
    }
    let mut g = l.dot(&u) * 2.0;
    g += &u.dot(&coupling);
    g * scale
}

/// Dual ascent direction: packed residuals `r_jk = <u_j, u_k> - δ_jk`, `k <= j`.
pub fn allo_dual_direction(u: ArrayView2<'_, f64>) -> Vec<f64> {
    pack_lower(&residual_matrix(u, 1.0))
}

pub fn allo_dual_direction_uniform(u: ArrayView2<'_, f64>) -> Vec<f64> {
    pack_lower(&residual_matrix(u, 1.0 / u.nrows() as f64))
}

fn pack_lower(r: &Array2<f64>) -> Vec<f64> {
    let d = r.nrows();
    let mut out = Vec::with_capacity(tri_len(d));
    for j in 0..d {
        for k in 0..=j {
            out.push(r[[j, k]]);
        }
    }
    out
}

/// Barrier ascent direction `Σ_{k<=j} r_jk²`.
pub fn barrier_direction(u: ArrayView2<'_, f64>) -> f64 {
    allo_dual_direction(u).iter().map(|r| r * r).sum()
}

/// Weighted transition pairs. Weights sum to one; the source state of each
/// pair doubles as the sample used for the inner-product constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pairs: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl TransitionBatch {
    pub fn uniform(pairs: Vec<(usize, usize)>) -> Self {
        let w = if pairs.is_empty() { 0.0 } else { 1.0 / pairs.len() as f64 };
        let weights = vec![w; pairs.len()];
        TransitionBatch { pairs, weights }
    }

    /// Every transition with `P[s, s'] > 0`, weighted by `P[s, s'] / |S|`.
    /// Estimates computed on this batch are exact expectations.
    pub fn exhaustive(model: &TransitionModel) -> Self {
        let p = model.transition();
        let n = model.num_states() as f64;
        let mut pairs = Vec::new();
        let mut weights = Vec::new();
        for ((s, sp), &prob) in p.indexed_iter() {
            if prob > 0.0 {
                pairs.push((s, sp));
                weights.push(prob / n);
            }
        }
        TransitionBatch { pairs, weights }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check(&self, outputs: ArrayView2<'_, f64>) -> Result<(), ObjectiveError> {
        if self.pairs.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        let n = outputs.nrows();
        if let Some(&(s, sp)) = self.pairs.iter().find(|&&(s, sp)| s >= n || sp >= n) {
            return Err(ObjectiveError::Shape(format!("pair ({s}, {sp}) with {n} output rows")));
        }
        Ok(())
    }

    /// Weighted Gram estimate `Σ_b w_b φ(s_b) φ(s_b)ᵀ`.
    fn gram(&self, outputs: ArrayView2<'_, f64>) -> Array2<f64> {
        let d = outputs.ncols();
        let mut g = Array2::<f64>::zeros((d, d));
        for (&(s, _), &w) in self.pairs.iter().zip(&self.weights) {
            let row = outputs.row(s);
            for j in 0..d {
                let wj = w * row[j];
                for k in 0..d {
                    g[[j, k]] += wj * row[k];
                }
            }
        }
        g
    }
}

/// Stochastic directions with respect to the per-state outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledDirections {
    /// `|S| x d` cotangent: descent direction for each state's output row.
    pub outputs: Array2<f64>,
    /// Packed dual ascent direction.
    pub dual: Vec<f64>,
    /// Barrier ascent direction (may be slightly negative from sampling noise).
    pub barrier: f64,
    /// Sampled objective value.
    pub loss: f64,
}

/// Two-batch stochastic estimate of the ALLO directions.
///
/// `batch1` supplies the Dirichlet term and the differentiated side of every
/// constraint product; `batch2` supplies an independent estimate of the
/// residual multiplying it in the quadratic penalty, so that `b · r · ∂r`
/// stays unbiased. `outputs` holds `φ(s)` for every state.
pub fn sampled_allo_directions(
    batch1: &TransitionBatch,
    batch2: &TransitionBatch,
    outputs: ArrayView2<'_, f64>,
    duals: &DualVariables,
    b: f64,
) -> Result<SampledDirections, ObjectiveError> {
    batch1.check(outputs)?;
    batch2.check(outputs)?;
    let (n, d) = outputs.dim();
    if duals.d() != d {
        return Err(ObjectiveError::Shape(format!("duals for d = {}, outputs have {d} columns", duals.d())));
    }
    let mut r1 = batch1.gram(outputs);
    let mut r2 = batch2.gram(outputs);
    for i in 0..d {
        r1[[i, i]] -= 1.0;
        r2[[i, i]] -= 1.0;
    }

    let mut coupling = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            coupling[[j, i]] = duals.get(i, j) + 2.0 * b * r2[[i, j]];
        }
    }

    let mut cot = Array2::<f64>::zeros((n, d));
    let mut dirichlet = 0.0;
    for (&(s, sp), &w) in batch1.pairs.iter().zip(&batch1.weights) {
        for i in 0..d {
            let diff = outputs[[s, i]] - outputs[[sp, i]];
            dirichlet += 0.5 * w * diff * diff;
            cot[[s, i]] += w * diff;
            cot[[sp, i]] -= w * diff;
        }
        let row = outputs.row(s);
        let push = row.dot(&coupling);
        cot.row_mut(s).scaled_add(w, &push);
    }

    let mut dual = Vec::with_capacity(tri_len(d));
    let mut barrier = 0.0;
    let mut loss = dirichlet;
    for j in 0..d {
        for k in 0..=j {
            dual.push(0.5 * (r1[[j, k]] + r2[[j, k]]));
            let sq = r1[[j, k]] * r2[[j, k]];
            barrier += sq;
            loss += duals.get(j, k) * r1[[j, k]] + b * sq;
        }
    }
    Ok(SampledDirections { outputs: cot, dual, barrier, loss })
}

/// Two-batch stochastic estimate of the GGDO gradient (no duals; the
/// barrier direction is still reported so the coefficient can be ascended).
pub fn sampled_ggdo_directions(
    batch1: &TransitionBatch,
    batch2: &TransitionBatch,
    outputs: ArrayView2<'_, f64>,
    b: f64,
    c: &GgdoCoefficients,
) -> Result<SampledDirections, ObjectiveError> {
    batch1.check(outputs)?;
    batch2.check(outputs)?;
    let (n, d) = outputs.dim();
    if c.len() != d {
        return Err(ObjectiveError::Shape(format!("{} coefficients for d = {d}", c.len())));
    }
    let c = c.values();
    let mut r1 = batch1.gram(outputs);
    let mut r2 = batch2.gram(outputs);
    for i in 0..d {
        r1[[i, i]] -= 1.0;
        r2[[i, i]] -= 1.0;
    }
    let mut coupling = Array2::<f64>::zeros((d, d));
    for k in 0..d {
        for i in 0..d {
            coupling[[k, i]] = 4.0 * b * c[k].min(c[i]) * r2[[k, i]];
        }
    }

    let mut cot = Array2::<f64>::zeros((n, d));
    let mut energy = 0.0;
    for (&(s, sp), &w) in batch1.pairs.iter().zip(&batch1.weights) {
        for i in 0..d {
            let diff = outputs[[s, i]] - outputs[[sp, i]];
            energy += 0.5 * w * c[i] * diff * diff;
            cot[[s, i]] += w * c[i] * diff;
            cot[[sp, i]] -= w * c[i] * diff;
        }
        let push = outputs.row(s).dot(&coupling);
        cot.row_mut(s).scaled_add(w, &push);
    }

    // The barrier direction is the derivative of the objective in b.
    let mut penalty = 0.0;
    for j in 0..d {
        for k in 0..d {
            penalty += c[j].min(c[k]) * r1[[j, k]] * r2[[j, k]];
        }
    }
    let dual = pack_lower(&((&r1 + &r2) * 0.5));
    Ok(SampledDirections { outputs: cot, dual, barrier: penalty, loss: energy + b * penalty })
}

/// Exact GGDO gradient under the uniform-state inner product.
pub fn ggdo_gradient_uniform(
    u: ArrayView2<'_, f64>,
    l: ArrayView2<'_, f64>,
    b: f64,
    c: &GgdoCoefficients,
) -> Array2<f64> {
    check_shapes(u, l);
    ggdo_direction_scaled(u, l, b, c, 1.0 / u.nrows() as f64)
}

/// Monte Carlo Rayleigh quotient for column `i`:
/// `½ Σ w (φ_i(s) - φ_i(s'))² / Σ w φ_i(s)²`.
pub fn mc_eigenvalue_estimate(
    batch: &TransitionBatch,
    outputs: ArrayView2<'_, f64>,
    i: usize,
) -> Result<f64, ObjectiveError> {
    batch.check(outputs)?;
    if i >= outputs.ncols() {
        return Err(ObjectiveError::Shape(format!("column {i} of {}", outputs.ncols())));
    }
    let col = outputs.index_axis(Axis(1), i);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&(s, sp), &w) in batch.pairs.iter().zip(&batch.weights) {
        let diff = col[s] - col[sp];
        num += 0.5 * w * diff * diff;
        den += w * col[s] * col[s];
    }
    if den == 0.0 {
        return Err(ObjectiveError::ZeroColumn(i));
    }
    Ok(num / den)
}
