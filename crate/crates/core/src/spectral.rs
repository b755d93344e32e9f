//! Ground-truth eigensystems of symmetric Laplacians and the similarity
//! metrics used to score learned representations against them.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

/// Eigenvalues closer than this are treated as one repeated eigenvalue.
pub const MULTIPLICITY_TOL: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-10;
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {gap:e}")]
    Asymmetric { i: usize, j: usize, gap: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("zero vector in column {0}")]
    ZeroVector(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ascending eigenvalues with orthonormal eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    eigenvalues: Array1<f64>,
    eigenvectors: Array2<f64>,
    blocks: Vec<Range<usize>>,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, i: usize) -> ArrayView1<'_, f64> {
        self.eigenvectors.column(i)
    }

    /// Index ranges of eigenvalues equal within [`MULTIPLICITY_TOL`].
    pub fn multiplicity_blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, i: usize) -> Range<usize> {
        self.blocks
            .iter()
            .find(|b| b.contains(&i))
            .cloned()
            .unwrap_or(i..i + 1)
    }

    /// Largest multiplicity among the first `d` eigenvalues (blocks may run past `d`).
    pub fn max_multiplicity(&self, d: usize) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.start < d)
            .map(|b| b.len())
            .max()
            .unwrap_or(1)
    }

    /// First `d` eigenvectors as an `|S| x d` matrix.
    pub fn leading(&self, d: usize) -> Array2<f64> {
        self.eigenvectors.slice(ndarray::s![.., ..d]).to_owned()
    }

    /// CSV with `index,eigenvalue` rows (1-based index).
    pub fn write_eigenvalues_csv(&self, path: impl AsRef<Path>) -> Result<(), SpectralError> {
        let mut out = String::from("index,eigenvalue\n");
        for (i, v) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{},{:.17e}\n", i + 1, v));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// CSV with one row per state: `state,e_1,...,e_n`.
    pub fn write_eigenvectors_csv(&self, path: impl AsRef<Path>) -> Result<(), SpectralError> {
        let n = self.dim();
        let mut f = fs::File::create(path)?;
        let header: Vec<String> = (1..=n).map(|i| format!("e_{i}")).collect();
        writeln!(f, "state,{}", header.join(","))?;
        for s in 0..n {
            let row: Vec<String> = self.eigenvectors.row(s).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "{s},{}", row.join(","))?;
        }
        Ok(())
    }
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[[i, j]] * a[[i, j]];
            }
        }
    }
    acc.sqrt()
}

/// Dense symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues are returned in ascending order. Each eigenvector is signed so
/// that its first entry of non-negligible magnitude is positive, which makes
/// the output deterministic for a given input.
pub fn eigendecompose(l: ArrayView2<'_, f64>) -> Result<EigenSystem, SpectralError> {
    let (rows, cols) = l.dim();
    if rows != cols {
        return Err(SpectralError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (l[[i, j]] - l[[j, i]]).abs();
            if gap > SYMMETRY_TOL {
                return Err(SpectralError::Asymmetric { i, j, gap });
            }
        }
    }

    let mut a = l.to_owned();
    // Exact symmetrization so rotations keep the matrix symmetric.
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = m;
            a[[j, i]] = m;
        }
    }
    let mut v = Array2::<f64>::eye(n);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = OFF_DIAGONAL_TOL * frob.max(1.0);

    let mut sweeps = 0;
    let mut off = off_diagonal_norm(&a);
    while off > tol {
        if sweeps == MAX_SWEEPS {
            return Err(SpectralError::NoConvergence { sweeps, off });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
        sweeps += 1;
        off = off_diagonal_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].total_cmp(&a[[j, j]]));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut eigenvectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        let col = v.column(src);
        let sign = col
            .iter()
            .find(|x| x.abs() > 1e-8)
            .map(|x| x.signum())
            .unwrap_or(1.0);
        for r in 0..n {
            eigenvectors[[r, dst]] = sign * col[r];
        }
    }
    let blocks = group_blocks(eigenvalues.view());
    Ok(EigenSystem { eigenvalues, eigenvectors, blocks })
}

/// Apply the Jacobi rotation in the (p, q) plane that zeroes `a[p, q]`.
fn rotate(a: &mut Array2<f64>, v: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = a.nrows();
    let apq = a[[p, q]];
    let app = a[[p, p]];
    let aqq = a[[q, q]];
    let t = s / c;
    a[[p, p]] = app - t * apq;
    a[[q, q]] = aqq + t * apq;
    a[[p, q]] = 0.0;
    a[[q, p]] = 0.0;
    for k in 0..n {
        if k != p && k != q {
            let akp = a[[k, p]];
            let akq = a[[k, q]];
            let new_kp = c * akp - s * akq;
            let new_kq = s * akp + c * akq;
            a[[k, p]] = new_kp;
            a[[p, k]] = new_kp;
            a[[k, q]] = new_kq;
            a[[q, k]] = new_kq;
        }
    }
    for k in 0..n {
        let vkp = v[[k, p]];
        let vkq = v[[k, q]];
        v[[k, p]] = c * vkp - s * vkq;
        v[[k, q]] = s * vkp + c * vkq;
    }
}

fn group_blocks(eigenvalues: ArrayView1<'_, f64>) -> Vec<Range<usize>> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for i in 1..=eigenvalues.len() {
        if i == eigenvalues.len() || (eigenvalues[i] - eigenvalues[i - 1]).abs() >= MULTIPLICITY_TOL {
            blocks.push(start..i);
            start = i;
        }
    }
    blocks
}

/// `|<u, v>| / (|u| |v|)`.
pub fn cosine_similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64, SpectralError> {
    if u.len() != v.len() {
        return Err(SpectralError::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 {
        return Err(SpectralError::ZeroVector(0));
    }
    if nv == 0.0 {
        return Err(SpectralError::ZeroVector(1));
    }
    Ok((u.dot(&v).abs() / (nu * nv)).min(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    /// Similarity of every component `1..=d`; index 0 is the constant component.
    pub all_components: Vec<f64>,
    /// Components `2..=d`.
    pub per_component: Vec<f64>,
    /// Mean over components `2..=d` (component 1 when `d == 1`).
    pub average: f64,
    pub d: usize,
}

/// Score the columns of `u` against the true eigenvectors.
///
/// Column `i` is compared against the whole eigenspace of `λ_i`: the score is
/// the norm of its projection onto that eigenspace divided by its own norm.
/// For simple eigenvalues this is the absolute cosine similarity. The first
/// component (the constant eigenvector of a connected graph) is reported but
/// left out of the average.
pub fn similarity_report(u: ArrayView2<'_, f64>, sys: &EigenSystem) -> Result<SimilarityReport, SpectralError> {
    let (n, d) = u.dim();
    if n != sys.dim() {
        return Err(SpectralError::Shape(format!("representation has {n} rows, eigensystem {}", sys.dim())));
    }
    if d == 0 || d > n {
        return Err(SpectralError::Shape(format!("d = {d} with |S| = {n}")));
    }
    let mut all = Vec::with_capacity(d);
    for i in 0..d {
        let col = u.column(i);
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 {
            return Err(SpectralError::ZeroVector(i));
        }
        let proj: f64 = sys
            .block_of(i)
            .map(|j| {
                let c = sys.eigenvector(j).dot(&col);
                c * c
            })
            .sum();
        all.push((proj.sqrt() / norm).min(1.0));
    }
    let per_component = all[1..].to_vec();
    let average = if per_component.is_empty() {
        all[0]
    } else {
        per_component.iter().sum::<f64>() / per_component.len() as f64
    };
    Ok(SimilarityReport { all_components: all, per_component, average, d })
}

/// Relative error `|λ̂ - λ| / λ`, or absolute error when `λ ≈ 0`.
pub fn eigenvalue_errors(estimates: &[f64], sys: &EigenSystem) -> Result<Vec<f64>, SpectralError> {
    if estimates.len() > sys.dim() {
        return Err(SpectralError::Shape(format!("{} estimates for |S| = {}", estimates.len(), sys.dim())));
    }
    Ok(estimates
        .iter()
        .zip(sys.eigenvalues.iter())
        .map(|(&est, &truth)| {
            let err = (est - truth).abs();
            if truth.abs() > 1e-10 {
                err / truth.abs()
            } else {
                err
            }
        })
        .collect())
}
