//! Latent semantic analysis: truncated SVD of the document-term tf-idf
//! matrix.
//!
//! The top singular triplets are found with a randomized range finder
//! (Gaussian test matrix, oversampling, a few power iterations) followed by
//! block subspace iteration with a Rayleigh-Ritz step until every retained
//! triplet has relative residual `‖A v − σ u‖ / σ` below the configured
//! tolerance. The small projected problem is solved with a one-sided Jacobi
//! SVD. The matrix is never centered, so sparsity is preserved.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textpipe::SparseVector;

pub const DEFAULT_COMPONENTS: usize = 150;

/// Singular values at or below `RANK_TOLERANCE * σ₁` count as numerically zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum LsaError {
    #[error("at least 2 documents are required, got {0}")]
    TooFewDocuments(usize),
    #[error("n_components {requested} must be in [1, {max}]")]
    InvalidComponents { requested: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("the document-term matrix is zero")]
    ZeroMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvdOptions {
    pub oversampling: usize,
    pub power_iterations: usize,
    /// Target relative residual for every retained triplet.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            oversampling: 10,
            power_iterations: 2,
            tolerance: 1e-8,
            max_iterations: 1000,
            seed: 42,
        }
    }
}

/// Dense LSA representation of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Right singular vectors (one row per component) and singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaModel {
    n_components: usize,
    vocabulary_size: usize,
    /// Row-major `n_components × vocabulary_size`.
    components: Vec<f64>,
    singular_values: Vec<f64>,
}

impl LsaModel {
    pub fn from_parts(
        n_components: usize,
        vocabulary_size: usize,
        components: Vec<f64>,
        singular_values: Vec<f64>,
    ) -> Result<Self, String> {
        if components.len() != n_components * vocabulary_size {
            return Err("components length does not match shape".into());
        }
        if singular_values.len() != n_components {
            return Err("singular value count does not match n_components".into());
        }
        if singular_values.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || singular_values.windows(2).any(|w| w[0] < w[1])
        {
            return Err("singular values must be positive and non-increasing".into());
        }
        if components.iter().any(|x| !x.is_finite()) {
            return Err("non-finite component entry".into());
        }
        Ok(LsaModel {
            n_components,
            vocabulary_size,
            components,
            singular_values,
        })
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary_size
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.vocabulary_size..(i + 1) * self.vocabulary_size]
    }

    /// `components · v`.
    pub fn project(&self, v: &SparseVector) -> Result<DenseVector, LsaError> {
        if v.dimensionality != self.vocabulary_size {
            return Err(LsaError::DimensionMismatch {
                expected: self.vocabulary_size,
                found: v.dimensionality,
            });
        }
        Ok(DenseVector(
            (0..self.n_components)
                .map(|c| {
                    let row = self.component(c);
                    v.entries.iter().map(|&(j, w)| row[j] * w).sum()
                })
                .collect(),
        ))
    }
}

pub fn project(model: &LsaModel, v: &SparseVector) -> Result<DenseVector, LsaError> {
    model.project(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaDiagnostics {
    pub requested_components: usize,
    pub numerical_rank: usize,
    pub iterations: usize,
    pub max_relative_residual: f64,
    pub converged: bool,
}

impl LsaDiagnostics {
    /// Human-readable notes for anything that deviated from the request.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.numerical_rank < self.requested_components {
            out.push(format!(
                "rank deficient: requested {} components, numerical rank {}; model truncated",
                self.requested_components, self.numerical_rank
            ));
        }
        if !self.converged {
            out.push(format!(
                "SVD stopped after {} iterations with relative residual {:.3e}",
                self.iterations, self.max_relative_residual
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LsaFit {
    pub model: LsaModel,
    pub diagnostics: LsaDiagnostics,
}

/// Compressed sparse rows.
struct Csr {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl Csr {
    fn from_rows(rows: &[SparseVector], n_cols: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let (mut col, mut val) = (Vec::new(), Vec::new());
        row_ptr.push(0);
        for r in rows {
            for &(j, w) in &r.entries {
                col.push(j);
                val.push(w);
            }
            row_ptr.push(col.len());
        }
        Csr {
            n_rows: rows.len(),
            n_cols,
            row_ptr,
            col,
            val,
        }
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[range.clone()]
            .iter()
            .copied()
            .zip(self.val[range].iter().copied())
    }

    /// `A · X` for dense `X` (n_cols × l); columns computed independently.
    fn mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..x.ncols())
            .into_par_iter()
            .map(|c| {
                let xc = x.column(c);
                (0..self.n_rows)
                    .map(|i| self.row(i).map(|(j, a)| a * xc[j]).sum())
                    .collect()
            })
            .collect();
        DMatrix::from_fn(self.n_rows, x.ncols(), |i, c| cols[c][i])
    }

    /// `Aᵀ · Y` for dense `Y` (n_rows × l).
    fn mul_t(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..y.ncols())
            .into_par_iter()
            .map(|c| {
                let yc = y.column(c);
                let mut out = vec![0.0; self.n_cols];
                for i in 0..self.n_rows {
                    let yi = yc[i];
                    for (j, a) in self.row(i) {
                        out[j] += a * yi;
                    }
                }
                out
            })
            .collect();
        DMatrix::from_fn(self.n_cols, y.ncols(), |j, c| cols[c][j])
    }
}

fn orthonormalize(m: DMatrix<f64>) -> DMatrix<f64> {
    m.qr().q()
}

/// SVD of a tall matrix `b` (m × l, m ≥ l): returns `(V, σ, W)` with
/// `b = V diag(σ) Wᵀ`, σ sorted descending.
fn tall_svd(b: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let qr = b.qr();
    let (q, r) = (qr.q(), qr.r());
    let (u_r, sigma, w) = jacobi_svd(r);
    (q * u_r, sigma, w)
}

/// One-sided (Hestenes) Jacobi SVD of a square matrix: `a = U diag(σ) Vᵀ`,
/// σ sorted descending. Columns of `U` belonging to zero singular values are
/// zero.
pub(crate) fn jacobi_svd(mut a: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let mut v = DMatrix::<f64>::identity(n, n);
    const EPS: f64 = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (ap, aq) = (a.column(p), a.column(q));
                let alpha = ap.norm_squared();
                let beta = aq.norm_squared();
                let gamma = ap.dot(&aq);
                if gamma == 0.0 || gamma.abs() <= EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(usize, f64)> = (0..n).map(|i| (i, a.column(i).norm())).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let sigma: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let u = DMatrix::from_fn(a.nrows(), n, |i, k| {
        let (col, s) = order[k];
        if s > 0.0 {
            a[(i, col)] / s
        } else {
            0.0
        }
    });
    let v_sorted = DMatrix::from_fn(n, n, |i, k| v[(i, order[k].0)]);
    (u, sigma, v_sorted)
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, p)], m[(i, q)]);
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Truncated SVD of the matrix whose rows are `docs`.
pub fn fit_lsa(
    docs: &[SparseVector],
    n_components: usize,
    options: &SvdOptions,
) -> Result<LsaFit, LsaError> {
    if docs.len() < 2 {
        return Err(LsaError::TooFewDocuments(docs.len()));
    }
    let vocab = docs[0].dimensionality;
    if let Some(d) = docs.iter().find(|d| d.dimensionality != vocab) {
        return Err(LsaError::DimensionMismatch {
            expected: vocab,
            found: d.dimensionality,
        });
    }
    let max_k = docs.len().min(vocab);
    if n_components == 0 || n_components > max_k {
        return Err(LsaError::InvalidComponents {
            requested: n_components,
            max: max_k,
        });
    }
    let a = Csr::from_rows(docs, vocab);
    if a.val.iter().all(|&x| x == 0.0) {
        return Err(LsaError::ZeroMatrix);
    }

    let block = (n_components + options.oversampling).min(max_k);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let omega = DMatrix::from_fn(vocab, block, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormalize(a.mul(&omega));
    for _ in 0..options.power_iterations {
        let z = orthonormalize(a.mul_t(&q));
        q = orthonormalize(a.mul(&z));
    }

    let mut iterations = 0;
    loop {
        iterations += 1;
        // Rayleigh-Ritz on span(Q): Aᵀ Q = V Σ Wᵀ, so A ≈ (Q W) Σ Vᵀ.
        let (v, sigma, w) = tall_svd(a.mul_t(&q));
        let av = a.mul(&v);
        let u = &q * &w;
        let rank = sigma
            .iter()
            .take(n_components)
            .filter(|&&s| s > RANK_TOLERANCE * sigma[0])
            .count();
        let residual = (0..rank)
            .map(|i| (av.column(i) - u.column(i) * sigma[i]).norm() / sigma[i])
            .fold(0.0, f64::max);
        let converged = residual <= options.tolerance;
        if converged || iterations >= options.max_iterations {
            if rank == 0 {
                return Err(LsaError::ZeroMatrix);
            }
            let mut components = Vec::with_capacity(rank * vocab);
            for i in 0..rank {
                let col = v.column(i);
                let (mut best, mut best_abs) = (0, -1.0);
                for (j, x) in col.iter().enumerate() {
                    if x.abs() > best_abs {
                        best = j;
                        best_abs = x.abs();
                    }
                }
                let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
                components.extend(col.iter().map(|x| sign * x));
            }
            let model = LsaModel {
                n_components: rank,
                vocabulary_size: vocab,
                components,
                singular_values: sigma[..rank].to_vec(),
            };
            return Ok(LsaFit {
                model,
                diagnostics: LsaDiagnostics {
                    requested_components: n_components,
                    numerical_rank: rank,
                    iterations,
                    max_relative_residual: residual,
                    converged,
                },
            });
        }
        q = orthonormalize(av);
    }
}
