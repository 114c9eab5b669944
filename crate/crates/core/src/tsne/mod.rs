//! Exact t-SNE over dense LSA vectors.
//!
//! Input affinities are Gaussian conditionals whose bandwidth is found per
//! point by bisection on the precision until the row entropy matches
//! `ln(perplexity)`; they are symmetrized into a joint distribution `P`. The
//! 2-D map minimizes `KL(P‖Q)` with Student-t similarities `Q`, using
//! momentum gradient descent with per-coordinate gains and an early
//! exaggeration phase.

pub mod barnes_hut;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lsa::DenseVector;

/// Floor applied to joint probabilities (input and output) before logs.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("invalid t-SNE input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("coordinates became non-finite at iteration {iteration}")]
    NumericalDivergence { iteration: usize, kl_trace: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Allowed |H − ln(perplexity)| for each calibrated row.
    pub calibration_tolerance: f64,
    pub calibration_max_iters: usize,
    /// Per-coordinate adaptive gains (delta-bar-delta).
    pub adaptive_gains: bool,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 15.0,
            n_iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            init_std: 1e-4,
            seed: 42,
            calibration_tolerance: 1e-5,
            calibration_max_iters: 50,
            adaptive_gains: true,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n_points: usize) -> Result<(), TsneError> {
        let bad = |m: &str| Err(TsneError::InvalidInput(m.to_string()));
        if !(self.perplexity >= 1.0) {
            return bad("perplexity must be >= 1");
        }
        if self.perplexity >= n_points as f64 {
            return bad("perplexity must be smaller than the number of points");
        }
        if self.n_iterations == 0 || self.calibration_max_iters == 0 {
            return bad("iteration counts must be positive");
        }
        let positive = [
            self.learning_rate,
            self.early_exaggeration_factor,
            self.init_std,
            self.calibration_tolerance,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("learning rate, exaggeration, init_std and tolerance must be positive");
        }
        if ![self.momentum_initial, self.momentum_final]
            .iter()
            .all(|m| (0.0..1.0).contains(m))
        {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationStatus {
    Converged,
    /// Iteration budget exhausted; the best bandwidth found is kept.
    MaxIterations,
    /// Every distance is zero; the row is uniform.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Gaussian bandwidth; infinite for a degenerate row.
    pub sigma: f64,
    /// Conditional probabilities, same order as the input distances.
    pub conditional: Vec<f64>,
    pub entropy: f64,
    pub status: CalibrationStatus,
}

fn row_at_precision(shifted: &[f64], beta: f64, out: &mut [f64]) -> f64 {
    let mut z = 0.0;
    let mut weighted = 0.0;
    for (p, &d) in out.iter_mut().zip(shifted) {
        let w = (-beta * d).exp();
        *p = w;
        z += w;
        weighted += w * d;
    }
    for p in out.iter_mut() {
        *p /= z;
    }
    z.ln() + beta * weighted / z
}

/// Finds σ such that the entropy of `p_j ∝ exp(−d_j / 2σ²)` is within
/// `tolerance` of `ln(perplexity)`. `squared_distances` excludes the point
/// itself.
pub fn calibrate_sigma(
    squared_distances: &[f64],
    perplexity: f64,
    tolerance: f64,
    max_iters: usize,
) -> Result<Calibration, TsneError> {
    let m = squared_distances.len();
    if m < 2 {
        return Err(TsneError::InvalidInput("a row needs at least 2 distances".into()));
    }
    if !(perplexity >= 1.0 && perplexity < m as f64 + 1.0) {
        return Err(TsneError::InvalidInput(format!(
            "perplexity {perplexity} outside [1, {})",
            m + 1
        )));
    }
    if squared_distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(TsneError::InvalidInput("distances must be finite and >= 0".into()));
    }
    let target = perplexity.ln();
    let dmin = squared_distances.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = squared_distances.iter().copied().fold(0.0, f64::max);
    // Distances equal up to rounding give a uniform row at every σ.
    if dmax - dmin <= 4.0 * f64::EPSILON * dmax {
        let entropy = (m as f64).ln();
        return Ok(Calibration {
            sigma: f64::INFINITY,
            conditional: vec![1.0 / m as f64; m],
            entropy,
            status: if (entropy - target).abs() <= tolerance {
                CalibrationStatus::Converged
            } else {
                CalibrationStatus::Degenerate
            },
        });
    }
    // Shifting by the minimum leaves the distribution unchanged and keeps the
    // nearest weight at 1, so Z never underflows.
    let shifted: Vec<f64> = squared_distances.iter().map(|d| d - dmin).collect();

    let mean = shifted.iter().sum::<f64>() / m as f64;
    let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut row = vec![0.0; m];
    let mut best: Option<(f64, f64, f64)> = None; // (|diff|, beta, entropy)
    for _ in 0..max_iters {
        let entropy = row_at_precision(&shifted, beta, &mut row);
        let diff = entropy - target;
        if best.is_none_or(|b| diff.abs() < b.0) {
            best = Some((diff.abs(), beta, entropy));
        }
        if diff.abs() <= tolerance {
            return Ok(Calibration {
                sigma: (0.5 / beta).sqrt(),
                conditional: row,
                entropy,
                status: CalibrationStatus::Converged,
            });
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    let (_, beta, entropy) = best.expect("max_iters >= 1");
    row_at_precision(&shifted, beta, &mut row);
    Ok(Calibration {
        sigma: (0.5 / beta).sqrt(),
        conditional: row,
        entropy,
        status: CalibrationStatus::MaxIterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedRow {
    pub index: usize,
    pub status: CalibrationStatus,
    pub entropy: f64,
}

/// Per-point conditional distributions `p_{j|i}` (row-major `n × n`, zero
/// diagonal).
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    pub n: usize,
    pub rows: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub entropies: Vec<f64>,
    pub statuses: Vec<CalibrationStatus>,
}

impl ConditionalAffinities {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    pub fn flagged(&self) -> Vec<FlaggedRow> {
        self.statuses
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != CalibrationStatus::Converged)
            .map(|(i, &s)| FlaggedRow {
                index: i,
                status: s,
                entropy: self.entropies[i],
            })
            .collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_vectors(vectors: &[DenseVector]) -> Result<(), TsneError> {
    let dim = vectors.first().map_or(0, DenseVector::dim);
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(TsneError::DimensionMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    if vectors.iter().any(|v| v.0.iter().any(|x| !x.is_finite())) {
        return Err(TsneError::InvalidInput("non-finite input coordinate".into()));
    }
    Ok(())
}

pub fn conditional_affinities(
    vectors: &[DenseVector],
    config: &TsneConfig,
) -> Result<ConditionalAffinities, TsneError> {
    let n = vectors.len();
    if n < 3 {
        return Err(TsneError::InvalidInput(format!("need at least 3 points, got {n}")));
    }
    config.validate(n)?;
    check_vectors(vectors)?;
    let calibrations: Vec<Calibration> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(&vectors[i].0, &vectors[j].0))
                .collect();
            calibrate_sigma(
                &dists,
                config.perplexity,
                config.calibration_tolerance,
                config.calibration_max_iters,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut rows = vec![0.0; n * n];
    for (i, c) in calibrations.iter().enumerate() {
        let others = (0..n).filter(|&j| j != i);
        for (j, p) in others.zip(&c.conditional) {
            rows[i * n + j] = *p;
        }
    }
    Ok(ConditionalAffinities {
        n,
        rows,
        sigmas: calibrations.iter().map(|c| c.sigma).collect(),
        entropies: calibrations.iter().map(|c| c.entropy).collect(),
        statuses: calibrations.iter().map(|c| c.status).collect(),
    })
}

/// Symmetric joint probabilities `p_ij` (row-major `n × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    n: usize,
    p: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub flagged_rows: Vec<FlaggedRow>,
}

impl AffinityMatrix {
    /// Symmetrizes `(p_{j|i} + p_{i|j}) / 2n`, floors at
    /// [`PROBABILITY_FLOOR`] and renormalizes to unit mass.
    pub fn from_conditional(c: &ConditionalAffinities) -> Self {
        let n = c.n;
        let mut p = vec![0.0; n * n];
        let denom = 2.0 * n as f64;
        for i in 0..n {
            for j in i + 1..n {
                let v = ((c.rows[i * n + j] + c.rows[j * n + i]) / denom).max(PROBABILITY_FLOOR);
                p[i * n + j] = v;
                p[j * n + i] = v;
            }
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        AffinityMatrix {
            n,
            p,
            sigmas: c.sigmas.clone(),
            flagged_rows: c.flagged(),
        }
    }

    /// Wraps an explicit joint distribution after checking its invariants.
    pub fn from_joint(n: usize, p: Vec<f64>) -> Result<Self, TsneError> {
        if p.len() != n * n {
            return Err(TsneError::DimensionMismatch {
                expected: n * n,
                found: p.len(),
            });
        }
        for i in 0..n {
            if p[i * n + i] != 0.0 {
                return Err(TsneError::InvalidInput("non-zero diagonal".into()));
            }
            for j in 0..n {
                let x = p[i * n + j];
                if !(x.is_finite() && x >= 0.0) || x != p[j * n + i] {
                    return Err(TsneError::InvalidInput("P must be symmetric and >= 0".into()));
                }
            }
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TsneError::InvalidInput(format!("P sums to {total}")));
        }
        Ok(AffinityMatrix {
            n,
            p,
            sigmas: vec![f64::NAN; n],
            flagged_rows: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }
}

pub fn pairwise_affinities(
    vectors: &[DenseVector],
    config: &TsneConfig,
) -> Result<AffinityMatrix, TsneError> {
    Ok(AffinityMatrix::from_conditional(&conditional_affinities(vectors, config)?))
}

pub type Point = [f64; 2];

#[inline]
fn student_t(a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    1.0 / (1.0 + dx * dx + dy * dy)
}

/// `Σ_{k≠l} (1 + ‖y_k − y_l‖²)⁻¹`, reduced row by row in index order.
fn q_normalizer(y: &[Point]) -> f64 {
    let row_sums: Vec<f64> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            (0..y.len())
                .filter(|&j| j != i)
                .map(|j| student_t(&y[i], &y[j]))
                .sum()
        })
        .collect();
    row_sums.iter().sum()
}

fn check_coords(n: usize, y: &[Point]) -> Result<(), TsneError> {
    if y.len() != n {
        return Err(TsneError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    Ok(())
}

/// `Σ_{i≠j} p_ij ln(p_ij / q_ij)` with `q_ij` floored at
/// [`PROBABILITY_FLOOR`]; zero entries of `P` contribute nothing.
pub fn kl_divergence(p: &AffinityMatrix, y: &[Point]) -> Result<f64, TsneError> {
    check_coords(p.n, y)?;
    Ok(gradient_and_kl(&p.p, y, 1.0).1)
}

/// Gradient of `KL(P‖Q)` with respect to every map point.
pub fn kl_gradient(p: &AffinityMatrix, y: &[Point]) -> Result<Vec<Point>, TsneError> {
    check_coords(p.n, y)?;
    Ok(gradient_and_kl(&p.p, y, 1.0).0)
}

/// Gradient with `P` scaled by `exaggeration`, and KL of the unscaled `P`.
pub(crate) fn gradient_and_kl(p: &[f64], y: &[Point], exaggeration: f64) -> (Vec<Point>, f64) {
    let n = y.len();
    let z = q_normalizer(y);
    let rows: Vec<(Point, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut gx, mut gy, mut kl) = (0.0, 0.0, 0.0);
            let prow = &p[i * n..(i + 1) * n];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let num = student_t(&y[i], &y[j]);
                let q = num / z;
                let pij = prow[j];
                let mult = (exaggeration * pij - q) * num;
                gx += mult * (y[i][0] - y[j][0]);
                gy += mult * (y[i][1] - y[j][1]);
                if pij > 0.0 {
                    kl += pij * (pij / q.max(PROBABILITY_FLOOR)).ln();
                }
            }
            ([4.0 * gx, 4.0 * gy], kl)
        })
        .collect();
    let kl = rows.iter().map(|r| r.1).sum();
    (rows.into_iter().map(|r| r.0).collect(), kl)
}

/// Raw optimizer output, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct TsneRun {
    pub coords: Vec<Point>,
    /// KL(P‖Q) of the un-exaggerated `P` at the start of every iteration.
    pub kl_trace: Vec<f64>,
    pub final_kl: f64,
}

pub(crate) fn initial_coords(n: usize, config: &TsneConfig) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).expect("init_std validated");
    (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect()
}

pub(crate) fn center(y: &mut [Point]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

/// `learning_rate` is in the units of the reference t-SNE implementations,
/// whose gradient omits the factor 4 of the true KL gradient.
const GRADIENT_SCALE: f64 = 0.25;

/// Momentum descent shared by the exact and Barnes-Hut paths. `step`
/// returns the gradient at `y` (with `P` scaled by the given exaggeration)
/// and the un-exaggerated KL.
pub(crate) fn optimize(
    n: usize,
    config: &TsneConfig,
    mut step: impl FnMut(&[Point], f64) -> (Vec<Point>, f64),
    mut final_kl: impl FnMut(&[Point]) -> f64,
) -> Result<TsneRun, TsneError> {
    let mut y = initial_coords(n, config);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_trace = Vec::with_capacity(config.n_iterations);
    for iter in 0..config.n_iterations {
        let exaggeration = if iter < config.early_exaggeration_iters {
            config.early_exaggeration_factor
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iter {
            config.momentum_initial
        } else {
            config.momentum_final
        };
        let (grad, kl) = step(&y, exaggeration);
        kl_trace.push(kl);
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                if config.adaptive_gains {
                    gains[i][d] = if (g > 0.0) != (update[i][d] > 0.0) {
                        gains[i][d] + 0.2
                    } else {
                        (gains[i][d] * 0.8).max(0.01)
                    };
                }
                update[i][d] = momentum * update[i][d] - config.learning_rate * GRADIENT_SCALE * gains[i][d] * g;
                y[i][d] += update[i][d];
            }
        }
        center(&mut y);
        if y.iter().flatten().any(|x| !x.is_finite()) {
            return Err(TsneError::NumericalDivergence {
                iteration: iter,
                kl_trace,
            });
        }
    }
    let final_kl = final_kl(&y);
    Ok(TsneRun {
        coords: y,
        kl_trace,
        final_kl,
    })
}

/// Exact O(n²) t-SNE.
pub fn run_tsne(p: &AffinityMatrix, config: &TsneConfig) -> Result<TsneRun, TsneError> {
    config.validate(p.n)?;
    optimize(
        p.n,
        config,
        |y, exaggeration| gradient_and_kl(&p.p, y, exaggeration),
        |y| gradient_and_kl(&p.p, y, 1.0).1,
    )
}

/// Map coordinates per document plus optimizer diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub coords: BTreeMap<String, Point>,
    pub final_kl: f64,
    pub kl_trace: Vec<f64>,
    pub flagged_rows: Vec<FlaggedRow>,
    pub config: TsneConfig,
}

/// `embedding_diag.json` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDiagnostics {
    pub final_kl: f64,
    pub flagged_rows: Vec<FlaggedRow>,
    pub config: TsneConfig,
    pub kl_trace: Vec<f64>,
}

impl EmbeddingResult {
    pub fn from_run(
        doc_ids: &[String],
        run: TsneRun,
        flagged_rows: Vec<FlaggedRow>,
        config: TsneConfig,
    ) -> Self {
        EmbeddingResult {
            coords: doc_ids.iter().cloned().zip(run.coords).collect(),
            final_kl: run.final_kl,
            kl_trace: run.kl_trace,
            flagged_rows,
            config,
        }
    }

    /// `doc_id,x,y` with a header row.
    pub fn coords_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["doc_id", "x", "y"]).expect("in-memory write");
        for (id, [x, y]) in &self.coords {
            w.write_record([id.as_str(), &x.to_string(), &y.to_string()])
                .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn parse_coords_csv(bytes: &[u8]) -> Result<BTreeMap<String, Point>, String> {
        let mut r = csv::Reader::from_reader(bytes);
        let headers = r.headers().map_err(|e| e.to_string())?;
        if headers != vec!["doc_id", "x", "y"] {
            return Err(format!("unexpected embedding header {headers:?}"));
        }
        let mut coords = BTreeMap::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            let parse = |k: usize| -> Result<f64, String> {
                let x: f64 = rec[k].parse().map_err(|e| format!("{e}"))?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err("non-finite coordinate".into())
                }
            };
            if coords.insert(rec[0].to_string(), [parse(1)?, parse(2)?]).is_some() {
                return Err(format!("duplicate embedding row {}", &rec[0]));
            }
        }
        Ok(coords)
    }

    pub fn diagnostics(&self) -> EmbeddingDiagnostics {
        EmbeddingDiagnostics {
            final_kl: self.final_kl,
            flagged_rows: self.flagged_rows.clone(),
            config: self.config.clone(),
            kl_trace: self.kl_trace.clone(),
        }
    }

    pub fn from_parts(coords: BTreeMap<String, Point>, diag: EmbeddingDiagnostics) -> Self {
        EmbeddingResult {
            coords,
            final_kl: diag.final_kl,
            kl_trace: diag.kl_trace,
            flagged_rows: diag.flagged_rows,
            config: diag.config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn entropy(row: &[f64]) -> f64 {
        -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn equal_distances_accept_immediately() {
        let c = calibrate_sigma(&[4.0; 6], 6.0, 1e-5, 1).unwrap();
        assert_eq!(c.status, CalibrationStatus::Converged);
        assert!(c.conditional.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn near_neighbor_takes_the_mass() {
        // Brute-force scan over a σ grid: the best-matching σ for perplexity
        // 1.01 puts nearly all mass on the distance-1 neighbor.
        let d = [1.0, 100.0];
        let target = 1.01f64.ln();
        let mut best = (f64::INFINITY, 0.0);
        for k in 1..20_000 {
            let sigma = k as f64 * 1e-3;
            let w: Vec<f64> = d.iter().map(|x: &f64| (-x / (2.0 * sigma * sigma)).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / z).collect();
            let err = (entropy(&p) - target).abs();
            if err < best.0 {
                best = (err, p[0]);
            }
        }
        assert!(best.1 > 0.99);

        let c = calibrate_sigma(&d, 1.01, 1e-5, 200).unwrap();
        assert_eq!(c.status, CalibrationStatus::Converged);
        assert!(c.conditional[0] > 0.99);
        assert!((c.conditional[0] - best.1).abs() < 1e-3);
    }

    #[test]
    fn random_row_hits_target_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row: Vec<f64> = (0..30).map(|_| rng.random::<f64>() * 50.0).collect();
        let c = calibrate_sigma(&row, 5.0, 1e-5, 50).unwrap();
        assert_eq!(c.status, CalibrationStatus::Converged);
        assert!((entropy(&c.conditional) - 5f64.ln()).abs() <= 1e-5);
        assert!((c.conditional.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // σ reproduces the row.
        let w: Vec<f64> = row.iter().map(|d| (-d / (2.0 * c.sigma * c.sigma)).exp()).collect();
        let z: f64 = w.iter().sum();
        for (p, w) in c.conditional.iter().zip(&w) {
            assert!((p - w / z).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_invalid_rows() {
        let c = calibrate_sigma(&[0.0; 4], 2.0, 1e-5, 50).unwrap();
        assert_eq!(c.status, CalibrationStatus::Degenerate);
        assert!(c.conditional.iter().all(|&p| p == 0.25));
        assert!(calibrate_sigma(&[1.0], 1.0, 1e-5, 50).is_err());
        assert!(calibrate_sigma(&[1.0, 2.0], 3.0, 1e-5, 50).is_err());
        let flat = calibrate_sigma(&[3.0; 5], 2.0, 1e-5, 10).unwrap();
        assert_eq!(flat.status, CalibrationStatus::Degenerate);
        let stuck = calibrate_sigma(&[1.0, 2.0, 30.0, 400.0], 3.0, 1e-12, 3).unwrap();
        assert_eq!(stuck.status, CalibrationStatus::MaxIterations);
    }

    fn pts(v: &[&[f64]]) -> Vec<DenseVector> {
        v.iter().map(|x| DenseVector(x.to_vec())).collect()
    }

    fn small_config(perplexity: f64) -> TsneConfig {
        TsneConfig {
            perplexity,
            ..TsneConfig::default()
        }
    }

    #[test]
    fn equilateral_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let p = pairwise_affinities(&pts(&[&[0.0, 0.0], &[1.0, 0.0], &[0.5, h]]), &small_config(2.0))
            .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 0.0 } else { 1.0 / 6.0 };
                assert!((p.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_pair_is_row_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut v: Vec<DenseVector> = (0..9)
            .map(|_| DenseVector((0..4).map(|_| rng.random::<f64>()).collect()))
            .collect();
        v.push(v[3].clone());
        let p = pairwise_affinities(&v, &small_config(3.0)).unwrap();
        for (a, b) in [(3, 9), (9, 3)] {
            let row = p.row(a);
            let max = row.iter().copied().fold(0.0, f64::max);
            assert_eq!(row[b], max);
        }
    }

    #[test]
    fn affinity_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<DenseVector> = (0..40)
            .map(|_| DenseVector((0..6).map(|_| rng.random::<f64>() * 3.0).collect()))
            .collect();
        let p = pairwise_affinities(&v, &small_config(10.0)).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..40 {
            assert_eq!(p.get(i, i), 0.0);
            for j in 0..40 {
                assert_eq!(p.get(i, j), p.get(j, i));
                assert!(p.get(i, j) >= 0.0);
            }
        }
        assert!(p.flagged_rows.is_empty());
        assert!(pairwise_affinities(&v[..3], &small_config(10.0)).is_err());
    }

    fn random_problem(n: usize, seed: u64) -> (AffinityMatrix, Vec<Point>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<DenseVector> = (0..n)
            .map(|_| DenseVector((0..5).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let p = pairwise_affinities(&v, &small_config(3.0)).unwrap();
        let y = (0..n)
            .map(|_| [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0])
            .collect();
        (p, y)
    }

    #[test]
    fn kl_matches_double_loop() {
        let (p, y) = random_problem(8, 3);
        let mut z = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    z += 1.0 / (1.0 + d2);
                }
            }
        }
        let mut kl = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let d2 = (y[i][0] - y[j][0]).powi(2) + (y[i][1] - y[j][1]).powi(2);
                    let q = (1.0 / (1.0 + d2)) / z;
                    kl += p.get(i, j) * (p.get(i, j) / q).ln();
                }
            }
        }
        assert!((kl_divergence(&p, &y).unwrap() - kl).abs() < 1e-10);
        assert!(kl >= -1e-12);
    }

    fn q_of(y: &[Point]) -> Vec<f64> {
        let n = y.len();
        let z = q_normalizer(y);
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    q[i * n + j] = student_t(&y[i], &y[j]) / z;
                }
            }
        }
        // Mirror to make the matrix exactly symmetric.
        for i in 0..n {
            for j in i + 1..n {
                q[j * n + i] = q[i * n + j];
            }
        }
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= total);
        q
    }

    #[test]
    fn q_equal_p_is_stationary() {
        let (_, y) = random_problem(12, 8);
        let p = AffinityMatrix::from_joint(12, q_of(&y)).unwrap();
        assert!(kl_divergence(&p, &y).unwrap().abs() < 1e-9);
        for g in kl_gradient(&p, &y).unwrap() {
            assert!(g[0].abs() < 1e-12 && g[1].abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, y) = random_problem(10, 17);
        let grad = kl_gradient(&p, &y).unwrap();
        let eps = 1e-5;
        let mut max_err: f64 = 0.0;
        for i in 0..10 {
            for d in 0..2 {
                let (mut plus, mut minus) = (y.clone(), y.clone());
                plus[i][d] += eps;
                minus[i][d] -= eps;
                let fd = (kl_divergence(&p, &plus).unwrap() - kl_divergence(&p, &minus).unwrap())
                    / (2.0 * eps);
                max_err = max_err.max((fd - grad[i][d]).abs());
            }
        }
        assert!(max_err <= 1e-4, "{max_err}");
    }

    #[test]
    fn centering_preserves_kl() {
        let (p, mut y) = random_problem(15, 4);
        for pt in y.iter_mut() {
            pt[0] += 3.0;
            pt[1] -= 1.5;
        }
        let before = kl_divergence(&p, &y).unwrap();
        center(&mut y);
        let after = kl_divergence(&p, &y).unwrap();
        assert!((before - after).abs() <= 1e-12);
    }

    #[test]
    fn run_is_deterministic_and_traced() {
        let (p, _) = random_problem(20, 6);
        // The default step of 200 overshoots on a 20-point problem.
        let config = TsneConfig {
            perplexity: 3.0,
            n_iterations: 300,
            learning_rate: 10.0,
            ..TsneConfig::default()
        };
        let a = run_tsne(&p, &config).unwrap();
        let b = run_tsne(&p, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kl_trace.len(), 300);
        assert!(a.final_kl < a.kl_trace[0]);
        assert!(a.coords.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn divergence_is_reported() {
        let (p, _) = random_problem(10, 6);
        let config = TsneConfig {
            perplexity: 3.0,
            learning_rate: 1e308,
            n_iterations: 50,
            ..TsneConfig::default()
        };
        match run_tsne(&p, &config) {
            Err(TsneError::NumericalDivergence { iteration, kl_trace }) => {
                assert_eq!(kl_trace.len(), iteration + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let coords: BTreeMap<String, Point> = [
            ("a,b".to_string(), [0.1 + 0.2, -1e-300]),
            ("pubmed:1".to_string(), [f64::MAX, 3.0]),
        ]
        .into_iter()
        .collect();
        let e = EmbeddingResult {
            coords: coords.clone(),
            final_kl: 0.5,
            kl_trace: vec![1.0],
            flagged_rows: vec![],
            config: TsneConfig::default(),
        };
        assert_eq!(EmbeddingResult::parse_coords_csv(&e.coords_csv()).unwrap(), coords);
    }
}
