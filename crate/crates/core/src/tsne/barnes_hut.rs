//! Barnes-Hut t-SNE: sparse nearest-neighbor input affinities and
//! quadtree-approximated repulsive forces.

use rayon::prelude::*;

use super::{
    calibrate_sigma, check_coords, check_vectors, optimize, squared_distance, student_t,
    CalibrationStatus, FlaggedRow, Point, TsneConfig, TsneError, TsneRun, PROBABILITY_FLOOR,
};
use crate::lsa::DenseVector;

const MAX_DEPTH: usize = 48;

/// Symmetric sparse joint probabilities in CSR layout; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAffinity {
    n: usize,
    row_ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
    pub flagged_rows: Vec<FlaggedRow>,
}

impl SparseAffinity {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()].iter().copied().zip(self.val[r].iter().copied())
    }

    /// Dense row-major copy, for comparison against the exact path.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[i * self.n + j] = v;
            }
        }
        out
    }
}

/// Affinities restricted to the ⌊3·perplexity⌋ nearest neighbors of each
/// point (exact neighbor search), then symmetrized.
pub fn sparse_affinities(
    vectors: &[DenseVector],
    config: &TsneConfig,
) -> Result<SparseAffinity, TsneError> {
    let n = vectors.len();
    if n < 3 {
        return Err(TsneError::InvalidInput(format!("need at least 3 points, got {n}")));
    }
    config.validate(n)?;
    check_vectors(vectors)?;
    let k = ((3.0 * config.perplexity).floor() as usize).clamp(2, n - 1);
    if config.perplexity >= (k + 1) as f64 {
        return Err(TsneError::InvalidInput("perplexity too large for neighbor count".into()));
    }
    let rows: Vec<(Vec<(usize, f64)>, CalibrationStatus, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, squared_distance(&vectors[i].0, &vectors[j].0)))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            d.truncate(k);
            let dist: Vec<f64> = d.iter().map(|x| x.1).collect();
            let c = calibrate_sigma(
                &dist,
                config.perplexity,
                config.calibration_tolerance,
                config.calibration_max_iters,
            )?;
            let row = d.iter().map(|x| x.0).zip(c.conditional).collect();
            Ok((row, c.status, c.entropy))
        })
        .collect::<Result<_, TsneError>>()?;

    // (C + Cᵀ) / 2n, accumulated per row in column order.
    let mut sym: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, (row, _, _)) in rows.iter().enumerate() {
        for &(j, p) in row {
            *sym[i].entry(j).or_insert(0.0) += p;
            *sym[j].entry(i).or_insert(0.0) += p;
        }
    }
    let denom = 2.0 * n as f64;
    let mut row_ptr = vec![0];
    let (mut col, mut val) = (Vec::new(), Vec::new());
    for r in &sym {
        for (&j, &v) in r {
            col.push(j);
            val.push(v / denom);
        }
        row_ptr.push(col.len());
    }
    let flagged_rows = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.1 != CalibrationStatus::Converged)
        .map(|(i, r)| FlaggedRow {
            index: i,
            status: r.1,
            entropy: r.2,
        })
        .collect();
    Ok(SparseAffinity {
        n,
        row_ptr,
        col,
        val,
        flagged_rows,
    })
}

#[derive(Debug, Clone)]
struct Node {
    center: Point,
    half_width: f64,
    mass_center: Point,
    count: usize,
    children: Option<[usize; 4]>,
    /// Points stored directly in a leaf.
    points: Vec<usize>,
}

/// Region quadtree over 2-D points with per-node center of mass.
#[derive(Debug, Clone)]
pub struct QuadTree {
    nodes: Vec<Node>,
}

impl QuadTree {
    pub fn build(points: &[Point]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let center = if points.is_empty() {
            [0.0, 0.0]
        } else {
            [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0]
        };
        let half = if points.is_empty() {
            1.0
        } else {
            ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0).max(1e-12) * (1.0 + 1e-9)
        };
        let mut tree = QuadTree {
            nodes: vec![Node::empty(center, half)],
        };
        for (i, p) in points.iter().enumerate() {
            tree.insert(0, i, p, points, 0);
        }
        tree
    }

    fn insert(&mut self, node: usize, idx: usize, p: &Point, all: &[Point], depth: usize) {
        {
            let n = &mut self.nodes[node];
            let c = n.count as f64;
            n.mass_center[0] = (n.mass_center[0] * c + p[0]) / (c + 1.0);
            n.mass_center[1] = (n.mass_center[1] * c + p[1]) / (c + 1.0);
            n.count += 1;
        }
        if let Some(children) = self.nodes[node].children {
            let q = self.nodes[node].quadrant(p);
            self.insert(children[q], idx, p, all, depth + 1);
            return;
        }
        let leaf = &self.nodes[node];
        let coincident = leaf.points.iter().all(|&j| all[j] == *p);
        if leaf.points.is_empty() || coincident || depth >= MAX_DEPTH {
            self.nodes[node].points.push(idx);
            return;
        }
        // Split the leaf and push its points down.
        let (center, half) = (leaf.center, leaf.half_width / 2.0);
        let mut children = [0; 4];
        for (q, child) in children.iter_mut().enumerate() {
            let cx = center[0] + if q & 1 == 1 { half } else { -half };
            let cy = center[1] + if q & 2 == 2 { half } else { -half };
            *child = self.nodes.len();
            self.nodes.push(Node::empty([cx, cy], half));
        }
        let moved = std::mem::take(&mut self.nodes[node].points);
        self.nodes[node].children = Some(children);
        // This node's count and mass center already include every moved point.
        for j in moved.into_iter().chain(std::iter::once(idx)) {
            let q = self.nodes[node].quadrant(&all[j]);
            self.insert(children[q], j, &all[j], all, depth + 1);
        }
    }

    pub fn root_mass_center(&self) -> Point {
        self.nodes[0].mass_center
    }

    pub fn root_count(&self) -> usize {
        self.nodes[0].count
    }

    /// Accumulates the unnormalized repulsion `Σ_j q̃_ij² (y_i − y_j)` and the
    /// partial normalizer `Σ_j q̃_ij` for point `i`.
    fn repulsion(&self, node: usize, i: usize, yi: &Point, all: &[Point], theta: f64, acc: &mut (Point, f64)) {
        let n = &self.nodes[node];
        if n.count == 0 {
            return;
        }
        match n.children {
            None => {
                for &j in &n.points {
                    if j == i {
                        continue;
                    }
                    let q = student_t(yi, &all[j]);
                    acc.1 += q;
                    acc.0[0] += q * q * (yi[0] - all[j][0]);
                    acc.0[1] += q * q * (yi[1] - all[j][1]);
                }
            }
            Some(children) => {
                let (dx, dy) = (yi[0] - n.mass_center[0], yi[1] - n.mass_center[1]);
                let dist2 = dx * dx + dy * dy;
                let width = 2.0 * n.half_width;
                if theta > 0.0 && width * width < theta * theta * dist2 {
                    let q = 1.0 / (1.0 + dist2);
                    let m = n.count as f64;
                    acc.1 += m * q;
                    acc.0[0] += m * q * q * dx;
                    acc.0[1] += m * q * q * dy;
                } else {
                    for c in children {
                        self.repulsion(c, i, yi, all, theta, acc);
                    }
                }
            }
        }
    }
}

impl Node {
    fn empty(center: Point, half_width: f64) -> Self {
        Node {
            center,
            half_width,
            mass_center: [0.0, 0.0],
            count: 0,
            children: None,
            points: Vec::new(),
        }
    }

    fn quadrant(&self, p: &Point) -> usize {
        usize::from(p[0] >= self.center[0]) | (usize::from(p[1] >= self.center[1]) << 1)
    }
}

/// Barnes-Hut gradient (with `P` scaled by `exaggeration`) and the KL of the
/// unscaled sparse `P` under the approximated normalizer.
pub fn bh_gradient_and_kl(
    p: &SparseAffinity,
    y: &[Point],
    theta: f64,
    exaggeration: f64,
) -> (Vec<Point>, f64) {
    let tree = QuadTree::build(y);
    let rep: Vec<(Point, f64)> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = ([0.0, 0.0], 0.0);
            tree.repulsion(0, i, &y[i], y, theta, &mut acc);
            acc
        })
        .collect();
    let z: f64 = rep.iter().map(|r| r.1).sum();
    let rows: Vec<(Point, f64)> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            let (mut ax, mut ay, mut kl) = (0.0, 0.0, 0.0);
            for (j, pij) in p.row(i) {
                let num = student_t(&y[i], &y[j]);
                ax += exaggeration * pij * num * (y[i][0] - y[j][0]);
                ay += exaggeration * pij * num * (y[i][1] - y[j][1]);
                if pij > 0.0 {
                    kl += pij * (pij / (num / z).max(PROBABILITY_FLOOR)).ln();
                }
            }
            let (rx, ry) = (rep[i].0[0] / z, rep[i].0[1] / z);
            ([4.0 * (ax - rx), 4.0 * (ay - ry)], kl)
        })
        .collect();
    let kl = rows.iter().map(|r| r.1).sum();
    (rows.into_iter().map(|r| r.0).collect(), kl)
}

pub fn bh_gradient(p: &SparseAffinity, y: &[Point], theta: f64) -> Result<Vec<Point>, TsneError> {
    check_coords(p.n, y)?;
    Ok(bh_gradient_and_kl(p, y, theta, 1.0).0)
}

pub fn run_tsne_barnes_hut(
    p: &SparseAffinity,
    config: &TsneConfig,
    theta: f64,
) -> Result<TsneRun, TsneError> {
    config.validate(p.n)?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(TsneError::InvalidInput(format!("theta {theta} outside [0, 1]")));
    }
    optimize(
        p.n,
        config,
        |y, exaggeration| bh_gradient_and_kl(p, y, theta, exaggeration),
        |y| bh_gradient_and_kl(p, y, theta, 1.0).1,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tsne::{gradient_and_kl, AffinityMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_corners_mass_center() {
        let t = QuadTree::build(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]]);
        let c = t.root_mass_center();
        assert!((c[0] - 1.0).abs() < 1e-15 && (c[1] - 1.0).abs() < 1e-15);
        assert_eq!(t.root_count(), 4);
    }

    #[test]
    fn coincident_points_share_a_leaf() {
        let t = QuadTree::build(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [0.0, 0.0]]);
        assert_eq!(t.root_count(), 4);
        let c = t.root_mass_center();
        assert!((c[0] - 0.75).abs() < 1e-15);
    }

    fn problem(n: usize, seed: u64) -> (SparseAffinity, Vec<Point>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<DenseVector> = (0..n)
            .map(|_| DenseVector((0..6).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let config = TsneConfig {
            perplexity: 5.0,
            ..TsneConfig::default()
        };
        let p = sparse_affinities(&v, &config).unwrap();
        let y = (0..n)
            .map(|_| [rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0])
            .collect();
        (p, y)
    }

    #[test]
    fn sparse_affinities_are_symmetric_and_normalized() {
        let (p, _) = problem(60, 1);
        let dense = p.to_dense();
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..60 {
            assert_eq!(dense[i * 60 + i], 0.0);
            for j in 0..60 {
                assert_eq!(dense[i * 60 + j], dense[j * 60 + i]);
            }
        }
        assert!(p.nnz() <= 2 * 60 * 15);
    }

    #[test]
    fn theta_zero_is_exact() {
        let (p, y) = problem(50, 2);
        let bh = bh_gradient(&p, &y, 0.0).unwrap();
        let (exact, _) = gradient_and_kl(&p.to_dense(), &y, 1.0);
        for (a, b) in bh.iter().zip(&exact) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
        // The exact KL agrees too (all sparse P entries are far above the floor).
        let dense = AffinityMatrix::from_joint(50, p.to_dense()).unwrap();
        let kl_exact = crate::tsne::kl_divergence(&dense, &y).unwrap();
        let (_, kl_bh) = bh_gradient_and_kl(&p, &y, 0.0, 1.0);
        assert!((kl_exact - kl_bh).abs() < 1e-9);
    }

    #[test]
    fn theta_half_is_close() {
        let (p, y) = problem(80, 3);
        let approx = bh_gradient(&p, &y, 0.5).unwrap();
        let (exact, _) = gradient_and_kl(&p.to_dense(), &y, 1.0);
        let err: f64 = approx
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
            .sum();
        let scale: f64 = exact.iter().map(|g| g[0].hypot(g[1])).sum();
        assert!(err / scale < 0.1, "{}", err / scale);
    }

    #[test]
    fn rejects_bad_theta() {
        let (p, _) = problem(20, 4);
        let config = TsneConfig {
            perplexity: 5.0,
            ..TsneConfig::default()
        };
        assert!(run_tsne_barnes_hut(&p, &config, 1.5).is_err());
    }
}
