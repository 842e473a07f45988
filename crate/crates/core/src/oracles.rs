//! Independent ground truth for checking learned transport: closed-form
//! Gaussian optimal transport, McCann interpolation, the harmonic-oscillator
//! paths, and exact discrete OT between equal-size point clouds.

use crate::error::{invalid, Error, Result};
use crate::gaussian::GaussianSpec;
use crate::linalg::{sym_eigen, sym_inv_sqrt, sym_sqrt, Matrix};
use crate::model::HarmonicSpec;
use crate::rng::SeededRng;

fn check_same_dim(a: &GaussianSpec, b: &GaussianSpec) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { context: "gaussian pair", expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// `‖mₐ − m_b‖² + tr(Sₐ + S_b − 2(Sₐ^{1/2} S_b Sₐ^{1/2})^{1/2})`.
pub fn bures_w2(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    check_same_dim(a, b)?;
    let mean_term: f64 = a.mean().iter().zip(b.mean()).map(|(x, y)| (x - y) * (x - y)).sum();
    let ra = sym_sqrt(a.cov())?;
    let cross = sym_sqrt(&ra.matmul(b.cov()).matmul(&ra).symmetrized())?;
    let cov_term = a.cov().trace() + b.cov().trace() - 2.0 * cross.trace();
    // the covariance term is a squared distance; clip rounding below zero
    Ok(mean_term + cov_term.max(0.0))
}

/// The optimal affine map `T(x) = m_b + A(x − mₐ)` between two Gaussians.
#[derive(Debug, Clone)]
pub struct GaussianOtMap {
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    a: Matrix,
    eig: Vec<f64>,
    vecs: Matrix,
}

impl GaussianOtMap {
    pub fn new(source: &GaussianSpec, target: &GaussianSpec) -> Result<Self> {
        check_same_dim(source, target)?;
        let ra = sym_sqrt(source.cov())?;
        let ra_inv = sym_inv_sqrt(source.cov())?;
        let mid = sym_sqrt(&ra.matmul(target.cov()).matmul(&ra).symmetrized())?;
        let a = ra_inv.matmul(&mid).matmul(&ra_inv).symmetrized();
        let (eig, vecs) = sym_eigen(&a)?;
        Ok(Self { mean_a: source.mean().to_vec(), mean_b: target.mean().to_vec(), a, eig, vecs })
    }

    pub fn linear_part(&self) -> &Matrix {
        &self.a
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.mean_a.len() {
            return Err(Error::DimensionMismatch {
                context: "transport map input",
                expected: self.mean_a.len(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let d = self.mean_a.len();
        let mut out = Matrix::zeros(x.rows(), d);
        let mut centered = vec![0.0; d];
        for i in 0..x.rows() {
            centered.iter_mut().zip(x.row(i)).zip(&self.mean_a).for_each(|((c, xi), m)| *c = xi - m);
            let ax = self.a.mat_vec(&centered);
            out.row_mut(i).iter_mut().zip(ax).zip(&self.mean_b).for_each(|((o, v), m)| *o = m + v);
        }
        Ok(out)
    }

    /// Position `(1−t)x + t·T(x)` and the constant velocity `T(x) − x`.
    pub fn interpolate(&self, x: &Matrix, t: f64) -> Result<(Matrix, Matrix)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let tx = self.apply(x)?;
        let vel = tx.sub(x);
        let pos = x.add(&vel.scaled(t));
        Ok((pos, vel))
    }

    /// Eulerian velocity `v*(y, t)` of the McCann interpolation: the velocity
    /// of the unique particle found at `y` at time `t`.
    pub fn velocity_field(&self, y: &Matrix, t: f64) -> Result<Matrix> {
        self.check(y)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        // y = M_t x + t(m_b − A mₐ) with M_t = (1−t)I + tA
        let d = self.mean_a.len();
        let a_ma = self.a.mat_vec(&self.mean_a);
        let shift: Vec<f64> = self.mean_b.iter().zip(&a_ma).map(|(b, am)| b - am).collect();
        let mut inv = Matrix::zeros(d, d);
        for (k, &lam) in self.eig.iter().enumerate() {
            let s = 1.0 / ((1.0 - t) + t * lam);
            for i in 0..d {
                for j in 0..d {
                    inv[(i, j)] += self.vecs[(i, k)] * s * self.vecs[(j, k)];
                }
            }
        }
        let mut out = Matrix::zeros(y.rows(), d);
        let mut rhs = vec![0.0; d];
        for r in 0..y.rows() {
            rhs.iter_mut().zip(y.row(r)).zip(&shift).for_each(|((o, yi), s)| *o = yi - t * s);
            let x = inv.mat_vec(&rhs);
            let ax = self.a.mat_vec(&x);
            let row = out.row_mut(r);
            for k in 0..d {
                row[k] = ax[k] - x[k] + shift[k];
            }
        }
        Ok(out)
    }
}

pub fn gaussian_ot_map(a: &GaussianSpec, b: &GaussianSpec, x: &Matrix) -> Result<Matrix> {
    GaussianOtMap::new(a, b)?.apply(x)
}

/// McCann interpolant between two Gaussians: positions and velocities.
pub fn mccann_interpolant(a: &GaussianSpec, b: &GaussianSpec, x: &Matrix, t: f64) -> Result<(Matrix, Matrix)> {
    GaussianOtMap::new(a, b)?.interpolate(x, t)
}

/// Closed-form optimal paths for `L = ½(‖v‖² − ω₁²x₁² − ω₂²x₂²)` between two
/// Gaussians with equal isotropic covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonicOracle {
    pub spec: HarmonicSpec,
    pub mean_a: [f64; 2],
    pub mean_b: [f64; 2],
}

impl HarmonicOracle {
    pub fn new(spec: HarmonicSpec, mean_a: [f64; 2], mean_b: [f64; 2]) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, mean_a, mean_b })
    }

    /// Coefficients (α, β) with X(t) = α·x + β·Δ, and their time derivatives.
    fn coeffs(w: f64, t: f64) -> (f64, f64, f64, f64) {
        let s = w.sin();
        let alpha = ((w * (1.0 - t)).sin() + (w * t).sin()) / s;
        let beta = (w * t).sin() / s;
        let d_alpha = w * ((w * t).cos() - (w * (1.0 - t)).cos()) / s;
        let d_beta = w * (w * t).cos() / s;
        (alpha, beta, d_alpha, d_beta)
    }

    /// Position and velocity at time `t` of the particle starting at `x`.
    pub fn trajectory(&self, x: [f64; 2], t: f64) -> ([f64; 2], [f64; 2]) {
        let mut pos = [0.0; 2];
        let mut vel = [0.0; 2];
        for (k, w) in self.spec.omegas().into_iter().enumerate() {
            let delta = self.mean_b[k] - self.mean_a[k];
            let (a, b, da, db) = Self::coeffs(w, t);
            pos[k] = a * x[k] + b * delta;
            vel[k] = da * x[k] + db * delta;
        }
        (pos, vel)
    }

    /// Batched trajectories: positions and velocities of each row of `x`.
    pub fn trajectories(&self, x: &Matrix, t: f64) -> Result<(Matrix, Matrix)> {
        if x.cols() != 2 {
            return Err(Error::DimensionMismatch { context: "harmonic oracle", expected: 2, got: x.cols() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        let mut pos = Matrix::zeros(x.rows(), 2);
        let mut vel = Matrix::zeros(x.rows(), 2);
        for i in 0..x.rows() {
            let (p, v) = self.trajectory([x[(i, 0)], x[(i, 1)]], t);
            pos.row_mut(i).copy_from_slice(&p);
            vel.row_mut(i).copy_from_slice(&v);
        }
        Ok((pos, vel))
    }

    /// Eulerian velocity at `(y, t)`: invert the position map, then
    /// differentiate the path.
    pub fn velocity_field(&self, y: &Matrix, t: f64) -> Result<Matrix> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::TimeOutOfRange(t));
        }
        if y.cols() != 2 {
            return Err(Error::DimensionMismatch { context: "harmonic oracle", expected: 2, got: y.cols() });
        }
        let mut out = Matrix::zeros(y.rows(), 2);
        for (k, w) in self.spec.omegas().into_iter().enumerate() {
            let delta = self.mean_b[k] - self.mean_a[k];
            let (a, b, da, db) = Self::coeffs(w, t);
            for i in 0..y.rows() {
                let x = (y[(i, k)] - b * delta) / a;
                out[(i, k)] = da * x + db * delta;
            }
        }
        Ok(out)
    }
}

/// A minimum-cost perfect matching.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `permutation[i]` is the column matched to row i.
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

const UNASSIGNED: usize = usize::MAX;

/// Exact minimum-cost assignment on a square cost matrix.
///
/// Shortest augmenting paths with dual potentials (Jonker–Volgenant
/// family); O(n³) worst case. Large problems start from duals of a solved
/// subsample, which keeps augmenting paths short on geometric costs.
pub fn assignment_min_cost(cost: &Matrix) -> Result<AssignmentResult> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(invalid(format!("cost matrix must be square, got {}x{}", n, cost.cols())));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix"));
    }
    let (col_of_row, _) = solve_assignment(cost);
    let total_cost = (0..n).map(|i| cost[(i, col_of_row[i])]).sum();
    Ok(AssignmentResult { permutation: col_of_row, total_cost })
}

/// Below this size the subsample warm start does not pay for itself.
const WARM_START_MIN: usize = 400;

fn row_min(row: &[f64], v: &[f64]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (j, (c, vj)) in row.iter().zip(v).enumerate() {
        let r = c - vj;
        if r < best.0 {
            best = (r, j);
        }
    }
    best
}

/// Feasible column duals: from every fourth row and column solved exactly,
/// extended to all points by two c-transforms; plain column minima for
/// small problems.
fn initial_column_duals(cost: &Matrix) -> Vec<f64> {
    let n = cost.rows();
    let mut v = vec![f64::INFINITY; n];
    if n < WARM_START_MIN {
        for i in 0..n {
            for (vj, &c) in v.iter_mut().zip(cost.row(i)) {
                *vj = vj.min(c);
            }
        }
        return v;
    }
    let idx: Vec<usize> = (0..n).step_by(4).collect();
    let mut sub = Matrix::zeros(idx.len(), idx.len());
    for (a, &i) in idx.iter().enumerate() {
        let row = cost.row(i);
        sub.row_mut(a).iter_mut().zip(&idx).for_each(|(s, &j)| *s = row[j]);
    }
    let (_, v_sub) = solve_assignment(&sub);
    for i in 0..n {
        let row = cost.row(i);
        let ui = idx.iter().zip(&v_sub).map(|(&j, vj)| row[j] - vj).fold(f64::INFINITY, f64::min);
        for (vj, &c) in v.iter_mut().zip(row) {
            *vj = vj.min(c - ui);
        }
    }
    v
}

/// Optimal `col_of_row` and the final column duals.
fn solve_assignment(cost: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let n = cost.rows();
    if n == 0 {
        return (vec![], vec![]);
    }
    let mut v = initial_column_duals(cost);
    let mut u = vec![0.0; n];
    let mut col_of_row = vec![UNASSIGNED; n];
    let mut row_of_col = vec![UNASSIGNED; n];
    // tight row duals; each row takes its best column if still free
    for i in 0..n {
        let (ui, j) = row_min(cost.row(i), &v);
        u[i] = ui;
        if row_of_col[j] == UNASSIGNED {
            row_of_col[j] = i;
            col_of_row[i] = j;
        }
    }

    let mut shortest = vec![f64::INFINITY; n];
    let mut path = vec![UNASSIGNED; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut scanned_rows: Vec<usize> = Vec::with_capacity(n);
    let mut scanned_cols: Vec<usize> = Vec::with_capacity(n);

    for start in 0..n {
        if col_of_row[start] != UNASSIGNED {
            continue;
        }
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        remaining.clear();
        remaining.extend((0..n).rev());
        scanned_rows.clear();
        scanned_cols.clear();

        let mut min_val = 0.0;
        let mut i = start;
        let sink = loop {
            scanned_rows.push(i);
            let row = cost.row(i);
            let ui = u[i];
            let mut lowest = f64::INFINITY;
            let mut pick = 0usize;
            for (idx, &j) in remaining.iter().enumerate() {
                let r = min_val + row[j] - ui - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                let s = shortest[j];
                if s < lowest || (s == lowest && row_of_col[j] == UNASSIGNED) {
                    lowest = s;
                    pick = idx;
                }
            }
            min_val = lowest;
            let j = remaining.swap_remove(pick);
            scanned_cols.push(j);
            if row_of_col[j] == UNASSIGNED {
                break j;
            }
            i = row_of_col[j];
        };

        u[start] += min_val;
        for &r in &scanned_rows[1..] {
            u[r] += min_val - shortest[col_of_row[r]];
        }
        for &c in &scanned_cols {
            v[c] -= min_val - shortest[c];
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row_of_col[j] = r;
            let prev = std::mem::replace(&mut col_of_row[r], j);
            if r == start {
                break;
            }
            j = prev;
        }
    }

    (col_of_row, v)
}

/// Exact p-Wasserstein distance (p ∈ {1, 2}) between two uniformly weighted
/// point clouds. The larger cloud is subsampled without replacement when
/// the sizes differ.
pub fn empirical_wasserstein(a: &Matrix, b: &Matrix, p: u32, rng: &mut SeededRng) -> Result<f64> {
    Ok(empirical_matching(a, b, p, rng)?.0)
}

/// As [`empirical_wasserstein`], also returning the optimal matching between
/// the (possibly subsampled) clouds.
pub fn empirical_matching(a: &Matrix, b: &Matrix, p: u32, rng: &mut SeededRng) -> Result<(f64, AssignmentResult)> {
    if p != 1 && p != 2 {
        return Err(invalid(format!("wasserstein order must be 1 or 2, got {p}")));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("point cloud"));
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { context: "point clouds", expected: a.cols(), got: b.cols() });
    }
    let n = a.rows().min(b.rows());
    let a = subsample(a, n, rng);
    let b = subsample(b, n, rng);
    let mut cost = Matrix::zeros(n, n);
    for i in 0..n {
        let ai = a.row(i);
        let row = cost.row_mut(i);
        for (j, c) in row.iter_mut().enumerate() {
            let sq: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            *c = if p == 2 { sq } else { sq.sqrt() };
        }
    }
    let plan = assignment_min_cost(&cost)?;
    let mean = plan.total_cost / n as f64;
    let dist = if p == 2 { mean.sqrt() } else { mean };
    Ok((dist, plan))
}

fn subsample(x: &Matrix, n: usize, rng: &mut SeededRng) -> Matrix {
    if x.rows() == n {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    for k in 0..n {
        let pick = k + rng.below(idx.len() - k);
        idx.swap(k, pick);
    }
    idx.truncate(n);
    x.select_rows(&idx)
}
