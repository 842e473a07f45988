//! Dense row-major matrices and the handful of symmetric-matrix routines the
//! oracles need (Jacobi eigendecomposition, square roots, Cholesky).
//!
//! Batches of points are stored as `Matrix` values with one point per row.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "{:?}", self.row(i))?;
            if i + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        if self.rows > 8 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { context: "matrix data", expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have the same length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { context: "matrix row", expected: cols, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows explicitly
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut c = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut c);
        c
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!(self.shape(), other.shape());
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest |m_ij - m_ji|; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// (M + Mᵀ) / 2
    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        self.add(&t).scaled(0.5)
    }

    /// Mean of the rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.iter_rows() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Unbiased sample covariance of the rows.
    pub fn covariance(&self) -> Matrix {
        let mean = self.column_means();
        let d = self.cols;
        let mut cov = Matrix::zeros(d, d);
        for r in self.iter_rows() {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..=i {
                    cov[(i, j)] += di * (r[j] - mean[j]);
                }
            }
        }
        let denom = (self.rows.saturating_sub(1)).max(1) as f64;
        for i in 0..d {
            for j in 0..=i {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        cov
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch { context: "vstack", expected: self.cols, got: other.cols });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix { rows: end - start, cols: self.cols, data: self.data[start * self.cols..end * self.cols].to_vec() }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn mat_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        self.iter_rows().map(|r| dot(r, v)).collect()
    }

    pub fn mat_t_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.iter_rows().zip(v) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += vi * x;
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// GEMM with fixed blocking.
//
// Output rows are computed in blocks of ROW_BLOCK and reductions over the inner
// dimension in blocks of K_BLOCK, summed in block order. The blocking depends
// only on the shapes, so results are bit-identical for any thread count.

const ROW_BLOCK: usize = 512;
const K_BLOCK: usize = 2048;

static THREADS: AtomicUsize = AtomicUsize::new(1);
static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();

/// Sets the number of worker threads used by batched linear algebra.
/// `1` (the default) runs everything on the calling thread.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::SeqCst);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

fn pool() -> &'static rayon::ThreadPool {
    POOL.get_or_init(|| rayon::ThreadPoolBuilder::new().num_threads(threads()).build().expect("thread pool"))
}

#[derive(Clone, Copy)]
struct Operand<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Operand<'a> {
    fn new(m: &'a Matrix, trans: bool) -> Self {
        let (rs, cs) = if trans { (1, m.cols as isize) } else { (m.cols as isize, 1) };
        Self { data: &m.data, rs, cs }
    }

    fn offset(&self, row: usize, col: usize) -> *const f64 {
        let off = row as isize * self.rs + col as isize * self.cs;
        debug_assert!(off >= 0 && (off as usize) <= self.data.len());
        // SAFETY: callers only request offsets inside the operand's extent.
        unsafe { self.data.as_ptr().offset(off) }
    }
}

#[allow(clippy::too_many_arguments)]
fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Operand<'_>,
    a_row: usize,
    k0: usize,
    b: Operand<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    // SAFETY: the operand views stay within their backing slices for the
    // requested (m, k, n) extents and `c` holds m rows of stride ldc.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.offset(a_row, k0),
            a.rs,
            a.cs,
            b.offset(k0, 0),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `C ← alpha · op(A) · op(B) + beta · C`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    let ao = Operand::new(a, trans_a);
    let bo = Operand::new(b, trans_b);
    let parallel = threads() > 1;

    if k > K_BLOCK {
        // Reduction split: partial products per k-block, summed in order.
        let blocks: Vec<(usize, usize)> = (0..k).step_by(K_BLOCK).map(|s| (s, (s + K_BLOCK).min(k))).collect();
        let partial = |&(s, e): &(usize, usize)| {
            let mut p = vec![0.0; m * n];
            raw_gemm(m, e - s, n, alpha, ao, 0, s, bo, 0.0, &mut p, n);
            p
        };
        let parts: Vec<Vec<f64>> = if parallel {
            pool().install(|| blocks.par_iter().map(partial).collect())
        } else {
            blocks.iter().map(partial).collect()
        };
        for (ci, cv) in c.data.iter_mut().enumerate() {
            let mut acc = if beta == 0.0 { 0.0 } else { beta * *cv };
            for p in &parts {
                acc += p[ci];
            }
            *cv = acc;
        }
        return;
    }

    let block = |(bi, chunk): (usize, &mut [f64])| {
        let rows = chunk.len() / n;
        raw_gemm(rows, k, n, alpha, ao, bi * ROW_BLOCK, 0, bo, beta, chunk, n);
    };
    if parallel && m > ROW_BLOCK {
        pool().install(|| c.data.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block));
    } else {
        c.data.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
}

// ---------------------------------------------------------------------------
// Symmetric matrix routines.

fn check_symmetric(m: &Matrix, tol: f64) -> Result<()> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch { context: "square matrix", expected: m.rows, got: m.cols });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix"));
    }
    let asym = m.asymmetry();
    if asym > tol * m.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues and a matrix whose columns are the matching
/// orthonormal eigenvectors.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_symmetric(m, 1e-10)?;
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[(i, i)]).collect();
    Ok((eig, v))
}

/// V · diag(f(λ)) · Vᵀ
fn spectral_apply(eig: &[f64], vecs: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = eig.len();
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in eig.iter().enumerate() {
        let fl = f(lam);
        for i in 0..n {
            let vik = vecs[(i, k)] * fl;
            for j in 0..n {
                out[(i, j)] += vik * vecs[(j, k)];
            }
        }
    }
    out.symmetrized()
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Eigenvalues in `[-1e-8, 0)` are treated as rounding noise and clamped to 0.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    let (eig, vecs) = sym_eigen(m)?;
    let tol = 1e-8 * m.max_abs().max(1.0);
    if let Some(&bad) = eig.iter().find(|&&l| l < -tol) {
        return Err(Error::NotPsd(bad));
    }
    Ok(spectral_apply(&eig, &vecs, |l| l.max(0.0).sqrt()))
}

/// Inverse principal square root of a symmetric positive definite matrix.
pub fn sym_inv_sqrt(m: &Matrix) -> Result<Matrix> {
    let (eig, vecs) = sym_eigen(m)?;
    let floor = 1e-14 * m.max_abs().max(f64::MIN_POSITIVE);
    if eig.iter().any(|&l| l <= floor) {
        return Err(Error::Singular);
    }
    Ok(spectral_apply(&eig, &vecs, |l| 1.0 / l.sqrt()))
}

/// Lower-triangular Cholesky factor L with L·Lᵀ = m.
pub fn cholesky(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m, 1e-12)?;
    let n = m.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular);
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx_eq(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        a.sub(b).frobenius_norm() <= tol
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i2 = Matrix::identity(2);
        assert!(approx_eq(&sym_sqrt(&i2).unwrap(), &i2, 1e-14));
        let d = Matrix::from_diag(&[4.0, 9.0]);
        let s = sym_sqrt(&d).unwrap();
        assert!(approx_eq(&s, &Matrix::from_diag(&[2.0, 3.0]), 1e-14));
    }

    #[test]
    fn sqrt_trace_of_synthetic_target_covariance() {
        // eigenvalues of [[1.5,.5],[.5,1.5]] are 2 and 1
        let m = Matrix::from_rows(&[[1.5, 0.5], [0.5, 1.5]]).unwrap();
        let s = sym_sqrt(&m).unwrap();
        assert!((s.trace() - (2f64.sqrt() + 1.0)).abs() < 1e-12);
        assert!((s.trace() - 2.414214).abs() < 1e-6);
        assert!(approx_eq(&s.matmul(&s), &m, 1e-12));
    }

    #[test]
    fn sqrt_rejects_asymmetric_and_indefinite() {
        let m = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(sym_sqrt(&m), Err(Error::NotSymmetric(_))));
        let m = Matrix::from_diag(&[1.0, -1e-3]);
        assert!(matches!(sym_sqrt(&m), Err(Error::NotPsd(_))));
        // tiny negative eigenvalue is clamped
        let m = Matrix::from_diag(&[1.0, -1e-12]);
        let s = sym_sqrt(&m).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
    }

    #[test]
    fn cholesky_reproduces_input() {
        let m = Matrix::from_rows(&[[4.0, 2.0, 0.4], [2.0, 3.0, 0.1], [0.4, 0.1, 1.0]]).unwrap();
        let l = cholesky(&m).unwrap();
        assert!(approx_eq(&l.matmul(&l.transpose()), &m, 1e-12));
        assert_eq!(l[(0, 1)], 0.0);
        assert!(matches!(cholesky(&Matrix::from_diag(&[1.0, 0.0])), Err(Error::Singular)));
    }

    #[test]
    fn inv_sqrt_inverts_sqrt() {
        let m = Matrix::from_rows(&[[1.5, 0.5], [0.5, 1.5]]).unwrap();
        let s = sym_sqrt(&m).unwrap();
        let si = sym_inv_sqrt(&m).unwrap();
        assert!(approx_eq(&s.matmul(&si), &Matrix::identity(2), 1e-12));
    }

    #[test]
    fn gemm_transposes_and_blocks() {
        // shapes large enough to hit both the row and the reduction blocking
        let a = Matrix::from_vec(700, 3, (0..2100).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect()).unwrap();
        let b = Matrix::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap();
        let c = a.matmul(&b);
        for i in [0, 511, 512, 699] {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((c[(i, j)] - expect).abs() < 1e-12);
            }
        }
        let x = Matrix::from_vec(3000, 2, (0..6000).map(|i| (i % 17) as f64 * 0.1).collect()).unwrap();
        let mut g = Matrix::zeros(2, 2);
        gemm(1.0, &x, true, &x, false, 0.0, &mut g);
        let direct = x.transpose().iter_rows().map(|r| r.to_vec()).collect::<Vec<_>>();
        let expect00: f64 = direct[0].iter().map(|v| v * v).sum();
        assert!((g[(0, 0)] - expect00).abs() < 1e-8 * expect00);
    }

    #[test]
    fn threaded_gemm_is_bit_identical() {
        let a = Matrix::from_vec(1500, 5, (0..7500).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = Matrix::from_vec(5000, 4, (0..20000).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let w = Matrix::from_vec(5, 7, (0..35).map(|i| i as f64 * 0.01).collect()).unwrap();
        let run = || {
            let fwd = a.matmul(&w);
            let mut red = Matrix::zeros(4, 4);
            gemm(1.0, &b, true, &b, false, 0.0, &mut red);
            (fwd, red)
        };
        let serial = run();
        set_threads(3);
        let par = run();
        set_threads(1);
        assert_eq!(serial.0.as_slice(), par.0.as_slice());
        assert_eq!(serial.1.as_slice(), par.1.as_slice());
    }

    fn random_psd(d: usize, seed: &[f64]) -> Matrix {
        let b = Matrix::from_vec(d, d, seed[..d * d].to_vec()).unwrap();
        // B·Bᵀ plus a rank-deficient direction exercises the clamp
        b.matmul(&b.transpose())
    }

    proptest! {
        #[test]
        fn sqrt_squares_back(d in 1usize..=10, vals in proptest::collection::vec(-2.0f64..2.0, 100)) {
            let m = random_psd(d, &vals);
            let s = sym_sqrt(&m).unwrap();
            prop_assert!(s.asymmetry() < 1e-12);
            prop_assert!(approx_eq(&s.matmul(&s), &m, 1e-8 * m.max_abs().max(1.0)));
        }
    }
}
