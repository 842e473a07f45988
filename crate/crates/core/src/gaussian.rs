use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, Matrix};
use crate::rng::SeededRng;

/// A multivariate normal law with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: Matrix,
    chol: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianRepr {
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRepr> for GaussianSpec {
    type Error = Error;
    fn try_from(r: GaussianRepr) -> Result<Self> {
        GaussianSpec::new(r.mean, Matrix::from_rows(&r.cov)?)
    }
}

impl From<GaussianSpec> for GaussianRepr {
    fn from(g: GaussianSpec) -> Self {
        GaussianRepr { mean: g.mean, cov: g.cov.to_rows() }
    }
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: Matrix) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Empty("gaussian mean"));
        }
        if cov.shape() != (d, d) {
            return Err(Error::DimensionMismatch { context: "gaussian covariance", expected: d, got: cov.rows() });
        }
        if mean.iter().any(|m| !m.is_finite()) || !cov.is_finite() {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        if cov.asymmetry() > 1e-12 {
            return Err(Error::NotSymmetric(cov.asymmetry()));
        }
        let chol = cholesky(&cov).map_err(|_| invalid("gaussian covariance is not positive definite"))?;
        Ok(Self { mean, cov, chol })
    }

    /// N(mean, s·I)
    pub fn isotropic(mean: Vec<f64>, s: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, Matrix::identity(d).scaled(s))
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0).expect("identity covariance")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    /// One draw written into `out`.
    pub fn draw_into(&self, out: &mut [f64], rng: &mut SeededRng) {
        let d = self.dim();
        let xi: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = self.mean[r];
            for (c, x) in xi.iter().enumerate().take(r + 1) {
                acc += self.chol[(r, c)] * x;
            }
            *o = acc;
        }
    }
}

/// Draws `n` points as `mean + chol·ξ` with ξ standard normal.
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, rng: &mut SeededRng) -> Matrix {
    let mut out = Matrix::zeros(n, spec.dim());
    for i in 0..n {
        spec.draw_into(out.row_mut(i), rng);
    }
    out
}
