//! Post-training diagnostics against exact and analytic references.

use serde::Serialize;

use crate::config::{Experiment, RunConfig};
use crate::datasets::DistributionSpec;
use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};
use crate::model::{GeodesicNet, LagrangianSpec, VelocityNet};
use crate::oracles::{bures_w2, empirical_wasserstein, GaussianOtMap, HarmonicOracle};
use crate::rng::SeededRng;

/// An analytic solution to compare learned paths and fields against.
#[derive(Debug, Clone)]
pub enum Reference {
    /// Quadratic cost between Gaussians: McCann interpolation.
    Gaussian(Box<GaussianOtMap>),
    Harmonic(HarmonicOracle),
}

impl Reference {
    /// The reference for a run, if one is known in closed form.
    pub fn for_run(source: &DistributionSpec, target: &DistributionSpec, lag: &LagrangianSpec) -> Result<Option<Self>> {
        let (Some(a), Some(b)) = (source.as_gaussian(), target.as_gaussian()) else {
            return Ok(None);
        };
        match lag {
            LagrangianSpec::Quadratic => Ok(Some(Reference::Gaussian(Box::new(GaussianOtMap::new(a, b)?)))),
            LagrangianSpec::Harmonic { potential } => {
                // closed form holds for equal isotropic covariances
                if a.dim() != 2 || a.cov() != b.cov() || a.cov()[(0, 1)] != 0.0 || a.cov()[(0, 0)] != a.cov()[(1, 1)] {
                    return Ok(None);
                }
                let (ma, mb) = (a.mean(), b.mean());
                Ok(Some(Reference::Harmonic(HarmonicOracle::new(*potential, [ma[0], ma[1]], [mb[0], mb[1]])?)))
            }
        }
    }

    /// Reference positions at time `t` of the particles starting at `z`.
    pub fn positions(&self, z: &Matrix, t: f64) -> Result<Matrix> {
        match self {
            Reference::Gaussian(m) => Ok(m.interpolate(z, t)?.0),
            Reference::Harmonic(h) => Ok(h.trajectories(z, t)?.0),
        }
    }

    /// Reference Eulerian velocity at `(y, t)`.
    pub fn velocity_field(&self, y: &Matrix, t: f64) -> Result<Matrix> {
        match self {
            Reference::Gaussian(m) => m.velocity_field(y, t),
            Reference::Harmonic(h) => h.velocity_field(y, t),
        }
    }
}

fn row_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean over particles of `max_t ‖G(t; z) − X_ref(t; z)‖`.
pub fn mean_max_path_error(g: &GeodesicNet, reference: &Reference, z: &Matrix, times: &[f64]) -> Result<f64> {
    let mut worst = vec![0.0f64; z.rows()];
    for &t in times {
        let learned = g.eval_at(z, t)?;
        let exact = reference.positions(z, t)?;
        for (i, w) in worst.iter_mut().enumerate() {
            *w = w.max(row_dist(learned.row(i), exact.row(i)));
        }
    }
    Ok(worst.iter().sum::<f64>() / z.rows() as f64)
}

/// Root mean squared distance between learned and reference positions over
/// all particles and times.
pub fn path_rmse(g: &GeodesicNet, reference: &Reference, z: &Matrix, times: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for &t in times {
        let learned = g.eval_at(z, t)?;
        let exact = reference.positions(z, t)?;
        acc += learned.sub(&exact).as_slice().iter().map(|x| x * x).sum::<f64>();
    }
    Ok((acc / (z.rows() * times.len()) as f64).sqrt())
}

/// Per-particle relative speed spread `(max_t ‖Ġ‖ − min_t ‖Ġ‖) / mean_t ‖Ġ‖`.
pub fn speed_spreads(g: &GeodesicNet, z: &Matrix, times: &[f64]) -> Result<Vec<f64>> {
    let n = z.rows();
    let mut speeds = vec![Vec::with_capacity(times.len()); n];
    for &t in times {
        let v = g.velocity(z, &vec![t; n])?;
        for (i, s) in speeds.iter_mut().enumerate() {
            s.push(norm2(v.row(i)));
        }
    }
    Ok(speeds
        .iter()
        .map(|s| {
            let (lo, hi) = s.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            if mean > 0.0 {
                (hi - lo) / mean
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean squared error `‖v_η(x, t) − v*(x, t)‖²` over points `x = G(t; z)`,
/// one time per particle.
pub fn velocity_field_mse(
    vn: &VelocityNet,
    g: &GeodesicNet,
    reference: &Reference,
    z: &Matrix,
    times: &[f64],
) -> Result<f64> {
    if times.len() != z.rows() {
        return Err(Error::DimensionMismatch { context: "velocity mse times", expected: z.rows(), got: times.len() });
    }
    let x = g.eval(z, times)?;
    let learned = vn.eval(&x, times)?;
    let mut acc = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let exact = reference.velocity_field(&x.slice_rows(i, i + 1), t)?;
        acc += learned.row(i).iter().zip(exact.row(0)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(acc / z.rows() as f64)
}

/// Path-level diagnostics against an analytic reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeodesicReport {
    pub mean_max_path_error: f64,
    pub path_rmse: f64,
    pub pushforward_mean_at_half: Vec<f64>,
    pub reference_mean_at_half: Vec<f64>,
    pub mean_speed_spread: f64,
}

/// Everything `eval` reports. All fields are finite numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    /// Exact W₁ / W₂ between the pushforward and fresh target samples.
    pub w1: f64,
    pub w2: f64,
    /// Exact W₁ between two independent target draws of the same size.
    pub baseline_w1: f64,
    /// Exact W₂² between source samples and the pushforward.
    pub source_pushforward_w2_sq: f64,
    /// Mean path cost of the learned paths over the run's time grid.
    pub path_cost: f64,
    pub pushforward_mean: Vec<f64>,
    pub pushforward_cov: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bures_w2_sq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geodesic: Option<GeodesicReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity_mse: Option<f64>,
}

/// Samples behind an [`EvalReport`], for independent re-checking.
#[derive(Debug, Clone)]
pub struct EvalSamples {
    pub source: Matrix,
    pub pushforward: Matrix,
    pub target: Matrix,
}

/// Draws `n` fresh samples of each law from `rng` and compares the learned
/// objects with exact references. Image runs pass held-out sets as
/// `source`/`target`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    g: &GeodesicNet,
    vn: Option<&VelocityNet>,
    source: &DistributionSpec,
    target: &DistributionSpec,
    lag: &LagrangianSpec,
    times: &[f64],
    n: usize,
    rng: &mut SeededRng,
) -> Result<(EvalReport, EvalSamples)> {
    let z = source.sample(n, rng)?;
    let y = target.sample(n, rng)?;
    let y2 = target.sample(n, rng)?;
    let pushed = g.eval_at(&z, 1.0)?;
    let w1 = empirical_wasserstein(&pushed, &y, 1, rng)?;
    let w2 = empirical_wasserstein(&pushed, &y, 2, rng)?;
    let baseline_w1 = empirical_wasserstein(&y, &y2, 1, rng)?;
    let source_pushforward_w2_sq = empirical_wasserstein(&z, &pushed, 2, rng)?.powi(2);

    let mut cost = 0.0;
    for &t in times {
        let tt = vec![t; n];
        let v = g.velocity(&z, &tt)?;
        let x = if lag.needs_position() { g.eval(&z, &tt)? } else { Matrix::zeros(n, z.cols()) };
        cost += lag.eval(&x, &v, &tt)?.cost.iter().sum::<f64>();
    }
    let path_cost = cost / (n * times.len()) as f64;

    let bures_w2_sq = match (source.as_gaussian(), target.as_gaussian(), lag) {
        (Some(a), Some(b), LagrangianSpec::Quadratic) => Some(bures_w2(a, b)?),
        _ => None,
    };
    let reference = Reference::for_run(source, target, lag)?;
    let geodesic = match &reference {
        Some(r) => {
            let half = g.eval_at(&z, 0.5)?;
            Some(GeodesicReport {
                mean_max_path_error: mean_max_path_error(g, r, &z, times)?,
                path_rmse: path_rmse(g, r, &z, times)?,
                pushforward_mean_at_half: half.column_means(),
                reference_mean_at_half: r.positions(&z, 0.5)?.column_means(),
                mean_speed_spread: {
                    let s = speed_spreads(g, &z, times)?;
                    s.iter().sum::<f64>() / s.len() as f64
                },
            })
        }
        None => None,
    };
    let velocity_mse = match (&reference, vn) {
        (Some(r), Some(v)) => {
            let u: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            Some(velocity_field_mse(v, g, r, &z, &u)?)
        }
        _ => None,
    };
    let report = EvalReport {
        n,
        w1,
        w2,
        baseline_w1,
        source_pushforward_w2_sq,
        path_cost,
        pushforward_mean: pushed.column_means(),
        pushforward_cov: if n > 1 { pushed.covariance().to_rows() } else { vec![] },
        bures_w2_sq,
        geodesic,
        velocity_mse,
    };
    Ok((report, EvalSamples { source: z, pushforward: pushed, target: y }))
}

/// Held-out laws for evaluation: the test split for image runs, the
/// configured laws otherwise.
pub fn eval_distributions(cfg: &RunConfig, limit: usize) -> Result<(DistributionSpec, DistributionSpec)> {
    match (cfg.experiment, &cfg.mnist) {
        (Experiment::Mnist, Some(m)) => Ok((
            DistributionSpec::ImageSet(m.test_set(m.source_digit, limit)?),
            DistributionSpec::ImageSet(m.test_set(m.target_digit, limit)?),
        )),
        _ => cfg.distributions(),
    }
}
