//! The three learned objects and the running cost.
//!
//! * [`GeodesicNet`]: particle paths `G(t; z) = z + t·F(z, t)`.
//! * [`CriticNet`]: spectrally normalized test function with output scale λ.
//! * [`VelocityNet`]: Eulerian velocity field `v(x, t)`.
//! * [`LagrangianSpec`]: the cost `L(x, v, t)` integrated along paths.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::nn::{GradBundle, Mlp, MlpSpec, Mode, Tape};
use crate::rng::SeededRng;

pub const DEFAULT_FD_STEP: f64 = 1e-3;

fn with_time(z: &Matrix, times: &[f64]) -> Matrix {
    let (n, d) = z.shape();
    let mut out = Matrix::zeros(n, d + 1);
    for (i, &t) in times.iter().enumerate().take(n) {
        let row = out.row_mut(i);
        row[..d].copy_from_slice(z.row(i));
        row[d] = t;
    }
    out
}

fn check_times(times: &[f64], n: usize) -> Result<()> {
    if times.len() != n {
        return Err(Error::DimensionMismatch { context: "times", expected: n, got: times.len() });
    }
    match times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        Some(&t) => Err(Error::TimeOutOfRange(t)),
        None => Ok(()),
    }
}

/// Finite-difference stencil for dG/dt at one time: evaluation times with
/// their derivative coefficients and the weights that reconstruct G(t).
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub points: Vec<StencilPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilPoint {
    pub time: f64,
    pub deriv_coeff: f64,
    pub pos_weight: f64,
}

impl Stencil {
    /// Central difference inside `[h, 1-h]`, second-order one-sided
    /// differences at the ends of the interval.
    pub fn at(t: f64, h: f64) -> Self {
        let p = |time, deriv_coeff, pos_weight| StencilPoint { time, deriv_coeff, pos_weight };
        let inv = 1.0 / (2.0 * h);
        let points = if t + h > 1.0 {
            vec![p(t, 3.0 * inv, 1.0), p(t - h, -4.0 * inv, 0.0), p(t - 2.0 * h, inv, 0.0)]
        } else if t - h < 0.0 {
            vec![p(t, -3.0 * inv, 1.0), p(t + h, 4.0 * inv, 0.0), p(t + 2.0 * h, -inv, 0.0)]
        } else {
            // G(t) as the midpoint average of the two samples, O(h²)
            vec![p(t + h, inv, 0.5), p(t - h, -inv, 0.5)]
        };
        Self { points }
    }
}

/// `G(t; z) = z + t·F(z, t)` with `F: ℝᵈ × [0,1] → ℝᵈ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicNet {
    pub f: Mlp,
    pub fd_step: f64,
}

impl GeodesicNet {
    pub fn new(dim: usize, hidden: &[usize], fd_step: f64, rng: &mut SeededRng) -> Result<Self> {
        Self::from_mlp(Mlp::new(MlpSpec::new(dim + 1, hidden, dim), rng)?, fd_step)
    }

    pub fn from_mlp(f: Mlp, fd_step: f64) -> Result<Self> {
        if f.input_dim() != f.output_dim() + 1 {
            return Err(invalid(format!(
                "geodesic network must map d+1 -> d, got {} -> {}",
                f.input_dim(),
                f.output_dim()
            )));
        }
        if !(fd_step > 0.0 && fd_step < 0.1) {
            return Err(invalid(format!("finite-difference step {fd_step} not in (0, 0.1)")));
        }
        Ok(Self { f, fd_step })
    }

    pub fn dim(&self) -> usize {
        self.f.output_dim()
    }

    fn check_z(&self, z: &Matrix) -> Result<()> {
        if z.cols() != self.dim() {
            return Err(Error::DimensionMismatch { context: "geodesic input", expected: self.dim(), got: z.cols() });
        }
        Ok(())
    }

    /// Positions `G(tᵢ; zᵢ)`, one time per row.
    pub fn eval(&self, z: &Matrix, times: &[f64]) -> Result<Matrix> {
        self.check_z(z)?;
        check_times(times, z.rows())?;
        let f = self.f.predict(&with_time(z, times))?;
        let mut out = z.clone();
        for (i, &t) in times.iter().enumerate() {
            out.row_mut(i).iter_mut().zip(f.row(i)).for_each(|(x, fx)| *x += t * fx);
        }
        Ok(out)
    }

    /// Positions at a common time.
    pub fn eval_at(&self, z: &Matrix, t: f64) -> Result<Matrix> {
        self.eval(z, &vec![t; z.rows()])
    }

    /// dG/dt by finite differences (the path used in training).
    pub fn velocity(&self, z: &Matrix, times: &[f64]) -> Result<Matrix> {
        Ok(PathBatch::new(self, z, times, None)?.velocities())
    }

    /// Exact dG/dt = F + t·∂F/∂t via tangent propagation.
    pub fn velocity_exact(&self, z: &Matrix, times: &[f64]) -> Result<Matrix> {
        self.check_z(z)?;
        check_times(times, z.rows())?;
        let d = self.dim();
        let x = with_time(z, times);
        let mut dx = Matrix::zeros(z.rows(), d + 1);
        for i in 0..z.rows() {
            dx[(i, d)] = 1.0;
        }
        let (f, df) = self.f.forward_tangent(&x, &dx)?;
        let mut out = f;
        for (i, &t) in times.iter().enumerate() {
            out.row_mut(i).iter_mut().zip(df.row(i)).for_each(|(v, dv)| *v += t * dv);
        }
        Ok(out)
    }
}

/// One batched evaluation of F over every stencil point of a set of
/// (particle, time) pairs, optionally with the endpoints `G(1; z)` appended.
/// Keeps the tape so the whole batch backpropagates in a single pass.
pub struct PathBatch {
    z: Matrix,
    end_z: Option<Matrix>,
    times: Vec<f64>,
    stencils: Vec<Stencil>,
    starts: Vec<usize>,
    endpoint_start: Option<usize>,
    f_out: Matrix,
    tape: Tape,
}

impl PathBatch {
    /// `z` and `times` are paired row by row; `endpoints` lists the particles
    /// whose `G(1; ·)` is evaluated alongside.
    pub fn new(g: &GeodesicNet, z: &Matrix, times: &[f64], endpoints: Option<&Matrix>) -> Result<Self> {
        g.check_z(z)?;
        check_times(times, z.rows())?;
        let d = g.dim();
        let stencils: Vec<Stencil> = times.iter().map(|&t| Stencil::at(t, g.fd_step)).collect();
        let mut starts = Vec::with_capacity(times.len());
        let mut total = 0;
        for s in &stencils {
            starts.push(total);
            total += s.points.len();
        }
        if let Some(e) = endpoints {
            g.check_z(e)?;
        }
        let endpoint_start = endpoints.map(|_| total);
        total += endpoints.map_or(0, Matrix::rows);
        let mut input = Matrix::zeros(total, d + 1);
        for (p, s) in stencils.iter().enumerate() {
            for (k, pt) in s.points.iter().enumerate() {
                let row = input.row_mut(starts[p] + k);
                row[..d].copy_from_slice(z.row(p));
                row[d] = pt.time;
            }
        }
        if let (Some(e), Some(ez)) = (endpoint_start, endpoints) {
            for i in 0..ez.rows() {
                let row = input.row_mut(e + i);
                row[..d].copy_from_slice(ez.row(i));
                row[d] = 1.0;
            }
        }
        let (f_out, tape) = g.f.forward(&input)?;
        Ok(Self {
            z: z.clone(),
            end_z: endpoints.cloned(),
            times: times.to_vec(),
            stencils,
            starts,
            endpoint_start,
            f_out,
            tape,
        })
    }

    /// Grid layout: every particle at every time, time-major
    /// (row `j·n + i` is particle i at time j).
    pub fn grid(g: &GeodesicNet, z: &Matrix, times: &[f64], endpoints: bool) -> Result<Self> {
        let n = z.rows();
        let idx: Vec<usize> = (0..times.len()).flat_map(|_| 0..n).collect();
        let t: Vec<f64> = times.iter().flat_map(|&t| std::iter::repeat_n(t, n)).collect();
        Self::new(g, &z.select_rows(&idx), &t, endpoints.then_some(z))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Σₖ cₖ·G(tₖ; z); the z terms cancel because the coefficients sum to 0.
    pub fn velocities(&self) -> Matrix {
        let d = self.z.cols();
        let mut v = Matrix::zeros(self.len(), d);
        for (p, s) in self.stencils.iter().enumerate() {
            let out = v.row_mut(p);
            for (k, pt) in s.points.iter().enumerate() {
                let c = pt.deriv_coeff * pt.time;
                out.iter_mut().zip(self.f_out.row(self.starts[p] + k)).for_each(|(o, f)| *o += c * f);
            }
        }
        v
    }

    /// G(t; z) at each pair's own time, reconstructed from the stencil.
    pub fn positions(&self) -> Matrix {
        let mut x = self.z.clone();
        for (p, s) in self.stencils.iter().enumerate() {
            let out = x.row_mut(p);
            for (k, pt) in s.points.iter().enumerate() {
                if pt.pos_weight == 0.0 {
                    continue;
                }
                let c = pt.pos_weight * pt.time;
                out.iter_mut().zip(self.f_out.row(self.starts[p] + k)).for_each(|(o, f)| *o += c * f);
            }
        }
        x
    }

    /// `G(1; z)` for the endpoint particles.
    pub fn endpoints(&self) -> Option<Matrix> {
        let e = self.endpoint_start?;
        let mut out = self.end_z.clone()?;
        for i in 0..out.rows() {
            out.row_mut(i).iter_mut().zip(self.f_out.row(e + i)).for_each(|(o, f)| *o += f);
        }
        Some(out)
    }

    /// Parameter gradients of a loss given its partials with respect to the
    /// velocities, positions (optional) and endpoints (optional).
    pub fn backward(
        &self,
        g: &GeodesicNet,
        d_vel: &Matrix,
        d_pos: Option<&Matrix>,
        d_end: Option<&Matrix>,
    ) -> Result<GradBundle> {
        let d = self.z.cols();
        if d_vel.shape() != (self.len(), d) {
            return Err(Error::DimensionMismatch {
                context: "velocity gradient",
                expected: self.len(),
                got: d_vel.rows(),
            });
        }
        let mut up = Matrix::zeros(self.f_out.rows(), d);
        for (p, s) in self.stencils.iter().enumerate() {
            for (k, pt) in s.points.iter().enumerate() {
                let row = up.row_mut(self.starts[p] + k);
                let cv = pt.deriv_coeff * pt.time;
                row.iter_mut().zip(d_vel.row(p)).for_each(|(u, g)| *u += cv * g);
                if let Some(dp) = d_pos {
                    if pt.pos_weight != 0.0 {
                        let cp = pt.pos_weight * pt.time;
                        row.iter_mut().zip(dp.row(p)).for_each(|(u, g)| *u += cp * g);
                    }
                }
            }
        }
        if let (Some(e), Some(de)) = (self.endpoint_start, d_end) {
            for i in 0..de.rows() {
                up.row_mut(e + i).copy_from_slice(de.row(i));
            }
        }
        g.f.backward(&self.tape, &up)
    }
}

/// The critic φ = λ·h̃ with h̃ spectrally normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub phi: Mlp,
}

impl CriticNet {
    pub fn new(dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        Self::from_mlp(Mlp::new(MlpSpec::lipschitz(dim, hidden, 1), rng)?)
    }

    pub fn from_mlp(phi: Mlp) -> Result<Self> {
        if !phi.spec.spectral_norm || !phi.spec.learnable_scale || phi.output_dim() != 1 {
            return Err(invalid("critic must be spectrally normalized, scaled and scalar-valued"));
        }
        Ok(Self { phi })
    }

    pub fn dim(&self) -> usize {
        self.phi.input_dim()
    }

    pub fn scale(&self) -> f64 {
        self.phi.params.scale.unwrap_or(1.0)
    }

    pub fn eval(&mut self, x: &Matrix, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.phi.forward_mode(x, mode)?.0.into_vec())
    }

    /// Evaluation with frozen power vectors.
    pub fn eval_frozen(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.phi.predict(x)?.into_vec())
    }
}

/// Eulerian velocity field `v(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub v: Mlp,
}

impl VelocityNet {
    pub fn new(dim: usize, hidden: &[usize], rng: &mut SeededRng) -> Result<Self> {
        Self::from_mlp(Mlp::new(MlpSpec::new(dim + 1, hidden, dim), rng)?)
    }

    pub fn from_mlp(v: Mlp) -> Result<Self> {
        if v.input_dim() != v.output_dim() + 1 {
            return Err(invalid("velocity network must map d+1 -> d"));
        }
        Ok(Self { v })
    }

    pub fn dim(&self) -> usize {
        self.v.output_dim()
    }

    pub fn eval(&self, x: &Matrix, times: &[f64]) -> Result<Matrix> {
        self.forward(x, times).map(|(y, _)| y)
    }

    pub fn forward(&self, x: &Matrix, times: &[f64]) -> Result<(Matrix, Tape)> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch { context: "velocity input", expected: self.dim(), got: x.cols() });
        }
        check_times(times, x.rows())?;
        self.v.forward(&with_time(x, times))
    }
}

/// Harmonic potential frequencies, `V(x) = ½(ω₁²x₁² + ω₂²x₂²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicSpec {
    pub omega1: f64,
    pub omega2: f64,
}

impl HarmonicSpec {
    pub fn new(omega1: f64, omega2: f64) -> Result<Self> {
        let s = Self { omega1, omega2 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w > 0.0 && w < std::f64::consts::PI;
        if ok(self.omega1) && ok(self.omega2) {
            Ok(())
        } else {
            Err(invalid(format!("harmonic frequencies ({}, {}) must lie in (0, pi)", self.omega1, self.omega2)))
        }
    }

    pub fn omegas(&self) -> [f64; 2] {
        [self.omega1, self.omega2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LagrangianSpec {
    /// `L = ‖v‖²`
    Quadratic,
    /// `L = ½(‖v‖² − ω₁²x₁² − ω₂²x₂²)`
    Harmonic {
        #[serde(flatten)]
        potential: HarmonicSpec,
    },
}

/// Costs per row with their partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianEval {
    pub cost: Vec<f64>,
    pub d_v: Matrix,
    pub d_x: Matrix,
}

impl LagrangianSpec {
    pub fn needs_position(&self) -> bool {
        !matches!(self, LagrangianSpec::Quadratic)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            LagrangianSpec::Quadratic => Ok(()),
            LagrangianSpec::Harmonic { potential } => {
                potential.validate()?;
                if dim != 2 {
                    return Err(invalid("the harmonic Lagrangian is two-dimensional"));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, x: &Matrix, v: &Matrix, _times: &[f64]) -> Result<LagrangianEval> {
        if x.shape() != v.shape() {
            return Err(Error::DimensionMismatch { context: "lagrangian x/v", expected: v.cols(), got: x.cols() });
        }
        let n = v.rows();
        let mut cost = Vec::with_capacity(n);
        match self {
            LagrangianSpec::Quadratic => {
                for r in v.iter_rows() {
                    cost.push(r.iter().map(|a| a * a).sum());
                }
                Ok(LagrangianEval { cost, d_v: v.scaled(2.0), d_x: Matrix::zeros(x.rows(), x.cols()) })
            }
            LagrangianSpec::Harmonic { potential } => {
                self.validate(v.cols())?;
                let w2 = potential.omegas().map(|w| w * w);
                let mut d_x = Matrix::zeros(x.rows(), x.cols());
                for i in 0..n {
                    let (xr, vr) = (x.row(i), v.row(i));
                    let kinetic: f64 = vr.iter().map(|a| a * a).sum();
                    let pot = w2[0] * xr[0] * xr[0] + w2[1] * xr[1] * xr[1];
                    cost.push(0.5 * (kinetic - pot));
                    d_x[(i, 0)] = -w2[0] * xr[0];
                    d_x[(i, 1)] = -w2[1] * xr[1];
                }
                Ok(LagrangianEval { cost, d_v: v.clone(), d_x })
            }
        }
    }
}
