//! Fully connected Leaky-ReLU networks with hand-written reverse-mode
//! gradients and optional spectral normalization.
//!
//! Layer `j` computes `z = a · Wⱼᵀ / σⱼ + bⱼ` where `σⱼ` is the power-iteration
//! estimate of ‖Wⱼ‖₂ when spectral normalization is on and 1 otherwise.
//! Leaky ReLU follows every layer except the last; the output is multiplied
//! by the learnable scale λ when present.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{gemm, norm2, Matrix};
use crate::rng::SeededRng;

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default = "default_slope")]
    pub lrelu_slope: f64,
    #[serde(default)]
    pub spectral_norm: bool,
    #[serde(default)]
    pub learnable_scale: bool,
}

fn default_slope() -> f64 {
    DEFAULT_SLOPE
}

impl MlpSpec {
    /// Plain network `input → hidden… → output`.
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut layer_sizes = vec![input];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(output);
        Self { layer_sizes, lrelu_slope: DEFAULT_SLOPE, spectral_norm: false, learnable_scale: false }
    }

    /// Spectrally normalized network with a learnable output scale.
    pub fn lipschitz(input: usize, hidden: &[usize], output: usize) -> Self {
        Self { spectral_norm: true, learnable_scale: true, ..Self::new(input, hidden, output) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(invalid("a network needs at least input and output sizes"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(invalid("layer sizes must be positive"));
        }
        if !(self.lrelu_slope > 0.0 && self.lrelu_slope < 1.0) {
            return Err(invalid(format!("leaky relu slope {} not in (0, 1)", self.lrelu_slope)));
        }
        if self.learnable_scale && !self.spectral_norm {
            return Err(invalid("learnable_scale requires spectral_norm"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// `weights[j]` has shape `N_{j+1} × N_j`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// One unit vector in the input space of each layer; empty without
    /// spectral normalization.
    pub power_vecs: Vec<Vec<f64>>,
    pub scale: Option<f64>,
}

impl MlpParams {
    /// Trainable tensors in a fixed order: W₀, b₀, W₁, b₁, …, λ.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b);
        }
        if let Some(s) = &self.scale {
            out.push(std::slice::from_ref(s));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.weights.len() + 1);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b);
        }
        if let Some(s) = &mut self.scale {
            out.push(std::slice::from_mut(s));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// FNV-1a over the bit patterns of every trainable tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for x in t {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Gradients mirroring [`MlpParams`], plus the gradient with respect to the
/// network input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_scale: Option<f64>,
    pub d_input: Matrix,
}

impl GradBundle {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.d_weights.len() + 1);
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.push(w.as_slice());
            out.push(b);
        }
        if let Some(s) = &self.d_scale {
            out.push(std::slice::from_ref(s));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.d_weights.len() + 1);
        for (w, b) in self.d_weights.iter_mut().zip(self.d_biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b);
        }
        if let Some(s) = &mut self.d_scale {
            out.push(std::slice::from_mut(s));
        }
        out
    }

    /// Multiplies every parameter gradient (not `d_input`) by `s`.
    pub fn scale_params(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= s);
        }
    }

    /// Adds the parameter gradients of `other` into `self`.
    pub fn accumulate(&mut self, other: &GradBundle) -> Result<()> {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::DimensionMismatch {
                context: "gradient bundle",
                expected: mine.len(),
                got: theirs.len(),
            });
        }
        for (a, b) in mine.iter_mut().zip(theirs) {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch { context: "gradient tensor", expected: a.len(), got: b.len() });
            }
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input of each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
    sigmas: Vec<f64>,
    /// Last-layer output before the scale λ.
    raw_output: Matrix,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Advances the power iteration once before evaluating.
    Train,
    /// Uses the stored power vectors as they are.
    Eval,
}

#[inline]
pub fn lrelu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

/// One power-iteration round for the top singular value of `w`.
///
/// `u` lives in the input space of `w`. Returns `(σ̂, u')` with
/// `u' = WᵀWu / ‖WᵀWu‖` and `σ̂ = ‖Wu'‖`, which never exceeds ‖W‖₂.
pub fn spectral_power_step(w: &Matrix, u: &[f64]) -> Result<(f64, Vec<f64>)> {
    if u.len() != w.cols() {
        return Err(Error::DimensionMismatch { context: "power vector", expected: w.cols(), got: u.len() });
    }
    let wu = w.mat_vec(u);
    let mut next = w.mat_t_vec(&wu);
    let n = norm2(&next);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroMatrix);
    }
    next.iter_mut().for_each(|x| *x /= n);
    let sigma = norm2(&w.mat_vec(&next));
    Ok((sigma, next))
}

fn random_unit(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let norm = norm2(&v);
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Glorot-uniform weights, zero biases, random unit power vectors, λ = 1.
pub fn mlp_init(spec: &MlpSpec, rng: &mut SeededRng) -> Result<MlpParams> {
    spec.validate()?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut power_vecs = Vec::new();
    for pair in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
        weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
        biases.push(vec![0.0; fan_out]);
    }
    if spec.spectral_norm {
        for pair in spec.layer_sizes.windows(2) {
            power_vecs.push(random_unit(pair[0], rng));
        }
    }
    Ok(MlpParams { weights, biases, power_vecs, scale: spec.learnable_scale.then_some(1.0) })
}

/// A network: architecture, parameters and the seed its weights came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub seed: u64,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        let params = mlp_init(&spec, rng)?;
        Ok(Self { spec, params, seed: rng.seed() })
    }

    pub fn from_parts(spec: MlpSpec, params: MlpParams, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.num_layers();
        let shapes_ok = params.weights.len() == layers
            && params.biases.len() == layers
            && spec.layer_sizes.windows(2).zip(&params.weights).all(|(p, w)| w.shape() == (p[1], p[0]))
            && spec.layer_sizes[1..].iter().zip(&params.biases).all(|(&n, b)| b.len() == n)
            && params.scale.is_some() == spec.learnable_scale
            && if spec.spectral_norm {
                params.power_vecs.len() == layers
                    && spec.layer_sizes.iter().zip(&params.power_vecs).all(|(&n, u)| u.len() == n)
            } else {
                params.power_vecs.is_empty()
            };
        if !shapes_ok {
            return Err(invalid("network parameters do not match the layer sizes"));
        }
        Ok(Self { spec, params, seed })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Sets every weight, bias and the scale to zero.
    pub fn zero_params(&mut self) {
        for t in self.params.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Advances each layer's power vector by one step.
    pub fn power_iterate(&mut self) {
        if !self.spec.spectral_norm {
            return;
        }
        for (w, u) in self.params.weights.iter().zip(self.params.power_vecs.iter_mut()) {
            match spectral_power_step(w, u) {
                Ok((_, next)) => *u = next,
                Err(_) => log::warn!("spectral normalization skipped for an all-zero weight matrix"),
            }
        }
    }

    /// Current normalizer of layer `j`: ‖Wⱼ uⱼ‖, or 1 without spectral
    /// normalization or for an all-zero matrix.
    pub fn sigma(&self, j: usize) -> f64 {
        if !self.spec.spectral_norm {
            return 1.0;
        }
        let s = norm2(&self.params.weights[j].mat_vec(&self.params.power_vecs[j]));
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn affine(&self, j: usize, a: &Matrix, sigma: f64) -> Matrix {
        let w = &self.params.weights[j];
        let mut z = Matrix::zeros(a.rows(), w.rows());
        gemm(1.0 / sigma, a, false, w, true, 0.0, &mut z);
        let b = &self.params.biases[j];
        for i in 0..z.rows() {
            z.row_mut(i).iter_mut().zip(b).for_each(|(zi, bi)| *zi += bi);
        }
        z
    }

    /// Forward pass with frozen power vectors.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let layers = self.spec.num_layers();
        let slope = self.spec.lrelu_slope;
        let sigmas: Vec<f64> = (0..layers).map(|j| self.sigma(j)).collect();
        let mut inputs = Vec::with_capacity(layers);
        let mut a = x.clone();
        for (j, &sigma) in sigmas.iter().enumerate() {
            let mut z = self.affine(j, &a, sigma);
            inputs.push(a);
            if j + 1 < layers {
                z.as_mut_slice().iter_mut().for_each(|v| *v = lrelu(*v, slope));
            }
            a = z;
        }
        let raw_output = a;
        let y = match self.params.scale {
            Some(s) => raw_output.scaled(s),
            None => raw_output.clone(),
        };
        Ok((y, Tape { inputs, sigmas, raw_output }))
    }

    /// Forward pass in the given mode; `Train` advances power iteration first.
    pub fn forward_mode(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Tape)> {
        if mode == Mode::Train {
            self.power_iterate();
        }
        self.forward(x)
    }

    /// Output only.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let layers = self.spec.num_layers();
        let slope = self.spec.lrelu_slope;
        let mut a = x.clone();
        for j in 0..layers {
            let mut z = self.affine(j, &a, self.sigma(j));
            if j + 1 < layers {
                z.as_mut_slice().iter_mut().for_each(|v| *v = lrelu(*v, slope));
            }
            a = z;
        }
        if let Some(s) = self.params.scale {
            a.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        Ok(a)
    }

    /// Reverse-mode gradients of ⟨upstream, y⟩. The spectral normalizers are
    /// treated as constants.
    pub fn backward(&self, tape: &Tape, upstream: &Matrix) -> Result<GradBundle> {
        self.backward_impl(tape, upstream, true)
    }

    /// Gradient with respect to the input only; parameter gradients are left
    /// empty (zero-length) to save the reductions.
    pub fn input_gradient(&self, tape: &Tape, upstream: &Matrix) -> Result<Matrix> {
        Ok(self.backward_impl(tape, upstream, false)?.d_input)
    }

    fn backward_impl(&self, tape: &Tape, upstream: &Matrix, with_params: bool) -> Result<GradBundle> {
        let layers = self.spec.num_layers();
        if tape.inputs.len() != layers || upstream.shape() != tape.raw_output.shape() {
            return Err(Error::DimensionMismatch {
                context: "backward upstream / tape",
                expected: tape.raw_output.cols(),
                got: upstream.cols(),
            });
        }
        let slope = self.spec.lrelu_slope;
        let (mut dz, d_scale) = match self.params.scale {
            Some(s) => {
                let ds = upstream.as_slice().iter().zip(tape.raw_output.as_slice()).map(|(g, y)| g * y).sum::<f64>();
                (upstream.scaled(s), Some(ds))
            }
            None => (upstream.clone(), None),
        };

        let mut d_weights = vec![Matrix::zeros(0, 0); layers];
        let mut d_biases = vec![Vec::new(); layers];
        for j in (0..layers).rev() {
            let a = &tape.inputs[j];
            let w = &self.params.weights[j];
            let inv_sigma = 1.0 / tape.sigmas[j];
            if with_params {
                let mut dw = Matrix::zeros(w.rows(), w.cols());
                gemm(inv_sigma, &dz, true, a, false, 0.0, &mut dw);
                let mut db = vec![0.0; w.rows()];
                for r in dz.iter_rows() {
                    db.iter_mut().zip(r).for_each(|(b, g)| *b += g);
                }
                d_weights[j] = dw;
                d_biases[j] = db;
            }
            let mut da = Matrix::zeros(a.rows(), a.cols());
            gemm(inv_sigma, &dz, false, w, false, 0.0, &mut da);
            if j > 0 {
                // a = lrelu(z) keeps the sign of z, so the mask can be read off a
                da.as_mut_slice().iter_mut().zip(a.as_slice()).for_each(|(g, &act)| {
                    if act < 0.0 {
                        *g *= slope;
                    }
                });
            }
            dz = da;
        }
        if !with_params {
            d_weights.clear();
            d_biases.clear();
        }
        Ok(GradBundle { d_weights, d_biases, d_scale: if with_params { d_scale } else { None }, d_input: dz })
    }

    /// Forward-mode derivative: returns `(y, J·dx)` for per-row tangents `dx`.
    pub fn forward_tangent(&self, x: &Matrix, dx: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        if dx.shape() != x.shape() {
            return Err(Error::DimensionMismatch { context: "tangent", expected: x.cols(), got: dx.cols() });
        }
        let layers = self.spec.num_layers();
        let slope = self.spec.lrelu_slope;
        let mut a = x.clone();
        let mut da = dx.clone();
        for j in 0..layers {
            let sigma = self.sigma(j);
            let mut z = self.affine(j, &a, sigma);
            let mut dz = Matrix::zeros(da.rows(), self.params.weights[j].rows());
            gemm(1.0 / sigma, &da, false, &self.params.weights[j], true, 0.0, &mut dz);
            if j + 1 < layers {
                for (zv, dv) in z.as_mut_slice().iter_mut().zip(dz.as_mut_slice()) {
                    if *zv < 0.0 {
                        *zv *= slope;
                        *dv *= slope;
                    }
                }
            }
            a = z;
            da = dz;
        }
        if let Some(s) = self.params.scale {
            a = a.scaled(s);
            da = da.scaled(s);
        }
        Ok((a, da))
    }
}
