//! Adversarial geodesic training (phase 1) and velocity regression (phase 2).

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::DistributionSpec;
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::model::{CriticNet, GeodesicNet, LagrangianSpec, PathBatch, VelocityNet};
use crate::nn::Mode;
use crate::optim::RmspropState;
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// `m` equally spaced times `k/m`, k = 1..m.
    Grid,
    /// `m` iid U(0,1) draws per step.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub m: usize,
    pub time_mode: TimeMode,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_velocity: f64,
    /// Rate for the critic's output scale λ; `lr_critic` when absent.
    pub lr_scale: Option<f64>,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub iters_phase1: usize,
    pub iters_phase2: usize,
    pub critic_steps_per_actor: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub fresh_samples_phase2: bool,
    /// Record elapsed wall time in the metrics. Off by default so that the
    /// metrics stream is a pure function of the config.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 256,
            m: 10,
            time_mode: TimeMode::Grid,
            lr_actor: 5e-5,
            lr_critic: 5e-5,
            lr_velocity: 5e-5,
            lr_scale: None,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            iters_phase1: 20_000,
            iters_phase2: 5_000,
            critic_steps_per_actor: 1,
            seed: 0,
            fd_step: crate::model::DEFAULT_FD_STEP,
            fresh_samples_phase2: true,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.n == 0 || self.m == 0 {
            return bad("n and m must be at least 1");
        }
        let lrs = [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_velocity", self.lr_velocity),
            ("lr_scale", self.lr_scale.unwrap_or(self.lr_critic)),
        ];
        for (name, lr) in lrs {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.rms_decay > 0.0 && self.rms_decay < 1.0) {
            return bad("rms_decay must lie in (0, 1)");
        }
        if self.rms_eps <= 0.0 || !self.rms_eps.is_finite() {
            return bad("rms_eps must be positive");
        }
        if self.critic_steps_per_actor == 0 {
            return bad("critic_steps_per_actor must be at least 1");
        }
        if !(self.fd_step > 0.0 && self.fd_step < 0.1) {
            return bad("fd_step must lie in (0, 0.1)");
        }
        Ok(())
    }

    pub fn grid_times(&self) -> Vec<f64> {
        (1..=self.m).map(|k| k as f64 / self.m as f64).collect()
    }

    fn times(&self, rng: &mut SeededRng) -> Vec<f64> {
        match self.time_mode {
            TimeMode::Grid => self.grid_times(),
            TimeMode::Uniform => (0..self.m).map(|_| rng.uniform()).collect(),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    /// Mean path cost (the first term of the actor loss).
    pub cost_estimate: f64,
    /// Critic objective; absent in phase 2 where the critic is frozen.
    pub critic_gap: Option<f64>,
    /// Critic output scale λ; absent in phase 2.
    pub scale_lambda: Option<f64>,
    pub phase2_mse: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "iteration,cost_estimate,critic_gap,scale_lambda,phase2_mse,wall_ms";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            self.cost_estimate,
            opt(self.critic_gap),
            opt(self.scale_lambda),
            opt(self.phase2_mse),
            self.wall_ms
        )
    }
}

pub fn write_metrics_csv<W: Write>(mut w: W, records: &[MetricsRecord], header: bool) -> Result<()> {
    if header {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn parse_field(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| invalid(format!("metrics line {line}: bad number {s:?}")))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(invalid("metrics csv: missing or wrong header"));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(invalid(format!("metrics line {}: expected 6 fields", k + 2)));
            }
            let req =
                |s: &str| parse_field(s, k + 2)?.ok_or_else(|| invalid(format!("metrics line {}: empty field", k + 2)));
            Ok(MetricsRecord {
                iteration: f[0].parse().map_err(|_| invalid("metrics: bad iteration"))?,
                cost_estimate: req(f[1])?,
                critic_gap: parse_field(f[2], k + 2)?,
                scale_lambda: parse_field(f[3], k + 2)?,
                phase2_mse: parse_field(f[4], k + 2)?,
                wall_ms: f[5].parse().map_err(|_| invalid("metrics: bad wall_ms"))?,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ensure_finite(x: f64, iteration: usize, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Diverged { iteration, what })
    }
}

/// Hyperparameters of one RMSprop optimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSize {
    pub lr: f64,
    /// Rate for an output scale parameter, if the network has one.
    pub scale_lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl StepSize {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        Self { lr, scale_lr: lr, decay, eps }
    }
}

/// One critic ascent step on ℓ_ω = mean φ(G(1;Z)) − mean φ(Y). Returns ℓ_ω
/// before the update.
pub fn critic_step(
    g: &GeodesicNet,
    c: &mut CriticNet,
    z: &Matrix,
    y: &Matrix,
    opt: &mut RmspropState,
    step: StepSize,
) -> Result<f64> {
    if z.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("critic batch"));
    }
    let pushed = g.eval_at(z, 1.0)?;
    let (n, k) = (pushed.rows(), y.rows());
    let (out, tape) = c.phi.forward_mode(&pushed.vstack(y)?, Mode::Train)?;
    let vals = out.as_slice();
    let gap = mean(&vals[..n]) - mean(&vals[n..]);
    // ascend ℓ_ω by descending −ℓ_ω
    let mut up = vec![-1.0 / n as f64; n];
    up.extend(std::iter::repeat_n(1.0 / k as f64, k));
    let grads = c.phi.backward(&tape, &Matrix::from_vec(n + k, 1, up)?)?;
    opt.update_with_scale_lr(&mut c.phi.params, &grads, step.lr, step.scale_lr, step.decay, step.eps)?;
    Ok(gap)
}

/// What one actor step measured, before its update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStepOut {
    pub cost_estimate: f64,
    pub critic_term: f64,
}

impl ActorStepOut {
    pub fn loss(&self) -> f64 {
        self.cost_estimate + self.critic_term
    }
}

/// One actor descent step on ℓ_θ = mean path cost + mean φ(G(1;Z)), with
/// every particle evaluated at every time in `times`. The critic is frozen.
pub fn actor_step(
    g: &mut GeodesicNet,
    c: &CriticNet,
    lag: &LagrangianSpec,
    z: &Matrix,
    times: &[f64],
    opt: &mut RmspropState,
    step: StepSize,
) -> Result<ActorStepOut> {
    let n = z.rows();
    if n == 0 || times.is_empty() {
        return Err(Error::Empty("actor batch"));
    }
    let batch = PathBatch::grid(g, z, times, true)?;
    let v = batch.velocities();
    let x = if lag.needs_position() { batch.positions() } else { Matrix::zeros(v.rows(), v.cols()) };
    let le = lag.eval(&x, &v, batch.times())?;
    let cost_estimate = mean(&le.cost);
    let inv = 1.0 / batch.len() as f64;
    let d_v = le.d_v.scaled(inv);
    let d_x = lag.needs_position().then(|| le.d_x.scaled(inv));

    let end = batch.endpoints().expect("grid batch built with endpoints");
    let (phi, tape) = c.phi.forward(&end)?;
    let critic_term = mean(phi.as_slice());
    let d_end = c.phi.input_gradient(&tape, &Matrix::from_vec(n, 1, vec![1.0 / n as f64; n])?)?;

    let grads = batch.backward(g, &d_v, d_x.as_ref(), Some(&d_end))?;
    opt.update(&mut g.f.params, &grads, step.lr, step.decay, step.eps)?;
    Ok(ActorStepOut { cost_estimate, critic_term })
}

// Labels for the data substreams.
const CRITIC_SOURCE: u64 = 0;
const CRITIC_TARGET: u64 = 1;
const ACTOR_SOURCE: u64 = 2;
const PHASE2_SOURCE: u64 = 3;

/// Weight-init streams for the three networks.
pub fn weight_rngs(seed: u64) -> [SeededRng; 3] {
    let w = SeededRng::new(seed).substream(Stream::Weights);
    [w.derive(0), w.derive(1), w.derive(2)]
}

/// Phase-1 state: both networks, their optimizers and the sample streams.
#[derive(Debug, Clone)]
pub struct GeodesicTrainer {
    pub geodesic: GeodesicNet,
    pub critic: CriticNet,
    pub cfg: TrainConfig,
    source: DistributionSpec,
    target: DistributionSpec,
    lag: LagrangianSpec,
    actor_opt: RmspropState,
    critic_opt: RmspropState,
    critic_z: SeededRng,
    critic_y: SeededRng,
    actor_z: SeededRng,
    time_rng: SeededRng,
    iteration: usize,
    started: Instant,
}

impl GeodesicTrainer {
    pub fn new(
        cfg: TrainConfig,
        source: DistributionSpec,
        target: DistributionSpec,
        lag: LagrangianSpec,
        geodesic: GeodesicNet,
        critic: CriticNet,
    ) -> Result<Self> {
        cfg.validate()?;
        source.validate()?;
        target.validate()?;
        let d = source.dim();
        if target.dim() != d || geodesic.dim() != d || critic.dim() != d {
            return Err(Error::DimensionMismatch {
                context: "source/target/network dimensions",
                expected: d,
                got: target.dim().max(geodesic.dim()).max(critic.dim()),
            });
        }
        lag.validate(d)?;
        let data = SeededRng::new(cfg.seed).substream(Stream::Data);
        let time = SeededRng::new(cfg.seed).substream(Stream::Time);
        Ok(Self {
            actor_opt: RmspropState::new(&geodesic.f.params),
            critic_opt: RmspropState::new(&critic.phi.params),
            critic_z: data.derive(CRITIC_SOURCE),
            critic_y: data.derive(CRITIC_TARGET),
            actor_z: data.derive(ACTOR_SOURCE),
            time_rng: time.derive(0),
            geodesic,
            critic,
            cfg,
            source,
            target,
            lag,
            iteration: 0,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn step_size(&self, lr: f64) -> StepSize {
        StepSize::new(lr, self.cfg.rms_decay, self.cfg.rms_eps)
    }

    /// One round: `critic_steps_per_actor` critic steps, then one actor step.
    /// A round that produces a non-finite value is rolled back and reported
    /// as [`Error::Diverged`].
    pub fn round(&mut self) -> Result<MetricsRecord> {
        let saved = (self.geodesic.clone(), self.critic.clone());
        let out = self.round_inner();
        if out.is_err() {
            (self.geodesic, self.critic) = saved;
        }
        out
    }

    fn round_inner(&mut self) -> Result<MetricsRecord> {
        let it = self.iteration + 1;
        let n = self.cfg.n;
        let mut gap = 0.0;
        for _ in 0..self.cfg.critic_steps_per_actor {
            let z = self.source.sample(n, &mut self.critic_z)?;
            let y = self.target.sample(n, &mut self.critic_y)?;
            let step = StepSize {
                scale_lr: self.cfg.lr_scale.unwrap_or(self.cfg.lr_critic),
                ..self.step_size(self.cfg.lr_critic)
            };
            gap = critic_step(&self.geodesic, &mut self.critic, &z, &y, &mut self.critic_opt, step)?;
        }
        let z = self.source.sample(n, &mut self.actor_z)?;
        let times = self.cfg.times(&mut self.time_rng);
        let step = self.step_size(self.cfg.lr_actor);
        let out = actor_step(&mut self.geodesic, &self.critic, &self.lag, &z, &times, &mut self.actor_opt, step)?;
        ensure_finite(gap, it, "critic gap")?;
        ensure_finite(out.loss(), it, "actor loss")?;
        if !self.geodesic.f.params.is_finite() {
            return Err(Error::Diverged { iteration: it, what: "geodesic parameters" });
        }
        if !self.critic.phi.params.is_finite() {
            return Err(Error::Diverged { iteration: it, what: "critic parameters" });
        }
        self.iteration = it;
        Ok(MetricsRecord {
            iteration: it,
            cost_estimate: out.cost_estimate,
            critic_gap: Some(gap),
            scale_lambda: Some(self.critic.scale()),
            phase2_mse: None,
            wall_ms: self.wall_ms(),
        })
    }

    fn wall_ms(&self) -> u64 {
        if self.cfg.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    /// Runs `rounds` rounds, handing each record to `sink`. On divergence the
    /// networks hold the state reached so far.
    pub fn run(&mut self, rounds: usize, mut sink: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let r = self.round()?;
            sink(&r);
            out.push(r);
        }
        Ok(out)
    }

    pub fn into_nets(self) -> (GeodesicNet, CriticNet) {
        (self.geodesic, self.critic)
    }
}

/// Hidden-layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetWidths {
    pub geodesic: Vec<usize>,
    pub critic: Vec<usize>,
    pub velocity: Vec<usize>,
}

impl NetWidths {
    pub fn uniform(width: usize) -> Self {
        Self { geodesic: vec![width; 3], critic: vec![width; 3], velocity: vec![width; 3] }
    }

    /// 128 units per hidden layer up to d = 10, 256 beyond.
    pub fn for_dim(d: usize) -> Self {
        Self::uniform(if d <= 10 { 128 } else { 256 })
    }
}

impl Default for NetWidths {
    fn default() -> Self {
        Self::uniform(128)
    }
}

/// Freshly initialized geodesic and critic networks for dimension `d`.
pub fn init_phase1_nets(cfg: &TrainConfig, d: usize, widths: &NetWidths) -> Result<(GeodesicNet, CriticNet)> {
    let [mut wg, mut wc, _] = weight_rngs(cfg.seed);
    Ok((GeodesicNet::new(d, &widths.geodesic, cfg.fd_step, &mut wg)?, CriticNet::new(d, &widths.critic, &mut wc)?))
}

pub fn init_velocity_net(cfg: &TrainConfig, d: usize, widths: &NetWidths) -> Result<VelocityNet> {
    let [_, _, mut wv] = weight_rngs(cfg.seed);
    VelocityNet::new(d, &widths.velocity, &mut wv)
}

/// Phase 1 from scratch: returns the trained networks and one record per round.
pub fn train_geodesic(
    cfg: &TrainConfig,
    rho_a: &DistributionSpec,
    rho_b: &DistributionSpec,
    lag: &LagrangianSpec,
    widths: &NetWidths,
) -> Result<(GeodesicNet, CriticNet, Vec<MetricsRecord>)> {
    let (g, c) = init_phase1_nets(cfg, rho_a.dim(), widths)?;
    let mut t = GeodesicTrainer::new(cfg.clone(), rho_a.clone(), rho_b.clone(), *lag, g, c)?;
    let metrics = t.run(cfg.iters_phase1, |_| {})?;
    let (g, c) = t.into_nets();
    Ok((g, c, metrics))
}

/// Phase-2 regression targets: positions G(t; z) and finite-difference
/// velocities dG/dt for every particle at every time (time-major).
pub fn velocity_targets(g: &GeodesicNet, z: &Matrix, times: &[f64]) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let batch = PathBatch::grid(g, z, times, false)?;
    let t = batch.times().to_vec();
    let n = z.rows();
    let idx: Vec<usize> = (0..times.len()).flat_map(|_| 0..n).collect();
    let x = g.eval(&z.select_rows(&idx), &t)?;
    Ok((x, t, batch.velocities()))
}

/// Phase-2 state: the frozen geodesic and the velocity network being fit.
#[derive(Debug, Clone)]
pub struct VelocityTrainer {
    pub velocity: VelocityNet,
    pub cfg: TrainConfig,
    geodesic: GeodesicNet,
    source: DistributionSpec,
    lag: LagrangianSpec,
    opt: RmspropState,
    z_rng: SeededRng,
    time_rng: SeededRng,
    iteration: usize,
    started: Instant,
}

impl VelocityTrainer {
    /// `first_iteration` continues the numbering of an earlier phase-1 log.
    pub fn new(
        cfg: TrainConfig,
        geodesic: GeodesicNet,
        velocity: VelocityNet,
        source: DistributionSpec,
        lag: LagrangianSpec,
        first_iteration: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        source.validate()?;
        if geodesic.dim() != source.dim() || velocity.dim() != source.dim() {
            return Err(Error::DimensionMismatch {
                context: "phase-2 dimensions",
                expected: source.dim(),
                got: velocity.dim(),
            });
        }
        lag.validate(source.dim())?;
        let data = SeededRng::new(cfg.seed).substream(Stream::Data);
        let time = SeededRng::new(cfg.seed).substream(Stream::Time);
        // without fresh samples, replay the particle and time draws phase 1's
        // actor steps used
        let (z_rng, time_rng) = if cfg.fresh_samples_phase2 {
            (data.derive(PHASE2_SOURCE), time.derive(1))
        } else {
            (data.derive(ACTOR_SOURCE), time.derive(0))
        };
        Ok(Self {
            opt: RmspropState::new(&velocity.v.params),
            velocity,
            cfg,
            geodesic,
            source,
            lag,
            z_rng,
            time_rng,
            iteration: first_iteration,
            started: Instant::now(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One regression step; rolled back if it produces a non-finite value.
    pub fn round(&mut self) -> Result<MetricsRecord> {
        let saved = self.velocity.clone();
        let out = self.round_inner();
        if out.is_err() {
            self.velocity = saved;
        }
        out
    }

    fn round_inner(&mut self) -> Result<MetricsRecord> {
        let it = self.iteration + 1;
        let z = self.source.sample(self.cfg.n, &mut self.z_rng)?;
        let times = self.cfg.times(&mut self.time_rng);
        let (x, t, target) = velocity_targets(&self.geodesic, &z, &times)?;
        let (pred, tape) = self.velocity.forward(&x, &t)?;
        let resid = pred.sub(&target);
        let rows = resid.rows() as f64;
        let mse = resid.as_slice().iter().map(|r| r * r).sum::<f64>() / rows;
        let grads = self.velocity.v.backward(&tape, &resid.scaled(2.0 / rows))?;
        self.opt.update(
            &mut self.velocity.v.params,
            &grads,
            self.cfg.lr_velocity,
            self.cfg.rms_decay,
            self.cfg.rms_eps,
        )?;
        ensure_finite(mse, it, "velocity loss")?;
        if !self.velocity.v.params.is_finite() {
            return Err(Error::Diverged { iteration: it, what: "velocity parameters" });
        }
        let lag_cost = self.lag.eval(
            &if self.lag.needs_position() { x } else { Matrix::zeros(target.rows(), target.cols()) },
            &target,
            &t,
        )?;
        self.iteration = it;
        Ok(MetricsRecord {
            iteration: it,
            cost_estimate: mean(&lag_cost.cost),
            critic_gap: None,
            scale_lambda: None,
            phase2_mse: Some(mse),
            wall_ms: if self.cfg.record_wall_time { self.started.elapsed().as_millis() as u64 } else { 0 },
        })
    }

    pub fn run(&mut self, rounds: usize, mut sink: impl FnMut(&MetricsRecord)) -> Result<Vec<MetricsRecord>> {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let r = self.round()?;
            sink(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Phase 2: fits `vn` to the frozen geodesic's velocities along its own paths.
pub fn train_velocity(
    cfg: &TrainConfig,
    g_star: &GeodesicNet,
    vn: VelocityNet,
    rho_a: &DistributionSpec,
    lag: &LagrangianSpec,
) -> Result<(VelocityNet, Vec<MetricsRecord>)> {
    let mut t = VelocityTrainer::new(cfg.clone(), g_star.clone(), vn, rho_a.clone(), *lag, 0)?;
    let metrics = t.run(cfg.iters_phase2, |_| {})?;
    Ok((t.velocity, metrics))
}
