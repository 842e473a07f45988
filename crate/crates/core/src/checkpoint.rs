//! Network and run checkpoints as JSON with bit-exact floats.
//!
//! Every float is printed with 17 significant digits, which is enough to
//! recover the exact binary64 value on parse.

use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{CriticNet, GeodesicNet, VelocityNet};
use crate::nn::{Mlp, MlpParams, MlpSpec};

pub const FORMAT_VERSION: u32 = 1;

/// Pretty JSON with every float as `d.ddddddddddddddddde±x`.
struct Sig17<'a>(PrettyFormatter<'a>);

impl Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with 17-significant-digit floats.
/// Non-finite floats come out as `null`, as with plain serde_json.
pub fn to_exact_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::with_indent(b" ")));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// One network's architecture and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkState {
    pub spec: MlpSpec,
    /// `weights[j][r]` is row r of layer j's matrix.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub power_vecs: Vec<Vec<f64>>,
    pub scale: Option<f64>,
    pub rng_seed: u64,
}

impl From<&Mlp> for NetworkState {
    fn from(m: &Mlp) -> Self {
        Self {
            spec: m.spec.clone(),
            weights: m.params.weights.iter().map(Matrix::to_rows).collect(),
            biases: m.params.biases.clone(),
            power_vecs: m.params.power_vecs.clone(),
            scale: m.params.scale,
            rng_seed: m.seed,
        }
    }
}

impl NetworkState {
    pub fn is_finite(&self) -> bool {
        let flat = self.weights.iter().flatten().chain(&self.biases).chain(&self.power_vecs).flatten();
        flat.chain(&self.scale).all(|x| x.is_finite())
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        let weights = self.weights.iter().map(|w| Matrix::from_rows(w)).collect::<Result<Vec<_>>>()?;
        let params =
            MlpParams { weights, biases: self.biases.clone(), power_vecs: self.power_vecs.clone(), scale: self.scale };
        Mlp::from_parts(self.spec.clone(), params, self.rng_seed)
    }
}

/// Everything a run produced, plus the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub geodesic: NetworkState,
    pub critic: NetworkState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<NetworkState>,
    /// Last completed phase-1 round.
    pub iteration: usize,
    /// Last completed phase-2 round, numbered after the phase-1 rounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity_iteration: Option<usize>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(config: RunConfig, geodesic: &GeodesicNet, critic: &CriticNet, iteration: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: config.train.seed,
            config,
            geodesic: (&geodesic.f).into(),
            critic: (&critic.phi).into(),
            velocity: None,
            iteration,
            velocity_iteration: None,
        }
    }

    pub fn with_velocity(mut self, v: &VelocityNet, velocity_iteration: usize) -> Self {
        self.velocity = Some((&v.v).into());
        self.velocity_iteration = Some(velocity_iteration);
        self
    }

    pub fn geodesic_net(&self) -> Result<GeodesicNet> {
        GeodesicNet::from_mlp(self.geodesic.to_mlp()?, self.config.train.fd_step)
    }

    pub fn critic_net(&self) -> Result<CriticNet> {
        CriticNet::from_mlp(self.critic.to_mlp()?)
    }

    pub fn velocity_net(&self) -> Result<Option<VelocityNet>> {
        self.velocity.as_ref().map(|v| VelocityNet::from_mlp(v.to_mlp()?)).transpose()
    }

    pub fn to_json(&self) -> Result<String> {
        let nets = [Some(&self.geodesic), Some(&self.critic), self.velocity.as_ref()];
        if nets.iter().flatten().any(|n| !n.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        to_exact_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint format {}", c.format_version)));
        }
        // shape checks
        c.geodesic_net()?;
        c.critic_net()?;
        c.velocity_net()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
