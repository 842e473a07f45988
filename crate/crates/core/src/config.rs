//! Run configuration: experiment presets plus strict JSON overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datasets::{read_idx, select_digits, DistributionSpec, ImageSet};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSpec;
use crate::linalg::Matrix;
use crate::model::{HarmonicSpec, LagrangianSpec};
use crate::train::{NetWidths, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Synthetic1,
    Synthetic2,
    Synthetic3,
    Synthetic4,
    Mnist,
    Custom,
}

/// Where the digit images come from and how they are reduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnistConfig {
    pub data_dir: PathBuf,
    pub source_digit: u8,
    pub target_digit: u8,
    /// Images per digit taken from the training split.
    pub limit: usize,
    /// 2×2 average pooling to 14×14.
    pub downsample: bool,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data/mnist"), source_digit: 6, target_digit: 9, limit: 2000, downsample: true }
    }
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

impl MnistConfig {
    fn load(&self, images: &str, labels: &str, digit: u8, limit: usize) -> Result<ImageSet> {
        let imgs = read_idx(&self.data_dir.join(images))?;
        let labs = read_idx(&self.data_dir.join(labels))?;
        let set = select_digits(&imgs, &labs, digit, limit)?;
        if self.downsample {
            set.downsample2()
        } else {
            Ok(set)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_digit > 9 || self.target_digit > 9 {
            return Err(Error::Config("digits must lie in 0..=9".into()));
        }
        if self.limit == 0 {
            return Err(Error::Config("mnist limit must be at least 1".into()));
        }
        Ok(())
    }

    /// Training-split source and target images.
    pub fn train_sets(&self) -> Result<(ImageSet, ImageSet)> {
        Ok((
            self.load(MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, self.source_digit, self.limit)?,
            self.load(MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS, self.target_digit, self.limit)?,
        ))
    }

    /// Test-split images of one digit, for held-out evaluation.
    pub fn test_set(&self, digit: u8, limit: usize) -> Result<ImageSet> {
        self.load(MNIST_TEST_IMAGES, MNIST_TEST_LABELS, digit, limit)
    }
}

/// A fully resolved run description. Serializing it echoes every default.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<DistributionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<DistributionSpec>,
    pub lagrangian: LagrangianSpec,
    pub train: TrainConfig,
    pub widths: NetWidths,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mnist: Option<MnistConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    experiment: Experiment,
    source: Option<DistributionSpec>,
    target: Option<DistributionSpec>,
    lagrangian: Option<LagrangianSpec>,
    train: Option<Map<String, Value>>,
    widths: Option<Map<String, Value>>,
    mnist: Option<Map<String, Value>>,
    output_dir: Option<PathBuf>,
}

fn gaussian(mean: Vec<f64>, cov: Matrix) -> DistributionSpec {
    DistributionSpec::Gaussian(GaussianSpec::new(mean, cov).expect("preset covariance is positive definite"))
}

/// Source N(0, I₂), target N((6,6), [[1.5,0.5],[0.5,1.5]]).
pub fn synthetic1_laws() -> (GaussianSpec, GaussianSpec) {
    (
        GaussianSpec::standard(2),
        GaussianSpec::new(vec![6.0, 6.0], Matrix::from_rows(&[[1.5, 0.5], [0.5, 1.5]]).expect("2x2")).expect("pd"),
    )
}

/// Source N(0, I₂), target the equal mixture of N((±4,±4), I₂).
pub fn synthetic2_target() -> DistributionSpec {
    let comps = [(4.0, 4.0), (-4.0, 4.0), (-4.0, -4.0), (4.0, -4.0)]
        .iter()
        .map(|&(x, y)| (0.25, GaussianSpec::isotropic(vec![x, y], 1.0).expect("pd")))
        .collect();
    DistributionSpec::mixture(comps).expect("weights sum to 1")
}

/// Source N(0, I₁₀), target N(4·𝟙, 0.5·I + 0.5·𝟙𝟙ᵀ/10).
pub fn synthetic3_laws() -> (GaussianSpec, GaussianSpec) {
    let d = 10;
    let mut cov = Matrix::identity(d).scaled(0.5);
    cov.as_mut_slice().iter_mut().for_each(|c| *c += 0.5 / d as f64);
    (GaussianSpec::standard(d), GaussianSpec::new(vec![4.0; d], cov).expect("pd"))
}

pub const SYNTHETIC4_OMEGA: [f64; 2] = [1.2, 0.1];
pub const SYNTHETIC4_MEAN_A: [f64; 2] = [3.0, 3.0];
pub const SYNTHETIC4_MEAN_B: [f64; 2] = [5.0, 5.0];

/// N((3,3), 0.01·I) → N((5,5), 0.01·I).
pub fn synthetic4_laws() -> (GaussianSpec, GaussianSpec) {
    (
        GaussianSpec::isotropic(SYNTHETIC4_MEAN_A.to_vec(), 0.01).expect("pd"),
        GaussianSpec::isotropic(SYNTHETIC4_MEAN_B.to_vec(), 0.01).expect("pd"),
    )
}

pub fn synthetic4_lagrangian() -> LagrangianSpec {
    LagrangianSpec::Harmonic {
        potential: HarmonicSpec::new(SYNTHETIC4_OMEGA[0], SYNTHETIC4_OMEGA[1]).expect("valid frequencies"),
    }
}

impl RunConfig {
    /// The preset for `experiment` with every default filled in.
    pub fn preset(experiment: Experiment) -> Self {
        let mut train = TrainConfig::default();
        let mut widths = NetWidths::default();
        let mut lagrangian = LagrangianSpec::Quadratic;
        let mut mnist = None;
        let (source, target) = match experiment {
            Experiment::Synthetic1 => {
                let (a, b) = synthetic1_laws();
                (Some(DistributionSpec::Gaussian(a)), Some(DistributionSpec::Gaussian(b)))
            }
            Experiment::Synthetic2 => (Some(gaussian(vec![0.0; 2], Matrix::identity(2))), Some(synthetic2_target())),
            Experiment::Synthetic3 => {
                let (a, b) = synthetic3_laws();
                (Some(DistributionSpec::Gaussian(a)), Some(DistributionSpec::Gaussian(b)))
            }
            Experiment::Synthetic4 => {
                let (a, b) = synthetic4_laws();
                train.m = 20;
                lagrangian = synthetic4_lagrangian();
                (Some(DistributionSpec::Gaussian(a)), Some(DistributionSpec::Gaussian(b)))
            }
            Experiment::Mnist => {
                train.m = 20;
                widths = NetWidths::uniform(256);
                mnist = Some(MnistConfig::default());
                (None, None)
            }
            Experiment::Custom => (None, None),
        };
        Self { experiment, source, target, lagrangian, train, widths, mnist, output_dir: None }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let depth_ok = |w: &[usize]| !w.is_empty() && w.iter().all(|&k| k > 0);
        if !depth_ok(&self.widths.geodesic) || !depth_ok(&self.widths.critic) || !depth_ok(&self.widths.velocity) {
            return Err(Error::Config("network widths must be non-empty and positive".into()));
        }
        match self.experiment {
            Experiment::Mnist => {
                self.mnist.as_ref().ok_or_else(|| Error::Config("mnist section missing".into()))?.validate()?;
                if !matches!(self.lagrangian, LagrangianSpec::Quadratic) {
                    return Err(Error::Config("the mnist experiment uses the quadratic Lagrangian".into()));
                }
            }
            _ => {
                let (a, b) = match (&self.source, &self.target) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::Config("source and target are required".into())),
                };
                a.validate()?;
                b.validate()?;
                if a.dim() != b.dim() {
                    return Err(Error::Config(format!("source dimension {} != target dimension {}", a.dim(), b.dim())));
                }
                self.lagrangian.validate(a.dim()).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Source and target laws; image experiments load their files here.
    pub fn distributions(&self) -> Result<(DistributionSpec, DistributionSpec)> {
        if let Some(m) = &self.mnist {
            let (a, b) = m.train_sets()?;
            return Ok((DistributionSpec::ImageSet(a), DistributionSpec::ImageSet(b)));
        }
        match (&self.source, &self.target) {
            (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
            _ => Err(Error::Config("source and target are required".into())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(
    base: &T,
    overrides: Option<Map<String, Value>>,
    what: &str,
) -> Result<T> {
    let Some(overrides) = overrides else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("config sections serialize to objects");
    for (k, val) in overrides {
        obj.insert(k, val);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Parses a JSON run description. Unknown keys are rejected; sections that
/// are present override the preset key by key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    resolve(raw)
}

impl<'de> Deserialize<'de> for RunConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawConfig::deserialize(d)?;
        resolve(raw).map_err(serde::de::Error::custom)
    }
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(raw.experiment);
    if raw.experiment == Experiment::Mnist && (raw.source.is_some() || raw.target.is_some()) {
        return Err(Error::Config("mnist takes its images from the mnist section".into()));
    }
    if raw.experiment != Experiment::Mnist && raw.mnist.is_some() {
        return Err(Error::Config("mnist section is only valid for the mnist experiment".into()));
    }
    if raw.source.is_some() {
        cfg.source = raw.source;
    }
    if raw.target.is_some() {
        cfg.target = raw.target;
    }
    if let Some(l) = raw.lagrangian {
        cfg.lagrangian = l;
    }
    cfg.train = merge(&cfg.train, raw.train, "train")?;
    cfg.widths = merge(&cfg.widths, raw.widths, "widths")?;
    if let Some(m) = &cfg.mnist {
        cfg.mnist = Some(merge(m, raw.mnist, "mnist")?);
    }
    cfg.output_dir = raw.output_dir;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
