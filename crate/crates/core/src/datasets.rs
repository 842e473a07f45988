//! Source and target laws, and the IDX image format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{sample_gaussian, GaussianSpec};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub gaussian: GaussianSpec,
}

/// Flattened images with pixels in [0, 1], one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImageSetRepr", into = "ImageSetRepr")]
pub struct ImageSet {
    pixels: Matrix,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageSetRepr {
    height: usize,
    width: usize,
    images: Vec<Vec<f64>>,
}

impl TryFrom<ImageSetRepr> for ImageSet {
    type Error = Error;
    fn try_from(r: ImageSetRepr) -> Result<Self> {
        if r.images.is_empty() {
            return Err(Error::Empty("image set"));
        }
        ImageSet::new(Matrix::from_rows(&r.images)?, r.height, r.width)
    }
}

impl From<ImageSet> for ImageSetRepr {
    fn from(s: ImageSet) -> Self {
        ImageSetRepr { height: s.height, width: s.width, images: s.pixels.to_rows() }
    }
}

impl ImageSet {
    pub fn new(pixels: Matrix, height: usize, width: usize) -> Result<Self> {
        if pixels.rows() == 0 {
            return Err(Error::Empty("image set"));
        }
        if pixels.cols() != height * width {
            return Err(Error::DimensionMismatch {
                context: "image size",
                expected: height * width,
                got: pixels.cols(),
            });
        }
        if pixels.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("image pixels must lie in [0, 1]"));
        }
        Ok(Self { pixels, height, width })
    }

    pub fn len(&self) -> usize {
        self.pixels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.pixels.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    /// The first `k` images.
    pub fn take(&self, k: usize) -> Result<Self> {
        Self::new(self.pixels.slice_rows(0, k.min(self.len())), self.height, self.width)
    }

    /// Images `[start, end)`.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        Self::new(self.pixels.slice_rows(start.min(end), end), self.height, self.width)
    }

    /// 2×2 average pooling (28×28 → 14×14). Odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Result<Self> {
        let (h, w) = (self.height / 2, self.width / 2);
        if h == 0 || w == 0 {
            return Err(invalid("image too small to downsample"));
        }
        let mut out = Matrix::zeros(self.len(), h * w);
        for i in 0..self.len() {
            let src = self.pixels.row(i);
            let dst = out.row_mut(i);
            for r in 0..h {
                for c in 0..w {
                    let at = |dr: usize, dc: usize| src[(2 * r + dr) * self.width + 2 * c + dc];
                    dst[r * w + c] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Self::new(out, h, w)
    }
}

/// A law that can be sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian(GaussianSpec),
    GaussianMixture { components: Vec<MixtureComponent> },
    ImageSet(ImageSet),
}

impl DistributionSpec {
    pub fn mixture(components: Vec<(f64, GaussianSpec)>) -> Result<Self> {
        let spec = DistributionSpec::GaussianMixture {
            components: components
                .into_iter()
                .map(|(weight, gaussian)| MixtureComponent { weight, gaussian })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DistributionSpec::Gaussian(_) => Ok(()),
            DistributionSpec::GaussianMixture { components } => {
                let first = components.first().ok_or(Error::Empty("mixture components"))?;
                if components.iter().any(|c| c.weight <= 0.0 || !c.weight.is_finite()) {
                    return Err(invalid("mixture weights must be positive"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(invalid(format!("mixture weights sum to {total}, not 1")));
                }
                let d = first.gaussian.dim();
                if let Some(c) = components.iter().find(|c| c.gaussian.dim() != d) {
                    return Err(Error::DimensionMismatch {
                        context: "mixture component",
                        expected: d,
                        got: c.gaussian.dim(),
                    });
                }
                Ok(())
            }
            DistributionSpec::ImageSet(s) => {
                if s.is_empty() {
                    Err(Error::Empty("image set"))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian(g) => g.dim(),
            DistributionSpec::GaussianMixture { components } => components.first().map_or(0, |c| c.gaussian.dim()),
            DistributionSpec::ImageSet(s) => s.dim(),
        }
    }

    /// Analytic mean, where one exists in closed form.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            DistributionSpec::Gaussian(g) => g.mean().to_vec(),
            DistributionSpec::GaussianMixture { components } => {
                let mut m = vec![0.0; self.dim()];
                for c in components {
                    m.iter_mut().zip(c.gaussian.mean()).for_each(|(a, b)| *a += c.weight * b);
                }
                m
            }
            DistributionSpec::ImageSet(s) => s.pixels.column_means(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianSpec> {
        match self {
            DistributionSpec::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    /// `n` iid draws, one per row.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<Matrix> {
        if n == 0 {
            return Err(Error::Empty("sample size"));
        }
        self.validate()?;
        match self {
            DistributionSpec::Gaussian(g) => Ok(sample_gaussian(g, n, rng)),
            DistributionSpec::GaussianMixture { components } if components.len() == 1 => {
                Ok(sample_gaussian(&components[0].gaussian, n, rng))
            }
            DistributionSpec::GaussianMixture { components } => {
                let mut out = Matrix::zeros(n, self.dim());
                for i in 0..n {
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut pick = components.len() - 1;
                    for (k, c) in components.iter().enumerate() {
                        acc += c.weight;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    components[pick].gaussian.draw_into(out.row_mut(i), rng);
                }
                Ok(out)
            }
            DistributionSpec::ImageSet(s) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.below(s.len())).collect();
                Ok(s.pixels.select_rows(&idx))
            }
        }
    }
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A raw IDX file of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header at byte {at}")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = be_u32(bytes, 0)?;
    let [z0, z1, ty, ndims] = magic.to_be_bytes();
    if z0 != 0 || z1 != 0 {
        return Err(Error::Idx(format!("bad magic {magic:#010x}")));
    }
    if ty != 0x08 {
        return Err(Error::Idx(format!("unsupported element type {ty:#04x}")));
    }
    if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("bad magic {magic:#010x}")));
    }
    let ndims = ndims as usize;
    let dims = (0..ndims).map(|k| be_u32(bytes, 4 + 4 * k)).collect::<Result<Vec<_>>>()?;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Idx("dimension product overflows".into()))?;
    let start = 4 + 4 * ndims;
    let payload = &bytes[start..];
    if payload.len() != len {
        return Err(Error::Idx(format!("payload has {} bytes, expected {len}", payload.len())));
    }
    Ok(IdxFile { magic, dims, payload: payload.to_vec() })
}

pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path)?;
    parse_idx(&bytes).map_err(|e| Error::Idx(format!("{}: {e}", path.display())))
}

impl IdxFile {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn is_images(&self) -> bool {
        self.magic == IDX_IMAGES_MAGIC
    }

    pub fn is_labels(&self) -> bool {
        self.magic == IDX_LABELS_MAGIC
    }

    pub fn count(&self) -> usize {
        self.dims.first().map_or(0, |&d| d as usize)
    }
}

/// The first `limit` images labelled `digit`, scaled to [0, 1].
pub fn select_digits(images: &IdxFile, labels: &IdxFile, digit: u8, limit: usize) -> Result<ImageSet> {
    if !images.is_images() || images.dims.len() != 3 {
        return Err(Error::Idx("expected a 3-dimensional image file".into()));
    }
    if !labels.is_labels() || labels.dims.len() != 1 {
        return Err(Error::Idx("expected a 1-dimensional label file".into()));
    }
    if images.count() != labels.count() {
        return Err(Error::DimensionMismatch {
            context: "image/label count",
            expected: labels.count(),
            got: images.count(),
        });
    }
    if limit == 0 {
        return Err(Error::Empty("digit selection (limit 0)"));
    }
    let (h, w) = (images.dims[1] as usize, images.dims[2] as usize);
    let p = h * w;
    let picked: Vec<usize> =
        labels.payload.iter().enumerate().filter(|(_, &l)| l == digit).map(|(i, _)| i).take(limit).collect();
    if picked.is_empty() {
        return Err(invalid(format!("digit {digit} not present")));
    }
    let mut data = Vec::with_capacity(picked.len() * p);
    for &i in &picked {
        data.extend(images.payload[i * p..(i + 1) * p].iter().map(|&b| f64::from(b) / 255.0));
    }
    ImageSet::new(Matrix::from_vec(picked.len(), p, data)?, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, h: u32, w: u32, payload: Vec<u8>) -> IdxFile {
        IdxFile { magic: IDX_IMAGES_MAGIC, dims: vec![n, h, w], payload }
    }

    fn labels(l: Vec<u8>) -> IdxFile {
        IdxFile { magic: IDX_LABELS_MAGIC, dims: vec![l.len() as u32], payload: l }
    }

    #[test]
    fn parses_single_pixel_image() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0x7F];
        let f = parse_idx(&bytes).unwrap();
        assert!(f.is_images());
        assert_eq!(f.dims, vec![1, 1, 1]);
        assert_eq!(f.payload, vec![127]);
        assert_eq!(f.serialize(), bytes);
    }

    #[test]
    fn parses_labels() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 2, 6, 9];
        let f = parse_idx(&bytes).unwrap();
        assert!(f.is_labels());
        assert_eq!(f.payload, vec![6, 9]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 6, 9]).is_err());
        assert!(parse_idx(&[0, 0, 8]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0]).is_err());
        assert!(parse_idx(&[1, 0, 8, 1, 0, 0, 0, 1, 6]).is_err());
        assert!(parse_idx(&[0, 0, 0x0D, 1, 0, 0, 0, 1, 6]).is_err());
        assert!(parse_idx(&[0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 6]).is_err());
        assert!(parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 6, 7]).is_err());
    }

    #[test]
    fn selects_digits() {
        let imgs = images(2, 1, 2, vec![0, 255, 51, 102]);
        let s = select_digits(&imgs, &labels(vec![6, 9]), 6, 10).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.pixels().row(0), &[0.0, 1.0]);
        let s9 = select_digits(&imgs, &labels(vec![6, 9]), 9, 10).unwrap();
        assert_eq!(s9.pixels().row(0), &[0.2, 0.4]);
        assert!(select_digits(&imgs, &labels(vec![6, 9]), 6, 0).is_err());
        assert!(select_digits(&imgs, &labels(vec![6, 9]), 3, 5).is_err());
        assert!(select_digits(&imgs, &labels(vec![6]), 6, 5).is_err());
        assert!(select_digits(&labels(vec![6]), &imgs, 6, 5).is_err());
    }

    #[test]
    fn select_respects_limit_order() {
        let imgs = images(4, 1, 1, vec![10, 20, 30, 40]);
        let s = select_digits(&imgs, &labels(vec![6, 9, 6, 6]), 6, 2).unwrap();
        assert_eq!(s.pixels().as_slice(), &[10.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn downsample_averages_blocks() {
        let px: Vec<f64> = (0..16).map(|v| v as f64 / 15.0).collect();
        let s = ImageSet::new(Matrix::from_vec(1, 16, px).unwrap(), 4, 4).unwrap();
        let d = s.downsample2().unwrap();
        assert_eq!(d.shape(), (2, 2));
        let expect = [(0.0 + 1.0 + 4.0 + 5.0) / 60.0, (2.0 + 3.0 + 6.0 + 7.0) / 60.0];
        assert!((d.pixels()[(0, 0)] - expect[0]).abs() < 1e-15);
        assert!((d.pixels()[(0, 1)] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn single_image_set_always_returns_it() {
        let s = ImageSet::new(Matrix::from_rows(&[[0.1, 0.9]]).unwrap(), 1, 2).unwrap();
        let x = DistributionSpec::ImageSet(s).sample(20, &mut SeededRng::new(1)).unwrap();
        assert!(x.iter_rows().all(|r| r == [0.1, 0.9]));
    }

    #[test]
    fn image_pixels_validated() {
        assert!(ImageSet::new(Matrix::from_rows(&[[1.5, 0.0]]).unwrap(), 1, 2).is_err());
        assert!(ImageSet::new(Matrix::from_rows(&[[0.5, 0.0]]).unwrap(), 2, 2).is_err());
    }

    #[test]
    fn degenerate_mixture_matches_gaussian() {
        let g = GaussianSpec::isotropic(vec![1.0, -1.0], 2.0).unwrap();
        let mix = DistributionSpec::mixture(vec![(1.0, g.clone())]).unwrap();
        let a = mix.sample(100, &mut SeededRng::new(5)).unwrap();
        let b = DistributionSpec::Gaussian(g).sample(100, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    fn corners() -> DistributionSpec {
        let comps = [(4.0, 4.0), (-4.0, 4.0), (-4.0, -4.0), (4.0, -4.0)]
            .iter()
            .map(|&(x, y)| (0.25, GaussianSpec::isotropic(vec![x, y], 1.0).unwrap()))
            .collect();
        DistributionSpec::mixture(comps).unwrap()
    }

    #[test]
    fn mixture_component_frequencies() {
        let n = 100_000;
        let x = corners().sample(n, &mut SeededRng::new(11)).unwrap();
        let mut counts = [0usize; 4];
        for r in x.iter_rows() {
            let q = match (r[0] > 0.0, r[1] > 0.0) {
                (true, true) => 0,
                (false, true) => 1,
                (false, false) => 2,
                (true, false) => 3,
            };
            counts[q] += 1;
        }
        // unit-variance components 4σ from the axes: quadrant ≈ component
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn mixture_moments() {
        let n = 100_000;
        let x = corners().sample(n, &mut SeededRng::new(12)).unwrap();
        let m = x.column_means();
        // per-coordinate variance = 1 + 16
        let tol = 5.0 * (17.0 / n as f64).sqrt();
        assert!(m[0].abs() < tol && m[1].abs() < tol, "{m:?}");
        let c = x.covariance();
        assert!((c[(0, 0)] - 17.0).abs() < 0.3 && (c[(1, 1)] - 17.0).abs() < 0.3);
        assert!(c[(0, 1)].abs() < 0.3);
    }

    #[test]
    fn mixture_validation() {
        let g = GaussianSpec::standard(2);
        assert!(DistributionSpec::mixture(vec![(0.5, g.clone()), (0.4, g.clone())]).is_err());
        assert!(DistributionSpec::mixture(vec![(-0.5, g.clone()), (1.5, g.clone())]).is_err());
        assert!(DistributionSpec::mixture(vec![(0.5, g.clone()), (0.5, GaussianSpec::standard(3))]).is_err());
        assert!(DistributionSpec::mixture(vec![]).is_err());
    }

    #[test]
    fn json_shapes() {
        let d = DistributionSpec::Gaussian(GaussianSpec::standard(2));
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"kind":"gaussian","mean":[0.0,0.0],"cov":[[1.0,0.0],[0.0,1.0]]}"#);
        assert_eq!(serde_json::from_str::<DistributionSpec>(&s).unwrap(), d);
        let m = corners();
        let back: DistributionSpec = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<DistributionSpec>(r#"{"kind":"gaussian","mean":[0.0],"cov":[[1.0]],"x":1}"#)
            .is_err());
    }
}
