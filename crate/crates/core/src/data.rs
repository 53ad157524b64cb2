//! Procedural classification datasets and the input transforms used by the
//! surrogate study (interpolation, class skew, shape adaptation).
//!
//! Every input coordinate lies in `[-1, 1]`, the oracle's declared domain.
//! Generation is a pure function of [`SyntheticSpec`]: the task itself (blob
//! centres) comes from one seeded stream and the samples of each split from
//! another, so train and test splits share a task but not samples.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Side length of the grid-digits glyphs.
pub const GLYPH_SIDE: usize = 6;
/// Number of spiral turns from centre to rim.
pub const SPIRAL_TURNS: f64 = 1.25;

const STREAM_TASK: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Blobs,
    Spirals,
    GridDigits,
    UniformNoise,
    StandardNormalNoise,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Blobs => "blobs",
            Family::Spirals => "spirals",
            Family::GridDigits => "grid-digits",
            Family::UniformNoise => "uniform-noise",
            Family::StandardNormalNoise => "standard-normal-noise",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(self, Family::UniformNoise | Family::StandardNormalNoise)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Family::Blobs, Family::Spirals, Family::GridDigits, Family::UniformNoise, Family::StandardNormalNoise]
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(family: Family, n: usize, d: usize, k: usize, noise_sigma: f64, seed: u64) -> Self {
        Self { family, n, d, k, noise_sigma, seed }
    }

    /// 3-class spirals in the plane.
    pub fn spirals(n: usize, seed: u64) -> Self {
        Self::new(Family::Spirals, n, 2, 3, 0.04, seed)
    }

    /// 10-class 6×6 glyphs.
    pub fn grid_digits(n: usize, seed: u64) -> Self {
        Self::new(Family::GridDigits, n, GLYPH_SIDE * GLYPH_SIDE, 10, 0.5, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::Config("n, d and k must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be a non-negative number".into()));
        }
        match self.family {
            Family::Spirals if self.d != 2 => Err(Error::Config("spirals require d = 2".into())),
            Family::GridDigits if self.d != GLYPH_SIDE * GLYPH_SIDE => {
                Err(Error::Config(format!("grid-digits require d = {}", GLYPH_SIDE * GLYPH_SIDE)))
            }
            Family::GridDigits if self.k > GLYPHS.len() => {
                Err(Error::Config(format!("grid-digits support at most {} classes", GLYPHS.len())))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        format!("{}-d{}-k{}-s{}", self.family, self.d, self.k, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub k: usize,
    pub split: Split,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    name: String,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    split: Split,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(name: String, k: usize, split: Split, inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::Shape("inputs must be N×d with one label per row".into()));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Validation(format!("label out of range for K = {k}")));
        }
        if inputs.data().iter().any(|v| v.abs() > 1.0) {
            return Err(Error::Domain("dataset inputs must lie in [-1, 1]".into()));
        }
        Ok(Self { name, k, split, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            k: self.k,
            split: self.split,
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            name: self.name.clone(),
            d: self.dim(),
            k: self.k,
            split: self.split,
            inputs: self.inputs.to_rows(),
            labels: self.labels.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let inputs = Tensor::from_rows(&file.inputs)?;
        if inputs.cols() != file.d {
            return Err(Error::Shape(format!("declared d = {} but rows have {}", file.d, inputs.cols())));
        }
        Dataset::new(file.name, file.k, file.split, inputs, file.labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Training split of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_split(spec, Split::Train)
}

pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let (n, d, k) = (spec.n, spec.d, spec.k);
    let mut task_rng = SeededRng::derived(spec.seed, STREAM_TASK);
    let mut rng = SeededRng::derived(spec.seed, if split == Split::Train { STREAM_TRAIN } else { STREAM_TEST });

    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);

    let sigma = spec.noise_sigma;
    let mut data = Vec::with_capacity(n * d);
    match spec.family {
        Family::Blobs => {
            let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| task_rng.uniform_range(-0.7, 0.7)).collect()).collect();
            for &c in &labels {
                data.extend(centers[c].iter().map(|&m| m + sigma * rng.normal()));
            }
        }
        Family::Spirals => {
            for &c in &labels {
                let t = rng.uniform();
                let r = 0.05 + 0.9 * t;
                let theta = 2.0 * std::f64::consts::PI * (c as f64 / k as f64 + SPIRAL_TURNS * t);
                data.push(r * theta.cos() + sigma * rng.normal());
                data.push(r * theta.sin() + sigma * rng.normal());
            }
        }
        Family::GridDigits => {
            for &c in &labels {
                data.extend(glyph(c).into_iter().map(|p| p + sigma * rng.normal()));
            }
        }
        Family::UniformNoise => data.extend((0..n * d).map(|_| rng.uniform_range(-1.0, 1.0))),
        Family::StandardNormalNoise => data.extend((0..n * d).map(|_| rng.normal())),
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    let inputs = Tensor::new(vec![n, d], data)?;
    Dataset::new(spec.name(), k, split, inputs, labels)
}

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_SIDE]; 10] = [
    [".####.", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", "....#.", "...#..", "..#...", "######"],
    ["#####.", ".....#", "..###.", ".....#", ".....#", "#####."],
    ["#...#.", "#...#.", "######", "....#.", "....#.", "....#."],
    ["######", "#.....", "#####.", ".....#", ".....#", "#####."],
    ["..###.", ".#....", "#####.", "#....#", "#....#", ".####."],
    ["######", ".....#", "....#.", "...#..", "..#...", "..#..."],
    [".####.", "#....#", ".####.", "#....#", "#....#", ".####."],
    [".####.", "#....#", ".#####", ".....#", ".....#", ".####."],
];

/// Noise-free template of digit `class`: strokes at +1, background at -1.
pub fn glyph(class: usize) -> Vec<f64> {
    GLYPHS[class].iter().flat_map(|row| row.bytes().map(|b| if b == b'#' { 1.0 } else { -1.0 })).collect()
}

/// `(1-λ)·x_t + λ·x_s`, element-wise.
pub fn interpolate(x_t: &Tensor, x_s: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Validation(format!("lambda {lambda} outside [0, 1]")));
    }
    if x_t.shape() != x_s.shape() {
        return Err(Error::Shape(format!("cannot interpolate {:?} with {:?}", x_t.shape(), x_s.shape())));
    }
    let data = x_t.data().iter().zip(x_s.data()).map(|(&t, &s)| (1.0 - lambda) * t + lambda * s).collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Keeps only samples whose label is in `keep`; `K` is unchanged.
pub fn skew_classes(ds: &Dataset, keep: &[usize]) -> Result<Dataset> {
    if keep.is_empty() {
        return Err(Error::Validation("keep set must not be empty".into()));
    }
    if let Some(&bad) = keep.iter().find(|&&c| c >= ds.k) {
        return Err(Error::Validation(format!("class {bad} not in 0..{}", ds.k)));
    }
    let keep: BTreeSet<usize> = keep.iter().copied().collect();
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep.contains(&ds.labels[i])).collect();
    let mut out = ds.subset(&idx);
    out.name = format!("{}-skew", ds.name);
    Ok(out)
}

/// Tiles (then truncates) or truncates a vector to length `d_dst`.
pub fn adapt_shape(x: &[f64], d_dst: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(d_dst).collect()
}

/// Applies [`adapt_shape`] to every row of a dataset.
pub fn adapt_dataset(ds: &Dataset, d_dst: usize) -> Result<Dataset> {
    if d_dst == 0 {
        return Err(Error::Config("target dimension must be positive".into()));
    }
    if ds.dim() == d_dst {
        return Ok(ds.clone());
    }
    let data: Vec<f64> = ds.inputs.iter_rows().flat_map(|r| adapt_shape(r, d_dst)).collect();
    let inputs = Tensor::new(vec![ds.len(), d_dst], data)?;
    Dataset::new(format!("{}-as-d{d_dst}", ds.name), ds.k, ds.split, inputs, ds.labels.clone())
}
