//! Synthetic datasets, pseudo-labeling and Gaussian noisy-copy augmentation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{self, LabeledBatch, ModelSpec};
use crate::numeric::{LayeredParams, Purpose, SeededRng, StreamId};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub is_pseudo: bool,
}

impl Sample {
    pub fn labeled(x: Vec<f64>, y: usize) -> Self {
        Self {
            x,
            y,
            is_pseudo: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_dim: usize,
    pub class_count: usize,
    /// Generator name and seed, e.g. `two-moons(seed=3)`.
    pub provenance: String,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, input_dim: usize, class_count: usize, provenance: impl Into<String>) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid("datasets need at least two classes"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != input_dim {
                return Err(Error::invalid(format!(
                    "sample {i} has {} features, expected {input_dim}",
                    s.x.len()
                )));
            }
            if s.y >= class_count {
                return Err(Error::invalid(format!("sample {i} label {} out of range", s.y)));
            }
        }
        Ok(Self {
            samples,
            input_dim,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for s in &self.samples {
            counts[s.y] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        LabeledBatch::with_flags(
            picked.iter().map(|s| s.x.clone()).collect(),
            picked.iter().map(|s| s.y).collect(),
            picked.iter().map(|s| s.is_pseudo).collect(),
        )
    }

    pub fn full_batch(&self) -> Result<LabeledBatch> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    /// Appends samples from `other`, which must have the same shape.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.input_dim != self.input_dim || other.class_count != self.class_count {
            return Err(Error::invalid("datasets differ in input_dim or class_count"));
        }
        self.samples.extend(other.samples);
        self.provenance = format!("{}+{}", self.provenance, other.provenance);
        Ok(())
    }

    /// Text export: a `#` header with the shape, then one sample per line as
    /// `label,is_pseudo,feature_1,...,feature_n`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# input_dim={} class_count={} provenance={}\n",
            self.input_dim, self.class_count, self.provenance
        );
        for s in &self.samples {
            write!(out, "{},{}", s.y, s.is_pseudo as u8).unwrap();
            for v in &s.x {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix("# "))
            .ok_or_else(|| Error::Decode("missing dataset header".into()))?;
        let mut input_dim = None;
        let mut class_count = None;
        let mut provenance = String::new();
        for field in header.splitn(3, ' ') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Decode(format!("bad header field {field:?}")))?;
            match k {
                "input_dim" => input_dim = v.parse().ok(),
                "class_count" => class_count = v.parse().ok(),
                "provenance" => provenance = v.to_string(),
                _ => return Err(Error::Decode(format!("unknown header field {k:?}"))),
            }
        }
        let input_dim = input_dim.ok_or_else(|| Error::Decode("header lacks input_dim".into()))?;
        let class_count = class_count.ok_or_else(|| Error::Decode("header lacks class_count".into()))?;
        let mut samples = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = |what: &str| Error::Decode(format!("line {}: {what}", n + 2));
            let mut cols = line.split(',');
            let y = cols.next().and_then(|c| c.parse().ok()).ok_or_else(|| bad("label"))?;
            let is_pseudo = match cols.next() {
                Some("0") => false,
                Some("1") => true,
                _ => return Err(bad("is_pseudo flag")),
            };
            let x = cols
                .map(|c| c.parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { x, y, is_pseudo });
        }
        Dataset::new(samples, input_dim, class_count, provenance)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn data_rng(seed: u64, lane: u64) -> SeededRng {
    SeededRng::new(seed, StreamId::new(0, lane, Purpose::Data))
}

/// Class means in general position, rescaled so the closest pair is exactly
/// `separation` apart. Returns one mean per class.
pub fn mixture_means(classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::Generator(format!("separation {separation} is not a finite nonnegative value")));
    }
    let mut rng = data_rng(seed, 0);
    let raw: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect();
    let mut closest = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let d = raw[a]
                .iter()
                .zip(&raw[b])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(d);
        }
    }
    if !(closest > 0.0) || !closest.is_finite() {
        return Err(Error::Generator(format!(
            "cannot place {classes} distinct means in dimension {dim}"
        )));
    }
    let k = separation / closest;
    Ok(raw.into_iter().map(|m| m.into_iter().map(|v| v * k).collect()).collect())
}

/// `per_class` unit-variance isotropic Gaussian samples around each class
/// mean; the closest pair of means is `separation` apart.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    sample_mixture(classes, dim, per_class, separation, seed, seed)
}

/// Like [`gen_gaussian_mixture`] with the class means drawn from
/// `means_seed` and the samples from `sample_seed`, so several datasets can
/// share one distribution.
pub fn sample_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    means_seed: u64,
    sample_seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::Generator(format!(
            "need at least 2 classes and dimension ≥ 1, got {classes} and {dim}"
        )));
    }
    let means = mixture_means(classes, dim, separation, means_seed)?;
    let mut rng = data_rng(sample_seed, 1);
    let mut samples = Vec::with_capacity(classes * per_class);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            let x = mean.iter().map(|m| m + rng.normal()).collect();
            samples.push(Sample::labeled(x, c));
        }
    }
    let seeds = if means_seed == sample_seed {
        format!("seed={sample_seed}")
    } else {
        format!("means_seed={means_seed},seed={sample_seed}")
    };
    Dataset::new(
        samples,
        dim,
        classes,
        format!("gaussian-mixture(classes={classes},dim={dim},sep={separation},{seeds})"),
    )
}

/// Two interleaved half circles: class 0 on the upper unit arc, class 1 on
/// the lower arc centered at `(1, 0.5)`. Arc positions are evenly spaced;
/// `noise` adds isotropic Gaussian jitter. Sample order is shuffled.
pub fn gen_two_moons(count: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if count < 2 {
        return Err(Error::Generator("two-moons needs at least 2 samples".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::Generator(format!("noise {noise} must be nonnegative")));
    }
    let n_outer = count / 2;
    let n_inner = count - n_outer;
    let arc = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (n - 1) as f64
        }
    };
    let mut samples = Vec::with_capacity(count);
    for i in 0..n_outer {
        let t = arc(i, n_outer);
        samples.push(Sample::labeled(vec![t.cos(), t.sin()], 0));
    }
    for i in 0..n_inner {
        let t = arc(i, n_inner);
        samples.push(Sample::labeled(vec![1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = data_rng(seed, 2);
    if noise > 0.0 {
        for s in &mut samples {
            for v in &mut s.x {
                *v += noise * rng.normal();
            }
        }
    }
    rng.shuffle(&mut samples);
    Dataset::new(samples, 2, 2, format!("two-moons(count={count},noise={noise},seed={seed})"))
}

/// Labels each input with the base model's prediction and flags it pseudo.
pub fn pseudo_label(unlabeled: &[Vec<f64>], spec: &ModelSpec, theta_base: &LayeredParams) -> Result<Vec<Sample>> {
    unlabeled
        .iter()
        .map(|x| {
            Ok(Sample {
                x: x.clone(),
                y: model::predict(spec, theta_base, x)?,
                is_pseudo: true,
            })
        })
        .collect()
}

/// Replicates every sample `copies` times with i.i.d. `N(0, σ²)` noise on
/// the inputs. Output is sample-major: all copies of sample 0 first.
pub fn gaussian_noisy_copies(data: &Dataset, copies: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if copies == 0 {
        return Err(Error::invalid("need at least one copy"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise level {sigma} must be nonnegative")));
    }
    let mut rng = SeededRng::new(seed, StreamId::new(0, 0, Purpose::Noise));
    let mut samples = Vec::with_capacity(copies * data.len());
    for s in &data.samples {
        for _ in 0..copies {
            let x = if sigma == 0.0 {
                s.x.clone()
            } else {
                s.x.iter().map(|v| v + sigma * rng.normal()).collect()
            };
            samples.push(Sample { x, ..s.clone() });
        }
    }
    Dataset::new(
        samples,
        data.input_dim,
        data.class_count,
        format!("{}+noisy(copies={copies},sigma={sigma},seed={seed})", data.provenance),
    )
}
