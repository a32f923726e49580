//! Dense vector helpers, layered parameter containers, ℓ∞ geometry,
//! keyed deterministic random streams and finite-difference gradients.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Sign with `sign(0) = 0`, so zero-gradient coordinates stay put under
/// signed-gradient updates.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-layer dimensions of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    dims: Vec<usize>,
}

impl Layout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::invalid("layout needs at least one layer"));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!("layer {i} has zero dimension")));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }
}

/// Model parameters partitioned into layers; the unit the layerwise
/// adaptive learning rate acts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct LayeredParams {
    layers: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for LayeredParams {
    type Error = Error;

    fn try_from(layers: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_layers(layers)
    }
}

impl From<LayeredParams> for Vec<Vec<f64>> {
    fn from(p: LayeredParams) -> Self {
        p.layers
    }
}

impl LayeredParams {
    pub fn from_layers(layers: Vec<Vec<f64>>) -> Result<Self> {
        Layout::new(layers.iter().map(Vec::len).collect())?;
        Ok(Self { layers })
    }

    pub fn zeros(layout: &Layout) -> Self {
        Self {
            layers: layout.dims().iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            layers: other.layers.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout {
            dims: self.layers.iter().map(Vec::len).collect(),
        }
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn total_dim(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn unflatten(layout: &Layout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total_dim() {
            return Err(Error::invalid(format!(
                "flat vector has length {}, layout needs {}",
                flat.len(),
                layout.total_dim()
            )));
        }
        let mut layers = Vec::with_capacity(layout.layer_count());
        let mut offset = 0;
        for &d in layout.dims() {
            layers.push(flat[offset..offset + d].to_vec());
            offset += d;
        }
        Ok(Self { layers })
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            axpy(a, o, l);
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.iter_mut().for_each(|x| *x *= a);
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }
}

/// Euclidean norm of every layer.
pub fn layer_norms(p: &LayeredParams) -> Vec<f64> {
    p.layers().iter().map(|l| norm2(l)).collect()
}

/// Componentwise clamp of `v` into the ℓ∞ ball of `radius` around `center`.
pub fn project_linf(v: &[f64], center: &[f64], radius: f64) -> Result<Vec<f64>> {
    if v.len() != center.len() {
        return Err(Error::invalid(format!(
            "project_linf: length {} vs center length {}",
            v.len(),
            center.len()
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid(format!("negative ball radius {radius}")));
    }
    Ok(v.iter()
        .zip(center)
        .map(|(&x, &c)| {
            let mut p = x.clamp(c - radius, c + radius);
            // `c ± radius` rounds; pull back until the distance is within radius.
            while (p - c).abs() > radius {
                p = if p > c { p.next_down() } else { p.next_up() };
            }
            p
        })
        .collect())
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient estimate of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step {step}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let plus = f(&probe);
        probe[j] = x[j] - step;
        let minus = f(&probe);
        probe[j] = x[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {j}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// What a random stream is used for. Each purpose (and lane within it) gets
/// an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Init,
    Data,
    Shard,
    Batch,
    /// Attack initialization for the sample at the given dataset index.
    Attack(u64),
    Quantize,
    Eval(u64),
    Noise,
    Probe(u64),
}

impl Purpose {
    fn tag(self) -> (u64, u64) {
        match self {
            Purpose::Init => (1, 0),
            Purpose::Data => (2, 0),
            Purpose::Shard => (3, 0),
            Purpose::Batch => (4, 0),
            Purpose::Attack(i) => (5, i),
            Purpose::Quantize => (6, 0),
            Purpose::Eval(i) => (7, i),
            Purpose::Noise => (8, 0),
            Purpose::Probe(i) => (9, i),
        }
    }
}

/// Worker id used for server-side randomness.
pub const SERVER_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub worker: u32,
    pub round: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(worker: u32, round: u64, purpose: Purpose) -> Self {
        Self {
            worker,
            round,
            purpose,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream keyed by `(seed, worker, round, purpose)`.
///
/// The draw sequence depends only on the key, never on which thread or in
/// which order streams are created.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let (tag, lane) = stream.purpose.tag();
        let mut state = seed;
        for word in [stream.worker as u64, stream.round, tag, lane] {
            let mut s = state ^ word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            state = splitmix64(&mut s);
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    /// Stream for ad-hoc use (tests, generators) keyed by seed alone.
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, StreamId::new(0, 0, Purpose::Data))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `amount` distinct indices from `0..len`, in sampling order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::{
        dot, finite_diff_grad, layer_norms, project_linf, Error, LayeredParams, Layout, Purpose,
        SeededRng, StreamId,
    };
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn layer_norms_examples() {
        let p = LayeredParams::from_layers(vec![vec![3.0, 4.0]]).unwrap();
        assert_eq!(layer_norms(&p), vec![5.0]);
        let p = LayeredParams::from_layers(vec![vec![0.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(layer_norms(&p), vec![0.0, 1.0]);
    }

    #[test]
    fn layer_norms_match_scalar_loop() {
        let mut rng = SeededRng::from_seed(0);
        let layers: Vec<Vec<f64>> = [7usize, 13]
            .iter()
            .map(|&d| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let p = LayeredParams::from_layers(layers.clone()).unwrap();
        let norms = layer_norms(&p);
        for (i, layer) in layers.iter().enumerate() {
            let mut acc = 0.0;
            for v in layer {
                acc += v * v;
            }
            let reference = acc.sqrt();
            assert!((norms[i] - reference).abs() <= 1e-12 * reference);
        }
    }

    #[test]
    fn malformed_layouts_rejected() {
        assert!(Layout::new(vec![]).is_err());
        assert!(Layout::new(vec![3, 0]).is_err());
        assert!(LayeredParams::from_layers(vec![vec![]]).is_err());
        let layout = Layout::new(vec![2, 3]).unwrap();
        assert!(LayeredParams::unflatten(&layout, &[1.0; 4]).is_err());
    }

    #[test]
    fn project_linf_examples() {
        let z = [0.0, 0.0];
        assert_eq!(project_linf(&[0.05, -0.02], &z, 0.1).unwrap(), vec![0.05, -0.02]);
        assert_eq!(project_linf(&[0.25, -0.05], &z, 0.1).unwrap(), vec![0.1, -0.05]);
        let c = [0.3, -1.7];
        assert_eq!(project_linf(&[5.0, 2.0], &c, 0.0).unwrap(), c.to_vec());
        assert!(matches!(
            project_linf(&[1.0], &[0.0], -0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(project_linf(&[1.0], &[0.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| 0.5 * dot(x, x), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 3.0, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
        assert!(matches!(
            finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-5),
            Err(Error::Numeric(_))
        ));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn rng_streams_are_keyed() {
        let id = StreamId::new(3, 17, Purpose::Batch);
        let a: Vec<u64> = {
            let mut r = SeededRng::new(42, id);
            (0..64).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = SeededRng::new(42, id);
            (0..64).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let others = [
            SeededRng::new(43, id),
            SeededRng::new(42, StreamId::new(4, 17, Purpose::Batch)),
            SeededRng::new(42, StreamId::new(3, 18, Purpose::Batch)),
            SeededRng::new(42, StreamId::new(3, 17, Purpose::Quantize)),
            SeededRng::new(42, StreamId::new(3, 17, Purpose::Attack(0))),
        ];
        for mut r in others {
            assert_ne!(r.next_u64(), a[0]);
        }
    }

    #[test]
    fn rng_streams_identical_across_threads() {
        let draw = |w: u32| {
            let mut r = SeededRng::new(7, StreamId::new(w, 1, Purpose::Attack(w as u64)));
            (0..32).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        let sequential: Vec<_> = (0..8).map(draw).collect();
        let handles: Vec<_> = (0..8)
            .rev()
            .map(|w| std::thread::spawn(move || (w, draw(w))))
            .collect();
        for h in handles {
            let (w, seq) = h.join().unwrap();
            assert_eq!(seq, sequential[w as usize]);
        }
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(dims in prop::collection::vec(1usize..=64, 1..=5), seed in any::<u64>()) {
            let layout = Layout::new(dims).unwrap();
            let mut rng = SeededRng::from_seed(seed);
            let flat: Vec<f64> = (0..layout.total_dim()).map(|_| rng.normal()).collect();
            let p = LayeredParams::unflatten(&layout, &flat).unwrap();
            prop_assert_eq!(p.layout(), layout.clone());
            prop_assert_eq!(p.total_dim(), layout.total_dim());
            prop_assert_eq!(p.flatten(), flat);
        }

        #[test]
        fn project_linf_idempotent_nonexpansive(
            v in prop::collection::vec(-10.0f64..10.0, 1..20),
            radius in 0.0f64..3.0,
        ) {
            let center: Vec<f64> = v.iter().map(|x| 0.3 * x.sin()).collect();
            let p = project_linf(&v, &center, radius).unwrap();
            let pp = project_linf(&p, &center, radius).unwrap();
            prop_assert_eq!(&p, &pp);
            for (x, c) in p.iter().zip(&center) {
                prop_assert!((x - c).abs() <= radius);
            }
        }
    }
}
