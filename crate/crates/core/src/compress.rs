//! Randomized gradient quantization and its wire format.
//!
//! A vector `g` is sent as its norm, one sign bit per coordinate and one
//! level index per coordinate. Level `ℓ` decodes to `‖g‖·sign·ℓ/s` with
//! `s = 2^b`; levels are drawn by stochastic rounding of `s·|g_j|/‖g‖`, which
//! makes the decoded vector unbiased.
//!
//! Wire layout (all little-endian, bit streams LSB-first within bytes):
//!
//! ```text
//! bits [0, 32)             norm, IEEE-754 single precision
//! bits [32, 32 + d)        sign bitmap, bit set = negative
//! bits [32 + d, +b·d)      level indices, b bits each
//! zero padding to a whole byte
//! 4·k bytes                u32 indices of coordinates whose level is s
//! ```
//!
//! Level `s` does not fit in `b` bits. Such a coordinate is written as `s − 1`
//! and its index is appended to the trailer; the decoder restores level `s`.
//! Messages with no coordinate at level `s` take exactly `32 + d + b·d` bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::SeededRng;

pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    #[default]
    Off,
    /// Worker → server messages only.
    OneSided,
    /// Worker → server and the server's broadcast.
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub bits: u32,
    pub mode: QuantMode,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            bits: 8,
            mode: QuantMode::Off,
        }
    }
}

impl QuantizerConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn new(bits: u32, mode: QuantMode) -> Self {
        Self { bits, mode }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::invalid(format!("quantizer bits {bits} outside 1..=32")));
    }
    Ok(())
}

/// Number of quantization levels `s = 2^b`.
pub fn level_count(bits: u32) -> u64 {
    1u64 << bits
}

/// Bits for an unquantized single-precision vector.
pub fn raw_bits(dim: usize) -> u64 {
    32 * dim as u64
}

/// `32 + d + b·d`, the size of a message without overflow entries.
pub fn message_bits(dim: usize, bits: u32) -> u64 {
    32 + dim as u64 + bits as u64 * dim as u64
}

/// `min{d/s², √d/s}`, the bound on `E‖Q(g) − g‖² / ‖g‖²`.
pub fn variance_bound(dim: usize, bits: u32) -> f64 {
    let s = level_count(bits) as f64;
    let d = dim as f64;
    (d / (s * s)).min(d.sqrt() / s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGradMessage {
    norm: f32,
    signs: Vec<bool>,
    levels: Vec<u64>,
    bits: u32,
}

impl QuantizedGradMessage {
    pub fn new(norm: f32, signs: Vec<bool>, levels: Vec<u64>, bits: u32) -> Result<Self> {
        let msg = Self {
            norm,
            signs,
            levels,
            bits,
        };
        msg.validate()?;
        Ok(msg)
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.bits).map_err(|e| Error::Decode(e.to_string()))?;
        if !(self.norm >= 0.0) || !self.norm.is_finite() {
            return Err(Error::Decode(format!("norm {} is not a finite nonnegative value", self.norm)));
        }
        if self.signs.len() != self.levels.len() {
            return Err(Error::Decode(format!(
                "{} signs for {} levels",
                self.signs.len(),
                self.levels.len()
            )));
        }
        let s = level_count(self.bits);
        if let Some(l) = self.levels.iter().find(|&&l| l > s) {
            return Err(Error::Decode(format!("level {l} exceeds s = {s}")));
        }
        if self.norm == 0.0 && self.levels.iter().any(|&l| l != 0) {
            return Err(Error::Decode("zero norm with nonzero levels".into()));
        }
        Ok(())
    }

    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn signs(&self) -> &[bool] {
        &self.signs
    }

    pub fn levels(&self) -> &[u64] {
        &self.levels
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    fn overflow_indices(&self) -> impl Iterator<Item = usize> + '_ {
        let s = level_count(self.bits);
        self.levels
            .iter()
            .enumerate()
            .filter(move |(_, &l)| l == s)
            .map(|(i, _)| i)
    }

    pub fn overflow_count(&self) -> usize {
        self.overflow_indices().count()
    }

    /// Bits on the wire: `32 + d + b·d`, plus 32 per coordinate at level `s`.
    pub fn bits_used(&self) -> u64 {
        message_bits(self.dim(), self.bits) + 32 * self.overflow_count() as u64
    }

    pub fn byte_len(&self) -> usize {
        message_bits(self.dim(), self.bits).div_ceil(8) as usize + 4 * self.overflow_count()
    }
}

/// Smallest `f32` not below `x`, so `|g_j| / norm ≤ 1` after rounding.
fn f32_at_least(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) < x {
        f.next_up()
    } else {
        f
    }
}

pub fn quantize(g: &[f64], bits: u32, rng: &mut SeededRng) -> Result<QuantizedGradMessage> {
    check_bits(bits)?;
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("gradient component {j} is not finite")));
    }
    let d = g.len();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(QuantizedGradMessage {
            norm: 0.0,
            signs: vec![false; d],
            levels: vec![0; d],
            bits,
        });
    }
    let norm32 = f32_at_least(norm);
    if !norm32.is_finite() {
        return Err(Error::Numeric(format!("gradient norm {norm} overflows single precision")));
    }
    let s = level_count(bits);
    let sf = s as f64;
    let denom = norm32 as f64;
    let mut signs = Vec::with_capacity(d);
    let mut levels = Vec::with_capacity(d);
    for &v in g {
        signs.push(v < 0.0);
        let scaled = (sf * (v.abs() / denom)).min(sf);
        let lower = scaled.floor();
        let p = scaled - lower;
        let mut level = lower as u64;
        if p > 0.0 && rng.uniform() < p {
            level += 1;
        }
        levels.push(level.min(s));
    }
    Ok(QuantizedGradMessage {
        norm: norm32,
        signs,
        levels,
        bits,
    })
}

pub fn decode(msg: &QuantizedGradMessage) -> Result<Vec<f64>> {
    msg.validate()?;
    let s = level_count(msg.bits) as f64;
    let norm = msg.norm as f64;
    Ok(msg
        .signs
        .iter()
        .zip(&msg.levels)
        .map(|(&neg, &l)| {
            let v = norm * (l as f64 / s);
            if neg {
                -v
            } else {
                v
            }
        })
        .collect())
}

struct BitWriter {
    bytes: Vec<u8>,
    pos: usize,
}

impl BitWriter {
    fn with_bits(total: u64) -> Self {
        Self {
            bytes: vec![0; total.div_ceil(8) as usize],
            pos: 0,
        }
    }

    fn write(&mut self, value: u64, width: u32) {
        for k in 0..width {
            if (value >> k) & 1 == 1 {
                self.bytes[self.pos / 8] |= 1 << (self.pos % 8);
            }
            self.pos += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn read(&mut self, width: u32) -> u64 {
        let mut v = 0u64;
        for k in 0..width {
            let bit = (self.bytes[self.pos / 8] >> (self.pos % 8)) & 1;
            v |= (bit as u64) << k;
            self.pos += 1;
        }
        v
    }
}

pub fn serialize(msg: &QuantizedGradMessage) -> Vec<u8> {
    let s = level_count(msg.bits);
    let mut w = BitWriter::with_bits(message_bits(msg.dim(), msg.bits));
    w.write(msg.norm.to_bits() as u64, 32);
    for &neg in &msg.signs {
        w.write(neg as u64, 1);
    }
    for &l in &msg.levels {
        w.write(l.min(s - 1), msg.bits);
    }
    let mut out = w.bytes;
    for i in msg.overflow_indices() {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    out
}

/// Parses a message of `dim` coordinates at `bits` bits per level.
pub fn deserialize(bytes: &[u8], dim: usize, bits: u32) -> Result<QuantizedGradMessage> {
    check_bits(bits).map_err(|e| Error::Decode(e.to_string()))?;
    let base = message_bits(dim, bits).div_ceil(8) as usize;
    if bytes.len() < base {
        return Err(Error::Decode(format!(
            "message truncated: {} bytes, need at least {base}",
            bytes.len()
        )));
    }
    let trailer = &bytes[base..];
    if !trailer.len().is_multiple_of(4) {
        return Err(Error::Decode(format!(
            "overflow trailer of {} bytes is not a whole number of u32 indices",
            trailer.len()
        )));
    }
    let used = message_bits(dim, bits) as usize;
    if !used.is_multiple_of(8) && bytes[base - 1] >> (used % 8) != 0 {
        return Err(Error::Decode("nonzero padding bits".into()));
    }
    let mut r = BitReader { bytes, pos: 0 };
    let norm = f32::from_bits(r.read(32) as u32);
    let signs: Vec<bool> = (0..dim).map(|_| r.read(1) == 1).collect();
    let mut levels: Vec<u64> = (0..dim).map(|_| r.read(bits)).collect();
    let s = level_count(bits);
    let mut previous: Option<usize> = None;
    for chunk in trailer.chunks_exact(4) {
        let i = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as usize;
        if i >= dim || previous.is_some_and(|p| p >= i) {
            return Err(Error::Decode(format!("bad overflow index {i}")));
        }
        if levels[i] != s - 1 {
            return Err(Error::Decode(format!("overflow index {i} has stored level {}", levels[i])));
        }
        levels[i] = s;
        previous = Some(i);
    }
    QuantizedGradMessage::new(norm, signs, levels, bits)
}

/// Monte Carlo estimate of `E‖Q(g) − g‖²` over `trials` fresh draws from `rng`.
pub fn empirical_variance(g: &[f64], bits: u32, trials: usize, rng: &mut SeededRng) -> Result<f64> {
    if trials == 0 {
        return Err(Error::invalid("empirical_variance needs at least one trial"));
    }
    let mut total = 0.0;
    for _ in 0..trials {
        let q = decode(&quantize(g, bits, rng)?)?;
        total += q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / trials as f64)
}

/// A local or aggregated gradient as it travels between worker and server.
#[derive(Debug, Clone, PartialEq)]
pub enum GradMessage {
    /// Unquantized; accounted as single precision.
    Raw(Vec<f64>),
    Quantized(QuantizedGradMessage),
}

impl GradMessage {
    pub fn encode(g: Vec<f64>, cfg: &QuantizerConfig, rng: &mut SeededRng) -> Result<Self> {
        match cfg.mode {
            QuantMode::Off => Ok(GradMessage::Raw(g)),
            QuantMode::OneSided | QuantMode::TwoSided => {
                Ok(GradMessage::Quantized(quantize(&g, cfg.bits, rng)?))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GradMessage::Raw(g) => g.len(),
            GradMessage::Quantized(m) => m.dim(),
        }
    }

    pub fn bits(&self) -> u64 {
        match self {
            GradMessage::Raw(g) => raw_bits(g.len()),
            GradMessage::Quantized(m) => m.bits_used(),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        match self {
            GradMessage::Raw(g) => Ok(g.clone()),
            GradMessage::Quantized(m) => decode(m),
        }
    }

    /// Wire bytes: the quantized format, or little-endian f64 for raw vectors.
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            GradMessage::Raw(g) => g.iter().flat_map(|v| v.to_le_bytes()).collect(),
            GradMessage::Quantized(m) => serialize(m),
        }
    }
}
