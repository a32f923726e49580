//! Property experiments with pass/fail verdicts, and the quantizer benchmark.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::attack::{self, AttackConfig, AttackInit, QuadraticInnerSpec};
use crate::compress::{self, QuantMode, QuantizerConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{Activation, ModelSpec};
use crate::numeric::{norm2, Purpose, SeededRng, StreamId};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::runtime::{self, ClassifierObjective, ClusterConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    Quantizer,
    VarianceScaling,
    LemmaA1,
    LargeBatchLalr,
}

impl Probe {
    pub const ALL: [Probe; 4] = [
        Probe::Quantizer,
        Probe::VarianceScaling,
        Probe::LemmaA1,
        Probe::LargeBatchLalr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Probe::Quantizer => "quantizer",
            Probe::VarianceScaling => "variance-scaling",
            Probe::LemmaA1 => "lemma-a1",
            Probe::LargeBatchLalr => "large-batch-lalr",
        }
    }
}

impl FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Probe::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Probe::ALL.iter().map(|p| p.name()).collect();
                Error::config("probe", format!("unknown probe {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl ProbeCheck {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub probe: Probe,
    pub checks: Vec<ProbeCheck>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{verdict} {}/{}: {}", self.probe.name(), c.name, c.detail)?;
        }
        Ok(())
    }
}

pub fn run_probe(probe: Probe, seed: u64) -> Result<ProbeReport> {
    let checks = match probe {
        Probe::Quantizer => quantizer_probe(&QuantizerProbe::default(), seed)?,
        Probe::VarianceScaling => variance_scaling_probe(&VarianceScaling::default(), seed)?.checks(),
        Probe::LemmaA1 => lemma_a1_probe(1000, seed)?,
        Probe::LargeBatchLalr => large_batch_lalr_probe(&LargeBatchLalr::default())?.checks(),
    };
    Ok(ProbeReport { probe, checks })
}

/// Runs a probe and writes its report to `<dir>/probe-<name>.txt`.
pub fn probe_suite(probe: Probe, dir: &Path, seed: u64) -> Result<(ProbeReport, PathBuf)> {
    let report = run_probe(probe, seed)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("probe-{}.txt", probe.name()));
    std::fs::write(&path, report.to_string()).map_err(|e| Error::io(&path, e))?;
    Ok((report, path))
}

fn probe_rng(seed: u64, lane: u64) -> SeededRng {
    SeededRng::new(seed, StreamId::new(0, 0, Purpose::Probe(lane)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerProbe {
    pub dims: Vec<usize>,
    pub bits: Vec<u32>,
    pub vectors_per_dim: usize,
    pub mean_draws: usize,
    pub variance_trials: usize,
}

impl Default for QuantizerProbe {
    fn default() -> Self {
        Self {
            dims: vec![16, 256],
            bits: vec![1, 2, 4, 8, 32],
            vectors_per_dim: 10,
            mean_draws: 100_000,
            variance_trials: 10_000,
        }
    }
}

/// Unbiasedness (4 SE), the variance bound (3 SE slack) and message length
/// for every `(d, b)` in the grid.
pub fn quantizer_probe(p: &QuantizerProbe, seed: u64) -> Result<Vec<ProbeCheck>> {
    let mut checks = Vec::new();
    for &d in &p.dims {
        let mut rng = probe_rng(seed, d as u64);
        let vectors: Vec<Vec<f64>> = (0..p.vectors_per_dim)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        for &b in &p.bits {
            let outcomes = vectors
                .par_iter()
                .enumerate()
                .map(|(v, g)| {
                    let lane = ((d as u64) << 40) | ((b as u64) << 32) | v as u64;
                    let mut rng = probe_rng(seed, lane);
                    let worst_z = mean_deviation(g, b, p.mean_draws, &mut rng)?;
                    let (ratio, se) = variance_ratio(g, b, p.variance_trials, &mut rng)?;
                    let len_ok = length_matches(g, b, &mut rng)?;
                    Ok((worst_z, ratio, se, len_ok))
                })
                .collect::<Result<Vec<_>>>()?;
            let bound = compress::variance_bound(d, b);
            let worst_z = outcomes.iter().map(|o| o.0).fold(0.0, f64::max);
            let var_ok = outcomes.iter().all(|o| o.1 <= bound + 3.0 * o.2);
            let worst_ratio = outcomes.iter().map(|o| o.1).fold(0.0, f64::max);
            checks.push(ProbeCheck::new(
                format!("unbiased d={d} b={b}"),
                worst_z <= 4.0,
                format!("max |mean − g|/SE = {worst_z:.3} over {} draws", p.mean_draws),
            ));
            checks.push(ProbeCheck::new(
                format!("variance d={d} b={b}"),
                var_ok,
                format!("max E‖Q(g)−g‖²/‖g‖² = {worst_ratio:.3e}, bound {bound:.3e}"),
            ));
            checks.push(ProbeCheck::new(
                format!("bits d={d} b={b}"),
                outcomes.iter().all(|o| o.3),
                format!("{} bits without overflow", compress::message_bits(d, b)),
            ));
        }
    }
    Ok(checks)
}

/// Largest standardized deviation `|mean_j − g_j| / SE_j` over coordinates.
/// `SE_j` is exact: coordinate `j` decodes to one of two adjacent levels
/// `N/s` apart with probabilities `1 − p_j, p_j`, so its variance is
/// `(N/s)² p_j (1 − p_j)` with `N` the transmitted norm. Coordinates with
/// `p_j = 0` must match exactly.
fn mean_deviation(g: &[f64], bits: u32, draws: usize, rng: &mut SeededRng) -> Result<f64> {
    let d = g.len();
    let mut sum = vec![0.0; d];
    let mut norm = 0.0;
    for _ in 0..draws {
        let msg = compress::quantize(g, bits, rng)?;
        norm = msg.norm() as f64;
        for (acc, (q, v)) in sum.iter_mut().zip(compress::decode(&msg)?.iter().zip(g)) {
            *acc += q - v;
        }
    }
    let n = draws as f64;
    let s = compress::level_count(bits) as f64;
    let mut worst: f64 = 0.0;
    for (acc, v) in sum.iter().zip(g) {
        let scaled = (s * (v.abs() / norm)).min(s);
        let p = scaled - scaled.floor();
        let se = norm / s * (p * (1.0 - p) / n).sqrt();
        let mean_dev = acc / n;
        let z = if se > 0.0 {
            mean_dev.abs() / se
        } else if mean_dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(worst)
}

/// Mean and standard error of `‖Q(g) − g‖² / ‖g‖²`.
fn variance_ratio(g: &[f64], bits: u32, trials: usize, rng: &mut SeededRng) -> Result<(f64, f64)> {
    let g2 = norm2(g).powi(2);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..trials {
        let q = compress::decode(&compress::quantize(g, bits, rng)?)?;
        let e: f64 = q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g2;
        sum += e;
        sum_sq += e * e;
    }
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

fn length_matches(g: &[f64], bits: u32, rng: &mut SeededRng) -> Result<bool> {
    let msg = compress::quantize(g, bits, rng)?;
    let bytes = compress::serialize(&msg);
    let want = (32 + g.len() as u64 + bits as u64 * g.len() as u64 + 32 * msg.overflow_count() as u64).div_ceil(8);
    Ok(bytes.len() as u64 == want && compress::deserialize(&bytes, g.len(), bits)? == msg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceScaling {
    pub workers: Vec<usize>,
    pub batches: Vec<usize>,
    pub trials: usize,
    /// Samples in the synthetic pool; large so the finite-population
    /// correction stays negligible.
    pub pool: usize,
    pub epsilon: f64,
}

impl Default for VarianceScaling {
    fn default() -> Self {
        Self {
            workers: vec![1, 2, 4, 8],
            batches: vec![8, 32, 128],
            trials: 200,
            pool: 102_400,
            epsilon: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceScalingResult {
    pub points: Vec<runtime::VarianceReport>,
    pub slope: f64,
}

impl VarianceScalingResult {
    pub fn checks(&self) -> Vec<ProbeCheck> {
        let mut checks: Vec<ProbeCheck> = self
            .points
            .iter()
            .map(|p| {
                ProbeCheck::new(
                    format!("point M={} B={}", p.workers, p.per_worker_batch),
                    p.variance.is_finite() && p.variance > 0.0,
                    format!("Var(ĝ) = {:.6e}", p.variance),
                )
            })
            .collect();
        checks.push(ProbeCheck::new(
            "log-log slope",
            (self.slope + 1.0).abs() <= 0.15,
            format!("slope {:.4}, target −1 ± 0.15", self.slope),
        ));
        checks
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Var(ĝ) on a fixed linear model over the `M × B` grid, with the
/// log–log slope against `M·B`.
pub fn variance_scaling_probe(p: &VarianceScaling, seed: u64) -> Result<VarianceScalingResult> {
    let classes = 3;
    let data = data::gen_gaussian_mixture(classes, 4, p.pool / classes, 2.0, seed)?;
    let spec = ModelSpec::linear(4, classes)?;
    let objective = ClassifierObjective::new(spec.clone(), AttackConfig::pgd_default(p.epsilon, 3))?;
    let theta = spec.init_params(seed);
    let mut points = Vec::new();
    for &m in &p.workers {
        for &b in &p.batches {
            let cfg = ClusterConfig::new(m, b, 0, seed);
            points.push(runtime::variance_probe(&theta, &objective, &data, &cfg, p.trials)?);
        }
    }
    let xs: Vec<f64> = points.iter().map(|r| ((r.workers * r.per_worker_batch) as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|r| r.variance.ln()).collect();
    Ok(VarianceScalingResult {
        slope: ols_slope(&xs, &ys),
        points,
    })
}

/// A random strongly concave inner problem with `2..=8` coordinates.
pub fn random_quadratic(rng: &mut SeededRng) -> Result<QuadraticInnerSpec> {
    let k = 2 + rng.below(7);
    let p = 2 + rng.below(7);
    let a = (0..k).map(|_| (0..p).map(|_| rng.normal()).collect()).collect();
    let theta = (0..p).map(|_| rng.normal()).collect();
    let mu = rng.uniform_in(0.5, 2.0);
    let eps = rng.uniform_in(0.1, 1.0);
    QuadraticInnerSpec::new(a, theta, mu, eps)
}

/// For each random spec, a PGD iterate with a random step budget is checked
/// at (up to rounding) the tightest level it qualifies for, `ε_target = L_φ²·gap/μ`.
pub fn lemma_a1_probe(specs: usize, seed: u64) -> Result<Vec<ProbeCheck>> {
    let mut rng = probe_rng(seed, 0xa1);
    let mut holds = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..specs {
        let q = random_quadratic(&mut rng)?;
        let steps = 1 + rng.below(40);
        let cfg = AttackConfig::pgd(q.epsilon, steps, q.epsilon / 8.0, AttackInit::UniformRandom);
        let delta = q.pgd(&cfg, &mut rng)?;
        let probe = attack::approx_gap_check(&q, &delta, 1.0)?;
        let tight = probe.variational_gap * q.l_phi * q.l_phi / q.mu;
        let eps_target = (tight * (1.0 + 1e-12)).max(f64::MIN_POSITIVE);
        let r = attack::approx_gap_check(&q, &delta, eps_target)?;
        if r.is_eps_approx && r.bound_holds {
            holds += 1;
        }
        worst = worst.max(r.theta_grad_gap / eps_target);
    }
    Ok(vec![ProbeCheck::new(
        "bound holds",
        holds == specs,
        format!("{holds}/{specs} specs; max gap/ε_target = {worst:.4}"),
    )])
}

#[derive(Debug, Clone, PartialEq)]
pub struct LargeBatchLalr {
    pub seeds: Vec<u64>,
    pub base_batch: usize,
    pub scale: usize,
    pub epochs: u64,
    pub epsilon: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub noise: f64,
    pub hidden: usize,
    /// Candidate base learning rates, tuned at the small batch.
    pub lr_grid: Vec<f64>,
}

impl Default for LargeBatchLalr {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            base_batch: 32,
            scale: 8,
            epochs: 10,
            epsilon: 0.1,
            train_count: 2048,
            test_count: 2000,
            noise: 0.1,
            hidden: 32,
            lr_grid: vec![0.003, 0.01, 0.03, 0.1, 0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LargeBatchOutcome {
    /// Base learning rates picked at the small batch, `(lamb-lalr, sgd-momentum)`.
    pub base_lr: (f64, f64),
    /// Learning rates used at the large batch.
    pub scaled_lr: (f64, f64),
    /// Final robust accuracy per seed, `(lamb-lalr, sgd-momentum)`.
    pub ra: Vec<(f64, f64)>,
}

impl LargeBatchOutcome {
    pub fn lamb_wins(&self) -> usize {
        self.ra.iter().filter(|(l, s)| l >= s).count()
    }

    pub fn checks(&self) -> Vec<ProbeCheck> {
        let mut checks: Vec<ProbeCheck> = self
            .ra
            .iter()
            .enumerate()
            .map(|(i, (l, s))| {
                ProbeCheck::new(
                    format!("seed {i}"),
                    true,
                    format!("final RA lamb-lalr {l:.4}, sgd-momentum {s:.4}"),
                )
            })
            .collect();
        checks.push(ProbeCheck::new(
            "lamb-lalr >= sgd-momentum (majority)",
            2 * self.lamb_wins() > self.ra.len(),
            format!(
                "{}/{} seeds; base lr ({}, {}), scaled lr ({:.4}, {:.4})",
                self.lamb_wins(),
                self.ra.len(),
                self.base_lr.0,
                self.base_lr.1,
                self.scaled_lr.0,
                self.scaled_lr.1
            ),
        ));
        checks
    }
}

struct MoonsRun<'a> {
    p: &'a LargeBatchLalr,
    spec: ModelSpec,
    objective: ClassifierObjective,
}

impl MoonsRun<'_> {
    fn robust_accuracy(&self, opt: &OptimizerConfig, lr: f64, workers: usize, seed: u64, held_out: &Dataset) -> Result<f64> {
        let train = data::gen_two_moons(self.p.train_count, self.p.noise, seed)?;
        let mut cfg = ClusterConfig::new(workers, self.p.base_batch, 0, seed);
        cfg.rounds = self.p.epochs * cfg.rounds_per_epoch(train.len());
        let e = self.p.epochs as f64;
        let schedule = LrSchedule {
            decay_epochs: vec![0.5 * e, 0.75 * e],
            ..LrSchedule::constant(lr)
        };
        let run = runtime::run_training(
            &cfg,
            &self.objective,
            &train,
            self.spec.init_params(seed),
            opt,
            &schedule,
            &mut |_, _| Ok(()),
        )?;
        if run.divergence.is_some() {
            return Ok(0.0);
        }
        let attack = AttackConfig::pgd_default(self.p.epsilon, 20);
        eval::eval_robust(&self.spec, &run.theta, held_out, &attack, seed)
    }

    fn tune(&self, opt: &OptimizerConfig, validation: &Dataset) -> Result<f64> {
        let mut best = (f64::NEG_INFINITY, self.p.lr_grid[0]);
        for &lr in &self.p.lr_grid {
            let ra = self.robust_accuracy(opt, lr, 1, 1_000_000, validation)?;
            if ra > best.0 {
                best = (ra, lr);
            }
        }
        Ok(best.1)
    }
}

/// Tunes each optimizer's learning rate at the base batch (one worker) on
/// a validation set, scales it to `scale×` the batch by each optimizer's
/// customary rule (linear for momentum SGD, square root for LAMB), and
/// compares final robust accuracy with `scale` workers at an equal epoch
/// budget.
pub fn large_batch_lalr_probe(p: &LargeBatchLalr) -> Result<LargeBatchOutcome> {
    let spec = ModelSpec::mlp(2, vec![p.hidden], Activation::Relu, 2)?;
    let objective = ClassifierObjective::new(spec.clone(), AttackConfig::pgd_default(p.epsilon, 10))?;
    let runner = MoonsRun { p, spec, objective };
    let lamb = OptimizerConfig::lamb_lalr();
    let sgd = OptimizerConfig::sgd(0.9, 0.0);
    let validation = data::gen_two_moons(p.test_count, p.noise, 2_000_000)?;
    let base_lr = (runner.tune(&lamb, &validation)?, runner.tune(&sgd, &validation)?);
    let scaled_lr = (base_lr.0 * (p.scale as f64).sqrt(), base_lr.1 * p.scale as f64);
    let ra = p
        .seeds
        .iter()
        .map(|&seed| {
            let test = data::gen_two_moons(p.test_count, p.noise, seed.wrapping_add(1000))?;
            Ok((
                runner.robust_accuracy(&lamb, scaled_lr.0, p.scale, seed, &test)?,
                runner.robust_accuracy(&sgd, scaled_lr.1, p.scale, seed, &test)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LargeBatchOutcome { base_lr, scaled_lr, ra })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dim: usize,
    pub bits: u32,
    pub trials: usize,
    pub message_bits: u64,
    pub raw_bits: u64,
    pub mean_bytes: f64,
    pub variance: f64,
    pub variance_bound: f64,
    pub encode_ns: f64,
    pub decode_ns: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "d,b,trials,message_bits,raw_bits,mean_bytes,variance,variance_bound,encode_ns,decode_ns"
        )?;
        writeln!(
            f,
            "{},{},{},{},{},{},{:.6e},{:.6e},{:.1},{:.1}",
            self.dim,
            self.bits,
            self.trials,
            self.message_bits,
            self.raw_bits,
            self.mean_bytes,
            self.variance,
            self.variance_bound,
            self.encode_ns,
            self.decode_ns
        )
    }
}

/// Encodes, serializes, parses and decodes a random Gaussian vector `trials`
/// times, reporting sizes, relative error and per-message timings.
pub fn quantize_bench(dim: usize, bits: u32, trials: usize, seed: u64) -> Result<BenchReport> {
    if dim == 0 || trials == 0 {
        return Err(Error::invalid("quantize-bench needs d ≥ 1 and trials ≥ 1"));
    }
    QuantizerConfig::new(bits, QuantMode::OneSided).validate()?;
    let mut rng = probe_rng(seed, 0xbe);
    let g: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let g2 = norm2(&g).powi(2);
    let (mut encode, mut decode) = (0.0, 0.0);
    let (mut bytes, mut err) = (0usize, 0.0);
    for _ in 0..trials {
        let t = Instant::now();
        let wire = compress::serialize(&compress::quantize(&g, bits, &mut rng)?);
        encode += t.elapsed().as_secs_f64();
        let t = Instant::now();
        let q = compress::decode(&compress::deserialize(&wire, dim, bits)?)?;
        decode += t.elapsed().as_secs_f64();
        bytes += wire.len();
        err += q.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g2;
    }
    let n = trials as f64;
    Ok(BenchReport {
        dim,
        bits,
        trials,
        message_bits: compress::message_bits(dim, bits),
        raw_bits: compress::raw_bits(dim),
        mean_bytes: bytes as f64 / n,
        variance: err / n,
        variance_bound: compress::variance_bound(dim, bits),
        encode_ns: encode / n * 1e9,
        decode_ns: decode / n * 1e9,
    })
}
