//! Simulated distributed adversarial training.
//!
//! Each round, every worker samples a batch from its shard, perturbs each
//! sample with the inner attack, computes a local gradient and (optionally)
//! quantizes it. The server averages the decoded messages in worker-id order,
//! optionally re-quantizes the average, and the optimizer applies one step.
//! Workers run on the rayon pool; every random draw comes from a stream keyed
//! by `(seed, worker, round, purpose)`, so results do not depend on scheduling.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackKind};
use crate::compress::{self, GradMessage, QuantMode, QuantizerConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{self, LabeledBatch, ModelSpec};
use crate::numeric::{dot, LayeredParams, Layout, Purpose, SeededRng, StreamId, SERVER_ID};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    #[default]
    ParameterServer,
    AllReduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub workers: usize,
    pub per_worker_batch: usize,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
    /// Weight of the clean-loss term.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub rounds: u64,
    #[serde(default)]
    pub seed: u64,
}

impl ClusterConfig {
    pub fn new(workers: usize, per_worker_batch: usize, rounds: u64, seed: u64) -> Self {
        Self {
            workers,
            per_worker_batch,
            topology: Topology::ParameterServer,
            quantizer: QuantizerConfig::off(),
            lambda: 0.0,
            rounds,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        if self.per_worker_batch == 0 {
            return Err(Error::invalid("per-worker batch must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("clean-loss weight {}", self.lambda)));
        }
        if self.workers > SERVER_ID as usize {
            return Err(Error::invalid("too many workers"));
        }
        self.quantizer.validate()?;
        if self.topology == Topology::AllReduce && self.quantizer.mode == QuantMode::TwoSided {
            return Err(Error::invalid("all-reduce has no server step to quantize"));
        }
        Ok(())
    }

    /// Rounds needed for one pass over `dataset_len` samples, at least 1.
    pub fn rounds_per_epoch(&self, dataset_len: usize) -> u64 {
        let per_round = (self.workers * self.per_worker_batch).max(1);
        dataset_len.div_ceil(per_round).max(1) as u64
    }
}

/// The per-worker robust objective: an inner attack plus the batch gradient
/// `λ·mean ∇ℓ(θ; x) + mean ∇φ(θ; x + δ(x))`.
pub trait Objective: Sync {
    fn layout(&self) -> Layout;

    fn perturb(&self, theta: &LayeredParams, sample: &Sample, rng: &mut SeededRng) -> Result<Vec<f64>>;

    /// Mean loss and gradient over `samples` at the given perturbations.
    fn batch_gradient(
        &self,
        theta: &LayeredParams,
        samples: &[&Sample],
        deltas: &[Vec<f64>],
        lambda: f64,
    ) -> Result<(f64, LayeredParams)>;
}

/// Cross-entropy classifier attacked with FGSM or PGD.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierObjective {
    pub spec: ModelSpec,
    pub attack: AttackConfig,
}

impl ClassifierObjective {
    pub fn new(spec: ModelSpec, attack: AttackConfig) -> Result<Self> {
        spec.validate()?;
        attack.validate()?;
        if attack.kind == AttackKind::ExactQuadratic {
            return Err(Error::invalid("classifiers need an fgsm or pgd attack"));
        }
        Ok(Self { spec, attack })
    }
}

fn shifted(x: &[f64], delta: &[f64]) -> Vec<f64> {
    x.iter().zip(delta).map(|(a, b)| a + b).collect()
}

impl Objective for ClassifierObjective {
    fn layout(&self) -> Layout {
        self.spec.layout()
    }

    fn perturb(&self, theta: &LayeredParams, sample: &Sample, rng: &mut SeededRng) -> Result<Vec<f64>> {
        attack::perturb(&self.spec, theta, &sample.x, sample.y, &self.attack, rng)
    }

    fn batch_gradient(
        &self,
        theta: &LayeredParams,
        samples: &[&Sample],
        deltas: &[Vec<f64>],
        lambda: f64,
    ) -> Result<(f64, LayeredParams)> {
        let labels: Vec<usize> = samples.iter().map(|s| s.y).collect();
        let flags: Vec<bool> = samples.iter().map(|s| s.is_pseudo).collect();
        let adv = LabeledBatch::with_flags(
            samples.iter().zip(deltas).map(|(s, d)| shifted(&s.x, d)).collect(),
            labels.clone(),
            flags.clone(),
        )?;
        let (mut loss, mut grad) = model::loss_and_grad_theta(&self.spec, theta, &adv)?;
        if lambda > 0.0 {
            let clean =
                LabeledBatch::with_flags(samples.iter().map(|s| s.x.clone()).collect(), labels, flags)?;
            let (clean_loss, clean_grad) = model::loss_and_grad_theta(&self.spec, theta, &clean)?;
            loss += lambda * clean_loss;
            grad.axpy(lambda, &clean_grad);
        }
        Ok((loss, grad))
    }
}

/// Toy min-max game with per-sample objective
/// `φ(θ; x, δ) = ½‖θ − x‖² + δᵀAθ − (μ/2)‖δ‖²`, `‖δ‖∞ ≤ ε`.
///
/// The inner problem is strongly concave with maximizer `clamp(Aθ/μ, ±ε)`,
/// and the outer objective is strongly convex, so the game has a unique
/// saddle. The clean loss is `½‖θ − x‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGame {
    /// Rows of `A`, shape `(k, p)` with `p` the parameter dimension.
    pub coupling: Vec<Vec<f64>>,
    pub mu: f64,
    pub attack: AttackConfig,
}

impl QuadraticGame {
    pub fn new(coupling: Vec<Vec<f64>>, mu: f64, attack: AttackConfig) -> Result<Self> {
        let p = coupling.first().map_or(0, Vec::len);
        if p == 0 || coupling.iter().any(|r| r.len() != p) {
            return Err(Error::invalid("coupling must be a nonempty rectangular matrix"));
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::invalid(format!("concavity μ = {mu} must be positive")));
        }
        attack.validate()?;
        Ok(Self { coupling, mu, attack })
    }

    pub fn param_dim(&self) -> usize {
        self.coupling[0].len()
    }

    fn coupled(&self, theta: &[f64]) -> Vec<f64> {
        self.coupling.iter().map(|r| dot(r, theta)).collect()
    }

    /// `Aᵀv`.
    pub fn coupling_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_dim()];
        for (row, s) in self.coupling.iter().zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        out
    }

    /// Exact inner maximizer at θ.
    pub fn best_response(&self, theta: &[f64]) -> Vec<f64> {
        let eps = self.attack.epsilon;
        self.coupled(theta)
            .into_iter()
            .map(|g| (g / self.mu).clamp(-eps, eps))
            .collect()
    }
}

impl Objective for QuadraticGame {
    fn layout(&self) -> Layout {
        Layout::new(vec![self.param_dim()]).expect("nonzero dimension")
    }

    fn perturb(&self, theta: &LayeredParams, _sample: &Sample, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let theta = theta.layer(0);
        match self.attack.kind {
            AttackKind::ExactQuadratic => Ok(self.best_response(theta)),
            _ => {
                let lin = self.coupled(theta);
                attack::signed_ascent(
                    |d| Ok(lin.iter().zip(d).map(|(g, x)| g - self.mu * x).collect()),
                    lin.len(),
                    &self.attack,
                    rng,
                )
            }
        }
    }

    fn batch_gradient(
        &self,
        theta: &LayeredParams,
        samples: &[&Sample],
        deltas: &[Vec<f64>],
        lambda: f64,
    ) -> Result<(f64, LayeredParams)> {
        let th = theta.layer(0);
        if samples.is_empty() {
            return Err(Error::invalid("batch must be nonempty"));
        }
        let lin = self.coupled(th);
        let mut grad = vec![0.0; th.len()];
        let mut total = 0.0;
        for (s, d) in samples.iter().zip(deltas) {
            if s.x.len() != th.len() || d.len() != lin.len() {
                return Err(Error::invalid("sample or perturbation has the wrong dimension"));
            }
            let diff: Vec<f64> = th.iter().zip(&s.x).map(|(t, x)| t - x).collect();
            let base = 0.5 * dot(&diff, &diff);
            total += (1.0 + lambda) * base + dot(d, &lin) - 0.5 * self.mu * dot(d, d);
            let coupled_grad = self.coupling_transpose(d);
            for ((g, r), c) in grad.iter_mut().zip(&diff).zip(&coupled_grad) {
                *g += (1.0 + lambda) * r + c;
            }
        }
        let n = samples.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, LayeredParams::from_layers(vec![grad])?))
    }
}

/// A worker's identity and the dataset indices of its shard, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerState {
    pub worker_id: u32,
    pub shard: Vec<usize>,
    pub seed: u64,
}

/// Random near-equal partition of `0..dataset.len()`. Earlier workers get
/// the larger shards; each shard lists indices in ascending order.
pub fn shard(dataset: &Dataset, workers: usize, seed: u64) -> Result<Vec<WorkerState>> {
    shard_indices(dataset.len(), workers, seed)
}

pub fn shard_indices(len: usize, workers: usize, seed: u64) -> Result<Vec<WorkerState>> {
    if workers == 0 {
        return Err(Error::invalid("need at least one worker"));
    }
    if len < workers {
        return Err(Error::invalid(format!("{len} samples cannot fill {workers} shards")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    SeededRng::new(seed, StreamId::new(SERVER_ID, 0, Purpose::Shard)).shuffle(&mut order);
    let base = len / workers;
    let extra = len % workers;
    let mut start = 0;
    Ok((0..workers)
        .map(|w| {
            let size = base + usize::from(w < extra);
            let mut shard = order[start..start + size].to_vec();
            shard.sort_unstable();
            start += size;
            WorkerState {
                worker_id: w as u32,
                shard,
                seed,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub message: GradMessage,
    /// Mean robust loss (plus λ times the clean loss) on the batch.
    pub loss: f64,
    /// The shard was smaller than the batch, so sampling used replacement.
    pub with_replacement: bool,
    pub attack_ms: f64,
    pub grad_ms: f64,
}

/// Dataset indices of the worker's batch for `round`, ascending.
pub fn sample_batch(worker: &WorkerState, batch: usize, round: u64) -> (Vec<usize>, bool) {
    let mut rng = SeededRng::new(worker.seed, StreamId::new(worker.worker_id, round, Purpose::Batch));
    let n = worker.shard.len();
    let (mut picks, with_replacement) = if batch <= n {
        (rng.sample_indices(n, batch), false)
    } else {
        ((0..batch).map(|_| rng.below(n)).collect(), true)
    };
    picks.sort_unstable();
    (picks.into_iter().map(|i| worker.shard[i]).collect(), with_replacement)
}

/// Stream for the attack on dataset sample `index` by `worker` in `round`.
pub fn attack_stream(worker: u32, round: u64, index: usize) -> StreamId {
    StreamId::new(worker, round, Purpose::Attack(index as u64))
}

/// One worker's share of a round: batch, per-sample attacks, local gradient,
/// optional quantization.
pub fn worker_round(
    worker: &WorkerState,
    theta: &LayeredParams,
    objective: &dyn Objective,
    dataset: &Dataset,
    cfg: &ClusterConfig,
    round: u64,
) -> Result<WorkerOutput> {
    if worker.shard.is_empty() {
        return Err(Error::invalid(format!("worker {} has an empty shard", worker.worker_id)));
    }
    let (indices, with_replacement) = sample_batch(worker, cfg.per_worker_batch, round);
    let samples: Vec<&Sample> = indices.iter().map(|&i| &dataset.samples[i]).collect();

    let started = Instant::now();
    let deltas = indices
        .par_iter()
        .zip(samples.par_iter())
        .map(|(&i, s)| {
            let mut rng = SeededRng::new(worker.seed, attack_stream(worker.worker_id, round, i));
            objective.perturb(theta, s, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let attack_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let (loss, grad) = objective.batch_gradient(theta, &samples, &deltas, cfg.lambda)?;
    let mut rng = SeededRng::new(worker.seed, StreamId::new(worker.worker_id, round, Purpose::Quantize));
    let message = GradMessage::encode(grad.flatten(), &cfg.quantizer, &mut rng)?;
    let grad_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(WorkerOutput {
        message,
        loss,
        with_replacement,
        attack_ms,
        grad_ms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub gradient: LayeredParams,
    pub bits_up: u64,
    pub bits_down: u64,
}

/// Averages decoded messages in the given (worker-id) order. Under two-sided
/// quantization the average is quantized once more on the server stream and
/// the decoded result is returned.
pub fn aggregate(messages: &[GradMessage], layout: &Layout, cfg: &ClusterConfig, round: u64) -> Result<Aggregate> {
    if messages.is_empty() {
        return Err(Error::Protocol("no messages to aggregate".into()));
    }
    let d = layout.total_dim();
    let mut sum = vec![0.0; d];
    for (w, msg) in messages.iter().enumerate() {
        if msg.dim() != d {
            return Err(Error::Protocol(format!(
                "worker {w} sent {} coordinates, expected {d}",
                msg.dim()
            )));
        }
        for (s, v) in sum.iter_mut().zip(msg.decode()?) {
            *s += v;
        }
    }
    let m = messages.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / m).collect();
    let sent: u64 = messages.iter().map(GradMessage::bits).sum();
    let count = messages.len() as u64;
    let (flat, bits_up, bits_down) = match (cfg.topology, cfg.quantizer.mode) {
        (Topology::AllReduce, _) => (mean, (count - 1) * sent, 0),
        (Topology::ParameterServer, QuantMode::TwoSided) => {
            let mut rng = SeededRng::new(cfg.seed, StreamId::new(SERVER_ID, round, Purpose::Quantize));
            let msg = compress::quantize(&mean, cfg.quantizer.bits, &mut rng)?;
            (compress::decode(&msg)?, sent, count * msg.bits_used())
        }
        (Topology::ParameterServer, _) => (mean, sent, count * compress::raw_bits(d)),
    };
    Ok(Aggregate {
        gradient: LayeredParams::unflatten(layout, &flat)?,
        bits_up,
        bits_down,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// Rounds completed, starting at 1.
    pub round: u64,
    pub epoch: u64,
    pub train_loss: f64,
    /// `‖ĝ‖₂` of the aggregated gradient.
    pub grad_norm: f64,
    pub bits_up: u64,
    pub bits_down: u64,
    pub with_replacement: bool,
    pub wall_ms_attack: f64,
    pub wall_ms_grad: f64,
    pub wall_ms_agg: f64,
    pub wall_ms_step: f64,
}

struct RoundResult {
    gradient: LayeredParams,
    loss: f64,
    bits_up: u64,
    bits_down: u64,
    with_replacement: bool,
    attack_ms: f64,
    grad_ms: f64,
    agg_ms: f64,
}

fn run_round(
    workers: &[WorkerState],
    theta: &LayeredParams,
    objective: &dyn Objective,
    dataset: &Dataset,
    cfg: &ClusterConfig,
    layout: &Layout,
    round: u64,
) -> Result<RoundResult> {
    let outputs = workers
        .par_iter()
        .map(|w| worker_round(w, theta, objective, dataset, cfg, round))
        .collect::<Result<Vec<_>>>()?;
    let started = Instant::now();
    let messages: Vec<GradMessage> = outputs.iter().map(|o| o.message.clone()).collect();
    let agg = aggregate(&messages, layout, cfg, round)?;
    let agg_ms = started.elapsed().as_secs_f64() * 1e3;
    let loss = outputs.iter().map(|o| o.loss).sum::<f64>() / outputs.len() as f64;
    Ok(RoundResult {
        gradient: agg.gradient,
        loss,
        bits_up: agg.bits_up,
        bits_down: agg.bits_down,
        with_replacement: outputs.iter().any(|o| o.with_replacement),
        attack_ms: outputs.iter().map(|o| o.attack_ms).fold(0.0, f64::max),
        grad_ms: outputs.iter().map(|o| o.grad_ms).fold(0.0, f64::max),
        agg_ms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub round: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    /// Final parameters, or the last finite ones when the run diverged.
    pub theta: LayeredParams,
    pub optimizer: Optimizer,
    pub metrics: Vec<RoundMetrics>,
    pub rounds_per_epoch: u64,
    pub divergence: Option<Divergence>,
}

impl TrainingRun {
    pub fn rounds_completed(&self) -> u64 {
        self.metrics.len() as u64
    }

    pub fn checkpoint(&self, model: Option<ModelSpec>, seed: u64) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            theta: self.theta.clone(),
            optimizer: self.optimizer.clone(),
            round: self.rounds_completed(),
            seed,
            diverged: self.divergence.as_ref().map(|d| format!("round {}: {}", d.round, d.reason)),
        }
    }

    /// `Err(Diverged)` if the run stopped on a non-finite value.
    pub fn check(&self) -> Result<()> {
        match &self.divergence {
            Some(d) => Err(Error::Diverged {
                round: d.round,
                reason: d.reason.clone(),
            }),
            None => Ok(()),
        }
    }
}

/// Runs `cfg.rounds` rounds from `theta0`. `observer` sees each round's
/// metrics and the updated parameters. A non-finite loss, gradient or update
/// stops the run early with `divergence` set and the last finite state kept.
pub fn run_training(
    cfg: &ClusterConfig,
    objective: &dyn Objective,
    dataset: &Dataset,
    theta0: LayeredParams,
    optimizer: &OptimizerConfig,
    schedule: &LrSchedule,
    observer: &mut dyn FnMut(&RoundMetrics, &LayeredParams) -> Result<()>,
) -> Result<TrainingRun> {
    cfg.validate()?;
    schedule.validate()?;
    let layout = objective.layout();
    if theta0.layout() != layout {
        return Err(Error::invalid("initial parameters do not match the objective layout"));
    }
    let workers = shard(dataset, cfg.workers, cfg.seed)?;
    let rounds_per_epoch = cfg.rounds_per_epoch(dataset.len());
    let mut opt = optimizer.build(&layout)?;
    let mut theta = theta0;
    let mut metrics = Vec::with_capacity(cfg.rounds as usize);
    let mut divergence = None;

    for t in 0..cfg.rounds {
        let r = run_round(&workers, &theta, objective, dataset, cfg, &layout, t)?;
        let diverged = |reason: &str| Divergence {
            round: t + 1,
            reason: reason.to_string(),
        };
        if !r.loss.is_finite() {
            divergence = Some(diverged("non-finite training loss"));
            break;
        }
        if !r.gradient.is_finite() {
            divergence = Some(diverged("non-finite aggregated gradient"));
            break;
        }
        let started = Instant::now();
        let mut next_opt = opt.clone();
        let next = next_opt.step(&theta, &r.gradient, schedule.eta(t, rounds_per_epoch))?;
        if !next.is_finite() {
            divergence = Some(diverged("non-finite parameters after the update"));
            break;
        }
        let step_ms = started.elapsed().as_secs_f64() * 1e3;
        theta = next;
        opt = next_opt;
        let m = RoundMetrics {
            round: t + 1,
            epoch: t / rounds_per_epoch,
            train_loss: r.loss,
            grad_norm: r.gradient.norm(),
            bits_up: r.bits_up,
            bits_down: r.bits_down,
            with_replacement: r.with_replacement,
            wall_ms_attack: r.attack_ms,
            wall_ms_grad: r.grad_ms,
            wall_ms_agg: r.agg_ms,
            wall_ms_step: step_ms,
        };
        observer(&m, &theta)?;
        metrics.push(m);
    }
    Ok(TrainingRun {
        theta,
        optimizer: opt,
        metrics,
        rounds_per_epoch,
        divergence,
    })
}

/// Perturbation of every sample on the evaluation stream `Eval(index)`.
pub fn eval_perturbations(
    objective: &dyn Objective,
    theta: &LayeredParams,
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = SeededRng::new(seed, StreamId::new(SERVER_ID, 0, Purpose::Eval(i as u64)));
            objective.perturb(theta, s, &mut rng)
        })
        .collect()
}

/// Full-dataset robust gradient `(1/|D|) Σ [λ∇ℓ + ∇φ(θ; x + δ(x))]`.
pub fn full_gradient(
    objective: &dyn Objective,
    theta: &LayeredParams,
    dataset: &Dataset,
    lambda: f64,
    seed: u64,
) -> Result<(f64, LayeredParams)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let deltas = eval_perturbations(objective, theta, dataset, seed)?;
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    objective.batch_gradient(theta, &samples, &deltas, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReport {
    pub workers: usize,
    pub per_worker_batch: usize,
    pub trials: usize,
    /// Trace of the sample covariance of ĝ across trials.
    pub variance: f64,
}

/// Repeats one aggregation round at fixed θ with fresh batches (trial `i`
/// uses round stream `i`) and reports the trace of the covariance of ĝ.
pub fn variance_probe(
    theta: &LayeredParams,
    objective: &dyn Objective,
    dataset: &Dataset,
    cfg: &ClusterConfig,
    trials: usize,
) -> Result<VarianceReport> {
    if trials < 30 {
        return Err(Error::invalid(format!("variance probe needs at least 30 trials, got {trials}")));
    }
    cfg.validate()?;
    let layout = objective.layout();
    let workers = shard(dataset, cfg.workers, cfg.seed)?;
    let mut first: Option<Vec<f64>> = None;
    let mut sum = vec![0.0; layout.total_dim()];
    let mut sum_sq = vec![0.0; layout.total_dim()];
    for t in 0..trials {
        let g = run_round(&workers, theta, objective, dataset, cfg, &layout, t as u64)?
            .gradient
            .flatten();
        // Shifting by the first draw keeps identical draws at exactly zero.
        let reference = first.get_or_insert_with(|| g.clone());
        for j in 0..g.len() {
            let dev = g[j] - reference[j];
            sum[j] += dev;
            sum_sq[j] += dev * dev;
        }
    }
    let n = trials as f64;
    let variance = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0))
        .sum();
    Ok(VarianceReport {
        workers: cfg.workers,
        per_worker_batch: cfg.per_worker_batch,
        trials,
        variance,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Absent for non-classifier objectives.
    pub model: Option<ModelSpec>,
    pub theta: LayeredParams,
    pub optimizer: Optimizer,
    pub round: u64,
    pub seed: u64,
    #[serde(default)]
    pub diverged: Option<String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if let Some(spec) = &ckpt.model {
            spec.validate()?;
            if spec.layout() != ckpt.theta.layout() {
                return Err(Error::Decode("checkpoint parameters do not match its model".into()));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
