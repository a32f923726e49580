//! Experiment configuration, the train/eval runner and CSV output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackKind};
use crate::compress::QuantizerConfig;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::ModelSpec;
use crate::numeric::LayeredParams;
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::runtime::{self, Checkpoint, ClassifierObjective, ClusterConfig, RoundMetrics, Topology, TrainingRun};

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_DIR_ENV: &str = "DAT_OUTPUT_DIR";

pub const EVAL_PGD_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    GaussianMixture {
        classes: usize,
        dim: usize,
        per_class: usize,
        separation: f64,
        seed: u64,
        /// Seed of the samples when it differs from the seed of the means.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_seed: Option<u64>,
    },
    TwoMoons {
        count: usize,
        noise: f64,
        seed: u64,
    },
    /// A dataset previously written with [`Dataset::write_text`].
    File { path: PathBuf },
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::GaussianMixture {
                classes,
                dim,
                per_class,
                separation,
                seed,
                sample_seed,
            } => data::sample_mixture(*classes, *dim, *per_class, *separation, *seed, sample_seed.unwrap_or(*seed)),
            DatasetSpec::TwoMoons { count, noise, seed } => data::gen_two_moons(*count, *noise, *seed),
            DatasetSpec::File { path } => Dataset::read_text(path),
        }
    }

    /// Fresh samples from the same distribution; files are returned unchanged.
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::GaussianMixture { seed, sample_seed, .. } => {
                *sample_seed = Some(sample_seed.unwrap_or(*seed).wrapping_add(offset))
            }
            DatasetSpec::TwoMoons { seed, .. } => *seed = seed.wrapping_add(offset),
            DatasetSpec::File { .. } => {}
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub workers: usize,
    pub per_worker_batch: usize,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub quantizer: QuantizerConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiSupervisedConfig {
    /// Unlabeled inputs drawn from the training generator under another seed.
    pub unlabeled_count: usize,
    /// Pseudo-labeled samples added per labeled sample.
    #[serde(default = "one")]
    pub pseudo_ratio: f64,
    /// Epochs of clean training for the base model that assigns labels.
    pub base_epochs: u64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisyCopiesConfig {
    pub copies: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_metrics")]
    pub metrics_csv: String,
    #[serde(default = "default_eval")]
    pub eval_csv: String,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_metrics() -> String {
    "metrics.csv".into()
}
fn default_eval() -> String {
    "eval.csv".into()
}
fn default_checkpoint() -> String {
    "checkpoint.json".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            metrics_csv: default_metrics(),
            eval_csv: default_eval(),
            checkpoint: default_checkpoint(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    /// Defaults to fresh samples from the training distribution.
    #[serde(default)]
    pub test_dataset: Option<DatasetSpec>,
    pub cluster: ClusterSection,
    pub attack: AttackConfig,
    /// Defaults to PGD-20 at the training ε with step ε/4.
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub lambda: f64,
    pub epochs: u64,
    /// Evaluate every this many rounds, and always after the last one; 0 means only at the end.
    #[serde(default)]
    pub eval_every: u64,
    /// Also compute the stationarity metric over the training set at each evaluation.
    #[serde(default)]
    pub eval_fosp: bool,
    /// Fill the wall-clock columns of the metrics CSV.
    #[serde(default)]
    pub timing: bool,
    /// Seed for parameter initialization; defaults to the cluster seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
    #[serde(default)]
    pub semi_supervised: Option<SemiSupervisedConfig>,
    #[serde(default)]
    pub noisy_copies: Option<NoisyCopiesConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn in_section<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidArgument(m) | Error::Generator(m) => Error::config(field, m),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        in_section("model", self.model.validate())?;
        in_section("attack", self.attack.validate())?;
        if self.attack.kind == AttackKind::ExactQuadratic {
            return Err(Error::config("attack.kind", "classifiers need fgsm or pgd"));
        }
        let eval = self.eval_attack();
        in_section("eval_attack", eval.validate())?;
        if eval.kind == AttackKind::ExactQuadratic {
            return Err(Error::config("eval_attack.kind", "classifiers need fgsm or pgd"));
        }
        in_section("optimizer", self.optimizer.build(&self.model.layout()).map(|_| ()))?;
        in_section("schedule", self.schedule.validate())?;
        in_section("cluster", self.cluster_config(0).validate())?;
        if let Some(s) = &self.semi_supervised {
            if !(s.pseudo_ratio >= 0.0) || !s.pseudo_ratio.is_finite() {
                return Err(Error::config("semi_supervised.pseudo_ratio", "must be a nonnegative number"));
            }
        }
        if let Some(n) = &self.noisy_copies {
            if n.copies == 0 {
                return Err(Error::config("noisy_copies.copies", "must be at least 1"));
            }
            if !(n.sigma >= 0.0) {
                return Err(Error::config("noisy_copies.sigma", "must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn eval_attack(&self) -> AttackConfig {
        self.eval_attack
            .unwrap_or_else(|| AttackConfig::pgd_default(self.attack.epsilon, EVAL_PGD_STEPS))
    }

    pub fn cluster_config(&self, rounds: u64) -> ClusterConfig {
        ClusterConfig {
            workers: self.cluster.workers,
            per_worker_batch: self.cluster.per_worker_batch,
            topology: self.cluster.topology,
            quantizer: self.cluster.quantizer,
            lambda: self.lambda,
            rounds,
            seed: self.cluster.seed,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.cluster.seed)
    }

    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output.dir.clone(),
        }
    }

    fn check_shape(&self, d: &Dataset, field: &str) -> Result<()> {
        if d.input_dim != self.model.input_dim || d.class_count != self.model.class_count {
            return Err(Error::config(
                field,
                format!(
                    "dataset has {} features and {} classes, model expects {} and {}",
                    d.input_dim, d.class_count, self.model.input_dim, self.model.class_count
                ),
            ));
        }
        Ok(())
    }

    pub fn test_set(&self) -> Result<Dataset> {
        let spec = self.test_dataset.clone().unwrap_or_else(|| self.dataset.reseeded(1));
        let d = in_section("test_dataset", spec.generate())?;
        self.check_shape(&d, "test_dataset")?;
        Ok(d)
    }

    /// Training set after optional pseudo-labeling and noisy-copy augmentation.
    pub fn training_set(&self) -> Result<Dataset> {
        let mut d = in_section("dataset", self.dataset.generate())?;
        self.check_shape(&d, "dataset")?;
        if let Some(semi) = &self.semi_supervised {
            let pseudo = self.pseudo_labeled(&d, semi)?;
            d.extend(pseudo)?;
        }
        if let Some(n) = &self.noisy_copies {
            d = data::gaussian_noisy_copies(&d, n.copies, n.sigma, self.cluster.seed)?;
        }
        Ok(d)
    }

    fn pseudo_labeled(&self, labeled: &Dataset, semi: &SemiSupervisedConfig) -> Result<Dataset> {
        let base = self.train_base_model(labeled, semi.base_epochs)?;
        let pool = in_section("dataset", self.dataset.reseeded(2).generate())?;
        let wanted = ((semi.pseudo_ratio * labeled.len() as f64).round() as usize)
            .min(semi.unlabeled_count)
            .min(pool.len());
        let inputs: Vec<Vec<f64>> = pool.samples.into_iter().take(wanted).map(|s| s.x).collect();
        let samples = data::pseudo_label(&inputs, &self.model, &base)?;
        Dataset::new(
            samples,
            labeled.input_dim,
            labeled.class_count,
            format!("pseudo({})", labeled.provenance),
        )
    }

    fn train_base_model(&self, labeled: &Dataset, epochs: u64) -> Result<LayeredParams> {
        let mut cluster = self.cluster_config(0);
        cluster.quantizer = QuantizerConfig::off();
        cluster.lambda = 0.0;
        cluster.rounds = epochs * cluster.rounds_per_epoch(labeled.len());
        let clean = AttackConfig::pgd_default(0.0, 1);
        let objective = ClassifierObjective::new(self.model.clone(), clean)?;
        let run = runtime::run_training(
            &cluster,
            &objective,
            labeled,
            self.model.init_params(self.init_seed()),
            &self.optimizer,
            &self.schedule,
            &mut |_, _| Ok(()),
        )?;
        run.check()?;
        Ok(run.theta)
    }
}

pub const METRICS_HEADER: &str = "round,epoch,train_loss,grad_norm,fosp,ta,ra,bits_up,bits_down,\
wall_ms_attack,wall_ms_grad,wall_ms_agg,wall_ms_step";

pub fn eval_header(class_count: usize) -> String {
    let mut h = String::from("round,epoch,ta,ra,fosp,attack,epsilon,steps,step_size");
    for c in 0..class_count {
        write!(h, ",ta_class_{c}").unwrap();
    }
    h
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_row(m: &RoundMetrics, eval: Option<&EvalReport>, timing: bool) -> String {
    let wall = |v: f64| if timing { format!("{v:.3}") } else { String::new() };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        m.round,
        m.epoch,
        m.train_loss,
        m.grad_norm,
        opt_cell(eval.and_then(|e| e.fosp)),
        opt_cell(eval.map(|e| e.ta)),
        opt_cell(eval.map(|e| e.ra)),
        m.bits_up,
        m.bits_down,
        wall(m.wall_ms_attack),
        wall(m.wall_ms_grad),
        wall(m.wall_ms_agg),
        wall(m.wall_ms_step),
    )
}

fn attack_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
        AttackKind::ExactQuadratic => "exact-quadratic",
    }
}

pub fn eval_row(round: u64, epoch: u64, r: &EvalReport) -> String {
    let mut row = format!(
        "{round},{epoch},{},{},{},{},{},{},{}",
        r.ta,
        r.ra,
        opt_cell(r.fosp),
        attack_name(r.attack.kind),
        r.attack.epsilon,
        r.attack.effective_steps(),
        r.attack.step_size
    );
    for c in &r.per_class {
        write!(row, ",{}", opt_cell(*c)).unwrap();
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub run: TrainingRun,
    pub final_eval: Option<EvalReport>,
    pub metrics_csv: String,
    pub eval_csv: String,
    pub output_dir: PathBuf,
}

/// Trains per the config and returns the CSV contents without touching disk.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let train = cfg.training_set()?;
    let test = cfg.test_set()?;
    let rounds_per_epoch = cfg.cluster_config(0).rounds_per_epoch(train.len());
    let cluster = cfg.cluster_config(cfg.epochs * rounds_per_epoch);
    let objective = in_section("attack", ClassifierObjective::new(cfg.model.clone(), cfg.attack))?;
    let eval_attack = cfg.eval_attack();
    let seed = cfg.cluster.seed;

    let report_at = |theta: &LayeredParams| -> Result<EvalReport> {
        let mut r = eval::evaluate(&cfg.model, theta, &test, &eval_attack, seed)?;
        if cfg.eval_fosp {
            r.fosp = Some(eval::fosp_of(&objective, theta, &train, cfg.lambda, seed)?);
        }
        Ok(r)
    };

    let mut metrics_csv = format!("{METRICS_HEADER}\n");
    let mut eval_csv = format!("{}\n", eval_header(cfg.model.class_count));
    let mut final_eval = None;
    let last = cluster.rounds;
    let run = runtime::run_training(
        &cluster,
        &objective,
        &train,
        cfg.model.init_params(cfg.init_seed()),
        &cfg.optimizer,
        &cfg.schedule,
        &mut |m, theta| {
            let due = m.round == last || (cfg.eval_every > 0 && m.round % cfg.eval_every == 0);
            let report = if due { Some(report_at(theta)?) } else { None };
            metrics_csv.push_str(&metrics_row(m, report.as_ref(), cfg.timing));
            metrics_csv.push('\n');
            if let Some(r) = report {
                eval_csv.push_str(&eval_row(m.round, m.epoch, &r));
                eval_csv.push('\n');
                final_eval = Some(r);
            }
            Ok(())
        },
    )?;
    Ok(ExperimentOutcome {
        run,
        final_eval,
        metrics_csv,
        eval_csv,
        output_dir: cfg.output_dir(),
    })
}

/// Runs the experiment and writes the metrics CSV, eval CSV and checkpoint.
/// A diverged run still writes its outputs, then returns `Err(Diverged)`.
pub fn run_experiment(config_path: &Path) -> Result<ExperimentOutcome> {
    let cfg = ExperimentConfig::load(config_path)?;
    let outcome = execute(&cfg)?;
    let dir = &outcome.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(path, e))
    };
    write(&cfg.output.metrics_csv, &outcome.metrics_csv)?;
    write(&cfg.output.eval_csv, &outcome.eval_csv)?;
    outcome
        .run
        .checkpoint(Some(cfg.model.clone()), cfg.cluster.seed)
        .save(&dir.join(&cfg.output.checkpoint))?;
    outcome.run.check()?;
    Ok(outcome)
}

/// Evaluates a saved checkpoint on the config's test set.
pub fn eval_checkpoint(checkpoint: &Path, config_path: &Path) -> Result<EvalReport> {
    let cfg = ExperimentConfig::load(config_path)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let spec = ckpt.model.clone().unwrap_or_else(|| cfg.model.clone());
    if spec != cfg.model {
        return Err(Error::config("model", "checkpoint was trained with a different model"));
    }
    let test = cfg.test_set()?;
    let mut report = eval::evaluate(&spec, &ckpt.theta, &test, &cfg.eval_attack(), cfg.cluster.seed)?;
    if cfg.eval_fosp {
        let train = cfg.training_set()?;
        report.fosp = Some(eval::fosp_metric(
            &spec,
            &ckpt.theta,
            &train,
            &cfg.attack,
            cfg.lambda,
            cfg.cluster.seed,
        )?);
    }
    Ok(report)
}
