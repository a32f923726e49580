//! Inner-maximization oracles: signed-gradient ascent (FGSM, PGD) inside an
//! ℓ∞ ball, and a strongly concave quadratic family with a closed-form
//! maximizer used to check approximate-oracle guarantees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelSpec};
use crate::numeric::{dot, norm2, project_linf, sign0, LayeredParams, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    ExactQuadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    #[default]
    Zero,
    /// Each component uniform in `[-ε, ε]`.
    UniformRandom,
}

pub const DEFAULT_PGD_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub init: AttackInit,
}

fn default_steps() -> usize {
    DEFAULT_PGD_STEPS
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64, step_size: f64, init: AttackInit) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size,
            init,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64, init: AttackInit) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size,
            init,
        }
    }

    /// PGD with `steps` iterations and step size ε/4 (any positive value when ε = 0).
    pub fn pgd_default(epsilon: f64, steps: usize) -> Self {
        Self::pgd(epsilon, steps, default_step_size(epsilon), AttackInit::Zero)
    }

    pub fn exact_quadratic(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::ExactQuadratic,
            epsilon,
            steps: 1,
            step_size: 1.0,
            init: AttackInit::Zero,
        }
    }

    /// Number of ascent iterations actually run.
    pub fn effective_steps(&self) -> usize {
        match self.kind {
            AttackKind::Fgsm => 1,
            _ => self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("attack epsilon {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("attack step size {}", self.step_size)));
        }
        match self.kind {
            AttackKind::Fgsm if self.steps != 1 => {
                Err(Error::invalid("fgsm takes exactly one step"))
            }
            AttackKind::Pgd if self.steps == 0 => Err(Error::invalid("pgd needs at least one step")),
            _ => Ok(()),
        }
    }
}

pub fn default_step_size(epsilon: f64) -> f64 {
    if epsilon > 0.0 {
        epsilon / 4.0
    } else {
        1.0
    }
}

fn initial_delta(dim: usize, cfg: &AttackConfig, rng: &mut SeededRng) -> Vec<f64> {
    match cfg.init {
        AttackInit::Zero => vec![0.0; dim],
        AttackInit::UniformRandom => (0..dim)
            .map(|_| rng.uniform_in(-cfg.epsilon, cfg.epsilon))
            .collect(),
    }
}

/// Projected signed-gradient ascent on `δ` from the configured start.
///
/// `grad` returns ∇_δ φ at the given perturbation. Runs
/// `cfg.effective_steps()` iterations; the result always lies in the ball.
pub fn signed_ascent<G>(mut grad: G, dim: usize, cfg: &AttackConfig, rng: &mut SeededRng) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let origin = vec![0.0; dim];
    let mut z = initial_delta(dim, cfg, rng);
    for _ in 0..cfg.effective_steps() {
        let g = grad(&z)?;
        if g.len() != dim {
            return Err(Error::invalid("gradient length differs from perturbation length"));
        }
        let stepped: Vec<f64> = z
            .iter()
            .zip(&g)
            .map(|(zi, gi)| zi + cfg.step_size * sign0(*gi))
            .collect();
        z = project_linf(&stepped, &origin, cfg.epsilon)?;
    }
    Ok(z)
}

fn input_gradient_at<'a>(
    spec: &'a ModelSpec,
    theta: &'a LayeredParams,
    x: &'a [f64],
    y: usize,
) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a {
    move |delta| {
        let shifted: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
        model::grad_input(spec, theta, &shifted, y)
    }
}

/// One projected signed-gradient step against the classifier loss.
pub fn fgsm(
    spec: &ModelSpec,
    theta: &LayeredParams,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if cfg.kind != AttackKind::Fgsm {
        return Err(Error::invalid("fgsm called with a non-fgsm config"));
    }
    signed_ascent(input_gradient_at(spec, theta, x, y), x.len(), cfg, rng)
}

/// `cfg.steps` projected signed-gradient steps against the classifier loss.
pub fn pgd(
    spec: &ModelSpec,
    theta: &LayeredParams,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if cfg.kind != AttackKind::Pgd {
        return Err(Error::invalid("pgd called with a non-pgd config"));
    }
    signed_ascent(input_gradient_at(spec, theta, x, y), x.len(), cfg, rng)
}

/// Dispatches on `cfg.kind`. The closed-form oracle has no classifier analogue.
pub fn perturb(
    spec: &ModelSpec,
    theta: &LayeredParams,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(spec, theta, x, y, cfg, rng),
        AttackKind::Pgd => pgd(spec, theta, x, y, cfg, rng),
        AttackKind::ExactQuadratic => Err(Error::invalid(
            "exact-quadratic oracle only applies to the quadratic game",
        )),
    }
}

/// Strongly concave inner problem `φ(θ, δ) = (Aθ)ᵀδ − (μ/2)‖δ‖²` over
/// `‖δ‖∞ ≤ ε`. `linear_term` caches `Aθ`; `l_phi` is the operator norm of
/// `A`, the Lipschitz constant of `∇_θ φ = Aᵀδ` in `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticInnerSpec {
    /// Rows of `A`, shape `(k, p)`.
    pub coupling: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub linear_term: Vec<f64>,
    pub mu: f64,
    pub l_phi: f64,
    pub epsilon: f64,
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn operator_norm(rows: &[Vec<f64>]) -> f64 {
    let p = rows.first().map_or(0, Vec::len);
    if p == 0 {
        return 0.0;
    }
    let mut v: Vec<f64> = (0..p).map(|j| 1.0 + 0.1 * j as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let av: Vec<f64> = rows.iter().map(|r| dot(r, &v)).collect();
        let mut atav = vec![0.0; p];
        for (r, s) in rows.iter().zip(&av) {
            for (t, a) in atav.iter_mut().zip(r) {
                *t += a * s;
            }
        }
        let n = norm2(&atav);
        if n == 0.0 {
            return 0.0;
        }
        let next = n.sqrt();
        v = atav.into_iter().map(|x| x / n).collect();
        if (next - sigma).abs() <= 1e-15 * next {
            return next;
        }
        sigma = next;
    }
    sigma
}

impl QuadraticInnerSpec {
    pub fn new(coupling: Vec<Vec<f64>>, theta: Vec<f64>, mu: f64, epsilon: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::invalid(format!("concavity μ = {mu} must be positive")));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::invalid(format!("negative ball radius {epsilon}")));
        }
        if coupling.is_empty() || coupling.iter().any(|r| r.len() != theta.len()) {
            return Err(Error::invalid("coupling rows must match θ length"));
        }
        let linear_term = coupling.iter().map(|r| dot(r, &theta)).collect();
        let l_phi = operator_norm(&coupling);
        Ok(Self {
            coupling,
            theta,
            linear_term,
            mu,
            l_phi,
            epsilon,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear_term.len()
    }

    pub fn phi(&self, delta: &[f64]) -> f64 {
        dot(&self.linear_term, delta) - 0.5 * self.mu * dot(delta, delta)
    }

    pub fn grad_delta(&self, delta: &[f64]) -> Vec<f64> {
        self.linear_term
            .iter()
            .zip(delta)
            .map(|(g, d)| g - self.mu * d)
            .collect()
    }

    /// `∇_θ φ = Aᵀδ`.
    pub fn grad_theta(&self, delta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.theta.len()];
        for (row, d) in self.coupling.iter().zip(delta) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * d;
            }
        }
        out
    }

    /// PGD on this problem with the given ascent config.
    pub fn pgd(&self, cfg: &AttackConfig, rng: &mut SeededRng) -> Result<Vec<f64>> {
        signed_ascent(|d| Ok(self.grad_delta(d)), self.dim(), cfg, rng)
    }
}

/// Exact constrained maximizer: componentwise `clamp(g_j / μ, −ε, ε)`.
pub fn exact_quadratic_max(spec: &QuadraticInnerSpec) -> Result<Vec<f64>> {
    if !(spec.mu > 0.0) {
        return Err(Error::invalid(format!("concavity μ = {} must be positive", spec.mu)));
    }
    Ok(spec
        .linear_term
        .iter()
        .map(|g| (g / spec.mu).clamp(-spec.epsilon, spec.epsilon))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `max_{‖δ'‖∞≤ε} ⟨δ' − δ, ∇_δ φ(δ)⟩`, the variational gap at δ.
    pub variational_gap: f64,
    /// `μ·ε_target / L_φ²`, the level the gap is tested against.
    pub tolerance: f64,
    pub is_eps_approx: bool,
    /// `‖∇_θ φ(δ) − ∇_θ φ(δ*)‖²`.
    pub theta_grad_gap: f64,
    pub bound_holds: bool,
}

/// Checks whether `delta` is a `(μ ε_target / L_φ²)`-approximate inner
/// solution and whether the squared θ-gradient gap it induces is within
/// `ε_target`.
pub fn approx_gap_check(spec: &QuadraticInnerSpec, delta: &[f64], eps_target: f64) -> Result<GapReport> {
    if delta.len() != spec.dim() {
        return Err(Error::invalid("perturbation length differs from problem dimension"));
    }
    let grad = spec.grad_delta(delta);
    // The linear maximum over the box sits at ε·sign(∇).
    let variational_gap =
        spec.epsilon * grad.iter().map(|g| g.abs()).sum::<f64>() - dot(delta, &grad);
    let tolerance = spec.mu * eps_target / (spec.l_phi * spec.l_phi);
    let star = exact_quadratic_max(spec)?;
    let diff: Vec<f64> = delta.iter().zip(&star).map(|(a, b)| a - b).collect();
    let gap_vec = spec.grad_theta(&diff);
    let theta_grad_gap = dot(&gap_vec, &gap_vec);
    Ok(GapReport {
        variational_gap,
        tolerance,
        is_eps_approx: variational_gap <= tolerance,
        theta_grad_gap,
        bound_holds: theta_grad_gap <= eps_target,
    })
}
