//! Outer-minimization oracles: LAMB moments with the layerwise adaptive
//! learning rate, and momentum SGD as the baseline without layerwise scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{norm2, LayeredParams, Layout};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_ZETA: f64 = 1e-6;
pub const DEFAULT_CLIP_LOWER: f64 = 0.0;
pub const DEFAULT_CLIP_UPPER: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LalrConfig {
    pub c_l: f64,
    pub c_u: f64,
}

impl Default for LalrConfig {
    fn default() -> Self {
        Self {
            c_l: DEFAULT_CLIP_LOWER,
            c_u: DEFAULT_CLIP_UPPER,
        }
    }
}

impl LalrConfig {
    pub fn new(c_l: f64, c_u: f64) -> Result<Self> {
        let cfg = Self { c_l, c_u };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_l >= 0.0 && self.c_l < self.c_u && self.c_u.is_finite()) {
            return Err(Error::invalid(format!(
                "layerwise clip bounds need 0 <= c_l < c_u, got ({}, {})",
                self.c_l, self.c_u
            )));
        }
        Ok(())
    }
}

/// Layer scaling factor `min(max(norm, c_l), c_u)`.
pub fn tau(norm: f64, cfg: &LalrConfig) -> f64 {
    norm.max(cfg.c_l).min(cfg.c_u)
}

/// Per-layer update `θ_i − τ(‖θ_i‖)·η/‖u_i‖ · u_i`. Layers whose direction
/// has zero norm are left unchanged.
pub fn lalr_step(theta: &LayeredParams, u: &LayeredParams, cfg: &LalrConfig, eta: f64) -> Result<LayeredParams> {
    if !theta.same_layout(u) {
        return Err(Error::invalid("direction layout differs from parameters"));
    }
    let mut next = theta.clone();
    for (layer, dir) in next.layers_mut().iter_mut().zip(u.layers()) {
        let u_norm = norm2(dir);
        if u_norm == 0.0 {
            continue;
        }
        let scale = tau(norm2(layer), cfg) * eta / u_norm;
        for (p, d) in layer.iter_mut().zip(dir) {
            *p -= scale * d;
        }
    }
    Ok(next)
}

/// Adam-style moments feeding the layerwise step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambState {
    pub m: LayeredParams,
    pub v: LayeredParams,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub zeta: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl LambState {
    pub fn new(layout: &Layout, beta1: f64, beta2: f64, zeta: f64) -> Result<Self> {
        let unit = 0.0..1.0;
        if !unit.contains(&beta1) || !(beta2 > 0.0 && beta2 < 1.0) || !(zeta > 0.0) {
            return Err(Error::invalid(format!(
                "LAMB needs β₁ ∈ [0,1), β₂ ∈ (0,1), ζ > 0; got ({beta1}, {beta2}, {zeta})"
            )));
        }
        Ok(Self {
            m: LayeredParams::zeros(layout),
            v: LayeredParams::zeros(layout),
            t: 0,
            beta1,
            beta2,
            zeta,
            weight_decay: 0.0,
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Updates the moments with `grad` and returns the bias-corrected ratio
    /// `u = m̂ / (√v̂ + ζ)`. Weight decay, if any, is folded into `grad` by
    /// the caller (see [`Optimizer::step`]).
    pub fn advance(&mut self, grad: &LayeredParams) -> Result<LayeredParams> {
        if !grad.same_layout(&self.m) {
            return Err(Error::invalid("gradient layout differs from optimizer state"));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut u = LayeredParams::zeros_like(grad);
        for (((m, v), g), out) in self
            .m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad.iter())
            .zip(u.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *out = m_hat / (v_hat.sqrt() + self.zeta);
        }
        Ok(u)
    }
}

/// Functional form of [`LambState::advance`]: returns `(u, state')`.
pub fn lamb_direction(state: &LambState, grad: &LayeredParams) -> Result<(LayeredParams, LambState)> {
    let mut next = state.clone();
    let u = next.advance(grad)?;
    Ok((u, next))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentumState {
    pub velocity: LayeredParams,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentumState {
    pub fn new(layout: &Layout, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "momentum {momentum} must be in [0,1), weight decay {weight_decay} nonnegative"
            )));
        }
        Ok(Self {
            velocity: LayeredParams::zeros(layout),
            momentum,
            weight_decay,
        })
    }
}

/// `v ← μ v + (ĝ + λ θ)`, `θ ← θ − η v`.
pub fn sgd_momentum_step(
    theta: &LayeredParams,
    grad: &LayeredParams,
    state: &SgdMomentumState,
    eta: f64,
) -> Result<(LayeredParams, SgdMomentumState)> {
    if !theta.same_layout(grad) || !theta.same_layout(&state.velocity) {
        return Err(Error::invalid("layouts of θ, gradient and velocity differ"));
    }
    let mut next_state = state.clone();
    let mut next = theta.clone();
    for ((v, g), (p, p0)) in next_state
        .velocity
        .iter_mut()
        .zip(grad.iter())
        .zip(next.iter_mut().zip(theta.iter()))
    {
        *v = state.momentum * *v + (g + state.weight_decay * p0);
        *p -= eta * *v;
    }
    Ok((next, next_state))
}

/// Piecewise-constant learning rate with ×`decay_factor` drops at the given
/// epochs and an optional linear warm-up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub decay_epochs: Vec<f64>,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default)]
    pub warmup_epochs: f64,
}

fn default_decay_factor() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay_epochs: Vec::new(),
            decay_factor: default_decay_factor(),
            warmup_epochs: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0) || !self.base.is_finite() {
            return Err(Error::invalid(format!("learning rate {}", self.base)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!("decay factor {}", self.decay_factor)));
        }
        if !(self.warmup_epochs >= 0.0) {
            return Err(Error::invalid("warm-up epochs must be nonnegative"));
        }
        Ok(())
    }

    /// Learning rate for round `t` (0-based) with `rounds_per_epoch` rounds per epoch.
    pub fn eta(&self, t: u64, rounds_per_epoch: u64) -> f64 {
        let rpe = rounds_per_epoch.max(1) as f64;
        let epoch = t as f64 / rpe;
        let drops = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        let mut eta = self.base * self.decay_factor.powi(drops as i32);
        if self.warmup_epochs > 0.0 && epoch < self.warmup_epochs {
            eta *= ((t + 1) as f64 / (self.warmup_epochs * rpe)).min(1.0);
        }
        eta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    LambLalr {
        #[serde(default = "default_c_l")]
        c_l: f64,
        #[serde(default = "default_c_u")]
        c_u: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_zeta")]
        zeta: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    SgdMomentum {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_c_l() -> f64 {
    DEFAULT_CLIP_LOWER
}
fn default_c_u() -> f64 {
    DEFAULT_CLIP_UPPER
}
fn default_beta1() -> f64 {
    DEFAULT_BETA1
}
fn default_beta2() -> f64 {
    DEFAULT_BETA2
}
fn default_zeta() -> f64 {
    DEFAULT_ZETA
}
fn default_momentum() -> f64 {
    0.9
}

impl OptimizerConfig {
    pub fn lamb_lalr() -> Self {
        OptimizerConfig::LambLalr {
            c_l: DEFAULT_CLIP_LOWER,
            c_u: DEFAULT_CLIP_UPPER,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            zeta: DEFAULT_ZETA,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig::SgdMomentum {
            momentum,
            weight_decay,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::LambLalr { .. } => "lamb-lalr",
            OptimizerConfig::SgdMomentum { .. } => "sgd-momentum",
        }
    }

    pub fn build(&self, layout: &Layout) -> Result<Optimizer> {
        match *self {
            OptimizerConfig::LambLalr {
                c_l,
                c_u,
                beta1,
                beta2,
                zeta,
                weight_decay,
            } => Ok(Optimizer::LambLalr {
                state: LambState::new(layout, beta1, beta2, zeta)?.with_weight_decay(weight_decay),
                lalr: LalrConfig::new(c_l, c_u)?,
            }),
            OptimizerConfig::SgdMomentum {
                momentum,
                weight_decay,
            } => Ok(Optimizer::SgdMomentum(SgdMomentumState::new(
                layout,
                momentum,
                weight_decay,
            )?)),
        }
    }
}

/// An outer oracle together with its state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    LambLalr { state: LambState, lalr: LalrConfig },
    SgdMomentum(SgdMomentumState),
}

impl Optimizer {
    pub fn step(&mut self, theta: &LayeredParams, grad: &LayeredParams, eta: f64) -> Result<LayeredParams> {
        match self {
            Optimizer::LambLalr { state, lalr } => {
                let u = if state.weight_decay != 0.0 {
                    let mut g = grad.clone();
                    g.axpy(state.weight_decay, theta);
                    state.advance(&g)?
                } else {
                    state.advance(grad)?
                };
                lalr_step(theta, &u, lalr, eta)
            }
            Optimizer::SgdMomentum(state) => {
                let (next, next_state) = sgd_momentum_step(theta, grad, state, eta)?;
                *state = next_state;
                Ok(next)
            }
        }
    }
}
