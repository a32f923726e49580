//! Reference loops built directly from the model, attack and optimizer
//! modules, bypassing the distributed runtime.

#![allow(dead_code)]

use dat_core::attack::{self, AttackConfig};
use dat_core::data::Dataset;
use dat_core::model::{self, LabeledBatch, ModelSpec};
use dat_core::numeric::{LayeredParams, Purpose, SeededRng, StreamId};
use dat_core::optim::{LrSchedule, OptimizerConfig};

fn robust_step_gradient(
    spec: &ModelSpec,
    theta: &LayeredParams,
    data: &Dataset,
    indices: &[usize],
    attack: &AttackConfig,
    mut rng_for: impl FnMut(usize) -> SeededRng,
) -> LayeredParams {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for &i in indices {
        let s = &data.samples[i];
        let mut rng = rng_for(i);
        let delta = attack::perturb(spec, theta, &s.x, s.y, attack, &mut rng).unwrap();
        inputs.push(s.x.iter().zip(&delta).map(|(a, b)| a + b).collect());
        labels.push(s.y);
    }
    model::grad_theta(spec, theta, &LabeledBatch::new(inputs, labels).unwrap()).unwrap()
}

/// Single-machine AT loop drawing its batches and attack noise from the
/// same streams a one-worker cluster uses. Returns θ after every round.
#[allow(clippy::too_many_arguments)]
pub fn centralized_reference(
    spec: &ModelSpec,
    attack: &AttackConfig,
    data: &Dataset,
    theta0: LayeredParams,
    optimizer: &OptimizerConfig,
    schedule: &LrSchedule,
    batch: usize,
    rounds: u64,
    seed: u64,
) -> Vec<LayeredParams> {
    let mut opt = optimizer.build(&spec.layout()).unwrap();
    let rounds_per_epoch = data.len().div_ceil(batch) as u64;
    let mut theta = theta0;
    let mut trajectory = Vec::new();
    for t in 0..rounds {
        let mut rng = SeededRng::new(seed, StreamId::new(0, t, Purpose::Batch));
        let mut idx = rng.sample_indices(data.len(), batch);
        idx.sort_unstable();
        let g = robust_step_gradient(spec, &theta, data, &idx, attack, |i| {
            SeededRng::new(seed, StreamId::new(0, t, Purpose::Attack(i as u64)))
        });
        theta = opt.step(&theta, &g, schedule.eta(t, rounds_per_epoch)).unwrap();
        trajectory.push(theta.clone());
    }
    trajectory
}

/// Epoch-based AT on one machine: reshuffle each epoch and walk the data in
/// consecutive batches, the last one possibly short.
#[allow(clippy::too_many_arguments)]
pub fn centralized_epochs(
    spec: &ModelSpec,
    attack: &AttackConfig,
    data: &Dataset,
    theta0: LayeredParams,
    optimizer: &OptimizerConfig,
    schedule: &LrSchedule,
    batch: usize,
    epochs: u64,
    seed: u64,
) -> LayeredParams {
    let mut opt = optimizer.build(&spec.layout()).unwrap();
    let rounds_per_epoch = data.len().div_ceil(batch) as u64;
    let mut rng = SeededRng::from_seed(seed ^ 0x5eed);
    let mut theta = theta0;
    let mut t = 0;
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let g = robust_step_gradient(spec, &theta, data, chunk, attack, |i| {
                SeededRng::from_seed(seed.wrapping_mul(31).wrapping_add(t * 1_000_003 + i as u64))
            });
            theta = opt.step(&theta, &g, schedule.eta(t, rounds_per_epoch)).unwrap();
            t += 1;
        }
    }
    theta
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
