//! Standard and robust accuracy, and the first-order stationarity metric.

use rayon::prelude::*;

use crate::attack::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec};
use crate::numeric::{LayeredParams, Purpose, SeededRng, StreamId, SERVER_ID};
use crate::runtime::{self, ClassifierObjective, Objective};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ta: f64,
    pub ra: f64,
    pub fosp: Option<f64>,
    /// Clean accuracy per class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub attack: AttackConfig,
}

fn nonempty(test: &Dataset) -> Result<()> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    Ok(())
}

fn clean_hits(spec: &ModelSpec, theta: &LayeredParams, test: &Dataset) -> Result<Vec<bool>> {
    test.samples
        .par_iter()
        .map(|s| Ok(model::predict(spec, theta, &s.x)? == s.y))
        .collect()
}

fn fraction(hits: &[bool]) -> f64 {
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Fraction of test samples classified correctly.
pub fn eval_standard(spec: &ModelSpec, theta: &LayeredParams, test: &Dataset) -> Result<f64> {
    nonempty(test)?;
    Ok(fraction(&clean_hits(spec, theta, test)?))
}

/// Stream for the evaluation attack on test sample `index`.
pub fn eval_stream(index: usize) -> StreamId {
    StreamId::new(SERVER_ID, 0, Purpose::Eval(index as u64))
}

fn robust_hits(
    spec: &ModelSpec,
    theta: &LayeredParams,
    test: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    attack.validate()?;
    test.samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = SeededRng::new(seed, eval_stream(i));
            let delta = attack::perturb(spec, theta, &s.x, s.y, attack, &mut rng)?;
            let x: Vec<f64> = s.x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            Ok(model::predict(spec, theta, &x)? == s.y)
        })
        .collect()
}

/// Fraction of test samples still classified correctly at `x + δ(x)`.
pub fn eval_robust(
    spec: &ModelSpec,
    theta: &LayeredParams,
    test: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    nonempty(test)?;
    Ok(fraction(&robust_hits(spec, theta, test, attack, seed)?))
}

/// `‖(1/|D|) Σ [λ∇ℓ + ∇φ(θ; x + δ(x))]‖₂` over the whole dataset.
pub fn fosp_metric(
    spec: &ModelSpec,
    theta: &LayeredParams,
    data: &Dataset,
    inner: &AttackConfig,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    let objective = ClassifierObjective::new(spec.clone(), *inner)?;
    fosp_of(&objective, theta, data, lambda, seed)
}

pub fn fosp_of(
    objective: &dyn Objective,
    theta: &LayeredParams,
    data: &Dataset,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    Ok(runtime::full_gradient(objective, theta, data, lambda, seed)?.1.norm())
}

pub fn evaluate(
    spec: &ModelSpec,
    theta: &LayeredParams,
    test: &Dataset,
    attack: &AttackConfig,
    seed: u64,
) -> Result<EvalReport> {
    nonempty(test)?;
    let clean = clean_hits(spec, theta, test)?;
    let robust = robust_hits(spec, theta, test, attack, seed)?;
    let mut correct = vec![0usize; test.class_count];
    let mut total = vec![0usize; test.class_count];
    for (s, &hit) in test.samples.iter().zip(&clean) {
        total[s.y] += 1;
        correct[s.y] += usize::from(hit);
    }
    Ok(EvalReport {
        ta: fraction(&clean),
        ra: fraction(&robust),
        fosp: None,
        per_class: correct
            .iter()
            .zip(&total)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect(),
        attack: *attack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackInit;
    use crate::data::{gen_two_moons, Sample};

    #[test]
    fn zero_model_on_balanced_data_scores_half() {
        let d = gen_two_moons(40, 0.1, 1).unwrap();
        let spec = ModelSpec::linear(2, 2).unwrap();
        let theta = LayeredParams::zeros(&spec.layout());
        assert_eq!(eval_standard(&spec, &theta, &d).unwrap(), 0.5);
    }

    #[test]
    fn hand_counted_confusion() {
        // θ = [[1, 0], [0, 1]], b = 0: predicts argmax of the input.
        let spec = ModelSpec::linear(2, 2).unwrap();
        let theta = LayeredParams::from_layers(vec![vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let pts = [
            ([2.0, 1.0], 0),
            ([0.5, 0.1], 0),
            ([1.0, 1.0], 0),
            ([3.0, -1.0], 1),
            ([0.0, 1.0], 1),
            ([-1.0, 2.0], 1),
            ([0.2, 0.3], 1),
            ([0.3, 0.2], 1),
            ([5.0, 6.0], 0),
            ([-2.0, -3.0], 0),
        ];
        let samples = pts.iter().map(|(x, y)| Sample::labeled(x.to_vec(), *y)).collect();
        let d = Dataset::new(samples, 2, 2, "fixture").unwrap();
        // Class 0: hits at rows 0, 1, 2 (tie → 0), 9; miss at 8. Class 1: hits at 4, 5, 6.
        let r = evaluate(&spec, &theta, &d, &AttackConfig::pgd_default(0.0, 20), 0).unwrap();
        assert_eq!(r.ta, 0.7);
        assert_eq!(r.per_class, vec![Some(0.8), Some(0.6)]);
        assert_eq!(r.ra, r.ta);
    }

    #[test]
    fn single_step_pgd_matches_fgsm() {
        let d = gen_two_moons(60, 0.1, 2).unwrap();
        let spec = ModelSpec::mlp(2, vec![8], crate::model::Activation::Tanh, 2).unwrap();
        let theta = spec.init_params(3);
        let pgd = AttackConfig::pgd(0.3, 1, 0.3, AttackInit::UniformRandom);
        let fgsm = AttackConfig::fgsm(0.3, 0.3, AttackInit::UniformRandom);
        assert_eq!(
            robust_hits(&spec, &theta, &d, &pgd, 5).unwrap(),
            robust_hits(&spec, &theta, &d, &fgsm, 5).unwrap()
        );
    }
}
