//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::time::Instant;

use dat_core::attack::{self, AttackConfig, AttackInit, QuadraticInnerSpec};
use dat_core::compress::{self, QuantMode, QuantizerConfig};
use dat_core::data::{self, Dataset};
use dat_core::eval;
use dat_core::harness::{self, ExperimentConfig};
use dat_core::model::{self, Activation, LabeledBatch, ModelSpec};
use dat_core::numeric::{finite_diff_grad, LayeredParams, Purpose, SeededRng, StreamId, DEFAULT_FD_STEP};
use dat_core::optim::{LrSchedule, OptimizerConfig};
use dat_core::probe::{self, LargeBatchLalr};
use dat_core::runtime::{self, ClassifierObjective, ClusterConfig, QuadraticGame};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn rng(lane: u64) -> SeededRng {
    SeededRng::new(20_240_601, StreamId::new(0, 0, Purpose::Probe(lane)))
}

fn random_vectors(count: usize, d: usize, r: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..d).map(|_| r.normal()).collect()).collect()
}

fn criterion_1_unbiased() -> Verdict {
    let draws = 100_000;
    let mut worst: (f64, String) = (0.0, String::new());
    let mut compared = 0;
    for (lane, d) in [(1u64, 16usize), (2, 256)] {
        let vectors = random_vectors(10, d, &mut rng(lane));
        for b in [1u32, 2, 4, 8] {
            let s = (1u64 << b) as f64;
            for (v, g) in vectors.iter().enumerate() {
                let mut r = rng(1000 * lane + 10 * b as u64 + v as u64);
                let mut sum = vec![0.0; d];
                let mut norm = 0.0;
                for _ in 0..draws {
                    let msg = compress::quantize(g, b, &mut r).unwrap();
                    norm = msg.norm() as f64;
                    for (acc, (q, x)) in sum.iter_mut().zip(compress::decode(&msg).unwrap().iter().zip(g)) {
                        *acc += q - x;
                    }
                }
                for (j, x) in g.iter().enumerate() {
                    // Two-point law on adjacent levels norm/s apart.
                    let scaled = s * x.abs() / norm;
                    let p = scaled - scaled.floor();
                    let se = norm / s * (p * (1.0 - p) / draws as f64).sqrt();
                    let dev = (sum[j] / draws as f64).abs();
                    let z = if se > 0.0 {
                        dev / se
                    } else if dev == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    compared += 1;
                    if z > worst.0 {
                        worst = (z, format!("d={d} b={b} vector {v} coord {j}"));
                    }
                }
            }
        }
    }
    verdict(
        worst.0 <= 4.0,
        format!(
            "max |mean − g|/SE = {:.3} at {} ({compared} coordinates, {draws} draws each)",
            worst.0, worst.1
        ),
    )
}

fn criterion_2_variance() -> Verdict {
    let trials = 10_000;
    let mut ok = true;
    let mut tightest: (f64, String) = (f64::INFINITY, String::new());
    for (lane, d) in [(1u64, 16usize), (2, 256)] {
        let vectors = random_vectors(10, d, &mut rng(lane));
        for b in [1u32, 2, 4, 8] {
            let s = (1u64 << b) as f64;
            let bound = (d as f64 / (s * s)).min((d as f64).sqrt() / s);
            for (v, g) in vectors.iter().enumerate() {
                let mut r = rng(5000 + 1000 * lane + 10 * b as u64 + v as u64);
                let g2: f64 = g.iter().map(|x| x * x).sum();
                let (mut sum, mut sq) = (0.0, 0.0);
                for _ in 0..trials {
                    let q = compress::decode(&compress::quantize(g, b, &mut r).unwrap()).unwrap();
                    let e = q.iter().zip(g).map(|(a, x)| (a - x).powi(2)).sum::<f64>() / g2;
                    sum += e;
                    sq += e * e;
                }
                let n = trials as f64;
                let mean = sum / n;
                let se = ((sq - sum * sum / n) / (n - 1.0) / n).sqrt();
                ok &= mean <= bound + 3.0 * se;
                let slack = (bound + 3.0 * se - mean) / bound;
                if slack < tightest.0 {
                    tightest = (slack, format!("d={d} b={b}: {mean:.4e} vs bound {bound:.4e}"));
                }
            }
        }
    }
    verdict(ok, format!("tightest case {}", tightest.1))
}

fn criterion_3_bits() -> Verdict {
    let mut r = rng(3);
    let mut cases = 0;
    let mut overflow_cases = 0;
    let mut bad = Vec::new();
    for d in [1usize, 2, 3, 7, 8, 16, 100, 256] {
        for b in [1u32, 2, 3, 4, 5, 8, 16, 31, 32] {
            let mut inputs = random_vectors(3, d, &mut r);
            let mut spike = vec![0.0; d];
            spike[d / 2] = -2.5;
            inputs.push(spike);
            for g in inputs {
                let msg = compress::quantize(&g, b, &mut r).unwrap();
                let k = msg.levels().iter().filter(|&&l| l == 1u64 << b).count() as u64;
                let bytes = compress::serialize(&msg);
                let want = (32 + d as u64 + b as u64 * d as u64 + 32 * k).div_ceil(8);
                let plain = 32 + d as u64 + b as u64 * d as u64;
                cases += 1;
                if k > 0 {
                    overflow_cases += 1;
                } else if msg.bits_used() != plain {
                    bad.push(format!("d={d} b={b}: {} bits, expected {plain}", msg.bits_used()));
                }
                if bytes.len() as u64 != want {
                    bad.push(format!("d={d} b={b}: {} bytes, expected {want}", bytes.len()));
                }
                if compress::deserialize(&bytes, d, b).unwrap() != msg {
                    bad.push(format!("d={d} b={b}: round trip differs"));
                }
            }
        }
    }
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{cases} messages ({overflow_cases} with overflow) sized exactly")
        } else {
            bad.join("; ")
        },
    )
}

fn criterion_4_gradients() -> Verdict {
    let archs = [
        ("linear", ModelSpec::linear(4, 3).unwrap()),
        ("mlp-relu", ModelSpec::mlp(4, vec![6, 5], Activation::Relu, 3).unwrap()),
        ("mlp-tanh", ModelSpec::mlp(4, vec![6, 5], Activation::Tanh, 3).unwrap()),
    ];
    let tol = 1e-5;
    let mut worst: (f64, String) = (0.0, String::new());
    for (a, (name, spec)) in archs.iter().enumerate() {
        let mut r = rng(400 + a as u64);
        let layout = spec.layout();
        for inst in 0..100 {
            let flat: Vec<f64> = (0..layout.total_dim()).map(|_| r.normal() * 0.7).collect();
            let theta = LayeredParams::unflatten(&layout, &flat).unwrap();
            let inputs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.normal()).collect()).collect();
            let labels: Vec<usize> = (0..3).map(|_| r.below(3)).collect();
            let batch = LabeledBatch::new(inputs.clone(), labels.clone()).unwrap();
            let analytic = model::grad_theta(spec, &theta, &batch).unwrap().flatten();
            let fd = finite_diff_grad(
                |t| model::loss(spec, &LayeredParams::unflatten(&layout, t).unwrap(), &batch).unwrap(),
                &flat,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            let gx = model::grad_input(spec, &theta, &inputs[0], labels[0]).unwrap();
            let fdx = finite_diff_grad(
                |x| {
                    let one = LabeledBatch::new(vec![x.to_vec()], vec![labels[0]]).unwrap();
                    model::loss(spec, &theta, &one).unwrap()
                },
                &inputs[0],
                DEFAULT_FD_STEP,
            )
            .unwrap();
            for (what, an, num) in [("θ", &analytic, &fd), ("x", &gx, &fdx)] {
                // Relative error of the whole gradient vector.
                let diff = an.iter().zip(num.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                let scale = norm2(an).max(norm2(num));
                let err = if scale == 0.0 { diff } else { diff / scale };
                if err > worst.0 {
                    worst = (err, format!("{name} instance {inst} ∇{what}"));
                }
            }
        }
    }
    verdict(
        worst.0 <= tol,
        format!("max relative error {:.3e} at {} (300 instances)", worst.0, worst.1),
    )
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_inner(r: &mut SeededRng) -> QuadraticInnerSpec {
    let k = 1 + r.below(6);
    let p = 1 + r.below(6);
    let a = (0..k).map(|_| (0..p).map(|_| r.normal()).collect()).collect();
    let theta = (0..p).map(|_| 2.0 * r.normal()).collect();
    QuadraticInnerSpec::new(a, theta, r.uniform_in(0.2, 3.0), r.uniform_in(0.05, 1.5)).unwrap()
}

fn criterion_5_inner_oracle() -> Verdict {
    let mut r = rng(5);
    let mut far = 0;
    for _ in 0..100 {
        let q = random_inner(&mut r);
        let alpha = q.epsilon / 64.0;
        let cfg = AttackConfig::pgd(q.epsilon, 200, alpha, AttackInit::Zero);
        let delta = q.pgd(&cfg, &mut r).unwrap();
        // Closed form, computed here independently of the library.
        let star: Vec<f64> = q
            .coupling
            .iter()
            .map(|row| {
                let g: f64 = row.iter().zip(&q.theta).map(|(a, t)| a * t).sum();
                (g / q.mu).clamp(-q.epsilon, q.epsilon)
            })
            .collect();
        if delta.iter().zip(&star).any(|(d, s)| (d - s).abs() > alpha) {
            far += 1;
        }
    }
    let mut holds = 0;
    let specs = 1000;
    for i in 0..specs {
        let q = random_inner(&mut r);
        let delta: Vec<f64> = if i % 2 == 0 {
            let steps = 1 + r.below(30);
            let cfg = AttackConfig::pgd(q.epsilon, steps, q.epsilon / 8.0, AttackInit::UniformRandom);
            q.pgd(&cfg, &mut r).unwrap()
        } else {
            (0..q.dim()).map(|_| r.uniform_in(-q.epsilon, q.epsilon)).collect()
        };
        let gap = attack::approx_gap_check(&q, &delta, 1.0).unwrap().variational_gap;
        let eps_target = (gap * q.l_phi * q.l_phi / q.mu * (1.0 + 1e-12)).max(1e-300);
        let rep = attack::approx_gap_check(&q, &delta, eps_target).unwrap();
        if rep.is_eps_approx && rep.bound_holds {
            holds += 1;
        }
    }
    verdict(
        far == 0 && holds == specs,
        format!("PGD within α on {}/100 specs; bound holds on {holds}/{specs}", 100 - far),
    )
}

fn moons_spec() -> ModelSpec {
    ModelSpec::mlp(2, vec![16], Activation::Relu, 2).unwrap()
}

fn criterion_6_reduction() -> Verdict {
    let spec = moons_spec();
    let data = data::gen_two_moons(256, 0.1, 6).unwrap();
    let attack = AttackConfig::pgd(0.1, 5, 0.025, AttackInit::UniformRandom);
    let objective = ClassifierObjective::new(spec.clone(), attack).unwrap();
    let theta0 = spec.init_params(6);
    let schedule = LrSchedule::constant(0.02);
    let mut diverging = Vec::new();
    for opt in [OptimizerConfig::lamb_lalr(), OptimizerConfig::sgd(0.9, 1e-4)] {
        let cfg = ClusterConfig::new(1, 32, 50, 6);
        let mut dat = Vec::new();
        runtime::run_training(&cfg, &objective, &data, theta0.clone(), &opt, &schedule, &mut |_, th| {
            dat.push(th.clone());
            Ok(())
        })
        .unwrap();
        let reference = common::centralized_reference(&spec, &attack, &data, theta0.clone(), &opt, &schedule, 32, 50, 6);
        if let Some(t) = (0..50).find(|&t| dat.get(t) != reference.get(t)) {
            diverging.push(format!("{} differs at round {}", opt.name(), t + 1));
        }
    }
    verdict(
        diverging.is_empty(),
        if diverging.is_empty() {
            "lamb-lalr and sgd-momentum trajectories bit-identical for 50 rounds".to_string()
        } else {
            diverging.join("; ")
        },
    )
}

fn criterion_7_variance_scaling() -> Verdict {
    let classes = 4;
    let data = data::gen_gaussian_mixture(classes, 5, 25_600, 1.5, 7).unwrap();
    let spec = ModelSpec::mlp(5, vec![8], Activation::Tanh, classes).unwrap();
    let objective = ClassifierObjective::new(spec.clone(), AttackConfig::pgd_default(0.1, 3)).unwrap();
    let theta = spec.init_params(7);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for m in [1usize, 2, 4, 8] {
        for b in [8usize, 32, 128] {
            let cfg = ClusterConfig::new(m, b, 0, 70 + m as u64);
            let rep = runtime::variance_probe(&theta, &objective, &data, &cfg, 200).unwrap();
            xs.push(((m * b) as f64).ln());
            ys.push(rep.variance.ln());
        }
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    verdict(
        (slope + 1.0).abs() <= 0.15,
        format!("log–log slope {slope:.4} over M∈{{1,2,4,8}} × B∈{{8,32,128}}"),
    )
}

fn criterion_8_quantization_monotone() -> Verdict {
    let bits = [2u32, 4, 8, 32];
    let mut ok = true;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut r = rng(800 + seed);
        let coupling = (0..6).map(|_| (0..10).map(|_| 0.5 * r.normal()).collect()).collect();
        let game = QuadraticGame::new(coupling, 1.0, AttackConfig::exact_quadratic(0.5)).unwrap();
        let data = data::gen_gaussian_mixture(2, 10, 512, 4.0, seed).unwrap();
        let opt = OptimizerConfig::sgd(0.0, 0.0);
        let schedule = LrSchedule {
            decay_epochs: vec![200.0, 350.0, 450.0],
            ..LrSchedule::constant(0.1)
        };
        let mut fosp = Vec::new();
        for b in bits {
            // Batches cover each shard, so quantization is the only noise.
            let mut cfg = ClusterConfig::new(4, 256, 500, seed);
            cfg.quantizer = QuantizerConfig::new(b, QuantMode::OneSided);
            let theta0 = LayeredParams::from_layers(vec![vec![0.1; 10]]).unwrap();
            let run = runtime::run_training(&cfg, &game, &data, theta0, &opt, &schedule, &mut |_, _| Ok(())).unwrap();
            fosp.push(eval::fosp_of(&game, &run.theta, &data, 0.0, seed).unwrap());
        }
        ok &= fosp.windows(2).all(|w| w[1] <= 1.1 * w[0]);
        rows.push(format!(
            "seed {seed}: {}",
            bits.iter()
                .zip(&fosp)
                .map(|(b, f)| format!("b={b} {f:.2e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    verdict(ok, rows.join(" | "))
}

fn criterion_9_large_batch() -> Verdict {
    let out = probe::large_batch_lalr_probe(&LargeBatchLalr::default()).unwrap();
    let wins = out.lamb_wins();
    let detail = out
        .ra
        .iter()
        .enumerate()
        .map(|(i, (l, s))| format!("seed {i}: lamb {l:.4} vs sgd {s:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        2 * wins > out.ra.len(),
        format!(
            "{detail}; lr tuned at B=32 → ({}, {}), scaled to ({:.4}, {:.4})",
            out.base_lr.0, out.base_lr.1, out.scaled_lr.0, out.scaled_lr.1
        ),
    )
}

struct Moons {
    test: Dataset,
    checkpoints: Vec<LayeredParams>,
}

fn criterion_10_end_to_end(keep: &mut Vec<Moons>) -> Verdict {
    let spec = moons_spec();
    let eps = 0.1;
    let attack = AttackConfig::pgd_default(eps, 10);
    let eval_attack = AttackConfig::pgd_default(eps, 20);
    let objective = ClassifierObjective::new(spec.clone(), attack).unwrap();
    let opt = OptimizerConfig::lamb_lalr();
    let epochs = 20;
    let schedule = LrSchedule {
        decay_epochs: vec![10.0, 15.0],
        ..LrSchedule::constant(0.05)
    };
    let mut ok = true;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let train = data::gen_two_moons(2048, 0.1, seed).unwrap();
        let test = data::gen_two_moons(2000, 0.1, seed + 500).unwrap();
        let theta0 = spec.init_params(seed);
        let mut cfg = ClusterConfig::new(4, 32, 0, seed);
        cfg.rounds = epochs * cfg.rounds_per_epoch(train.len());
        let mut checkpoints = Vec::new();
        let run = runtime::run_training(&cfg, &objective, &train, theta0.clone(), &opt, &schedule, &mut |m, th| {
            if m.round % 40 == 0 {
                checkpoints.push(th.clone());
            }
            Ok(())
        })
        .unwrap();
        let oracle = common::centralized_epochs(&spec, &attack, &train, theta0, &opt, &schedule, 128, epochs, seed);
        let ra_dat = eval::eval_robust(&spec, &run.theta, &test, &eval_attack, seed).unwrap();
        let ra_oracle = eval::eval_robust(&spec, &oracle, &test, &eval_attack, seed).unwrap();
        ok &= (ra_dat - ra_oracle).abs() <= 0.02;
        rows.push(format!("seed {seed}: DAT {ra_dat:.4} vs centralized {ra_oracle:.4}"));
        checkpoints.push(run.theta);
        checkpoints.push(oracle);
        keep.push(Moons { test, checkpoints });
    }
    verdict(ok, rows.join(", "))
}

const GOLDEN: &str = r#"{
    "model": {"architecture": {"kind": "mlp", "hidden": [8], "activation": "tanh"}, "input_dim": 2, "class_count": 2},
    "dataset": {"kind": "two-moons", "count": 512, "noise": 0.15, "seed": 11},
    "cluster": {"workers": 8, "per_worker_batch": 8, "seed": 11,
                "quantizer": {"bits": 4, "mode": "two-sided"}},
    "attack": {"kind": "pgd", "epsilon": 0.1, "steps": 5, "step_size": 0.025, "init": "uniform-random"},
    "optimizer": {"kind": "lamb-lalr"},
    "schedule": {"base": 0.05},
    "lambda": 0.5,
    "epochs": 3,
    "eval_every": 8,
    "eval_fosp": true
}"#;

fn criterion_11_determinism(keep: &mut Vec<Moons>) -> Verdict {
    let cfg = ExperimentConfig::from_json(GOLDEN).unwrap();
    let mut outputs = Vec::new();
    for threads in [1usize, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        for _ in 0..2 {
            let out = pool.install(|| harness::execute(&cfg)).unwrap();
            outputs.push((out.metrics_csv, out.eval_csv, out.run.theta));
        }
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    let rows = outputs[0].0.lines().count() - 1;
    keep.push(Moons {
        test: cfg.test_set().unwrap(),
        checkpoints: vec![outputs[0].2.clone()],
    });
    verdict(
        identical,
        format!("6 runs of the M=8 golden config on 1, 4 and 8 threads: {rows} metric rows, byte-identical CSVs = {identical}"),
    )
}

fn criterion_12_zero_radius(runs: &[Moons], specs: &[ModelSpec]) -> Verdict {
    let attacks = [
        AttackConfig::pgd_default(0.0, 20),
        AttackConfig::pgd(0.0, 7, 0.3, AttackInit::UniformRandom),
        AttackConfig::fgsm(0.0, 0.5, AttackInit::UniformRandom),
    ];
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for (run, spec) in runs.iter().zip(specs) {
        for theta in &run.checkpoints {
            let ta = eval::eval_standard(spec, theta, &run.test).unwrap();
            for a in &attacks {
                let ra = eval::eval_robust(spec, theta, &run.test, a, 12).unwrap();
                checked += 1;
                if ra != ta {
                    mismatches.push(format!("RA {ra} vs TA {ta}"));
                }
            }
        }
    }
    verdict(
        mismatches.is_empty() && checked > 0,
        format!("{checked} checkpoint/attack pairs, {} mismatches", mismatches.len()),
    )
}

fn main() {
    let mut moons = Vec::new();
    let mut results: Vec<(u32, &str, Verdict, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let started = Instant::now();
        let v = f();
        let secs = started.elapsed().as_secs_f64();
        println!(
            "{} criterion {id:>2} ({name}) [{secs:.1}s]: {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v, secs));
    };
    run(1, "quantizer unbiasedness", &mut criterion_1_unbiased);
    run(2, "quantizer variance bound", &mut criterion_2_variance);
    run(3, "bit accounting", &mut criterion_3_bits);
    run(4, "gradient correctness", &mut criterion_4_gradients);
    run(5, "inner-oracle correctness", &mut criterion_5_inner_oracle);
    run(6, "degenerate reduction", &mut criterion_6_reduction);
    run(7, "variance scaling", &mut criterion_7_variance_scaling);
    run(8, "quantization-error monotonicity", &mut criterion_8_quantization_monotone);
    run(9, "large-batch LALR", &mut criterion_9_large_batch);
    run(10, "end-to-end robustness", &mut || criterion_10_end_to_end(&mut moons));
    run(11, "determinism", &mut || criterion_11_determinism(&mut moons));
    let golden_spec = ExperimentConfig::from_json(GOLDEN).unwrap().model;
    let mut specs = vec![moons_spec(); moons.len() - 1];
    specs.push(golden_spec);
    run(12, "RA at zero radius equals TA", &mut || criterion_12_zero_radius(&moons, &specs));
    let passed = results.iter().filter(|r| r.2.passed).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
