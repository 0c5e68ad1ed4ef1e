//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ibis_core::audit::{draw_membership, evaluate, run_audit, tpr_at_fpr, AuditConfig};
use ibis_core::bilevel::{
    hypergradient_exact, ibis_run, phi_exact, regularizer, regularizer_grad, soba_step, warm_start, BilevelConfig,
    BilevelState, CanarySet, ScoreKind,
};
use ibis_core::data::{sample_indices, synth_dataset};
use ibis_core::influence::{
    greedy_select, objective_f, select_canaries, IhvpSolver, InfluenceConfig, InfluenceEngine, InfluenceMatrix,
};
use ibis_core::leastsq::{Canary, LeastSquaresInstance};
use ibis_core::trainer::{
    dp_sgd_step, fit_erm, fit_erm_from, sgd_step, train_from, DpConfig, FitConfig, TrainConfig,
};
use ibis_core::{Activation, Arch, Dataset, ModelState, Sample, SynthKind, Task};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1e-12)
}

fn fd_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
    let mut p = at.to_vec();
    (0..at.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Minimum-norm least squares through an SVD, independent of the library
/// solver.
fn lstsq(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let d = rows[0].len();
    let x = DMatrix::from_row_iterator(rows.len(), d, rows.iter().flatten().copied());
    let svd = x.svd(true, true);
    svd.solve(&DVector::from_column_slice(y), 1e-14)
        .expect("svd has both factors")
        .as_slice()
        .to_vec()
}

fn sq_loss(theta: &[f64], x: &[f64], y: f64) -> f64 {
    let r = y - theta.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    0.5 * r * r
}

struct LsCase {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
    c1: Canary,
    c2: Canary,
}

fn ls_cases() -> Vec<LsCase> {
    let mut r = rng(11);
    (0..100)
        .map(|_| {
            let n = r.random_range(10..=200);
            let d = r.random_range(2..=20.min(n - 1));
            let rows: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, d)).collect();
            let y = normal_vec(&mut r, n);
            let c1 = Canary::new(normal_vec(&mut r, d), r.sample(StandardNormal));
            let c2 = Canary::new(normal_vec(&mut r, d), r.sample(StandardNormal));
            LsCase { rows, y, c1, c2 }
        })
        .collect()
}

fn augmented(case: &LsCase) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rows = case.rows.clone();
    rows.push(case.c1.x.clone());
    let mut y = case.y.clone();
    y.push(case.c1.y);
    (rows, y)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in ls_cases() {
        let inst = LeastSquaresInstance::new(&case.rows, &case.y).map_err(|e| e.to_string())?;
        let gap = inst.interference_gap(&case.c1, &case.c2).map_err(|e| e.to_string())?;
        let before = lstsq(&case.rows, &case.y);
        let (rows, y) = augmented(&case);
        let after = lstsq(&rows, &y);
        let oracle = sq_loss(&after, &case.c2.x, case.c2.y) - sq_loss(&before, &case.c2.x, case.c2.y);
        worst = worst.max((gap - oracle).abs() / oracle.abs());
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-8 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 100 instances in {elapsed:.2?}"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for case in ls_cases() {
        let inst = LeastSquaresInstance::new(&case.rows, &case.y).map_err(|e| e.to_string())?;
        let updated = inst.rank_one_update(&case.c1).map_err(|e| e.to_string())?;
        let (rows, y) = augmented(&case);
        worst = worst.max(rel_err(&updated, &lstsq(&rows, &y)));
    }
    check(worst < 1e-9, format!("max relative error {worst:.2e} over 100 instances"))
}

fn random_arch(r: &mut ChaCha8Rng, family: usize) -> (Arch, Task) {
    let k = r.random_range(2..=4);
    let l2 = r.random_range(0.0..0.1);
    match family {
        0 => (Arch::LeastSquares, Task::Regression),
        1 => (Arch::Logistic { num_classes: k, l2 }, Task::Classification { num_classes: k }),
        _ => {
            let mut hidden = vec![r.random_range(2..=6)];
            if r.random_bool(0.5) {
                hidden.push(r.random_range(2..=6));
            }
            (
                Arch::Mlp {
                    hidden,
                    num_classes: k,
                    activation: Activation::Tanh,
                    l2,
                },
                Task::Classification { num_classes: k },
            )
        }
    }
}

fn random_sample(r: &mut ChaCha8Rng, d: usize, task: Task) -> Sample {
    let x = normal_vec(r, d);
    let y = match task {
        Task::Regression => r.sample(StandardNormal),
        Task::Classification { num_classes } => r.random_range(0..num_classes) as f64,
    };
    Sample::new(x, y)
}

fn criterion_3() -> Outcome {
    const H: f64 = 1e-5;
    let mut r = rng(33);
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let e = |x: ibis_core::Error| x.to_string();
    for (family, name) in ["least-squares", "logistic", "tanh-mlp"].iter().enumerate() {
        for _ in 0..100 {
            let (arch, task) = random_arch(&mut r, family);
            let d = r.random_range(2..=6);
            let init = ModelState::init(arch, d, r.random()).map_err(e)?;
            let theta: Vec<f64> = normal_vec(&mut r, init.param_count()).iter().map(|v| 0.5 * v).collect();
            let model = init.with_theta(theta.clone()).map_err(e)?;
            let z = random_sample(&mut r, d, task);

            let g = model.grad_theta(&z).map_err(e)?;
            let fd = fd_grad(|t| model.with_theta(t.to_vec()).unwrap().loss(&z).unwrap(), &theta, H);
            let gt = rel_err(&g, &fd);

            let gx = model.grad_x(&z).map_err(e)?;
            let fd = fd_grad(|x| model.loss(&Sample::new(x.to_vec(), z.y)).unwrap(), &z.x, H);
            let gxe = rel_err(&gx, &fd);

            let v = normal_vec(&mut r, theta.len());
            let mixed = model.mixed_hvp(&z, &v).map_err(e)?;
            let shifted = |s: f64| {
                let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + s * b).collect();
                model.with_theta(t).unwrap().grad_x(&z).unwrap()
            };
            let fd: Vec<f64> = shifted(H).iter().zip(shifted(-H)).map(|(a, b)| (a - b) / (2.0 * H)).collect();
            let me = rel_err(&mixed, &fd);

            let m = r.random_range(2..=4);
            let canaries: Vec<Sample> = (0..m).map(|_| random_sample(&mut r, d, task)).collect();
            let lambda = r.random_range(0.1..1.0);
            let spec = model.embedding_spec();
            let grads = regularizer_grad(&canaries, &model, &spec, lambda).map_err(e)?;
            let mut re = 0.0f64;
            for (i, gi) in grads.iter().enumerate() {
                let fd = fd_grad(
                    |x| {
                        let mut c = canaries.clone();
                        c[i].x = x.to_vec();
                        regularizer(&c, &model, &spec, lambda).unwrap()
                    },
                    &canaries[i].x,
                    H,
                );
                re = re.max(rel_err(gi, &fd));
            }

            for (op, err) in [("grad_theta", gt), ("grad_x", gxe), ("mixed_hvp", me), ("regularizer_grad", re)] {
                let w = worst.entry(format!("{name}/{op}")).or_insert(0.0);
                *w = w.max(err);
            }
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let (arg, _) = worst.iter().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
    check(
        max < 1e-4,
        format!("max relative error {max:.2e} ({arg}) over 100 configurations x 3 architectures x 4 operations"),
    )
}

fn regression(r: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let samples = (0..n).map(|_| Sample::new(normal_vec(r, d), r.sample(StandardNormal))).collect();
    Dataset::new(samples, d, Task::Regression).unwrap()
}

fn criterion_4() -> Outcome {
    const H: f64 = 1e-5;
    let e = |x: ibis_core::Error| x.to_string();
    let mut r = rng(44);
    let (mut worst_fd, mut worst_soba) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let d = r.random_range(2..=5);
        let n = r.random_range(3 * d..=20);
        let m = r.random_range(1..=3);
        let data = regression(&mut r, n, d);
        let canaries = CanarySet {
            canaries: (0..m).map(|_| Sample::new(normal_vec(&mut r, d), r.sample(StandardNormal))).collect(),
            origin_indices: (0..m).collect(),
            box_bounds: None,
        };
        let lambda = r.random_range(0.0..0.5);
        let cfg = BilevelConfig {
            reg_strength: lambda,
            outer_step: 1e-3,
            cg_tol: 1e-12,
            fit: FitConfig {
                grad_tol: 1e-12,
                ..FitConfig::default()
            },
            ..BilevelConfig::default()
        };
        let theta_star = fit_erm(&Arch::LeastSquares, &data, &cfg.fit).map_err(e)?;
        let hyper =
            hypergradient_exact(&canaries, &data, &theta_star, lambda, ScoreKind::NegativeLoss, &cfg).map_err(e)?;

        let flat: Vec<f64> = canaries.canaries.iter().flat_map(|c| c.x.clone()).collect();
        let phi = |x: &[f64]| {
            let mut c = canaries.clone();
            for (i, s) in c.canaries.iter_mut().enumerate() {
                s.x = x[i * d..(i + 1) * d].to_vec();
            }
            phi_exact(&c, &data, &theta_star, lambda, &cfg).unwrap()
        };
        let fd = fd_grad(phi, &flat, H);
        let analytic: Vec<f64> = hyper.iter().flatten().copied().collect();
        worst_fd = worst_fd.max(rel_err(&analytic, &fd));

        let (theta0, v0) = warm_start(&data, &canaries, &theta_star, &cfg).map_err(e)?;
        let state = BilevelState::new(theta_star.clone(), theta0, v0, canaries.clone(), data.len(), &cfg).map_err(e)?;
        let batch: Vec<&Sample> = data.samples().iter().chain(canaries.samples()).collect();
        let next = soba_step(&state, &batch).map_err(e)?;
        let step: Vec<f64> = canaries
            .samples()
            .iter()
            .zip(next.canaries.samples())
            .flat_map(|(a, b)| a.x.iter().zip(&b.x).map(|(p, q)| (p - q) / cfg.outer_step).collect::<Vec<_>>())
            .collect();
        worst_soba = worst_soba.max(rel_err(&step, &analytic));
    }
    check(
        worst_fd < 1e-3 && worst_soba < 1e-6,
        format!("finite-difference relative error {worst_fd:.2e}, coupled update vs exact {worst_soba:.2e} over 20 instances"),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn classification(r: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let c = i % k;
            let mut x = normal_vec(r, d);
            x[c % d] += 1.5;
            Sample::new(x, c as f64)
        })
        .collect();
    Dataset::new(samples, d, Task::Classification { num_classes: k }).unwrap()
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let e = |x: ibis_core::Error| x.to_string();
    let mut r = rng(55);
    let data = classification(&mut r, 60, 5, 2);
    let arch = Arch::Logistic { num_classes: 2, l2: 1e-2 };
    let fit = FitConfig {
        grad_tol: 1e-9,
        ..FitConfig::default()
    };
    let model = fit_erm(&arch, &data, &fit).map_err(e)?;
    let cfg = InfluenceConfig {
        solver: IhvpSolver::Dense,
        ..InfluenceConfig::for_arch(&arch)
    };
    let engine = InfluenceEngine::new(&model, &data, &cfg).map_err(e)?;
    let n = data.len() as f64;
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    for _ in 0..30 {
        let i = r.random_range(0..data.len());
        let j = r.random_range(0..data.len());
        let (zi, zj) = (&data.samples()[i], &data.samples()[j]);
        predicted.push(engine.influence_pair(zi, zj).map_err(e)? / n);
        let loo = fit_erm_from(&model, &data.without(&[i]), &fit).map_err(e)?;
        actual.push(loo.loss(zj).map_err(e)? - model.loss(zj).map_err(e)?);
    }
    let rho = spearman(&predicted, &actual);
    let elapsed = start.elapsed();
    check(
        rho >= 0.95 && elapsed < Duration::from_secs(120),
        format!("Spearman {rho:.4} over 30 pairs in {elapsed:.2?}"),
    )
}

fn criterion_6() -> Outcome {
    const FLOOR: f64 = 1e-8;
    let e = |x: ibis_core::Error| x.to_string();
    let mut r = rng(66);
    let mut wins = 0;
    for trial in 0..20 {
        // influence-like scores: Gram matrix of gradients with varied scale
        let grads: Vec<Vec<f64>> = (0..10)
            .map(|_| {
                let s = (0.7 * r.sample::<f64, _>(StandardNormal)).exp();
                normal_vec(&mut r, 4).iter().map(|v| s * v).collect()
            })
            .collect();
        let scores: Vec<Vec<f64>> = grads
            .iter()
            .map(|a| grads.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
            .collect();
        let mut indices: Vec<usize> = (0..100).collect();
        indices.shuffle(&mut r);
        indices.truncate(10);
        let matrix = InfluenceMatrix::new(indices.clone(), scores.clone()).map_err(e)?;
        let sel = greedy_select(&matrix, 3, FLOOR).map_err(e)?;

        let mut chosen: Vec<usize> = Vec::new();
        for step in 0..3 {
            let mut best: Option<(usize, f64)> = None;
            for c in (0..10).filter(|c| !chosen.contains(c)) {
                let value = if chosen.is_empty() {
                    scores[c][c]
                } else {
                    let worst = chosen.iter().map(|&s| scores[s][c]).fold(f64::NEG_INFINITY, f64::max);
                    scores[c][c] / worst.max(FLOOR)
                };
                let better = match best {
                    None => true,
                    Some((b, bv)) => value > bv || (value == bv && indices[c] < indices[b]),
                };
                if better {
                    best = Some((c, value));
                }
            }
            let (c, value) = best.expect("candidates remain");
            if sel.positions[step] != c || sel.ratios[step] != value || sel.indices[step] != indices[c] {
                return Err(format!(
                    "trial {trial} step {step}: greedy chose {} ({}), recomputation gives {c} ({value})",
                    sel.positions[step], sel.ratios[step]
                ));
            }
            chosen.push(c);
        }
        let mut pool: Vec<usize> = (0..10).collect();
        pool.shuffle(&mut r);
        let random = objective_f(&pool[..3], &matrix, FLOOR).map_err(e)?;
        if objective_f(&sel.positions, &matrix, FLOOR).map_err(e)? >= random {
            wins += 1;
        }
    }
    check(
        wins >= 18,
        format!("every greedy step matches recomputation; f(greedy) >= f(random) in {wins}/20 trials"),
    )
}

fn brute_tpr(scores: &[f64], bits: &[bool], alpha: f64) -> f64 {
    let pos = bits.iter().filter(|&&b| b).count();
    let neg = bits.len() - pos;
    let mut taus: Vec<f64> = scores.to_vec();
    taus.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &tau in &taus {
        let tp = scores.iter().zip(bits).filter(|(&s, &b)| b && s >= tau).count();
        let fp = scores.iter().zip(bits).filter(|(&s, &b)| !b && s >= tau).count();
        if fp as f64 / neg as f64 <= alpha {
            best = best.max(tp as f64 / pos as f64);
        }
    }
    best
}

fn criterion_7() -> Outcome {
    let mut r = rng(77);
    let alphas = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    for trial in 0..1000 {
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..40).map(|_| r.random_range(0..12) as f64).collect()
        } else {
            normal_vec(&mut r, 40)
        };
        let mut bits: Vec<bool> = (0..40).map(|_| r.random_bool(0.5)).collect();
        bits[0] = true;
        bits[1] = false;
        let alpha = if trial % 3 == 0 { r.random::<f64>() } else { alphas[trial % alphas.len()] };
        let got = tpr_at_fpr(&scores, &bits, alpha).map_err(|e| e.to_string())?;
        let want = brute_tpr(&scores, &bits, alpha);
        if got != want {
            return Err(format!("instance {trial}: tpr_at_fpr = {got}, brute force = {want} at alpha {alpha}"));
        }
    }
    Ok("exact agreement on 1000 instances with m = 40".into())
}

fn criterion_8() -> Outcome {
    let e = |x: ibis_core::Error| x.to_string();
    let mut r = rng(88);

    let data = classification(&mut r, 120, 4, 3);
    let dp = DpConfig {
        clip_norm: 0.5,
        noise_multiplier: 1.0,
        delta: 1e-5,
        target_epsilon: None,
    };
    let cfg = TrainConfig {
        step_size: 0.1,
        batch_size: 16,
        epochs: 10,
        seed: 3,
    };
    let (mut steps, mut violations, mut max_norm) = (0usize, 0usize, 0.0f64);
    for arch in [Arch::logistic(3), Arch::tanh_mlp(vec![8], 3)] {
        let init = ModelState::init(arch, 4, 1).map_err(e)?;
        train_from(init, &data, &cfg, Some(&dp), &mut |_, rep| {
            steps += 1;
            for &n in &rep.clipped_norms {
                max_norm = max_norm.max(n);
                if n > dp.clip_norm * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
        })
        .map_err(e)?;
    }

    // zero-feature least squares has zero gradient, so each step is pure noise
    let (p, steps_mc) = (10, 10_000);
    let noise_dp = DpConfig {
        clip_norm: 0.7,
        noise_multiplier: 1.3,
        ..dp.clone()
    };
    let batch = Dataset::new(vec![Sample::new(vec![0.0; p], 1.0); 4], p, Task::Regression).map_err(e)?;
    let model = ModelState::init(Arch::LeastSquares, p, 0).map_err(e)?;
    let mut noise_rng = rng(5);
    let mut draws = Vec::with_capacity(p * steps_mc);
    for _ in 0..steps_mc {
        let next = dp_sgd_step(&model, &batch, 1.0, &noise_dp, &mut noise_rng).map_err(e)?;
        draws.extend(next.theta.iter().map(|t| -t));
    }
    let std = noise_dp.clip_norm * noise_dp.noise_multiplier;
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_dev = mean.abs() / std;
    let var_dev = (var / (std * std) - 1.0).abs();

    let mut mismatches = 0;
    for case in 0..20 {
        let arch = if case % 2 == 0 { Arch::logistic(3) } else { Arch::tanh_mlp(vec![5], 3) };
        let init = ModelState::init(arch, 4, case).map_err(e)?;
        let theta: Vec<f64> = normal_vec(&mut r, init.param_count());
        let model = init.with_theta(theta).map_err(e)?;
        let batch = data.select(&sample_indices(data.len(), 8, case).map_err(e)?);
        let plain = sgd_step(&model, &batch, 0.3).map_err(e)?;
        for clip_norm in [f64::INFINITY, 1e6] {
            let zero = DpConfig {
                clip_norm,
                noise_multiplier: 0.0,
                ..dp.clone()
            };
            let private = dp_sgd_step(&model, &batch, 0.3, &zero, &mut rng(case)).map_err(e)?;
            if private.theta.iter().zip(&plain.theta).any(|(a, b)| a.to_bits() != b.to_bits()) {
                mismatches += 1;
            }
        }
    }
    check(
        violations == 0 && mean_dev < 0.05 && var_dev < 0.05 && mismatches == 0,
        format!(
            "{steps} instrumented steps, max clipped norm {max_norm:.4} <= {}; {} noise draws: |mean|/std {mean_dev:.4}, |var ratio - 1| {var_dev:.4}; sigma = 0 bitwise mismatches {mismatches}/40",
            dp.clip_norm,
            draws.len()
        ),
    )
}

fn criterion_9() -> Outcome {
    let e = |x: ibis_core::Error| x.to_string();
    let cfg = AuditConfig::default();
    let mut r = rng(99);
    let mut null_zero = 0;
    for trial in 0..200 {
        let membership = draw_membership(64, 1000 + trial).map_err(e)?;
        let scores = normal_vec(&mut r, 64);
        if evaluate(scores, &membership, &cfg).map_err(e)?.eps_hat == 0.0 {
            null_zero += 1;
        }
    }

    let data = synth_dataset(
        &SynthKind::GaussianBlobs {
            k: 2,
            d: 5,
            n: 240,
            separation: 2.0,
        },
        9,
    )
    .map_err(e)?;
    let canaries = CanarySet::from_dataset(&data, &sample_indices(data.len(), 40, 9).map_err(e)?, false).map_err(e)?;
    let arch = Arch::Logistic { num_classes: 2, l2: 1e-3 };
    let train = TrainConfig {
        step_size: 0.5,
        batch_size: 24,
        epochs: 5,
        seed: 0,
    };
    let mut parts = vec![format!("null eps_hat = 0 in {null_zero}/200")];
    let mut ok = null_zero >= 190;
    for target in [1.0, 4.0, 10.0] {
        let dp = DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-5,
            target_epsilon: Some(target),
        };
        let (mut below, mut max_hat, mut max_acc) = (0, 0.0f64, 0.0f64);
        for trial in 0..50 {
            let res = run_audit(&data, &canaries, &arch, &train, Some(&dp), &cfg, 5000 + trial).map_err(e)?;
            let mech = res.mechanism.ok_or("DP audit reported no mechanism")?;
            max_acc = max_acc.max(mech.epsilon);
            max_hat = max_hat.max(res.eps_hat);
            if res.eps_hat <= target {
                below += 1;
            }
        }
        ok &= below >= 48 && max_acc <= target * (1.0 + 1e-6);
        parts.push(format!(
            "eps={target}: eps_hat <= eps in {below}/50 (max {max_hat:.3}, accountant {max_acc:.3})"
        ));
    }
    check(ok, parts.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let e = |x: ibis_core::Error| x.to_string();
    let (n, m) = (300, 64);
    let data = synth_dataset(
        &SynthKind::GaussianBlobs {
            k: 2,
            d: 20,
            n,
            separation: 2.0,
        },
        3,
    )
    .map_err(e)?;
    let arch = Arch::Mlp {
        hidden: vec![32],
        num_classes: 2,
        activation: Activation::Tanh,
        l2: 1e-2,
    };
    let train = TrainConfig {
        step_size: 0.2,
        batch_size: 32,
        epochs: 400,
        seed: 0,
    };
    let fit = FitConfig {
        sgd: train.clone(),
        ..FitConfig::default()
    };
    let icfg = InfluenceConfig {
        damping: 1e-2,
        num_canaries_m: m,
        preselect_p: 96,
        solver: IhvpSolver::Dense,
        ..InfluenceConfig::for_arch(&arch)
    };
    let bcfg = BilevelConfig {
        outer_step: 0.01,
        reg_strength: 1e-3,
        epochs: 20,
        damping: 1e-2,
        solver: IhvpSolver::Dense,
        fit: fit.clone(),
        ..BilevelConfig::default()
    };
    let acfg = AuditConfig::default();
    let audit = |c: &CanarySet| -> Result<f64, String> {
        let tprs = (0..6)
            .map(|s| {
                let res = run_audit(&data, c, &arch, &train, None, &acfg, 100 + s).map_err(e)?;
                res.tpr(0.05).ok_or_else(|| "missing TPR@0.05".to_string())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(median(tprs))
    };
    let random = CanarySet::from_dataset(&data, &sample_indices(n, m, 7).map_err(e)?, true).map_err(e)?;
    let sel = select_canaries(&data, &arch, &icfg, &fit).map_err(e)?;
    let influence = CanarySet::from_dataset(&data, &sel.greedy.indices, true).map_err(e)?;
    let crafted = ibis_run(&data, &arch, &icfg, &bcfg).map_err(e)?;
    if crafted.initial != influence {
        return Err("crafting did not start from the influence-selected canaries".into());
    }
    let (tr, ti, tb) = (audit(&random)?, audit(&influence)?, audit(&crafted.canaries)?);
    let elapsed = start.elapsed();
    check(
        ti > tr && tb >= ti && elapsed < Duration::from_secs(1800),
        format!("median TPR@0.05: random {tr:.3}, influence {ti:.3}, IBIS {tb:.3} in {elapsed:.1?}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable directory") {
            let p = entry.expect("directory entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).expect("under dir").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ibis"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("ibis {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

const SMALL_CONFIG: &str = r#"
seed = 5
dataset.n = 160
dataset.d = 4
model.hidden = [6]
train.epochs = 15
influence.p = 32
influence.m = 12
influence.damping = 0.5
bilevel.epochs = 3
audit.runs = 3
audit.canaries = "ibis"
interfere.design = "random"
"#;

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let config = root.join("config.toml");
    std::fs::write(&config, SMALL_CONFIG).map_err(|e| e.to_string())?;
    let config = config.to_str().ok_or("non-utf8 temp path")?;
    let mut compared = 0;
    for sub in ["select", "craft", "audit", "interfere", "report"] {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = root.join(format!("{sub}-{rep}"));
            let out_s = out.to_str().ok_or("non-utf8 temp path")?.to_string();
            let audit_dir = root.join("audit-0");
            let mut args = vec!["--config", config, "--seed", "5", "--out", &out_s, sub];
            let audit_s = audit_dir.to_str().ok_or("non-utf8 temp path")?.to_string();
            if sub == "report" {
                args.push(&audit_s);
            }
            run_cli(&args)?;
            outs.push(out);
        }
        let (a, b) = (files_under(&outs[0]), files_under(&outs[1]));
        if a.is_empty() || a != b {
            return Err(format!("{sub}: artifact sets differ or are empty"));
        }
        for f in &a {
            let (x, y) = (
                std::fs::read(outs[0].join(f)).map_err(|e| e.to_string())?,
                std::fs::read(outs[1].join(f)).map_err(|e| e.to_string())?,
            );
            if x != y {
                return Err(format!("{sub}: {} differs between identical runs", f.display()));
            }
            let text = String::from_utf8_lossy(&x);
            if !text.contains("config_hash") || !text.contains("seed") {
                return Err(format!("{sub}: {} lacks provenance", f.display()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} artifacts byte-identical across reruns of 5 subcommands"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("least-squares interference identity", criterion_1),
        ("rank-one update consistency", criterion_2),
        ("derivative suite", criterion_3),
        ("hypergradient", criterion_4),
        ("influence fidelity", criterion_5),
        ("greedy selection", criterion_6),
        ("TPR oracle equivalence", criterion_7),
        ("DP-SGD mechanics", criterion_8),
        ("audit calibration", criterion_9),
        ("directional ablation", criterion_10),
        ("determinism", criterion_11),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
