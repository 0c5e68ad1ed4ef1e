use ibis_core::data::Sample;
use ibis_core::influence::{greedy_select, objective_f, IhvpSolver, InfluenceConfig, InfluenceEngine};
use ibis_core::model::Arch;
use ibis_core::trainer::{fit_erm, FitConfig};
use ibis_core::{Dataset, ModelState, Task};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dataset(seed: u64, n: usize, d: usize) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let c = i % 2;
            let mut x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            x[0] += if c == 0 { 1.0 } else { -1.0 };
            Sample::new(x, c as f64)
        })
        .collect();
    Dataset::new(samples, d, Task::Classification { num_classes: 2 }).unwrap()
}

fn fitted(data: &Dataset) -> ModelState {
    fit_erm(&Arch::Logistic { num_classes: 2, l2: 0.05 }, data, &FitConfig::default()).unwrap()
}

/// Mean-loss Hessian from central differences of `grad_theta`.
fn fd_hessian(model: &ModelState, data: &Dataset) -> DMatrix<f64> {
    let p = model.param_count();
    let h = 1e-5;
    let mean_grad = |theta: &[f64]| {
        let m = model.with_theta(theta.to_vec()).unwrap();
        let mut acc = vec![0.0; p];
        for z in data.samples() {
            for (a, g) in acc.iter_mut().zip(m.grad_theta(z).unwrap()) {
                *a += g / data.len() as f64;
            }
        }
        acc
    };
    let mut hess = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut up = model.theta.clone();
        up[j] += h;
        let mut down = model.theta.clone();
        down[j] -= h;
        let (gu, gd) = (mean_grad(&up), mean_grad(&down));
        for i in 0..p {
            hess[(i, j)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    0.5 * (&hess + hess.transpose())
}

fn naive_influence(hess: &DMatrix<f64>, model: &ModelState, a: &Sample, b: &Sample) -> f64 {
    let ga = DVector::from_vec(model.grad_theta(a).unwrap());
    let gb = DVector::from_vec(model.grad_theta(b).unwrap());
    let u = hess.clone().lu().solve(&gb).unwrap();
    ga.dot(&u)
}

#[test]
fn twelve_point_matrix_matches_naive_recomputation() {
    let data = dataset(1, 12, 3);
    let model = fitted(&data);
    let hess = fd_hessian(&model, &data);
    for solver in [IhvpSolver::ConjugateGradient, IhvpSolver::Dense] {
        let cfg = InfluenceConfig {
            solver,
            cg_tol: 1e-12,
            ..InfluenceConfig::default()
        };
        let engine = InfluenceEngine::new(&model, &data, &cfg).unwrap();
        let pool: Vec<usize> = (0..12).collect();
        let m = engine.build_matrix(&pool).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let want = naive_influence(&hess, &model, &data.samples()[i], &data.samples()[j]);
                let got = m.get(i, j);
                assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-3), "({i},{j}) {got} vs {want}");
            }
        }
    }
}

#[test]
fn preselect_matches_full_sort() {
    let data = dataset(2, 30, 4);
    let model = fitted(&data);
    let engine = InfluenceEngine::new(&model, &data, &InfluenceConfig::default()).unwrap();
    let hess = fd_hessian(&model, &data);
    let selfs: Vec<f64> = data
        .samples()
        .iter()
        .map(|z| naive_influence(&hess, &model, z, z))
        .collect();
    let mut order: Vec<usize> = (0..30).collect();
    order.sort_by(|&a, &b| selfs[b].partial_cmp(&selfs[a]).unwrap().then(a.cmp(&b)));
    for p in [1, 7, 30] {
        assert_eq!(engine.preselect(p).unwrap(), order[..p].to_vec());
    }
}

fn subsets3(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                out.push([a, b, c]);
            }
        }
    }
    out
}

#[test]
fn greedy_beats_median_of_exhaustive_search() {
    for seed in 0..5 {
        let data = dataset(10 + seed, 10, 3);
        let model = fitted(&data);
        let engine = InfluenceEngine::new(&model, &data, &InfluenceConfig::default()).unwrap();
        let matrix = engine.build_matrix(&(0..10).collect::<Vec<_>>()).unwrap();
        let all = subsets3(10);
        assert_eq!(all.len(), 120);
        let mut values: Vec<f64> = all.iter().map(|s| objective_f(s, &matrix, 1e-8).unwrap()).collect();
        values.sort_by(f64::total_cmp);
        let median = 0.5 * (values[59] + values[60]);
        let sel = greedy_select(&matrix, 3, 1e-8).unwrap();
        let greedy = objective_f(&sel.positions, &matrix, 1e-8).unwrap();
        assert!(greedy >= median, "seed {seed}: greedy {greedy} below median {median}, best {}", values[119]);
        assert!(greedy <= values[119]);
    }
}
