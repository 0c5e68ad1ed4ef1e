//! Helpers shared by unit tests: random generators and finite-difference
//! oracles that never touch the analytic derivative code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Sample, Task};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn regression_data(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
    let samples = (0..n)
        .map(|_| {
            let x = normal_vec(rng, d);
            let y: f64 = rng.sample(StandardNormal);
            Sample::new(x, y)
        })
        .collect();
    Dataset::new(samples, d, Task::Regression).unwrap()
}

pub fn classification_data(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let c = i % k;
            let mut x = normal_vec(rng, d);
            x[c % d] += 1.5;
            Sample::new(x, c as f64)
        })
        .collect();
    Dataset::new(samples, d, Task::Classification { num_classes: k }).unwrap()
}

/// Central finite-difference gradient of a scalar function.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
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

/// Fourth-order central difference of a vector-valued map along `dir`.
pub fn fd_directional(f: impl Fn(&[f64]) -> Vec<f64>, at: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    let shifted = |s: f64| -> Vec<f64> {
        let p: Vec<f64> = at.iter().zip(dir).map(|(a, d)| a + s * d).collect();
        f(&p)
    };
    let (p1, m1, p2, m2) = (shifted(h), shifted(-h), shifted(2.0 * h), shifted(-2.0 * h));
    (0..p1.len())
        .map(|i| (8.0 * (p1[i] - m1[i]) - (p2[i] - m2[i])) / (12.0 * h))
        .collect()
}

pub use crate::linalg::norm;

/// `|a - b| / max(|b|, floor)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(floor)
}
