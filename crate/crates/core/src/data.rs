//! Samples, datasets and seeded synthetic generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single record `z = (x, y)`.
///
/// For classification tasks `y` holds the class index as a float.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl Task {
    pub fn validate_label(&self, y: f64) -> Result<()> {
        match *self {
            Task::Regression => {
                if y.is_finite() {
                    Ok(())
                } else {
                    Err(Error::NonFinite("label"))
                }
            }
            Task::Classification { num_classes } => {
                if y.fract() == 0.0 && y >= 0.0 && (y as usize) < num_classes {
                    Ok(())
                } else {
                    Err(Error::InvalidLabel {
                        label: y,
                        num_classes,
                    })
                }
            }
        }
    }
}

/// Ordered collection of samples sharing a feature dimension. Positions are
/// identities: index `i` always refers to the same record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    task: Task,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, dim: usize, task: Task) -> Result<Self> {
        if let Task::Classification { num_classes } = task {
            if num_classes < 2 {
                return Err(Error::InvalidConfig(
                    "classification needs at least two classes".into(),
                ));
            }
        }
        for s in &samples {
            crate::error::check_len("sample features", dim, s.x.len())?;
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sample features"));
            }
            task.validate_label(s.y)?;
        }
        Ok(Self { samples, dim, task })
    }

    pub fn empty(dim: usize, task: Task) -> Self {
        Self {
            samples: Vec::new(),
            dim,
            task,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.samples.get(i)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Copy of the dataset with the given positions removed. Order of the
    /// remaining samples is preserved.
    pub fn without(&self, indices: &[usize]) -> Dataset {
        let mut drop = vec![false; self.samples.len()];
        for &i in indices {
            if i < drop.len() {
                drop[i] = true;
            }
        }
        let samples = self
            .samples
            .iter()
            .zip(drop)
            .filter(|(_, d)| !d)
            .map(|(s, _)| s.clone())
            .collect();
        Dataset {
            samples,
            dim: self.dim,
            task: self.task,
        }
    }

    /// Subset in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            dim: self.dim,
            task: self.task,
        }
    }

    /// Appends samples after validating them against this dataset's shape.
    pub fn extended<'a, I>(&self, extra: I) -> Result<Dataset>
    where
        I: IntoIterator<Item = &'a Sample>,
    {
        let mut out = self.clone();
        for s in extra {
            crate::error::check_len("sample features", self.dim, s.x.len())?;
            self.task.validate_label(s.y)?;
            out.samples.push(s.clone());
        }
        Ok(out)
    }

    /// Per-feature `[min, max]` over all samples.
    pub fn feature_bounds(&self) -> Vec<(f64, f64)> {
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); self.dim];
        for s in &self.samples {
            for (b, &v) in bounds.iter_mut().zip(&s.x) {
                b.0 = b.0.min(v);
                b.1 = b.1.max(v);
            }
        }
        bounds
    }
}

/// Synthetic dataset families used as desk-scale stand-ins for image data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SynthKind {
    /// `k` isotropic unit-variance Gaussian classes in `d` dimensions. Class
    /// means are pairwise `separation` apart when `k <= d`; otherwise they
    /// sit on a line with consecutive means `separation` apart.
    GaussianBlobs {
        k: usize,
        d: usize,
        n: usize,
        separation: f64,
    },
    /// `y = <theta_true, x> + noise` with standard normal features.
    LinearGaussian { d: usize, n: usize, noise_std: f64 },
}

/// Class means used by [`SynthKind::GaussianBlobs`].
pub fn blob_means(k: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| {
            let mut mean = vec![0.0; d];
            if k <= d {
                mean[c] = separation / std::f64::consts::SQRT_2;
            } else {
                mean[0] = c as f64 * separation;
            }
            mean
        })
        .collect()
}

/// `m` distinct indices drawn uniformly from `0..n`, in draw order.
pub fn sample_indices(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::InvalidConfig(format!("cannot draw {m} distinct indices from {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, m).into_vec())
}

pub fn synth_dataset(kind: &SynthKind, seed: u64) -> Result<Dataset> {
    Ok(synth_with_truth(kind, seed)?.0)
}

/// Like [`synth_dataset`], also returning the generating parameter vector
/// for the linear family.
pub fn synth_with_truth(kind: &SynthKind, seed: u64) -> Result<(Dataset, Option<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *kind {
        SynthKind::GaussianBlobs {
            k,
            d,
            n,
            separation,
        } => {
            if k < 2 || d == 0 || n == 0 || !(separation >= 0.0) {
                return Err(Error::InvalidConfig(
                    "gaussian-blobs needs k >= 2, d >= 1, n >= 1, separation >= 0".into(),
                ));
            }
            let means = blob_means(k, d, separation);
            let samples = (0..n)
                .map(|i| {
                    let c = i % k;
                    let x = means[c]
                        .iter()
                        .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    Sample::new(x, c as f64)
                })
                .collect();
            let ds = Dataset::new(samples, d, Task::Classification { num_classes: k })?;
            Ok((ds, None))
        }
        SynthKind::LinearGaussian { d, n, noise_std } => {
            if d == 0 || n == 0 || !(noise_std >= 0.0) {
                return Err(Error::InvalidConfig(
                    "linear-gaussian needs d >= 1, n >= 1, noise_std >= 0".into(),
                ));
            }
            let truth: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let samples = (0..n)
                .map(|_| {
                    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    let noise: f64 = rng.sample(StandardNormal);
                    let y = dot(&truth, &x) + noise_std * noise;
                    Sample::new(x, y)
                })
                .collect();
            let ds = Dataset::new(samples, d, Task::Regression)?;
            Ok((ds, Some(truth)))
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_indices_distinct_and_seeded() {
        let a = sample_indices(50, 20, 3).unwrap();
        assert_eq!(a, sample_indices(50, 20, 3).unwrap());
        let mut s = a.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 20);
        assert!(a.iter().all(|&i| i < 50));
        assert!(sample_indices(3, 4, 0).is_err());
    }

    #[test]
    fn blobs_are_deterministic() {
        let kind = SynthKind::GaussianBlobs {
            k: 3,
            d: 4,
            n: 30,
            separation: 2.0,
        };
        assert_eq!(
            synth_dataset(&kind, 7).unwrap(),
            synth_dataset(&kind, 7).unwrap()
        );
        assert_ne!(
            synth_dataset(&kind, 7).unwrap(),
            synth_dataset(&kind, 8).unwrap()
        );
    }

    #[test]
    fn blob_means_are_separated() {
        for (k, d) in [(3, 5), (4, 2)] {
            let means = blob_means(k, d, 3.5);
            for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let dist: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if k <= d || i.abs_diff(j) == 1 {
                        assert!((dist - 3.5).abs() < 1e-12, "{k} {d} {i} {j} {dist}");
                    }
                }
            }
        }
    }

    #[test]
    fn empirical_class_centroids_track_separation() {
        let kind = SynthKind::GaussianBlobs {
            k: 2,
            d: 3,
            n: 20_000,
            separation: 4.0,
        };
        let ds = synth_dataset(&kind, 1).unwrap();
        let mut sums = vec![vec![0.0; 3]; 2];
        let mut counts = [0usize; 2];
        for s in ds.samples() {
            let c = s.y as usize;
            counts[c] += 1;
            for (a, v) in sums[c].iter_mut().zip(&s.x) {
                *a += v;
            }
        }
        let dist: f64 = (0..3)
            .map(|j| (sums[0][j] / counts[0] as f64 - sums[1][j] / counts[1] as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        // centroid standard error is about sqrt(2 * 3 / 10_000)
        assert!((dist - 4.0).abs() < 0.1, "{dist}");
    }

    #[test]
    fn noiseless_linear_labels_are_exact() {
        let (ds, truth) = synth_with_truth(
            &SynthKind::LinearGaussian {
                d: 3,
                n: 10,
                noise_std: 0.0,
            },
            3,
        )
        .unwrap();
        let truth = truth.unwrap();
        for s in ds.samples() {
            assert_eq!(s.y, dot(&truth, &s.x));
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let task = Task::Classification { num_classes: 2 };
        assert!(Dataset::new(vec![Sample::new(vec![0.0], 2.0)], 1, task).is_err());
        assert!(Dataset::new(vec![Sample::new(vec![0.0], 0.5)], 1, task).is_err());
        assert!(Dataset::new(vec![Sample::new(vec![0.0, 1.0], 1.0)], 1, task).is_err());
    }

    #[test]
    fn without_preserves_order() {
        let samples = (0..5).map(|i| Sample::new(vec![i as f64], 0.0)).collect();
        let ds = Dataset::new(samples, 1, Task::Regression).unwrap();
        let rest = ds.without(&[1, 3]);
        let xs: Vec<f64> = rest.samples().iter().map(|s| s.x[0]).collect();
        assert_eq!(xs, vec![0.0, 2.0, 4.0]);
    }
}
