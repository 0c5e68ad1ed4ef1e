//! Seeded SGD and DP-SGD training loops, plus full-batch Newton fitting for
//! the strongly convex architectures.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::linalg::{norm, DenseFactor};
use crate::model::{Arch, ModelState};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig("step size must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(Error::InvalidConfig(format!(
                "batch size {} must lie in 1..={dataset_len}",
                self.batch_size
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-example clipping threshold. `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub target_epsilon: Option<f64>,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::InvalidConfig("noise multiplier must be >= 0".into()));
        }
        if self.clip_norm.is_infinite() && self.noise_multiplier > 0.0 {
            return Err(Error::InvalidConfig("unbounded clip norm needs a zero noise multiplier".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
        }
        if let Some(e) = self.target_epsilon {
            if !(e > 0.0) {
                return Err(Error::InvalidConfig("target epsilon must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SamplingScheme {
    /// Disjoint batches of a fresh permutation every epoch.
    ShuffledEpochs,
    /// Each example joins each batch independently with probability `rate`.
    Poisson { rate: f64 },
}

/// Deterministic batch index generator.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    scheme: SamplingScheme,
    batch_size: usize,
    len: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(scheme: SamplingScheme, batch_size: usize, len: usize, seed: u64) -> Result<Self> {
        if let SamplingScheme::Poisson { rate } = scheme {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(Error::InvalidConfig("sampling rate must lie in (0, 1]".into()));
            }
        }
        if batch_size == 0 || len == 0 {
            return Err(Error::InvalidConfig("sampler needs a non-empty dataset".into()));
        }
        Ok(Self {
            scheme,
            batch_size,
            len,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.scheme {
            SamplingScheme::Poisson { rate } => (0..self.len)
                .filter(|_| self.rng.random::<f64>() < rate)
                .collect(),
            SamplingScheme::ShuffledEpochs => {
                if self.queue.is_empty() {
                    let mut perm: Vec<usize> = (0..self.len).collect();
                    perm.shuffle(&mut self.rng);
                    let mut chunks: Vec<Vec<usize>> =
                        perm.chunks(self.batch_size).map(|c| c.to_vec()).collect();
                    chunks.reverse();
                    self.queue = chunks;
                }
                self.queue.pop().expect("refilled above")
            }
        }
    }
}

/// Rescales `g` to norm at most `clip_norm`.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let n = norm(g);
    if n <= clip_norm || n == 0.0 {
        return g.to_vec();
    }
    let s = clip_norm / n;
    g.iter().map(|v| v * s).collect()
}

/// Per-step diagnostics exposed to observers.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub batch_size: usize,
    pub mean_loss: f64,
    /// Norms of the per-example gradients after clipping (DP steps only).
    pub clipped_norms: Vec<f64>,
}

fn sgd_update<'a, I>(model: &ModelState, batch: I, step_size: f64) -> Result<(ModelState, StepReport)>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut grad = vec![0.0; model.theta.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    for z in batch {
        let (l, g, _) = model.loss_and_grads(z)?;
        loss += l;
        for (a, gi) in grad.iter_mut().zip(g) {
            *a += gi;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / n as f64;
    let theta = model
        .theta
        .iter()
        .zip(&grad)
        .map(|(t, g)| t - step_size * g * inv)
        .collect();
    Ok((
        model.with_theta(theta)?,
        StepReport {
            batch_size: n,
            mean_loss: loss * inv,
            clipped_norms: Vec::new(),
        },
    ))
}

/// One plain mini-batch SGD step.
pub fn sgd_step(model: &ModelState, batch: &Dataset, step_size: f64) -> Result<ModelState> {
    Ok(sgd_update(model, batch.samples(), step_size)?.0)
}

/// DP-SGD update where the batch may be empty (Poisson sampling); the
/// gradient average is then taken to be zero and only noise is applied.
fn dp_update<'a, I>(
    model: &ModelState,
    batch: I,
    step_size: f64,
    dp: &DpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelState, StepReport)>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let p = model.theta.len();
    let mut sum = vec![0.0; p];
    let mut loss = 0.0;
    let mut norms = Vec::new();
    for z in batch {
        let (l, g, _) = model.loss_and_grads(z)?;
        loss += l;
        let c = clip(&g, dp.clip_norm);
        norms.push(norm(&c));
        for (a, ci) in sum.iter_mut().zip(c) {
            *a += ci;
        }
    }
    let n = norms.len();
    let inv = if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let noise_std = dp.clip_norm * dp.noise_multiplier;
    // noise is drawn coordinate by coordinate, in parameter order
    let theta = model
        .theta
        .iter()
        .zip(&sum)
        .map(|(t, s)| {
            let noise = if noise_std > 0.0 {
                noise_std * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            t - step_size * (s * inv + noise)
        })
        .collect();
    Ok((
        model.with_theta(theta)?,
        StepReport {
            batch_size: n,
            mean_loss: loss * inv,
            clipped_norms: norms,
        },
    ))
}

/// `theta <- theta - eta * (mean_i clip(g_i) + N(0, C^2 sigma^2 I))`.
pub fn dp_sgd_step(
    model: &ModelState,
    batch: &Dataset,
    step_size: f64,
    dp: &DpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ModelState> {
    Ok(dp_sgd_step_instrumented(model, batch, step_size, dp, rng)?.0)
}

pub fn dp_sgd_step_instrumented(
    model: &ModelState,
    batch: &Dataset,
    step_size: f64,
    dp: &DpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelState, StepReport)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    dp_update(model, batch.samples(), step_size, dp, rng)
}

/// Sampling rate used by DP runs: `batch_size / |D|`.
pub fn poisson_rate(cfg: &TrainConfig, dataset_len: usize) -> f64 {
    cfg.batch_size as f64 / dataset_len as f64
}

/// Trains from the seeded initialisation of `arch`.
pub fn train(
    dataset: &Dataset,
    arch: &Arch,
    cfg: &TrainConfig,
    dp: Option<&DpConfig>,
) -> Result<ModelState> {
    let init = ModelState::init(arch.clone(), dataset.dim(), cfg.seed)?;
    train_from(init, dataset, cfg, dp, &mut |_, _| {})
}

/// Runs `epochs * ceil(|D| / batch_size)` steps from `init`. Non-private runs
/// use shuffled epochs; DP runs use Poisson sampling at `batch_size / |D|`.
/// The observer sees every step's report.
pub fn train_from(
    init: ModelState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    dp: Option<&DpConfig>,
    observer: &mut dyn FnMut(usize, &StepReport),
) -> Result<ModelState> {
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    cfg.validate(dataset.len())?;
    init.validate()?;
    init.arch.check_task(dataset.task())?;
    if let Some(dp) = dp {
        dp.validate()?;
    }
    let scheme = match dp {
        Some(_) => SamplingScheme::Poisson {
            rate: poisson_rate(cfg, dataset.len()),
        },
        None => SamplingScheme::ShuffledEpochs,
    };
    let mut sampler = BatchSampler::new(scheme, cfg.batch_size, dataset.len(), cfg.seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);

    let samples = dataset.samples();
    let total = cfg.epochs * cfg.steps_per_epoch(dataset.len());
    let mut model = init;
    for step in 0..total {
        let idx = sampler.next_batch();
        let batch = idx.iter().map(|&i| &samples[i]);
        let (next, report) = match dp {
            Some(dp) => dp_update(&model, batch, cfg.step_size, dp, &mut noise_rng)?,
            None => sgd_update(&model, batch, cfg.step_size)?,
        };
        if !report.mean_loss.is_finite()
            || report.mean_loss > DIVERGENCE_LOSS
            || next.theta.iter().any(|t| !t.is_finite())
        {
            return Err(Error::Diverged {
                step,
                loss: report.mean_loss,
            });
        }
        observer(step, &report);
        model = next;
    }
    Ok(model)
}

/// Full-batch damped Newton iterations on the mean loss until the gradient
/// norm falls below `grad_tol`. Intended for the strongly convex models.
pub fn fit_newton(
    init: &ModelState,
    data: &Dataset,
    grad_tol: f64,
    max_iters: usize,
) -> Result<ModelState> {
    init.arch.check_task(data.task())?;
    let mut model = init.clone();
    let mut loss = model.mean_loss(data)?;
    for _ in 0..max_iters {
        let g = model.mean_grad(data.samples())?;
        if norm(&g) <= grad_tol {
            return Ok(model);
        }
        let hess = model.dense_hessian(data)?;
        let mut shift = 0.0;
        let dir = loop {
            let f = DenseFactor::new(&hess, shift)?;
            if f.is_positive_definite() {
                break f.solve(&g)?;
            }
            shift = if shift == 0.0 { 1e-8 } else { shift * 10.0 };
        };
        let mut t = 1.0;
        let slope = crate::linalg::dot(&g, &dir);
        loop {
            let cand: Vec<f64> = model
                .theta
                .iter()
                .zip(&dir)
                .map(|(a, d)| a - t * d)
                .collect();
            let next = model.with_theta(cand)?;
            let next_loss = next.mean_loss(data)?;
            if next_loss <= loss - 1e-4 * t * slope || t < 1e-10 {
                model = next;
                loss = next_loss;
                break;
            }
            t *= 0.5;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step: 0, loss });
        }
    }
    let g = model.mean_grad(data.samples())?;
    if norm(&g) <= grad_tol {
        Ok(model)
    } else {
        Err(Error::Degenerate(format!(
            "newton stopped with gradient norm {:e} above tolerance {grad_tol:e}",
            norm(&g)
        )))
    }
}

/// How to (approximately) minimise the empirical risk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Gradient-norm tolerance for the Newton path.
    pub grad_tol: f64,
    pub max_newton_iters: usize,
    /// SGD schedule used for non-convex models.
    pub sgd: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_newton_iters: 100,
            sgd: TrainConfig {
                step_size: 0.1,
                batch_size: 32,
                epochs: 50,
                seed: 0,
            },
        }
    }
}

/// Empirical risk minimiser: Newton to tolerance for convex models, the
/// configured SGD run otherwise.
pub fn fit_erm(arch: &Arch, data: &Dataset, cfg: &FitConfig) -> Result<ModelState> {
    fit_erm_from(&ModelState::init(arch.clone(), data.dim(), cfg.sgd.seed)?, data, cfg)
}

pub fn fit_erm_from(init: &ModelState, data: &Dataset, cfg: &FitConfig) -> Result<ModelState> {
    if init.arch.is_strongly_convex() {
        fit_newton(init, data, cfg.grad_tol, cfg.max_newton_iters)
    } else {
        let mut sgd = cfg.sgd.clone();
        sgd.batch_size = sgd.batch_size.min(data.len());
        train_from(init.clone(), data, &sgd, None, &mut |_, _| {})
    }
}
