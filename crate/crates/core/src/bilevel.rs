//! Bilevel canary refinement.
//!
//! Canary features `C_x` are moved to minimise
//!
//! ```text
//! Phi(C) = sum_{z in C} s(theta*, z) - s(theta*_C, z) + R(C)
//! R(C)   = lambda sum_{i != j} <phi(z_i), phi(z_j)>^2
//! ```
//!
//! where `theta*` is trained on the dataset alone, `theta*_C` on the dataset
//! plus canaries, and `phi` is the embedding under `theta*`. The hypergradient
//! with respect to canary `i` is
//!
//! ```text
//! grad_x s(theta*, z_i) - grad_x s(theta*_C, z_i)
//!     + (1/n) d2l/dx dtheta (theta*_C, z_i) v* + grad_{x_i} R
//! H(theta*_C) v* = sum_{z in C} grad_theta s(theta*_C, z)
//! ```
//!
//! The single-loop solver tracks `theta ~ theta*_C` and `v ~ v*` with one
//! stochastic step each per outer step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{check_len, Error, Result};
use crate::influence::{select_canaries, IhvpSolver, InfluenceConfig, InfluenceEngine, Selection};
use crate::linalg::{axpy, dot, norm};
use crate::model::{Arch, EmbeddingSpec, ModelState};
use crate::trainer::{fit_erm_from, BatchSampler, FitConfig, SamplingScheme};

/// Canaries under refinement. Labels are fixed; only features move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanarySet {
    pub canaries: Vec<Sample>,
    /// Dataset rows the canaries were taken from.
    pub origin_indices: Vec<usize>,
    /// Per-feature `[lo, hi]` box that features are projected onto.
    pub box_bounds: Option<Vec<(f64, f64)>>,
}

impl CanarySet {
    pub fn from_dataset(dataset: &Dataset, indices: &[usize], box_projection: bool) -> Result<Self> {
        let mut canaries = Vec::with_capacity(indices.len());
        for &i in indices {
            let z = dataset
                .get(i)
                .ok_or_else(|| Error::InvalidConfig(format!("canary index {i} out of range")))?;
            canaries.push(z.clone());
        }
        Ok(Self {
            canaries,
            origin_indices: indices.to_vec(),
            box_bounds: box_projection.then(|| dataset.feature_bounds()),
        })
    }

    pub fn len(&self) -> usize {
        self.canaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.canaries.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.canaries
    }

    fn project(&mut self) {
        if let Some(bounds) = &self.box_bounds {
            for c in &mut self.canaries {
                for (v, &(lo, hi)) in c.x.iter_mut().zip(bounds) {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }
}

/// Membership score used inside the objective. `Constant` makes every score
/// term vanish and exists to exercise the regulariser in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    NegativeLoss,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelConfig {
    /// `eta`, step for the `theta` and `v` recursions.
    pub inner_step: f64,
    /// `rho`, step for canary features.
    pub outer_step: f64,
    /// `lambda` of the orthogonality regulariser.
    pub reg_strength: f64,
    /// Passes over `D + C`; zero disables refinement.
    pub epochs: usize,
    pub batch_size: usize,
    /// Re-solve `v` exactly every this many epochs (0 never).
    pub v_refresh_epochs: usize,
    /// Also re-fit `theta` on the current canaries at each refresh.
    pub refresh_theta: bool,
    /// Trace interval in epochs (0 only logs the endpoints).
    pub log_every: usize,
    pub box_projection: bool,
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub solver: IhvpSolver,
    /// Inner solves for `theta*`, warm starts and refreshes.
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self {
            inner_step: 0.05,
            outer_step: 100.0,
            reg_strength: 0.1,
            epochs: 100,
            batch_size: 64,
            v_refresh_epochs: 10,
            refresh_theta: false,
            log_every: 1,
            box_projection: true,
            damping: 0.0,
            cg_tol: 1e-8,
            cg_max_iters: 1000,
            solver: IhvpSolver::ConjugateGradient,
            fit: FitConfig::default(),
            seed: 0,
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_step >= 0.0 && self.outer_step >= 0.0 && self.reg_strength >= 0.0 && self.damping >= 0.0)
            || !self.inner_step.is_finite()
            || !self.outer_step.is_finite()
            || !self.reg_strength.is_finite()
        {
            return Err(Error::InvalidConfig("bilevel steps and strengths must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("bilevel batch size must be positive".into()));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return Err(Error::InvalidConfig("cg tolerance and iteration budget must be positive".into()));
        }
        Ok(())
    }

    fn solver_config(&self) -> InfluenceConfig {
        InfluenceConfig {
            damping: self.damping,
            cg_tol: self.cg_tol,
            cg_max_iters: self.cg_max_iters,
            solver: self.solver,
            ..InfluenceConfig::default()
        }
    }
}

/// Coupled iterate of the single-loop solver.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelState {
    pub theta: ModelState,
    pub v: Vec<f64>,
    pub canaries: CanarySet,
    pub theta_star_ref: ModelState,
    pub embedding: EmbeddingSpec,
    pub inner_step: f64,
    pub outer_step: f64,
    pub reg_strength: f64,
    pub damping: f64,
    pub iteration: usize,
    /// `|D| + |C|`.
    pub n_total: usize,
}

impl BilevelState {
    pub fn new(
        theta_star_ref: ModelState,
        theta: ModelState,
        v: Vec<f64>,
        canaries: CanarySet,
        dataset_len: usize,
        cfg: &BilevelConfig,
    ) -> Result<Self> {
        check_len("v", theta.param_count(), v.len())?;
        check_len("reference parameters", theta.param_count(), theta_star_ref.param_count())?;
        Ok(Self {
            embedding: theta_star_ref.embedding_spec(),
            n_total: dataset_len + canaries.len(),
            theta,
            v,
            canaries,
            theta_star_ref,
            inner_step: cfg.inner_step,
            outer_step: cfg.outer_step,
            reg_strength: cfg.reg_strength,
            damping: cfg.damping,
            iteration: 0,
        })
    }
}

fn embeddings(canaries: &[Sample], model: &ModelState, spec: &EmbeddingSpec) -> Result<Vec<Vec<f64>>> {
    canaries.iter().map(|z| model.embed(spec, &z.x)).collect()
}

/// `lambda sum_{i != j} <e_i, e_j>^2` over ordered pairs.
pub fn regularizer(canaries: &[Sample], model: &ModelState, spec: &EmbeddingSpec, reg_strength: f64) -> Result<f64> {
    if canaries.is_empty() {
        return Err(Error::InvalidConfig("regulariser needs at least one canary".into()));
    }
    let e = embeddings(canaries, model, spec)?;
    let mut total = 0.0;
    for i in 0..e.len() {
        for j in 0..e.len() {
            if i != j {
                total += dot(&e[i], &e[j]).powi(2);
            }
        }
    }
    Ok(reg_strength * total)
}

/// Mean of `<e_i, e_j>^2` over ordered pairs; 0 for a single canary.
pub fn mean_pairwise_sq_inner(canaries: &[Sample], model: &ModelState, spec: &EmbeddingSpec) -> Result<f64> {
    let m = canaries.len();
    if m < 2 {
        return Ok(0.0);
    }
    Ok(regularizer(canaries, model, spec, 1.0)? / (m * (m - 1)) as f64)
}

/// Gradient of [`regularizer`] with respect to each canary's features.
pub fn regularizer_grad(
    canaries: &[Sample],
    model: &ModelState,
    spec: &EmbeddingSpec,
    reg_strength: f64,
) -> Result<Vec<Vec<f64>>> {
    if reg_strength == 0.0 {
        return Ok(canaries.iter().map(|z| vec![0.0; z.x.len()]).collect());
    }
    let e = embeddings(canaries, model, spec)?;
    canaries
        .par_iter()
        .enumerate()
        .map(|(i, z)| {
            let mut w = vec![0.0; spec.dim];
            for (j, ej) in e.iter().enumerate() {
                if j != i {
                    axpy(4.0 * reg_strength * dot(&e[i], ej), ej, &mut w);
                }
            }
            model.embed_vjp(spec, &z.x, &w)
        })
        .collect()
}

fn phi_value(
    theta_c: &ModelState,
    theta_star: &ModelState,
    canaries: &[Sample],
    spec: &EmbeddingSpec,
    reg_strength: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for z in canaries {
        // s(theta*, z) - s(theta_C, z) with s = -loss
        total += theta_c.loss(z)? - theta_star.loss(z)?;
    }
    Ok(total + regularizer(canaries, theta_star, spec, reg_strength)?)
}

/// `Phi` at the tracked iterate, using `state.theta` in place of `theta*_C`.
pub fn phi_objective(state: &BilevelState) -> Result<f64> {
    phi_value(
        &state.theta,
        &state.theta_star_ref,
        state.canaries.samples(),
        &state.embedding,
        state.reg_strength,
    )
}

fn inner_solve(canaries: &CanarySet, dataset: &Dataset, init: &ModelState, fit: &FitConfig) -> Result<(Dataset, ModelState)> {
    let union = dataset.extended(canaries.samples())?;
    let theta = fit_erm_from(init, &union, fit)?;
    Ok((union, theta))
}

/// `Phi` with `theta*_C` re-solved on `dataset + canaries`, starting from
/// `theta_star`.
pub fn phi_exact(
    canaries: &CanarySet,
    dataset: &Dataset,
    theta_star: &ModelState,
    reg_strength: f64,
    cfg: &BilevelConfig,
) -> Result<f64> {
    let (_, theta_c) = inner_solve(canaries, dataset, theta_star, &cfg.fit)?;
    phi_value(
        &theta_c,
        theta_star,
        canaries.samples(),
        &theta_star.embedding_spec(),
        reg_strength,
    )
}

fn score_theta_sum(model: &ModelState, canaries: &[Sample]) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; model.param_count()];
    for z in canaries {
        axpy(-1.0, &model.grad_theta(z)?, &mut sum);
    }
    Ok(sum)
}

/// Solves `(H(model; union) + damping) v = sum_{z in C} grad_theta s(model, z)`.
pub fn solve_v(model: &ModelState, union: &Dataset, canaries: &[Sample], cfg: &BilevelConfig) -> Result<Vec<f64>> {
    let rhs = score_theta_sum(model, canaries)?;
    InfluenceEngine::new(model, union, &cfg.solver_config())?.inverse_hvp(&rhs)
}

/// Per-canary x-gradient of `Phi` given a model for `theta*_C` and `v`.
fn canary_directions(
    theta: &ModelState,
    theta_star: &ModelState,
    v: &[f64],
    canaries: &[Sample],
    spec: &EmbeddingSpec,
    reg_strength: f64,
    n_total: usize,
    score: ScoreKind,
) -> Result<Vec<Vec<f64>>> {
    let reg = regularizer_grad(canaries, theta_star, spec, reg_strength)?;
    let inv_n = 1.0 / n_total as f64;
    canaries
        .par_iter()
        .zip(reg)
        .map(|(z, mut g)| {
            axpy(inv_n, &theta.mixed_hvp(z, v)?, &mut g);
            if score == ScoreKind::NegativeLoss {
                axpy(1.0, &theta.grad_x(z)?, &mut g);
                axpy(-1.0, &theta_star.grad_x(z)?, &mut g);
            }
            Ok(g)
        })
        .collect()
}

/// Exact hypergradient of `Phi` with respect to every canary's features,
/// re-solving `theta*_C` and `v*` from scratch. Strongly convex models only.
pub fn hypergradient_exact(
    canaries: &CanarySet,
    dataset: &Dataset,
    theta_star: &ModelState,
    reg_strength: f64,
    score: ScoreKind,
    cfg: &BilevelConfig,
) -> Result<Vec<Vec<f64>>> {
    if !theta_star.arch.is_strongly_convex() {
        return Err(Error::Unsupported(
            "exact hypergradients need a strongly convex model".into(),
        ));
    }
    if canaries.is_empty() {
        return Err(Error::InvalidConfig("no canaries".into()));
    }
    let (union, theta_c) = inner_solve(canaries, dataset, theta_star, &cfg.fit)?;
    let v = match score {
        ScoreKind::NegativeLoss => solve_v(&theta_c, &union, canaries.samples(), cfg)?,
        ScoreKind::Constant => vec![0.0; theta_c.param_count()],
    };
    canary_directions(
        &theta_c,
        theta_star,
        &v,
        canaries.samples(),
        &theta_star.embedding_spec(),
        reg_strength,
        union.len(),
        score,
    )
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|a| a.is_finite())
}

/// One coupled update. `batch` is drawn from `D + C` with current canary
/// features. All three right-hand sides use pre-step values.
pub fn soba_step(state: &BilevelState, batch: &[&Sample]) -> Result<BilevelState> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let theta = &state.theta;
    let eta = state.inner_step;

    let g = theta.mean_grad(batch.iter().copied())?;
    let mut next_theta = theta.theta.clone();
    axpy(-eta, &g, &mut next_theta);

    // v <- v - eta [ (H + damping) v - sum_C grad_theta s ], whose fixed
    // point is the v* of the hypergradient
    let mut residual = theta.hvp_iter(batch.iter().copied(), &state.v)?;
    axpy(state.damping, &state.v, &mut residual);
    axpy(-1.0, &score_theta_sum(theta, state.canaries.samples())?, &mut residual);
    let mut next_v = state.v.clone();
    axpy(-eta, &residual, &mut next_v);

    let dirs = canary_directions(
        theta,
        &state.theta_star_ref,
        &state.v,
        state.canaries.samples(),
        &state.embedding,
        state.reg_strength,
        state.n_total,
        ScoreKind::NegativeLoss,
    )?;
    let mut canaries = state.canaries.clone();
    for (c, d) in canaries.canaries.iter_mut().zip(&dirs) {
        axpy(-state.outer_step, d, &mut c.x);
    }
    canaries.project();

    if !finite(&next_theta) || !finite(&next_v) || canaries.canaries.iter().any(|c| !finite(&c.x)) {
        return Err(Error::NonFinite("bilevel update"));
    }
    Ok(BilevelState {
        theta: theta.with_theta(next_theta)?,
        v: next_v,
        canaries,
        iteration: state.iteration + 1,
        ..state.clone()
    })
}

/// `(theta_0, v_0)`: the model re-fit on `dataset + canaries` from
/// `theta_star`, and the exact `v` there.
pub fn warm_start(
    dataset: &Dataset,
    canaries: &CanarySet,
    theta_star: &ModelState,
    cfg: &BilevelConfig,
) -> Result<(ModelState, Vec<f64>)> {
    if canaries.is_empty() {
        return Err(Error::InvalidConfig("warm start needs at least one canary".into()));
    }
    let (union, theta) = inner_solve(canaries, dataset, theta_star, &cfg.fit)?;
    let v = solve_v(&theta, &union, canaries.samples(), cfg)?;
    Ok((theta, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Completed solver steps.
    pub t: usize,
    pub phi: f64,
    pub reg: f64,
    /// Mean distance of canary features from their starting point.
    pub displacement: f64,
}

fn record(state: &BilevelState, start: &[Sample]) -> Result<TraceRecord> {
    let reg = regularizer(state.canaries.samples(), &state.theta_star_ref, &state.embedding, state.reg_strength)?;
    let displacement = state
        .canaries
        .samples()
        .iter()
        .zip(start)
        .map(|(c, s)| {
            let d: Vec<f64> = c.x.iter().zip(&s.x).map(|(a, b)| a - b).collect();
            norm(&d)
        })
        .sum::<f64>()
        / start.len() as f64;
    Ok(TraceRecord {
        t: state.iteration,
        phi: phi_objective(state)?,
        reg,
        displacement,
    })
}

/// Refines `canaries` against `dataset` (which must not contain them) and a
/// frozen `theta_star` trained on `dataset`.
pub fn refine(
    dataset: &Dataset,
    canaries: CanarySet,
    theta_star: &ModelState,
    cfg: &BilevelConfig,
) -> Result<(CanarySet, Vec<TraceRecord>)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok((canaries, Vec::new()));
    }
    let (theta0, v0) = warm_start(dataset, &canaries, theta_star, cfg)?;
    let start = canaries.canaries.clone();
    let mut state = BilevelState::new(theta_star.clone(), theta0, v0, canaries, dataset.len(), cfg)?;
    let n_total = state.n_total;
    let batch_size = cfg.batch_size.min(n_total);
    let steps_per_epoch = n_total.div_ceil(batch_size);
    let mut sampler = BatchSampler::new(SamplingScheme::ShuffledEpochs, batch_size, n_total, cfg.seed)?;
    let mut trace = vec![record(&state, &start)?];
    let base = dataset.samples();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.v_refresh_epochs > 0 && epoch % cfg.v_refresh_epochs == 0 {
            let union = dataset.extended(state.canaries.samples())?;
            if cfg.refresh_theta {
                state.theta = fit_erm_from(&state.theta, &union, &cfg.fit)?;
            }
            state.v = solve_v(&state.theta, &union, state.canaries.samples(), cfg)?;
        }
        for _ in 0..steps_per_epoch {
            let idx = sampler.next_batch();
            let batch: Vec<&Sample> = idx
                .iter()
                .map(|&i| if i < base.len() { &base[i] } else { &state.canaries.canaries[i - base.len()] })
                .collect();
            state = soba_step(&state, &batch)?;
        }
        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0) {
            trace.push(record(&state, &start)?);
        }
    }
    Ok((state.canaries, trace))
}

/// Everything produced by one crafting run.
#[derive(Debug, Clone)]
pub struct IbisOutput {
    pub selection: Selection,
    /// Greedy canaries before refinement.
    pub initial: CanarySet,
    pub canaries: CanarySet,
    /// Reference model trained without the canaries.
    pub theta_star: ModelState,
    pub trace: Vec<TraceRecord>,
}

/// Greedy influence-based selection followed by bilevel refinement.
pub fn ibis_run(
    dataset: &Dataset,
    arch: &Arch,
    influence_cfg: &InfluenceConfig,
    cfg: &BilevelConfig,
) -> Result<IbisOutput> {
    cfg.validate()?;
    let selection = select_canaries(dataset, arch, influence_cfg, &cfg.fit)?;
    let initial = CanarySet::from_dataset(dataset, &selection.greedy.indices, cfg.box_projection)?;
    let rest = dataset.without(&selection.greedy.indices);
    let theta_star = fit_erm_from(&selection.model, &rest, &cfg.fit)?;
    let (canaries, trace) = refine(&rest, initial.clone(), &theta_star, cfg)?;
    Ok(IbisOutput {
        selection,
        initial,
        canaries,
        theta_star,
        trace,
    })
}
