//! One-run privacy auditing: every canary is included independently with
//! probability 1/2, a single model is trained, and membership guesses made
//! from the canary scores are turned into TPR figures and epsilon lower
//! bounds.
//!
//! The lower bounds treat each guess as correct with probability at most
//! `e^eps / (1 + e^eps)` (pure DP, no delta slack) or `Phi(mu / 2)` (mu-GDP)
//! and invert a one-sided binomial test, Bonferroni-corrected over a small
//! grid of abstention levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::accountant::{accountant_epsilon, calibrate_sigma};
use crate::bilevel::CanarySet;
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::model::Arch;
use crate::trainer::{poisson_rate, train, DpConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipVector {
    pub bits: Vec<bool>,
    pub seed: u64,
}

impl MembershipVector {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// `m` fair coin flips from a seeded generator.
pub fn draw_membership(m: usize, seed: u64) -> Result<MembershipVector> {
    if m == 0 {
        return Err(Error::InvalidConfig("need at least one canary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(MembershipVector {
        bits: (0..m).map(|_| rng.random::<bool>()).collect(),
        seed,
    })
}

fn check_inputs(scores: &[f64], bits: &[bool]) -> Result<()> {
    check_len("membership bits", scores.len(), bits.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("audit scores"));
    }
    let members = bits.iter().filter(|&&b| b).count();
    if members == 0 || members == bits.len() {
        return Err(Error::Degenerate(
            "membership bits must contain both members and non-members".into(),
        ));
    }
    Ok(())
}

/// Largest member rate `#{i in, s_i >= tau} / #in` over thresholds `tau`
/// whose non-member rate `#{i out, s_i >= tau} / #out` is at most `alpha`.
/// Thresholds range over the distinct scores and `+inf`.
pub fn tpr_at_fpr(scores: &[f64], bits: &[bool], alpha: f64) -> Result<f64> {
    check_inputs(scores, bits)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let pos = bits.iter().filter(|&&b| b).count() as f64;
    let neg = bits.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    let mut i = 0;
    // lowering tau through each group of equal scores
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if bits[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if fp as f64 / neg <= alpha {
            best = best.max(tp as f64 / pos);
        }
    }
    Ok(best)
}

/// Equal abstention levels `k+ = k-` at 5%, 10%, 25% and 50% of `m`,
/// rounded up and capped so that `k+ + k- <= m`; duplicates removed.
pub fn abstention_grid(m: usize) -> Vec<(usize, usize)> {
    let mut grid: Vec<(usize, usize)> = Vec::new();
    for frac in [20, 10, 4, 2] {
        let k = m.div_ceil(frac).min(m / 2).max(1);
        if 2 * k <= m && !grid.contains(&(k, k)) {
            grid.push((k, k));
        }
    }
    grid
}

/// Rank order used for guessing: score descending, ties by lower index.
fn guess_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Correct guesses when the `k_plus` top scores are called members and the
/// `k_minus` bottom scores non-members.
pub fn correct_guesses(scores: &[f64], bits: &[bool], k_plus: usize, k_minus: usize) -> Result<usize> {
    check_len("membership bits", scores.len(), bits.len())?;
    if k_plus + k_minus > scores.len() {
        return Err(Error::InvalidConfig("more guesses than canaries".into()));
    }
    let order = guess_order(scores);
    let top = order[..k_plus].iter().filter(|&&i| bits[i]).count();
    let bottom = order[order.len() - k_minus..].iter().filter(|&&i| !bits[i]).count();
    Ok(top + bottom)
}

/// `P[Bin(k, p) >= r]`.
pub fn binomial_upper_tail(k: usize, p: f64, r: usize) -> f64 {
    if r == 0 {
        return 1.0;
    }
    if r > k {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    beta_reg(r as f64, (k - r + 1) as f64, p)
}

/// Smallest `t >= 0` at which `P[Bin(k, p(t)) >= r]` reaches `beta`, for an
/// increasing success bound `p`; 0 when chance accuracy already does.
fn invert_tail(k: usize, r: usize, beta: f64, p: impl Fn(f64) -> f64) -> Result<f64> {
    if binomial_upper_tail(k, p(0.0), r) >= beta {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while binomial_upper_tail(k, p(hi), r) < beta {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Unbracketable("binomial tail inversion".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_upper_tail(k, p(mid), r) >= beta {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn dp_success(eps: f64) -> f64 {
    // e^eps / (1 + e^eps)
    1.0 / (1.0 + (-eps).exp())
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn gdp_success(mu: f64) -> f64 {
    std_normal_cdf(mu / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCell {
    pub value: f64,
    pub k_plus: usize,
    pub k_minus: usize,
    pub correct: usize,
}

fn best_over_grid(
    scores: &[f64],
    bits: &[bool],
    confidence: f64,
    grid: &[(usize, usize)],
    success: impl Fn(f64) -> f64 + Copy,
) -> Result<BoundCell> {
    check_inputs(scores, bits)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence {confidence} outside (0, 1)")));
    }
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty abstention grid".into()));
    }
    let beta = (1.0 - confidence) / grid.len() as f64;
    let mut best: Option<BoundCell> = None;
    for &(k_plus, k_minus) in grid {
        let correct = correct_guesses(scores, bits, k_plus, k_minus)?;
        let value = invert_tail(k_plus + k_minus, correct, beta, success)?;
        if best.is_none_or(|b| value > b.value) {
            best = Some(BoundCell {
                value,
                k_plus,
                k_minus,
                correct,
            });
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Epsilon lower bound over an explicit abstention grid.
pub fn epsilon_lower_bound_on_grid(
    scores: &[f64],
    bits: &[bool],
    confidence: f64,
    grid: &[(usize, usize)],
) -> Result<BoundCell> {
    best_over_grid(scores, bits, confidence, grid, dp_success)
}

/// Epsilon lower bound over [`abstention_grid`].
pub fn epsilon_lower_bound(scores: &[f64], bits: &[bool], confidence: f64) -> Result<BoundCell> {
    epsilon_lower_bound_on_grid(scores, bits, confidence, &abstention_grid(scores.len()))
}

/// `delta(eps)` of a mu-GDP mechanism.
pub fn gdp_delta(mu: f64, eps: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    let a = std_normal_cdf(-eps / mu + mu / 2.0);
    let b = std_normal_cdf(-eps / mu - mu / 2.0);
    (a - eps.exp() * b).max(0.0)
}

/// Smallest `eps >= 0` with `delta(eps) <= delta` for a mu-GDP mechanism.
pub fn gdp_epsilon(mu: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig("delta must lie in (0, 1)".into()));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::InvalidConfig("mu must be finite and >= 0".into()));
    }
    if gdp_delta(mu, 0.0) <= delta {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while gdp_delta(mu, hi) > delta {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Unbracketable("gdp conversion".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gdp_delta(mu, mid) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1.0) {
            break;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdpEstimate {
    pub mu: f64,
    pub epsilon: f64,
    pub k_plus: usize,
    pub k_minus: usize,
}

pub fn gdp_estimate(scores: &[f64], bits: &[bool], confidence: f64, delta: f64) -> Result<GdpEstimate> {
    let cell = best_over_grid(scores, bits, confidence, &abstention_grid(scores.len()), gdp_success)?;
    Ok(GdpEstimate {
        mu: cell.value,
        epsilon: gdp_epsilon(cell.value, delta)?,
        k_plus: cell.k_plus,
        k_minus: cell.k_minus,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub confidence: f64,
    pub alphas: Vec<f64>,
    /// `delta` at which the GDP estimate is converted to epsilon.
    pub delta_report: f64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            confidence: 0.95,
            alphas: vec![0.01, 0.05, 0.1],
            delta_report: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprPoint {
    pub alpha: f64,
    pub tpr: f64,
}

/// Privacy parameters of the audited DP-SGD run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismPrivacy {
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    /// Accountant epsilon of the run; the audit itself assumes `delta = 0`.
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub seed: u64,
    pub scores: Vec<f64>,
    pub bits: Vec<bool>,
    pub tpr_table: Vec<TprPoint>,
    pub eps_hat: f64,
    pub k_plus: usize,
    pub k_minus: usize,
    pub correct: usize,
    pub gdp_mu: f64,
    pub gdp_epsilon: f64,
    pub confidence: f64,
    pub mechanism: Option<MechanismPrivacy>,
}

impl AuditResult {
    pub fn tpr(&self, alpha: f64) -> Option<f64> {
        self.tpr_table.iter().find(|p| p.alpha == alpha).map(|p| p.tpr)
    }
}

/// Metrics for given scores and membership bits.
pub fn evaluate(scores: Vec<f64>, membership: &MembershipVector, cfg: &AuditConfig) -> Result<AuditResult> {
    let bits = &membership.bits;
    let tpr_table = cfg
        .alphas
        .iter()
        .map(|&alpha| Ok(TprPoint { alpha, tpr: tpr_at_fpr(&scores, bits, alpha)? }))
        .collect::<Result<Vec<_>>>()?;
    let eps = epsilon_lower_bound(&scores, bits, cfg.confidence)?;
    let gdp = gdp_estimate(&scores, bits, cfg.confidence, cfg.delta_report)?;
    Ok(AuditResult {
        seed: membership.seed,
        tpr_table,
        eps_hat: eps.value,
        k_plus: eps.k_plus,
        k_minus: eps.k_minus,
        correct: eps.correct,
        gdp_mu: gdp.mu,
        gdp_epsilon: gdp.epsilon,
        confidence: cfg.confidence,
        mechanism: None,
        bits: bits.clone(),
        scores,
    })
}

/// Training seed derived from the audit seed, decorrelated from the
/// membership draw.
pub fn training_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// One full audit: remove the canaries' origin rows from `dataset`, include
/// each canary with probability 1/2, train once and score every canary.
///
/// With `dp` set and a `target_epsilon`, the noise multiplier is calibrated
/// for the run's sampling rate and step count before training.
pub fn run_audit(
    dataset: &Dataset,
    canaries: &CanarySet,
    arch: &Arch,
    train_cfg: &TrainConfig,
    dp: Option<&DpConfig>,
    cfg: &AuditConfig,
    seed: u64,
) -> Result<AuditResult> {
    let membership = draw_membership(canaries.len(), seed)?;
    let base = dataset.without(&canaries.origin_indices);
    let included = canaries
        .samples()
        .iter()
        .zip(&membership.bits)
        .filter(|(_, &b)| b)
        .map(|(z, _)| z);
    let train_set = base.extended(included)?;
    let tcfg = TrainConfig {
        seed: training_seed(seed),
        ..train_cfg.clone()
    };
    let mut mechanism = None;
    let dp_run = match dp {
        None => None,
        Some(dp) => {
            let q = poisson_rate(&tcfg, train_set.len());
            let steps = tcfg.epochs * tcfg.steps_per_epoch(train_set.len());
            let mut run = dp.clone();
            if let Some(target) = dp.target_epsilon {
                run.noise_multiplier = calibrate_sigma(target, q.min(1.0), steps.max(1), dp.delta)?;
            }
            let epsilon = if steps == 0 {
                0.0
            } else {
                accountant_epsilon(run.noise_multiplier, q.min(1.0), steps, dp.delta)?.epsilon
            };
            mechanism = Some(MechanismPrivacy {
                noise_multiplier: run.noise_multiplier,
                clip_norm: run.clip_norm,
                epsilon,
                delta: dp.delta,
            });
            Some(run)
        }
    };
    let model = train(&train_set, arch, &tcfg, dp_run.as_ref())?;
    let scores = canaries
        .samples()
        .iter()
        .map(|z| model.loss(z).map(|l| -l))
        .collect::<Result<Vec<_>>>()?;
    let mut result = evaluate(scores, &membership, cfg)?;
    result.mechanism = mechanism;
    Ok(result)
}
