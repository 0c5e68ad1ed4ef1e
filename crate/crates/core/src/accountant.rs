//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism and
//! noise calibration by bisection.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Orders at which the subsampled mechanism's RDP is evaluated exactly.
pub fn subsampled_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5];
    orders.extend((2..=64).map(|a| a as f64));
    orders.extend([128.0, 256.0]);
    orders
}

/// Large orders covered by the unsubsampled bound `alpha / (2 sigma^2)`,
/// which dominates the subsampled RDP at every order. They only matter in
/// the very-low-leakage regime where the conversion overhead
/// `log(1/delta) / (alpha - 1)` of small orders would dominate.
pub fn tail_orders() -> Vec<f64> {
    (9..=20).map(|k| f64::powi(2.0, k)).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if b >= a {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 5.0 {
        erfc(x).ln()
    } else {
        // asymptotic expansion of erfc for large arguments
        let x2 = x * x;
        -x2 - (x * std::f64::consts::PI.sqrt()).ln()
            + (1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)).ln()
    }
}

fn ln_binom(n: u64, k: u64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binom(alpha, k)
            + kf * q.ln()
            + (alpha - k) as f64 * (1.0 - q).ln()
            + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let mut log_a0 = f64::NEG_INFINITY;
    let mut log_a1 = f64::NEG_INFINITY;
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = sigma * sigma;
    // generalised binomial coefficient, tracked as (log |c|, sign)
    let mut log_coef = 0.0f64;
    let mut positive = true;
    for i in 0..100_000u32 {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 {
            break;
        }
        let ratio = (alpha - fi) / (fi + 1.0);
        if ratio == 0.0 {
            break;
        }
        log_coef += ratio.abs().ln();
        if ratio < 0.0 {
            positive = !positive;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP at order `alpha` of one Poisson-subsampled Gaussian mechanism with
/// sampling rate `q` and noise multiplier `sigma` (sensitivity 1).
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> f64 {
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Converts composed RDP at `alpha` into an `(eps, delta)` guarantee.
pub fn rdp_to_epsilon(rdp: f64, alpha: f64, delta: f64) -> f64 {
    rdp - (delta.ln() + alpha.ln()) / (alpha - 1.0) + ((alpha - 1.0) / alpha).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonEstimate {
    pub epsilon: f64,
    pub order: f64,
}

/// Epsilon after `steps` compositions, minimised over the order grid.
pub fn accountant_epsilon(sigma: f64, q: f64, steps: usize, delta: f64) -> Result<EpsilonEstimate> {
    if !(sigma >= 0.0) || !(q > 0.0 && q <= 1.0) || steps == 0 || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "accountant needs sigma >= 0, q in (0,1], steps >= 1, delta in (0,1); got {sigma}, {q}, {steps}, {delta}"
        )));
    }
    if sigma == 0.0 {
        return Ok(EpsilonEstimate {
            epsilon: f64::INFINITY,
            order: f64::NAN,
        });
    }
    let t = steps as f64;
    let mut best = EpsilonEstimate {
        epsilon: f64::INFINITY,
        order: f64::NAN,
    };
    let exact = subsampled_orders()
        .into_iter()
        .map(|a| (a, rdp_subsampled_gaussian(q, sigma, a)));
    let tail = tail_orders()
        .into_iter()
        .map(|a| (a, a / (2.0 * sigma * sigma)));
    for (alpha, rdp) in exact.chain(tail) {
        let eps = rdp_to_epsilon(t * rdp, alpha, delta);
        if eps < best.epsilon {
            best = EpsilonEstimate {
                epsilon: eps,
                order: alpha,
            };
        }
    }
    best.epsilon = best.epsilon.max(0.0);
    Ok(best)
}

/// Smallest noise multiplier (up to relative precision 1e-3 in epsilon)
/// whose accounted epsilon does not exceed `target_epsilon`.
pub fn calibrate_sigma(target_epsilon: f64, q: f64, steps: usize, delta: f64) -> Result<f64> {
    if !(target_epsilon > 0.0) || !target_epsilon.is_finite() {
        return Err(Error::InvalidConfig("target epsilon must be positive".into()));
    }
    let eps = |s: f64| accountant_epsilon(s, q, steps, delta).map(|e| e.epsilon);
    let mut hi = 1.0;
    while eps(hi)? > target_epsilon {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::Unbracketable(format!(
                "epsilon {target_epsilon} needs sigma above 1e8"
            )));
        }
    }
    let mut lo = hi / 2.0;
    while eps(lo)? <= target_epsilon {
        lo /= 2.0;
        if lo < 1e-6 {
            return Err(Error::Unbracketable(format!(
                "epsilon {target_epsilon} is met by every sigma >= 1e-6"
            )));
        }
    }
    // invariant: eps(lo) > target >= eps(hi)
    for _ in 0..200 {
        let e_hi = eps(hi)?;
        if (target_epsilon - e_hi) / target_epsilon < 1e-4 {
            return Ok(hi);
        }
        let mid = 0.5 * (lo + hi);
        if eps(mid)? > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let e_hi = eps(hi)?;
    if (target_epsilon - e_hi) / target_epsilon < 1e-3 {
        Ok(hi)
    } else {
        Err(Error::Unbracketable(format!(
            "bisection stalled at sigma {hi} with epsilon {e_hi}"
        )))
    }
}
