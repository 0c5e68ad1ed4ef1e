//! Self- and cross-influence of training points on the loss-based score,
//! and greedy canary selection over a preselected pool.
//!
//! With `s = -l` and a strongly convex risk, the influence of `z'` on the
//! score of `z` is
//!
//! ```text
//! I(z, z') = grad l(theta*, z)' [H + damping I]^-1 grad l(theta*, z')
//! ```
//!
//! where `H` is the Hessian of the mean training loss. Removing `z'` from a
//! training set of size `n` changes the score of `z` by about `I(z, z') / n`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{check_len, Error, Result};
use crate::linalg::{conjugate_gradient, dot, norm, DenseFactor};
use crate::model::{Arch, ModelState};
use crate::trainer::{fit_erm, FitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IhvpSolver {
    /// Matrix-free conjugate gradient on Hessian-vector products.
    ConjugateGradient,
    /// Materialise the Hessian once (one HVP per parameter) and factorise it.
    /// Only sensible for small parameter counts.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub damping: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub preselect_p: usize,
    pub num_canaries_m: usize,
    /// Lower clamp for the cross-influence denominator of the selection ratio.
    pub denom_floor: f64,
    pub solver: IhvpSolver,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            damping: 0.0,
            cg_tol: 1e-8,
            cg_max_iters: 1000,
            preselect_p: 256,
            num_canaries_m: 64,
            denom_floor: 1e-8,
            solver: IhvpSolver::ConjugateGradient,
        }
    }
}

impl InfluenceConfig {
    /// Defaults with the damping suited to `arch`: none for strongly convex
    /// models, `1e-3` otherwise so the solver sees a positive definite system.
    pub fn for_arch(arch: &Arch) -> Self {
        Self {
            damping: if arch.is_strongly_convex() { 0.0 } else { 1e-3 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.damping >= 0.0) {
            return Err(Error::InvalidConfig("damping must be >= 0".into()));
        }
        if !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return Err(Error::InvalidConfig("cg tolerance and iteration budget must be positive".into()));
        }
        if self.num_canaries_m == 0 || self.preselect_p < self.num_canaries_m {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= m <= p, got m = {} and p = {}",
                self.num_canaries_m, self.preselect_p
            )));
        }
        if !(self.denom_floor > 0.0) {
            return Err(Error::InvalidConfig("denominator floor must be positive".into()));
        }
        Ok(())
    }
}

/// Loss-based membership score `s(theta, z) = -l(theta, z)`.
pub fn score(model: &ModelState, z: &Sample) -> Result<f64> {
    Ok(-model.loss(z)?)
}

/// `p x p` pairwise influences over a pool of dataset indices.
///
/// `scores[i][j] = I(z_i, z_j)`: the influence of pool member `j` on the
/// score of pool member `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub indices: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
}

impl InfluenceMatrix {
    pub fn new(indices: Vec<usize>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let p = indices.len();
        check_len("influence matrix rows", p, scores.len())?;
        for row in &scores {
            check_len("influence matrix columns", p, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("influence matrix"));
            }
        }
        Ok(Self { indices, scores })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Influence of pool position `j` on the score at pool position `i`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i][j]
    }

    pub fn self_influence(&self, i: usize) -> f64 {
        self.scores[i][i]
    }
}

/// Inverse-HVP oracle bound to one trained model and its training set.
pub struct InfluenceEngine<'a> {
    model: &'a ModelState,
    dataset: &'a Dataset,
    cfg: InfluenceConfig,
    dense: Option<(Vec<Vec<f64>>, DenseFactor)>,
    /// Norm of the mean training gradient at the model; influence assumes it
    /// is (close to) zero.
    pub optimality_gap: f64,
}

impl<'a> InfluenceEngine<'a> {
    pub fn new(model: &'a ModelState, dataset: &'a Dataset, cfg: &InfluenceConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if !(cfg.damping >= 0.0) || !(cfg.cg_tol > 0.0) {
            return Err(Error::InvalidConfig("invalid solver settings".into()));
        }
        let optimality_gap = norm(&model.mean_grad(dataset.samples())?);
        let dense = match cfg.solver {
            IhvpSolver::ConjugateGradient => None,
            IhvpSolver::Dense => {
                let cols = model.dense_hessian(dataset)?;
                let factor = DenseFactor::new(&cols, cfg.damping)?;
                Some((cols, factor))
            }
        };
        Ok(Self {
            model,
            dataset,
            cfg: cfg.clone(),
            dense,
            optimality_gap,
        })
    }

    pub fn config(&self) -> &InfluenceConfig {
        &self.cfg
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut hv = self.model.hvp_theta(self.dataset, v)?;
        crate::linalg::axpy(self.cfg.damping, v, &mut hv);
        Ok(hv)
    }

    /// Solves `(H + damping I) u = b`.
    pub fn inverse_hvp(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("right-hand side", self.model.param_count(), b.len())?;
        match &self.dense {
            None => Ok(conjugate_gradient(|v| self.apply(v), b, self.cfg.cg_tol, self.cfg.cg_max_iters)?.x),
            Some((cols, factor)) => {
                let u = factor.solve(b)?;
                let mut au = vec![0.0; b.len()];
                for (j, c) in cols.iter().enumerate() {
                    crate::linalg::axpy(u[j], c, &mut au);
                }
                crate::linalg::axpy(self.cfg.damping, &u, &mut au);
                let res: Vec<f64> = au.iter().zip(b).map(|(a, bi)| a - bi).collect();
                let rel = norm(&res) / norm(b).max(f64::MIN_POSITIVE);
                if norm(b) > 0.0 && rel > self.cfg.cg_tol {
                    return Err(Error::CgNotConverged {
                        iterations: 0,
                        residual: rel,
                    });
                }
                Ok(u)
            }
        }
    }

    /// `I(z, z')`.
    pub fn influence_pair(&self, z: &Sample, z_prime: &Sample) -> Result<f64> {
        let g = self.model.grad_theta(z)?;
        let u = self.inverse_hvp(&self.model.grad_theta(z_prime)?)?;
        Ok(dot(&g, &u))
    }

    /// Self-influence of every training point, in dataset order.
    pub fn self_influences(&self) -> Result<Vec<f64>> {
        self.dataset
            .samples()
            .par_iter()
            .map(|z| {
                let g = self.model.grad_theta(z)?;
                Ok(dot(&g, &self.inverse_hvp(&g)?))
            })
            .collect()
    }

    /// Indices of the `p` highest self-influence points, highest first,
    /// ties broken by lower index.
    pub fn preselect(&self, p: usize) -> Result<Vec<usize>> {
        if p > self.dataset.len() {
            return Err(Error::InvalidConfig(format!(
                "cannot preselect {p} of {} points",
                self.dataset.len()
            )));
        }
        Ok(top_by_value(&self.self_influences()?, p))
    }

    /// Pairwise influence matrix over `pool` (dataset indices).
    pub fn build_matrix(&self, pool: &[usize]) -> Result<InfluenceMatrix> {
        let mut seen = std::collections::HashSet::new();
        for &i in pool {
            if i >= self.dataset.len() || !seen.insert(i) {
                return Err(Error::InvalidConfig(format!(
                    "pool index {i} is out of range or repeated"
                )));
            }
        }
        let samples = self.dataset.samples();
        let grads: Vec<Vec<f64>> = pool
            .iter()
            .map(|&i| self.model.grad_theta(&samples[i]))
            .collect::<Result<_>>()?;
        let solved: Vec<Vec<f64>> = grads
            .par_iter()
            .map(|g| self.inverse_hvp(g))
            .collect::<Result<_>>()?;
        let scores = grads
            .iter()
            .map(|gi| solved.iter().map(|uj| dot(gi, uj)).collect())
            .collect();
        InfluenceMatrix::new(pool.to_vec(), scores)
    }
}

/// Positions of the `p` largest values, largest first, ties by position.
pub fn top_by_value(values: &[f64], p: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(p);
    order
}

/// Free-function form of [`InfluenceEngine::inverse_hvp`].
pub fn inverse_hvp(model: &ModelState, dataset: &Dataset, b: &[f64], cfg: &InfluenceConfig) -> Result<Vec<f64>> {
    InfluenceEngine::new(model, dataset, cfg)?.inverse_hvp(b)
}

/// `sum_{z in C} I(z, z) / max(floor, max_{z' in C, z' != z} I(z', z))`
/// over pool positions `selected`.
pub fn objective_f(selected: &[usize], matrix: &InfluenceMatrix, denom_floor: f64) -> Result<f64> {
    if selected.len() < 2 {
        return Err(Error::InvalidConfig("objective needs at least two canaries".into()));
    }
    let mut total = 0.0;
    for &z in selected {
        let worst = selected
            .iter()
            .filter(|&&o| o != z)
            .map(|&o| matrix.get(o, z))
            .fold(f64::NEG_INFINITY, f64::max);
        total += matrix.self_influence(z) / worst.max(denom_floor);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedySelection {
    /// Chosen pool positions in selection order.
    pub positions: Vec<usize>,
    /// The same choices as dataset indices.
    pub indices: Vec<usize>,
    /// Ratio that won each step (self-influence for the first pick).
    pub ratios: Vec<f64>,
}

/// Greedy construction of an `m`-element canary set: start from the highest
/// self-influence, then repeatedly add the point maximising
/// `I(z, z) / max(floor, max_{z' in C} I(z', z))`. Ties go to the lower
/// dataset index.
pub fn greedy_select(matrix: &InfluenceMatrix, m: usize, denom_floor: f64) -> Result<GreedySelection> {
    let p = matrix.len();
    if m > p {
        return Err(Error::InvalidConfig(format!("cannot select {m} canaries from a pool of {p}")));
    }
    if !(denom_floor > 0.0) {
        return Err(Error::InvalidConfig("denominator floor must be positive".into()));
    }
    let mut chosen = vec![false; p];
    // running max over chosen z' of I(z', z), per candidate z
    let mut worst = vec![f64::NEG_INFINITY; p];
    let mut sel = GreedySelection {
        positions: Vec::with_capacity(m),
        indices: Vec::with_capacity(m),
        ratios: Vec::with_capacity(m),
    };
    for step in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for z in 0..p {
            if chosen[z] {
                continue;
            }
            let value = if step == 0 {
                matrix.self_influence(z)
            } else {
                matrix.self_influence(z) / worst[z].max(denom_floor)
            };
            let better = match best {
                None => true,
                Some((b, bv)) => value > bv || (value == bv && matrix.indices[z] < matrix.indices[b]),
            };
            if better {
                best = Some((z, value));
            }
        }
        let (z, value) = best.expect("m <= p leaves candidates");
        chosen[z] = true;
        for (c, w) in worst.iter_mut().enumerate() {
            *w = w.max(matrix.get(z, c));
        }
        sel.positions.push(z);
        sel.indices.push(matrix.indices[z]);
        sel.ratios.push(value);
    }
    Ok(sel)
}

/// Output of the full selection pipeline.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Model trained on the whole dataset, at which influences are taken.
    pub model: ModelState,
    pub optimality_gap: f64,
    pub matrix: InfluenceMatrix,
    pub greedy: GreedySelection,
}

/// Train on `dataset`, preselect the `p` most self-influential points and
/// greedily pick `m` canaries among them.
pub fn select_canaries(dataset: &Dataset, arch: &Arch, cfg: &InfluenceConfig, fit: &FitConfig) -> Result<Selection> {
    cfg.validate()?;
    if cfg.preselect_p > dataset.len() {
        return Err(Error::InvalidConfig(format!(
            "p = {} exceeds the dataset size {}",
            cfg.preselect_p,
            dataset.len()
        )));
    }
    let model = fit_erm(arch, dataset, fit)?;
    let engine = InfluenceEngine::new(&model, dataset, cfg)?;
    let pool = engine.preselect(cfg.preselect_p)?;
    let matrix = engine.build_matrix(&pool)?;
    let greedy = greedy_select(&matrix, cfg.num_canaries_m, cfg.denom_floor)?;
    let optimality_gap = engine.optimality_gap;
    Ok(Selection {
        model,
        optimality_gap,
        matrix,
        greedy,
    })
}
