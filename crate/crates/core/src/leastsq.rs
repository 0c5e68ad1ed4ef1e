//! Closed-form least squares: exact solutions, Sherman-Morrison rank-one
//! updates, and the canary interference gap.
//!
//! For a canary `c1` added to the training set, the change in squared-loss
//! at a second canary `c2` is
//!
//! ```text
//! l(theta_1, c2) - l(theta, c2) = l(theta, c1) * k^2 - r1 * r2 * k
//! k = x1' K^-1 x2 / (1 + x1' K^-1 x1),   r_i = <theta, x_i> - y_i
//! ```
//!
//! with `K = X'X`. Canaries that are orthogonal under `K^-1` do not
//! interfere.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Relative singular-value threshold below which a design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Canary {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Canary {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

/// Design matrix, targets and the cached factorisation of `K = X'X`.
#[derive(Debug, Clone)]
pub struct LeastSquaresInstance {
    x: DMatrix<f64>,
    y: DVector<f64>,
    gram: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    theta: DVector<f64>,
}

impl LeastSquaresInstance {
    /// `rows[i]` is the feature vector of sample `i`.
    pub fn new(rows: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let n = rows.len();
        check_len("targets", n, y.len())?;
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if d == 0 {
            return Err(Error::Degenerate("empty design matrix".into()));
        }
        for r in rows {
            check_len("design row", d, r.len())?;
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        Self::from_matrix(x, DVector::from_column_slice(y))
    }

    pub fn from_matrix(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (n, d) = x.shape();
        check_len("targets", n, y.len())?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("least-squares instance"));
        }
        if n < d {
            return Err(Error::RankDeficient { ratio: 0.0 });
        }
        let sv = x.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
        if !(ratio > RANK_TOLERANCE) {
            return Err(Error::RankDeficient { ratio });
        }
        let gram = x.transpose() * &x;
        let factor = gram
            .clone()
            .cholesky()
            .ok_or(Error::RankDeficient { ratio })?;
        let xty = x.transpose() * &y;
        let theta = factor.solve(&xty);
        Ok(Self {
            x,
            y,
            gram,
            factor,
            theta,
        })
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    /// `theta* = K^-1 X'y`.
    pub fn solve(&self) -> Vec<f64> {
        self.theta.as_slice().to_vec()
    }

    /// `K^-1 v` through the cached factorisation.
    pub fn gram_solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("vector", self.dim(), v.len())?;
        Ok(self.factor.solve(&DVector::from_column_slice(v)).as_slice().to_vec())
    }

    /// Least-squares loss of `c` under `theta`: `0.5 (<theta, x> - y)^2`.
    pub fn loss(theta: &[f64], c: &Canary) -> f64 {
        let r = residual(theta, c);
        0.5 * r * r
    }

    /// Solution after appending `c` to the design, by Sherman-Morrison.
    pub fn rank_one_update(&self, c: &Canary) -> Result<Vec<f64>> {
        self.check_canary(c)?;
        let kx = self.gram_solve(&c.x)?;
        let denom = 1.0 + dot(&c.x, &kx);
        let r = residual(self.theta.as_slice(), c);
        Ok(self
            .theta
            .iter()
            .zip(&kx)
            .map(|(t, k)| t - k * r / denom)
            .collect())
    }

    /// Closed-form change of `c2`'s loss when `c1` joins the training set.
    pub fn interference_gap(&self, c1: &Canary, c2: &Canary) -> Result<f64> {
        self.check_canary(c1)?;
        self.check_canary(c2)?;
        let theta = self.theta.as_slice();
        let k1 = self.gram_solve(&c1.x)?;
        let coupling = dot(&k1, &c2.x) / (1.0 + dot(&c1.x, &k1));
        let r1 = residual(theta, c1);
        let r2 = residual(theta, c2);
        Ok(Self::loss(theta, c1) * coupling * coupling - r1 * r2 * coupling)
    }

    /// New instance with `c` appended as an extra row.
    pub fn augmented(&self, c: &Canary) -> Result<Self> {
        self.check_canary(c)?;
        let (n, d) = self.x.shape();
        let x = self.x.clone().insert_row(n, 0.0);
        let mut x = x;
        for j in 0..d {
            x[(n, j)] = c.x[j];
        }
        let y = self.y.clone().insert_row(n, c.y);
        Self::from_matrix(x, y)
    }

    fn check_canary(&self, c: &Canary) -> Result<()> {
        check_len("canary features", self.dim(), c.x.len())?;
        if c.x.iter().any(|v| !v.is_finite()) || !c.y.is_finite() {
            return Err(Error::NonFinite("canary"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(theta: &[f64], c: &Canary) -> f64 {
    dot(theta, &c.x) - c.y
}
