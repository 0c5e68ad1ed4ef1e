//! Small vector kernels plus the conjugate-gradient and dense SPD solvers
//! used for inverse Hessian-vector products.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `|A x - b| / |b|`, recomputed from scratch at termination.
    pub relative_residual: f64,
}

/// Solves `A x = b` for a symmetric positive definite operator given only
/// through its action. Terminates once the true relative residual drops
/// below `tol`.
pub fn conjugate_gradient<F>(mut apply: F, b: &[f64], tol: f64, max_iters: usize) -> Result<CgSolution>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut rel = 1.0;
    for it in 1..=max_iters {
        let ap = apply(&p)?;
        check_len("operator output", n, ap.len())?;
        let curvature = dot(&p, &ap);
        if !(curvature > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let alpha = rs / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rs_new = dot(&r, &r);
        if rs_new.sqrt() <= tol * b_norm {
            // confirm against the true residual; restart from it if the
            // recursion has drifted
            let ax = apply(&x)?;
            r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
            rs = dot(&r, &r);
            rel = rs.sqrt() / b_norm;
            if rel <= tol {
                return Ok(CgSolution {
                    x,
                    iterations: it,
                    relative_residual: rel,
                });
            }
            p = r.clone();
            continue;
        }
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        rel = rs.sqrt() / b_norm;
    }
    if !rel.is_finite() {
        return Err(Error::NonFinite("conjugate gradient residual"));
    }
    Err(Error::CgNotConverged {
        iterations: max_iters,
        residual: rel,
    })
}

/// Factorisation of a dense symmetric matrix, Cholesky when positive
/// definite and LU otherwise.
pub enum DenseFactor {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl DenseFactor {
    /// `cols[j]` is column `j` of the matrix.
    pub fn new(cols: &[Vec<f64>], shift: f64) -> Result<Self> {
        let n = cols.len();
        let mut m = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
        // symmetrise away round-off
        let sym = (&m + m.transpose()) * 0.5;
        m = sym;
        for i in 0..n {
            m[(i, i)] += shift;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense matrix"));
        }
        match m.clone().cholesky() {
            Some(c) => Ok(DenseFactor::Cholesky(c)),
            None => Ok(DenseFactor::Lu(m.lu())),
        }
    }

    pub fn is_positive_definite(&self) -> bool {
        matches!(self, DenseFactor::Cholesky(_))
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        let sol = match self {
            DenseFactor::Cholesky(c) => Some(c.solve(&rhs)),
            DenseFactor::Lu(lu) => lu.solve(&rhs),
        };
        match sol {
            Some(s) if s.iter().all(|v| v.is_finite()) => Ok(s.as_slice().to_vec()),
            _ => Err(Error::Degenerate("singular linear system".into())),
        }
    }
}
