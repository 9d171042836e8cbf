//! Ordinary least squares via Householder QR.
//!
//! Shared by the measurement-error, mediator, ORC1 and risk-set calibration
//! regressions. The residual variance uses denominator `n`, which is what the
//! moment equations of the calibration models solve for; it is biased low by
//! a factor `(n - q) / n` in small samples.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance on the diagonal of `R` below which a column is treated
/// as linearly dependent on the columns before it.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LinearFit {
    /// Intercept first, in design-column order.
    pub coefs: DVector<f64>,
    /// Mean squared residual, denominator `n`.
    pub resid_var: f64,
    /// `(X^T X)^{-1}`.
    pub xtx_inv: DMatrix<f64>,
    pub n_obs: usize,
    pub residuals: DVector<f64>,
}

impl LinearFit {
    pub fn n_coefs(&self) -> usize {
        self.coefs.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        predict(self, x)
    }

    /// Classical coefficient standard errors with the unbiased `RSS / (n - q)`
    /// variance estimate.
    pub fn coef_se(&self) -> DVector<f64> {
        let q = self.coefs.len();
        let dof = (self.n_obs.saturating_sub(q)).max(1) as f64;
        let s2 = self.resid_var * self.n_obs as f64 / dof;
        DVector::from_iterator(q, (0..q).map(|j| (s2 * self.xtx_inv[(j, j)]).sqrt()))
    }

    /// Leverage `x^T (X^T X)^{-1} x` of a design row.
    pub fn leverage(&self, x: &[f64]) -> f64 {
        let v = DVector::from_column_slice(x);
        (v.transpose() * &self.xtx_inv * &v)[(0, 0)]
    }
}

pub fn ols_fit(design: &DMatrix<f64>, response: &[f64]) -> Result<LinearFit> {
    ols_fit_named(design, response, &[])
}

/// Like [`ols_fit`], but a singular design reports the offending column by
/// name when `names` covers it.
pub fn ols_fit_named(
    design: &DMatrix<f64>,
    response: &[f64],
    names: &[&str],
) -> Result<LinearFit> {
    let (n, q) = design.shape();
    if response.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: response.len(),
        });
    }
    if n < q || q == 0 {
        return Err(Error::Singular {
            column: n.min(q),
            name: format!("{n} rows for {q} coefficients"),
        });
    }

    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..q).map(|j| r[(j, j)].abs()).fold(0.0_f64, f64::max);
    for j in 0..q {
        // column norm guards against a zero column being scaled away
        let col_norm = design.column(j).norm();
        if r[(j, j)].abs() <= RANK_TOL * scale.max(1e-300) || col_norm == 0.0 {
            let name = names
                .get(j)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("x{j}"));
            return Err(Error::Singular { column: j, name });
        }
    }

    let mut qty = DVector::from_column_slice(response);
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, q).into_owned();
    let coefs = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::SingularMatrix("R factor".into()))?;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(q, q))
        .ok_or_else(|| Error::SingularMatrix("R factor".into()))?;
    let mut xtx_inv = &r_inv * r_inv.transpose();
    symmetrize(&mut xtx_inv);

    let y = DVector::from_column_slice(response);
    let residuals = y - design * &coefs;
    let resid_var = residuals.norm_squared() / n as f64;

    Ok(LinearFit {
        coefs,
        resid_var,
        xtx_inv,
        n_obs: n,
        residuals,
    })
}

pub fn predict(fit: &LinearFit, x: &[f64]) -> Result<f64> {
    if x.len() != fit.coefs.len() {
        return Err(Error::Dimension {
            expected: fit.coefs.len(),
            got: x.len(),
        });
    }
    Ok(x.iter().zip(fit.coefs.iter()).map(|(a, b)| a * b).sum())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let k = m.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Builds a design matrix from row vectors.
pub fn design_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j])
}
