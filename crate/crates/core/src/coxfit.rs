//! Cox proportional-hazards estimation with Breslow tie handling.
//!
//! Risk-set sums come from one descending-time sweep over a cached ordering,
//! so re-evaluating the score at many parameter values (Newton steps,
//! numerical Jacobians, bootstrap replicates) costs `O(n p^2)` each time.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

pub const SCORE_TOL: f64 = 1e-8;
pub const LOGLIK_REL_TOL: f64 = 1e-12;
pub const MAX_ITER: usize = 50;
/// Coefficients beyond this magnitude are taken as a diverging (monotone)
/// likelihood.
pub const BETA_CAP: f64 = 50.0;
const MAX_HALVINGS: usize = 40;
const DIVERGENCE_HINT: f64 = 10.0;
const INFO_COLLAPSE: f64 = 1e-6;

/// Right-censored rows with a cached time ordering.
#[derive(Debug, Clone)]
pub struct CoxRows {
    time: Vec<f64>,
    event: Vec<bool>,
    /// Row-major `n x p`.
    z: Vec<f64>,
    p: usize,
    /// Indices by decreasing time.
    desc: Vec<usize>,
    /// `[start, end)` ranges into `desc`, one per distinct time, in
    /// decreasing time order.
    groups: Vec<(usize, usize)>,
}

impl CoxRows {
    pub fn new(time: Vec<f64>, event: Vec<bool>, z_rows: &[Vec<f64>]) -> Result<Self> {
        let n = time.len();
        if event.len() != n || z_rows.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: event.len().min(z_rows.len()),
            });
        }
        let p = z_rows.first().map_or(0, |r| r.len());
        let mut z = Vec::with_capacity(n * p);
        for r in z_rows {
            if r.len() != p {
                return Err(Error::Dimension {
                    expected: p,
                    got: r.len(),
                });
            }
            z.extend_from_slice(r);
        }
        Self::from_parts(time, event, z, p)
    }

    /// Builds rows from a row-major covariate buffer.
    pub fn from_parts(time: Vec<f64>, event: Vec<bool>, z: Vec<f64>, p: usize) -> Result<Self> {
        let n = time.len();
        if z.len() != n * p {
            return Err(Error::Dimension {
                expected: n * p,
                got: z.len(),
            });
        }
        let mut desc: Vec<usize> = (0..n).collect();
        desc.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=n {
            if k == n || time[desc[k]] != time[desc[start]] {
                groups.push((start, k));
                start = k;
            }
        }
        Ok(CoxRows {
            time,
            event,
            z,
            p,
            desc,
            groups,
        })
    }

    /// Same times and ordering with a new covariate buffer.
    pub fn with_covariates(&self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.z.len() {
            return Err(Error::Dimension {
                expected: self.z.len(),
                got: z.len(),
            });
        }
        Ok(CoxRows { z, ..self.clone() })
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }

    fn column_means(&self) -> Vec<f64> {
        let n = self.n().max(1) as f64;
        let mut m = vec![0.0; self.p];
        for i in 0..self.n() {
            for (j, v) in self.z_row(i).iter().enumerate() {
                m[j] += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoxFit {
    pub beta: Vec<f64>,
    /// Observed information at `beta`.
    #[serde(skip)]
    pub info: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct ScoreInfo {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub info: DMatrix<f64>,
}

/// Per-time risk-set quantities from the descending sweep.
struct Sweep {
    /// Centered covariate means.
    means: Vec<f64>,
    /// `c` such that `exp(eta_i - c)` are the scaled weights, with `eta`
    /// computed on centered covariates.
    shift: f64,
    weights: Vec<f64>,
}

fn sweep_setup(rows: &CoxRows, beta: &[f64]) -> Sweep {
    let means = rows.column_means();
    let eta: Vec<f64> = (0..rows.n())
        .map(|i| {
            rows.z_row(i)
                .iter()
                .zip(&means)
                .zip(beta)
                .map(|((z, m), b)| b * (z - m))
                .sum()
        })
        .collect();
    let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shift = if shift.is_finite() { shift } else { 0.0 };
    let weights = eta.iter().map(|e| (e - shift).exp()).collect();
    Sweep {
        means,
        shift,
        weights,
    }
}

pub fn partial_score_info(rows: &CoxRows, beta: &[f64]) -> Result<ScoreInfo> {
    score_info_impl(rows, beta, true)
}

fn score_info_impl(rows: &CoxRows, beta: &[f64], want_info: bool) -> Result<ScoreInfo> {
    let p = rows.p;
    if beta.len() != p {
        return Err(Error::Dimension {
            expected: p,
            got: beta.len(),
        });
    }
    let sw = sweep_setup(rows, beta);
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; if want_info { p * p } else { 0 }];
    let mut loglik = 0.0;
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut zc = vec![0.0; p];

    for &(a, b) in &rows.groups {
        for &i in &rows.desc[a..b] {
            let w = sw.weights[i];
            s0 += w;
            for (j, (z, m)) in rows.z_row(i).iter().zip(&sw.means).enumerate() {
                zc[j] = z - m;
                s1[j] += w * zc[j];
            }
            if want_info {
                for j in 0..p {
                    for k in 0..=j {
                        s2[j * p + k] += w * zc[j] * zc[k];
                    }
                }
            }
        }
        let mut d = 0usize;
        for &i in &rows.desc[a..b] {
            if rows.event[i] {
                d += 1;
                loglik += sw.weights[i].ln();
                for (j, (z, m)) in rows.z_row(i).iter().zip(&sw.means).enumerate() {
                    score[j] += z - m;
                }
            }
        }
        if d == 0 {
            continue;
        }
        let df = d as f64;
        loglik -= df * s0.ln();
        for j in 0..p {
            score[j] -= df * s1[j] / s0;
        }
        if want_info {
            for j in 0..p {
                for k in 0..=j {
                    let v = df * (s2[j * p + k] / s0 - s1[j] * s1[k] / (s0 * s0));
                    info[(j, k)] += v;
                    if j != k {
                        info[(k, j)] += v;
                    }
                }
            }
        }
    }
    Ok(ScoreInfo {
        loglik,
        score,
        info,
    })
}

/// Total score vector only.
pub fn partial_score(rows: &CoxRows, beta: &[f64]) -> Result<DVector<f64>> {
    Ok(score_info_impl(rows, beta, false)?.score)
}

pub fn partial_loglik(rows: &CoxRows, beta: &[f64]) -> Result<f64> {
    Ok(score_info_impl(rows, beta, false)?.loglik)
}

fn check_identifiable(rows: &CoxRows) -> Result<()> {
    let si = partial_score_info(rows, &vec![0.0; rows.p])?;
    let means = rows.column_means();
    let d = rows.n_events() as f64;
    let n = rows.n() as f64;
    for j in 0..rows.p {
        let ss: f64 = (0..rows.n())
            .map(|i| (rows.z_row(i)[j] - means[j]).powi(2))
            .sum();
        if ss == 0.0 || si.info[(j, j)] <= 1e-10 * ss * d / n {
            return Err(Error::NonIdentifiable(j));
        }
    }
    Ok(())
}

/// Newton-Raphson maximization of the Breslow partial likelihood.
pub fn cox_fit(rows: &CoxRows) -> Result<CoxFit> {
    if rows.n_events() == 0 {
        return Err(Error::NoEvents);
    }
    if rows.p == 0 {
        let si = partial_score_info(rows, &[])?;
        return Ok(CoxFit {
            beta: vec![],
            info: si.info,
            loglik: si.loglik,
            iterations: 0,
            converged: true,
        });
    }
    check_identifiable(rows)?;

    let p = rows.p;
    let mut beta = vec![0.0; p];
    let mut cur = partial_score_info(rows, &beta)?;
    let info0: Vec<f64> = (0..p).map(|j| cur.info[(j, j)]).collect();
    // A score that vanishes only because the information collapsed is an
    // escaping coefficient, not a stationary point.
    let finish = |beta: Vec<f64>, si: ScoreInfo, iterations: usize| -> Result<CoxFit> {
        for j in 0..p {
            if beta[j].abs() > DIVERGENCE_HINT && si.info[(j, j)] < INFO_COLLAPSE * info0[j] {
                return Err(Error::MonotoneLikelihood {
                    index: j,
                    value: beta[j],
                });
            }
        }
        Ok(CoxFit {
            beta,
            info: si.info,
            loglik: si.loglik,
            iterations,
            converged: true,
        })
    };
    for iter in 0..MAX_ITER {
        if cur.score.amax() < SCORE_TOL {
            return finish(beta, cur, iter);
        }
        let chol = cur.info.clone().cholesky().ok_or_else(|| {
            Error::SingularMatrix("Cox information matrix is not positive definite".into())
        })?;
        let step = chol.solve(&cur.score);

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            if let Some((j, v)) = trial
                .iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite() || v.abs() > BETA_CAP)
            {
                return Err(Error::MonotoneLikelihood { index: j, value: *v });
            }
            let ll = partial_loglik(rows, &trial)?;
            if ll.is_finite() && ll >= cur.loglik - 1e-12 * cur.loglik.abs().max(1.0) {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        let Some(next) = accepted else {
            return Err(Error::NoConvergence(iter + 1));
        };
        let prev_ll = cur.loglik;
        beta = next;
        cur = partial_score_info(rows, &beta)?;
        let rel = (cur.loglik - prev_ll).abs() / prev_ll.abs().max(1e-300);
        if cur.score.amax() < SCORE_TOL || rel < LOGLIK_REL_TOL {
            return finish(beta, cur, iter + 1);
        }
    }
    Err(Error::NoConvergence(MAX_ITER))
}

/// Right-continuous step function for the cumulative baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineHazard {
    pub times: Vec<f64>,
    pub cumhaz: Vec<f64>,
}

impl BaselineHazard {
    pub fn at(&self, t: f64) -> Result<f64> {
        cumhaz_at(self, t)
    }
}

pub fn breslow_cumhaz(fit: &CoxFit, rows: &CoxRows) -> Result<BaselineHazard> {
    breslow_at(rows, &fit.beta)
}

/// Breslow estimator at arbitrary coefficients, on the uncentered covariate
/// scale (the baseline refers to `z = 0`).
pub fn breslow_at(rows: &CoxRows, beta: &[f64]) -> Result<BaselineHazard> {
    if beta.len() != rows.p {
        return Err(Error::Dimension {
            expected: rows.p,
            got: beta.len(),
        });
    }
    let sw = sweep_setup(rows, beta);
    let mean_lp: f64 = sw.means.iter().zip(beta).map(|(m, b)| m * b).sum();
    // raw S0 = scaled S0 * exp(shift + mean_lp)
    let log_scale = sw.shift + mean_lp;
    let mut s0 = 0.0;
    let mut jumps = Vec::new();
    for &(a, b) in &rows.groups {
        let mut d = 0usize;
        for &i in &rows.desc[a..b] {
            s0 += sw.weights[i];
            if rows.event[i] {
                d += 1;
            }
        }
        if d > 0 {
            let t = rows.time[rows.desc[a]];
            jumps.push((t, d as f64 * (-(s0.ln() + log_scale)).exp()));
        }
    }
    jumps.reverse();
    let mut acc = 0.0;
    let mut times = Vec::with_capacity(jumps.len());
    let mut cumhaz = Vec::with_capacity(jumps.len());
    for (t, j) in jumps {
        acc += j;
        times.push(t);
        cumhaz.push(acc);
    }
    Ok(BaselineHazard { times, cumhaz })
}

pub fn cumhaz_at(bh: &BaselineHazard, t: f64) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Domain(format!("cumulative hazard at negative time {t}")));
    }
    let k = bh.times.partition_point(|&s| s <= t);
    Ok(if k == 0 { 0.0 } else { bh.cumhaz[k - 1] })
}

/// Per-subject score residuals `int (Z_i - Zbar(t)) dM_i(t)`; rows sum to
/// the total score. Returned `n x p`.
pub fn score_residuals(rows: &CoxRows, beta: &[f64]) -> Result<DMatrix<f64>> {
    let p = rows.p;
    let n = rows.n();
    if beta.len() != p {
        return Err(Error::Dimension {
            expected: p,
            got: beta.len(),
        });
    }
    let sw = sweep_setup(rows, beta);
    // descending sweep: per-group zbar and d / S0
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut group_stats: Vec<(f64, Vec<f64>)> = Vec::with_capacity(rows.groups.len());
    for &(a, b) in &rows.groups {
        let mut d = 0usize;
        for &i in &rows.desc[a..b] {
            let w = sw.weights[i];
            s0 += w;
            for (j, (z, m)) in rows.z_row(i).iter().zip(&sw.means).enumerate() {
                s1[j] += w * (z - m);
            }
            if rows.event[i] {
                d += 1;
            }
        }
        let zbar: Vec<f64> = s1.iter().map(|v| v / s0).collect();
        group_stats.push((d as f64 / s0, zbar));
    }

    let mut out = DMatrix::zeros(n, p);
    // ascending: cumulative H = sum d/S0, G = sum zbar d/S0
    let mut h = 0.0;
    let mut g = vec![0.0; p];
    for (gi, &(a, b)) in rows.groups.iter().enumerate().rev() {
        let (dh, zbar) = &group_stats[gi];
        h += dh;
        for j in 0..p {
            g[j] += zbar[j] * dh;
        }
        for &i in &rows.desc[a..b] {
            let w = sw.weights[i];
            for (j, (z, m)) in rows.z_row(i).iter().zip(&sw.means).enumerate() {
                let zc = z - m;
                let mut u = -w * (zc * h - g[j]);
                if rows.event[i] {
                    u += zc - zbar[j];
                }
                out[(i, j)] = u;
            }
        }
    }
    Ok(out)
}
