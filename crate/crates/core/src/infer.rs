//! Estimation pipelines and their uncertainty: stacked-equation sandwich,
//! delta method and the two-sample nonparametric bootstrap.
//!
//! The sandwich stacks the estimating functions of every sub-model over the
//! `n = n1 + n2` subjects of both studies. Parameters of interest are
//! `theta = [alpha0, alpha1, alpha2.., sigma_alpha2, beta..]`; the nuisance
//! blocks are the measurement-error model `[gamma0, gamma1, gamma2..,
//! sigma_gamma2]` and one calibration regression per risk set (one block for
//! ORC1, `K` blocks for RRC). Each subject's influence is
//!
//! ```text
//! u_i = U_theta,i + I_theta,gamma I_gamma^-1 U_gamma,i + sum_k I_theta,eta_k I_eta_k^-1 U_eta_k,i
//! ```
//!
//! and `V = I_theta^-1 S I_theta^-T` with `S = n^-1 sum u_i u_i'`. Every
//! Jacobian is a central difference of the summed estimating functions.

use std::fmt;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::{
    self, dot, ErrParams, ExposureModel, MedParams, OrcKind, OrcPredictor, RrcPredictor, SplitStrategy,
};
use crate::coxfit::{self, BaselineHazard, CoxFit, CoxRows};
use crate::dataio::Study;
use crate::error::{Error, Result};
use crate::mediate::{approx_measures, Contrast, Measure, MediationMeasures, Theta};
use crate::stats;

/// Largest tolerated share of failed bootstrap replicates, in percent.
pub const MAX_FAILURE_PCT: f64 = 5.0;
const Z975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    Unadjusted,
    Gold,
    Orc1,
    Orc2,
    Rrc { k: usize },
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Unadjusted => "U".into(),
            Method::Gold => "G".into(),
            Method::Orc1 => "O1".into(),
            Method::Orc2 => "O2".into(),
            Method::Rrc { k } => format!("R(K={k})"),
        }
    }

    /// Parses `unadjusted|naive|u`, `gold|g`, `orc1|o1`, `orc2|o2`, `rrc|r`
    /// (with `k` supplied separately).
    pub fn parse(s: &str, k: usize) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unadjusted" | "naive" | "u" => Ok(Method::Unadjusted),
            "gold" | "g" => Ok(Method::Gold),
            "orc1" | "o1" => Ok(Method::Orc1),
            "orc2" | "o2" => Ok(Method::Orc2),
            "rrc" | "r" => Ok(Method::Rrc { k }),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }

    fn uses_error_model(&self) -> bool {
        !matches!(self, Method::Unadjusted | Method::Gold)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub interaction: bool,
    pub split: SplitStrategy,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            interaction: true,
            split: SplitStrategy::EqualTime,
        }
    }
}

/// Everything estimated by one method on one study.
#[derive(Debug, Clone)]
pub struct MethodFit {
    pub method: Method,
    pub interaction: bool,
    pub theta: Theta,
    pub err: Option<ErrParams>,
    pub exposure_model: ExposureModel,
    /// Imputed main-study exposure used in the outcome model.
    pub imputed: Vec<f64>,
    pub cox: CoxFit,
    pub rows: CoxRows,
}

impl MethodFit {
    pub fn approx(&self, c: &Contrast) -> MediationMeasures {
        approx_measures(&self.theta, c)
    }

    /// Breslow estimate of the cumulative baseline hazard.
    pub fn baseline(&self) -> Result<BaselineHazard> {
        coxfit::breslow_at(&self.rows, &self.cox.beta)
    }

    /// Calibration regressions for ORC1 (one block) or RRC (one per interval).
    fn eta_blocks(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        match &self.exposure_model {
            ExposureModel::Orc(OrcPredictor {
                kind: OrcKind::Orc1,
                coefs,
            }) => (vec![0.0], vec![coefs.clone()]),
            ExposureModel::Rrc(r) => (r.split_points.clone(), r.per_interval.clone()),
            _ => (vec![], vec![]),
        }
    }
}

/// Fits the mediator and outcome models by `method`.
pub fn fit_method(study: &Study, method: Method, opts: &FitOptions) -> Result<MethodFit> {
    let (med, err, model) = match method {
        Method::Unadjusted => {
            let main_x: Vec<f64> = study.main().iter().map(|r| r.exposure_star).collect();
            let val_x: Vec<f64> = study.validation().iter().map(|r| r.exposure_star).collect();
            let med = calibrate::fit_mediator_direct(study, &main_x, &val_x)?;
            (med, None, ExposureModel::Unadjusted)
        }
        Method::Gold => {
            let main_x = study
                .oracle_exposure()
                .ok_or_else(|| Error::InvalidStudy("gold standard needs the latent true exposure".into()))?
                .to_vec();
            let val_x: Vec<f64> = study.validation().iter().map(|r| r.exposure_true).collect();
            let med = calibrate::fit_mediator_direct(study, &main_x, &val_x)?;
            (med, None, ExposureModel::Gold)
        }
        Method::Orc1 | Method::Orc2 | Method::Rrc { .. } => {
            let err = calibrate::fit_error_model(study)?;
            let med = calibrate::fit_mediator(study, &err)?;
            let model = match method {
                Method::Orc1 => ExposureModel::Orc(calibrate::orc1_fit(study)?),
                Method::Orc2 => ExposureModel::Orc(calibrate::orc2_predictor(&med, &err)?),
                Method::Rrc { k } => ExposureModel::Rrc(calibrate::rrc_fit(study, k, &opts.split)?),
                _ => unreachable!(),
            };
            (med, Some(err), model)
        }
    };
    let imputed = model.impute_all(study)?;
    let rows = calibrate::outcome_rows(study, &imputed, opts.interaction)?;
    let cox = coxfit::cox_fit(&rows)?;
    let out = calibrate::OutParams {
        info: cox.info.clone(),
        fit: None,
        ..calibrate::OutParams::from_coefs(&cox.beta, opts.interaction)
    };
    Ok(MethodFit {
        method,
        interaction: opts.interaction,
        theta: Theta { med, out },
        err,
        exposure_model: model,
        imputed,
        cox,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandwichOptions {
    /// Include `I_theta,gamma I_gamma^-1 U_gamma,i` in the meat.
    pub gamma_correction: bool,
    /// Include the calibration-regression correction terms.
    pub eta_correction: bool,
}

impl Default for SandwichOptions {
    fn default() -> Self {
        SandwichOptions {
            gamma_correction: true,
            eta_correction: true,
        }
    }
}

/// Stacked estimating functions of one fitted method.
struct Stacked<'a> {
    study: &'a Study,
    fit: &'a MethodFit,
    p: usize,
    splits: Vec<f64>,
}

impl Stacked<'_> {
    fn n(&self) -> usize {
        self.study.n()
    }

    /// Mediator-model regressors for the main and validation rows.
    fn mediator_exposures(&self, gamma: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
        let s = self.study;
        match self.fit.method {
            Method::Unadjusted => (
                s.main().iter().map(|r| r.exposure_star).collect(),
                s.validation().iter().map(|r| r.exposure_star).collect(),
            ),
            Method::Gold => (
                s.oracle_exposure().expect("gold fit without oracle").to_vec(),
                s.validation().iter().map(|r| r.exposure_true).collect(),
            ),
            _ => {
                let g = ErrParams::from_slice(gamma.expect("error model parameters"));
                (
                    s.main().iter().map(|r| g.mean(r.exposure_star, &r.covariates)).collect(),
                    s.validation().iter().map(|r| r.exposure_true).collect(),
                )
            }
        }
    }

    /// Per-subject mediator-model scores, `n x (p + 3)`: main rows first.
    fn u_alpha_rows(&self, alpha: &[f64], gamma: Option<&[f64]>) -> DMatrix<f64> {
        let p = self.p;
        let med = MedParams::from_slice(alpha);
        let (main_x, val_x) = self.mediator_exposures(gamma);
        let extra = match gamma {
            Some(g) if self.fit.method.uses_error_model() => {
                med.alpha1 * med.alpha1 * g[g.len() - 1]
            }
            _ => 0.0,
        };
        let n1 = self.study.n1();
        let mut out = DMatrix::zeros(self.n(), p + 3);
        let mut put = |i: usize, x: f64, m: f64, w: &[f64], add: f64| {
            let r = m - med.mean(x, w);
            out[(i, 0)] = r;
            out[(i, 1)] = x * r;
            for (j, wj) in w.iter().enumerate() {
                out[(i, 2 + j)] = wj * r;
            }
            out[(i, p + 2)] = med.sigma_alpha2 + add - r * r;
        };
        for (i, (rec, &x)) in self.study.main().iter().zip(&main_x).enumerate() {
            put(i, x, rec.mediator, &rec.covariates, extra);
        }
        for (i, (rec, &x)) in self.study.validation().iter().zip(&val_x).enumerate() {
            put(n1 + i, x, rec.mediator, &rec.covariates, 0.0);
        }
        out
    }

    /// Imputed main-study exposure as a function of all parameters.
    fn outcome_exposure(&self, theta: &[f64], gamma: Option<&[f64]>, etas: &[Vec<f64>]) -> Result<Vec<f64>> {
        let s = self.study;
        Ok(match self.fit.method {
            Method::Unadjusted => s.main().iter().map(|r| r.exposure_star).collect(),
            Method::Gold => s.oracle_exposure().expect("gold fit without oracle").to_vec(),
            Method::Orc2 => {
                let med = MedParams::from_slice(&theta[..self.p + 3]);
                let err = ErrParams::from_slice(gamma.expect("error model parameters"));
                let pred = calibrate::orc2_predictor(&med, &err)?;
                s.main()
                    .iter()
                    .map(|r| pred.predict(r.exposure_star, r.mediator, &r.covariates))
                    .collect()
            }
            Method::Orc1 | Method::Rrc { .. } => {
                let pred = RrcPredictor {
                    split_points: self.splits.clone(),
                    per_interval: etas.to_vec(),
                    min_risk_size: 0,
                    risk_set_sizes: vec![],
                };
                s.main()
                    .iter()
                    .map(|r| pred.predict(r.t_obs, r.exposure_star, r.mediator, &r.covariates))
                    .collect()
            }
        })
    }

    fn outcome_rows(&self, exposure: &[f64]) -> Result<CoxRows> {
        let main = self.study.main();
        let q = self.fit.rows.p();
        let mut z = Vec::with_capacity(main.len() * q);
        for (r, &a) in main.iter().zip(exposure) {
            z.push(a);
            z.push(r.mediator);
            if self.fit.interaction {
                z.push(a * r.mediator);
            }
            z.extend_from_slice(&r.covariates);
        }
        self.fit.rows.with_covariates(z)
    }

    /// Summed `U_theta`.
    fn u_theta_total(&self, theta: &[f64], gamma: Option<&[f64]>, etas: &[Vec<f64>]) -> Result<DVector<f64>> {
        let p = self.p;
        let ua = self.u_alpha_rows(&theta[..p + 3], gamma).row_sum_tr();
        let exposure = self.outcome_exposure(theta, gamma, etas)?;
        let rows = self.outcome_rows(&exposure)?;
        let ub = coxfit::partial_score(&rows, &theta[p + 3..])?;
        Ok(DVector::from_iterator(
            ua.len() + ub.len(),
            ua.iter().chain(ub.iter()).copied(),
        ))
    }

    /// Per-subject `U_theta,i` at the estimates, `n x dim(theta)`.
    fn u_theta_rows(&self, theta: &[f64], gamma: Option<&[f64]>, etas: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let p = self.p;
        let ua = self.u_alpha_rows(&theta[..p + 3], gamma);
        let exposure = self.outcome_exposure(theta, gamma, etas)?;
        let rows = self.outcome_rows(&exposure)?;
        let ub = coxfit::score_residuals(&rows, &theta[p + 3..])?;
        let mut out = DMatrix::zeros(self.n(), theta.len());
        out.view_mut((0, 0), (self.n(), p + 3)).copy_from(&ua);
        out.view_mut((0, p + 3), (self.study.n1(), ub.ncols())).copy_from(&ub);
        Ok(out)
    }

    /// Per-subject error-model scores, nonzero on validation rows only.
    fn u_gamma_rows(&self, gamma: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let err = ErrParams::from_slice(gamma);
        let n1 = self.study.n1();
        let mut out = DMatrix::zeros(self.n(), p + 3);
        for (i, r) in self.study.validation().iter().enumerate() {
            let e = r.exposure_true - err.mean(r.exposure_star, &r.covariates);
            let row = n1 + i;
            out[(row, 0)] = e;
            out[(row, 1)] = r.exposure_star * e;
            for (j, w) in r.covariates.iter().enumerate() {
                out[(row, 2 + j)] = w * e;
            }
            out[(row, p + 2)] = err.sigma_gamma2 - e * e;
        }
        out
    }

    /// Per-subject scores of the calibration regression fitted in the risk
    /// set at `split`.
    fn u_eta_rows(&self, split: f64, eta: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let n1 = self.study.n1();
        let mut out = DMatrix::zeros(self.n(), p + 3);
        for (i, r) in self.study.validation().iter().enumerate() {
            if r.t_obs < split {
                continue;
            }
            let e = r.exposure_true
                - (eta[0] + eta[1] * r.exposure_star + eta[2] * r.mediator + dot(&eta[3..], &r.covariates));
            let row = n1 + i;
            out[(row, 0)] = e;
            out[(row, 1)] = r.exposure_star * e;
            out[(row, 2)] = r.mediator * e;
            for (j, w) in r.covariates.iter().enumerate() {
                out[(row, 3 + j)] = w * e;
            }
        }
        out
    }
}

fn step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference Jacobian of `f` at `x`.
pub fn jacobian(f: impl Fn(&[f64]) -> Result<DVector<f64>>, x: &[f64]) -> Result<DMatrix<f64>> {
    let mut cols = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = step(x[j]);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        cols.push((fp - fm) / (2.0 * h));
    }
    Ok(DMatrix::from_columns(&cols))
}

fn invert(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::SingularMatrix(what.into()))
}

/// Sandwich variance of `theta`, scaled so that `Var(theta_hat) ~ V / n`.
pub fn sandwich_variance(study: &Study, fit: &MethodFit, opts: &SandwichOptions) -> Result<DMatrix<f64>> {
    let (splits, etas) = fit.eta_blocks();
    let st = Stacked {
        study,
        fit,
        p: study.n_covariates(),
        splits,
    };
    let n = st.n() as f64;
    let theta = fit.theta.to_vec();
    let gamma = fit.err.as_ref().map(|e| e.to_vec());
    let g = gamma.as_deref();

    let i_theta = -jacobian(|t| st.u_theta_total(t, g, &etas), &theta)? / n;
    let i_theta_inv = invert(&i_theta, "sandwich bread I_theta")?;

    let mut u = st.u_theta_rows(&theta, g, &etas)?;

    if let Some(gv) = &gamma {
        if opts.gamma_correction {
            let i_tg = jacobian(|x| st.u_theta_total(&theta, Some(x), &etas), gv)? / n;
            let i_g = -jacobian(|x| Ok(st.u_gamma_rows(x).row_sum_tr()), gv)? / n;
            let ug = st.u_gamma_rows(gv);
            let a = i_tg * invert(&i_g, "error-model information I_gamma")?;
            u += ug * a.transpose();
        }
    }
    if opts.eta_correction {
        for k in 0..etas.len() {
            let split = st.splits[k];
            let i_te = jacobian(
                |x| {
                    let mut e = etas.clone();
                    e[k] = x.to_vec();
                    st.u_theta_total(&theta, g, &e)
                },
                &etas[k],
            )? / n;
            let i_e = -jacobian(|x| Ok(st.u_eta_rows(split, x).row_sum_tr()), &etas[k])? / n;
            let ue = st.u_eta_rows(split, &etas[k]);
            let a = i_te * invert(&i_e, "calibration information I_eta")?;
            u += ue * a.transpose();
        }
    }

    let meat = u.transpose() * &u / n;
    let v = &i_theta_inv * meat * i_theta_inv.transpose();
    let v = (&v + v.transpose()) * 0.5;
    debug!("sandwich for {} with dim {}", fit.method, v.nrows());
    Ok(v)
}

/// Central-difference gradient of one approximate measure in `theta`.
pub fn measure_gradient(theta: &Theta, c: &Contrast, measure: Measure) -> Result<DVector<f64>> {
    let p = theta.med.alpha2.len();
    let inter = theta.out.interaction;
    let x = theta.to_vec();
    let f = |v: &[f64]| -> Result<DVector<f64>> {
        let m = approx_measures(&Theta::from_slice(v, p, inter), c);
        measure
            .get(&m)
            .map(|val| DVector::from_element(1, val))
            .ok_or_else(|| Error::Domain("mediation proportion undefined at total effect 0".into()))
    };
    Ok(jacobian(f, &x)?.row(0).transpose())
}

/// Scale on which the MP Wald interval is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum MpScale {
    #[default]
    Raw,
    Logit,
}

/// Delta-method standard error `sqrt(g V g' / n)`.
pub fn delta_method_se(theta: &Theta, v_theta: &DMatrix<f64>, n: usize, c: &Contrast, measure: Measure) -> Result<f64> {
    let g = measure_gradient(theta, c, measure)?;
    let q = (g.transpose() * v_theta * &g)[(0, 0)];
    Ok((q.max(0.0) / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VarianceKind {
    Sandwich,
    BootstrapWald,
    BootstrapPercentile,
}

/// Estimate, standard error and 95% interval for one measure. Fields are
/// `None` where the measure is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasureInterval {
    pub measure: Measure,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl MeasureInterval {
    pub fn covers(&self, truth: f64) -> Option<bool> {
        Some(self.lower? <= truth && truth <= self.upper?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceEstimate {
    pub kind: VarianceKind,
    #[serde(skip)]
    pub v_theta: Option<DMatrix<f64>>,
    pub intervals: Vec<MeasureInterval>,
}

impl VarianceEstimate {
    pub fn get(&self, m: Measure) -> &MeasureInterval {
        &self.intervals[m.index()]
    }
}

fn wald(measure: Measure, est: Option<f64>, se: Option<f64>) -> MeasureInterval {
    let (lower, upper) = match (est, se) {
        (Some(e), Some(s)) => (Some(e - Z975 * s), Some(e + Z975 * s)),
        _ => (None, None),
    };
    MeasureInterval {
        measure,
        estimate: est,
        se,
        lower,
        upper,
    }
}

/// Sandwich variance plus delta-method Wald intervals for all four measures.
pub fn sandwich_intervals(
    study: &Study,
    fit: &MethodFit,
    c: &Contrast,
    opts: &SandwichOptions,
    mp_scale: MpScale,
) -> Result<VarianceEstimate> {
    let v = sandwich_variance(study, fit, opts)?;
    let n = study.n();
    let point = fit.approx(c);
    let mut intervals = Vec::with_capacity(4);
    for m in Measure::ALL {
        let est = m.get(&point);
        let se = match est {
            Some(_) => Some(delta_method_se(&fit.theta, &v, n, c, m)?),
            None => None,
        };
        let iv = match (m, mp_scale, est, se) {
            (Measure::Mp, MpScale::Logit, Some(e), Some(s)) if e > 0.0 && e < 1.0 => {
                let l = (e / (1.0 - e)).ln();
                let sl = s / (e * (1.0 - e));
                let expit = |x: f64| 1.0 / (1.0 + (-x).exp());
                MeasureInterval {
                    measure: m,
                    estimate: est,
                    se,
                    lower: Some(expit(l - Z975 * sl)),
                    upper: Some(expit(l + Z975 * sl)),
                }
            }
            _ => wald(m, est, se),
        };
        intervals.push(iv);
    }
    Ok(VarianceEstimate {
        kind: VarianceKind::Sandwich,
        v_theta: Some(v),
        intervals,
    })
}

/// Index draws for one bootstrap replicate: main and validation resampled
/// separately, each at its own size.
pub fn resample_indices(n1: usize, n2: usize, seed: u64, replicate: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    let main = (0..n1).map(|_| rng.random_range(0..n1)).collect();
    let val = (0..n2).map(|_| rng.random_range(0..n2)).collect();
    (main, val)
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapResult {
    pub b: usize,
    pub failures: usize,
    #[serde(skip)]
    pub replicates: Vec<MediationMeasures>,
    pub wald: VarianceEstimate,
    pub percentile: VarianceEstimate,
}

/// Bootstrap replicates of `evaluate` applied to each resampled fit.
pub fn bootstrap_replicates<F>(
    study: &Study,
    method: Method,
    opts: &FitOptions,
    b: usize,
    seed: u64,
    evaluate: F,
) -> Result<(Vec<MediationMeasures>, usize)>
where
    F: Fn(&Study, &MethodFit) -> Result<MediationMeasures> + Sync,
{
    let results: Vec<Option<MediationMeasures>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let (mi, vi) = resample_indices(study.n1(), study.n2(), seed, r as u64);
            let s = study.resample(&mi, &vi);
            match fit_method(&s, method, opts).and_then(|f| evaluate(&s, &f)) {
                Ok(m) => Some(m),
                Err(e) => {
                    debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            }
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures as f64 > MAX_FAILURE_PCT / 100.0 * b as f64 {
        return Err(Error::TooManyFailures {
            failed: failures,
            total: b,
            limit_pct: MAX_FAILURE_PCT,
        });
    }
    Ok((results.into_iter().flatten().collect(), failures))
}

/// Bootstrap SEs with Wald and percentile 95% intervals for the approximate
/// measures at `c`.
pub fn bootstrap_ci(
    study: &Study,
    method: Method,
    opts: &FitOptions,
    b: usize,
    seed: u64,
    c: &Contrast,
) -> Result<BootstrapResult> {
    if b < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 replicates, got {b}")));
    }
    let point = fit_method(study, method, opts)?.approx(c);
    let (reps, failures) = bootstrap_replicates(study, method, opts, b, seed, |_, f| Ok(f.approx(c)))?;
    Ok(summarize_bootstrap(&point, reps, b, failures))
}

/// Wald and percentile intervals from replicate measures around `point`.
pub fn summarize_bootstrap(
    point: &MediationMeasures,
    replicates: Vec<MediationMeasures>,
    b: usize,
    failures: usize,
) -> BootstrapResult {
    let mut wald_iv = Vec::with_capacity(4);
    let mut pct_iv = Vec::with_capacity(4);
    for m in Measure::ALL {
        let mut vals: Vec<f64> = replicates.iter().filter_map(|r| m.get(r)).collect();
        let est = m.get(point);
        let se = (vals.len() >= 2).then(|| stats::sd(&vals));
        wald_iv.push(wald(m, est, se));
        vals.sort_by(|a, b| a.total_cmp(b));
        let (lo, hi) = if vals.is_empty() {
            (None, None)
        } else {
            (
                Some(stats::quantile_sorted(&vals, 0.025)),
                Some(stats::quantile_sorted(&vals, 0.975)),
            )
        };
        pct_iv.push(MeasureInterval {
            measure: m,
            estimate: est,
            se,
            lower: lo,
            upper: hi,
        });
    }
    BootstrapResult {
        b,
        failures,
        replicates,
        wald: VarianceEstimate {
            kind: VarianceKind::BootstrapWald,
            v_theta: None,
            intervals: wald_iv,
        },
        percentile: VarianceEstimate {
            kind: VarianceKind::BootstrapPercentile,
            v_theta: None,
            intervals: pct_iv,
        },
    }
}
