//! Measurement-error and mediator models, exposure predictors, and the Cox
//! outcome fit with an imputed exposure.
//!
//! Three predictors of the true exposure are available:
//!
//! * ORC1: a linear regression of `A` on `(A*, M, W)` fitted in the
//!   validation study.
//! * ORC2: the normal-theory conditional mean `E[A | A*, M, W]` assembled in
//!   closed form from the measurement-error and mediator parameters.
//! * RRC: the ORC1 regression refitted within validation risk sets at `K`
//!   grouped time points, so that the calibration tracks the survivor
//!   population.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::coxfit::{self, CoxFit, CoxRows};
use crate::dataio::{MainRecord, Study, ValidationRecord};
use crate::error::{Error, Result};
use crate::regress::{ols_fit_named, LinearFit};
use crate::stats;

/// Residual skewness above which the normal-error assumption behind ORC2 is
/// flagged.
pub const SKEW_WARN: f64 = 1.0;

/// `A = gamma0 + gamma1 A* + gamma2' W + e`, `Var(e) = sigma_gamma2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrParams {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: Vec<f64>,
    pub sigma_gamma2: f64,
}

impl ErrParams {
    /// `E[A | A*, W]`.
    pub fn mean(&self, exposure_star: f64, w: &[f64]) -> f64 {
        self.gamma0 + self.gamma1 * exposure_star + dot(&self.gamma2, w)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.gamma0, self.gamma1];
        v.extend(&self.gamma2);
        v.push(self.sigma_gamma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let k = v.len();
        ErrParams {
            gamma0: v[0],
            gamma1: v[1],
            gamma2: v[2..k - 1].to_vec(),
            sigma_gamma2: v[k - 1],
        }
    }
}

/// `M = alpha0 + alpha1 A + alpha2' W + e`, `Var(e) = sigma_alpha2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedParams {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: Vec<f64>,
    pub sigma_alpha2: f64,
}

impl MedParams {
    pub fn mean(&self, exposure: f64, w: &[f64]) -> f64 {
        self.alpha0 + self.alpha1 * exposure + dot(&self.alpha2, w)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.alpha0, self.alpha1];
        v.extend(&self.alpha2);
        v.push(self.sigma_alpha2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let k = v.len();
        MedParams {
            alpha0: v[0],
            alpha1: v[1],
            alpha2: v[2..k - 1].to_vec(),
            sigma_alpha2: v[k - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OrcKind {
    Orc1,
    Orc2,
}

/// Linear predictor `eta0 + eta1 A* + eta2 M + eta3' W` of the true exposure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrcPredictor {
    pub kind: OrcKind,
    pub coefs: Vec<f64>,
}

impl OrcPredictor {
    pub fn predict(&self, exposure_star: f64, mediator: f64, w: &[f64]) -> f64 {
        linear_exposure(&self.coefs, exposure_star, mediator, w)
    }
}

/// Piecewise-constant-in-time calibration coefficients.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RrcPredictor {
    /// `t_1 = 0 < t_2 < ... < t_K`.
    pub split_points: Vec<f64>,
    pub per_interval: Vec<Vec<f64>>,
    pub min_risk_size: usize,
    /// Validation risk-set size behind each interval's fit.
    pub risk_set_sizes: Vec<usize>,
}

impl RrcPredictor {
    pub fn k(&self) -> usize {
        self.split_points.len()
    }

    /// Index of the most recent split point at or before `t`; times at a
    /// split point belong to the interval that starts there.
    pub fn interval_of(&self, t: f64) -> usize {
        self.split_points.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn predict(&self, t: f64, exposure_star: f64, mediator: f64, w: &[f64]) -> f64 {
        linear_exposure(&self.per_interval[self.interval_of(t)], exposure_star, mediator, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitStrategy {
    /// `t_k = (k - 1) t_v / K` with `t_v` the largest validation time.
    EqualTime,
    Custom(Vec<f64>),
}

/// How the main-study exposure enters the outcome model.
#[derive(Debug, Clone, PartialEq)]
pub enum ExposureModel {
    /// The surrogate used as if it were the true exposure.
    Unadjusted,
    /// The latent true exposure (simulated studies only).
    Gold,
    Orc(OrcPredictor),
    Rrc(RrcPredictor),
}

impl ExposureModel {
    /// Imputed exposure for every main-study record.
    pub fn impute_all(&self, study: &Study) -> Result<Vec<f64>> {
        match self {
            ExposureModel::Gold => study
                .oracle_exposure()
                .map(|a| a.to_vec())
                .ok_or_else(|| Error::InvalidStudy("gold standard needs the latent true exposure".into())),
            _ => Ok(study
                .main()
                .iter()
                .map(|r| impute_exposure(self, r))
                .collect()),
        }
    }
}

/// Imputed exposure for one main-study record. `Gold` has no per-record
/// form and returns the surrogate; use [`ExposureModel::impute_all`].
pub fn impute_exposure(model: &ExposureModel, record: &MainRecord) -> f64 {
    match model {
        ExposureModel::Unadjusted | ExposureModel::Gold => record.exposure_star,
        ExposureModel::Orc(p) => p.predict(record.exposure_star, record.mediator, &record.covariates),
        ExposureModel::Rrc(p) => p.predict(
            record.t_obs,
            record.exposure_star,
            record.mediator,
            &record.covariates,
        ),
    }
}

/// Cox coefficients for `(A, M, A M, W)`; `beta3` is zero when the
/// interaction column is left out.
#[derive(Debug, Clone, Serialize)]
pub struct OutParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: Vec<f64>,
    pub interaction: bool,
    #[serde(skip)]
    pub info: DMatrix<f64>,
    #[serde(skip)]
    pub fit: Option<CoxFit>,
}

impl OutParams {
    /// Coefficients in design-column order.
    pub fn coef_vec(&self) -> Vec<f64> {
        let mut v = vec![self.beta1, self.beta2];
        if self.interaction {
            v.push(self.beta3);
        }
        v.extend(&self.beta4);
        v
    }

    pub fn from_coefs(v: &[f64], interaction: bool) -> Self {
        let off = if interaction { 3 } else { 2 };
        let k = v.len();
        OutParams {
            beta1: v[0],
            beta2: v[1],
            beta3: if interaction { v[2] } else { 0.0 },
            beta4: v[off..].to_vec(),
            interaction,
            info: DMatrix::zeros(k, k),
            fit: None,
        }
    }

    pub fn linear_predictor(&self, a: f64, m: f64, w: &[f64]) -> f64 {
        self.beta1 * a + self.beta2 * m + self.beta3 * a * m + dot(&self.beta4, w)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualDiagnostics {
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub non_normal: bool,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn linear_exposure(c: &[f64], exposure_star: f64, mediator: f64, w: &[f64]) -> f64 {
    c[0] + c[1] * exposure_star + c[2] * mediator + dot(&c[3..], w)
}

fn column_names(lead: &[&str], study: &Study) -> Vec<String> {
    lead.iter()
        .map(|s| s.to_string())
        .chain(study.covariate_names().iter().cloned())
        .collect()
}

fn fit_named(rows: &[Vec<f64>], y: &[f64], names: &[String]) -> Result<LinearFit> {
    let q = names.len();
    let design = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
    let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    ols_fit_named(&design, y, &refs)
}

fn calib_row(exposure_star: f64, mediator: f64, w: &[f64]) -> Vec<f64> {
    let mut x = vec![1.0, exposure_star, mediator];
    x.extend_from_slice(w);
    x
}

/// OLS of `A` on `(1, A*, W)` in the validation study.
pub fn fit_error_model(study: &Study) -> Result<ErrParams> {
    Ok(fit_error_model_full(study)?.0)
}

/// [`fit_error_model`] plus the underlying regression (for residual
/// diagnostics and standard errors).
pub fn fit_error_model_full(study: &Study) -> Result<(ErrParams, LinearFit)> {
    fit_error_model_records(study.validation(), study.covariate_names())
}

/// [`fit_error_model_full`] on raw validation records.
pub fn fit_error_model_records(
    val: &[ValidationRecord],
    covariate_names: &[String],
) -> Result<(ErrParams, LinearFit)> {
    let rows: Vec<Vec<f64>> = val
        .iter()
        .map(|r| {
            let mut x = vec![1.0, r.exposure_star];
            x.extend_from_slice(&r.covariates);
            x
        })
        .collect();
    let y: Vec<f64> = val.iter().map(|r| r.exposure_true).collect();
    let mut names: Vec<String> = vec!["intercept".into(), "exposure_star".into()];
    names.extend(covariate_names.iter().cloned());
    let fit = fit_named(&rows, &y, &names)?;
    let c = &fit.coefs;
    let err = ErrParams {
        gamma0: c[0],
        gamma1: c[1],
        gamma2: c.iter().skip(2).copied().collect(),
        sigma_gamma2: fit.resid_var,
    };
    Ok((err, fit))
}

pub fn residual_diagnostics(residuals: &[f64]) -> ResidualDiagnostics {
    let skewness = stats::skewness(residuals);
    let excess_kurtosis = stats::excess_kurtosis(residuals);
    let non_normal = skewness.abs() > SKEW_WARN;
    if non_normal {
        warn!(
            "calibration residual skewness {skewness:.3} exceeds {SKEW_WARN}; \
             the normal-error closed form behind ORC2 is questionable"
        );
    }
    ResidualDiagnostics {
        skewness,
        excess_kurtosis,
        non_normal,
    }
}

/// Pooled mediator regression: main rows use `E[A | A*, W]` from the error
/// model, validation rows use the true exposure. The residual variance is
/// corrected for the extra `alpha1^2 sigma_gamma2` carried by the main rows.
pub fn fit_mediator(study: &Study, err: &ErrParams) -> Result<MedParams> {
    fit_mediator_rows(study.main(), study.validation(), err, study.covariate_names())
}

/// [`fit_mediator`] on raw record slices; `main` may be empty.
pub fn fit_mediator_rows(
    main: &[MainRecord],
    validation: &[ValidationRecord],
    err: &ErrParams,
    covariate_names: &[String],
) -> Result<MedParams> {
    let main_x: Vec<f64> = main
        .iter()
        .map(|r| err.mean(r.exposure_star, &r.covariates))
        .collect();
    let val_x: Vec<f64> = validation.iter().map(|r| r.exposure_true).collect();
    let n1 = main.len() as f64;
    let n = n1 + validation.len() as f64;
    pooled_mediator(main, validation, &main_x, &val_x, covariate_names, |a1| {
        (n1 / n) * a1 * a1 * err.sigma_gamma2
    })
}

/// Pooled mediator regression on caller-supplied exposures with no variance
/// correction: the unadjusted fit (surrogate everywhere) and the gold
/// standard (truth everywhere).
pub fn fit_mediator_direct(study: &Study, main_x: &[f64], val_x: &[f64]) -> Result<MedParams> {
    pooled_mediator(
        study.main(),
        study.validation(),
        main_x,
        val_x,
        study.covariate_names(),
        |_| 0.0,
    )
}

fn pooled_mediator(
    main: &[MainRecord],
    validation: &[ValidationRecord],
    main_x: &[f64],
    val_x: &[f64],
    covariate_names: &[String],
    correction: impl Fn(f64) -> f64,
) -> Result<MedParams> {
    let mut rows = Vec::with_capacity(main.len() + validation.len());
    let mut y = Vec::with_capacity(rows.capacity());
    for (r, &x) in main.iter().zip(main_x) {
        let mut row = vec![1.0, x];
        row.extend_from_slice(&r.covariates);
        rows.push(row);
        y.push(r.mediator);
    }
    for (r, &x) in validation.iter().zip(val_x) {
        let mut row = vec![1.0, x];
        row.extend_from_slice(&r.covariates);
        rows.push(row);
        y.push(r.mediator);
    }
    let names: Vec<String> = ["intercept", "exposure"]
        .iter()
        .map(|s| s.to_string())
        .chain(covariate_names.iter().cloned())
        .collect();
    let fit = fit_named(&rows, &y, &names)?;
    let c = &fit.coefs;
    let mut sigma_alpha2 = fit.resid_var - correction(c[1]);
    if sigma_alpha2 < 0.0 {
        warn!(
            "mediator residual variance {sigma_alpha2:.4e} is negative after the \
             measurement-error correction; clamping to 0"
        );
        sigma_alpha2 = 0.0;
    }
    Ok(MedParams {
        alpha0: c[0],
        alpha1: c[1],
        alpha2: c.iter().skip(2).copied().collect(),
        sigma_alpha2,
    })
}

/// OLS of `A` on `(1, A*, M, W)` in the validation study.
pub fn orc1_fit(study: &Study) -> Result<OrcPredictor> {
    let val = study.validation();
    let rows: Vec<Vec<f64>> = val
        .iter()
        .map(|r| calib_row(r.exposure_star, r.mediator, &r.covariates))
        .collect();
    let y: Vec<f64> = val.iter().map(|r| r.exposure_true).collect();
    let fit = fit_named(
        &rows,
        &y,
        &column_names(&["intercept", "exposure_star", "mediator"], study),
    )?;
    Ok(OrcPredictor {
        kind: OrcKind::Orc1,
        coefs: fit.coefs.iter().copied().collect(),
    })
}

/// Normal-theory `E[A | A*, M, W]` from the error and mediator models.
pub fn orc2_predictor(med: &MedParams, err: &ErrParams) -> Result<OrcPredictor> {
    let denom = med.alpha1 * med.alpha1 * err.sigma_gamma2 + med.sigma_alpha2;
    if denom <= 0.0 || !denom.is_finite() {
        return Err(Error::Domain(
            "ORC2 denominator alpha1^2 sigma_gamma2 + sigma_alpha2 is zero".into(),
        ));
    }
    let sg = err.sigma_gamma2;
    let sa = med.sigma_alpha2;
    let mut coefs = vec![
        (err.gamma0 * sa - med.alpha0 * med.alpha1 * sg) / denom,
        err.gamma1 * sa / denom,
        med.alpha1 * sg / denom,
    ];
    coefs.extend(
        err.gamma2
            .iter()
            .zip(&med.alpha2)
            .map(|(g, a)| (sa * g - med.alpha1 * sg * a) / denom),
    );
    Ok(OrcPredictor {
        kind: OrcKind::Orc2,
        coefs,
    })
}

/// Split points for `k` intervals.
pub fn split_points(study: &Study, k: usize, strategy: &SplitStrategy) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("number of risk-set intervals must be at least 1".into()));
    }
    match strategy {
        SplitStrategy::EqualTime => {
            let tv = study.validation_max_time();
            Ok((0..k).map(|j| j as f64 * tv / k as f64).collect())
        }
        SplitStrategy::Custom(points) => {
            if points.len() != k {
                return Err(Error::Config(format!(
                    "{} custom split points given for K = {k}",
                    points.len()
                )));
            }
            if points[0] != 0.0 || points.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(
                    "custom split points must start at 0 and increase strictly".into(),
                ));
            }
            Ok(points.clone())
        }
    }
}

/// Risk-set regression calibration: the ORC1 regression refitted among
/// validation subjects still at risk at each split point.
pub fn rrc_fit(study: &Study, k: usize, strategy: &SplitStrategy) -> Result<RrcPredictor> {
    let splits = split_points(study, k, strategy)?;
    let p = study.n_covariates();
    let min_risk_size = p + 4;
    let names = column_names(&["intercept", "exposure_star", "mediator"], study);
    let mut per_interval = Vec::with_capacity(k);
    let mut sizes = Vec::with_capacity(k);
    for &tk in &splits {
        let members: Vec<&ValidationRecord> =
            study.validation().iter().filter(|r| r.t_obs >= tk).collect();
        if members.len() < min_risk_size {
            return Err(Error::UndersizedRiskSet {
                time: tk,
                size: members.len(),
                needed: min_risk_size,
            });
        }
        let rows: Vec<Vec<f64>> = members
            .iter()
            .map(|r| calib_row(r.exposure_star, r.mediator, &r.covariates))
            .collect();
        let y: Vec<f64> = members.iter().map(|r| r.exposure_true).collect();
        let fit = fit_named(&rows, &y, &names)?;
        per_interval.push(fit.coefs.iter().copied().collect());
        sizes.push(members.len());
    }
    Ok(RrcPredictor {
        split_points: splits,
        per_interval,
        min_risk_size,
        risk_set_sizes: sizes,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct KSelection {
    pub best_k: usize,
    /// `(K, leave-one-out MSE)`; infeasible K are skipped.
    pub scores: Vec<(usize, f64)>,
}

/// Leave-one-out cross-validation of the RRC calibration over
/// `K = 1..=k_max` with equally spaced split points.
///
/// Each validation subject is predicted by the interval containing its own
/// time; it belongs to that interval's risk set, so the deleted residual is
/// `e_i / (1 - h_ii)` from the in-sample fit.
pub fn select_k_loocv(study: &Study, k_max: usize) -> Result<KSelection> {
    let mut scores = Vec::new();
    for k in 1..=k_max {
        let Ok(pred) = rrc_fit(study, k, &SplitStrategy::EqualTime) else {
            continue;
        };
        let mut sse = 0.0;
        for (kk, &tk) in pred.split_points.iter().enumerate() {
            let upper = pred.split_points.get(kk + 1).copied().unwrap_or(f64::INFINITY);
            let members: Vec<&ValidationRecord> =
                study.validation().iter().filter(|r| r.t_obs >= tk).collect();
            let rows: Vec<Vec<f64>> = members
                .iter()
                .map(|r| calib_row(r.exposure_star, r.mediator, &r.covariates))
                .collect();
            let y: Vec<f64> = members.iter().map(|r| r.exposure_true).collect();
            let design = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
            let fit = crate::regress::ols_fit(&design, &y)?;
            for (i, r) in members.iter().enumerate() {
                if r.t_obs < upper {
                    let h = fit.leverage(&rows[i]);
                    let e = fit.residuals[i] / (1.0 - h).max(1e-12);
                    sse += e * e;
                }
            }
        }
        scores.push((k, sse / study.n2() as f64));
    }
    let best_k = scores
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|s| s.0)
        .ok_or_else(|| Error::Config("no feasible K for cross-validation".into()))?;
    Ok(KSelection { best_k, scores })
}

/// Cox design rows `(a, M, a M, W)` for the main study given imputed
/// exposures.
pub fn outcome_rows(study: &Study, exposure: &[f64], interaction: bool) -> Result<CoxRows> {
    let main = study.main();
    let p = 2 + interaction as usize + study.n_covariates();
    let mut z = Vec::with_capacity(main.len() * p);
    for (r, &a) in main.iter().zip(exposure) {
        z.push(a);
        z.push(r.mediator);
        if interaction {
            z.push(a * r.mediator);
        }
        z.extend_from_slice(&r.covariates);
    }
    CoxRows::from_parts(
        main.iter().map(|r| r.t_obs).collect(),
        main.iter().map(|r| r.event).collect(),
        z,
        p,
    )
}

/// Cox fit on the main study with the exposure imputed per `model`.
pub fn fit_outcome(study: &Study, model: &ExposureModel, include_interaction: bool) -> Result<OutParams> {
    let exposure = model.impute_all(study)?;
    let rows = outcome_rows(study, &exposure, include_interaction)?;
    let fit = coxfit::cox_fit(&rows)?;
    let mut out = OutParams::from_coefs(&fit.beta, include_interaction);
    out.info = fit.info.clone();
    out.fit = Some(fit);
    Ok(out)
}

/// Classical OLS standard errors of the error-model coefficients.
pub fn error_model_se(fit: &LinearFit) -> DVector<f64> {
    fit.coef_se()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy_study(seed: u64, n1: usize, n2: usize, a_equals_star: bool) -> Study {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            let w: f64 = rng.sample(StandardNormal);
            let a: f64 = 0.3 * w + rng.sample::<f64, _>(StandardNormal);
            let s = if a_equals_star {
                a
            } else {
                0.7 * a + 0.5 * rng.sample::<f64, _>(StandardNormal)
            };
            let m = 0.2 + 0.5 * a + 0.1 * w + 0.6 * rng.sample::<f64, _>(StandardNormal);
            let t = rng.random_range(0.1..10.0);
            (w, a, s, m, t)
        };
        let mut main = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n1 {
            let (w, a, s, m, t) = draw(&mut rng);
            truth.push(a);
            main.push(MainRecord {
                t_obs: t,
                event: i % 3 == 0,
                mediator: m,
                exposure_star: s,
                covariates: vec![w],
            });
        }
        let validation = (0..n2)
            .map(|_| {
                let (w, a, s, m, t) = draw(&mut rng);
                ValidationRecord {
                    t_obs: t,
                    mediator: m,
                    exposure_star: s,
                    exposure_true: a,
                    covariates: vec![w],
                }
            })
            .collect();
        Study::new(main, validation, vec!["w".into()], None)
            .unwrap()
            .with_oracle_exposure(truth)
            .unwrap()
    }

    fn with_validation(study: &Study, f: impl Fn(&ValidationRecord) -> ValidationRecord) -> Study {
        Study::new(
            study.main().to_vec(),
            study.validation().iter().map(f).collect(),
            study.covariate_names().to_vec(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn identity_and_affine_calibration() {
        let s = toy_study(1, 50, 40, true);
        let e = fit_error_model(&s).unwrap();
        assert!(e.gamma0.abs() < 1e-10 && (e.gamma1 - 1.0).abs() < 1e-10);
        assert!(e.gamma2[0].abs() < 1e-10 && e.sigma_gamma2 < 1e-20);

        let s2 = with_validation(&s, |r| ValidationRecord {
            exposure_true: 2.0 * r.exposure_star + 3.0,
            ..r.clone()
        });
        let e = fit_error_model(&s2).unwrap();
        assert!((e.gamma0 - 3.0).abs() < 1e-10 && (e.gamma1 - 2.0).abs() < 1e-10);
        assert!(e.sigma_gamma2 < 1e-20);
    }

    #[test]
    fn mediator_validation_only_is_plain_ols() {
        let s = toy_study(2, 10, 60, false);
        let e = fit_error_model(&s).unwrap();
        let med = fit_mediator_rows(&[], s.validation(), &e, s.covariate_names()).unwrap();
        let rows: Vec<Vec<f64>> = s
            .validation()
            .iter()
            .map(|r| vec![1.0, r.exposure_true, r.covariates[0]])
            .collect();
        let y: Vec<f64> = s.validation().iter().map(|r| r.mediator).collect();
        let fit = crate::regress::ols_fit(&crate::regress::design_from_rows(&rows), &y).unwrap();
        assert!((med.alpha1 - fit.coefs[1]).abs() < 1e-12);
        assert!((med.sigma_alpha2 - fit.resid_var).abs() < 1e-12);
    }

    #[test]
    fn mediator_no_error_matches_gold_pooled() {
        let s = toy_study(3, 80, 30, true);
        let e = fit_error_model(&s).unwrap();
        let med = fit_mediator(&s, &e).unwrap();
        let truth = s.oracle_exposure().unwrap().to_vec();
        let val_a: Vec<f64> = s.validation().iter().map(|r| r.exposure_true).collect();
        let gold = fit_mediator_direct(&s, &truth, &val_a).unwrap();
        for (a, b) in med.to_vec().iter().zip(gold.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sigma_alpha2_solves_its_estimating_equation() {
        let s = toy_study(4, 200, 50, false);
        let e = fit_error_model(&s).unwrap();
        let med = fit_mediator(&s, &e).unwrap();
        let mut u = 0.0;
        for r in s.main() {
            let res = r.mediator - med.mean(e.mean(r.exposure_star, &r.covariates), &r.covariates);
            u += med.sigma_alpha2 + med.alpha1 * med.alpha1 * e.sigma_gamma2 - res * res;
        }
        for r in s.validation() {
            let res = r.mediator - med.mean(r.exposure_true, &r.covariates);
            u += med.sigma_alpha2 - res * res;
        }
        assert!(u.abs() < 1e-8, "{u}");
    }

    #[test]
    fn orc1_identity_when_exact() {
        let s = toy_study(5, 20, 40, true);
        let o = orc1_fit(&s).unwrap();
        assert!((o.coefs[1] - 1.0).abs() < 1e-10);
        for (j, c) in o.coefs.iter().enumerate() {
            if j != 1 {
                assert!(c.abs() < 1e-10);
            }
        }
        assert!((o.predict(0.37, 5.0, &[2.0]) - 0.37).abs() < 1e-9);
    }

    #[test]
    fn orc2_reductions_and_parts() {
        let err = ErrParams {
            gamma0: 0.1,
            gamma1: 0.8,
            gamma2: vec![0.3],
            sigma_gamma2: 0.0,
        };
        let med = MedParams {
            alpha0: 0.5,
            alpha1: 0.7,
            alpha2: vec![0.2],
            sigma_alpha2: 0.4,
        };
        let o = orc2_predictor(&med, &err).unwrap();
        for (a, b) in o.coefs.iter().zip([0.1, 0.8, 0.0, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }

        let med0 = MedParams { alpha1: 0.0, ..med.clone() };
        let err1 = ErrParams { sigma_gamma2: 0.6, ..err.clone() };
        let o = orc2_predictor(&med0, &err1).unwrap();
        for (a, b) in o.coefs.iter().zip([0.1, 0.8, 0.0, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }

        let o = orc2_predictor(&med, &err1).unwrap();
        let d = 0.49 * 0.6 + 0.4;
        assert!((o.coefs[1] - 0.8 * 0.4 / d).abs() < 1e-15);
        assert!((o.coefs[2] - 0.7 * 0.6 / d).abs() < 1e-15);

        let zero = MedParams { sigma_alpha2: 0.0, ..med };
        assert!(orc2_predictor(&zero, &err).is_err());
    }

    #[test]
    fn orc2_unit_case() {
        // alpha1 = 1, unit variances, gamma = (0, 1, 0): (A* + M - alpha0) / 2
        let err = ErrParams {
            gamma0: 0.0,
            gamma1: 1.0,
            gamma2: vec![],
            sigma_gamma2: 1.0,
        };
        let med = MedParams {
            alpha0: 0.4,
            alpha1: 1.0,
            alpha2: vec![],
            sigma_alpha2: 1.0,
        };
        let o = orc2_predictor(&med, &err).unwrap();
        assert!((o.coefs[0] + 0.2).abs() < 1e-15);
        assert!((o.coefs[1] - 0.5).abs() < 1e-15);
        assert!((o.coefs[2] - 0.5).abs() < 1e-15);

        // Monte Carlo E[A | A*, M] on simulated triples via regression
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200_000;
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let s: f64 = rng.sample(StandardNormal);
            let a = s + rng.sample::<f64, _>(StandardNormal);
            let m = 0.4 + a + rng.sample::<f64, _>(StandardNormal);
            rows.push(vec![1.0, s, m]);
            y.push(a);
        }
        let fit = crate::regress::ols_fit(&crate::regress::design_from_rows(&rows), &y).unwrap();
        assert!((fit.coefs[1] - 0.5).abs() < 0.01);
        assert!((fit.coefs[2] - 0.5).abs() < 0.01);
        assert!((fit.coefs[0] + 0.2).abs() < 0.02);
    }

    #[test]
    fn rrc_k1_equals_orc1_exactly() {
        let s = toy_study(6, 30, 50, false);
        let o = orc1_fit(&s).unwrap();
        let r = rrc_fit(&s, 1, &SplitStrategy::EqualTime).unwrap();
        assert_eq!(r.per_interval[0], o.coefs);
    }

    #[test]
    fn rrc_identical_risk_sets_give_identical_coefs() {
        let s = toy_study(7, 30, 50, false);
        // every validation time >= 5 makes t_2 = 5 cover the whole study
        let s = with_validation(&s, |r| ValidationRecord {
            t_obs: 10.0,
            ..r.clone()
        });
        let r = rrc_fit(&s, 2, &SplitStrategy::Custom(vec![0.0, 5.0])).unwrap();
        assert_eq!(r.per_interval[0], r.per_interval[1]);
    }

    #[test]
    fn rrc_interval_lookup() {
        let pred = RrcPredictor {
            split_points: vec![0.0, 2.0, 4.0],
            per_interval: vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![2.0, 0.0, 0.0, 0.0],
                vec![3.0, 0.0, 0.0, 0.0],
            ],
            min_risk_size: 5,
            risk_set_sizes: vec![10, 8, 6],
        };
        assert_eq!(pred.interval_of(0.0), 0);
        assert_eq!(pred.interval_of(1.99), 0);
        assert_eq!(pred.interval_of(2.0), 1);
        assert_eq!(pred.interval_of(3.0), 1);
        assert_eq!(pred.interval_of(100.0), 2);
        assert_eq!(pred.predict(3.0, 0.5, 0.5, &[0.0]), 2.0);
    }

    #[test]
    fn rrc_undersized_risk_set_names_time() {
        let s = toy_study(8, 30, 12, false);
        let err = rrc_fit(&s, 11, &SplitStrategy::EqualTime).unwrap_err();
        match err {
            Error::UndersizedRiskSet { needed, .. } => assert_eq!(needed, 5),
            other => panic!("{other:?}"),
        }
        assert!(err_msg_mentions_k(&s));
    }

    fn err_msg_mentions_k(s: &Study) -> bool {
        rrc_fit(s, 11, &SplitStrategy::EqualTime)
            .unwrap_err()
            .to_string()
            .contains("smaller K")
    }

    #[test]
    fn outcome_fit_identity_predictor_equals_gold() {
        let s = toy_study(10, 300, 40, true);
        let gold = fit_outcome(&s, &ExposureModel::Gold, true).unwrap();
        let o = orc1_fit(&s).unwrap();
        let orc = fit_outcome(&s, &ExposureModel::Orc(o), true).unwrap();
        for (a, b) in gold.coef_vec().iter().zip(orc.coef_vec()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn loocv_runs_and_prefers_feasible_k() {
        let s = toy_study(11, 20, 120, false);
        let sel = select_k_loocv(&s, 4).unwrap();
        assert!((1..=4).contains(&sel.best_k));
        assert!(sel.scores.iter().all(|(_, m)| m.is_finite() && *m > 0.0));
    }
}
