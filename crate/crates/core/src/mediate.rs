//! Natural direct and indirect effects on the log-hazard-ratio scale, and
//! the bias diagnostics for the unadjusted estimator.

use serde::Serialize;

use crate::calibrate::{dot, MedParams, OutParams};
use crate::coxfit::{cumhaz_at, BaselineHazard};
use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;

/// Below this `|TE|` the mediation proportion is reported as undefined.
pub const TE_ZERO: f64 = 1e-12;
pub const DEFAULT_QUAD_ORDER: usize = 40;

/// Mediator-model and outcome-model parameters.
#[derive(Debug, Clone, Serialize)]
pub struct Theta {
    pub med: MedParams,
    pub out: OutParams,
}

impl Theta {
    /// `[alpha0, alpha1, alpha2.., sigma_alpha2, beta1, beta2, (beta3), beta4..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.med.to_vec();
        v.extend(self.out.coef_vec());
        v
    }

    pub fn from_slice(v: &[f64], p: usize, interaction: bool) -> Self {
        let med = MedParams::from_slice(&v[..p + 3]);
        let out = OutParams::from_coefs(&v[p + 3..], interaction);
        Theta { med, out }
    }

    pub fn dim(p: usize, interaction: bool) -> usize {
        p + 3 + 2 + interaction as usize + p
    }
}

/// Exposure change `a_star -> a` at covariate profile `w`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    pub a: f64,
    pub a_star: f64,
    pub w: Vec<f64>,
}

impl Contrast {
    pub fn new(a: f64, a_star: f64, w: Vec<f64>) -> Self {
        Contrast { a, a_star, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MediationMeasures {
    pub nie: f64,
    pub nde: f64,
    pub te: f64,
    /// `None` when `|te| < TE_ZERO`.
    pub mp: Option<f64>,
}

impl MediationMeasures {
    pub fn from_parts(nie: f64, nde: f64) -> Self {
        let te = nie + nde;
        let mp = (te.abs() >= TE_ZERO).then(|| nie / te);
        MediationMeasures { nie, nde, te, mp }
    }

    /// `[nie, nde, te, mp]` with `NaN` for an undefined proportion.
    pub fn as_array(&self) -> [f64; 4] {
        [self.nie, self.nde, self.te, self.mp.unwrap_or(f64::NAN)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Measure {
    Nie,
    Nde,
    Te,
    Mp,
}

impl Measure {
    pub const ALL: [Measure; 4] = [Measure::Nie, Measure::Nde, Measure::Te, Measure::Mp];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Nie => "NIE",
            Measure::Nde => "NDE",
            Measure::Te => "TE",
            Measure::Mp => "MP",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn get(self, m: &MediationMeasures) -> Option<f64> {
        match self {
            Measure::Nie => Some(m.nie),
            Measure::Nde => Some(m.nde),
            Measure::Te => Some(m.te),
            Measure::Mp => m.mp,
        }
    }
}

/// Rare-outcome closed forms.
pub fn approx_measures(theta: &Theta, c: &Contrast) -> MediationMeasures {
    let (m, o) = (&theta.med, &theta.out);
    let d = c.a - c.a_star;
    let nie = m.alpha1 * (o.beta2 + o.beta3 * c.a) * d;
    let mu_star = m.alpha0 + m.alpha1 * c.a_star + dot(&m.alpha2, &c.w);
    let nde = (o.beta1 + o.beta3 * (mu_star + o.beta2 * m.sigma_alpha2)) * d
        + 0.5 * o.beta3 * o.beta3 * m.sigma_alpha2 * (c.a * c.a - c.a_star * c.a_star);
    MediationMeasures::from_parts(nie, nde)
}

/// Which expression for the survivor-selection factor `r` to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum RForm {
    /// `r = E[exp(-L e^{c^2 s2 + eta(m)})] / E[exp(-L e^{eta(m)})]` with
    /// `m ~ N(mu, s2)`; follows from the counterfactual hazard by completing
    /// the square.
    #[default]
    Derived,
    /// The unit-variance kernel with `c^2` in the exponent. Identical to
    /// `Derived` when `sigma_alpha2 = 1`.
    UnitVariance,
}

/// Evaluates `delta_{a, a*}` for the exact measures at a fixed cumulative
/// baseline hazard.
struct DeltaEval<'a> {
    theta: &'a Theta,
    w: &'a [f64],
    lambda: f64,
    gh: &'a GaussHermite,
    form: RForm,
}

impl DeltaEval<'_> {
    fn delta(&self, a: f64, a_star: f64) -> Result<f64> {
        let (m, o) = (&self.theta.med, &self.theta.out);
        let c = o.beta2 + o.beta3 * a;
        let s2 = m.sigma_alpha2;
        let mu = m.alpha0 + m.alpha1 * a_star + dot(&m.alpha2, self.w);
        let base = o.beta1 * a + dot(&o.beta4, self.w);
        let log_r = if self.lambda == 0.0 {
            0.0
        } else {
            let (sd, shift) = match self.form {
                RForm::Derived => (s2.sqrt(), c * c * s2),
                RForm::UnitVariance => (1.0, c * c),
            };
            let log_l = self.lambda.ln();
            // -L exp(k + eta(m)) evaluated as -exp(log L + k + eta(m))
            let term = |k: f64| {
                move |x: f64| -(log_l + k + base + c * x).exp()
            };
            let num = self.gh.log_expect_exp(mu, sd, term(shift));
            let den = self.gh.log_expect_exp(mu, sd, term(0.0));
            if !num.is_finite() || !den.is_finite() {
                return Err(Error::Domain(format!(
                    "survivor integrals underflow at cumulative hazard {}",
                    self.lambda
                )));
            }
            num - den
        };
        Ok(log_r + base + c * mu + 0.5 * c * c * s2)
    }

    fn measures(&self, a: f64, a_star: f64) -> Result<MediationMeasures> {
        let d_aa = self.delta(a, a)?;
        let d_as = self.delta(a, a_star)?;
        let d_ss = self.delta(a_star, a_star)?;
        Ok(MediationMeasures::from_parts(d_aa - d_as, d_as - d_ss))
    }
}

/// Exact measures at a given cumulative baseline hazard value.
pub fn exact_measures_at_cumhaz(
    theta: &Theta,
    lambda: f64,
    c: &Contrast,
    quad_order: usize,
    form: RForm,
) -> Result<MediationMeasures> {
    if quad_order < 10 {
        return Err(Error::Domain(format!("quadrature order {quad_order} below 10")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!("cumulative hazard {lambda} is not a finite non-negative value")));
    }
    let gh = GaussHermite::new(quad_order);
    DeltaEval {
        theta,
        w: &c.w,
        lambda,
        gh: &gh,
        form,
    }
    .measures(c.a, c.a_star)
}

/// Exact measures at time `t` using the estimated baseline hazard.
pub fn exact_measures(
    theta: &Theta,
    bh: &BaselineHazard,
    c: &Contrast,
    t: f64,
    quad_order: usize,
) -> Result<MediationMeasures> {
    let lambda = cumhaz_at(bh, t)?;
    exact_measures_at_cumhaz(theta, lambda, c, quad_order, RForm::Derived)
}

/// [`exact_measures`] over a time grid, sharing one quadrature rule.
pub fn exact_measures_grid(
    theta: &Theta,
    bh: &BaselineHazard,
    c: &Contrast,
    times: &[f64],
    quad_order: usize,
) -> Result<Vec<(f64, MediationMeasures)>> {
    if quad_order < 10 {
        return Err(Error::Domain(format!("quadrature order {quad_order} below 10")));
    }
    let gh = GaussHermite::new(quad_order);
    times
        .iter()
        .map(|&t| {
            let lambda = cumhaz_at(bh, t)?;
            let m = DeltaEval {
                theta,
                w: &c.w,
                lambda,
                gh: &gh,
                form: RForm::Derived,
            }
            .measures(c.a, c.a_star)?;
            Ok((t, m))
        })
        .collect()
}

/// Asymptotic relative biases of the unadjusted estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelBias {
    pub nie: f64,
    pub nde: f64,
    pub te: f64,
    pub mp: f64,
}

pub fn theorem1_relbias(gamma1: f64, rho: f64, mp_true: f64) -> Result<RelBias> {
    if !(mp_true > 0.0 && mp_true < 1.0) {
        return Err(Error::Domain(format!("true MP {mp_true} outside (0, 1)")));
    }
    let odds = 1.0 / mp_true - 1.0;
    Ok(RelBias {
        nie: gamma1 - 1.0 + gamma1 * rho * odds,
        nde: (gamma1 - 1.0) * (1.0 - rho) - rho,
        te: gamma1 - 1.0,
        mp: rho * odds,
    })
}

/// MP reliability index `sigma_gamma2 / (sigma_gamma2 + sigma_alpha2 / alpha1^2)`.
pub fn reliability_index(alpha1: f64, sigma_alpha2: f64, sigma_gamma2: f64) -> Result<f64> {
    if alpha1 == 0.0 {
        return Ok(0.0);
    }
    let den = sigma_gamma2 + sigma_alpha2 / (alpha1 * alpha1);
    if den <= 0.0 {
        return Err(Error::Domain(
            "reliability index undefined when both residual variances are zero".into(),
        ));
    }
    Ok(sigma_gamma2 / den)
}

/// Reliability index from the correlations when there are no covariates.
pub fn reliability_index_nocov(rho_aastar: f64, rho_am: f64) -> Result<f64> {
    if rho_am == 0.0 || rho_am.abs() >= 1.0 {
        return Err(Error::Domain(format!("rho_AM = {rho_am} must lie in (-1, 0) or (0, 1)")));
    }
    if rho_aastar.abs() > 1.0 {
        return Err(Error::Domain(format!("rho_AA* = {rho_aastar} outside [-1, 1]")));
    }
    let r2 = rho_aastar * rho_aastar;
    Ok((1.0 - r2) / (1.0 / (rho_am * rho_am) - r2))
}
