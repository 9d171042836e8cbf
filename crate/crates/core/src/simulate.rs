//! Synthetic main/validation studies and replication experiments.
//!
//! `(M, A, W)` are jointly normal with variances 0.5 and pairwise
//! correlation 0.2; the surrogate is `A* = rho A + e` with
//! `Var(e) = 0.5 (1 - rho^2)`; failure times follow a Cox model with Weibull
//! baseline `Lambda0(t) = (v t)^shape`, exponential censoring and
//! administrative censoring at `t_star`.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp, SkewNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{ErrParams, MedParams, OutParams};
use crate::dataio::{MainRecord, Study, ValidationRecord};
use crate::error::{Error, Result};
use crate::infer::{self, FitOptions, Method, MpScale, SandwichOptions};
use crate::mediate::{approx_measures, Contrast, Measure, MediationMeasures, Theta};
use crate::stats;

/// Internal seed for the event-rate calibration draws.
const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
const CALIBRATION_N: usize = 100_000;
const CALIBRATION_TOL: f64 = 0.002;
const VAR: f64 = 0.5;
const CORR: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorDist {
    Normal,
    SkewNormal,
}

/// One simulation setting. Every field has a default, so a scenario file
/// only lists what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub n1: usize,
    pub n2: usize,
    pub rho_aastar: f64,
    pub te_target: f64,
    pub mp_target: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub event_rate_target: f64,
    pub censor_rate: f64,
    pub t_star: f64,
    pub weibull_shape: f64,
    pub k_rrc: usize,
    /// Extra RRC fits, one per listed K.
    pub k_sweep: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub error_dist: ErrorDist,
    /// Skew-normal shape parameter.
    pub skew_shape: f64,
    /// Bootstrap replicates per simulated study for v2 coverage; 0 disables.
    pub bootstrap: usize,
    /// Compute sandwich (v1) intervals.
    pub sandwich: bool,
    pub interaction: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n1: 10_000,
            n2: 250,
            rho_aastar: 0.4,
            te_target: 1.5f64.ln(),
            mp_target: 0.3,
            beta3: 1.1f64.ln(),
            beta4: 1.1f64.ln(),
            event_rate_target: 0.05,
            censor_rate: 0.01,
            t_star: 50.0,
            weibull_shape: 6.0,
            k_rrc: 4,
            k_sweep: vec![],
            replications: 500,
            seed: 20_231_017,
            error_dist: ErrorDist::Normal,
            skew_shape: 10.0,
            bootstrap: 0,
            sandwich: true,
            interaction: true,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if !(self.rho_aastar > 0.0 && self.rho_aastar <= 1.0) {
            return bad(format!("rho_aastar = {} outside (0, 1]", self.rho_aastar));
        }
        if !(self.mp_target > 0.0 && self.mp_target < 1.0) {
            return bad(format!("mp_target = {} outside (0, 1)", self.mp_target));
        }
        if !(self.event_rate_target > 0.0 && self.event_rate_target < 1.0) {
            return bad(format!("event_rate_target = {} outside (0, 1)", self.event_rate_target));
        }
        if !(self.censor_rate >= 0.0 && self.censor_rate < 1.0) {
            return bad(format!("censor_rate = {} outside [0, 1)", self.censor_rate));
        }
        if self.t_star <= 0.0 || self.weibull_shape <= 0.0 {
            return bad("t_star and weibull_shape must be positive".into());
        }
        if self.n1 == 0 || self.n2 < 5 {
            return bad(format!("study sizes n1 = {}, n2 = {} too small", self.n1, self.n2));
        }
        if self.k_rrc == 0 || self.k_sweep.contains(&0) {
            return bad("RRC needs K >= 1".into());
        }
        if self.bootstrap != 0 && self.bootstrap < 100 {
            return bad(format!("bootstrap = {} must be 0 or at least 100", self.bootstrap));
        }
        Ok(())
    }

    /// Methods fitted on each replicate, in reporting order.
    pub fn methods(&self) -> Vec<Method> {
        let mut m = vec![
            Method::Unadjusted,
            Method::Gold,
            Method::Orc1,
            Method::Orc2,
            Method::Rrc { k: self.k_rrc },
        ];
        for &k in &self.k_sweep {
            if k != self.k_rrc {
                m.push(Method::Rrc { k });
            }
        }
        m
    }
}

/// Mediator model implied by the joint normal law of `(M, A, W)`.
pub fn implied_alpha() -> MedParams {
    // M on (A, W): [[1, c], [c, 1]]^-1 [c, c] = c / (1 + c) each
    let b = CORR / (1.0 + CORR);
    MedParams {
        alpha0: 0.0,
        alpha1: b,
        alpha2: vec![b],
        sigma_alpha2: VAR * (1.0 - 2.0 * b * CORR),
    }
}

/// Calibration model of `A` on `(A*, W)` implied by the surrogate law.
pub fn implied_gamma(rho: f64) -> ErrParams {
    // Cov(A*, A*) = 0.5, Cov(A*, W) = rho Cov(A, W), Cov(A*, A) = 0.5 rho
    let c = VAR * CORR;
    let (sxx, sxw, sww) = (VAR, rho * c, VAR);
    let (sxa, swa) = (VAR * rho, c);
    let det = sxx * sww - sxw * sxw;
    let g1 = (sww * sxa - sxw * swa) / det;
    let g2 = (sxx * swa - sxw * sxa) / det;
    ErrParams {
        gamma0: 0.0,
        gamma1: g1,
        gamma2: vec![g2],
        sigma_gamma2: VAR - g1 * sxa - g2 * swa,
    }
}

/// `(beta1, beta2)` giving the target TE and MP at `a = 1, a* = 0, w = 0`.
pub fn solve_outcome_betas(scenario: &Scenario, alpha: &MedParams) -> Result<(f64, f64)> {
    if alpha.alpha1 == 0.0 {
        return Err(Error::Domain("alpha1 = 0 leaves the indirect effect unidentified".into()));
    }
    let (te, mp, b3) = (scenario.te_target, scenario.mp_target, scenario.beta3);
    let s2 = alpha.sigma_alpha2;
    let beta2 = mp * te / alpha.alpha1 - b3;
    let beta1 = (1.0 - mp) * te - b3 * (alpha.alpha0 + beta2 * s2) - 0.5 * b3 * b3 * s2;
    Ok((beta1, beta2))
}

/// Population quantities behind a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct SimSetup {
    pub scenario: Scenario,
    pub alpha: MedParams,
    pub gamma: ErrParams,
    /// MP reliability index at the implied parameters.
    pub reliability: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub v: f64,
    /// Approximate measures at the true parameters, contrast `(1, 0, 0)`.
    pub truth: MediationMeasures,
}

impl SimSetup {
    pub fn true_theta(&self) -> Theta {
        let s = &self.scenario;
        let coefs = [self.beta1, self.beta2, s.beta3, s.beta4];
        Theta {
            med: self.alpha.clone(),
            out: OutParams::from_coefs(&coefs, true),
        }
    }

    /// `Lambda0(t) = (v t)^shape`.
    pub fn true_cumhaz(&self, t: f64) -> f64 {
        (self.v * t).powf(self.scenario.weibull_shape)
    }

    pub fn contrast() -> Contrast {
        Contrast::new(1.0, 0.0, vec![0.0])
    }
}

pub fn prepare(scenario: &Scenario) -> Result<SimSetup> {
    scenario.validate()?;
    let alpha = implied_alpha();
    let gamma = implied_gamma(scenario.rho_aastar);
    let (beta1, beta2) = solve_outcome_betas(scenario, &alpha)?;
    let v = calibrate_weibull_scale(scenario, (beta1, beta2))?;
    let reliability = crate::mediate::reliability_index(alpha.alpha1, alpha.sigma_alpha2, gamma.sigma_gamma2)?;
    let mut setup = SimSetup {
        scenario: scenario.clone(),
        alpha,
        gamma,
        reliability,
        beta1,
        beta2,
        v,
        truth: MediationMeasures::from_parts(0.0, 0.0),
    };
    setup.truth = approx_measures(&setup.true_theta(), &SimSetup::contrast());
    Ok(setup)
}

fn draw_amw(rng: &mut impl Rng) -> (f64, f64, f64) {
    // equicorrelated normals: sqrt(c) Z0 + sqrt(1 - c) Z_j
    let z0: f64 = rng.sample(StandardNormal);
    let mut one = || {
        let z: f64 = rng.sample(StandardNormal);
        VAR.sqrt() * (CORR.sqrt() * z0 + (1.0 - CORR).sqrt() * z)
    };
    let m = one();
    let a = one();
    let w = one();
    (m, a, w)
}

struct Subject {
    m: f64,
    a: f64,
    a_star: f64,
    w: f64,
    t: f64,
    event: bool,
}

struct Generator {
    scenario: Scenario,
    beta: [f64; 4],
    v: f64,
    skew: Option<SkewNormal<f64>>,
    skew_mean: f64,
    skew_sd: f64,
    censor: Option<Exp<f64>>,
}

impl Generator {
    fn new(scenario: &Scenario, betas: (f64, f64), v: f64) -> Result<Self> {
        let (skew, skew_mean, skew_sd) = match scenario.error_dist {
            ErrorDist::Normal => (None, 0.0, 1.0),
            ErrorDist::SkewNormal => {
                let a = scenario.skew_shape;
                let d = a / (1.0 + a * a).sqrt();
                let dist = SkewNormal::new(0.0, 1.0, a).map_err(|e| Error::Config(format!("skew-normal: {e}")))?;
                let two_pi = 2.0 / std::f64::consts::PI;
                (Some(dist), d * two_pi.sqrt(), (1.0 - two_pi * d * d).sqrt())
            }
        };
        let censor = if scenario.censor_rate > 0.0 {
            Some(Exp::new(scenario.censor_rate).map_err(|e| Error::Config(format!("censoring: {e}")))?)
        } else {
            None
        };
        Ok(Generator {
            scenario: scenario.clone(),
            beta: [betas.0, betas.1, scenario.beta3, scenario.beta4],
            v,
            skew,
            skew_mean,
            skew_sd,
            censor,
        })
    }

    fn subject(&self, rng: &mut impl Rng) -> Subject {
        let s = &self.scenario;
        let (m, a, w) = draw_amw(rng);
        let rho = s.rho_aastar;
        let e_sd = (VAR * (1.0 - rho * rho)).sqrt();
        let std_err = match &self.skew {
            None => rng.sample::<f64, _>(StandardNormal),
            Some(d) => (d.sample(rng) - self.skew_mean) / self.skew_sd,
        };
        let a_star = if rho == 1.0 { a } else { rho * a + e_sd * std_err };
        let b = &self.beta;
        let lp = b[0] * a + b[1] * m + b[2] * a * m + b[3] * w;
        let u: f64 = rng.random::<f64>();
        let u = u.max(f64::MIN_POSITIVE);
        let t_fail = (-u.ln() * (-lp).exp()).powf(1.0 / s.weibull_shape) / self.v;
        let c = self.censor.map_or(f64::INFINITY, |d| d.sample(rng));
        let limit = c.min(s.t_star);
        Subject {
            m,
            a,
            a_star,
            w,
            t: t_fail.min(limit),
            event: t_fail <= limit,
        }
    }
}

/// Bisection on `log v` until the event rate of a fixed set of draws is
/// within 0.2 percentage points of the target.
pub fn calibrate_weibull_scale(scenario: &Scenario, betas: (f64, f64)) -> Result<f64> {
    let gen = Generator::new(scenario, betas, 1.0)?;
    // common random numbers: uncensored time at v = 1 (times scale as
    // 1 / v) and the censoring limit
    let mut rng = ChaCha20Rng::seed_from_u64(CALIBRATION_SEED);
    let s = scenario;
    let pairs: Vec<(f64, f64)> = (0..CALIBRATION_N)
        .map(|_| {
            let (m, a, w) = draw_amw(&mut rng);
            let b = &gen.beta;
            let lp = b[0] * a + b[1] * m + b[2] * a * m + b[3] * w;
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let t1 = (-u.ln() * (-lp).exp()).powf(1.0 / s.weibull_shape);
            let c = gen.censor.map_or(f64::INFINITY, |d| d.sample(&mut rng));
            (t1, c.min(s.t_star))
        })
        .collect();
    let rate = |log_v: f64| {
        let v = log_v.exp();
        pairs.iter().filter(|(t1, lim)| t1 / v <= *lim).count() as f64 / CALIBRATION_N as f64
    };
    let target = s.event_rate_target;
    let (mut lo, mut hi) = (-30.0_f64, 10.0_f64);
    if rate(lo) > target || rate(hi) < target {
        return Err(Error::Domain(format!(
            "cannot bracket the Weibull scale for event rate {target}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid);
        if (r - target).abs() <= CALIBRATION_TOL && hi - lo < 1e-6 {
            return Ok(mid.exp());
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = (0.5 * (lo + hi)).exp();
    let r = rate(v.ln());
    if (r - target).abs() > CALIBRATION_TOL {
        return Err(Error::Domain(format!("Weibull scale calibration reached rate {r} for target {target}")));
    }
    Ok(v)
}

/// One synthetic study; the latent true exposure of the main rows is kept
/// for the gold-standard fit.
pub fn generate_study(scenario: &Scenario, betas: (f64, f64), v: f64, rng: &mut impl Rng) -> Result<Study> {
    let gen = Generator::new(scenario, betas, v)?;
    let mut main = Vec::with_capacity(scenario.n1);
    let mut truth = Vec::with_capacity(scenario.n1);
    for _ in 0..scenario.n1 {
        let s = gen.subject(rng);
        truth.push(s.a);
        main.push(MainRecord {
            t_obs: s.t,
            event: s.event,
            mediator: s.m,
            exposure_star: s.a_star,
            covariates: vec![s.w],
        });
    }
    let validation = (0..scenario.n2)
        .map(|_| {
            let s = gen.subject(rng);
            ValidationRecord {
                t_obs: s.t,
                mediator: s.m,
                exposure_star: s.a_star,
                exposure_true: s.a,
                covariates: vec![s.w],
            }
        })
        .collect();
    Study::new(main, validation, vec!["w".into()], Some(scenario.t_star))?.with_oracle_exposure(truth)
}

/// Random stream for replicate `r` of a scenario.
pub fn replicate_rng(seed: u64, r: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(r);
    rng
}

/// Point estimate and interval outcomes of one method on one replicate.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    pub measures: Option<MediationMeasures>,
    /// Sandwich SE and coverage per measure (NIE, NDE, TE, MP).
    pub se_v1: [Option<f64>; 4],
    pub cover_v1: [Option<bool>; 4],
    pub cover_v2: [Option<bool>; 4],
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub event_rate: f64,
    pub methods: Vec<MethodOutcome>,
}

/// Table-style summary for one method and measure.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub measure: String,
    pub truth: f64,
    pub percent_bias: f64,
    pub se_x100: f64,
    pub mean_se_v1_x100: Option<f64>,
    pub coverage_v1: Option<f64>,
    pub coverage_v2: Option<f64>,
    pub n_ok: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub setup: SimSetup,
    pub mean_event_rate: f64,
    pub rows: Vec<ResultRow>,
    /// Failed fits per method label.
    pub failures: Vec<(String, usize)>,
    #[serde(skip)]
    pub replicates: Vec<ReplicateOutcome>,
}

impl ScenarioResult {
    pub fn row(&self, method: &str, measure: Measure) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.measure == measure.name())
    }

    /// Header plus one line per method and measure.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("json: {e}")))
    }
}

/// Seed for the bootstrap inside replicate `r`.
fn bootstrap_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed ^ (r as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn run_method(setup: &SimSetup, study: &Study, method: Method, r: usize) -> MethodOutcome {
    let s = &setup.scenario;
    let c = SimSetup::contrast();
    let truth = setup.truth.as_array();
    let opts = FitOptions {
        interaction: s.interaction,
        ..Default::default()
    };
    let mut out = MethodOutcome {
        method,
        measures: None,
        se_v1: [None; 4],
        cover_v1: [None; 4],
        cover_v2: [None; 4],
        error: None,
    };
    let fit = match infer::fit_method(study, method, &opts) {
        Ok(f) => f,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    out.measures = Some(fit.approx(&c));
    if s.sandwich {
        match infer::sandwich_intervals(study, &fit, &c, &SandwichOptions::default(), MpScale::Raw) {
            Ok(v) => {
                for m in Measure::ALL {
                    let iv = v.get(m);
                    out.se_v1[m.index()] = iv.se;
                    out.cover_v1[m.index()] = iv.covers(truth[m.index()]);
                }
            }
            Err(e) => warn!("replicate {r}, {method}: sandwich failed: {e}"),
        }
    }
    if s.bootstrap > 0 {
        match infer::bootstrap_ci(study, method, &opts, s.bootstrap, bootstrap_seed(s.seed, r), &c) {
            Ok(b) => {
                for m in Measure::ALL {
                    out.cover_v2[m.index()] = b.percentile.get(m).covers(truth[m.index()]);
                }
            }
            Err(e) => warn!("replicate {r}, {method}: bootstrap failed: {e}"),
        }
    }
    out
}

/// Runs one replicate: generate, then fit every method.
pub fn run_replicate(setup: &SimSetup, r: usize) -> Result<ReplicateOutcome> {
    let s = &setup.scenario;
    let mut rng = replicate_rng(s.seed, r as u64);
    let study = generate_study(s, (setup.beta1, setup.beta2), setup.v, &mut rng)?;
    let events = study.main().iter().filter(|m| m.event).count();
    let methods = s
        .methods()
        .into_iter()
        .map(|m| run_method(setup, &study, m, r))
        .collect();
    Ok(ReplicateOutcome {
        replicate: r,
        event_rate: events as f64 / study.n1() as f64,
        methods,
    })
}

pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    let setup = prepare(scenario)?;
    info!(
        "scenario: beta1 = {:.5}, beta2 = {:.5}, v = {:.6}, reliability = {:.5}",
        setup.beta1, setup.beta2, setup.v, setup.reliability
    );
    let replicates: Vec<ReplicateOutcome> = (0..scenario.replications)
        .into_par_iter()
        .map(|r| run_replicate(&setup, r))
        .collect::<Result<_>>()?;
    summarize(setup, replicates)
}

/// Aggregates replicate outcomes into the table rows.
pub fn summarize(setup: SimSetup, replicates: Vec<ReplicateOutcome>) -> Result<ScenarioResult> {
    let s = &setup.scenario;
    let total = replicates.len();
    let methods = s.methods();
    let truth = setup.truth.as_array();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, method) in methods.iter().enumerate() {
        let outs: Vec<&MethodOutcome> = replicates.iter().map(|r| &r.methods[mi]).collect();
        let failed = outs.iter().filter(|o| o.measures.is_none()).count();
        failures.push((method.label(), failed));
        if failed as f64 > infer::MAX_FAILURE_PCT / 100.0 * total as f64 {
            return Err(Error::TooManyFailures {
                failed,
                total,
                limit_pct: infer::MAX_FAILURE_PCT,
            });
        }
        for m in Measure::ALL {
            let k = m.index();
            let est: Vec<f64> = outs
                .iter()
                .filter_map(|o| o.measures.as_ref().and_then(|x| m.get(x)))
                .collect();
            let rel: Vec<f64> = est.iter().map(|e| (e - truth[k]) / truth[k]).collect();
            let rate = |flags: Vec<bool>| {
                (!flags.is_empty()).then(|| 100.0 * flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
            };
            let v1: Vec<bool> = outs.iter().filter_map(|o| o.cover_v1[k]).collect();
            let v2: Vec<bool> = outs.iter().filter_map(|o| o.cover_v2[k]).collect();
            let se1: Vec<f64> = outs.iter().filter_map(|o| o.se_v1[k]).collect();
            rows.push(ResultRow {
                method: method.label(),
                measure: m.name().into(),
                truth: truth[k],
                percent_bias: 100.0 * stats::mean(&rel),
                se_x100: 100.0 * stats::sd(&est),
                mean_se_v1_x100: (!se1.is_empty()).then(|| 100.0 * stats::mean(&se1)),
                coverage_v1: rate(v1),
                coverage_v2: rate(v2),
                n_ok: est.len(),
            });
        }
    }
    let mean_event_rate = stats::mean(&replicates.iter().map(|r| r.event_rate).collect::<Vec<_>>());
    Ok(ScenarioResult {
        setup,
        mean_event_rate,
        rows,
        failures,
        replicates,
    })
}
