//! Command-line front end: `fit`, `simulate`, `bias` and `calibrate`.
//!
//! Every subcommand accepts `--config FILE` (TOML). Keys in the file take
//! precedence over the matching flags. Exit status is 0 on success, 2 for
//! configuration or input errors and 3 for numerical failures.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::calibrate::{self, ErrParams, ResidualDiagnostics};
use crate::dataio::{self, Schema, Study, StudyReport};
use crate::error::Error;
use crate::infer::{self, FitOptions, Method, MpScale, SandwichOptions, VarianceEstimate};
use crate::mediate::{self, Contrast, Measure, MediationMeasures, RelBias};
use crate::simulate::{self, Scenario, ScenarioResult};
use crate::stats;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "survmed", version, about = "Mediation analysis for survival outcomes with an error-prone exposure")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate NIE/NDE/TE/MP on a main study plus external validation study.
    Fit(FitArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Tabulate the asymptotic relative bias of the unadjusted estimator.
    Bias(BiasArgs),
    /// Fit the measurement-error model and report diagnostics.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub main: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// TOML file mapping roles to column names.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated methods: unadjusted, orc1, orc2, rrc.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    #[arg(long, allow_hyphen_values = true)]
    pub contrast_a: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub contrast_astar: Option<f64>,
    /// Number of RRC risk-set intervals.
    #[arg(long)]
    pub k: Option<usize>,
    /// Bootstrap replicates (0 = sandwich only).
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated times for exact measures.
    #[arg(long, value_delimiter = ',')]
    pub time_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop the exposure-mediator interaction from the outcome model.
    #[arg(long)]
    pub no_interaction: bool,
    #[arg(long)]
    pub max_followup: Option<f64>,
    /// Build the MP interval on the logit scale.
    #[arg(long)]
    pub mp_logit: bool,
}

/// `fit` settings after merging flags and config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub main: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Inline column mapping; takes precedence over `schema`.
    pub columns: Option<Schema>,
    pub method: Option<Vec<String>>,
    pub contrast_a: Option<f64>,
    pub contrast_astar: Option<f64>,
    /// Covariate profile by name; unlisted covariates use the main-study
    /// median.
    pub covariates_at: BTreeMap<String, f64>,
    pub k: Option<usize>,
    pub bootstrap: Option<usize>,
    pub seed: Option<u64>,
    pub time_grid: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub interaction: Option<bool>,
    pub max_followup: Option<f64>,
    pub mp_logit: Option<bool>,
    pub quad_order: Option<usize>,
}

impl FitConfig {
    fn from_args(a: &FitArgs) -> anyhow::Result<Self> {
        let flags = FitConfig {
            main: a.main.clone(),
            validation: a.validation.clone(),
            schema: a.schema.clone(),
            method: a.method.clone(),
            contrast_a: a.contrast_a,
            contrast_astar: a.contrast_astar,
            k: a.k,
            bootstrap: a.bootstrap,
            seed: a.seed,
            time_grid: a.time_grid.clone(),
            out: a.out.clone(),
            format: a.format,
            interaction: a.no_interaction.then_some(false),
            max_followup: a.max_followup,
            mp_logit: a.mp_logit.then_some(true),
            ..Default::default()
        };
        match &a.config {
            None => Ok(flags),
            Some(path) => Ok(read_toml::<FitConfig>(path)?.over(flags)),
        }
    }

    /// `self` wins wherever it has a value.
    fn over(self, base: FitConfig) -> FitConfig {
        let mut covariates_at = base.covariates_at;
        covariates_at.extend(self.covariates_at);
        FitConfig {
            main: self.main.or(base.main),
            validation: self.validation.or(base.validation),
            schema: self.schema.or(base.schema),
            columns: self.columns.or(base.columns),
            method: self.method.or(base.method),
            contrast_a: self.contrast_a.or(base.contrast_a),
            contrast_astar: self.contrast_astar.or(base.contrast_astar),
            covariates_at,
            k: self.k.or(base.k),
            bootstrap: self.bootstrap.or(base.bootstrap),
            seed: self.seed.or(base.seed),
            time_grid: self.time_grid.or(base.time_grid),
            out: self.out.or(base.out),
            format: self.format.or(base.format),
            interaction: self.interaction.or(base.interaction),
            max_followup: self.max_followup.or(base.max_followup),
            mp_logit: self.mp_logit.or(base.mp_logit),
            quad_order: self.quad_order.or(base.quad_order),
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario TOML; keys override the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n1: Option<usize>,
    #[arg(long)]
    pub n2: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[arg(long)]
    pub gamma1: Option<f64>,
    /// MP reliability index.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Estimate gamma1 and rho from data instead.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub main: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Comma-separated true MP values in (0, 1).
    #[arg(long, value_delimiter = ',')]
    pub mp_grid: Option<Vec<f64>>,
    /// Also write the reliability-index surface over (rho_AM, rho_AA*) here.
    #[arg(long)]
    pub surface: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasConfig {
    pub gamma1: Option<f64>,
    pub rho: Option<f64>,
    pub validation: Option<PathBuf>,
    pub main: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub columns: Option<Schema>,
    pub mp_grid: Option<Vec<f64>>,
    pub surface: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Optional main study, pooled into the mediator fit used for rho.
    #[arg(long)]
    pub main: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Where to write per-subject calibration residuals (CSV).
    #[arg(long)]
    pub residuals: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub validation: Option<PathBuf>,
    pub main: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub columns: Option<Schema>,
    pub residuals: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

fn load_schema(path: Option<&Path>, inline: Option<&Schema>) -> anyhow::Result<Schema> {
    if let Some(s) = inline {
        return Ok(s.clone());
    }
    match path {
        Some(p) => read_toml(p),
        None => Ok(Schema::default()),
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("--{flag} is required")).into())
}

fn write_output(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        None => {
            let mut out = std::io::stdout().lock();
            match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
    }
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn csv_string<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Maps an error chain to an exit status.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_config() { EXIT_CONFIG } else { EXIT_NUMERIC };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_CONFIG;
        }
    }
    EXIT_NUMERIC
}

pub fn run(cli: Cli) -> ExitCode {
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Bias(a) => cmd_bias(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// One row of the results table: a method and an inference kind.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitRow {
    pub method: String,
    pub inference: String,
    pub nie: Option<f64>,
    pub nie_se: Option<f64>,
    pub nie_lower: Option<f64>,
    pub nie_upper: Option<f64>,
    pub nde: Option<f64>,
    pub nde_se: Option<f64>,
    pub nde_lower: Option<f64>,
    pub nde_upper: Option<f64>,
    pub te: Option<f64>,
    pub te_se: Option<f64>,
    pub te_lower: Option<f64>,
    pub te_upper: Option<f64>,
    pub mp: Option<f64>,
    pub mp_se: Option<f64>,
    pub mp_lower: Option<f64>,
    pub mp_upper: Option<f64>,
}

impl FitRow {
    fn new(method: &str, inference: &str, v: &VarianceEstimate) -> Self {
        let g = |m: Measure| v.get(m);
        FitRow {
            method: method.into(),
            inference: inference.into(),
            nie: g(Measure::Nie).estimate,
            nie_se: g(Measure::Nie).se,
            nie_lower: g(Measure::Nie).lower,
            nie_upper: g(Measure::Nie).upper,
            nde: g(Measure::Nde).estimate,
            nde_se: g(Measure::Nde).se,
            nde_lower: g(Measure::Nde).lower,
            nde_upper: g(Measure::Nde).upper,
            te: g(Measure::Te).estimate,
            te_se: g(Measure::Te).se,
            te_lower: g(Measure::Te).lower,
            te_upper: g(Measure::Te).upper,
            mp: g(Measure::Mp).estimate,
            mp_se: g(Measure::Mp).se,
            mp_lower: g(Measure::Mp).lower,
            mp_upper: g(Measure::Mp).upper,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExactRow {
    pub method: String,
    pub time: f64,
    pub cumhaz: f64,
    pub nie: f64,
    pub nde: f64,
    pub te: f64,
    pub mp: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub contrast: Contrast,
    pub covariate_names: Vec<String>,
    pub study: StudyReport,
    pub rows: Vec<FitRow>,
    pub exact: Vec<ExactRow>,
    pub parameters: Vec<MethodParameters>,
}

#[derive(Debug, Serialize)]
pub struct MethodParameters {
    pub method: String,
    pub theta: Vec<f64>,
    pub err: Option<ErrParams>,
    pub bootstrap_failures: Option<usize>,
}

/// Quartile contrast of the calibrated exposure, covariates at medians.
pub fn default_contrast(study: &Study, err: &ErrParams) -> Contrast {
    let calibrated: Vec<f64> = study
        .main()
        .iter()
        .map(|r| err.mean(r.exposure_star, &r.covariates))
        .collect();
    Contrast::new(
        stats::quantile(&calibrated, 0.75),
        stats::quantile(&calibrated, 0.25),
        covariate_medians(study),
    )
}

fn covariate_medians(study: &Study) -> Vec<f64> {
    (0..study.n_covariates())
        .map(|j| stats::median(&study.main().iter().map(|r| r.covariates[j]).collect::<Vec<_>>()))
        .collect()
}

/// Runs the `fit` workflow and returns the report without writing files.
pub fn fit_report(cfg: &FitConfig) -> anyhow::Result<FitReport> {
    let schema = load_schema(cfg.schema.as_deref(), cfg.columns.as_ref())?;
    let main = require(&cfg.main, "main")?;
    let val = require(&cfg.validation, "validation")?;
    let study = dataio::load_study(main, val, &schema, cfg.max_followup)?;
    let k = cfg.k.unwrap_or(4);
    let methods: Vec<Method> = cfg
        .method
        .clone()
        .unwrap_or_else(|| vec!["unadjusted".into(), "orc1".into(), "orc2".into(), "rrc".into()])
        .iter()
        .map(|m| Method::parse(m, k))
        .collect::<Result<_, _>>()?;
    if methods.contains(&Method::Gold) && study.oracle_exposure().is_none() {
        return Err(Error::Config("gold standard needs the true exposure in the main study".into()).into());
    }
    let opts = FitOptions {
        interaction: cfg.interaction.unwrap_or(true),
        ..Default::default()
    };

    let err = calibrate::fit_error_model(&study)?;
    let mut contrast = default_contrast(&study, &err);
    if let Some(a) = cfg.contrast_a {
        contrast.a = a;
    }
    if let Some(a) = cfg.contrast_astar {
        contrast.a_star = a;
    }
    for (name, value) in &cfg.covariates_at {
        let j = study
            .covariate_names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown covariate '{name}' in covariates_at")))?;
        contrast.w[j] = *value;
    }
    if contrast.a == contrast.a_star {
        log::warn!("contrast a = a* = {}; MP is undefined", contrast.a);
    }

    let sandwich_opts = SandwichOptions::default();
    let mp_scale = if cfg.mp_logit.unwrap_or(false) {
        MpScale::Logit
    } else {
        MpScale::Raw
    };
    let b = cfg.bootstrap.unwrap_or(0);
    let seed = cfg.seed.unwrap_or(1);
    let quad = cfg.quad_order.unwrap_or(mediate::DEFAULT_QUAD_ORDER);

    let mut rows = Vec::new();
    let mut exact = Vec::new();
    let mut parameters = Vec::new();
    for method in methods {
        let fit = infer::fit_method(&study, method, &opts).with_context(|| format!("method {method}"))?;
        let label = method.label();
        let v = infer::sandwich_intervals(&study, &fit, &contrast, &sandwich_opts, mp_scale)
            .with_context(|| format!("sandwich variance for {method}"))?;
        rows.push(FitRow::new(&label, "sandwich", &v));
        let mut failures = None;
        if b > 0 {
            let boot = infer::bootstrap_ci(&study, method, &opts, b, seed, &contrast)
                .with_context(|| format!("bootstrap for {method}"))?;
            rows.push(FitRow::new(&label, "bootstrap-wald", &boot.wald));
            rows.push(FitRow::new(&label, "bootstrap-percentile", &boot.percentile));
            failures = Some(boot.failures);
        }
        if let Some(grid) = &cfg.time_grid {
            let bh = fit.baseline()?;
            for (t, m) in mediate::exact_measures_grid(&fit.theta, &bh, &contrast, grid, quad)? {
                exact.push(exact_row(&label, t, crate::coxfit::cumhaz_at(&bh, t)?, &m));
            }
        }
        parameters.push(MethodParameters {
            method: label,
            theta: fit.theta.to_vec(),
            err: fit.err.clone(),
            bootstrap_failures: failures,
        });
    }
    Ok(FitReport {
        contrast,
        covariate_names: study.covariate_names().to_vec(),
        study: dataio::validate_study(&study),
        rows,
        exact,
        parameters,
    })
}

fn exact_row(method: &str, t: f64, cumhaz: f64, m: &MediationMeasures) -> ExactRow {
    ExactRow {
        method: method.into(),
        time: t,
        cumhaz,
        nie: m.nie,
        nde: m.nde,
        te: m.te,
        mp: m.mp,
    }
}

pub fn cmd_fit(args: &FitArgs) -> anyhow::Result<()> {
    let cfg = FitConfig::from_args(args)?;
    let report = fit_report(&cfg)?;
    match cfg.format.unwrap_or_default() {
        Format::Json => write_output(cfg.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n")),
        Format::Csv => {
            write_output(cfg.out.as_deref(), &csv_string(&report.rows)?)?;
            if !report.exact.is_empty() {
                let text = csv_string(&report.exact)?;
                match cfg.out.as_deref() {
                    Some(out) => write_output(Some(&sibling(out, "exact")), &text)?,
                    None => write_output(None, &format!("\n{text}"))?,
                }
            }
            Ok(())
        }
    }
}

/// Merges scenario flags and the scenario file (file keys win).
pub fn scenario_from_args(a: &SimulateArgs) -> anyhow::Result<Scenario> {
    let mut table = toml::Table::new();
    let mut set = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            table.insert(k.into(), v);
        }
    };
    set("replications", a.replications.map(|v| toml::Value::Integer(v as i64)));
    set("seed", a.seed.map(|v| toml::Value::Integer(v as i64)));
    set("n1", a.n1.map(|v| toml::Value::Integer(v as i64)));
    set("n2", a.n2.map(|v| toml::Value::Integer(v as i64)));
    set("rho_aastar", a.rho.map(toml::Value::Float));
    set("k_rrc", a.k.map(|v| toml::Value::Integer(v as i64)));
    set("bootstrap", a.bootstrap.map(|v| toml::Value::Integer(v as i64)));
    if let Some(path) = &a.config {
        let file: toml::Table = read_toml(path)?;
        table.extend(file);
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Scenario::from_toml(&text)?)
}

pub fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let scenario = scenario_from_args(args)?;
    let result = simulate::run_scenario(&scenario)?;
    write_scenario(&result, args.out.as_deref(), args.format.unwrap_or_default())
}

pub fn write_scenario(result: &ScenarioResult, out: Option<&Path>, format: Format) -> anyhow::Result<()> {
    match format {
        Format::Csv => write_output(out, &result.to_csv()?),
        Format::Json => write_output(out, &(result.to_json()? + "\n")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BiasRow {
    pub gamma1: f64,
    pub rho: f64,
    pub mp: f64,
    pub relbias_nie: f64,
    pub relbias_nde: f64,
    pub relbias_te: f64,
    pub relbias_mp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SurfaceRow {
    pub rho_am: f64,
    pub rho_aastar: f64,
    pub rho: f64,
}

/// Theorem-style relative bias over a grid of true MP values.
pub fn bias_table(gamma1: f64, rho: f64, mp_grid: &[f64]) -> anyhow::Result<Vec<BiasRow>> {
    mp_grid
        .iter()
        .map(|&mp| {
            let r: RelBias = mediate::theorem1_relbias(gamma1, rho, mp).map_err(|e| Error::Config(e.to_string()))?;
            Ok(BiasRow {
                gamma1,
                rho,
                mp,
                relbias_nie: r.nie,
                relbias_nde: r.nde,
                relbias_te: r.te,
                relbias_mp: r.mp,
            })
        })
        .collect()
}

/// Reliability index over `rho_AM` in 0.05..0.95 and `rho_AA*` in 0..1.
pub fn reliability_surface() -> anyhow::Result<Vec<SurfaceRow>> {
    let mut rows = Vec::new();
    for i in 1..=19 {
        let rho_am = i as f64 * 0.05;
        for j in 0..=20 {
            let rho_aastar = j as f64 * 0.05;
            rows.push(SurfaceRow {
                rho_am,
                rho_aastar,
                rho: mediate::reliability_index_nocov(rho_aastar, rho_am)?,
            });
        }
    }
    Ok(rows)
}

/// `(gamma1, rho)` estimated from a validation file and optional main file.
fn estimate_gamma_rho(val: &Path, main: Option<&Path>, schema: &Schema) -> anyhow::Result<(f64, f64)> {
    let (err, med) = match main {
        Some(m) => {
            let study = dataio::load_study(m, val, schema, None)?;
            let err = calibrate::fit_error_model(&study)?;
            let med = calibrate::fit_mediator(&study, &err)?;
            (err, med)
        }
        None => {
            let recs = dataio::load_validation(val, schema)?;
            let (err, _) = validation_error_model(&recs, schema)?;
            let med = calibrate::fit_mediator_rows(&[], &recs, &err, &schema.covariates)?;
            (err, med)
        }
    };
    let rho = mediate::reliability_index(med.alpha1, med.sigma_alpha2, err.sigma_gamma2)?;
    Ok((err.gamma1, rho))
}

fn validation_error_model(
    recs: &[dataio::ValidationRecord],
    schema: &Schema,
) -> anyhow::Result<(ErrParams, crate::regress::LinearFit)> {
    if recs.len() < schema.covariates.len() + 3 {
        return Err(Error::InvalidStudy(format!("validation file has only {} rows", recs.len())).into());
    }
    Ok(calibrate::fit_error_model_records(recs, &schema.covariates)?)
}

pub fn cmd_bias(args: &BiasArgs) -> anyhow::Result<()> {
    let flags = BiasConfig {
        gamma1: args.gamma1,
        rho: args.rho,
        validation: args.validation.clone(),
        main: args.main.clone(),
        schema: args.schema.clone(),
        columns: None,
        mp_grid: args.mp_grid.clone(),
        surface: args.surface.clone(),
        out: args.out.clone(),
        format: args.format,
    };
    let cfg = match &args.config {
        None => flags,
        Some(p) => {
            let f: BiasConfig = read_toml(p)?;
            BiasConfig {
                gamma1: f.gamma1.or(flags.gamma1),
                rho: f.rho.or(flags.rho),
                validation: f.validation.or(flags.validation),
                main: f.main.or(flags.main),
                schema: f.schema.or(flags.schema),
                columns: f.columns,
                mp_grid: f.mp_grid.or(flags.mp_grid),
                surface: f.surface.or(flags.surface),
                out: f.out.or(flags.out),
                format: f.format.or(flags.format),
            }
        }
    };
    let (gamma1, rho) = match (cfg.gamma1, cfg.rho, &cfg.validation) {
        (Some(g), Some(r), _) => (g, r),
        (_, _, Some(v)) => {
            let schema = load_schema(cfg.schema.as_deref(), cfg.columns.as_ref())?;
            estimate_gamma_rho(v, cfg.main.as_deref(), &schema)?
        }
        _ => bail!(Error::Config("give --gamma1 and --rho, or a --validation file".into())),
    };
    let grid = cfg
        .mp_grid
        .clone()
        .unwrap_or_else(|| (1..=9).map(|i| i as f64 / 10.0).collect());
    let table = bias_table(gamma1, rho, &grid)?;
    match cfg.format.unwrap_or_default() {
        Format::Csv => write_output(cfg.out.as_deref(), &csv_string(&table)?)?,
        Format::Json => write_output(cfg.out.as_deref(), &(serde_json::to_string_pretty(&table)? + "\n"))?,
    }
    if let Some(path) = &cfg.surface {
        write_output(Some(path), &csv_string(&reliability_surface()?)?)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct CalibrationReport {
    pub err: ErrParams,
    /// Standard errors of `(gamma0, gamma1, gamma2..)`.
    pub coef_se: Vec<f64>,
    pub diagnostics: ResidualDiagnostics,
    pub gamma1: f64,
    pub rho: f64,
    pub n2: usize,
    pub corr_exposure_surrogate: f64,
}

#[derive(Debug, Serialize)]
struct ResidualRow {
    row: usize,
    fitted: f64,
    residual: f64,
}

pub fn calibration_report(cfg: &CalibrateConfig) -> anyhow::Result<(CalibrationReport, Vec<f64>, Vec<f64>)> {
    let schema = load_schema(cfg.schema.as_deref(), cfg.columns.as_ref())?;
    let val = require(&cfg.validation, "validation")?;
    let recs = dataio::load_validation(val, &schema)?;
    let (err, fit) = validation_error_model(&recs, &schema)?;
    let med = match &cfg.main {
        Some(m) => {
            let study = dataio::load_study(m, val, &schema, None)?;
            calibrate::fit_mediator(&study, &err)?
        }
        None => calibrate::fit_mediator_rows(&[], &recs, &err, &schema.covariates)?,
    };
    let rho = mediate::reliability_index(med.alpha1, med.sigma_alpha2, err.sigma_gamma2)?;
    let residuals: Vec<f64> = fit.residuals.iter().copied().collect();
    let truth: Vec<f64> = recs.iter().map(|r| r.exposure_true).collect();
    let fitted: Vec<f64> = truth.iter().zip(&residuals).map(|(a, e)| a - e).collect();
    let star: Vec<f64> = recs.iter().map(|r| r.exposure_star).collect();
    let report = CalibrationReport {
        gamma1: err.gamma1,
        coef_se: fit.coef_se().iter().copied().collect(),
        diagnostics: calibrate::residual_diagnostics(&residuals),
        err,
        rho,
        n2: recs.len(),
        corr_exposure_surrogate: stats::corr(&truth, &star),
    };
    Ok((report, fitted, residuals))
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> anyhow::Result<()> {
    let flags = CalibrateConfig {
        validation: args.validation.clone(),
        main: args.main.clone(),
        schema: args.schema.clone(),
        columns: None,
        residuals: args.residuals.clone(),
        out: args.out.clone(),
        format: args.format,
    };
    let cfg = match &args.config {
        None => flags,
        Some(p) => {
            let f: CalibrateConfig = read_toml(p)?;
            CalibrateConfig {
                validation: f.validation.or(flags.validation),
                main: f.main.or(flags.main),
                schema: f.schema.or(flags.schema),
                columns: f.columns,
                residuals: f.residuals.or(flags.residuals),
                out: f.out.or(flags.out),
                format: f.format.or(flags.format),
            }
        }
    };
    let (report, fitted, residuals) = calibration_report(&cfg)?;
    let text = match cfg.format.unwrap_or_default() {
        Format::Json => serde_json::to_string_pretty(&report)? + "\n",
        Format::Csv => {
            let mut rows = vec![
                ("gamma0".to_string(), report.err.gamma0),
                ("gamma1".to_string(), report.err.gamma1),
            ];
            for (j, g) in report.err.gamma2.iter().enumerate() {
                rows.push((format!("gamma2_{}", j + 1), *g));
            }
            for (j, se) in report.coef_se.iter().enumerate() {
                rows.push((format!("se_{j}"), *se));
            }
            rows.push(("sigma_gamma2".into(), report.err.sigma_gamma2));
            rows.push(("rho".into(), report.rho));
            rows.push(("skewness".into(), report.diagnostics.skewness));
            rows.push(("excess_kurtosis".into(), report.diagnostics.excess_kurtosis));
            rows.push(("non_normal".into(), report.diagnostics.non_normal as u8 as f64));
            rows.push(("corr_exposure_surrogate".into(), report.corr_exposure_surrogate));
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["quantity", "value"])?;
            for (k, v) in rows {
                w.write_record([k, v.to_string()])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
    };
    write_output(cfg.out.as_deref(), &text)?;
    if let Some(path) = &cfg.residuals {
        let rows: Vec<ResidualRow> = fitted
            .iter()
            .zip(&residuals)
            .enumerate()
            .map(|(i, (f, e))| ResidualRow {
                row: i + 1,
                fitted: *f,
                residual: *e,
            })
            .collect();
        write_output(Some(path), &csv_string(&rows)?)?;
    }
    if report.diagnostics.non_normal {
        eprintln!(
            "warning: calibration residual skewness {:.3} exceeds {}",
            report.diagnostics.skewness,
            calibrate::SKEW_WARN
        );
    }
    Ok(())
}

/// Parses the arguments of `survmed` from an iterator (for tests).
pub fn parse_from<I, T>(args: I) -> anyhow::Result<Cli>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Cli::try_parse_from(args).map_err(|e| anyhow!(Error::Config(e.to_string())))
}
