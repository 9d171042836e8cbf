//! Main-study / external-validation-study records and their CSV ingestion.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Event rate below which the outcome is flagged as rare.
pub const RARE_OUTCOME_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainRecord {
    pub t_obs: f64,
    pub event: bool,
    pub mediator: f64,
    pub exposure_star: f64,
    pub covariates: Vec<f64>,
}

/// External validation record: carries the true exposure but no event flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub t_obs: f64,
    pub mediator: f64,
    pub exposure_star: f64,
    pub exposure_true: f64,
    pub covariates: Vec<f64>,
}

/// A main study paired with its external validation study.
///
/// Immutable once built; the membership indicator is implicit in which list
/// a record lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    main: Vec<MainRecord>,
    validation: Vec<ValidationRecord>,
    covariate_names: Vec<String>,
    max_followup: f64,
    /// Latent true exposure of the main-study subjects. Only simulated studies
    /// carry it; it feeds the gold-standard fit.
    oracle_exposure: Option<Vec<f64>>,
}

impl Study {
    /// Validates and assembles a study. `max_followup` defaults to the largest
    /// observed main-study time.
    pub fn new(
        main: Vec<MainRecord>,
        validation: Vec<ValidationRecord>,
        covariate_names: Vec<String>,
        max_followup: Option<f64>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        if main.is_empty() {
            return Err(Error::InvalidStudy("main study is empty".into()));
        }
        if validation.len() < p + 3 {
            return Err(Error::InvalidStudy(format!(
                "validation study has {} records, need at least {} for {} covariates",
                validation.len(),
                p + 3,
                p
            )));
        }
        for (i, r) in main.iter().enumerate() {
            check_record(i, "main", r.t_obs, &r.covariates, p)?;
            if !(r.mediator.is_finite() && r.exposure_star.is_finite()) {
                return Err(Error::InvalidStudy(format!("main row {}: non-finite value", i + 1)));
            }
        }
        for (i, r) in validation.iter().enumerate() {
            check_record(i, "validation", r.t_obs, &r.covariates, p)?;
            if !(r.mediator.is_finite() && r.exposure_star.is_finite() && r.exposure_true.is_finite())
            {
                return Err(Error::InvalidStudy(format!(
                    "validation row {}: non-finite value",
                    i + 1
                )));
            }
        }
        let t_max = main.iter().map(|r| r.t_obs).fold(0.0, f64::max);
        let max_followup = match max_followup {
            Some(t) if t < t_max => {
                return Err(Error::InvalidStudy(format!(
                    "main-study time {t_max} exceeds maximum follow-up {t}"
                )))
            }
            Some(t) => t,
            None => t_max,
        };
        Ok(Study {
            main,
            validation,
            covariate_names,
            max_followup,
            oracle_exposure: None,
        })
    }

    /// Attaches the latent main-study exposure (simulation only).
    pub fn with_oracle_exposure(mut self, exposure: Vec<f64>) -> Result<Self> {
        if exposure.len() != self.main.len() {
            return Err(Error::Dimension {
                expected: self.main.len(),
                got: exposure.len(),
            });
        }
        self.oracle_exposure = Some(exposure);
        Ok(self)
    }

    pub fn main(&self) -> &[MainRecord] {
        &self.main
    }

    pub fn validation(&self) -> &[ValidationRecord] {
        &self.validation
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n1(&self) -> usize {
        self.main.len()
    }

    pub fn n2(&self) -> usize {
        self.validation.len()
    }

    pub fn n(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn max_followup(&self) -> f64 {
        self.max_followup
    }

    /// Largest observed validation time.
    pub fn validation_max_time(&self) -> f64 {
        self.validation.iter().map(|r| r.t_obs).fold(0.0, f64::max)
    }

    pub fn oracle_exposure(&self) -> Option<&[f64]> {
        self.oracle_exposure.as_deref()
    }

    /// Resamples rows by index, keeping the oracle exposure aligned.
    pub fn resample(&self, main_idx: &[usize], val_idx: &[usize]) -> Study {
        Study {
            main: main_idx.iter().map(|&i| self.main[i].clone()).collect(),
            validation: val_idx.iter().map(|&i| self.validation[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            max_followup: self.max_followup,
            oracle_exposure: self
                .oracle_exposure
                .as_ref()
                .map(|a| main_idx.iter().map(|&i| a[i]).collect()),
        }
    }

    /// Copy of the study with every surrogate replaced by the true exposure.
    /// Needs the oracle exposure for the main rows.
    pub fn with_surrogate_replaced_by_truth(&self) -> Result<Study> {
        let truth = self
            .oracle_exposure
            .as_ref()
            .ok_or_else(|| Error::InvalidStudy("study carries no oracle exposure".into()))?;
        let mut s = self.clone();
        for (r, &a) in s.main.iter_mut().zip(truth) {
            r.exposure_star = a;
        }
        for r in s.validation.iter_mut() {
            r.exposure_star = r.exposure_true;
        }
        Ok(s)
    }
}

fn check_record(i: usize, which: &str, t: f64, w: &[f64], p: usize) -> Result<()> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::InvalidStudy(format!(
            "{which} row {}: time {t} is not a finite non-negative number",
            i + 1
        )));
    }
    if w.len() != p {
        return Err(Error::InvalidStudy(format!(
            "{which} row {}: {} covariates, expected {p}",
            i + 1,
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidStudy(format!("{which} row {}: non-finite covariate", i + 1)));
    }
    Ok(())
}

/// Column names for both files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub time: String,
    pub event: String,
    pub mediator: String,
    pub exposure_star: String,
    pub exposure_true: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            time: "time".into(),
            event: "event".into(),
            mediator: "mediator".into(),
            exposure_star: "exposure_star".into(),
            exposure_true: "exposure".into(),
            covariates: Vec::new(),
        }
    }
}

impl Schema {
    fn check_distinct(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for name in [
            &self.time,
            &self.event,
            &self.mediator,
            &self.exposure_star,
            &self.exposure_true,
        ]
        .into_iter()
        .chain(self.covariates.iter())
        {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("schema names column '{name}' twice")));
            }
        }
        Ok(())
    }
}

struct Table {
    path: PathBuf,
    index: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let mut index = HashMap::new();
        for (j, h) in headers.iter().enumerate() {
            if index.insert(h.to_string(), j).is_some() {
                return Err(Error::Schema(format!(
                    "{}: duplicate column '{h}'",
                    path.display()
                )));
            }
        }
        let rows = rdr
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(csv_err)?;
        Ok(Table {
            path: path.to_path_buf(),
            index,
            rows,
        })
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn column(&self, name: &str, what: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| {
            Error::Schema(format!(
                "{} schema incomplete: missing {what} column '{name}'",
                what_file(what)
            ))
        })
    }

    fn number(&self, row: usize, col: usize, name: &str) -> Result<f64> {
        let raw = self.rows[row].get(col).unwrap_or("");
        let cell_err = |message: String| Error::Cell {
            path: self.path.clone(),
            row: row + 1,
            message,
        };
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            return Err(cell_err(format!("missing value in column '{name}'")));
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| cell_err(format!("non-numeric value '{raw}' in column '{name}'")))?;
        if !v.is_finite() {
            return Err(cell_err(format!("non-finite value in column '{name}'")));
        }
        Ok(v)
    }
}

fn what_file(what: &str) -> &'static str {
    if what.starts_with("validation") {
        "validation"
    } else {
        "main"
    }
}

/// Reads the main and validation CSV files. Records keep file order.
pub fn load_study(
    main_path: &Path,
    validation_path: &Path,
    schema: &Schema,
    max_followup: Option<f64>,
) -> Result<Study> {
    schema.check_distinct()?;
    let main_tab = Table::read(main_path)?;
    let val_tab = Table::read(validation_path)?;

    let t = main_tab.column(&schema.time, "main time")?;
    let d = main_tab.column(&schema.event, "main event")?;
    let m = main_tab.column(&schema.mediator, "main mediator")?;
    let s = main_tab.column(&schema.exposure_star, "main surrogate exposure")?;
    let w: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| main_tab.column(c, "main covariate"))
        .collect::<Result<_>>()?;

    let mut main = Vec::with_capacity(main_tab.rows.len());
    for i in 0..main_tab.rows.len() {
        let ev = main_tab.number(i, d, &schema.event)?;
        let event = if ev == 0.0 {
            false
        } else if ev == 1.0 {
            true
        } else {
            return Err(Error::Cell {
                path: main_tab.path.clone(),
                row: i + 1,
                message: format!("event value {ev} is not 0 or 1"),
            });
        };
        let t_obs = main_tab.number(i, t, &schema.time)?;
        if t_obs < 0.0 {
            return Err(Error::Cell {
                path: main_tab.path.clone(),
                row: i + 1,
                message: format!("negative time {t_obs}"),
            });
        }
        main.push(MainRecord {
            t_obs,
            event,
            mediator: main_tab.number(i, m, &schema.mediator)?,
            exposure_star: main_tab.number(i, s, &schema.exposure_star)?,
            covariates: w
                .iter()
                .zip(&schema.covariates)
                .map(|(&j, name)| main_tab.number(i, j, name))
                .collect::<Result<_>>()?,
        });
    }

    let validation = parse_validation(&val_tab, schema)?;
    Study::new(main, validation, schema.covariates.clone(), max_followup)
}

/// Reads only the validation CSV file.
pub fn load_validation(validation_path: &Path, schema: &Schema) -> Result<Vec<ValidationRecord>> {
    schema.check_distinct()?;
    parse_validation(&Table::read(validation_path)?, schema)
}

fn parse_validation(val_tab: &Table, schema: &Schema) -> Result<Vec<ValidationRecord>> {
    let vt = val_tab.column(&schema.time, "validation time")?;
    let vm = val_tab.column(&schema.mediator, "validation mediator")?;
    let vs = val_tab.column(&schema.exposure_star, "validation surrogate exposure")?;
    let va = val_tab.column(&schema.exposure_true, "validation true exposure")?;
    let vw: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| val_tab.column(c, "validation covariate"))
        .collect::<Result<_>>()?;
    if val_tab.has(&schema.event) {
        warn!(
            "{}: ignoring event column '{}' in the external validation study",
            val_tab.path.display(),
            schema.event
        );
    }

    let mut validation = Vec::with_capacity(val_tab.rows.len());
    for i in 0..val_tab.rows.len() {
        let t_obs = val_tab.number(i, vt, &schema.time)?;
        if t_obs < 0.0 {
            return Err(Error::Cell {
                path: val_tab.path.clone(),
                row: i + 1,
                message: format!("negative time {t_obs}"),
            });
        }
        validation.push(ValidationRecord {
            t_obs,
            mediator: val_tab.number(i, vm, &schema.mediator)?,
            exposure_star: val_tab.number(i, vs, &schema.exposure_star)?,
            exposure_true: val_tab.number(i, va, &schema.exposure_true)?,
            covariates: vw
                .iter()
                .zip(&schema.covariates)
                .map(|(&j, name)| val_tab.number(i, j, name))
                .collect::<Result<_>>()?,
        });
    }
    Ok(validation)
}

/// Writes both studies as CSV using the schema's column names.
pub fn write_study(
    study: &Study,
    main_path: &Path,
    validation_path: &Path,
    schema: &Schema,
) -> Result<()> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| Error::Csv {
            path: path.clone(),
            message: e.to_string(),
        }
    };

    let mut wtr = csv::Writer::from_path(main_path).map_err(io_err(main_path))?;
    let mut header = vec![
        schema.time.clone(),
        schema.event.clone(),
        schema.mediator.clone(),
        schema.exposure_star.clone(),
    ];
    header.extend(schema.covariates.iter().cloned());
    wtr.write_record(&header).map_err(io_err(main_path))?;
    for r in study.main() {
        let mut row = vec![
            r.t_obs.to_string(),
            if r.event { "1".into() } else { "0".into() },
            r.mediator.to_string(),
            r.exposure_star.to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(io_err(main_path))?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: main_path.to_path_buf(),
        source,
    })?;

    let mut wtr = csv::Writer::from_path(validation_path).map_err(io_err(validation_path))?;
    let mut header = vec![
        schema.time.clone(),
        schema.mediator.clone(),
        schema.exposure_star.clone(),
        schema.exposure_true.clone(),
    ];
    header.extend(schema.covariates.iter().cloned());
    wtr.write_record(&header).map_err(io_err(validation_path))?;
    for r in study.validation() {
        let mut row = vec![
            r.t_obs.to_string(),
            r.mediator.to_string(),
            r.exposure_star.to_string(),
            r.exposure_true.to_string(),
        ];
        row.extend(r.covariates.iter().map(|v| v.to_string()));
        wtr.write_record(&row).map_err(io_err(validation_path))?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: validation_path.to_path_buf(),
        source,
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ColumnSummary {
    pub study: &'static str,
    pub column: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub n1: usize,
    pub n2: usize,
    pub events: usize,
    pub event_rate: f64,
    pub rare_outcome: bool,
    pub max_followup: f64,
    /// Largest validation time; main-study times beyond it fall in the last
    /// risk-set interval.
    pub validation_max_time: f64,
    pub main_beyond_validation: usize,
    pub corr_exposure_surrogate: f64,
    pub columns: Vec<ColumnSummary>,
}

pub fn validate_study(study: &Study) -> StudyReport {
    let events = study.main().iter().filter(|r| r.event).count();
    let event_rate = events as f64 / study.n1() as f64;
    let tv = study.validation_max_time();

    let mut columns = Vec::new();
    let mut push = |which: &'static str, name: &str, xs: Vec<f64>| {
        columns.push(ColumnSummary {
            study: which,
            column: name.to_string(),
            mean: stats::mean(&xs),
            sd: stats::sd(&xs),
        });
    };
    let main = study.main();
    push("main", "time", main.iter().map(|r| r.t_obs).collect());
    push("main", "mediator", main.iter().map(|r| r.mediator).collect());
    push("main", "exposure_star", main.iter().map(|r| r.exposure_star).collect());
    let val = study.validation();
    push("validation", "time", val.iter().map(|r| r.t_obs).collect());
    push("validation", "mediator", val.iter().map(|r| r.mediator).collect());
    push("validation", "exposure_star", val.iter().map(|r| r.exposure_star).collect());
    push("validation", "exposure", val.iter().map(|r| r.exposure_true).collect());
    for (j, name) in study.covariate_names().iter().enumerate() {
        push("main", name, main.iter().map(|r| r.covariates[j]).collect());
        push("validation", name, val.iter().map(|r| r.covariates[j]).collect());
    }

    let a: Vec<f64> = val.iter().map(|r| r.exposure_true).collect();
    let s: Vec<f64> = val.iter().map(|r| r.exposure_star).collect();

    StudyReport {
        n1: study.n1(),
        n2: study.n2(),
        events,
        event_rate,
        rare_outcome: event_rate < RARE_OUTCOME_RATE,
        max_followup: study.max_followup(),
        validation_max_time: tv,
        main_beyond_validation: main.iter().filter(|r| r.t_obs > tv).count(),
        corr_exposure_surrogate: stats::corr(&a, &s),
        columns,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn schema() -> Schema {
        Schema {
            time: "t".into(),
            event: "d".into(),
            mediator: "m".into(),
            exposure_star: "astar".into(),
            exposure_true: "a".into(),
            covariates: vec!["w".into()],
        }
    }

    const VAL4: &str = "t,m,astar,a,w\n1,0.1,0.2,0.3,1\n2,0.2,0.1,0.0,0\n3,0.5,0.4,0.6,1\n4,0.3,0.9,0.8,0\n";

    #[test]
    fn parses_small_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.csv", "t,d,m,astar,w\n1.5,1,0.1,0.2,1\n2,0,0.3,-0.1,0\n3,1,0.0,0.5,1\n");
        let v = write(dir.path(), "v.csv", VAL4);
        let study = load_study(&m, &v, &schema(), None).unwrap();
        assert_eq!(study.n1(), 3);
        assert_eq!(study.n2(), 4);
        assert_eq!(study.max_followup(), 3.0);
        assert!(study.main()[0].event && !study.main()[1].event);
        assert_eq!(study.validation()[2].exposure_true, 0.6);
    }

    #[test]
    fn validation_without_true_exposure_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.csv", "t,d,m,astar,w\n1,1,0.1,0.2,1\n");
        let v = write(dir.path(), "v.csv", "t,m,astar,w\n1,0.1,0.2,1\n");
        let err = load_study(&m, &v, &schema(), None).unwrap_err();
        assert!(err.to_string().contains("validation schema incomplete"), "{err}");
    }

    #[test]
    fn bad_event_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(
            dir.path(),
            "m.csv",
            "t,d,m,astar,w\n1,1,0,0,0\n1,0,0,0,0\n1,1,0,0,0\n1,0,0,0,0\n1,2,0,0,0\n",
        );
        let v = write(dir.path(), "v.csv", VAL4);
        let err = load_study(&m, &v, &schema(), None).unwrap_err();
        match err {
            Error::Cell { row, .. } => assert_eq!(row, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_nonnumeric_cells_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", VAL4);
        let m = write(dir.path(), "m.csv", "t,d,m,astar,w\n1,1,,0.2,1\n");
        assert!(matches!(load_study(&m, &v, &schema(), None), Err(Error::Cell { row: 1, .. })));
        let m = write(dir.path(), "m2.csv", "t,d,m,astar,w\n1,1,abc,0.2,1\n");
        let err = load_study(&m, &v, &schema(), None).unwrap_err();
        assert!(err.to_string().contains("non-numeric"));
    }

    #[test]
    fn missing_file_and_duplicate_columns() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(dir.path(), "v.csv", VAL4);
        let err = load_study(&dir.path().join("nope.csv"), &v, &schema(), None).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
        let m = write(dir.path(), "m.csv", "t,d,m,astar,w,w\n1,1,0,0,0,0\n");
        assert!(matches!(load_study(&m, &v, &schema(), None), Err(Error::Schema(_))));
    }

    #[test]
    fn validation_event_column_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let m = write(dir.path(), "m.csv", "t,d,m,astar,w\n1,1,0.1,0.2,1\n");
        let v = write(
            dir.path(),
            "v.csv",
            "t,d,m,astar,a,w\n1,1,0.1,0.2,0.3,1\n2,0,0.2,0.1,0.0,0\n3,1,0.5,0.4,0.6,1\n4,0,0.3,0.9,0.8,0\n",
        );
        let study = load_study(&m, &v, &schema(), None).unwrap();
        assert_eq!(study.n2(), 4);
    }

    #[test]
    fn report_flags_and_correlation() {
        let main: Vec<MainRecord> = (0..100)
            .map(|i| MainRecord {
                t_obs: 1.0 + i as f64,
                event: i % 20 == 0,
                mediator: i as f64,
                exposure_star: (i % 7) as f64,
                covariates: vec![],
            })
            .collect();
        let validation: Vec<ValidationRecord> = (0..10)
            .map(|i| ValidationRecord {
                t_obs: i as f64,
                mediator: 0.0,
                exposure_star: i as f64 * 0.3,
                exposure_true: i as f64 * 0.3,
                covariates: vec![],
            })
            .collect();
        let study = Study::new(main, validation, vec![], None).unwrap();
        let before = study.clone();
        let rep = validate_study(&study);
        assert_eq!(study, before);
        assert_eq!(rep.events, 5);
        assert!(rep.rare_outcome);
        assert!((rep.corr_exposure_surrogate - 1.0).abs() < 1e-12);
        assert_eq!(rep.main_beyond_validation, 91);
    }

    #[test]
    fn study_invariants() {
        let val = |n: usize| -> Vec<ValidationRecord> {
            (0..n)
                .map(|i| ValidationRecord {
                    t_obs: 1.0,
                    mediator: 0.0,
                    exposure_star: i as f64,
                    exposure_true: 0.0,
                    covariates: vec![0.0],
                })
                .collect()
        };
        let rec = MainRecord {
            t_obs: 1.0,
            event: true,
            mediator: 0.0,
            exposure_star: 0.0,
            covariates: vec![0.0],
        };
        let names = vec!["w".to_string()];
        assert!(Study::new(vec![], val(4), names.clone(), None).is_err());
        assert!(Study::new(vec![rec.clone()], val(3), names.clone(), None).is_err());
        assert!(Study::new(vec![rec.clone()], val(4), names.clone(), Some(0.5)).is_err());
        let mut bad = rec.clone();
        bad.covariates = vec![];
        assert!(Study::new(vec![bad], val(4), names.clone(), None).is_err());
        assert!(Study::new(vec![rec], val(4), names, Some(2.0)).is_ok());
    }
}
