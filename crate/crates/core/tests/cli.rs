//! End-to-end tests of the `survmed` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use survmed::dataio::{self, Schema, Study};
use survmed::mediate;
use survmed::simulate::{self, replicate_rng, Scenario};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_survmed"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn survmed")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn schema() -> Schema {
    Schema {
        covariates: vec!["w".into()],
        ..Schema::default()
    }
}

fn sim_study(n1: usize, n2: usize, rho: f64, r: u64) -> Study {
    let scenario = Scenario {
        n1,
        n2,
        rho_aastar: rho,
        event_rate_target: 0.1,
        ..Scenario::default()
    };
    let setup = simulate::prepare(&scenario).unwrap();
    let mut rng = replicate_rng(scenario.seed, r);
    simulate::generate_study(&scenario, (setup.beta1, setup.beta2), setup.v, &mut rng).unwrap()
}

struct Files {
    _dir: tempfile::TempDir,
    root: PathBuf,
    main: PathBuf,
    val: PathBuf,
    schema: PathBuf,
}

fn write(study: &Study) -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (main, val, schema_path) = (root.join("main.csv"), root.join("val.csv"), root.join("schema.toml"));
    dataio::write_study(study, &main, &val, &schema()).unwrap();
    std::fs::write(&schema_path, toml::to_string(&schema()).unwrap()).unwrap();
    Files {
        _dir: dir,
        root,
        main,
        val,
        schema: schema_path,
    }
}

fn read_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn missing_validation_file_is_a_config_error_naming_the_path() {
    let f = write(&sim_study(500, 50, 0.6, 0));
    let missing = f.root.join("nope.csv");
    let out = run(&["fit", "--main", s(&f.main), "--validation", s(&missing), "--schema", s(&f.schema)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn unknown_flag_is_a_config_error() {
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn undersized_risk_set_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (main, val) = (dir.path().join("main.csv"), dir.path().join("val.csv"));
    let mut m = String::from("time,event,mediator,exposure_star\n");
    for i in 0..30 {
        let x = (i * 7 % 11) as f64 / 11.0;
        m.push_str(&format!("{},{},{},{x}\n", 1 + i % 12, u8::from(i % 3 == 0), (i * 5 % 13) as f64 / 13.0));
    }
    let mut v = String::from("time,mediator,exposure_star,exposure\n");
    for i in 0..12 {
        let x = (i * 7 % 11) as f64 / 11.0;
        v.push_str(&format!("{},{},{x},{}\n", i + 1, (i * 5 % 13) as f64 / 13.0, x + (i % 4) as f64 / 8.0));
    }
    std::fs::write(&main, m).unwrap();
    std::fs::write(&val, v).unwrap();
    let out = run(&["fit", "--main", s(&main), "--validation", s(&val), "--method", "rrc", "--k", "5"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("smaller K"));
}

#[test]
fn no_error_study_gives_identical_estimates_across_methods() {
    let f = write(&sim_study(3000, 200, 0.6, 2).with_surrogate_replaced_by_truth().unwrap());
    let out = run(&["fit", "--main", s(&f.main), "--validation", s(&f.val), "--schema", s(&f.schema)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 4);
    for name in ["nie", "nde", "te", "mp"] {
        let j = col(&h, name);
        let base: f64 = rows[0][j].parse().unwrap();
        for r in &rows[1..] {
            let v: f64 = r[j].parse().unwrap();
            assert!((v - base).abs() < 1e-6, "{name}: {v} vs {base}");
        }
    }
}

#[test]
fn fit_json_and_csv_agree_and_time_grid_is_written() {
    let f = write(&sim_study(3000, 200, 0.6, 3));
    let csv_out = f.root.join("fit.csv");
    let common = [
        "fit", "--main", s(&f.main), "--validation", s(&f.val), "--schema", s(&f.schema), "--time-grid", "10,30,45",
    ];
    let out = bin().args(common).args(["--out", s(&csv_out)]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let exact = std::fs::read_to_string(f.root.join("fit_exact.csv")).unwrap();
    assert_eq!(read_csv(&exact).1.len(), 4 * 3);

    let json = bin().args(common).args(["--format", "json"]).output().unwrap();
    assert!(json.status.success());
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let (h, rows) = read_csv(&std::fs::read_to_string(&csv_out).unwrap());
    for (i, r) in rows.iter().enumerate() {
        for name in ["nie", "nie_se", "nde", "nde_se", "te", "te_se", "mp", "mp_se"] {
            let a: f64 = r[col(&h, name)].parse().unwrap();
            let b = v["rows"][i][name].as_f64().unwrap();
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn config_file_overrides_flags() {
    let f = write(&sim_study(2000, 150, 0.6, 4));
    let cfg = f.root.join("fit.toml");
    std::fs::write(&cfg, "method = [\"orc1\"]\n").unwrap();
    let out = run(&[
        "fit", "--main", s(&f.main), "--validation", s(&f.val), "--schema", s(&f.schema), "--method", "unadjusted",
        "--config", s(&cfg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (_, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "O1");
}

#[test]
fn bootstrap_rows_are_emitted() {
    let f = write(&sim_study(1500, 120, 0.6, 5));
    let out = run(&[
        "fit", "--main", s(&f.main), "--validation", s(&f.val), "--schema", s(&f.schema), "--method", "orc1",
        "--bootstrap", "100", "--seed", "9",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    let kinds: Vec<&str> = rows.iter().map(|r| r[col(&h, "inference")].as_str()).collect();
    assert_eq!(kinds, ["sandwich", "bootstrap-wald", "bootstrap-percentile"]);
}

#[test]
fn bias_table_examples() {
    let out = run(&["bias", "--gamma1", "1", "--rho", "0"]);
    assert!(out.status.success());
    let (h, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(rows.len(), 9);
    for r in &rows {
        for name in ["relbias_nie", "relbias_nde", "relbias_te", "relbias_mp"] {
            assert_eq!(r[col(&h, name)].parse::<f64>().unwrap(), 0.0);
        }
    }

    let out = run(&["bias", "--gamma1", "0.58", "--rho", "0.015", "--mp-grid", "0.4"]);
    let (h, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    let want = mediate::theorem1_relbias(0.58, 0.015, 0.4).unwrap();
    let got = |n: &str| rows[0][col(&h, n)].parse::<f64>().unwrap();
    assert_eq!(got("relbias_nie"), want.nie);
    assert_eq!(got("relbias_nde"), want.nde);
    assert_eq!(got("relbias_mp"), want.mp);
}

#[test]
fn bias_rejects_mp_outside_unit_interval() {
    assert_eq!(run(&["bias", "--gamma1", "0.5", "--rho", "0.1", "--mp-grid", "1.2"]).status.code(), Some(2));
}

#[test]
fn reliability_surface_respects_bound() {
    let dir = tempfile::tempdir().unwrap();
    let surf = dir.path().join("surface.csv");
    assert!(run(&["bias", "--gamma1", "0.5", "--rho", "0.1", "--surface", s(&surf)]).status.success());
    let (h, rows) = read_csv(&std::fs::read_to_string(&surf).unwrap());
    let (am, rho) = (col(&h, "rho_am"), col(&h, "rho"));
    let at_02: Vec<f64> = rows
        .iter()
        .filter(|r| (r[am].parse::<f64>().unwrap() - 0.2).abs() < 1e-9)
        .map(|r| r[rho].parse().unwrap())
        .collect();
    assert_eq!(at_02.len(), 21);
    assert!(at_02.iter().all(|&v| (0.0..=0.04 + 1e-12).contains(&v)));
}

#[test]
fn bias_from_validation_data() {
    let f = write(&sim_study(2000, 400, 0.6, 6));
    let out = run(&["bias", "--validation", s(&f.val), "--main", s(&f.main), "--schema", s(&f.schema)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (h, rows) = read_csv(&String::from_utf8(out.stdout).unwrap());
    let g: f64 = rows[0][col(&h, "gamma1")].parse().unwrap();
    assert!(g > 0.3 && g < 0.9);
}

#[test]
fn calibrate_identity_surrogate() {
    let f = write(&sim_study(500, 300, 0.6, 7).with_surrogate_replaced_by_truth().unwrap());
    let out = run(&["calibrate", "--validation", s(&f.val), "--schema", s(&f.schema), "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["err"]["gamma0"].as_f64().unwrap().abs() < 1e-10);
    assert!((v["err"]["gamma1"].as_f64().unwrap() - 1.0).abs() < 1e-10);
    assert!(v["err"]["gamma2"][0].as_f64().unwrap().abs() < 1e-10);
    assert!(v["rho"].as_f64().unwrap().abs() < 1e-12);
}

#[test]
fn calibrate_recovers_generator_slope_and_writes_residuals() {
    let f = write(&sim_study(10, 10_000, 0.6, 8));
    let res = f.root.join("resid.csv");
    let out = run(&[
        "calibrate", "--validation", s(&f.val), "--schema", s(&f.schema), "--format", "json", "--residuals", s(&res),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let want = simulate::implied_gamma(0.6).gamma1;
    assert!((v["gamma1"].as_f64().unwrap() - want).abs() < 0.02);
    assert_eq!(v["coef_se"].as_array().unwrap().len(), 3);
    assert!(!v["diagnostics"]["non_normal"].as_bool().unwrap());
    assert_eq!(read_csv(&std::fs::read_to_string(&res).unwrap()).1.len(), 10_000);
}

#[test]
fn calibrate_flags_strongly_skewed_residuals() {
    // exponential errors have skewness 2
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.csv");
    let mut text = String::from("time,mediator,exposure_star,exposure\n");
    let mut u = 0.5f64;
    for i in 0..2000 {
        u = (u * 9301.0 + 49297.0) % 233280.0;
        let e = -(1.0 - u / 233280.0).ln();
        let x = (i % 17) as f64 / 17.0;
        text.push_str(&format!("1,0,{x},{}\n", 0.5 * x + e));
    }
    std::fs::write(&val, text).unwrap();
    let out = run(&["calibrate", "--validation", s(&val), "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["diagnostics"]["skewness"].as_f64().unwrap() > 1.0);
    assert!(v["diagnostics"]["non_normal"].as_bool().unwrap());
    assert!(String::from_utf8_lossy(&out.stderr).contains("skewness"));
}

#[test]
fn simulate_is_deterministic_and_rejects_zero_replications() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let args = ["simulate", "--n1", "1500", "--n2", "150", "--replications", "3", "--seed", "11", "--out"];
    assert!(bin().args(args).arg(&a).status().unwrap().success());
    assert!(bin().args(args).arg(&b).status().unwrap().success());
    let ta = std::fs::read_to_string(&a).unwrap();
    assert_eq!(ta, std::fs::read_to_string(&b).unwrap());
    let methods: Vec<String> = read_csv(&ta).1.iter().map(|r| r[0].clone()).collect();
    for m in ["U", "G", "O1", "O2", "R(K=4)"] {
        assert!(methods.iter().any(|x| x == m));
    }
    assert_eq!(run(&["simulate", "--replications", "0"]).status.code(), Some(2));
}

#[test]
fn simulate_config_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sc.toml");
    std::fs::write(&cfg, "replications = 2\nn1 = 1200\nn2 = 120\nk_sweep = [2]\nsandwich = false\n").unwrap();
    let out = run(&["simulate", "--replications", "50", "--config", s(&cfg), "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["setup"]["scenario"]["replications"], 2);
    assert!(v["rows"].as_array().unwrap().iter().any(|r| r["method"] == "R(K=2)"));
}
