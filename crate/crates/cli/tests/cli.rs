use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eqalloc::population::{
    save_population, FrameFormat, Psu, PsuStratum, SingleStratum, SingleSubpop, SsuStratum,
    TwoStageSubpop,
};
use eqalloc::{Population, SingleStagePopulation, TwoStagePopulation};
use serde_json::Value;
use tempfile::TempDir;

fn eqalloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqalloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn save(dir: &TempDir, name: &str, pop: Population) -> PathBuf {
    let path = dir.path().join(name);
    let format = FrameFormat::from_path(&path).unwrap();
    save_population(&pop, &path, format).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two identical subpopulations with `N = 100`, `S = 10`, `t = 1000`. At
/// `n = 20` the matrix is `[[0.04, 0.05], [0.05, 0.04]]`, so `λ = 0.09`.
fn symmetric_frame(dir: &TempDir) -> PathBuf {
    let sub = SingleSubpop {
        total: 1000.0,
        strata: vec![SingleStratum { size: 100, sd: 10.0, units: None }],
    };
    let pop = SingleStagePopulation { subpopulations: vec![sub.clone(), sub] };
    save(dir, "symmetric.json", Population::SingleStage(pop))
}

fn psu(values: &[f64]) -> Psu {
    Psu::from_ssu_strata(None, vec![SsuStratum::from_units(values.to_vec())]).unwrap()
}

/// Every PSU has the same total, so `D² = 0` and `γ < 0` in subpop 1.
fn flat_totals_frame(dir: &TempDir) -> PathBuf {
    let good = PsuStratum::from_psus(vec![
        psu(&[1.0, 2.0, 3.0]),
        psu(&[10.0, 12.0, 9.0]),
        psu(&[4.0, 4.0, 5.0]),
    ]);
    let flat = PsuStratum::from_psus(vec![
        psu(&[1.0, 5.0, 6.0]),
        psu(&[4.0, 4.0, 4.0]),
        psu(&[2.0, 3.0, 7.0]),
    ]);
    let pop = TwoStagePopulation {
        subpopulations: vec![
            TwoStageSubpop { psu_strata: vec![good] },
            TwoStageSubpop { psu_strata: vec![flat] },
        ],
    };
    save(dir, "flat.csv", Population::TwoStage(pop))
}

fn generated_frame(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("gen.csv");
    let o = eqalloc(&[
        "generate", "--seed", "1", "--rho", "0.3", "--units-min", "50", "--units-max", "70",
        "--out", s(&path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    path
}

fn tree(o: &Output) -> Value {
    serde_json::from_str(&stdout(o)).expect("tree report is JSON")
}

#[test]
fn check_reports_the_margin() {
    let dir = TempDir::new().unwrap();
    let frame = generated_frame(&dir);
    let o = eqalloc(&["check", "--frame", s(&frame), "--scheme", "two-stage-hr", "--m", "36", "--n", "500"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("frame valid\n"));
    assert!(text.contains("gamma positive in all 6 first-stage cells\n"));
    assert!(text.contains("condition satisfied, margin = "), "{text}");
}

#[test]
fn check_without_budgets_only_validates() {
    let dir = TempDir::new().unwrap();
    let frame = generated_frame(&dir);
    let o = eqalloc(&["check", "--frame", s(&frame)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("condition not evaluated"));
}

#[test]
fn nonpositive_gamma_exits_2_and_names_the_cell() {
    let dir = TempDir::new().unwrap();
    let frame = flat_totals_frame(&dir);
    let o = eqalloc(&["check", "--frame", s(&frame), "--m", "3", "--n", "6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
    assert!(stderr(&o).contains("subpop[1]/psu_stratum[0]"), "{}", stderr(&o));
}

#[test]
fn failed_condition_exits_3() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    // n at or above Σ s²/c = 2N admits no positive eigenvalue
    let o = eqalloc(&["check", "--frame", s(&frame), "--n", "200"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("condition not satisfied, margin = "));

    let o = eqalloc(&["check", "--frame", s(&frame), "--n", "200", "--force"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("spectrum signs -- (0 positive)"), "{}", stdout(&o));

    let o = eqalloc(&["allocate", "--frame", s(&frame), "--n", "200"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
}

#[test]
fn forced_check_shows_the_sign_pattern() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let o = eqalloc(&["check", "--frame", s(&frame), "--n", "20", "--force", "--format", "tree"]);
    assert_eq!(o.status.code(), Some(0));
    let v = tree(&o);
    let spec: Vec<f64> = v["spectrum"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((spec[0] - 0.09).abs() < 1e-12);
    assert!((spec[1] + 0.01).abs() < 1e-12);
}

#[test]
fn symmetric_allocation_has_cv_point_three() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--n", "20", "--format", "tree"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = tree(&o);
    assert!((v["lambda"].as_f64().unwrap() - 0.09).abs() < 1e-12);
    for row in v["subpops"].as_array().unwrap() {
        assert!((row["cv"].as_f64().unwrap() - 0.3).abs() < 1e-12);
        assert!((row["cv_rounded"].as_f64().unwrap() - 0.3).abs() < 1e-12);
    }
    for row in v["strata"].as_array().unwrap() {
        assert!((row["size"].as_f64().unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(row["size_rounded"], 10);
    }
}

#[test]
fn priorities_double_the_second_target() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--n", "20", "--kappa", "1,2", "--no-round", "--format", "tree"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = tree(&o);
    let t: Vec<f64> = v["subpops"].as_array().unwrap().iter().map(|r| r["t"].as_f64().unwrap()).collect();
    let lambda = v["lambda"].as_f64().unwrap();
    assert!((t[0] / lambda - 1.0).abs() < 1e-9);
    assert!((t[1] / (2.0 * lambda) - 1.0).abs() < 1e-9);
    assert!(v["rounding"].is_null());
}

#[test]
fn kappa_length_must_match() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--n", "20", "--kappa", "1,2,3"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infeasible_budgets_exit_4() {
    let dir = TempDir::new().unwrap();
    let frame = generated_frame(&dir);
    // 180 PSUs in the frame
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--scheme", "two-stage-hr", "--m", "200", "--n", "3000"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("exceeds the total capacity 180"));
    // feasible as an allocation, but some m z̃ exceeds one when drawing
    let o = eqalloc(&[
        "simulate", "--frame", s(&frame), "--scheme", "two-stage-hr", "--m", "150", "--n", "3000",
        "--replicates", "2", "--bootstrap", "0",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("inclusion probability"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(eqalloc(&["allocate", "--bogus"]).status.code(), Some(1));
    assert_eq!(eqalloc(&["allocate"]).status.code(), Some(1));
    assert_eq!(eqalloc(&["allocate", "--frame", "/nonexistent/frame.json", "--n", "3"]).status.code(), Some(1));
    assert_eq!(eqalloc(&["show-config", "--scheme", "three-stage"]).status.code(), Some(1));
    assert_eq!(eqalloc(&["--help"]).status.code(), Some(0));
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--m", "3", "--n", "20"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--n only"));
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--scheme", "two-stage-hr", "--m", "3", "--n", "20"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\nm = 12\nreplicates = 50\n[generate]\nrho = 0.4\n").unwrap();
    let o = eqalloc(&["show-config", "--config", s(&cfg), "--seed", "6"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("seed = 6\n"));
    assert!(text.contains("m = 12.0\n"));
    assert!(text.contains("replicates = 50\n"));
    assert!(text.contains("rho = 0.4\n"));

    std::fs::write(&cfg, "seeds = 5\n").unwrap();
    assert_eq!(eqalloc(&["show-config", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn show_config_prints_every_default() {
    let o = eqalloc(&["show-config"]);
    let text = stdout(&o);
    for key in ["scheme", "seed", "replicates", "bootstrap", "round", "force", "format", "threads", "baseline", "[generate]"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
}

#[test]
fn out_flag_writes_the_report_file() {
    let dir = TempDir::new().unwrap();
    let frame = symmetric_frame(&dir);
    let out = dir.path().join("report.txt");
    let o = eqalloc(&["allocate", "--frame", s(&frame), "--n", "20", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("scheme"));
    assert!(text.contains("lambda         9.000000000e-2"), "{text}");
}

#[test]
fn generate_is_deterministic() {
    let a = eqalloc(&["generate", "--seed", "3", "--format", "tree"]);
    let b = eqalloc(&["generate", "--seed", "3", "--format", "tree"]);
    let c = eqalloc(&["generate", "--seed", "4", "--format", "tree"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    assert!(stderr(&a).contains("generated"));
}

#[test]
fn simulation_is_reproducible_across_runs_and_threads() {
    let dir = TempDir::new().unwrap();
    let frame = generated_frame(&dir);
    let run = |threads: &str| {
        eqalloc(&[
            "simulate", "--frame", s(&frame), "--scheme", "two-stage-hr", "--m", "36", "--n", "500",
            "--replicates", "60", "--bootstrap", "20", "--seed", "11", "--threads", threads,
        ])
    };
    let a = run("1");
    let b = run("4");
    let c = run("1");
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(a.stdout, c.stdout);
    let text = stdout(&a);
    assert!(text.contains("     optimal       2"), "{text}");
    assert!(text.contains("proportional       0"));
}

#[test]
fn simulation_tree_report() {
    let dir = TempDir::new().unwrap();
    let frame = generated_frame(&dir);
    let o = eqalloc(&[
        "simulate", "--frame", s(&frame), "--m", "36", "--n", "500", "--replicates", "40",
        "--bootstrap", "0", "--baseline", "none", "--format", "tree",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = tree(&o);
    assert_eq!(v["scheme"], "two-stage-srswor");
    let arms = v["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 1);
    assert_eq!(arms[0]["psu_mean"], 36.0);
    assert_eq!(arms[0]["subpops"].as_array().unwrap().len(), 3);
    assert!(arms[0]["subpops"][0]["cv_boot"].is_null());
}

#[test]
fn single_stage_simulation_uses_units() {
    let dir = TempDir::new().unwrap();
    let strata = |base: f64| {
        (0..2)
            .map(|h| SingleStratum::from_units((0..40).map(|i| base + (h * 7 + i % 11) as f64).collect()))
            .collect::<Vec<_>>()
    };
    let pop = SingleStagePopulation {
        subpopulations: vec![
            SingleSubpop::from_strata(strata(5.0)).unwrap(),
            SingleSubpop::from_strata(strata(20.0)).unwrap(),
        ],
    };
    let frame = save(&dir, "units.json", Population::SingleStage(pop));
    let o = eqalloc(&["simulate", "--frame", s(&frame), "--n", "40", "--replicates", "200", "--bootstrap", "10", "--format", "tree"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = tree(&o);
    assert_eq!(v["arms"][0]["psu_mean"], 40.0);
    assert_eq!(v["scheme"], "single-stage-stratified");

    let summary = symmetric_frame(&dir);
    let o = eqalloc(&["simulate", "--frame", s(&summary), "--n", "20"]);
    assert_eq!(o.status.code(), Some(2));
}
