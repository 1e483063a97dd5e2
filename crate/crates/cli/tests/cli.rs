use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fiml_core::io::{write_csv, ModelFile};
use fiml_core::sim::{apply_mcar, gen_complete_data, Mechanism, SimDesign};
use tempfile::TempDir;

fn fiml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiml")).args(args).env_remove("FIML_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// 12 variables, 2 factors, 300 cases with 4 of 10 non-common cells missing.
fn dataset(dir: &Path) -> PathBuf {
    let design = SimDesign::blocks(6, 2, 0.8, 2, 300, 4, Mechanism::Mcar).unwrap();
    let sim = gen_complete_data::<f64>(&design, 1).unwrap();
    let data = apply_mcar(&sim.data, &design, 2).unwrap();
    let header: Vec<String> = (1..=12).map(|i| format!("v{i}")).collect();
    let path = dir.join("data.csv");
    write_csv(&data, &header, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn iterations(out: &str) -> usize {
    let line = out.lines().find(|l| l.starts_with("iterations:")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn fit_writes_a_model_that_is_a_fixed_point() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let model = dir.path().join("model.txt");
    let o = fiml(&[
        "fit", "--input", data.to_str().unwrap(), "--factors", "2", "--restrict", "--tol", "1e-10",
        "--output", model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("log-likelihood:") && text.contains("wall time:"));
    let first = ModelFile::<f64>::load(&model).unwrap();
    assert_eq!(first.model.p(), 12);
    assert!(first.restricted);

    let again = dir.path().join("again.txt");
    let o = fiml(&[
        "fit", "--input", data.to_str().unwrap(), "--factors", "2", "--restrict", "--tol", "1e-10",
        "--init", model.to_str().unwrap(), "--output", again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(iterations(&stdout(&o)) <= 2);
}

#[test]
fn em_variants_agree_from_the_same_seed() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let mut ll = Vec::new();
    for alg in ["modified-em", "ordinary-em"] {
        let out = dir.path().join(format!("{alg}.txt"));
        let o = fiml(&[
            "fit", "--input", data.to_str().unwrap(), "--factors", "2", "--algorithm", alg, "--seed", "5",
            "--tol", "1e-12", "--restrict", "--output", out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
        ll.push(ModelFile::<f64>::load(&out).unwrap().loglik.unwrap());
    }
    assert!((ll[0] - ll[1]).abs() <= 1e-6, "{ll:?}");
}

#[test]
fn rotations_are_reported() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let o = fiml(&["fit", "--input", data.to_str().unwrap(), "--factors", "2", "--rotation", "promax", "--promax-power", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("promax loadings:"));
    assert!(text.contains("factor correlations:"));
    assert!(text.contains("[lambda]"));
    let o = fiml(&["fit", "--input", data.to_str().unwrap(), "--factors", "2", "--rotation", "varimax", "--algorithm", "quasi-newton"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("varimax loadings:"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path());
    let d = data.to_str().unwrap();
    assert_eq!(fiml(&["fit", "--input", d]).status.code(), Some(2));
    assert_eq!(fiml(&["fit", "--input", d, "--factors", "2", "--algorithm", "newton"]).status.code(), Some(2));
    assert_eq!(fiml(&["fit", "--input", d, "--factors", "2", "--tol", "0"]).status.code(), Some(2));
    assert_eq!(fiml(&["fit", "--input", d, "--factors", "0"]).status.code(), Some(2));
    assert_eq!(fiml(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bad_data_exits_1() {
    let dir = TempDir::new().unwrap();
    let ragged = dir.path().join("ragged.csv");
    std::fs::write(&ragged, "a,b\n1,2\n3\n").unwrap();
    let o = fiml(&["fit", "--input", ragged.to_str().unwrap(), "--factors", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let empty_row = dir.path().join("empty.csv");
    std::fs::write(&empty_row, "a,b\n1,2\nNA,\n2,1\n").unwrap();
    let o = fiml(&["fit", "--input", empty_row.to_str().unwrap(), "--factors", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains('3'));
}

#[test]
fn custom_missing_tokens() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::from("a,b,c\n");
    for i in 0..40 {
        let x = i as f64 / 10.0;
        if i % 5 == 0 {
            text.push_str(&format!("{x},-99,{}\n", 2.0 * x + (i % 3) as f64));
        } else {
            text.push_str(&format!("{x},{},{}\n", x + (i % 4) as f64, 2.0 * x + (i % 3) as f64));
        }
    }
    std::fs::write(&path, text).unwrap();
    let p = path.to_str().unwrap();
    assert_eq!(fiml(&["fit", "--input", p, "--factors", "1", "--missing", "-99"]).status.code(), Some(0));
}

const ACCURACY: &str = "experiment = accuracy\nn = 120, 200\nq = 0, 3\nreplications = 2\nblocks = 4\nfactors = 2\nn_common = 2\n";

#[test]
fn simulate_writes_one_row_per_cell_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("acc.cfg");
    std::fs::write(&cfg, ACCURACY).unwrap();
    let mut tables = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("acc{run}.csv"));
        let plot = dir.path().join(format!("plot{run}.csv"));
        let o = fiml(&[
            "simulate", cfg.to_str().unwrap(), "--seed", "3", "--output", out.to_str().unwrap(),
            "--summary-output", plot.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        tables.push(std::fs::read(&out).unwrap());
        assert!(plot.exists());
    }
    assert_eq!(tables[0], tables[1]);
    let text = String::from_utf8(tables.pop().unwrap()).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn simulate_overrides_and_config_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("acc.cfg");
    std::fs::write(&cfg, ACCURACY).unwrap();
    let out = dir.path().join("o.csv");
    let o = out.to_str().unwrap();
    let c = cfg.to_str().unwrap();
    let ok = fiml(&["simulate", c, "n=150", "q = 2", "--output", o]);
    assert!(ok.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
    assert_eq!(fiml(&["simulate", c, "n=", "--output", o]).status.code(), Some(2));
    assert_eq!(fiml(&["simulate", c, "colour=blue", "--output", o]).status.code(), Some(2));
    assert_eq!(fiml(&["simulate", c, "oops", "--output", o]).status.code(), Some(2));
    assert_eq!(fiml(&["benchmark", c, "--output", o]).status.code(), Some(2));
    assert_eq!(fiml(&["simulate", "/nonexistent.cfg", "--output", o]).status.code(), Some(2));
}

#[test]
fn benchmark_prints_per_algorithm_times() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("t.cfg");
    std::fs::write(&cfg, "experiment = timing\nn = 150\nq = 0, 3\nruns = 1\nblocks = 4\nfactors = 2\nn_common = 2\n").unwrap();
    let out = dir.path().join("t.csv");
    let summary = dir.path().join("s.csv");
    let o = Command::new(env!("CARGO_BIN_EXE_fiml"))
        .args(["benchmark", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()])
        .args(["--summary-output", summary.to_str().unwrap()])
        .env("FIML_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for label in ["modified EM algorithm: ", "ordinary EM algorithm: ", "quasi-Newton method: "] {
        assert!(text.contains(label), "{text}");
    }
    assert!(text.lines().any(|l| l.trim_start().starts_with("modified EM algorithm:") && l.contains(" seconds")));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 2 * 3);
    assert_eq!(std::fs::read_to_string(&summary).unwrap().lines().count(), 1 + 2 * 3);
}
