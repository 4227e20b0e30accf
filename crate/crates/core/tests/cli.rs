use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fixflow"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(cfg: &Path, out: &Path) -> Output {
    bin().arg("run").arg(cfg).arg("--output-dir").arg(out).arg("--quiet").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.ini");
    fs::write(&p, body).unwrap();
    p
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn rotation_rate_bound_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&config("rotation_rate.ini"), tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = csv_rows(&tmp.path().join("trajectory.csv"));
    assert_eq!(rows[0], ["t", "x_0", "x_1", "residual", "speed", "dist_to_fix"]);
    assert_eq!(rows.len(), 4001 + 1);
    assert!(rows[1..].iter().all(|r| r.len() == 6 && !r[5].is_empty()));

    let margins = csv_rows(&tmp.path().join("rate_bound.csv"));
    assert_eq!(margins[0], ["t", "residual", "bound", "margin"]);
    assert!(margins[2..].iter().all(|r| r[3].parse::<f64>().unwrap() <= 0.0));

    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("analysis.json")).unwrap()).unwrap();
    let analyses = json["analyses"].as_array().unwrap();
    assert_eq!(analyses.len(), 6);
    assert!(analyses.iter().all(|a| a["pass"] == true));
    assert!(fs::read_to_string(tmp.path().join("summary.txt")).unwrap().contains("status: ok"));
}

#[test]
fn negative_identity_contrast() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&config("contrast.ini"), tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let rows = csv_rows(&tmp.path().join("iterates.csv"));
    assert_eq!(rows[0], ["n", "x_0", "x_1", "residual", "lambda_n"]);
    assert_eq!(rows.len(), 11 + 1);
    for (n, r) in rows[1..].iter().enumerate() {
        let x: f64 = r[1].parse().unwrap();
        assert_eq!(x, if n % 2 == 0 { 1.0 } else { -1.0 });
    }
    let summary = fs::read_to_string(tmp.path().join("summary.txt")).unwrap();
    assert!(summary.contains("contrast: the continuous flow converges"));
}

#[test]
fn numbers_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    run(&config("quadratic.ini"), tmp.path());
    let rows = csv_rows(&tmp.path().join("trajectory.csv"));
    for cell in &rows[5][..5] {
        let x: f64 = cell.parse().unwrap();
        assert_eq!(&format!("{x:.16e}"), cell);
    }
}

#[test]
fn analysis_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("quadratic.ini")).unwrap().replace("slope_threshold = -1", "slope_threshold = -10");
    let out = run(&write_config(tmp.path(), &body), &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    let summary = fs::read_to_string(tmp.path().join("out/summary.txt")).unwrap();
    assert!(summary.contains("slope: FAIL"));
}

#[test]
fn malformed_schedule_kind_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("contrast.ini")).unwrap().replace("kind = constant", "kind = cubic");
    let out = run(&write_config(tmp.path(), &body), &tmp.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("schedule.kind") && err.contains("line "), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn validate_reports() {
    let out = bin().arg("validate").arg(config("lasso.ini")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");

    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("contrast.ini")).unwrap().replace("value = 1", "value = 1\nlambda_max = 0");
    let out = bin().arg("validate").arg(write_config(tmp.path(), &body)).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule upper bound must be positive"));

    // beta = 1 for the identity design, so gamma = 2 sits on the boundary.
    let body = fs::read_to_string(config("lasso.ini")).unwrap().replace("gamma = 1", "gamma = 2");
    let out = bin().arg("validate").arg(write_config(tmp.path(), &body)).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("(0, 2*beta)"));
}

#[test]
fn validate_lists_every_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "[problem]\nname = rotation\ntheta = 0\n[schedule]\nkind = constant\nvalue = 0.5\nlambda_max = -1\n[x0]\nvalues = 1\n[flow]\nt_end = 5\n";
    let out = bin().arg("validate").arg(write_config(tmp.path(), body)).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("schedule upper bound must be positive"), "{err}");
    let missing = "[problem]\nname = rotation\n";
    let out = bin().arg("validate").arg(write_config(tmp.path(), missing)).output().unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("problem.theta") && err.contains("[schedule]") && err.contains("[flow]"), "{err}");
}

#[test]
fn output_dir_from_config_and_quiet() {
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(config("contrast.ini")).unwrap().replace("dir = out/contrast", &format!("dir = {}", tmp.path().join("from_config").display()));
    let cfg = write_config(tmp.path(), &body);
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("status: ok"));
    assert!(tmp.path().join("from_config/trajectory.csv").exists());
    let out = bin().arg("--quiet").arg("run").arg(&cfg).output().unwrap();
    assert!(out.stdout.is_empty());
}

#[test]
fn shipped_configs_validate() {
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let out = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
    }
}
