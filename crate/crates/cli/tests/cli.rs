use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracduffy"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn singular_study_writes_rows_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "singular-study",
            "--case",
            "tp-edge",
            "--s",
            "0.8",
            "--out",
            "study.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("study.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "case,s,h,n,value,ref,abs_err");
    assert_eq!(lines.len(), 1 + 3 * 7);
    assert!(lines[1].starts_with("tp-edge,0.8,1,2,"));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("study.json")).unwrap()).unwrap();
    let slopes = side["slopes"].as_array().unwrap();
    assert_eq!(slopes.len(), 3);
    for fit in slopes {
        assert!(fit["slope"].as_f64().unwrap() <= -0.5);
    }
}

#[test]
fn bad_case_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["singular-study", "--case", "tt-bogus"], dir.path())), 2);
    assert_eq!(
        code(&run(&["singular-study", "--case", "tt-face", "--s", "1.2"], dir.path())),
        2
    );
}

#[test]
fn solve_ball_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["solve-ball", "--s", "0.5", "--levels", "1..2", "--out", "ball.csv"];
    assert_eq!(code(&run(&args, dir.path())), 0);
    let first = fs::read(dir.path().join("ball.csv")).unwrap();
    let first_side = fs::read(dir.path().join("ball.json")).unwrap();
    assert_eq!(code(&run(&args, dir.path())), 0);
    assert_eq!(fs::read(dir.path().join("ball.csv")).unwrap(), first);
    assert_eq!(fs::read(dir.path().join("ball.json")).unwrap(), first_side);

    let text = String::from_utf8(first).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(text.lines().next().unwrap(), "level,h,N,M,n1,n2,rel_err,observed_rate");
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][7], "");
    let rel: Vec<f64> = rows.iter().map(|r| r[6].parse().unwrap()).collect();
    assert!(rel[1] < rel[0]);
}

#[test]
fn solve_ball_dumps_matrices() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve-ball", "--levels", "1", "--dump", "."], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ball_level1.bin", "ball_level1.json", "ball_level1_solution.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn invalid_levels_and_configs_exit_with_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["solve-ball", "--levels", "4"], dir.path())), 2);
    assert_eq!(code(&run(&["--config", "missing.toml", "solve-ball"], dir.path())), 4);
    fs::write(dir.path().join("bad.toml"), "s = 0.5\nbogus = 1\n").unwrap();
    assert_eq!(code(&run(&["--config", "bad.toml", "solve-ball"], dir.path())), 2);
}

#[test]
fn flags_override_config_values() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), "s = 0.3\nn1 = 3\nn2 = 3\n").unwrap();
    let o = run(
        &[
            "--config",
            "cfg.toml",
            "solve-ball",
            "--levels",
            "1",
            "--n2",
            "4",
            "--out",
            "b.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(side["s"].as_f64(), Some(0.3));
    let row = &side["rows"][0];
    assert_eq!(row["n1"].as_u64(), Some(3));
    assert_eq!(row["n2"].as_u64(), Some(4));
}

#[test]
fn oracle_checks_a_single_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["oracle", "tp-face", "--s", "0.5", "--tol", "1e-4", "--json", "o.json"],
        dir.path(),
    );
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}\n{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.contains("tp-face"));
    assert!(out.contains("zero"));
    assert!(!out.contains("FAIL"));
    assert!(dir.path().join("o.json").exists());
}
