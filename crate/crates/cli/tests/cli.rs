use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const REFERENCE: &str = r#""a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.05, "gamma": 0.2"#;

fn mvdiv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvdiv")).args(args).env_remove("MVDIV_THREADS").output().expect("binary runs")
}

fn config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

/// Data rows of a CSV body whose first line is the manifest comment.
fn rows(body: &str) -> (String, Vec<Vec<String>>) {
    let mut lines = body.lines();
    assert!(lines.next().unwrap().starts_with("# mvdiv manifest sha256="));
    let header = lines.next().unwrap().to_string();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

#[test]
fn solve_reports_the_barrier() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}}}"));
    let o = mvdiv(&["solve", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["regime"], "Barrier");
    let x = v["x_tilde"].as_f64().unwrap();
    assert!((x - 0.2159250743).abs() < 1e-8, "{x}");
    assert_eq!(v["manifest"]["command"], "solve");
    assert_eq!(v["manifest"]["digest"].as_str().unwrap().len(), 64);
}

#[test]
fn solve_exit_codes() {
    let dir = TempDir::new().unwrap();
    let max = config(&dir, "m.json", r#"{"a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 0.3}"#);
    let o = mvdiv(&["solve", "--config", s(&max)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["regime"], "MaxRate");

    let unresolved = config(&dir, "u.json", r#"{"a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 10.0}"#);
    let o = mvdiv(&["solve", "--config", s(&unresolved)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unresolved regime"));

    let negative = config(&dir, "n.json", r#"{"a": 0.1, "b": -0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 0.3}"#);
    assert_eq!(mvdiv(&["solve", "--config", s(&negative)]).status.code(), Some(2));

    let unknown = config(&dir, "k.json", &format!("{{{REFERENCE}, \"colour\": 1}}"));
    assert_eq!(mvdiv(&["solve", "--config", s(&unknown)]).status.code(), Some(2));

    let missing = dir.path().join("absent.json");
    assert_eq!(mvdiv(&["solve", "--config", s(&missing)]).status.code(), Some(2));
}

#[test]
fn sweep_in_d_bar_is_monotone_and_matches_solve() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, \"dbar_grid\": {{\"start\": 0.02, \"stop\": 0.1, \"step\": 0.01}}}}"));
    let o = mvdiv(&["sweep", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, data) = rows(&stdout(&o));
    assert_eq!(header, "gamma,d_bar,x_tilde,status");
    assert_eq!(data.len(), 9);
    // Below ρb²/(2a) ≈ 0.0306 there is no barrier.
    for r in &data[..2] {
        assert_eq!(r[3], "not_found", "{r:?}");
    }
    let xs: Vec<f64> = data[2..].iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");

    let single = config(&dir, "one.json", &format!("{{{REFERENCE}, \"dbar_grid\": [0.05]}}"));
    let (_, one) = rows(&stdout(&mvdiv(&["sweep", "--config", s(&single)])));
    let solved = json(&mvdiv(&["solve", "--config", s(&single)]))["x_tilde"].as_f64().unwrap();
    assert_eq!(one[0][2].parse::<f64>().unwrap(), solved);
}

#[test]
fn sweep_rejects_bad_grids() {
    let dir = TempDir::new().unwrap();
    let none = config(&dir, "a.json", &format!("{{{REFERENCE}}}"));
    assert_eq!(mvdiv(&["sweep", "--config", s(&none)]).status.code(), Some(2));
    let reversed =
        config(&dir, "b.json", &format!("{{{REFERENCE}, \"gamma_grid\": {{\"start\": 1, \"stop\": 0, \"step\": 0.1}}}}"));
    assert_eq!(mvdiv(&["sweep", "--config", s(&reversed)]).status.code(), Some(2));
    let negative = config(&dir, "c.json", &format!("{{{REFERENCE}, \"gamma_grid\": [0.1, -0.1]}}"));
    assert_eq!(mvdiv(&["sweep", "--config", s(&negative)]).status.code(), Some(2));
}

#[test]
fn eval_writes_csv_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, \"x_grid\": [0.0, 0.1, 0.5, 1.0]}}"));
    let out = dir.path().join("out");
    let o = mvdiv(&["eval", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let body = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let (header, data) = rows(&body);
    assert_eq!(header, "x,G,H,V,residual,argmax_d");
    assert_eq!(data.len(), 4);
    assert_eq!(data[0][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(data[1][5], "0");
    assert_eq!(data[3][5], "0.05");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let digest = manifest["digest"].as_str().unwrap();
    assert!(body.starts_with(&format!("# mvdiv manifest sha256={digest}\n")));
    assert_eq!(manifest["outputs"][0], "eval.csv");
}

#[test]
fn eval_without_closed_form_uses_the_grid() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, \"strategy\": {{\"constant\": 0.02}}, \"x_grid\": [0.5, 1.0]}}"));
    let o = mvdiv(&["eval", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (_, data) = rows(&stdout(&o));
    let g: f64 = data[1][1].parse().unwrap();
    assert!(g > 0.0 && g < 0.02 / 0.05);
    assert_eq!(data[1][4], "");
}

#[test]
fn simulate_is_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, \"x0\": [0.2, 0.6], \"dump_paths\": true}}"));
    let run = |threads: &str, out: &Path| {
        let o = Command::new(env!("CARGO_BIN_EXE_mvdiv"))
            .args(["simulate", "--config", s(&cfg), "--paths", "500", "--seed", "7", "--out", s(out)])
            .env("MVDIV_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run("1", &a);
    run("3", &b);
    for name in ["simulate.json", "paths_0.csv", "paths_1.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("simulate.json")).unwrap()).unwrap();
    assert_eq!(v["sim"]["n_paths"], 500);
    assert_eq!(v["manifest"]["overrides"][0], "paths=500");
}

#[test]
fn simulate_flag_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, \"x0\": [0.2]}}"));
    assert_eq!(mvdiv(&["simulate", "--config", s(&cfg), "--dt", "-1"]).status.code(), Some(2));
    assert_eq!(mvdiv(&["simulate", "--config", s(&cfg), "--paths", "0"]).status.code(), Some(2));
    let no_x0 = config(&dir, "d.json", &format!("{{{REFERENCE}}}"));
    assert_eq!(mvdiv(&["simulate", "--config", s(&no_x0)]).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mvdiv"))
        .args(["simulate", "--config", s(&cfg)])
        .env("MVDIV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

const FAST_VERIFY: &str = r#""verify": {"mc_paths": 4000, "sweep": false}"#;

#[test]
fn verify_passes_in_both_regimes() {
    let dir = TempDir::new().unwrap();
    let barrier = config(&dir, "b.json", &format!("{{{REFERENCE}, {FAST_VERIFY}}}"));
    let o = mvdiv(&["verify", "--config", s(&barrier)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v["pass"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);

    let max = config(
        &dir,
        "m.json",
        &format!(r#"{{"a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 0.3, {FAST_VERIFY}}}"#),
    );
    let o = mvdiv(&["verify", "--config", s(&max)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_catches_a_perturbed_constant() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &format!("{{{REFERENCE}, {FAST_VERIFY}}}"));
    let o = mvdiv(&["verify", "--config", s(&cfg), "--inject-fault", "c1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("verification failed") && err.contains("smooth_pasting"), "{err}");
    assert_eq!(json(&o)["pass"], false);
}

#[test]
fn verify_unresolved_exits_3() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "u.json", r#"{"a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 10.0}"#);
    assert_eq!(mvdiv(&["verify", "--config", s(&cfg)]).status.code(), Some(3));
}

#[test]
fn verify_writes_sweep_cells() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        "m.json",
        r#"{"a": 0.1, "b": 0.35, "rho": 0.05, "d_bar": 0.03, "gamma": 0.3,
            "verify": {"mc_paths": 4000, "sweep_paths": 4000, "x0_relative": [0.5, 2.0]}}"#,
    );
    let out = dir.path().join("out");
    let o = mvdiv(&["verify", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (header, data) = rows(&std::fs::read_to_string(out.join("equilibrium_sweep.csv")).unwrap());
    assert_eq!(header, "x0,d_dev,slope,stderr,threshold,verdict,ruin_fraction");
    assert_eq!(data.len(), 6);
    assert!(data.iter().all(|r| r[5] == "pass"));
    // Deviating to the candidate's own rate changes nothing.
    assert!(data.iter().filter(|r| r[1] == "0.03").all(|r| r[2].parse::<f64>().unwrap() == 0.0));
}
