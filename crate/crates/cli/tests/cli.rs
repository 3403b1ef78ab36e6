use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfg_cli::{parse_config, RunConfig};

fn mfg(args: &[&str], dir: &Path, env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfg"));
    cmd.args(args).current_dir(dir).env_remove("MFG_OUT_DIR");
    if let Some(p) = env_out {
        cmd.env("MFG_OUT_DIR", p);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_SWEEP: &str = r#"
epsilons = [0.3, 0.25, 0.2, 0.15]

[sweep]
half_width = 2.0
h_max = 0.02
rescaled_spacing = 0.2
window = 30.0
"#;

#[test]
fn verify_passes_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let o = mfg(&["verify", "--out", out.to_str().unwrap(), "--threads", "2"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("10 of 10 assertions passed"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["reports"]["verify"]["passed"], 10);
    assert_eq!(summary["provenance"]["threads"], 2);
    assert!(out.join("assertions.csv").exists() && out.join("config.toml").exists());
}

#[test]
fn config_errors_exit_2_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", "seed = 1\n[model.coupling]\nalpha = 2.0\n");
    let o = mfg(&["solve", "--config", &cfg], tmp.path(), None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("subcritical"), "{err}");

    let cfg = write(tmp.path(), "typo.toml", "[solver]\ndampng = 0.3\n");
    let o = mfg(&["solve", "--config", &cfg], tmp.path(), None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));

    let cfg = write(tmp.path(), "other.toml", "command = \"sweep\"\n");
    let o = mfg(&["solve", "--config", &cfg], tmp.path(), None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_and_assertion_failures_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "short.toml", "[solver]\nmax_outer = 1\n[grid]\nhalf_width = 2.0\npoints = 101\n");
    let o = mfg(&["solve", "--config", &cfg, "--out", "a"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(1));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/summary.json")).unwrap()).unwrap();
    assert!(summary["failures"][0]["error"].as_str().unwrap().contains("did not converge"));

    let cfg = write(tmp.path(), "strict.toml", "[checks]\nduality_tolerance = 1e-30\ncompetitor_trials = 0\n[grid]\nhalf_width = 2.0\npoints = 101\n");
    let o = mfg(&["solve", "--config", &cfg, "--out", "b"], tmp.path(), None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL duality_gap_relative"));
}

#[test]
fn output_directory_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "output_dir = \"from_config\"\n[verify]\nmass_fractions = [0.25, 0.5]\npoints = 401\n");
    let env = tmp.path().join("from_env");
    mfg(&["verify", "--config", &cfg], tmp.path(), None);
    assert!(tmp.path().join("from_config/summary.json").exists());
    mfg(&["verify", "--config", &cfg], tmp.path(), Some(&env));
    assert!(env.join("summary.json").exists());
    mfg(&["verify", "--config", &cfg, "--out", "from_flag"], tmp.path(), Some(&env));
    assert!(tmp.path().join("from_flag/summary.json").exists());
    mfg(&["verify"], tmp.path(), None);
    assert!(tmp.path().join("out/summary.json").exists());
}

#[test]
fn sweep_tables_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", SMALL_SWEEP);
    let a = mfg(&["sweep", "--config", &cfg, "--out", "a", "--seed", "5"], tmp.path(), None);
    let b = mfg(&["sweep", "--config", &cfg, "--out", "b", "--seed", "5"], tmp.path(), None);
    assert!(a.status.code().is_some() && a.status.code() == b.status.code());
    let ta = fs::read(tmp.path().join("a/sweep.csv")).unwrap();
    assert_eq!(ta, fs::read(tmp.path().join("b/sweep.csv")).unwrap());
    let text = String::from_utf8(ta).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("epsilon,lambda,lambda_tilde,x_eps_1,mass_fraction_R1"));
    assert!(header.contains("optimality_residual"));
    assert_eq!(lines.clone().count(), 4);
    for row in lines {
        let first = row.split(',').nth(1).unwrap();
        let mantissa = first.trim_start_matches('-').split('e').next().unwrap();
        assert_eq!(mantissa.len(), 18, "17 significant digits: {first}");
    }
    for f in ["lambda_fit.svg", "mass_fraction.svg", "profiles.svg"] {
        assert!(tmp.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn echoed_config_parses_back_to_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "s.toml", SMALL_SWEEP);
    mfg(&["sweep", "--config", &cfg, "--out", "a", "--seed", "11"], tmp.path(), None);
    let echo = parse_config(&fs::read_to_string(tmp.path().join("a/config.toml")).unwrap()).unwrap();
    let mut expect: RunConfig = parse_config(SMALL_SWEEP).unwrap();
    expect.seed = 11;
    expect.command = Some(mfg_cli::Command::Sweep);
    assert_eq!(echo, expect);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/summary.json")).unwrap()).unwrap();
    let from_json: RunConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    assert_eq!(from_json, expect);
}
