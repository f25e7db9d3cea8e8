use std::path::Path;
use std::process::Command;

use cipstab_cli::config::{parse_config, Experiment};

fn cipstab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cipstab")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn configs_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_parse() {
    let mut seen = Vec::new();
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = parse_config(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        seen.push(cfg.experiment);
    }
    for e in [Experiment::Smoke, Experiment::Convergence, Experiment::Shock, Experiment::Localisation, Experiment::StabilityDiag] {
        assert!(seen.contains(&e), "no config for {e:?}");
    }
}

#[test]
fn bad_config_file_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"experiment\": \"smoke\",\n  \"degre\": 2\n}\n").unwrap();
    let msg = format!("{:#}", parse_config(&path).unwrap_err());
    assert!(msg.contains("degre") && msg.contains("line 3"), "{msg}");

    let out = cipstab(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degre"));
}

#[test]
fn subcommand_must_match_experiment() {
    let out = cipstab(&["shock", configs_dir().join("smoke.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("smoke.json");
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = cipstab(&["--out", out_dir.to_str().unwrap(), "solve", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("PASS mass_conserved"), "{stdout}");
        for name in ["config.json", "report.json", "diagnostics.csv"] {
            assert!(out_dir.join(name).exists(), "{name} missing");
        }
        csvs.push(std::fs::read(out_dir.join("diagnostics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}
