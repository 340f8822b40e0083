use std::process::Command;

fn sbr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbr"))
}

#[test]
fn simulate_writes_a_loadable_project() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("proj");
    let status = sbr().args(["simulate", "--quick", "--seed", "4", "--out"]).arg(&out).status().unwrap();
    assert!(status.success());
    for f in ["config.toml", "observations.csv", "covariates.csv", "regions.csv", "income_groups.csv", "truth.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let cfg = sbr_core::pipeline::PipelineConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(cfg.seed, 4);
    cfg.check_inputs().unwrap();
}

#[test]
fn unknown_stage_is_a_usage_error() {
    let out = sbr().args(["all", "--config", "x.toml", "--stage", "nope"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown stage"));
}

#[test]
fn missing_config_names_the_path() {
    let out = sbr().args(["fit", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}
