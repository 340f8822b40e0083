use std::path::{Path, PathBuf};

use sbr_core::pipeline::{write_simulated_project, Manifest, Pipeline, PipelineConfig, RunRequest, Stage, StageStatus};
use sbr_core::sampler::SamplerConfig;
use sbr_core::simulate::{simulate_model_data, SimConfig};

fn project(dir: &Path) -> PathBuf {
    let sim = simulate_model_data(&SimConfig {
        n_countries: 4,
        n_years: 8,
        n_obs: 40,
        definition_share: 0.25,
        underreport_share: 0.1,
        seed: 31,
        ..SimConfig::default()
    })
    .unwrap();
    let sampler = SamplerConfig { n_chains: 2, n_iter: 400, n_warmup: 200, ..SamplerConfig::default() };
    write_simulated_project(&sim, dir, 5, sampler).unwrap()
}

fn load(path: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(path).unwrap();
    cfg.validation.random_replicates = 2;
    cfg
}

fn statuses(report: &sbr_core::pipeline::RunReport) -> Vec<(Stage, StageStatus)> {
    report.stages.clone()
}

#[test]
fn full_run_writes_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let path = project(dir.path());
    let cfg = load(&path);
    let out = cfg.output_dir.clone();
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let report = pipeline.run(&RunRequest::all()).unwrap();
    assert_eq!(report.stages.len(), Stage::ALL.len());
    assert!(report.stages.iter().all(|(_, s)| *s == StageStatus::Ran));

    for name in [
        "estimates.csv",
        "summary.csv",
        "horseshoe_summary.csv",
        "covariate_medians.csv",
        "adjustment_table.csv",
        "exclusions.csv",
        "rejections.csv",
        "validation_report.csv",
        "loo_report.csv",
        "loo_comparison.csv",
        "plots/index.html",
        "plots/C01.svg",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    for stage in Stage::ALL {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(pipeline.layout.manifest(stage)).unwrap()).unwrap();
        assert_eq!(m.stage, stage.name());
        assert_eq!(m.seed, 5);
        assert_eq!(m.stage_seed, stage.seed(5));
        assert!(!m.outputs.is_empty());
    }
    let estimates = std::fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(estimates.lines().count(), 1 + 4 * 8);

    let again = pipeline.run(&RunRequest::all()).unwrap();
    assert!(statuses(&again).iter().all(|(_, s)| *s == StageStatus::UpToDate));

    // a changed cutoff reruns subsetting and what follows, nothing before it
    let mut changed = cfg.clone();
    changed.subset_cutoff = 0.0;
    let report = Pipeline::new(changed).unwrap().run(&RunRequest::through(Stage::Estimates)).unwrap();
    for (stage, status) in report.stages {
        let expect = if stage >= Stage::Subset { StageStatus::Ran } else { StageStatus::UpToDate };
        assert_eq!(status, expect, "{stage}");
    }

    // forcing a stage reruns it even with a current manifest
    let forced = RunRequest { targets: vec![Stage::Variance], force: vec![Stage::Variance] };
    let report = pipeline.run(&forced).unwrap();
    assert_eq!(report.stages, vec![(Stage::Ingest, StageStatus::UpToDate), (Stage::Variance, StageStatus::Ran)]);
}

#[test]
fn missing_covariate_file_fails_at_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let path = project(dir.path());
    let cfg = load(&path);
    std::fs::remove_file(&cfg.inputs.covariates).unwrap();
    let err = Pipeline::new(cfg.clone()).unwrap().run(&RunRequest::all()).unwrap_err().to_string();
    assert!(err.contains("ingest"), "{err}");
    assert!(err.contains("covariates.csv"), "{err}");
    assert!(!cfg.output_dir.join("manifests/ingest.json").exists());
}

#[test]
fn a_tampered_output_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let path = project(dir.path());
    let cfg = load(&path);
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    pipeline.run(&RunRequest::through(Stage::AdjustObs)).unwrap();
    let table = cfg.output_dir.join("adjustment_table.csv");
    let original = std::fs::read(&table).unwrap();
    std::fs::write(&table, "definition,income_group,gamma,phi2,n_pairs\n").unwrap();
    let report = pipeline.run(&RunRequest::through(Stage::AdjustObs)).unwrap();
    assert!(report.stages.contains(&(Stage::AdjustFit, StageStatus::Ran)));
    assert!(report.stages.contains(&(Stage::AdjustObs, StageStatus::UpToDate)));
    assert_eq!(std::fs::read(&table).unwrap(), original);
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = project(dir.path());
    let text = std::fs::read_to_string(&path).unwrap().replace("n_warmup = 200", "n_warmup = 900");
    std::fs::write(&path, text).unwrap();
    let err = PipelineConfig::load(&path).unwrap_err().to_string();
    assert!(err.contains("n_warmup"), "{err}");
}
