//! End-to-end pipeline driven by a single TOML file.
//!
//! Stages read their inputs from disk and write their artifacts plus a JSON
//! manifest (input and output hashes, seeds, crate version) under
//! `manifests/`. A stage whose manifest still matches its inputs, settings
//! and outputs is skipped, so interrupted or repeated runs resume where the
//! work changed.
//!
//! Every stage draws its randomness from
//! `derive_seed_str(seed, "stage/<name>")`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjust::{adjust_observations, default_plan, estimate_adjustments, read_paired_counts, AdjustedObservation, AdjustmentTable};
use crate::data::{ingest_observations, standardize_covariates, CountryIndex, CovariateMatrix, Definition, Observation, RawCovariates, SchemaConfig, TransformSpec, YearWindow};
use crate::error::{Error, Result};
use crate::estimate::{build_estimates, EstimateTable};
use crate::model::{beta_medians, make_subsetted_spec, subset_covariates, tau0_from_guess, InvGammaConvention, ModelSpec, Parameterization, PriorMode, DEFAULT_SUBSET_CUTOFF, VAGUE_BETA_SD};
use crate::plot::{write_plots, PlotPoint, PointKind};
use crate::ratio::{apply_exclusion, fit_ratio_model, read_hq_ratios, read_national_nmr, write_exclusions_csv, NationalNmr, NmrSourcePolicy, RatioPriors, ScreenConfig, DEFAULT_THRESHOLD};
use crate::rng::derive_seed_str;
use crate::sampler::io::{read_draws, write_draws, write_summary_csv};
use crate::simulate::{write_fixture, SimulatedData};
use crate::sampler::{sample, PosteriorDraws, SamplerConfig};
use crate::spline::build_basis;
use crate::validation::{elpd_compare, loglik_matrix, psis_loo, run_validation, write_loo_csv, write_validation_csv, LooResult, ValidationConfig};
use crate::variance::{attach_poisson_errors, impute_max_error, DEFAULT_MC_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Ingest,
    Variance,
    AdjustFit,
    AdjustObs,
    Screen,
    HorseshoeFit,
    Subset,
    SubsettedFit,
    Estimates,
    Validation,
    Plots,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::Ingest,
        Stage::Variance,
        Stage::AdjustFit,
        Stage::AdjustObs,
        Stage::Screen,
        Stage::HorseshoeFit,
        Stage::Subset,
        Stage::SubsettedFit,
        Stage::Estimates,
        Stage::Validation,
        Stage::Plots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Variance => "variance",
            Stage::AdjustFit => "adjust-fit",
            Stage::AdjustObs => "adjust-obs",
            Stage::Screen => "screen",
            Stage::HorseshoeFit => "horseshoe-fit",
            Stage::Subset => "subset",
            Stage::SubsettedFit => "subsetted-fit",
            Stage::Estimates => "estimates",
            Stage::Validation => "validation",
            Stage::Plots => "plots",
        }
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Ingest | Stage::AdjustFit => &[],
            Stage::Variance => &[Stage::Ingest],
            Stage::AdjustObs => &[Stage::Variance, Stage::AdjustFit],
            Stage::Screen => &[Stage::AdjustObs],
            Stage::HorseshoeFit => &[Stage::Screen],
            Stage::Subset => &[Stage::HorseshoeFit],
            Stage::SubsettedFit => &[Stage::Subset],
            Stage::Estimates => &[Stage::SubsettedFit],
            Stage::Validation => &[Stage::HorseshoeFit, Stage::SubsettedFit],
            Stage::Plots => &[Stage::Estimates, Stage::Screen],
        }
    }

    /// `self` and everything it depends on, in execution order.
    pub fn closure(self) -> Vec<Stage> {
        let mut need = BTreeSet::new();
        let mut stack = vec![self];
        while let Some(s) = stack.pop() {
            if need.insert(s) {
                stack.extend_from_slice(s.deps());
            }
        }
        need.into_iter().collect()
    }

    pub fn seed(self, root: u64) -> u64 {
        derive_seed_str(root, &format!("stage/{}", self.name()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown stage `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub observations: PathBuf,
    pub covariates: PathBuf,
    pub regions: PathBuf,
    pub income_groups: PathBuf,
    /// Paired counts for the definitional adjustment fits.
    pub paired_counts: Option<PathBuf>,
    /// A ready adjustment table; replaces the fits when given.
    pub adjustment_table: Option<PathBuf>,
    /// High-quality SBR:NMR ratios for the screening model.
    pub hq_ratios: Option<PathBuf>,
    pub national_nmr: Option<PathBuf>,
}

/// Prior guess for the global horseshoe scale; `d` defaults to the number
/// of candidate covariates and `n` to the number of observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau0Guess {
    pub p0: f64,
    pub d: Option<f64>,
    pub sigma: f64,
    pub n: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub tau0: Option<f64>,
    pub guess: Option<Tau0Guess>,
    pub q: f64,
    pub g: f64,
    pub convention: InvGammaConvention,
    /// Standard deviation of the normal prior in the subsetted fit.
    pub vague_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { tau0: None, guess: None, q: 2.0, g: 8.0, convention: InvGammaConvention::ShapeScale, vague_sd: VAGUE_BETA_SD }
    }
}

impl PriorConfig {
    fn horseshoe(&self, n_covariates: usize, n_obs: usize) -> Result<PriorMode> {
        let tau0 = match (self.tau0, self.guess) {
            (Some(_), Some(_)) => return Err(Error::Config("give either prior.tau0 or prior.guess, not both".into())),
            (Some(t), None) => t,
            (None, Some(g)) => tau0_from_guess(g.p0, g.d.unwrap_or(n_covariates as f64), g.sigma, g.n.unwrap_or(n_obs as f64))?,
            (None, None) => 1.0,
        };
        Ok(PriorMode::RegularizedHorseshoe { tau0, q: self.q, g: self.g, convention: self.convention })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenSettings {
    pub threshold: f64,
    pub policy: NmrSourcePolicy,
    pub mc_samples: usize,
    pub priors: RatioPriors,
}

impl Default for ScreenSettings {
    fn default() -> Self {
        ScreenSettings { threshold: DEFAULT_THRESHOLD, policy: NmrSourcePolicy::default(), mc_samples: DEFAULT_MC_SAMPLES, priors: RatioPriors::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub window: YearWindow,
    pub inputs: InputPaths,
    #[serde(default)]
    pub schema: SchemaConfig,
    /// Covariates to log-transform before standardization.
    #[serde(default)]
    pub log_covariates: Vec<String>,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Sampler settings for the small adjustment and ratio models; defaults
    /// to `sampler`.
    #[serde(default)]
    pub aux_sampler: Option<SamplerConfig>,
    /// Step-size adaptation target for the horseshoe fit; defaults to
    /// `sampler.target_accept`.
    #[serde(default)]
    pub horseshoe_target_accept: Option<f64>,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub screen: ScreenSettings,
    #[serde(default = "default_cutoff")]
    pub subset_cutoff: f64,
    #[serde(default)]
    pub validation: ValidationConfig,
}

fn default_cutoff() -> f64 {
    DEFAULT_SUBSET_CUTOFF
}

impl PipelineConfig {
    /// Reads a config file; relative paths are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        let i = &mut self.inputs;
        for p in [&mut i.observations, &mut i.covariates, &mut i.regions, &mut i.income_groups] {
            fix(p);
        }
        for p in [&mut i.paired_counts, &mut i.adjustment_table, &mut i.hq_ratios, &mut i.national_nmr].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        YearWindow::new(self.window.start, self.window.end)?;
        self.sampler.validate()?;
        if let Some(s) = &self.aux_sampler {
            s.validate()?;
        }
        if let Some(t) = self.horseshoe_target_accept {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("horseshoe_target_accept must lie in (0, 1), got {t}")));
            }
        }
        if !(self.subset_cutoff >= 0.0) {
            return Err(Error::Config(format!("subset_cutoff must be non-negative, got {}", self.subset_cutoff)));
        }
        if !(self.screen.threshold > 0.0 && self.screen.threshold < 1.0) {
            return Err(Error::Config(format!("screen.threshold must lie in (0, 1), got {}", self.screen.threshold)));
        }
        Ok(())
    }

    /// Every referenced input file must exist.
    pub fn check_inputs(&self) -> Result<()> {
        for p in self.input_files() {
            if !p.is_file() {
                return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
            }
        }
        Ok(())
    }

    fn input_files(&self) -> Vec<PathBuf> {
        let i = &self.inputs;
        let mut v = vec![i.observations.clone(), i.covariates.clone(), i.regions.clone(), i.income_groups.clone()];
        v.extend([&i.paired_counts, &i.adjustment_table, &i.hq_ratios, &i.national_nmr].into_iter().flatten().cloned());
        v
    }

    fn horseshoe_sampler(&self) -> SamplerConfig {
        let mut s = self.sampler.clone();
        if let Some(t) = self.horseshoe_target_accept {
            s.target_accept = t;
        }
        s
    }

    fn aux(&self) -> &SamplerConfig {
        self.aux_sampler.as_ref().unwrap_or(&self.sampler)
    }
}

/// Record of one completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub stage_seed: u64,
    pub settings_hash: String,
    /// File name (relative to the output directory where possible) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn sha256_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).unwrap_or_default();
    hex::encode(Sha256::digest(&bytes))
}

/// Artifact locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    fn work(&self, name: &str) -> PathBuf {
        self.root.join("work").join(name)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn estimates(&self) -> PathBuf {
        self.out("estimates.csv")
    }

    pub fn plots(&self) -> PathBuf {
        self.out("plots")
    }

    fn label(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestArtifact {
    observations: Vec<Observation>,
    index: CountryIndex,
    covariates: CovariateMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdjustedArtifact {
    adjusted: Vec<AdjustedObservation>,
    unadjustable: Vec<Observation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScreenArtifact {
    /// Kept and unscreenable observations, in input order.
    model: Vec<AdjustedObservation>,
    excluded: Vec<AdjustedObservation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SubsetArtifact {
    medians: Vec<(String, f64)>,
    included: Vec<usize>,
}

/// What a stage produced.
struct StageOutput {
    files: Vec<PathBuf>,
    notes: BTreeMap<String, String>,
}

impl StageOutput {
    fn new(files: Vec<PathBuf>) -> Self {
        StageOutput { files, notes: BTreeMap::new() }
    }

    fn note(mut self, key: &str, value: impl ToString) -> Self {
        self.notes.insert(key.to_string(), value.to_string());
        self
    }
}

/// Which stages to bring up to date and which to rerun regardless of their
/// manifests.
#[derive(Debug, Clone, Default)]
pub struct RunRequest {
    pub targets: Vec<Stage>,
    pub force: Vec<Stage>,
}

impl RunRequest {
    pub fn all() -> Self {
        RunRequest { targets: vec![Stage::Plots, Stage::Validation], force: Vec::new() }
    }

    pub fn through(stage: Stage) -> Self {
        RunRequest { targets: vec![stage], force: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub stages: Vec<(Stage, StageStatus)>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: Layout,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout { root: config.output_dir.clone() };
        Ok(Pipeline { config, layout })
    }

    /// Runs the requested stages and their prerequisites in order.
    pub fn run(&self, request: &RunRequest) -> Result<RunReport> {
        let mut stages = BTreeSet::new();
        for t in &request.targets {
            stages.extend(t.closure());
        }
        for dir in [self.layout.root.clone(), self.layout.root.join("work"), self.layout.root.join("manifests")] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut report = RunReport { output_dir: self.layout.root.clone(), stages: Vec::new() };
        for stage in stages {
            let status = self
                .run_stage(stage, request.force.contains(&stage))
                .map_err(|e| Error::Stage { stage: stage.name().to_string(), source: Box::new(e) })?;
            report.stages.push((stage, status));
        }
        Ok(report)
    }

    fn stage_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let l = &self.layout;
        let i = &self.config.inputs;
        match stage {
            Stage::Ingest => vec![i.observations.clone(), i.covariates.clone(), i.regions.clone(), i.income_groups.clone()],
            Stage::Variance => vec![l.work("ingest.json")],
            Stage::AdjustFit => [&i.adjustment_table, &i.paired_counts].into_iter().flatten().cloned().take(1).collect(),
            Stage::AdjustObs => vec![l.work("variance.json"), l.out("adjustment_table.csv")],
            Stage::Screen => {
                let mut v = vec![l.work("adjusted.json")];
                v.extend([&i.hq_ratios, &i.national_nmr].into_iter().flatten().cloned());
                v
            }
            Stage::HorseshoeFit => vec![l.work("ingest.json"), l.work("screened.json")],
            Stage::Subset => vec![l.work("ingest.json"), l.work("screened.json"), l.work("horseshoe_draws.bin")],
            Stage::SubsettedFit => vec![l.work("ingest.json"), l.work("screened.json"), l.work("subset.json")],
            Stage::Estimates => vec![l.work("ingest.json"), l.work("screened.json"), l.work("subset.json"), l.work("subsetted_draws.bin")],
            Stage::Validation => vec![
                l.work("ingest.json"),
                l.work("screened.json"),
                l.work("subset.json"),
                l.work("horseshoe_draws.bin"),
                l.work("subsetted_draws.bin"),
            ],
            Stage::Plots => vec![l.estimates(), l.work("screened.json")],
        }
    }

    /// The settings a stage's result depends on.
    fn stage_settings(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        let v = match stage {
            Stage::Ingest => serde_json::json!({ "window": c.window, "schema": c.schema, "log": c.log_covariates }),
            Stage::Variance | Stage::AdjustObs | Stage::Plots => serde_json::json!({}),
            Stage::AdjustFit => serde_json::json!({ "sampler": c.aux() }),
            Stage::Screen => serde_json::json!({ "screen": c.screen, "sampler": c.aux() }),
            Stage::HorseshoeFit => serde_json::json!({ "prior": c.prior, "param": c.parameterization, "sampler": c.horseshoe_sampler() }),
            Stage::Subset => serde_json::json!({ "prior": c.prior, "param": c.parameterization, "cutoff": c.subset_cutoff }),
            Stage::SubsettedFit | Stage::Estimates => {
                serde_json::json!({ "prior": c.prior, "param": c.parameterization, "sampler": c.sampler })
            }
            Stage::Validation => serde_json::json!({
                "prior": c.prior, "param": c.parameterization, "sampler": c.sampler, "validation": c.validation
            }),
        };
        serde_json::json!({ "stage": stage.name(), "settings": v })
    }

    fn hash_inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        self.stage_inputs(stage).iter().map(|p| Ok((self.layout.label(p), sha256_file(p)?))).collect()
    }

    fn is_current(&self, stage: Stage, inputs: &BTreeMap<String, String>, settings: &str) -> bool {
        let Ok(m) = read_json::<Manifest>(&self.layout.manifest(stage)) else { return false };
        if m.version != env!("CARGO_PKG_VERSION") || m.seed != self.config.seed || m.settings_hash != settings || &m.inputs != inputs {
            return false;
        }
        m.outputs.iter().all(|(name, hash)| sha256_file(&self.layout.root.join(name)).map(|h| &h == hash).unwrap_or(false))
    }

    fn run_stage(&self, stage: Stage, force: bool) -> Result<StageStatus> {
        if stage == Stage::Ingest {
            self.config.check_inputs()?;
        }
        let inputs = self.hash_inputs(stage)?;
        let settings = sha256_json(&self.stage_settings(stage));
        if !force && self.is_current(stage, &inputs, &settings) {
            log::info!("stage {stage}: up to date");
            return Ok(StageStatus::UpToDate);
        }
        log::info!("stage {stage}: running");
        let seed = stage.seed(self.config.seed);
        let out = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Variance => self.variance(),
            Stage::AdjustFit => self.adjust_fit(seed),
            Stage::AdjustObs => self.adjust_obs(),
            Stage::Screen => self.screen(seed),
            Stage::HorseshoeFit => self.horseshoe_fit(seed),
            Stage::Subset => self.subset(),
            Stage::SubsettedFit => self.subsetted_fit(seed),
            Stage::Estimates => self.estimates(),
            Stage::Validation => self.validation(seed),
            Stage::Plots => self.plots(),
        }?;
        let outputs = out.files.iter().map(|p| Ok((self.layout.label(p), sha256_file(p)?))).collect::<Result<_>>()?;
        let manifest = Manifest {
            stage: stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            stage_seed: seed,
            settings_hash: settings,
            inputs,
            outputs,
            notes: out.notes,
        };
        write_json(&self.layout.manifest(stage), &manifest)?;
        Ok(StageStatus::Ran)
    }

    fn ingest(&self) -> Result<StageOutput> {
        let c = &self.config;
        let window = YearWindow::new(c.window.start, c.window.end)?;
        let ingested = ingest_observations(&c.inputs.observations, &c.schema, window)?;
        let index = CountryIndex::load(&c.inputs.regions, &c.inputs.income_groups)?;
        let raw = RawCovariates::load(&c.inputs.covariates, &index, window)?;
        let covariates = standardize_covariates(&raw, &TransformSpec::with_log(c.log_covariates.iter().cloned()))?;
        let (known, unknown): (Vec<_>, Vec<_>) = ingested.observations.into_iter().partition(|o| index.position(&o.country).is_some());
        for o in &unknown {
            log::warn!("observation {} dropped: country `{}` has no region or income group", o.id, o.country);
        }
        let rejections = self.layout.out("rejections.csv");
        ingested.report.write_csv(&rejections)?;
        let artifact = IngestArtifact { observations: known, index, covariates };
        let path = self.layout.work("ingest.json");
        write_json(&path, &artifact)?;
        Ok(StageOutput::new(vec![path, rejections])
            .note("observations", artifact.observations.len())
            .note("rejected_rows", ingested.report.len())
            .note("unknown_country", unknown.len())
            .note("covariates", artifact.covariates.names.join(" ")))
    }

    fn variance(&self) -> Result<StageOutput> {
        let a: IngestArtifact = read_json(&self.layout.work("ingest.json"))?;
        let with_se = impute_max_error(&attach_poisson_errors(&a.observations))?;
        let path = self.layout.work("variance.json");
        write_json(&path, &with_se)?;
        Ok(StageOutput::new(vec![path]))
    }

    fn adjust_fit(&self, seed: u64) -> Result<StageOutput> {
        let i = &self.config.inputs;
        let path = self.layout.out("adjustment_table.csv");
        let (table, note) = match (&i.adjustment_table, &i.paired_counts) {
            (Some(t), _) => (AdjustmentTable::read_csv(t)?, "supplied".to_string()),
            (None, Some(p)) => {
                let pairs = read_paired_counts(p)?;
                let cfg = SamplerConfig { seed, ..self.config.aux().clone() };
                let (table, fits) = estimate_adjustments(&pairs, &default_plan(), &cfg)?;
                (table, format!("{} groups fitted", fits.len()))
            }
            (None, None) => {
                log::warn!("no paired counts or adjustment table: only reference-definition data can be used");
                (AdjustmentTable::default(), "empty".to_string())
            }
        };
        table.write_csv(&path)?;
        Ok(StageOutput::new(vec![path]).note("table", note))
    }

    fn adjust_obs(&self) -> Result<StageOutput> {
        let obs: Vec<Observation> = read_json(&self.layout.work("variance.json"))?;
        let index = read_json::<IngestArtifact>(&self.layout.work("ingest.json"))?.index;
        let table = AdjustmentTable::read_csv(&self.layout.out("adjustment_table.csv"))?;
        let set = adjust_observations(&obs, &index, &table);
        for o in &set.unadjustable {
            log::warn!("observation {} ({}) has no adjustment for definition {}", o.id, o.country, o.definition.as_str());
        }
        let path = self.layout.work("adjusted.json");
        let ids: Vec<String> = set.unadjustable.iter().map(|o| o.id.to_string()).collect();
        let art = AdjustedArtifact { adjusted: set.adjusted, unadjustable: set.unadjustable };
        write_json(&path, &art)?;
        Ok(StageOutput::new(vec![path]).note("adjusted", art.adjusted.len()).note("unadjustable_ids", ids.join(" ")))
    }

    fn screen(&self, seed: u64) -> Result<StageOutput> {
        let c = &self.config;
        let art: AdjustedArtifact = read_json(&self.layout.work("adjusted.json"))?;
        let path = self.layout.out("exclusions.csv");
        let screened_path = self.layout.work("screened.json");
        let Some(hq) = &c.inputs.hq_ratios else {
            log::warn!("no high-quality ratios given: screening skipped");
            write_exclusions_csv(&path, &[])?;
            write_json(&screened_path, &ScreenArtifact { model: art.adjusted, excluded: Vec::new() })?;
            return Ok(StageOutput::new(vec![path, screened_path]).note("screen", "skipped"));
        };
        let national: NationalNmr = match &c.inputs.national_nmr {
            Some(p) => read_national_nmr(p)?,
            None => NationalNmr::new(),
        };
        let cfg = SamplerConfig { seed: derive_seed_str(seed, "ratio-fit"), ..c.aux().clone() };
        let fit = fit_ratio_model(&read_hq_ratios(hq)?, c.screen.priors, &cfg)?;
        let screen_cfg = ScreenConfig { threshold: c.screen.threshold, policy: c.screen.policy, mc_samples: c.screen.mc_samples, seed };
        let result = apply_exclusion(&art.adjusted, &fit, &national, &screen_cfg)?;
        write_exclusions_csv(&path, &result.records)?;
        let excluded: Vec<AdjustedObservation> = result.excluded.iter().map(|(a, _)| a.clone()).collect();
        let excluded_ids: BTreeSet<u64> = excluded.iter().map(|a| a.obs.id).collect();
        // keep input order for the model
        let model: Vec<AdjustedObservation> = art.adjusted.iter().filter(|a| !excluded_ids.contains(&a.obs.id)).cloned().collect();
        let n_model = model.len();
        write_json(&screened_path, &ScreenArtifact { model, excluded })?;
        Ok(StageOutput::new(vec![path, screened_path])
            .note("mu_theta", format!("{:.4}", fit.mu_theta.median))
            .note("sigma2_theta", format!("{:.4}", fit.sigma2_theta))
            .note("excluded", excluded_ids.len())
            .note("cannot_screen", result.cannot_screen.len())
            .note("model_observations", n_model))
    }

    fn base_spec(&self, prior_for: impl FnOnce(usize, usize) -> Result<PriorMode>) -> Result<ModelSpec> {
        let ingest: IngestArtifact = read_json(&self.layout.work("ingest.json"))?;
        let screened: ScreenArtifact = read_json(&self.layout.work("screened.json"))?;
        if screened.model.is_empty() {
            return Err(Error::Precondition("no observations left to fit".into()));
        }
        let basis = build_basis(self.config.window.start, self.config.window.end)?;
        let prior = prior_for(ingest.covariates.n_covariates(), screened.model.len())?;
        Ok(ModelSpec::new(&screened.model, ingest.covariates, ingest.index, basis, prior)?.with_param(self.config.parameterization))
    }

    fn horseshoe_spec(&self) -> Result<ModelSpec> {
        self.base_spec(|k, n| self.config.prior.horseshoe(k, n))
    }

    fn subsetted_spec(&self) -> Result<ModelSpec> {
        let full = self.horseshoe_spec()?;
        let subset: SubsetArtifact = read_json(&self.layout.work("subset.json"))?;
        let spec = make_subsetted_spec(&full, &subset.included)?;
        Ok(ModelSpec { prior: PriorMode::SubsettedVague { sd: self.config.prior.vague_sd }, ..spec })
    }

    fn fit(&self, spec: &ModelSpec, cfg: SamplerConfig, draws_name: &str, summary_name: &str) -> Result<StageOutput> {
        let draws = sample(spec, &cfg)?;
        let draws_path = self.layout.work(draws_name);
        write_draws(&draws_path, &draws)?;
        let summary_path = self.layout.out(summary_name);
        let summaries = draws.summarize();
        write_summary_csv(&summary_path, &summaries)?;
        let max_rhat = summaries.iter().map(|s| s.rhat).filter(|r| r.is_finite()).fold(f64::NAN, f64::max);
        let min_ess = summaries.iter().map(|s| s.ess_bulk).filter(|r| r.is_finite()).fold(f64::NAN, f64::min);
        if max_rhat > 1.01 {
            log::warn!("{draws_name}: max R-hat {max_rhat:.3}");
        }
        Ok(StageOutput::new(vec![draws_path, summary_path])
            .note("divergent", draws.divergent_count())
            .note("transitions", draws.total_draws())
            .note("max_rhat", format!("{max_rhat:.4}"))
            .note("min_ess_bulk", format!("{min_ess:.1}"))
            .note("step_sizes", format!("{:?}", draws.step_sizes)))
    }

    fn horseshoe_fit(&self, seed: u64) -> Result<StageOutput> {
        let spec = self.horseshoe_spec()?;
        let cfg = SamplerConfig { seed, ..self.config.horseshoe_sampler() };
        self.fit(&spec, cfg, "horseshoe_draws.bin", "horseshoe_summary.csv")
    }

    fn subset(&self) -> Result<StageOutput> {
        let spec = self.horseshoe_spec()?;
        let draws = read_draws(&self.layout.work("horseshoe_draws.bin"))?;
        let medians = beta_medians(&spec, &draws);
        let included = subset_covariates(&medians, self.config.subset_cutoff)?;
        let csv_path = self.layout.out("covariate_medians.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
        w.write_record(["covariate", "median", "included"]).map_err(|e| Error::csv(&csv_path, e))?;
        for (i, (name, m)) in medians.iter().enumerate() {
            w.write_record([name.clone(), format!("{m:.6}"), included.contains(&i).to_string()]).map_err(|e| Error::csv(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let names: Vec<&str> = included.iter().map(|&i| medians[i].0.as_str()).collect();
        let note = names.join(" ");
        let path = self.layout.work("subset.json");
        write_json(&path, &SubsetArtifact { medians, included })?;
        Ok(StageOutput::new(vec![path, csv_path]).note("included", note))
    }

    fn subsetted_fit(&self, seed: u64) -> Result<StageOutput> {
        let spec = self.subsetted_spec()?;
        let cfg = SamplerConfig { seed, ..self.config.sampler.clone() };
        self.fit(&spec, cfg, "subsetted_draws.bin", "summary.csv")
    }

    fn estimates(&self) -> Result<StageOutput> {
        let spec = self.subsetted_spec()?;
        let draws = read_draws(&self.layout.work("subsetted_draws.bin"))?;
        let table = build_estimates(&spec, &draws)?;
        let path = self.layout.estimates();
        table.write_csv(&path)?;
        Ok(StageOutput::new(vec![path]).note("rows", table.rows.len()))
    }

    fn loo(&self, spec: &ModelSpec, draws: &PosteriorDraws) -> Result<LooResult> {
        let ids: Vec<u64> = spec.obs.iter().map(|o| o.id).collect();
        psis_loo(&ids, &loglik_matrix(spec, draws, &spec.obs))
    }

    fn validation(&self, seed: u64) -> Result<StageOutput> {
        let spec = self.subsetted_spec()?;
        let draws = read_draws(&self.layout.work("subsetted_draws.bin"))?;
        let reports = run_validation(&spec, Some(&draws), &self.config.sampler, &self.config.validation, seed)?;
        let report_path = self.layout.out("validation_report.csv");
        write_validation_csv(&report_path, &reports)?;

        let loo = self.loo(&spec, &draws)?;
        let loo_path = self.layout.out("loo_report.csv");
        write_loo_csv(&loo_path, &loo)?;
        let hs_spec = self.horseshoe_spec()?;
        let hs_loo = self.loo(&hs_spec, &read_draws(&self.layout.work("horseshoe_draws.bin"))?)?;
        let diff = elpd_compare(&loo, &hs_loo)?;
        let cmp_path = self.layout.out("loo_comparison.csv");
        let mut w = csv::Writer::from_path(&cmp_path).map_err(|e| Error::csv(&cmp_path, e))?;
        w.write_record(["model", "elpd_loo", "se", "pct_k_above_0.7"]).map_err(|e| Error::csv(&cmp_path, e))?;
        for (name, l) in [("subsetted", &loo), ("horseshoe", &hs_loo)] {
            w.write_record([name.to_string(), format!("{:.4}", l.elpd_loo), format!("{:.4}", l.se), format!("{:.2}", l.pct_k_above(0.7))])
                .map_err(|e| Error::csv(&cmp_path, e))?;
        }
        w.write_record(["difference".to_string(), format!("{:.4}", diff.diff), format!("{:.4}", diff.se), String::new()])
            .map_err(|e| Error::csv(&cmp_path, e))?;
        w.flush().map_err(|e| Error::io(&cmp_path, e))?;
        Ok(StageOutput::new(vec![report_path, loo_path, cmp_path])
            .note("elpd_loo", format!("{:.4}", loo.elpd_loo))
            .note("elpd_diff_vs_horseshoe", format!("{:.4} ({:.4})", diff.diff, diff.se)))
    }

    fn plots(&self) -> Result<StageOutput> {
        let estimates = EstimateTable::read_csv(&self.layout.estimates())?;
        let screened: ScreenArtifact = read_json(&self.layout.work("screened.json"))?;
        let points = plot_points(&screened.model, &screened.excluded);
        let files = write_plots(&self.layout.plots(), &estimates, &points)?;
        Ok(StageOutput::new(files))
    }
}

/// Adjusted points with 95% error bars, the raw values of non-reference
/// definitions, and excluded observations.
pub fn plot_points(model: &[AdjustedObservation], excluded: &[AdjustedObservation]) -> Vec<PlotPoint> {
    let mut out = Vec::new();
    for a in model {
        let y = a.adjusted_log_sbr();
        let half = 1.96 * (a.obs.log_se.unwrap_or(0.0).powi(2) + a.phi2).sqrt();
        let base = PlotPoint {
            country: a.obs.country.clone(),
            year: a.obs.year,
            sbr: y.exp(),
            lower: (y - half).exp(),
            upper: (y + half).exp(),
            definition: a.obs.definition,
            kind: PointKind::Adjusted,
        };
        if a.obs.definition != Definition::Ge28Weeks {
            out.push(PlotPoint { sbr: a.obs.sbr, lower: a.obs.sbr, upper: a.obs.sbr, kind: PointKind::Unadjusted, ..base.clone() });
        }
        out.push(base);
    }
    for a in excluded {
        let v = a.adjusted_log_sbr().exp();
        out.push(PlotPoint {
            country: a.obs.country.clone(),
            year: a.obs.year,
            sbr: v,
            lower: v,
            upper: v,
            definition: a.obs.definition,
            kind: PointKind::Excluded,
        });
    }
    out
}

/// Runs the whole pipeline for `config`.
pub fn run_pipeline(config: PipelineConfig) -> Result<RunReport> {
    Pipeline::new(config)?.run(&RunRequest::all())
}

/// Writes a simulated data set into `dir` together with a `config.toml`
/// that runs the pipeline on it, and returns the config path.
pub fn write_simulated_project(sim: &SimulatedData, dir: &Path, seed: u64, sampler: SamplerConfig) -> Result<PathBuf> {
    let paths = write_fixture(sim, dir)?;
    let name = |p: &Path| PathBuf::from(p.file_name().unwrap_or_default());
    let window = sim.basis.window;
    let config = PipelineConfig {
        seed,
        output_dir: PathBuf::from("out"),
        window,
        inputs: InputPaths {
            observations: name(&paths.observations),
            covariates: name(&paths.covariates),
            regions: name(&paths.regions),
            income_groups: name(&paths.income_groups),
            paired_counts: Some(name(&paths.paired_counts)),
            adjustment_table: None,
            hq_ratios: Some(name(&paths.hq_ratios)),
            national_nmr: Some(name(&paths.national_nmr)),
        },
        schema: SchemaConfig::default(),
        log_covariates: Vec::new(),
        aux_sampler: Some(SamplerConfig { n_chains: sampler.n_chains.min(4), ..sampler.clone() }),
        sampler,
        horseshoe_target_accept: Some(0.95),
        prior: PriorConfig::default(),
        parameterization: Parameterization::default(),
        screen: ScreenSettings::default(),
        subset_cutoff: DEFAULT_SUBSET_CUTOFF,
        validation: ValidationConfig::default(),
    };
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
