//! Domain types and input handling.
//!
//! Observations, country metadata and covariates are read from CSV files.
//! Rows that fail validation are never dropped silently: they are collected
//! in a [`RejectionReport`] that the pipeline writes next to its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum allowed gap between a reported SBR and `1000 * D / B`.
pub const CONSISTENCY_TOLERANCE: f64 = 0.5;

/// Observations with more than this share of unknown-category stillbirths
/// are excluded instead of redistributed.
pub const MAX_UNKNOWN_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceType {
    Administrative,
    Hmis,
    PopulationStudy,
    Survey,
}

impl SourceType {
    pub const ALL: [SourceType; 4] = [
        SourceType::Administrative,
        SourceType::Hmis,
        SourceType::PopulationStudy,
        SourceType::Survey,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SourceType::Administrative => "administrative",
            SourceType::Hmis => "hmis",
            SourceType::PopulationStudy => "population_study",
            SourceType::Survey => "survey",
        }
    }
}

impl fmt::Display for SourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "administrative" | "admin" | "vr" | "crvs" => Ok(SourceType::Administrative),
            "hmis" => Ok(SourceType::Hmis),
            "populationstudy" | "study" | "populationbasedstudy" | "review" => {
                Ok(SourceType::PopulationStudy)
            }
            "survey" | "dhs" | "mics" => Ok(SourceType::Survey),
            _ => Err(format!("unknown source type `{s}`")),
        }
    }
}

/// Stillbirth definition used by a data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Definition {
    Ge28Weeks,
    Ge24Weeks,
    Ge22Weeks,
    Ge1000g,
    Ge500g,
}

impl Definition {
    pub const ALL: [Definition; 5] = [
        Definition::Ge28Weeks,
        Definition::Ge24Weeks,
        Definition::Ge22Weeks,
        Definition::Ge1000g,
        Definition::Ge500g,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Definition::Ge28Weeks => "ge28wks",
            Definition::Ge24Weeks => "ge24wks",
            Definition::Ge22Weeks => "ge22wks",
            Definition::Ge1000g => "ge1000g",
            Definition::Ge500g => "ge500g",
        }
    }

    /// Gestational-age cutoffs below 28 weeks record a superset of the
    /// 28-week stillbirths; birthweight cutoffs only overlap with it.
    pub fn pairing_kind(self) -> Option<PairingKind> {
        match self {
            Definition::Ge28Weeks => None,
            Definition::Ge24Weeks | Definition::Ge22Weeks => Some(PairingKind::Containing),
            Definition::Ge1000g | Definition::Ge500g => Some(PairingKind::Overlapping),
        }
    }
}

impl fmt::Display for Definition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Definition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            // Surveys record "seventh month or later", treated as 28 weeks.
            "ge28wks" | "ge28weeks" | "28wks" | "28weeks" | "ge28" | "7months" | "ge7months" => {
                Ok(Definition::Ge28Weeks)
            }
            "ge24wks" | "ge24weeks" | "24wks" | "24weeks" | "ge24" => Ok(Definition::Ge24Weeks),
            "ge22wks" | "ge22weeks" | "22wks" | "22weeks" | "ge22" => Ok(Definition::Ge22Weeks),
            "ge1000g" | "1000g" | "ge1000grams" | "1000grams" => Ok(Definition::Ge1000g),
            "ge500g" | "500g" | "ge500grams" | "500grams" => Ok(Definition::Ge500g),
            _ => Err(format!("unknown stillbirth definition `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairingKind {
    Containing,
    Overlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IncomeGroup {
    High,
    LowMiddle,
}

impl IncomeGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            IncomeGroup::High => "high",
            IncomeGroup::LowMiddle => "low_middle",
        }
    }
}

impl fmt::Display for IncomeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IncomeGroup {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "high" | "hic" | "highincome" => Ok(IncomeGroup::High),
            "low" | "lmic" | "lowmiddle" | "lowmiddleincome" | "lowincome" | "middle" => {
                Ok(IncomeGroup::LowMiddle)
            }
            _ => Err(format!("unknown income group `{s}`")),
        }
    }
}

fn normalize_token(s: &str) -> String {
    s.trim()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// One observed stillbirth rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub id: u64,
    pub country: String,
    pub year: i32,
    pub source_type: SourceType,
    pub definition: Definition,
    /// Stillbirths per 1000 total births.
    pub sbr: f64,
    pub total_births: Option<f64>,
    pub stillbirth_count: Option<f64>,
    /// Standard deviation of `ln(sbr)`.
    pub log_se: Option<f64>,
    /// Same-source neonatal mortality rate per 1000 live births.
    pub nmr: Option<f64>,
    pub live_births: Option<f64>,
}

impl Observation {
    /// Checks the per-row invariants. Returns the offending column and a reason.
    pub fn validate(&self, window: YearWindow) -> std::result::Result<(), (&'static str, String)> {
        if !(self.sbr.is_finite() && self.sbr > 0.0) {
            return Err(("sbr", format!("sbr must be positive, got {}", self.sbr)));
        }
        if !window.contains(self.year) {
            return Err((
                "year",
                format!("year {} outside estimation window {}", self.year, window),
            ));
        }
        for (col, v) in [
            ("total_births", self.total_births),
            ("stillbirth_count", self.stillbirth_count),
            ("live_births", self.live_births),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err((col, format!("{col} must be a non-negative count, got {v}")));
                }
            }
        }
        if let Some(se) = self.log_se {
            if !(se.is_finite() && se > 0.0) {
                return Err(("log_se", format!("log_se must be positive, got {se}")));
            }
        }
        if let Some(nmr) = self.nmr {
            if !(nmr.is_finite() && nmr > 0.0) {
                return Err(("nmr", format!("nmr must be positive, got {nmr}")));
            }
        }
        if let (Some(d), Some(b)) = (self.stillbirth_count, self.total_births) {
            if b <= 0.0 {
                return Err(("total_births", "total_births must be positive".into()));
            }
            if d > b {
                return Err(("stillbirth_count", format!("{d} stillbirths exceed {b} births")));
            }
            let implied = 1000.0 * d / b;
            if (self.sbr - implied).abs() > CONSISTENCY_TOLERANCE {
                return Err((
                    "sbr",
                    format!(
                        "sbr {} inconsistent with 1000*D/B = {:.3} (tolerance {})",
                        self.sbr, implied, CONSISTENCY_TOLERANCE
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearWindow {
    pub start: i32,
    pub end: i32,
}

impl Default for YearWindow {
    fn default() -> Self {
        YearWindow { start: 2000, end: 2019 }
    }
}

impl YearWindow {
    pub fn new(start: i32, end: i32) -> Result<Self> {
        if end <= start {
            return Err(Error::Precondition(format!(
                "estimation window {start}-{end} must span at least two years"
            )));
        }
        Ok(YearWindow { start, end })
    }

    pub fn contains(&self, year: i32) -> bool {
        year >= self.start && year <= self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start + 1).max(0) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offset(&self, year: i32) -> Option<usize> {
        self.contains(year).then(|| (year - self.start) as usize)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.start..=self.end
    }
}

impl fmt::Display for YearWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

/// Maps logical observation fields to CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub id: String,
    pub country: String,
    pub year: String,
    pub source_type: String,
    pub definition: String,
    pub sbr: String,
    pub total_births: String,
    pub stillbirth_count: String,
    pub log_se: String,
    pub nmr: String,
    pub live_births: String,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig {
            id: "id".into(),
            country: "country".into(),
            year: "year".into(),
            source_type: "source_type".into(),
            definition: "definition".into(),
            sbr: "sbr".into(),
            total_births: "total_births".into(),
            stillbirth_count: "stillbirth_count".into(),
            log_se: "log_se".into(),
            nmr: "nmr".into(),
            live_births: "live_births".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub column: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionReport {
    pub rejections: Vec<Rejection>,
}

impl RejectionReport {
    pub fn is_empty(&self) -> bool {
        self.rejections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rejections.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["row", "column", "reason"]).map_err(|e| Error::csv(path, e))?;
        for r in &self.rejections {
            w.write_record([r.row.to_string(), r.column.clone(), r.reason.clone()])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub observations: Vec<Observation>,
    pub report: RejectionReport,
}

pub(crate) fn parse_optional(raw: &str) -> std::result::Result<Option<f64>, String> {
    let t = raw.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| format!("not a number: `{t}`"))
}

pub(crate) fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

pub(crate) fn header_index(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
        path: path.to_path_buf(),
        column: name.to_string(),
    })
}

/// Reads `observations.csv`. Every input row ends up either in the returned
/// observations or in the rejection report.
pub fn ingest_observations(path: &Path, schema: &SchemaConfig, window: YearWindow) -> Result<Ingested> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let required = [
        &schema.id,
        &schema.country,
        &schema.year,
        &schema.source_type,
        &schema.definition,
        &schema.sbr,
    ];
    let mut idx = BTreeMap::new();
    for name in required {
        idx.insert(name.as_str(), header_index(path, &headers, name)?);
    }
    let optional = [
        &schema.total_births,
        &schema.stillbirth_count,
        &schema.log_se,
        &schema.nmr,
        &schema.live_births,
    ];
    let opt_idx: Vec<Option<usize>> = optional
        .iter()
        .map(|name| headers.iter().position(|h| h == name.as_str()))
        .collect();

    let mut out = Ingested::default();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                out.report.rejections.push(Rejection {
                    row,
                    column: String::new(),
                    reason: format!("unreadable row: {e}"),
                });
                continue;
            }
        };
        match parse_observation(&rec, schema, &idx, &opt_idx) {
            Ok(obs) => match obs.validate(window) {
                Ok(()) => out.observations.push(obs),
                Err((column, reason)) => out.report.rejections.push(Rejection {
                    row,
                    column: column.to_string(),
                    reason,
                }),
            },
            Err((column, reason)) => {
                out.report.rejections.push(Rejection { row, column, reason });
            }
        }
    }
    Ok(out)
}

fn parse_observation(
    rec: &csv::StringRecord,
    schema: &SchemaConfig,
    idx: &BTreeMap<&str, usize>,
    opt_idx: &[Option<usize>],
) -> std::result::Result<Observation, (String, String)> {
    let get = |name: &String| rec.get(idx[name.as_str()]).unwrap_or("").trim().to_string();
    let bad = |name: &String, reason: String| (name.clone(), reason);

    let id = get(&schema.id)
        .parse::<u64>()
        .map_err(|_| bad(&schema.id, format!("id `{}` is not an integer", get(&schema.id))))?;
    let country = get(&schema.country);
    if country.is_empty() {
        return Err(bad(&schema.country, "empty country code".into()));
    }
    let year = get(&schema.year)
        .parse::<i32>()
        .map_err(|_| bad(&schema.year, format!("year `{}` is not an integer", get(&schema.year))))?;
    let source_type = get(&schema.source_type)
        .parse::<SourceType>()
        .map_err(|e| bad(&schema.source_type, e))?;
    let definition = get(&schema.definition)
        .parse::<Definition>()
        .map_err(|e| bad(&schema.definition, e))?;
    let sbr = get(&schema.sbr)
        .parse::<f64>()
        .map_err(|_| bad(&schema.sbr, format!("sbr `{}` is not a number", get(&schema.sbr))))?;

    let names = [
        &schema.total_births,
        &schema.stillbirth_count,
        &schema.log_se,
        &schema.nmr,
        &schema.live_births,
    ];
    let mut vals = [None; 5];
    for (k, (name, pos)) in names.iter().zip(opt_idx).enumerate() {
        if let Some(p) = pos {
            vals[k] = parse_optional(rec.get(*p).unwrap_or("")).map_err(|e| bad(name, e))?;
        }
    }
    Ok(Observation {
        id,
        country,
        year,
        source_type,
        definition,
        sbr,
        total_births: vals[0],
        stillbirth_count: vals[1],
        log_se: vals[2],
        nmr: vals[3],
        live_births: vals[4],
    })
}

/// Writes observations with the same column layout `ingest_observations` reads.
pub fn write_observations(path: &Path, observations: &[Observation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record([
        "id",
        "country",
        "year",
        "source_type",
        "definition",
        "sbr",
        "total_births",
        "stillbirth_count",
        "log_se",
        "nmr",
        "live_births",
    ])
    .map_err(|e| Error::csv(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for o in observations {
        w.write_record([
            o.id.to_string(),
            o.country.clone(),
            o.year.to_string(),
            o.source_type.to_string(),
            o.definition.to_string(),
            format!("{}", o.sbr),
            opt(o.total_births),
            opt(o.stillbirth_count),
            opt(o.log_se),
            opt(o.nmr),
            opt(o.live_births),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Countries in model order with their region and income group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryIndex {
    pub countries: Vec<String>,
    pub regions: Vec<String>,
    region_of: Vec<usize>,
    income_of: Vec<IncomeGroup>,
}

impl CountryIndex {
    /// Builds the index from `(country, region, income)` triples. Countries
    /// and regions are ordered lexicographically.
    pub fn new(entries: &[(String, String, IncomeGroup)]) -> Result<Self> {
        let mut by_country: BTreeMap<&str, (&str, IncomeGroup)> = BTreeMap::new();
        for (c, r, g) in entries {
            if by_country.insert(c.as_str(), (r.as_str(), *g)).is_some() {
                return Err(Error::Data(format!("country `{c}` listed more than once")));
            }
        }
        if by_country.is_empty() {
            return Err(Error::Data("no countries supplied".into()));
        }
        let regions: Vec<String> = by_country
            .values()
            .map(|(r, _)| r.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let countries: Vec<String> = by_country.keys().map(|c| c.to_string()).collect();
        let region_of = by_country
            .values()
            .map(|(r, _)| regions.iter().position(|x| x == r).unwrap())
            .collect();
        let income_of = by_country.values().map(|(_, g)| *g).collect();
        Ok(CountryIndex { countries, regions, region_of, income_of })
    }

    /// Reads `regions.csv` (country, region) and `income_groups.csv`
    /// (country, income_group).
    pub fn load(regions_path: &Path, income_path: &Path) -> Result<Self> {
        let regions = read_pairs(regions_path, "country", "region")?;
        let incomes = read_pairs(income_path, "country", "income_group")?;
        let income_map: BTreeMap<_, _> = incomes.into_iter().collect();
        let mut entries = Vec::with_capacity(regions.len());
        for (c, r) in regions {
            let g = income_map.get(&c).ok_or_else(|| {
                Error::Data(format!("country `{c}` has a region but no income group"))
            })?;
            let g = g.parse::<IncomeGroup>().map_err(Error::Data)?;
            entries.push((c, r, g));
        }
        Self::new(&entries)
    }

    pub fn len(&self) -> usize {
        self.countries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.countries.is_empty()
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn position(&self, country: &str) -> Option<usize> {
        self.countries.binary_search_by(|c| c.as_str().cmp(country)).ok()
    }

    pub fn region_of(&self, c: usize) -> usize {
        self.region_of[c]
    }

    pub fn income_of(&self, c: usize) -> IncomeGroup {
        self.income_of[c]
    }

    pub fn income_of_code(&self, country: &str) -> Option<IncomeGroup> {
        self.position(country).map(|c| self.income_of[c])
    }
}

fn read_pairs(path: &Path, key: &str, value: &str) -> Result<Vec<(String, String)>> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let ki = header_index(path, &headers, key)?;
    let vi = header_index(path, &headers, value)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        out.push((rec[ki].to_string(), rec[vi].to_string()));
    }
    Ok(out)
}

/// Covariates before transformation, dense over `[k][c][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCovariates {
    pub names: Vec<String>,
    pub n_countries: usize,
    pub window: YearWindow,
    /// Flat `[k][c][t]`.
    pub values: Vec<f64>,
}

impl RawCovariates {
    pub fn get(&self, k: usize, c: usize, t: usize) -> f64 {
        self.values[(k * self.n_countries + c) * self.window.len() + t]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Reads the long-format `covariates.csv` (covariate, country, year, value).
    /// Rows for unknown countries or years outside the window are ignored;
    /// any missing `(k, c, t)` cell is an error.
    pub fn load(path: &Path, index: &CountryIndex, window: YearWindow) -> Result<Self> {
        let mut reader = open_reader(path)?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let ki = header_index(path, &headers, "covariate")?;
        let ci = header_index(path, &headers, "country")?;
        let yi = header_index(path, &headers, "year")?;
        let vi = header_index(path, &headers, "value")?;
        let mut cells: BTreeMap<String, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let Some(c) = index.position(&rec[ci]) else { continue };
            let year: i32 = rec[yi]
                .parse()
                .map_err(|_| Error::Data(format!("{}: row {}: bad year", path.display(), row + 1)))?;
            let Some(t) = window.offset(year) else { continue };
            let value: f64 = rec[vi].parse().map_err(|_| {
                Error::Data(format!("{}: row {}: bad value `{}`", path.display(), row + 1, &rec[vi]))
            })?;
            cells.entry(rec[ki].to_string()).or_default().insert((c, t), value);
        }
        let names: Vec<String> = cells.keys().cloned().collect();
        let (nc, nt) = (index.len(), window.len());
        let mut values = Vec::with_capacity(names.len() * nc * nt);
        for name in &names {
            let m = &cells[name];
            for c in 0..nc {
                for t in 0..nt {
                    let v = m.get(&(c, t)).copied().ok_or_else(|| Error::Covariate {
                        covariate: name.clone(),
                        reason: format!(
                            "missing value for {} in {}",
                            index.countries[c],
                            window.start + t as i32
                        ),
                    })?;
                    values.push(v);
                }
            }
        }
        Ok(RawCovariates { names, n_countries: nc, window, values })
    }
}

/// Standardized covariates `X[k, c, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub names: Vec<String>,
    pub n_countries: usize,
    pub n_years: usize,
    /// Flat `[k][c][t]`.
    pub values: Vec<f64>,
    /// Mean of each (possibly log-transformed) covariate before scaling.
    pub center: Vec<f64>,
    /// Population standard deviation before scaling.
    pub raw_sd: Vec<f64>,
    pub log_transformed: Vec<bool>,
}

impl CovariateMatrix {
    pub fn n_covariates(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn get(&self, k: usize, c: usize, t: usize) -> f64 {
        self.values[(k * self.n_countries + c) * self.n_years + t]
    }

    /// Per-country means over the window, flat `[c][k]`.
    pub fn country_means(&self) -> Vec<f64> {
        let k_n = self.n_covariates();
        let mut out = vec![0.0; self.n_countries * k_n];
        for c in 0..self.n_countries {
            for k in 0..k_n {
                let row = &self.values[(k * self.n_countries + c) * self.n_years..][..self.n_years];
                out[c * k_n + k] = row.iter().sum::<f64>() / self.n_years as f64;
            }
        }
        out
    }

    /// Keeps only the covariates in `keep`, in the given order.
    pub fn select(&self, keep: &[usize]) -> CovariateMatrix {
        let block = self.n_countries * self.n_years;
        let mut values = Vec::with_capacity(keep.len() * block);
        for &k in keep {
            values.extend_from_slice(&self.values[k * block..(k + 1) * block]);
        }
        CovariateMatrix {
            names: keep.iter().map(|&k| self.names[k].clone()).collect(),
            n_countries: self.n_countries,
            n_years: self.n_years,
            values,
            center: keep.iter().map(|&k| self.center[k]).collect(),
            raw_sd: keep.iter().map(|&k| self.raw_sd[k]).collect(),
            log_transformed: keep.iter().map(|&k| self.log_transformed[k]).collect(),
        }
    }

    /// Maps standardized values back to the transformed (pre-scaling) scale.
    pub fn destandardize(&self, k: usize, z: f64) -> f64 {
        self.center[k] + self.raw_sd[k] * z
    }
}

/// Which covariates are log-transformed before standardization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub log: BTreeSet<String>,
}

impl TransformSpec {
    pub fn with_log<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        TransformSpec { log: names.into_iter().map(Into::into).collect() }
    }
}

/// Log-transforms flagged covariates, then centers and scales each one to
/// unit population standard deviation over all country-years.
pub fn standardize_covariates(raw: &RawCovariates, spec: &TransformSpec) -> Result<CovariateMatrix> {
    let (nc, nt) = (raw.n_countries, raw.window.len());
    let block = nc * nt;
    let mut values = Vec::with_capacity(raw.values.len());
    let mut center = Vec::with_capacity(raw.names.len());
    let mut raw_sd = Vec::with_capacity(raw.names.len());
    let mut log_transformed = Vec::with_capacity(raw.names.len());
    for (k, name) in raw.names.iter().enumerate() {
        let take_log = spec.log.contains(name);
        let mut col = Vec::with_capacity(block);
        for (cell, &v) in raw.values[k * block..(k + 1) * block].iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Covariate {
                    covariate: name.clone(),
                    reason: format!("non-finite value in cell {}", describe_cell(raw, cell)),
                });
            }
            if take_log {
                if v <= 0.0 {
                    return Err(Error::Covariate {
                        covariate: name.clone(),
                        reason: format!(
                            "log transform of non-positive value {v} in cell {}",
                            describe_cell(raw, cell)
                        ),
                    });
                }
                col.push(v.ln());
            } else {
                col.push(v);
            }
        }
        let (mean, sd) = mean_sd(&col);
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Covariate {
                covariate: name.clone(),
                reason: "zero standard deviation, cannot standardize".into(),
            });
        }
        values.extend(col.iter().map(|x| (x - mean) / sd));
        center.push(mean);
        raw_sd.push(sd);
        log_transformed.push(take_log);
    }
    Ok(CovariateMatrix {
        names: raw.names.clone(),
        n_countries: nc,
        n_years: nt,
        values,
        center,
        raw_sd,
        log_transformed,
    })
}

fn describe_cell(raw: &RawCovariates, cell: usize) -> String {
    let nt = raw.window.len();
    format!("(country #{}, year {})", cell / nt, raw.window.start + (cell % nt) as i32)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Stillbirth counts by gestational-age or birthweight category, with a
/// separate unknown-category count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStillbirthBreakdown {
    pub known: Vec<(String, f64)>,
    pub unknown: f64,
}

impl RawStillbirthBreakdown {
    pub fn total(&self) -> f64 {
        self.known_total() + self.unknown
    }

    pub fn known_total(&self) -> f64 {
        self.known.iter().map(|(_, v)| v).sum()
    }

    pub fn count(&self, category: &str) -> Option<f64> {
        self.known.iter().find(|(c, _)| c == category).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Redistribution {
    Redistributed(RawStillbirthBreakdown),
    /// Too large a share of unknowns; the observation is dropped upstream.
    Excluded { unknown_fraction: f64 },
}

/// Spreads unknown-category stillbirths over known categories in proportion
/// to their counts. Counts stay real-valued; nothing is re-rounded.
pub fn redistribute_unknowns(breakdown: &RawStillbirthBreakdown) -> Result<Redistribution> {
    if breakdown.unknown < 0.0 || breakdown.known.iter().any(|(_, v)| *v < 0.0) {
        return Err(Error::Data("stillbirth breakdown has negative counts".into()));
    }
    let total = breakdown.total();
    let known = breakdown.known_total();
    if known <= 0.0 {
        return Ok(Redistribution::Excluded { unknown_fraction: if total > 0.0 { 1.0 } else { f64::NAN } });
    }
    let unknown_fraction = breakdown.unknown / total;
    if unknown_fraction > MAX_UNKNOWN_FRACTION {
        return Ok(Redistribution::Excluded { unknown_fraction });
    }
    let factor = total / known;
    Ok(Redistribution::Redistributed(RawStillbirthBreakdown {
        known: breakdown.known.iter().map(|(c, v)| (c.clone(), v * factor)).collect(),
        unknown: 0.0,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str =
        "id,country,year,source_type,definition,sbr,total_births,stillbirth_count,log_se,nmr,live_births\n";

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn ingest(content: &str) -> Ingested {
        let f = write_tmp(content);
        ingest_observations(f.path(), &SchemaConfig::default(), YearWindow::default()).unwrap()
    }

    #[test]
    fn clean_three_rows() {
        let got = ingest(&format!(
            "{HEADER}1,AAA,2001,admin,ge28wks,10.0,1000,10,,5,990\n\
             2,AAA,2002,survey,7months,12.5,,,0.2,,\n\
             3,BBB,2010,hmis,ge22wks,8,,,,,\n"
        ));
        assert_eq!(got.observations.len(), 3);
        assert!(got.report.is_empty());
        assert_eq!(got.observations[1].definition, Definition::Ge28Weeks);
        assert_eq!(got.observations[1].log_se, Some(0.2));
        assert_eq!(got.observations[0].total_births, Some(1000.0));
    }

    #[test]
    fn negative_sbr_is_rejected() {
        let got = ingest(&format!(
            "{HEADER}1,AAA,2001,admin,ge28wks,10.0,,,,,\n\
             2,AAA,2002,admin,ge28wks,-1,,,,,\n\
             3,AAA,2003,admin,ge28wks,9.0,,,,,\n"
        ));
        assert_eq!(got.observations.len(), 2);
        assert_eq!(got.report.len(), 1);
        let r = &got.report.rejections[0];
        assert_eq!(r.row, 2);
        assert_eq!(r.column, "sbr");
        assert!(r.reason.contains("positive"));
    }

    #[test]
    fn consistency_rule() {
        let ok = ingest(&format!("{HEADER}1,AAA,2001,admin,ge28wks,10.0,1000,10,,,\n"));
        assert_eq!(ok.observations.len(), 1);
        let ok = ingest(&format!("{HEADER}1,AAA,2001,admin,ge28wks,10.5,1000,10,,,\n"));
        assert_eq!(ok.observations.len(), 1);
        let bad = ingest(&format!("{HEADER}1,AAA,2001,admin,ge28wks,10.6,1000,10,,,\n"));
        assert_eq!(bad.observations.len(), 0);
        assert_eq!(bad.report.rejections[0].column, "sbr");
    }

    #[test]
    fn out_of_window_and_unparseable() {
        let got = ingest(&format!(
            "{HEADER}1,AAA,1995,admin,ge28wks,10.0,,,,,\n\
             x,AAA,2001,admin,ge28wks,10.0,,,,,\n\
             3,AAA,2001,radio,ge28wks,10.0,,,,,\n\
             4,AAA,2001,admin,ge28wks,abc,,,,,\n"
        ));
        assert!(got.observations.is_empty());
        let cols: Vec<_> = got.report.rejections.iter().map(|r| r.column.as_str()).collect();
        assert_eq!(cols, ["year", "id", "source_type", "sbr"]);
    }

    #[test]
    fn missing_required_column() {
        let f = write_tmp("id,country,year,source_type,definition\n1,AAA,2001,admin,ge28wks\n");
        let err = ingest_observations(f.path(), &SchemaConfig::default(), YearWindow::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingColumn { ref column, .. } if column == "sbr"));
    }

    #[test]
    fn custom_schema_mapping() {
        let f = write_tmp("obs,iso,yr,src,def,rate\n7,AAA,2005,survey,ge28wks,20\n");
        let schema = SchemaConfig {
            id: "obs".into(),
            country: "iso".into(),
            year: "yr".into(),
            source_type: "src".into(),
            definition: "def".into(),
            sbr: "rate".into(),
            ..SchemaConfig::default()
        };
        let got = ingest_observations(f.path(), &schema, YearWindow::default()).unwrap();
        assert_eq!(got.observations[0].id, 7);
        assert_eq!(got.observations[0].log_se, None);
    }

    fn breakdown(known: &[(&str, f64)], unknown: f64) -> RawStillbirthBreakdown {
        RawStillbirthBreakdown {
            known: known.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
            unknown,
        }
    }

    #[test]
    fn redistribution_identity() {
        let b = breakdown(&[("28wk", 80.0), ("22-27wk", 20.0)], 0.0);
        assert_eq!(redistribute_unknowns(&b).unwrap(), Redistribution::Redistributed(b));
    }

    #[test]
    fn redistribution_proportional() {
        let b = breakdown(&[("28wk", 60.0), ("22-27wk", 20.0)], 20.0);
        let Redistribution::Redistributed(out) = redistribute_unknowns(&b).unwrap() else {
            panic!("expected redistribution")
        };
        assert!((out.count("28wk").unwrap() - 75.0).abs() < 1e-12);
        assert!((out.count("22-27wk").unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(out.unknown, 0.0);
    }

    #[test]
    fn redistribution_excludes_majority_unknown() {
        let b = breakdown(&[("28wk", 40.0)], 60.0);
        match redistribute_unknowns(&b).unwrap() {
            Redistribution::Excluded { unknown_fraction } => assert!((unknown_fraction - 0.6).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
        let all_unknown = breakdown(&[("28wk", 0.0)], 10.0);
        assert!(matches!(
            redistribute_unknowns(&all_unknown).unwrap(),
            Redistribution::Excluded { .. }
        ));
        // exactly half unknown is still redistributed
        let half = breakdown(&[("28wk", 50.0)], 50.0);
        assert!(matches!(redistribute_unknowns(&half).unwrap(), Redistribution::Redistributed(_)));
    }

    fn raw_single(names: &[&str], cols: &[Vec<f64>]) -> RawCovariates {
        // one country, len(col) years
        let n = cols[0].len();
        RawCovariates {
            names: names.iter().map(|s| s.to_string()).collect(),
            n_countries: 1,
            window: YearWindow::new(2000, 2000 + n as i32 - 1).unwrap(),
            values: cols.concat(),
        }
    }

    #[test]
    fn standardize_log_column() {
        let e = std::f64::consts::E;
        let raw = raw_single(&["x"], &[vec![1.0, e, e * e]]);
        let m = standardize_covariates(&raw, &TransformSpec::with_log(["x"])).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (t, want) in expected.iter().enumerate() {
            assert!((m.get(0, 0, t) - want).abs() < 1e-12);
        }
        assert!((m.raw_sd[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_fails() {
        let raw = raw_single(&["flat"], &[vec![3.0, 3.0, 3.0]]);
        let err = standardize_covariates(&raw, &TransformSpec::default()).unwrap_err();
        assert!(matches!(err, Error::Covariate { ref covariate, .. } if covariate == "flat"));
    }

    #[test]
    fn standardize_rejects_nonpositive_under_log() {
        let raw = raw_single(&["gni"], &[vec![1.0, 0.0, 2.0]]);
        let err = standardize_covariates(&raw, &TransformSpec::with_log(["gni"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gni") && msg.contains("2001"), "{msg}");
    }

    #[test]
    fn standardize_is_idempotent() {
        let raw = raw_single(&["x"], &[vec![0.3, -1.2, 4.0, 2.2, -0.5]]);
        let once = standardize_covariates(&raw, &TransformSpec::default()).unwrap();
        let again = standardize_covariates(
            &RawCovariates { values: once.values.clone(), ..raw.clone() },
            &TransformSpec::default(),
        )
        .unwrap();
        for (a, b) in once.values.iter().zip(&again.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn country_index_ordering() {
        let idx = CountryIndex::new(&[
            ("ZZZ".into(), "south".into(), IncomeGroup::LowMiddle),
            ("AAA".into(), "north".into(), IncomeGroup::High),
            ("MMM".into(), "south".into(), IncomeGroup::High),
        ])
        .unwrap();
        assert_eq!(idx.countries, ["AAA", "MMM", "ZZZ"]);
        assert_eq!(idx.regions, ["north", "south"]);
        assert_eq!(idx.region_of(2), 1);
        assert_eq!(idx.position("MMM"), Some(1));
        assert_eq!(idx.income_of(0), IncomeGroup::High);
        assert!(CountryIndex::new(&[
            ("A".into(), "r".into(), IncomeGroup::High),
            ("A".into(), "s".into(), IncomeGroup::High),
        ])
        .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn redistribution_preserves_total_and_proportions(
                a in 1.0f64..1e4, b in 0.0f64..1e4, frac in 0.0f64..0.5,
            ) {
                let unknown = frac / (1.0 - frac) * (a + b);
                let bd = breakdown(&[("x", a), ("y", b)], unknown);
                let Redistribution::Redistributed(out) = redistribute_unknowns(&bd).unwrap() else {
                    panic!("excluded")
                };
                prop_assert!((out.total() - bd.total()).abs() <= 1e-9 * bd.total());
                let (x, y) = (out.count("x").unwrap(), out.count("y").unwrap());
                prop_assert!((x * b - y * a).abs() <= 1e-9 * (a * b + 1.0) * 10.0);
            }

            #[test]
            fn standardization_inverts(vals in proptest::collection::vec(0.01f64..100.0, 3..30)) {
                prop_assume!(vals.iter().any(|v| (v - vals[0]).abs() > 1e-3));
                let raw = raw_single(&["v"], &[vals.clone()]);
                let m = standardize_covariates(&raw, &TransformSpec::with_log(["v"])).unwrap();
                for (t, v) in vals.iter().enumerate() {
                    prop_assert!((m.destandardize(0, m.get(0, 0, t)) - v.ln()).abs() < 1e-9);
                }
                let (mean, sd) = mean_sd(&m.values);
                prop_assert!(mean.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
            }
        }
    }
}
