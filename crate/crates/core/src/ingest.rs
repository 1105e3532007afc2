//! Panel and covariate loading, epidemiological-time alignment and per-100k
//! normalization.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::curve::RawCurve;
use crate::error::{Error, Result};
use crate::fosr::DesignMatrix;

/// Covariate columns in model order.
pub const COVARIATE_COLUMNS: [&str; 11] = [
    "area",
    "elevation",
    "pop_piped_water",
    "pop_solid_waste",
    "pop_elec_power",
    "pop_older65",
    "econ_act_pop",
    "vul_elderly_pop",
    "illiteracy_rate",
    "extr_pover_rate",
    "hdi",
];

const PANEL_COLUMNS: [&str; 5] = ["city_id", "date", "cum_cases", "cum_deaths", "population"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CityseriesRecord {
    pub city_id: String,
    pub date: NaiveDate,
    pub cum_cases: u64,
    pub cum_deaths: u64,
    pub population: u64,
}

/// Parsed panel, sorted by `(city_id, date)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub records: Vec<CityseriesRecord>,
    /// Number of `(city, date)` rows overwritten by a later duplicate.
    pub duplicates: usize,
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<Panel> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(file, &path.display().to_string())
}

/// Reads a panel from any reader; `source` names it in error messages.
pub fn read_panel<R: Read>(reader: R, source: &str) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let cols = locate_columns(&header, &PANEL_COLUMNS, source)?;

    let mut by_key: BTreeMap<(String, NaiveDate), CityseriesRecord> = BTreeMap::new();
    let mut duplicates = 0;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(source, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| row.get(cols[k]).unwrap_or("");
        let bad = |msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let city_id = field(0).to_string();
        if city_id.is_empty() {
            return Err(bad("empty city_id".into()));
        }
        let date = NaiveDate::parse_from_str(field(1), "%Y-%m-%d")
            .map_err(|e| bad(format!("bad date `{}`: {e}", field(1))))?;
        let count = |k: usize| {
            field(k)
                .parse::<u64>()
                .map_err(|_| bad(format!("bad {} `{}`", PANEL_COLUMNS[k], field(k))))
        };
        let rec = CityseriesRecord {
            city_id: city_id.clone(),
            date,
            cum_cases: count(2)?,
            cum_deaths: count(3)?,
            population: count(4)?,
        };
        if by_key.insert((city_id, date), rec).is_some() {
            duplicates += 1;
        }
    }
    if duplicates > 0 {
        log::warn!("{source}: {duplicates} duplicate (city, date) rows, later rows kept");
    }
    Ok(Panel {
        records: by_key.into_values().collect(),
        duplicates,
    })
}

/// Inclusion thresholds for [`align_epidemic_time`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub case_threshold: u64,
    pub death_threshold: u64,
    /// Minimum number of reported dates strictly after day 0.
    pub min_days: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            case_threshold: 240,
            death_threshold: 5,
            min_days: 240,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExclusionReason {
    CaseThreshold,
    DeathThreshold,
    Population,
    TooShort,
}

impl ExclusionReason {
    pub fn code(self) -> &'static str {
        match self {
            ExclusionReason::CaseThreshold => "case-threshold",
            ExclusionReason::DeathThreshold => "death-threshold",
            ExclusionReason::Population => "population",
            ExclusionReason::TooShort => "too-short",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub city_id: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Per-city curves of deaths per 100k against days since day 0, sorted by id.
    pub curves: Vec<RawCurve>,
    pub exclusions: Vec<Exclusion>,
    /// Day 0 of each included city, parallel to `curves`.
    pub day_zero: Vec<NaiveDate>,
}

/// Aligns each city to its own epidemiological time. Reporting gaps are
/// forward-filled day by day.
pub fn align_epidemic_time(records: &[CityseriesRecord], config: &AlignConfig) -> Result<Alignment> {
    let mut cities: BTreeMap<&str, Vec<&CityseriesRecord>> = BTreeMap::new();
    for r in records {
        cities.entry(r.city_id.as_str()).or_default().push(r);
    }
    let mut out = Alignment {
        curves: Vec::new(),
        exclusions: Vec::new(),
        day_zero: Vec::new(),
    };
    for (id, mut recs) in cities {
        recs.sort_by_key(|r| r.date);
        match align_city(id, &recs, config)? {
            Ok((curve, d0)) => {
                out.curves.push(curve);
                out.day_zero.push(d0);
            }
            Err(reason) => out.exclusions.push(Exclusion {
                city_id: id.to_string(),
                reason,
            }),
        }
    }
    Ok(out)
}

type CityOutcome = std::result::Result<(RawCurve, NaiveDate), ExclusionReason>;

fn align_city(id: &str, recs: &[&CityseriesRecord], config: &AlignConfig) -> Result<CityOutcome> {
    let Some(start) = recs.iter().position(|r| r.cum_cases >= config.case_threshold) else {
        return Ok(Err(ExclusionReason::CaseThreshold));
    };
    if recs.iter().map(|r| r.cum_deaths).max().unwrap_or(0) < config.death_threshold {
        return Ok(Err(ExclusionReason::DeathThreshold));
    }
    let population = recs.last().map_or(0, |r| r.population);
    if population == 0 {
        return Ok(Err(ExclusionReason::Population));
    }
    if recs.len() - start - 1 < config.min_days {
        return Ok(Err(ExclusionReason::TooShort));
    }
    let d0 = recs[start].date;
    let scale = 1e5 / population as f64;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for pair in recs[start..].windows(2) {
        let (cur, next) = (pair[0], pair[1]);
        let from = (cur.date - d0).num_days();
        let to = (next.date - d0).num_days();
        for day in from..to {
            times.push(day as f64);
            values.push(cur.cum_deaths as f64 * scale);
        }
    }
    let last = recs[recs.len() - 1];
    times.push((last.date - d0).num_days() as f64);
    values.push(last.cum_deaths as f64 * scale);
    Ok(Ok((RawCurve::new(id, times, values)?, d0)))
}

/// Covariates of the included cities with their standardized design.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    ids: Vec<String>,
    raw: Vec<Vec<f64>>,
    design: DesignMatrix,
}

impl CovariateTable {
    /// Standardizes `rows` (one per id, columns in [`COVARIATE_COLUMNS`] order).
    pub fn new(ids: Vec<String>, raw: Vec<Vec<f64>>) -> Result<Self> {
        let names = COVARIATE_COLUMNS.iter().map(|s| s.to_string()).collect();
        let design = DesignMatrix::standardize(ids.clone(), names, &raw)?;
        Ok(CovariateTable { ids, raw, design })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw(&self) -> &[Vec<f64>] {
        &self.raw
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn into_design(self) -> DesignMatrix {
        self.design
    }

    pub fn standardize(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.design.standardization().apply(raw)
    }

    pub fn unstandardize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.design.standardization().invert(z)
    }
}

pub fn load_covariates(path: impl AsRef<Path>, ids: &[String]) -> Result<CovariateTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_covariates(file, &path.display().to_string(), ids)
}

/// Reads covariates and restricts them to `ids`, in that order.
pub fn read_covariates<R: Read>(reader: R, source: &str, ids: &[String]) -> Result<CovariateTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(source, e))?.clone();
    let mut wanted = vec!["city_id"];
    wanted.extend(COVARIATE_COLUMNS);
    let cols = locate_columns(&header, &wanted, source)?;

    let needed: HashSet<&str> = ids.iter().map(String::as_str).collect();
    let mut found: HashMap<String, Vec<f64>> = HashMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_error(source, e))?;
        let id = row.get(cols[0]).unwrap_or("");
        if !needed.contains(id) {
            continue;
        }
        let line = row.position().map_or(0, |p| p.line() as usize);
        let mut values = Vec::with_capacity(COVARIATE_COLUMNS.len());
        for (k, name) in COVARIATE_COLUMNS.iter().enumerate() {
            let s = row.get(cols[k + 1]).unwrap_or("");
            let v: f64 = s.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line,
                msg: format!("bad {name} `{s}` for city {id}"),
            })?;
            values.push(v);
        }
        found.insert(id.to_string(), values);
    }
    let missing: Vec<String> = ids.iter().filter(|id| !found.contains_key(*id)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let raw = ids.iter().map(|id| found[id].clone()).collect();
    CovariateTable::new(ids.to_vec(), raw)
}

fn locate_columns(header: &csv::StringRecord, wanted: &[&str], source: &str) -> Result<Vec<usize>> {
    let mut missing = Vec::new();
    let cols: Vec<usize> = wanted
        .iter()
        .map(|w| {
            header.iter().position(|h| h == *w).unwrap_or_else(|| {
                missing.push(*w);
                0
            })
        })
        .collect();
    if missing.is_empty() {
        Ok(cols)
    } else {
        Err(Error::Schema {
            path: source.to_string(),
            msg: format!("missing columns: {}", missing.join(", ")),
        })
    }
}

pub(crate) fn csv_error(source: &str, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: source.to_string(),
        line,
        msg: e.to_string(),
    }
}
