//! Readers for the NYT-format case file, the county covariate file and the
//! optional poverty-rate override file.
//!
//! Parsing is split from file access: every `parse_*` function takes any
//! [`Read`] and a label used in error messages, so the same code path serves
//! files, in-memory buffers and the fuzz targets.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, Unit};

pub const CASE_HEADER: [&str; 6] = ["date", "county", "state", "fips", "cases", "deaths"];

/// Longest date axis accepted from a case file (about 27 years of days).
const MAX_AXIS_DAYS: i64 = 10_000;

/// Covariates considered by default, in the order they are listed for the
/// covariate-selection GLM.
pub const DEFAULT_COVARIATES: [&str; 13] = [
    "male_pct",
    "poverty_rate",
    "juvenile_pct",
    "senior_pct",
    "pop_density",
    "diabetes_pct",
    "svi",
    "fte_needed",
    "medicare_eligible",
    "dem_rep_ratio",
    "hospitals",
    "respiratory_mortality",
    "heart_mortality",
];

/// How to treat decreases in a cumulative count series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairPolicy {
    /// Replace the count with the running maximum.
    #[default]
    Clamp,
    Fail,
}

impl std::str::FromStr for RepairPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "clamp" => Ok(Self::Clamp),
            "fail" => Ok(Self::Fail),
            other => Err(Error::invalid(format!("unknown repair policy {other:?}"))),
        }
    }
}

/// One line of the completeness report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletenessRecord {
    pub unit: String,
    pub issue: String,
    pub action: String,
}

impl CompletenessRecord {
    fn new(unit: impl Into<String>, issue: impl Into<String>, action: impl Into<String>) -> Self {
        Self {
            unit: unit.into(),
            issue: issue.into(),
            action: action.into(),
        }
    }
}

/// Write records as JSON lines.
pub fn write_completeness_jsonl<W: Write>(records: &[CompletenessRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// County identity as it appears in the case file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseUnit {
    pub id: String,
    pub county: String,
    pub state: String,
    pub fips: Option<String>,
}

/// Pivoted case counts before populations are attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTable {
    pub units: Vec<CaseUnit>,
    pub dates: Vec<NaiveDate>,
    pub cumulative: Vec<Vec<u64>>,
    pub records: Vec<CompletenessRecord>,
}

fn parse_err(file: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}

fn parse_count(s: &str) -> Option<u64> {
    let s = s.trim();
    s.parse::<u64>().ok().or_else(|| {
        // some feeds write integral counts as "12.0"
        let v: f64 = s.parse().ok()?;
        (v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 9.0e15).then_some(v as u64)
    })
}

fn unit_key(fips: &Option<String>, county: &str) -> String {
    fips.clone().unwrap_or_else(|| county.to_string())
}

/// Parse an NYT-format case file, keeping rows of `state` (case-insensitive).
///
/// The result is a balanced panel: a contiguous daily axis from the first to
/// the last date seen, counts zero-filled before a county's first row and
/// carried forward over interior gaps. Rows for the "Unknown" county carry no
/// location and are skipped.
pub fn parse_case_csv<R: Read>(reader: R, label: &str, state: &str, policy: RepairPolicy) -> Result<CaseTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(label, 1, e.to_string()))?
        .clone();
    let cols: Vec<String> = header.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
    if cols.iter().map(String::as_str).ne(CASE_HEADER.iter().copied()) {
        return Err(parse_err(
            label,
            1,
            format!("expected header {:?}, found {:?}", CASE_HEADER.join(","), cols.join(",")),
        ));
    }

    let mut units: BTreeMap<String, CaseUnit> = BTreeMap::new();
    let mut rows: BTreeMap<(String, NaiveDate), (u64, u64)> = BTreeMap::new();
    let mut records = Vec::new();
    let mut skipped_unknown = 0usize;
    let mut any_row = false;

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(label, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        any_row = true;
        if rec.len() != CASE_HEADER.len() {
            return Err(parse_err(label, line, format!("expected 6 fields, found {}", rec.len())));
        }
        let date = parse_date(&rec[0]).ok_or_else(|| parse_err(label, line, format!("bad date {:?}", &rec[0])))?;
        let county = rec[1].trim();
        let row_state = rec[2].trim();
        let fips = Some(rec[3].trim()).filter(|f| !f.is_empty()).map(str::to_string);
        let cases = parse_count(&rec[4]).ok_or_else(|| parse_err(label, line, format!("bad case count {:?}", &rec[4])))?;
        if !rec[5].trim().is_empty() && parse_count(&rec[5]).is_none() {
            return Err(parse_err(label, line, format!("bad death count {:?}", &rec[5])));
        }
        if !row_state.eq_ignore_ascii_case(state.trim()) {
            continue;
        }
        if county.is_empty() {
            return Err(parse_err(label, line, "empty county name"));
        }
        if county.eq_ignore_ascii_case("unknown") && fips.is_none() {
            skipped_unknown += 1;
            continue;
        }
        let id = unit_key(&fips, county);
        match units.get(&id) {
            Some(u) if u.county != county => {
                return Err(parse_err(
                    label,
                    line,
                    format!("unit {id} named both {:?} and {county:?}", u.county),
                ))
            }
            Some(_) => {}
            None => {
                units.insert(
                    id.clone(),
                    CaseUnit {
                        id: id.clone(),
                        county: county.to_string(),
                        state: row_state.to_string(),
                        fips: fips.clone(),
                    },
                );
            }
        }
        if rows.insert((id.clone(), date), (cases, line)).is_some() {
            return Err(Error::Duplicate {
                unit: id,
                date: date.to_string(),
                file: label.to_string(),
                line,
            });
        }
    }
    if !any_row {
        return Err(parse_err(label, 1, "no data rows"));
    }
    if rows.is_empty() {
        return Err(Error::EmptyPanel(state.to_string()));
    }
    if skipped_unknown > 0 {
        records.push(CompletenessRecord::new(
            "Unknown",
            format!("{skipped_unknown} rows without a county assignment"),
            "skipped",
        ));
    }

    let first = rows.keys().map(|(_, d)| *d).min().expect("nonempty");
    let last = rows.keys().map(|(_, d)| *d).max().expect("nonempty");
    let span = (last - first).num_days();
    if span >= MAX_AXIS_DAYS {
        return Err(Error::TooLarge(format!("date axis spans {span} days")));
    }
    let dates: Vec<NaiveDate> = (0..=span).map(|i| first + Duration::days(i)).collect();

    let mut cumulative = Vec::with_capacity(units.len());
    for id in units.keys() {
        let mut series = vec![0u64; dates.len()];
        let mut seen = false;
        let mut running = 0u64;
        let mut gaps = 0usize;
        for (t, date) in dates.iter().enumerate() {
            match rows.get(&(id.clone(), *date)) {
                Some(&(c, _)) => {
                    if seen && c < running {
                        match policy {
                            RepairPolicy::Fail => {
                                return Err(Error::NonMonotone {
                                    unit: id.clone(),
                                    date: date.to_string(),
                                    prev: running,
                                    next: c,
                                })
                            }
                            RepairPolicy::Clamp => records.push(CompletenessRecord::new(
                                id.as_str(),
                                format!("cumulative count fell from {running} to {c} on {date}"),
                                "clamped to running maximum",
                            )),
                        }
                    }
                    running = running.max(c);
                    seen = true;
                }
                None if seen => gaps += 1,
                None => {}
            }
            series[t] = running;
        }
        if gaps > 0 {
            records.push(CompletenessRecord::new(
                id.as_str(),
                format!("{gaps} interior dates missing"),
                "carried forward",
            ));
        }
        cumulative.push(series);
    }

    Ok(CaseTable {
        units: units.into_values().collect(),
        dates,
        cumulative,
        records,
    })
}

/// Read and parse a case file from disk.
pub fn read_case_csv(path: &Path, state: &str, policy: RepairPolicy) -> Result<CaseTable> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_case_csv(file, &path.display().to_string(), state, policy)
}

/// Populations keyed by FIPS code and by lower-cased county name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopulationTable {
    by_fips: BTreeMap<String, u64>,
    by_name: BTreeMap<String, u64>,
}

impl PopulationTable {
    pub fn insert(&mut self, fips: Option<&str>, county: &str, population: u64) {
        if let Some(f) = fips {
            self.by_fips.insert(f.to_string(), population);
        }
        self.by_name.insert(county.to_ascii_lowercase(), population);
    }

    pub fn lookup(&self, fips: Option<&str>, county: &str) -> Option<u64> {
        fips.and_then(|f| self.by_fips.get(f).copied())
            .or_else(|| self.by_name.get(&county.to_ascii_lowercase()).copied())
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

impl CaseTable {
    /// Attach populations. Units without a positive population are dropped
    /// and listed in the returned records.
    pub fn into_panel(self, populations: &PopulationTable) -> Result<(PanelDataset, Vec<CompletenessRecord>)> {
        let mut records = self.records;
        let mut units = Vec::new();
        let mut cumulative = Vec::new();
        for (u, counts) in self.units.into_iter().zip(self.cumulative) {
            match populations.lookup(u.fips.as_deref(), &u.county) {
                Some(pop) if pop > 0 => {
                    units.push(Unit {
                        id: u.id,
                        county: u.county,
                        state: u.state,
                        fips: u.fips,
                        population: pop,
                    });
                    cumulative.push(counts);
                }
                _ => records.push(CompletenessRecord::new(u.id, "no population", "dropped from panel")),
            }
        }
        let panel = PanelDataset::new(units, self.dates, cumulative)?;
        Ok((panel, records))
    }
}

/// Write a panel in the NYT case format (deaths written as 0).
pub fn write_case_csv<W: Write>(panel: &PanelDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    w.write_record(CASE_HEADER).map_err(io)?;
    for (t, date) in panel.dates().iter().enumerate() {
        for (i, u) in panel.units().iter().enumerate() {
            let cases = panel.counts(i)[t].to_string();
            let date = date.format("%Y-%m-%d").to_string();
            w.write_record([
                date.as_str(),
                u.county.as_str(),
                u.state.as_str(),
                u.fips.as_deref().unwrap_or(""),
                cases.as_str(),
                "0",
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("case csv", e))?;
    Ok(())
}

/// Column layout of the covariate file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub covariates: Vec<String>,
    #[serde(default = "default_population_column")]
    pub population_column: String,
    #[serde(default = "default_poverty_column")]
    pub poverty_column: String,
}

fn default_population_column() -> String {
    "population".into()
}

fn default_poverty_column() -> String {
    "poverty_rate".into()
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            covariates: DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect(),
            population_column: default_population_column(),
            poverty_column: default_poverty_column(),
        }
    }
}

/// One county row of the covariate file; missing cells are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRow {
    pub county: String,
    pub fips: Option<String>,
    pub population: Option<u64>,
    pub values: Vec<Option<f64>>,
}

impl CovariateRow {
    pub fn key(&self) -> String {
        unit_key(&self.fips, &self.county)
    }
}

/// Raw rows as read from the covariate file, columns in `CovariateSpec` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateRows {
    pub names: Vec<String>,
    pub rows: Vec<CovariateRow>,
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s == "-" {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Parse the covariate file. A `county` column is required; `fips` and the
/// population column are optional. Every covariate named in `spec` must be a
/// column.
pub fn parse_covariate_csv<R: Read>(reader: R, label: &str, spec: &CovariateSpec) -> Result<CovariateRows> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(label, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
    let county_col = find("county").ok_or_else(|| parse_err(label, 1, "missing county column"))?;
    let fips_col = find("fips");
    let pop_col = find(&spec.population_column);
    let cov_cols = spec
        .covariates
        .iter()
        .map(|c| find(c).ok_or_else(|| parse_err(label, 1, format!("missing covariate column {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if spec.covariates.iter().collect::<HashSet<_>>().len() != spec.covariates.len() {
        return Err(Error::invalid("covariate names repeat"));
    }

    let mut rows = Vec::new();
    let mut keys = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(label, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let county = rec.get(county_col).unwrap_or("").trim().to_string();
        if county.is_empty() {
            return Err(parse_err(label, line, "empty county name"));
        }
        let fips = fips_col
            .and_then(|c| rec.get(c))
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .map(str::to_string);
        let population = match pop_col.and_then(|c| rec.get(c)).map(str::trim) {
            None | Some("") => None,
            Some(p) => Some(parse_count(p).ok_or_else(|| parse_err(label, line, format!("bad population {p:?}")))?),
        };
        let values = cov_cols
            .iter()
            .map(|&c| rec.get(c).and_then(parse_value))
            .collect();
        let row = CovariateRow {
            county,
            fips,
            population,
            values,
        };
        if !keys.insert(row.key()) {
            return Err(parse_err(label, line, format!("duplicate county {:?}", row.key())));
        }
        rows.push(row);
    }
    Ok(CovariateRows {
        names: spec.covariates.clone(),
        rows,
    })
}

/// One entry of the poverty override file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovertyOverride {
    pub county: String,
    pub poverty_rate: f64,
}

/// Parse `county,poverty_rate`.
pub fn parse_override_csv<R: Read>(reader: R, label: &str) -> Result<Vec<PovertyOverride>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(label, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    if header != ["county", "poverty_rate"] {
        return Err(parse_err(label, 1, "expected header county,poverty_rate"));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(label, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let county = rec.get(0).unwrap_or("").trim();
        let rate = rec
            .get(1)
            .and_then(parse_value)
            .ok_or_else(|| parse_err(label, line, "bad poverty rate"))?;
        if county.is_empty() {
            return Err(parse_err(label, line, "empty county name"));
        }
        out.push(PovertyOverride {
            county: county.to_string(),
            poverty_rate: rate,
        });
    }
    Ok(out)
}

impl CovariateRows {
    /// Replace the poverty column with override values (matched on county name).
    pub fn apply_overrides(&mut self, overrides: &[PovertyOverride], poverty_column: &str) -> Vec<CompletenessRecord> {
        let mut records = Vec::new();
        let Some(col) = self.names.iter().position(|n| n.eq_ignore_ascii_case(poverty_column)) else {
            if !overrides.is_empty() {
                records.push(CompletenessRecord::new(
                    "*",
                    format!("covariate {poverty_column:?} not selected"),
                    "overrides ignored",
                ));
            }
            return records;
        };
        for o in overrides {
            match self
                .rows
                .iter_mut()
                .find(|r| r.county.eq_ignore_ascii_case(&o.county) || r.fips.as_deref() == Some(o.county.as_str()))
            {
                Some(row) => row.values[col] = Some(o.poverty_rate),
                None => records.push(CompletenessRecord::new(
                    o.county.as_str(),
                    "override for a county absent from the covariate file",
                    "ignored",
                )),
            }
        }
        records
    }

    pub fn populations(&self) -> PopulationTable {
        let mut table = PopulationTable::default();
        for r in &self.rows {
            if let Some(p) = r.population {
                table.insert(r.fips.as_deref(), &r.county, p);
            }
        }
        table
    }

    /// Build the normalized table from rows with every covariate present.
    /// Incomplete rows are dropped and reported.
    pub fn into_table(self) -> Result<(CovariateTable, Vec<CompletenessRecord>)> {
        let mut records = Vec::new();
        let mut complete = Vec::new();
        for row in self.rows {
            let missing: Vec<&str> = row
                .values
                .iter()
                .zip(&self.names)
                .filter(|(v, _)| v.is_none())
                .map(|(_, n)| n.as_str())
                .collect();
            if missing.is_empty() {
                complete.push(row);
            } else {
                records.push(CompletenessRecord::new(
                    row.key(),
                    format!("missing covariates: {}", missing.join(", ")),
                    "excluded from covariate models",
                ));
            }
        }
        let values: Vec<Vec<f64>> = (0..self.names.len())
            .map(|k| complete.iter().map(|r| r.values[k].expect("complete")).collect())
            .collect();
        let table = CovariateTable::new(
            complete.iter().map(CovariateRow::key).collect(),
            complete.iter().map(|r| r.county.clone()).collect(),
            self.names,
            values,
        )?;
        Ok((table, records))
    }
}

/// K0 covariates × N units, raw and z-score normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub unit_ids: Vec<String>,
    pub counties: Vec<String>,
    pub covariate_names: Vec<String>,
    /// `values[k][i]`: covariate k of unit i.
    pub values: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn new(unit_ids: Vec<String>, counties: Vec<String>, covariate_names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != covariate_names.len() {
            return Err(Error::invalid("covariate rows and names differ in length"));
        }
        if counties.len() != unit_ids.len() || values.iter().any(|r| r.len() != unit_ids.len()) {
            return Err(Error::invalid("covariate matrix is not K0 x N"));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates"));
        }
        let normalized = values.iter().map(|r| zscore(r)).collect();
        Ok(Self {
            unit_ids,
            counties,
            covariate_names,
            values,
            normalized,
        })
    }

    /// Re-check shapes and recompute the normalized values, e.g. after
    /// deserializing.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.unit_ids, self.counties, self.covariate_names, self.values)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn position(&self, unit: &str) -> Option<usize> {
        self.unit_ids.iter().position(|u| u == unit)
    }

    /// Normalized covariate vector of one unit, restricted to `names`.
    pub fn column(&self, unit: &str, names: &[String]) -> Result<Vec<f64>> {
        let i = self.position(unit).ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        names
            .iter()
            .map(|n| {
                let k = self
                    .covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::invalid(format!("unknown covariate {n:?}")))?;
                Ok(self.normalized[k][i])
            })
            .collect()
    }

    /// Table restricted to `units`, renormalized over that subset.
    pub fn subset(&self, units: &[String]) -> Result<Self> {
        let idx = units
            .iter()
            .map(|u| self.position(u).ok_or_else(|| Error::UnknownUnit(u.clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            idx.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            idx.iter().map(|&i| self.counties[i].clone()).collect(),
            self.covariate_names.clone(),
            self.values.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect(),
        )
    }
}

/// Z-score with the sample standard deviation; constant rows map to zeros.
pub fn zscore(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = row.iter().sum::<f64>() / n as f64;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return vec![0.0; n];
    }
    row.iter().map(|v| (v - mean) / sd).collect()
}

/// Whether a missing covariate row aborts the run or drops the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Drop,
    Fail,
}

/// Panel units with no complete covariate row.
pub fn completeness_report(panel: &PanelDataset, table: &CovariateTable, policy: MissingPolicy) -> Result<Vec<CompletenessRecord>> {
    let by_name: HashMap<String, &str> = table
        .counties
        .iter()
        .zip(&table.unit_ids)
        .map(|(c, id)| (c.to_ascii_lowercase(), id.as_str()))
        .collect();
    let mut records = Vec::new();
    for u in panel.units() {
        let present = table.position(&u.id).is_some() || by_name.contains_key(&u.county.to_ascii_lowercase());
        if !present {
            if policy == MissingPolicy::Fail {
                return Err(Error::invalid(format!("unit {} has no covariates", u.id)));
            }
            records.push(CompletenessRecord::new(
                u.id.as_str(),
                "missing covariates",
                "excluded from covariate models; kept for trend screening",
            ));
        }
    }
    Ok(records)
}

/// Re-key a covariate table onto panel unit ids (matched by id, then county name).
/// Units absent from the panel are dropped.
pub fn align_to_panel(table: &CovariateTable, panel: &PanelDataset) -> Result<CovariateTable> {
    let mut ids = Vec::new();
    let mut counties = Vec::new();
    let mut cols = Vec::new();
    for (i, (id, county)) in table.unit_ids.iter().zip(&table.counties).enumerate() {
        let unit = panel
            .units()
            .iter()
            .find(|u| &u.id == id)
            .or_else(|| panel.units().iter().find(|u| u.county.eq_ignore_ascii_case(county)));
        if let Some(u) = unit {
            ids.push(u.id.clone());
            counties.push(u.county.clone());
            cols.push(i);
        }
    }
    CovariateTable::new(
        ids,
        counties,
        table.covariate_names.clone(),
        table.values.iter().map(|r| cols.iter().map(|&i| r[i]).collect()).collect(),
    )
}

/// Read the covariate file and optional override file, returning the
/// normalized table, the population lookup and completeness records.
pub fn read_covariate_csv(
    path: &Path,
    override_path: Option<&Path>,
    spec: &CovariateSpec,
) -> Result<(CovariateTable, PopulationTable, Vec<CompletenessRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = parse_covariate_csv(file, &path.display().to_string(), spec)?;
    let mut records = Vec::new();
    if let Some(op) = override_path {
        let f = File::open(op).map_err(|e| Error::io(op.display().to_string(), e))?;
        let overrides = parse_override_csv(f, &op.display().to_string())?;
        records.extend(rows.apply_overrides(&overrides, &spec.poverty_column));
    }
    let populations = rows.populations();
    let (table, dropped) = rows.into_table()?;
    records.extend(dropped);
    Ok((table, populations, records))
}
