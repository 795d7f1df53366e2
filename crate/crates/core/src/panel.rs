//! Panel domain types: the units × dates grid of cumulative counts, the
//! treatment window, and per-unit rate series derived from them.

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cross-sectional unit (a county).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    /// Stable key: the FIPS code when known, otherwise the county name.
    pub id: String,
    pub county: String,
    pub state: String,
    pub fips: Option<String>,
    pub population: u64,
}

/// Balanced panel of cumulative case counts.
///
/// All units share one strictly increasing date axis; counts are
/// nondecreasing along it and every population is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    units: Vec<Unit>,
    dates: Vec<NaiveDate>,
    cumulative: Vec<Vec<u64>>,
}

impl PanelDataset {
    pub fn new(units: Vec<Unit>, dates: Vec<NaiveDate>, cumulative: Vec<Vec<u64>>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Empty("panel"));
        }
        if dates.is_empty() {
            return Err(Error::Empty("date axis"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("dates must be strictly increasing"));
        }
        if cumulative.len() != units.len() {
            return Err(Error::invalid(format!(
                "{} count rows for {} units",
                cumulative.len(),
                units.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (unit, row) in units.iter().zip(&cumulative) {
            if !seen.insert(unit.id.as_str()) {
                return Err(Error::invalid(format!("duplicate unit id {:?}", unit.id)));
            }
            if unit.population == 0 {
                return Err(Error::invalid(format!("population of {} is zero", unit.id)));
            }
            if row.len() != dates.len() {
                return Err(Error::invalid(format!(
                    "unit {} has {} counts for {} dates",
                    unit.id,
                    row.len(),
                    dates.len()
                )));
            }
            for (t, w) in row.windows(2).enumerate() {
                if w[1] < w[0] {
                    return Err(Error::NonMonotone {
                        unit: unit.id.clone(),
                        date: dates[t + 1].to_string(),
                        prev: w[0],
                        next: w[1],
                    });
                }
            }
        }
        Ok(Self {
            units,
            dates,
            cumulative,
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_index(&self, id: &str) -> Option<usize> {
        self.units.iter().position(|u| u.id == id)
    }

    pub fn unit(&self, id: &str) -> Result<&Unit> {
        self.units
            .iter()
            .find(|u| u.id == id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))
    }

    /// Cumulative counts of the unit at `index`.
    pub fn counts(&self, index: usize) -> &[u64] {
        &self.cumulative[index]
    }

    /// Raw cumulative counts of one unit as a series.
    pub fn count_series(&self, id: &str) -> Result<RateSeries> {
        let idx = self
            .unit_index(id)
            .ok_or_else(|| Error::UnknownUnit(id.to_string()))?;
        Ok(RateSeries {
            unit_id: id.to_string(),
            dates: self.dates.clone(),
            rates: self.cumulative[idx].iter().map(|&c| c as f64).collect(),
        })
    }

    /// Resolve a unit by id, FIPS code or county name (case-insensitive).
    pub fn resolve(&self, key: &str) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == key).or_else(|| {
            self.units.iter().find(|u| {
                u.fips.as_deref() == Some(key) || u.county.eq_ignore_ascii_case(key)
            })
        })
    }

    /// Re-check the invariants, e.g. after deserializing.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.units, self.dates, self.cumulative)
    }

    /// Restrict the panel to a subset of units, preserving order.
    pub fn retain_units(&self, keep: impl Fn(&Unit) -> bool) -> Result<Self> {
        let (units, cumulative): (Vec<_>, Vec<_>) = self
            .units
            .iter()
            .zip(&self.cumulative)
            .filter(|(u, _)| keep(u))
            .map(|(u, c)| (u.clone(), c.clone()))
            .unzip();
        Self::new(units, self.dates.clone(), cumulative)
    }
}

/// A per-unit time series on a date axis.
///
/// Derived from cumulative counts the values are per-capita infection rates
/// (times the scale passed to [`to_rates`]); the same type carries raw counts
/// and synthetic-control composites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    pub unit_id: String,
    pub dates: Vec<NaiveDate>,
    pub rates: Vec<f64>,
}

impl RateSeries {
    pub fn new(unit_id: impl Into<String>, dates: Vec<NaiveDate>, rates: Vec<f64>) -> Result<Self> {
        if dates.len() != rates.len() {
            return Err(Error::invalid("series dates and values differ in length"));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("series dates must be strictly increasing"));
        }
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("rate series"));
        }
        Ok(Self {
            unit_id: unit_id.into(),
            dates,
            rates,
        })
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Sub-series with `from <= date < until`.
    pub fn window(&self, from: Option<NaiveDate>, until: Option<NaiveDate>) -> RateSeries {
        let (dates, rates) = self
            .dates
            .iter()
            .zip(&self.rates)
            .filter(|(d, _)| from.is_none_or(|f| **d >= f) && until.is_none_or(|u| **d < u))
            .map(|(d, r)| (*d, *r))
            .unzip();
        RateSeries {
            unit_id: self.unit_id.clone(),
            dates,
            rates,
        }
    }

    /// Drop leading zero values (dates before the first reported case).
    pub fn trim_leading_zeros(&self) -> RateSeries {
        let first = self.rates.iter().position(|&r| r != 0.0).unwrap_or(self.len());
        RateSeries {
            unit_id: self.unit_id.clone(),
            dates: self.dates[first..].to_vec(),
            rates: self.rates[first..].to_vec(),
        }
    }

    /// Number of pre-treatment observations under `spec`.
    pub fn pre_treatment_len(&self, spec: &TreatmentSpec) -> usize {
        self.dates.iter().filter(|d| **d < spec.effective_start).count()
    }
}

/// Day offsets of each date relative to the first one.
pub fn day_offsets(dates: &[NaiveDate]) -> Vec<f64> {
    match dates.first() {
        Some(&d0) => dates.iter().map(|d| (*d - d0).num_days() as f64).collect(),
        None => Vec::new(),
    }
}

fn default_lag() -> u32 {
    7
}

/// The intervention: which unit, when it was issued and the window it was in force.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreatmentSpec {
    pub treated_unit: String,
    pub issue_date: NaiveDate,
    pub effective_start: NaiveDate,
    pub effective_end: NaiveDate,
    #[serde(default = "default_lag")]
    pub post_lag_days: u32,
}

impl TreatmentSpec {
    pub fn new(
        treated_unit: impl Into<String>,
        issue_date: NaiveDate,
        effective_start: NaiveDate,
        effective_end: NaiveDate,
        post_lag_days: u32,
    ) -> Result<Self> {
        let spec = Self {
            treated_unit: treated_unit.into(),
            issue_date,
            effective_start,
            effective_end,
            post_lag_days,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.issue_date > self.effective_start {
            return Err(Error::invalid("issue date falls after the effective start"));
        }
        if self.effective_start >= self.effective_end {
            return Err(Error::invalid("effective start must precede effective end"));
        }
        Ok(())
    }

    /// Validate and check that the treated unit exists in `panel`.
    pub fn validate_against(&self, panel: &PanelDataset) -> Result<()> {
        self.validate()?;
        panel.unit(&self.treated_unit).map(|_| ())
    }

    /// Last date labelled as treatment: effective end plus the lag.
    pub fn treatment_end(&self) -> NaiveDate {
        self.effective_end + Duration::days(i64::from(self.post_lag_days))
    }

    pub fn label(&self, date: NaiveDate) -> PeriodLabel {
        if date < self.effective_start {
            PeriodLabel::Pre
        } else if date <= self.treatment_end() {
            PeriodLabel::Treatment
        } else {
            PeriodLabel::Post
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodLabel {
    Pre,
    Treatment,
    Post,
}

impl PeriodLabel {
    /// The binary time dummy of the DID regression.
    pub fn time_dummy(self) -> f64 {
        if self == PeriodLabel::Treatment {
            1.0
        } else {
            0.0
        }
    }
}

/// Label every date as pre-treatment, treatment (lag included) or post.
pub fn period_mask(spec: &TreatmentSpec, dates: &[NaiveDate]) -> Result<Vec<PeriodLabel>> {
    spec.validate()?;
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("dates must be sorted"));
    }
    let labels: Vec<PeriodLabel> = dates.iter().map(|d| spec.label(*d)).collect();
    if !labels.contains(&PeriodLabel::Treatment) {
        return Err(Error::WindowOutsideAxis);
    }
    Ok(labels)
}

/// Per-capita rates `scale * cumulative / population` for every unit.
pub fn to_rates(panel: &PanelDataset, scale: f64) -> Result<Vec<RateSeries>> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!("rate scale must be positive, got {scale}")));
    }
    Ok(panel
        .units
        .iter()
        .zip(&panel.cumulative)
        .map(|(unit, counts)| {
            let pop = unit.population as f64;
            RateSeries {
                unit_id: unit.id.clone(),
                dates: panel.dates.clone(),
                rates: counts.iter().map(|&c| scale * c as f64 / pop).collect(),
            }
        })
        .collect())
}

/// Pointwise mean across series sharing one date axis.
///
/// Summation runs in unit-id order so the result does not depend on the
/// order of `series`.
pub fn group_mean_series(series: &[RateSeries]) -> Result<RateSeries> {
    let first = series.first().ok_or(Error::Empty("series list"))?;
    if series.iter().any(|s| s.dates != first.dates) {
        return Err(Error::invalid("series do not share a date axis"));
    }
    let mut ordered: Vec<&RateSeries> = series.iter().collect();
    ordered.sort_by(|a, b| {
        a.unit_id.cmp(&b.unit_id).then_with(|| {
            a.rates
                .iter()
                .zip(&b.rates)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let n = ordered.len() as f64;
    let rates = (0..first.len())
        .map(|t| ordered.iter().map(|s| s.rates[t]).sum::<f64>() / n)
        .collect();
    let id = if series.len() == 1 {
        first.unit_id.clone()
    } else {
        format!("mean of {} units", series.len())
    };
    Ok(RateSeries {
        unit_id: id,
        dates: first.dates.clone(),
        rates,
    })
}
