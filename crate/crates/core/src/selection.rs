//! Control-unit screening by similarity of pre-treatment trends.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::changepoint::{detect_knots, last_segment_trend, Criterion, KnotReport, TrendFit};
use crate::error::{Error, Result};
use crate::panel::{to_rates, PanelDataset, RateSeries, TreatmentSpec};

/// Filters applied to each candidate's last-segment trend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub alpha: f64,
    pub min_adj_r2: f64,
    /// Keep only candidates with `|Δslope| < max_abs_dev`.
    #[serde(default)]
    pub max_abs_dev: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            min_adj_r2: 0.75,
            max_abs_dev: None,
        }
    }
}

/// Which series the knots and trends are fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "scale", rename_all = "lowercase")]
pub enum SeriesBasis {
    /// Raw cumulative counts.
    #[default]
    Counts,
    /// Per-capita rates times the given scale.
    Rates(f64),
}

impl std::str::FromStr for SeriesBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "counts" {
            return Ok(Self::Counts);
        }
        if s == "rates" {
            return Ok(Self::Rates(1.0));
        }
        match s.strip_prefix("rates:").map(str::parse::<f64>) {
            Some(Ok(v)) if v.is_finite() && v > 0.0 => Ok(Self::Rates(v)),
            _ => Err(Error::invalid(format!("unknown series basis {s:?}; use counts, rates or rates:<scale>"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub unit_id: String,
    pub county: String,
    pub slope: f64,
    pub p_value: f64,
    pub adj_r_squared: f64,
    pub abs_deviation: f64,
    pub trend_start: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub unit_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DonorScreen {
    pub treated_unit: String,
    pub treated: TrendFit,
    /// Passing units, ascending by `abs_deviation`, ties by `unit_id`.
    pub candidates: Vec<Candidate>,
    pub rejected: Vec<Rejection>,
    pub thresholds: Thresholds,
}

/// Each unit's series from its first reported case up to the day before
/// `effective_start`.
pub fn pre_treatment_series(panel: &PanelDataset, spec: &TreatmentSpec, basis: SeriesBasis) -> Result<Vec<RateSeries>> {
    let full = match basis {
        SeriesBasis::Counts => panel
            .units()
            .iter()
            .map(|u| panel.count_series(&u.id))
            .collect::<Result<Vec<_>>>()?,
        SeriesBasis::Rates(scale) => to_rates(panel, scale)?,
    };
    Ok(full
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            // trim on the raw counts so tiny rates are not mistaken for zeros
            let first = panel.counts(i).iter().position(|&c| c > 0).unwrap_or(s.len());
            let first_date = s.dates.get(first).copied();
            match first_date {
                Some(d) => s.window(Some(d), Some(spec.effective_start)),
                None => s.window(None, Some(panel.dates()[0])),
            }
        })
        .collect())
}

/// Knot reports for every series, with failures kept per unit.
pub fn detect_all(series: &[RateSeries], max_knots: usize, criterion: Criterion) -> Vec<(String, Result<KnotReport>)> {
    series
        .iter()
        .map(|s| (s.unit_id.clone(), detect_knots(s, max_knots, criterion)))
        .collect()
}

/// Last-segment trend restricted to dates before `effective_start`.
pub fn pre_treatment_trend(report: &KnotReport, spec: &TreatmentSpec) -> Result<TrendFit> {
    let series = RateSeries::new(report.unit_id.clone(), report.dates.clone(), report.observed.clone())?
        .window(None, Some(spec.effective_start));
    let mut clipped = report.clone();
    clipped.knots.retain(|d| *d < spec.effective_start);
    last_segment_trend(&series, &clipped)
}

/// Rank non-treated units by how closely their final pre-treatment trend
/// matches the treated unit's.
///
/// Units without a report, or whose trend cannot be fitted, are listed in
/// `rejected` together with those failing the thresholds.
pub fn screen_donors(panel: &PanelDataset, spec: &TreatmentSpec, reports: &[KnotReport], thresholds: Thresholds) -> Result<DonorScreen> {
    if !(0.0..=1.0).contains(&thresholds.alpha) {
        return Err(Error::invalid("alpha must lie in [0, 1]"));
    }
    let treated_id = &panel.unit(&spec.treated_unit)?.id;
    let treated_report = reports
        .iter()
        .find(|r| &r.unit_id == treated_id)
        .ok_or_else(|| Error::invalid(format!("no knot report for treated unit {treated_id}")))?;
    let treated = pre_treatment_trend(treated_report, spec)?;

    let mut candidates = Vec::new();
    let mut rejected = Vec::new();
    for unit in panel.units() {
        if &unit.id == treated_id {
            continue;
        }
        let Some(report) = reports.iter().find(|r| r.unit_id == unit.id) else {
            rejected.push(Rejection {
                unit_id: unit.id.clone(),
                reason: "no knot report".into(),
            });
            continue;
        };
        let trend = match pre_treatment_trend(report, spec) {
            Ok(t) => t,
            Err(e) => {
                rejected.push(Rejection {
                    unit_id: unit.id.clone(),
                    reason: format!("trend fit failed: {e}"),
                });
                continue;
            }
        };
        let abs_deviation = (trend.slope - treated.slope).abs();
        let reason = if !(trend.p_value < thresholds.alpha) {
            Some(format!("slope p-value {:.4} not below {}", trend.p_value, thresholds.alpha))
        } else if !(trend.adj_r_squared >= thresholds.min_adj_r2) {
            Some(format!("adjusted R² {:.4} below {}", trend.adj_r_squared, thresholds.min_adj_r2))
        } else if thresholds.max_abs_dev.is_some_and(|m| !(abs_deviation < m)) {
            Some(format!("slope deviation {abs_deviation:.4} not below {}", thresholds.max_abs_dev.unwrap_or_default()))
        } else {
            None
        };
        match reason {
            Some(reason) => rejected.push(Rejection {
                unit_id: unit.id.clone(),
                reason,
            }),
            None => candidates.push(Candidate {
                unit_id: unit.id.clone(),
                county: unit.county.clone(),
                slope: trend.slope,
                p_value: trend.p_value,
                adj_r_squared: trend.adj_r_squared,
                abs_deviation,
                trend_start: trend.start,
            }),
        }
    }
    candidates.sort_by(|a, b| {
        a.abs_deviation
            .total_cmp(&b.abs_deviation)
            .then_with(|| a.unit_id.cmp(&b.unit_id))
    });
    if candidates.is_empty() {
        log::warn!("no control unit passed the trend screen");
    }
    Ok(DonorScreen {
        treated_unit: treated_id.clone(),
        treated,
        candidates,
        rejected,
        thresholds,
    })
}

impl DonorScreen {
    pub fn candidate_ids(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.unit_id.clone()).collect()
    }

    /// Candidates with deviation strictly below `max_abs_dev`.
    pub fn within(&self, max_abs_dev: f64) -> Vec<String> {
        self.candidates
            .iter()
            .filter(|c| c.abs_deviation < max_abs_dev)
            .map(|c| c.unit_id.clone())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::invalid(format!("writing screen CSV: {e}"));
        w.write_record(["rank", "unit_id", "county", "slope", "p_value", "adj_r_squared", "abs_deviation", "trend_start"])
            .map_err(io)?;
        for (i, c) in self.candidates.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                c.unit_id.clone(),
                c.county.clone(),
                c.slope.to_string(),
                c.p_value.to_string(),
                c.adj_r_squared.to_string(),
                c.abs_deviation.to_string(),
                c.trend_start.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing screen CSV: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Unit;
    use proptest::prelude::*;

    fn day(i: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 3, 1).unwrap() + chrono::Duration::days(i)
    }

    fn unit(id: &str) -> Unit {
        Unit {
            id: id.into(),
            county: id.to_uppercase(),
            state: "S".into(),
            fips: None,
            population: 1000,
        }
    }

    /// Cumulative counts with a flat start and then `slope` per day, plus
    /// a deterministic wiggle.
    fn counts(slope: f64, n: usize, wiggle: f64) -> Vec<u64> {
        (0..n)
            .map(|t| {
                let base = 10.0 + slope * t as f64 + wiggle * ((t * 7 % 5) as f64 - 2.0);
                base.round().max(0.0) as u64
            })
            .scan(0u64, |m, c| {
                *m = (*m).max(c);
                Some(*m)
            })
            .collect()
    }

    fn spec(treated: &str, start: i64) -> TreatmentSpec {
        TreatmentSpec::new(treated, day(start), day(start), day(start + 5), 2).unwrap()
    }

    fn screen_of(slopes: &[(&str, f64, f64)], thresholds: Thresholds) -> DonorScreen {
        let n = 40;
        let units: Vec<Unit> = slopes.iter().map(|(id, _, _)| unit(id)).collect();
        let cumulative = slopes.iter().map(|(_, s, w)| counts(*s, n, *w)).collect();
        let panel = PanelDataset::new(units, (0..n as i64).map(day).collect(), cumulative).unwrap();
        let sp = spec(slopes[0].0, 30);
        let series = pre_treatment_series(&panel, &sp, SeriesBasis::Counts).unwrap();
        let reports: Vec<KnotReport> = detect_all(&series, 1, Criterion::Bic)
            .into_iter()
            .filter_map(|(_, r)| r.ok())
            .collect();
        screen_donors(&panel, &sp, &reports, thresholds).unwrap()
    }

    #[test]
    fn ranks_by_deviation() {
        let s = screen_of(&[("t", 25.2, 0.0), ("b", 21.7, 0.0), ("a", 23.8, 0.0)], Thresholds::default());
        assert_eq!(s.candidate_ids(), vec!["a", "b"]);
        assert!((s.candidates[0].abs_deviation - 1.4).abs() < 0.02, "{:?}", s.candidates);
        assert!((s.candidates[1].abs_deviation - 3.5).abs() < 0.02);
        assert_eq!(s.within(2.0), vec!["a"]);
    }

    #[test]
    fn flat_unit_rejected() {
        let s = screen_of(&[("t", 3.0, 0.0), ("flat", 0.0, 0.0), ("ok", 3.0, 0.0)], Thresholds::default());
        assert_eq!(s.candidate_ids(), vec!["ok"]);
        assert_eq!(s.rejected.len(), 1);
        assert_eq!(s.rejected[0].unit_id, "flat");
    }

    #[test]
    fn ties_break_on_id() {
        let s = screen_of(&[("t", 3.0, 0.0), ("z", 4.0, 0.0), ("m", 2.0, 0.0)], Thresholds::default());
        assert_eq!(s.candidate_ids(), vec!["m", "z"]);
    }

    #[test]
    fn deviation_cap_is_strict() {
        let t = Thresholds {
            max_abs_dev: Some(1.0),
            ..Thresholds::default()
        };
        let s = screen_of(&[("t", 3.0, 0.0), ("a", 4.0, 0.0), ("b", 3.5, 0.0)], t);
        assert_eq!(s.candidate_ids(), vec!["b"]);
    }

    #[test]
    fn csv_and_basis() {
        let s = screen_of(&[("t", 3.0, 0.0), ("a", 4.0, 0.0)], Thresholds::default());
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rank,unit_id"));
        assert!(text.contains("\n1,a,A,"));
        assert_eq!("rates:1e5".parse::<SeriesBasis>().unwrap(), SeriesBasis::Rates(1e5));
        assert!("rates:-1".parse::<SeriesBasis>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tightening_never_adds(
            slopes in prop::collection::vec(0.0f64..6.0, 3..7),
            wig in 0.0f64..3.0,
            a1 in 0.0f64..0.2, a2 in 0.0f64..0.2,
            r1 in 0.0f64..1.0, r2 in 0.0f64..1.0,
            d1 in 0.1f64..4.0, d2 in 0.1f64..4.0,
        ) {
            let ids: Vec<String> = (0..slopes.len()).map(|i| format!("u{i}")).collect();
            let spec_rows: Vec<(&str, f64, f64)> = ids.iter().zip(&slopes).map(|(i, s)| (i.as_str(), *s + 0.5, wig)).collect();
            let loose = Thresholds { alpha: a1.max(a2), min_adj_r2: r1.min(r2), max_abs_dev: Some(d1.max(d2)) };
            let tight = Thresholds { alpha: a1.min(a2), min_adj_r2: r1.max(r2), max_abs_dev: Some(d1.min(d2)) };
            let l = screen_of(&spec_rows, loose);
            let t = screen_of(&spec_rows, tight);
            for id in t.candidate_ids() {
                prop_assert!(l.candidate_ids().contains(&id));
            }
            prop_assert!(!l.candidate_ids().contains(&"u0".to_string()));
            prop_assert!(l.candidates.windows(2).all(|w| w[0].abs_deviation <= w[1].abs_deviation));
        }
    }
}
