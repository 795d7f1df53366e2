//! Two-group, two-period difference-in-differences with unit-clustered
//! inference.

use std::fmt::Write as _;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ols;
use crate::panel::{group_mean_series, period_mask, to_rates, PanelDataset, PeriodLabel, RateSeries, TreatmentSpec};
use crate::stats::{safe_ratio, t_two_sided};

pub const COEFFICIENT_NAMES: [&str; 4] = ["(Intercept)", "dt", "dc", "dc:dt"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub unit_id: String,
    pub date: NaiveDate,
    pub rate: f64,
    pub dc: f64,
    pub dt: f64,
    pub label: PeriodLabel,
    /// Index into [`DidDesign::clusters`].
    pub cluster: usize,
}

/// Long-format regression frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidDesign {
    pub treated_unit: String,
    pub observations: Vec<Observation>,
    /// Cluster labels (unit ids), treated unit first.
    pub clusters: Vec<String>,
}

impl DidDesign {
    pub fn n(&self) -> usize {
        self.observations.len()
    }

    /// Regressor matrix with columns [1, dt, dc, dc·dt].
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), 4, |i, j| {
            let o = &self.observations[i];
            match j {
                0 => 1.0,
                1 => o.dt,
                2 => o.dc,
                _ => o.dc * o.dt,
            }
        })
    }

    pub fn response(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.rate).collect()
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        self.observations.iter().map(|o| o.cluster).collect()
    }
}

/// Stack the treated series and donor series into a design.
///
/// All series must share one date axis. Post-window dates are kept only when
/// `include_post` is set; they then enter with `dt = 0`.
pub fn design_from_series(treated: &RateSeries, donors: &[RateSeries], spec: &TreatmentSpec, include_post: bool) -> Result<DidDesign> {
    if donors.is_empty() {
        return Err(Error::Empty("donor list"));
    }
    if donors.iter().any(|d| d.unit_id == treated.unit_id) {
        return Err(Error::invalid(format!("treated unit {} listed as a donor", treated.unit_id)));
    }
    let labels = period_mask(spec, &treated.dates)?;
    let mut observations = Vec::with_capacity(treated.len() * (donors.len() + 1));
    let mut clusters = Vec::with_capacity(donors.len() + 1);
    for (g, s) in std::iter::once(treated).chain(donors).enumerate() {
        if s.dates != treated.dates {
            return Err(Error::invalid(format!("series {} is on a different date axis", s.unit_id)));
        }
        if clusters.contains(&s.unit_id) {
            return Err(Error::invalid(format!("unit {} listed twice", s.unit_id)));
        }
        clusters.push(s.unit_id.clone());
        let dc = if g == 0 { 1.0 } else { 0.0 };
        for ((date, rate), label) in s.dates.iter().zip(&s.rates).zip(&labels) {
            if *label == PeriodLabel::Post && !include_post {
                continue;
            }
            observations.push(Observation {
                unit_id: s.unit_id.clone(),
                date: *date,
                rate: *rate,
                dc,
                dt: label.time_dummy(),
                label: *label,
                cluster: g,
            });
        }
    }
    Ok(DidDesign {
        treated_unit: treated.unit_id.clone(),
        observations,
        clusters,
    })
}

/// Per-capita rate series (times `scale`) for the treated unit and `donors`,
/// starting at the treated unit's first reported case.
pub fn design_series(panel: &PanelDataset, spec: &TreatmentSpec, donors: &[String], scale: f64) -> Result<(RateSeries, Vec<RateSeries>)> {
    let treated_idx = panel
        .unit_index(&panel.unit(&spec.treated_unit)?.id)
        .expect("resolved unit has an index");
    let first = panel
        .counts(treated_idx)
        .iter()
        .position(|&c| c > 0)
        .map(|i| panel.dates()[i])
        .ok_or_else(|| Error::invalid(format!("treated unit {} has no reported cases", spec.treated_unit)))?;
    let rates = to_rates(panel, scale)?;
    let pick = |id: &str| -> Result<RateSeries> {
        let i = panel.unit_index(id).ok_or_else(|| Error::UnknownUnit(id.to_string()))?;
        Ok(rates[i].window(Some(first), None))
    };
    let treated = pick(&panel.units()[treated_idx].id)?;
    let donors = donors.iter().map(|d| pick(d)).collect::<Result<Vec<_>>>()?;
    Ok((treated, donors))
}

/// Design over the panel's per-capita rates (times `scale`).
pub fn build_design(panel: &PanelDataset, spec: &TreatmentSpec, donors: &[String], include_post: bool, scale: f64) -> Result<DidDesign> {
    if donors.is_empty() {
        return Err(Error::Empty("donor list"));
    }
    let (treated, donors) = design_series(panel, spec, donors, scale)?;
    design_from_series(&treated, &donors, spec, include_post)
}

/// How the reported τ standard error was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Clustered,
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidFit {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub residuals: Vec<f64>,
    pub vcov_classical: Vec<Vec<f64>>,
    pub vcov_clustered: Vec<Vec<f64>>,
    pub se_tau_classical: f64,
    pub se_tau_clustered: f64,
    pub t_stat: f64,
    pub p_value: f64,
    /// Degrees of freedom behind `p_value`.
    pub df: f64,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub inference: Inference,
    /// Set when the clustered estimate rests on too few clusters to be trusted.
    pub note: Option<String>,
    pub table: Vec<CoefficientRow>,
}

impl DidFit {
    pub fn coefficients(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.tau]
    }

    /// Plain-text coefficient table.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>14} {:>14} {:>9} {:>10}", "", "Estimate", "Std. Error", "t value", "Pr(>|t|)");
        for r in &self.table {
            let _ = writeln!(
                s,
                "{:<12} {:>14.6e} {:>14.6e} {:>9.3} {:>10.4e}",
                r.name, r.estimate, r.std_error, r.t_value, r.p_value
            );
        }
        let se = match self.inference {
            Inference::Clustered => format!("clustered by unit, {} clusters, t({}) reference", self.n_clusters, self.df),
            Inference::Classical => format!("classical, t({}) reference", self.df),
        };
        let _ = writeln!(s, "---\nn = {}; standard errors {se}", self.n_obs);
        if let Some(note) = &self.note {
            let _ = writeln!(s, "note: {note}");
        }
        s
    }
}

/// Cluster-robust (CR1) covariance and the τ inference derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterVcov {
    pub vcov: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub df: f64,
    pub n_clusters: usize,
}

/// CR1 sandwich `(X'X)⁻¹ Σ_g (X_g'e_g)(X_g'e_g)' (X'X)⁻¹ · G/(G−1) · (n−1)/(n−k)`.
pub fn sandwich(x: &DMatrix<f64>, residuals: &[f64], xtx_inv: &DMatrix<f64>, clusters: &[usize]) -> Result<DMatrix<f64>> {
    let (n, k) = x.shape();
    if residuals.len() != n || clusters.len() != n {
        return Err(Error::invalid("sandwich inputs differ in length"));
    }
    let n_groups = clusters.iter().max().map_or(0, |m| m + 1);
    let mut scores = DMatrix::<f64>::zeros(n_groups, k);
    for i in 0..n {
        for j in 0..k {
            scores[(clusters[i], j)] += x[(i, j)] * residuals[i];
        }
    }
    let g = (0..n_groups).filter(|&c| clusters.contains(&c)).count();
    if g < 2 {
        return Err(Error::TooFewClusters(g));
    }
    let meat = scores.transpose() * &scores;
    let gf = g as f64;
    let factor = gf / (gf - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64);
    let v = xtx_inv * meat * xtx_inv * factor;
    Ok((&v + v.transpose()) * 0.5)
}

/// Clustered covariance for a fitted design with t(G−1) inference.
pub fn cluster_robust_vcov(design: &DidDesign, fit: &ols::OlsFit) -> Result<ClusterVcov> {
    let clusters = design.cluster_ids();
    let v = sandwich(&design.matrix(), &fit.residuals, &fit.xtx_inv_matrix(), &clusters)?;
    let mut present = clusters.clone();
    present.sort_unstable();
    present.dedup();
    let g = present.len();
    let df = (g - 1) as f64;
    let se: Vec<f64> = (0..fit.k).map(|j| v[(j, j)].max(0.0).sqrt()).collect();
    let t: Vec<f64> = fit.coefficients.iter().zip(&se).map(|(b, s)| safe_ratio(*b, *s)).collect();
    let p = t.iter().map(|t| t_two_sided(*t, df)).collect();
    Ok(ClusterVcov {
        vcov: rows(&v),
        se,
        t,
        p,
        df,
        n_clusters: g,
    })
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn fit_with(design: &DidDesign, inference: Inference) -> Result<DidFit> {
    let x = design.matrix();
    let y = design.response();
    let fit = ols::fit(&x, &y, &COEFFICIENT_NAMES)?;
    if fit.n <= fit.k {
        return Err(Error::TooShort {
            needed: fit.k + 1,
            got: fit.n,
        });
    }
    let classical = fit.vcov_classical();
    let se_classical: Vec<f64> = (0..4).map(|j| classical[j][j].max(0.0).sqrt()).collect();
    let clustered = cluster_robust_vcov(design, &fit)?;
    let (se, df, note) = match inference {
        Inference::Clustered => {
            let note = (clustered.n_clusters < 3).then(|| {
                format!("only {} clusters; clustered inference is unreliable", clustered.n_clusters)
            });
            (clustered.se.clone(), clustered.df, note)
        }
        Inference::Classical => (
            se_classical.clone(),
            (fit.n - fit.k) as f64,
            Some(format!(
                "{} clusters; clustering is degenerate, classical standard errors reported",
                clustered.n_clusters
            )),
        ),
    };
    let table: Vec<CoefficientRow> = COEFFICIENT_NAMES
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let t_value = safe_ratio(fit.coefficients[j], se[j]);
            CoefficientRow {
                name: name.to_string(),
                estimate: fit.coefficients[j],
                std_error: se[j],
                t_value,
                p_value: t_two_sided(t_value, df),
            }
        })
        .collect();
    let b = &fit.coefficients;
    Ok(DidFit {
        alpha: b[0],
        beta: b[1],
        gamma: b[2],
        tau: b[3],
        residuals: fit.residuals.clone(),
        vcov_classical: classical,
        vcov_clustered: clustered.vcov,
        se_tau_classical: se_classical[3],
        se_tau_clustered: clustered.se[3],
        t_stat: table[3].t_value,
        p_value: table[3].p_value,
        df,
        n_obs: fit.n,
        n_clusters: clustered.n_clusters,
        inference,
        note,
        table,
    })
}

/// OLS of the rate on [1, dt, dc, dc·dt] with unit-clustered inference on τ.
pub fn fit_ols(design: &DidDesign) -> Result<DidFit> {
    fit_with(design, Inference::Clustered)
}

/// Same regression reported with classical standard errors.
pub fn fit_ols_classical(design: &DidDesign) -> Result<DidFit> {
    fit_with(design, Inference::Classical)
}

/// Treated-minus-control change in cell means between the pre-period and the
/// treatment period, with all donor observations pooled.
pub fn double_difference_of(design: &DidDesign) -> Result<f64> {
    let mean = |dc: f64, label: PeriodLabel| -> Result<f64> {
        let (s, n) = design
            .observations
            .iter()
            .filter(|o| o.dc == dc && o.label == label)
            .fold((0.0, 0usize), |(s, n), o| (s + o.rate, n + 1));
        if n == 0 {
            return Err(Error::Empty(match (dc == 1.0, label) {
                (true, PeriodLabel::Pre) => "treated pre-period",
                (true, _) => "treated treatment period",
                (false, PeriodLabel::Pre) => "control pre-period",
                (false, _) => "control treatment period",
            }));
        }
        Ok(s / n as f64)
    };
    let treated = mean(1.0, PeriodLabel::Treatment)? - mean(1.0, PeriodLabel::Pre)?;
    let control = mean(0.0, PeriodLabel::Treatment)? - mean(0.0, PeriodLabel::Pre)?;
    Ok(treated - control)
}

/// Closed-form double difference over the panel's rates (times `scale`).
pub fn double_difference(panel: &PanelDataset, spec: &TreatmentSpec, donors: &[String], scale: f64) -> Result<f64> {
    double_difference_of(&build_design(panel, spec, donors, false, scale)?)
}

/// Plot data: date, treated series, donor mean and period label.
pub fn write_plot_csv<W: std::io::Write>(treated: &RateSeries, donors: &[RateSeries], spec: &TreatmentSpec, out: W) -> Result<()> {
    let mean = group_mean_series(donors)?;
    let labels = period_mask(spec, &treated.dates)?;
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::invalid(format!("writing plot CSV: {e}"));
    w.write_record(["date", "treated", "control_mean", "period"]).map_err(err)?;
    for i in 0..treated.len() {
        let label = match labels[i] {
            PeriodLabel::Pre => "pre",
            PeriodLabel::Treatment => "treatment",
            PeriodLabel::Post => "post",
        };
        w.write_record([
            treated.dates[i].to_string(),
            treated.rates[i].to_string(),
            mean.rates[i].to_string(),
            label.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("writing plot CSV: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn day(i: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 4, 1).unwrap() + chrono::Duration::days(i)
    }

    fn series(id: &str, v: &[f64]) -> RateSeries {
        RateSeries::new(id, (0..v.len() as i64).map(day).collect(), v.to_vec()).unwrap()
    }

    /// Treatment window covers days 2..=3 (lag 0), post from day 4.
    fn spec() -> TreatmentSpec {
        TreatmentSpec::new("t", day(2), day(2), day(3), 0).unwrap()
    }

    #[test]
    fn counting_observations() {
        let d = design_from_series(&series("t", &[1.0; 4]), &[series("c", &[1.0; 4])], &spec(), false).unwrap();
        assert_eq!(d.n(), 8);
        assert_eq!(d.observations.iter().filter(|o| o.dc * o.dt == 1.0).count(), 2);
        let with_post = design_from_series(&series("t", &[1.0; 6]), &[series("c", &[1.0; 6])], &spec(), true).unwrap();
        assert_eq!(with_post.n(), 12);
        let without = design_from_series(&series("t", &[1.0; 6]), &[series("c", &[1.0; 6])], &spec(), false).unwrap();
        assert!(without.observations.iter().all(|o| o.date <= day(3)));
        assert!(design_from_series(&series("t", &[1.0; 4]), &[], &spec(), false).is_err());
    }

    #[test]
    fn cell_means_example() {
        let t = series("t", &[2.0, 2.0, 5.0, 5.0]);
        let c = series("c", &[1.0, 1.0, 3.0, 3.0]);
        let c2 = series("c2", &[0.0, 2.0, 2.0, 4.0]);
        let d = design_from_series(&t, &[c, c2], &spec(), false).unwrap();
        let f = fit_ols(&d).unwrap();
        assert!((f.tau - 1.0).abs() < 1e-12);
        assert!((double_difference_of(&d).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f.n_clusters, 3);
        assert!(f.text_table().contains("dc:dt"));
    }

    #[test]
    fn no_effect_when_treated_tracks_donors() {
        let v = [1.0, 1.5, 2.5, 3.0];
        let f = fit_ols(&design_from_series(&series("t", &v), &[series("a", &v), series("b", &v)], &spec(), false).unwrap()).unwrap();
        assert!(f.tau.abs() < 1e-12);
    }

    #[test]
    fn constant_donors_gives_rise() {
        let t = series("t", &[1.0, 1.0, 3.5, 3.5]);
        let d = design_from_series(&t, &[series("c", &[2.0; 4])], &spec(), false).unwrap();
        assert!((double_difference_of(&d).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_named() {
        // every date in the treatment window: dt constant
        let sp = TreatmentSpec::new("t", day(0), day(0), day(3), 0).unwrap();
        let d = design_from_series(&series("t", &[1.0, 2.0, 3.0, 4.0]), &[series("c", &[1.0, 2.0, 2.0, 3.0])], &sp, false).unwrap();
        match fit_ols(&d) {
            Err(Error::RankDeficient(c)) => assert_eq!(c, "dt"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_cluster_rejected() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let inv = DMatrix::from_element(1, 1, 1.0 / 3.0);
        assert!(matches!(sandwich(&x, &[0.1, -0.1, 0.0], &inv, &[0, 0, 0]), Err(Error::TooFewClusters(1))));
    }

    #[test]
    fn one_obs_per_cluster_is_scaled_hc() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 4.0]);
        let y = [0.5, 1.1, 2.3, 3.6];
        let fit = ols::fit(&x, &y, &[]).unwrap();
        let inv = fit.xtx_inv_matrix();
        let cl = sandwich(&x, &fit.residuals, &inv, &[0, 1, 2, 3]).unwrap();
        let mut meat = DMatrix::zeros(2, 2);
        for i in 0..4 {
            let xi = x.row(i).transpose();
            meat += &xi * xi.transpose() * fit.residuals[i].powi(2);
        }
        let hc = &inv * meat * &inv * (4.0 / 3.0 * 3.0 / 2.0);
        assert!((cl - hc).abs().max() < 1e-14);
    }

    #[test]
    fn classical_variant_flags_degenerate_clusters() {
        let d = design_from_series(&series("t", &[1.0, 2.0, 4.0, 4.5]), &[series("s", &[1.1, 2.1, 3.0, 3.1])], &spec(), false).unwrap();
        let f = fit_ols_classical(&d).unwrap();
        assert_eq!(f.inference, Inference::Classical);
        assert!(f.note.is_some());
        assert_eq!(f.df, 4.0);
    }

    fn random_design(vals: &[Vec<f64>]) -> (RateSeries, Vec<RateSeries>) {
        let t = series("t", &vals[0]);
        let ds = vals[1..]
            .iter()
            .enumerate()
            .map(|(i, v)| series(&format!("d{i}"), v))
            .collect();
        (t, ds)
    }

    proptest! {
        #[test]
        fn scale_equivariance(vals in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 3..6), c in 0.01f64..100.0) {
            let sp = TreatmentSpec::new("t", day(3), day(3), day(4), 0).unwrap();
            let (t, ds) = random_design(&vals);
            let f = fit_ols(&design_from_series(&t, &ds, &sp, false).unwrap()).unwrap();
            let scale = |s: &RateSeries| series(&s.unit_id, &s.rates.iter().map(|r| r * c).collect::<Vec<_>>());
            let g = fit_ols(&design_from_series(&scale(&t), &ds.iter().map(scale).collect::<Vec<_>>(), &sp, false).unwrap()).unwrap();
            for (a, b) in f.coefficients().iter().zip(g.coefficients()) {
                prop_assert!((a * c - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            prop_assert!((f.se_tau_clustered * c - g.se_tau_clustered).abs() <= 1e-9 * (1.0 + g.se_tau_clustered));
            prop_assert!((f.se_tau_classical * c - g.se_tau_classical).abs() <= 1e-9 * (1.0 + g.se_tau_classical));
            prop_assert!((f.p_value - g.p_value).abs() <= 1e-7);
        }

        #[test]
        fn donor_permutation_invariance(vals in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 5), 3..7), rot in 0usize..5) {
            let sp = TreatmentSpec::new("t", day(2), day(2), day(4), 0).unwrap();
            let (t, mut ds) = random_design(&vals);
            let a = double_difference_of(&design_from_series(&t, &ds, &sp, false).unwrap()).unwrap();
            let fa = fit_ols(&design_from_series(&t, &ds, &sp, false).unwrap()).unwrap();
            let r = rot % ds.len();
            ds.rotate_left(r);
            ds.reverse();
            let b = double_difference_of(&design_from_series(&t, &ds, &sp, false).unwrap()).unwrap();
            let fb = fit_ols(&design_from_series(&t, &ds, &sp, false).unwrap()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((fa.tau - fb.tau).abs() < 1e-12);
            prop_assert!((fa.se_tau_clustered - fb.se_tau_clustered).abs() < 1e-10);
        }

        #[test]
        fn sandwich_matches_oracle(vals in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..5)) {
            let sp = TreatmentSpec::new("t", day(3), day(3), day(5), 0).unwrap();
            let (t, ds) = random_design(&vals);
            let d = design_from_series(&t, &ds, &sp, false).unwrap();
            let f = fit_ols(&d).unwrap();
            let x = d.matrix();
            let xr: Vec<Vec<f64>> = (0..d.n()).map(|i| x.row(i).iter().copied().collect()).collect();
            let o = crate::oracle::cluster_sandwich(&xr, &d.response(), &d.cluster_ids()).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((o[i][j] - f.vcov_clustered[i][j]).abs() <= 1e-10 * (1.0 + o[i][j].abs()));
                }
            }
        }
    }
}
