//! Seeded simulators with known ground truth, for tests and demos.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, RateSeries, TreatmentSpec, Unit};

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as u64
}

/// NB2 draws `y ~ NB(μ, k)` with `log μ = intercept + β'x + offset`.
///
/// Covariates are standard normal, the offset uniform on [−0.5, 0.5]. Returns
/// the response, the covariate columns and the offset.
pub fn simulate_nb(n: usize, intercept: f64, beta: &[f64], k: f64, seed: u64) -> (Vec<u64>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = beta
        .iter()
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let offset: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let y = (0..n)
        .map(|i| {
            let eta = intercept + beta.iter().zip(&x).map(|(b, c)| b * c[i]).sum::<f64>() + offset[i];
            let mu = eta.exp();
            let lambda = Gamma::new(k, mu / k).expect("positive shape").sample(&mut rng);
            poisson(&mut rng, lambda)
        })
        .collect();
    (y, x, offset)
}

/// Settings for a simulated county panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSim {
    pub n_units: usize,
    pub n_days: usize,
    /// Daily new cases per 100k residents after the ramp.
    pub incidence: f64,
    /// Day on which incidence jumps from a third of `incidence` to its full value.
    pub ramp_day: usize,
    /// First day with any cases.
    pub onset_day: usize,
    /// Treatment window as day offsets, inclusive.
    pub effective_start: usize,
    pub effective_end: usize,
    pub lag: u32,
    /// Daily new cases removed from the treated unit (per 100k) while treated.
    pub effect: f64,
    /// Log-incidence shift per unit of each county's standard-normal
    /// covariate; zero keeps per-capita trends parallel.
    pub covariate_effect: f64,
    pub seed: u64,
}

impl Default for PanelSim {
    fn default() -> Self {
        Self {
            n_units: 20,
            n_days: 70,
            incidence: 40.0,
            ramp_day: 15,
            onset_day: 3,
            effective_start: 36,
            effective_end: 50,
            lag: 7,
            effect: 25.0,
            covariate_effect: 0.0,
            seed: 0,
        }
    }
}

/// A simulated panel with its treatment and the true effect on the
/// per-capita cumulative rate.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelDataset,
    pub spec: TreatmentSpec,
    /// Expected treated-period mean shortfall of the cumulative per-capita rate.
    pub true_tau: f64,
    /// Each county's covariate draw (zero for the treated county).
    pub covariate: Vec<f64>,
}

pub fn sim_date(day: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 3, 1).expect("valid date") + chrono::Duration::days(day as i64)
}

/// Counties with Poisson daily increments proportional to population; the
/// first county (`"c00"`, population 100k) loses `effect` cases per 100k per
/// day during the treatment window, lag included.
pub fn simulate_panel(cfg: &PanelSim) -> Result<SimulatedPanel> {
    if cfg.n_units < 2 || cfg.effective_start <= cfg.onset_day + 3 {
        return Err(Error::invalid("simulation needs two units and a pre-period"));
    }
    let treat_last = cfg.effective_end + cfg.lag as usize;
    if treat_last >= cfg.n_days || cfg.effect > cfg.incidence {
        return Err(Error::invalid("treatment window must end inside the panel and effect cannot exceed incidence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut units = Vec::with_capacity(cfg.n_units);
    let mut cumulative = Vec::with_capacity(cfg.n_units);
    let mut covariate = Vec::with_capacity(cfg.n_units);
    for u in 0..cfg.n_units {
        let population: u64 = if u == 0 { 100_000 } else { rng.gen_range(40_000..250_000) };
        let z: f64 = if u == 0 { 0.0 } else { rng.sample(StandardNormal) };
        covariate.push(z);
        let per_day = cfg.incidence * population as f64 / 1e5 * (cfg.covariate_effect * z).exp();
        let cut = cfg.effect * population as f64 / 1e5;
        let mut total = 0u64;
        let series = (0..cfg.n_days)
            .map(|d| {
                if d >= cfg.onset_day {
                    let mut lambda = if d < cfg.ramp_day { per_day / 3.0 } else { per_day };
                    if u == 0 && (cfg.effective_start..=treat_last).contains(&d) {
                        lambda -= cut;
                    }
                    total += poisson(&mut rng, lambda);
                }
                total
            })
            .collect();
        units.push(Unit {
            id: format!("c{u:02}"),
            county: format!("County {u:02}"),
            state: "Simulated".into(),
            fips: Some(format!("99{u:03}")),
            population,
        });
        cumulative.push(series);
    }
    let dates = (0..cfg.n_days).map(sim_date).collect();
    let panel = PanelDataset::new(units, dates, cumulative)?;
    let spec = TreatmentSpec::new(
        "c00",
        sim_date(cfg.effective_start),
        sim_date(cfg.effective_start),
        sim_date(cfg.effective_end),
        cfg.lag,
    )?;
    // shortfall after j treated days is j·effect per 100k
    let len = (treat_last - cfg.effective_start + 1) as f64;
    let true_tau = -cfg.effect / 1e5 * (len + 1.0) / 2.0;
    Ok(SimulatedPanel {
        panel,
        spec,
        true_tau,
        covariate,
    })
}

/// A synthetic-control instance whose treated unit is an exact convex mix of
/// the donors in both covariates and outcomes.
#[derive(Debug, Clone)]
pub struct MixInstance {
    pub treated: RateSeries,
    pub donors: Vec<RateSeries>,
    pub spec: TreatmentSpec,
    pub x1: Vec<f64>,
    /// K rows by N donors.
    pub x0: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// `n_donors` random donor trajectories and covariates; the treated unit is
/// their mix under random simplex weights, minus `drop` on every treatment
/// day.
pub fn convex_mix(n_donors: usize, k: usize, n_days: usize, drop: f64, seed: u64) -> Result<MixInstance> {
    if n_donors < 2 || k < 1 || n_days < 8 {
        return Err(Error::invalid("mix instance needs two donors, one covariate and eight days"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n_donors).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / s).collect();
    let x0: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n_donors).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let x1 = x0.iter().map(|r| r.iter().zip(&weights).map(|(a, b)| a * b).sum()).collect();
    let dates: Vec<NaiveDate> = (0..n_days).map(sim_date).collect();
    let donors = (0..n_donors)
        .map(|j| {
            let level: f64 = rng.gen_range(0.0..1.0);
            let slope: f64 = rng.gen_range(0.01..0.1);
            let curve: f64 = rng.gen_range(0.0..0.003);
            let rates = (0..n_days)
                .map(|t| {
                    let t = t as f64;
                    level + slope * t + curve * t * t + 0.01 * rng.sample::<f64, _>(StandardNormal)
                })
                .collect();
            RateSeries::new(format!("d{j:02}"), dates.clone(), rates)
        })
        .collect::<Result<Vec<_>>>()?;
    let start = n_days / 2;
    let end = start + n_days / 4;
    let spec = TreatmentSpec::new("treated", dates[start], dates[start], dates[end], 0)?;
    let rates = (0..n_days)
        .map(|t| {
            let mix: f64 = donors.iter().zip(&weights).map(|(d, w)| d.rates[t] * w).sum();
            if (start..=end).contains(&t) {
                mix - drop
            } else {
                mix
            }
        })
        .collect();
    Ok(MixInstance {
        treated: RateSeries::new("treated", dates, rates)?,
        donors,
        spec,
        x1,
        x0,
        weights,
    })
}
