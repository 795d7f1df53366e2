//! Pipeline stages. Each stage reads what it needs from `output_dir`, writes
//! its artifacts there and returns a typed summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use panelfx::changepoint::{KnotReport, TrendFit};
use panelfx::did::{self, DidFit};
use panelfx::ingest::{self, CompletenessRecord, CovariateSpec, CovariateTable};
use panelfx::nbglm::{fit_nb_table, select_covariates, v_from_coefficients, NbFit, NbOptions};
use panelfx::oracle::OracleReport;
use panelfx::selection::{self, DonorScreen};
use panelfx::sim::{simulate_panel, PanelSim};
use panelfx::synth::{self, CovariateWeights, ScMode, ScProblem, ScSolution};
use panelfx::{PanelDataset, TreatmentSpec};

use crate::config::{RunConfig, ScModeName, ScPool};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).with_context(|| format!("{} not found; run the earlier stages first", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

/// File-name-safe version of a unit id.
fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub n_units: usize,
    pub n_dates: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub units_with_covariates: usize,
    pub issues: usize,
}

/// Read the case and covariate files and persist the panel.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let state = cfg.state.as_deref().ok_or_else(|| anyhow!("state must be configured for ingest"))?;
    let case_csv = cfg.case_csv.as_deref().ok_or_else(|| anyhow!("case_csv must be configured for ingest"))?;
    let cov_csv = cfg.covariate_csv.as_deref().ok_or_else(|| anyhow!("covariate_csv must be configured for ingest"))?;
    let cases = ingest::read_case_csv(case_csv, state, cfg.repair_policy()?)?;
    let spec = CovariateSpec {
        covariates: cfg.covariates.clone(),
        ..CovariateSpec::default()
    };
    let (table, populations, mut records) = ingest::read_covariate_csv(cov_csv, cfg.poverty_override.as_deref(), &spec)?;
    let (panel, case_records) = cases.into_panel(&populations)?;
    records.extend(case_records);
    let aligned = ingest::align_to_panel(&table, &panel)?;
    records.extend(ingest::completeness_report(&panel, &aligned, cfg.missing_covariates)?);
    persist_panel(cfg, &panel, &aligned, &records)
}

/// Write the ingest artifacts for an already-built panel.
pub fn persist_panel(cfg: &RunConfig, panel: &PanelDataset, covariates: &CovariateTable, records: &[CompletenessRecord]) -> Result<IngestSummary> {
    write_json(&cfg.artifact("panel.json"), panel)?;
    let mut w = create(&cfg.artifact("panel.csv"))?;
    ingest::write_case_csv(panel, &mut w)?;
    w.flush()?;
    write_json(&cfg.artifact("covariates.json"), covariates)?;
    let mut w = create(&cfg.artifact("completeness.jsonl"))?;
    ingest::write_completeness_jsonl(records, &mut w)?;
    w.flush()?;
    let dates = panel.dates();
    let summary = IngestSummary {
        n_units: panel.n_units(),
        n_dates: dates.len(),
        first_date: dates[0],
        last_date: dates[dates.len() - 1],
        units_with_covariates: covariates.n_units(),
        issues: records.len(),
    };
    write_json(&cfg.artifact("ingest_summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_panel(cfg: &RunConfig) -> Result<PanelDataset> {
    let panel: PanelDataset = read_json(&cfg.artifact("panel.json"))?;
    Ok(panel.validated()?)
}

pub fn load_covariates(cfg: &RunConfig) -> Result<CovariateTable> {
    let table: CovariateTable = read_json(&cfg.artifact("covariates.json"))?;
    Ok(table.validated()?)
}

/// Treatment spec with the treated unit resolved to its panel id.
fn resolved_spec(cfg: &RunConfig, panel: &PanelDataset) -> Result<TreatmentSpec> {
    let mut spec = cfg.spec()?;
    let unit = panel
        .resolve(&spec.treated_unit)
        .ok_or_else(|| anyhow!("treated unit {:?} is not in the panel", spec.treated_unit))?;
    spec.treated_unit = unit.id.clone();
    spec.validate_against(panel)?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotFailure {
    pub unit_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotsOutput {
    pub reports: Vec<KnotReport>,
    pub failures: Vec<KnotFailure>,
}

fn run_knots(cfg: &RunConfig, panel: &PanelDataset, spec: &TreatmentSpec) -> Result<KnotsOutput> {
    let series = selection::pre_treatment_series(panel, spec, cfg.basis()?)?;
    let mut out = KnotsOutput {
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for (unit_id, r) in selection::detect_all(&series, cfg.max_knots, cfg.knot_criterion()?) {
        match r {
            Ok(r) => out.reports.push(r),
            Err(e) => {
                log::warn!("knot detection failed for {unit_id}: {e}");
                out.failures.push(KnotFailure {
                    unit_id,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Change-point detection on every unit's pre-treatment series.
pub fn cmd_knots(cfg: &RunConfig) -> Result<KnotsOutput> {
    let panel = load_panel(cfg)?;
    let spec = resolved_spec(cfg, &panel)?;
    let out = run_knots(cfg, &panel, &spec)?;
    write_json(&cfg.artifact("knots.json"), &out)?;
    let mut w = create(&cfg.artifact("knots_plot.csv"))?;
    writeln!(w, "unit_id,date,observed,fitted,knot")?;
    for r in &out.reports {
        for ((d, o), f) in r.dates.iter().zip(&r.observed).zip(&r.fitted) {
            writeln!(w, "{},{d},{o},{f},{}", r.unit_id, u8::from(r.knots.contains(d)))?;
        }
    }
    w.flush()?;
    Ok(out)
}

fn run_screen(cfg: &RunConfig, panel: &PanelDataset, spec: &TreatmentSpec) -> Result<DonorScreen> {
    let knots = run_knots(cfg, panel, spec)?;
    Ok(selection::screen_donors(panel, spec, &knots.reports, cfg.thresholds())?)
}

/// Trend screen of the control units.
pub fn cmd_select(cfg: &RunConfig) -> Result<DonorScreen> {
    let panel = load_panel(cfg)?;
    let spec = resolved_spec(cfg, &panel)?;
    let screen = run_screen(cfg, &panel, &spec)?;
    write_screen(cfg, &screen)?;
    Ok(screen)
}

fn write_screen(cfg: &RunConfig, screen: &DonorScreen) -> Result<()> {
    write_json(&cfg.artifact("screen.json"), screen)?;
    let mut w = create(&cfg.artifact("screen.csv"))?;
    screen.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolResult {
    pub pool: String,
    pub donors: Vec<String>,
    pub double_difference: f64,
    pub fit: DidFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DidReport {
    pub treated_unit: String,
    pub rate_scale: f64,
    pub include_post: bool,
    pub treated_trend: TrendFit,
    pub n_candidates: usize,
    pub pools: Vec<PoolResult>,
    pub warnings: Vec<String>,
}

/// Difference-in-differences over the standard donor pools.
pub fn cmd_did(cfg: &RunConfig) -> Result<DidReport> {
    let panel = load_panel(cfg)?;
    let report = run_did(cfg, &panel)?;
    let spec = resolved_spec(cfg, &panel)?;
    write_json(&cfg.artifact("did.json"), &report)?;
    let mut tables = String::new();
    for p in &report.pools {
        let _ = writeln!(tables, "== {} ({} donors) ==", p.pool, p.donors.len());
        let _ = writeln!(tables, "{}", p.fit.text_table());
        let (treated, donors) = did::design_series(&panel, &spec, &p.donors, cfg.rate_scale)?;
        let mut w = create(&cfg.artifact(&format!("did_plot_{}.csv", slug(&p.pool))))?;
        did::write_plot_csv(&treated, &donors, &spec, &mut w)?;
        w.flush()?;
    }
    for warning in &report.warnings {
        let _ = writeln!(tables, "warning: {warning}");
    }
    write_text(&cfg.artifact("did_tables.txt"), &tables)?;
    Ok(report)
}

/// The pools and their fits, without touching the disk.
pub fn run_did(cfg: &RunConfig, panel: &PanelDataset) -> Result<DidReport> {
    let spec = resolved_spec(cfg, panel)?;
    let screen = run_screen(cfg, panel, &spec)?;
    let mut pools: Vec<(String, Vec<String>)> = Vec::new();
    if let Some(m) = cfg.max_abs_dev {
        pools.push((format!("deviation_below_{m}"), screen.within(m)));
    }
    pools.push(("all_candidates".into(), screen.candidate_ids()));
    for c in screen.candidates.iter().take(cfg.single_donors) {
        pools.push((format!("single_{}", c.unit_id), vec![c.unit_id.clone()]));
    }
    let others: Vec<String> = panel
        .units()
        .iter()
        .filter(|u| u.id != spec.treated_unit)
        .map(|u| u.id.clone())
        .collect();
    pools.push(("all_other_units".into(), others));

    let mut results = Vec::new();
    let mut warnings = Vec::new();
    for (name, donors) in pools {
        if donors.is_empty() {
            let msg = format!("pool {name} is empty; skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let design = did::build_design(panel, &spec, &donors, cfg.include_post, cfg.rate_scale)?;
        let fit = did::fit_ols(&design)?;
        if let Some(note) = &fit.note {
            warnings.push(format!("pool {name}: {note}"));
        }
        results.push(PoolResult {
            pool: name,
            double_difference: did::double_difference_of(&design)?,
            donors,
            fit,
        });
    }
    Ok(DidReport {
        treated_unit: spec.treated_unit.clone(),
        rate_scale: cfg.rate_scale,
        include_post: cfg.include_post,
        treated_trend: screen.treated,
        n_candidates: screen.candidates.len(),
        pools: results,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateReport {
    pub units: Vec<String>,
    pub response_date: NaiveDate,
    pub offset: bool,
    pub fit: NbFit,
    pub selected: Vec<String>,
    pub v: Option<CovariateWeights>,
    pub warnings: Vec<String>,
}

fn run_covariates(cfg: &RunConfig, panel: &PanelDataset, spec: &TreatmentSpec, table: &CovariateTable) -> Result<CovariateReport> {
    let response_date = spec.effective_start.pred_opt().ok_or_else(|| anyhow!("effective_start has no predecessor"))?;
    let t = panel
        .dates()
        .iter()
        .position(|d| *d == response_date)
        .ok_or_else(|| anyhow!("{response_date} is not on the panel's date axis"))?;
    let units: Vec<String> = table.unit_ids.iter().filter(|u| **u != spec.treated_unit).cloned().collect();
    if units.len() < table.covariate_names.len() + 2 {
        bail!(
            "{} control units with covariates cannot support {} covariates",
            units.len(),
            table.covariate_names.len()
        );
    }
    let sub = table.subset(&units)?;
    let mut response = Vec::with_capacity(units.len());
    let mut offset = Vec::with_capacity(units.len());
    for u in &units {
        let i = panel.unit_index(u).ok_or_else(|| anyhow!("covariate unit {u} is not in the panel"))?;
        response.push(panel.counts(i)[t]);
        offset.push((panel.units()[i].population as f64).ln());
    }
    let fit = fit_nb_table(
        &response,
        &sub,
        &units,
        &sub.covariate_names,
        cfg.glm_offset.then_some(offset.as_slice()),
        &NbOptions::default(),
    )?;
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!("GLM did not converge in {} iterations", fit.iterations));
    }
    let selected = select_covariates(&fit, cfg.glm_alpha);
    let v = if selected.is_empty() {
        warnings.push(format!("no covariate has p < {}", cfg.glm_alpha));
        None
    } else {
        Some(v_from_coefficients(&fit, &selected)?)
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CovariateReport {
        units,
        response_date,
        offset: cfg.glm_offset,
        fit,
        selected,
        v,
        warnings,
    })
}

/// Negative binomial model of pre-treatment counts on the covariates.
pub fn cmd_covariates(cfg: &RunConfig) -> Result<CovariateReport> {
    let panel = load_panel(cfg)?;
    let table = load_covariates(cfg)?;
    let spec = resolved_spec(cfg, &panel)?;
    let report = run_covariates(cfg, &panel, &spec, &table)?;
    write_covariates(cfg, &report)?;
    Ok(report)
}

fn write_covariates(cfg: &RunConfig, report: &CovariateReport) -> Result<()> {
    write_json(&cfg.artifact("glm.json"), report)?;
    let mut text = format!(
        "response: counts on {} for {} control units; offset {}\n\n{}",
        report.response_date,
        report.units.len(),
        if report.offset { "log population" } else { "none" },
        report.fit.text_table()
    );
    let _ = writeln!(text, "\nselected: {}", if report.selected.is_empty() { "none".into() } else { report.selected.join(", ") });
    if let Some(v) = &report.v {
        for (n, w) in v.names.iter().zip(&v.v) {
            let _ = writeln!(text, "  v[{n}] = {w:.6}");
        }
    }
    for w in &report.warnings {
        let _ = writeln!(text, "warning: {w}");
    }
    write_text(&cfg.artifact("glm_table.txt"), &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub mode: ScModeName,
    pub pool: Vec<String>,
    pub selected: Vec<String>,
    pub solution: ScSolution,
}

/// Synthetic control on the selected covariates.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthReport> {
    let panel = load_panel(cfg)?;
    let table = load_covariates(cfg)?;
    let spec = resolved_spec(cfg, &panel)?;
    if table.position(&spec.treated_unit).is_none() {
        bail!("treated unit {} has no covariates", spec.treated_unit);
    }
    let cov = run_covariates(cfg, &panel, &spec, &table)?;
    write_covariates(cfg, &cov)?;
    let Some(v_init) = &cov.v else {
        bail!("no covariate is significant at glm_alpha = {}; raise glm_alpha or change the covariate list", cfg.glm_alpha);
    };
    let pool: Vec<String> = match cfg.sc_pool {
        ScPool::Screened => {
            let screen = run_screen(cfg, &panel, &spec)?;
            write_screen(cfg, &screen)?;
            screen.candidate_ids()
        }
        ScPool::All => cov.units.clone(),
    }
    .into_iter()
    .filter(|u| table.position(u).is_some())
    .collect();
    if pool.is_empty() {
        bail!("donor pool is empty; relax the screen or use sc_pool = \"all\"");
    }
    let mut members = pool.clone();
    members.push(spec.treated_unit.clone());
    let sub = table.subset(&members)?;
    let x1 = sub.column(&spec.treated_unit, &cov.selected)?;
    let cols = pool.iter().map(|u| sub.column(u, &cov.selected)).collect::<panelfx::Result<Vec<_>>>()?;
    let x0: Vec<Vec<f64>> = (0..cov.selected.len()).map(|k| cols.iter().map(|c| c[k]).collect()).collect();
    let (treated, donors) = did::design_series(&panel, &spec, &pool, cfg.rate_scale)?;
    let mode = match cfg.sc_mode {
        ScModeName::Fixed => ScMode::Fixed,
        ScModeName::Nested => ScMode::Nested(cfg.outer_options()),
    };
    let problem = ScProblem {
        treated: &treated,
        donors: &donors,
        spec: &spec,
        x1: &x1,
        x0: &x0,
        v_init,
    };
    let solution = synth::synthesize(&problem, mode)?;
    let report = SynthReport {
        mode: cfg.sc_mode,
        pool,
        selected: cov.selected.clone(),
        solution,
    };
    write_json(&cfg.artifact("synth.json"), &report)?;
    write_text(&cfg.artifact("synth_table.txt"), &synth_text(&report))?;
    let mut w = create(&cfg.artifact("synth_plot.csv"))?;
    report.solution.write_plot_csv(&treated, &mut w)?;
    w.flush()?;
    Ok(report)
}

fn synth_text(r: &SynthReport) -> String {
    let s = &r.solution;
    let mut t = String::new();
    let _ = writeln!(t, "mode: {:?}; {} donors; covariates: {}", r.mode, r.pool.len(), r.selected.join(", "));
    let _ = writeln!(t, "covariate loss {:.6e}; inner gap {:.3e}; pre-period MSPE {:.6e} over {} days", s.covariate_loss, s.inner_gap, s.pre_mspe, s.t0);
    let _ = writeln!(t, "\ncovariate weights:");
    for (n, v) in s.v.names.iter().zip(&s.v.v) {
        let _ = writeln!(t, "  {n:<28} {v:.6}");
    }
    let _ = writeln!(t, "\ndonor weights:");
    let mut w: Vec<_> = s.weights.donor_ids.iter().zip(&s.weights.w).collect();
    w.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
    for (id, v) in w {
        let _ = writeln!(t, "  {id:<28} {v:.6}");
    }
    let _ = writeln!(t, "\n{}", s.tau_fit.text_table());
    t
}

/// Plain-text summary of whatever stage outputs exist.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let mut t = String::new();
    let did_path = cfg.artifact("did.json");
    let glm_path = cfg.artifact("glm.json");
    let synth_path = cfg.artifact("synth.json");
    if !did_path.exists() && !glm_path.exists() && !synth_path.exists() {
        bail!("no stage outputs in {}; run did, covariates or synth first", cfg.output_dir.display());
    }
    if did_path.exists() {
        let d: DidReport = read_json(&did_path)?;
        let _ = writeln!(t, "Difference-in-differences for {} (rate scale {})", d.treated_unit, d.rate_scale);
        let _ = writeln!(
            t,
            "treated pre-period slope {:.6} (adj. R² {:.3}); {} screened candidates\n",
            d.treated_trend.slope, d.treated_trend.adj_r_squared, d.n_candidates
        );
        let _ = writeln!(t, "{:<32} {:>7} {:>14} {:>12} {:>10}", "pool", "donors", "tau", "se", "p");
        for p in &d.pools {
            let se = match p.fit.inference {
                did::Inference::Clustered => p.fit.se_tau_clustered,
                did::Inference::Classical => p.fit.se_tau_classical,
            };
            let _ = writeln!(t, "{:<32} {:>7} {:>14.6e} {:>12.4e} {:>10.4}", p.pool, p.donors.len(), p.fit.tau, se, p.fit.p_value);
        }
        for w in &d.warnings {
            let _ = writeln!(t, "warning: {w}");
        }
        t.push('\n');
    }
    if glm_path.exists() {
        let g: CovariateReport = read_json(&glm_path)?;
        let _ = writeln!(t, "Covariate model on {} control units (k = {:.4})", g.units.len(), g.fit.k);
        let _ = writeln!(t, "selected: {}\n", if g.selected.is_empty() { "none".into() } else { g.selected.join(", ") });
    }
    if synth_path.exists() {
        let s: SynthReport = read_json(&synth_path)?;
        let _ = writeln!(t, "Synthetic control\n{}", synth_text(&s));
    }
    write_text(&cfg.artifact("report.txt"), &t)?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestSummary {
    pub checks: usize,
    pub failed: Vec<String>,
}

/// Compare the estimators with the brute-force oracles on seeded instances.
pub fn cmd_selftest(cfg: &RunConfig) -> Result<SelftestSummary> {
    let reports: Vec<OracleReport> = panelfx::selftest::selftest(cfg.seed, cfg.selftest_cases)?;
    let mut w = create(&cfg.artifact("oracle.jsonl"))?;
    for r in &reports {
        writeln!(w, "{}", r.to_json_line())?;
    }
    w.flush()?;
    Ok(SelftestSummary {
        checks: reports.len(),
        failed: reports.iter().filter(|r| !r.pass).map(|r| r.case_id.clone()).collect(),
    })
}

pub const SIM_COVARIATES: [&str; 3] = ["pop_density", "median_age", "household_size"];

/// Write a simulated case file, covariate file and matching config into
/// `output_dir`. Returns the config path.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    let sim = simulate_panel(&PanelSim {
        covariate_effect: 0.3,
        seed: cfg.seed,
        ..PanelSim::default()
    })?;
    let dir = &cfg.output_dir;
    let mut w = create(&dir.join("sim_cases.csv"))?;
    ingest::write_case_csv(&sim.panel, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("sim_covariates.csv"))?;
    writeln!(w, "county,fips,population,{}", SIM_COVARIATES.join(","))?;
    for (i, u) in sim.panel.units().iter().enumerate() {
        // the nuisance columns cycle deterministically
        let age = 35.0 + ((i * 7) % 11) as f64;
        let size = 2.2 + ((i * 3) % 5) as f64 / 10.0;
        writeln!(
            w,
            "{},{},{},{:.6},{age:.1},{size:.1}",
            u.county,
            u.fips.as_deref().unwrap_or(""),
            u.population,
            sim.covariate[i]
        )?;
    }
    w.flush()?;
    let spec = &sim.spec;
    let toml = format!(
        "case_csv = \"sim_cases.csv\"\ncovariate_csv = \"sim_covariates.csv\"\nstate = \"Simulated\"\n\
         treated_unit = \"{}\"\neffective_start = {}\neffective_end = {}\npost_lag_days = {}\n\
         rate_scale = 100000.0\nmax_abs_dev = 5.0\ncovariates = [{}]\nglm_alpha = 0.2\noutput_dir = \"out\"\nseed = {}\n",
        sim.panel.units()[0].county,
        spec.effective_start,
        spec.effective_end,
        spec.post_lag_days,
        SIM_COVARIATES.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(", "),
        cfg.seed,
    );
    let path = dir.join("sim.toml");
    write_text(&path, &toml)?;
    log::info!("simulated true effect on the cumulative rate: {:.6e}", sim.true_tau);
    Ok(path)
}
