//! Acceptance gates. Prints one PASS/FAIL line per gate; set
//! `PANELFX_ACCEPTANCE_STRICT` to turn failures into a non-zero exit.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use panelfx::changepoint::{detect_knots, solve_knots, Criterion};
use panelfx::did::{design_from_series, double_difference_of, fit_ols, sandwich, DidDesign};
use panelfx::ingest::CovariateTable;
use panelfx::nbglm::{fit_nb, NbOptions};
use panelfx::oracle;
use panelfx::selftest::{random_design, random_did_panel};
use panelfx::sim::{convex_mix, sim_date, simulate_nb, simulate_panel, PanelSim};
use panelfx::synth::{inner_objective, solve_inner, synthesize, CovariateWeights, ScMode, ScProblem};
use panelfx::{ols, RateSeries};
use panelfx_cli::commands::{cmd_did, persist_panel};
use panelfx_cli::config::RunConfig;

struct Gate {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn run(name: &'static str, budget_secs: u64, f: impl FnOnce() -> (bool, String)) -> Gate {
    let t = Instant::now();
    let (pass, detail) = f();
    Gate {
        name,
        pass,
        detail,
        elapsed: t.elapsed(),
        budget: Duration::from_secs(budget_secs),
    }
}

fn to_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j])
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

fn did_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let nd = rng.gen_range(1..6);
        let days = rng.gen_range(4..16);
        let (t, donors, spec) = random_did_panel(&mut rng, nd, days).unwrap();
        let design = design_from_series(&t, &donors, &spec, false).unwrap();
        let tau = fit_ols(&design).unwrap().tau;
        worst = worst.max((tau - double_difference_of(&design).unwrap()).abs());
    }
    (worst <= 1e-12, format!("200 panels, max |diff| {worst:.2e}"))
}

fn ols_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut coef, mut vcov) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let n = rng.gen_range(8..=50);
        let (x, y) = random_design(&mut rng, n, 4);
        let fit = ols::fit(&to_matrix(&x), &y, &[]).unwrap();
        let beta = oracle::ols_normal_equations(&x, &y).unwrap();
        coef = coef.max(max_diff(std::slice::from_ref(&fit.coefficients), &[beta]));
        vcov = vcov.max(max_diff(&fit.vcov_classical(), &oracle::ols_classical_vcov(&x, &y).unwrap()));
    }
    (
        coef <= 1e-10 && vcov <= 1e-10,
        format!("100 designs, max coef diff {coef:.2e}, max vcov diff {vcov:.2e}"),
    )
}

fn duplicated(design: &DidDesign, times: usize) -> DidDesign {
    let mut d = design.clone();
    d.observations = design
        .observations
        .iter()
        .flat_map(|o| std::iter::repeat_n(o.clone(), times))
        .collect();
    d
}

fn cluster_sandwich() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = rng.gen_range(12..=50);
        let (x, y) = random_design(&mut rng, n, 4);
        let g = rng.gen_range(2..=8);
        let clusters: Vec<usize> = (0..n).map(|_| rng.gen_range(0..g)).collect();
        let fit = ols::fit(&to_matrix(&x), &y, &[]).unwrap();
        let v = sandwich(&to_matrix(&x), &fit.residuals, &fit.xtx_inv_matrix(), &clusters).unwrap();
        let vm: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| v[(i, j)]).collect()).collect();
        worst = worst.max(max_diff(&vm, &oracle::cluster_sandwich(&x, &y, &clusters).unwrap()));
    }
    let (mut exceed, mut drift) = (0, 0.0_f64);
    for _ in 0..100 {
        let nd = rng.gen_range(3..7);
        let (t, donors, spec) = random_did_panel(&mut rng, nd, 12).unwrap();
        let base = design_from_series(&t, &donors, &spec, false).unwrap();
        let dup = duplicated(&base, 4);
        let (f0, f1) = (fit_ols(&base).unwrap(), fit_ols(&dup).unwrap());
        if f1.se_tau_clustered > f1.se_tau_classical {
            exceed += 1;
        }
        // duplication leaves the clustered vcov unchanged up to the CR1 factor
        let (n0, n1, k) = (base.n() as f64, dup.n() as f64, 4.0);
        let cr1 = ((n1 - 1.0) / (n1 - k)) / ((n0 - 1.0) / (n0 - k));
        drift = drift.max((f1.se_tau_clustered / f0.se_tau_clustered - cr1.sqrt()).abs());
    }
    (
        worst <= 1e-10 && exceed == 100,
        format!(
            "max vcov diff {worst:.2e}; clustered se > classical se under 4x duplication in {exceed}/100; \
             clustered se invariance error {drift:.1e}"
        ),
    )
}

fn changepoints() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut agree = 0;
    for _ in 0..100 {
        let len = rng.gen_range(6..=25);
        let xs: Vec<f64> = (0..len).map(|i| i as f64).collect();
        // a random two-break signal plus noise
        let (b1, b2) = (rng.gen_range(1..len - 1), rng.gen_range(1..len - 1));
        let slopes: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| {
                slopes[0] * x
                    + (slopes[1] - slopes[0]) * (x - b1.min(b2) as f64).max(0.0)
                    + (slopes[2] - slopes[1]) * (x - b1.max(b2) as f64).max(0.0)
                    + 0.3 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let penalty = rng.gen_range(0.0..1.5);
        let (knots, sse) = solve_knots(&xs, &ys, 2, penalty, true).unwrap();
        let brute = oracle::enumerate_knots(&xs, &ys, 2, penalty).unwrap();
        let obj = sse + penalty * knots.len() as f64;
        if knots == brute.knots && (obj - brute.objective).abs() <= 1e-9 * (1.0 + brute.objective) {
            agree += 1;
        }
    }
    let mut exact = 0;
    for c in 0..50 {
        let len = rng.gen_range(12..=40);
        let b = rng.gen_range(3..len - 3);
        let s1: f64 = rng.gen_range(0.0..3.0);
        let s2 = s1 + rng.gen_range(0.5..3.0) * if c % 2 == 0 { 1.0 } else { -1.0 };
        let rates: Vec<f64> = (0..len)
            .map(|i| 5.0 + s1 * i as f64 + (s2 - s1) * (i as f64 - b as f64).max(0.0))
            .collect();
        let series = RateSeries::new("u", (0..len).map(sim_date).collect(), rates).unwrap();
        let report = detect_knots(&series, 3, Criterion::Bic).unwrap();
        if report.knot_indices == vec![b] {
            exact += 1;
        }
    }
    (
        agree == 100 && exact == 50,
        format!("DP equals enumeration in {agree}/100; noiseless single break exact in {exact}/50"),
    )
}

fn sc_inner() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut worst_gap, mut grid_fail, mut grid_cases) = (0.0_f64, 0, 0);
    for _ in 0..200 {
        let k = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=10);
        let x1: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let x0: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sol = solve_inner(&x1, &x0, &v, 1e-10).unwrap();
        worst_gap = worst_gap.max(sol.gap);
        if n <= 3 {
            grid_cases += 1;
            let (_, grid) = oracle::simplex_grid_min(|w| inner_objective(&x1, &x0, &v, w), n, 1e-2).unwrap();
            if sol.objective > grid + 1e-6 {
                grid_fail += 1;
            }
        }
    }
    let mut worst_interp = 0.0_f64;
    for _ in 0..50 {
        let k = rng.gen_range(1..=5);
        let n = rng.gen_range(2..=10);
        let x0: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let x1: Vec<f64> = x0.iter().map(|r| r.iter().zip(&raw).map(|(a, b)| a * b / s).sum()).collect();
        let sol = solve_inner(&x1, &x0, &vec![1.0 / k as f64; k], 1e-10).unwrap();
        worst_interp = worst_interp.max(sol.objective);
    }
    (
        worst_gap < 1e-10 && grid_fail == 0 && worst_interp < 1e-10,
        format!(
            "max gap {worst_gap:.2e}; grid dominance failures {grid_fail}/{grid_cases}; max interpolation objective {worst_interp:.2e}"
        ),
    )
}

fn sc_end_to_end() -> (bool, String) {
    let mut worst_mspe = 0.0_f64;
    let mut worst_tau0 = 0.0_f64;
    let mut within = 0;
    let d = 0.5;
    for seed in 0..20u64 {
        let n = 2 + (seed as usize % 4);
        for (drop, is_null) in [(0.0, true), (d, false)] {
            let m = convex_mix(n, n + 1, 40, drop, seed).unwrap();
            let names: Vec<String> = (0..n + 1).map(|i| format!("x{i}")).collect();
            let v = CovariateWeights::uniform(names).unwrap();
            let problem = ScProblem {
                treated: &m.treated,
                donors: &m.donors,
                spec: &m.spec,
                x1: &m.x1,
                x0: &m.x0,
                v_init: &v,
            };
            let s = synthesize(&problem, ScMode::Fixed).unwrap();
            if is_null {
                worst_mspe = worst_mspe.max(s.pre_mspe);
                worst_tau0 = worst_tau0.max(s.tau_fit.tau.abs());
            } else {
                worst_mspe = worst_mspe.max(s.pre_mspe);
                if (s.tau_fit.tau + d).abs() <= 0.05 * d {
                    within += 1;
                }
            }
        }
    }
    (
        worst_mspe < 1e-8 && worst_tau0 <= 1e-6 && within == 20,
        format!("max pre-MSPE {worst_mspe:.2e}; max |tau| without effect {worst_tau0:.2e}; tau within 5% of -d in {within}/20"),
    )
}

fn nb_recovery() -> (bool, String) {
    let beta = [0.5, -0.3, 0.2];
    let names: Vec<String> = (0..3).map(|i| format!("x{i}")).collect();
    let mut good = 0;
    for seed in 0..20 {
        let (y, x, off) = simulate_nb(500, 1.0, &beta, 2.0, 1000 + seed);
        let fit = fit_nb(&y, &x, &names, Some(&off), &NbOptions::default()).unwrap();
        let ok = beta
            .iter()
            .enumerate()
            .all(|(j, b)| (fit.beta[j] - b).abs() <= 3.0 * fit.std_errors[j + 1]);
        good += usize::from(ok);
    }
    let (y, x, off) = simulate_nb(400, 1.0, &[0.3, -0.2, 0.1], 1e9, 77);
    let opts = NbOptions {
        fixed_k: Some(1e8),
        ..NbOptions::default()
    };
    let fit = fit_nb(&y, &x, &names, Some(&off), &opts).unwrap();
    let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| vec![1.0, x[0][i], x[1][i], x[2][i]]).collect();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let pois = oracle::poisson_irls(&rows, &yf, Some(&off)).unwrap();
    let main: Vec<f64> = std::iter::once(fit.alpha0).chain(fit.beta.iter().copied()).collect();
    let diff = max_diff(&[main], &[pois]);
    (
        good >= 18 && diff <= 1e-4,
        format!("all betas within 3 SE in {good}/20 seeds; Poisson-limit max diff {diff:.2e}"),
    )
}

fn simulation_pipeline() -> (bool, String) {
    let mut signs = 0;
    let mut errors = Vec::new();
    for seed in 0..20 {
        let sim = simulate_panel(&PanelSim {
            seed,
            ..PanelSim::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = sim.panel.units().iter().map(|u| u.id.clone()).collect();
        let counties = sim.panel.units().iter().map(|u| u.county.clone()).collect();
        let table = CovariateTable::new(ids, counties, vec!["z".into()], vec![sim.covariate.clone()]).unwrap();
        let cfg = RunConfig {
            treated_unit: Some(sim.spec.treated_unit.clone()),
            effective_start: Some(sim.spec.effective_start),
            effective_end: Some(sim.spec.effective_end),
            post_lag_days: sim.spec.post_lag_days,
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        persist_panel(&cfg, &sim.panel, &table, &[]).unwrap();
        let report = cmd_did(&cfg).unwrap();
        let pool = report
            .pools
            .iter()
            .find(|p| p.pool == "all_candidates")
            .or_else(|| report.pools.iter().find(|p| p.pool == "all_other_units"))
            .unwrap();
        let tau = pool.fit.tau;
        if tau.signum() == sim.true_tau.signum() {
            signs += 1;
        }
        errors.push(((tau - sim.true_tau) / sim.true_tau).abs());
    }
    errors.sort_by(f64::total_cmp);
    let median = 0.5 * (errors[9] + errors[10]);
    (
        signs == 20 && median <= 0.10,
        format!("sign correct in {signs}/20; median relative error {:.2}%", 100.0 * median),
    )
}

fn main() -> ExitCode {
    let gates = [
        run("did-saturated-identity", 5, did_identity),
        run("ols-oracle", 5, ols_oracle),
        run("cluster-sandwich", 10, cluster_sandwich),
        run("changepoint-exactness", 30, changepoints),
        run("sc-inner-solver", 60, sc_inner),
        run("sc-end-to-end", 120, sc_end_to_end),
        run("nb-glm-recovery", 30, nb_recovery),
        run("simulation-pipeline", 60, simulation_pipeline),
    ];
    let mut failed = 0;
    for g in &gates {
        let in_time = g.elapsed <= g.budget;
        let pass = g.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} {:<24} {} ({:.2}s of {}s{})",
            if pass { "PASS" } else { "FAIL" },
            g.name,
            g.detail,
            g.elapsed.as_secs_f64(),
            g.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("SKIP observed-data-replication    needs a case-file snapshot that is not bundled");
    if failed == 0 {
        println!("all gates passed");
        return ExitCode::SUCCESS;
    }
    println!("{failed} gate(s) failed");
    // failures are reported, not fatal, unless strict mode is requested
    if std::env::var_os("PANELFX_ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
