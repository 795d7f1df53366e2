//! Seeded comparisons of the estimators against the brute-force oracles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::changepoint::solve_knots;
use crate::did::{design_from_series, double_difference_of, fit_ols, sandwich};
use crate::error::Result;
use crate::nbglm::{fit_nb, NbOptions};
use crate::ols;
use crate::oracle::{self, OracleReport};
use crate::panel::{RateSeries, TreatmentSpec};
use crate::sim::{sim_date, simulate_nb};
use crate::synth::{inner_objective, solve_inner};

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
    let mut d = 0.0_f64;
    let mut scale = 0.0_f64;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            d = d.max((x - y).abs());
            scale = scale.max(y.abs());
        }
    }
    (d, scale)
}

fn scaled(case: String, diff: f64, scale: f64, tol: f64) -> OracleReport {
    // compare on a relative scale, reported as main = diff, oracle = 0
    OracleReport::new(case, diff / (1.0 + scale), 0.0, tol)
}

/// Random regression design with an intercept and `k − 1` normal columns.
pub fn random_design(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            std::iter::once(1.0)
                .chain((1..k).map(|_| rng.sample::<f64, _>(StandardNormal)))
                .collect()
        })
        .collect();
    let y = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| v * (j as f64 + 0.5)).sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
        .collect();
    (x, y)
}

/// Random two-group panel on a short date axis with a two-day treatment window.
pub fn random_did_panel(rng: &mut ChaCha8Rng, n_donors: usize, n_days: usize) -> Result<(RateSeries, Vec<RateSeries>, TreatmentSpec)> {
    let dates: Vec<_> = (0..n_days).map(sim_date).collect();
    let mut draw = |id: String| RateSeries::new(id, dates.clone(), (0..n_days).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let treated = draw("t".into())?;
    let donors = (0..n_donors).map(|i| draw(format!("d{i}"))).collect::<Result<Vec<_>>>()?;
    let start = n_days / 2;
    let spec = TreatmentSpec::new("t", dates[start], dates[start], dates[(start + 1).min(n_days - 1)], 0)?;
    Ok((treated, donors, spec))
}

fn to_matrix(x: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j])
}

/// Run `cases` instances of each comparison.
pub fn selftest(seed: u64, cases: usize) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..cases {
        // OLS coefficients and classical covariance
        let n = rng.gen_range(8..=50);
        let (x, y) = random_design(&mut rng, n, 4);
        let fit = ols::fit(&to_matrix(&x), &y, &[])?;
        let beta = oracle::ols_normal_equations(&x, &y)?;
        let (d, s) = max_abs_diff(std::slice::from_ref(&fit.coefficients), &[beta]);
        out.push(scaled(format!("ols-coef-{c}"), d, s, 1e-10));
        let (d, s) = max_abs_diff(&fit.vcov_classical(), &oracle::ols_classical_vcov(&x, &y)?);
        out.push(scaled(format!("ols-vcov-{c}"), d, s, 1e-10));

        // cluster sandwich
        let g = rng.gen_range(2..=8);
        let clusters: Vec<usize> = (0..n).map(|i| i % g).collect();
        let v = sandwich(&to_matrix(&x), &fit.residuals, &fit.xtx_inv_matrix(), &clusters)?;
        let vm: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| v[(i, j)]).collect()).collect();
        let (d, s) = max_abs_diff(&vm, &oracle::cluster_sandwich(&x, &y, &clusters)?);
        out.push(scaled(format!("sandwich-{c}"), d, s, 1e-10));

        // DID regression against cell means
        let (nd, days) = (rng.gen_range(1..5), rng.gen_range(4..12));
        let (t, donors, spec) = random_did_panel(&mut rng, nd, days)?;
        let design = design_from_series(&t, &donors, &spec, false)?;
        out.push(OracleReport::new(format!("did-identity-{c}"), fit_ols(&design)?.tau, double_difference_of(&design)?, 1e-12));

        // knots: DP against enumeration
        let len = rng.gen_range(5..=20);
        let xs: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let ys: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let penalty = rng.gen_range(0.0..2.0);
        let (knots, sse) = solve_knots(&xs, &ys, 2, penalty, true)?;
        let obj = sse + penalty * knots.len() as f64;
        let brute = oracle::enumerate_knots(&xs, &ys, 2, penalty)?;
        out.push(OracleReport::new(format!("knots-objective-{c}"), obj, brute.objective, 1e-9 * (1.0 + brute.objective)));
        out.push(OracleReport::new(
            format!("knots-set-{c}"),
            if knots == brute.knots { 0.0 } else { 1.0 },
            0.0,
            0.0,
        ));

        // simplex QP against grid search
        let k = rng.gen_range(1..=4);
        let nd = rng.gen_range(1..=3);
        let x1: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let x0: Vec<Vec<f64>> = (0..k).map(|_| (0..nd).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let vw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sol = solve_inner(&x1, &x0, &vw, 1e-10)?;
        let (_, grid) = oracle::simplex_grid_min(|w| inner_objective(&x1, &x0, &vw, w), nd, 1e-2)?;
        out.push(OracleReport::dominance(format!("simplex-{c}"), sol.objective, grid, 1e-6));
    }

    // GLM in the Poisson limit
    let (y, x, off) = simulate_nb(300, 1.0, &[0.3, -0.2], 1e9, seed);
    let opts = NbOptions {
        fixed_k: Some(1e8),
        ..NbOptions::default()
    };
    let names = vec!["x0".to_string(), "x1".to_string()];
    let nb = fit_nb(&y, &x, &names, Some(&off), &opts)?;
    let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| vec![1.0, x[0][i], x[1][i]]).collect();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let pois = oracle::poisson_irls(&rows, &yf, Some(&off))?;
    let main = std::iter::once(nb.alpha0).chain(nb.beta.iter().copied()).collect::<Vec<_>>();
    let (d, _) = max_abs_diff(&[main], &[pois]);
    out.push(OracleReport::new("glm-poisson-limit", d, 0.0, 1e-4));
    Ok(out)
}
