//! Negative-binomial (NB2) regression with log link, used to pick covariates
//! and to derive covariate weights for the synthetic control.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ingest::CovariateTable;
use crate::stats::{safe_ratio, z_two_sided};
use crate::synth::CovariateWeights;

const LOG_K_MIN: f64 = -12.0;
const LOG_K_MAX: f64 = 30.0;
/// Linear predictors beyond this are treated as divergent.
const ETA_MAX: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NbOptions {
    /// Relative log-likelihood change that ends the outer loop.
    pub tol: f64,
    pub max_iter: usize,
    /// Hold the dispersion at this value instead of estimating it.
    pub fixed_k: Option<f64>,
}

impl Default for NbOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            fixed_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbCoefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbFit {
    pub alpha0: f64,
    /// One per covariate, in input order.
    pub beta: Vec<f64>,
    pub names: Vec<String>,
    pub k: f64,
    /// Intercept first.
    pub std_errors: Vec<f64>,
    pub z: Vec<f64>,
    pub p_values: Vec<f64>,
    pub log_likelihood: f64,
    /// Log-likelihood after each outer iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n: usize,
}

struct Problem<'a> {
    x: DMatrix<f64>,
    y: &'a [f64],
    offset: Vec<f64>,
}

impl Problem<'_> {
    fn eta(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut e = &self.x * beta;
        for (v, o) in e.iter_mut().zip(&self.offset) {
            *v += o;
        }
        e
    }

    fn loglik_at(&self, eta: &DVector<f64>, k: f64) -> f64 {
        eta.iter()
            .zip(self.y)
            .map(|(&e, &y)| nb_logpmf(y, e.exp(), k))
            .sum()
    }

    fn diverged(eta: &DVector<f64>) -> bool {
        eta.iter().any(|e| !e.is_finite() || *e > ETA_MAX)
    }
}

/// `ln Γ(y + k) − ln Γ(k)` for a nonnegative integer `y`.
fn ln_gamma_ratio(y: f64, k: f64) -> f64 {
    if y < 2000.0 {
        (0..y as u64).map(|j| (k + j as f64).ln()).sum()
    } else {
        ln_gamma(y + k) - ln_gamma(k)
    }
}

/// NB2 log-probability with mean `mu` and dispersion `k`.
pub fn nb_logpmf(y: f64, mu: f64, k: f64) -> f64 {
    let log_kmu = (k + mu).ln();
    let y_term = if y > 0.0 { y * (mu.ln() - log_kmu) } else { 0.0 };
    ln_gamma_ratio(y, k) - ln_gamma(y + 1.0) - k * (mu / k).ln_1p() + y_term
}

/// Fit `log E[y] = α₀ + β'x + offset` with `var(y) = μ + μ²/k`.
///
/// `covariates[j]` holds covariate `j` for every observation. The dispersion
/// and the coefficients are updated in turn (golden-section search over
/// `log k`, then IRLS with step halving) until the log-likelihood settles.
/// Hitting the iteration cap leaves `converged` false rather than failing.
pub fn fit_nb(y: &[u64], covariates: &[Vec<f64>], names: &[String], offset: Option<&[f64]>, options: &NbOptions) -> Result<NbFit> {
    let n = y.len();
    let p = covariates.len() + 1;
    if names.len() != covariates.len() {
        return Err(Error::invalid("covariate names and columns differ in count"));
    }
    if covariates.iter().any(|c| c.len() != n) || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::invalid("covariate columns must match the response length"));
    }
    if n <= p {
        return Err(Error::TooShort { needed: p + 1, got: n });
    }
    if y.iter().all(|&v| v == 0) {
        return Err(Error::invalid("response is identically zero"));
    }
    if covariates.iter().flatten().chain(offset.into_iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("GLM inputs"));
    }
    if let Some(k) = options.fixed_k {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid("fixed dispersion must be positive"));
        }
    }
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let prob = Problem {
        x: DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { covariates[j - 1][i] }),
        y: &yf,
        offset: offset.map_or_else(|| vec![0.0; n], <[f64]>::to_vec),
    };

    let mean_y = yf.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(p);
    beta[0] = mean_y.ln() - prob.offset.iter().sum::<f64>() / n as f64;
    let var_y = yf.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut k = options.fixed_k.unwrap_or_else(|| {
        if var_y > mean_y {
            (mean_y * mean_y / (var_y - mean_y)).clamp(1e-3, 1e6)
        } else {
            1e6
        }
    });

    let mut ll = prob.loglik_at(&prob.eta(&beta), k);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        beta = irls(&prob, beta, k, iterations)?;
        if options.fixed_k.is_none() {
            k = update_dispersion(&prob, &beta, k);
        }
        let next = prob.loglik_at(&prob.eta(&beta), k);
        trace.push(next);
        let change = (next - ll).abs() / (1.0 + ll.abs());
        ll = next;
        if change < options.tol && iterations > 1 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("NB GLM stopped after {iterations} iterations without meeting tolerance");
    }

    let eta = prob.eta(&beta);
    // a coefficient running off to infinity drives some fitted means to 0
    let floor = mean_y.ln() - 30.0;
    if eta.iter().any(|e| *e < floor) {
        return Err(Error::Separation(iterations));
    }
    let mut info = DMatrix::zeros(p, p);
    for i in 0..n {
        let mu = eta[i].exp();
        let w = mu / (1.0 + mu / k);
        let xi = prob.x.row(i);
        info += xi.transpose() * xi * w;
    }
    let cov = info
        .cholesky()
        .ok_or(Error::Singular("GLM information matrix"))?
        .inverse();
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = beta.iter().zip(&std_errors).map(|(b, s)| safe_ratio(*b, *s)).collect();
    let p_values = z.iter().map(|z| z_two_sided(*z)).collect();
    Ok(NbFit {
        alpha0: beta[0],
        beta: beta.iter().skip(1).copied().collect(),
        names: names.to_vec(),
        k,
        std_errors,
        z,
        p_values,
        log_likelihood: ll,
        trace,
        converged,
        iterations,
        n,
    })
}

/// IRLS for the coefficients at fixed dispersion. Each accepted step raises
/// the log-likelihood; a step that would lower it is halved until it does not.
fn irls(prob: &Problem, mut beta: DVector<f64>, k: f64, outer: usize) -> Result<DVector<f64>> {
    let n = prob.y.len();
    let p = beta.len();
    let mut eta = prob.eta(&beta);
    let mut ll = prob.loglik_at(&eta, k);
    for _ in 0..50 {
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let mu = eta[i].exp();
            let w = mu / (1.0 + mu / k);
            let z = eta[i] - prob.offset[i] + (prob.y[i] - mu) / mu;
            let xi = prob.x.row(i).transpose();
            xtwx += &xi * xi.transpose() * w;
            xtwz += xi * (w * z);
        }
        let Some(chol) = xtwx.cholesky() else {
            return Err(Error::Singular("GLM weighted normal equations"));
        };
        let target = chol.solve(&xtwz);
        let mut step = &target - &beta;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step;
            let e = prob.eta(&cand);
            if !Problem::diverged(&e) {
                let l = prob.loglik_at(&e, k);
                if l >= ll - 1e-12 * ll.abs() {
                    accepted = Some((cand, e, l));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, e, l)) = accepted else {
            if Problem::diverged(&prob.eta(&target)) {
                return Err(Error::Separation(outer));
            }
            break;
        };
        let change = (l - ll).abs() / (1.0 + ll.abs());
        beta = cand;
        eta = e;
        ll = l;
        if change < 1e-13 {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Separation(outer));
    }
    Ok(beta)
}

/// Golden-section search over `log k`, accepted only if it does not lower the
/// log-likelihood.
fn update_dispersion(prob: &Problem, beta: &DVector<f64>, k: f64) -> f64 {
    let eta = prob.eta(beta);
    let f = |lk: f64| prob.loglik_at(&eta, lk.exp());
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (LOG_K_MIN, LOG_K_MAX);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-9 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let lk = 0.5 * (a + b);
    if f(lk) >= f(k.ln()) {
        lk.exp()
    } else {
        k
    }
}

/// Fit against a covariate table. `units` picks and orders the observations.
pub fn fit_nb_table(
    response: &[u64],
    table: &CovariateTable,
    units: &[String],
    covariates: &[String],
    offset: Option<&[f64]>,
    options: &NbOptions,
) -> Result<NbFit> {
    let mut cols = vec![Vec::with_capacity(units.len()); covariates.len()];
    for u in units {
        for (c, v) in cols.iter_mut().zip(table.column(u, covariates)?) {
            c.push(v);
        }
    }
    fit_nb(response, &cols, covariates, offset, options)
}

impl NbFit {
    pub fn rows(&self) -> Vec<NbCoefficient> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.names.iter().cloned())
            .zip(std::iter::once(self.alpha0).chain(self.beta.iter().copied()))
            .enumerate()
            .map(|(j, (name, estimate))| NbCoefficient {
                name,
                estimate,
                std_error: self.std_errors[j],
                z_value: self.z[j],
                p_value: self.p_values[j],
            })
            .collect()
    }

    /// Plain-text coefficient table.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>9} {:>10}", "", "Estimate", "Std. Error", "z value", "Pr(>|z|)");
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{:<24} {:>12.5} {:>12.5} {:>9.3} {:>10.4e}",
                r.name, r.estimate, r.std_error, r.z_value, r.p_value
            );
        }
        let _ = writeln!(
            s,
            "---\nn = {}; dispersion k = {:.4}; log-likelihood = {:.4}; {} after {} iterations",
            self.n,
            self.k,
            self.log_likelihood,
            if self.converged { "converged" } else { "NOT converged" },
            self.iterations
        );
        s
    }

    /// Score vector Σ x_i (y_i − μ_i) / (1 + μ_i/k), intercept first.
    pub fn score(&self, y: &[u64], covariates: &[Vec<f64>], offset: Option<&[f64]>) -> Vec<f64> {
        let p = self.beta.len() + 1;
        let mut s = vec![0.0; p];
        for i in 0..y.len() {
            let eta = self.alpha0
                + self.beta.iter().zip(covariates).map(|(b, c)| b * c[i]).sum::<f64>()
                + offset.map_or(0.0, |o| o[i]);
            let mu = eta.exp();
            let r = (y[i] as f64 - mu) / (1.0 + mu / self.k);
            s[0] += r;
            for j in 1..p {
                s[j] += covariates[j - 1][i] * r;
            }
        }
        s
    }
}

/// Covariates with p below `alpha`, by decreasing |coefficient| (ties by name).
pub fn select_covariates(fit: &NbFit, alpha: f64) -> Vec<String> {
    let mut chosen: Vec<(usize, f64)> = fit
        .beta
        .iter()
        .enumerate()
        .filter(|(j, _)| fit.p_values[j + 1] < alpha)
        .map(|(j, b)| (j, b.abs()))
        .collect();
    chosen.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| fit.names[a.0].cmp(&fit.names[b.0])));
    if chosen.is_empty() {
        log::warn!("no covariate is significant at level {alpha}");
    }
    chosen.into_iter().map(|(j, _)| fit.names[j].clone()).collect()
}

/// Covariate weights proportional to |coefficient|, summing to one.
pub fn v_from_coefficients(fit: &NbFit, selected: &[String]) -> Result<CovariateWeights> {
    if selected.is_empty() {
        return Err(Error::Empty("covariate selection"));
    }
    let mags = selected
        .iter()
        .map(|name| {
            fit.names
                .iter()
                .position(|n| n == name)
                .map(|j| fit.beta[j].abs())
                .ok_or_else(|| Error::invalid(format!("covariate {name:?} not in the fit")))
        })
        .collect::<Result<Vec<_>>>()?;
    CovariateWeights::from_magnitudes(selected.to_vec(), &mags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::simulate_nb;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn intercept_only_is_log_mean() {
        let f = fit_nb(&[2, 4, 6], &[], &[], None, &NbOptions::default()).unwrap();
        assert!((f.alpha0 - 4f64.ln()).abs() < 1e-8, "{}", f.alpha0);
        assert!(f.k > 0.0);
    }

    #[test]
    fn rejects_zero_response() {
        assert!(fit_nb(&[0, 0, 0, 0], &[vec![1.0, 2.0, 3.0, 4.0]], &names(1), None, &NbOptions::default()).is_err());
    }

    #[test]
    fn separation_detected() {
        let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let err = fit_nb(&[3, 5, 4, 0, 0, 0], &[x], &names(1), None, &NbOptions::default());
        assert!(matches!(err, Err(Error::Separation(_))), "{err:?}");
    }

    #[test]
    fn logpmf_limits() {
        // k → ∞ approaches Poisson
        let pois = -3.0 + 2.0 * 3f64.ln() - 2f64.ln();
        assert!((nb_logpmf(2.0, 3.0, 1e10) - pois).abs() < 1e-8);
        // k = 1 is geometric: P(y) = (1/(1+μ)) (μ/(1+μ))^y
        assert!((nb_logpmf(3.0, 2.0, 1.0) - (1.0 / 3.0f64 * (2.0f64 / 3.0).powi(3)).ln()).abs() < 1e-12);
        assert!((ln_gamma_ratio(2500.0, 3.5) - (ln_gamma(2503.5) - ln_gamma(3.5))).abs() < 1e-6);
        assert!((ln_gamma_ratio(1999.0, 3.5) - (ln_gamma(2002.5) - ln_gamma(3.5))).abs() < 1e-7);
    }

    #[test]
    fn simulated_recovery_and_score() {
        let truth = [0.5, -0.3, 0.2];
        let (y, x, off) = simulate_nb(400, 1.5, &truth, 2.0, 11);
        let f = fit_nb(&y, &x, &names(3), Some(&off), &NbOptions::default()).unwrap();
        assert!(f.converged);
        for (j, b) in truth.iter().enumerate() {
            assert!((f.beta[j] - b).abs() < 4.0 * f.std_errors[j + 1], "{j}: {} vs {b}", f.beta[j]);
        }
        for s in f.score(&y, &x, Some(&off)) {
            assert!(s.abs() < 1e-4, "{s}");
        }
        assert!(f.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12 * w[0].abs()));
        assert!(f.text_table().contains("x2"));
    }

    #[test]
    fn poisson_limit_matches_oracle() {
        let (y, x, off) = simulate_nb(300, 1.0, &[0.4, 0.1], 1e9, 5);
        let opts = NbOptions {
            fixed_k: Some(1e8),
            ..NbOptions::default()
        };
        let f = fit_nb(&y, &x, &names(2), Some(&off), &opts).unwrap();
        let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| vec![1.0, x[0][i], x[1][i]]).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        let o = crate::oracle::poisson_irls(&rows, &yf, Some(&off)).unwrap();
        assert!((f.alpha0 - o[0]).abs() < 1e-4);
        assert!((f.beta[0] - o[1]).abs() < 1e-4);
        assert!((f.beta[1] - o[2]).abs() < 1e-4);
    }

    fn fake_fit(beta: Vec<f64>, p: Vec<f64>) -> NbFit {
        let k = beta.len();
        NbFit {
            alpha0: 0.0,
            names: names(k),
            std_errors: vec![1.0; k + 1],
            z: vec![0.0; k + 1],
            p_values: std::iter::once(0.5).chain(p).collect(),
            beta,
            k: 1.0,
            log_likelihood: 0.0,
            trace: vec![],
            converged: true,
            iterations: 1,
            n: 10,
        }
    }

    #[test]
    fn selection_rules() {
        let f = fake_fit(vec![0.5, 2.0, -0.9], vec![0.01, 0.30, 0.001]);
        assert_eq!(select_covariates(&f, 0.05), vec!["x2", "x0"]);
        assert!(select_covariates(&f, 0.0).is_empty());
    }

    #[test]
    fn weights_from_magnitudes() {
        let f = fake_fit(vec![2.0, -2.0, 3.0, 1.0], vec![0.0; 4]);
        let v = v_from_coefficients(&f, &["x0".into(), "x1".into()]).unwrap();
        assert_eq!(v.v, vec![0.5, 0.5]);
        let v = v_from_coefficients(&f, &["x2".into(), "x3".into()]).unwrap();
        assert_eq!(v.v, vec![0.75, 0.25]);
        let v = v_from_coefficients(&f, &["x3".into()]).unwrap();
        assert_eq!(v.v, vec![1.0]);
        let zero = fake_fit(vec![0.0], vec![0.0]);
        assert!(v_from_coefficients(&zero, &["x0".into()]).is_err());
        assert!(v_from_coefficients(&f, &[]).is_err());
    }

    proptest! {
        #[test]
        fn weights_scale_invariant(b in prop::collection::vec(0.01f64..10.0, 1..6), c in 0.01f64..100.0) {
            let sel = names(b.len());
            let f1 = fake_fit(b.clone(), vec![0.0; b.len()]);
            let f2 = fake_fit(b.iter().map(|v| -v * c).collect(), vec![0.0; b.len()]);
            let v1 = v_from_coefficients(&f1, &sel).unwrap();
            let v2 = v_from_coefficients(&f2, &sel).unwrap();
            prop_assert!((v1.v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in v1.v.iter().zip(&v2.v) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
