//! Synthetic control: donor weights on the simplex for a given covariate
//! weighting, a derivative-free search over covariate weightings, and the
//! treated-versus-synthetic effect regression.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::did::{design_from_series, fit_ols_classical, DidFit};
use crate::error::{Error, Result};
use crate::panel::{RateSeries, TreatmentSpec};

/// Diagonal covariate weights, nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateWeights {
    pub names: Vec<String>,
    pub v: Vec<f64>,
}

impl CovariateWeights {
    /// Normalize nonnegative magnitudes to unit sum.
    pub fn from_magnitudes(names: Vec<String>, magnitudes: &[f64]) -> Result<Self> {
        if names.len() != magnitudes.len() {
            return Err(Error::invalid("covariate names and weights differ in count"));
        }
        if names.is_empty() {
            return Err(Error::Empty("covariate weights"));
        }
        if magnitudes.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid("covariate weights must be finite and nonnegative"));
        }
        let total: f64 = magnitudes.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("covariate weights are all zero"));
        }
        Ok(Self {
            names,
            v: magnitudes.iter().map(|m| m / total).collect(),
        })
    }

    pub fn uniform(names: Vec<String>) -> Result<Self> {
        let ones = vec![1.0; names.len()];
        Self::from_magnitudes(names, &ones)
    }
}

/// Donor weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScWeights {
    pub donor_ids: Vec<String>,
    pub w: Vec<f64>,
}

/// Result of the inner quadratic program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSolution {
    pub w: Vec<f64>,
    /// (x1 − X0 w)' V (x1 − X0 w)
    pub objective: f64,
    /// Frank–Wolfe duality gap at `w`; an upper bound on `objective − optimum`.
    pub gap: f64,
    pub iterations: usize,
}

fn check_inner(x1: &[f64], x0: &[Vec<f64>], v: &[f64]) -> Result<usize> {
    let k = x1.len();
    if k == 0 {
        return Err(Error::Empty("covariate vector"));
    }
    if x0.len() != k || v.len() != k {
        return Err(Error::invalid("x0 must have one row and v one entry per covariate"));
    }
    let n = x0[0].len();
    if n == 0 {
        return Err(Error::Empty("donor pool"));
    }
    if x0.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("x0 rows differ in length"));
    }
    if x1.iter().chain(x0.iter().flatten()).chain(v).any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("synthetic-control inputs"));
    }
    if v.iter().any(|a| *a < 0.0) {
        return Err(Error::invalid("covariate weights must be nonnegative"));
    }
    Ok(n)
}

/// Weighted loss (x1 − X0 w)' V (x1 − X0 w).
pub fn inner_objective(x1: &[f64], x0: &[Vec<f64>], v: &[f64], w: &[f64]) -> f64 {
    x1.iter()
        .zip(x0)
        .zip(v)
        .map(|((a, row), vk)| {
            let r = a - row.iter().zip(w).map(|(x, wj)| x * wj).sum::<f64>();
            vk * r * r
        })
        .sum()
}

/// Minimize (x1 − X0 w)' V (x1 − X0 w) over the simplex.
///
/// With p_j = V^½ (X0_j − x1) the loss is ‖Σ w_j p_j‖², so the problem is the
/// minimum-norm point of the hull of the p_j. It is solved with Wolfe's
/// active-set method (a fully corrective Frank–Wolfe), stopping once the
/// duality gap falls below `tol`. `x0` is K rows by N donors.
pub fn solve_inner(x1: &[f64], x0: &[Vec<f64>], v: &[f64], tol: f64) -> Result<InnerSolution> {
    let n = check_inner(x1, x0, v)?;
    let k = x1.len();
    let points: Vec<DVector<f64>> = (0..n)
        .map(|j| DVector::from_fn(k, |r, _| v[r].sqrt() * (x0[r][j] - x1[r])))
        .collect();
    let gap_at = |y: &DVector<f64>| -> (usize, f64) {
        let (j, m) = points
            .iter()
            .enumerate()
            .map(|(j, p)| (j, p.dot(y)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("n >= 1");
        (j, (2.0 * (y.dot(y) - m)).max(0.0))
    };

    let start = (0..n)
        .min_by(|&a, &b| points[a].norm_squared().total_cmp(&points[b].norm_squared()))
        .expect("n >= 1");
    let mut active = vec![start];
    let mut lambda = vec![1.0];
    let mut y = points[start].clone();
    let max_iter = 100 + 20 * n;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let (j, gap) = gap_at(&y);
        if gap <= tol || active.contains(&j) {
            break;
        }
        active.push(j);
        lambda.push(0.0);
        // minor cycles: move toward the affine minimizer while it leaves the simplex
        loop {
            let alpha = affine_minimizer(&points, &active);
            if alpha.iter().all(|a| *a > 1e-15) {
                lambda = alpha;
                break;
            }
            let mut theta = 1.0_f64;
            for (l, a) in lambda.iter().zip(&alpha) {
                if *a <= 1e-15 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l += theta * (a - *l);
            }
            let keep: Vec<bool> = lambda.iter().map(|l| *l > 1e-15).collect();
            if keep.iter().all(|k| *k) {
                // numerical stall: drop the smallest coefficient
                let (i, _) = lambda
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .expect("nonempty");
                active.remove(i);
                lambda.remove(i);
            } else {
                let mut i = 0;
                active.retain(|_| {
                    i += 1;
                    keep[i - 1]
                });
                let mut i = 0;
                lambda.retain(|_| {
                    i += 1;
                    keep[i - 1]
                });
            }
            let s: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= s);
            if active.len() <= 1 {
                break;
            }
        }
        y = combine(&points, &active, &lambda);
    }

    let mut w = vec![0.0; n];
    for (&j, &l) in active.iter().zip(&lambda) {
        w[j] = l.max(0.0);
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    let y = (0..n).fold(DVector::zeros(k), |acc, j| acc + &points[j] * w[j]);
    let (_, gap) = gap_at(&y);
    Ok(InnerSolution {
        objective: inner_objective(x1, x0, v, &w),
        w,
        gap,
        iterations,
    })
}

fn combine(points: &[DVector<f64>], active: &[usize], lambda: &[f64]) -> DVector<f64> {
    active
        .iter()
        .zip(lambda)
        .fold(DVector::zeros(points[0].len()), |acc, (&j, &l)| acc + &points[j] * l)
}

/// Minimizer of ‖Σ α_i p_i‖² subject to Σ α_i = 1 over the active points.
fn affine_minimizer(points: &[DVector<f64>], active: &[usize]) -> Vec<f64> {
    let m = active.len();
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    for a in 0..m {
        for b in 0..m {
            kkt[(a, b)] = points[active[a]].dot(&points[active[b]]);
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| {
            kkt.svd(true, true)
                .solve(&rhs, 1e-12)
                .unwrap_or_else(|_| DVector::from_element(m + 1, 1.0 / m as f64))
        });
    let alpha: Vec<f64> = sol.iter().take(m).copied().collect();
    let s: f64 = alpha.iter().sum();
    if s.abs() > 1e-12 {
        alpha.iter().map(|a| a / s).collect()
    } else {
        vec![1.0 / m as f64; m]
    }
}

/// Outer-search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterOptions {
    /// Maximum number of inner solves.
    pub budget: usize,
    /// Random starting points on top of `v_init` and uniform.
    pub restarts: usize,
    pub seed: u64,
    pub inner_tol: f64,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            budget: 400,
            restarts: 2,
            seed: 0,
            inner_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub evaluation: usize,
    pub v: Vec<f64>,
    pub mspe: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterSolution {
    pub v: Vec<f64>,
    pub inner: InnerSolution,
    pub pre_mspe: f64,
    pub audit: Vec<AuditEntry>,
}

/// Mean squared pre-period gap between `y1` and `Y0 w`; `y0` is T0 rows by N.
pub fn pre_mspe(y1: &[f64], y0: &[Vec<f64>], w: &[f64]) -> f64 {
    y1.iter()
        .zip(y0)
        .map(|(a, row)| (a - row.iter().zip(w).map(|(x, wj)| x * wj).sum::<f64>()).powi(2))
        .sum::<f64>()
        / y1.len() as f64
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

struct Search<'a> {
    y1: &'a [f64],
    y0: &'a [Vec<f64>],
    x1: &'a [f64],
    x0: &'a [Vec<f64>],
    tol: f64,
    budget: usize,
    audit: Vec<AuditEntry>,
    best: Option<(Vec<f64>, InnerSolution, f64)>,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.audit.len() >= self.budget
    }

    fn eval(&mut self, v: Vec<f64>) -> Result<f64> {
        let inner = solve_inner(self.x1, self.x0, &v, self.tol)?;
        let mspe = pre_mspe(self.y1, self.y0, &inner.w);
        let improves = self.best.as_ref().is_none_or(|b| mspe < b.2);
        if improves {
            self.best = Some((v.clone(), inner, mspe));
        }
        let best_so_far = self.best.as_ref().map_or(mspe, |b| b.2);
        self.audit.push(AuditEntry {
            evaluation: self.audit.len() + 1,
            v,
            mspe,
            best_so_far,
        });
        Ok(mspe)
    }

    /// Nelder–Mead on softmax coordinates, limited to `evals` evaluations.
    fn nelder_mead(&mut self, start: Vec<f64>, evals: usize) -> Result<()> {
        let dim = start.len();
        let stop = (self.audit.len() + evals).min(self.budget);
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
        for i in 0..=dim {
            if self.audit.len() >= stop {
                return Ok(());
            }
            let mut p = start.clone();
            if i > 0 {
                p[i - 1] += 1.0;
            }
            let f = self.eval(softmax(&p))?;
            simplex.push((p, f));
        }
        while self.audit.len() < stop {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (lo, hi) = (simplex[0].1, simplex[dim].1);
            if (hi - lo).abs() <= 1e-14 * (1.0 + lo.abs()) {
                break;
            }
            let centroid: Vec<f64> = (0..dim)
                .map(|d| simplex[..dim].iter().map(|p| p.0[d]).sum::<f64>() / dim as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[dim].0)
                    .map(|(c, w)| c + t * (c - w))
                    .collect()
            };
            let xr = along(1.0);
            let fr = self.eval(softmax(&xr))?;
            if fr < simplex[0].1 {
                if self.audit.len() >= stop {
                    break;
                }
                let xe = along(2.0);
                let fe = self.eval(softmax(&xe))?;
                simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[dim - 1].1 {
                simplex[dim] = (xr, fr);
            } else {
                if self.audit.len() >= stop {
                    break;
                }
                let t = if fr < simplex[dim].1 { 0.5 } else { -0.5 };
                let xc = along(t);
                let fc = self.eval(softmax(&xc))?;
                if fc < fr.min(simplex[dim].1) {
                    simplex[dim] = (xc, fc);
                } else {
                    for i in 1..=dim {
                        if self.audit.len() >= stop {
                            return Ok(());
                        }
                        let p: Vec<f64> = simplex[0]
                            .0
                            .iter()
                            .zip(&simplex[i].0)
                            .map(|(b, x)| b + 0.5 * (x - b))
                            .collect();
                        let f = self.eval(softmax(&p))?;
                        simplex[i] = (p, f);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Search covariate weightings for the one whose inner solution best
/// reproduces the treated unit's pre-period outcomes.
///
/// `y1` holds the treated pre-period values and `y0` the donors' (T0 rows by
/// N). `v_init` is evaluated first as given, then Nelder–Mead runs from it,
/// from uniform weights and from `restarts` random points until `budget`
/// inner solves have been spent. Every evaluation is logged in `audit`.
pub fn solve_outer(y1: &[f64], y0: &[Vec<f64>], x1: &[f64], x0: &[Vec<f64>], v_init: &CovariateWeights, options: &OuterOptions) -> Result<OuterSolution> {
    if options.budget < 1 {
        return Err(Error::invalid("outer budget must be at least one evaluation"));
    }
    if y1.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: y1.len(),
        });
    }
    let n = check_inner(x1, x0, &v_init.v)?;
    if y0.len() != y1.len() || y0.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("pre-period donor matrix must be T0 by N"));
    }
    if y1.iter().chain(y0.iter().flatten()).any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("pre-period outcomes"));
    }
    let mut search = Search {
        y1,
        y0,
        x1,
        x0,
        tol: options.inner_tol,
        budget: options.budget,
        audit: Vec::new(),
        best: None,
    };
    let k = x1.len();
    search.eval(v_init.v.clone())?;
    if k > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut starts = vec![v_init.v.iter().map(|v| v.max(1e-12).ln()).collect::<Vec<_>>(), vec![0.0; k]];
        for _ in 0..options.restarts {
            starts.push((0..k).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        let share = (options.budget.saturating_sub(1) / starts.len()).max(k + 2);
        for s in starts {
            if search.exhausted() {
                break;
            }
            search.nelder_mead(s, share)?;
        }
    }
    let (v, inner, mspe) = search.best.expect("at least one evaluation");
    Ok(OuterSolution {
        v,
        inner,
        pre_mspe: mspe,
        audit: search.audit,
    })
}

/// How covariate weights are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ScMode {
    /// Use the initial weights as they are.
    Fixed,
    /// Search over weights, starting from the initial ones.
    Nested(OuterOptions),
}

/// Inputs for a full synthetic-control run.
#[derive(Debug, Clone)]
pub struct ScProblem<'a> {
    pub treated: &'a RateSeries,
    /// Donor outcome series on the treated unit's date axis.
    pub donors: &'a [RateSeries],
    pub spec: &'a TreatmentSpec,
    /// Treated covariates (length K).
    pub x1: &'a [f64],
    /// Donor covariates, K rows by N.
    pub x0: &'a [Vec<f64>],
    pub v_init: &'a CovariateWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScSolution {
    pub weights: ScWeights,
    pub v: CovariateWeights,
    pub covariate_loss: f64,
    pub inner_gap: f64,
    pub pre_mspe: f64,
    pub t0: usize,
    pub synthetic_series: RateSeries,
    pub tau_fit: DidFit,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
}

/// Pointwise Σ_j w_j · donor_j.
pub fn synthetic_series(donors: &[RateSeries], w: &[f64]) -> Result<RateSeries> {
    let first = donors.first().ok_or(Error::Empty("donor pool"))?;
    if donors.len() != w.len() {
        return Err(Error::invalid("one weight per donor required"));
    }
    if donors.iter().any(|d| d.dates != first.dates) {
        return Err(Error::invalid("donor series do not share a date axis"));
    }
    let rates = (0..first.len())
        .map(|t| donors.iter().zip(w).map(|(d, wj)| d.rates[t] * wj).sum())
        .collect();
    RateSeries::new("synthetic", first.dates.clone(), rates)
}

/// Solve for donor weights (fixed or searched covariate weights), build the
/// synthetic series and run the effect regression.
pub fn synthesize(problem: &ScProblem, mode: ScMode) -> Result<ScSolution> {
    let ScProblem {
        treated,
        donors,
        spec,
        x1,
        x0,
        v_init,
    } = problem.clone();
    if donors.iter().any(|d| d.dates != treated.dates) {
        return Err(Error::invalid("donor series must share the treated unit's date axis"));
    }
    if x0.first().map_or(0, Vec::len) != donors.len() {
        return Err(Error::invalid("covariate matrix and donor series disagree on the pool size"));
    }
    let t0 = treated.pre_treatment_len(spec);
    let pre = |s: &RateSeries| -> Vec<f64> {
        s.dates
            .iter()
            .zip(&s.rates)
            .filter(|(d, _)| **d < spec.effective_start)
            .map(|(_, r)| *r)
            .collect()
    };
    let y1 = pre(treated);
    let cols: Vec<Vec<f64>> = donors.iter().map(pre).collect();
    let y0: Vec<Vec<f64>> = (0..t0).map(|t| cols.iter().map(|c| c[t]).collect()).collect();

    let (v, inner, audit) = match mode {
        ScMode::Fixed => {
            check_inner(x1, x0, &v_init.v)?;
            (v_init.v.clone(), solve_inner(x1, x0, &v_init.v, 1e-10)?, Vec::new())
        }
        ScMode::Nested(opts) => {
            let o = solve_outer(&y1, &y0, x1, x0, v_init, &opts)?;
            (o.v, o.inner, o.audit)
        }
    };
    if t0 < 2 {
        return Err(Error::TooShort { needed: 2, got: t0 });
    }
    let synthetic = synthetic_series(donors, &inner.w)?;
    let tau_fit = sc_effect(treated, &synthetic, spec)?;
    Ok(ScSolution {
        weights: ScWeights {
            donor_ids: donors.iter().map(|d| d.unit_id.clone()).collect(),
            w: inner.w.clone(),
        },
        v: CovariateWeights {
            names: v_init.names.clone(),
            v,
        },
        covariate_loss: inner.objective,
        inner_gap: inner.gap,
        pre_mspe: pre_mspe(&y1, &y0, &inner.w),
        t0,
        synthetic_series: synthetic,
        tau_fit,
        audit,
    })
}

/// Two-unit difference-in-differences of the treated series against its
/// synthetic counterpart, reported with classical standard errors.
pub fn sc_effect(treated: &RateSeries, synthetic: &RateSeries, spec: &TreatmentSpec) -> Result<DidFit> {
    let mut synth = synthetic.clone();
    if synth.unit_id == treated.unit_id {
        synth.unit_id = format!("{} (synthetic)", treated.unit_id);
    }
    let design = design_from_series(treated, &[synth], spec, false)?;
    fit_ols_classical(&design)
}

impl ScSolution {
    /// Plot data: date, treated, synthetic.
    pub fn write_plot_csv<W: std::io::Write>(&self, treated: &RateSeries, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::invalid(format!("writing plot CSV: {e}"));
        w.write_record(["date", "treated", "synthetic"]).map_err(err)?;
        for ((d, a), b) in treated.dates.iter().zip(&treated.rates).zip(&self.synthetic_series.rates) {
            w.write_record([d.to_string(), a.to_string(), b.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| Error::invalid(format!("writing plot CSV: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::simplex_grid_min;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    #[test]
    fn exact_donor_gets_all_weight() {
        let x0 = vec![vec![0.0, 1.0, 3.0], vec![2.0, -1.0, 0.5]];
        let s = solve_inner(&[1.0, -1.0], &x0, &[0.5, 0.5], 1e-10).unwrap();
        assert!((s.w[1] - 1.0).abs() < 1e-12, "{:?}", s.w);
        assert!(s.objective < 1e-20);
    }

    #[test]
    fn single_donor() {
        let s = solve_inner(&[5.0, 1.0], &[vec![0.0], vec![2.0]], &[0.3, 0.7], 1e-10).unwrap();
        assert_eq!(s.w, vec![1.0]);
    }

    #[test]
    fn midpoint_interpolation() {
        let s = solve_inner(&[0.5], &[vec![0.0, 1.0]], &[1.0], 1e-10).unwrap();
        assert!(s.objective < 1e-20);
        let (_, g) = simplex_grid_min(|w| inner_objective(&[0.5], &[vec![0.0, 1.0]], &[1.0], w), 2, 1e-3).unwrap();
        assert!(s.objective <= g + 1e-12);
        assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_normalize() {
        let v = CovariateWeights::from_magnitudes(vec!["a".into(), "b".into()], &[3.0, 1.0]).unwrap();
        assert_eq!(v.v, vec![0.75, 0.25]);
        assert!(CovariateWeights::from_magnitudes(vec!["a".into()], &[0.0]).is_err());
        assert!(CovariateWeights::from_magnitudes(vec!["a".into()], &[-1.0]).is_err());
    }

    #[test]
    fn outer_single_covariate_is_inner() {
        let x0 = vec![vec![0.0, 1.0, 2.0]];
        let y0 = vec![vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 5.0]];
        let v = CovariateWeights::uniform(vec!["a".into()]).unwrap();
        let o = solve_outer(&[1.5, 2.5], &y0, &[0.5], &x0, &v, &OuterOptions::default()).unwrap();
        let i = solve_inner(&[0.5], &x0, &[1.0], 1e-10).unwrap();
        assert_eq!(o.audit.len(), 1);
        assert_eq!(o.inner.w, i.w);
        let zero = OuterOptions {
            budget: 0,
            ..OuterOptions::default()
        };
        assert!(solve_outer(&[1.5, 2.5], &y0, &[0.5], &x0, &v, &zero).is_err());
    }

    #[test]
    fn outer_recovers_known_mix() {
        // covariate 0 identifies the mix, covariate 1 points elsewhere
        let x0 = vec![vec![0.0, 1.0, 4.0], vec![3.0, 0.0, 1.0]];
        let w = [0.3, 0.7, 0.0];
        let x1 = [0.7, 9.0];
        let y0: Vec<Vec<f64>> = (0..8).map(|t| vec![t as f64, 2.0 * t as f64 + 1.0, 0.5 * (t * t) as f64]).collect();
        let y1: Vec<f64> = y0.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let v = CovariateWeights::uniform(vec!["a".into(), "b".into()]).unwrap();
        let o = solve_outer(&y1, &y0, &x1, &x0, &v, &OuterOptions::default()).unwrap();
        assert!(o.pre_mspe < 1e-8, "{}", o.pre_mspe);
        assert!(o.audit.windows(2).all(|a| a[1].best_so_far <= a[0].best_so_far));
        assert!(o.audit.len() <= OuterOptions::default().budget);
    }

    #[test]
    fn nested_never_worse_than_fixed() {
        for seed in 0..6 {
            let m = crate::sim::convex_mix(5, 3, 24, 0.2, seed).unwrap();
            // skew the treated covariates so fixed weights pick a poor match
            let x1: Vec<f64> = m.x1.iter().enumerate().map(|(i, x)| if i == 0 { x + 1.5 } else { *x }).collect();
            let v = CovariateWeights::from_magnitudes(vec!["a".into(), "b".into(), "c".into()], &[0.8, 0.1, 0.1]).unwrap();
            let p = ScProblem {
                treated: &m.treated,
                donors: &m.donors,
                spec: &m.spec,
                x1: &x1,
                x0: &m.x0,
                v_init: &v,
            };
            let fixed = synthesize(&p, ScMode::Fixed).unwrap();
            let nested = synthesize(&p, ScMode::Nested(OuterOptions::default())).unwrap();
            assert!(nested.pre_mspe <= fixed.pre_mspe * (1.0 + 1e-9) + 1e-15, "seed {seed}: {} > {}", nested.pre_mspe, fixed.pre_mspe);
        }
    }

    #[test]
    fn effect_regression() {
        let dates: Vec<NaiveDate> = (0..6).map(|i| NaiveDate::from_ymd_opt(2020, 4, 1).unwrap() + chrono::Duration::days(i)).collect();
        let spec = TreatmentSpec::new("t", dates[3], dates[3], dates[4], 0).unwrap();
        let s = RateSeries::new("s", dates.clone(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let same = RateSeries::new("t", dates.clone(), s.rates.clone()).unwrap();
        assert!(sc_effect(&same, &s, &spec).unwrap().tau.abs() < 1e-12);
        let dropped = RateSeries::new("t", dates, vec![1.0, 2.0, 3.0, 3.5, 4.5, 6.0]).unwrap();
        let f = sc_effect(&dropped, &s, &spec).unwrap();
        assert!((f.tau + 0.5).abs() < 1e-12);
        assert!(f.note.is_some());
    }

    fn instance(k: usize, n: usize, data: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let mut it = data.iter().copied().cycle();
        let x1 = (0..k).map(|_| it.next().unwrap()).collect();
        let x0 = (0..k).map(|_| (0..n).map(|_| it.next().unwrap()).collect()).collect();
        let v = (0..k).map(|_| it.next().unwrap().abs() + 0.05).collect();
        (x1, x0, v)
    }

    proptest! {
        #[test]
        fn gap_certificate_and_feasibility(k in 1usize..6, n in 1usize..11, data in prop::collection::vec(-3.0f64..3.0, 80)) {
            let (x1, x0, v) = instance(k, n, &data);
            let s = solve_inner(&x1, &x0, &v, 1e-10).unwrap();
            prop_assert!(s.gap < 1e-10, "gap {}", s.gap);
            prop_assert!((s.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(s.w.iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn grid_dominance(k in 1usize..5, n in 1usize..4, data in prop::collection::vec(-3.0f64..3.0, 40)) {
            let (x1, x0, v) = instance(k, n, &data);
            let s = solve_inner(&x1, &x0, &v, 1e-10).unwrap();
            let (_, g) = simplex_grid_min(|w| inner_objective(&x1, &x0, &v, w), n, 1e-2).unwrap();
            prop_assert!(s.objective <= g + 1e-6);
        }

        #[test]
        fn hull_interpolation(k in 1usize..6, n in 2usize..8, data in prop::collection::vec(-3.0f64..3.0, 80), raw in prop::collection::vec(0.0f64..1.0, 8)) {
            let (_, x0, v) = instance(k, n, &data);
            let total: f64 = raw[..n].iter().sum::<f64>() + 1e-9;
            let w: Vec<f64> = raw[..n].iter().map(|r| (r + 1e-9 / n as f64) / total).collect();
            let x1: Vec<f64> = x0.iter().map(|row| row.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
            let s = solve_inner(&x1, &x0, &v, 1e-10).unwrap();
            prop_assert!(s.objective < 1e-10, "{}", s.objective);
        }

        #[test]
        fn v_scaling(k in 1usize..5, n in 1usize..6, data in prop::collection::vec(-3.0f64..3.0, 60), c in 0.1f64..10.0) {
            let (x1, x0, v) = instance(k, n, &data);
            let s = solve_inner(&x1, &x0, &v, 1e-12).unwrap();
            let vc: Vec<f64> = v.iter().map(|a| a * c).collect();
            prop_assert!((inner_objective(&x1, &x0, &vc, &s.w) - c * s.objective).abs() <= 1e-12 * (1.0 + c * s.objective));
            let sc = solve_inner(&x1, &x0, &vc, 1e-12 * c).unwrap();
            prop_assert!((sc.objective - c * s.objective).abs() <= 1e-9 * (1.0 + c * s.objective));
        }
    }
}
