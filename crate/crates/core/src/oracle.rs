//! Brute-force reference implementations for cross-checking the estimators.
//!
//! Nothing here calls into the estimation modules' solvers: linear systems
//! are solved by explicit Gaussian elimination on plain `Vec`s, the simplex
//! is searched on a lattice and knot sets are enumerated exhaustively. They
//! are slow on purpose and limited to desk-sized inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Vec<Vec<f64>>;

/// One oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub case_id: String,
    pub main_value: f64,
    pub oracle_value: f64,
    pub abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(case_id: impl Into<String>, main_value: f64, oracle_value: f64, tolerance: f64) -> Self {
        let abs_diff = (main_value - oracle_value).abs();
        Self {
            case_id: case_id.into(),
            main_value,
            oracle_value,
            abs_diff,
            tolerance,
            pass: abs_diff <= tolerance,
        }
    }

    /// One-sided check: passes when `main_value <= oracle_value + tolerance`.
    pub fn dominance(case_id: impl Into<String>, main_value: f64, oracle_value: f64, tolerance: f64) -> Self {
        let mut r = Self::new(case_id, main_value, oracle_value, tolerance);
        r.pass = main_value <= oracle_value + tolerance;
        r
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }
}

/// Solve `A z = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    let mut m: Matrix = a
        .iter()
        .zip(b)
        .map(|(row, &bi)| {
            let mut r = row.clone();
            r.push(bi);
            r
        })
        .collect();
    let scale = a.iter().flatten().fold(0.0_f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("nonempty");
        if m[piv][col].abs() <= 1e-13 * scale {
            return Err(Error::Singular("oracle elimination"));
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * z[j]).sum();
        z[i] = (m[i][n] - s) / m[i][i];
    }
    Ok(z)
}

/// Inverse by solving against each unit vector.
pub fn gauss_inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.len();
    let cols = (0..n)
        .map(|j| {
            let e: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            gauss_solve(a, &e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect())
}

fn gram(x: &Matrix) -> Matrix {
    let k = x[0].len();
    let mut g = vec![vec![0.0; k]; k];
    for row in x {
        for i in 0..k {
            for j in 0..k {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    g
}

fn xty(x: &Matrix, y: &[f64]) -> Vec<f64> {
    let k = x[0].len();
    let mut v = vec![0.0; k];
    for (row, yi) in x.iter().zip(y) {
        for j in 0..k {
            v[j] += row[j] * yi;
        }
    }
    v
}

/// OLS coefficients from the normal equations X'Xβ = X'y.
pub fn ols_normal_equations(x: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("oracle OLS needs matching nonempty X and y"));
    }
    gauss_solve(&gram(x), &xty(x, y))
}

/// Classical covariance σ̂²(X'X)⁻¹ with σ̂² = SSE/(n−k).
pub fn ols_classical_vcov(x: &Matrix, y: &[f64]) -> Result<Matrix> {
    let beta = ols_normal_equations(x, y)?;
    let (n, k) = (x.len(), x[0].len());
    let sse: f64 = residuals(x, y, &beta).iter().map(|e| e * e).sum();
    let s2 = sse / (n - k) as f64;
    Ok(gauss_inverse(&gram(x))?
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * s2).collect())
        .collect())
}

pub fn residuals(x: &Matrix, y: &[f64], beta: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(y)
        .map(|(row, yi)| yi - row.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// CR1 cluster-robust covariance computed observation pair by observation pair:
/// meat = Σ_g Σ_{i,j∈g} e_i e_j x_i x_j'.
pub fn cluster_sandwich(x: &Matrix, y: &[f64], clusters: &[usize]) -> Result<Matrix> {
    let beta = ols_normal_equations(x, y)?;
    let e = residuals(x, y, &beta);
    let (n, k) = (x.len(), x[0].len());
    let mut meat = vec![vec![0.0; k]; k];
    for i in 0..n {
        for j in 0..n {
            if clusters[i] != clusters[j] {
                continue;
            }
            let w = e[i] * e[j];
            for a in 0..k {
                for b in 0..k {
                    meat[a][b] += w * x[i][a] * x[j][b];
                }
            }
        }
    }
    let mut ids = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let g = ids.len() as f64;
    if ids.len() < 2 {
        return Err(Error::TooFewClusters(ids.len()));
    }
    let c = g / (g - 1.0) * (n as f64 - 1.0) / (n as f64 - k as f64);
    let bread = gauss_inverse(&gram(x))?;
    let left = matmul(&bread, &meat);
    Ok(matmul(&left, &bread)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * c).collect())
        .collect())
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..m).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

/// Exhaustive minimum of `objective` over the lattice
/// `{w : Σw = 1, w_i ∈ step·ℤ≥0}` of the `n`-simplex.
pub fn simplex_grid_min(objective: impl Fn(&[f64]) -> f64, n: usize, step: f64) -> Result<(Vec<f64>, f64)> {
    if n == 0 || n > 4 {
        return Err(Error::invalid("grid search supports 1 to 4 coordinates"));
    }
    if !(1e-3..=1.0).contains(&step) {
        return Err(Error::invalid("grid step must lie in [1e-3, 1]"));
    }
    let m = (1.0 / step).round() as usize;
    if ((m as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("grid step must divide 1"));
    }
    // compositions of m into n parts
    let mut count = 1.0_f64;
    for i in 1..n {
        count = count * (m + i) as f64 / i as f64;
    }
    if count > 1e7 {
        return Err(Error::TooLarge(format!("{count:.0} lattice points")));
    }
    let mut best = (vec![0.0; n], f64::INFINITY);
    let mut parts = vec![0usize; n];
    fn walk(i: usize, left: usize, m: usize, parts: &mut Vec<usize>, f: &dyn Fn(&[f64]) -> f64, best: &mut (Vec<f64>, f64)) {
        let n = parts.len();
        if i == n - 1 {
            parts[i] = left;
            let w: Vec<f64> = parts.iter().map(|&p| p as f64 / m as f64).collect();
            let v = f(&w);
            if v < best.1 {
                *best = (w, v);
            }
            return;
        }
        for p in 0..=left {
            parts[i] = p;
            walk(i + 1, left - p, m, parts, f, best);
        }
    }
    walk(0, m, m, &mut parts, &objective, &mut best);
    Ok(best)
}

/// Result of exhaustive knot enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotOracle {
    pub knots: Vec<usize>,
    pub sse: f64,
    pub objective: f64,
}

/// SSE of the continuous piecewise-linear least-squares fit with breaks at
/// `knots`, using a centred hinge basis and the normal equations.
pub fn hinge_sse(x: &[f64], y: &[f64], knots: &[usize]) -> Result<f64> {
    let xm = x.iter().sum::<f64>() / x.len() as f64;
    let span = (x[x.len() - 1] - x[0]).max(1.0);
    let design: Matrix = x
        .iter()
        .map(|&xi| {
            let mut row = vec![1.0, (xi - xm) / span];
            row.extend(knots.iter().map(|&k| (xi - x[k]).max(0.0) / span));
            row
        })
        .collect();
    let beta = ols_normal_equations(&design, y)?;
    Ok(residuals(&design, y, &beta).iter().map(|e| e * e).sum())
}

/// Minimize SSE + penalty·|knots| over every knot subset of the interior
/// indices with at most `max_knots` elements. Ties go to fewer knots, then to
/// the lexicographically first subset.
pub fn enumerate_knots(x: &[f64], y: &[f64], max_knots: usize, penalty: f64) -> Result<KnotOracle> {
    let n = x.len();
    if n > 30 || max_knots > 3 {
        return Err(Error::TooLarge(format!("enumeration of n = {n}, max_knots = {max_knots}")));
    }
    if n < 4 || n != y.len() {
        return Err(Error::TooShort { needed: 4, got: n });
    }
    if max_knots > n - 2 {
        return Err(Error::invalid("max_knots exceeds interior points"));
    }
    let interior: Vec<usize> = (1..n - 1).collect();
    let mut best: Option<KnotOracle> = None;
    for m in 0..=max_knots {
        let mut subset: Vec<usize> = (0..m).collect();
        loop {
            let knots: Vec<usize> = subset.iter().map(|&i| interior[i]).collect();
            let sse = hinge_sse(x, y, &knots)?;
            let objective = sse + penalty * m as f64;
            if best
                .as_ref()
                .is_none_or(|b| objective < b.objective - 1e-12 * (1.0 + b.objective.abs()))
            {
                best = Some(KnotOracle { knots, sse, objective });
            }
            // next combination
            let mut i = m;
            loop {
                if i == 0 {
                    break;
                }
                i -= 1;
                if subset[i] < interior.len() - m + i {
                    subset[i] += 1;
                    for j in i + 1..m {
                        subset[j] = subset[j - 1] + 1;
                    }
                    i = usize::MAX;
                    break;
                }
            }
            if i != usize::MAX {
                break;
            }
        }
    }
    Ok(best.expect("empty knot set always evaluated"))
}

/// Poisson log-link regression by IRLS. `x` rows must include any intercept
/// column; `offset` is added to the linear predictor.
pub fn poisson_irls(x: &Matrix, y: &[f64], offset: Option<&[f64]>) -> Result<Vec<f64>> {
    let (n, k) = (x.len(), x.first().map_or(0, Vec::len));
    if n == 0 || n != y.len() {
        return Err(Error::invalid("oracle Poisson needs matching nonempty X and y"));
    }
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = vec![0.0; k];
    beta[0] = (ybar.max(1e-8)).ln() - (0..n).map(off).sum::<f64>() / n as f64;
    for _ in 0..200 {
        let mut xtwx = vec![vec![0.0; k]; k];
        let mut xtwz = vec![0.0; k];
        for i in 0..n {
            let eta_no = x[i].iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
            let mu = (eta_no + off(i)).exp();
            let z = eta_no + (y[i] - mu) / mu;
            for a in 0..k {
                xtwz[a] += mu * x[i][a] * z;
                for b in 0..k {
                    xtwx[a][b] += mu * x[i][a] * x[i][b];
                }
            }
        }
        let next = gauss_solve(&xtwx, &xtwz)?;
        let change = next
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
            .fold(0.0, f64::max);
        beta = next;
        if change < 1e-13 {
            break;
        }
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("oracle Poisson"));
    }
    Ok(beta)
}
