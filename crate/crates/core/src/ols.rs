//! Ordinary least squares via Householder QR, shared by the DID, trend and
//! synthetic-control regressions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot size below which a column counts as linearly dependent.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub residuals: Vec<f64>,
    /// (X'X)⁻¹, row-major k×k.
    pub xtx_inv: Vec<Vec<f64>>,
    /// Residual variance SSE / (n − k).
    pub sigma2: f64,
    pub sse: f64,
    pub n: usize,
    pub k: usize,
}

impl OlsFit {
    /// Classical covariance σ̂²(X'X)⁻¹.
    pub fn vcov_classical(&self) -> Vec<Vec<f64>> {
        self.xtx_inv
            .iter()
            .map(|row| row.iter().map(|v| v * self.sigma2).collect())
            .collect()
    }

    pub fn xtx_inv_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.k, |i, j| self.xtx_inv[i][j])
    }
}

/// Fit `y = Xβ + ε`. `names` labels the columns for rank-deficiency errors.
pub fn fit(x: &DMatrix<f64>, y: &[f64], names: &[&str]) -> Result<OlsFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::invalid(format!("{} responses for {} design rows", y.len(), n)));
    }
    if n < k || k == 0 {
        return Err(Error::invalid(format!("need at least {k} observations, got {n}")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression data"));
    }
    let name = |j: usize| names.get(j).map_or_else(|| format!("x{j}"), |s| s.to_string());
    // all-zero columns make the QR pivot meaningless; name them directly
    for j in 0..k {
        if x.column(j).iter().all(|v| *v == 0.0) {
            return Err(Error::RankDeficient(name(j)));
        }
    }

    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|j| x.column(j).norm()).fold(0.0_f64, f64::max);
    for j in 0..k {
        if r[(j, j)].abs() <= RANK_TOL * scale {
            return Err(Error::RankDeficient(name(j)));
        }
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::Singular("QR back-substitution"))?;
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or(Error::Singular("R inverse"))?;
    let xtx_inv = &r_inv * r_inv.transpose();

    let fitted = x * &beta;
    let residuals: Vec<f64> = yv.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
    let sse: f64 = residuals.iter().map(|e| e * e).sum();
    let sigma2 = if n > k { sse / (n - k) as f64 } else { f64::NAN };

    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        residuals,
        xtx_inv: (0..k)
            .map(|i| (0..k).map(|j| 0.5 * (xtx_inv[(i, j)] + xtx_inv[(j, i)])).collect())
            .collect(),
        sigma2,
        sse,
        n,
        k,
    })
}

/// Simple regression of `y` on `x` with intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub sse: f64,
    pub r_squared: f64,
    pub adj_r_squared: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Straight-line fit with two-sided t-test on the slope (n − 2 df).
///
/// A constant response gets R² = 0; an exact fit with nonzero slope gets
/// p = 0, and an exact flat fit gets p = 1.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::invalid("x and y differ in length"));
    }
    if n < 3 {
        return Err(Error::TooShort { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::RankDeficient("x".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum::<f64>();
    // exact fits leave rounding-level residue
    let sse = if sse <= 1e-24 * (syy + my * my * nf) { 0.0 } else { sse };
    let df = nf - 2.0;
    let slope_se = (sse / df / sxx).sqrt();
    let t = crate::stats::safe_ratio(slope, slope_se);
    let p_value = crate::stats::t_two_sided(t, df);
    let (r_squared, adj_r_squared) = if syy > 0.0 {
        let r2 = (1.0 - sse / syy).clamp(0.0, 1.0);
        (r2, 1.0 - (1.0 - r2) * (nf - 1.0) / df)
    } else {
        (0.0, 0.0)
    };
    Ok(LineFit {
        intercept,
        slope,
        slope_se,
        sse,
        r_squared,
        adj_r_squared,
        p_value,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design() {
        let x = DMatrix::identity(2, 2);
        let f = fit(&x, &[1.0, 2.0], &["a", "b"]).unwrap();
        assert!((f.coefficients[0] - 1.0).abs() < 1e-15);
        assert!((f.coefficients[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn names_degenerate_column() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        match fit(&x, &[1.0, 2.0, 3.0], &["const", "dt"]) {
            Err(Error::RankDeficient(c)) => assert_eq!(c, "dt"),
            other => panic!("{other:?}"),
        }
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(fit(&z, &[1.0, 2.0, 3.0], &["c", "dc"]), Err(Error::RankDeficient(c)) if c == "dc"));
    }

    #[test]
    fn line_exact_and_flat() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let f = fit_line(&x, &[1.0, 3.5, 6.0, 8.5]).unwrap();
        assert!((f.slope - 2.5).abs() < 1e-12);
        assert_eq!(f.adj_r_squared, 1.0);
        assert_eq!(f.p_value, 0.0);
        let flat = fit_line(&x, &[4.0; 4]).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert_eq!(flat.p_value, 1.0);
        assert!(fit_line(&x[..2], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn line_matches_textbook() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [2.0, 2.0, 4.0, 8.0];
        let f = fit_line(&x, &y).unwrap();
        // sxx = 5, sxy = 10: slope 2, intercept 4 - 2 * 1.5 = 1, sse = 1 + 1 + 1 + 1
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.sse - 4.0).abs() < 1e-12);
    }
}
