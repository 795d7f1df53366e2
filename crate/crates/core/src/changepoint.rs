//! Slope change-point ("knot") detection for cumulative-count series.
//!
//! The fitted curve is continuous and piecewise linear with breaks at
//! observation indices. The knot set minimizes
//!
//! ```text
//! SSE(knots) + penalty × |knots|,   |knots| ≤ max_knots
//! ```
//!
//! and is found exactly by dynamic programming over boundary values. With the
//! value θ of the fit at a boundary as a free variable, the best cost of the
//! data up to that boundary is a convex quadratic in θ for each choice of
//! earlier knots; the recursion minimizes the previous boundary value out in
//! closed form. Candidate quadratics that never attain the pointwise minimum
//! are pruned, which keeps the sets small without changing the optimum.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ols::{self, LineFit};
use crate::panel::{day_offsets, RateSeries};

/// How the per-knot penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
#[derive(Default)]
pub enum Criterion {
    /// 2 σ̂² ln n per knot (location and slope change each count as a parameter).
    #[default]
    Bic,
    /// 4 σ̂² per knot.
    Aic,
    /// A fixed penalty on the SSE scale.
    Fixed(f64),
}


impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "bic" => Ok(Criterion::Bic),
            "aic" => Ok(Criterion::Aic),
            _ => s
                .strip_prefix("fixed:")
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(Criterion::Fixed)
                .ok_or_else(|| Error::invalid(format!("unknown criterion {s:?}"))),
        }
    }
}

/// Robust noise scale from second differences: for iid noise of variance σ²
/// on a locally linear signal, the second difference has variance 6σ².
pub fn noise_sd(y: &[f64]) -> f64 {
    if y.len() < 3 {
        return 0.0;
    }
    let d2: Vec<f64> = y.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).collect();
    let med = median(&d2);
    let abs: Vec<f64> = d2.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&abs);
    let robust = 1.482_602_218_505_602 * mad / 6f64.sqrt();
    let sd = if robust > 0.0 {
        robust
    } else {
        (d2.iter().map(|v| v * v).sum::<f64>() / d2.len() as f64 / 6.0).sqrt()
    };
    // the DP cancels terms of size Σy², so a penalty below that roundoff
    // would let spurious knots through on exact data
    let rms = (y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64).sqrt();
    sd.max(1e-6 * rms)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl Criterion {
    /// Penalty per knot for a series of `n` points with noise scale `sd`.
    pub fn penalty(self, n: usize, sd: f64) -> f64 {
        match self {
            Criterion::Bic => 2.0 * sd * sd * (n as f64).ln(),
            Criterion::Aic => 4.0 * sd * sd,
            Criterion::Fixed(p) => p,
        }
    }
}

/// Least-squares line of one segment of the continuous fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFit {
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub start_index: usize,
    pub end_index: usize,
    pub slope: f64,
    /// Intercept on the day-offset axis of the series (day 0 = first date).
    pub intercept: f64,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotReport {
    pub unit_id: String,
    pub knots: Vec<NaiveDate>,
    pub knot_indices: Vec<usize>,
    /// Segments partition the index range: the first is `0..=k1`, then
    /// `k1+1..=k2`, …, the last ends at `n-1`.
    pub segment_fits: Vec<SegmentFit>,
    pub penalty: f64,
    pub criterion: Criterion,
    pub noise_sd: f64,
    pub sse: f64,
    pub objective: f64,
    pub dates: Vec<NaiveDate>,
    pub observed: Vec<f64>,
    pub fitted: Vec<f64>,
}

/// Convex quadratic `a θ² + b θ + c`.
#[derive(Debug, Clone, Copy)]
struct Quad {
    a: f64,
    b: f64,
    c: f64,
}

impl Quad {
    fn min_value(&self) -> f64 {
        self.c - self.b * self.b / (4.0 * self.a)
    }

    fn slope(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }
}

/// Sufficient statistics of one segment's cost as a quadratic form in the
/// boundary values (u at the left end, v at the right end).
#[derive(Debug, Clone, Copy, Default)]
struct SegmentStats {
    suu: f64,
    svv: f64,
    suv: f64,
    syu: f64,
    syv: f64,
    syy: f64,
}

impl SegmentStats {
    /// Points `s+1..=t`; point i has weight λ on the right end.
    fn new(x: &[f64], y: &[f64], s: usize, t: usize) -> Self {
        let len = x[t] - x[s];
        let mut st = SegmentStats::default();
        for i in s + 1..=t {
            let lam = (x[i] - x[s]) / len;
            let mu = 1.0 - lam;
            st.suu += mu * mu;
            st.svv += lam * lam;
            st.suv += mu * lam;
            st.syu += y[i] * mu;
            st.syv += y[i] * lam;
            st.syy += y[i] * y[i];
        }
        st
    }

    /// min over u of parent(u) + cost(u, v), as a quadratic in v.
    fn propagate(&self, parent: &Quad) -> Quad {
        let a = parent.a + self.suu;
        let lin = parent.b - 2.0 * self.syu;
        Quad {
            a: self.svv - self.suv * self.suv / a,
            b: -2.0 * self.syv - self.suv * lin / a,
            c: self.syy + parent.c - lin * lin / (4.0 * a),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    q: Quad,
    parent_t: usize,
    parent_idx: usize,
}

/// Indices of the quadratics that attain the pointwise minimum somewhere.
/// Falls back to keeping everything if the sweep does not terminate cleanly.
fn lower_envelope(qs: &[Quad]) -> Vec<usize> {
    let n = qs.len();
    if n <= 1 {
        return (0..n).collect();
    }
    // leftmost winner: smallest curvature, then steepest descent, then lowest
    let mut cur = (0..n)
        .min_by(|&i, &j| {
            qs[i].a
                .total_cmp(&qs[j].a)
                .then(qs[j].b.total_cmp(&qs[i].b))
                .then(qs[i].c.total_cmp(&qs[j].c))
        })
        .expect("nonempty");
    let mut keep = vec![false; n];
    keep[cur] = true;
    let mut x = f64::NEG_INFINITY;
    for _ in 0..(2 * n + 2) {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if i == cur {
                continue;
            }
            let (da, db, dc) = (qs[i].a - qs[cur].a, qs[i].b - qs[cur].b, qs[i].c - qs[cur].c);
            // first point after x where q_i drops below q_cur
            let r = if da == 0.0 {
                if db < 0.0 {
                    -dc / db
                } else {
                    continue;
                }
            } else {
                let disc = db * db - 4.0 * da * dc;
                if disc <= 0.0 {
                    continue;
                }
                let sq = disc.sqrt();
                // numerically stable roots
                let qv = -0.5 * (db + db.signum() * sq);
                let (mut r1, mut r2) = (qv / da, if qv != 0.0 { dc / qv } else { qv / da });
                if r1 > r2 {
                    std::mem::swap(&mut r1, &mut r2);
                }
                if da > 0.0 {
                    r1
                } else {
                    r2
                }
            };
            if !(r > x) || !r.is_finite() {
                continue;
            }
            best = match best {
                None => Some((r, i)),
                Some((br, bi)) => {
                    let tie = (r - br).abs() <= 1e-12 * (1.0 + br.abs());
                    if r < br && !tie {
                        Some((r, i))
                    } else if tie {
                        let (si, sb) = (qs[i].slope(br), qs[bi].slope(br));
                        if si < sb || (si == sb && qs[i].a < qs[bi].a) {
                            Some((br.min(r), i))
                        } else {
                            Some((br.min(r), bi))
                        }
                    } else {
                        Some((br, bi))
                    }
                }
            };
        }
        match best {
            None => return (0..n).filter(|&i| keep[i]).collect(),
            Some((r, i)) => {
                cur = i;
                x = r;
                keep[i] = true;
            }
        }
    }
    (0..n).collect()
}

/// Exact penalized solver on raw arrays.
///
/// Returns the optimal knot indices (interior, strictly increasing) and the
/// minimized SSE. Ties in the objective prefer fewer knots.
pub fn solve_knots(x: &[f64], y: &[f64], max_knots: usize, penalty: f64, prune: bool) -> Result<(Vec<usize>, f64)> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::invalid("x and y differ in length"));
    }
    if n < 4 {
        return Err(Error::TooShort { needed: 4, got: n });
    }
    if max_knots > n - 2 {
        return Err(Error::invalid(format!(
            "max_knots {max_knots} exceeds the {} interior points",
            n - 2
        )));
    }
    if x.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("x must be strictly increasing"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) || !(penalty.is_finite() && penalty >= 0.0) {
        return Err(Error::NonFinite("knot detection input"));
    }

    let mut stats = vec![Vec::new(); n];
    for s in 0..n {
        stats[s] = (0..n)
            .map(|t| if t > s { SegmentStats::new(x, y, s, t) } else { SegmentStats::default() })
            .collect::<Vec<_>>();
    }

    // sets[t][j]: data up to boundary t with j knots strictly before t
    let mut sets: Vec<Vec<Vec<Node>>> = vec![vec![Vec::new(); max_knots + 1]; n];
    sets[0][0].push(Node {
        q: Quad {
            a: 1.0,
            b: -2.0 * y[0],
            c: y[0] * y[0],
        },
        parent_t: 0,
        parent_idx: 0,
    });
    for t in 1..n {
        let top = if t == n - 1 { max_knots } else { max_knots.saturating_sub(1) };
        for j in 0..=top {
            let mut nodes = Vec::new();
            let parents: Box<dyn Iterator<Item = usize>> = if j == 0 {
                Box::new(std::iter::once(0))
            } else {
                Box::new(1..t)
            };
            for s in parents {
                let level = if j == 0 { 0 } else { j - 1 };
                for (idx, p) in sets[s][level].iter().enumerate() {
                    nodes.push(Node {
                        q: stats[s][t].propagate(&p.q),
                        parent_t: s,
                        parent_idx: idx,
                    });
                }
            }
            if prune && nodes.len() > 1 {
                let qs: Vec<Quad> = nodes.iter().map(|nd| nd.q).collect();
                nodes = lower_envelope(&qs).into_iter().map(|i| nodes[i]).collect();
            }
            sets[t][j] = nodes;
        }
    }

    // best (objective, knots, node, sse); more knots must win by a margin
    let mut best: Option<(f64, usize, usize, f64)> = None;
    for m in 0..=max_knots {
        let Some((idx, sse)) = sets[n - 1][m]
            .iter()
            .map(|node| node.q.min_value().max(0.0))
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            continue;
        };
        let obj = sse + penalty * m as f64;
        if best.is_none_or(|(b, ..)| obj < b - 1e-12 * (1.0 + b.abs())) {
            best = Some((obj, m, idx, sse));
        }
    }
    let (_, m, mut idx, sse) = best.expect("at least the knot-free fit");
    let mut knots = Vec::with_capacity(m);
    let (mut t, mut j) = (n - 1, m);
    while t != 0 {
        let node = sets[t][j][idx];
        if node.parent_t != 0 {
            knots.push(node.parent_t);
            j -= 1;
        }
        t = node.parent_t;
        idx = node.parent_idx;
    }
    knots.reverse();
    Ok((knots, sse))
}

/// Continuous piecewise-linear least-squares fit with the given knots,
/// returned as fitted values.
pub fn continuous_fit(x: &[f64], y: &[f64], knots: &[usize]) -> Result<Vec<f64>> {
    let n = x.len();
    let k = 2 + knots.len();
    let design = DMatrix::from_fn(n, k, |i, j| match j {
        0 => 1.0,
        1 => x[i] - x[0],
        _ => (x[i] - x[knots[j - 2]]).max(0.0),
    });
    let fit = ols::fit(&design, y, &[])?;
    let beta = nalgebra::DVector::from_vec(fit.coefficients);
    Ok((&design * beta).iter().copied().collect())
}

/// Detect knots in `series` (counts or rates) on its day-offset axis.
pub fn detect_knots(series: &RateSeries, max_knots: usize, criterion: Criterion) -> Result<KnotReport> {
    let x = day_offsets(&series.dates);
    let y = &series.rates;
    if y.len() < 4 {
        return Err(Error::TooShort {
            needed: 4,
            got: y.len(),
        });
    }
    let sd = noise_sd(y);
    let penalty = criterion.penalty(y.len(), sd);
    let (knots, _) = solve_knots(&x, y, max_knots, penalty, true)?;
    build_report(series, &x, knots, penalty, criterion, sd)
}

fn build_report(series: &RateSeries, x: &[f64], knots: Vec<usize>, penalty: f64, criterion: Criterion, sd: f64) -> Result<KnotReport> {
    let y = &series.rates;
    let n = y.len();
    let fitted = continuous_fit(x, y, &knots)?;
    let mut bounds = vec![0];
    bounds.extend(&knots);
    bounds.push(n - 1);
    let mut segment_fits = Vec::with_capacity(bounds.len() - 1);
    for (s, w) in bounds.windows(2).enumerate() {
        let (l, r) = (w[0], w[1]);
        let slope = (fitted[r] - fitted[l]) / (x[r] - x[l]);
        let intercept = fitted[l] - slope * x[l];
        let start_index = if s == 0 { 0 } else { l + 1 };
        let sse = (start_index..=r).map(|i| (y[i] - fitted[i]).powi(2)).sum();
        segment_fits.push(SegmentFit {
            start: series.dates[start_index],
            end: series.dates[r],
            start_index,
            end_index: r,
            slope,
            intercept,
            sse,
        });
    }
    let sse: f64 = segment_fits.iter().map(|s| s.sse).sum();
    Ok(KnotReport {
        unit_id: series.unit_id.clone(),
        knots: knots.iter().map(|&k| series.dates[k]).collect(),
        objective: sse + penalty * knots.len() as f64,
        knot_indices: knots,
        segment_fits,
        penalty,
        criterion,
        noise_sd: sd,
        sse,
        dates: series.dates.clone(),
        observed: y.clone(),
        fitted,
    })
}

/// Trend of the last regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub p_value: f64,
    pub adj_r_squared: f64,
    pub n: usize,
    pub start: NaiveDate,
}

/// OLS of the series on day offsets from the last knot (inclusive) to the end,
/// or over the whole series when there are no knots.
pub fn last_segment_trend(series: &RateSeries, report: &KnotReport) -> Result<TrendFit> {
    let start = report.knots.last().copied().or_else(|| series.dates.first().copied()).ok_or(Error::Empty("series"))?;
    let window = series.window(Some(start), None);
    if window.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: window.len(),
        });
    }
    let x = day_offsets(&window.dates);
    let LineFit {
        slope,
        p_value,
        adj_r_squared,
        n,
        ..
    } = ols::fit_line(&x, &window.rates)?;
    Ok(TrendFit {
        slope,
        p_value,
        adj_r_squared,
        n,
        start,
    })
}
