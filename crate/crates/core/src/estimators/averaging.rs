//! Averaging estimators of the stationary mean: reversal averages,
//! all-trial averages from a cutoff, auto-detect and geometric weighting.

use serde::{Deserialize, Serialize};

use super::isotonic::pava;
use super::{check_percentiles, ChainData, EstimateWithCI};
use crate::chain_analytics::design_eigenvalue;
use crate::designs::{detect_reversals, BoundaryPolicy, DesignRule, Orientation, Response, Variant, WalkState};
use crate::error::{Error, Result};
use crate::numeric::{cor, mean, t_quantile, var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Averaging {
    /// Midpoints of reversal pairs.
    Wbar,
    /// Treatments at reversals, from reversal `r` (one-based) on.
    ReversalOnly { r: usize },
    /// All treatments from reversal `r` (one-based) on.
    AllFromReversal { r: usize },
    /// Tail average after the first crossing of the tail mean.
    AutoDetect { safe_fraction: f64, before: bool },
    /// Geometric weights driven by an estimated convergence rate.
    GeomWeighted { accel: f64, rule: DesignRule },
}

impl Averaging {
    pub fn label(&self) -> String {
        match self {
            Averaging::Wbar => "wbar".into(),
            Averaging::ReversalOnly { r } => format!("w{r}"),
            Averaging::AllFromReversal { r } => format!("v{r}"),
            Averaging::AutoDetect { .. } => "ad".into(),
            Averaging::GeomWeighted { .. } => "gw".into(),
        }
    }
}

/// Full output of the auto-detect estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdOutput {
    pub mean: f64,
    pub se: f64,
    pub df: f64,
    /// One-based index of the first averaged trial.
    pub cutoff: usize,
    pub se1: f64,
    pub se2: f64,
    pub eff_n1: f64,
    pub eff_n2: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Auto-detect estimator: `safe` is the search limit (default `n/4`).
pub fn ad_mean(x: &[f64], before: bool, safe: f64) -> Result<AdOutput> {
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("auto-detect needs 3 values, got {n}")));
    }
    let cutoff = safe.round_ties_even() as usize + 1;
    let base = sign(x[0] - mean(&x[1..]));
    // One-based transition index; the tail mean needs at least one value.
    let mut a = 2usize;
    while a < cutoff && a < n && sign(x[a - 1] - mean(&x[a..])) != -base {
        a += 1;
    }
    if before {
        a -= 1;
    }
    let seg = SegmentStats::compute(x, a - 1);
    Ok(AdOutput {
        mean: seg.mean,
        se: seg.se,
        df: seg.df,
        cutoff: a,
        se1: seg.se1,
        se2: seg.se2,
        eff_n1: seg.eff_n1,
        eff_n2: seg.eff_n2,
    })
}

/// Standard-error components for the mean of `x[start..]`: an
/// autocorrelation-based effective size and a hitting-interval estimate
/// at the level closest to the mean.
struct SegmentStats {
    mean: f64,
    se: f64,
    df: f64,
    se1: f64,
    se2: f64,
    eff_n1: f64,
    eff_n2: f64,
    degenerate: bool,
}

impl SegmentStats {
    fn compute(x: &[f64], start: usize) -> Self {
        let xx = &x[start..];
        let nn = xx.len();
        let outmean = mean(xx);
        let sig2 = var(xx);
        if nn < 2 || sig2 == 0.0 {
            return SegmentStats {
                mean: outmean,
                se: 0.0,
                df: 1.0,
                se1: 0.0,
                se2: 0.0,
                eff_n1: nn as f64,
                eff_n2: 0.0,
                degenerate: true,
            };
        }
        let lag = |d: usize| -> f64 {
            if nn <= d + 1 {
                return 0.0;
            }
            let c = cor(&xx[..nn - d], &xx[d..]);
            if c.is_nan() {
                0.0
            } else {
                c.max(0.0)
            }
        };
        let corfac = lag(1).max(lag(2).sqrt());
        let eff_n1 = (nn as f64 * (1.0 - corfac) / (1.0 + corfac)).max(1.0);
        let se1 = (sig2 / eff_n1).sqrt();

        let hit: Vec<bool> = (0..nn)
            .map(|i| {
                if i == 0 {
                    start == 0 || x[start] != x[start - 1]
                } else {
                    xx[i] != xx[i - 1]
                }
            })
            .collect();
        let mut unq: Vec<f64> = xx.iter().zip(&hit).filter(|p| *p.1).map(|p| *p.0).collect();
        unq.sort_by(f64::total_cmp);
        unq.dedup();
        let closest = unq
            .iter()
            .copied()
            .min_by(|a, b| (a - outmean).abs().total_cmp(&(b - outmean).abs()))
            .expect("first value is always a hit");
        let hits_closest = (0..nn).filter(|&i| hit[i] && xx[i] == closest).count();
        let eff_n2 = hits_closest as f64 - 1.0;
        let mut pieces: Vec<f64> = Vec::new();
        let mut len = 0usize;
        for i in 0..nn {
            if hit[i] && xx[i] == closest && len > 0 {
                pieces.push(len as f64);
                len = 0;
            }
            len += 1;
        }
        pieces.push(len as f64);
        let msq = pieces.iter().map(|p| p * p).sum::<f64>() / pieces.len() as f64;
        let se2 = (eff_n2
            * (msq * (sig2 + (outmean - closest).powi(2)) + outmean.max(closest).powi(2) * var(&pieces))
            / (nn * nn) as f64)
            .sqrt();
        SegmentStats {
            mean: outmean,
            se: se1.max(se2),
            df: (eff_n2 - 1.0).max(1.0),
            se1,
            se2,
            eff_n1,
            eff_n2,
            degenerate: false,
        }
    }
}

fn finish(
    point: f64,
    stats: &SegmentStats,
    percentiles: &[f64],
    method: String,
    mut warning: Option<String>,
) -> EstimateWithCI {
    if stats.degenerate && warning.is_none() {
        warning = Some("constant averaging segment; se set to 0".into());
    }
    let bounds = percentiles
        .iter()
        .map(|&p| point + t_quantile(p, stats.df) * stats.se)
        .collect();
    EstimateWithCI {
        point,
        se: stats.se,
        df: stats.df,
        percentiles: percentiles.to_vec(),
        bounds,
        method,
        warning,
    }
}

/// Averaging estimate with t-based interval bounds at `percentiles`.
pub fn averaging_estimate(chain: &ChainData, kind: &Averaging, percentiles: &[f64]) -> Result<EstimateWithCI> {
    check_percentiles(percentiles)?;
    let x = &chain.x;
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData("need at least two trials".into()));
    }
    let rev = detect_reversals(&chain.responses).positions;
    let need_rev = |r: usize| -> Result<usize> {
        if r == 0 || rev.len() < r {
            Err(Error::InsufficientData(format!(
                "requested reversal {r}, chain has {}",
                rev.len()
            )))
        } else {
            Ok(rev[r - 1])
        }
    };
    let label = kind.label();
    match *kind {
        Averaging::Wbar => {
            need_rev(1)?;
            let vals: Vec<f64> = rev.iter().flat_map(|&i| [x[i - 1], x[i]]).collect();
            let stats = SegmentStats::compute(&vals, 0);
            Ok(finish(stats.mean, &stats, percentiles, label, None))
        }
        Averaging::ReversalOnly { r } => {
            need_rev(r)?;
            let vals: Vec<f64> = rev[r - 1..].iter().map(|&i| x[i]).collect();
            let stats = SegmentStats::compute(&vals, 0);
            Ok(finish(stats.mean, &stats, percentiles, label, None))
        }
        Averaging::AllFromReversal { r } => {
            let start = need_rev(r)?;
            if n - start < 2 {
                return Err(Error::InsufficientData("fewer than two trials past the cutoff".into()));
            }
            let stats = SegmentStats::compute(x, start);
            Ok(finish(stats.mean, &stats, percentiles, label, None))
        }
        Averaging::AutoDetect { safe_fraction, before } => {
            if !(safe_fraction > 0.0 && safe_fraction <= 1.0) {
                return Err(Error::InvalidParameter {
                    field: "safe_fraction",
                    reason: "must lie in (0, 1]".into(),
                });
            }
            let ad = ad_mean(x, before, n as f64 * safe_fraction)?;
            let stats = SegmentStats::compute(x, ad.cutoff - 1);
            Ok(finish(ad.mean, &stats, percentiles, label, None))
        }
        Averaging::GeomWeighted { accel, rule } => geom_weighted(chain, accel, &rule, percentiles),
    }
}

/// Convergence-rate estimate from smoothed response rates on the
/// visited levels.
fn estimated_rate(chain: &ChainData, rule: &DesignRule) -> Result<f64> {
    let table = chain.table()?;
    let m = table.len();
    if m < 2 {
        return Ok(0.0);
    }
    let ft: Vec<f64> = (0..m)
        .map(|u| (table.yes[u] as f64 + (u + 1) as f64 / (m + 1) as f64) / (table.n(u) as f64 + 1.0))
        .collect();
    let w: Vec<f64> = (0..m).map(|u| table.n(u) as f64 + 1.0).collect();
    let fit = pava(&ft, &table.levels, &w)?;
    design_eigenvalue(rule, &fit.y)
}

fn geom_weighted(chain: &ChainData, accel: f64, rule: &DesignRule, percentiles: &[f64]) -> Result<EstimateWithCI> {
    if !(accel > 0.0) {
        return Err(Error::InvalidParameter {
            field: "accel",
            reason: "must be positive".into(),
        });
    }
    let x = &chain.x;
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData("need at least three trials".into()));
    }
    let lambda = estimated_rate(chain, rule)?;
    let raw = SegmentStats::compute(x, 1);
    let bias0 = (x[0] - raw.mean).abs();
    // One-based index where the starting-point bias drops below the se.
    let istar = (2..=n)
        .find(|&i| bias0 * lambda.powi(i as i32 - 1) <= raw.se)
        .unwrap_or(n);
    let weights: Vec<f64> = (2..=n)
        .map(|i| {
            if i < istar {
                lambda.powf(accel * (istar - i) as f64)
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let point = weights.iter().zip(&x[1..]).map(|(w, v)| w * v).sum::<f64>() / total;
    let stats = SegmentStats::compute(x, (istar - 1).min(n - 2));
    Ok(finish(
        point,
        &stats,
        percentiles,
        "gw".into(),
        Some(format!("estimated convergence rate {lambda:.4}; full weight from trial {istar}"))
            .filter(|_| stats.degenerate),
    ))
}

/// Chain augmented with virtual treatments beyond a reflecting boundary,
/// one virtual visit per blocked move (excluding the move after the last
/// trial). Virtual responses assume F = 0 below the grid and F = 1 above.
pub fn imputed_chain(state: &WalkState) -> Result<ChainData> {
    let grid = state.grid();
    if grid.policy() != BoundaryPolicy::Reflecting {
        return Err(Error::Unsupported("imputation applies to reflecting boundaries".into()));
    }
    let rule = *state.rule();
    let hist = state.history();
    let (low_visit, high_visit) = virtual_visit_lengths(&rule);
    let mut free = WalkState::new(
        grid.clone().with_policy(BoundaryPolicy::Unbounded),
        rule,
        state.start() as usize,
    )?;
    let mut out = ChainData {
        x: Vec::with_capacity(hist.len()),
        responses: Vec::with_capacity(hist.len()),
    };
    for (i, t) in hist.iter().enumerate() {
        out.x.push(grid.value(t.level));
        out.responses.push(t.response);
        let raw = free.next_allocation(t.response, t.draw)?;
        if i + 1 == hist.len() {
            break;
        }
        let actual = hist[i + 1].level;
        if raw != actual {
            let (lvl, count, resp) = if raw > actual {
                (grid.m() as i64, high_visit, Response::Yes)
            } else {
                (-1, low_visit, Response::No)
            };
            for _ in 0..count {
                out.x.push(grid.value(lvl));
                out.responses.push(resp);
            }
            free.relocate(actual);
        }
    }
    Ok(out)
}

/// Trials spent at a virtual level below (F = 0) and above (F = 1) the grid.
fn virtual_visit_lengths(rule: &DesignRule) -> (usize, usize) {
    // Lengths for a below-median rule: (below, above).
    let (lo, hi) = match rule.variant {
        Variant::Sud => (1, 1),
        Variant::Kr { k } => (k as usize, 1),
        Variant::Gud { k, .. } => (k as usize, k as usize),
        Variant::Bcd { gamma } => (((1.0 - gamma) / gamma).round().max(1.0) as usize, 1),
    };
    match rule.orientation {
        Orientation::BelowMedian => (lo, hi),
        Orientation::AboveMedian => (hi, lo),
    }
}
