use serde::{Deserialize, Serialize};

use super::PosteriorSummary;
use crate::error::{Error, Result};
use crate::estimators::ResponseTable;
use crate::numeric::clopper_pearson;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CrmRule {
    /// Level nearest the posterior mean of `Q_p`.
    ClosestTreatment,
    /// Level whose posterior mean `G` is nearest `p`.
    ClosestResponse,
    /// Highest level not above the posterior mean of `Q_p`.
    JustUnder,
    /// Highest level not above the `alpha` posterior quantile of `Q_p`.
    Ewoc { alpha: f64 },
}

impl CrmRule {
    pub const EWOC_DEFAULT_ALPHA: f64 = 0.25;
}

/// First index minimizing `key`; ties go to the lower level.
fn argmin(n: usize, key: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    for u in 1..n {
        if key(u) < key(best) {
            best = u;
        }
    }
    best
}

fn just_under(levels: &[f64], q: f64) -> usize {
    levels.iter().rposition(|&l| l <= q).unwrap_or(0)
}

/// CRM allocation from a posterior summary. With `constrained`, moves are
/// limited to one level from `current`.
pub fn crm_allocate(
    summary: &PosteriorSummary,
    rule: CrmRule,
    levels: &[f64],
    current: usize,
    constrained: bool,
) -> Result<usize> {
    let m = levels.len();
    if summary.level_means.len() != m || current >= m {
        return Err(Error::LengthMismatch("summary, levels and current level disagree".into()));
    }
    let p = summary.target;
    let choice = match rule {
        CrmRule::ClosestTreatment => argmin(m, |u| (levels[u] - summary.qp_mean).abs()),
        CrmRule::ClosestResponse => argmin(m, |u| (summary.level_means[u] - p).abs()),
        CrmRule::JustUnder => just_under(levels, summary.qp_mean),
        CrmRule::Ewoc { alpha } => {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidParameter {
                    field: "alpha",
                    reason: "must lie in (0, 1)".into(),
                });
            }
            just_under(levels, summary.qp_quantile(alpha))
        }
    };
    Ok(if constrained {
        choice.clamp(current.saturating_sub(1), (current + 1).min(m - 1))
    } else {
        choice
    })
}

/// Half-width `Delta(p)` of the CCD window. Tabulated values are used on
/// `[0.1, 0.5]` (linear between 0.25, 0.3 and 0.5), constant below 0.1,
/// and mirrored above 0.5.
pub fn ccd_window(p: f64) -> f64 {
    let p = if p > 0.5 { 1.0 - p } else { p };
    const KNOTS: [(f64, f64); 3] = [(0.25, 0.09), (0.3, 0.10), (0.5, 0.13)];
    if p <= KNOTS[0].0 {
        return KNOTS[0].1;
    }
    for w in KNOTS.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if p <= x1 {
            return y0 + (y1 - y0) * (p - x0) / (x1 - x0);
        }
    }
    KNOTS[2].1
}

/// CCD: stay while the cumulative `F` estimate at `current` lies within
/// `[p - d1, p + d2]`, otherwise step toward the window. `table` rows are
/// the grid levels in order. An unvisited level escalates.
pub fn ccd_allocate(table: &ResponseTable, current: usize, p: f64, window: (f64, f64)) -> Result<usize> {
    let m = table.len();
    if current >= m {
        return Err(Error::InvalidParameter {
            field: "current",
            reason: format!("level {current} outside 0..{m}"),
        });
    }
    let n = table.n(current);
    let next = if n == 0 {
        current + 1
    } else {
        let f = table.yes[current] as f64 / n as f64;
        if f < p - window.0 {
            current + 1
        } else if f > p + window.1 {
            current.saturating_sub(1)
        } else {
            current
        }
    };
    Ok(next.min(m - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OppositeRule {
    /// Same interval test as any other disagreement.
    A,
    /// Override only if the current level is also outside the interval;
    /// otherwise stay.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudDecision {
    pub level: usize,
    /// The model-based choice replaced the U&D choice.
    pub overridden: bool,
    /// The U&D and model choices pointed in opposite directions.
    pub opposite: bool,
}

fn interval_decision(
    current: usize,
    ud: usize,
    other: usize,
    levels: &[f64],
    inside: impl Fn(f64) -> bool,
    opposite_rule: OppositeRule,
) -> BudDecision {
    let opposite = (ud > current && other < current) || (ud < current && other > current);
    if inside(levels[ud]) {
        return BudDecision {
            level: ud,
            overridden: false,
            opposite,
        };
    }
    if opposite && opposite_rule == OppositeRule::B && inside(levels[current]) {
        return BudDecision {
            level: current,
            overridden: false,
            opposite,
        };
    }
    BudDecision {
        level: other,
        overridden: true,
        opposite,
    }
}

/// Credible BUD. The U&D choice stands if it lies in
/// `[Q_{p,beta_lo} - s/2, Q_{p,1-beta_hi} + s/2]`; `bounds` supplies the two
/// posterior quantiles and is only evaluated when the choices differ and
/// the interval is non-empty (`beta_lo + beta_hi < 1`).
#[allow(clippy::too_many_arguments)]
pub fn c_bud_choice(
    current: usize,
    ud: usize,
    bayes: usize,
    levels: &[f64],
    spacing: f64,
    beta: (f64, f64),
    opposite_rule: OppositeRule,
    bounds: impl FnOnce(f64, f64) -> Result<(f64, f64)>,
) -> Result<BudDecision> {
    if !(beta.0 >= 0.0 && beta.1 >= 0.0 && beta.0 <= 1.0 && beta.1 <= 1.0) {
        return Err(Error::InvalidParameter {
            field: "beta",
            reason: "must lie in [0, 1]".into(),
        });
    }
    if ud == bayes {
        return Ok(BudDecision {
            level: ud,
            overridden: false,
            opposite: false,
        });
    }
    let (lo, hi) = if beta.0 + beta.1 >= 1.0 {
        (f64::INFINITY, f64::NEG_INFINITY)
    } else {
        let (qlo, qhi) = bounds(beta.0, 1.0 - beta.1)?;
        (qlo - spacing / 2.0, qhi + spacing / 2.0)
    };
    Ok(interval_decision(
        current,
        ud,
        bayes,
        levels,
        |x| lo <= x && x <= hi,
        opposite_rule,
    ))
}

/// Randomized BUD: the model choice is used with probability `n/(n+n0)`.
pub fn r_bud_choice(ud: usize, bayes: usize, n: usize, n0: f64, draw: f64) -> BudDecision {
    let prob = n as f64 / (n as f64 + n0);
    if ud != bayes && draw < prob {
        BudDecision {
            level: bayes,
            overridden: true,
            opposite: false,
        }
    } else {
        BudDecision {
            level: ud,
            overridden: false,
            opposite: false,
        }
    }
}

/// Frequentist BUD against CCD: levels whose exact binomial interval
/// (tail `beta` each side) contains `p` span the plausible treatment
/// interval, widened by `s/2`; the U&D choice stands if inside it.
pub fn ccd_bud_choice(
    table: &ResponseTable,
    current: usize,
    ud: usize,
    ccd: usize,
    p: f64,
    beta: f64,
    opposite_rule: OppositeRule,
) -> Result<BudDecision> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(Error::InvalidParameter {
            field: "beta",
            reason: "must lie in (0, 0.5)".into(),
        });
    }
    if ud == ccd {
        return Ok(BudDecision {
            level: ud,
            overridden: false,
            opposite: false,
        });
    }
    let levels = &table.levels;
    let plausible: Vec<usize> = (0..table.len())
        .filter(|&u| {
            let (lo, hi) = clopper_pearson(table.yes[u], table.n(u), beta);
            lo <= p && p <= hi
        })
        .collect();
    let (lo, hi) = match (plausible.first(), plausible.last()) {
        (Some(&a), Some(&b)) => {
            let s = if levels.len() > 1 {
                (levels[levels.len() - 1] - levels[0]) / (levels.len() - 1) as f64
            } else {
                0.0
            };
            (levels[a] - s / 2.0, levels[b] + s / 2.0)
        }
        _ => (f64::INFINITY, f64::NEG_INFINITY),
    };
    Ok(interval_decision(
        current,
        ud,
        ccd,
        levels,
        |x| lo <= x && x <= hi,
        opposite_rule,
    ))
}
