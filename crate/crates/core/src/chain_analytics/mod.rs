//! Markov-chain analysis of Up-and-Down designs: stationary profiles and
//! modes, transition matrices, convergence, reversal frequencies,
//! first-reversal locations, peakedness and stationary bias.

mod tpm;

pub use tpm::{
    build_tpm, design_eigenvalue, kr_marginal_tpm, mean_trajectory, progression, second_eigenvalue,
    stationary_vector, trials_to_convergence, TransitionMatrix,
};

use crate::designs::{DesignRule, Orientation, TreatmentGrid, Variant};
use crate::dist::ThresholdModel;
use crate::error::{Error, Result};
use crate::numeric::{binom_cdf, binom_sf};

/// Stationary distribution with its adjacent-level ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryProfile {
    /// `gamma[u] = pi[u+1] / pi[u]`.
    pub gamma: Vec<f64>,
    pub pi: Vec<f64>,
    /// One index, or two adjacent indices sharing the maximum.
    pub mode: Vec<usize>,
}

impl StationaryProfile {
    fn from_gamma(gamma: Vec<f64>) -> Self {
        let mut logpi = vec![0.0];
        for g in &gamma {
            logpi.push(logpi.last().unwrap() + g.ln());
        }
        let mx = logpi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logpi.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.into_iter().map(|x| x / s).collect();
        let mode = mode_of(&pi);
        StationaryProfile { gamma, pi, mode }
    }

    fn from_pi(pi: Vec<f64>) -> Self {
        let gamma = pi.windows(2).map(|w| w[1] / w[0]).collect();
        let mode = mode_of(&pi);
        StationaryProfile { gamma, pi, mode }
    }

    /// Stationary mean on level indices.
    pub fn mean_index(&self) -> f64 {
        self.pi.iter().enumerate().map(|(u, p)| u as f64 * p).sum()
    }

    pub fn mean_on(&self, levels: &[f64]) -> f64 {
        self.pi.iter().zip(levels).map(|(p, l)| p * l).sum()
    }

    pub fn sd_on(&self, levels: &[f64]) -> f64 {
        let mu = self.mean_on(levels);
        self.pi
            .iter()
            .zip(levels)
            .map(|(p, l)| p * (l - mu) * (l - mu))
            .sum::<f64>()
            .sqrt()
    }
}

fn mode_of(pi: &[f64]) -> Vec<usize> {
    let (best, &mx) = pi
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let close = |u: usize| (pi[u] - mx).abs() <= 1e-12 * mx;
    if best > 0 && close(best - 1) {
        vec![best - 1, best]
    } else if best + 1 < pi.len() && close(best + 1) {
        vec![best, best + 1]
    } else {
        vec![best]
    }
}

pub(crate) fn check_f(f: &[f64]) -> Result<()> {
    if f.len() < 2 {
        return Err(Error::InvalidParameter {
            field: "f_values",
            reason: "need at least two levels".into(),
        });
    }
    if let Some(x) = f.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Degenerate(format!(
            "response probability {x} is not strictly inside (0, 1)"
        )));
    }
    if f.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter {
            field: "f_values",
            reason: "must be nondecreasing".into(),
        });
    }
    Ok(())
}

pub(crate) fn mirrored(f: &[f64]) -> Vec<f64> {
    f.iter().rev().map(|x| 1.0 - x).collect()
}

fn below(rule: &DesignRule) -> DesignRule {
    DesignRule {
        orientation: Orientation::BelowMedian,
        ..*rule
    }
}

/// Marginal (up, down) move probabilities at a level with response
/// probability `f`, for a below-median rule.
pub fn marginal_moves(rule: &DesignRule, f: f64) -> (f64, f64) {
    match rule.variant {
        Variant::Sud => (1.0 - f, f),
        Variant::Bcd { gamma } => ((1.0 - f) * gamma / (1.0 - gamma), f),
        Variant::Kr { k } => {
            let q = (1.0 - f).powi(k as i32);
            (f * q / (1.0 - q), f)
        }
        Variant::Gud { k, a, b } => (
            binom_cdf(a as i64, k as usize, f),
            binom_sf(b as i64, k as usize, f),
        ),
    }
}

/// Closed-form stationary profile of the (marginal) level chain.
pub fn stationary_profile(rule: &DesignRule, f: &[f64]) -> Result<StationaryProfile> {
    let rule = rule.validated()?;
    check_f(f)?;
    if rule.orientation == Orientation::AboveMedian {
        let inner = stationary_profile(&below(&rule), &mirrored(f))?;
        let pi: Vec<f64> = inner.pi.into_iter().rev().collect();
        return Ok(StationaryProfile::from_pi(pi));
    }
    let gamma = (0..f.len() - 1)
        .map(|u| marginal_moves(&rule, f[u]).0 / marginal_moves(&rule, f[u + 1]).1)
        .collect();
    Ok(StationaryProfile::from_gamma(gamma))
}

/// KR stationary frequencies per (level, counter); `out[u][tau]`.
pub fn internal_state_profile(k: u32, f: &[f64]) -> Result<Vec<Vec<f64>>> {
    let marg = stationary_profile(&DesignRule::kr(k)?, f)?;
    Ok(f.iter()
        .zip(&marg.pi)
        .map(|(&fu, &pu)| {
            let q = 1.0 - fu;
            let base = pu * fu / (1.0 - q.powi(k as i32));
            (0..k).map(|t| base * q.powi(t as i32)).collect()
        })
        .collect())
}

/// Normalized stationary profile of KR base states (counter at zero).
pub fn base_state_profile(k: u32, f: &[f64]) -> Result<StationaryProfile> {
    let states = internal_state_profile(k, f)?;
    let s: f64 = states.iter().map(|r| r[0]).sum();
    Ok(StationaryProfile::from_pi(
        states.iter().map(|r| r[0] / s).collect(),
    ))
}

/// Per-level reversal factor: probability that a trial at this level is a
/// reversal, in stationarity.
pub fn reversal_factor(rule: &DesignRule, f: f64) -> Result<f64> {
    Ok(match rule.variant {
        Variant::Sud => f * f + (1.0 - f) * (1.0 - f),
        Variant::Bcd { gamma } => gamma / (1.0 - gamma) * (1.0 - f) * (1.0 - 2.0 * f) + f,
        Variant::Kr { k } => {
            let q = (1.0 - f).powi(k as i32);
            f * (1.0 - 2.0 * f * q) / (1.0 - q)
        }
        Variant::Gud { .. } => {
            return Err(Error::Unsupported(
                "reversal frequencies are not defined for cohort designs".into(),
            ))
        }
    })
}

/// Stationary distribution of reversal points over levels.
pub fn reversal_stationary(rule: &DesignRule, f: &[f64]) -> Result<Vec<f64>> {
    if rule.orientation == Orientation::AboveMedian {
        let inner = reversal_stationary(&below(rule), &mirrored(f))?;
        return Ok(inner.into_iter().rev().collect());
    }
    let prof = stationary_profile(rule, f)?;
    let raw = f
        .iter()
        .zip(&prof.pi)
        .map(|(&fu, &p)| Ok(p * reversal_factor(rule, fu)?))
        .collect::<Result<Vec<f64>>>()?;
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|x| x / s).collect())
}

/// Location of the first reversal for a walk climbing from `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstReversal {
    pub pmf: Vec<f64>,
    /// Probability of leaving the top level before any reversal.
    pub residual: f64,
}

pub fn first_reversal_distribution(
    rule: &DesignRule,
    f: &[f64],
    start: usize,
) -> Result<FirstReversal> {
    let rule = rule.validated()?;
    if start >= f.len() {
        return Err(Error::InvalidParameter {
            field: "start",
            reason: "outside the level range".into(),
        });
    }
    if rule.orientation == Orientation::AboveMedian {
        let inner = first_reversal_distribution(&below(&rule), &mirrored(f), f.len() - 1 - start)?;
        return Ok(FirstReversal {
            pmf: inner.pmf.into_iter().rev().collect(),
            residual: inner.residual,
        });
    }
    let pass = |fu: f64| -> f64 {
        match rule.variant {
            Variant::Sud => 1.0 - fu,
            Variant::Kr { k } | Variant::Gud { k, .. } => (1.0 - fu).powi(k as i32),
            Variant::Bcd { gamma } => {
                let r = gamma / (1.0 - gamma);
                (1.0 - fu) * r / (fu + (1.0 - fu) * r)
            }
        }
    };
    let mut pmf = vec![0.0; f.len()];
    let mut reach = 1.0;
    for u in start..f.len() {
        let p = pass(f[u]);
        pmf[u] = reach * (1.0 - p);
        reach *= p;
    }
    Ok(FirstReversal {
        pmf,
        residual: reach,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peakedness {
    AMorePeaked,
    BMorePeaked,
    Mixed,
    Equivalent,
}

/// Compares two same-target designs by their adjacent-level ratios: the
/// more peaked one has larger ratios on level pairs wholly below target
/// and smaller ones on pairs wholly above. The pair straddling target is
/// not constrained.
pub fn peakedness_compare(a: &DesignRule, b: &DesignRule, f: &[f64]) -> Result<Peakedness> {
    let p = a.target();
    if (p - b.target()).abs() > 1e-3 {
        return Err(Error::InvalidParameter {
            field: "rules",
            reason: format!("targets differ: {p} vs {}", b.target()),
        });
    }
    let ga = stationary_profile(a, f)?.gamma;
    let gb = stationary_profile(b, f)?.gamma;
    let eps = 1e-12;
    let dominates = |x: &[f64], y: &[f64]| {
        (0..x.len()).all(|u| {
            let below_ok = f[u + 1] > p || x[u] >= y[u] * (1.0 - eps);
            let above_ok = f[u] < p || x[u] <= y[u] * (1.0 + eps);
            below_ok && above_ok
        })
    };
    Ok(match (dominates(&ga, &gb), dominates(&gb, &ga)) {
        (true, true) => Peakedness::Equivalent,
        (true, false) => Peakedness::AMorePeaked,
        (false, true) => Peakedness::BMorePeaked,
        (false, false) => Peakedness::Mixed,
    })
}

/// Leading terms of the stationary-mean bias, from the first telescoping
/// pair `gamma_{u*} - 1/gamma_{u*-1}` around a level placed at target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasApprox {
    pub first_order: f64,
    pub second_order: f64,
    /// The same pair evaluated exactly from the model.
    pub exact_pair: f64,
    /// `mu_pi - Q_p` on an unbounded grid through the target.
    pub mean_bias: f64,
}

pub fn stationary_bias_approx(
    rule: &DesignRule,
    model: &ThresholdModel,
    grid: &TreatmentGrid,
) -> Result<BiasApprox> {
    if rule.orientation == Orientation::AboveMedian {
        return Err(Error::Unsupported(
            "bias expansions are stated for below-median rules".into(),
        ));
    }
    let s = grid.spacing();
    let p = rule.target();
    let q = model.quantile(p)?;
    let fq = model.pdf(q);
    let fpq = model.pdf_derivative(q);
    let (first, second) = match rule.variant {
        Variant::Sud => (0.0, -2.0 * s * s * fpq),
        Variant::Bcd { .. } => ((2.0 * p - 1.0) / (p * (1.0 - p)) * s * fq, 0.0),
        Variant::Kr { k } => (
            2.0 * ((k as f64 + 1.0) * p - 1.0) / (p * (1.0 - p)) * s * fq,
            0.0,
        ),
        Variant::Gud { k, a: 0, b: 1 } => {
            let k = k as f64;
            let c = 1.0 - p;
            let hp = k * c.powf(k - 1.0) * fpq - k * (k - 1.0) * c.powf(k - 2.0) * fq * fq;
            (0.0, -2.0 * s * s * hp)
        }
        Variant::Gud { .. } => {
            return Err(Error::Unsupported(
                "bias expansion available for GU&D(k,0,1) only".into(),
            ))
        }
    };
    let up = |x: f64| marginal_moves(rule, model.cdf(x)).0;
    let down = |x: f64| marginal_moves(rule, model.cdf(x)).1;
    let exact_pair = up(q) / down(q + s) - down(q) / up(q - s);

    let lo = model.quantile(1e-9)?.max(model.support_min());
    let hi = model.quantile(1.0 - 1e-9)?;
    let jlo = -(((q - lo) / s).floor() as i64);
    let jhi = ((hi - q) / s).floor() as i64;
    let levels: Vec<f64> = (jlo..=jhi).map(|j| q + j as f64 * s).collect();
    let fv: Vec<f64> = levels.iter().map(|&x| model.cdf(x)).collect();
    let usable: Vec<usize> = (0..fv.len()).filter(|&i| fv[i] > 0.0 && fv[i] < 1.0).collect();
    let (lv, fv): (Vec<f64>, Vec<f64>) = usable.iter().map(|&i| (levels[i], fv[i])).unzip();
    let mean_bias = if lv.len() >= 2 {
        stationary_profile(rule, &fv)?.mean_on(&lv) - q
    } else {
        0.0
    };
    Ok(BiasApprox {
        first_order: first,
        second_order: second,
        exact_pair,
        mean_bias,
    })
}

/// Critical ratio of distances (in F) to the levels flanking target above
/// which the mode sits on the lower flanking level.
pub fn mode_basin_ratio(rule: &DesignRule) -> Result<f64> {
    let p = rule.target();
    match rule.variant {
        Variant::Sud => Ok(1.0),
        Variant::Bcd { .. } => Ok((1.0 - p) / p),
        Variant::Kr { k } => Ok((1.0 - p) / ((2.0 * k as f64 + 1.0) * p - 1.0)),
        Variant::Gud { .. } => Err(Error::Unsupported(
            "no first-order basin ratio for cohort designs".into(),
        )),
    }
}

#[cfg(test)]
mod tests;
