//! Interval estimation for centered isotonic regression: a forward
//! interval for F at the target, from a linearized count quantile,
//! inverted through the local slope of the fit.

use serde::{Deserialize, Serialize};

use super::isotonic::{anchored, cir, invert};
use super::{check_percentiles, EstimateWithCI, ResponseTable};
use crate::error::{Error, Result};
use crate::numeric::{binom_cdf, binom_quantile, pois_cdf, pois_quantile, t_quantile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiOption {
    Poisson,
    Binomial,
    #[serde(rename = "t")]
    TDist,
}

impl CiOption {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" => Some(CiOption::Poisson),
            "binomial" => Some(CiOption::Binomial),
            "t" | "tdist" => Some(CiOption::TDist),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CiOption::Poisson => "poisson",
            CiOption::Binomial => "binomial",
            CiOption::TDist => "t",
        }
    }
}

/// Linearized quantile of a yes-count out of `size` trials at response
/// rate `prob`. The Poisson and t variants are centred so that
/// `value - size*prob` is the interval offset.
pub fn linearized_quantile(option: CiOption, p: f64, size: f64, prob: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(p));
    }
    if !(size >= 1.0) {
        return Err(Error::InvalidParameter {
            field: "size",
            reason: "must be at least 1".into(),
        });
    }
    Ok(match option {
        CiOption::TDist => {
            let df = (size - 1.0).max(1.0);
            t_quantile(p, df) * (size * prob * (1.0 - prob)).sqrt()
        }
        CiOption::Binomial => smooth_binom(p, size.round() as usize, prob),
        CiOption::Poisson => smooth_pois(p, size * prob),
    })
}

fn smooth_binom(p: f64, size: usize, prob: f64) -> f64 {
    let q1 = binom_quantile(p, size, prob);
    let p1 = binom_cdf(q1, size, prob);
    let p2 = binom_cdf(q1 - 1, size, prob);
    let q1f = q1 as f64;
    let mut out = q1f - (p1 - p) / (p1 - p2);
    if p > 0.5 {
        out += 2.0;
        out = out.max(q1f);
    } else if p < 0.5 {
        out -= 1.0;
        out = out.min(q1f);
    }
    out
}

fn linear_pois(p: f64, lambda: f64) -> f64 {
    let q1 = pois_quantile(p, lambda);
    let p1 = pois_cdf(q1, lambda);
    let p2 = pois_cdf(q1 - 1, lambda);
    q1 as f64 - (p1 - p) / (p1 - p2)
}

fn smooth_pois(p: f64, lambda: f64) -> f64 {
    let out1 = linear_pois(0.5, lambda);
    let out2 = linear_pois(p.max(1.0 - p), lambda);
    let branch = if p > 0.5 { out2 } else { 2.0 * out1 - out2 };
    branch + lambda - out1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirOptions {
    pub option: CiOption,
    pub percentiles: Vec<f64>,
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
}

impl Default for CirOptions {
    fn default() -> Self {
        CirOptions {
            option: CiOption::Poisson,
            percentiles: vec![0.025, 0.975],
            x_bounds: (0.0, 1.0),
            y_bounds: (0.0, 1.0),
        }
    }
}

/// One-sigma normal percentile, used to report an se for CIR intervals.
const ONE_SIGMA: f64 = 0.841_344_746_068_542_9;

/// CIR inverse estimate of the `target` percentile with interval bounds
/// at the requested percentiles.
pub fn cir_confidence(table: &ResponseTable, target: f64, opts: &CirOptions) -> Result<EstimateWithCI> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(target));
    }
    check_percentiles(&opts.percentiles)?;
    let obs = table.observed();
    if obs.is_empty() {
        return Err(Error::InsufficientData("response table has no observations".into()));
    }
    let y: Vec<f64> = obs.f_hat().into_iter().map(|v| v.unwrap()).collect();
    let w: Vec<f64> = (0..obs.len()).map(|u| obs.n(u) as f64).collect();
    let fit = cir(&y, &obs.levels, &w)?;
    let xb = (
        opts.x_bounds.0.min(obs.levels[0]),
        opts.x_bounds.1.max(obs.levels[obs.len() - 1]),
    );
    let (nx, ny, nn) = anchored(&fit, target, xb, opts.y_bounds);
    let point = invert(&nx, &ny, &nn, target);

    let len = ny.len();
    let mut warning = None;
    let gap_for = |p: f64| -> Result<Option<(f64, f64)>> {
        if len == 1 {
            return Ok(None);
        }
        let below = ny.iter().filter(|&&v| v <= target).count();
        let yplace = below.clamp(1, len - 1) - 1;
        if ny[yplace + 1] == ny[yplace] {
            return Ok(None);
        }
        let minn = nn[yplace].min(nn[yplace + 1]);
        let q = linearized_quantile(opts.option, p, minn, target)?;
        let width = match opts.option {
            CiOption::TDist => q / minn,
            _ => q / minn - target,
        };
        let slope = (nx[yplace + 1] - nx[yplace]) / (ny[yplace + 1] - ny[yplace]);
        Ok(Some((width * slope, minn)))
    };
    let mut bounds = Vec::with_capacity(opts.percentiles.len());
    let mut df = 1.0;
    for &p in &opts.percentiles {
        match gap_for(p)? {
            Some((g, minn)) => {
                bounds.push(point + g);
                df = (minn - 1.0).max(1.0);
            }
            None => {
                warning = Some("flat or single-point fit; interval spans the x range".to_string());
                let span = xb.1 - xb.0;
                bounds.push(point + if p < 0.5 { -span } else { span });
            }
        }
    }
    let se = match gap_for(ONE_SIGMA)? {
        Some((g, _)) => g.abs(),
        None => xb.1 - xb.0,
    };
    Ok(EstimateWithCI {
        point,
        se,
        df,
        percentiles: opts.percentiles.clone(),
        bounds,
        method: format!("cir-{}", opts.option.as_str()),
        warning,
    })
}
