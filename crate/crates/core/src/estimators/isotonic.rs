//! Isotonic (PAVA) and centered isotonic regression, and inverse
//! interpolation of the fitted curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flavor {
    Ir,
    Cir,
}

/// IR fits keep the input abscissae with pooled values; CIR fits keep one
/// point per pooled block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub flavor: Flavor,
}

fn validate(y: &[f64], x: &[f64], w: &[f64]) -> Result<()> {
    if y.len() != x.len() || w.len() != x.len() {
        return Err(Error::LengthMismatch("y, x and w must have equal length".into()));
    }
    if x.is_empty() {
        return Err(Error::InsufficientData("no points to fit".into()));
    }
    if x.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidParameter {
            field: "x",
            reason: "must be strictly increasing".into(),
        });
    }
    if w.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidParameter {
            field: "w",
            reason: "weights must be positive".into(),
        });
    }
    Ok(())
}

/// Weighted pool-adjacent-violators fit, reported at every input point.
pub fn pava(y: &[f64], x: &[f64], w: &[f64]) -> Result<IsotonicFit> {
    validate(y, x, w)?;
    // Blocks as (value, weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        blocks.push((y[i], w[i], 1));
        while blocks.len() > 1 {
            let b = blocks[blocks.len() - 1];
            let a = blocks[blocks.len() - 2];
            if a.0 <= b.0 {
                break;
            }
            let wt = a.1 + b.1;
            blocks.pop();
            *blocks.last_mut().unwrap() = ((a.0 * a.1 + b.0 * b.1) / wt, wt, a.2 + b.2);
        }
    }
    let fitted = blocks
        .iter()
        .flat_map(|&(v, _, c)| std::iter::repeat_n(v, c))
        .collect();
    Ok(IsotonicFit {
        x: x.to_vec(),
        y: fitted,
        w: w.to_vec(),
        flavor: Flavor::Ir,
    })
}

/// Centered isotonic regression: each violating run (ties included)
/// collapses to a single point at its weighted-mean abscissa.
pub fn cir(y: &[f64], x: &[f64], w: &[f64]) -> Result<IsotonicFit> {
    validate(y, x, w)?;
    let (mut y, mut x, mut w) = (y.to_vec(), x.to_vec(), w.to_vec());
    while y.len() > 1 {
        let Some(i) = (0..y.len() - 1).find(|&i| y[i + 1] - y[i] <= 0.0) else {
            break;
        };
        let wt = w[i] + w[i + 1];
        y[i] = (y[i] * w[i] + y[i + 1] * w[i + 1]) / wt;
        x[i] = (x[i] * w[i] + x[i + 1] * w[i + 1]) / wt;
        w[i] = wt;
        y.remove(i + 1);
        x.remove(i + 1);
        w.remove(i + 1);
    }
    Ok(IsotonicFit {
        x,
        y,
        w,
        flavor: Flavor::Cir,
    })
}

/// Piecewise-linear forward estimate at `at`, constant beyond the fit.
pub fn cir_forward(fit: &IsotonicFit, at: &[f64]) -> Vec<f64> {
    at.iter().map(|&z| interp(&fit.x, &fit.y, z)).collect()
}

/// Linear interpolation of `ys` over increasing `xs`, constant outside.
pub(crate) fn interp(xs: &[f64], ys: &[f64], z: f64) -> f64 {
    let n = xs.len();
    if z <= xs[0] {
        return ys[0];
    }
    if z >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&v| v <= z);
    let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
    if x1 == x0 {
        return y1;
    }
    y0 + (y1 - y0) * (z - x0) / (x1 - x0)
}

/// Augments the fit with boundary anchors when `target` lies outside the
/// fitted range. Returns (x, y, weight) points, y strictly increasing for
/// CIR fits.
pub(crate) fn anchored(
    fit: &IsotonicFit,
    target: f64,
    x_bounds: (f64, f64),
    y_bounds: (f64, f64),
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (mut x, mut y, mut w) = (fit.x.clone(), fit.y.clone(), fit.w.clone());
    let xb0 = x_bounds.0.min(fit.x[0]);
    let xb1 = x_bounds.1.max(fit.x[fit.x.len() - 1]);
    if y.iter().cloned().fold(f64::INFINITY, f64::min) > target {
        x.insert(0, xb0);
        y.insert(0, y_bounds.0);
        w.insert(0, 1.0);
    }
    if y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) < target {
        x.push(xb1);
        y.push(y_bounds.1);
        w.push(1.0);
    }
    (x, y, w)
}

/// Inverse (percentile) estimate: the treatment at which the fitted curve
/// reaches `target`.
pub fn inverse_estimate(
    fit: &IsotonicFit,
    target: f64,
    x_bounds: (f64, f64),
    y_bounds: (f64, f64),
) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Domain(target));
    }
    if fit.x.len() == 1 {
        return Ok(fit.x[0]);
    }
    let (x, y, w) = anchored(fit, target, x_bounds, y_bounds);
    Ok(invert(&x, &y, &w, target))
}

/// Inverse interpolation over a nondecreasing curve. A flat run sitting
/// exactly at `target` resolves to its weighted-mean abscissa.
pub(crate) fn invert(x: &[f64], y: &[f64], w: &[f64], target: f64) -> f64 {
    let n = x.len();
    if n == 1 {
        return x[0];
    }
    let first = y.iter().position(|&v| v == target);
    if let Some(a) = first {
        let b = a + y[a..].iter().take_while(|&&v| v == target).count();
        let wt: f64 = w[a..b].iter().sum();
        return x[a..b].iter().zip(&w[a..b]).map(|(xi, wi)| xi * wi).sum::<f64>() / wt;
    }
    if target <= y[0] {
        return x[0];
    }
    if target >= y[n - 1] {
        return x[n - 1];
    }
    let j = y.partition_point(|&v| v < target);
    let (x0, x1, y0, y1) = (x[j - 1], x[j], y[j - 1], y[j]);
    x0 + (x1 - x0) * (target - y0) / (y1 - y0)
}
