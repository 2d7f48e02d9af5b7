//! Model-based allocation: CRM dose-response models with quadrature
//! posteriors, CRM/EWOC allocation, the nonparametric cumulative cohort
//! design (CCD), and hybrid Bayesian Up-and-Down rules (BUD).
//!
//! Model parameters live on an unconstrained scale with independent
//! normal priors; posteriors are computed by deterministic quadrature.

mod alloc;

pub use alloc::{
    c_bud_choice, ccd_allocate, ccd_bud_choice, ccd_window, crm_allocate, r_bud_choice, BudDecision, CrmRule,
    OppositeRule,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::ResponseTable;

/// Normal density on one unconstrained parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    fn log_density(&self, v: f64) -> f64 {
        let z = (v - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrmKind {
    /// `G(l_u) = skeleton_u ^ exp(phi)`.
    Power { skeleton: Vec<f64> },
    /// Parameters: location, log scale.
    Logistic,
    /// Parameters: log shape, log scale; `x` measured from `origin`.
    Weibull { origin: f64 },
}

/// A CRM dose-response model on a fixed set of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmModel {
    pub kind: CrmKind,
    pub levels: Vec<f64>,
    pub prior: Vec<NormalPrior>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn check_levels(levels: &[f64]) -> Result<()> {
    if levels.len() < 2 || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter {
            field: "levels",
            reason: "need at least two strictly increasing levels".into(),
        });
    }
    Ok(())
}

fn check_target(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(p));
    }
    Ok(())
}

impl CrmModel {
    /// One-parameter power model with a lognormal(0, 0.75^2) exponent prior.
    pub fn power(levels: Vec<f64>, skeleton: Vec<f64>) -> Result<Self> {
        check_levels(&levels)?;
        if skeleton.len() != levels.len() {
            return Err(Error::LengthMismatch("skeleton vs levels".into()));
        }
        if skeleton.iter().any(|&g| !(g > 0.0 && g < 1.0)) || skeleton.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter {
                field: "skeleton",
                reason: "must be strictly increasing inside (0, 1)".into(),
            });
        }
        Ok(CrmModel {
            kind: CrmKind::Power { skeleton },
            levels,
            prior: vec![NormalPrior { mean: 0.0, sd: 0.75 }],
        })
    }

    /// Power model whose skeleton is a logistic curve through `target` at
    /// the middle level, rising by one logit unit per level.
    pub fn power_default(levels: Vec<f64>, target: f64) -> Result<Self> {
        check_target(target)?;
        let mid = (levels.len() - 1) as f64 / 2.0;
        let skeleton = (0..levels.len())
            .map(|u| 1.0 / (1.0 + (-(logit(target) + (u as f64 - mid))).exp()))
            .collect();
        CrmModel::power(levels, skeleton)
    }

    /// Two-parameter logistic model; the prior centres `Q_target` mid-grid.
    pub fn logistic(levels: Vec<f64>, target: f64) -> Result<Self> {
        check_levels(&levels)?;
        check_target(target)?;
        let (lo, hi) = (levels[0], levels[levels.len() - 1]);
        let half = (hi - lo) / 2.0;
        let b0 = half / 2.0;
        Ok(CrmModel {
            kind: CrmKind::Logistic,
            prior: vec![
                NormalPrior {
                    mean: lo + half - b0 * logit(target),
                    sd: half,
                },
                NormalPrior { mean: b0.ln(), sd: 0.75 },
            ],
            levels,
        })
    }

    /// Two-parameter Weibull model with origin one spacing below the first
    /// level; the prior centres `Q_target` mid-grid.
    pub fn weibull(levels: Vec<f64>, target: f64) -> Result<Self> {
        check_levels(&levels)?;
        check_target(target)?;
        let origin = 2.0 * levels[0] - levels[1];
        let mid = (levels[0] + levels[levels.len() - 1]) / 2.0;
        let k0: f64 = 2.0;
        let c = -(1.0 - target).ln();
        Ok(CrmModel {
            kind: CrmKind::Weibull { origin },
            prior: vec![
                NormalPrior { mean: k0.ln(), sd: 0.5 },
                NormalPrior {
                    mean: (mid - origin).ln() - c.ln() / k0,
                    sd: 0.5,
                },
            ],
            levels,
        })
    }

    pub fn with_prior(mut self, prior: Vec<NormalPrior>) -> Result<Self> {
        if prior.len() != self.dim() || prior.iter().any(|p| !(p.sd > 0.0) || !p.mean.is_finite()) {
            return Err(Error::InvalidParameter {
                field: "prior",
                reason: format!("need {} priors with positive sd", self.dim()),
            });
        }
        self.prior = prior;
        Ok(self)
    }

    /// Number of free parameters.
    pub fn dim(&self) -> usize {
        match self.kind {
            CrmKind::Power { .. } => 1,
            _ => 2,
        }
    }

    /// Model probability at level index `u`.
    pub fn g_level(&self, u: usize, theta: &[f64]) -> f64 {
        match &self.kind {
            CrmKind::Power { skeleton } => skeleton[u].powf(theta[0].exp()),
            _ => self.g(self.levels[u], theta),
        }
    }

    /// Model probability at treatment `x`. The power model interpolates its
    /// skeleton linearly between levels.
    pub fn g(&self, x: f64, theta: &[f64]) -> f64 {
        match &self.kind {
            CrmKind::Power { skeleton } => {
                let s = lin_extrap(&self.levels, skeleton, x).clamp(0.0, 1.0);
                s.powf(theta[0].exp())
            }
            CrmKind::Logistic => 1.0 / (1.0 + (-(x - theta[0]) / theta[1].exp()).exp()),
            CrmKind::Weibull { origin } => {
                if x <= *origin {
                    0.0
                } else {
                    let z = (x - origin) / theta[1].exp();
                    1.0 - (-z.powf(theta[0].exp())).exp()
                }
            }
        }
    }

    /// Treatment at which `G = p`.
    pub fn quantile(&self, p: f64, theta: &[f64]) -> f64 {
        match &self.kind {
            CrmKind::Power { skeleton } => {
                let s = p.powf(1.0 / theta[0].exp());
                lin_extrap(skeleton, &self.levels, s)
            }
            CrmKind::Logistic => theta[0] + theta[1].exp() * logit(p),
            CrmKind::Weibull { origin } => {
                origin + theta[1].exp() * (-(1.0 - p).ln()).powf(1.0 / theta[0].exp())
            }
        }
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.prior.iter().zip(theta).map(|(p, &t)| p.log_density(t)).sum()
    }

    /// Yes/no counts aligned with the model levels.
    pub fn align(&self, table: &ResponseTable) -> Result<Vec<(f64, f64)>> {
        let scale = self.levels.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        let mut out = vec![(0.0, 0.0); self.levels.len()];
        for (i, &x) in table.levels.iter().enumerate() {
            let u = self
                .levels
                .iter()
                .position(|&l| (l - x).abs() <= 1e-9 * scale)
                .ok_or_else(|| Error::InvalidParameter {
                    field: "table",
                    reason: format!("level {x} is not a model level"),
                })?;
            out[u].0 += table.yes[i] as f64;
            out[u].1 += table.no[i] as f64;
        }
        Ok(out)
    }

    fn loglik_aligned(&self, counts: &[(f64, f64)], theta: &[f64]) -> f64 {
        let mut ll = 0.0;
        for (u, &(y, n)) in counts.iter().enumerate() {
            if y == 0.0 && n == 0.0 {
                continue;
            }
            let g = self.g_level(u, theta);
            if y > 0.0 {
                ll += y * g.ln();
            }
            if n > 0.0 {
                ll += n * (-g).ln_1p();
            }
        }
        ll
    }
}

/// Binomial log-likelihood without the combinatorial constant. Impossible
/// data give `-inf`.
pub fn log_likelihood(model: &CrmModel, theta: &[f64], table: &ResponseTable) -> Result<f64> {
    if theta.len() != model.dim() {
        return Err(Error::LengthMismatch(format!(
            "theta has {} values, model needs {}",
            theta.len(),
            model.dim()
        )));
    }
    let counts = model.align(table)?;
    Ok(model.loglik_aligned(&counts, theta))
}

/// Linear interpolation through (xs, ys), extended linearly beyond the ends.
fn lin_extrap(xs: &[f64], ys: &[f64], z: f64) -> f64 {
    let n = xs.len();
    let j = xs.partition_point(|&v| v < z).clamp(1, n - 1);
    let (x0, x1, y0, y1) = (xs[j - 1], xs[j], ys[j - 1], ys[j]);
    y0 + (y1 - y0) * (z - x0) / (x1 - x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Simpson intervals for one-parameter models.
    pub intervals_1d: usize,
    /// Nodes per axis for two-parameter models (odd).
    pub nodes_2d: usize,
    /// Half-width of the two-parameter grid in prior SDs.
    pub span_sd_2d: f64,
    /// Half-width of the one-parameter search range in prior SDs.
    pub span_sd_1d: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            intervals_1d: 512,
            nodes_2d: 129,
            span_sd_2d: 5.5,
            span_sd_1d: 8.0,
        }
    }
}

/// Posterior summaries at one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub target: f64,
    /// Posterior mean of `G` at each level.
    pub level_means: Vec<f64>,
    pub qp_mean: f64,
    pub probs: Vec<f64>,
    pub qp_quantiles: Vec<f64>,
    /// Log of the marginal likelihood (prior-weighted).
    pub log_norm: f64,
    pub nodes: usize,
    /// Richardson estimate of the relative error of the normalizing
    /// constant (full vs half grid).
    pub est_error: f64,
    /// Sorted `Q_p` atoms with cumulative posterior mass.
    #[serde(skip)]
    cdf: Vec<(f64, f64)>,
}

impl PosteriorSummary {
    /// Posterior quantile of `Q_p`; `0` and `1` map to the infinite ends.
    pub fn qp_quantile(&self, prob: f64) -> f64 {
        if prob <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if prob >= 1.0 {
            return f64::INFINITY;
        }
        let i = self.cdf.partition_point(|&(_, c)| c < prob).min(self.cdf.len() - 1);
        self.cdf[i].0
    }

    /// Posterior probability that `Q_p <= t`.
    pub fn qp_cdf(&self, t: f64) -> f64 {
        let i = self.cdf.partition_point(|&(q, _)| q <= t);
        if i == 0 {
            0.0
        } else {
            self.cdf[i - 1].1
        }
    }
}

fn simpson_weights(n_intervals: usize) -> Vec<f64> {
    (0..=n_intervals)
        .map(|i| {
            if i == 0 || i == n_intervals {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        })
        .collect()
}

/// Posterior summary of `model` given `table`, evaluated at `target`.
/// Quantiles of `Q_target` are reported at `probs`.
pub fn posterior_summary(
    model: &CrmModel,
    table: &ResponseTable,
    target: f64,
    probs: &[f64],
    cfg: &QuadConfig,
) -> Result<PosteriorSummary> {
    check_target(target)?;
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidParameter {
            field: "probs",
            reason: "must lie in [0, 1]".into(),
        });
    }
    let counts = model.align(table)?;
    let logpost = |theta: &[f64]| model.loglik_aligned(&counts, theta) + model.log_prior(theta);
    // Nodes as (theta, quadrature weight); `half` marks nodes of the coarse
    // grid used for the error estimate, with their coarse weight.
    let mut nodes: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    let cell: f64;
    match model.dim() {
        1 => {
            let n = cfg.intervals_1d.max(4) & !1usize;
            let pr = model.prior[0];
            let (a0, b0) = (pr.mean - cfg.span_sd_1d * pr.sd, pr.mean + cfg.span_sd_1d * pr.sd);
            let coarse = 64usize;
            let h0 = (b0 - a0) / coarse as f64;
            let lp: Vec<f64> = (0..=coarse).map(|i| logpost(&[a0 + h0 * i as f64])).collect();
            let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !top.is_finite() {
                return Err(Error::Degenerate("likelihood is zero over the prior support".into()));
            }
            let keep: Vec<usize> = (0..=coarse).filter(|&i| lp[i] > top - 40.0).collect();
            let lo = a0 + h0 * keep[0].saturating_sub(1) as f64;
            let hi = a0 + h0 * (keep[keep.len() - 1] + 1).min(coarse) as f64;
            let h = (hi - lo) / n as f64;
            let w = simpson_weights(n);
            let wc = simpson_weights(n / 2);
            for i in 0..=n {
                let half = if i % 2 == 0 { wc[i / 2] * 2.0 } else { 0.0 };
                nodes.push((vec![lo + h * i as f64], w[i], half));
            }
            cell = h / 3.0;
        }
        _ => {
            let k = (cfg.nodes_2d.max(5) - 1) & !1usize;
            let w = simpson_weights(k);
            let wc = simpson_weights(k / 2);
            let axes: Vec<(f64, f64)> = model
                .prior
                .iter()
                .map(|p| (p.mean - cfg.span_sd_2d * p.sd, 2.0 * cfg.span_sd_2d * p.sd / k as f64))
                .collect();
            for i in 0..=k {
                for j in 0..=k {
                    let theta = vec![axes[0].0 + axes[0].1 * i as f64, axes[1].0 + axes[1].1 * j as f64];
                    let half = if i % 2 == 0 && j % 2 == 0 {
                        wc[i / 2] * wc[j / 2] * 4.0
                    } else {
                        0.0
                    };
                    nodes.push((theta, w[i] * w[j], half));
                }
            }
            cell = axes[0].1 * axes[1].1 / 9.0;
        }
    }
    let lps: Vec<f64> = nodes.iter().map(|(t, _, _)| logpost(t)).collect();
    let top = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Degenerate("likelihood is zero over the quadrature grid".into()));
    }
    let mut total = 0.0;
    let mut total_half = 0.0;
    let m = model.levels.len();
    let mut level_means = vec![0.0; m];
    let mut qp_mean = 0.0;
    let mut atoms: Vec<(f64, f64)> = Vec::with_capacity(nodes.len());
    for ((theta, w, half), lp) in nodes.iter().zip(&lps) {
        let dens = (lp - top).exp();
        let mass = w * dens;
        total += mass;
        total_half += half * dens;
        if mass == 0.0 {
            continue;
        }
        for (u, acc) in level_means.iter_mut().enumerate() {
            *acc += mass * model.g_level(u, theta);
        }
        let q = model.quantile(target, theta);
        qp_mean += mass * q;
        atoms.push((q, mass));
    }
    for v in &mut level_means {
        *v /= total;
    }
    qp_mean /= total;
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cum = 0.0;
    let cdf: Vec<(f64, f64)> = atoms
        .into_iter()
        .map(|(q, w)| {
            cum += w / total;
            (q, cum)
        })
        .collect();
    let mut out = PosteriorSummary {
        target,
        level_means,
        qp_mean,
        probs: probs.to_vec(),
        qp_quantiles: Vec::new(),
        log_norm: top + (total * cell).ln(),
        nodes: nodes.len(),
        est_error: ((total - total_half) / total).abs() / 15.0,
        cdf,
    };
    out.qp_quantiles = probs.iter().map(|&p| out.qp_quantile(p)).collect();
    Ok(out)
}
