//! Seeded ensemble simulation: single runs, estimator metrics, coverage
//! studies, allocation uniformity and binomial precision curves.
//!
//! Every run draws thresholds and design randomization from two
//! independent streams derived from the master seed and the run index, so
//! different policies see identical thresholds. Ensembles are evaluated in
//! parallel and aggregated in run order, which keeps results bit-identical
//! for any thread count.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::designs::{Response, Transform, TreatmentGrid, WalkState};
use crate::dist::registry::ScenarioSpec;
use crate::dist::ThresholdModel;
use crate::engine::{Engine, Policy};
use crate::error::{Error, Result};
use crate::estimators::{estimate, ChainData, EstimateOptions, EstimateWithCI, EstimatorKind};
use crate::numeric::binom_pmf;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub model: ThresholdModel,
    pub grid: TreatmentGrid,
    pub policy: Policy,
    /// Trials per run.
    pub n: usize,
    pub start_level: usize,
    /// Ensemble size.
    pub runs: usize,
    pub seed: u64,
}

impl Scenario {
    /// Scenario on a registry entry's reflecting grid.
    pub fn from_spec(spec: &ScenarioSpec, policy: Policy, n: usize, start_level: usize, runs: usize, seed: u64) -> Result<Self> {
        let grid = TreatmentGrid::new(spec.levels(), crate::designs::BoundaryPolicy::Reflecting)?;
        Ok(Scenario {
            name: spec.name.clone(),
            model: spec.model,
            grid,
            policy,
            n,
            start_level,
            runs,
            seed,
        })
    }

    pub fn target(&self) -> f64 {
        self.policy.target()
    }

    /// True target percentile on the design scale.
    pub fn truth(&self) -> Result<f64> {
        let q = self.model.quantile(self.target())?;
        Ok(match self.grid.transform() {
            Transform::Identity => q,
            Transform::Log => q.ln(),
        })
    }

    /// Level index whose true `F` is closest to the target (ties low).
    pub fn optimal_level(&self) -> usize {
        let p = self.target();
        let f: Vec<f64> = (0..self.grid.m() as i64)
            .map(|u| self.model.cdf(self.grid.treatment(u)))
            .collect();
        let mut best = 0;
        for u in 1..f.len() {
            if (f[u] - p).abs() < (f[best] - p).abs() {
                best = u;
            }
        }
        best
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.runs == 0 {
            return Err(Error::InvalidParameter {
                field: "n",
                reason: "trials per run and ensemble size must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Seed for stream `stream` of run `index`.
pub fn run_seed(master: u64, index: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 * 2 + stream);
    rng.next_u64()
}

/// One simulated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub levels: Vec<usize>,
    /// Treatments on the design scale.
    pub x: Vec<f64>,
    pub responses: Vec<Response>,
    pub thresholds: Vec<f64>,
    /// The allocation that would follow the last trial.
    pub next_level: usize,
    /// Walk state for Up-and-Down based policies.
    pub walk: Option<WalkState>,
}

impl RunHistory {
    pub fn chain(&self) -> ChainData {
        ChainData {
            x: self.x.clone(),
            responses: self.responses.clone(),
        }
    }

    /// Visits per level among the first `k` trials.
    pub fn visits(&self, m: usize, k: usize) -> Vec<u32> {
        let mut v = vec![0; m];
        for &u in self.levels.iter().take(k) {
            v[u] += 1;
        }
        v
    }
}

/// Simulates run `index` of `sc`. Response `i` is yes when threshold `i`
/// is at most the administered treatment.
pub fn run_single(sc: &Scenario, index: usize) -> Result<RunHistory> {
    sc.validate()?;
    let mut engine = Engine::new(sc.policy.clone(), sc.grid.clone(), sc.start_level, run_seed(sc.seed, index, 1))?;
    let thresholds = sc.model.sample(run_seed(sc.seed, index, 0), sc.n);
    let mut levels = Vec::with_capacity(sc.n);
    let mut x = Vec::with_capacity(sc.n);
    let mut responses = Vec::with_capacity(sc.n);
    for &t in &thresholds {
        let u = engine.current_level();
        let r = Response::from_bool(t <= sc.grid.treatment(u as i64));
        levels.push(u);
        x.push(sc.grid.value(u as i64));
        responses.push(r);
        engine.record(r)?;
    }
    Ok(RunHistory {
        levels,
        x,
        responses,
        thresholds,
        next_level: engine.current_level(),
        walk: engine.walk().cloned(),
    })
}

/// Runs `0..sc.runs` in parallel, returning them in run order.
pub fn run_all(sc: &Scenario) -> Result<Vec<RunHistory>> {
    sc.validate()?;
    (0..sc.runs).into_par_iter().map(|i| run_single(sc, i)).collect()
}

/// Error summary of one estimator over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub name: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub bias: f64,
    /// Population SD over successful runs, so `mse = bias^2 + sd^2`.
    pub sd: f64,
    pub mse: f64,
    /// MSE over the asymptotic benchmark `p(1-p) / (n f(Q_p)^2)`.
    pub normalized_mse: Option<f64>,
}

/// Share of runs concentrating allocations on one level early on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gambling {
    pub trials: usize,
    pub threshold: f64,
    /// On the optimal level.
    pub correct: f64,
    /// On any other level.
    pub wrong: f64,
}

impl Gambling {
    pub fn total(&self) -> f64 {
        self.correct + self.wrong
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetrics {
    pub scenario: String,
    pub policy: String,
    pub target: f64,
    pub truth: f64,
    pub n: usize,
    pub runs: usize,
    pub estimators: Vec<EstimatorMetrics>,
    /// Allocation frequencies pooled over runs.
    pub level_freq: Vec<f64>,
    pub optimal_level: usize,
    /// Histogram (ten bins on `[0, 1]`) of the per-run allocation share at
    /// the optimal level.
    pub optimal_share_hist: Vec<f64>,
    pub gambling: Gambling,
}

impl EnsembleMetrics {
    pub fn estimator(&self, name: &str) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|e| e.name == name)
    }

    /// Empirical efficiency ratio `MSE(reference) / MSE(candidate)`.
    pub fn efficiency_ratio(&self, reference: &str, candidate: &str) -> Option<f64> {
        Some(self.estimator(reference)?.mse / self.estimator(candidate)?.mse)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,policy,estimator,n,runs,n_ok,n_failed,bias,sd,mse,normalized_mse\n");
        for e in &self.estimators {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.scenario,
                self.policy,
                e.name,
                self.n,
                self.runs,
                e.n_ok,
                e.n_failed,
                e.bias,
                e.sd,
                e.mse,
                e.normalized_mse.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        s
    }
}

/// Estimator applied to each run; the `next` pseudo-estimator reports the
/// treatment of the allocation following the last trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunEstimator {
    Named(EstimatorKind),
    NextAllocation,
}

impl RunEstimator {
    pub fn parse(name: &str, rule: Option<crate::designs::DesignRule>) -> Option<Self> {
        if name == "next" {
            return Some(RunEstimator::NextAllocation);
        }
        EstimatorKind::parse(name, rule).map(RunEstimator::Named)
    }

    pub fn label(&self) -> String {
        match self {
            RunEstimator::Named(k) => k.label(),
            RunEstimator::NextAllocation => "next".into(),
        }
    }

    fn apply(&self, sc: &Scenario, run: &RunHistory, opts: &EstimateOptions) -> Result<EstimateWithCI> {
        match self {
            RunEstimator::Named(k) => estimate(k, &run.chain(), opts),
            RunEstimator::NextAllocation => Ok(EstimateWithCI {
                point: sc.grid.value(run.next_level as i64),
                se: f64::NAN,
                df: f64::NAN,
                percentiles: Vec::new(),
                bounds: Vec::new(),
                method: "next".into(),
                warning: None,
            }),
        }
    }
}

fn default_options(sc: &Scenario, percentiles: Vec<f64>) -> EstimateOptions {
    let lv = sc.grid.levels();
    EstimateOptions {
        target: sc.target(),
        percentiles,
        ci: crate::estimators::CiOption::Poisson,
        x_bounds: Some((sc.grid.value(0), sc.grid.value(lv.len() as i64 - 1))),
    }
}

fn moments(errors: &[f64]) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / n;
    (bias, var.sqrt(), bias * bias + var)
}

/// Runs the ensemble and aggregates estimator errors and allocation
/// statistics. Per-run estimator failures are counted, not fatal.
pub fn run_ensemble(sc: &Scenario, estimators: &[RunEstimator]) -> Result<EnsembleMetrics> {
    let truth = sc.truth()?;
    let runs = run_all(sc)?;
    let opts = default_options(sc, vec![0.05, 0.95]);
    let results: Vec<Vec<Option<f64>>> = runs
        .par_iter()
        .map(|r| {
            estimators
                .iter()
                .map(|e| e.apply(sc, r, &opts).ok().map(|est| est.point))
                .collect()
        })
        .collect();
    let target = sc.target();
    let benchmark = match sc.grid.transform() {
        Transform::Identity => {
            let q = sc.model.quantile(target)?;
            let f = sc.model.pdf(q);
            (f > 0.0).then(|| target * (1.0 - target) / (sc.n as f64 * f * f))
        }
        Transform::Log => None,
    };
    let est_metrics = estimators
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let errs: Vec<f64> = results.iter().filter_map(|r| r[j]).map(|v| v - truth).collect();
            let (bias, sd, mse) = moments(&errs);
            EstimatorMetrics {
                name: e.label(),
                n_ok: errs.len(),
                n_failed: results.len() - errs.len(),
                bias,
                sd,
                mse,
                normalized_mse: benchmark.map(|b| mse / b),
            }
        })
        .collect();

    let m = sc.grid.m();
    let ustar = sc.optimal_level();
    let mut freq = vec![0.0; m];
    let mut hist = vec![0.0; 10];
    let gamble_k = sc.n.min(20);
    let (mut correct, mut wrong) = (0usize, 0usize);
    for r in &runs {
        let all = r.visits(m, sc.n);
        for (f, &v) in freq.iter_mut().zip(&all) {
            *f += v as f64;
        }
        let share = all[ustar] as f64 / sc.n as f64;
        hist[((share * 10.0) as usize).min(9)] += 1.0;
        let early = r.visits(m, gamble_k);
        let top = (0..m).max_by_key(|&u| (early[u], std::cmp::Reverse(u))).unwrap();
        if early[top] as f64 >= 0.6 * gamble_k as f64 {
            if top == ustar {
                correct += 1;
            } else {
                wrong += 1;
            }
        }
    }
    let total: f64 = freq.iter().sum();
    for f in &mut freq {
        *f /= total;
    }
    for h in &mut hist {
        *h /= runs.len() as f64;
    }
    Ok(EnsembleMetrics {
        scenario: sc.name.clone(),
        policy: sc.policy.label(),
        target,
        truth,
        n: sc.n,
        runs: sc.runs,
        estimators: est_metrics,
        level_freq: freq,
        optimal_level: ustar,
        optimal_share_hist: hist,
        gambling: Gambling {
            trials: gamble_k,
            threshold: 0.6,
            correct: correct as f64 / runs.len() as f64,
            wrong: wrong as f64 / runs.len() as f64,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub scenario: String,
    pub estimator: String,
    pub nominal: f64,
    pub coverage: f64,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_width: f64,
}

/// Fraction of runs whose two-sided interval at each nominal level
/// contains the true target percentile.
pub fn coverage_study(scenarios: &[Scenario], estimator: &EstimatorKind, nominal: &[f64]) -> Result<Vec<CoverageRow>> {
    if nominal.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
        return Err(Error::InvalidParameter {
            field: "nominal",
            reason: "levels must lie in (0, 1)".into(),
        });
    }
    let percentiles: Vec<f64> = nominal
        .iter()
        .flat_map(|&c| [(1.0 - c) / 2.0, (1.0 + c) / 2.0])
        .collect();
    let mut rows = Vec::new();
    for sc in scenarios {
        let truth = sc.truth()?;
        let opts = default_options(sc, percentiles.clone());
        let runs = run_all(sc)?;
        let ests: Vec<Option<EstimateWithCI>> = runs
            .par_iter()
            .map(|r| estimate(estimator, &r.chain(), &opts).ok())
            .collect();
        for (j, &c) in nominal.iter().enumerate() {
            let (mut hit, mut ok, mut width) = (0usize, 0usize, 0.0);
            for e in ests.iter().flatten() {
                if e.bounds.len() != percentiles.len() {
                    continue;
                }
                let (lo, hi) = (e.bounds[2 * j], e.bounds[2 * j + 1]);
                ok += 1;
                width += hi - lo;
                if lo <= truth && truth <= hi {
                    hit += 1;
                }
            }
            rows.push(CoverageRow {
                scenario: sc.name.clone(),
                estimator: estimator.label(),
                nominal: c,
                coverage: if ok > 0 { hit as f64 / ok as f64 } else { f64::NAN },
                n_ok: ok,
                n_failed: runs.len() - ok,
                mean_width: width / ok.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

/// `Pr(|X/n - p| <= delta)` for `X ~ Bin(n, p)` at each `n`, with
/// inclusive bounds.
pub fn precision_curve(p: f64, delta: f64, ns: &[usize]) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter {
            field: "p",
            reason: "p and delta must lie in (0, 1)".into(),
        });
    }
    Ok(ns
        .iter()
        .map(|&n| {
            let prob: f64 = (0..=n)
                .filter(|&x| (x as f64 / n as f64 - p).abs() <= delta + 1e-12)
                .map(|x| binom_pmf(x, n, p))
                .sum();
            (n, prob.min(1.0))
        })
        .collect())
}
