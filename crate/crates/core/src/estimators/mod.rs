//! Point and interval estimation from Up-and-Down data.
//!
//! Averaging estimators work on the treatment chain ([`ChainData`]);
//! isotonic estimators work on the per-level yes/no summary
//! ([`ResponseTable`]).

mod averaging;
mod interval;
mod isotonic;

pub use averaging::{ad_mean, averaging_estimate, imputed_chain, AdOutput, Averaging};
pub use interval::{cir_confidence, linearized_quantile, CiOption, CirOptions};
pub use isotonic::{cir, cir_forward, inverse_estimate, pava, Flavor, IsotonicFit};

use serde::{Deserialize, Serialize};

use crate::designs::history::HistoryRecord;
use crate::designs::{DesignRule, Response, TreatmentGrid, WalkState};
use crate::error::{Error, Result};

/// Per-level yes/no counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    pub levels: Vec<f64>,
    pub yes: Vec<u32>,
    pub no: Vec<u32>,
}

impl ResponseTable {
    pub fn new(levels: Vec<f64>, yes: Vec<u32>, no: Vec<u32>) -> Result<Self> {
        if levels.len() != yes.len() || levels.len() != no.len() {
            return Err(Error::LengthMismatch("levels, yes and no differ in length".into()));
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter {
                field: "levels",
                reason: "must be strictly increasing".into(),
            });
        }
        Ok(ResponseTable { levels, yes, no })
    }

    /// Tabulates treatment values and responses; only visited levels appear.
    pub fn from_pairs(x: &[f64], responses: &[Response]) -> Result<Self> {
        if x.len() != responses.len() {
            return Err(Error::LengthMismatch("treatments vs responses".into()));
        }
        let mut rows: Vec<(f64, u32, u32)> = Vec::new();
        for (&xi, r) in x.iter().zip(responses) {
            let pos = rows.iter().position(|row| row.0 == xi);
            let row = match pos {
                Some(p) => &mut rows[p],
                None => {
                    rows.push((xi, 0, 0));
                    rows.last_mut().unwrap()
                }
            };
            if r.is_yes() {
                row.1 += 1;
            } else {
                row.2 += 1;
            }
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(ResponseTable {
            levels: rows.iter().map(|r| r.0).collect(),
            yes: rows.iter().map(|r| r.1).collect(),
            no: rows.iter().map(|r| r.2).collect(),
        })
    }

    /// Tabulates level indices on `grid` (design scale), keeping a zero row for every
    /// unvisited grid level when `keep_empty` is set.
    pub fn from_levels(
        grid: &TreatmentGrid,
        levels: &[i64],
        responses: &[Response],
        keep_empty: bool,
    ) -> Result<Self> {
        let x: Vec<f64> = levels.iter().map(|&l| grid.value(l)).collect();
        let mut t = Self::from_pairs(&x, responses)?;
        if keep_empty {
            for &g in grid.levels() {
                if !t.levels.iter().any(|&l| (l - g).abs() < 1e-12) {
                    let at = t.levels.partition_point(|&l| l < g);
                    t.levels.insert(at, g);
                    t.yes.insert(at, 0);
                    t.no.insert(at, 0);
                }
            }
        }
        Ok(t)
    }

    pub fn from_state(state: &WalkState, keep_empty: bool) -> Result<Self> {
        Self::from_levels(state.grid(), &state.levels(), &state.responses(), keep_empty)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn n(&self, u: usize) -> u32 {
        self.yes[u] + self.no[u]
    }

    pub fn total(&self) -> u32 {
        (0..self.len()).map(|u| self.n(u)).sum()
    }

    /// `yes/n` per level, `None` where nothing was observed.
    pub fn f_hat(&self) -> Vec<Option<f64>> {
        (0..self.len())
            .map(|u| {
                let n = self.n(u);
                (n > 0).then(|| self.yes[u] as f64 / n as f64)
            })
            .collect()
    }

    /// Rows with at least one observation.
    pub fn observed(&self) -> ResponseTable {
        let keep: Vec<usize> = (0..self.len()).filter(|&u| self.n(u) > 0).collect();
        ResponseTable {
            levels: keep.iter().map(|&u| self.levels[u]).collect(),
            yes: keep.iter().map(|&u| self.yes[u]).collect(),
            no: keep.iter().map(|&u| self.no[u]).collect(),
        }
    }

    /// Reads `level,yes,no` CSV (header required).
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            level: f64,
            yes: u32,
            no: u32,
        }
        let mut rd = csv::Reader::from_reader(r);
        let (mut levels, mut yes, mut no) = (vec![], vec![], vec![]);
        for (i, row) in rd.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                line: i + 2,
                reason: e.to_string(),
            })?;
            levels.push(row.level);
            yes.push(row.yes);
            no.push(row.no);
        }
        Self::new(levels, yes, no)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("level,yes,no\n");
        for u in 0..self.len() {
            s.push_str(&format!("{},{},{}\n", self.levels[u], self.yes[u], self.no[u]));
        }
        s
    }
}

/// Treatment chain with responses, as used by averaging estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainData {
    pub x: Vec<f64>,
    pub responses: Vec<Response>,
}

impl ChainData {
    pub fn new(x: Vec<f64>, responses: Vec<Response>) -> Result<Self> {
        if x.len() != responses.len() {
            return Err(Error::LengthMismatch("treatments vs responses".into()));
        }
        Ok(ChainData { x, responses })
    }

    pub fn from_state(state: &WalkState) -> Self {
        ChainData {
            x: state.treatments(),
            responses: state.responses(),
        }
    }

    pub fn from_records(records: &[HistoryRecord]) -> Self {
        ChainData {
            x: records.iter().map(|r| r.treatment).collect(),
            responses: records.iter().map(|r| r.response).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn table(&self) -> Result<ResponseTable> {
        ResponseTable::from_pairs(&self.x, &self.responses)
    }
}

/// A point estimate with its uncertainty summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithCI {
    pub point: f64,
    pub se: f64,
    pub df: f64,
    pub percentiles: Vec<f64>,
    /// One bound per requested percentile.
    pub bounds: Vec<f64>,
    pub method: String,
    pub warning: Option<String>,
}

impl EstimateWithCI {
    /// `(lo, hi)` from the first and last requested percentile.
    pub fn interval(&self) -> Option<(f64, f64)> {
        Some((*self.bounds.first()?, *self.bounds.last()?))
    }
}

/// Named estimators shared by the CLI, the service and the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorKind {
    Averaging(Averaging),
    /// Isotonic regression inverse (point only).
    Ir,
    /// Centered isotonic regression inverse with a linearized interval.
    Cir,
}

impl EstimatorKind {
    /// Parses `wbar`, `w`, `v`, `ad`, `gw`, `ir` or `cir`. `gw` uses `rule`
    /// (default SU&D) to estimate the convergence rate.
    pub fn parse(name: &str, rule: Option<DesignRule>) -> Option<Self> {
        Some(match name {
            "wbar" => EstimatorKind::Averaging(Averaging::Wbar),
            "w" => EstimatorKind::Averaging(Averaging::ReversalOnly { r: 1 }),
            "v" => EstimatorKind::Averaging(Averaging::AllFromReversal { r: 1 }),
            "ad" => EstimatorKind::Averaging(Averaging::AutoDetect {
                safe_fraction: 0.25,
                before: true,
            }),
            "gw" => EstimatorKind::Averaging(Averaging::GeomWeighted {
                accel: 1.2,
                rule: rule.unwrap_or_else(DesignRule::sud),
            }),
            "ir" => EstimatorKind::Ir,
            "cir" => EstimatorKind::Cir,
            _ => return None,
        })
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorKind::Averaging(a) => a.label(),
            EstimatorKind::Ir => "ir".into(),
            EstimatorKind::Cir => "cir".into(),
        }
    }

    /// Whether the estimate depends on the response table only.
    pub fn is_isotonic(&self) -> bool {
        matches!(self, EstimatorKind::Ir | EstimatorKind::Cir)
    }
}

/// Settings for [`estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub target: f64,
    pub percentiles: Vec<f64>,
    pub ci: CiOption,
    /// Range used for isotonic boundary anchors; defaults to `(0, 1)`.
    pub x_bounds: Option<(f64, f64)>,
}

impl EstimateOptions {
    pub fn new(target: f64) -> Self {
        EstimateOptions {
            target,
            percentiles: vec![0.025, 0.975],
            ci: CiOption::Poisson,
            x_bounds: None,
        }
    }
}

/// Runs a named estimator on a treatment chain.
pub fn estimate(kind: &EstimatorKind, chain: &ChainData, opts: &EstimateOptions) -> Result<EstimateWithCI> {
    match kind {
        EstimatorKind::Averaging(a) => averaging_estimate(chain, a, &opts.percentiles),
        _ => estimate_table(kind, &chain.table()?, opts),
    }
}

/// Runs an isotonic estimator on a response table.
pub fn estimate_table(kind: &EstimatorKind, table: &ResponseTable, opts: &EstimateOptions) -> Result<EstimateWithCI> {
    let cir_opts = CirOptions {
        option: opts.ci,
        percentiles: opts.percentiles.clone(),
        x_bounds: opts.x_bounds.unwrap_or((0.0, 1.0)),
        y_bounds: (0.0, 1.0),
    };
    match kind {
        EstimatorKind::Cir => cir_confidence(table, opts.target, &cir_opts),
        EstimatorKind::Ir => {
            let obs = table.observed();
            if obs.is_empty() {
                return Err(Error::InsufficientData("response table has no observations".into()));
            }
            let y: Vec<f64> = obs.f_hat().into_iter().map(|v| v.unwrap()).collect();
            let w: Vec<f64> = (0..obs.len()).map(|u| obs.n(u) as f64).collect();
            let fit = pava(&y, &obs.levels, &w)?;
            let point = inverse_estimate(&fit, opts.target, cir_opts.x_bounds, cir_opts.y_bounds)?;
            Ok(EstimateWithCI {
                point,
                se: f64::NAN,
                df: f64::NAN,
                percentiles: Vec::new(),
                bounds: Vec::new(),
                method: "ir".into(),
                warning: Some("no interval method for IR".into()),
            })
        }
        EstimatorKind::Averaging(_) => Err(Error::Unsupported(
            "averaging estimators need the treatment chain".into(),
        )),
    }
}

pub(crate) fn check_percentiles(p: &[f64]) -> Result<()> {
    if p.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
        return Err(Error::InvalidParameter {
            field: "percentiles",
            reason: "each must lie strictly inside (0, 1)".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
