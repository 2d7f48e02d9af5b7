//! One allocation interface over Up-and-Down rules, CRM, CCD and the BUD
//! hybrids, used by the simulator and the trial service.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    c_bud_choice, ccd_allocate, ccd_bud_choice, ccd_window, crm_allocate, posterior_summary, r_bud_choice,
    CrmModel, CrmRule, OppositeRule, PosteriorSummary, QuadConfig,
};
use crate::designs::{BoundaryPolicy, DesignRule, Response, TreatmentGrid, WalkState};
use crate::error::{Error, Result};
use crate::estimators::ResponseTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrmConfig {
    pub model: CrmModel,
    pub rule: CrmRule,
    #[serde(default)]
    pub constrained: bool,
    pub target: f64,
    #[serde(default)]
    pub quad: QuadConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcdConfig {
    pub target: f64,
    /// `(Delta_1, Delta_2)`; defaults to the tabulated half-width both sides.
    pub window: Option<(f64, f64)>,
}

impl CcdConfig {
    pub fn new(target: f64) -> Self {
        CcdConfig { target, window: None }
    }

    pub fn window(&self) -> (f64, f64) {
        self.window.unwrap_or_else(|| {
            let d = ccd_window(self.target);
            (d, d)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BudKind {
    /// Credible BUD with left/right tail levels and a pure U&D burn-in.
    CBud {
        crm: CrmConfig,
        beta: (f64, f64),
        opposite: OppositeRule,
        #[serde(default)]
        burn_in: usize,
    },
    /// Randomized BUD with prior weight `n0`.
    RBud { crm: CrmConfig, n0: f64 },
    /// U&D with CCD overrides through exact binomial intervals.
    CcdBud {
        ccd: CcdConfig,
        beta: f64,
        opposite: OppositeRule,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Policy {
    UpDown { rule: DesignRule },
    Crm(CrmConfig),
    Ccd(CcdConfig),
    Bud { rule: DesignRule, bud: BudKind },
}

impl Policy {
    pub fn target(&self) -> f64 {
        match self {
            Policy::UpDown { rule } => rule.target(),
            Policy::Crm(c) => c.target,
            Policy::Ccd(c) => c.target,
            Policy::Bud { bud, .. } => match bud {
                BudKind::CBud { crm, .. } | BudKind::RBud { crm, .. } => crm.target,
                BudKind::CcdBud { ccd, .. } => ccd.target,
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::UpDown { rule } => rule.label(),
            Policy::Crm(c) => format!("crm-{}", rule_label(c.rule)),
            Policy::Ccd(_) => "ccd".into(),
            Policy::Bud { rule, bud } => match bud {
                BudKind::CBud { .. } => format!("cbud-{}", rule.label()),
                BudKind::RBud { .. } => format!("rbud-{}", rule.label()),
                BudKind::CcdBud { .. } => format!("ccdbud-{}", rule.label()),
            },
        }
    }

    fn walk_rule(&self) -> Option<DesignRule> {
        match self {
            Policy::UpDown { rule } | Policy::Bud { rule, .. } => Some(*rule),
            _ => None,
        }
    }
}

fn rule_label(r: CrmRule) -> &'static str {
    match r {
        CrmRule::ClosestTreatment => "closest-treatment",
        CrmRule::ClosestResponse => "closest-response",
        CrmRule::JustUnder => "just-under",
        CrmRule::Ewoc { .. } => "ewoc",
    }
}

/// Uniform draws consumed by one trial: `coin` drives biased-coin moves,
/// `gate` drives randomized overrides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    pub coin: f64,
    pub gate: f64,
}

/// Seeded design-randomization stream; two uniforms per trial.
#[derive(Debug, Clone)]
pub struct DesignStream(ChaCha8Rng);

impl DesignStream {
    pub fn new(seed: u64) -> Self {
        DesignStream(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next_draws(&mut self) -> Draws {
        Draws {
            coin: self.0.random(),
            gate: self.0.random(),
        }
    }
}

/// Outcome of one allocation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub level: usize,
    pub ud_choice: Option<usize>,
    pub model_choice: Option<usize>,
    pub overridden: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineTrial {
    pub level: usize,
    pub response: Response,
    pub draws: Draws,
}

/// Running allocation state for any [`Policy`].
#[derive(Debug, Clone)]
pub struct Engine {
    policy: Policy,
    grid: TreatmentGrid,
    walk: Option<WalkState>,
    current: usize,
    trials: Vec<EngineTrial>,
    yes: Vec<u32>,
    no: Vec<u32>,
    stream: DesignStream,
    posterior: Option<PosteriorSummary>,
    last: Option<Decision>,
}

const DIAGNOSTIC_PROBS: [f64; 3] = [0.1, 0.5, 0.9];

impl Engine {
    pub fn new(policy: Policy, grid: TreatmentGrid, start: usize, seed: u64) -> Result<Self> {
        let m = grid.m();
        if start >= m {
            return Err(Error::InvalidParameter {
                field: "start",
                reason: format!("start level {start} outside 0..{m}"),
            });
        }
        let walk = match policy.walk_rule() {
            Some(rule) => Some(WalkState::new(grid.clone(), rule, start)?),
            None => None,
        };
        if !matches!(policy, Policy::UpDown { .. }) && grid.policy() != BoundaryPolicy::Reflecting {
            return Err(Error::InvalidParameter {
                field: "grid",
                reason: "model-based policies need a reflecting grid".into(),
            });
        }
        let crm = match &policy {
            Policy::Crm(c) => Some(c),
            Policy::Bud {
                bud: BudKind::CBud { crm, .. } | BudKind::RBud { crm, .. },
                ..
            } => Some(crm),
            _ => None,
        };
        if let Some(c) = crm {
            let values: Vec<f64> = (0..m as i64).map(|u| grid.value(u)).collect();
            let scale = values.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
            if c.model.levels.len() != m
                || c.model.levels.iter().zip(&values).any(|(a, b)| (a - b).abs() > 1e-9 * scale)
            {
                return Err(Error::InvalidParameter {
                    field: "model",
                    reason: "model levels must equal the grid values".into(),
                });
            }
        }
        Ok(Engine {
            policy,
            grid,
            walk,
            current: start,
            trials: Vec::new(),
            yes: vec![0; m],
            no: vec![0; m],
            stream: DesignStream::new(seed),
            posterior: None,
            last: None,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn grid(&self) -> &TreatmentGrid {
        &self.grid
    }

    /// Level index for the next trial.
    pub fn current_level(&self) -> usize {
        self.current
    }

    pub fn n(&self) -> usize {
        self.trials.len()
    }

    pub fn trials(&self) -> &[EngineTrial] {
        &self.trials
    }

    pub fn walk(&self) -> Option<&WalkState> {
        self.walk.as_ref()
    }

    /// Posterior from the most recent model-based step, if any.
    pub fn posterior(&self) -> Option<&PosteriorSummary> {
        self.posterior.as_ref()
    }

    pub fn last_decision(&self) -> Option<&Decision> {
        self.last.as_ref()
    }

    /// Counts per grid level, including unvisited levels.
    pub fn table(&self) -> ResponseTable {
        ResponseTable {
            levels: (0..self.grid.m() as i64).map(|u| self.grid.value(u)).collect(),
            yes: self.yes.clone(),
            no: self.no.clone(),
        }
    }

    /// Whether `response` would trigger a biased-coin draw.
    pub fn needs_coin(&self, response: Response) -> bool {
        self.walk.as_ref().is_some_and(|w| w.needs_draw(response))
    }

    /// Draws the next trial would consume, without advancing the stream.
    pub fn peek_draws(&self) -> Draws {
        self.stream.clone().next_draws()
    }

    /// Moves the next trial to `level`, e.g. after a protocol deviation.
    pub fn relocate(&mut self, level: usize) -> Result<()> {
        if level >= self.grid.m() {
            return Err(Error::InvalidParameter {
                field: "level",
                reason: format!("level {level} outside 0..{}", self.grid.m()),
            });
        }
        self.current = level;
        if let Some(w) = self.walk.as_mut() {
            w.relocate(level as i64);
        }
        Ok(())
    }

    /// Records `response` using the engine's own design stream.
    pub fn record(&mut self, response: Response) -> Result<Decision> {
        let draws = self.stream.clone().next_draws();
        let d = self.record_with(response, draws)?;
        self.stream.next_draws();
        Ok(d)
    }

    /// Next allocation for `response` without changing the state.
    pub fn preview(&self, response: Response) -> Result<Decision> {
        self.clone().record(response)
    }

    /// Records `response` with explicit draws.
    pub fn record_with(&mut self, response: Response, draws: Draws) -> Result<Decision> {
        if !(0.0..=1.0).contains(&draws.coin) || !(0.0..=1.0).contains(&draws.gate) {
            return Err(Error::Contract("draws must lie in [0, 1]".into()));
        }
        if matches!(self.policy, Policy::UpDown { .. }) {
            // Walk steps cannot fail once draws are valid.
            return self.step(response, draws);
        }
        let mut next = self.clone();
        let d = next.step(response, draws)?;
        *self = next;
        Ok(d)
    }

    fn step(&mut self, response: Response, draws: Draws) -> Result<Decision> {
        let u = self.current;
        if response.is_yes() {
            self.yes[u] += 1;
        } else {
            self.no[u] += 1;
        }
        self.trials.push(EngineTrial {
            level: u,
            response,
            draws,
        });
        let m = self.grid.m();
        let ud = match self.walk.as_mut() {
            Some(w) => {
                let coin = w.needs_draw(response).then_some(draws.coin);
                let lvl = w.next_allocation(response, coin)?;
                Some(lvl.clamp(0, m as i64 - 1) as usize)
            }
            None => None,
        };
        let n = self.trials.len();
        let decision = match self.policy.clone() {
            Policy::UpDown { .. } => Decision {
                level: ud.unwrap(),
                ud_choice: ud,
                model_choice: None,
                overridden: false,
            },
            Policy::Crm(c) => {
                let b = self.crm_choice(&c, u)?;
                Decision {
                    level: b,
                    ud_choice: None,
                    model_choice: Some(b),
                    overridden: false,
                }
            }
            Policy::Ccd(c) => {
                let b = ccd_allocate(&self.table(), u, c.target, c.window())?;
                Decision {
                    level: b,
                    ud_choice: None,
                    model_choice: Some(b),
                    overridden: false,
                }
            }
            Policy::Bud { bud, .. } => {
                let ud = ud.unwrap();
                match bud {
                    BudKind::CBud {
                        crm,
                        beta,
                        opposite,
                        burn_in,
                    } => {
                        if n < burn_in {
                            Decision {
                                level: ud,
                                ud_choice: Some(ud),
                                model_choice: None,
                                overridden: false,
                            }
                        } else {
                            let b = self.crm_choice(&crm, u)?;
                            let post = self.posterior.as_ref().expect("posterior just computed");
                            let levels = &crm.model.levels;
                            let d = c_bud_choice(u, ud, b, levels, self.grid.spacing(), beta, opposite, |a, z| {
                                Ok((post.qp_quantile(a), post.qp_quantile(z)))
                            })?;
                            Decision {
                                level: d.level,
                                ud_choice: Some(ud),
                                model_choice: Some(b),
                                overridden: d.overridden,
                            }
                        }
                    }
                    BudKind::RBud { crm, n0 } => {
                        let prob = n as f64 / (n as f64 + n0);
                        if draws.gate < prob {
                            let b = self.crm_choice(&crm, u)?;
                            let d = r_bud_choice(ud, b, n, n0, draws.gate);
                            Decision {
                                level: d.level,
                                ud_choice: Some(ud),
                                model_choice: Some(b),
                                overridden: d.overridden,
                            }
                        } else {
                            Decision {
                                level: ud,
                                ud_choice: Some(ud),
                                model_choice: None,
                                overridden: false,
                            }
                        }
                    }
                    BudKind::CcdBud { ccd, beta, opposite } => {
                        let table = self.table();
                        let b = ccd_allocate(&table, u, ccd.target, ccd.window())?;
                        let d = ccd_bud_choice(&table, u, ud, b, ccd.target, beta, opposite)?;
                        Decision {
                            level: d.level,
                            ud_choice: Some(ud),
                            model_choice: Some(b),
                            overridden: d.overridden,
                        }
                    }
                }
            }
        };
        if let Some(w) = self.walk.as_mut() {
            if w.current_level() != decision.level as i64 {
                w.relocate(decision.level as i64);
            }
        }
        self.current = decision.level;
        self.last = Some(decision);
        Ok(decision)
    }

    fn crm_choice(&mut self, c: &CrmConfig, current: usize) -> Result<usize> {
        let post = posterior_summary(&c.model, &self.table(), c.target, &DIAGNOSTIC_PROBS, &c.quad)?;
        let b = crm_allocate(&post, c.rule, &c.model.levels, current, c.constrained)?;
        self.posterior = Some(post);
        Ok(b)
    }
}
