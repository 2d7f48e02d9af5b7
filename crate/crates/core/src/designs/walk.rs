use serde::{Deserialize, Serialize};

use super::{detect_reversals, BoundaryPolicy, DesignRule, Orientation, Response, ReversalIndex, TreatmentGrid, Variant};
use crate::error::{Error, Result};

/// One recorded trial. `level` is the administered level index and
/// `virtual_level` the walk position (they differ only under layover).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub level: i64,
    pub virtual_level: i64,
    pub response: Response,
    pub draw: Option<f64>,
    /// KR: same-level no-streak counter; GU&D: position within cohort.
    pub tau: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "j", rename_all = "snake_case")]
pub enum DownshiftTrigger {
    NthReversal(usize),
    NthHit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DownshiftOutcome {
    Shifted {
        state: WalkState,
        /// Zero-based index of the first trial on the refined grid.
        effective_from: usize,
    },
    NotTriggered,
}

/// State of a running Up-and-Down experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkState {
    grid: TreatmentGrid,
    rule: DesignRule,
    start: i64,
    position: i64,
    tau: u32,
    cohort: Vec<Response>,
    history: Vec<Trial>,
}

impl WalkState {
    pub fn new(grid: TreatmentGrid, rule: DesignRule, start: usize) -> Result<Self> {
        let rule = rule.validated()?;
        if start >= grid.m() {
            return Err(Error::InvalidParameter {
                field: "start",
                reason: format!("start level {start} outside 0..{}", grid.m()),
            });
        }
        Ok(WalkState {
            grid,
            rule,
            start: start as i64,
            position: start as i64,
            tau: 0,
            cohort: Vec::new(),
            history: Vec::new(),
        })
    }

    /// Rebuilds a state by feeding a recorded (response, draw) stream.
    pub fn replay(
        grid: TreatmentGrid,
        rule: DesignRule,
        start: usize,
        events: impl IntoIterator<Item = (Response, Option<f64>)>,
    ) -> Result<Self> {
        let mut s = Self::new(grid, rule, start)?;
        for (r, d) in events {
            s.next_allocation(r, d)?;
        }
        Ok(s)
    }

    pub fn grid(&self) -> &TreatmentGrid {
        &self.grid
    }

    pub fn rule(&self) -> &DesignRule {
        &self.rule
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    pub fn history(&self) -> &[Trial] {
        &self.history
    }

    pub fn n(&self) -> usize {
        self.history.len()
    }

    pub fn tau(&self) -> u32 {
        self.tau
    }

    pub fn cohort(&self) -> &[Response] {
        &self.cohort
    }

    /// Walk position of the next trial (may be off-grid under layover).
    pub fn virtual_level(&self) -> i64 {
        self.position
    }

    /// Level administered at the next trial.
    pub fn current_level(&self) -> i64 {
        match self.grid.policy() {
            BoundaryPolicy::Layover => self.grid.clamp(self.position),
            _ => self.position,
        }
    }

    pub fn levels(&self) -> Vec<i64> {
        self.history.iter().map(|t| t.level).collect()
    }

    pub fn responses(&self) -> Vec<Response> {
        self.history.iter().map(|t| t.response).collect()
    }

    /// Administered design-scale values.
    pub fn treatments(&self) -> Vec<f64> {
        self.history.iter().map(|t| self.grid.value(t.level)).collect()
    }

    /// Walk-position values, used by averaging estimators.
    pub fn virtual_treatments(&self) -> Vec<f64> {
        self.history
            .iter()
            .map(|t| self.grid.value(t.virtual_level))
            .collect()
    }

    pub fn reversals(&self) -> ReversalIndex {
        detect_reversals(&self.responses())
    }

    /// Whether recording `response` requires a randomization draw.
    pub fn needs_draw(&self, response: Response) -> bool {
        matches!(self.rule.variant, Variant::Bcd { .. }) && !self.effective(response).is_yes()
    }

    fn effective(&self, r: Response) -> Response {
        match self.rule.orientation {
            Orientation::BelowMedian => r,
            Orientation::AboveMedian => r.flipped(),
        }
    }

    /// Records a response at the current level and moves the walk.
    /// Returns the next administered level index.
    pub fn next_allocation(&mut self, response: Response, draw: Option<f64>) -> Result<i64> {
        let eff = self.effective(response);
        if self.needs_draw(response) {
            match draw {
                None => {
                    return Err(Error::Contract(
                        "biased-coin design needs a draw after a `no`".into(),
                    ))
                }
                Some(d) if !(0.0..=1.0).contains(&d) => {
                    return Err(Error::Contract(format!("draw {d} outside [0, 1]")))
                }
                _ => {}
            }
        }
        let tau_now = match self.rule.variant {
            Variant::Gud { .. } => self.cohort.len() as u32,
            _ => self.tau,
        };
        self.history.push(Trial {
            level: self.current_level(),
            virtual_level: self.position,
            response,
            draw,
            tau: tau_now,
        });

        let mut step: i64 = match self.rule.variant {
            Variant::Sud => {
                if eff.is_yes() {
                    -1
                } else {
                    1
                }
            }
            Variant::Bcd { gamma } => {
                if eff.is_yes() {
                    -1
                } else if draw.unwrap() < gamma / (1.0 - gamma) {
                    1
                } else {
                    0
                }
            }
            Variant::Kr { k } => {
                if eff.is_yes() {
                    self.tau = 0;
                    -1
                } else if self.tau + 1 >= k {
                    self.tau = 0;
                    1
                } else {
                    self.tau += 1;
                    0
                }
            }
            Variant::Gud { k, a, b } => {
                self.cohort.push(eff);
                if self.cohort.len() < k as usize {
                    0
                } else {
                    let yes = self.cohort.iter().filter(|r| r.is_yes()).count() as u32;
                    self.cohort.clear();
                    if yes <= a {
                        1
                    } else if yes >= b {
                        -1
                    } else {
                        0
                    }
                }
            }
        };
        if self.rule.orientation == Orientation::AboveMedian {
            step = -step;
        }
        let next = self.position + step;
        self.position = match self.grid.policy() {
            BoundaryPolicy::Reflecting => self.grid.clamp(next),
            BoundaryPolicy::Layover | BoundaryPolicy::Unbounded => next,
        };
        Ok(self.current_level())
    }

    /// Level that would follow `response`, without changing the state.
    pub fn preview(&self, response: Response, draw: Option<f64>) -> Result<i64> {
        self.clone().next_allocation(response, draw)
    }

    /// Moves the walk to `level` (e.g. after an external override).
    pub fn relocate(&mut self, level: i64) {
        if level != self.position {
            self.tau = 0;
            self.cohort.clear();
        }
        self.position = level;
    }

    /// Zero-based indices of KR base-state trials (counter at zero).
    pub fn zero_state_subchain(&self) -> Result<Vec<usize>> {
        if self.rule.kr_k().is_none() {
            return Err(Error::Unsupported(
                "base-state subchain is defined for k-in-a-row only".into(),
            ));
        }
        Ok(self
            .history
            .iter()
            .enumerate()
            .filter(|(_, t)| t.tau == 0)
            .map(|(i, _)| i)
            .collect())
    }

    /// Halves the spacing once the trigger has fired. The rule (including
    /// k) is kept fixed across the shift.
    pub fn downshift(&self, trigger: DownshiftTrigger) -> DownshiftOutcome {
        let fired_at = match trigger {
            DownshiftTrigger::NthReversal(j) => {
                if j == 0 {
                    None
                } else {
                    self.reversals().positions.get(j - 1).copied()
                }
            }
            DownshiftTrigger::NthHit(j) => {
                let mut counts = std::collections::HashMap::new();
                self.history.iter().position(|t| {
                    let c = counts.entry(t.level).or_insert(0usize);
                    *c += 1;
                    j > 0 && *c == j
                })
            }
        };
        let Some(at) = fired_at else {
            return DownshiftOutcome::NotTriggered;
        };
        let mut state = self.clone();
        state.grid = self.grid.halved();
        state.start *= 2;
        state.position *= 2;
        for t in &mut state.history {
            t.level *= 2;
            t.virtual_level *= 2;
        }
        DownshiftOutcome::Shifted {
            state,
            effective_from: at + 1,
        }
    }
}
