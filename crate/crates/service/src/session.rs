use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use updown_core::designs::Variant;
use updown_core::engine::{Decision, Draws};
use updown_core::estimators::{ad_mean, estimate, imputed_chain, CiOption, EstimateOptions};
use updown_core::{BoundaryPolicy, ChainData, Engine, EstimateWithCI, EstimatorKind, Policy, Response};

use crate::config::{parse_estimator, TrialConfig};
use crate::error::ApiError;

pub const EXPORT_FORMAT: &str = "updown-session";
pub const EXPORT_VERSION: u32 = 1;

/// One line of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        id: String,
        created_at: DateTime<Utc>,
        config: TrialConfig,
    },
    /// A response observed at the recommended level.
    Response {
        seq: usize,
        level: usize,
        response: Response,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        at: DateTime<Utc>,
    },
    /// A response observed at a level other than the recommendation.
    Deviation {
        seq: usize,
        recommended: usize,
        level: usize,
        response: Response,
        note: String,
        at: DateTime<Utc>,
    },
}

/// Portable session file: configuration plus the trial events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDoc {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub config: TrialConfig,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
}

/// Body of `POST /trials/{id}/responses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseRequest {
    pub response: Response,
    #[serde(default)]
    pub note: Option<String>,
    /// 1-based number of the trial being reported; rejected unless it is
    /// the next one.
    #[serde(default)]
    pub trial: Option<usize>,
    /// Level actually administered.
    #[serde(default)]
    pub level: Option<usize>,
    /// Marks `level` as a protocol deviation from the recommendation.
    #[serde(default)]
    pub deviation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recommendation {
    pub level: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorDiag {
    pub target: f64,
    pub qp_mean: f64,
    pub probs: Vec<f64>,
    pub qp_quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n: usize,
    pub reversals: usize,
    /// 1-based first trial of the auto-detected averaging window.
    pub ad_cutoff: Option<usize>,
    pub ad_mean: Option<f64>,
    /// Advisory only: the auto-detect cutoff has fallen to `n/3` or below.
    pub ad_stop_suggested: Option<bool>,
    pub posterior: Option<PosteriorDiag>,
    pub last_decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialView {
    pub trial: usize,
    pub level: usize,
    pub value: f64,
    pub response: Response,
    pub recommended: usize,
    pub deviation: bool,
    pub note: Option<String>,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub status: SessionStatus,
    pub policy: String,
    pub target: f64,
    pub n: usize,
    pub n_max: Option<usize>,
    pub config: TrialConfig,
    pub trials: Vec<TrialView>,
    pub recommendation: Recommendation,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordReply {
    pub trial: usize,
    pub status: SessionStatus,
    pub recommendation: Recommendation,
    pub decision: Decision,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Outcome {
    pub level: usize,
    pub value: f64,
    pub probability: f64,
}

/// Next allocation after one hypothetical response.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Branch {
    pub response: Response,
    /// Fixed next level; `None` when a biased coin decides.
    pub level: Option<usize>,
    pub value: Option<f64>,
    pub overridden: bool,
    /// Probability that the coin moves the walk, when one is tossed.
    pub move_probability: Option<f64>,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhatIf {
    pub n: usize,
    pub current: Recommendation,
    pub yes: Branch,
    pub no: Branch,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateEntry {
    pub estimator: String,
    pub result: Option<EstimateWithCI>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatesReport {
    pub status: &'static str,
    pub n: usize,
    pub target: f64,
    pub ci: CiOption,
    pub conf: f64,
    pub estimates: Vec<EstimateEntry>,
}

/// Parsed `/estimates` query.
#[derive(Debug, Clone, Default)]
pub struct EstimatesQuery {
    pub target: Option<f64>,
    pub estimators: Option<Vec<String>>,
    pub ci: Option<CiOption>,
    pub conf: Option<f64>,
}

/// A trial's configuration, engine and event history.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    created_at: DateTime<Utc>,
    config: TrialConfig,
    engine: Engine,
    events: Vec<Event>,
    status: SessionStatus,
}

impl Session {
    /// Starts a session; `config.seed` must already be set.
    pub fn create(id: String, created_at: DateTime<Utc>, config: TrialConfig) -> Result<Self, ApiError> {
        let engine = config.engine()?;
        Ok(Session {
            id,
            created_at,
            config,
            engine,
            events: Vec::new(),
            status: SessionStatus::Active,
        })
    }

    /// Rebuilds a session by replaying an export.
    pub fn from_export(doc: ExportDoc) -> Result<Self, ApiError> {
        if doc.format != EXPORT_FORMAT || doc.version != EXPORT_VERSION {
            return Err(ApiError::bad_request(format!(
                "unsupported session file `{}` version {}",
                doc.format, doc.version
            ))
            .with_field("format"));
        }
        let mut s = Session::create(doc.id, doc.created_at, doc.config)?;
        for ev in doc.events {
            s.apply(ev)?;
        }
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn created_event(&self) -> Event {
        Event::Created {
            id: self.id.clone(),
            created_at: self.created_at,
            config: self.config.clone(),
        }
    }

    pub fn export(&self) -> ExportDoc {
        ExportDoc {
            format: EXPORT_FORMAT.into(),
            version: EXPORT_VERSION,
            id: self.id.clone(),
            created_at: self.created_at,
            config: self.config.clone(),
            events: self.events.clone(),
        }
    }

    fn recommendation(&self) -> Recommendation {
        let level = self.engine.current_level();
        Recommendation {
            level,
            value: self.engine.grid().value(level as i64),
        }
    }

    fn require_active(&self) -> Result<(), ApiError> {
        match self.status {
            SessionStatus::Active => Ok(()),
            SessionStatus::Completed => Err(ApiError::conflict(
                "trial_completed",
                format!("trial `{}` reached its sample size", self.id),
            )),
        }
    }

    /// Validates a response request and turns it into the event to log.
    pub fn prepare(&self, req: &ResponseRequest, at: DateTime<Utc>) -> Result<Event, ApiError> {
        self.require_active()?;
        let seq = self.engine.n() + 1;
        if let Some(t) = req.trial {
            if t != seq {
                return Err(ApiError::conflict(
                    "trial_mismatch",
                    format!("response is for trial {t} but the next trial is {seq}"),
                )
                .with_field("trial"));
            }
        }
        let recommended = self.engine.current_level();
        let note = req.note.clone().filter(|n| !n.trim().is_empty());
        if req.deviation {
            let level = req
                .level
                .ok_or_else(|| ApiError::bad_request("a deviation must state the administered level").with_field("level"))?;
            if level >= self.engine.grid().m() {
                return Err(ApiError::bad_request(format!("level {level} is not on the grid")).with_field("level"));
            }
            if level == recommended {
                return Err(ApiError::bad_request("deviation level equals the recommendation").with_field("level"));
            }
            let note = note.ok_or_else(|| ApiError::bad_request("a deviation needs a note").with_field("note"))?;
            return Ok(Event::Deviation {
                seq,
                recommended,
                level,
                response: req.response,
                note,
                at,
            });
        }
        if let Some(level) = req.level {
            if level != recommended {
                return Err(ApiError::conflict(
                    "level_mismatch",
                    format!("recommended level is {recommended}; set `deviation` to record level {level}"),
                )
                .with_field("level"));
            }
        }
        Ok(Event::Response {
            seq,
            level: recommended,
            response: req.response,
            note,
            at,
        })
    }

    /// Applies one trial event; the session is unchanged on error.
    pub fn apply(&mut self, ev: Event) -> Result<Decision, ApiError> {
        self.require_active()?;
        let seq = self.engine.n() + 1;
        let mut engine = self.engine.clone();
        let (ev_seq, response) = match &ev {
            Event::Created { .. } => return Err(ApiError::internal("duplicate creation event")),
            Event::Response { seq, level, response, .. } => {
                if *level != engine.current_level() {
                    return Err(ApiError::internal(format!(
                        "event for trial {seq} at level {level} disagrees with recommendation {}",
                        engine.current_level()
                    )));
                }
                (*seq, *response)
            }
            Event::Deviation {
                seq,
                recommended,
                level,
                response,
                ..
            } => {
                if *recommended != engine.current_level() {
                    return Err(ApiError::internal(format!(
                        "deviation at trial {seq} names recommendation {recommended}, engine has {}",
                        engine.current_level()
                    )));
                }
                engine.relocate(*level).map_err(ApiError::from_engine)?;
                (*seq, *response)
            }
        };
        if ev_seq != seq {
            return Err(ApiError::internal(format!("event numbered {ev_seq}, expected {seq}")));
        }
        let d = engine.record(response).map_err(ApiError::from_engine)?;
        self.engine = engine;
        self.events.push(ev);
        if self.config.n_max.is_some_and(|n| self.engine.n() >= n) {
            self.status = SessionStatus::Completed;
        }
        Ok(d)
    }

    fn chain(&self) -> ChainData {
        let grid = self.engine.grid();
        let t = self.engine.trials();
        ChainData {
            x: t.iter().map(|t| grid.value(t.level as i64)).collect(),
            responses: t.iter().map(|t| t.response).collect(),
        }
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let chain = self.chain();
        let n = chain.x.len();
        let reversals = chain.responses.windows(2).filter(|w| w[0] != w[1]).count();
        let ad = ad_mean(&chain.x, true, n as f64 / 4.0).ok();
        let posterior = self.engine.posterior().map(|p| PosteriorDiag {
            target: p.target,
            qp_mean: p.qp_mean,
            probs: p.probs.clone(),
            qp_quantiles: p.qp_quantiles.clone(),
        });
        Diagnostics {
            n,
            reversals,
            ad_cutoff: ad.as_ref().map(|a| a.cutoff),
            ad_mean: ad.as_ref().map(|a| a.mean),
            ad_stop_suggested: ad.as_ref().map(|a| a.cutoff as f64 <= n as f64 / 3.0),
            posterior,
            last_decision: self.engine.last_decision().copied(),
        }
    }

    pub fn view(&self) -> SessionView {
        let grid = self.engine.grid();
        let trials = self
            .events
            .iter()
            .filter_map(|ev| match ev {
                Event::Created { .. } => None,
                Event::Response {
                    seq,
                    level,
                    response,
                    note,
                    at,
                } => Some(TrialView {
                    trial: *seq,
                    level: *level,
                    value: grid.value(*level as i64),
                    response: *response,
                    recommended: *level,
                    deviation: false,
                    note: note.clone(),
                    at: *at,
                }),
                Event::Deviation {
                    seq,
                    recommended,
                    level,
                    response,
                    note,
                    at,
                } => Some(TrialView {
                    trial: *seq,
                    level: *level,
                    value: grid.value(*level as i64),
                    response: *response,
                    recommended: *recommended,
                    deviation: true,
                    note: Some(note.clone()),
                    at: *at,
                }),
            })
            .collect();
        SessionView {
            id: self.id.clone(),
            created_at: self.created_at,
            status: self.status,
            policy: self.config.policy.label(),
            target: self.config.policy.target(),
            n: self.engine.n(),
            n_max: self.config.n_max,
            config: self.config.clone(),
            trials,
            recommendation: self.recommendation(),
            diagnostics: self.diagnostics(),
        }
    }

    pub fn reply(&self, decision: Decision) -> RecordReply {
        RecordReply {
            trial: self.engine.n(),
            status: self.status,
            recommendation: self.recommendation(),
            decision,
            diagnostics: self.diagnostics(),
        }
    }

    /// Previews both responses without touching the session.
    pub fn what_if(&self) -> Result<WhatIf, ApiError> {
        self.require_active()?;
        Ok(WhatIf {
            n: self.engine.n(),
            current: self.recommendation(),
            yes: self.branch(Response::Yes)?,
            no: self.branch(Response::No)?,
        })
    }

    fn branch(&self, response: Response) -> Result<Branch, ApiError> {
        let grid = self.engine.grid();
        let outcome = |level: usize, probability: f64| Outcome {
            level,
            value: grid.value(level as i64),
            probability,
        };
        let coin_prob = match (&self.config.policy, self.engine.needs_coin(response)) {
            (Policy::UpDown { rule } | Policy::Bud { rule, .. }, true) => match rule.variant {
                Variant::Bcd { gamma } => Some((gamma / (1.0 - gamma)).min(1.0)),
                _ => None,
            },
            _ => None,
        };
        let Some(prob) = coin_prob.filter(|&p| p < 1.0) else {
            let d = self.engine.preview(response).map_err(ApiError::from_engine)?;
            return Ok(Branch {
                response,
                level: Some(d.level),
                value: Some(grid.value(d.level as i64)),
                overridden: d.overridden,
                move_probability: coin_prob,
                outcomes: vec![outcome(d.level, 1.0)],
            });
        };
        let gate = self.engine.peek_draws().gate;
        let with_coin = |coin: f64| {
            let mut e = self.engine.clone();
            e.record_with(response, Draws { coin, gate }).map_err(ApiError::from_engine)
        };
        let (moved, stayed) = (with_coin(0.0)?, with_coin(1.0)?);
        let mut outcomes = vec![outcome(moved.level, prob)];
        if stayed.level == moved.level {
            outcomes[0].probability = 1.0;
        } else {
            outcomes.push(outcome(stayed.level, 1.0 - prob));
        }
        Ok(Branch {
            response,
            level: None,
            value: None,
            overridden: moved.overridden || stayed.overridden,
            move_probability: Some(prob),
            outcomes,
        })
    }

    /// Estimates on the live history.
    pub fn estimates(&self, q: &EstimatesQuery) -> Result<EstimatesReport, ApiError> {
        let target = q.target.unwrap_or_else(|| self.config.policy.target());
        if !(target > 0.0 && target < 1.0) {
            return Err(ApiError::bad_request("target must lie in (0, 1)").with_field("target"));
        }
        let conf = q.conf.unwrap_or(0.95);
        if !(conf > 0.0 && conf < 1.0) {
            return Err(ApiError::bad_request("conf must lie in (0, 1)").with_field("conf"));
        }
        let ci = q.ci.unwrap_or(self.config.ci);
        let names = q.estimators.clone().unwrap_or_else(|| self.config.estimators.clone());
        let kinds = names
            .iter()
            .map(|n| parse_estimator(n, &self.config.policy))
            .collect::<Result<Vec<EstimatorKind>, ApiError>>()?;
        let n = self.engine.n();
        let mut report = EstimatesReport {
            status: "ok",
            n,
            target,
            ci,
            conf,
            estimates: Vec::new(),
        };
        if n < 2 {
            report.status = "insufficient_data";
            return Ok(report);
        }
        let grid = self.engine.grid();
        let levels = grid.levels();
        let opts = EstimateOptions {
            target,
            percentiles: vec![(1.0 - conf) / 2.0, (1.0 + conf) / 2.0],
            ci,
            x_bounds: Some((levels[0], levels[levels.len() - 1])),
        };
        let chain = self.chain();
        let imputed = match self.engine.walk() {
            Some(w) if self.config.impute && grid.policy() == BoundaryPolicy::Reflecting => imputed_chain(w).ok(),
            _ => None,
        };
        for kind in &kinds {
            let input = match (kind, &imputed) {
                (EstimatorKind::Averaging(_), Some(c)) => c,
                _ => &chain,
            };
            let (result, error) = match estimate(kind, input, &opts) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            report.estimates.push(EstimateEntry {
                estimator: kind.label(),
                result,
                error,
            });
        }
        Ok(report)
    }
}
