//! Up-and-Down walk engines and their targets.

mod grid;
pub mod history;
mod walk;

pub use grid::{BoundaryPolicy, Transform, TreatmentGrid};
pub use walk::{DownshiftOutcome, DownshiftTrigger, Trial, WalkState};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numeric::{binom_cdf, binom_sf, bisect_decreasing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Yes,
    No,
}

impl Response {
    pub fn is_yes(self) -> bool {
        self == Response::Yes
    }

    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Response::Yes
        } else {
            Response::No
        }
    }

    pub fn flipped(self) -> Self {
        Self::from_bool(!self.is_yes())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Response::Yes => "yes",
            Response::No => "no",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" | "1" | "true" => Some(Response::Yes),
            "no" | "n" | "0" | "false" => Some(Response::No),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Variant {
    Sud,
    Bcd { gamma: f64 },
    Kr { k: u32 },
    Gud { k: u32, a: u32, b: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    BelowMedian,
    AboveMedian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignRule {
    pub variant: Variant,
    #[serde(default)]
    pub orientation: Orientation,
}

impl DesignRule {
    pub fn sud() -> Self {
        Self::below(Variant::Sud)
    }

    pub fn bcd(gamma: f64) -> Result<Self> {
        Self::below(Variant::Bcd { gamma }).validated()
    }

    pub fn kr(k: u32) -> Result<Self> {
        Self::below(Variant::Kr { k }).validated()
    }

    pub fn gud(k: u32, a: u32, b: u32) -> Result<Self> {
        Self::below(Variant::Gud { k, a, b }).validated()
    }

    fn below(variant: Variant) -> Self {
        DesignRule {
            variant,
            orientation: Orientation::BelowMedian,
        }
    }

    pub fn above_median(mut self) -> Self {
        self.orientation = Orientation::AboveMedian;
        self
    }

    pub fn validated(self) -> Result<Self> {
        match self.variant {
            Variant::Sud => {}
            Variant::Bcd { gamma } => {
                if !(gamma > 0.0 && gamma <= 0.5) {
                    return Err(invalid("gamma", "must lie in (0, 0.5]"));
                }
            }
            Variant::Kr { k } => {
                if k < 1 {
                    return Err(invalid("k", "must be >= 1"));
                }
            }
            Variant::Gud { k, a, b } => {
                if k < 1 {
                    return Err(invalid("k", "must be >= 1"));
                }
                if !(a < b && b <= k) {
                    return Err(invalid("b", "need 0 <= a < b <= k"));
                }
            }
        }
        Ok(self)
    }

    /// Number of responses consumed per decision.
    pub fn cohort_size(&self) -> usize {
        match self.variant {
            Variant::Gud { k, .. } => k as usize,
            _ => 1,
        }
    }

    /// Internal counter range for KR, 1 otherwise.
    pub fn kr_k(&self) -> Option<u32> {
        match self.variant {
            Variant::Kr { k } => Some(k),
            _ => None,
        }
    }

    pub fn target(&self) -> f64 {
        target_of(self)
    }

    pub fn label(&self) -> String {
        let base = match self.variant {
            Variant::Sud => "SUD".to_string(),
            Variant::Bcd { gamma } => format!("BCD({gamma})"),
            Variant::Kr { k } => format!("KR({k})"),
            Variant::Gud { k, a, b } => format!("GUD({k},{a},{b})"),
        };
        match self.orientation {
            Orientation::BelowMedian => base,
            Orientation::AboveMedian => base + "^",
        }
    }
}

impl std::str::FromStr for DesignRule {
    type Err = crate::error::Error;

    /// Parses the [`DesignRule::label`] syntax, case-insensitively:
    /// `SUD`, `BCD(0.3)`, `KR(2)`, `GUD(3,0,1)`, with a trailing `^` for
    /// the above-median mirror.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let (body, above) = match t.strip_suffix('^') {
            Some(b) => (b.trim_end(), true),
            None => (t.as_str(), false),
        };
        let (name, args) = match body.split_once('(') {
            Some((n, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| invalid("rule", format!("missing `)` in `{s}`")))?;
                (n.trim(), inner.split(',').map(str::trim).collect::<Vec<_>>())
            }
            None => (body, Vec::new()),
        };
        let int = |v: &str| v.parse::<u32>().map_err(|_| invalid("rule", format!("bad integer `{v}` in `{s}`")));
        let rule = match (name, args.as_slice()) {
            ("sud", []) => DesignRule::sud(),
            ("bcd", [g]) => {
                DesignRule::bcd(g.parse().map_err(|_| invalid("rule", format!("bad number `{g}` in `{s}`")))?)?
            }
            ("kr", [k]) => DesignRule::kr(int(k)?)?,
            ("gud", [k, a, b]) => DesignRule::gud(int(k)?, int(a)?, int(b)?)?,
            _ => return Err(invalid("rule", format!("unrecognized rule `{s}`"))),
        };
        Ok(if above { rule.above_median() } else { rule })
    }
}

/// Target response probability of a rule.
pub fn target_of(rule: &DesignRule) -> f64 {
    let p = match rule.variant {
        Variant::Sud => 0.5,
        Variant::Bcd { gamma } => gamma,
        Variant::Kr { k } => 1.0 - 0.5f64.powf(1.0 / k as f64),
        Variant::Gud { k, a, b } => {
            let k = k as usize;
            bisect_decreasing(
                |p| binom_cdf(a as i64, k, p) - binom_sf(b as i64, k, p),
                0.0,
                1.0,
            )
        }
    };
    match rule.orientation {
        Orientation::BelowMedian => p,
        Orientation::AboveMedian => 1.0 - p,
    }
}

/// Zero-based positions `i >= 1` with `y[i] != y[i-1]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ReversalIndex {
    pub positions: Vec<usize>,
}

impl ReversalIndex {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

pub fn detect_reversals(responses: &[Response]) -> ReversalIndex {
    ReversalIndex {
        positions: (1..responses.len())
            .filter(|&i| responses[i] != responses[i - 1])
            .collect(),
    }
}
