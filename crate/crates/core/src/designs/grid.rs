use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    Reflecting,
    Layover,
    Unbounded,
}

/// How a design-scale level maps to the administered treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    /// Levels are natural logs of the treatment.
    Log,
}

/// Evenly spaced treatment levels with a boundary policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentGrid {
    levels: Vec<f64>,
    spacing: f64,
    policy: BoundaryPolicy,
    #[serde(default)]
    transform: Transform,
}

impl TreatmentGrid {
    pub fn new(levels: Vec<f64>, policy: BoundaryPolicy) -> Result<Self> {
        if levels.len() < 2 {
            return Err(invalid("levels", "need at least two levels"));
        }
        if levels.iter().any(|l| !l.is_finite()) {
            return Err(invalid("levels", "levels must be finite"));
        }
        let spacing = levels[1] - levels[0];
        if spacing <= 0.0 {
            return Err(invalid("levels", "levels must be strictly increasing"));
        }
        for w in levels.windows(2) {
            if ((w[1] - w[0]) - spacing).abs() > 1e-9 * spacing.max(1.0) {
                return Err(invalid("levels", "levels must be evenly spaced"));
            }
        }
        Ok(TreatmentGrid {
            levels,
            spacing,
            policy,
            transform: Transform::Identity,
        })
    }

    /// `m` levels starting at `first`, `spacing` apart.
    pub fn uniform(first: f64, spacing: f64, m: usize, policy: BoundaryPolicy) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(invalid("spacing", "must be > 0"));
        }
        let levels = (0..m).map(|i| first + spacing * i as f64).collect();
        Self::new(levels, policy)
    }

    /// Geometric treatments `first * ratio^i`, evenly spaced on the log scale.
    pub fn log_spaced(first: f64, ratio: f64, m: usize, policy: BoundaryPolicy) -> Result<Self> {
        if !(first > 0.0) {
            return Err(invalid("first", "must be > 0 on a log scale"));
        }
        if !(ratio > 1.0) {
            return Err(invalid("ratio", "must exceed 1"));
        }
        let mut g = Self::uniform(first.ln(), ratio.ln(), m, policy)?;
        g.transform = Transform::Log;
        Ok(g)
    }

    pub fn m(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn policy(&self) -> BoundaryPolicy {
        self.policy
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    pub fn with_policy(mut self, policy: BoundaryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Design-scale value of a (possibly off-grid) level index.
    pub fn value(&self, index: i64) -> f64 {
        if index >= 0 && (index as usize) < self.levels.len() {
            self.levels[index as usize]
        } else {
            self.levels[0] + self.spacing * index as f64
        }
    }

    /// Administered treatment for a level index.
    pub fn treatment(&self, index: i64) -> f64 {
        let v = self.value(index);
        match self.transform {
            Transform::Identity => v,
            Transform::Log => v.exp(),
        }
    }

    pub fn contains(&self, index: i64) -> bool {
        index >= 0 && (index as usize) < self.levels.len()
    }

    pub fn clamp(&self, index: i64) -> i64 {
        index.clamp(0, self.levels.len() as i64 - 1)
    }

    /// Index of the level nearest to a design-scale value.
    pub fn nearest(&self, x: f64) -> usize {
        let i = ((x - self.levels[0]) / self.spacing).round();
        i.clamp(0.0, (self.m() - 1) as f64) as usize
    }

    /// Grid with half the spacing covering the same range; old level `i`
    /// becomes new level `2i`.
    pub fn halved(&self) -> TreatmentGrid {
        let m = 2 * self.m() - 1;
        let s = self.spacing / 2.0;
        let levels = (0..m)
            .map(|j| {
                if j % 2 == 0 {
                    self.levels[j / 2]
                } else {
                    self.levels[j / 2] + s
                }
            })
            .collect();
        TreatmentGrid {
            levels,
            spacing: s,
            policy: self.policy,
            transform: self.transform,
        }
    }
}
