//! Shared fixtures for the criterion benchmarks.

use updown_core::dist::registry::{builtin, find, ScenarioSpec};
use updown_core::{ChainData, Response};

/// A registry scenario by name.
pub fn scenario(name: &str) -> ScenarioSpec {
    let specs = builtin();
    find(&specs, name).expect("scenario exists").clone()
}

/// Deterministic `n`-trial SU&D-like history on levels `1..=m`.
pub fn chain(n: usize, m: usize) -> ChainData {
    let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut u = m / 2;
    for i in 0..n {
        let yes = (i * 7919 + u * 31) % 10 < 2 + u * 6 / m;
        x.push((u + 1) as f64);
        y.push(if yes { Response::Yes } else { Response::No });
        u = if yes { u.saturating_sub(1) } else { (u + 1).min(m - 1) };
    }
    ChainData::new(x, y).expect("valid chain")
}
