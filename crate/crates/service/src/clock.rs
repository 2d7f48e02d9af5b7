use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Duration, Utc};

/// Source of timestamps.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

/// Source of session ids and design seeds.
pub trait Ids: Send + Sync {
    fn new_id(&self) -> String;
    fn new_seed(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Starts at a fixed instant and advances one second per call.
pub struct FixedClock {
    start: DateTime<Utc>,
    ticks: AtomicU64,
}

impl FixedClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        FixedClock {
            start,
            ticks: AtomicU64::new(0),
        }
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.start + Duration::seconds(t as i64)
    }
}

pub struct RandomIds;

impl Ids for RandomIds {
    fn new_id(&self) -> String {
        uuid::Uuid::new_v4().simple().to_string()
    }

    fn new_seed(&self) -> u64 {
        uuid::Uuid::new_v4().as_u64_pair().0
    }
}

/// `trial-1`, `trial-2`, ... with seeds `1, 2, ...`.
#[derive(Default)]
pub struct SequentialIds {
    ids: AtomicU64,
    seeds: AtomicU64,
}

impl Ids for SequentialIds {
    fn new_id(&self) -> String {
        format!("trial-{}", self.ids.fetch_add(1, Ordering::SeqCst) + 1)
    }

    fn new_seed(&self) -> u64 {
        self.seeds.fetch_add(1, Ordering::SeqCst) + 1
    }
}
