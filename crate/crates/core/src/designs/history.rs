//! History CSV: `trial,level_index,treatment,response,draw,tau,virtual_level`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Response, WalkState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// One-based trial number.
    pub trial: usize,
    pub level_index: i64,
    pub treatment: f64,
    pub response: Response,
    pub draw: Option<f64>,
    pub tau: u32,
    pub virtual_level: i64,
}

pub fn records(state: &WalkState) -> Vec<HistoryRecord> {
    state
        .history()
        .iter()
        .enumerate()
        .map(|(i, t)| HistoryRecord {
            trial: i + 1,
            level_index: t.level,
            treatment: state.grid().treatment(t.level),
            response: t.response,
            draw: t.draw,
            tau: t.tau,
            virtual_level: t.virtual_level,
        })
        .collect()
}

pub fn write_csv<W: Write>(records: &[HistoryRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn to_csv_string(records: &[HistoryRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<HistoryRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rd.deserialize().enumerate() {
        let rec: HistoryRecord = rec.map_err(|e| Error::Parse {
            line: i + 2,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// The (response, draw) stream that reproduces a history.
pub fn events(records: &[HistoryRecord]) -> Vec<(Response, Option<f64>)> {
    records.iter().map(|r| (r.response, r.draw)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{BoundaryPolicy, DesignRule, TreatmentGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bit_exact_round_trip() {
        let grid = TreatmentGrid::uniform(0.1, 0.1, 8, BoundaryPolicy::Layover).unwrap();
        let mut w = WalkState::new(grid.clone(), DesignRule::bcd(0.3).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = Response::from_bool(rng.random::<f64>() < 0.35);
            let d = w.needs_draw(r).then(|| rng.random::<f64>());
            w.next_allocation(r, d).unwrap();
        }
        let recs = records(&w);
        let text = to_csv_string(&recs).unwrap();
        assert!(text.starts_with("trial,level_index,treatment,response,draw,tau,virtual_level\n"));
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.treatment.to_bits(), b.treatment.to_bits());
            assert_eq!(a.draw.map(f64::to_bits), b.draw.map(f64::to_bits));
        }
        assert_eq!(to_csv_string(&back).unwrap(), text);
        let replayed = WalkState::replay(grid, DesignRule::bcd(0.3).unwrap(), 3, events(&back)).unwrap();
        assert_eq!(replayed, w);
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "trial,level_index,treatment,response,draw,tau,virtual_level\n1,0,1.0,maybe,,0,0\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }
}
