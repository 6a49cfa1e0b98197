//! Dataset CSV with columns `traj_id,t,s,a,r,s_next`. Rewards are written
//! with 17 significant digits, which round-trips every `f64`.

use std::io::{Read, Write};

use super::{Transition, TransitionDataset, TransitionSource};
use crate::error::{OpeError, Result};

const COLUMNS: [&str; 6] = ["traj_id", "t", "s", "a", "r", "s_next"];

pub fn write_transitions_csv<W: Write>(data: &TransitionDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for tr in &data.transitions {
        w.write_record([
            tr.traj_id.to_string(),
            tr.t.to_string(),
            tr.s.to_string(),
            tr.a.to_string(),
            format!("{:.16e}", tr.r),
            tr.s_next.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset. The source is inferred: all `t = 0` with distinct
/// trajectory ids means iid transitions.
pub fn read_transitions_csv<R: Read>(input: R) -> Result<TransitionDataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(OpeError::parse(
            1,
            1,
            format!("expected header `{}`, found `{}`", COLUMNS.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut transitions = Vec::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != COLUMNS.len() {
            return Err(OpeError::parse(line, 1, format!("expected 6 fields, found {}", record.len())));
        }
        let index = |k: usize| -> Result<usize> {
            record[k].trim().parse::<usize>().map_err(|_| {
                OpeError::parse(line, k + 1, format!("bad {} value `{}`", COLUMNS[k], &record[k]))
            })
        };
        let r_val: f64 = record[4]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| OpeError::parse(line, 5, format!("bad reward `{}`", &record[4])))?;
        transitions.push(Transition {
            traj_id: index(0)?,
            t: index(1)?,
            s: index(2)?,
            a: index(3)?,
            r: r_val,
            s_next: index(5)?,
        });
    }
    let mut ids: Vec<usize> = transitions.iter().map(|t| t.traj_id).collect();
    ids.sort_unstable();
    ids.dedup();
    let iid = transitions.iter().all(|t| t.t == 0) && ids.len() == transitions.len();
    Ok(TransitionDataset {
        transitions,
        source: if iid { TransitionSource::Iid } else { TransitionSource::FromTrajectories },
    })
}

/// Checks indices against the model dimensions.
pub fn check_indices(data: &TransitionDataset, n_states: usize, n_actions: usize) -> Result<()> {
    for (i, tr) in data.transitions.iter().enumerate() {
        if tr.s >= n_states || tr.s_next >= n_states || tr.a >= n_actions {
            return Err(OpeError::parse(
                i + 2,
                1,
                format!("transition ({}, {}, {}) out of range", tr.s, tr.a, tr.s_next),
            ));
        }
    }
    Ok(())
}
