//! Per-slice rigid poses as CSV, one row per slice in stack order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::SliceState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct PoseRow {
    stack: usize,
    slice: usize,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
    log_sigma: f64,
}

/// `slices_per_stack[s]` consecutive states belong to stack `s`.
pub fn write_poses(states: &[SliceState], slices_per_stack: &[usize], path: impl AsRef<Path>) -> Result<()> {
    if slices_per_stack.iter().sum::<usize>() != states.len() {
        return Err(Error::invalid(format!(
            "{} poses do not split into stacks of {slices_per_stack:?} slices",
            states.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut it = states.iter();
    for (stack, &n) in slices_per_stack.iter().enumerate() {
        for slice in 0..n {
            let s = it.next().expect("counts checked above");
            let [qw, qx, qy, qz] = s.quat;
            let [tx, ty, tz] = s.trans;
            w.serialize(PoseRow {
                stack,
                slice,
                qw,
                qx,
                qy,
                qz,
                tx,
                ty,
                tz,
                log_sigma: s.log_sigma,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<SliceState>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<PoseRow>()
        .map(|row| {
            let p = row?;
            Ok(SliceState {
                quat: [p.qw, p.qx, p.qy, p.qz],
                trans: [p.tx, p.ty, p.tz],
                log_sigma: p.log_sigma,
                ..SliceState::default()
            })
        })
        .collect()
}
