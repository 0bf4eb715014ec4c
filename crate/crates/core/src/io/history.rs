//! Training history as CSV, one row per epoch.

use std::path::Path;

use crate::error::Result;
use crate::train::EpochRecord;

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
