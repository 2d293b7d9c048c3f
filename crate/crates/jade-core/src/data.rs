//! In-memory observation data: a shared time grid plus per-process rows.
//!
//! Rows reference the grid by index, so irregular designs (different
//! replicate counts or missing observations per process) are representable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expfam::Family;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("time grid must be nonempty, finite, and strictly increasing (offence at index {0})")]
    BadTimes(usize),
    #[error("t_span must be finite with lo < hi and contain every observation time")]
    BadSpan,
    #[error("dataset needs at least one process")]
    NoProcesses,
    #[error("process {process} has no observations")]
    EmptyProcess { process: usize },
    #[error("process {process} row {row}: time index {idx} out of range")]
    TimeIndexOutOfRange { process: usize, row: usize, idx: usize },
    #[error("process {process} row {row}: rows must be sorted by time then replicate")]
    UnsortedRows { process: usize, row: usize },
    #[error("process {process} row {row}: duplicate (time, replicate) pair")]
    DuplicateRow { process: usize, row: usize },
    #[error("process {process} row {row}: value {value} invalid for family")]
    BadValue { process: usize, row: usize, value: f64 },
}

/// One observation row: grid index, replicate id, observed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obs {
    pub time_idx: usize,
    pub replicate: u32,
    pub value: f64,
}

/// Observations for every latent process over a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub t_span: (f64, f64),
    pub family: Family,
    pub processes: Vec<Vec<Obs>>,
}

impl Dataset {
    pub fn p(&self) -> usize {
        self.processes.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Observed values of one process in row order.
    pub fn values(&self, process: usize) -> Vec<f64> {
        self.processes[process].iter().map(|o| o.value).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.times.is_empty() || !self.times[0].is_finite() {
            return Err(DataError::BadTimes(0));
        }
        for i in 1..self.times.len() {
            if !self.times[i].is_finite() || self.times[i] <= self.times[i - 1] {
                return Err(DataError::BadTimes(i));
            }
        }
        let (lo, hi) = self.t_span;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(DataError::BadSpan);
        }
        if self.times[0] < lo || *self.times.last().unwrap() > hi {
            return Err(DataError::BadSpan);
        }
        if self.processes.is_empty() {
            return Err(DataError::NoProcesses);
        }
        for (j, rows) in self.processes.iter().enumerate() {
            if rows.is_empty() {
                return Err(DataError::EmptyProcess { process: j + 1 });
            }
            for (r, obs) in rows.iter().enumerate() {
                if obs.time_idx >= self.times.len() {
                    return Err(DataError::TimeIndexOutOfRange {
                        process: j + 1,
                        row: r,
                        idx: obs.time_idx,
                    });
                }
                if r > 0 {
                    let prev = &rows[r - 1];
                    let key = (obs.time_idx, obs.replicate);
                    let prev_key = (prev.time_idx, prev.replicate);
                    if key < prev_key {
                        return Err(DataError::UnsortedRows {
                            process: j + 1,
                            row: r,
                        });
                    }
                    if key == prev_key {
                        return Err(DataError::DuplicateRow {
                            process: j + 1,
                            row: r,
                        });
                    }
                }
                if !self.family.valid_value(obs.value) {
                    return Err(DataError::BadValue {
                        process: j + 1,
                        row: r,
                        value: obs.value,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sidecar metadata describing how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub family: Family,
    pub t_span: (f64, f64),
    pub n: usize,
    pub replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sd: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
}
