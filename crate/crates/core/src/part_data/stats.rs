use serde::{Deserialize, Serialize};

use super::record::AnnotationRecord;
use crate::error::{Error, Result};

pub const DENSITY_BINS: [&str; 4] = ["1-2", "3-4", "5-6", "7+"];

/// Share of records per instance-count bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub bins: Vec<String>,
    pub proportions: Vec<f64>,
    pub total_records: usize,
}

impl DensityHistogram {
    pub fn get(&self, bin: &str) -> Option<f64> {
        self.bins.iter().position(|b| b == bin).map(|i| self.proportions[i])
    }
}

fn bin_of(count: usize) -> usize {
    // records without instances land in the lowest bin
    match count {
        0..=2 => 0,
        3..=4 => 1,
        5..=6 => 2,
        _ => 3,
    }
}

pub fn density_histogram(records: &[AnnotationRecord]) -> Result<DensityHistogram> {
    if records.is_empty() {
        return Err(Error::EmptyInput("density histogram needs at least one record".into()));
    }
    let mut counts = [0usize; 4];
    for r in records {
        counts[bin_of(r.instances.len())] += 1;
    }
    let n = records.len() as f64;
    Ok(DensityHistogram {
        bins: DENSITY_BINS.iter().map(|s| s.to_string()).collect(),
        proportions: counts.iter().map(|&c| c as f64 / n).collect(),
        total_records: records.len(),
    })
}
