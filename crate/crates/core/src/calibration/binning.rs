use serde::{Deserialize, Serialize};

use super::ece::bin_index;
use crate::error::{Error, Result};
use crate::grid::ConfidenceGrid;

/// Equal-width histogram binning of the top-class confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningTable {
    /// `B + 1` edges from 0 to 1.
    pub edges: Vec<f64>,
    /// Calibrated confidence per bin.
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BinningTable {
    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, c: f64) -> f64 {
        self.values[bin_index(c, self.bins())]
    }

    pub fn apply_grid(&self, c: &ConfidenceGrid) -> ConfidenceGrid {
        ConfidenceGrid {
            values: c.values.iter().map(|v| self.apply(*v)).collect(),
            ..c.clone()
        }
    }
}

/// Per-bin calibrated value is the bin accuracy, the minimizer of the
/// bin-wise squared loss; empty bins keep their midpoint.
pub fn fit_histogram_binning(conf: &[f64], correct: &[bool], b: usize) -> Result<BinningTable> {
    if b == 0 {
        return Err(Error::InvalidParameter("bin count must be at least 1".into()));
    }
    if conf.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if conf.len() != correct.len() {
        return Err(Error::InvalidInput("confidence and correctness lengths differ".into()));
    }
    let mut counts = vec![0usize; b];
    let mut hits = vec![0usize; b];
    for (c, ok) in conf.iter().zip(correct) {
        let i = bin_index(*c, b);
        counts[i] += 1;
        hits[i] += *ok as usize;
    }
    let values = (0..b)
        .map(|i| {
            if counts[i] == 0 {
                (i as f64 + 0.5) / b as f64
            } else {
                hits[i] as f64 / counts[i] as f64
            }
        })
        .collect();
    Ok(BinningTable {
        edges: (0..=b).map(|i| i as f64 / b as f64).collect(),
        values,
        counts,
    })
}
