//! Paired significance tests and rank correlations over run results.

mod kendall;
mod table;
mod wilcoxon;

use serde::{Deserialize, Serialize};

pub use kendall::{avg_abs_correlation, kendall_tau_b};
pub use table::{
    COMPARISON_SCHEMA, CORRELATION_SCHEMA, ComparisonCell, ComparisonTable, CorrelationRow,
    RunSeries, Target, comparison_table, correlation_report, p_value_colour,
    write_correlation_csv,
};
pub use wilcoxon::{ALPHA, EXACT_MAX_N, WilcoxonMethod, WilcoxonResult, wilcoxon_one_sided};

/// A sparse run and its dense partner, matched on width and seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub width: usize,
    pub seed: u64,
    pub sparse: f64,
    pub dense: f64,
}

impl Pair {
    /// `(sparse, dense)`, the order the one-sided test expects for `H1: sparse > dense`.
    pub fn values(&self) -> (f64, f64) {
        (self.sparse, self.dense)
    }
}

/// All pairs of one configuration group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub config_id: String,
    pub pairs: Vec<Pair>,
}
