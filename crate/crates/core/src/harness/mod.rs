//! Experiment orchestration: matched pairs, training runs, grids and the
//! results store.

mod config;
mod grid;
mod store;
mod train;

pub use config::{
    DataConfig, GridAxes, GridConfig, HIGH_LR, Regularizers, RunConfig, SparsityMode,
    apply_overrides, digest, parse_with_overrides,
};
pub use grid::{
    Assembly, GridOptions, GridSummary, GroupSample, assemble_pairs, comparison_tables,
    correlation_series, run_grid,
};
pub use store::{
    CHECKPOINT_FILE, CONFIG_FILE, Checkpoint, FLOW_FILE, FLOW_SCHEMA, MANIFEST_FILE, MASK_FILE,
    METRICS_FILE, METRICS_SCHEMA, Manifest, ManifestEntry, PARAMS_FILE, RECORD_FILE,
    ResultsStore, RunStatus, csv_reader, read_matrices, write_matrices,
};
pub use train::{
    EVAL_CHUNK, Evaluation, MatchedPair, PreparedData, RunRecord, TrainedState, build_pair,
    probe_batch, train,
};

use crate::error::Result;
use crate::sparsity::Architecture;

/// Dense training for `⌈E/2⌉` epochs at width `N_MW`, one-shot layerwise
/// magnitude pruning to the dense partner's active counts, then fine-tuning.
pub fn magnitude_prune_run(config: &RunConfig, data: &PreparedData) -> Result<(RunRecord, TrainedState)> {
    let mut c = config.clone();
    c.architecture = Architecture::Sparse;
    c.sparsity_mode = SparsityMode::Magnitude;
    train(&c, data)
}
