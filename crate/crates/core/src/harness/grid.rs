use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::store::ResultsStore;
use super::train::{PreparedData, RunRecord, train};
use crate::error::{Error, Result};
use crate::gradflow::FlowMeasure;
use crate::sparsity::Architecture;
use crate::stats::{ComparisonTable, Pair, PairedSample, RunSeries, Target, comparison_table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridOptions {
    /// Worker threads; 0 means one per core.
    pub jobs: usize,
    /// Skip runs the store already finished.
    pub resume: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            jobs: 1,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub diverged: usize,
    /// `(run name, error)` for runs that errored.
    pub failed: Vec<(String, String)>,
}

enum Outcome {
    Skipped,
    Completed,
    Diverged,
    Failed(String, String),
}

/// Trains every config into `store`. Each dataset is loaded once and shared.
/// A run that errors is recorded as failed and does not stop the grid; errors
/// writing the store do.
pub fn run_grid(
    runs: &[RunConfig],
    data_root: &Path,
    store: &ResultsStore,
    opts: GridOptions,
) -> Result<GridSummary> {
    let mut cache: HashMap<String, Arc<PreparedData>> = HashMap::new();
    for c in runs {
        let key = serde_json::to_string(&c.dataset)?;
        if let Entry::Vacant(e) = cache.entry(key) {
            e.insert(Arc::new(PreparedData::load(&c.dataset, data_root)?));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        runs.par_iter()
            .map(|c| {
                if opts.resume && store.is_finished(&c.hash()) {
                    return Ok(Outcome::Skipped);
                }
                let key = serde_json::to_string(&c.dataset)?;
                let data = &cache[&key];
                match train(c, data) {
                    Ok((record, state)) => {
                        store.save_run(&record, &state)?;
                        Ok(if record.diverged() {
                            Outcome::Diverged
                        } else {
                            Outcome::Completed
                        })
                    }
                    Err(e) => {
                        store.save_failure(c, &e)?;
                        Ok(Outcome::Failed(c.run_name(), e.to_string()))
                    }
                }
            })
            .collect()
    });
    let mut summary = GridSummary {
        total: runs.len(),
        ..Default::default()
    };
    for o in outcomes {
        match o? {
            Outcome::Skipped => summary.skipped += 1,
            Outcome::Completed => summary.completed += 1,
            Outcome::Diverged => summary.diverged += 1,
            Outcome::Failed(name, err) => summary.failed.push((name, err)),
        }
    }
    Ok(summary)
}

/// Pairs for one configuration group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    /// Config of the group's first sparse run; pairing coordinates are arbitrary.
    pub config: RunConfig,
    pub sample: PairedSample,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assembly {
    pub groups: Vec<GroupSample>,
    /// Run names of pairs left out because a member diverged.
    pub diverged: Vec<String>,
}

/// Groups records by everything but architecture, width and seed, then pairs
/// sparse with dense by `(dense_width, seed)`. `target` picks the final test
/// metric. Pairs with a diverged member are excluded and reported; a run
/// without a partner is an error.
pub fn assemble_pairs(records: &[RunRecord], target: Target) -> Result<Assembly> {
    type Slot<'a> = BTreeMap<(usize, u64), [Option<&'a RunRecord>; 2]>;
    let mut groups: BTreeMap<String, Slot<'_>> = BTreeMap::new();
    for r in records {
        let slot = groups
            .entry(r.config.group_hash())
            .or_default()
            .entry((r.config.dense_width, r.config.seed))
            .or_default();
        let i = match r.config.architecture {
            Architecture::Sparse => 0,
            Architecture::Dense => 1,
        };
        if slot[i].is_some() {
            return Err(Error::invalid(format!("duplicate run {}", r.config.run_name())));
        }
        slot[i] = Some(r);
    }

    let mut out = Assembly::default();
    let mut missing = Vec::new();
    for (group_hash, slots) in groups {
        let mut pairs = Vec::new();
        let mut config = None;
        for ((width, seed), members) in slots {
            let (s, d) = match members {
                [Some(s), Some(d)] => (s, d),
                [Some(r), None] | [None, Some(r)] => {
                    missing.push(r.config.run_name());
                    continue;
                }
                [None, None] => unreachable!("slot created with a member"),
            };
            if s.config.pair_hash() != d.config.pair_hash() {
                return Err(Error::invalid(format!(
                    "{} and {} differ in more than architecture",
                    s.config.run_name(),
                    d.config.run_name()
                )));
            }
            config.get_or_insert_with(|| s.config.clone());
            if s.diverged() || d.diverged() {
                out.diverged.push(s.config.run_name());
                out.diverged.push(d.config.run_name());
                continue;
            }
            let metric = |r: &RunRecord| match target {
                Target::Loss => r.final_test_loss,
                Target::Accuracy => r.final_test_accuracy,
            };
            pairs.push(Pair {
                width,
                seed,
                sparse: metric(s),
                dense: metric(d),
            });
        }
        if let Some(config) = config {
            if pairs.is_empty() {
                continue;
            }
            out.groups.push(GroupSample {
                sample: PairedSample {
                    config_id: group_hash,
                    pairs,
                },
                config,
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "runs without a partner: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// Title shared by every group that differs only in optimizer and regularizers.
fn table_title(c: &RunConfig) -> String {
    let mut v = serde_json::to_value(c).expect("config serializes");
    let obj = v.as_object_mut().expect("config is an object");
    for k in ["architecture", "dense_width", "seed", "regularizers"] {
        obj.remove(k);
    }
    if let Some(o) = obj.get_mut("optimizer").and_then(|o| o.as_object_mut()) {
        o.remove("kind");
    }
    let mode = match c.sparsity_mode {
        super::config::SparsityMode::Random => "",
        super::config::SparsityMode::Magnitude => " magnitude",
    };
    format!(
        "{} {} lr={} L_h={}{} [{}]",
        c.dataset.dir_name(),
        c.activation,
        c.optimizer.lr,
        c.hidden_layers,
        mode,
        &super::config::digest(&v)[..8]
    )
}

/// One optimizer × regularizer table per remaining configuration, in title order.
pub fn comparison_tables(assembly: &Assembly) -> Result<Vec<ComparisonTable>> {
    let mut by_title: BTreeMap<String, Vec<(String, String, PairedSample)>> = BTreeMap::new();
    for g in &assembly.groups {
        by_title.entry(table_title(&g.config)).or_default().push((
            g.config.optimizer.kind.to_string(),
            g.config.regularizers.to_string(),
            g.sample.clone(),
        ));
    }
    by_title
        .into_iter()
        .map(|(title, mut samples)| {
            samples.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
            comparison_table(title, &samples)
        })
        .collect()
}

/// Flow and test-metric series of every non-diverged run at its measurement epochs.
pub fn correlation_series(records: &[RunRecord]) -> Vec<RunSeries> {
    records
        .iter()
        .filter(|r| !r.diverged())
        .map(|r| {
            let evals = r.measured_evaluations();
            let measures = FlowMeasure::ALL
                .iter()
                .map(|&m| (m, r.flow.iter().map(|f| f.get(m)).collect()))
                .collect();
            RunSeries {
                architecture: r.config.architecture,
                measures,
                test_loss: evals.iter().map(|e| e.test_loss).collect(),
                test_accuracy: evals.iter().map(|e| e.test_accuracy).collect(),
            }
        })
        .collect()
}
