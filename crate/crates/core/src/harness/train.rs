use std::path::Path;

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DataConfig, RunConfig, SparsityMode};
use crate::data::{Dataset, NormStats, Split, flatten_batches};
use crate::error::{Error, Result};
use crate::gradflow::{FlowReading, MEASUREMENT_POINTS, measurement_epochs};
use crate::linalg::Matrix2;
use crate::model::{Network, softmax_cross_entropy};
use crate::optim::OptimizerState;
use crate::rng::{Stream, derive};
use crate::sparsity::{
    Architecture, CapacityReport, MaskSet, active_counts, magnitude_mask, verify_pair,
};

/// Rows per forward pass when evaluating the test split.
pub const EVAL_CHUNK: usize = 500;

/// Normalized train and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub config: DataConfig,
    pub train: Dataset,
    pub test: Dataset,
    /// Computed on the (limited) training split and applied to both.
    pub stats: NormStats,
}

impl PreparedData {
    /// Loads both splits from `root/<dir>`, applies limits and normalizes.
    pub fn load(config: &DataConfig, root: &Path) -> Result<PreparedData> {
        let dir = root.join(config.dir_name());
        let mut train = config.kind.load(&dir, Split::Train)?;
        let mut test = config.kind.load(&dir, Split::Test)?;
        if let Some(n) = config.train_limit {
            train.truncate(n);
        }
        if let Some(n) = config.test_limit {
            test.truncate(n);
        }
        Self::from_splits(config.clone(), train, test)
    }

    pub fn from_splits(config: DataConfig, mut train: Dataset, mut test: Dataset) -> Result<PreparedData> {
        if train.is_empty() {
            return Err(Error::invalid("training split is empty"));
        }
        let stats = NormStats::compute(&train);
        train.normalize(&stats)?;
        test.normalize(&stats)?;
        Ok(PreparedData {
            config,
            train,
            test,
            stats,
        })
    }
}

/// The two members of a capacity-matched pair, freshly initialized.
#[derive(Debug, Clone)]
pub struct MatchedPair {
    pub sparse: Network,
    pub mask: MaskSet,
    pub dense: Network,
    pub report: CapacityReport,
}

/// Builds the dense network of width `N_W` and the masked sparse network of
/// width `N_MW`, both drawn from the dense partner's per-layer He
/// distributions, and checks per-layer capacity equality.
pub fn build_pair(config: &RunConfig) -> Result<MatchedPair> {
    let dense_spec = config.network_spec(Architecture::Dense);
    let sparse_spec = config.network_spec(Architecture::Sparse);
    let dists = config.init.dists_for(&dense_spec);
    let dense = Network::init(dense_spec, &dists, &mut derive(config.seed, Stream::WeightInit))?;
    let mut sparse = Network::init(sparse_spec, &dists, &mut derive(config.seed, Stream::WeightInit))?;
    let counts = active_counts(
        config.input_dim(),
        config.output_dim(),
        config.dense_width,
        config.hidden_layers,
    );
    let mask = MaskSet::random(
        &sparse.spec.layer_shapes(),
        &counts,
        &mut derive(config.seed, Stream::Mask),
    )?;
    sparse.apply_mask(&mask)?;
    let report = verify_pair(&sparse, &mask, &dense).ensure()?;
    Ok(MatchedPair {
        sparse,
        mask,
        dense,
        report,
    })
}

/// Test metrics at one epoch (0 is initialization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub epoch: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    /// Mean training loss of each epoch, `train_loss[e - 1]` for epoch `e`.
    pub train_loss: Vec<f64>,
    /// Epoch 0 and every measurement epoch.
    pub evaluations: Vec<Evaluation>,
    pub init_flow: FlowReading,
    /// Readings at the measurement epochs.
    pub flow: Vec<FlowReading>,
    pub measurement_epochs: Vec<usize>,
    pub final_test_loss: f64,
    pub final_test_accuracy: f64,
    /// Epoch whose loss or weights became non-finite.
    pub diverged_at: Option<usize>,
    /// Epoch after which magnitude pruning was applied.
    pub pruned_after: Option<usize>,
    pub active_counts: Vec<usize>,
    pub wall_clock_secs: f64,
    /// Checkpoint metadata file relative to the run directory, once stored.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Test metrics at the measurement epochs, aligned with `flow`.
    pub fn measured_evaluations(&self) -> Vec<Evaluation> {
        self.evaluations
            .iter()
            .filter(|e| self.measurement_epochs.contains(&e.epoch))
            .copied()
            .collect()
    }
}

/// Final state of a run, for checkpointing.
#[derive(Debug, Clone)]
pub struct TrainedState {
    pub network: Network,
    pub optimizer: OptimizerState,
    pub mask: Option<MaskSet>,
}

/// Fixed probe batch for gradient-flow readings, shared by both members of a
/// pair since it only depends on the seed and the training split.
pub fn probe_batch(config: &RunConfig, train: &Dataset) -> (Matrix2, Vec<usize>, u64) {
    let n = config.probe_size.min(train.len());
    let mut rng = derive(config.seed, Stream::Probe);
    let mut idx = index::sample(&mut rng, train.len(), n).into_vec();
    idx.sort_unstable();
    let mut h = Sha256::new();
    for i in &idx {
        h.update((*i as u64).to_le_bytes());
    }
    let id = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    let (x, y) = train.gather(&idx);
    (x, y, id)
}

/// Runs `config` on `data` from initialization.
pub fn train(config: &RunConfig, data: &PreparedData) -> Result<(RunRecord, TrainedState)> {
    config.validate()?;
    if data.config.kind != config.dataset.kind {
        return Err(Error::invalid("prepared data does not match the run's dataset"));
    }
    let pair = build_pair(config)?;
    let (net, mask) = match (config.architecture, config.sparsity_mode) {
        (Architecture::Dense, _) => (pair.dense, None),
        (Architecture::Sparse, SparsityMode::Random) => (pair.sparse, Some(pair.mask)),
        // Starts fully dense at N_MW; the mask is chosen by magnitude later.
        (Architecture::Sparse, SparsityMode::Magnitude) => {
            let spec = config.network_spec(Architecture::Sparse);
            let dists = config.init.dists_for(&config.network_spec(Architecture::Dense));
            (Network::init(spec, &dists, &mut derive(config.seed, Stream::WeightInit))?, None)
        }
    };
    let prune_after = (config.architecture == Architecture::Sparse
        && config.sparsity_mode == SparsityMode::Magnitude)
        .then(|| config.epochs.div_ceil(2));
    run_loop(config, data, net, mask, prune_after)
}

fn run_loop(
    config: &RunConfig,
    data: &PreparedData,
    mut net: Network,
    mut mask: Option<MaskSet>,
    prune_after: Option<usize>,
) -> Result<(RunRecord, TrainedState)> {
    let started = Instant::now();
    let mut opt = OptimizerState::new(config.optimizer.clone(), config.coupled_l2(), &mut net)?;
    let schedule = measurement_epochs(config.epochs, MEASUREMENT_POINTS);
    let (probe_x, probe_y, probe_id) = probe_batch(config, &data.train);
    let augment = config.augment_policy();
    let shape = data.train.shape;
    let (test_x, test_y) = data.test.gather(&(0..data.test.len()).collect::<Vec<_>>());

    let measure = |net: &Network, mask: Option<&MaskSet>, epoch: usize| -> Result<(Evaluation, FlowReading)> {
        let (test_loss, test_accuracy) = net.evaluate(mask, &test_x, &test_y, EVAL_CHUNK)?;
        let (_, grads) = net.loss_and_grads(mask, &probe_x, &probe_y)?;
        let flow = FlowReading::from_snapshot(epoch, probe_id, &grads, mask)?;
        Ok((
            Evaluation {
                epoch,
                test_loss,
                test_accuracy,
            },
            flow,
        ))
    };

    let (init_eval, init_flow) = measure(&net, mask.as_ref(), 0)?;
    let mut evaluations = vec![init_eval];
    let mut flow = Vec::new();
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut diverged_at = None;
    let mut shuffle = derive(config.seed, Stream::Shuffle);
    let mut aug_rng = derive(config.seed, Stream::Augment);

    'epochs: for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut seen = 0usize;
        for (mut x, y) in flatten_batches(&data.train, config.batch_size, &mut shuffle)? {
            if let Some(policy) = &augment {
                policy.apply(&mut x, shape, &mut aug_rng)?;
            }
            let (logits, cache) = net.forward_train(mask.as_ref(), &x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            let grads = net.backward(mask.as_ref(), &cache, &dlogits)?;
            opt.step(&mut net, &grads, mask.as_ref())?;
            total += loss * y.len() as f64;
            seen += y.len();
        }
        if !net.weights.iter().all(Matrix2::is_finite) {
            diverged_at = Some(epoch);
            break;
        }
        train_loss.push(total / seen.max(1) as f64);

        if prune_after == Some(epoch) {
            let counts = active_counts(
                config.input_dim(),
                config.output_dim(),
                config.dense_width,
                config.hidden_layers,
            );
            let m = magnitude_mask(&net.weights, &counts)?;
            net.apply_mask(&m)?;
            opt.apply_mask(&m)?;
            mask = Some(m);
        }
        if schedule.contains(epoch) {
            let (e, f) = measure(&net, mask.as_ref(), epoch)?;
            if !e.test_loss.is_finite() {
                diverged_at = Some(epoch);
                break;
            }
            evaluations.push(e);
            flow.push(f);
        }
    }

    let last = *evaluations.last().expect("initial evaluation present");
    let active = match &mask {
        Some(m) => m.active_counts().to_vec(),
        None => net.weights.iter().map(Matrix2::len).collect(),
    };
    let record = RunRecord {
        config: config.clone(),
        config_hash: config.hash(),
        train_loss,
        evaluations,
        init_flow,
        flow,
        measurement_epochs: schedule.points,
        final_test_loss: last.test_loss,
        final_test_accuracy: last.test_accuracy,
        diverged_at,
        pruned_after: prune_after.filter(|&p| p <= config.epochs && p > 0),
        active_counts: active,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((
        record,
        TrainedState {
            network: net,
            optimizer: opt,
            mask,
        },
    ))
}

