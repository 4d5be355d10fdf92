use std::path::PathBuf;

use sparseflow::harness::{
    Checkpoint, DataConfig, GridConfig, GridOptions, PreparedData, ResultsStore, RunConfig,
    RunStatus, SparsityMode, assemble_pairs, build_pair, comparison_tables, correlation_series,
    magnitude_prune_run, run_grid, train,
};
use sparseflow::sparsity::{Architecture, active_counts};
use sparseflow::stats::{Target, correlation_report};

fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn tiny_json() -> String {
    r#"{
        "dataset": {"kind": "fmnist", "dir": "fmnist-smoke", "train_limit": 300, "test_limit": 200},
        "hidden_layers": 1,
        "dense_width": 79,
        "architecture": "sparse",
        "optimizer": {"kind": "sgd", "lr": 0.1},
        "regularizers": "BN",
        "activation": "relu",
        "epochs": 3,
        "seed": 7,
        "probe_size": 128
    }"#
    .to_string()
}

fn tiny(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_json_str(&tiny_json(), &o).unwrap()
}

fn tiny_data() -> PreparedData {
    let c = tiny(&[]);
    PreparedData::load(&c.dataset, &data_root()).unwrap()
}

#[test]
fn matched_pair_has_equal_capacity() {
    for w in [79, 394, 788] {
        let c = tiny(&[&format!("dense_width={w}"), "hidden_layers=2"]);
        let pair = build_pair(&c).unwrap();
        assert!(pair.report.is_exact());
        assert_eq!(pair.mask.active_counts(), &active_counts(784, 10, w, 2)[..]);
        assert_eq!(pair.sparse.spec.hidden_width, 788);
        assert_eq!(pair.dense.spec.hidden_width, w);
    }
    let full = build_pair(&tiny(&["dense_width=788"])).unwrap();
    assert!(full.mask.layers().iter().all(|m| m.as_slice().iter().all(|&b| b == 1.0)));
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let c = tiny(&[]);
    let (a, _) = train(&c, &data).unwrap();
    let (b, _) = train(&c, &data).unwrap();
    assert_eq!(a.final_test_accuracy.to_bits(), b.final_test_accuracy.to_bits());
    assert_eq!(a.train_loss, b.train_loss);
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.measurement_epochs, vec![1, 2, 3]);
    assert_eq!(a.flow.len(), 3);
    assert_eq!(a.evaluations.len(), 4);
    let other = train(&tiny(&["seed=8"]), &data).unwrap().0;
    assert_ne!(a.train_loss, other.train_loss);
}

#[test]
fn zero_epochs_gives_init_only_record() {
    let data = tiny_data();
    let (r, _) = train(&tiny(&["epochs=0"]), &data).unwrap();
    assert!(r.train_loss.is_empty());
    assert!(r.flow.is_empty());
    assert_eq!(r.evaluations.len(), 1);
    assert_eq!(r.evaluations[0].epoch, 0);
    assert_eq!(r.final_test_accuracy, r.evaluations[0].test_accuracy);
    assert!(r.init_flow.gf1 > 0.0);
}

#[test]
fn divergence_is_recorded() {
    let data = tiny_data();
    let (r, _) = train(&tiny(&["regularizers=NR", "optimizer.lr=1e200"]), &data).unwrap();
    assert!(r.diverged());
    assert!(r.diverged_at.unwrap() <= 3);
}

#[test]
fn masked_weights_stay_zero_for_every_optimizer() {
    let data = tiny_data();
    for kind in ["sgd", "momentum", "adagrad", "rmsprop", "adam", "adamw"] {
        let c = tiny(&[&format!("optimizer.kind={kind}"), "optimizer.lr=0.001", "regularizers=L2_BN", "epochs=1"]);
        let (_, state) = train(&c, &data).unwrap();
        let mask = state.mask.unwrap();
        for (l, m) in mask.layers().iter().enumerate() {
            let groups = [Some(&state.network.weights[l]), state.optimizer.first.get(l), state.optimizer.second.get(l)];
            for g in groups.into_iter().flatten() {
                for (v, b) in g.as_slice().iter().zip(m.as_slice()) {
                    if *b == 0.0 {
                        assert_eq!(*v, 0.0, "{kind} layer {l}");
                    }
                }
            }
        }
    }
}

#[test]
fn full_density_prune_matches_dense_training() {
    let data = tiny_data();
    let dense = tiny(&["dense_width=788", "architecture=dense"]);
    let (d, _) = train(&dense, &data).unwrap();
    let (m, state) = magnitude_prune_run(&tiny(&["dense_width=788"]), &data).unwrap();
    assert_eq!(m.pruned_after, Some(2));
    assert!(state.mask.is_some());
    assert_eq!(d.train_loss, m.train_loss);
    assert_eq!(d.evaluations, m.evaluations);
}

#[test]
fn magnitude_prune_reaches_random_sparse_counts() {
    let data = tiny_data();
    let c = tiny(&["hidden_layers=4", "dense_width=236", "epochs=2"]);
    let (m, state) = magnitude_prune_run(&c, &data).unwrap();
    assert_eq!(m.config.sparsity_mode, SparsityMode::Magnitude);
    let random = build_pair(&c).unwrap();
    assert_eq!(m.active_counts, random.mask.active_counts());
    assert_eq!(state.mask.unwrap().active_counts(), random.mask.active_counts());
    assert_eq!(m.flow.len(), 2);
}

#[test]
fn store_round_trips_runs_and_checkpoints() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let c = tiny(&["optimizer.kind=adam", "optimizer.lr=0.001"]);
    let (record, state) = train(&c, &data).unwrap();
    let run_dir = store.save_run(&record, &state).unwrap();
    for f in ["config.json", "record.json", "metrics.csv", "flow.csv", "checkpoint.json", "params.bin", "mask.sfmk"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let reopened = ResultsStore::open(dir.path()).unwrap();
    assert!(reopened.is_finished(&c.hash()));
    assert_eq!(reopened.manifest().runs[&c.hash()].status, RunStatus::Completed);
    let records = reopened.records().unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].flow, record.flow);
    assert_eq!(records[0].checkpoint.as_deref(), Some("checkpoint.json"));

    let (ck, loaded) = Checkpoint::load(&run_dir).unwrap();
    assert_eq!(ck.epoch, 3);
    assert_eq!(loaded.network, state.network);
    assert_eq!(loaded.optimizer.first, state.optimizer.first);
    assert_eq!(loaded.optimizer.second, state.optimizer.second);
    assert_eq!(loaded.optimizer.t, state.optimizer.t);
    assert_eq!(loaded.mask, state.mask);

    let mut rdr = sparseflow::harness::csv_reader(&run_dir.join("flow.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["epoch", "gf1", "gf2", "egf1", "egf2", "probe_id"]);
    assert_eq!(rdr.records().count(), 3);
    let text = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(text.starts_with("# sparseflow metrics v1\n"));
    assert_eq!(text.lines().count(), 2 + 4);
}

#[test]
fn corrupt_parameter_file_is_rejected() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let (record, state) = train(&tiny(&["epochs=1"]), &data).unwrap();
    let run_dir = store.save_run(&record, &state).unwrap();
    let p = run_dir.join("params.bin");
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(Checkpoint::load(&run_dir).is_err());
}

fn grid_json() -> String {
    format!(
        r#"{{"base": {}, "axes": {{"seeds": [1, 2], "dense_widths": [79, 236],
            "regularizers": ["BN", "NR"], "optimizers": ["sgd", "adam"]}}}}"#,
        tiny_json().replace("\"epochs\": 3", "\"epochs\": 2")
    )
}

#[test]
fn grid_expansion_respects_high_lr_rule() {
    let g: GridConfig = serde_json::from_str(&grid_json()).unwrap();
    let runs = g.expand().unwrap();
    // NR is dropped at lr 0.1: 2 optimizers × 1 regularizer × 2 widths × 2 seeds × 2 architectures.
    assert_eq!(runs.len(), 16);
    assert!(runs.iter().all(|r| r.regularizers.bn));
    let mut hashes: Vec<String> = runs.iter().map(RunConfig::hash).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), runs.len());

    let mut g2 = g.clone();
    g2.high_lr_requires_bn = false;
    assert_eq!(g2.expand().unwrap().len(), 32);
}

#[test]
fn grid_runs_resume_and_assemble() {
    let mut g: GridConfig = serde_json::from_str(&grid_json()).unwrap();
    g.base.optimizer.lr = 0.001;
    g.base.checkpoint = false;
    g.axes.optimizers = Some(vec![sparseflow::optim::OptimizerKind::Sgd]);
    let runs = g.expand().unwrap();
    assert_eq!(runs.len(), 16);
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let opts = GridOptions { jobs: 2, resume: true };
    let s = run_grid(&runs, &data_root(), &store, opts).unwrap();
    assert_eq!((s.completed + s.diverged, s.skipped), (16, 0));
    assert!(s.failed.is_empty());
    let again = run_grid(&runs, &data_root(), &store, opts).unwrap();
    assert_eq!(again.skipped, 16);

    let records = store.records().unwrap();
    let asm = assemble_pairs(&records, Target::Accuracy).unwrap();
    assert_eq!(asm.groups.len(), 2);
    for g in &asm.groups {
        assert_eq!(g.sample.pairs.len() + asm.diverged.len() / 2, 4);
    }
    let tables = comparison_tables(&asm).unwrap();
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0].rows, vec!["sgd"]);
    assert_eq!(tables[0].cols, vec!["BN", "NR"]);

    let rows = correlation_report(&correlation_series(&records)).unwrap();
    assert_eq!(rows.len(), 16);

    // A lone sparse run has no partner.
    let lone: Vec<_> = records
        .iter()
        .filter(|r| !(r.config.architecture == Architecture::Dense && r.config.seed == 1))
        .cloned()
        .collect();
    assert!(assemble_pairs(&lone, Target::Accuracy).is_err());
}

#[test]
fn failed_runs_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let store = ResultsStore::open(dir.path()).unwrap();
    let good = tiny(&["epochs=1", "checkpoint=false"]);
    let mut bad = good.clone();
    bad.batch_size = 0;
    let s = run_grid(&[good.clone(), bad.clone()], &data_root(), &store, GridOptions::default()).unwrap();
    assert_eq!(s.completed, 1);
    assert_eq!(s.failed.len(), 1);
    assert_eq!(store.manifest().runs[&bad.hash()].status, RunStatus::Failed);
    assert!(!store.is_finished(&bad.hash()));
    assert_eq!(store.records().unwrap().len(), 1);
}

#[test]
fn prepared_data_applies_limits() {
    let c = DataConfig {
        kind: sparseflow::data::DatasetKind::Fmnist,
        dir: Some("fmnist-smoke".into()),
        train_limit: Some(50),
        test_limit: Some(20),
    };
    let d = PreparedData::load(&c, &data_root()).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (50, 20));
    let missing = DataConfig { dir: Some("no-such-dir".into()), ..c };
    assert!(PreparedData::load(&missing, &data_root()).is_err());
}
