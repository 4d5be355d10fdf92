use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{RunRecord, TrainedState};
use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::model::{BN_EPS, BN_MOMENTUM, BatchNorm, Network, NetworkSpec};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::sparsity::MaskSet;

pub const METRICS_SCHEMA: &str = "# sparseflow metrics v1";
pub const FLOW_SCHEMA: &str = "# sparseflow flow v1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.json";
pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FLOW_FILE: &str = "flow.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MASK_FILE: &str = "mask.sfmk";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hash: String,
    pub name: String,
    pub status: RunStatus,
    /// Relative to the store root.
    pub dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Keyed by config hash.
    pub runs: BTreeMap<String, ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            runs: BTreeMap::new(),
        }
    }
}

/// Metadata of a run's final state. Parameter values live in a binary file
/// next to it (see [`write_matrices`]); the mask in its own mask file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    /// Epochs trained.
    pub epoch: usize,
    pub spec: NetworkSpec,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub optimizer: OptimizerConfig,
    pub coupled_l2: bool,
    pub step: u64,
    pub params_file: String,
    pub mask_file: Option<String>,
}

impl Checkpoint {
    /// Writes `checkpoint.json`, the parameter file and the mask (if any) into `dir`.
    ///
    /// Matrix order: weights; per BatchNorm layer γ, β, running mean, running
    /// variance (each `1 × width`); activation parameters; optimizer first
    /// moments; optimizer second moments.
    pub fn save(dir: &Path, config_hash: &str, epoch: usize, state: &TrainedState) -> Result<Checkpoint> {
        let net = &state.network;
        let opt = &state.optimizer;
        let mut mats: Vec<Matrix2> = net.weights.clone();
        for bn in &net.bn {
            let w = bn.running_mean.len();
            mats.push(bn.gamma.clone());
            mats.push(bn.beta.clone());
            mats.push(Matrix2::from_vec(1, w, bn.running_mean.clone())?);
            mats.push(Matrix2::from_vec(1, w, bn.running_var.clone())?);
        }
        mats.extend(net.act.iter().cloned());
        mats.extend(opt.first.iter().cloned());
        mats.extend(opt.second.iter().cloned());
        let params_path = dir.join(PARAMS_FILE);
        let f = fs::File::create(&params_path)
            .map_err(|e| Error::io(format!("creating {}", params_path.display()), e))?;
        let mut w = BufWriter::new(f);
        write_matrices(&mut w, &mats)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(format!("writing {}", params_path.display()), e))?;

        let mask_file = match &state.mask {
            Some(m) => {
                m.save(&dir.join(MASK_FILE))?;
                Some(MASK_FILE.to_string())
            }
            None => None,
        };
        let (bn_momentum, bn_eps) = net
            .bn
            .first()
            .map_or((BN_MOMENTUM, BN_EPS), |b| (b.momentum, b.eps));
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            epoch,
            spec: net.spec.clone(),
            bn_momentum,
            bn_eps,
            optimizer: opt.config.clone(),
            coupled_l2: opt.coupled_l2,
            step: opt.t,
            params_file: PARAMS_FILE.to_string(),
            mask_file,
        };
        write_json(&dir.join(CHECKPOINT_FILE), &ck)?;
        Ok(ck)
    }

    /// Reads a checkpoint written by [`Checkpoint::save`] back into a network,
    /// optimizer state and mask.
    pub fn load(dir: &Path) -> Result<(Checkpoint, TrainedState)> {
        let path = dir.join(CHECKPOINT_FILE);
        let ck: Checkpoint = read_json(&path)?;
        let bad = |detail: String| Error::Format {
            kind: "checkpoint",
            path: path.clone(),
            detail,
        };
        if ck.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", ck.version)));
        }
        let params_path = dir.join(&ck.params_file);
        let bytes = fs::read(&params_path)
            .map_err(|e| Error::io(format!("reading {}", params_path.display()), e))?;
        let mut mats = read_matrices(&bytes, &params_path)?.into_iter();
        let mut next = |what: &str| mats.next().ok_or_else(|| bad(format!("missing {what}")));

        let spec = ck.spec.clone();
        let mut weights = Vec::new();
        for _ in 0..spec.num_layers() {
            weights.push(next("weights")?);
        }
        let mut bn = Vec::new();
        if spec.use_batchnorm {
            for _ in 0..spec.hidden_layers {
                let gamma = next("gamma")?;
                let beta = next("beta")?;
                let running_mean = next("running mean")?.into_vec();
                let running_var = next("running variance")?.into_vec();
                bn.push(BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    momentum: ck.bn_momentum,
                    eps: ck.bn_eps,
                });
            }
        }
        let mut act = Vec::new();
        for _ in 0..spec.hidden_layers {
            act.push(next("activation parameters")?);
        }
        let mut network = Network {
            spec,
            weights,
            bn,
            act,
        };
        let mut optimizer = OptimizerState::new(ck.optimizer.clone(), ck.coupled_l2, &mut network)?;
        optimizer.t = ck.step;
        for m in optimizer.first.iter_mut().chain(optimizer.second.iter_mut()) {
            let stored = next("optimizer moments")?;
            if stored.shape() != m.shape() {
                return Err(bad("optimizer moment shape mismatch".into()));
            }
            *m = stored;
        }
        if mats.next().is_some() {
            return Err(bad("unexpected extra matrices".into()));
        }
        let mask = match &ck.mask_file {
            Some(f) => Some(MaskSet::load(&dir.join(f))?),
            None => None,
        };
        Ok((
            ck,
            TrainedState {
                network,
                optimizer,
                mask,
            },
        ))
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"SFPM";
const PARAMS_VERSION: u32 = 1;

/// `SFPM`, u32 version, u32 count, then per matrix u32 rows, u32 cols and
/// `rows · cols` f64 values, all little-endian.
pub fn write_matrices(mut w: impl Write, mats: &[Matrix2]) -> std::io::Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&(mats.len() as u32).to_le_bytes())?;
    for m in mats {
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_matrices(bytes: &[u8], path: &Path) -> Result<Vec<Matrix2>> {
    let bad = |detail: &str| Error::Format {
        kind: "parameter",
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    if u32_at(take(4)?) != PARAMS_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = u32_at(take(4)?);
        let cols = u32_at(take(4)?);
        let raw = take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Matrix2::from_vec(rows, cols, data)?);
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

/// Directory of run subdirectories plus a manifest. Writes to the manifest are
/// serialized through a lock; each run directory is written by one worker.
#[derive(Debug)]
pub struct ResultsStore {
    root: PathBuf,
    manifest: Mutex<Manifest>,
}

impl ResultsStore {
    /// Opens `root`, creating it and an empty manifest if needed.
    pub fn open(root: &Path) -> Result<ResultsStore> {
        fs::create_dir_all(root.join("runs"))
            .map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let m: Manifest = read_json(&path)?;
            if m.version != MANIFEST_VERSION {
                return Err(Error::Format {
                    kind: "manifest",
                    path,
                    detail: format!("unsupported version {}", m.version),
                });
            }
            m
        } else {
            Manifest::default()
        };
        Ok(ResultsStore {
            root: root.to_path_buf(),
            manifest: Mutex::new(manifest),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.lock().expect("manifest lock").clone()
    }

    pub fn run_dir(&self, hash: &str) -> PathBuf {
        self.root.join("runs").join(&hash[..16])
    }

    /// Completed or diverged: the run finished and need not be repeated.
    pub fn is_finished(&self, hash: &str) -> bool {
        self.manifest
            .lock()
            .expect("manifest lock")
            .runs
            .get(hash)
            .is_some_and(|e| e.status != RunStatus::Failed)
    }

    /// Writes every artifact of a finished run and records it in the manifest.
    pub fn save_run(&self, record: &RunRecord, state: &TrainedState) -> Result<PathBuf> {
        let hash = &record.config_hash;
        let dir = self.run_dir(hash);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let mut record = record.clone();
        if record.config.checkpoint {
            Checkpoint::save(&dir, hash, record.train_loss.len(), state)?;
            record.checkpoint = Some(CHECKPOINT_FILE.to_string());
        }
        write_json(&dir.join(CONFIG_FILE), &record.config)?;
        write_json(&dir.join(RECORD_FILE), &record)?;
        write_metrics_csv(&dir.join(METRICS_FILE), &record)?;
        write_flow_csv(&dir.join(FLOW_FILE), &record)?;
        let status = if record.diverged() {
            RunStatus::Diverged
        } else {
            RunStatus::Completed
        };
        self.record_entry(&record.config, status, None)?;
        Ok(dir)
    }

    /// Marks a run that errored before producing a record.
    pub fn save_failure(&self, config: &RunConfig, error: &Error) -> Result<()> {
        let dir = self.run_dir(&config.hash());
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        self.record_entry(config, RunStatus::Failed, Some(error.to_string()))
    }

    fn record_entry(&self, config: &RunConfig, status: RunStatus, error: Option<String>) -> Result<()> {
        let hash = config.hash();
        let dir = self
            .run_dir(&hash)
            .strip_prefix(&self.root)
            .expect("run dir is under the root")
            .to_string_lossy()
            .into_owned();
        let mut m = self.manifest.lock().expect("manifest lock");
        m.runs.insert(
            hash.clone(),
            ManifestEntry {
                hash,
                name: config.run_name(),
                status,
                dir,
                error,
            },
        );
        // Write-then-rename keeps the manifest whole if interrupted.
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        write_json(&tmp, &*m)?;
        fs::rename(&tmp, self.root.join(MANIFEST_FILE))
            .map_err(|e| Error::io("replacing manifest", e))
    }

    /// Records of all finished runs, in hash order.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let m = self.manifest();
        m.runs
            .values()
            .filter(|e| e.status != RunStatus::Failed)
            .map(|e| read_json(&self.root.join(&e.dir).join(RECORD_FILE)))
            .collect()
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "JSON",
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Opens `path` for CSV output with the schema comment line already written.
pub(crate) fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{schema}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(w))
}

/// CSV reader that skips schema comment lines.
pub fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// One row per epoch `0..=E` trained: train loss (blank at 0) and test metrics
/// where measured.
fn write_metrics_csv(path: &Path, r: &RunRecord) -> Result<()> {
    let mut w = csv_writer(path, METRICS_SCHEMA)?;
    w.write_record(["epoch", "train_loss", "test_loss", "test_accuracy"])?;
    for epoch in 0..=r.train_loss.len() {
        let ev = r.evaluations.iter().find(|e| e.epoch == epoch);
        w.write_record([
            epoch.to_string(),
            opt_cell(epoch.checked_sub(1).map(|i| r.train_loss[i])),
            opt_cell(ev.map(|e| e.test_loss)),
            opt_cell(ev.map(|e| e.test_accuracy)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

/// One row per measurement epoch.
fn write_flow_csv(path: &Path, r: &RunRecord) -> Result<()> {
    let mut w = csv_writer(path, FLOW_SCHEMA)?;
    w.write_record(["epoch", "gf1", "gf2", "egf1", "egf2", "probe_id"])?;
    for f in &r.flow {
        w.write_record([
            f.epoch.to_string(),
            f.gf1.to_string(),
            f.gf2.to_string(),
            f.egf1.to_string(),
            f.egf2.to_string(),
            f.probe_id.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}
