use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{AugmentPolicy, DatasetKind};
use crate::error::{Error, Result};
use crate::model::{Activation, InitScheme, NetworkSpec};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::sparsity::{self, Architecture, DEFAULT_WIDTH_FRACTIONS, WidthSchedule};

/// Learning rates at or above this need BatchNorm in a grid.
pub const HIGH_LR: f64 = 0.1;

/// Which regularizers a run uses, written in shorthand such as `DA_BN` or `NR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Regularizers {
    pub l2: bool,
    pub da: bool,
    pub sc: bool,
    pub bn: bool,
}

impl Regularizers {
    pub const NONE: Regularizers = Regularizers {
        l2: false,
        da: false,
        sc: false,
        bn: false,
    };

    pub fn is_none(&self) -> bool {
        *self == Self::NONE
    }
}

impl fmt::Display for Regularizers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_none() {
            return f.write_str("NR");
        }
        let parts: Vec<&str> = [
            (self.l2, "L2"),
            (self.da, "DA"),
            (self.sc, "SC"),
            (self.bn, "BN"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        f.write_str(&parts.join("_"))
    }
}

impl FromStr for Regularizers {
    type Err = Error;

    /// `NR` alone, or `_`-joined tokens from `L2`, `DA`, `SC`, `BN` in any order.
    fn from_str(s: &str) -> Result<Self> {
        let mut r = Regularizers::NONE;
        let tokens: Vec<&str> = s.split('_').collect();
        if tokens == ["NR"] {
            return Ok(r);
        }
        for t in tokens {
            let slot = match t {
                "L2" => &mut r.l2,
                "DA" => &mut r.da,
                "SC" => &mut r.sc,
                "BN" => &mut r.bn,
                "NR" => {
                    return Err(Error::invalid(format!(
                        "`NR` cannot be combined with other regularizers in `{s}`"
                    )));
                }
                other => {
                    return Err(Error::invalid(format!(
                        "unknown regularizer `{other}` in `{s}`; expected NR, L2, DA, SC or BN"
                    )));
                }
            };
            if *slot {
                return Err(Error::invalid(format!("`{t}` repeated in `{s}`")));
            }
            *slot = true;
        }
        Ok(r)
    }
}

impl Serialize for Regularizers {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Regularizers {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    /// Fixed random mask from initialization.
    #[default]
    Random,
    /// Dense training for the first half, then one-shot layerwise magnitude
    /// pruning and fine-tuning.
    Magnitude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DatasetKind,
    /// Directory below the data root; defaults to the dataset name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Keep only the first `n` training examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
}

impl DataConfig {
    pub fn dir_name(&self) -> &str {
        self.dir.as_deref().unwrap_or(self.kind.as_str())
    }
}

fn default_batch_size() -> usize {
    128
}
fn default_probe_size() -> usize {
    512
}
fn default_fractions() -> Vec<f64> {
    DEFAULT_WIDTH_FRACTIONS.to_vec()
}
fn default_true() -> bool {
    true
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DataConfig,
    pub hidden_layers: usize,
    /// `N_W` of the dense member of the pair this run belongs to.
    pub dense_width: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub sparsity_mode: SparsityMode,
    pub optimizer: OptimizerConfig,
    pub regularizers: Regularizers,
    pub activation: Activation,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub init: InitScheme,
    /// Fractions of `N_MW` that define the admissible dense widths.
    #[serde(default = "default_fractions")]
    pub width_fractions: Vec<f64>,
    /// Replaces the dataset's default pad-crop-flip policy when `DA` is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentPolicy>,
    /// Examples in the fixed batch used for gradient-flow readings.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    /// Write the final network, optimizer state and mask.
    #[serde(default = "default_true")]
    pub checkpoint: bool,
}

impl RunConfig {
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let cfg: RunConfig = parse_with_overrides(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: &str, detail: String| Error::Config {
            path: path.to_string(),
            detail,
        };
        self.optimizer
            .validate()
            .map_err(|e| cfg_err("optimizer", e.to_string()))?;
        if self.optimizer.lr <= 0.0 {
            return Err(cfg_err("optimizer.lr", "must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size", "must be positive".into()));
        }
        if self.probe_size == 0 {
            return Err(cfg_err("probe_size", "must be positive".into()));
        }
        self.network_spec(Architecture::Dense)
            .validate()
            .map_err(|e| cfg_err("hidden_layers", e.to_string()))?;
        let schedule = self
            .width_schedule()
            .map_err(|e| cfg_err("width_fractions", e.to_string()))?;
        if !schedule.widths.contains(&self.dense_width) && self.dense_width != schedule.max_width {
            return Err(cfg_err(
                "dense_width",
                format!(
                    "{} is not in the width schedule {:?} (or N_MW = {})",
                    self.dense_width, schedule.widths, schedule.max_width
                ),
            ));
        }
        if let Some(p) = &self.augment {
            p.validate(self.dataset.kind.shape())
                .map_err(|e| cfg_err("augment", e.to_string()))?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dataset.kind.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dataset.kind.class_count()
    }

    /// `N_MW` for this dataset.
    pub fn max_width(&self) -> usize {
        sparsity::max_width(self.input_dim())
    }

    pub fn width_schedule(&self) -> Result<WidthSchedule> {
        sparsity::dense_width_schedule(self.max_width(), &self.width_fractions)
    }

    /// Width of the network this run actually trains.
    pub fn trained_width(&self) -> usize {
        match self.architecture {
            Architecture::Sparse => self.max_width(),
            Architecture::Dense => self.dense_width,
        }
    }

    /// Architecture of either member of this run's pair.
    pub fn network_spec(&self, arch: Architecture) -> NetworkSpec {
        NetworkSpec {
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            hidden_layers: self.hidden_layers,
            hidden_width: match arch {
                Architecture::Sparse => self.max_width(),
                Architecture::Dense => self.dense_width,
            },
            activation: self.activation,
            use_batchnorm: self.regularizers.bn,
            use_skip: self.regularizers.sc,
        }
    }

    pub fn augment_policy(&self) -> Option<AugmentPolicy> {
        self.regularizers
            .da
            .then(|| self.augment.unwrap_or_else(|| self.dataset.kind.default_augment()))
    }

    /// Coupled L2 for every optimizer except AdamW, whose decay is decoupled.
    pub fn coupled_l2(&self) -> bool {
        self.regularizers.l2 && self.optimizer.kind != OptimizerKind::Adamw
    }

    /// Stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Digest of everything except architecture, width and seed: runs sharing
    /// it differ only in the pairing coordinates.
    pub fn group_hash(&self) -> String {
        digest(&self.group_value())
    }

    fn group_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in ["architecture", "dense_width", "seed"] {
            obj.remove(k);
        }
        v
    }

    /// Digest identifying the pair this run belongs to.
    pub fn pair_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut()
            .expect("config is an object")
            .remove("architecture");
        digest(&v)
    }

    /// Readable group label, e.g. `sgd/BN/relu/lr=0.1/L_h=1`.
    pub fn group_label(&self) -> String {
        format!(
            "{}/{}/{}/lr={}/L_h={}",
            self.optimizer.kind, self.regularizers, self.activation, self.optimizer.lr, self.hidden_layers
        )
    }

    /// Short run name for directory listings.
    pub fn run_name(&self) -> String {
        format!(
            "{}-{}-w{}-s{}-{}",
            self.architecture,
            self.group_label().replace('/', "-"),
            self.dense_width,
            self.seed,
            &self.hash()[..8]
        )
    }
}

/// Canonical JSON (object keys sorted) hashed with SHA-256, hex encoded.
pub fn digest(v: &Value) -> String {
    let text = canonical_json(v);
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(","))
        }
        other => other.to_string(),
    }
}

/// Applies `key.path=value` overrides to a JSON document. The value is parsed
/// as JSON when possible and taken as a string otherwise, so
/// `optimizer.kind=adam` and `epochs=30` both work.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config {
            path: o.clone(),
            detail: "override must look like key.path=value".into(),
        })?;
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::Config {
                    path: key.to_string(),
                    detail: "empty path segment".into(),
                });
            }
            let obj = cur.as_object_mut().ok_or_else(|| Error::Config {
                path: parts[..i].join("."),
                detail: "not an object; cannot set a field inside it".into(),
            })?;
            if i + 1 == parts.len() {
                obj.insert((*part).to_string(), value.clone());
                break;
            }
            cur = obj
                .entry((*part).to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

/// Parses `text` as JSON, applies overrides and deserializes, reporting the
/// path of the offending field on failure.
pub fn parse_with_overrides<T: DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config {
        path: format!("line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    apply_overrides(&mut doc, overrides)?;
    serde_path_to_error::deserialize(doc).map_err(|e| Error::Config {
        path: e.path().to_string(),
        detail: e.inner().to_string(),
    })
}

/// Axes of a grid; an absent axis keeps the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizers: Option<Vec<OptimizerKind>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularizers: Option<Vec<Regularizers>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<Activation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rates: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_layers: Option<Vec<usize>>,
    /// Defaults to the full width schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architectures: Option<Vec<Architecture>>,
}

/// A base run plus axes to expand over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub axes: GridAxes,
    /// Skip combinations with `lr ≥ 0.1` and no BatchNorm.
    #[serde(default = "default_true")]
    pub high_lr_requires_bn: bool,
}

impl GridConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<GridConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let g: GridConfig = parse_with_overrides(&text, overrides)?;
        g.base.validate()?;
        Ok(g)
    }

    /// Every run of the grid, in a fixed order, each validated.
    pub fn expand(&self) -> Result<Vec<RunConfig>> {
        let b = &self.base;
        let a = &self.axes;
        let optimizers = a.optimizers.clone().unwrap_or_else(|| vec![b.optimizer.kind]);
        let regs = a.regularizers.clone().unwrap_or_else(|| vec![b.regularizers]);
        let acts = a.activations.clone().unwrap_or_else(|| vec![b.activation]);
        let lrs = a.learning_rates.clone().unwrap_or_else(|| vec![b.optimizer.lr]);
        let depths = a.hidden_layers.clone().unwrap_or_else(|| vec![b.hidden_layers]);
        let widths = match &a.dense_widths {
            Some(w) => w.clone(),
            None => b.width_schedule()?.widths,
        };
        let seeds = a.seeds.clone().unwrap_or_else(|| vec![b.seed]);
        let archs = a
            .architectures
            .clone()
            .unwrap_or_else(|| Architecture::ALL.to_vec());

        let mut out = Vec::new();
        for &opt in &optimizers {
            for &reg in &regs {
                for &act in &acts {
                    for &lr in &lrs {
                        if self.high_lr_requires_bn && lr >= HIGH_LR && !reg.bn {
                            continue;
                        }
                        for &depth in &depths {
                            for &width in &widths {
                                for &seed in &seeds {
                                    for &arch in &archs {
                                        let mut c = b.clone();
                                        c.optimizer.kind = opt;
                                        c.optimizer.lr = lr;
                                        c.regularizers = reg;
                                        c.activation = act;
                                        c.hidden_layers = depth;
                                        c.dense_width = width;
                                        c.seed = seed;
                                        c.architecture = arch;
                                        c.validate()?;
                                        out.push(c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
