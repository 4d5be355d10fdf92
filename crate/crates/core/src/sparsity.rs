//! Capacity matching between sparse and dense networks.
//!
//! A dense network of width `N_W` is paired with a sparse network of the
//! maximum width `N_MW = n + 4`, masked so that every layer holds exactly as
//! many active weights as the corresponding dense layer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::model::Network;
use crate::rng::Rng;

/// Which member of a capacity-matched pair a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Sparse,
    Dense,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::Sparse, Architecture::Dense];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Sparse => "sparse",
            Architecture::Dense => "dense",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fractions of the maximum width used for the dense widths.
pub const DEFAULT_WIDTH_FRACTIONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// `N_MW = n + 4` for input dimension `n`.
pub fn max_width(input_dim: usize) -> usize {
    input_dim + 4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthSchedule {
    pub max_width: usize,
    pub fractions: Vec<f64>,
    pub widths: Vec<usize>,
}

/// Dense widths `round(fraction · N_MW)`, rounding halves away from zero.
pub fn dense_width_schedule(max_width: usize, fractions: &[f64]) -> Result<WidthSchedule> {
    let mut widths = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("width fraction {f} outside (0, 1]")));
        }
        let w = (f * max_width as f64).round() as usize;
        if w == 0 {
            return Err(Error::invalid(format!(
                "fraction {f} of {max_width} rounds to zero width"
            )));
        }
        if widths.last().is_some_and(|&prev| w <= prev) {
            return Err(Error::invalid(format!(
                "widths must be strictly increasing; fraction {f} gives {w}"
            )));
        }
        widths.push(w);
    }
    Ok(WidthSchedule {
        max_width,
        fractions: fractions.to_vec(),
        widths,
    })
}

/// Per-layer active weight counts of a dense network of width `dense_width`:
/// `I·N_W`, `N_W²` for each intermediate layer, then `N_W·O`.
pub fn active_counts(
    input_dim: usize,
    output_dim: usize,
    dense_width: usize,
    hidden_layers: usize,
) -> Vec<usize> {
    let mut counts = Vec::with_capacity(hidden_layers + 1);
    counts.push(input_dim * dense_width);
    counts.extend(std::iter::repeat_n(
        dense_width * dense_width,
        hidden_layers.saturating_sub(1),
    ));
    counts.push(dense_width * output_dim);
    counts
}

/// Binary matrix with exactly `active` ones placed uniformly at random
/// (partial Fisher–Yates over flat indices).
pub fn random_mask(rows: usize, cols: usize, active: usize, rng: &mut Rng) -> Result<Matrix2> {
    let n = rows * cols;
    if active > n {
        return Err(Error::invalid(format!(
            "active count {active} exceeds {rows}x{cols} = {n} positions"
        )));
    }
    let mut mask = Matrix2::zeros(rows, cols);
    if active == n {
        mask.as_mut_slice().fill(1.0);
        return Ok(mask);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..active {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let data = mask.as_mut_slice();
    for &k in &idx[..active] {
        data[k] = 1.0;
    }
    Ok(mask)
}

/// Per-layer binary masks with their active counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    layers: Vec<Matrix2>,
    active: Vec<usize>,
}

impl MaskSet {
    /// Wraps binary matrices; rejects any entry other than 0 or 1.
    pub fn new(layers: Vec<Matrix2>) -> Result<MaskSet> {
        let mut active = Vec::with_capacity(layers.len());
        for (l, m) in layers.iter().enumerate() {
            if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::invalid(format!("mask layer {l} is not binary")));
            }
            active.push(m.count_nonzero());
        }
        Ok(MaskSet { layers, active })
    }

    pub fn all_ones(shapes: &[(usize, usize)]) -> MaskSet {
        let layers: Vec<Matrix2> = shapes.iter().map(|&(r, c)| Matrix2::ones(r, c)).collect();
        let active = shapes.iter().map(|&(r, c)| r * c).collect();
        MaskSet { layers, active }
    }

    /// One [`random_mask`] per layer, drawn in layer order from `rng`.
    pub fn random(shapes: &[(usize, usize)], counts: &[usize], rng: &mut Rng) -> Result<MaskSet> {
        if shapes.len() != counts.len() {
            return Err(Error::invalid(format!(
                "{} layer shapes but {} active counts",
                shapes.len(),
                counts.len()
            )));
        }
        let layers = shapes
            .iter()
            .zip(counts)
            .map(|(&(r, c), &k)| random_mask(r, c, k, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskSet {
            layers,
            active: counts.to_vec(),
        })
    }

    pub fn layers(&self) -> &[Matrix2] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn active_counts(&self) -> &[usize] {
        &self.active
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(Matrix2::shape).collect()
    }

    /// Fraction of active positions per layer.
    pub fn densities(&self) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&self.active)
            .map(|(m, &k)| k as f64 / m.len().max(1) as f64)
            .collect()
    }

    /// Writes the versioned little-endian bitset format:
    ///
    /// ```text
    /// b"SFMK" | u32 version | u32 layers
    /// per layer: u32 rows | u32 cols | u64 active
    /// per layer: ceil(rows·cols / 8) bytes, flat index i at bit i%8 of byte i/8
    /// ```
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MASK_MAGIC)?;
        w.write_all(&MASK_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for (m, &k) in self.layers.iter().zip(&self.active) {
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            w.write_all(&(k as u64).to_le_bytes())?;
        }
        for m in &self.layers {
            let mut bytes = vec![0u8; m.len().div_ceil(8)];
            for (i, &v) in m.as_slice().iter().enumerate() {
                if v != 0.0 {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<MaskSet> {
        let bad = |detail: String| Error::Format {
            kind: "mask",
            path: path.to_path_buf(),
            detail,
        };
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cur = ByteCursor { buf: &buf, pos: 0 };
        let magic = cur.take(4).ok_or_else(|| bad("truncated header".into()))?;
        if magic != MASK_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != MASK_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let n = cur.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
        let mut heads = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = cur.u32().ok_or_else(|| bad("truncated layer header".into()))? as usize;
            let cols = cur.u32().ok_or_else(|| bad("truncated layer header".into()))? as usize;
            let k = cur.u64().ok_or_else(|| bad("truncated layer header".into()))? as usize;
            heads.push((rows, cols, k));
        }
        let mut layers = Vec::with_capacity(n);
        let mut active = Vec::with_capacity(n);
        for (l, &(rows, cols, k)) in heads.iter().enumerate() {
            let len = rows * cols;
            let bytes = cur
                .take(len.div_ceil(8))
                .ok_or_else(|| bad(format!("truncated bitset for layer {l}")))?;
            if len % 8 != 0 && bytes[len / 8] >> (len % 8) != 0 {
                return Err(bad(format!("nonzero padding bits in layer {l}")));
            }
            let data: Vec<f64> = (0..len)
                .map(|i| f64::from((bytes[i / 8] >> (i % 8)) & 1))
                .collect();
            let m = Matrix2::from_vec(rows, cols, data)?;
            if m.count_nonzero() != k {
                return Err(bad(format!(
                    "layer {l} declares {k} active but has {}",
                    m.count_nonzero()
                )));
            }
            layers.push(m);
            active.push(k);
        }
        if cur.pos != buf.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(MaskSet { layers, active })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(&mut f)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<MaskSet> {
        let f = fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(std::io::BufReader::new(f), path)
    }
}

const MASK_MAGIC: &[u8; 4] = b"SFMK";
const MASK_VERSION: u32 = 1;

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Layerwise magnitude pruning: keeps the `counts[l]` largest-|w| positions of
/// each layer. Equal magnitudes are resolved in favour of the smaller flat index.
pub fn magnitude_mask(weights: &[Matrix2], counts: &[usize]) -> Result<MaskSet> {
    if weights.len() != counts.len() {
        return Err(Error::invalid(format!(
            "{} weight layers but {} counts",
            weights.len(),
            counts.len()
        )));
    }
    let mut layers = Vec::with_capacity(weights.len());
    for (l, (w, &k)) in weights.iter().zip(counts).enumerate() {
        let n = w.len();
        if k > n {
            return Err(Error::invalid(format!(
                "layer {l}: keep {k} of {n} positions"
            )));
        }
        let mut mask = Matrix2::zeros(w.rows(), w.cols());
        if k > 0 {
            let vals = w.as_slice();
            let mut idx: Vec<usize> = (0..n).collect();
            // Total order: larger magnitude first, then smaller index.
            let order = |&a: &usize, &b: &usize| {
                vals[b]
                    .abs()
                    .total_cmp(&vals[a].abs())
                    .then_with(|| a.cmp(&b))
            };
            if k < n {
                idx.select_nth_unstable_by(k - 1, order);
            }
            let data = mask.as_mut_slice();
            for &i in &idx[..k] {
                data[i] = 1.0;
            }
        }
        layers.push(mask);
    }
    Ok(MaskSet {
        layers,
        active: counts.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub layer: usize,
    pub sparse_shape: (usize, usize),
    pub dense_shape: (usize, usize),
    pub active_sparse: usize,
    pub params_dense: usize,
    /// Active fraction of the sparse layer.
    pub density: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub layers: Vec<LayerCapacity>,
    pub violations: Vec<String>,
}

impl CapacityReport {
    pub fn is_exact(&self) -> bool {
        self.violations.is_empty()
    }

    /// Converts violations into an error.
    pub fn ensure(self) -> Result<CapacityReport> {
        if self.is_exact() {
            Ok(self)
        } else {
            Err(Error::Capacity(self.violations.join("; ")))
        }
    }
}

/// Checks per-layer active-weight equality between a masked sparse network
/// and its dense partner, plus shape conformance of the mask.
pub fn verify_pair(sparse: &Network, mask: &MaskSet, dense: &Network) -> CapacityReport {
    let mut violations = Vec::new();
    let mut layers = Vec::new();
    if sparse.num_layers() != dense.num_layers() || mask.num_layers() != sparse.num_layers() {
        violations.push(format!(
            "layer counts differ: sparse {}, mask {}, dense {}",
            sparse.num_layers(),
            mask.num_layers(),
            dense.num_layers()
        ));
        return CapacityReport { layers, violations };
    }
    for l in 0..sparse.num_layers() {
        let (sw, m, dw) = (&sparse.weights[l], &mask.layers()[l], &dense.weights[l]);
        let active_sparse = m.count_nonzero();
        let params_dense = dw.len();
        let mut matched = true;
        if m.shape() != sw.shape() {
            matched = false;
            violations.push(format!(
                "layer {l}: mask {:?} vs sparse weights {:?}",
                m.shape(),
                sw.shape()
            ));
        }
        if active_sparse != params_dense {
            matched = false;
            violations.push(format!(
                "layer {l}: {active_sparse} active sparse weights vs {params_dense} dense"
            ));
        }
        let stray = sw
            .as_slice()
            .iter()
            .zip(m.as_slice())
            .filter(|(&w, &mv)| mv == 0.0 && w != 0.0)
            .count();
        if stray > 0 {
            matched = false;
            violations.push(format!("layer {l}: {stray} nonzero weights at masked positions"));
        }
        layers.push(LayerCapacity {
            layer: l,
            sparse_shape: sw.shape(),
            dense_shape: dw.shape(),
            active_sparse,
            params_dense,
            density: active_sparse as f64 / m.len().max(1) as f64,
            matched,
        });
    }
    CapacityReport { layers, violations }
}
