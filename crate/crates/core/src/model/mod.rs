//! Bias-free MLPs with optional BatchNorm and identity skips, and their
//! hand-written backward pass.
//!
//! Each hidden layer computes `linear → BatchNorm → activation`, where the
//! linear map uses the effective weights `θ ⊙ m`. With skips enabled, hidden
//! layer `l ≥ 2` adds its input (the previous hidden output) to its
//! post-activation output. The output layer is linear.
//!
//! [`Network::backward`] returns gradients with respect to the *effective*
//! weight positions, so masked positions generally receive nonzero gradient
//! even though the weight there is zero.

mod activation;
mod gradcheck;
mod loss;

pub use activation::{sigmoid, Activation, ELU_ALPHA, PRELU_INIT_SLOPE, SRELU_INIT};
pub use gradcheck::{GRAD_CHECK_FLOOR, GradCheck, grad_check};
pub use loss::{accuracy, softmax_cross_entropy};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::rng::Rng;
use crate::sparsity::MaskSet;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Depths the comparison grid is defined over.
pub const HIDDEN_LAYER_CHOICES: [usize; 3] = [1, 2, 4];

/// Architecture of a bias-free MLP.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
    pub use_batchnorm: bool,
    pub use_skip: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if !HIDDEN_LAYER_CHOICES.contains(&self.hidden_layers) {
            return Err(Error::invalid(format!(
                "hidden_layers must be one of {HIDDEN_LAYER_CHOICES:?}, got {}",
                self.hidden_layers
            )));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        Ok(())
    }

    /// Number of weight layers, `hidden_layers + 1`.
    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 1
    }

    /// `(rows, cols)` of each weight matrix: `(D, W)`, `(W, W)`…, `(W, O)`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let w = self.hidden_width;
        let mut shapes = Vec::with_capacity(self.num_layers());
        shapes.push((self.input_dim, w));
        shapes.extend(std::iter::repeat_n((w, w), self.hidden_layers - 1));
        shapes.push((w, self.output_dim));
        shapes
    }
}

/// Per-layer initial weight distribution `P^l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDist {
    Normal { std: f64 },
    Uniform { bound: f64 },
    Constant { value: f64 },
}

impl WeightDist {
    fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            WeightDist::Normal { std } => {
                if std == 0.0 {
                    0.0
                } else {
                    Normal::new(0.0, std).expect("finite std").sample(rng)
                }
            }
            WeightDist::Uniform { bound } => {
                if bound == 0.0 {
                    0.0
                } else {
                    rng.random_range(-bound..bound)
                }
            }
            WeightDist::Constant { value } => value,
        }
    }
}

/// How `P^l` is derived from a layer's fan-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, 2 / fan_in).
    #[default]
    HeNormal,
    /// U(−√(6 / fan_in), √(6 / fan_in)).
    HeUniform,
}

impl InitScheme {
    pub fn dist(self, fan_in: usize) -> WeightDist {
        let fan_in = fan_in.max(1) as f64;
        match self {
            InitScheme::HeNormal => WeightDist::Normal {
                std: (2.0 / fan_in).sqrt(),
            },
            InitScheme::HeUniform => WeightDist::Uniform {
                bound: (6.0 / fan_in).sqrt(),
            },
        }
    }

    /// Distributions for every layer of `spec`, with fan-in taken from
    /// `reference` (normally the dense partner of a comparison pair).
    pub fn dists_for(self, reference: &NetworkSpec) -> Vec<WeightDist> {
        reference
            .layer_shapes()
            .iter()
            .map(|&(fan_in, _)| self.dist(fan_in))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix2,
    pub beta: Matrix2,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Matrix2::ones(1, width),
            beta: Matrix2::zeros(1, width),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Trainable parameter category, used by optimizers for masking and decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix of layer `l` (0-based).
    Weight(usize),
    BnGamma(usize),
    BnBeta(usize),
    Activation(usize),
}

/// An instantiated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: Vec<Matrix2>,
    /// One per hidden layer when BatchNorm is enabled, else empty.
    pub bn: Vec<BatchNorm>,
    /// One per hidden layer; zero rows for parameter-free activations.
    pub act: Vec<Matrix2>,
}

#[derive(Debug, Clone)]
struct HiddenCache {
    /// Normalized values (BatchNorm only).
    xhat: Option<Matrix2>,
    /// Per-unit 1/√(σ² + ε) (BatchNorm only).
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    /// Activation input.
    u: Matrix2,
    /// Layer output after the optional skip add.
    out: Matrix2,
}

/// Intermediate values of a forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    input: Matrix2,
    hidden: Vec<HiddenCache>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Activation inputs of each hidden layer, `batch × width`.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Matrix2> {
        self.hidden.iter().map(|h| &h.u)
    }

    /// Outputs of each hidden layer (after the optional skip add).
    pub fn hidden_outputs(&self) -> impl Iterator<Item = &Matrix2> {
        self.hidden.iter().map(|h| &h.out)
    }

    /// The network input.
    pub fn input(&self) -> &Matrix2 {
        &self.input
    }

    /// Per-unit batch variances of each hidden layer; empty without BatchNorm.
    pub fn batch_variances(&self) -> impl Iterator<Item = &[f64]> {
        self.hidden.iter().map(|h| h.batch_var.as_slice())
    }
}

/// Gradients of the cost for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    /// `∂C/∂a^l` for each layer, shaped like `θ^l`.
    pub weights: Vec<Matrix2>,
    pub bn_gamma: Vec<Matrix2>,
    pub bn_beta: Vec<Matrix2>,
    pub act: Vec<Matrix2>,
}

impl GradSnapshot {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Scales every gradient by `c`.
    pub fn scaled(&self, c: f64) -> GradSnapshot {
        let s = |v: &Vec<Matrix2>| v.iter().map(|m| m.scale(c)).collect();
        GradSnapshot {
            weights: s(&self.weights),
            bn_gamma: s(&self.bn_gamma),
            bn_beta: s(&self.bn_beta),
            act: s(&self.act),
        }
    }

    /// All gradients in [`Network::params_mut`] order.
    pub fn groups(&self) -> Vec<&Matrix2> {
        let mut out: Vec<&Matrix2> = self.weights.iter().collect();
        for (g, b) in self.bn_gamma.iter().zip(&self.bn_beta) {
            out.push(g);
            out.push(b);
        }
        out.extend(self.act.iter().filter(|m| m.rows() > 0));
        out
    }
}

impl Network {
    /// Draws every weight of layer `l` i.i.d. from `dists[l]`, in row-major
    /// order, layer by layer, from a single stream.
    pub fn init(spec: NetworkSpec, dists: &[WeightDist], rng: &mut Rng) -> Result<Network> {
        spec.validate()?;
        if dists.len() != spec.num_layers() {
            return Err(Error::invalid(format!(
                "{} weight distributions for {} layers",
                dists.len(),
                spec.num_layers()
            )));
        }
        let weights = spec
            .layer_shapes()
            .into_iter()
            .zip(dists)
            .map(|((r, c), d)| Matrix2::from_fn(r, c, |_, _| d.sample(rng)))
            .collect();
        let w = spec.hidden_width;
        let bn = if spec.use_batchnorm {
            (0..spec.hidden_layers).map(|_| BatchNorm::new(w)).collect()
        } else {
            Vec::new()
        };
        let act = (0..spec.hidden_layers)
            .map(|_| spec.activation.init_params(w))
            .collect();
        Ok(Network {
            spec,
            weights,
            bn,
            act,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Total number of weight-matrix entries (the capacity count; BatchNorm
    /// and activation parameters are not connections).
    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(Matrix2::len).sum()
    }

    fn check_mask(&self, mask: Option<&MaskSet>) -> Result<()> {
        if let Some(mask) = mask {
            if mask.num_layers() != self.num_layers() {
                return Err(Error::shape(
                    "forward",
                    format!(
                        "mask has {} layers, network {}",
                        mask.num_layers(),
                        self.num_layers()
                    ),
                ));
            }
            for (l, (m, w)) in mask.layers().iter().zip(&self.weights).enumerate() {
                if m.shape() != w.shape() {
                    return Err(Error::shape(
                        "forward",
                        format!("layer {l}: mask {:?}, weights {:?}", m.shape(), w.shape()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// `θ^l ⊙ m^l`, or `θ^l` when unmasked.
    pub fn effective_weights(&self, mask: Option<&MaskSet>, l: usize) -> Matrix2 {
        match mask {
            Some(m) => self.weights[l]
                .hadamard(&m.layers()[l])
                .expect("mask shape checked"),
            None => self.weights[l].clone(),
        }
    }

    /// Forward pass. Train mode normalizes with batch statistics but does not
    /// touch the running statistics; see [`Network::forward_train`].
    pub fn forward(
        &self,
        mask: Option<&MaskSet>,
        x: &Matrix2,
        mode: Mode,
    ) -> Result<(Matrix2, ForwardCache)> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "forward",
                format!("input has {} columns, expected {}", x.cols(), self.spec.input_dim),
            ));
        }
        self.check_mask(mask)?;
        let batch = x.rows();
        let act = self.spec.activation;
        let mut hidden: Vec<HiddenCache> = Vec::with_capacity(self.spec.hidden_layers);

        for l in 0..self.spec.hidden_layers {
            let prev = hidden.last().map_or(x, |h| &h.out);
            let z = prev.matmul(&self.effective_weights(mask, l))?;
            let width = z.cols();

            let (u, xhat, inv_std, batch_mean, batch_var) = if let Some(bn) = self.bn.get(l) {
                let (mean, var) = match mode {
                    Mode::Train => column_moments(&z),
                    Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                let mut xhat = z.clone();
                let mut u = Matrix2::zeros(batch, width);
                for i in 0..batch {
                    let xr = xhat.row_mut(i);
                    for j in 0..width {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let ur = u.row_mut(i);
                    for j in 0..width {
                        ur[j] = bn.gamma.as_slice()[j] * xr[j] + bn.beta.as_slice()[j];
                    }
                }
                (u, Some(xhat), inv_std, mean, var)
            } else {
                (z, None, Vec::new(), Vec::new(), Vec::new())
            };

            let params = &self.act[l];
            let mut out = Matrix2::zeros(batch, width);
            let mut p = vec![0.0; params.rows()];
            for j in 0..width {
                for (r, pr) in p.iter_mut().enumerate() {
                    *pr = params.get(r, j);
                }
                for i in 0..batch {
                    out.set(i, j, act.forward(u.get(i, j), &p));
                }
            }
            if self.spec.use_skip && l > 0 {
                out.add_assign(prev)?;
            }
            hidden.push(HiddenCache {
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                u,
                out,
            });
        }

        let last = self.num_layers() - 1;
        let h = hidden.last().map_or(x, |h| &h.out);
        let logits = h.matmul(&self.effective_weights(mask, last))?;
        Ok((
            logits,
            ForwardCache {
                mode,
                input: x.clone(),
                hidden,
            },
        ))
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// BatchNorm running estimates.
    pub fn forward_train(
        &mut self,
        mask: Option<&MaskSet>,
        x: &Matrix2,
    ) -> Result<(Matrix2, ForwardCache)> {
        let (logits, cache) = self.forward(mask, x, Mode::Train)?;
        self.commit_batch_stats(&cache);
        Ok((logits, cache))
    }

    /// Running-stat update from a train-mode cache: exponential average with
    /// the unbiased batch variance.
    pub fn commit_batch_stats(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.batch_size() as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (bn, h) in self.bn.iter_mut().zip(&cache.hidden) {
            let m = bn.momentum;
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * h.batch_mean[j];
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * h.batch_var[j] * unbias;
            }
        }
    }

    /// Backpropagates `dlogits` (∂C/∂logits) through a cached forward pass.
    pub fn backward(
        &self,
        mask: Option<&MaskSet>,
        cache: &ForwardCache,
        dlogits: &Matrix2,
    ) -> Result<GradSnapshot> {
        self.check_mask(mask)?;
        if cache.hidden.len() != self.spec.hidden_layers
            || cache.input.cols() != self.spec.input_dim
        {
            return Err(Error::shape("backward", "cache does not match network"));
        }
        if self.spec.use_batchnorm && cache.mode != Mode::Train {
            return Err(Error::invalid(
                "backward needs a train-mode cache when BatchNorm is enabled",
            ));
        }
        let batch = cache.batch_size();
        if dlogits.shape() != (batch, self.spec.output_dim) {
            return Err(Error::shape(
                "backward",
                format!("dlogits {:?}, expected ({batch}, {})", dlogits.shape(), self.spec.output_dim),
            ));
        }

        let nl = self.num_layers();
        let hl = self.spec.hidden_layers;
        let act = self.spec.activation;
        let mut g_weights = vec![Matrix2::zeros(0, 0); nl];
        let mut g_gamma = Vec::new();
        let mut g_beta = Vec::new();
        let mut g_act: Vec<Matrix2> = self.act.iter().map(|a| Matrix2::zeros(a.rows(), a.cols())).collect();
        if self.spec.use_batchnorm {
            g_gamma = vec![Matrix2::zeros(1, self.spec.hidden_width); hl];
            g_beta = vec![Matrix2::zeros(1, self.spec.hidden_width); hl];
        }

        let h_last = &cache.hidden[hl - 1].out;
        g_weights[nl - 1] = h_last.matmul_tn(dlogits)?;
        let mut dh = dlogits.matmul_nt(&self.effective_weights(mask, nl - 1))?;

        for l in (0..hl).rev() {
            let hc = &cache.hidden[l];
            let width = hc.u.cols();
            let params = &self.act[l];
            let mut p = vec![0.0; params.rows()];
            let mut pg = vec![0.0; params.rows()];

            // Through the activation.
            let mut du = Matrix2::zeros(batch, width);
            for j in 0..width {
                for (r, pr) in p.iter_mut().enumerate() {
                    *pr = params.get(r, j);
                }
                pg.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..batch {
                    let u = hc.u.get(i, j);
                    let up = dh.get(i, j);
                    du.set(i, j, up * act.derivative(u, &p));
                    act.param_grad(u, &p, up, &mut pg);
                }
                for (r, v) in pg.iter().enumerate() {
                    g_act[l].set(r, j, *v);
                }
            }

            // Through BatchNorm with batch statistics.
            let dz = if let (Some(bn), Some(xhat)) = (self.bn.get(l), hc.xhat.as_ref()) {
                let n = batch as f64;
                let sum_du = du.col_sums();
                let sum_du_xhat = du.hadamard(xhat)?.col_sums();
                g_gamma[l] = Matrix2::from_vec(1, width, sum_du_xhat.clone())?;
                g_beta[l] = Matrix2::from_vec(1, width, sum_du.clone())?;
                let mut dz = Matrix2::zeros(batch, width);
                for i in 0..batch {
                    let (dr, xr, ur) = (dz.row_mut(i), xhat.row(i), du.row(i));
                    for j in 0..width {
                        let k = bn.gamma.as_slice()[j] * hc.inv_std[j] / n;
                        dr[j] = k * (n * ur[j] - sum_du[j] - xr[j] * sum_du_xhat[j]);
                    }
                }
                dz
            } else {
                du
            };

            let prev = if l == 0 { &cache.input } else { &cache.hidden[l - 1].out };
            g_weights[l] = prev.matmul_tn(&dz)?;
            if l > 0 {
                let mut dprev = dz.matmul_nt(&self.effective_weights(mask, l))?;
                if self.spec.use_skip {
                    dprev.add_assign(&dh)?;
                }
                dh = dprev;
            }
        }

        Ok(GradSnapshot {
            weights: g_weights,
            bn_gamma: g_gamma,
            bn_beta: g_beta,
            act: g_act,
        })
    }

    /// Every trainable parameter, weights first, then (γ, β) per BatchNorm
    /// layer, then activation parameters. Matches [`GradSnapshot::groups`].
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Matrix2)> {
        let mut out: Vec<(ParamKind, &mut Matrix2)> = self
            .weights
            .iter_mut()
            .enumerate()
            .map(|(l, w)| (ParamKind::Weight(l), w))
            .collect();
        for (l, bn) in self.bn.iter_mut().enumerate() {
            out.push((ParamKind::BnGamma(l), &mut bn.gamma));
            out.push((ParamKind::BnBeta(l), &mut bn.beta));
        }
        for (l, a) in self.act.iter_mut().enumerate() {
            if a.rows() > 0 {
                out.push((ParamKind::Activation(l), a));
            }
        }
        out
    }

    /// Zeroes stored weights at masked positions.
    pub fn apply_mask(&mut self, mask: &MaskSet) -> Result<()> {
        self.check_mask(Some(mask))?;
        for (w, m) in self.weights.iter_mut().zip(mask.layers()) {
            w.hadamard_in_place(m)?;
        }
        Ok(())
    }

    /// Loss and gradients for one labelled batch in train mode (running stats untouched).
    pub fn loss_and_grads(
        &self,
        mask: Option<&MaskSet>,
        x: &Matrix2,
        labels: &[usize],
    ) -> Result<(f64, GradSnapshot)> {
        let (logits, cache) = self.forward(mask, x, Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let grads = self.backward(mask, &cache, &dlogits)?;
        Ok((loss, grads))
    }

    /// Eval-mode mean loss and accuracy, computed in chunks of `chunk` rows.
    pub fn evaluate(
        &self,
        mask: Option<&MaskSet>,
        x: &Matrix2,
        labels: &[usize],
        chunk: usize,
    ) -> Result<(f64, f64)> {
        let n = x.rows();
        if n == 0 {
            return Ok((f64::NAN, 0.0));
        }
        let chunk = chunk.max(1);
        let mut loss_sum = 0.0;
        let mut correct = 0.0;
        let d = x.cols();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let xb = Matrix2::from_vec(end - start, d, x.as_slice()[start * d..end * d].to_vec())?;
            let (logits, _) = self.forward(mask, &xb, Mode::Eval)?;
            let yb = &labels[start..end];
            let (loss, _) = softmax_cross_entropy(&logits, yb)?;
            loss_sum += loss * yb.len() as f64;
            correct += accuracy(&logits, yb) * yb.len() as f64;
        }
        Ok((loss_sum / n as f64, correct / n as f64))
    }
}

/// Per-column mean and biased variance.
fn column_moments(z: &Matrix2) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mean: Vec<f64> = z.col_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; z.cols()];
    for i in 0..z.rows() {
        for (j, v) in z.row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}
