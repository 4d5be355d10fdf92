//! SGD, momentum, Adagrad, RMSProp, Adam and AdamW.
//!
//! Update rules, per parameter entry with gradient `g`:
//!
//! | kind     | rule |
//! |----------|------|
//! | sgd      | `w ← w − η g` |
//! | momentum | `u ← μ u + g`, `w ← w − η u` |
//! | adagrad  | `v ← v + g²`, `w ← w − η g / √(v + ε)` |
//! | rmsprop  | `v ← γ v + (1 − γ) g²`, `w ← w − η g / √(v + ε)` |
//! | adam     | `m ← β₁ m + (1 − β₁) g`, `v ← β₂ v + (1 − β₂) g²`, `w ← w − η m̂ / (√v̂ + ε)` |
//! | adamw    | adam, then `w ← w − η λ w_prev` |
//!
//! with `m̂ = m / (1 − β₁ᵗ)` and `v̂ = v / (1 − β₂ᵗ)`. Coupled L2 adds `λ w` to
//! the weight-matrix gradients before the rule. Weight-matrix gradients are
//! multiplied by the mask first, so masked positions never feed the moment
//! estimates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::model::{GradSnapshot, Network, ParamKind};
use crate::sparsity::MaskSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Rmsprop,
    Adam,
    Adamw,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Adagrad,
        OptimizerKind::Rmsprop,
        OptimizerKind::Adam,
        OptimizerKind::Adamw,
    ];

    /// Whether the second-moment estimate is an exponentially weighted moving
    /// average of squared gradients.
    pub fn is_ewma(self) -> bool {
        matches!(
            self,
            OptimizerKind::Adam | OptimizerKind::Adamw | OptimizerKind::Rmsprop
        )
    }

    fn uses_first_moment(self) -> bool {
        matches!(
            self,
            OptimizerKind::Momentum | OptimizerKind::Adam | OptimizerKind::Adamw
        )
    }

    fn uses_second_moment(self) -> bool {
        matches!(
            self,
            OptimizerKind::Adagrad | OptimizerKind::Rmsprop | OptimizerKind::Adam | OptimizerKind::Adamw
        )
    }
}

pub fn is_ewma(kind: OptimizerKind) -> bool {
    kind.is_ewma()
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Rmsprop => "rmsprop",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamw => "adamw",
        };
        f.write_str(s)
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown optimizer `{s}`")))
    }
}

fn default_momentum() -> f64 {
    0.9
}
fn default_rmsprop_decay() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// η.
    pub lr: f64,
    /// μ for SGD with momentum.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// γ for RMSProp.
    #[serde(default = "default_rmsprop_decay")]
    pub rmsprop_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// λ, used by coupled L2 and by AdamW's decoupled decay.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            momentum: default_momentum(),
            rmsprop_decay: default_rmsprop_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("rmsprop_decay", self.rmsprop_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "optimizer {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("rmsprop_decay", self.rmsprop_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if v >= 1.0 {
                return Err(Error::invalid(format!("optimizer {name} must be < 1, got {v}")));
            }
        }
        Ok(())
    }
}

/// Optimizer hyperparameters plus per-parameter moment accumulators.
///
/// `first` holds Adam's `m` or the momentum buffer `u`; `second` holds `v`.
/// Both are indexed like [`Network::params_mut`] and are empty for kinds that
/// do not use them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// Coupled L2 on weight matrices.
    pub coupled_l2: bool,
    pub t: u64,
    pub first: Vec<Matrix2>,
    pub second: Vec<Matrix2>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, coupled_l2: bool, net: &mut Network) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<(usize, usize)> = net.params_mut().iter().map(|(_, p)| p.shape()).collect();
        let zeros = |on: bool| -> Vec<Matrix2> {
            if on {
                shapes.iter().map(|&(r, c)| Matrix2::zeros(r, c)).collect()
            } else {
                Vec::new()
            }
        };
        Ok(Self {
            first: zeros(config.kind.uses_first_moment()),
            second: zeros(config.kind.uses_second_moment()),
            config,
            coupled_l2,
            t: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    /// Zeroes moment entries of weight matrices at masked positions, e.g. after
    /// pruning. Weight groups come first in parameter order.
    pub fn apply_mask(&mut self, mask: &MaskSet) -> Result<()> {
        for buf in [&mut self.first, &mut self.second] {
            if buf.is_empty() {
                continue;
            }
            for (m, layer) in buf.iter_mut().zip(mask.layers()) {
                m.hadamard_in_place(layer)?;
            }
        }
        Ok(())
    }

    /// One update of every parameter of `net` from `grads`.
    ///
    /// `grads` is not modified; weight gradients are masked (and L2-coupled) on
    /// a private copy.
    pub fn step(&mut self, net: &mut Network, grads: &GradSnapshot, mask: Option<&MaskSet>) -> Result<()> {
        let grad_groups = grads.groups();
        let mut params = net.params_mut();
        if grad_groups.len() != params.len() {
            return Err(Error::shape(
                "optimizer step",
                format!("{} gradients for {} parameters", grad_groups.len(), params.len()),
            ));
        }
        if let Some(m) = mask {
            let nw = params
                .iter()
                .filter(|(k, _)| matches!(k, ParamKind::Weight(_)))
                .count();
            if m.num_layers() != nw {
                return Err(Error::shape(
                    "optimizer step",
                    format!("mask has {} layers, network {nw}", m.num_layers()),
                ));
            }
        }
        self.t += 1;
        let c = self.config.clone();
        let t = self.t as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (i, ((kind, w), g)) in params.iter_mut().zip(grad_groups).enumerate() {
            if w.shape() != g.shape() {
                return Err(Error::shape(
                    "optimizer step",
                    format!("parameter {i}: {:?} vs gradient {:?}", w.shape(), g.shape()),
                ));
            }
            let mut g = g.clone();
            let is_weight = matches!(kind, ParamKind::Weight(_));
            if let (ParamKind::Weight(l), Some(m)) = (*kind, mask) {
                g.hadamard_in_place(&m.layers()[l])?;
            }
            if is_weight && self.coupled_l2 {
                for (gj, wj) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
                    *gj += c.weight_decay * wj;
                }
            }
            let decay = if is_weight && c.kind == OptimizerKind::Adamw {
                c.weight_decay
            } else {
                0.0
            };

            let ws = w.as_mut_slice();
            let gs = g.as_slice();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (wj, gj) in ws.iter_mut().zip(gs) {
                        *wj -= c.lr * gj;
                    }
                }
                OptimizerKind::Momentum => {
                    let u = self.first[i].as_mut_slice();
                    for ((wj, gj), uj) in ws.iter_mut().zip(gs).zip(u) {
                        *uj = c.momentum * *uj + gj;
                        *wj -= c.lr * *uj;
                    }
                }
                OptimizerKind::Adagrad => {
                    let v = self.second[i].as_mut_slice();
                    for ((wj, gj), vj) in ws.iter_mut().zip(gs).zip(v) {
                        *vj += gj * gj;
                        *wj -= c.lr * gj / (*vj + c.eps).sqrt();
                    }
                }
                OptimizerKind::Rmsprop => {
                    let v = self.second[i].as_mut_slice();
                    for ((wj, gj), vj) in ws.iter_mut().zip(gs).zip(v) {
                        *vj = c.rmsprop_decay * *vj + (1.0 - c.rmsprop_decay) * gj * gj;
                        *wj -= c.lr * gj / (*vj + c.eps).sqrt();
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let m = self.first[i].as_mut_slice();
                    let v = self.second[i].as_mut_slice();
                    for (((wj, gj), mj), vj) in ws.iter_mut().zip(gs).zip(m).zip(v) {
                        *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                        *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                        let m_hat = *mj / bias1;
                        let v_hat = *vj / bias2;
                        let prev = *wj;
                        *wj -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                        if decay != 0.0 {
                            *wj -= c.lr * decay * prev;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, NetworkSpec, WeightDist};
    use crate::rng::seeded;

    /// 1×1 "network" whose single weight layer holds `w` (a 1-input,
    /// 1-hidden-unit spec is the smallest valid one; only layer 0 is probed).
    fn scalar_net(w: f64) -> Network {
        let spec = NetworkSpec {
            input_dim: 1,
            output_dim: 1,
            hidden_layers: 1,
            hidden_width: 1,
            activation: Activation::Relu,
            use_batchnorm: false,
            use_skip: false,
        };
        let mut net = Network::init(spec, &[WeightDist::Constant { value: w }; 2], &mut seeded(0)).unwrap();
        net.weights[1] = Matrix2::filled(1, 1, 0.0);
        net
    }

    fn scalar_grads(g: f64) -> GradSnapshot {
        GradSnapshot {
            weights: vec![Matrix2::filled(1, 1, g), Matrix2::zeros(1, 1)],
            bn_gamma: vec![],
            bn_beta: vec![],
            act: vec![Matrix2::zeros(0, 1)],
        }
    }

    fn one_step(kind: OptimizerKind, lr: f64, w: f64, g: f64) -> (f64, OptimizerState) {
        let mut net = scalar_net(w);
        let mut opt = OptimizerState::new(OptimizerConfig::new(kind, lr), false, &mut net).unwrap();
        opt.step(&mut net, &scalar_grads(g), None).unwrap();
        (net.weights[0].get(0, 0), opt)
    }

    #[test]
    fn sgd_single_step() {
        assert_eq!(one_step(OptimizerKind::Sgd, 0.1, 1.0, 0.5).0, 0.95);
    }

    #[test]
    fn adam_first_step() {
        // t = 1: m̂ = g = 1, v̂ = g² = 1, Δw = −η / (1 + ε).
        let (w, opt) = one_step(OptimizerKind::Adam, 0.001, 0.0, 1.0);
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((w - expected).abs() <= 1e-12 * expected.abs());
        assert!((w + 0.000999999990).abs() < 1e-15);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adagrad_first_step() {
        let (w, opt) = one_step(OptimizerKind::Adagrad, 0.1, 0.0, 2.0);
        assert_eq!(opt.second[0].get(0, 0), 4.0);
        let expected = -0.1 * 2.0 / (4.0f64 + 1e-8).sqrt();
        assert!((w - expected).abs() <= 1e-12 * expected.abs());
        assert!((w + 0.1).abs() < 1e-9);
    }

    #[test]
    fn momentum_and_rmsprop_two_steps() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Momentum, 0.1), false, &mut net).unwrap();
        opt.step(&mut net, &scalar_grads(1.0), None).unwrap();
        opt.step(&mut net, &scalar_grads(1.0), None).unwrap();
        // u₁ = 1, u₂ = 1.9; w = 1 − 0.1 − 0.19.
        assert!((net.weights[0].get(0, 0) - (1.0 - 0.1 - 0.19)).abs() < 1e-15);

        let mut net = scalar_net(0.0);
        let mut opt = OptimizerState::new(OptimizerConfig::new(OptimizerKind::Rmsprop, 0.01), false, &mut net).unwrap();
        opt.step(&mut net, &scalar_grads(2.0), None).unwrap();
        // v = (1 − 0.9) · 4 ≈ 0.4.
        let v = (1.0 - 0.9) * 4.0;
        assert_eq!(opt.second[0].get(0, 0), v);
        let expected = -0.01 * 2.0 / (v + 1e-8f64).sqrt();
        assert!((net.weights[0].get(0, 0) - expected).abs() <= 1e-12 * expected.abs());
    }

    #[test]
    fn coupled_l2_adds_lambda_w() {
        let mut net = scalar_net(2.0);
        let mut cfg = OptimizerConfig::new(OptimizerKind::Sgd, 0.5);
        cfg.weight_decay = 0.25;
        let mut opt = OptimizerState::new(cfg, true, &mut net).unwrap();
        opt.step(&mut net, &scalar_grads(1.0), None).unwrap();
        // g' = 1 + 0.25 · 2 = 1.5; w = 2 − 0.75.
        assert_eq!(net.weights[0].get(0, 0), 1.25);
    }

    #[test]
    fn adam_step_inverts_to_gradient() {
        // At t = 1, Δw = −η g / (|g| + ε), so |g| = ε |Δw| / (η − |Δw|). The
        // inversion is well conditioned when |g| is of order ε, which is where
        // these probes sit.
        for g in [-7.5e-8, -1e-8, 3e-9, 2.5e-8, 1e-7] {
            let (w, _) = one_step(OptimizerKind::Adam, 0.001, 0.0, g);
            let d = -w;
            let recovered = d * 1e-8 / (0.001 - d.abs());
            assert!((recovered - g).abs() <= 1e-12 * g.abs(), "{recovered} vs {g}");
        }
    }

    #[test]
    fn ewma_classification() {
        assert!(is_ewma(OptimizerKind::Adam));
        assert!(is_ewma(OptimizerKind::Adamw));
        assert!(is_ewma(OptimizerKind::Rmsprop));
        assert!(!is_ewma(OptimizerKind::Adagrad));
        assert!(!is_ewma(OptimizerKind::Sgd));
        assert!(!is_ewma(OptimizerKind::Momentum));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut net = scalar_net(0.0);
        let mut cfg = OptimizerConfig::new(OptimizerKind::Adam, -0.1);
        assert!(OptimizerState::new(cfg.clone(), false, &mut net).is_err());
        cfg.lr = 0.1;
        cfg.beta2 = 1.0;
        assert!(OptimizerState::new(cfg, false, &mut net).is_err());
        assert!("nesterov".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn adagrad_v_nondecreasing_and_ewma_v_bounded() {
        use rand::Rng as _;
        let mut rng = seeded(5);
        let gs: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..3.0)).collect();
        for kind in [OptimizerKind::Adagrad, OptimizerKind::Rmsprop, OptimizerKind::Adam] {
            let mut net = scalar_net(0.0);
            let mut opt = OptimizerState::new(OptimizerConfig::new(kind, 1e-3), false, &mut net).unwrap();
            let mut prev = 0.0;
            let (mut lo, mut hi) = (0.0f64, 0.0f64);
            for &g in &gs {
                opt.step(&mut net, &scalar_grads(g), None).unwrap();
                let v = opt.second[0].get(0, 0);
                lo = lo.min(g * g);
                hi = hi.max(g * g);
                if kind == OptimizerKind::Adagrad {
                    assert!(v >= prev);
                } else {
                    assert!(v >= lo && v <= hi * (1.0 + 1e-15));
                }
                prev = v;
            }
        }
    }
}
