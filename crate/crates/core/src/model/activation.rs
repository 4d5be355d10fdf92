//! The six hidden-layer nonlinearities and their derivatives.
//!
//! PReLU and SReLU carry learnable per-unit parameters. They are stored as a
//! `rows × width` [`Matrix2`] per hidden layer, one row per parameter:
//!
//! | activation | rows                      |
//! |------------|---------------------------|
//! | PReLU      | `alpha`                   |
//! | SReLU      | `t_l`, `a_l`, `t_r`, `a_r` |
//! | others     | none                      |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::Matrix2;

pub const PRELU_INIT_SLOPE: f64 = 0.25;
pub const ELU_ALPHA: f64 = 1.0;

/// SReLU initial `(t_l, a_l, t_r, a_r)`: leaky-linear below 0, identity up to 1.
pub const SRELU_INIT: [f64; 4] = [0.0, 0.01, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Prelu,
    Elu,
    Swish,
    Srelu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::Prelu,
        Activation::Elu,
        Activation::Swish,
        Activation::Srelu,
        Activation::Sigmoid,
    ];

    /// Inputs where the function is not twice differentiable, for a unit with
    /// parameters `p`. ELU's first derivative is continuous at 0, its second is not.
    pub fn kinks(self, p: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu | Activation::Prelu | Activation::Elu => vec![0.0],
            Activation::Srelu => vec![p[0], p[2]],
            _ => Vec::new(),
        }
    }

    /// Number of learnable parameters per unit.
    pub fn param_rows(self) -> usize {
        match self {
            Activation::Prelu => 1,
            Activation::Srelu => 4,
            _ => 0,
        }
    }

    /// Initial parameter matrix for a layer of `width` units.
    pub fn init_params(self, width: usize) -> Matrix2 {
        match self {
            Activation::Prelu => Matrix2::filled(1, width, PRELU_INIT_SLOPE),
            Activation::Srelu => Matrix2::from_fn(4, width, |r, _| SRELU_INIT[r]),
            _ => Matrix2::zeros(0, width),
        }
    }

    /// Value at `x` for a unit whose parameters are `p` (empty when none).
    #[inline]
    pub fn forward(self, x: f64, p: &[f64]) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Prelu => {
                if x > 0.0 {
                    x
                } else {
                    p[0] * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Swish => x * sigmoid(x),
            Activation::Srelu => {
                let (tl, al, tr, ar) = (p[0], p[1], p[2], p[3]);
                if x <= tl {
                    al * (x - tl) + tl
                } else if x >= tr {
                    ar * (x - tr) + tr
                } else {
                    x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// d/dx. At the kinks of ReLU/PReLU the left derivative is used.
    #[inline]
    pub fn derivative(self, x: f64, p: &[f64]) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Prelu => {
                if x > 0.0 {
                    1.0
                } else {
                    p[0]
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    ELU_ALPHA * x.exp()
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Srelu => {
                if x <= p[0] {
                    p[1]
                } else if x >= p[2] {
                    p[3]
                } else {
                    1.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    /// Accumulates d/dp into `out` (same length as `p`), scaled by `upstream`.
    #[inline]
    pub fn param_grad(self, x: f64, p: &[f64], upstream: f64, out: &mut [f64]) {
        match self {
            Activation::Prelu => {
                if x <= 0.0 {
                    out[0] += upstream * x;
                }
            }
            Activation::Srelu => {
                let (tl, al, tr, ar) = (p[0], p[1], p[2], p[3]);
                if x <= tl {
                    out[0] += upstream * (1.0 - al);
                    out[1] += upstream * (x - tl);
                } else if x >= tr {
                    out[2] += upstream * (1.0 - ar);
                    out[3] += upstream * (x - tr);
                }
            }
            _ => {}
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Prelu => "prelu",
            Activation::Elu => "elu",
            Activation::Swish => "swish",
            Activation::Srelu => "srelu",
            Activation::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Activation::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown activation `{s}`")))
    }
}
