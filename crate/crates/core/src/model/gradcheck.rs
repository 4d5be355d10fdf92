use crate::error::Result;
use crate::linalg::Matrix2;
use crate::sparsity::MaskSet;

use super::{Mode, Network, ParamKind, softmax_cross_entropy};

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`,
/// so gradients far below the floor are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter group and flat index of the largest error.
    pub worst: Option<(ParamKind, usize)>,
    pub checked: usize,
}

/// Compares [`Network::backward`] against central differences with step `h`
/// for every trainable parameter, in train mode.
///
/// Weight gradients are checked at *all* positions, masked ones included: the
/// reference network carries `θ ⊙ m` as plain dense weights, whose derivative
/// is the effective-weight gradient that `backward` reports.
pub fn grad_check(
    net: &Network,
    mask: Option<&MaskSet>,
    x: &Matrix2,
    labels: &[usize],
    h: f64,
) -> Result<GradCheck> {
    let (_, grads) = net.loss_and_grads(mask, x, labels)?;
    let mut reference = net.clone();
    if let Some(m) = mask {
        reference.apply_mask(m)?;
    }
    let loss = |n: &Network| -> Result<f64> {
        let (logits, _) = n.forward(None, x, Mode::Train)?;
        Ok(softmax_cross_entropy(&logits, labels)?.0)
    };

    let analytic: Vec<Matrix2> = grads.groups().into_iter().cloned().collect();
    let kinds: Vec<ParamKind> = reference.params_mut().into_iter().map(|(k, _)| k).collect();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (g, (kind, a)) in kinds.into_iter().zip(&analytic).enumerate() {
        for k in 0..a.len() {
            let orig = reference.params_mut()[g].1.as_slice()[k];
            reference.params_mut()[g].1.as_mut_slice()[k] = orig + h;
            let up = loss(&reference)?;
            reference.params_mut()[g].1.as_mut_slice()[k] = orig - h;
            let down = loss(&reference)?;
            reference.params_mut()[g].1.as_mut_slice()[k] = orig;

            let numeric = (up - down) / (2.0 * h);
            let an = a.as_slice()[k];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if out.worst.is_none() || err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = Some((kind, k));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
