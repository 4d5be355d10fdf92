//! Gradient-flow measures.
//!
//! * `gf_p` is the p-norm of all weight-matrix gradients concatenated into one
//!   vector, masked positions included.
//! * `EGF_p` masks each layer's gradient, takes its p-norm, and averages over
//!   layers, so every layer counts equally and only active weights contribute.
//!
//! Both use weight-matrix gradients only. For a dense network and `p = 1` the
//! two differ by exactly the factor `1 / L`: `gf_1` is accumulated as the sum of
//! per-layer L1 norms, and `EGF_1` divides that same sum by `L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix2, PNorm};
use crate::model::GradSnapshot;
use crate::sparsity::MaskSet;

pub const MEASUREMENT_POINTS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowReading {
    pub epoch: usize,
    /// Identifies the fixed batch the gradient was taken on.
    pub probe_id: u64,
    pub gf1: f64,
    pub gf2: f64,
    pub egf1: f64,
    pub egf2: f64,
}

impl FlowReading {
    /// All four measures of one snapshot.
    pub fn from_snapshot(
        epoch: usize,
        probe_id: u64,
        snapshot: &GradSnapshot,
        mask: Option<&MaskSet>,
    ) -> Result<Self> {
        Ok(FlowReading {
            epoch,
            probe_id,
            gf1: grad_norm(snapshot, PNorm::L1)?,
            gf2: grad_norm(snapshot, PNorm::L2)?,
            egf1: egf(snapshot, mask, PNorm::L1)?,
            egf2: egf(snapshot, mask, PNorm::L2)?,
        })
    }

    pub fn get(&self, measure: FlowMeasure) -> f64 {
        match measure {
            FlowMeasure::Gf1 => self.gf1,
            FlowMeasure::Gf2 => self.gf2,
            FlowMeasure::Egf1 => self.egf1,
            FlowMeasure::Egf2 => self.egf2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMeasure {
    Gf1,
    Gf2,
    Egf1,
    Egf2,
}

impl FlowMeasure {
    pub const ALL: [FlowMeasure; 4] = [
        FlowMeasure::Gf1,
        FlowMeasure::Gf2,
        FlowMeasure::Egf1,
        FlowMeasure::Egf2,
    ];

    /// Row label used in correlation reports.
    pub fn label(self) -> &'static str {
        match self {
            FlowMeasure::Gf1 => "||g||_1",
            FlowMeasure::Gf2 => "||g||_2",
            FlowMeasure::Egf1 => "EGF_1",
            FlowMeasure::Egf2 => "EGF_2",
        }
    }
}

/// `gf_p`: p-norm of the concatenation of every layer's weight gradient.
pub fn grad_norm(snapshot: &GradSnapshot, p: PNorm) -> Result<f64> {
    if snapshot.weights.is_empty() {
        return Err(Error::invalid("empty gradient snapshot"));
    }
    Ok(match p {
        PNorm::L1 => snapshot.weights.iter().map(|g| g.pnorm(PNorm::L1)).sum(),
        PNorm::L2 => snapshot
            .weights
            .iter()
            .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt(),
    })
}

/// `EGF_p`: mean over layers of `‖g^l ⊙ m^l‖_p`. No mask means all ones.
pub fn egf(snapshot: &GradSnapshot, mask: Option<&MaskSet>, p: PNorm) -> Result<f64> {
    let layers = snapshot.num_layers();
    if layers == 0 {
        return Err(Error::invalid("empty gradient snapshot"));
    }
    let total: f64 = match mask {
        None => snapshot.weights.iter().map(|g| g.pnorm(p)).sum(),
        Some(m) => {
            if m.num_layers() != layers {
                return Err(Error::shape(
                    "egf",
                    format!("mask has {} layers, snapshot {layers}", m.num_layers()),
                ));
            }
            snapshot
                .weights
                .iter()
                .zip(m.layers())
                .map(|(g, ml)| g.hadamard(ml).map(|x: Matrix2| x.pnorm(p)))
                .sum::<Result<f64>>()?
        }
    };
    Ok(total / layers as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSchedule {
    pub total_epochs: usize,
    pub points: Vec<usize>,
}

impl MeasurementSchedule {
    pub fn contains(&self, epoch: usize) -> bool {
        self.points.binary_search(&epoch).is_ok()
    }
}

/// Epochs (1-based, counted at epoch end) at which flow is measured:
/// `max(1, round(i·E/(count−1)))` for `i = 0..count`.
///
/// When `E ≤ count` every epoch is used. For slightly larger `E` the clamp at
/// 1 can collide with the second point; collisions are pushed forward one
/// epoch at a time, which keeps `count` strictly increasing points ending at `E`.
pub fn measurement_epochs(total_epochs: usize, count: usize) -> MeasurementSchedule {
    let points = if total_epochs <= count || count < 2 {
        (1..=total_epochs).collect()
    } else {
        let mut pts: Vec<usize> = (0..count)
            .map(|i| ((i * total_epochs) as f64 / (count - 1) as f64).round() as usize)
            .map(|p| p.max(1))
            .collect();
        for i in 1..count {
            if pts[i] <= pts[i - 1] {
                pts[i] = pts[i - 1] + 1;
            }
        }
        pts
    };
    MeasurementSchedule {
        total_epochs,
        points,
    }
}

/// Per-measure arithmetic mean over `readings`; `None` when empty.
pub fn average_flow(readings: &[FlowReading]) -> Option<FlowReading> {
    if readings.is_empty() {
        return None;
    }
    let n = readings.len() as f64;
    let mean = |f: fn(&FlowReading) -> f64| readings.iter().map(f).sum::<f64>() / n;
    Some(FlowReading {
        epoch: readings.last().map_or(0, |r| r.epoch),
        probe_id: readings[0].probe_id,
        gf1: mean(|r| r.gf1),
        gf2: mean(|r| r.gf2),
        egf1: mean(|r| r.egf1),
        egf2: mean(|r| r.egf2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn snap(layers: Vec<Matrix2>) -> GradSnapshot {
        GradSnapshot {
            weights: layers,
            bn_gamma: vec![],
            bn_beta: vec![],
            act: vec![],
        }
    }

    fn row(v: &[f64]) -> Matrix2 {
        Matrix2::from_rows(&[v]).unwrap()
    }

    #[test]
    fn grad_norm_examples() {
        assert_eq!(grad_norm(&snap(vec![row(&[3.0, 4.0])]), PNorm::L2).unwrap(), 5.0);
        assert_eq!(
            grad_norm(&snap(vec![row(&[1.0, -1.0]), row(&[2.0])]), PNorm::L1).unwrap(),
            4.0
        );
        assert!(grad_norm(&snap(vec![]), PNorm::L1).is_err());
    }

    #[test]
    fn grad_norm_matches_concatenation() {
        let mut rng = seeded(4);
        let layers: Vec<Matrix2> = [(3, 4), (4, 4), (4, 2)]
            .iter()
            .map(|&(r, c)| Matrix2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let flat: Vec<f64> = layers.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let oracle = flat.iter().map(|x| x * x).sum::<f64>().sqrt();
        let got = grad_norm(&snap(layers), PNorm::L2).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn egf_examples() {
        // ‖·‖₂ of 5 and 3.
        let s = snap(vec![row(&[3.0, 4.0]), row(&[3.0, 0.0])]);
        assert_eq!(egf(&s, None, PNorm::L2).unwrap(), 4.0);
        let ones = MaskSet::all_ones(&[(1, 2), (1, 2)]);
        assert_eq!(egf(&s, Some(&ones), PNorm::L2).unwrap(), 4.0);

        let s = snap(vec![row(&[3.0, 4.0])]);
        let m = MaskSet::new(vec![row(&[1.0, 0.0])]).unwrap();
        assert_eq!(egf(&s, Some(&m), PNorm::L2).unwrap(), 3.0);

        let wrong = MaskSet::all_ones(&[(1, 2), (1, 2)]);
        assert!(egf(&s, Some(&wrong), PNorm::L2).is_err());
    }

    #[test]
    fn dense_egf1_is_gf1_over_layers() {
        let mut rng = seeded(9);
        let layers: Vec<Matrix2> = [(5, 3), (3, 3), (3, 2)]
            .iter()
            .map(|&(r, c)| Matrix2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let s = snap(layers);
        let gf1 = grad_norm(&s, PNorm::L1).unwrap();
        assert_eq!(egf(&s, None, PNorm::L1).unwrap(), gf1 / 3.0);
    }

    #[test]
    fn schedule_examples() {
        let s = measurement_epochs(1000, 11);
        assert_eq!(
            s.points,
            vec![1, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]
        );
        let s = measurement_epochs(500, 11);
        assert_eq!(s.points, vec![1, 50, 100, 150, 200, 250, 300, 350, 400, 450, 500]);
        assert_eq!(measurement_epochs(10, 11).points, (1..=10).collect::<Vec<_>>());
        assert_eq!(measurement_epochs(30, 11).points, vec![1, 3, 6, 9, 12, 15, 18, 21, 24, 27, 30]);
        assert!(measurement_epochs(0, 11).points.is_empty());
    }

    #[test]
    fn schedule_is_strict_for_every_small_horizon() {
        for e in 11..200 {
            let s = measurement_epochs(e, 11);
            assert_eq!(s.points.len(), 11, "E = {e}");
            assert_eq!(s.points[0], 1);
            assert_eq!(*s.points.last().unwrap(), e);
            assert!(s.points.windows(2).all(|w| w[0] < w[1]), "E = {e}: {:?}", s.points);
        }
    }

    #[test]
    fn average_flow_examples() {
        let r = |e, v| FlowReading { epoch: e, probe_id: 0, gf1: v, gf2: v, egf1: v, egf2: v };
        assert_eq!(average_flow(&[]), None);
        let single = r(3, 2.5);
        assert_eq!(average_flow(&[single]).unwrap(), single);
        let constant: Vec<_> = (1..=5).map(|e| r(e, 0.75)).collect();
        assert_eq!(average_flow(&constant).unwrap().egf2, 0.75);
        let vals = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5];
        let readings: Vec<_> = vals.iter().enumerate().map(|(i, &v)| r(i, v)).collect();
        // Hand sum 33.0 over 11 points.
        assert_eq!(average_flow(&readings).unwrap().gf1, 3.0);
    }

    fn arb_snapshot() -> impl Strategy<Value = (GradSnapshot, MaskSet, MaskSet)> {
        (any::<u64>(), 1usize..5).prop_map(|(seed, layers)| {
            let mut rng = seeded(seed);
            let shapes: Vec<(usize, usize)> = (0..layers)
                .map(|_| (rng.random_range(1..6), rng.random_range(1..6)))
                .collect();
            let grads = shapes
                .iter()
                .map(|&(r, c)| Matrix2::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0)))
                .collect();
            let mut coarse = Vec::new();
            let mut fine = Vec::new();
            for &(r, c) in &shapes {
                let a = Matrix2::from_fn(r, c, |_, _| f64::from(u8::from(rng.random_bool(0.7))));
                // `fine` keeps a random subset of `coarse`.
                let b = Matrix2::from_fn(r, c, |i, j| a.get(i, j) * f64::from(u8::from(rng.random_bool(0.5))));
                coarse.push(a);
                fine.push(b);
            }
            (snap(grads), MaskSet::new(coarse).unwrap(), MaskSet::new(fine).unwrap())
        })
    }

    proptest! {
        #[test]
        fn more_masking_never_increases_egf((s, coarse, fine) in arb_snapshot()) {
            for p in [PNorm::L1, PNorm::L2] {
                let full = egf(&s, None, p).unwrap();
                let c = egf(&s, Some(&coarse), p).unwrap();
                let f = egf(&s, Some(&fine), p).unwrap();
                prop_assert!(c <= full && f <= c);
            }
        }

        #[test]
        fn l2_flow_never_exceeds_l1((s, _, _) in arb_snapshot()) {
            prop_assert!(grad_norm(&s, PNorm::L2).unwrap() <= grad_norm(&s, PNorm::L1).unwrap());
        }

        #[test]
        fn measures_are_absolutely_homogeneous((s, m, _) in arb_snapshot(), c in 0.01f64..100.0) {
            let a = FlowReading::from_snapshot(0, 0, &s, Some(&m)).unwrap();
            let b = FlowReading::from_snapshot(0, 0, &s.scaled(c), Some(&m)).unwrap();
            for meas in FlowMeasure::ALL {
                let (x, y) = (a.get(meas) * c, b.get(meas));
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
            }
        }

        #[test]
        fn measures_are_permutation_invariant_within_a_layer((s, _, _) in arb_snapshot(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = seeded(seed);
            let permuted = snap(s.weights.iter().map(|g| {
                let mut v = g.as_slice().to_vec();
                v.shuffle(&mut rng);
                Matrix2::from_vec(g.rows(), g.cols(), v).unwrap()
            }).collect());
            let a = FlowReading::from_snapshot(0, 0, &s, None).unwrap();
            let b = FlowReading::from_snapshot(0, 0, &permuted, None).unwrap();
            for meas in FlowMeasure::ALL {
                prop_assert!((a.get(meas) - b.get(meas)).abs() <= 1e-12 * a.get(meas).max(1e-300));
            }
        }
    }
}
