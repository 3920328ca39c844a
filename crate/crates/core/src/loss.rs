//! Gated multi-branch negative log-likelihood.
//!
//! For branch probabilities `p_m`, labels `y` and gating weights `g_m`,
//!
//! ```text
//! L = -(1/N) Σ_i Σ_m g_{m,i} [y_i log p_{m,i} + (1 - y_i) log(1 - p_{m,i})]
//! ```
//!
//! where `N` is the voxel count. With a logistic link `p = σ(z)` the
//! derivative with respect to the branch logit is `g_{m,i} (p_{m,i} - y_i) / N`.

use crate::error::Result;
use crate::gating::{GatingWeights, BRANCHES};
use crate::scalar::Real;
use crate::volume::{BinaryMask, Volume};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct GatedLossInput<'a, T> {
    probs: [&'a Volume<T>; 2],
    labels: &'a BinaryMask,
    weights: &'a GatingWeights<T>,
}

impl<'a, T: Real> GatedLossInput<'a, T> {
    pub fn new(probs: [&'a Volume<T>; 2], labels: &'a BinaryMask, weights: &'a GatingWeights<T>) -> Result<Self> {
        let g = labels.grid();
        probs[0].grid().ensure_same(g, "proximal probabilities vs labels")?;
        probs[1].grid().ensure_same(g, "distal probabilities vs labels")?;
        weights.grid().ensure_same(g, "gating weights vs labels")?;
        Ok(Self { probs, labels, weights })
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }
}

#[inline]
fn voxel_nll(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean gated NLL over all voxels, accumulated in f64 in voxel order.
pub fn gated_nll<T: Real>(input: &GatedLossInput<'_, T>) -> f64 {
    let labels = input.labels.data();
    let mut total = 0.0f64;
    for b in BRANCHES {
        let p = input.probs[b as usize].data();
        let g = input.weights.branch(b).data();
        let mut branch = 0.0f64;
        for i in 0..labels.len() {
            let w = g[i].widen();
            if w != 0.0 {
                branch += w * voxel_nll(p[i].widen(), labels[i]);
            }
        }
        total += branch;
    }
    total / labels.len() as f64
}

/// Per-branch gradient of [`gated_nll`] with respect to the branch logits.
///
/// Entries smaller in magnitude than `sqrt(T::MIN_POSITIVE)` are set to
/// zero, so products formed during backpropagation stay out of the
/// subnormal range.
pub fn gated_nll_grad<T: Real>(input: &GatedLossInput<'_, T>) -> [Volume<T>; 2] {
    let labels = input.labels.data();
    let n = T::lit(labels.len() as f64);
    let floor = T::min_positive_value().sqrt();
    BRANCHES.map(|b| {
        let p = input.probs[b as usize].data();
        let g = input.weights.branch(b).data();
        let data = (0..labels.len())
            .map(|i| {
                let y = if labels[i] { T::one() } else { T::zero() };
                let v = g[i] * (p[i] - y) / n;
                if v.abs() < floor {
                    T::zero()
                } else {
                    v
                }
            })
            .collect();
        Volume::new(*input.labels.grid(), data).expect("grid checked at construction")
    })
}
