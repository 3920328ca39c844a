//! Central finite-difference check of the loss-through-model gradient.

use serde::Serialize;

use super::{backward, forward_cached, ForwardCache, SegmenterParams};
use crate::error::{Error, Result};
use crate::gating::GatingWeights;
use crate::loss::{gated_nll, gated_nll_grad, GatedLossInput};
use crate::model::FeatureMap;
use crate::scalar::Real;
use crate::volume::BinaryMask;

/// Default parameter step for the 64-bit difference quotients.
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name and flat index of the worst parameter.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Parameters whose ±step perturbation flips a ReLU; the loss is not
    /// differentiable there so they are left out of the maximum.
    pub skipped_kinks: usize,
}

fn relu_pattern(cache: &ForwardCache<f64>) -> Vec<bool> {
    cache.activations.iter().flat_map(|a| a.data().iter().map(|&v| v > 0.0)).collect()
}

fn loss_at(
    params: &SegmenterParams<f64>,
    input: &FeatureMap<f64>,
    labels: &BinaryMask,
    weights: &GatingWeights<f64>,
) -> Result<(f64, Vec<bool>)> {
    let (out, cache) = forward_cached(params, input)?;
    let l = gated_nll(&GatedLossInput::new([&out.probs[0], &out.probs[1]], labels, weights)?);
    Ok((l, relu_pattern(&cache)))
}

/// Compare the analytic gradient, computed in `T`, with central
/// differences of the loss evaluated in f64 at the same parameters.
///
/// The relative error of a parameter is `|a - n| / max(|a|, |n|, 1e-3 * s)`
/// where `s` is the largest analytic gradient magnitude, so entries that are
/// numerically zero do not dominate.
pub fn check_gradients<T: Real>(
    params: &SegmenterParams<T>,
    input: &FeatureMap<T>,
    labels: &BinaryMask,
    weights: &GatingWeights<T>,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (out, cache) = forward_cached(params, input)?;
    let loss_in = GatedLossInput::new([&out.probs[0], &out.probs[1]], labels, weights)?;
    let [gp, gd] = gated_nll_grad(&loss_in);
    let analytic = backward(params, input, &cache, [&gp, &gd])?;

    let p64 = params.cast::<f64>();
    let x64 = input.cast::<f64>();
    let w64 = weights.cast::<f64>();
    let (_, base_pattern) = loss_at(&p64, &x64, labels, &w64)?;
    let scale = analytic.tensors().iter().flat_map(|t| t.iter()).fold(0.0f64, |m, v| m.max(v.widen().abs()));
    let floor = 1e-3 * scale;

    let names = params.tensor_names();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
    let mut probe = p64.clone();
    for (t, grad) in analytic.tensors().iter().enumerate() {
        for (i, a) in grad.iter().enumerate() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + step;
            let (lp, pat_p) = loss_at(&probe, &x64, labels, &w64)?;
            probe.tensors_mut()[t][i] = orig - step;
            let (lm, pat_m) = loss_at(&probe, &x64, labels, &w64)?;
            probe.tensors_mut()[t][i] = orig;
            if pat_p != base_pattern || pat_m != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * step);
            let a = a.widen();
            let denom = a.abs().max(fd.abs()).max(floor);
            let rel = if denom > 0.0 { (a - fd).abs() / denom } else { 0.0 };
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((names[t].clone(), i));
            }
        }
    }
    Ok(report)
}
