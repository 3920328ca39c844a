//! Sliding-window prediction with per-voxel gated fusion of both branches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GatingParams, GatingWeights};
use crate::model::{forward, FeatureMap, SegmenterParams};
use crate::pipeline::{CaseRecord, InputNormalization, DEFAULT_CROP};
use crate::scalar::Real;
use crate::volume::{crop_at, Volume};

pub const DEFAULT_STRIDE: [usize; 3] = [64, 64, 32];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window: DEFAULT_CROP, stride: DEFAULT_STRIDE }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.window[a] {
                return Err(Error::InvalidArgument(format!(
                    "need 0 < stride <= window on every axis, got window {:?} stride {:?}",
                    self.window, self.stride
                )));
            }
        }
        Ok(())
    }
}

/// Window starts along one axis. The last window is clamped to the edge;
/// a window at least as large as the axis collapses to one start at 0.
pub fn window_starts(dim: usize, window: usize, stride: usize) -> Vec<usize> {
    if window >= dim {
        return vec![0];
    }
    let last = dim - window;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// All window origins in z, y, x order.
pub fn window_origins(dims: [usize; 3], cfg: &WindowConfig) -> Vec<[usize; 3]> {
    let s: [Vec<usize>; 3] = std::array::from_fn(|a| window_starts(dims[a], cfg.window[a], cfg.stride[a]));
    let mut out = Vec::with_capacity(s[0].len() * s[1].len() * s[2].len());
    for &z in &s[2] {
        for &y in &s[1] {
            for &x in &s[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

fn crop_features<T: Real>(input: &FeatureMap<T>, start: [usize; 3], size: [usize; 3]) -> Result<FeatureMap<T>> {
    let start = start.map(|v| v as i64);
    let chans: Vec<Volume<T>> =
        (0..input.channels()).map(|c| crop_at(&input.channel_volume(c), start, size)).collect::<Result<_>>()?;
    FeatureMap::from_channels(&chans.iter().collect::<Vec<_>>())
}

/// Per-branch probabilities over the whole input, averaging overlapping
/// windows by visit count.
pub fn sliding_window_branches<T: Real>(
    params: &SegmenterParams<T>,
    input: &FeatureMap<T>,
    cfg: &WindowConfig,
) -> Result<[Volume<T>; 2]> {
    cfg.validate()?;
    let grid = *input.grid();
    let dims = grid.dims();
    let size: [usize; 3] = std::array::from_fn(|a| cfg.window[a].min(dims[a]));
    let origins = window_origins(dims, cfg);
    let outputs: Vec<[Volume<T>; 2]> = origins
        .par_iter()
        .map(|&o| Ok(forward(params, &crop_features(input, o, size)?)?.probs))
        .collect::<Result<_>>()?;
    let mut sums = [vec![0.0f64; grid.len()], vec![0.0f64; grid.len()]];
    let mut visits = vec![0u32; grid.len()];
    for (o, probs) in origins.iter().zip(&outputs) {
        for z in 0..size[2] {
            for y in 0..size[1] {
                let dst = grid.index(o[0], o[1] + y, o[2] + z);
                let src = size[0] * (y + size[1] * z);
                for x in 0..size[0] {
                    visits[dst + x] += 1;
                    for b in 0..2 {
                        sums[b][dst + x] += probs[b].data()[src + x].widen();
                    }
                }
            }
        }
    }
    Ok(sums.map(|s| {
        let data = s.iter().zip(&visits).map(|(&v, &n)| T::lit(if n == 1 { v } else { v / n as f64 })).collect();
        Volume::new(grid, data).expect("sized from grid")
    }))
}

/// `P = G_prox p_prox + G_dist p_dist`, evaluated in f64 and clamped to
/// the per-voxel branch range.
pub fn fuse<T: Real>(probs: [&Volume<T>; 2], weights: &GatingWeights<T>) -> Result<Volume<T>> {
    let g = weights.grid();
    probs[0].grid().ensure_same(g, "proximal probabilities vs gating")?;
    probs[1].grid().ensure_same(g, "distal probabilities vs gating")?;
    let (pp, pd) = (probs[0].data(), probs[1].data());
    let (gp, gd) = (weights.proximal().data(), weights.distal().data());
    let data = (0..g.len())
        .map(|i| {
            let (a, b) = (pp[i].widen(), pd[i].widen());
            let v = gp[i].widen() * a + gd[i].widen() * b;
            T::lit(v.clamp(a.min(b), a.max(b)))
        })
        .collect();
    Volume::new(*g, data)
}

/// Fused prediction for `input` with gating weights built once for the
/// whole volume.
pub fn sliding_window_fused<T: Real>(
    params: &SegmenterParams<T>,
    input: &FeatureMap<T>,
    weights: &GatingWeights<T>,
    cfg: &WindowConfig,
) -> Result<Volume<T>> {
    weights.grid().ensure_same(input.grid(), "gating weights vs input")?;
    let [pp, pd] = sliding_window_branches(params, input, cfg)?;
    fuse([&pp, &pd], weights)
}

pub fn case_weights(case: &CaseRecord, gating: GatingParams) -> Result<GatingWeights<f32>> {
    match gating {
        GatingParams::Ungated => Ok(GatingWeights::ungated(*case.grid())),
        g => GatingWeights::from_distance(&case.distance, g),
    }
}

/// Fused probability volume for a prepared case.
pub fn sliding_window_predict(
    params: &SegmenterParams<f32>,
    case: &CaseRecord,
    norm: &InputNormalization,
    cfg: &WindowConfig,
    gating: GatingParams,
) -> Result<Volume<f32>> {
    let input = norm.case_input(case)?;
    sliding_window_fused(params, &input, &case_weights(case, gating)?, cfg)
}
