//! Detection instances from probability maps and the overlap + radius hit
//! criterion.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume, VolumeGrid};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_VOXELS: usize = 4;
/// Accepted range of predicted / ground-truth radius.
pub const RADIUS_RATIO_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub threshold: f64,
    pub min_voxels: usize,
    pub confidence: Confidence,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, min_voxels: DEFAULT_MIN_VOXELS, confidence: Confidence::Mean }
    }
}

/// Radius of the sphere with the same physical volume as `n_voxels` voxels.
pub fn equivalent_radius_mm(n_voxels: usize, grid: &VolumeGrid) -> f64 {
    (3.0 * n_voxels as f64 * grid.voxel_volume_mm3() / (4.0 * PI)).cbrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePrediction {
    pub case_id: String,
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub confidence: f64,
    pub equivalent_radius_mm: f64,
    /// Mean voxel coordinate.
    pub centroid: [f64; 3],
}

/// 26-connected components of `mask`, labelled in order of their first
/// voxel. Each component's voxels are returned sorted.
pub fn connected_components(mask: &[bool], grid: &VolumeGrid) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = grid.dims();
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let [x, y, z] = grid.coords(i);
            for dz in -1i64..=1 {
                let zz = z as i64 + dz;
                if zz < 0 || zz >= nz as i64 {
                    continue;
                }
                for dy in -1i64..=1 {
                    let yy = y as i64 + dy;
                    if yy < 0 || yy >= ny as i64 {
                        continue;
                    }
                    for dx in -1i64..=1 {
                        let xx = x as i64 + dx;
                        if xx < 0 || xx >= nx as i64 {
                            continue;
                        }
                        let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Connected components of `{P >= threshold}` with at least `min_voxels`
/// voxels, scored by mean (or max) probability.
pub fn extract_instances(prob: &Volume<f32>, case_id: &str, cfg: &ExtractionConfig) -> Result<Vec<InstancePrediction>> {
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0, 1), got {}", cfg.threshold)));
    }
    let grid = prob.grid();
    let p = prob.data();
    let mask: Vec<bool> = p.iter().map(|&v| v as f64 >= cfg.threshold).collect();
    Ok(connected_components(&mask, grid)
        .into_iter()
        .filter(|c| c.len() >= cfg.min_voxels.max(1))
        .map(|voxels| {
            let confidence = match cfg.confidence {
                Confidence::Mean => voxels.iter().map(|&i| p[i] as f64).sum::<f64>() / voxels.len() as f64,
                Confidence::Max => voxels.iter().map(|&i| p[i] as f64).fold(0.0, f64::max),
            };
            let mut centroid = [0.0; 3];
            for &i in &voxels {
                let c = grid.coords(i);
                for a in 0..3 {
                    centroid[a] += c[a] as f64;
                }
            }
            centroid = centroid.map(|v| v / voxels.len() as f64);
            InstancePrediction {
                case_id: case_id.to_string(),
                equivalent_radius_mm: equivalent_radius_mm(voxels.len(), grid),
                confidence,
                centroid,
                voxels,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictionMatch {
    Hit { gt: u32, radius_ratio: f64 },
    FalsePositive,
}

impl PredictionMatch {
    pub fn is_hit(&self) -> bool {
        matches!(self, PredictionMatch::Hit { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub predictions: Vec<PredictionMatch>,
    /// `detected[k - 1]` for ground-truth instance `k`.
    pub detected: Vec<bool>,
}

impl MatchResult {
    pub fn hits(&self) -> usize {
        self.predictions.iter().filter(|m| m.is_hit()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.predictions.len() - self.hits()
    }

    pub fn n_detected(&self) -> usize {
        self.detected.iter().filter(|&&d| d).count()
    }
}

/// A prediction hits ground-truth instance `k` if they share a voxel and
/// `pred radius / gt radius` lies in [`RADIUS_RATIO_RANGE`]. Among
/// qualifying instances the one with the largest overlap wins (lowest id
/// on ties). Several predictions may hit the same instance.
pub fn match_hits(preds: &[InstancePrediction], gt: &LabelVolume, pred_grid: &VolumeGrid) -> Result<MatchResult> {
    pred_grid.ensure_same(gt.grid(), "predictions vs ground truth")?;
    let sizes = gt.instance_voxels().iter().map(|v| v.len()).collect::<Vec<_>>();
    let gt_radius: Vec<f64> = sizes.iter().map(|&n| equivalent_radius_mm(n, gt.grid())).collect();
    let labels = gt.data();
    let mut detected = vec![false; gt.n_instances()];
    let mut overlap = vec![0usize; gt.n_instances()];
    let predictions = preds
        .iter()
        .map(|p| {
            overlap.iter_mut().for_each(|o| *o = 0);
            for &i in &p.voxels {
                let l = labels[i];
                if l > 0 {
                    overlap[l as usize - 1] += 1;
                }
            }
            let mut best: Option<(usize, f64)> = None;
            for k in 0..overlap.len() {
                if overlap[k] == 0 {
                    continue;
                }
                let ratio = p.equivalent_radius_mm / gt_radius[k];
                if !(RADIUS_RATIO_RANGE.0..=RADIUS_RATIO_RANGE.1).contains(&ratio) {
                    continue;
                }
                if best.is_none_or(|(b, _)| overlap[k] > overlap[b]) {
                    best = Some((k, ratio));
                }
            }
            match best {
                Some((k, radius_ratio)) => {
                    detected[k] = true;
                    PredictionMatch::Hit { gt: k as u32 + 1, radius_ratio }
                }
                None => PredictionMatch::FalsePositive,
            }
        })
        .collect();
    Ok(MatchResult { predictions, detected })
}

/// Serialised form of one prediction with its match outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub case_id: String,
    pub voxels_count: usize,
    pub centroid: [f64; 3],
    pub confidence: f64,
    pub radius_mm: f64,
    #[serde(rename = "match")]
    pub outcome: PredictionMatch,
}

pub fn instance_records(preds: &[InstancePrediction], m: &MatchResult) -> Vec<InstanceRecord> {
    preds
        .iter()
        .zip(&m.predictions)
        .map(|(p, &outcome)| InstanceRecord {
            case_id: p.case_id.clone(),
            voxels_count: p.voxels.len(),
            centroid: p.centroid,
            confidence: p.confidence,
            radius_mm: p.equivalent_radius_mm,
            outcome,
        })
        .collect()
}
