//! Dataset-level detection metrics: precision/recall sweep, mean recall over
//! a precision range and FROC at fixed false positives per case.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instances::{InstancePrediction, MatchResult, PredictionMatch};

/// Precision levels 0.10, 0.15, ..., 0.50.
pub fn default_precision_levels() -> Vec<f64> {
    (2..=10).map(|k| k as f64 / 20.0).collect()
}

pub const DEFAULT_FP_LEVELS: [f64; 4] = [3.0, 4.0, 6.0, 8.0];

/// One scored prediction with its match outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub confidence: f64,
    pub outcome: PredictionMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseDetections {
    pub case_id: String,
    pub n_gt: usize,
    pub detections: Vec<Detection>,
}

impl CaseDetections {
    pub fn from_match(case_id: &str, preds: &[InstancePrediction], m: &MatchResult) -> Self {
        Self {
            case_id: case_id.to_string(),
            n_gt: m.detected.len(),
            detections: preds
                .iter()
                .zip(&m.predictions)
                .map(|(p, &outcome)| Detection { confidence: p.confidence, outcome })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fps_per_patient: f64,
    pub hits: usize,
    pub false_positives: usize,
    pub detected: usize,
}

/// Sweep confidence cutoffs. At cutoff `t` predictions with confidence
/// `>= t` are kept; precision is 1 when nothing survives. `thresholds`
/// defaults to the distinct observed confidences; if there are none a
/// single point at cutoff 1 is returned. Points are sorted by ascending
/// threshold.
pub fn pr_sweep(cases: &[CaseDetections], thresholds: Option<&[f64]>) -> Result<Vec<PrPoint>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let total_gt: usize = cases.iter().map(|c| c.n_gt).sum();
    if total_gt == 0 {
        return Err(Error::InvalidArgument("dataset has no ground-truth instances".into()));
    }
    let mut dets: Vec<(usize, Detection)> =
        cases.iter().enumerate().flat_map(|(ci, c)| c.detections.iter().map(move |&d| (ci, d))).collect();
    if let Some((_, d)) = dets.iter().find(|(_, d)| !d.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("detection confidence {}", d.confidence)));
    }
    dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    let mut cutoffs: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => dets.iter().map(|(_, d)| d.confidence).collect(),
    };
    if cutoffs.iter().any(|t| t.is_nan()) {
        return Err(Error::InvalidArgument("NaN threshold".into()));
    }
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    if cutoffs.is_empty() {
        cutoffs.push(1.0);
    }
    let n_cases = cases.len() as f64;
    let mut found: HashSet<(usize, u32)> = HashSet::new();
    let (mut hits, mut fps, mut next) = (0usize, 0usize, 0usize);
    let mut points = Vec::with_capacity(cutoffs.len());
    for &t in &cutoffs {
        while next < dets.len() && dets[next].1.confidence >= t {
            match dets[next].1.outcome {
                PredictionMatch::Hit { gt, .. } => {
                    hits += 1;
                    found.insert((dets[next].0, gt));
                }
                PredictionMatch::FalsePositive => fps += 1,
            }
            next += 1;
        }
        let kept = hits + fps;
        points.push(PrPoint {
            threshold: t,
            precision: if kept == 0 { 1.0 } else { hits as f64 / kept as f64 },
            recall: found.len() as f64 / total_gt as f64,
            fps_per_patient: fps as f64 / n_cases,
            hits,
            false_positives: fps,
            detected: found.len(),
        });
    }
    points.reverse();
    Ok(points)
}

/// For each level `p`, the best recall among points with precision `>= p`
/// (0 if none). Returns the mean and the maximum over levels.
pub fn mean_recall(curve: &[PrPoint], levels: &[f64]) -> (f64, f64) {
    let at: Vec<f64> = levels
        .iter()
        .map(|&p| curve.iter().filter(|q| q.precision >= p).map(|q| q.recall).fold(0.0, f64::max))
        .collect();
    if at.is_empty() {
        return (0.0, 0.0);
    }
    (at.iter().sum::<f64>() / at.len() as f64, at.iter().copied().fold(0.0, f64::max))
}

/// Step-function FROC: recall at the operating point with the most false
/// positives per case not exceeding each level (0 if none).
pub fn froc(curve: &[PrPoint], fp_levels: &[f64]) -> (Vec<f64>, f64) {
    let at: Vec<f64> = fp_levels
        .iter()
        .map(|&f| curve.iter().filter(|q| q.fps_per_patient <= f).map(|q| q.recall).fold(0.0, f64::max))
        .collect();
    let mean = if at.is_empty() { 0.0 } else { at.iter().sum::<f64>() / at.len() as f64 };
    (at, mean)
}

fn level_key(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_gt: usize,
    pub points: Vec<PrPoint>,
    pub m_recall: f64,
    pub recall_max: f64,
    pub froc_at: BTreeMap<String, f64>,
    pub m_froc: f64,
}

impl EvalReport {
    pub fn froc(&self, fps: f64) -> Option<f64> {
        self.froc_at.get(&level_key(fps)).copied()
    }
}

pub fn evaluate(cases: &[CaseDetections]) -> Result<EvalReport> {
    let points = pr_sweep(cases, None)?;
    let (m_recall, recall_max) = mean_recall(&points, &default_precision_levels());
    let (at, m_froc) = froc(&points, &DEFAULT_FP_LEVELS);
    Ok(EvalReport {
        n_cases: cases.len(),
        n_gt: cases.iter().map(|c| c.n_gt).sum(),
        points,
        m_recall,
        recall_max,
        froc_at: DEFAULT_FP_LEVELS.iter().zip(at).map(|(&f, r)| (level_key(f), r)).collect(),
        m_froc,
    })
}
