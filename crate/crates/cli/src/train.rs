//! Crop-based training loop for the three comparison modes.

use std::path::Path;

use anyhow::{bail, Context, Result};
use distgate_core::gating::GatingParams;
use distgate_core::loss::{gated_nll, gated_nll_grad, GatedLossInput};
use distgate_core::model::{backward, forward_cached, init_params, MomentumSgd, SegmenterConfig, SegmenterParams};
use distgate_core::pipeline::{
    load_raw_case, prepare_case, sample_crops, CaseRecord, CropConfig, DatasetManifest, InputNormalization, Split,
    TrainingCrop, TARGET_SPACING_MM,
};
use distgate_core::rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One branch, every voxel routed to it.
    Single,
    /// Binary distance gating.
    Bg,
    /// Soft distance gating.
    Sg,
}

pub const ALL_MODES: [Mode; 3] = [Mode::Single, Mode::Bg, Mode::Sg];

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Bg => "bg",
            Mode::Sg => "sg",
        }
    }

    pub fn gating(self, g: &GatingConfig) -> Result<GatingParams> {
        Ok(match self {
            Mode::Single => GatingParams::Ungated,
            Mode::Bg => GatingParams::binary(g.d0_mm)?,
            Mode::Sg => GatingParams::soft(g.d_prox_mm, g.d_dist_mm)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatingConfig {
    pub d0_mm: f64,
    pub d_prox_mm: f64,
    pub d_dist_mm: f64,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            d0_mm: distgate_core::gating::DEFAULT_D0_MM,
            d_prox_mm: distgate_core::gating::DEFAULT_D_PROX_MM,
            d_dist_mm: distgate_core::gating::DEFAULT_D_DIST_MM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Crops whose gradients are averaged per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub crop_size: [usize; 3],
    pub n_background: Option<usize>,
    pub max_rotation_deg: f64,
    pub model: SegmenterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 800,
            batch: 4,
            lr: 0.2,
            momentum: 0.9,
            crop_size: [16, 16, 8],
            n_background: None,
            max_rotation_deg: 10.0,
            model: SegmenterConfig::default(),
        }
    }
}

/// A prepared case with its input normalisation.
pub struct LoadedCase {
    pub case: CaseRecord,
    pub norm: InputNormalization,
}

pub fn load_case(dir: &Path) -> Result<LoadedCase> {
    let raw = load_raw_case(dir).with_context(|| format!("loading case {}", dir.display()))?;
    let case = prepare_case(raw, TARGET_SPACING_MM)?;
    let norm = InputNormalization::from_case(&case);
    Ok(LoadedCase { case, norm })
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedCase>> {
    let dirs: Vec<_> = manifest.split(split).map(|e| root.join(&e.dir)).collect();
    dirs.par_iter().map(|d| load_case(d)).collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: SegmenterParams<f32>,
    /// Mean batch loss per step, starting at step 1.
    pub losses: Vec<f64>,
}

fn crop_gradient(params: &SegmenterParams<f32>, crop: &TrainingCrop) -> Result<(f64, SegmenterParams<f32>)> {
    let (out, cache) = forward_cached(params, &crop.input)?;
    let input = GatedLossInput::new([&out.probs[0], &out.probs[1]], &crop.labels, &crop.weights)?;
    let loss = gated_nll(&input);
    let [gp, gd] = gated_nll_grad(&input);
    Ok((loss, backward(params, &crop.input, &cache, [&gp, &gd])?))
}

/// Crops for one pass over the training cases, in a seeded random order.
fn epoch_crops(cases: &[LoadedCase], crop: &CropConfig, seed: u64, epoch: u64) -> Result<Vec<TrainingCrop>> {
    let per_case: Vec<Vec<TrainingCrop>> = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let s = rng::derive_seed(seed, rng::domain::CROPS, epoch * cases.len() as u64 + i as u64);
            Ok(sample_crops(&c.case, &c.norm, s, crop)?)
        })
        .collect::<Result<_>>()?;
    let mut crops: Vec<TrainingCrop> = per_case.into_iter().flatten().collect();
    crops.shuffle(&mut rng::stream(seed, rng::domain::TRAIN_ORDER, epoch));
    Ok(crops)
}

/// Train with momentum SGD. Per-crop gradients are computed in parallel
/// and reduced in batch order, so the result does not depend on the
/// thread count.
pub fn train(
    cases: &[LoadedCase],
    gating: GatingParams,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if cases.is_empty() {
        bail!("no training cases");
    }
    if cfg.batch == 0 || cfg.steps == 0 {
        bail!("steps and batch must be positive");
    }
    let model = SegmenterConfig { seed, ..cfg.model.clone() };
    let mut params = init_params::<f32>(&model)?;
    let mut opt = MomentumSgd::new(cfg.lr, cfg.momentum)?;
    let crop_cfg = CropConfig {
        size: cfg.crop_size,
        n_background: cfg.n_background,
        max_rotation_deg: cfg.max_rotation_deg,
        gating,
    };
    let mut pool: Vec<TrainingCrop> = Vec::new();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        if pool.len() < cfg.batch {
            let mut fresh = epoch_crops(cases, &crop_cfg, seed, epoch)?;
            epoch += 1;
            if fresh.is_empty() {
                bail!("training cases produced no crops");
            }
            fresh.reverse();
            pool.splice(0..0, fresh);
        }
        let batch: Vec<TrainingCrop> = (0..cfg.batch.min(pool.len())).map(|_| pool.pop().unwrap()).collect();
        let results: Vec<(f64, SegmenterParams<f32>)> =
            batch.par_iter().map(|c| crop_gradient(&params, c)).collect::<Result<_>>()?;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().unwrap();
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        grads.scale((1.0 / n) as f32);
        if !loss.is_finite() {
            bail!("non-finite loss at step {step}");
        }
        opt.step(&mut params, &grads).with_context(|| format!("optimizer step {step}"))?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use distgate_core::model::TrunkLayer;
    use distgate_core::phantom::{generate_case, NodeCounts, PhantomConfig};

    fn tiny_cases() -> Vec<LoadedCase> {
        let cfg = PhantomConfig {
            dims: [64, 64, 12],
            tumor_semi_axes_mm: [5.0, 7.0],
            nodes: NodeCounts { proximal: 2, intermediate: 1, distal: 0 },
            node_radius_mm: [3.0, 4.0],
            proximal_max_mm: 15.0,
            distal_min_mm: 30.0,
            ..Default::default()
        };
        (0..2)
            .map(|i| {
                let case = generate_case(i, "c", &cfg).unwrap().case;
                let norm = InputNormalization::from_case(&case);
                LoadedCase { case, norm }
            })
            .collect()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            steps: 6,
            batch: 3,
            crop_size: [12, 12, 6],
            model: SegmenterConfig { trunk: vec![TrunkLayer { out_channels: 4, kernel: 3 }], ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let cases = tiny_cases();
        let g = Mode::Sg.gating(&GatingConfig { d_prox_mm: 10.0, d_dist_mm: 25.0, ..Default::default() }).unwrap();
        let a = train(&cases, g, &tiny_train(), 3, |_, _| {}).unwrap();
        let b = train(&cases, g, &tiny_train(), 3, |_, _| {}).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(a.losses.len(), 6);
    }

    #[test]
    fn single_mode_trains_only_the_proximal_head() {
        let cases = tiny_cases();
        let init = init_params::<f32>(&SegmenterConfig { seed: 4, ..tiny_train().model }).unwrap();
        let out = train(&cases, GatingParams::Ungated, &tiny_train(), 4, |_, _| {}).unwrap();
        assert_eq!(out.params.heads[1], init.heads[1]);
        assert_ne!(out.params.heads[0], init.heads[0]);
    }

    #[test]
    fn rejects_empty_inputs() {
        assert!(train(&[], GatingParams::Ungated, &tiny_train(), 0, |_, _| {}).is_err());
        let cases = tiny_cases();
        let cfg = TrainConfig { steps: 0, ..tiny_train() };
        assert!(train(&cases, GatingParams::Ungated, &cfg, 0, |_, _| {}).is_err());
    }
}
