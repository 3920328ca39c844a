//! Case preparation and training-crop sampling.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edt::{edt_exact, DistanceMap};
use crate::error::{Error, Result};
use crate::gating::{GatingParams, GatingWeights};
use crate::io;
use crate::model::FeatureMap;
use crate::rng;
use crate::volume::{
    crop_at, crop_subvolume, resample_labels, resample_nearest, resample_trilinear, rotate_xy, rotate_xy_nearest,
    BinaryMask, LabelVolume, Volume, VolumeGrid,
};

/// Common resolution every case is brought to, mm.
pub const TARGET_SPACING_MM: [f64; 3] = [1.0, 1.0, 2.5];
/// Default training crop, voxels.
pub const DEFAULT_CROP: [usize; 3] = [96, 96, 64];
/// Distance channel is divided by this before entering the model, mm.
pub const DISTANCE_SCALE_MM: f64 = 100.0;

/// Case volumes as stored on disk, before resampling.
#[derive(Clone, Debug)]
pub struct RawCase {
    pub case_id: String,
    pub ct: Volume<f32>,
    pub pet: Volume<f32>,
    pub tumor: BinaryMask,
    pub gtvln: LabelVolume,
}

/// A case on the common grid with its tumour distance map attached.
#[derive(Clone, Debug)]
pub struct CaseRecord {
    pub case_id: String,
    pub ct: Volume<f32>,
    pub pet: Volume<f32>,
    pub tumor: BinaryMask,
    pub gtvln: LabelVolume,
    pub distance: DistanceMap,
}

impl CaseRecord {
    pub fn grid(&self) -> &VolumeGrid {
        self.ct.grid()
    }
}

const CASE_FILES: [&str; 4] = ["ct", "pet", "tumor", "gtvln"];

/// Write the four case volumes into `dir`, which must exist.
pub fn save_case(case: &CaseRecord, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    io::save_scalar(&case.ct, dir.join(CASE_FILES[0]))?;
    io::save_scalar(&case.pet, dir.join(CASE_FILES[1]))?;
    io::save_mask(&case.tumor, dir.join(CASE_FILES[2]))?;
    io::save_labels(&case.gtvln, dir.join(CASE_FILES[3]))
}

/// Load `ct`, `pet`, `tumor` and `gtvln` volumes from a case directory. The
/// case id is the directory name.
pub fn load_raw_case(dir: impl AsRef<Path>) -> Result<RawCase> {
    let dir = dir.as_ref();
    let case_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad case directory {}", dir.display())))?
        .to_string();
    Ok(RawCase {
        case_id,
        ct: io::load_scalar(dir.join(CASE_FILES[0]))?,
        pet: io::load_scalar(dir.join(CASE_FILES[1]))?,
        tumor: io::load_mask(dir.join(CASE_FILES[2]))?,
        gtvln: io::load_labels(dir.join(CASE_FILES[3]))?,
    })
}

/// Bring every volume to `target_spacing` (trilinear for images, nearest
/// for masks and labels) and compute the tumour distance map. Lymph node
/// voxels that coincide with the tumour are dropped from the labels.
pub fn prepare_case(raw: RawCase, target_spacing: [f64; 3]) -> Result<CaseRecord> {
    let same = |g: &VolumeGrid| g.spacing() == target_spacing;
    let ct = if same(raw.ct.grid()) { raw.ct } else { resample_trilinear(&raw.ct, target_spacing)? };
    let pet = if same(raw.pet.grid()) { raw.pet } else { resample_trilinear(&raw.pet, target_spacing)? };
    let tumor = if same(raw.tumor.grid()) { raw.tumor } else { resample_nearest(&raw.tumor, target_spacing)? };
    let gtvln = if same(raw.gtvln.grid()) { raw.gtvln } else { resample_labels(&raw.gtvln, target_spacing)? };
    let g = ct.grid();
    pet.grid().ensure_same(g, "pet vs ct")?;
    tumor.grid().ensure_same(g, "tumor vs ct")?;
    gtvln.grid().ensure_same(g, "gtvln vs ct")?;
    if !tumor.any() {
        return Err(Error::EmptyMask);
    }
    let gtvln = if gtvln.data().iter().zip(tumor.data()).any(|(&l, &t)| l > 0 && t) {
        let cleared = Volume::new(*gtvln.grid(), gtvln.data().iter().zip(tumor.data()).map(|(&l, &t)| if t { 0 } else { l }).collect())?;
        LabelVolume::compacting(cleared)
    } else {
        gtvln
    };
    let distance = edt_exact(&tumor)?;
    Ok(CaseRecord { case_id: raw.case_id, ct, pet, tumor, gtvln, distance })
}

/// Intensity normalisation applied to model inputs.
///
/// CT and PET are z-scored with statistics of the whole case so that
/// training crops and inference windows see identical input scaling; the
/// distance channel is divided by [`DISTANCE_SCALE_MM`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub ct_mean: f64,
    pub ct_std: f64,
    pub pet_mean: f64,
    pub pet_std: f64,
    pub distance_scale_mm: f64,
}

fn mean_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(1e-6))
}

impl InputNormalization {
    pub fn from_case(case: &CaseRecord) -> Self {
        let (ct_mean, ct_std) = mean_std(case.ct.data());
        let (pet_mean, pet_std) = mean_std(case.pet.data());
        Self { ct_mean, ct_std, pet_mean, pet_std, distance_scale_mm: DISTANCE_SCALE_MM }
    }

    /// Stack normalised CT, PET and distance into a three-channel input.
    pub fn build_input(&self, ct: &Volume<f32>, pet: &Volume<f32>, distance: &Volume<f32>) -> Result<FeatureMap<f32>> {
        let ct = ct.map(|v| ((v as f64 - self.ct_mean) / self.ct_std) as f32);
        let pet = pet.map(|v| ((v as f64 - self.pet_mean) / self.pet_std) as f32);
        let d = distance.map(|v| (v as f64 / self.distance_scale_mm) as f32);
        FeatureMap::from_channels(&[&ct, &pet, &d])
    }

    pub fn case_input(&self, case: &CaseRecord) -> Result<FeatureMap<f32>> {
        self.build_input(&case.ct, &case.pet, case.distance.volume())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub size: [usize; 3],
    /// Background crops per case; `None` means one per lymph node instance.
    pub n_background: Option<usize>,
    pub max_rotation_deg: f64,
    pub gating: GatingParams,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { size: DEFAULT_CROP, n_background: None, max_rotation_deg: 10.0, gating: GatingParams::default_soft() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropProvenance {
    pub case_id: String,
    pub center: [i64; 3],
    pub angle_deg: f64,
    /// Instance the crop was centred on; `None` for background crops.
    pub instance: Option<u32>,
}

#[derive(Clone, Debug)]
pub struct TrainingCrop {
    pub input: FeatureMap<f32>,
    pub labels: BinaryMask,
    pub weights: GatingWeights<f32>,
    pub provenance: CropProvenance,
}

/// Voxel of `voxels` closest (physically) to their centroid.
pub fn snapped_centroid(grid: &VolumeGrid, voxels: &[usize]) -> [i64; 3] {
    let n = voxels.len() as f64;
    let mut c = [0.0f64; 3];
    for &i in voxels {
        let p = grid.coords(i);
        for a in 0..3 {
            c[a] += p[a] as f64 / n;
        }
    }
    let sp = grid.spacing();
    let best = voxels
        .iter()
        .min_by(|&&i, &&j| {
            let d = |k: usize| {
                let p = grid.coords(k);
                (0..3).map(|a| ((p[a] as f64 - c[a]) * sp[a]).powi(2)).sum::<f64>()
            };
            d(i).total_cmp(&d(j)).then(i.cmp(&j))
        })
        .expect("instances are non-empty");
    grid.coords(*best).map(|v| v as i64)
}

/// Enlarged in-plane size that still covers `n` voxels after a rotation by
/// `angle_deg`, with the same parity as `n` so both windows share a centre.
fn rotation_margin_size(n: usize, angle_deg: f64) -> usize {
    if angle_deg == 0.0 {
        return n;
    }
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut m = (n as f64 * (s.abs() + c.abs())).ceil() as usize + 2;
    if m % 2 != n % 2 {
        m += 1;
    }
    m
}

struct CropSource<'a> {
    ct: &'a Volume<f32>,
    pet: &'a Volume<f32>,
    distance: &'a Volume<f32>,
    labels: &'a BinaryMask,
}

fn extract_crop(
    src: &CropSource<'_>,
    norm: &InputNormalization,
    center: [i64; 3],
    size: [usize; 3],
    angle_deg: f64,
    gating: GatingParams,
) -> Result<(FeatureMap<f32>, BinaryMask, GatingWeights<f32>)> {
    let big = [rotation_margin_size(size[0], angle_deg), rotation_margin_size(size[1], angle_deg), size[2]];
    let inner: [i64; 3] = std::array::from_fn(|a| ((big[a] - size[a]) / 2) as i64);
    let rotated = |v: &Volume<f32>| -> Result<Volume<f32>> {
        let c = crop_subvolume(v, center, big)?;
        crop_at(&rotate_xy(&c, angle_deg)?, inner, size)
    };
    let ct = rotated(src.ct)?;
    let pet = rotated(src.pet)?;
    let d = rotated(src.distance)?;
    let labels = crop_at(&rotate_xy_nearest(&crop_subvolume(src.labels, center, big)?, angle_deg)?, inner, size)?;
    let weights = GatingWeights::from_distance_volume(&d, gating);
    Ok((norm.build_input(&ct, &pet, &d)?, labels, weights))
}

/// One crop centred on every lymph node instance plus `n_background`
/// uniformly placed crops, each rotated in-plane by an angle drawn from
/// `±max_rotation_deg`. Gating weights are recomputed from the rotated
/// distance channel. Deterministic for a given `seed`.
pub fn sample_crops(
    case: &CaseRecord,
    norm: &InputNormalization,
    seed: u64,
    cfg: &CropConfig,
) -> Result<Vec<TrainingCrop>> {
    cfg.gating.validate()?;
    if cfg.size.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("crop size must be >= 1, got {:?}", cfg.size)));
    }
    if !(0.0..=crate::volume::MAX_ROTATION_DEG).contains(&cfg.max_rotation_deg) {
        return Err(Error::InvalidArgument(format!("bad max rotation {}", cfg.max_rotation_deg)));
    }
    let mut rng = rng::stream(seed, rng::domain::CROPS, 0);
    let angle = |rng: &mut rng::StreamRng| {
        if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        }
    };
    let grid = *case.grid();
    let instances = case.gtvln.instance_voxels();
    let n_background = cfg.n_background.unwrap_or(instances.len());
    let mut plan: Vec<([i64; 3], f64, Option<u32>)> = Vec::with_capacity(instances.len() + n_background);
    for (k, voxels) in instances.iter().enumerate() {
        let a = angle(&mut rng);
        plan.push((snapped_centroid(&grid, voxels), a, Some(k as u32 + 1)));
    }
    let dims = grid.dims();
    for _ in 0..n_background {
        let c = std::array::from_fn(|a| rng.random_range(0..dims[a]) as i64);
        let a = angle(&mut rng);
        plan.push((c, a, None));
    }
    let labels = case.gtvln.foreground();
    let src = CropSource { ct: &case.ct, pet: &case.pet, distance: case.distance.volume(), labels: &labels };
    plan.into_iter()
        .map(|(center, angle_deg, instance)| {
            let (input, labels, weights) = extract_crop(&src, norm, center, cfg.size, angle_deg, cfg.gating)?;
            Ok(TrainingCrop {
                input,
                labels,
                weights,
                provenance: CropProvenance { case_id: case.case_id.clone(), center, angle_deg, instance },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    /// Case directory relative to the manifest.
    pub dir: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub cases: Vec<ManifestEntry>,
    /// Generator configuration, echoed for provenance.
    #[serde(default)]
    pub generator: serde_json::Value,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.6, 0.1, 0.3];
pub const MANIFEST_FILE: &str = "manifest.json";

/// Train/val/test counts: validation and test sizes are floored, the
/// remainder goes to training.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions must be in [0,1] and sum to 1, got {fractions:?}")));
    }
    let val = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let test = (n as f64 * fractions[2] + 1e-9).floor() as usize;
    Ok([n - val - test, val, test])
}

/// Shuffle case ids deterministically and assign splits.
pub fn assign_splits(case_ids: &[String], seed: u64, fractions: [f64; 3]) -> Result<Vec<Split>> {
    use rand::seq::SliceRandom;
    let [train, val, _] = split_counts(case_ids.len(), fractions)?;
    let mut order: Vec<usize> = (0..case_ids.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::domain::DATASET_SPLIT, 0));
    let mut splits = vec![Split::Test; case_ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

impl DatasetManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(root.as_ref());
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path(root.as_ref());
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

fn manifest_path(root: &Path) -> PathBuf {
    if root.extension().is_some_and(|e| e == "json") {
        root.to_path_buf()
    } else {
        root.join(MANIFEST_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::window_start;

    fn toy_case() -> CaseRecord {
        let g = VolumeGrid::new([24, 24, 8], TARGET_SPACING_MM).unwrap();
        let tumor = Volume::from_fn(g, |x, y, z| (10..13).contains(&x) && (10..13).contains(&y) && (3..5).contains(&z));
        let labels = Volume::from_fn(g, |x, y, z| {
            if (2..5).contains(&x) && (2..5).contains(&y) && (1..3).contains(&z) {
                1
            } else if (18..22).contains(&x) && (17..20).contains(&y) && (4..7).contains(&z) {
                2
            } else {
                0
            }
        });
        let gtvln = LabelVolume::new(labels).unwrap();
        let ct = Volume::from_fn(g, |x, y, z| (x + 2 * y + 3 * z) as f32 * 0.1);
        let pet = Volume::from_fn(g, |x, _, _| x as f32);
        let raw = RawCase { case_id: "toy".into(), ct, pet, tumor, gtvln };
        prepare_case(raw, TARGET_SPACING_MM).unwrap()
    }

    #[test]
    fn prepare_at_target_spacing_is_passthrough() {
        let case = toy_case();
        assert_eq!(case.ct.get(5, 6, 7), (5 + 12 + 21) as f32 * 0.1);
        for (d, &t) in case.distance.data().iter().zip(case.tumor.data()) {
            if t {
                assert_eq!(*d, 0.0);
            } else {
                assert!(*d > 0.0);
            }
        }
        assert_eq!(case.gtvln.n_instances(), 2);
    }

    #[test]
    fn prepare_resamples_and_keeps_labels_integral() {
        let g = VolumeGrid::new([12, 12, 10], [2.0, 2.0, 2.0]).unwrap();
        let tumor = Volume::from_fn(g, |x, y, z| x == 6 && y == 6 && z == 5);
        let gtvln = LabelVolume::new(Volume::from_fn(g, |x, y, z| if x < 3 && y < 3 && z < 3 { 1 } else { 0 })).unwrap();
        let raw = RawCase {
            case_id: "c".into(),
            ct: Volume::filled(g, 1.0),
            pet: Volume::filled(g, 2.0),
            tumor,
            gtvln,
        };
        let case = prepare_case(raw, TARGET_SPACING_MM).unwrap();
        assert_eq!(case.grid().dims(), [24, 24, 8]);
        assert!(case.ct.data().iter().all(|&v| v == 1.0));
        assert!(case.gtvln.data().iter().all(|&l| l <= 1));
        assert_eq!(case.gtvln.n_instances(), 1);
        assert!(case.tumor.any());
    }

    #[test]
    fn prepare_rejects_empty_tumor_and_mismatch() {
        let g = VolumeGrid::new([4, 4, 4], TARGET_SPACING_MM).unwrap();
        let raw = RawCase {
            case_id: "c".into(),
            ct: Volume::filled(g, 0.0),
            pet: Volume::filled(g, 0.0),
            tumor: Volume::filled(g, false),
            gtvln: LabelVolume::empty(g),
        };
        assert!(matches!(prepare_case(raw.clone(), TARGET_SPACING_MM), Err(Error::EmptyMask)));
        let mut bad = raw;
        bad.tumor = Volume::filled(VolumeGrid::new([4, 4, 5], TARGET_SPACING_MM).unwrap(), true);
        assert!(matches!(prepare_case(bad, TARGET_SPACING_MM), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn crop_plan_counts_and_determinism() {
        let case = toy_case();
        let norm = InputNormalization::from_case(&case);
        let cfg = CropConfig { size: [8, 8, 4], n_background: Some(3), ..Default::default() };
        let crops = sample_crops(&case, &norm, 5, &cfg).unwrap();
        assert_eq!(crops.len(), 2 + 3);
        let again = sample_crops(&case, &norm, 5, &cfg).unwrap();
        for (a, b) in crops.iter().zip(&again) {
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.input, b.input);
            assert_eq!(a.labels, b.labels);
        }
        let other = sample_crops(&case, &norm, 6, &cfg).unwrap();
        assert_ne!(crops[4].provenance, other[4].provenance);
        for c in &crops {
            assert_eq!(c.input.dims(), [8, 8, 4]);
            assert_eq!(c.input.channels(), 3);
            assert!(c.provenance.angle_deg.abs() <= 10.0);
            for (p, d) in c.weights.proximal().data().iter().zip(c.weights.distal().data()) {
                assert_eq!(p + d, 1.0);
            }
            if c.provenance.instance.is_some() {
                assert!(c.labels.any());
            }
        }
        let default_bg = sample_crops(&case, &norm, 5, &CropConfig { n_background: None, ..cfg }).unwrap();
        assert_eq!(default_bg.len(), 4);
    }

    #[test]
    fn unrotated_crop_channels_are_aligned() {
        let case = toy_case();
        let norm = InputNormalization::from_case(&case);
        let cfg = CropConfig { size: [6, 6, 4], n_background: Some(0), max_rotation_deg: 0.0, ..Default::default() };
        let crops = sample_crops(&case, &norm, 1, &cfg).unwrap();
        let c = &crops[0];
        let start = window_start(c.provenance.center, cfg.size);
        for i in 0..c.labels.len() {
            let [x, y, z] = c.labels.grid().coords(i);
            let src = case.grid().checked_index(start[0] + x as i64, start[1] + y as i64, start[2] + z as i64);
            let Some(s) = src else { continue };
            assert_eq!(c.labels.data()[i], case.gtvln.data()[s] > 0);
            let d = case.distance.data()[s] as f64 / DISTANCE_SCALE_MM;
            assert!((c.input.channel(2)[i] as f64 - d).abs() < 1e-6);
            let ct = (case.ct.data()[s] as f64 - norm.ct_mean) / norm.ct_std;
            assert!((c.input.channel(0)[i] as f64 - ct).abs() < 1e-5);
        }
    }

    #[test]
    fn binary_gating_stays_binary_after_rotation() {
        let case = toy_case();
        let norm = InputNormalization::from_case(&case);
        let cfg = CropConfig {
            size: [10, 10, 4],
            n_background: Some(2),
            gating: GatingParams::binary(8.0).unwrap(),
            ..Default::default()
        };
        for c in sample_crops(&case, &norm, 3, &cfg).unwrap() {
            assert!(c.weights.proximal().data().iter().all(|&g| g == 0.0 || g == 1.0));
        }
    }

    #[test]
    fn split_counts_floor_with_remainder_to_train() {
        assert_eq!(split_counts(10, DEFAULT_SPLIT).unwrap(), [6, 1, 3]);
        assert_eq!(split_counts(30, DEFAULT_SPLIT).unwrap(), [18, 3, 9]);
        assert_eq!(split_counts(3, DEFAULT_SPLIT).unwrap(), [3, 0, 0]);
        assert!(split_counts(10, [0.5, 0.5, 0.5]).is_err());
        let ids: Vec<String> = (0..10).map(|i| format!("case_{i:03}")).collect();
        let a = assign_splits(&ids, 1, DEFAULT_SPLIT).unwrap();
        assert_eq!(a, assign_splits(&ids, 1, DEFAULT_SPLIT).unwrap());
        assert_eq!(a.iter().filter(|&&s| s == Split::Train).count(), 6);
        assert_eq!(a.iter().filter(|&&s| s == Split::Test).count(), 3);
    }
}
