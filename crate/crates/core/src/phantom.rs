//! Synthetic cases: an ellipsoidal tumour near the centre and spherical
//! lymph nodes placed at controlled tumour distances, with CT and PET
//! channels that carry distinct (and imperfect) signatures.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edt::edt_exact;
use crate::error::{Error, Result};
use crate::gating::{DEFAULT_D_DIST_MM, DEFAULT_D_PROX_MM};
use crate::pipeline::{assign_splits, save_case, CaseRecord, DatasetManifest, ManifestEntry, TARGET_SPACING_MM};
use crate::rng::{self, StreamRng};
use crate::volume::{LabelVolume, Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCounts {
    /// Centre within `proximal_max_mm` of the tumour.
    pub proximal: usize,
    /// Centre strictly between the two bands.
    pub intermediate: usize,
    /// Centre at least `distal_min_mm` from the tumour.
    pub distal: usize,
}

impl NodeCounts {
    pub fn total(&self) -> usize {
        self.proximal + self.intermediate + self.distal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Tumour semi-axes are drawn uniformly from this range, mm.
    pub tumor_semi_axes_mm: [f64; 2],
    /// Maximum offset of the tumour centre from the volume centre, mm.
    pub tumor_jitter_mm: f64,
    pub nodes: NodeCounts,
    pub node_radius_mm: [f64; 2],
    pub proximal_max_mm: f64,
    pub distal_min_mm: f64,
    /// Minimum surface gap between any two objects, mm.
    pub min_gap_mm: f64,
    pub ct_tumor: f64,
    pub ct_node: f64,
    pub ct_noise: f64,
    pub pet_tumor: f64,
    pub pet_node: f64,
    pub pet_noise: f64,
    /// Probability that a node has no PET signal.
    pub pet_fn_rate: f64,
    /// PET-only blobs per case.
    pub pet_hot_spots: usize,
    pub hot_spot_radius_mm: f64,
    pub max_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [176, 176, 32],
            spacing_mm: TARGET_SPACING_MM,
            tumor_semi_axes_mm: [8.0, 14.0],
            tumor_jitter_mm: 5.0,
            nodes: NodeCounts { proximal: 3, intermediate: 1, distal: 2 },
            node_radius_mm: [4.0, 7.0],
            proximal_max_mm: DEFAULT_D_PROX_MM,
            distal_min_mm: DEFAULT_D_DIST_MM,
            min_gap_mm: 3.0,
            ct_tumor: 1.0,
            ct_node: 0.8,
            ct_noise: 0.3,
            pet_tumor: 3.0,
            pet_node: 1.5,
            pet_noise: 0.2,
            pet_fn_rate: 0.1,
            pet_hot_spots: 1,
            hot_spot_radius_mm: 4.0,
            max_attempts: 10_000,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let [lo, hi] = self.node_radius_mm;
        let min_spacing = self.spacing_mm.iter().copied().fold(f64::INFINITY, f64::min);
        let max_spacing = self.spacing_mm.iter().copied().fold(0.0, f64::max);
        if !(lo <= hi) || lo < 2.0 * min_spacing {
            return bad(format!("node radius range {:?} must be ordered and at least 2 voxels", self.node_radius_mm));
        }
        if lo < max_spacing {
            return bad(format!("node radius {lo} mm is below the coarsest spacing {max_spacing} mm"));
        }
        let [a, b] = self.tumor_semi_axes_mm;
        if !(a > 0.0 && a <= b) {
            return bad(format!("bad tumour semi-axis range {:?}", self.tumor_semi_axes_mm));
        }
        if !(self.proximal_max_mm < self.distal_min_mm) {
            return bad("proximal band must end before the distal band".into());
        }
        if !(0.0..=1.0).contains(&self.pet_fn_rate) {
            return bad(format!("PET false-negative rate {} outside [0, 1]", self.pet_fn_rate));
        }
        if self.ct_noise < 0.0 || self.pet_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        VolumeGrid::new(self.dims, self.spacing_mm)?;
        for ax in 0..3 {
            if (self.dims[ax] as f64) * self.spacing_mm[ax] < 2.0 * (b + self.tumor_jitter_mm) + 2.0 * self.spacing_mm[ax] {
                return bad(format!("volume too small for the tumour along axis {ax}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Proximal,
    Intermediate,
    Distal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedNode {
    /// Instance id in the label volume.
    pub label: u32,
    pub center: [usize; 3],
    pub radius_mm: f64,
    pub band: Band,
    pub pet_visible: bool,
    /// Tumour distance at the centre voxel, mm.
    pub distance_mm: f64,
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub case: CaseRecord,
    pub nodes: Vec<PlacedNode>,
    pub hot_spots: Vec<[usize; 3]>,
}

struct Sphere {
    center: [usize; 3],
    radius_mm: f64,
}

impl Sphere {
    fn gap_to(&self, other: &Sphere, spacing: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| ((self.center[a] as f64 - other.center[a] as f64) * spacing[a]).powi(2)).sum();
        d2.sqrt() - self.radius_mm - other.radius_mm
    }

    /// Voxels inside the sphere, in index order.
    fn voxels(&self, grid: &VolumeGrid) -> Vec<usize> {
        let sp = grid.spacing();
        let dims = grid.dims();
        let ext: [usize; 3] = std::array::from_fn(|a| (self.radius_mm / sp[a]).floor() as usize);
        let mut out = Vec::new();
        for z in self.center[2].saturating_sub(ext[2])..=(self.center[2] + ext[2]).min(dims[2] - 1) {
            for y in self.center[1].saturating_sub(ext[1])..=(self.center[1] + ext[1]).min(dims[1] - 1) {
                for x in self.center[0].saturating_sub(ext[0])..=(self.center[0] + ext[0]).min(dims[0] - 1) {
                    let p = [x, y, z];
                    let d2: f64 = (0..3).map(|a| ((p[a] as f64 - self.center[a] as f64) * sp[a]).powi(2)).sum();
                    if d2 <= self.radius_mm * self.radius_mm {
                        out.push(grid.index(x, y, z));
                    }
                }
            }
        }
        out
    }
}

/// Centre voxels whose sphere of `radius_mm` stays inside the volume.
fn inside_margin(grid: &VolumeGrid, c: [usize; 3], radius_mm: f64) -> bool {
    let sp = grid.spacing();
    let dims = grid.dims();
    (0..3).all(|a| {
        let m = (radius_mm / sp[a]).ceil() as usize;
        c[a] >= m && c[a] + m < dims[a]
    })
}

fn place(
    rng: &mut StreamRng,
    grid: &VolumeGrid,
    distance: &[f32],
    placed: &[Sphere],
    radius_mm: f64,
    accept: impl Fn(f64) -> bool,
    cfg: &PhantomConfig,
    what: &str,
) -> Result<Sphere> {
    let dims = grid.dims();
    for _ in 0..cfg.max_attempts {
        let c: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
        if !inside_margin(grid, c, radius_mm) {
            continue;
        }
        let d = distance[grid.index(c[0], c[1], c[2])] as f64;
        if d < radius_mm + cfg.min_gap_mm || !accept(d) {
            continue;
        }
        let s = Sphere { center: c, radius_mm };
        if placed.iter().all(|o| s.gap_to(o, grid.spacing()) >= cfg.min_gap_mm) {
            return Ok(s);
        }
    }
    Err(Error::Placement(format!("no room for {what} after {} attempts", cfg.max_attempts)))
}

/// Deterministic synthetic case for `seed`.
pub fn generate_case(seed: u64, case_id: &str, cfg: &PhantomConfig) -> Result<PhantomCase> {
    cfg.validate()?;
    let grid = VolumeGrid::new(cfg.dims, cfg.spacing_mm)?;
    let sp = grid.spacing();
    let mut rng = rng::stream(seed, rng::domain::PHANTOM_CASE, 0);

    let [alo, ahi] = cfg.tumor_semi_axes_mm;
    let axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(alo..=ahi));
    let center: [f64; 3] = std::array::from_fn(|a| {
        let mid = (cfg.dims[a] as f64 - 1.0) / 2.0 * sp[a];
        mid + if cfg.tumor_jitter_mm > 0.0 { rng.random_range(-cfg.tumor_jitter_mm..=cfg.tumor_jitter_mm) } else { 0.0 }
    });
    let mut tumor = Volume::from_fn(grid, |x, y, z| {
        let p = [x, y, z];
        (0..3).map(|a| ((p[a] as f64 * sp[a] - center[a]) / axes[a]).powi(2)).sum::<f64>() <= 1.0
    });
    if !tumor.any() {
        // a degenerate draw still needs one tumour voxel
        let c: [usize; 3] = std::array::from_fn(|a| ((center[a] / sp[a]).round() as usize).min(cfg.dims[a] - 1));
        tumor.set(c[0], c[1], c[2], true);
    }
    let distance = edt_exact(&tumor)?;

    let mut spheres: Vec<Sphere> = Vec::new();
    let mut nodes = Vec::new();
    let bands = std::iter::repeat_n(Band::Proximal, cfg.nodes.proximal)
        .chain(std::iter::repeat_n(Band::Intermediate, cfg.nodes.intermediate))
        .chain(std::iter::repeat_n(Band::Distal, cfg.nodes.distal));
    let [rlo, rhi] = cfg.node_radius_mm;
    for band in bands {
        let r = rng.random_range(rlo..=rhi);
        let (pmax, dmin) = (cfg.proximal_max_mm, cfg.distal_min_mm);
        let accept = move |d: f64| match band {
            Band::Proximal => d <= pmax,
            Band::Intermediate => d > pmax && d < dmin,
            Band::Distal => d >= dmin,
        };
        let s = place(&mut rng, &grid, distance.data(), &spheres, r, accept, cfg, &format!("{band:?} node"))?;
        let pet_visible = !rng.random_bool(cfg.pet_fn_rate);
        nodes.push(PlacedNode {
            label: nodes.len() as u32 + 1,
            center: s.center,
            radius_mm: r,
            band,
            pet_visible,
            distance_mm: distance.data()[grid.index(s.center[0], s.center[1], s.center[2])] as f64,
        });
        spheres.push(s);
    }
    let mut hot = Vec::new();
    for _ in 0..cfg.pet_hot_spots {
        let s = place(&mut rng, &grid, distance.data(), &spheres, cfg.hot_spot_radius_mm, |_| true, cfg, "PET hot spot")?;
        hot.push(s.center);
        spheres.push(s);
    }

    let mut labels = vec![0u32; grid.len()];
    let mut ct: Vec<f32> = vec![0.0; grid.len()];
    let mut pet: Vec<f32> = vec![0.0; grid.len()];
    for (i, &t) in tumor.data().iter().enumerate() {
        if t {
            ct[i] = cfg.ct_tumor as f32;
            pet[i] = cfg.pet_tumor as f32;
        }
    }
    for (n, s) in nodes.iter().zip(&spheres) {
        for i in s.voxels(&grid) {
            labels[i] = n.label;
            ct[i] = cfg.ct_node as f32;
            if n.pet_visible {
                pet[i] = cfg.pet_node as f32;
            }
        }
    }
    for s in &spheres[nodes.len()..] {
        for i in s.voxels(&grid) {
            pet[i] = cfg.pet_node as f32;
        }
    }
    let ct_noise = Normal::new(0.0, cfg.ct_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let pet_noise = Normal::new(0.0, cfg.pet_noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for v in ct.iter_mut() {
        *v += ct_noise.sample(&mut rng) as f32;
    }
    for v in pet.iter_mut() {
        *v += pet_noise.sample(&mut rng) as f32;
    }

    let case = CaseRecord {
        case_id: case_id.to_string(),
        ct: Volume::new(grid, ct)?,
        pet: Volume::new(grid, pet)?,
        tumor,
        gtvln: LabelVolume::new(Volume::new(grid, labels)?)?,
        distance,
    };
    Ok(PhantomCase { case, nodes, hot_spots: hot })
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// Generate `n_cases` cases under `root` with a deterministic split and
/// write the manifest. Case `i` uses the seed derived from `(seed, i)`.
pub fn generate_dataset(
    root: impl AsRef<Path>,
    seed: u64,
    n_cases: usize,
    fractions: [f64; 3],
    cfg: &PhantomConfig,
) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if n_cases < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 cases, got {n_cases}")));
    }
    cfg.validate()?;
    let ids: Vec<String> = (0..n_cases).map(case_name).collect();
    let splits = assign_splits(&ids, seed, fractions)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    (0..n_cases).into_par_iter().try_for_each(|i| -> Result<()> {
        let case_seed = rng::derive_seed(seed, rng::domain::PHANTOM_CASE, i as u64);
        let ph = generate_case(case_seed, &ids[i], cfg)?;
        let dir = root.join(&ids[i]);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_case(&ph.case, &dir)?;
        let nodes = serde_json::to_string_pretty(&ph.nodes).map_err(|e| Error::json(&dir, e))?;
        let path = dir.join("nodes.json");
        fs::write(&path, nodes).map_err(|e| Error::io(&path, e))
    })?;
    let manifest = DatasetManifest {
        seed,
        fractions,
        cases: ids.iter().zip(splits).map(|(id, split)| ManifestEntry { case_id: id.clone(), dir: id.into(), split }).collect(),
        generator: serde_json::to_value(cfg).expect("config serialises"),
    };
    manifest.save(root)?;
    Ok(manifest)
}
