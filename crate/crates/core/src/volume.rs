//! Grid geometry, voxel containers, resampling, cropping and in-plane
//! rotation.
//!
//! Every container uses an x-fastest layout: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`. The physical position of a voxel centre is
//! `origin + (x * sx, y * sy, z * sz)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Largest in-plane rotation accepted by [`rotate_xy`].
pub const MAX_ROTATION_DEG: f64 = 45.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(dims, spacing, [0.0; 3])
    }

    pub fn with_origin(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGrid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!("origin must be finite, got {origin:?}")));
        }
        dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::InvalidGrid(format!("voxel count of {dims:?} overflows")))?;
        Ok(Self { dims, spacing, origin })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline(always)]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Index of `(x, y, z)` if it lies inside the grid.
    #[inline]
    pub fn checked_index(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let [nx, ny, nz] = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            None
        } else {
            Some(self.index(x as usize, y as usize, z as usize))
        }
    }

    pub fn physical(&self, voxel: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + voxel[a] as f64 * self.spacing[a])
    }

    /// Same geometry (dims and spacing). Origins are not compared.
    pub fn same_shape(&self, other: &VolumeGrid) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    pub(crate) fn ensure_same(&self, other: &VolumeGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }
}

/// Dense voxel array on a [`VolumeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    grid: VolumeGrid,
    data: Vec<V>,
}

/// Voxel mask, e.g. the primary tumour or a ground-truth segmentation.
pub type BinaryMask = Volume<bool>;

impl<V: Copy> Volume<V> {
    pub fn new(grid: VolumeGrid, data: Vec<V>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match grid voxel count {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: VolumeGrid, value: V) -> Self {
        Self { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: VolumeGrid, mut f: impl FnMut(usize, usize, usize) -> V) -> Self {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> V {
        self.data[self.grid.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: V) {
        let i = self.grid.index(x, y, z);
        self.data[i] = v;
    }

    pub fn map<W: Copy>(&self, f: impl Fn(V) -> W) -> Volume<W> {
        Volume { grid: self.grid, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Replace the origin, keeping dims, spacing and data.
    pub fn with_origin(mut self, origin: [f64; 3]) -> Result<Self> {
        self.grid = VolumeGrid::with_origin(self.grid.dims, self.grid.spacing, origin)?;
        Ok(self)
    }
}

impl<T: Real> Volume<T> {
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("voxel {:?} = {}", self.grid.coords(i), self.data[i]))),
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        self.map(|v| U::lit(v.widen()))
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn to_scalar<T: Real>(&self) -> Volume<T> {
        self.map(|b| if b { T::one() } else { T::zero() })
    }
}

/// Instance labels: 0 is background, `1..=K` are instances.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    labels: Volume<u32>,
    n_instances: u32,
}

impl LabelVolume {
    /// Validates that ids form the contiguous set `{1..K}`.
    pub fn new(labels: Volume<u32>) -> Result<Self> {
        let max = labels.data.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &l in &labels.data {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=max as usize).find(|&k| !seen[k]) {
            return Err(Error::InvalidArgument(format!("label ids are not contiguous: {missing} is missing (max {max})")));
        }
        Ok(Self { labels, n_instances: max })
    }

    /// Renumber surviving ids to `1..=K`, preserving their relative order.
    pub fn compacting(labels: Volume<u32>) -> Self {
        let max = labels.data.iter().copied().max().unwrap_or(0) as usize;
        let mut present = vec![false; max + 1];
        for &l in &labels.data {
            present[l as usize] = true;
        }
        let mut remap = vec![0u32; max + 1];
        let mut next = 0;
        for (k, slot) in remap.iter_mut().enumerate().skip(1) {
            if present[k] {
                next += 1;
                *slot = next;
            }
        }
        let labels = labels.map(|l| remap[l as usize]);
        Self { labels, n_instances: next }
    }

    pub fn empty(grid: VolumeGrid) -> Self {
        Self { labels: Volume::filled(grid, 0), n_instances: 0 }
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.labels.grid
    }

    pub fn volume(&self) -> &Volume<u32> {
        &self.labels
    }

    pub fn data(&self) -> &[u32] {
        &self.labels.data
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances as usize
    }

    pub fn foreground(&self) -> BinaryMask {
        self.labels.map(|l| l > 0)
    }

    /// Voxel indices of every instance; entry `k - 1` holds instance `k`.
    pub fn instance_voxels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_instances()];
        for (i, &l) in self.labels.data.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

fn check_target_spacing(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        Err(Error::InvalidArgument(format!("target spacing must be positive, got {target:?}")))
    } else {
        Ok(())
    }
}

fn resampled_dims(grid: &VolumeGrid, target: [f64; 3]) -> [usize; 3] {
    std::array::from_fn(|a| {
        let extent = grid.dims[a] as f64 * grid.spacing[a] / target[a];
        ((extent - 1e-9).ceil() as usize).max(1)
    })
}

/// Continuous source coordinate of output index `j`, clamped to the input.
#[inline]
fn source_coord(j: usize, target: f64, spacing: f64, n: usize) -> f64 {
    (j as f64 * target / spacing).clamp(0.0, (n - 1) as f64)
}

/// Resample onto a grid with `target` spacing using trilinear interpolation
/// at voxel centres. Samples beyond the last voxel clamp to the edge.
pub fn resample_trilinear<T: Real>(v: &Volume<T>, target: [f64; 3]) -> Result<Volume<T>> {
    check_target_spacing(target)?;
    let dims = resampled_dims(&v.grid, target);
    let grid = VolumeGrid::with_origin(dims, target, v.grid.origin)?;
    let taps: [Vec<(usize, usize, f64)>; 3] = std::array::from_fn(|a| {
        let n = v.grid.dims[a];
        (0..dims[a])
            .map(|j| {
                let c = source_coord(j, target[a], v.grid.spacing[a], n);
                let i0 = c.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect()
    });
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let at = |x: usize, y: usize, z: usize| v.get(x, y, z).widen();
    Ok(Volume::from_fn(grid, |x, y, z| {
        let (x0, x1, fx) = taps[0][x];
        let (y0, y1, fy) = taps[1][y];
        let (z0, z1, fz) = taps[2][z];
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        T::lit(lerp(c0, c1, fz))
    }))
}

/// Nearest-neighbour resampling for masks and labels.
pub fn resample_nearest<V: Copy>(v: &Volume<V>, target: [f64; 3]) -> Result<Volume<V>> {
    check_target_spacing(target)?;
    let dims = resampled_dims(&v.grid, target);
    let grid = VolumeGrid::with_origin(dims, target, v.grid.origin)?;
    let taps: [Vec<usize>; 3] = std::array::from_fn(|a| {
        let n = v.grid.dims[a];
        (0..dims[a])
            .map(|j| (source_coord(j, target[a], v.grid.spacing[a], n).round() as usize).min(n - 1))
            .collect()
    });
    Ok(Volume::from_fn(grid, |x, y, z| v.get(taps[0][x], taps[1][y], taps[2][z])))
}

pub fn resample_labels(v: &LabelVolume, target: [f64; 3]) -> Result<LabelVolume> {
    Ok(LabelVolume::compacting(resample_nearest(v.volume(), target)?))
}

/// Start corner of a window of `size` centred at `center`.
pub fn window_start(center: [i64; 3], size: [usize; 3]) -> [i64; 3] {
    std::array::from_fn(|a| center[a] - (size[a] / 2) as i64)
}

/// Extract a `size`-shaped window centred at `center`. Voxels outside the
/// source are filled with `V::default()` (zero / false / background).
pub fn crop_subvolume<V: Copy + Default>(v: &Volume<V>, center: [i64; 3], size: [usize; 3]) -> Result<Volume<V>> {
    let start = window_start(center, size);
    crop_at(v, start, size)
}

/// Extract a `size`-shaped window whose first voxel is `start`.
pub fn crop_at<V: Copy + Default>(v: &Volume<V>, start: [i64; 3], size: [usize; 3]) -> Result<Volume<V>> {
    let sp = v.grid.spacing;
    let origin = std::array::from_fn(|a| v.grid.origin[a] + start[a] as f64 * sp[a]);
    let grid = VolumeGrid::with_origin(size, sp, origin)?;
    let [nx, ny, nz] = v.grid.dims;
    let mut data = vec![V::default(); grid.len()];
    // Overlap of the window with the source along x, reused for every row.
    let x_lo = start[0].max(0);
    let x_hi = (start[0] + size[0] as i64).min(nx as i64);
    if x_lo < x_hi {
        for z in 0..size[2] {
            let sz = start[2] + z as i64;
            if sz < 0 || sz >= nz as i64 {
                continue;
            }
            for y in 0..size[1] {
                let sy = start[1] + y as i64;
                if sy < 0 || sy >= ny as i64 {
                    continue;
                }
                let src = v.grid.index(x_lo as usize, sy as usize, sz as usize);
                let dst = grid.index((x_lo - start[0]) as usize, y, z);
                let n = (x_hi - x_lo) as usize;
                data[dst..dst + n].copy_from_slice(&v.data[src..src + n]);
            }
        }
    }
    Volume::new(grid, data)
}

pub fn crop_labels(v: &LabelVolume, center: [i64; 3], size: [usize; 3]) -> Result<LabelVolume> {
    Ok(LabelVolume::compacting(crop_subvolume(v.volume(), center, size)?))
}

fn check_angle(angle_deg: f64) -> Result<()> {
    if !angle_deg.is_finite() || angle_deg.abs() > MAX_ROTATION_DEG {
        Err(Error::InvalidArgument(format!("rotation angle must be within ±{MAX_ROTATION_DEG}°, got {angle_deg}")))
    } else {
        Ok(())
    }
}

/// For every output pixel of a slice, the continuous source position after
/// rotating by `angle_deg` about the slice centre in physical coordinates.
fn rotation_sources(grid: &VolumeGrid, angle_deg: f64) -> Vec<(f64, f64)> {
    let [nx, ny, _] = grid.dims;
    let [sx, sy, _] = grid.spacing;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            let u = (x as f64 - cx) * sx;
            let w = (y as f64 - cy) * sy;
            // inverse rotation maps an output position back to its source
            let su = cos * u + sin * w;
            let sw = -sin * u + cos * w;
            out.push((su / sx + cx, sw / sy + cy));
        }
    }
    out
}

const EDGE_EPS: f64 = 1e-9;

/// Rotate every z-slice by `angle_deg` (counter-clockwise in x-y) about the
/// slice centre with bilinear interpolation. Samples falling outside the
/// slice are zero.
pub fn rotate_xy<T: Real>(v: &Volume<T>, angle_deg: f64) -> Result<Volume<T>> {
    check_angle(angle_deg)?;
    if angle_deg == 0.0 {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.grid.dims;
    let sources = rotation_sources(&v.grid, angle_deg);
    let mut data = vec![T::zero(); v.len()];
    let (mx, my) = ((nx - 1) as f64, (ny - 1) as f64);
    for (p, &(fx, fy)) in sources.iter().enumerate() {
        if fx < -EDGE_EPS || fy < -EDGE_EPS || fx > mx + EDGE_EPS || fy > my + EDGE_EPS {
            continue;
        }
        let fx = fx.clamp(0.0, mx);
        let fy = fy.clamp(0.0, my);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        for z in 0..nz {
            let a = v.get(x0, y0, z).widen();
            let b = v.get(x1, y0, z).widen();
            let c = v.get(x0, y1, z).widen();
            let d = v.get(x1, y1, z).widen();
            let top = a + tx * (b - a);
            let bot = c + tx * (d - c);
            data[p + nx * ny * z] = T::lit(top + ty * (bot - top));
        }
    }
    Volume::new(v.grid, data)
}

/// Nearest-neighbour variant of [`rotate_xy`] for masks and labels.
pub fn rotate_xy_nearest<V: Copy + Default>(v: &Volume<V>, angle_deg: f64) -> Result<Volume<V>> {
    check_angle(angle_deg)?;
    if angle_deg == 0.0 {
        return Ok(v.clone());
    }
    let [nx, ny, nz] = v.grid.dims;
    let sources = rotation_sources(&v.grid, angle_deg);
    let mut data = vec![V::default(); v.len()];
    for (p, &(fx, fy)) in sources.iter().enumerate() {
        let x = fx.round();
        let y = fy.round();
        if x < 0.0 || y < 0.0 || x > (nx - 1) as f64 || y > (ny - 1) as f64 {
            continue;
        }
        for z in 0..nz {
            data[p + nx * ny * z] = v.get(x as usize, y as usize, z);
        }
    }
    Volume::new(v.grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> VolumeGrid {
        VolumeGrid::new(dims, spacing).unwrap()
    }

    fn noise(g: VolumeGrid, seed: u64) -> Volume<f32> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Volume::from_fn(g, |_, _, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32) / (1u64 << 24) as f32
        })
    }

    #[test]
    fn grid_validation() {
        assert!(VolumeGrid::new([0, 1, 1], [1.0; 3]).is_err());
        assert!(VolumeGrid::new([1, 1, 1], [1.0, 0.0, 1.0]).is_err());
        assert!(VolumeGrid::new([1, 1, 1], [1.0, -2.0, 1.0]).is_err());
        assert!(VolumeGrid::new([usize::MAX, 2, 2], [1.0; 3]).is_err());
    }

    #[test]
    fn layout_is_x_fastest() {
        let g = grid([3, 4, 5], [1.0; 3]);
        let mut v = Volume::filled(g, 0u32);
        v.set(2, 1, 3, 7);
        assert_eq!(v.data()[2 + 3 * (1 + 4 * 3)], 7);
        assert_eq!(g.coords(2 + 3 * (1 + 4 * 3)), [2, 1, 3]);
    }

    #[test]
    fn label_volume_contiguity() {
        let g = grid([4, 1, 1], [1.0; 3]);
        assert!(LabelVolume::new(Volume::new(g, vec![0, 1, 2, 2]).unwrap()).is_ok());
        assert!(LabelVolume::new(Volume::new(g, vec![0, 1, 3, 3]).unwrap()).is_err());
        let l = LabelVolume::compacting(Volume::new(g, vec![0, 5, 3, 3]).unwrap());
        assert_eq!(l.data(), &[0, 2, 1, 1]);
        assert_eq!(l.n_instances(), 2);
    }

    #[test]
    fn resample_identity() {
        let v = noise(grid([5, 6, 7], [1.0, 1.0, 2.5]), 3);
        let r = resample_trilinear(&v, [1.0, 1.0, 2.5]).unwrap();
        assert_eq!(r.dims(), v.dims());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn resample_ramp_to_half_spacing() {
        let v = Volume::from_fn(grid([8, 1, 1], [1.0; 3]), |x, _, _| x as f32);
        let r = resample_trilinear(&v, [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [16, 1, 1]);
        for j in 0..16 {
            // ramp evaluated at the physical position, clamped at the edge
            let expect = (0.5 * j as f64).min(7.0);
            assert!((r.get(j, 0, 0) as f64 - expect).abs() < 1e-5, "{j}");
        }
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = Volume::filled(grid([2, 2, 2], [1.0; 3]), 0.0f32);
        assert!(resample_trilinear(&v, [1.0, 0.0, 1.0]).is_err());
        assert!(resample_nearest(&v, [1.0, 1.0, -1.0]).is_err());
    }

    #[test]
    fn resample_dims_are_ceiled() {
        let v = Volume::filled(grid([3, 3, 3], [1.0, 1.0, 2.5]), 1.0f32);
        let r = resample_trilinear(&v, [1.0, 2.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [3, 2, 8]);
    }

    #[test]
    fn nearest_resample_keeps_labels_integral() {
        let g = grid([4, 4, 2], [1.0, 1.0, 2.5]);
        let labels = Volume::from_fn(g, |x, _, _| if x >= 2 { 1u32 } else { 0 });
        let r = resample_labels(&LabelVolume::new(labels).unwrap(), [0.7, 0.7, 1.0]).unwrap();
        assert!(r.data().iter().all(|&l| l <= 1));
        assert_eq!(r.n_instances(), 1);
    }

    #[test]
    fn crop_identity_and_outside() {
        let v = noise(grid([6, 5, 4], [1.0, 1.0, 2.5]), 1);
        let c = crop_subvolume(&v, [3, 2, 2], [6, 5, 4]).unwrap();
        assert_eq!(c.data(), v.data());
        let out = crop_subvolume(&v, [100, -50, 2], [3, 3, 3]).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.grid().spacing(), v.grid().spacing());
    }

    #[test]
    fn crop_default_window_matches_direct_indexing() {
        let v = noise(grid([128, 128, 80], [1.0, 1.0, 2.5]), 9);
        let size = [96, 96, 64];
        let c = crop_subvolume(&v, [64, 64, 40], size).unwrap();
        assert_eq!(c.dims(), size);
        let start = window_start([64, 64, 40], size);
        for &(x, y, z) in &[(0, 0, 0), (95, 95, 63), (10, 50, 30), (47, 3, 61)] {
            let sx = (start[0] + x as i64) as usize;
            let sy = (start[1] + y as i64) as usize;
            let sz = (start[2] + z as i64) as usize;
            assert_eq!(c.get(x, y, z), v.get(sx, sy, sz));
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let v = noise(grid([9, 7, 3], [1.0, 1.0, 2.5]), 2);
        let r = rotate_xy(&v, 0.0).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert!(rotate_xy(&v, 46.0).is_err());
        assert!(rotate_xy_nearest(&v.map(|x| x > 0.5), -90.0).is_err());
    }

    #[test]
    fn rotate_constant_inside_inscribed_circle() {
        let g = grid([21, 21, 2], [1.0, 1.0, 2.5]);
        let v = Volume::filled(g, 3.0f32);
        let r = rotate_xy(&v, 17.0).unwrap();
        for y in 0..21 {
            for x in 0..21 {
                let d = ((x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)).sqrt();
                if d <= 10.0 {
                    assert!((r.get(x, y, 1) - 3.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rotate_forward_then_back() {
        // smooth field so that bilinear error stays small
        let g = grid([32, 32, 2], [1.0, 1.0, 2.5]);
        let v = Volume::from_fn(g, |x, y, _| {
            (0.5 + 0.25 * (x as f64 / 5.0).sin() + 0.25 * (y as f64 / 6.0).cos()) as f32
        });
        let back = rotate_xy(&rotate_xy(&v, 10.0).unwrap(), -10.0).unwrap();
        let mut worst = 0.0f32;
        for z in 0..2 {
            for y in 8..24 {
                for x in 8..24 {
                    worst = worst.max((back.get(x, y, z) - v.get(x, y, z)).abs());
                }
            }
        }
        assert!(worst <= 0.05, "residual {worst}");
    }

    #[test]
    fn rotate_nearest_moves_block_counter_clockwise() {
        let g = grid([11, 11, 1], [1.0; 3]);
        let v = Volume::from_fn(g, |x, y, _| (7..=9).contains(&x) && (4..=6).contains(&y));
        let r = rotate_xy_nearest(&v, 45.0).unwrap();
        // block centre (8,5) sits 3 mm right of centre; 45° ccw lands near (7.1, 7.1)
        assert!(r.get(7, 7, 0));
        assert!(!r.get(8, 5, 0));
    }

    proptest! {
        #[test]
        fn crop_output_has_requested_dims(
            cx in -20i64..40, cy in -20i64..40, cz in -5i64..10,
            sx in 1usize..12, sy in 1usize..12, sz in 1usize..6,
        ) {
            let v = noise(grid([10, 9, 4], [1.0, 1.0, 2.5]), 5);
            let c = crop_subvolume(&v, [cx, cy, cz], [sx, sy, sz]).unwrap();
            prop_assert_eq!(c.dims(), [sx, sy, sz]);
            let start = window_start([cx, cy, cz], [sx, sy, sz]);
            for (i, &val) in c.data().iter().enumerate() {
                let [x, y, z] = c.grid().coords(i);
                let src = v.grid().checked_index(start[0] + x as i64, start[1] + y as i64, start[2] + z as i64);
                prop_assert_eq!(val, src.map(|s| v.data()[s]).unwrap_or(0.0));
            }
        }

        #[test]
        fn resample_maps_constant_to_constant(
            c in -5.0f32..5.0, tx in 0.3f64..3.0, ty in 0.3f64..3.0, tz in 0.5f64..4.0,
        ) {
            let v = Volume::filled(grid([6, 5, 4], [1.0, 1.0, 2.5]), c);
            let r = resample_trilinear(&v, [tx, ty, tz]).unwrap();
            prop_assert!(r.data().iter().all(|&x| x == c));
        }
    }
}
