//! Exact Euclidean distance transform from a tumour mask on anisotropic
//! grids.
//!
//! The transform is separable: squared distances are built one axis at a
//! time, and each 1D pass computes the lower envelope of the parabolas
//! `w * (i - j)^2 + f(j)` rooted at every finite site `j` of the row, where
//! `w` is the squared spacing along that axis. After the three passes every
//! voxel holds the squared physical distance to its nearest foreground voxel
//! centre; the result is exact up to floating point rounding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume, VolumeGrid};

/// Voxel-count guard for [`edt_bruteforce`].
pub const BRUTEFORCE_MAX_VOXELS: usize = 1 << 18;

/// Per-voxel physical distance (mm) to the nearest tumour voxel; zero inside
/// the tumour.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap(Volume<f32>);

impl DistanceMap {
    /// Wrap an existing volume after checking that every value is finite
    /// and non-negative.
    pub fn from_volume(v: Volume<f32>) -> Result<Self> {
        if let Some(i) = v.data().iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "distance at {:?} is {}",
                v.grid().coords(i),
                v.data()[i]
            )));
        }
        Ok(Self(v))
    }

    pub fn volume(&self) -> &Volume<f32> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<f32> {
        self.0
    }

    pub fn grid(&self) -> &VolumeGrid {
        self.0.grid()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

/// One lower-envelope pass over a strided line.
///
/// `f` holds squared distances (infinite where no site has been seen yet);
/// on return it holds `min_j w * (i - j)^2 + f(j)`.
fn envelope_1d(f: &mut [f64], w: f64, sites: &mut Vec<usize>, bounds: &mut Vec<f64>, scratch: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let n = f.len();
    let key = |j: usize, f: &[f64]| f[j] + w * (j * j) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        // pop parabolas hidden by the new one
        loop {
            let Some(&p) = sites.last() else {
                break;
            };
            let s = (key(q, f) - key(p, f)) / (2.0 * w * (q - p) as f64);
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            bounds.push(f64::NEG_INFINITY);
        }
        sites.push(q);
    }
    if sites.is_empty() {
        return;
    }
    scratch.clear();
    scratch.extend_from_slice(f);
    let mut k = 0;
    for (i, out) in f.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < i as f64 {
            k += 1;
        }
        let j = sites[k];
        let d = i as f64 - j as f64;
        *out = w * d * d + scratch[j];
    }
}

/// Run the envelope pass along `axis` for every line of `sq`.
fn pass(sq: &mut [f64], dims: [usize; 3], axis: usize, w: f64) {
    let [nx, ny, nz] = dims;
    match axis {
        0 => sq.par_chunks_mut(nx).for_each_init(
            || (Vec::new(), Vec::new(), Vec::new()),
            |(s, b, t), row| envelope_1d(row, w, s, b, t),
        ),
        1 => sq.par_chunks_mut(nx * ny).for_each_init(
            || (Vec::new(), Vec::new(), Vec::new(), vec![0.0; ny]),
            |(s, b, t, line), slab| {
                for x in 0..nx {
                    for y in 0..ny {
                        line[y] = slab[x + nx * y];
                    }
                    envelope_1d(line, w, s, b, t);
                    for y in 0..ny {
                        slab[x + nx * y] = line[y];
                    }
                }
            },
        ),
        _ => {
            // gather z-lines into contiguous rows, transform, scatter back
            let plane = nx * ny;
            let mut lines = vec![0.0; sq.len()];
            for z in 0..nz {
                for p in 0..plane {
                    lines[p * nz + z] = sq[z * plane + p];
                }
            }
            lines.par_chunks_mut(nz).for_each_init(
                || (Vec::new(), Vec::new(), Vec::new()),
                |(s, b, t), line| envelope_1d(line, w, s, b, t),
            );
            for z in 0..nz {
                for p in 0..plane {
                    sq[z * plane + p] = lines[p * nz + z];
                }
            }
        }
    }
}

/// Squared physical distance to the nearest foreground voxel, in f64.
pub fn squared_distances(tumor: &BinaryMask) -> Result<Vec<f64>> {
    if !tumor.any() {
        return Err(Error::EmptyMask);
    }
    let dims = tumor.dims();
    let spacing = tumor.grid().spacing();
    let mut sq: Vec<f64> = tumor.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    for axis in 0..3 {
        pass(&mut sq, dims, axis, spacing[axis] * spacing[axis]);
    }
    Ok(sq)
}

/// Exact Euclidean distance transform of `tumor` in millimetres.
pub fn edt_exact(tumor: &BinaryMask) -> Result<DistanceMap> {
    let sq = squared_distances(tumor)?;
    let data = sq.iter().map(|&d| d.sqrt() as f32).collect();
    Ok(DistanceMap(Volume::new(*tumor.grid(), data)?))
}

/// Exhaustive O(N·|mask|) reference transform. Only for small volumes.
pub fn edt_bruteforce(tumor: &BinaryMask) -> Result<DistanceMap> {
    let grid = tumor.grid();
    if grid.len() > BRUTEFORCE_MAX_VOXELS {
        return Err(Error::TooLarge { voxels: grid.len(), limit: BRUTEFORCE_MAX_VOXELS });
    }
    let sp = grid.spacing();
    let pos = |i: usize| {
        let c = grid.coords(i);
        [c[0] as f64 * sp[0], c[1] as f64 * sp[1], c[2] as f64 * sp[2]]
    };
    let fg: Vec<[f64; 3]> = tumor.data().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| pos(i)).collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    let data = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if tumor.data()[i] {
                return 0.0;
            }
            let p = pos(i);
            let mut best = f64::INFINITY;
            for q in &fg {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            best.sqrt() as f32
        })
        .collect();
    Ok(DistanceMap(Volume::new(*grid, data)?))
}

/// Foreground voxels with at least one background face neighbour. Voxels on
/// the volume edge count as having a background neighbour.
pub fn boundary_voxels(tumor: &BinaryMask) -> Vec<[usize; 3]> {
    let grid = tumor.grid();
    let mut out = Vec::new();
    for (i, &b) in tumor.data().iter().enumerate() {
        if !b {
            continue;
        }
        let [x, y, z] = grid.coords(i).map(|c| c as i64);
        let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
            .iter()
            .any(|&(dx, dy, dz)| match grid.checked_index(x + dx, y + dy, z + dz) {
                Some(j) => !tumor.data()[j],
                None => true,
            });
        if exposed {
            out.push(grid.coords(i));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], spacing: [f64; 3]) -> VolumeGrid {
        VolumeGrid::new(dims, spacing).unwrap()
    }

    fn single_voxel(dims: [usize; 3], spacing: [f64; 3], at: [usize; 3]) -> BinaryMask {
        Volume::from_fn(grid(dims, spacing), |x, y, z| [x, y, z] == at)
    }

    #[test]
    fn single_voxel_closed_form() {
        let m = single_voxel([3, 3, 3], [1.0, 1.0, 2.5], [0, 0, 0]);
        for d in [edt_exact(&m).unwrap(), edt_bruteforce(&m).unwrap()] {
            let v = d.volume();
            assert_eq!(v.get(0, 0, 0), 0.0);
            assert!((v.get(1, 0, 0) - 1.0).abs() < 1e-6);
            assert!((v.get(0, 0, 1) - 2.5).abs() < 1e-6);
            assert!((v.get(1, 1, 1) as f64 - 8.25f64.sqrt()).abs() < 1e-6);
            assert!((v.get(1, 1, 1) - 2.8723).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let m = Volume::filled(grid([4, 4, 4], [1.0; 3]), false);
        assert!(matches!(edt_exact(&m), Err(Error::EmptyMask)));
        assert!(matches!(edt_bruteforce(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn bruteforce_size_guard() {
        let m = Volume::filled(grid([65, 64, 64], [1.0; 3]), true);
        assert!(matches!(edt_bruteforce(&m), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn full_mask_is_zero() {
        let m = Volume::filled(grid([4, 5, 3], [1.0, 1.0, 2.5]), true);
        assert!(edt_exact(&m).unwrap().data().iter().all(|&d| d == 0.0));
        assert!(edt_bruteforce(&m).unwrap().data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn boundary_of_cube_is_its_shell() {
        let m = Volume::from_fn(grid([8, 8, 8], [1.0; 3]), |x, y, z| {
            (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z)
        });
        let b = boundary_voxels(&m);
        assert_eq!(b.len(), 4 * 4 * 4 - 2 * 2 * 2);
        assert!(b.iter().all(|c| c.iter().any(|&v| v == 2 || v == 5)));
    }

    #[test]
    fn boundary_of_single_and_full_masks() {
        let m = single_voxel([3, 3, 3], [1.0; 3], [1, 1, 1]);
        assert_eq!(boundary_voxels(&m), vec![[1, 1, 1]]);
        let full = Volume::filled(grid([4, 4, 4], [1.0; 3]), true);
        assert_eq!(boundary_voxels(&full).len(), 64 - 8);
        assert!(boundary_voxels(&Volume::filled(grid([2, 2, 2], [1.0; 3]), false)).is_empty());
    }

    #[test]
    fn exterior_distance_equals_distance_to_boundary() {
        let m = Volume::from_fn(grid([10, 9, 7], [1.0, 1.0, 2.5]), |x, y, z| {
            (3..7).contains(&x) && (2..6).contains(&y) && (2..5).contains(&z)
        });
        let d = edt_exact(&m).unwrap();
        let b = boundary_voxels(&m);
        let sp = m.grid().spacing();
        for (i, &inside) in m.data().iter().enumerate() {
            let c = m.grid().coords(i);
            if inside {
                assert_eq!(d.data()[i], 0.0);
                continue;
            }
            let best = b
                .iter()
                .map(|q| (0..3).map(|a| ((c[a] as f64 - q[a] as f64) * sp[a]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!((d.data()[i] as f64 - best).abs() < 1e-4);
        }
    }

    fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
        (2usize..9, 2usize..9, 1usize..7, 0.02f64..0.3, any::<u64>()).prop_map(|(nx, ny, nz, p, seed)| {
            let mut s = seed | 1;
            let mut m = Volume::from_fn(grid([nx, ny, nz], [1.0, 1.0, 2.5]), |_, _, _| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 10_000) as f64 / 10_000.0 < p
            });
            if !m.any() {
                m.set(0, 0, 0, true);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn matches_bruteforce(m in mask_strategy()) {
            let a = edt_exact(&m).unwrap();
            let b = edt_bruteforce(&m).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }

        #[test]
        fn one_lipschitz_between_neighbours(m in mask_strategy()) {
            let d = edt_exact(&m).unwrap();
            let g = *m.grid();
            let sp = g.spacing();
            for i in 0..g.len() {
                let [x, y, z] = g.coords(i);
                for (a, nb) in [(0, [x + 1, y, z]), (1, [x, y + 1, z]), (2, [x, y, z + 1])] {
                    if nb[a] < g.dims()[a] {
                        let j = g.index(nb[0], nb[1], nb[2]);
                        prop_assert!((d.data()[i] - d.data()[j]).abs() as f64 <= sp[a] + 1e-5);
                    }
                }
            }
        }

        #[test]
        fn growing_the_mask_never_increases_distance(m in mask_strategy(), extra in 0usize..500) {
            let mut grown = m.clone();
            let n = grown.len();
            grown.data_mut()[extra % n] = true;
            let a = edt_exact(&m).unwrap();
            let b = edt_exact(&grown).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y <= x);
            }
        }

        #[test]
        fn spacing_scales_distances(m in mask_strategy(), c in 0.25f64..4.0) {
            let sp = m.grid().spacing();
            let scaled = Volume::new(
                VolumeGrid::new(m.dims(), [sp[0] * c, sp[1] * c, sp[2] * c]).unwrap(),
                m.data().to_vec(),
            ).unwrap();
            let a = squared_distances(&m).unwrap();
            let b = squared_distances(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.sqrt() * c - y.sqrt()).abs() <= 1e-9 * (1.0 + y.sqrt()));
            }
        }
    }
}
