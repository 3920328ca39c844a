//! Dense 3D convolution with zero "same" padding, and its adjoints.
//!
//! Every kernel tap is applied as a shifted row-wise multiply-add, which
//! keeps the inner loops contiguous. Work is organised per output plane so
//! the accumulator stays cache resident.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Volume, VolumeGrid};

/// Multi-channel volume; channel-major, each channel x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    grid: VolumeGrid,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(grid: VolumeGrid, channels: usize) -> Self {
        Self { grid, channels, data: vec![T::zero(); grid.len() * channels] }
    }

    pub fn from_channels(channels: &[&Volume<T>]) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::ShapeMismatch("no channels".into()))?;
        let grid = *first.grid();
        let mut data = Vec::with_capacity(grid.len() * channels.len());
        for c in channels {
            c.grid().ensure_same(&grid, "feature map channel")?;
            data.extend_from_slice(c.data());
        }
        Ok(Self { grid, channels: channels.len(), data })
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn voxels(&self) -> usize {
        self.grid.len()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_volume(&self, c: usize) -> Volume<T> {
        Volume::new(self.grid, self.channel(c).to_vec()).expect("channel length matches grid")
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap { grid: self.grid, channels: self.channels, data: self.data.iter().map(|v| U::lit(v.widen())).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd cubic kernel edge (1 or 3 in practice).
    pub kernel: usize,
    /// `[out][in][kz][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Valid output range `[lo, hi)` along an axis of length `n` for tap offset `d`.
#[inline]
fn valid_range(n: usize, d: i64) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as i64 - d.max(0)).max(lo as i64) as usize;
    (lo, hi)
}

#[inline(always)]
fn axpy<T: Real>(out: &mut [T], inp: &[T], w: T) {
    for (o, &i) in out.iter_mut().zip(inp) {
        *o += w * i;
    }
}

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four partial sums so the loop can be vectorised without reassociation
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * k + l] * b[4 * k + l];
        }
    }
    let mut tail = T::zero();
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let taps = kernel * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * taps],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    #[inline]
    pub fn w(&self, o: usize, c: usize, tap: usize) -> T {
        self.weight[(o * self.in_channels + c) * self.taps() + tap]
    }

    /// Tap index to spatial offset `(dx, dy, dz)`.
    #[inline]
    pub fn offset(&self, tap: usize) -> [i64; 3] {
        let k = self.kernel;
        let r = (k / 2) as i64;
        [(tap % k) as i64 - r, ((tap / k) % k) as i64 - r, (tap / (k * k)) as i64 - r]
    }

    fn check_input(&self, input: &FeatureMap<T>) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        Ok(())
    }

    /// Pre-activation output.
    pub fn forward(&self, input: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.check_input(input)?;
        let grid = input.grid;
        let [nx, ny, nz] = grid.dims();
        let n = grid.len();
        let plane = nx * ny;
        let mut out = FeatureMap::zeros(grid, self.out_channels);
        out.data.par_chunks_mut(n).enumerate().for_each(|(o, out_c)| {
            for z in 0..nz {
                let out_plane = &mut out_c[z * plane..(z + 1) * plane];
                out_plane.fill(self.bias[o]);
                for c in 0..self.in_channels {
                    let in_c = input.channel(c);
                    for tap in 0..self.taps() {
                        let [dx, dy, dz] = self.offset(tap);
                        let sz = z as i64 + dz;
                        if sz < 0 || sz >= nz as i64 {
                            continue;
                        }
                        let w = self.w(o, c, tap);
                        if w == T::zero() {
                            continue;
                        }
                        let in_plane = &in_c[sz as usize * plane..(sz as usize + 1) * plane];
                        let (x0, x1) = valid_range(nx, dx);
                        let (y0, y1) = valid_range(ny, dy);
                        for y in y0..y1 {
                            let sy = (y as i64 + dy) as usize;
                            let dst = &mut out_plane[y * nx + x0..y * nx + x1];
                            let src_lo = (x0 as i64 + dx) as usize;
                            let src = &in_plane[sy * nx + src_lo..sy * nx + src_lo + (x1 - x0)];
                            axpy(dst, src, w);
                        }
                    }
                }
            }
        });
        Ok(out)
    }

    /// Gradient of the input given the gradient of the pre-activation output.
    pub fn backward_input(&self, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let grid = grad_out.grid;
        let [nx, ny, nz] = grid.dims();
        let n = grid.len();
        let plane = nx * ny;
        let mut grad_in = FeatureMap::zeros(grid, self.in_channels);
        grad_in.data.par_chunks_mut(n).enumerate().for_each(|(c, gin_c)| {
            for z in 0..nz {
                let gin_plane = &mut gin_c[z * plane..(z + 1) * plane];
                for o in 0..self.out_channels {
                    let gout = grad_out.channel(o);
                    for tap in 0..self.taps() {
                        // input voxel x receives from output voxel x - d
                        let [dx, dy, dz] = self.offset(tap).map(|d| -d);
                        let sz = z as i64 + dz;
                        if sz < 0 || sz >= nz as i64 {
                            continue;
                        }
                        let w = self.w(o, c, tap);
                        let src_plane = &gout[sz as usize * plane..(sz as usize + 1) * plane];
                        let (x0, x1) = valid_range(nx, dx);
                        let (y0, y1) = valid_range(ny, dy);
                        for y in y0..y1 {
                            let sy = (y as i64 + dy) as usize;
                            let dst = &mut gin_plane[y * nx + x0..y * nx + x1];
                            let src_lo = (x0 as i64 + dx) as usize;
                            let src = &src_plane[sy * nx + src_lo..sy * nx + src_lo + (x1 - x0)];
                            axpy(dst, src, w);
                        }
                    }
                }
            }
        });
        grad_in
    }

    /// Weight and bias gradients given the layer input and the gradient of
    /// the pre-activation output.
    pub fn backward_params(&self, input: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> Conv3d<T> {
        let [nx, ny, nz] = input.dims();
        let plane = nx * ny;
        let taps = self.taps();
        let per_out: Vec<(Vec<T>, T)> = (0..self.out_channels)
            .into_par_iter()
            .map(|o| {
                let gout = grad_out.channel(o);
                let mut gw = vec![T::zero(); self.in_channels * taps];
                for c in 0..self.in_channels {
                    let in_c = input.channel(c);
                    for tap in 0..taps {
                        let [dx, dy, dz] = self.offset(tap);
                        let (x0, x1) = valid_range(nx, dx);
                        let (y0, y1) = valid_range(ny, dy);
                        let (z0, z1) = valid_range(nz, dz);
                        let mut acc = 0.0f64;
                        for z in z0..z1 {
                            let sz = (z as i64 + dz) as usize;
                            let mut plane_acc = T::zero();
                            for y in y0..y1 {
                                let sy = (y as i64 + dy) as usize;
                                let g = &gout[z * plane + y * nx + x0..z * plane + y * nx + x1];
                                let src_lo = sz * plane + sy * nx + (x0 as i64 + dx) as usize;
                                plane_acc += dot(g, &in_c[src_lo..src_lo + (x1 - x0)]);
                            }
                            acc += plane_acc.widen();
                        }
                        gw[c * taps + tap] = T::lit(acc);
                    }
                }
                let gb = gout.chunks(plane).map(|p| p.iter().copied().sum::<T>().widen()).sum::<f64>();
                (gw, T::lit(gb))
            })
            .collect();
        let mut grads = Conv3d::zeros(self.in_channels, self.out_channels, self.kernel);
        for (o, (gw, gb)) in per_out.into_iter().enumerate() {
            let len = gw.len();
            grads.weight[o * len..(o + 1) * len].copy_from_slice(&gw);
            grads.bias[o] = gb;
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> VolumeGrid {
        VolumeGrid::new(dims, [1.0, 1.0, 2.5]).unwrap()
    }

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }
    }

    fn random_conv(in_c: usize, out_c: usize, k: usize, seed: u64) -> Conv3d<f64> {
        let mut r = lcg(seed);
        let mut conv = Conv3d::zeros(in_c, out_c, k);
        conv.weight.iter_mut().for_each(|w| *w = r());
        conv.bias.iter_mut().for_each(|b| *b = r());
        conv
    }

    fn random_map(dims: [usize; 3], c: usize, seed: u64) -> FeatureMap<f64> {
        let mut r = lcg(seed);
        let mut m = FeatureMap::zeros(grid(dims), c);
        m.data.iter_mut().for_each(|v| *v = r());
        m
    }

    /// Direct seven-loop convolution used as the reference.
    fn naive_forward(conv: &Conv3d<f64>, input: &FeatureMap<f64>) -> FeatureMap<f64> {
        let g = *input.grid();
        let mut out = FeatureMap::zeros(g, conv.out_channels);
        let n = g.len();
        for o in 0..conv.out_channels {
            for i in 0..n {
                let [x, y, z] = g.coords(i);
                let mut acc = conv.bias[o];
                for c in 0..conv.in_channels {
                    for tap in 0..conv.taps() {
                        let [dx, dy, dz] = conv.offset(tap);
                        if let Some(j) = g.checked_index(x as i64 + dx, y as i64 + dy, z as i64 + dz) {
                            acc += conv.w(o, c, tap) * input.channel(c)[j];
                        }
                    }
                }
                out.data[o * n + i] = acc;
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        for (dims, k) in [([5, 4, 3], 3), ([1, 1, 1], 3), ([4, 2, 6], 1), ([7, 1, 2], 3)] {
            let conv = random_conv(2, 3, k, 11);
            let input = random_map(dims, 2, 5);
            let fast = conv.forward(&input).unwrap();
            let slow = naive_forward(&conv, &input);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint() {
        // <conv(x) - b, g> == <x, conv^T g> and == <w, dL/dw>
        let conv = random_conv(3, 2, 3, 1);
        let x = random_map([5, 6, 4], 3, 2);
        let g = random_map([5, 6, 4], 2, 3);
        let y = conv.forward(&x).unwrap();
        let n = x.voxels();
        let lhs: f64 = (0..2).map(|o| (0..n).map(|i| (y.channel(o)[i] - conv.bias[o]) * g.channel(o)[i]).sum::<f64>()).sum();
        let gin = conv.backward_input(&g);
        let rhs: f64 = x.data().iter().zip(gin.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        let gp = conv.backward_params(&x, &g);
        let via_w: f64 = conv.weight.iter().zip(&gp.weight).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10 * lhs.abs().max(1.0));
        let gb: f64 = g.channel(1).iter().sum();
        assert!((gp.bias[1] - gb).abs() < 1e-12);
    }

    #[test]
    fn channel_count_is_checked() {
        let conv = random_conv(2, 1, 3, 1);
        assert!(conv.forward(&random_map([3, 3, 3], 3, 1)).is_err());
    }
}
