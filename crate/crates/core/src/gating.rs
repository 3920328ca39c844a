//! Distance-based gating: per-voxel weights that route each voxel to the
//! tumour-proximal and tumour-distal branches.

use serde::{Deserialize, Serialize};

use crate::edt::DistanceMap;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Volume, VolumeGrid};

/// Binary gating threshold, mm.
pub const DEFAULT_D0_MM: f64 = 70.0;
/// Soft gating ramp start, mm.
pub const DEFAULT_D_PROX_MM: f64 = 50.0;
/// Soft gating ramp end, mm.
pub const DEFAULT_D_DIST_MM: f64 = 90.0;

/// Index of a branch in per-branch arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    Proximal = 0,
    Distal = 1,
}

pub const BRANCHES: [Branch; 2] = [Branch::Proximal, Branch::Distal];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GatingParams {
    /// `g_prox = 1[D <= d0]`.
    Binary { d0_mm: f64 },
    /// Linear ramp from 1 at `d_prox` down to 0 at `d_dist`.
    Soft { d_prox_mm: f64, d_dist_mm: f64 },
    /// Every voxel goes to the proximal branch; the distal branch is unused.
    /// This is the single-network baseline.
    Ungated,
}

impl GatingParams {
    pub fn binary(d0_mm: f64) -> Result<Self> {
        if !(d0_mm > 0.0) || !d0_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("d0 must be positive, got {d0_mm}")));
        }
        Ok(GatingParams::Binary { d0_mm })
    }

    pub fn soft(d_prox_mm: f64, d_dist_mm: f64) -> Result<Self> {
        if !(d_prox_mm > 0.0) || !d_dist_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("d_prox must be positive, got {d_prox_mm}")));
        }
        if d_prox_mm >= d_dist_mm {
            return Err(Error::InvalidArgument(format!(
                "d_prox ({d_prox_mm}) must be below d_dist ({d_dist_mm})"
            )));
        }
        Ok(GatingParams::Soft { d_prox_mm, d_dist_mm })
    }

    pub fn default_binary() -> Self {
        GatingParams::Binary { d0_mm: DEFAULT_D0_MM }
    }

    pub fn default_soft() -> Self {
        GatingParams::Soft { d_prox_mm: DEFAULT_D_PROX_MM, d_dist_mm: DEFAULT_D_DIST_MM }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GatingParams::Binary { d0_mm } => Self::binary(d0_mm).map(|_| ()),
            GatingParams::Soft { d_prox_mm, d_dist_mm } => Self::soft(d_prox_mm, d_dist_mm).map(|_| ()),
            GatingParams::Ungated => Ok(()),
        }
    }

    /// Proximal weight for a distance `d` (mm).
    #[inline]
    pub fn proximal_weight(&self, d: f64) -> f64 {
        match *self {
            GatingParams::Binary { d0_mm } => {
                if d <= d0_mm {
                    1.0
                } else {
                    0.0
                }
            }
            GatingParams::Soft { d_prox_mm, d_dist_mm } => {
                if d <= d_prox_mm {
                    1.0
                } else if d <= d_dist_mm {
                    1.0 - (d - d_prox_mm) / (d_dist_mm - d_prox_mm)
                } else {
                    0.0
                }
            }
            GatingParams::Ungated => 1.0,
        }
    }
}

/// Per-branch gating weights. `distal` is always built as `1 - proximal`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights<T> {
    proximal: Volume<T>,
    distal: Volume<T>,
    params: GatingParams,
}

impl<T: Real> GatingWeights<T> {
    pub fn from_distance(d: &DistanceMap, params: GatingParams) -> Result<Self> {
        params.validate()?;
        Ok(Self::from_distance_volume(d.volume(), params))
    }

    pub(crate) fn from_distance_volume(d: &Volume<f32>, params: GatingParams) -> Self {
        let proximal = d.map(|v| T::lit(params.proximal_weight(v as f64)));
        let distal = proximal.map(|g| T::one() - g);
        Self { proximal, distal, params }
    }

    /// Weights routing every voxel of `grid` to the proximal branch.
    pub fn ungated(grid: VolumeGrid) -> Self {
        Self {
            proximal: Volume::filled(grid, T::one()),
            distal: Volume::filled(grid, T::zero()),
            params: GatingParams::Ungated,
        }
    }

    /// Build from an explicit proximal weight volume; values must lie in
    /// `[0, 1]`.
    pub fn from_proximal(proximal: Volume<T>, params: GatingParams) -> Result<Self> {
        if let Some(g) = proximal.data().iter().find(|g| !(**g >= T::zero() && **g <= T::one())) {
            return Err(Error::InvalidArgument(format!("gating weight {g} outside [0, 1]")));
        }
        let distal = proximal.map(|g| T::one() - g);
        Ok(Self { proximal, distal, params })
    }

    pub fn proximal(&self) -> &Volume<T> {
        &self.proximal
    }

    pub fn distal(&self) -> &Volume<T> {
        &self.distal
    }

    pub fn branch(&self, b: Branch) -> &Volume<T> {
        match b {
            Branch::Proximal => &self.proximal,
            Branch::Distal => &self.distal,
        }
    }

    pub fn params(&self) -> GatingParams {
        self.params
    }

    pub fn grid(&self) -> &VolumeGrid {
        self.proximal.grid()
    }

    pub fn cast<U: Real>(&self) -> GatingWeights<U> {
        let proximal = self.proximal.cast::<U>();
        let distal = proximal.map(|g| U::one() - g);
        GatingWeights { proximal, distal, params: self.params }
    }
}

pub fn binary_gate<T: Real>(d: &DistanceMap, d0_mm: f64) -> Result<GatingWeights<T>> {
    GatingWeights::from_distance(d, GatingParams::binary(d0_mm)?)
}

pub fn soft_gate<T: Real>(d: &DistanceMap, d_prox_mm: f64, d_dist_mm: f64) -> Result<GatingWeights<T>> {
    GatingWeights::from_distance(d, GatingParams::soft(d_prox_mm, d_dist_mm)?)
}
