//! Voxel grids shared by the I/O, preprocessing and tokenization stages.
//!
//! Voxels are stored in C order: axis 0 is the slowest-varying index, so the
//! flat offset of `(x, y, z)` is `(x * ny + y) * nz + z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn offset(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// A volume as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub dims: Dims,
    /// mm per voxel along each axis.
    pub spacing: [f64; 3],
    pub voxels: Vec<f64>,
    pub modality: String,
}

impl RawVolume {
    pub fn new(dims: Dims, spacing: [f64; 3], voxels: Vec<f64>, modality: impl Into<String>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::UnsupportedShape(format!("zero-sized dims {dims:?}")));
        }
        if voxels.len() != voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Range(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
            modality: modality.into(),
        })
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[offset(self.dims, x, y, z)]
    }
}

/// Half-open per-axis box `[lo, hi)` of voxels that came from source data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extent {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Extent {
    pub fn full(dims: Dims) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        x >= self.lo[0]
            && x < self.hi[0]
            && y >= self.lo[1]
            && y < self.hi[1]
            && z >= self.lo[2]
            && z < self.hi[2]
    }

    pub fn len(&self, axis: usize) -> usize {
        self.hi[axis] - self.lo[axis]
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|a| self.hi[a] <= self.lo[a])
    }

    pub fn shifted(&self, low_pad: [usize; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] += low_pad[a];
            out.hi[a] += low_pad[a];
        }
        out
    }

    /// Mirror the extent on the given axes of a grid of size `dims`.
    pub fn flipped(&self, dims: Dims, axes: [bool; 3]) -> Self {
        let mut out = *self;
        for a in 0..3 {
            if axes[a] {
                out.lo[a] = dims[a] - self.hi[a];
                out.hi[a] = dims[a] - self.lo[a];
            }
        }
        out
    }
}

/// A preprocessed volume with padding bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub voxels: Vec<f64>,
    pub modality: String,
    pub valid_extent: Extent,
}

impl Volume {
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[offset(self.dims, x, y, z)]
    }

    /// Apply `f` to every voxel inside the valid extent, in C order.
    pub fn map_valid(&mut self, mut f: impl FnMut(f64, [usize; 3]) -> f64) {
        let e = self.valid_extent;
        for x in e.lo[0]..e.hi[0] {
            for y in e.lo[1]..e.hi[1] {
                let row = offset(self.dims, x, y, 0);
                for z in e.lo[2]..e.hi[2] {
                    let v = &mut self.voxels[row + z];
                    *v = f(*v, [x, y, z]);
                }
            }
        }
    }

    /// Values inside the valid extent, in C order.
    pub fn valid_values(&self) -> Vec<f64> {
        let e = self.valid_extent;
        let mut out = Vec::with_capacity(e.len(0) * e.len(1) * e.len(2));
        for x in e.lo[0]..e.hi[0] {
            for y in e.lo[1]..e.hi[1] {
                let row = offset(self.dims, x, y, 0);
                out.extend_from_slice(&self.voxels[row + e.lo[2]..row + e.hi[2]]);
            }
        }
        out
    }

    pub fn to_raw(&self, spacing: [f64; 3]) -> RawVolume {
        RawVolume {
            dims: self.dims,
            spacing,
            voxels: self.voxels.clone(),
            modality: self.modality.clone(),
        }
    }
}
