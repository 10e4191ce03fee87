//! Voxel-grid container shared by every pipeline stage.
//!
//! Data is stored x-fastest: voxel `(i, j, k)` lives at
//! `i + j * nx + k * nx * ny`, so each axial slice is contiguous.

use crate::error::{Axis, Error, Result};

/// Intensity unit carried by a [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    HounsfieldUnits,
    /// Window-normalized intensities; every voxel lies in `[0, 1]`.
    Normalized,
}

/// How trilinear sampling treats lattice points outside the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    /// Outside points contribute this constant.
    Fill(f32),
    /// Outside points take the value of the nearest edge voxel.
    Clamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
    unit: Unit,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
        unit: Unit,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "volume dimensions must be positive, got {dims:?}"
            )));
        }
        let len = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Argument(format!("volume dimensions {dims:?} overflow")))?;
        if data.len() != len {
            return Err(Error::Argument(format!(
                "data length {} does not match dimensions {dims:?} ({len} voxels)",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Argument(format!(
                "spacing must be strictly positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Argument(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("voxel values must be finite".into()));
        }
        if unit == Unit::Normalized && data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Range(
                "normalized volume contains values outside [0, 1]".into(),
            ));
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            data,
            unit,
        })
    }

    /// Volume with unit spacing and zero origin.
    pub fn from_data(dims: [usize; 3], data: Vec<f32>, unit: Unit) -> Result<Self> {
        Volume::new(dims, [1.0; 3], [0.0; 3], data, unit)
    }

    /// Constant-valued volume.
    pub fn filled(dims: [usize; 3], value: f32, unit: Unit) -> Result<Self> {
        let len = dims.iter().product();
        Volume::from_data(dims, vec![value; len], unit)
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, spacing, origin, data, unit)
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

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Bounds-checked voxel lookup.
    pub fn get(&self, i: usize, j: usize, k: usize) -> Result<f32> {
        for (axis, index, extent) in [
            (Axis::X, i, self.dims[0]),
            (Axis::Y, j, self.dims[1]),
            (Axis::Z, k, self.dims[2]),
        ] {
            if index >= extent {
                return Err(Error::Index {
                    axis,
                    index,
                    extent,
                });
            }
        }
        Ok(self.data[self.index(i, j, k)])
    }

    /// Unchecked-by-contract voxel lookup; panics on out-of-range indices.
    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Trilinear interpolation at continuous voxel coordinates. Lattice points
    /// outside the grid contribute `fill`.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64, fill: f32) -> Result<f32> {
        if !fill.is_finite() {
            return Err(Error::Argument(format!(
                "fill value must be finite, got {fill}"
            )));
        }
        self.sample(x, y, z, Boundary::Fill(fill))
    }

    pub fn sample(&self, x: f64, y: f64, z: f64, boundary: Boundary) -> Result<f32> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::Argument(format!(
                "sample coordinates must be finite, got ({x}, {y}, {z})"
            )));
        }
        Ok(self.sample_unchecked(x, y, z, boundary))
    }

    /// Sampling without the finiteness check; callers guarantee finite input.
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64, z: f64, boundary: Boundary) -> f32 {
        let (x, y, z) = match boundary {
            Boundary::Clamp => (
                x.clamp(0.0, (self.dims[0] - 1) as f64),
                y.clamp(0.0, (self.dims[1] - 1) as f64),
                z.clamp(0.0, (self.dims[2] - 1) as f64),
            ),
            Boundary::Fill(_) => (x, y, z),
        };
        let fill = match boundary {
            Boundary::Fill(v) => v as f64,
            Boundary::Clamp => 0.0,
        };
        let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
        let (fx, fy, fz) = (x - x0, y - y0, z - z0);
        let lookup = |ci: f64, cj: f64, ck: f64| -> f64 {
            if ci < 0.0 || cj < 0.0 || ck < 0.0 {
                return fill;
            }
            let (i, j, k) = (ci as usize, cj as usize, ck as usize);
            if i >= self.dims[0] || j >= self.dims[1] || k >= self.dims[2] {
                // Only reachable with Fill; Clamp keeps coordinates in range,
                // and its upper neighbour always carries zero weight there.
                match boundary {
                    Boundary::Fill(_) => fill,
                    Boundary::Clamp => self.at(
                        i.min(self.dims[0] - 1),
                        j.min(self.dims[1] - 1),
                        k.min(self.dims[2] - 1),
                    ) as f64,
                }
            } else {
                self.at(i, j, k) as f64
            }
        };

        let mut acc = 0.0f64;
        for (dk, wz) in [(0.0, 1.0 - fz), (1.0, fz)] {
            if wz == 0.0 {
                continue;
            }
            for (dj, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                if wy == 0.0 {
                    continue;
                }
                for (di, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * lookup(x0 + di, y0 + dj, z0 + dk);
                }
            }
        }
        acc as f32
    }

    /// Same geometry, new data and unit.
    pub(crate) fn with_data(&self, data: Vec<f32>, unit: Unit) -> Result<Volume> {
        Volume::new(self.dims, self.spacing, self.origin, data, unit)
    }
}
