//! HU windowing, uniform resizing and axial rotation augmentation.
//!
//! Pipeline order is normalize → resize → augment. After normalization the
//! air end of every window maps to 0, which is also the rotation fill.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::{Boundary, Unit, Volume};

/// Default uniform size `(x, y, z)` volumes are resized to.
pub const DEFAULT_TARGET_DIMS: [usize; 3] = [128, 128, 64];

/// A HU clamp-and-rescale range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuWindow {
    lo: f64,
    hi: f64,
}

impl HuWindow {
    /// The ten windows studied: upper limits +80, +130, +270, +400 and +800
    /// combined with an air (-1000) or lung (-700) lower limit.
    pub const CATALOG: [HuWindow; 10] = [
        HuWindow {
            lo: -1000.0,
            hi: 80.0,
        },
        HuWindow {
            lo: -1000.0,
            hi: 130.0,
        },
        HuWindow {
            lo: -1000.0,
            hi: 270.0,
        },
        HuWindow {
            lo: -1000.0,
            hi: 400.0,
        },
        HuWindow {
            lo: -1000.0,
            hi: 800.0,
        },
        HuWindow {
            lo: -700.0,
            hi: 80.0,
        },
        HuWindow {
            lo: -700.0,
            hi: 130.0,
        },
        HuWindow {
            lo: -700.0,
            hi: 270.0,
        },
        HuWindow {
            lo: -700.0,
            hi: 400.0,
        },
        HuWindow {
            lo: -700.0,
            hi: 800.0,
        },
    ];

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::Argument(format!(
                "HU window needs finite lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(HuWindow { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_canonical(&self) -> bool {
        Self::CATALOG.contains(self)
    }

    /// Clamp-and-rescale of a single HU value.
    #[inline]
    pub fn apply(&self, hu: f64) -> f32 {
        ((hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)) as f32
    }
}

impl Default for HuWindow {
    fn default() -> Self {
        Self::CATALOG[1]
    }
}

/// Formats as `-1000 to +130`.
impl fmt::Display for HuWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+} to {:+}", self.lo, self.hi)
    }
}

/// Accepts `lo,hi` or the display form `lo to hi`.
impl FromStr for HuWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = if s.contains(',') {
            s.split(',').collect()
        } else {
            s.split(" to ").collect()
        };
        match parts.as_slice() {
            [lo, hi] => {
                let parse = |p: &str| {
                    p.trim()
                        .trim_start_matches('+')
                        .parse::<f64>()
                        .map_err(|_| Error::Argument(format!("bad HU value {p:?} in window {s:?}")))
                };
                HuWindow::new(parse(lo)?, parse(hi)?)
            }
            _ => Err(Error::Argument(format!("cannot parse HU window {s:?}"))),
        }
    }
}

/// Rotation angles, in degrees, applied by [`augment_six`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    angles_degrees: Vec<f64>,
}

impl AugmentationPlan {
    pub const ANGLES: [f64; 6] = [-20.0, -10.0, -5.0, 5.0, 10.0, 20.0];

    pub fn angles(&self) -> &[f64] {
        &self.angles_degrees
    }
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            angles_degrees: Self::ANGLES.to_vec(),
        }
    }
}

/// Clamps to the window and rescales to `[0, 1]`.
pub fn window_normalize(vol: &Volume, window: HuWindow) -> Result<Volume> {
    if vol.unit() != Unit::HounsfieldUnits {
        return Err(Error::State(
            "window_normalize expects a HU volume, got an already normalized one".into(),
        ));
    }
    let data = vol.data().iter().map(|&v| window.apply(v as f64)).collect();
    vol.with_data(data, Unit::Normalized)
}

/// Resizes with align-centers trilinear sampling and edge clamping.
pub fn resize_trilinear(vol: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {target:?}"
        )));
    }
    let src = vol.dims();
    if src == target {
        return Ok(vol.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|a| src[a] as f64 / target[a] as f64);
    let coord = |idx: usize, a: usize| (idx as f64 + 0.5) * scale[a] - 0.5;
    let xs: Vec<f64> = (0..target[0]).map(|i| coord(i, 0)).collect();
    let ys: Vec<f64> = (0..target[1]).map(|j| coord(j, 1)).collect();
    let zs: Vec<f64> = (0..target[2]).map(|k| coord(k, 2)).collect();
    let mut data = Vec::with_capacity(target.iter().product());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                data.push(vol.sample_unchecked(x, y, z, Boundary::Clamp));
            }
        }
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| vol.spacing()[a] * scale[a]);
    let origin: [f64; 3] =
        std::array::from_fn(|a| vol.origin()[a] + (0.5 * scale[a] - 0.5) * vol.spacing()[a]);
    Volume::new(target, spacing, origin, data, vol.unit())
}

/// Cosine and sine of an angle in degrees, exact at multiples of 90.
fn cos_sin_degrees(angle: f64) -> (f64, f64) {
    let quarter = angle / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = angle.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates each axial slice counter-clockwise (x towards y) about the slice
/// center by `angle_degrees`, inverse-mapping with trilinear sampling and a
/// fill of 0.
pub fn rotate_axial(vol: &Volume, angle_degrees: f64) -> Result<Volume> {
    if !angle_degrees.is_finite() {
        return Err(Error::Argument(format!(
            "rotation angle must be finite, got {angle_degrees}"
        )));
    }
    if vol.unit() != Unit::Normalized {
        return Err(Error::State(
            "rotation augmentation expects a normalized volume".into(),
        ));
    }
    let [nx, ny, nz] = vol.dims();
    let (c, s) = cos_sin_degrees(angle_degrees);
    let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
    // Source position only depends on (i, j); compute it once per slice plane.
    let mut plane = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (dx, dy) = (i as f64 - cx, j as f64 - cy);
            plane.push((cx + c * dx + s * dy, cy - s * dx + c * dy));
        }
    }
    let mut data = Vec::with_capacity(vol.len());
    for k in 0..nz {
        for &(x, y) in &plane {
            data.push(vol.sample_unchecked(x, y, k as f64, Boundary::Fill(0.0)));
        }
    }
    vol.with_data(data, Unit::Normalized)
}

/// One rotated copy per plan angle, in plan order.
pub fn augment_six(vol: &Volume, plan: &AugmentationPlan) -> Result<Vec<Volume>> {
    plan.angles()
        .iter()
        .map(|&angle| rotate_axial(vol, angle))
        .collect()
}

/// Normalize then resize: the per-case preprocessing applied before training.
pub fn preprocess_volume(vol: &Volume, window: HuWindow, target: [usize; 3]) -> Result<Volume> {
    resize_trilinear(&window_normalize(vol, window)?, target)
}
