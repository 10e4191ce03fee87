//! Deterministic synthetic chest phantoms with and without clot-like lesions.
//!
//! A phantom is an air background holding a soft-tissue body ellipsoid, two
//! lung ellipsoids with per-voxel lung density, and a branching vessel tree
//! inside each lung. Positive phantoms carry spherical lesions at coagulated
//! blood density centred on vessel segments. Geometry is defined in voxel
//! units so vessels and lesions stay round for anisotropic grids.
//!
//! Every random draw comes from one xoshiro256** stream seeded with the
//! phantom seed (see [`crate::rng`]); the same spec always yields the same
//! bytes.

use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifest::{Case, DatasetManifest, Group, Label};
use crate::nifti::write_nifti_file;
use crate::rng::{self, derive_seed};
use crate::volume::{Unit, Volume};

pub const AIR_HU: i32 = -1000;
pub const SOFT_TISSUE_HU: i32 = 40;
/// Lung parenchyma, open interval (-700, -600).
pub const LUNG_HU: (i32, i32) = (-699, -601);
/// Non-coagulated blood, +13 to +50.
pub const BLOOD_HU: (i32, i32) = (13, 50);
/// Coagulated blood, +50 to +75.
pub const DEFAULT_LESION_HU: (f64, f64) = (50.0, 75.0);
pub const MIN_DIM: usize = 32;
pub const DEFAULT_LESIONS: usize = 1;
/// Combined lesion volume as a fraction of the analytic lung volume.
pub const LESION_VOLUME_FRACTION: f64 = 0.008;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub label: Label,
    pub n_lesions: usize,
    pub lesion_hu_range: (f64, f64),
    /// Standard deviation of additive Gaussian HU noise; off when `None`.
    pub noise_sigma: Option<f64>,
    /// Lesion radius in voxels; derived from the grid and count when `None`.
    pub lesion_radius: Option<f64>,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64, label: Label) -> Self {
        PhantomSpec {
            dims,
            seed,
            label,
            n_lesions: match label {
                Label::Positive => DEFAULT_LESIONS,
                Label::Negative => 0,
            },
            lesion_hu_range: DEFAULT_LESION_HU,
            noise_sigma: None,
            lesion_radius: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_DIM) {
            return Err(Error::Argument(format!(
                "phantom dims must be at least {MIN_DIM} per axis, got {:?}",
                self.dims
            )));
        }
        match self.label {
            Label::Negative if self.n_lesions != 0 => Err(Error::Argument(
                "negative phantoms cannot carry lesions".into(),
            )),
            Label::Positive if !(1..=4).contains(&self.n_lesions) => Err(Error::Argument(format!(
                "positive phantoms carry 1 to 4 lesions, got {}",
                self.n_lesions
            ))),
            _ => Ok(()),
        }?;
        let (lo, hi) = self.lesion_hu_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi && hi.floor() > lo) {
            return Err(Error::Argument(format!(
                "lesion HU range must contain an integer above its lower bound, got ({lo}, {hi})"
            )));
        }
        if let Some(r) = self.lesion_radius {
            if !(r.is_finite() && r >= 1.0) {
                return Err(Error::Argument(format!(
                    "lesion radius must be >= 1 voxel, got {r}"
                )));
            }
        }
        if let Some(s) = self.noise_sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Argument(format!(
                    "noise sigma must be >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// A generated phantom with its construction masks.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub label: Label,
    /// Voxels inside either lung (x-fastest, same layout as the volume).
    pub lung_mask: Vec<bool>,
    /// Voxel-unit centres of the placed lesions.
    pub lesion_centers: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn shrunk(&self, by: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: self.radii.map(|r| (r - by).max(0.0)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

impl Segment {
    fn point(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|i| self.a[i] + t * (self.b[i] - self.a[i]))
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|i| self.b[i] - self.a[i]);
        let len2: f64 = d.iter().map(|v| v * v).sum();
        let t = if len2 == 0.0 {
            0.0
        } else {
            ((0..3).map(|i| (p[i] - self.a[i]) * d[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
        };
        dist(p, self.point(t))
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn unit_vector(rng: &mut rng::Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = dist(v, [0.0; 3]);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

/// Ellipsoid in voxel units from normalized centre/radii.
fn ellipsoid(dims: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> Ellipsoid {
    Ellipsoid {
        center: std::array::from_fn(|a| center[a] * dims[a] as f64 - 0.5),
        radii: std::array::from_fn(|a| radii[a] * dims[a] as f64),
    }
}

fn vessel_tree(lung: &Ellipsoid, base_radius: f64, rng: &mut rng::Rng) -> Vec<Segment> {
    const DEPTH: usize = 4;
    let min_r = lung.radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut segments = Vec::new();
    let mut frontier = vec![(lung.center, unit_vector(rng), base_radius, 0.55 * min_r)];
    for _ in 0..DEPTH {
        let mut next = Vec::new();
        for (start, dir, radius, length) in frontier {
            for _ in 0..2 {
                let jitter = unit_vector(rng);
                let mut d: [f64; 3] = std::array::from_fn(|i| dir[i] + 0.9 * jitter[i]);
                let n = dist(d, [0.0; 3]).max(1e-9);
                d = d.map(|c| c / n);
                // Shorten until the end point stays inside the lung.
                let mut len = length;
                let mut end: [f64; 3] = std::array::from_fn(|i| start[i] + len * d[i]);
                while !lung.shrunk(radius + 1.0).contains(end) && len > 0.5 {
                    len *= 0.7;
                    end = std::array::from_fn(|i| start[i] + len * d[i]);
                }
                segments.push(Segment {
                    a: start,
                    b: end,
                    radius,
                });
                next.push((end, d, (radius * 0.8).max(0.8), length * 0.75));
            }
        }
        frontier = next;
    }
    segments
}

/// Builds one phantom together with its lung mask and lesion centres.
pub fn generate_phantom_detailed(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let [nx, ny, nz] = dims;
    let mut rng = rng::rng(spec.seed);
    let mut jitter = |amount: f64| rng.random_range(-amount..amount);

    let body = ellipsoid(
        dims,
        [0.5, 0.5, 0.5],
        [
            0.46 + jitter(0.02),
            0.40 + jitter(0.02),
            0.48 + jitter(0.015),
        ],
    );
    let lung_radii = [
        0.19 + jitter(0.01),
        0.33 + jitter(0.02),
        0.43 + jitter(0.015),
    ];
    let offset = 0.22 + jitter(0.01);
    let lungs = [
        ellipsoid(dims, [0.5 - offset, 0.5 + jitter(0.02), 0.5], lung_radii),
        ellipsoid(dims, [0.5 + offset, 0.5 + jitter(0.02), 0.5], lung_radii),
    ];
    let min_inplane = nx.min(ny) as f64;
    let vessel_radius = (0.02 * min_inplane).max(1.0);
    let trees: Vec<(Vec<Segment>, i32)> = lungs
        .iter()
        .map(|lung| {
            let segs = vessel_tree(lung, vessel_radius, &mut rng);
            let hu = rng.random_range(BLOOD_HU.0..=BLOOD_HU.1);
            (segs, hu)
        })
        .collect();

    // Equal spheres sharing a fixed fraction of the lung volume.
    let lung_volume: f64 = lungs
        .iter()
        .map(|l| l.radii.iter().product::<f64>())
        .sum::<f64>()
        * 4.0
        / 3.0
        * std::f64::consts::PI;
    let lesion_radius = spec.lesion_radius.unwrap_or_else(|| {
        (3.0 * LESION_VOLUME_FRACTION * lung_volume
            / (4.0 * std::f64::consts::PI * spec.n_lesions.max(1) as f64))
            .cbrt()
    });
    let mut lesion_centers: Vec<[f64; 3]> = Vec::new();
    let all_segments: Vec<(usize, Segment)> = trees
        .iter()
        .enumerate()
        .flat_map(|(l, (segs, _))| segs.iter().map(move |s| (l, *s)))
        .collect();
    let mut attempts = 0;
    while lesion_centers.len() < spec.n_lesions {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Argument(format!(
                "could not place {} lesions in a {dims:?} phantom",
                spec.n_lesions
            )));
        }
        let (lung_idx, seg) = all_segments[rng.random_range(0..all_segments.len())];
        let c = seg.point(rng.random_range(0.0..1.0));
        let fits = lungs[lung_idx].shrunk(lesion_radius + 0.5).contains(c);
        let apart = lesion_centers
            .iter()
            .all(|&o| dist(o, c) > 2.0 * lesion_radius + 1.0);
        if fits && apart {
            lesion_centers.push(c);
        }
    }

    let (lesion_lo, lesion_hi) = spec.lesion_hu_range;
    // Integers strictly above the lower bound, up to the upper bound.
    let lesion_min = lesion_lo.floor() as i32 + 1;
    let lesion_max = lesion_hi.floor() as i32;
    let noise = spec
        .noise_sigma
        .filter(|&s| s > 0.0)
        .map(|s| Normal::new(0.0, s).expect("validated sigma"));

    let mut data = Vec::with_capacity(nx * ny * nz);
    let mut lung_mask = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = [i as f64, j as f64, k as f64];
                let lung = lungs.iter().position(|l| l.contains(p));
                let mut hu = if let Some(l) = lung {
                    let (segs, vessel_hu) = &trees[l];
                    if segs.iter().any(|s| s.distance(p) <= s.radius) {
                        *vessel_hu
                    } else {
                        rng.random_range(LUNG_HU.0..=LUNG_HU.1)
                    }
                } else if body.contains(p) {
                    SOFT_TISSUE_HU
                } else {
                    AIR_HU
                };
                if lung.is_some() && lesion_centers.iter().any(|&c| dist(c, p) <= lesion_radius) {
                    hu = rng.random_range(lesion_min..=lesion_max);
                }
                let mut value = hu as f64;
                if let Some(n) = &noise {
                    value = (value + n.sample(&mut rng)).round().clamp(-1024.0, 3071.0);
                }
                data.push(value as f32);
                lung_mask.push(lung.is_some());
            }
        }
    }

    let volume = Volume::new(dims, [1.0; 3], [0.0; 3], data, Unit::HounsfieldUnits)?;
    Ok(Phantom {
        volume,
        label: spec.label,
        lung_mask,
        lesion_centers,
    })
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, Label)> {
    let p = generate_phantom_detailed(spec)?;
    Ok((p.volume, p.label))
}

/// Layout of a generated phantom dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    pub dims: [usize; 3],
    /// Cases held out as the fixed test group, split proportionally by class.
    pub n_test: usize,
    pub n_lesions: usize,
}

impl DatasetSpec {
    pub fn new(n_pos: usize, n_neg: usize, seed: u64) -> Self {
        DatasetSpec {
            n_pos,
            n_neg,
            seed,
            dims: [64, 64, 32],
            n_test: 0,
            n_lesions: DEFAULT_LESIONS,
        }
    }

    /// Cases in file order: positives first. Case `i` uses seed
    /// `derive_seed(seed, i)`.
    pub fn cases(&self) -> Result<Vec<(PathBuf, PhantomSpec, Group)>> {
        if self.n_pos == 0 || self.n_neg == 0 {
            return Err(Error::Argument(
                "phantom datasets need at least one case per class".into(),
            ));
        }
        let total = self.n_pos + self.n_neg;
        if self.n_test >= total {
            return Err(Error::Argument(format!(
                "test group of {} leaves no training cases out of {total}",
                self.n_test
            )));
        }
        let test_pos = ((self.n_test * self.n_pos) as f64 / total as f64).round() as usize;
        let test_neg = self.n_test - test_pos;
        if test_pos >= self.n_pos || test_neg >= self.n_neg {
            return Err(Error::Argument(format!(
                "test group of {} would exhaust a class",
                self.n_test
            )));
        }
        let width = total.to_string().len().max(3);
        Ok((0..total)
            .map(|i| {
                let (label, in_class, class_n, class_test) = if i < self.n_pos {
                    (Label::Positive, i, self.n_pos, test_pos)
                } else {
                    (Label::Negative, i - self.n_pos, self.n_neg, test_neg)
                };
                let group = if in_class >= class_n - class_test {
                    Group::Test
                } else {
                    Group::TrainVal
                };
                let mut spec = PhantomSpec::new(self.dims, derive_seed(self.seed, i as u64), label);
                if label == Label::Positive {
                    spec.n_lesions = self.n_lesions;
                }
                (PathBuf::from(format!("case_{i:0width$}.nii")), spec, group)
            })
            .collect())
    }
}

/// Writes every phantom as HU NIfTI into `out_dir` plus `manifest.tsv`, and
/// returns the manifest. Output is independent of `workers`.
pub fn generate_dataset(
    spec: &DatasetSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    let cases = spec.cases()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        cases.par_iter().try_for_each(|(path, pspec, _)| {
            let (vol, _) = generate_phantom(pspec)?;
            write_nifti_file(&vol, &out_dir.join(path)).map(|_| ())
        })
    })?;
    let manifest = DatasetManifest::new(
        out_dir,
        cases
            .into_iter()
            .map(|(path, pspec, group)| Case {
                path,
                label: pspec.label,
                seed: Some(pspec.seed),
                group,
            })
            .collect(),
    )?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion_range(v: f32, spec: &PhantomSpec) -> bool {
        (v as f64) > spec.lesion_hu_range.0 && (v as f64) <= spec.lesion_hu_range.1
    }

    /// 6-connected component count of `mask` by iterative flood fill.
    fn components(mask: &[bool], dims: [usize; 3]) -> usize {
        let [nx, ny, nz] = dims;
        let mut seen = vec![false; mask.len()];
        let mut count = 0;
        for start in 0..mask.len() {
            if !mask[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(idx) = stack.pop() {
                let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                let mut visit = |ii: usize, jj: usize, kk: usize| {
                    let n = ii + nx * (jj + ny * kk);
                    if mask[n] && !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                };
                if i > 0 {
                    visit(i - 1, j, k);
                }
                if i + 1 < nx {
                    visit(i + 1, j, k);
                }
                if j > 0 {
                    visit(i, j - 1, k);
                }
                if j + 1 < ny {
                    visit(i, j + 1, k);
                }
                if k > 0 {
                    visit(i, j, k - 1);
                }
                if k + 1 < nz {
                    visit(i, j, k + 1);
                }
            }
        }
        count
    }

    fn lesion_mask(p: &Phantom, spec: &PhantomSpec) -> Vec<bool> {
        p.volume
            .data()
            .iter()
            .zip(&p.lung_mask)
            .map(|(&v, &lung)| lung && lesion_range(v, spec))
            .collect()
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec::new([40, 36, 32], 99, Label::Positive);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        let other = generate_phantom(&PhantomSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(a.0.data(), other.0.data());
    }

    #[test]
    fn negative_phantoms_have_no_lesion_voxels() {
        for seed in 0..5 {
            let spec = PhantomSpec::new([48, 48, 32], seed, Label::Negative);
            let p = generate_phantom_detailed(&spec).unwrap();
            assert!(lesion_mask(&p, &spec).iter().all(|&m| !m));
        }
    }

    #[test]
    fn positive_phantom_lesion_components() {
        for seed in 0..5 {
            let mut spec = PhantomSpec::new([64, 64, 32], seed, Label::Positive);
            spec.n_lesions = 2;
            let p = generate_phantom_detailed(&spec).unwrap();
            assert_eq!(
                components(&lesion_mask(&p, &spec), spec.dims),
                2,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn value_ranges_and_lesion_fraction() {
        for seed in 0..24 {
            let label = if seed % 2 == 0 {
                Label::Positive
            } else {
                Label::Negative
            };
            let mut spec = PhantomSpec::new([64, 64, 32], seed, label);
            if label == Label::Positive {
                spec.n_lesions = 1 + (seed as usize / 2) % 4;
            }
            let p = generate_phantom_detailed(&spec).unwrap();
            for &v in p.volume.data() {
                assert!(
                    (-1000.0..=100.0).contains(&v) || lesion_range(v, &spec),
                    "{v}"
                );
            }
            let lung = p.lung_mask.iter().filter(|&&m| m).count();
            let lesions = lesion_mask(&p, &spec).iter().filter(|&&m| m).count();
            let frac = lesions as f64 / lung as f64;
            match label {
                Label::Positive => assert!((1e-4..=1e-2).contains(&frac), "fraction {frac}"),
                Label::Negative => assert_eq!(lesions, 0),
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(generate_phantom(&PhantomSpec::new([16, 64, 64], 0, Label::Negative)).is_err());
        let mut s = PhantomSpec::new([32, 32, 32], 0, Label::Negative);
        s.n_lesions = 1;
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn noise_is_optional_and_seeded() {
        let mut spec = PhantomSpec::new([32, 32, 32], 3, Label::Negative);
        let clean = generate_phantom(&spec).unwrap().0;
        spec.noise_sigma = Some(10.0);
        let a = generate_phantom(&spec).unwrap().0;
        assert_ne!(clean.data(), a.data());
        assert_eq!(a.data(), generate_phantom(&spec).unwrap().0.data());
    }

    #[test]
    fn dataset_layout() {
        let spec = DatasetSpec {
            dims: [32, 32, 32],
            ..DatasetSpec::new(3, 5, 11)
        };
        let cases = spec.cases().unwrap();
        assert_eq!(cases.len(), 8);
        assert_eq!(
            cases
                .iter()
                .filter(|c| c.1.label == Label::Positive)
                .count(),
            3
        );
        assert_eq!(cases[2].1.seed, derive_seed(11, 2));

        let table1 = DatasetSpec {
            n_test: 20,
            ..DatasetSpec::new(80, 112, 1)
        };
        let cases = table1.cases().unwrap();
        assert_eq!(cases.len(), 192);
        let pos = cases
            .iter()
            .filter(|c| c.1.label == Label::Positive)
            .count();
        assert_eq!((pos, cases.len() - pos), (80, 112));
        assert_eq!(cases.iter().filter(|c| c.2 == Group::Test).count(), 20);
    }

    #[test]
    fn dataset_files_are_deterministic() {
        let spec = DatasetSpec {
            dims: [32, 32, 32],
            n_test: 2,
            ..DatasetSpec::new(3, 5, 11)
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&spec, a.path(), 1).unwrap();
        let mb = generate_dataset(&spec, b.path(), 3).unwrap();
        assert_eq!(ma.cases, mb.cases);
        assert_eq!(ma.cases.len(), 8);
        for c in &ma.cases {
            let fa = std::fs::read(a.path().join(&c.path)).unwrap();
            let fb = std::fs::read(b.path().join(&c.path)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.tsv")).unwrap(),
            std::fs::read(b.path().join("manifest.tsv")).unwrap()
        );
        let reread = DatasetManifest::read(&a.path().join("manifest.tsv")).unwrap();
        assert_eq!(reread.cases, ma.cases);
    }
}
