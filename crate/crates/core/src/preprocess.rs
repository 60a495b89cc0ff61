//! CT-style volume preprocessing: Hounsfield windowing, isotropic trilinear
//! resampling, patch cropping and right-angle/flip/shift augmentation.
//!
//! Voxel `i` along an axis with spacing `s` sits at physical position
//! `(i + 0.5)·s`. Voxels are stored x-fastest.

use rand::Rng;

use crate::error::{Error, Result};

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 400.0;
/// Normalized value of air, used to pad crops that leave the volume.
pub const AIR: f64 = -1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::config(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config(format!("volume spacing must be positive, got {spacing:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::shape("volume", &dims, &[voxels.len()]));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    /// Samples `f(x, y, z)` (physical mm) at every voxel centre.
    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(f64, f64, f64) -> f64) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(
                        (x as f64 + 0.5) * spacing[0],
                        (y as f64 + 0.5) * spacing[1],
                        (z as f64 + 0.5) * spacing[2],
                    ));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to the edge.
    pub fn sample(&self, u: [f64; 3]) -> f64 {
        let mut i0 = [0usize; 3];
        let mut i1 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64;
            let c = u[a].clamp(0.0, hi);
            let f = c.floor();
            i0[a] = f as usize;
            i1[a] = (i0[a] + 1).min(self.dims[a] - 1);
            t[a] = c - f;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let pick = |a: usize| corner >> a & 1 == 1;
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                if pick(a) {
                    w *= t[a];
                    idx[a] = i1[a];
                } else {
                    w *= 1.0 - t[a];
                    idx[a] = i0[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }
}

/// Clips to `[−1024, 400]` HU and maps linearly onto `[−1, 1]`.
pub fn hu_to_unit(hu: f64) -> f64 {
    (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / ((HU_MAX - HU_MIN) / 2.0) - 1.0
}

pub fn hu_normalize(v: &Volume) -> Volume {
    Volume {
        voxels: v.voxels.iter().map(|&h| hu_to_unit(h)).collect(),
        ..v.clone()
    }
}

/// Resamples onto `target` spacing (mm). Output extent per axis is
/// `round(n·s / target)`, at least 1.
pub fn resample_trilinear(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::config(format!("target spacing must be positive, got {target:?}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((v.dims[a] as f64 * v.spacing[a] / target[a]).round() as usize).max(1);
    }
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let mut u = [0.0; 3];
                for (a, i) in [x, y, z].into_iter().enumerate() {
                    u[a] = (i as f64 + 0.5) * target[a] / v.spacing[a] - 0.5;
                }
                voxels.push(v.sample(u));
            }
        }
    }
    Volume::new(dims, target, voxels)
}

pub fn resample_isotropic(v: &Volume) -> Result<Volume> {
    resample_trilinear(v, [1.0; 3])
}

/// Cube of `edge³` voxels around the voxel containing `center_mm`. Regions
/// outside the volume are filled with [`AIR`].
pub fn crop_patch(v: &Volume, center_mm: [f64; 3], edge: usize) -> Result<Volume> {
    if edge == 0 {
        return Err(Error::config("patch edge must be positive"));
    }
    let mut start = [0isize; 3];
    for a in 0..3 {
        let c = (center_mm[a] / v.spacing[a]).floor() as isize;
        start[a] = c - (edge / 2) as isize;
    }
    let mut voxels = Vec::with_capacity(edge * edge * edge);
    for z in 0..edge as isize {
        for y in 0..edge as isize {
            for x in 0..edge as isize {
                let p = [start[0] + x, start[1] + y, start[2] + z];
                let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < v.dims[a]);
                voxels.push(if inside {
                    v.get(p[0] as usize, p[1] as usize, p[2] as usize)
                } else {
                    AIR
                });
            }
        }
    }
    Volume::new([edge; 3], v.spacing, voxels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentSpec {
    pub axis: Axis,
    /// Multiples of 90°, in `0..4`.
    pub quarter_turns: u8,
    /// Left-right (x axis) mirror.
    pub flip: bool,
    /// Sub-voxel translation per axis, each in `[−1, 1]`.
    pub shift: [f64; 3],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            axis: Axis::Z,
            quarter_turns: 0,
            flip: false,
            shift: [0.0; 3],
        }
    }
}

impl AugmentSpec {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        AugmentSpec {
            axis: [Axis::X, Axis::Y, Axis::Z][rng.random_range(0..3)],
            quarter_turns: rng.random_range(0..4),
            flip: rng.random_bool(0.5),
            shift: [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quarter_turns > 3 || self.shift.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::config(format!("augmentation out of range: {self:?}")));
        }
        Ok(())
    }
}

/// One 90° turn of a cube about `axis`.
fn rotate_quarter(v: &Volume, axis: Axis) -> Volume {
    let n = v.dims[0];
    let last = n - 1;
    let mut out = vec![0.0; v.voxels.len()];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (sx, sy, sz) = match axis {
                    Axis::Z => (y, last - x, z),
                    Axis::Y => (last - z, y, x),
                    Axis::X => (x, z, last - y),
                };
                out[v.index(x, y, z)] = v.get(sx, sy, sz);
            }
        }
    }
    Volume {
        voxels: out,
        ..v.clone()
    }
}

fn flip_x(v: &Volume) -> Volume {
    let n = v.dims[0];
    let mut out = vec![0.0; v.voxels.len()];
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            for x in 0..n {
                out[v.index(x, y, z)] = v.get(n - 1 - x, y, z);
            }
        }
    }
    Volume {
        voxels: out,
        ..v.clone()
    }
}

fn shift(v: &Volume, by: [f64; 3]) -> Volume {
    if by == [0.0; 3] {
        return v.clone();
    }
    let [nx, ny, nz] = v.dims;
    let mut out = Vec::with_capacity(v.voxels.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out.push(v.sample([x as f64 + by[0], y as f64 + by[1], z as f64 + by[2]]));
            }
        }
    }
    Volume {
        voxels: out,
        ..v.clone()
    }
}

/// Rotation, then flip, then sub-voxel shift (trilinear, edge clamped).
pub fn augment(v: &Volume, spec: &AugmentSpec) -> Result<Volume> {
    if !v.is_cube() {
        return Err(Error::config(format!("augmentation needs a cubic patch, got {:?}", v.dims)));
    }
    spec.validate()?;
    let mut out = v.clone();
    for _ in 0..spec.quarter_turns {
        out = rotate_quarter(&out, spec.axis);
    }
    if spec.flip {
        out = flip_x(&out);
    }
    Ok(shift(&out, spec.shift))
}
