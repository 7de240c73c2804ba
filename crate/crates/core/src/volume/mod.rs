//! Grid geometry and the real, complex and boolean volumes that every stage
//! of the pipeline passes around.
//!
//! All volumes are stored x-fastest: voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

mod fft;
mod roi;
mod rotate;

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fft::{dft_3d, fft3_in_place, signed_frequency, FftDirection};
pub use roi::{central_slab_mask, roi_stats, RoiStats};
pub use rotate::{rotate_90, rotate_arbitrary, rotate_vector_90};

/// Smallest admissible extent along any axis.
pub const MIN_DIM: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        match i {
            0 => Some(Axis::X),
            1 => Some(Axis::Y),
            2 => Some(Axis::Z),
            _ => None,
        }
    }

    /// The two axes spanning the plane perpendicular to `self`, in
    /// right-handed cyclic order.
    pub fn plane(self) -> (Axis, Axis) {
        match self {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::Z, Axis::X),
            Axis::Z => (Axis::X, Axis::Y),
        }
    }

    pub fn unit(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("unknown axis '{other}'"))),
        }
    }
}

/// Voxel counts and voxel sizes (mm) of a regular 3D grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    #[serde(default = "unit_voxel")]
    pub voxel_size: [f64; 3],
}

fn unit_voxel() -> [f64; 3] {
    [1.0; 3]
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let grid = GridSpec { dims, voxel_size };
        grid.validate()?;
        Ok(grid)
    }

    /// Isotropic 1 mm grid.
    pub fn cubic(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dims.iter().find(|&&d| d < MIN_DIM) {
            return Err(Error::InvalidGrid(format!("every dimension must be >= {MIN_DIM}, got {d}")));
        }
        if self.voxel_size.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid(format!("voxel sizes must be positive and finite, got {:?}", self.voxel_size)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// Geometric center in voxel coordinates, `(n - 1) / 2` per axis.
    pub fn center(&self) -> [f64; 3] {
        self.dims.map(|n| (n as f64 - 1.0) / 2.0)
    }

    /// Exact match of dims and voxel sizes.
    pub fn compatible(&self, other: &GridSpec) -> bool {
        self.dims == other.dims && self.voxel_size == other.voxel_size
    }

    pub fn ensure_compatible(&self, other: &GridSpec) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch { left: *self, right: *other })
        }
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [nx, ny, nz] = self.dims;
        let [hx, hy, hz] = self.voxel_size;
        write!(f, "{nx}x{ny}x{nz} @ {hx}x{hy}x{hz} mm")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Ppm,
    Hz,
    Dimensionless,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Ppm => "ppm",
            Unit::Hz => "hz",
            Unit::Dimensionless => "dimensionless",
        })
    }
}

/// Real-valued volume. Values are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    grid: GridSpec,
    unit: Unit,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(grid: GridSpec, unit: Unit, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), actual: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(ScalarVolume { grid, unit, data })
    }

    pub fn zeros(grid: GridSpec, unit: Unit) -> Self {
        Self::filled(grid, unit, 0.0)
    }

    pub fn filled(grid: GridSpec, unit: Unit, value: f64) -> Self {
        assert!(value.is_finite());
        ScalarVolume { grid, unit, data: vec![value; grid.len()] }
    }

    /// Evaluate `f(x, y, z)` at every voxel.
    pub fn from_fn(grid: GridSpec, unit: Unit, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Self::new(grid, unit, data)
    }

    /// Internal constructor for buffers produced by our own arithmetic.
    pub(crate) fn from_parts(grid: GridSpec, unit: Unit, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        ScalarVolume { grid, unit, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn with_unit(mut self, unit: Unit) -> Self {
        self.unit = unit;
        self
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.unit, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: f64) -> Self {
        Self::from_parts(self.grid, self.unit, self.data.iter().map(|&v| a * v).collect())
    }

    fn zip_with(&self, other: &ScalarVolume, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.grid.ensure_compatible(&other.grid)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.grid, self.unit, data)
    }

    pub fn add(&self, other: &ScalarVolume) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarVolume) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Largest absolute voxelwise difference between two volumes on the same grid.
    pub fn max_abs_diff(&self, other: &ScalarVolume) -> Result<f64> {
        self.grid.ensure_compatible(&other.grid)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn to_complex(&self) -> ComplexVolume {
        ComplexVolume { grid: self.grid, data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect() }
    }
}

/// Complex-valued volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    grid: GridSpec,
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn new(grid: GridSpec, data: Vec<Complex64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), actual: data.len() });
        }
        if let Some(index) = data.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::NonFinite { index });
        }
        Ok(ComplexVolume { grid, data })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        ComplexVolume { grid, data: vec![Complex64::new(0.0, 0.0); grid.len()] }
    }

    pub(crate) fn from_parts(grid: GridSpec, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        ComplexVolume { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// Real part as a scalar volume, plus the largest |imaginary| component.
    pub fn real_part(&self, unit: Unit) -> (ScalarVolume, f64) {
        let max_imag = self.data.iter().fold(0.0_f64, |m, c| m.max(c.im.abs()));
        let re = self.data.iter().map(|c| c.re).collect();
        (ScalarVolume::from_parts(self.grid, unit, re), max_imag)
    }

    pub fn magnitude(&self) -> ScalarVolume {
        let data = self.data.iter().map(|c| c.norm()).collect();
        ScalarVolume::from_parts(self.grid, Unit::Dimensionless, data)
    }

    pub fn phase(&self) -> ScalarVolume {
        let data = self.data.iter().map(|c| c.arg()).collect();
        ScalarVolume::from_parts(self.grid, Unit::Dimensionless, data)
    }
}

/// Boolean voxel selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    grid: GridSpec,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(grid: GridSpec, data: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::DataLength { expected: grid.len(), actual: data.len() });
        }
        Ok(Mask { grid, data })
    }

    pub fn empty(grid: GridSpec) -> Self {
        Mask { grid, data: vec![false; grid.len()] }
    }

    pub fn full(grid: GridSpec) -> Self {
        Mask { grid, data: vec![true; grid.len()] }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Mask { grid, data }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_compatible(&other.grid)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(Mask { grid: self.grid, data })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.grid.ensure_compatible(&other.grid)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(Mask { grid: self.grid, data })
    }

    pub fn not(&self) -> Mask {
        Mask { grid: self.grid, data: self.data.iter().map(|b| !b).collect() }
    }

    /// Binary erosion with the 6-connected neighbourhood, applied
    /// `iterations` times. Neighbours wrap periodically, matching the
    /// Fourier-domain forward model.
    pub fn erode(&self, iterations: usize) -> Mask {
        let [nx, ny, nz] = self.grid.dims;
        let mut cur = self.data.clone();
        for _ in 0..iterations {
            let prev = cur.clone();
            for (i, out) in cur.iter_mut().enumerate() {
                if !prev[i] {
                    continue;
                }
                let [x, y, z] = self.grid.coords(i);
                let neighbours = [
                    self.grid.index((x + 1) % nx, y, z),
                    self.grid.index((x + nx - 1) % nx, y, z),
                    self.grid.index(x, (y + 1) % ny, z),
                    self.grid.index(x, (y + ny - 1) % ny, z),
                    self.grid.index(x, y, (z + 1) % nz),
                    self.grid.index(x, y, (z + nz - 1) % nz),
                ];
                *out = neighbours.iter().all(|&j| prev[j]);
            }
        }
        Mask { grid: self.grid, data: cur }
    }
}

/// Direction of the main field in the object frame, stored as a unit vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Orientation([f64; 3]);

impl Orientation {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn new(v: [f64; 3]) -> Result<Self> {
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::InvalidArgument(format!("orientation vector {v:?} cannot be normalized")));
        }
        Ok(Orientation(v.map(|c| c / norm)))
    }

    pub fn along(axis: Axis) -> Self {
        Orientation(axis.unit())
    }

    /// Polar angle `theta` from z and azimuth `phi`, with the component
    /// assignment `x = sin(theta) sin(phi)`, `y = sin(theta) cos(phi)`,
    /// `z = cos(theta)` used by the k-space kernel.
    pub fn from_angles(theta_rad: f64, phi_rad: f64) -> Self {
        let (st, ct) = theta_rad.sin_cos();
        let (sp, cp) = phi_rad.sin_cos();
        Orientation([st * sp, st * cp, ct])
    }

    /// `(theta, phi)` in radians, inverse of [`Orientation::from_angles`].
    pub fn angles(&self) -> (f64, f64) {
        let [x, y, z] = self.0;
        (z.clamp(-1.0, 1.0).acos(), x.atan2(y))
    }

    pub fn vector(&self) -> [f64; 3] {
        self.0
    }

    /// Angle in degrees between the lines spanned by two orientations,
    /// in `[0, 90]`. Field maps do not depend on the sign of the direction.
    pub fn line_angle_deg(&self, other: &Orientation) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot.abs().min(1.0).acos().to_degrees()
    }

    /// The coordinate axis this orientation lies along, within `tol_deg`.
    pub fn as_axis(&self, tol_deg: f64) -> Option<Axis> {
        Axis::ALL.into_iter().find(|&a| self.line_angle_deg(&Orientation::along(a)) <= tol_deg)
    }
}

impl TryFrom<[f64; 3]> for Orientation {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Orientation::new(v)
    }
}

impl From<Orientation> for [f64; 3] {
    fn from(o: Orientation) -> Self {
        o.0
    }
}

impl FromStr for Orientation {
    type Err = Error;

    /// Accepts `x`, `y`, `z` or `theta,phi` in degrees.
    fn from_str(s: &str) -> Result<Self> {
        if let Ok(axis) = s.parse::<Axis>() {
            return Ok(Orientation::along(axis));
        }
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() == 2 {
            let parse = |p: &str| p.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad angle '{p}'")));
            let theta = parse(parts[0])?;
            let phi = parse(parts[1])?;
            return Ok(Orientation::from_angles(theta.to_radians(), phi.to_radians()));
        }
        Err(Error::InvalidArgument(format!("orientation must be x|y|z or theta,phi in degrees, got '{s}'")))
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_axis(1e-9) {
            Some(a) => write!(f, "{a}"),
            None => {
                let (t, p) = self.angles();
                write!(f, "{:.6},{:.6}", t.to_degrees(), p.to_degrees())
            }
        }
    }
}
