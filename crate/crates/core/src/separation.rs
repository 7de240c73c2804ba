//! Separation of the chemical-shift and susceptibility field components from
//! total-field maps acquired at several B0 orientations.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{dipole_kernel, real_from_spectrum, spectrum};
use crate::volume::{rotate_90, rotate_vector_90, Axis, GridSpec, Mask, Orientation, ScalarVolume, Unit};

/// Default pairwise orthogonality tolerance for the averaging path.
pub const ORTHOGONALITY_TOLERANCE_DEG: f64 = 0.5;
/// Orientations closer than this are treated as duplicates.
pub const MIN_ORIENTATION_SEPARATION_DEG: f64 = 0.1;
/// Default floor on the smaller singular value of the per-k design.
pub const SINGULAR_VALUE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct OrientedField {
    pub orientation: Orientation,
    pub field: ScalarVolume,
}

impl OrientedField {
    pub fn new(orientation: Orientation, field: ScalarVolume) -> Self {
        OrientedField { orientation, field }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrientationSet {
    entries: Vec<OrientedField>,
}

impl OrientationSet {
    pub fn new(entries: Vec<OrientedField>) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::InvalidArgument("orientation set is empty".into()))?;
        for e in &entries {
            first.field.grid().ensure_compatible(e.field.grid())?;
            if e.field.unit() != Unit::Ppm {
                return Err(Error::InvalidArgument(format!("field maps must be in ppm, got {}", e.field.unit())));
            }
        }
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                let angle = entries[i].orientation.line_angle_deg(&entries[j].orientation);
                if angle <= MIN_ORIENTATION_SEPARATION_DEG {
                    return Err(Error::InvalidArgument(format!("orientations {i} and {j} are only {angle:.3} degrees apart")));
                }
            }
        }
        Ok(OrientationSet { entries })
    }

    pub fn entries(&self) -> &[OrientedField] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<OrientedField> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grid(&self) -> &GridSpec {
        self.entries[0].field.grid()
    }

    pub fn orientations(&self) -> Vec<Orientation> {
        self.entries.iter().map(|e| e.orientation).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMethod {
    OrthogonalAverage,
    GeneralLsq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub regularized: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationResult {
    pub f_c: ScalarVolume,
    pub f_s: Vec<ScalarVolume>,
    pub method: SeparationMethod,
    pub conditioning: Option<ConditioningReport>,
    /// Zero-mean susceptibility estimate, general path only.
    pub chi: Option<ScalarVolume>,
    /// k-samples (DFT index order) whose susceptibility was set to zero.
    pub regularized: Option<Mask>,
}

/// Largest deviation from 90 degrees over all pairs, and the pair it occurs at.
pub fn worst_orthogonality(orientations: &[Orientation]) -> (f64, (usize, usize)) {
    let mut worst = (0.0, (0, 1));
    for i in 0..orientations.len() {
        for j in i + 1..orientations.len() {
            let dev = (90.0 - orientations[i].line_angle_deg(&orientations[j])).abs();
            if dev > worst.0 {
                worst = (dev, (i, j));
            }
        }
    }
    worst
}

/// Average of three orthogonal total-field maps gives the chemical shift;
/// each remainder is that orientation's susceptibility field.
pub fn separate_orthogonal(s: &OrientationSet, tol_deg: f64) -> Result<SeparationResult> {
    if s.len() != 3 {
        return Err(Error::InvalidArgument(format!("orthogonal averaging needs exactly 3 orientations, got {}", s.len())));
    }
    let (dev, pair) = worst_orthogonality(&s.orientations());
    if dev > tol_deg {
        return Err(Error::NotOrthogonal { worst_deviation_deg: dev, pair });
    }
    let grid = *s.grid();
    let maps: Vec<&[f64]> = s.entries().iter().map(|e| e.field.data()).collect();
    let f_c: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            // sorted summation keeps the result independent of input order
            let mut v = [maps[0][i], maps[1][i], maps[2][i]];
            v.sort_by(f64::total_cmp);
            (v[0] + v[1] + v[2]) / 3.0
        })
        .collect();
    let f_c = ScalarVolume::from_parts(grid, Unit::Ppm, f_c);
    let f_s = s.entries().iter().map(|e| e.field.sub(&f_c)).collect::<Result<_>>()?;
    Ok(SeparationResult {
        f_c,
        f_s,
        method: SeparationMethod::OrthogonalAverage,
        conditioning: None,
        chi: None,
        regularized: None,
    })
}

fn require_axis(o: &Orientation, what: &str) -> Result<Axis> {
    o.as_axis(ORTHOGONALITY_TOLERANCE_DEG)
        .ok_or_else(|| Error::Axis(format!("{what} orientation {o} is not along a coordinate axis")))
}

fn require_square_plane(grid: &GridSpec, axis: Axis) -> Result<()> {
    let (a, b) = axis.plane();
    let (a, b) = (a.index(), b.index());
    if grid.dims[a] != grid.dims[b] {
        return Err(Error::Dimension(format!("rotation about {axis} needs equal in-plane dims, got {:?}", grid.dims)));
    }
    if (grid.voxel_size[a] - grid.voxel_size[b]).abs() > 1e-12 * grid.voxel_size[a] {
        return Err(Error::Dimension(format!(
            "rotation about {axis} needs equal in-plane voxel sizes, got {:?}",
            grid.voxel_size
        )));
    }
    Ok(())
}

/// Synthesize the field for orientation `R b` from the map measured at `b`,
/// valid when the object is invariant under the quarter turn `R`.
fn rotated_entry(e: &OrientedField, axis: Axis) -> Result<OrientedField> {
    require_square_plane(e.field.grid(), axis)?;
    let field = rotate_90(&e.field, axis, 1)?;
    let orientation = Orientation::new(rotate_vector_90(e.orientation.vector(), axis, 1))?;
    let snapped = Orientation::along(require_axis(&orientation, "rotated")?);
    Ok(OrientedField::new(snapped, field))
}

/// Complete a triad for an object symmetric about `long_axis` from scans
/// parallel and perpendicular to it.
pub fn complete_cylinder(parallel: &OrientedField, perpendicular: &OrientedField, long_axis: Axis) -> Result<OrientationSet> {
    let pa = require_axis(&parallel.orientation, "parallel")?;
    let pe = require_axis(&perpendicular.orientation, "perpendicular")?;
    if pa != long_axis {
        return Err(Error::Axis(format!("parallel scan is along {pa}, long axis is {long_axis}")));
    }
    if pe == long_axis {
        return Err(Error::Axis(format!("perpendicular scan is along the long axis {long_axis}")));
    }
    parallel.field.grid().ensure_compatible(perpendicular.field.grid())?;
    let third = rotated_entry(perpendicular, long_axis)?;
    OrientationSet::new(vec![
        OrientedField::new(Orientation::along(pa), parallel.field.clone()),
        OrientedField::new(Orientation::along(pe), perpendicular.field.clone()),
        third,
    ])
}

/// Complete a triad for a spherically symmetric object from a single scan.
pub fn complete_sphere(single: &OrientedField) -> Result<OrientationSet> {
    let b = require_axis(&single.orientation, "scan")?;
    let (u, w) = b.plane();
    OrientationSet::new(vec![
        OrientedField::new(Orientation::along(b), single.field.clone()),
        rotated_entry(single, u)?,
        rotated_entry(single, w)?,
    ])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralParams {
    /// Floor applied to the eigenvalues of the per-k normal matrix.
    #[serde(default)]
    pub reg_epsilon: f64,
    /// Samples whose design has a smaller singular value below this keep
    /// only the chemical-shift unknown.
    #[serde(default = "default_floor")]
    pub singular_value_floor: f64,
}

fn default_floor() -> f64 {
    SINGULAR_VALUE_FLOOR
}

impl Default for GeneralParams {
    fn default() -> Self {
        GeneralParams { reg_epsilon: 0.0, singular_value_floor: SINGULAR_VALUE_FLOOR }
    }
}

/// Solve `A x = r` for a symmetric 2x2 `A = [[a, b], [b, c]]` with its
/// eigenvalues floored at `eps`.
fn solve_sym2(a: f64, b: f64, c: f64, r: [Complex64; 2], eps: f64) -> [Complex64; 2] {
    let mean = 0.5 * (a + c);
    let half = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + half, mean - half);
    if l2 >= eps {
        let det = a * c - b * b;
        return [(r[0] * c - r[1] * b) / det, (r[1] * a - r[0] * b) / det];
    }
    // eigenvector of l1
    let (vx, vy) = if b.abs() > 0.0 {
        let (x, y) = (l1 - c, b);
        let n = (x * x + y * y).sqrt();
        (x / n, y / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (m1, m2) = (l1.max(eps), l2.max(eps));
    let p1 = (r[0] * vx + r[1] * vy) / m1;
    let p2 = (r[0] * -vy + r[1] * vx) / m2;
    [p1 * vx - p2 * vy, p1 * vy + p2 * vx]
}

/// Per-k least squares of `F_i(k) = F_c(k) + D_i(k) X(k)` over all orientations.
pub fn separate_general(s: &OrientationSet, params: &GeneralParams) -> Result<SeparationResult> {
    if s.len() < 2 {
        return Err(Error::RankDeficient(format!("general separation needs at least 2 orientations, got {}", s.len())));
    }
    if !(params.reg_epsilon >= 0.0 && params.singular_value_floor >= 0.0) {
        return Err(Error::InvalidArgument(format!("regularization parameters must be >= 0: {params:?}")));
    }
    let grid = *s.grid();
    let n = s.len() as f64;
    let kernels: Vec<Vec<f64>> = s.entries().par_iter().map(|e| dipole_kernel(&grid, &e.orientation).values().to_vec()).collect();
    let spectra: Vec<Vec<Complex64>> = s.entries().par_iter().map(|e| spectrum(&e.field)).collect();
    let floor2 = params.singular_value_floor * params.singular_value_floor;
    let solved: Vec<(Complex64, Complex64, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (mut sd, mut sdd) = (0.0, 0.0);
            let (mut sf, mut sdf) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for (d, f) in kernels.iter().zip(&spectra) {
                let (dk, fk) = (d[k], f[k]);
                sd += dk;
                sdd += dk * dk;
                sf += fk;
                sdf += fk * dk;
            }
            let mean = 0.5 * (n + sdd);
            let half = (0.25 * (n - sdd) * (n - sdd) + sd * sd).sqrt();
            // squared smaller singular value of the N x 2 design
            let smin2 = mean - half;
            if smin2 < floor2 {
                (sf / n, Complex64::new(0.0, 0.0), true)
            } else {
                let [fc, x] = solve_sym2(n, sd, sdd, [sf, sdf], params.reg_epsilon);
                (fc, x, false)
            }
        })
        .collect();
    let flagged: Vec<bool> = solved.iter().map(|t| t.2).collect();
    let regularized = flagged.iter().filter(|&&f| f).count();
    let x_k: Vec<Complex64> = solved.iter().map(|t| t.1).collect();
    let f_c = real_from_spectrum(grid, Unit::Ppm, solved.iter().map(|t| t.0).collect());
    let f_s = kernels
        .par_iter()
        .map(|d| real_from_spectrum(grid, Unit::Ppm, x_k.iter().zip(d).map(|(x, &dv)| x * dv).collect()))
        .collect();
    let chi = real_from_spectrum(grid, Unit::Ppm, x_k);
    Ok(SeparationResult {
        f_c,
        f_s,
        method: SeparationMethod::GeneralLsq,
        conditioning: Some(ConditioningReport {
            regularized,
            total: grid.len(),
            fraction: regularized as f64 / grid.len() as f64,
        }),
        chi: Some(chi),
        regularized: Some(Mask::new(grid, flagged)?),
    })
}
