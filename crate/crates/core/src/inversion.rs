//! Dipole inversion: thresholded k-space division and a gradient-regularized
//! least-squares solver.

use std::f64::consts::TAU;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{dipole_kernel, real_from_spectrum, spectrum};
use crate::volume::{fft3_in_place, FftDirection, GridSpec, Mask, Orientation, ScalarVolume, Unit};

/// Consecutive residual increases tolerated before the solver gives up.
pub const DIVERGENCE_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Tkd,
    GradL2Cg,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tkd" => Ok(Solver::Tkd),
            "grad_l2_cg" | "cg" => Ok(Solver::GradL2Cg),
            _ => Err(Error::InvalidArgument(format!("unknown solver {s:?}, expected tkd or grad_l2_cg"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionParams {
    pub solver: Solver,
    pub tkd_threshold: f64,
    /// Weight on data fidelity; larger means weaker smoothing.
    pub lambda: f64,
    pub cg_max_iters: usize,
    pub cg_rel_tol: f64,
}

impl Default for InversionParams {
    fn default() -> Self {
        InversionParams { solver: Solver::GradL2Cg, tkd_threshold: 0.2, lambda: 10.0, cg_max_iters: 200, cg_rel_tol: 1e-6 }
    }
}

impl InversionParams {
    pub fn tkd() -> Self {
        InversionParams { solver: Solver::Tkd, ..Default::default() }
    }

    pub fn cg(lambda: f64) -> Self {
        InversionParams { lambda, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tkd_threshold > 0.0 && self.tkd_threshold <= 2.0 / 3.0) {
            return Err(Error::InvalidArgument(format!("TKD threshold must be in (0, 2/3], got {}", self.tkd_threshold)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if self.cg_rel_tol.is_nan() || self.cg_rel_tol <= 0.0 || self.cg_max_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "CG needs a positive tolerance and iteration budget, got {} and {}",
                self.cg_rel_tol, self.cg_max_iters
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub chi: ScalarVolume,
    /// Present for the iterative solver.
    pub report: Option<CgReport>,
}

fn require_ppm(f: &ScalarVolume) -> Result<()> {
    if f.unit() != Unit::Ppm {
        return Err(Error::InvalidArgument(format!("field must be in ppm, got {}", f.unit())));
    }
    Ok(())
}

/// Thresholded k-space division.
pub fn qsm_tkd(f_s: &ScalarVolume, b: &Orientation, p: &InversionParams) -> Result<ScalarVolume> {
    p.validate()?;
    require_ppm(f_s)?;
    let grid = *f_s.grid();
    let d = dipole_kernel(&grid, b);
    let t = p.tkd_threshold;
    let spec = spectrum(f_s)
        .into_par_iter()
        .zip(d.values().par_iter())
        .map(|(f, &dv)| {
            if dv.abs() >= t {
                f / dv
            } else if dv == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                f * dv.signum() / t
            }
        })
        .collect::<Vec<_>>();
    let mut spec = spec;
    spec[0] = Complex64::new(0.0, 0.0);
    Ok(real_from_spectrum(grid, Unit::Ppm, spec))
}

/// Eigenvalues of the periodic forward-difference Laplacian `∇ᵀ∇` on the DFT grid.
pub fn gradient_symbol(grid: &GridSpec) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = (0..3)
        .map(|d| {
            let n = grid.dims[d];
            let h2 = grid.voxel_size[d] * grid.voxel_size[d];
            (0..n).map(|c| (2.0 - 2.0 * (TAU * c as f64 / n as f64).cos()) / h2).collect()
        })
        .collect();
    (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            per_axis[0][c[0]] + per_axis[1][c[1]] + per_axis[2][c[2]]
        })
        .collect()
}

struct NormalOperator {
    grid: GridSpec,
    kernel: Vec<f64>,
    lap: Vec<f64>,
    lambda: f64,
    /// Data-fidelity weight per voxel; `None` means all ones.
    weight: Option<Vec<f64>>,
}

impl NormalOperator {
    fn to_k(&self, x: &[f64]) -> Vec<Complex64> {
        let mut c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft3_in_place(self.grid.dims, &mut c, FftDirection::Forward);
        c
    }

    fn to_real(&self, mut c: Vec<Complex64>) -> Vec<f64> {
        fft3_in_place(self.grid.dims, &mut c, FftDirection::Inverse);
        c.into_iter().map(|v| v.re).collect()
    }

    /// `λ Dᵀ W D x + ∇ᵀ∇ x`
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let xk = self.to_k(x);
        let out_k: Vec<Complex64> = match &self.weight {
            None => xk.par_iter().zip(&self.kernel).zip(&self.lap).map(|((v, &d), &g)| v * (self.lambda * d * d + g)).collect(),
            Some(w) => {
                let dx = self.to_real(xk.iter().zip(&self.kernel).map(|(v, &d)| v * d).collect());
                let wdx: Vec<f64> = dx.iter().zip(w).map(|(a, b)| a * b).collect();
                let wk = self.to_k(&wdx);
                wk.par_iter()
                    .zip(&xk)
                    .zip(self.kernel.par_iter().zip(&self.lap))
                    .map(|((a, v), (&d, &g))| a * (self.lambda * d) + v * g)
                    .collect()
            }
        };
        self.to_real(out_k)
    }

    /// `λ Dᵀ W f`
    fn rhs(&self, f: &[f64]) -> Vec<f64> {
        let wf: Vec<f64> = match &self.weight {
            None => f.to_vec(),
            Some(w) => f.iter().zip(w).map(|(a, b)| a * b).collect(),
        };
        let k = self.to_k(&wf);
        self.to_real(k.iter().zip(&self.kernel).map(|(v, &d)| v * (self.lambda * d)).collect())
    }

    /// Exact inverse of the unweighted operator, with the DC sample pinned to zero.
    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let rk = self.to_k(r);
        self.to_real(
            rk.par_iter()
                .zip(&self.kernel)
                .zip(&self.lap)
                .map(|((v, &d), &g)| {
                    let a = self.lambda * d * d + g;
                    if a > 0.0 {
                        v / a
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect(),
        )
    }
}

/// Inner product with a fixed reduction order, so results do not depend on
/// thread scheduling.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const CHUNK: usize = 4096;
    a.par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `λ‖W(Dχ − f)‖² + ‖∇χ‖²` by preconditioned conjugate gradients.
/// Voxels in `excluded` get zero data-fidelity weight.
pub fn qsm_cg(f_s: &ScalarVolume, b: &Orientation, p: &InversionParams, excluded: Option<&Mask>) -> Result<Inversion> {
    p.validate()?;
    require_ppm(f_s)?;
    let grid = *f_s.grid();
    if let Some(m) = excluded {
        grid.ensure_compatible(m.grid())?;
    }
    let op = NormalOperator {
        grid,
        kernel: dipole_kernel(&grid, b).values().to_vec(),
        lap: gradient_symbol(&grid),
        lambda: p.lambda,
        weight: excluded.map(|m| m.data().iter().map(|&e| if e { 0.0 } else { 1.0 }).collect()),
    };
    let rhs = op.rhs(f_s.data());
    let rhs_norm = norm(&rhs);
    let n = grid.len();
    let mut x = vec![0.0; n];
    if rhs_norm == 0.0 {
        return Ok(Inversion {
            chi: ScalarVolume::from_parts(grid, Unit::Ppm, x),
            report: Some(CgReport { iterations: 0, relative_residual: 0.0, converged: true }),
        });
    }
    let mut r = rhs;
    let mut z = op.precondition(&r);
    let mut dir = z.clone();
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    let mut rising = 0;
    let mut iterations = 0;
    for it in 1..=p.cg_max_iters {
        iterations = it;
        let ad = op.apply(&dir);
        let curv = dot(&dir, &ad);
        if curv.is_nan() || curv <= 0.0 {
            break;
        }
        let alpha = rz / curv;
        x.par_iter_mut().zip(&dir).for_each(|(xi, di)| *xi += alpha * di);
        r.par_iter_mut().zip(&ad).for_each(|(ri, ai)| *ri -= alpha * ai);
        let new_rel = norm(&r) / rhs_norm;
        if !new_rel.is_finite() {
            return Err(Error::Divergence { iterations: it, residual: new_rel });
        }
        rising = if new_rel > rel { rising + 1 } else { 0 };
        rel = new_rel;
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Divergence { iterations: it, residual: rel });
        }
        if rel <= p.cg_rel_tol {
            break;
        }
        z = op.precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        dir.par_iter_mut().zip(&z).for_each(|(di, zi)| *di = zi + beta * *di);
    }
    // The preconditioner keeps iterates zero-mean; remove rounding drift.
    let mean = x.iter().sum::<f64>() / n as f64;
    x.iter_mut().for_each(|v| *v -= mean);
    Ok(Inversion {
        chi: ScalarVolume::from_parts(grid, Unit::Ppm, x),
        report: Some(CgReport { iterations, relative_residual: rel, converged: rel <= p.cg_rel_tol }),
    })
}

/// Run the solver selected in `p`.
pub fn invert(field: &ScalarVolume, b: &Orientation, p: &InversionParams, excluded: Option<&Mask>) -> Result<Inversion> {
    match p.solver {
        Solver::Tkd => Ok(Inversion { chi: qsm_tkd(field, b, p)?, report: None }),
        Solver::GradL2Cg => qsm_cg(field, b, p, excluded),
    }
}

/// Invert an unseparated total field as if it were purely susceptibility-induced.
pub fn invert_total_for_comparison(
    total: &ScalarVolume,
    b: &Orientation,
    p: &InversionParams,
    excluded: Option<&Mask>,
) -> Result<Inversion> {
    invert(total, b, p, excluded)
}
