//! Multi-echo acquisition chain: complex signal synthesis, reference-scan
//! division and temporal least-squares frequency fitting.

use std::f64::consts::{PI, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{FieldConversion, GAMMA_BAR_MHZ_PER_T};
use crate::volume::{ComplexVolume, GridSpec, Mask, ScalarVolume, Unit};

/// Relative magnitude threshold below which a reference voxel is treated as empty.
pub const REFERENCE_EPSILON: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionParams {
    pub te_ms: Vec<f64>,
    pub b0_tesla: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub t2star_ms: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma_bar_mhz_per_t: f64,
}

fn default_gamma() -> f64 {
    GAMMA_BAR_MHZ_PER_T
}

impl AcquisitionParams {
    pub fn new(te_ms: Vec<f64>, b0_tesla: f64) -> Self {
        AcquisitionParams {
            te_ms,
            b0_tesla,
            noise_sigma: 0.0,
            t2star_ms: None,
            seed: 0,
            gamma_bar_mhz_per_t: GAMMA_BAR_MHZ_PER_T,
        }
    }

    /// `n` echoes starting at `first_ms`, spaced `spacing_ms` apart.
    pub fn uniform(n: usize, first_ms: f64, spacing_ms: f64, b0_tesla: f64) -> Self {
        Self::new((0..n).map(|k| first_ms + k as f64 * spacing_ms).collect(), b0_tesla)
    }

    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Self {
        self.noise_sigma = sigma;
        self.seed = seed;
        self
    }

    pub fn conversion(&self) -> FieldConversion {
        FieldConversion { b0_tesla: self.b0_tesla, gamma_bar_mhz_per_t: self.gamma_bar_mhz_per_t }
    }

    pub fn validate(&self) -> Result<()> {
        validate_echo_times(&self.te_ms)?;
        self.conversion().validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(t2) = self.t2star_ms {
            if !(t2 > 0.0 && t2.is_finite()) {
                return Err(Error::InvalidArgument(format!("T2* must be > 0, got {t2}")));
            }
        }
        Ok(())
    }
}

pub fn validate_echo_times(te_ms: &[f64]) -> Result<()> {
    if te_ms.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 echoes, got {}", te_ms.len())));
    }
    if te_ms.iter().any(|t| !t.is_finite() || *t < 0.0) || te_ms.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "echo times must be finite, non-negative and strictly increasing: {te_ms:?}"
        )));
    }
    Ok(())
}

/// Largest gap between consecutive echoes, ms.
pub fn max_echo_spacing_ms(te_ms: &[f64]) -> f64 {
    te_ms.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Highest |frequency| recoverable by sequential unwrapping at this spacing.
pub fn nyquist_limit_hz(spacing_ms: f64) -> f64 {
    1e3 / (2.0 * spacing_ms)
}

/// Longest echo spacing that keeps `peak_hz` unaliased.
pub fn spacing_limit_ms(peak_hz: f64) -> f64 {
    1e3 / (2.0 * peak_hz.abs())
}

/// Errors if the echo spacing cannot represent a field of `peak_hz`.
pub fn check_nyquist(te_ms: &[f64], peak_hz: f64) -> Result<()> {
    let spacing = max_echo_spacing_ms(te_ms);
    let limit = spacing_limit_ms(peak_hz);
    if spacing >= limit {
        return Err(Error::Nyquist { spacing_ms: spacing, limit_ms: limit, peak_hz });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EchoSeries {
    pub te_ms: Vec<f64>,
    pub volumes: Vec<ComplexVolume>,
    pub params: Option<AcquisitionParams>,
    /// Voxels zeroed by reference division.
    pub low_snr: Option<Mask>,
}

impl EchoSeries {
    pub fn new(te_ms: Vec<f64>, volumes: Vec<ComplexVolume>) -> Result<Self> {
        validate_echo_times(&te_ms)?;
        if te_ms.len() != volumes.len() {
            return Err(Error::InvalidArgument(format!("{} echo times but {} volumes", te_ms.len(), volumes.len())));
        }
        for v in &volumes[1..] {
            volumes[0].grid().ensure_compatible(v.grid())?;
        }
        Ok(EchoSeries { te_ms, volumes, params: None, low_snr: None })
    }

    pub fn grid(&self) -> &GridSpec {
        self.volumes[0].grid()
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}

fn split_echoes(grid: GridSpec, n_echo: usize, per_voxel: Vec<Vec<Complex64>>) -> Vec<ComplexVolume> {
    (0..n_echo).map(|e| ComplexVolume::from_parts(grid, per_voxel.iter().map(|s| s[e]).collect())).collect()
}

pub fn synthesize_echoes(df_ppm: &ScalarVolume, magnitude: &ScalarVolume, p: &AcquisitionParams) -> Result<EchoSeries> {
    p.validate()?;
    df_ppm.grid().ensure_compatible(magnitude.grid())?;
    if df_ppm.unit() != Unit::Ppm {
        return Err(Error::InvalidArgument(format!("field map must be in ppm, got {}", df_ppm.unit())));
    }
    if let Some(i) = magnitude.data().iter().position(|&m| m < 0.0) {
        return Err(Error::InvalidArgument(format!("negative magnitude at voxel {i}")));
    }
    let hz_per_ppm = p.conversion().hz_per_ppm();
    let decay: Vec<f64> = p.te_ms.iter().map(|&te| p.t2star_ms.map_or(1.0, |t2| (-te / t2).exp())).collect();
    let per_voxel: Vec<Vec<Complex64>> = (0..df_ppm.grid().len())
        .into_par_iter()
        .map(|i| {
            let f_hz = df_ppm.data()[i] * hz_per_ppm;
            let m = magnitude.data()[i];
            let mut rng = (p.noise_sigma > 0.0).then(|| {
                let mut r = ChaCha8Rng::seed_from_u64(p.seed);
                r.set_stream(i as u64);
                r
            });
            p.te_ms
                .iter()
                .zip(&decay)
                .map(|(&te, &w)| {
                    let clean = Complex64::from_polar(m * w, TAU * f_hz * te * 1e-3);
                    match rng.as_mut() {
                        Some(r) => {
                            let re: f64 = StandardNormal.sample(r);
                            let im: f64 = StandardNormal.sample(r);
                            clean + Complex64::new(re, im) * p.noise_sigma
                        }
                        None => clean,
                    }
                })
                .collect()
        })
        .collect();
    Ok(EchoSeries {
        te_ms: p.te_ms.clone(),
        volumes: split_echoes(*df_ppm.grid(), p.te_ms.len(), per_voxel),
        params: Some(p.clone()),
        low_snr: None,
    })
}

/// Voxelwise `main / reference`. Voxels where any reference echo falls below
/// [`REFERENCE_EPSILON`] times that echo's maximum magnitude are zeroed in
/// every echo and flagged in `low_snr`.
pub fn reference_divide(main: &EchoSeries, reference: &EchoSeries) -> Result<EchoSeries> {
    main.grid().ensure_compatible(reference.grid())?;
    if main.te_ms != reference.te_ms {
        return Err(Error::EchoMismatch);
    }
    let grid = *main.grid();
    let thresholds: Vec<f64> =
        reference.volumes.iter().map(|v| REFERENCE_EPSILON * v.data().iter().fold(0.0_f64, |m, c| m.max(c.norm()))).collect();
    let per_voxel: Vec<(bool, Vec<Complex64>)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let low = reference.volumes.iter().zip(&thresholds).any(|(v, &t)| v.data()[i].norm() < t || t == 0.0);
            let vals = main
                .volumes
                .iter()
                .zip(&reference.volumes)
                .map(|(m, r)| if low { Complex64::new(0.0, 0.0) } else { m.data()[i] / r.data()[i] })
                .collect();
            (low, vals)
        })
        .collect();
    let mask = Mask::new(grid, per_voxel.iter().map(|(l, _)| *l).collect())?;
    let values = per_voxel.into_iter().map(|(_, v)| v).collect();
    Ok(EchoSeries {
        te_ms: main.te_ms.clone(),
        volumes: split_echoes(grid, main.len(), values),
        params: main.params.clone(),
        low_snr: Some(mask),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyFit {
    pub frequency: ScalarVolume,
    /// RMS phase residual of the linear fit, radians.
    pub residual: ScalarVolume,
}

/// Phase-change magnitude treated as an exact half cycle.
const HALF_CYCLE_TIE: f64 = 1e-9;

/// Sequential temporal unwrapping: each echo's phase is moved by the multiple
/// of 2π that brings it nearest the previous unwrapped phase. A step of
/// exactly half a cycle is taken as positive.
pub fn unwrap_sequential(phases: &mut [f64]) {
    for k in 1..phases.len() {
        let prev = phases[k - 1];
        let mut step = (phases[k] - prev).rem_euclid(TAU);
        if step > PI + HALF_CYCLE_TIE {
            step -= TAU;
        }
        phases[k] = prev + step;
    }
}

/// Slope and intercept of the ordinary least-squares line through `(t, y)`.
pub fn linear_fit(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let (sty, stt) =
        t.iter().zip(y).fold((0.0, 0.0), |(a, b), (&ti, &yi)| (a + (ti - tm) * (yi - ym), b + (ti - tm) * (ti - tm)));
    let slope = sty / stt;
    (slope, ym - slope * tm)
}

pub fn fit_frequency(e: &EchoSeries) -> Result<FrequencyFit> {
    validate_echo_times(&e.te_ms)?;
    let grid = *e.grid();
    let fits: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut phase: Vec<f64> = e.volumes.iter().map(|v| v.data()[i].arg()).collect();
            unwrap_sequential(&mut phase);
            let (slope, icpt) = linear_fit(&e.te_ms, &phase);
            let ss: f64 = e.te_ms.iter().zip(&phase).map(|(&t, &p)| (p - (icpt + slope * t)).powi(2)).sum();
            // rad/ms -> Hz
            (slope * 1e3 / (2.0 * PI), (ss / phase.len() as f64).sqrt())
        })
        .collect();
    Ok(FrequencyFit {
        frequency: ScalarVolume::from_parts(grid, Unit::Hz, fits.iter().map(|f| f.0).collect()),
        residual: ScalarVolume::from_parts(grid, Unit::Dimensionless, fits.iter().map(|f| f.1).collect()),
    })
}
