use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::ComplexVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FftDirection {
    Forward,
    Inverse,
}

/// Signed frequency index of bin `i` on an axis of length `n`, using the
/// usual wrap: bins `0..ceil(n/2)` are non-negative, the rest map to `i - n`.
#[inline]
pub fn signed_frequency(i: usize, n: usize) -> f64 {
    if i < n.div_ceil(2) {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Unnormalized forward 3D DFT, or inverse scaled by `1 / N`. DC is at
/// index `(0, 0, 0)`; no shift is applied.
pub fn dft_3d(v: &ComplexVolume, direction: FftDirection) -> ComplexVolume {
    let mut data = v.data().to_vec();
    fft3_in_place(v.grid().dims, &mut data, direction);
    ComplexVolume::from_parts(*v.grid(), data)
}

/// In-place 3D transform of an x-fastest buffer.
pub fn fft3_in_place(dims: [usize; 3], data: &mut [Complex64], direction: FftDirection) {
    let [nx, ny, nz] = dims;
    assert_eq!(data.len(), nx * ny * nz, "buffer does not match dims");
    let mut planner = FftPlanner::<f64>::new();
    let plan = |planner: &mut FftPlanner<f64>, n: usize| match direction {
        FftDirection::Forward => planner.plan_fft_forward(n),
        FftDirection::Inverse => planner.plan_fft_inverse(n),
    };
    let slab = nx * ny;

    // x: rows are contiguous, so a whole slab is a batch of nx-length transforms.
    let fx = plan(&mut planner, nx);
    data.par_chunks_mut(slab).for_each(|s| process_batch(fx.as_ref(), s));

    // y: transpose each slab so columns become contiguous.
    let fy = plan(&mut planner, ny);
    data.par_chunks_mut(slab).for_each(|s| {
        let mut t = vec![Complex64::new(0.0, 0.0); slab];
        for y in 0..ny {
            for x in 0..nx {
                t[x * ny + y] = s[x + nx * y];
            }
        }
        process_batch(fy.as_ref(), &mut t);
        for y in 0..ny {
            for x in 0..nx {
                s[x + nx * y] = t[x * ny + y];
            }
        }
    });

    // z: gather lines of stride nx*ny into a contiguous buffer.
    if nz > 1 {
        let fz = plan(&mut planner, nz);
        let mut lines = vec![Complex64::new(0.0, 0.0); data.len()];
        {
            let src: &[Complex64] = data;
            lines.par_chunks_mut(nz).enumerate().for_each(|(l, line)| {
                for (z, v) in line.iter_mut().enumerate() {
                    *v = src[l + slab * z];
                }
            });
        }
        lines.par_chunks_mut(nz * nx).for_each(|chunk| process_batch(fz.as_ref(), chunk));
        data.par_chunks_mut(slab).enumerate().for_each(|(z, s)| {
            for (l, v) in s.iter_mut().enumerate() {
                *v = lines[l * nz + z];
            }
        });
    }

    if direction == FftDirection::Inverse {
        let inv = 1.0 / data.len() as f64;
        data.par_iter_mut().for_each(|v| *v *= inv);
    }
}

fn process_batch(fft: &dyn Fft<f64>, buf: &mut [Complex64]) {
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(buf, &mut scratch);
}
