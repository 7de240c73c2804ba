use rayon::prelude::*;

use super::{Axis, ScalarVolume};
use crate::error::{Error, Result};

/// Largest tilt accepted by [`rotate_arbitrary`].
pub const MAX_ARBITRARY_ANGLE_DEG: f64 = 45.0;

/// Apply `quarter_turns` right-handed 90 degree turns about `axis` to a
/// vector. Used to track where a field direction goes when a map is
/// rotated with [`rotate_90`].
pub fn rotate_vector_90(v: [f64; 3], axis: Axis, quarter_turns: i32) -> [f64; 3] {
    let (a, b) = axis.plane();
    let (a, b) = (a.index(), b.index());
    let mut out = v;
    for _ in 0..quarter_turns.rem_euclid(4) {
        let (va, vb) = (out[a], out[b]);
        out[a] = -vb;
        out[b] = va;
    }
    out
}

/// Exact 90 degree rotation about the grid center, as an index permutation.
///
/// One positive turn about `z` sends voxel `(x, y, z)` to `(n - 1 - y, x, z)`,
/// and cyclically for the other axes. The two in-plane dims must be equal.
pub fn rotate_90(v: &ScalarVolume, axis: Axis, quarter_turns: i32) -> Result<ScalarVolume> {
    let grid = *v.grid();
    let (a, b) = axis.plane();
    let (a, b) = (a.index(), b.index());
    if grid.dims[a] != grid.dims[b] {
        return Err(Error::Dimension(format!(
            "90 degree rotation about {axis} needs equal dims on the in-plane axes, got {} and {}",
            grid.dims[a], grid.dims[b]
        )));
    }
    let turns = quarter_turns.rem_euclid(4);
    if turns == 0 {
        return Ok(v.clone());
    }
    let n = grid.dims[a];
    let src = v.data();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            // Pull from the source by applying the inverse turn.
            let mut c = grid.coords(i);
            for _ in 0..turns {
                let (ca, cb) = (c[a], c[b]);
                c[a] = cb;
                c[b] = n - 1 - ca;
            }
            src[grid.index(c[0], c[1], c[2])]
        })
        .collect();
    // voxel sizes swap along with the axes when they differ
    let mut out_grid = grid;
    if turns % 2 == 1 {
        out_grid.voxel_size.swap(a, b);
    }
    Ok(ScalarVolume::from_parts(out_grid, v.unit(), data))
}

/// Rotate about the grid center by `angle_deg` (right-handed about `axis`)
/// with trilinear interpolation. Positions are measured in mm, so anisotropic
/// voxels rotate physically. Samples falling outside the grid read 0.
pub fn rotate_arbitrary(v: &ScalarVolume, axis: Axis, angle_deg: f64) -> Result<ScalarVolume> {
    if !angle_deg.is_finite() || angle_deg.abs() > MAX_ARBITRARY_ANGLE_DEG {
        return Err(Error::InvalidArgument(format!(
            "rotation angle must be within +/-{MAX_ARBITRARY_ANGLE_DEG} deg, got {angle_deg}"
        )));
    }
    if angle_deg == 0.0 {
        return Ok(v.clone());
    }
    let grid = *v.grid();
    let center = grid.center();
    let h = grid.voxel_size;
    let (a, b) = axis.plane();
    let (a, b) = (a.index(), b.index());
    let (s, c) = angle_deg.to_radians().sin_cos();
    let src = v.data();
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let idx = grid.coords(i);
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = (idx[d] as f64 - center[d]) * h[d];
            }
            // inverse rotation: R(-angle) applied to the output position
            let (pa, pb) = (p[a], p[b]);
            p[a] = c * pa + s * pb;
            p[b] = -s * pa + c * pb;
            let mut q = [0.0; 3];
            for d in 0..3 {
                q[d] = p[d] / h[d] + center[d];
            }
            trilinear(src, grid.dims, q)
        })
        .collect();
    Ok(ScalarVolume::from_parts(grid, v.unit(), data))
}

fn trilinear(src: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let base = q.map(f64::floor);
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let fetch = |x: f64, y: f64, z: f64| -> f64 {
        if x < 0.0 || y < 0.0 || z < 0.0 {
            return 0.0;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= nx || y >= ny || z >= nz {
            0.0
        } else {
            src[x + nx * (y + ny * z)]
        }
    };
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(base[0] + dx as f64, base[1] + dy as f64, base[2] + dz as f64);
            }
        }
    }
    acc
}
