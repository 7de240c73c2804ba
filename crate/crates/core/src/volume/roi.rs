use serde::{Deserialize, Serialize};

use super::{Axis, Mask, ScalarVolume};
use crate::error::{Error, Result};

/// Mean and population standard deviation over a region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn roi_stats(v: &ScalarVolume, m: &Mask) -> Result<RoiStats> {
    v.grid().ensure_compatible(m.grid())?;
    let selected = || v.data().iter().zip(m.data()).filter_map(|(&x, &keep)| keep.then_some(x));
    let count = selected().count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = selected().sum::<f64>() / count as f64;
    let var = selected().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
    Ok(RoiStats { mean, std: var.sqrt(), count })
}

/// Intersect `label` with the central `n_slices` slab along `axis`. The slab
/// starts at `(dim - n_slices) / 2`, so odd remainders bias it low.
pub fn central_slab_mask(label: &Mask, n_slices: usize, axis: Axis) -> Result<Mask> {
    let dim = label.grid().dims[axis.index()];
    if n_slices == 0 || n_slices > dim {
        return Err(Error::InvalidArgument(format!("slab of {n_slices} slices does not fit {dim} slices along {axis}")));
    }
    let start = (dim - n_slices) / 2;
    let end = start + n_slices;
    let grid = *label.grid();
    let ax = axis.index();
    Ok(Mask::from_fn(grid, |x, y, z| {
        let c = [x, y, z][ax];
        (start..end).contains(&c) && label.get(x, y, z)
    }))
}
