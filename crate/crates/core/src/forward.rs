//! k-space dipole kernel and the Fourier-domain forward field model.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{fft3_in_place, signed_frequency, FftDirection, GridSpec, Orientation, ScalarVolume, Unit};

/// Default reduced gyromagnetic ratio of 1H, MHz/T.
pub const GAMMA_BAR_MHZ_PER_T: f64 = 42.5775;

/// Kernel `D(k) = 1/3 - (k.b)^2 / |k|^2` sampled on the unshifted DFT grid,
/// with `D(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DipoleKernel {
    grid: GridSpec,
    orientation: Orientation,
    values: Vec<f64>,
}

impl DipoleKernel {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Physical frequency vector of DFT bin `i` (cycles/mm).
#[inline]
pub(crate) fn k_vector(grid: &GridSpec, i: usize) -> [f64; 3] {
    let c = grid.coords(i);
    [0, 1, 2].map(|d| signed_frequency(c[d], grid.dims[d]) / (grid.dims[d] as f64 * grid.voxel_size[d]))
}

fn raw_kernel(k: [f64; 3], dir: [f64; 3]) -> f64 {
    let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
    if k2 == 0.0 {
        return 0.0;
    }
    let kb = k[0] * dir[0] + k[1] * dir[1] + k[2] * dir[2];
    1.0 / 3.0 - kb * kb / k2
}

/// On even grids the Nyquist bins are their own conjugate partners, so for
/// an oblique field direction the sampled kernel is not Hermitian there. The
/// kernel is averaged with its partner, which is exactly what taking the
/// real part of the field would do, and keeps the spectrum Hermitian.
pub fn dipole_kernel(grid: &GridSpec, b: &Orientation) -> DipoleKernel {
    let dir = b.vector();
    let n = grid.dims;
    let values = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let c = grid.coords(i);
            let partner = grid.index((n[0] - c[0]) % n[0], (n[1] - c[1]) % n[1], (n[2] - c[2]) % n[2]);
            let d = raw_kernel(k_vector(grid, i), dir);
            if partner == i {
                d
            } else {
                let mut kp = k_vector(grid, partner);
                kp.iter_mut().for_each(|v| *v = -*v);
                0.5 * (d + raw_kernel(kp, dir))
            }
        })
        .collect();
    DipoleKernel { grid: *grid, orientation: *b, values }
}

/// Forward DFT of a real volume.
pub(crate) fn spectrum(v: &ScalarVolume) -> Vec<Complex64> {
    let mut data: Vec<Complex64> = v.data().iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft3_in_place(v.grid().dims, &mut data, FftDirection::Forward);
    data
}

/// Inverse DFT keeping the real part. The discarded imaginary residue of a
/// Hermitian spectrum is at rounding level.
pub(crate) fn real_from_spectrum(grid: GridSpec, unit: Unit, mut spec: Vec<Complex64>) -> ScalarVolume {
    fft3_in_place(grid.dims, &mut spec, FftDirection::Inverse);
    #[cfg(debug_assertions)]
    {
        let max_re = spec.iter().fold(0.0_f64, |m, c| m.max(c.re.abs()));
        let max_im = spec.iter().fold(0.0_f64, |m, c| m.max(c.im.abs()));
        debug_assert!(max_im <= 1e-9 * max_re.max(1e-300), "imaginary residue {max_im} vs {max_re}");
    }
    ScalarVolume::from_parts(grid, unit, spec.into_iter().map(|c| c.re).collect())
}

fn require_ppm(v: &ScalarVolume, what: &str) -> Result<()> {
    if v.unit() != Unit::Ppm {
        return Err(Error::InvalidArgument(format!("{what} must be in ppm, got {}", v.unit())));
    }
    Ok(())
}

/// Field shift induced by a susceptibility distribution, `IDFT(D * DFT(chi))`.
pub fn susceptibility_field(chi: &ScalarVolume, b: &Orientation) -> Result<ScalarVolume> {
    Ok(susceptibility_fields(chi, std::slice::from_ref(b))?.pop().unwrap())
}

/// [`susceptibility_field`] for several orientations, sharing one forward transform.
pub fn susceptibility_fields(chi: &ScalarVolume, orientations: &[Orientation]) -> Result<Vec<ScalarVolume>> {
    require_ppm(chi, "susceptibility")?;
    let grid = *chi.grid();
    let chi_k = spectrum(chi);
    Ok(orientations
        .iter()
        .map(|b| {
            let d = dipole_kernel(&grid, b);
            let spec = chi_k.iter().zip(d.values()).map(|(c, &dv)| c * dv).collect();
            real_from_spectrum(grid, Unit::Ppm, spec)
        })
        .collect())
}

/// Total frequency shift: local chemical shift plus the susceptibility field.
pub fn total_field(chi: &ScalarVolume, cs: &ScalarVolume, b: &Orientation) -> Result<ScalarVolume> {
    Ok(total_fields(chi, cs, std::slice::from_ref(b))?.pop().unwrap())
}

pub fn total_fields(chi: &ScalarVolume, cs: &ScalarVolume, orientations: &[Orientation]) -> Result<Vec<ScalarVolume>> {
    chi.grid().ensure_compatible(cs.grid())?;
    require_ppm(cs, "chemical shift")?;
    susceptibility_fields(chi, orientations)?.into_iter().map(|fs| cs.add(&fs)).collect()
}

/// Field strength and gyromagnetic ratio for ppm/Hz conversion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConversion {
    pub b0_tesla: f64,
    #[serde(default = "default_gamma")]
    pub gamma_bar_mhz_per_t: f64,
}

fn default_gamma() -> f64 {
    GAMMA_BAR_MHZ_PER_T
}

impl FieldConversion {
    pub fn new(b0_tesla: f64) -> Result<Self> {
        let c = FieldConversion { b0_tesla, gamma_bar_mhz_per_t: GAMMA_BAR_MHZ_PER_T };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b0_tesla > 0.0 && self.gamma_bar_mhz_per_t > 0.0) {
            return Err(Error::InvalidArgument(format!("field strength and gyromagnetic ratio must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Larmor frequency in Hz per ppm of shift.
    pub fn hz_per_ppm(&self) -> f64 {
        // 1e-6 (ppm) * 1e6 (MHz -> Hz) cancel
        self.gamma_bar_mhz_per_t * self.b0_tesla
    }
}

pub fn ppm_to_hz(shift_ppm: f64, c: &FieldConversion) -> f64 {
    shift_ppm * c.hz_per_ppm()
}

pub fn hz_to_ppm(shift_hz: f64, c: &FieldConversion) -> f64 {
    shift_hz / c.hz_per_ppm()
}

pub fn volume_ppm_to_hz(v: &ScalarVolume, c: &FieldConversion) -> Result<ScalarVolume> {
    require_ppm(v, "field")?;
    Ok(v.scale(c.hz_per_ppm()).with_unit(Unit::Hz))
}

pub fn volume_hz_to_ppm(v: &ScalarVolume, c: &FieldConversion) -> Result<ScalarVolume> {
    if v.unit() != Unit::Hz {
        return Err(Error::InvalidArgument(format!("field must be in Hz, got {}", v.unit())));
    }
    Ok(v.scale(1.0 / c.hz_per_ppm()).with_unit(Unit::Ppm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, Geometry, PhantomSpec, PlacedShape, RegionProps};
    use crate::volume::{Axis, Mask};
    use proptest::prelude::*;

    fn random_chi(grid: GridSpec, seed: u64) -> ScalarVolume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ScalarVolume::new(grid, Unit::Ppm, (0..grid.len()).map(|_| rng.random_range(-0.2..0.2)).collect()).unwrap()
    }

    #[test]
    fn kernel_on_axis_and_orthogonal() {
        let g = GridSpec::cubic([8, 8, 8]).unwrap();
        let d = dipole_kernel(&g, &Orientation::along(Axis::Z));
        assert_eq!(d.values()[0], 0.0);
        // k along z
        assert!((d.values()[g.index(0, 0, 1)] + 2.0 / 3.0).abs() < 1e-15);
        // k along x
        assert!((d.values()[g.index(3, 0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!(d.values().iter().all(|&v| (-2.0 / 3.0 - 1e-15..=1.0 / 3.0 + 1e-15).contains(&v)));
    }

    #[test]
    fn orthogonal_triad_kernels_sum_to_zero() {
        let g = GridSpec::new([8, 6, 10], [1.0, 1.5, 0.8]).unwrap();
        let ks: Vec<_> = Axis::ALL.iter().map(|&a| dipole_kernel(&g, &Orientation::along(a))).collect();
        for i in 0..g.len() {
            let s = ks[0].values()[i] + ks[1].values()[i] + ks[2].values()[i];
            assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_matches_angle_parameterisation() {
        let g = GridSpec::cubic([5, 7, 9]).unwrap();
        let (theta, phi) = (0.7_f64, 1.9_f64);
        let d = dipole_kernel(&g, &Orientation::from_angles(theta, phi));
        for (i, &v) in d.values().iter().enumerate().skip(1) {
            let [kx, ky, kz] = k_vector(&g, i);
            let num = kz * theta.cos() + ky * theta.sin() * phi.cos() + kx * theta.sin() * phi.sin();
            let expected = 1.0 / 3.0 - num * num / (kx * kx + ky * ky + kz * kz);
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn oblique_kernel_is_hermitian_on_even_grid() {
        let g = GridSpec::cubic([8, 6, 4]).unwrap();
        let d = dipole_kernel(&g, &Orientation::new([0.4, 0.5, 0.7]).unwrap());
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            let j = g.index((8 - x) % 8, (6 - y) % 6, (4 - z) % 4);
            assert_eq!(d.values()[i], d.values()[j]);
        }
    }

    #[test]
    fn zero_chi_gives_zero_field() {
        let g = GridSpec::cubic([8, 8, 8]).unwrap();
        let f = susceptibility_field(&ScalarVolume::zeros(g, Unit::Ppm), &Orientation::along(Axis::X)).unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn total_field_arms() {
        let g = GridSpec::cubic([16, 16, 16]).unwrap();
        let chi = random_chi(g, 1);
        let cs = random_chi(g, 2);
        let b = Orientation::along(Axis::Y);
        let zero = ScalarVolume::zeros(g, Unit::Ppm);
        assert_eq!(total_field(&chi, &zero, &b).unwrap(), susceptibility_field(&chi, &b).unwrap());
        assert_eq!(total_field(&zero, &cs, &b).unwrap(), cs);
        let other = ScalarVolume::zeros(GridSpec::cubic([16, 16, 8]).unwrap(), Unit::Ppm);
        assert!(matches!(total_field(&chi, &other, &b), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn null_sum_over_orthogonal_triad() {
        let g = GridSpec::cubic([24, 20, 16]).unwrap();
        let chi = random_chi(g, 7);
        let f = susceptibility_fields(&chi, &Axis::ALL.map(Orientation::along)).unwrap();
        let max = (0..g.len()).map(|i| (f[0].data()[i] + f[1].data()[i] + f[2].data()[i]).abs()).fold(0.0, f64::max);
        assert!(max <= 1e-9, "{max}");
    }

    #[test]
    fn field_has_zero_grid_mean() {
        let g = GridSpec::cubic([16, 16, 16]).unwrap();
        let f = susceptibility_field(&random_chi(g, 3).map(|v| v + 0.4).unwrap(), &Orientation::new([1.0, 2.0, 2.0]).unwrap())
            .unwrap();
        assert!(f.mean().abs() < 1e-14);
    }

    #[test]
    fn spatial_dipole_sum_matches_far_field() {
        // Brute-force oracle: direct summation of the point-dipole field
        // over the voxels of a small sphere, evaluated well outside it.
        let n = 64;
        let g = GridSpec::cubic([n, n, n]).unwrap();
        let spec = PhantomSpec::new(
            g,
            vec![PlacedShape::new(Geometry::Sphere { center: None, radius: 4.0 }, RegionProps::new(1, 1.0, 0.0))],
        );
        let p = build_phantom(&spec).unwrap();
        let f = susceptibility_field(&p.chi, &Orientation::along(Axis::Z)).unwrap();
        let sources: Vec<[f64; 3]> = (0..g.len()).filter(|&i| p.labels[i] == 1).map(|i| g.coords(i).map(|c| c as f64)).collect();
        let c = g.center();
        let (cx, cy, cz) = (c[0].floor() as usize, c[1].floor() as usize, c[2].floor() as usize);
        for target in [[cx, cy, cz + 12], [cx + 12, cy, cz], [cx, cy + 9, cz + 9]] {
            let t = target.map(|v| v as f64);
            let direct: f64 = sources
                .iter()
                .map(|s| {
                    let r = [t[0] - s[0], t[1] - s[1], t[2] - s[2]];
                    let r2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
                    let cos2 = r[2] * r[2] / r2;
                    (3.0 * cos2 - 1.0) / (4.0 * std::f64::consts::PI * r2.powf(1.5))
                })
                .sum();
            let got = f.get(target[0], target[1], target[2]);
            assert!((got - direct).abs() <= 0.05 * direct.abs() + 2e-4, "{target:?}: {got} vs {direct}");
        }
    }

    #[test]
    fn sphere_interior_field_vanishes() {
        let g = GridSpec::cubic([128, 128, 128]).unwrap();
        let spec = PhantomSpec::new(
            g,
            vec![PlacedShape::new(Geometry::Sphere { center: None, radius: 14.0 }, RegionProps::new(1, 0.1, 0.0))],
        );
        let p = build_phantom(&spec).unwrap();
        let f = susceptibility_field(&p.chi, &Orientation::along(Axis::Z)).unwrap();
        let m = crate::volume::roi_stats(&f, &p.region_masks[&1].erode(1)).unwrap().mean;
        assert!(m.abs() <= 0.002, "{m}");
    }

    #[test]
    fn through_grid_cylinder_demagnetisation() {
        let g = GridSpec::cubic([128, 128, 16]).unwrap();
        let chi = 0.1;
        let spec = PhantomSpec::centered_cylinder(g, 10.0, 16.0, Axis::Z, RegionProps::new(1, chi, 0.0));
        let p = build_phantom(&spec).unwrap();
        let interior = p.region_masks[&1].erode(1);
        let mean = |f: &ScalarVolume, m: &Mask| crate::volume::roi_stats(f, m).unwrap().mean;
        let par = susceptibility_field(&p.chi, &Orientation::along(Axis::Z)).unwrap();
        let perp = susceptibility_field(&p.chi, &Orientation::along(Axis::X)).unwrap();
        let (a, b) = (mean(&par, &interior), mean(&perp, &interior));
        assert!((a - chi / 3.0).abs() <= 0.05 * chi / 3.0, "parallel {a}");
        assert!((b + chi / 6.0).abs() <= 0.05 * chi / 6.0, "perpendicular {b}");
    }

    #[test]
    fn ppm_hz_conversion() {
        let c = FieldConversion::new(3.0).unwrap();
        assert_eq!(ppm_to_hz(0.0, &c), 0.0);
        let hz = ppm_to_hz(-3.58, &c);
        assert!((hz.abs() - 458.24).abs() <= 1.5, "{hz}");
        for x in [-3.5, 0.008, 1e-3, 123.0] {
            assert!((hz_to_ppm(ppm_to_hz(x, &c), &c) - x).abs() <= 1e-12 * x.abs());
        }
        assert!(FieldConversion::new(0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn field_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s1 in any::<u64>(), s2 in any::<u64>()) {
            let g = GridSpec::cubic([8, 10, 12]).unwrap();
            let (c1, c2) = (random_chi(g, s1), random_chi(g, s2));
            let o = Orientation::new([0.3, -0.5, 0.8]).unwrap();
            let combo = c1.scale(a).add(&c2.scale(b)).unwrap();
            let lhs = susceptibility_field(&combo, &o).unwrap();
            let rhs = susceptibility_field(&c1, &o).unwrap().scale(a).add(&susceptibility_field(&c2, &o).unwrap().scale(b)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
        }

        #[test]
        fn quarter_turn_about_field_axis_commutes(seed in any::<u64>(), turns in 1i32..4) {
            let g = GridSpec::cubic([10, 10, 6]).unwrap();
            let chi = random_chi(g, seed);
            let b = Orientation::along(Axis::Z);
            let rotated_first = susceptibility_field(&crate::volume::rotate_90(&chi, Axis::Z, turns).unwrap(), &b).unwrap();
            let rotated_after = crate::volume::rotate_90(&susceptibility_field(&chi, &b).unwrap(), Axis::Z, turns).unwrap();
            prop_assert!(rotated_first.max_abs_diff(&rotated_after).unwrap() <= 1e-12);
        }
    }
}
