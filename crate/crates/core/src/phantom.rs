//! Labeled numerical phantoms built from analytic primitives.
//!
//! A voxel belongs to a shape when its center satisfies the shape's inside
//! test. Shapes are painted in order and later shapes overwrite earlier ones.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{rotate_vector_90, Axis, GridSpec, Mask, ScalarVolume, Unit};

/// Default half-width, in voxels, of the brain-like phantom.
pub const DEFAULT_BRAIN_SCALE: f64 = 24.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionProps {
    pub label: u32,
    pub chi_ppm: f64,
    #[serde(default)]
    pub cs_ppm: f64,
}

impl RegionProps {
    pub fn new(label: u32, chi_ppm: f64, cs_ppm: f64) -> Self {
        RegionProps { label, chi_ppm, cs_ppm }
    }

    pub fn background() -> Self {
        RegionProps::new(0, 0.0, 0.0)
    }
}

/// Analytic geometry in voxel coordinates. A missing `center` means the
/// geometric grid center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Geometry {
    Cylinder {
        #[serde(default)]
        center: Option<[f64; 3]>,
        radius: f64,
        height: f64,
        axis: Axis,
    },
    Sphere {
        #[serde(default)]
        center: Option<[f64; 3]>,
        radius: f64,
    },
    Heart {
        #[serde(default)]
        center: Option<[f64; 3]>,
        scale: f64,
    },
    BrainLike {
        #[serde(default)]
        center: Option<[f64; 3]>,
        scale: f64,
    },
}

impl Geometry {
    fn center(&self) -> Option<[f64; 3]> {
        match self {
            Geometry::Cylinder { center, .. }
            | Geometry::Sphere { center, .. }
            | Geometry::Heart { center, .. }
            | Geometry::BrainLike { center, .. } => *center,
        }
    }
}

/// One primitive with its material. Brain-like shapes take five subregion
/// properties (defaults from [`brain_like_regions`]); the rest take `region`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacedShape {
    pub geometry: Geometry,
    #[serde(default)]
    pub region: Option<RegionProps>,
    #[serde(default)]
    pub subregions: Option<Vec<RegionProps>>,
}

impl PlacedShape {
    pub fn new(geometry: Geometry, region: RegionProps) -> Self {
        PlacedShape { geometry, region: Some(region), subregions: None }
    }

    pub fn brain_like(center: Option<[f64; 3]>, scale: f64) -> Self {
        PlacedShape { geometry: Geometry::BrainLike { center, scale }, region: None, subregions: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub shapes: Vec<PlacedShape>,
    #[serde(default = "RegionProps::background")]
    pub background: RegionProps,
}

impl PhantomSpec {
    pub fn new(grid: GridSpec, shapes: Vec<PlacedShape>) -> Self {
        PhantomSpec { grid, shapes, background: RegionProps::background() }
    }

    /// Single centered cylinder through the given material; the usual
    /// fat-phantom layout.
    pub fn centered_cylinder(grid: GridSpec, radius: f64, height: f64, axis: Axis, region: RegionProps) -> Self {
        Self::new(grid, vec![PlacedShape::new(Geometry::Cylinder { center: None, radius, height, axis }, region)])
    }

    /// The same phantom turned by quarter turns about the grid center.
    /// Only cylinders and spheres can be turned; their inside tests are
    /// invariant under the resulting coordinate permutation.
    pub fn rotate_90(&self, axis: Axis, quarter_turns: i32) -> Result<PhantomSpec> {
        let grid_center = self.grid.center();
        let turn_point = |c: Option<[f64; 3]>| {
            let p = c.unwrap_or(grid_center);
            let rel = [p[0] - grid_center[0], p[1] - grid_center[1], p[2] - grid_center[2]];
            let r = rotate_vector_90(rel, axis, quarter_turns);
            Some([r[0] + grid_center[0], r[1] + grid_center[1], r[2] + grid_center[2]])
        };
        let mut dims = self.grid.dims;
        let mut voxel = self.grid.voxel_size;
        if quarter_turns.rem_euclid(2) == 1 {
            let (a, b) = axis.plane();
            dims.swap(a.index(), b.index());
            voxel.swap(a.index(), b.index());
        }
        let mut shapes = Vec::with_capacity(self.shapes.len());
        for s in &self.shapes {
            let geometry = match &s.geometry {
                Geometry::Cylinder { center, radius, height, axis: long } => {
                    let v = rotate_vector_90(long.unit(), axis, quarter_turns);
                    let long = Axis::from_index(v.iter().position(|c| c.abs() > 0.5).unwrap()).unwrap();
                    Geometry::Cylinder { center: turn_point(*center), radius: *radius, height: *height, axis: long }
                }
                Geometry::Sphere { center, radius } => Geometry::Sphere { center: turn_point(*center), radius: *radius },
                other => return Err(Error::InvalidArgument(format!("cannot rotate {other:?}; only cylinders and spheres"))),
            };
            shapes.push(PlacedShape { geometry, region: s.region, subregions: s.subregions.clone() });
        }
        Ok(PhantomSpec { grid: GridSpec::new(dims, voxel)?, shapes, background: self.background })
    }
}

/// One subregion of the brain-like phantom: a union of ellipsoids.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainRegion {
    pub name: &'static str,
    pub props: RegionProps,
    /// `(offset from phantom center, semi-axes)` in voxels.
    pub ellipsoids: Vec<([f64; 3], [f64; 3])>,
}

/// Nested-ellipsoid stand-in for a brain with deep gray nuclei. Painted in
/// the returned order; every region has `cs = 0`.
pub fn brain_like_regions(scale: f64) -> Result<Vec<BrainRegion>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("brain scale must be > 0, got {scale}")));
    }
    let s = |v: [f64; 3]| v.map(|c| c * scale);
    let pair = |c: [f64; 3], r: [f64; 3]| vec![(s(c), s(r)), (s([-c[0], c[1], c[2]]), s(r))];
    Ok(vec![
        BrainRegion {
            name: "gray_matter",
            props: RegionProps::new(1, 0.02, 0.0),
            ellipsoids: vec![(s([0.0; 3]), s([0.8, 1.0, 0.7]))],
        },
        BrainRegion {
            name: "white_matter",
            props: RegionProps::new(2, -0.02, 0.0),
            ellipsoids: vec![(s([0.0; 3]), s([0.65, 0.82, 0.55]))],
        },
        BrainRegion {
            name: "caudate_nucleus",
            props: RegionProps::new(3, 0.04, 0.0),
            ellipsoids: pair([0.14, 0.22, 0.12], [0.07, 0.16, 0.09]),
        },
        BrainRegion {
            name: "putamen",
            props: RegionProps::new(4, 0.07, 0.0),
            ellipsoids: pair([0.30, 0.02, 0.0], [0.07, 0.17, 0.12]),
        },
        BrainRegion {
            name: "globus_pallidus",
            props: RegionProps::new(5, 0.12, 0.0),
            ellipsoids: pair([0.20, 0.0, -0.02], [0.05, 0.10, 0.07]),
        },
    ])
}

/// Inside test for the implicit heart surface, in coordinates normalized by
/// `scale` and measured from `center`.
pub fn heart_inside(p: [f64; 3], center: [f64; 3], scale: f64) -> bool {
    let x = (p[0] - center[0]) / scale;
    let y = (p[1] - center[1]) / scale;
    let z = (p[2] - center[2]) / scale;
    let a = x * x + 2.25 * y * y + z * z - 1.0;
    let z3 = z * z * z;
    a * a * a - x * x * z3 - (9.0 / 80.0) * y * y * z3 <= 0.0
}

/// Axis-aligned extent of the normalized heart, `(min, max)` per axis.
const HEART_EXTENT: [(f64, f64); 3] = [(-1.14, 1.14), (-0.68, 0.68), (-1.0, 1.24)];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPhantom {
    pub grid: GridSpec,
    pub labels: Vec<u32>,
    pub chi: ScalarVolume,
    pub cs: ScalarVolume,
    /// Every non-background label that occupies at least one voxel.
    pub region_masks: BTreeMap<u32, Mask>,
    pub background: RegionProps,
    pub regions: BTreeMap<u32, RegionProps>,
}

impl LabeledPhantom {
    pub fn background_mask(&self) -> Mask {
        self.label_mask(self.background.label)
    }

    pub fn label_mask(&self, label: u32) -> Mask {
        Mask::new(self.grid, self.labels.iter().map(|&l| l == label).collect()).expect("labels match grid")
    }

    /// Union of all non-background regions.
    pub fn foreground_mask(&self) -> Mask {
        self.background_mask().not()
    }
}

enum Painter {
    Cylinder { center: [f64; 3], radius: f64, half_height: f64, axis: usize },
    Sphere { center: [f64; 3], radius: f64 },
    Heart { center: [f64; 3], scale: f64 },
    Ellipsoids(Vec<([f64; 3], [f64; 3])>),
}

impl Painter {
    fn inside(&self, p: [f64; 3]) -> bool {
        match self {
            Painter::Cylinder { center, radius, half_height, axis } => {
                let mut r2 = 0.0;
                for d in 0..3 {
                    let delta = p[d] - center[d];
                    if d == *axis {
                        if delta.abs() > *half_height {
                            return false;
                        }
                    } else {
                        r2 += delta * delta;
                    }
                }
                r2 <= radius * radius
            }
            Painter::Sphere { center, radius } => {
                let r2: f64 = (0..3).map(|d| (p[d] - center[d]).powi(2)).sum();
                r2 <= radius * radius
            }
            Painter::Heart { center, scale } => heart_inside(p, *center, *scale),
            Painter::Ellipsoids(list) => {
                list.iter().any(|(c, r)| (0..3).map(|d| ((p[d] - c[d]) / r[d]).powi(2)).sum::<f64>() <= 1.0)
            }
        }
    }
}

fn check_fits(grid: &GridSpec, lo: [f64; 3], hi: [f64; 3], what: &str) -> Result<()> {
    for d in 0..3 {
        let n = grid.dims[d] as f64;
        // voxel d spans [d - 0.5, d + 0.5]; allow a rounding hair
        if lo[d] < -0.5 - 1e-9 || hi[d] > n - 0.5 + 1e-9 {
            return Err(Error::Geometry(format!(
                "{what} spans [{:.3}, {:.3}] on axis {d} but the grid covers [-0.5, {:.1}]",
                lo[d],
                hi[d],
                n - 0.5
            )));
        }
    }
    Ok(())
}

fn positive(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Geometry(format!("{name} must be > 0, got {v}")))
    }
}

pub fn build_phantom(spec: &PhantomSpec) -> Result<LabeledPhantom> {
    let grid = spec.grid;
    grid.validate()?;
    if spec.background.label != 0 {
        return Err(Error::Config("background label must be 0".into()));
    }

    let mut regions: BTreeMap<u32, RegionProps> = BTreeMap::new();
    regions.insert(0, spec.background);
    let mut register = |p: RegionProps, seen: &mut BTreeSet<u32>| -> Result<()> {
        if p.label == 0 {
            return Err(Error::Config("shape labels must be >= 1".into()));
        }
        if !(p.chi_ppm.is_finite() && p.cs_ppm.is_finite()) {
            return Err(Error::Config(format!("label {} has non-finite properties", p.label)));
        }
        if !seen.insert(p.label) {
            return Err(Error::Config(format!("label {} is used twice", p.label)));
        }
        regions.insert(p.label, p);
        Ok(())
    };
    let mut seen = BTreeSet::new();
    let mut painters: Vec<(Painter, u32)> = Vec::new();

    for shape in &spec.shapes {
        let center = shape.geometry.center().unwrap_or(grid.center());
        let single = |shape: &PlacedShape| -> Result<RegionProps> {
            if shape.subregions.is_some() {
                return Err(Error::Config("only brain_like shapes take subregions".into()));
            }
            shape.region.ok_or_else(|| Error::Config(format!("{:?} needs a region", shape.geometry)))
        };
        match &shape.geometry {
            Geometry::Cylinder { radius, height, axis, .. } => {
                positive(*radius, "cylinder radius")?;
                positive(*height, "cylinder height")?;
                let mut half = [*radius; 3];
                half[axis.index()] = height / 2.0;
                check_fits(&grid, sub(center, half), add(center, half), "cylinder")?;
                let p = single(shape)?;
                register(p, &mut seen)?;
                painters.push((
                    Painter::Cylinder { center, radius: *radius, half_height: height / 2.0, axis: axis.index() },
                    p.label,
                ));
            }
            Geometry::Sphere { radius, .. } => {
                positive(*radius, "sphere radius")?;
                let half = [*radius; 3];
                check_fits(&grid, sub(center, half), add(center, half), "sphere")?;
                let p = single(shape)?;
                register(p, &mut seen)?;
                painters.push((Painter::Sphere { center, radius: *radius }, p.label));
            }
            Geometry::Heart { scale, .. } => {
                positive(*scale, "heart scale")?;
                let lo = [0, 1, 2].map(|d| center[d] + HEART_EXTENT[d].0 * scale);
                let hi = [0, 1, 2].map(|d| center[d] + HEART_EXTENT[d].1 * scale);
                check_fits(&grid, lo, hi, "heart")?;
                let p = single(shape)?;
                register(p, &mut seen)?;
                painters.push((Painter::Heart { center, scale: *scale }, p.label));
            }
            Geometry::BrainLike { scale, .. } => {
                positive(*scale, "brain scale")?;
                if shape.region.is_some() {
                    return Err(Error::Config("brain_like shapes take subregions, not region".into()));
                }
                let defaults = brain_like_regions(*scale)?;
                let props: Vec<RegionProps> = match &shape.subregions {
                    Some(list) if list.len() == defaults.len() => list.clone(),
                    Some(list) => {
                        return Err(Error::Config(format!("brain_like needs {} subregions, got {}", defaults.len(), list.len())))
                    }
                    None => defaults.iter().map(|r| r.props).collect(),
                };
                for (region, p) in defaults.into_iter().zip(props) {
                    register(p, &mut seen)?;
                    let ells: Vec<_> = region.ellipsoids.iter().map(|(off, r)| (add(center, *off), *r)).collect();
                    for (c, r) in &ells {
                        check_fits(&grid, sub(*c, *r), add(*c, *r), region.name)?;
                    }
                    painters.push((Painter::Ellipsoids(ells), p.label));
                }
            }
        }
    }

    let labels: Vec<u32> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let [x, y, z] = grid.coords(i);
            let p = [x as f64, y as f64, z as f64];
            painters.iter().rev().find(|(painter, _)| painter.inside(p)).map_or(0, |(_, label)| *label)
        })
        .collect();

    let chi = labels.iter().map(|l| regions[l].chi_ppm).collect();
    let cs = labels.iter().map(|l| regions[l].cs_ppm).collect();
    let mut region_masks = BTreeMap::new();
    for &label in regions.keys().filter(|&&l| l != 0) {
        let m = Mask::new(grid, labels.iter().map(|&l| l == label).collect())?;
        if m.count() > 0 {
            region_masks.insert(label, m);
        }
    }
    Ok(LabeledPhantom {
        grid,
        chi: ScalarVolume::new(grid, Unit::Ppm, chi)?,
        cs: ScalarVolume::new(grid, Unit::Ppm, cs)?,
        labels,
        region_masks,
        background: spec.background,
        regions,
    })
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
