//! Analytic level-set geometry, phase assignment and nodal sampling.
//!
//! Level sets are positive inside their region. A [`PhaseAssembly`] is an
//! ordered list of regions over a background phase: a point belongs to the
//! phase of the first region whose level set is positive there, otherwise to
//! the background. Each region contributes one interface field.

use alloc::{format, vec::Vec};

use nalgebra::Vector3;

use crate::mesh::{wrap_coordinate, Grid};
use crate::voigt::MaterialIso;
use crate::{Error, Result};

/// Relative snap threshold: nodal values with `|L| < SNAP·h` become `+SNAP·h`.
pub const SNAP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

/// Tagged union of the supported signed-distance primitives.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelSet {
    /// Laminate layer bounded by the plane through `point` and the periodic
    /// cell face perpendicular to `axis`. With `positive_side` the region is
    /// `point[axis] < x[axis] < ℓ`, otherwise `0 < x[axis] < point[axis]`.
    Plane {
        axis: usize,
        offset: f64,
        positive_side: bool,
    },
    Sphere(Sphere),
    /// Union of spheres; the distance is the maximum over the members.
    SphereUnion(Vec<Sphere>),
}

impl LevelSet {
    /// Plane through `point` with unit `normal`. Only axis-aligned normals
    /// are supported, since the periodic cell face acts as the second
    /// interface of the layer.
    pub fn plane(point: Vector3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidGeometry("plane normal is zero".into()));
        }
        let unit = normal / n;
        let axis = unit.iamax();
        if (unit[axis].abs() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidGeometry(format!(
                "plane normal {:?} is not aligned with a coordinate axis",
                [normal[0], normal[1], normal[2]]
            )));
        }
        Ok(LevelSet::Plane {
            axis,
            offset: point[axis],
            positive_side: unit[axis] > 0.0,
        })
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidGeometry(format!("sphere radius {radius} must be positive")));
        }
        Ok(LevelSet::Sphere(Sphere { center, radius }))
    }

    /// Signed distance at `x`; the cell has edge lengths `cell`.
    pub fn eval(&self, x: &Vector3<f64>, cell: &[f64; 3]) -> f64 {
        match self {
            LevelSet::Plane {
                axis,
                offset,
                positive_side,
            } => {
                let l = cell[*axis];
                let y = wrap_coordinate(x[*axis], l);
                let a = wrap_coordinate(*offset, l);
                let inside_up = if y >= a {
                    (y - a).min(l - y)
                } else {
                    -(a - y).min(y)
                };
                if *positive_side {
                    inside_up
                } else {
                    -inside_up
                }
            }
            LevelSet::Sphere(s) => sphere_distance(s, x, cell),
            LevelSet::SphereUnion(members) => members
                .iter()
                .map(|s| sphere_distance(s, x, cell))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn sphere_distance(s: &Sphere, x: &Vector3<f64>, cell: &[f64; 3]) -> f64 {
    // Minimum-image displacement accounts for periodic copies of the sphere.
    let d = Vector3::from_fn(|a, _| {
        let l = cell[a];
        let r = wrap_coordinate(x[a] - s.center[a], l);
        if r > 0.5 * l {
            r - l
        } else {
            r
        }
    });
    s.radius - d.norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub level_set: LevelSet,
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseAssembly {
    pub cell: [f64; 3],
    pub materials: Vec<MaterialIso>,
    pub background: usize,
    pub regions: Vec<Region>,
}

impl PhaseAssembly {
    pub fn new(
        cell: [f64; 3],
        materials: Vec<MaterialIso>,
        background: usize,
        regions: Vec<Region>,
    ) -> Result<Self> {
        if materials.is_empty() {
            return Err(Error::InvalidGeometry("no phases defined".into()));
        }
        for m in &materials {
            m.validate()?;
        }
        let np = materials.len();
        if background >= np || regions.iter().any(|r| r.phase >= np) {
            return Err(Error::InvalidGeometry("region references an undefined phase".into()));
        }
        if regions.len() > u16::MAX as usize {
            return Err(Error::InvalidGeometry("too many regions".into()));
        }
        Ok(PhaseAssembly {
            cell,
            materials,
            background,
            regions,
        })
    }

    /// Single-phase cell.
    pub fn homogeneous(cell: [f64; 3], material: MaterialIso) -> Result<Self> {
        Self::new(cell, alloc::vec![material], 0, Vec::new())
    }

    pub fn phase_count(&self) -> usize {
        self.materials.len()
    }

    pub fn interface_count(&self) -> usize {
        self.regions.len()
    }

    /// Phase from the inside/outside state of every region, first match wins.
    pub fn phase_from_inside(&self, inside: impl Fn(usize) -> bool) -> usize {
        self.regions
            .iter()
            .enumerate()
            .find(|(k, _)| inside(*k))
            .map_or(self.background, |(_, r)| r.phase)
    }

    pub fn phase_at(&self, x: &Vector3<f64>) -> usize {
        self.phase_from_inside(|k| self.regions[k].level_set.eval(x, &self.cell) > 0.0)
    }
}

/// Snapped nodal values of every interface field.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalLevelSet {
    values: Vec<Vec<f64>>,
    threshold: f64,
}

impl NodalLevelSet {
    /// Wraps already-snapped values; the snap marker is taken as zero.
    pub fn from_values(values: Vec<Vec<f64>>) -> Self {
        NodalLevelSet {
            values,
            threshold: 0.0,
        }
    }

    pub fn interface_count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self, interface: usize) -> &[f64] {
        &self.values[interface]
    }

    /// The value `η·h` that replaced near-zero samples.
    pub fn snap_value(&self) -> f64 {
        self.threshold
    }

    /// Strictly inside: larger than the snap marker, so nodes lying on the
    /// interface count as neither side.
    #[inline]
    pub fn is_inside(&self, v: f64) -> bool {
        v > self.threshold
    }
}

/// Samples every region's level set at the grid nodes and applies the snap rule.
pub fn sample_nodal(assembly: &PhaseAssembly, grid: &Grid) -> NodalLevelSet {
    let snap = SNAP * grid.min_spacing();
    let values = assembly
        .regions
        .iter()
        .map(|r| {
            (0..grid.node_count())
                .map(|n| {
                    let v = r.level_set.eval(&grid.node_position(n), &assembly.cell);
                    if v.abs() < snap {
                        snap
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    NodalLevelSet {
        values,
        threshold: snap,
    }
}
