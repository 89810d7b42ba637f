//! Run configuration: a JSON document with unknown keys rejected.

use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use xfft_core::assembly::Discretization;
use xfft_core::geometry::{LevelSet, PhaseAssembly, Region};
use xfft_core::mesh::Grid;
use xfft_core::solver::Scheme;
use xfft_core::voigt::{MaterialIso, Strain6};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Resolution {
    Cubic(usize),
    Box([usize; 3]),
}

impl Resolution {
    pub fn dims(&self) -> [usize; 3] {
        match *self {
            Resolution::Cubic(n) => [n; 3],
            Resolution::Box(n) => n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: Resolution,
    /// Cell edge lengths in µm.
    pub lengths: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub name: String,
    /// MPa.
    pub young: f64,
    pub poisson: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SphereConfig {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    Sphere {
        center: [f64; 3],
        radius: f64,
        phase: String,
    },
    /// Slab between the plane and the cell face the normal points to.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        phase: String,
    },
    SphereUnion {
        spheres: Vec<SphereConfig>,
        phase: String,
    },
}

impl GeometryConfig {
    fn phase(&self) -> &str {
        match self {
            GeometryConfig::Sphere { phase, .. }
            | GeometryConfig::Plane { phase, .. }
            | GeometryConfig::SphereUnion { phase, .. } => phase,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscretizationConfig {
    #[default]
    Xfem,
    P1,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_maxit")]
    pub maxit: usize,
    /// Write every `report_interval`-th iteration to the log.
    #[serde(default = "default_interval")]
    pub report_interval: usize,
}

fn default_scheme() -> String {
    "lcg".into()
}
fn default_tol() -> f64 {
    1e-7
}
fn default_maxit() -> usize {
    1000
}
fn default_interval() -> usize {
    1
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            scheme: default_scheme(),
            tol: default_tol(),
            maxit: default_maxit(),
            report_interval: default_interval(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Resolutions, strictly increasing.
    pub ns: Vec<usize>,
    /// Reference value of the metric; the finest run is used when absent.
    #[serde(default)]
    pub reference: Option<f64>,
    #[serde(default)]
    pub metric: Metric,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `tr⟨σ⟩ / (3 tr ε̄)`.
    #[default]
    Bulk,
    /// `ε̄·⟨σ⟩`.
    Energy,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default)]
    pub fields: bool,
    #[serde(default)]
    pub vtk: bool,
    #[serde(default = "default_true")]
    pub log: bool,
    #[serde(default)]
    pub study: Option<StudyConfig>,
}

fn default_true() -> bool {
    true
}

impl Default for OutputsConfig {
    fn default() -> Self {
        OutputsConfig { fields: false, vtk: false, log: true, study: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub phases: Vec<PhaseConfig>,
    /// Phase of points outside every geometry entry; defaults to the first.
    #[serde(default)]
    pub background: Option<String>,
    #[serde(default)]
    pub geometry: Vec<GeometryConfig>,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    /// Average strain in Mandel order (11, 22, 33, 23, 13, 12).
    pub loading: [f64; 6],
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

impl RunConfig {
    pub fn from_str(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            anyhow::anyhow!("line {}, column {}: {e}", e.line(), e.column())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.grid()?;
        self.assembly()?;
        self.scheme()?;
        if !(self.solver.tol > 0.0) {
            bail!("solver.tol must be positive");
        }
        if self.solver.maxit == 0 || self.solver.report_interval == 0 {
            bail!("solver.maxit and solver.report_interval must be at least 1");
        }
        if let Some(study) = &self.outputs.study {
            if study.ns.is_empty() || study.ns.windows(2).any(|w| w[1] <= w[0]) {
                bail!("outputs.study.ns must be non-empty and strictly increasing");
            }
            if study.ns.iter().any(|&n| n < 2) {
                bail!("outputs.study.ns entries must be at least 2");
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> anyhow::Result<Grid> {
        Ok(Grid::new(self.grid.n.dims(), self.grid.lengths)?)
    }

    pub fn strain(&self) -> Strain6 {
        Strain6::from_column_slice(&self.loading)
    }

    pub fn scheme(&self) -> anyhow::Result<Scheme> {
        Scheme::from_name(&self.solver.scheme)
            .ok_or_else(|| anyhow::anyhow!("unknown scheme `{}` (basic, bb, lcg, ncg)", self.solver.scheme))
    }

    pub fn discretization(&self) -> Discretization {
        match self.discretization {
            DiscretizationConfig::Xfem => Discretization::Xfem,
            DiscretizationConfig::P1 => Discretization::P1,
        }
    }

    fn phase_index(&self, name: &str) -> anyhow::Result<usize> {
        self.phases
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| anyhow::anyhow!("undefined phase `{name}`"))
    }

    pub fn assembly(&self) -> anyhow::Result<PhaseAssembly> {
        if self.phases.is_empty() {
            bail!("at least one phase is required");
        }
        let materials = self
            .phases
            .iter()
            .map(|p| MaterialIso::new(p.young, p.poisson).with_context(|| format!("phase `{}`", p.name)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let background = match &self.background {
            Some(b) => self.phase_index(b)?,
            None => 0,
        };
        let mut regions = Vec::with_capacity(self.geometry.len());
        for g in &self.geometry {
            let phase = self.phase_index(g.phase())?;
            let level_set = match g {
                GeometryConfig::Sphere { center, radius, .. } => {
                    LevelSet::sphere(Vector3::from(*center), *radius)?
                }
                GeometryConfig::Plane { point, normal, .. } => {
                    LevelSet::plane(Vector3::from(*point), Vector3::from(*normal))?
                }
                GeometryConfig::SphereUnion { spheres, .. } => {
                    if spheres.is_empty() {
                        bail!("sphere_union needs at least one sphere");
                    }
                    let mut members = Vec::with_capacity(spheres.len());
                    for s in spheres {
                        match LevelSet::sphere(Vector3::from(s.center), s.radius)? {
                            LevelSet::Sphere(sp) => members.push(sp),
                            _ => unreachable!(),
                        }
                    }
                    LevelSet::SphereUnion(members)
                }
            };
            regions.push(Region { level_set, phase });
        }
        Ok(PhaseAssembly::new(self.grid.lengths, materials, background, regions)?)
    }
}
