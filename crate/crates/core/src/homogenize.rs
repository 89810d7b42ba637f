//! Load-case drivers, analytic references, and error metrics.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3};

use crate::assembly::{System, SystemOptions};
use crate::geometry::{LevelSet, PhaseAssembly, Region};
use crate::mesh::Grid;
use crate::solver::{solve, IterationRecord, Preconditioner, SolveResult, SolverConfig};
use crate::voigt::{sym_grad_column, MaterialIso, Stiffness66, Strain6, Stress6};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Effective {
    /// Symmetrized effective stiffness.
    pub stiffness: Stiffness66,
    /// Column `k` is `⟨σ⟩` for `ε̄ = e_k`.
    pub raw: Matrix6<f64>,
    pub asymmetry: f64,
    pub iterations: [usize; 6],
    pub converged: bool,
}

/// Solves the six unit Mandel load cases.
pub fn effective_stiffness<M: Preconditioner>(
    system: &System,
    precond: &mut M,
    config: &SolverConfig,
) -> Result<Effective> {
    let mut raw = Matrix6::zeros();
    let mut iterations = [0; 6];
    let mut converged = true;
    for k in 0..6 {
        let mut eps = Strain6::zeros();
        eps[k] = 1.0;
        let res = solve(system, precond, &eps, config, None)?;
        raw.set_column(k, &res.stress);
        iterations[k] = res.iterations;
        converged &= res.converged;
    }
    let stiffness = Stiffness66(raw);
    Ok(Effective {
        asymmetry: stiffness.asymmetry(),
        stiffness: stiffness.symmetrized(),
        raw,
        iterations,
        converged,
    })
}

/// Hydrostatic strain `ε̄ = I`.
pub fn hydrostatic() -> Strain6 {
    Strain6::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
}

/// Bulk modulus from the average stress under `ε̄ = t·I`: `tr⟨σ⟩ / (3 tr ε̄)`.
pub fn bulk_from_stress(stress: &Stress6, eps: &Strain6) -> f64 {
    (stress[0] + stress[1] + stress[2]) / (3.0 * (eps[0] + eps[1] + eps[2]))
}

/// Effective bulk modulus of the coated-sphere assemblage,
/// `K_c + c(K_i − K_c) / (1 + (1 − c)(K_i − K_c)/(K_c + 4μ_c/3))`, `c = (r_i/r_c)³`.
pub fn hashin_reference(k_c: f64, mu_c: f64, k_i: f64, r_i: f64, r_c: f64) -> f64 {
    let c = (r_i / r_c) * (r_i / r_c) * (r_i / r_c);
    let d = k_i - k_c;
    k_c + c * d / (1.0 + (1.0 - c) * d / (k_c + 4.0 * mu_c / 3.0))
}

/// Neutral coated sphere in a cubic cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashinSetup {
    pub cell: f64,
    pub center: Vector3<f64>,
    pub inclusion_radius: f64,
    pub coating_radius: f64,
    pub matrix: MaterialIso,
    pub coating: MaterialIso,
    pub inclusion: MaterialIso,
}

impl HashinSetup {
    /// 16 µm cell, `r_i = 6e/5`, `r_c = 2π`, all phases with `ν = 0.25`.
    pub fn standard() -> Self {
        HashinSetup {
            cell: 16.0,
            center: Vector3::new(8.0, 8.0, 8.0),
            inclusion_radius: 1.2 * core::f64::consts::E,
            coating_radius: 2.0 * core::f64::consts::PI,
            matrix: MaterialIso { young: 1.5, poisson: 0.25 },
            coating: MaterialIso { young: 1.212_036, poisson: 0.25 },
            inclusion: MaterialIso { young: 12.120_361, poisson: 0.25 },
        }
    }

    /// Inclusion bulk modulus `κ·K_c`; the matrix is set to the resulting
    /// effective modulus so the inclusion stays neutral.
    pub fn with_contrast(kappa: f64) -> Result<Self> {
        let mut s = Self::standard();
        let k_c = s.coating.bulk();
        // E = 3K(1 − 2ν) = 1.5 K at ν = 0.25.
        s.inclusion = MaterialIso::new(1.5 * kappa * k_c, 0.25)?;
        let k = s.reference_bulk();
        s.matrix = MaterialIso::new(1.5 * k, 0.25)?;
        Ok(s)
    }

    pub fn reference_bulk(&self) -> f64 {
        hashin_reference(
            self.coating.bulk(),
            self.coating.shear(),
            self.inclusion.bulk(),
            self.inclusion_radius,
            self.coating_radius,
        )
    }

    /// Phases 0 matrix, 1 coating, 2 inclusion; the inclusion region is
    /// listed first so it wins inside the coating sphere.
    pub fn assembly(&self) -> Result<PhaseAssembly> {
        PhaseAssembly::new(
            [self.cell; 3],
            alloc::vec![self.matrix, self.coating, self.inclusion],
            0,
            alloc::vec![
                Region {
                    level_set: LevelSet::sphere(self.center, self.inclusion_radius)?,
                    phase: 2,
                },
                Region {
                    level_set: LevelSet::sphere(self.center, self.coating_radius)?,
                    phase: 1,
                },
            ],
        )
    }

    pub fn grid(&self, n: usize) -> Result<Grid> {
        Grid::cubic(n, self.cell)
    }
}

/// Closed-form stiffness of a two-phase laminate with unit normal `normal`
/// and volume fraction `f1` of phase 1.
pub fn laminate_reference(c1: &Stiffness66, c2: &Stiffness66, f1: f64, normal: &Vector3<f64>) -> Result<Stiffness66> {
    let n = normal.normalize();
    let f2 = 1.0 - f1;
    let mut nm = SMatrix::<f64, 6, 3>::zeros();
    for c in 0..3 {
        nm.set_column(c, &sym_grad_column(&n, c));
    }
    let (a, b) = (c1.matrix(), c2.matrix());
    let m: Matrix3<f64> = nm.transpose() * (a * f2 + b * f1) * nm;
    let minv = m
        .try_inverse()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: 0.0 })?;
    let d = a - b;
    let cv = a * f1 + b * f2;
    Ok(Stiffness66(cv - d * nm * minv * nm.transpose() * d * (f1 * f2)))
}

pub fn rel_error(a: f64, a_ref: f64) -> f64 {
    (a - a_ref).abs() / a_ref.abs()
}

/// Frobenius relative error of two stiffness matrices.
pub fn rel_error_matrix(a: &Matrix6<f64>, a_ref: &Matrix6<f64>) -> f64 {
    (a - a_ref).norm() / a_ref.norm()
}

/// `√(Σ w a·a)` over weighted samples.
pub fn l2_norm_field(samples: impl IntoIterator<Item = (f64, Strain6)>) -> f64 {
    libm::sqrt(samples.into_iter().map(|(w, a)| w * a.norm_squared()).sum())
}

/// Mean-square strain difference `⟨|ε_h − ε_ref|²⟩` over the quadrature
/// points of the test discretization, the reference evaluated pointwise.
pub fn strain_error(
    test: &System,
    u_test: &[f64],
    reference: &System,
    u_ref: &[f64],
    eps: &Strain6,
) -> Result<f64> {
    let (nt, nr) = (test.grid().n, reference.grid().n);
    if (0..3).any(|a| nr[a] <= nt[a]) {
        return Err(Error::CoarseReference {
            reference: nr[0],
            test: nt[0],
        });
    }
    let mut sum = 0.0;
    test.for_each_sample(u_test, eps, |s| {
        let d = s.strain - reference.strain_at(u_ref, eps, &s.position);
        sum += s.weight * d.norm_squared();
    });
    Ok(sum / test.grid().volume())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBound {
    /// `ε̄:(C_h − C_ref):ε̄`.
    pub gap: f64,
    /// `C₋⟨|Δε|²⟩`.
    pub lower: f64,
    /// `C₊⟨|Δε|²⟩`.
    pub upper: f64,
    pub pass: bool,
}

/// Checks `C₋⟨|Δε|²⟩ ≤ ε̄:(C_h − C_ref):ε̄ ≤ C₊⟨|Δε|²⟩`, the bounds widened by
/// the relative `slack`.
pub fn energy_bound_check(
    energy_h: f64,
    energy_ref: f64,
    strain_err_sq: f64,
    c_minus: f64,
    c_plus: f64,
    slack: f64,
) -> EnergyBound {
    let gap = energy_h - energy_ref;
    let lower = c_minus * strain_err_sq;
    let upper = c_plus * strain_err_sq;
    EnergyBound {
        gap,
        lower,
        upper,
        pass: gap >= lower * (1.0 - slack) && gap <= upper * (1.0 + slack),
    }
}

/// Least-squares slope of `log y` against `log x`. The coarsest point is
/// dropped when its value is within a factor five of the finest one; fewer
/// than three usable points give `None`.
pub fn fit_slope(h: &[f64], y: &[f64]) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = h.iter().zip(y).map(|(a, b)| (*a, *b)).filter(|p| p.0 > 0.0 && p.1 > 0.0).collect();
    if pts.len() < 3 {
        return None;
    }
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (coarse, fine) = (pts[0].1, pts[pts.len() - 1].1);
    if coarse < 5.0 * fine && pts.len() > 3 {
        pts.remove(0);
    }
    Some(log_slope(&pts))
}

/// Plain least-squares slope in log-log coordinates, at least two points.
pub fn log_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|p| libm::log(p.0)).collect();
    let ly: Vec<f64> = pts.iter().map(|p| libm::log(p.1)).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub h: f64,
    pub stress: Stress6,
    pub metric: f64,
    pub error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub rows: Vec<StudyRow>,
    pub slope: Option<f64>,
}

/// Solves one load case per resolution, evaluates `metric` on the average
/// stress, and fits the convergence rate of `|metric − reference| / |reference|`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study<M: Preconditioner>(
    assembly: &PhaseAssembly,
    ns: &[usize],
    options: SystemOptions,
    config: &SolverConfig,
    eps: &Strain6,
    metric: impl Fn(&Stress6) -> f64,
    reference: f64,
    mut precond_for: impl FnMut(&Grid) -> Result<M>,
    clock: &dyn Fn() -> f64,
    mut observer: Option<&mut dyn FnMut(usize, &IterationRecord)>,
) -> Result<StudyResult> {
    if ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidConfig("resolutions must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let t0 = clock();
        let grid = Grid::new([n; 3], assembly.cell)?;
        let system = System::build(assembly, &grid, options)?;
        let mut precond = precond_for(&grid)?;
        let mut cfg = *config;
        cfg.reference_stiffness = system.reference_stiffness();
        let res: SolveResult = match observer.as_mut() {
            Some(obs) => {
                let mut f = |r: &IterationRecord| obs(n, r);
                solve(&system, &mut precond, eps, &cfg, Some(&mut f))?
            }
            None => solve(&system, &mut precond, eps, &cfg, None)?,
        };
        let m = metric(&res.stress);
        rows.push(StudyRow {
            n,
            h: grid.min_spacing(),
            stress: res.stress,
            metric: m,
            error: rel_error(m, reference),
            iterations: res.iterations,
            converged: res.converged,
            history: res.history,
            seconds: clock() - t0,
        });
    }
    let h: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let e: Vec<f64> = rows.iter().map(|r| r.error).collect();
    Ok(StudyResult {
        slope: fit_slope(&h, &e),
        rows,
    })
}
