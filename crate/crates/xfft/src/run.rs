//! Subcommand drivers shared by the binary and the tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use nalgebra::Vector3;
use serde::Serialize;
use xfft_core::assembly::{System, SystemOptions};
use xfft_core::geometry::{LevelSet, PhaseAssembly, Region};
use xfft_core::greenop::GreenOperator;
use xfft_core::homogenize::{
    bulk_from_stress, effective_stiffness, fit_slope, hydrostatic, laminate_reference, rel_error,
    rel_error_matrix, HashinSetup,
};
use xfft_core::mesh::Grid;
use xfft_core::solver::{solve, IterationRecord, Scheme, SolveResult, SolverConfig};
use xfft_core::voigt::{iso_stiffness, MaterialIso, Strain6, Stress6};

use crate::config::{Metric, RunConfig};
use crate::fft::RealFft3;
use crate::output::{self, LogRow, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID_CONFIG: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

/// Marks errors that stem from the user's configuration.
#[derive(Debug)]
pub struct InvalidConfig(pub String);

impl fmt::Display for InvalidConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for InvalidConfig {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    use xfft_core::Error as E;
    if err.downcast_ref::<InvalidConfig>().is_some() {
        return EXIT_INVALID_CONFIG;
    }
    match err.downcast_ref::<E>() {
        Some(
            E::InvalidConfig(_)
            | E::InvalidMaterial(_)
            | E::InvalidGeometry(_)
            | E::InvalidGrid(_)
            | E::NotPositiveDefinite { .. },
        ) => EXIT_INVALID_CONFIG,
        _ => EXIT_FAILURE,
    }
}

fn invalid(e: impl fmt::Display) -> anyhow::Error {
    InvalidConfig(e.to_string()).into()
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub tol: Option<f64>,
    pub scheme: Option<String>,
}

/// Reads the config and applies command-line overrides.
pub fn load_config(path: &Path, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| invalid(format!("{e:#}")))?;
    if let Some(tol) = overrides.tol {
        cfg.solver.tol = tol;
    }
    if let Some(s) = &overrides.scheme {
        cfg.solver.scheme = s.clone();
    }
    cfg.validate().map_err(|e| invalid(format!("{e:#}")))?;
    Ok(cfg)
}

pub fn green_operator(grid: &Grid) -> anyhow::Result<GreenOperator<RealFft3>> {
    Ok(GreenOperator::new(grid, RealFft3::new(grid.n))?)
}

fn solver_config(cfg: &RunConfig, system: &System) -> anyhow::Result<SolverConfig> {
    Ok(SolverConfig {
        scheme: cfg.scheme().map_err(invalid)?,
        tol: cfg.solver.tol,
        maxit: cfg.solver.maxit,
        reference_stiffness: system.reference_stiffness(),
    })
}

fn bulk_of(stress: &Stress6, eps: &Strain6) -> Option<f64> {
    let tr = eps[0] + eps[1] + eps[2];
    (tr != 0.0).then(|| bulk_from_stress(stress, eps))
}

/// Solves once, logging every `interval`-th iteration and always the last.
fn solve_logged(
    system: &System,
    config: &SolverConfig,
    eps: &Strain6,
    interval: usize,
    start: Instant,
) -> anyhow::Result<(SolveResult, Vec<LogRow>)> {
    let mut green = green_operator(system.grid())?;
    let mut rows = Vec::new();
    let mut last = None;
    let mut obs = |r: &IterationRecord| {
        let row = LogRow {
            iteration: r.iteration,
            res: r.absolute,
            res_rel: r.residual,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if r.iteration % interval == 0 {
            rows.push(row);
        }
        last = Some(row);
    };
    let res = solve(system, &mut green, eps, config, Some(&mut obs))?;
    if let Some(l) = last {
        if rows.last().map(|r| r.iteration) != Some(l.iteration) {
            rows.push(l);
        }
    }
    Ok((res, rows))
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub summary: Summary,
    pub out_dir: PathBuf,
}

pub fn run_solve(cfg: &RunConfig, out: &Path) -> anyhow::Result<SolveOutcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let start = Instant::now();
    let grid = cfg.grid().map_err(invalid)?;
    let assembly = cfg.assembly().map_err(invalid)?;
    let options = SystemOptions {
        discretization: cfg.discretization(),
        ..Default::default()
    };
    let system = System::build(&assembly, &grid, options)?;
    let setup_seconds = start.elapsed().as_secs_f64();
    let config = solver_config(cfg, &system)?;
    let eps = cfg.strain();
    let (res, rows) = solve_logged(&system, &config, &eps, cfg.solver.report_interval, start)?;
    let solve_seconds = start.elapsed().as_secs_f64() - setup_seconds;

    if cfg.outputs.log {
        output::write_convergence_csv(&out.join("convergence.csv"), &rows)?;
    }
    if cfg.outputs.fields || cfg.outputs.vtk {
        let (strain, stress) = output::voxel_fields(&system, &res.u, &eps);
        if cfg.outputs.fields {
            let n_fe = system.layout.n_fe();
            output::write_field(out, "displacement", grid.n, 3, "node", "um", &res.u[..3 * n_fe])?;
            output::write_field(out, "strain", grid.n, 6, "voxel", "1 (Mandel)", &strain)?;
            output::write_field(out, "stress", grid.n, 6, "voxel", "MPa (Mandel)", &stress)?;
        }
        if cfg.outputs.vtk {
            output::write_vtk(&out.join("fields.vtk"), &system, &res.u, &strain, &stress)?;
        }
    }
    let summary = Summary {
        n: grid.n,
        discretization: format!("{:?}", cfg.discretization).to_lowercase(),
        scheme: config.scheme.name().into(),
        strain: cfg.loading,
        stress: res.stress.into(),
        bulk_modulus: bulk_of(&res.stress, &eps),
        iterations: res.iterations,
        converged: res.converged,
        residual: res.residual,
        verified_residual: res.verified_residual,
        setup_seconds,
        solve_seconds,
        stats: system.stats().into(),
    };
    output::write_json(&out.join("summary.json"), &summary)?;
    Ok(SolveOutcome {
        summary,
        out_dir: out.to_path_buf(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub h: f64,
    pub metric: f64,
    /// Relative error against the reference; absent for the finest run when it
    /// is itself the reference.
    pub error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub metric: String,
    pub reference: f64,
    pub reference_source: String,
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn run_sweep(cfg: &RunConfig, out: &Path) -> anyhow::Result<SweepReport> {
    let study = cfg
        .outputs
        .study
        .clone()
        .ok_or_else(|| invalid("sweep needs outputs.study.ns"))?;
    std::fs::create_dir_all(out)?;
    let assembly = cfg.assembly().map_err(invalid)?;
    let eps = cfg.strain();
    if study.metric == Metric::Bulk && eps[0] + eps[1] + eps[2] == 0.0 {
        return Err(invalid("the bulk metric needs a loading with non-zero trace"));
    }
    let options = SystemOptions {
        discretization: cfg.discretization(),
        ..Default::default()
    };
    let mut rows = Vec::with_capacity(study.ns.len());
    let mut histories = Vec::new();
    for &n in &study.ns {
        let start = Instant::now();
        let mut dims = cfg.grid.n.dims();
        let scale = n as f64 / dims[0] as f64;
        for d in dims.iter_mut().skip(1) {
            *d = ((*d as f64) * scale).round().max(1.0) as usize;
        }
        dims[0] = n;
        let grid = Grid::new(dims, cfg.grid.lengths).map_err(invalid)?;
        let system = System::build(&assembly, &grid, options)?;
        let config = solver_config(cfg, &system)?;
        let (res, log) = solve_logged(&system, &config, &eps, cfg.solver.report_interval, start)?;
        let metric = match study.metric {
            Metric::Bulk => bulk_from_stress(&res.stress, &eps),
            Metric::Energy => eps.dot(&res.stress),
        };
        if cfg.outputs.log {
            output::write_convergence_csv(&out.join(format!("convergence_{n}.csv")), &log)?;
        }
        histories.push(res.history);
        rows.push(SweepRow {
            n,
            h: grid.min_spacing(),
            metric,
            error: None,
            iterations: res.iterations,
            converged: res.converged,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    let mut warnings = Vec::new();
    let (reference, source, compared) = match study.reference {
        Some(r) => (r, "config".to_string(), rows.len()),
        None => (rows.last().unwrap().metric, format!("finest run N={}", rows.last().unwrap().n), rows.len() - 1),
    };
    for r in rows.iter_mut().take(compared) {
        r.error = Some(rel_error(r.metric, reference));
    }
    let h: Vec<f64> = rows[..compared].iter().map(|r| r.h).collect();
    let e: Vec<f64> = rows[..compared].iter().map(|r| r.error.unwrap()).collect();
    let slope = fit_slope(&h, &e);
    if slope.is_none() {
        warnings.push(format!("{compared} compared resolution(s); at least 3 are needed for a slope"));
    }
    if rows.iter().any(|r| !r.converged) {
        warnings.push("some resolutions did not converge".into());
    }
    let report = SweepReport {
        metric: format!("{:?}", study.metric).to_lowercase(),
        reference,
        reference_source: source,
        rows,
        slope,
        warnings,
    };
    let mut w = csv::Writer::from_path(out.join("study.csv"))?;
    w.write_record(["n", "h", "metric", "error", "iterations", "converged", "seconds", "slope"])?;
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            r.h.to_string(),
            r.metric.to_string(),
            r.error.map(|e| e.to_string()).unwrap_or_default(),
            r.iterations.to_string(),
            r.converged.to_string(),
            r.seconds.to_string(),
            report.slope.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct WithHistory<'a> {
        #[serde(flatten)]
        report: &'a SweepReport,
        histories: &'a [Vec<f64>],
    }
    output::write_json(
        &out.join("study.json"),
        &WithHistory {
            report: &report,
            histories: &histories,
        },
    )?;
    Ok(report)
}

pub fn run_symbol_dump(cfg: &RunConfig, out: &Path) -> anyhow::Result<output::FieldDescriptor> {
    std::fs::create_dir_all(out)?;
    let grid = cfg.grid().map_err(invalid)?;
    let green = green_operator(&grid)?;
    output::write_symbol(out, grid.n, green.green_symbol())
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub case: String,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl ValidationReport {
    fn new(case: &str, checks: Vec<Check>) -> Self {
        ValidationReport {
            case: case.into(),
            pass: checks.iter().all(|c| c.pass),
            checks,
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: {} = {:.6e} (limit {})",
                if c.pass { "PASS" } else { "FAIL" },
                self.case,
                c.name,
                c.value,
                c.limit
            )?;
        }
        Ok(())
    }
}

fn check_below(name: &str, value: f64, limit: f64) -> Check {
    Check {
        name: name.into(),
        value,
        limit: format!("< {limit:e}"),
        pass: value < limit,
    }
}

pub const BUILTINS: [&str; 3] = ["homogeneous", "laminate", "hashin"];

pub fn validate_builtin(name: &str) -> anyhow::Result<ValidationReport> {
    match name {
        "homogeneous" => validate_homogeneous(),
        "laminate" => validate_laminate(),
        "hashin" => validate_hashin(),
        other => Err(invalid(format!("unknown builtin `{other}` ({})", BUILTINS.join(", ")))),
    }
}

fn lcg(tol: f64, system: &System) -> SolverConfig {
    SolverConfig {
        scheme: Scheme::Lcg,
        tol,
        maxit: 1000,
        reference_stiffness: system.reference_stiffness(),
    }
}

fn validate_homogeneous() -> anyhow::Result<ValidationReport> {
    let m = MaterialIso::new(2.5, 0.3)?;
    let grid = Grid::new([4, 5, 6], [1.0, 1.25, 1.5])?;
    let asm = PhaseAssembly::homogeneous(grid.lengths, m)?;
    let system = System::build(&asm, &grid, SystemOptions::default())?;
    let eps = Strain6::new(0.3, -0.1, 0.2, 0.05, -0.07, 0.11);
    let mut green = green_operator(&grid)?;
    let res = solve(&system, &mut green, &eps, &lcg(1e-10, &system), None)?;
    let exact = iso_stiffness(&m)?.apply(&eps);
    let err = (res.stress - exact).norm() / exact.norm();
    Ok(ValidationReport::new(
        "homogeneous",
        vec![
            check_below("stress error", err, 1e-12),
            Check {
                name: "iterations".into(),
                value: res.iterations as f64,
                limit: "<= 1".into(),
                pass: res.iterations <= 1,
            },
        ],
    ))
}

fn validate_laminate() -> anyhow::Result<ValidationReport> {
    let (m1, m2) = (MaterialIso::new(1.0, 0.3)?, MaterialIso::new(10.0, 0.2)?);
    let grid = Grid::cubic(8, 1.0)?;
    let offset = 0.375;
    let asm = PhaseAssembly::new(
        [1.0; 3],
        vec![m1, m2],
        0,
        vec![Region {
            level_set: LevelSet::plane(Vector3::new(offset, 0.0, 0.0), Vector3::x())?,
            phase: 1,
        }],
    )?;
    let system = System::build(&asm, &grid, SystemOptions::default())?;
    let mut green = green_operator(&grid)?;
    let eff = effective_stiffness(&system, &mut green, &lcg(1e-12, &system))?;
    let exact = laminate_reference(&iso_stiffness(&m2)?, &iso_stiffness(&m1)?, 1.0 - offset, &Vector3::x())?;
    Ok(ValidationReport::new(
        "laminate",
        vec![
            check_below("stiffness error", rel_error_matrix(&eff.stiffness.0, &exact.0), 1e-8),
            check_below("asymmetry", eff.asymmetry, 1e-8),
        ],
    ))
}

fn validate_hashin() -> anyhow::Result<ValidationReport> {
    let setup = HashinSetup::standard();
    let grid = setup.grid(16)?;
    let system = System::build(&setup.assembly()?, &grid, SystemOptions::default())?;
    let mut green = green_operator(&grid)?;
    let eps = hydrostatic();
    let res = solve(&system, &mut green, &eps, &lcg(1e-7, &system), None)?;
    let k = bulk_from_stress(&res.stress, &eps);
    Ok(ValidationReport::new(
        "hashin",
        vec![
            check_below("bulk modulus error", rel_error(k, 1.0), 1e-3),
            Check {
                name: "iterations".into(),
                value: res.iterations as f64,
                limit: "in [24, 36]".into(),
                pass: (24..=36).contains(&res.iterations) && res.converged,
            },
        ],
    ))
}
