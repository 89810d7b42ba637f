//! Result files: convergence log, summary, raw field dumps with JSON
//! descriptors, legacy VTK, and the Green symbol dump.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use xfft_core::assembly::{System, SystemStats};
use xfft_core::greenop::Hermitian3;
use xfft_core::voigt::{Strain6, Stress6};

/// One row of the per-iteration log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub res: f64,
    pub res_rel: f64,
    pub wall_time: f64,
}

pub fn write_convergence_csv(path: &Path, rows: &[LogRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_convergence_csv(path: &Path) -> anyhow::Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub n_fe: usize,
    pub n_x: usize,
    pub cut_tets: usize,
    pub multi_tets: usize,
    pub mixed_voxels: usize,
    pub dropped_dofs: usize,
    pub cache_bytes: usize,
}

impl From<SystemStats> for StatsSummary {
    fn from(s: SystemStats) -> Self {
        StatsSummary {
            n_fe: s.n_fe,
            n_x: s.n_x,
            cut_tets: s.cut_tets,
            multi_tets: s.multi_tets,
            mixed_voxels: s.mixed_voxels,
            dropped_dofs: s.dropped_dofs,
            cache_bytes: s.cache_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: [usize; 3],
    pub discretization: String,
    pub scheme: String,
    pub strain: [f64; 6],
    pub stress: [f64; 6],
    /// `tr⟨σ⟩ / (3 tr ε̄)` when `tr ε̄ ≠ 0`.
    pub bulk_modulus: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub verified_residual: f64,
    pub setup_seconds: f64,
    pub solve_seconds: f64,
    pub stats: StatsSummary,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub dims: [usize; 3],
    pub components: usize,
    /// Either `node` (grid points) or `voxel` (cell averages).
    pub location: String,
    pub order: String,
    pub dtype: String,
    pub units: String,
    pub file: String,
}

const ORDER: &str = "x-fastest, location-major, component-minor";

/// Writes `data` as little-endian f64 next to a `<name>.json` descriptor.
pub fn write_field(
    dir: &Path,
    name: &str,
    dims: [usize; 3],
    components: usize,
    location: &str,
    units: &str,
    data: &[f64],
) -> anyhow::Result<FieldDescriptor> {
    if data.len() != dims.iter().product::<usize>() * components {
        bail!("field `{name}` has {} values, expected {}", data.len(), dims.iter().product::<usize>() * components);
    }
    let file = format!("{name}.bin");
    let mut w = BufWriter::new(File::create(dir.join(&file))?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    let desc = FieldDescriptor {
        name: name.into(),
        dims,
        components,
        location: location.into(),
        order: ORDER.into(),
        dtype: "f64le".into(),
        units: units.into(),
        file,
    };
    write_json(&dir.join(format!("{name}.json")), &desc)?;
    Ok(desc)
}

/// Reads a field written by [`write_field`] through its descriptor.
pub fn read_field(descriptor: &Path) -> anyhow::Result<(FieldDescriptor, Vec<f64>)> {
    let desc: FieldDescriptor = serde_json::from_reader(File::open(descriptor)?)?;
    let dir = descriptor.parent().unwrap_or(Path::new("."));
    let mut bytes = Vec::new();
    File::open(dir.join(&desc.file))?.read_to_end(&mut bytes)?;
    let expected = desc.dims.iter().product::<usize>() * desc.components;
    if bytes.len() != 8 * expected {
        bail!("{} holds {} bytes, expected {}", desc.file, bytes.len(), 8 * expected);
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((desc, data))
}

/// Voxel averages of strain and stress over the quadrature points.
pub fn voxel_fields(system: &System, u: &[f64], eps: &Strain6) -> (Vec<f64>, Vec<f64>) {
    let nv = system.grid().voxel_count();
    let mut strain = vec![0.0; 6 * nv];
    let mut stress = vec![0.0; 6 * nv];
    let mut weight = vec![0.0; nv];
    let c = system.phase_stiffness();
    system.for_each_sample(u, eps, |s| {
        let sig: Stress6 = c[s.phase].apply(&s.strain);
        for k in 0..6 {
            strain[6 * s.voxel + k] += s.weight * s.strain[k];
            stress[6 * s.voxel + k] += s.weight * sig[k];
        }
        weight[s.voxel] += s.weight;
    });
    for v in 0..nv {
        for k in 0..6 {
            strain[6 * v + k] /= weight[v];
            stress[6 * v + k] /= weight[v];
        }
    }
    (strain, stress)
}

/// Legacy VTK structured points: nodal displacement (periodically closed) and
/// voxel strain and stress in Mandel order.
pub fn write_vtk(path: &Path, system: &System, u: &[f64], strain: &[f64], stress: &[f64]) -> anyhow::Result<()> {
    let grid = system.grid();
    let [n0, n1, n2] = grid.n;
    let h = grid.spacing();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "xfft fields (units um, MPa; Mandel order 11 22 33 23 13 12)")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", n0 + 1, n1 + 1, n2 + 1)?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {} {} {}", h[0], h[1], h[2])?;
    writeln!(w, "POINT_DATA {}", (n0 + 1) * (n1 + 1) * (n2 + 1))?;
    writeln!(w, "VECTORS displacement double")?;
    for k in 0..=n2 {
        for j in 0..=n1 {
            for i in 0..=n0 {
                let node = grid.node_index(i % n0, j % n1, k % n2);
                writeln!(w, "{:e} {:e} {:e}", u[3 * node], u[3 * node + 1], u[3 * node + 2])?;
            }
        }
    }
    writeln!(w, "CELL_DATA {}", n0 * n1 * n2)?;
    for (name, data) in [("strain", strain), ("stress", stress)] {
        writeln!(w, "FIELD {name} 1")?;
        writeln!(w, "{name} 6 {} double", n0 * n1 * n2)?;
        for v in data.chunks(6) {
            writeln!(w, "{:e} {:e} {:e} {:e} {:e} {:e}", v[0], v[1], v[2], v[3], v[4], v[5])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Green symbol on the half spectrum: 12 doubles per frequency, the real and
/// imaginary parts of the upper triangle `(00, 01, 02, 11, 12, 22)`.
pub fn write_symbol(dir: &Path, n: [usize; 3], green: &[Hermitian3]) -> anyhow::Result<FieldDescriptor> {
    let nh = n[0] / 2 + 1;
    let mut data = Vec::with_capacity(12 * green.len());
    for g in green {
        for z in g {
            data.push(z.re);
            data.push(z.im);
        }
    }
    let mut desc = write_field(dir, "green_symbol", [nh, n[1], n[2]], 12, "frequency", "1/(MPa um)", &data)?;
    desc.order = "kx-fastest half spectrum; per frequency re/im of entries 00 01 02 11 12 22".into();
    write_json(&dir.join("green_symbol.json"), &desc)?;
    Ok(desc)
}
