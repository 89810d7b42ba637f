//! The discretized cell problem: cached element matrices and the matrix-free
//! residual.
//!
//! Voxels whose six tets are uncut and share a phase use a per-phase 24×24
//! voxel matrix. Mixed voxels store one slot per tet: a reference P1 matrix
//! of the tet's phase, a cached enriched 24×24 matrix (packed symmetric), or a
//! cached P1 matrix with sampled stiffness for tets crossed by several
//! interfaces.
//!
//! The residual sweeps z-slabs of voxels. Slab `k` writes the nodes of plane
//! `k` in place and those of plane `k+1` into a side buffer that is added
//! afterwards, so the summation order is the same for any number of threads.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix6, SMatrix, SVector, Vector3};

use crate::element::{
    assemble_enriched, assemble_plain, assemble_plain_sampled, barycentric, enriched_b, p1_grads,
    plain_b, tet_quadrature, EnrichedCache, PlainCache,
};
use crate::geometry::{sample_nodal, NodalLevelSet, PhaseAssembly};
use crate::mesh::{corner_offset, detect_enrichment, DofLayout, Grid};
use crate::solver::Problem;
use crate::voigt::{iso_stiffness, stiffness_bounds, Stiffness66, Strain6, Stress6};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discretization {
    /// Enriched tets along the interfaces.
    Xfem,
    /// Plain P1 tets with the phase of each voxel taken at its center.
    P1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMode {
    /// One factor per enriched dof (node and component).
    PerDof,
    /// One factor per enriched node from the mean over its components.
    PerNode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemOptions {
    pub discretization: Discretization,
    pub scaling: ScalingMode,
}

impl Default for SystemOptions {
    fn default() -> Self {
        SystemOptions {
            discretization: Discretization::Xfem,
            scaling: ScalingMode::PerDof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TetSlot {
    Plain(u16),
    Cut(u32),
    Fallback(u32),
}

const MIXED: u32 = 1 << 31;
const PACKED: usize = 24 * 25 / 2;

#[derive(Debug, Clone)]
struct CutEntry {
    /// Upper triangle of the scaled 24×24 matrix, row by row.
    a: [f64; PACKED],
    s: SMatrix<f64, 6, 24>,
    interface: u16,
    positive_phase: u16,
    negative_phase: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SystemStats {
    pub n_fe: usize,
    pub n_x: usize,
    pub cut_tets: usize,
    /// Tets crossed by more than one interface, assembled without enrichment.
    pub multi_tets: usize,
    pub mixed_voxels: usize,
    /// Enriched dofs whose stiffness vanished; they are decoupled.
    pub dropped_dofs: usize,
    pub cache_bytes: usize,
}

/// One quadrature point of the discretization with the local strain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub voxel: usize,
    pub position: Vector3<f64>,
    pub weight: f64,
    pub phase: usize,
    pub strain: Strain6,
}

/// One element as seen by the assembly.
#[derive(Debug, Clone)]
pub enum ElementView {
    /// Uncut tet of a single phase.
    Plain(Stiffness66),
    /// Tet crossed by several interfaces, stiffness sampled per quadrature
    /// point.
    Sampled(PlainCache),
    /// Cut tet with scaled enriched columns.
    Cut(EnrichedCache),
}

pub struct System {
    pub layout: DofLayout,
    pub options: SystemOptions,
    assembly: PhaseAssembly,
    nodal: NodalLevelSet,
    stiffness: Vec<Stiffness66>,
    bounds: (f64, f64),
    voxel_kind: Vec<u32>,
    mixed: Vec<[TetSlot; 6]>,
    voxel_a: Vec<SMatrix<f64, 24, 24>>,
    voxel_s: Vec<SMatrix<f64, 6, 24>>,
    tet_ref: Vec<[PlainCache; 6]>,
    ref_grads: [[Vector3<f64>; 4]; 6],
    cut: Vec<CutEntry>,
    fallback: Vec<PlainCache>,
    scale: Vec<f64>,
    c_total: Matrix6<f64>,
    stats: SystemStats,
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

fn pack(a: &SMatrix<f64, 24, 24>) -> [f64; PACKED] {
    let mut p = [0.0; PACKED];
    let mut idx = 0;
    for i in 0..24 {
        for j in i..24 {
            p[idx] = 0.5 * (a[(i, j)] + a[(j, i)]);
            idx += 1;
        }
    }
    p
}

#[inline]
fn packed_matvec(p: &[f64; PACKED], x: &[f64; 24], y: &mut [f64; 24]) {
    let mut idx = 0;
    for i in 0..24 {
        let xi = x[i];
        let mut acc = p[idx] * xi;
        idx += 1;
        for j in i + 1..24 {
            let a = p[idx];
            acc += a * x[j];
            y[j] += a * xi;
            idx += 1;
        }
        y[i] += acc;
    }
}

impl System {
    pub fn build(assembly: &PhaseAssembly, grid: &Grid, options: SystemOptions) -> Result<Self> {
        for a in 0..3 {
            if (assembly.cell[a] - grid.lengths[a]).abs() > 1e-12 * grid.lengths[a] {
                return Err(Error::InvalidGeometry(alloc::format!(
                    "cell {:?} does not match grid lengths {:?}",
                    assembly.cell, grid.lengths
                )));
            }
        }
        let stiffness = assembly
            .materials
            .iter()
            .map(iso_stiffness)
            .collect::<Result<Vec<_>>>()?;
        let bounds = stiffness_bounds(&stiffness)?;
        let (nodal, layout) = match options.discretization {
            Discretization::Xfem => {
                let nodal = sample_nodal(assembly, grid);
                let layout = detect_enrichment(&nodal, &crate::mesh::build_topology(), grid);
                (nodal, layout)
            }
            Discretization::P1 => (NodalLevelSet::from_values(Vec::new()), DofLayout::plain(*grid)),
        };
        let topo = layout.topology;
        let h = grid.spacing();
        let origin = Vector3::zeros();
        let mut ref_grads = [[Vector3::zeros(); 4]; 6];
        for (t, g) in ref_grads.iter_mut().enumerate() {
            *g = p1_grads(&topo.vertices(t, &origin, &h))?;
        }
        let mut tet_ref = Vec::with_capacity(stiffness.len());
        let mut voxel_a = Vec::with_capacity(stiffness.len());
        let mut voxel_s = Vec::with_capacity(stiffness.len());
        for c in &stiffness {
            let tets: [PlainCache; 6] = {
                let mut v = Vec::with_capacity(6);
                for t in 0..6 {
                    v.push(assemble_plain(&topo.vertices(t, &origin, &h), c)?);
                }
                v.try_into().unwrap()
            };
            let mut a = SMatrix::<f64, 24, 24>::zeros();
            let mut s = SMatrix::<f64, 6, 24>::zeros();
            for (t, cache) in tets.iter().enumerate() {
                let corners = topo.tets[t];
                for p in 0..4 {
                    for q in 0..4 {
                        let mut blk = a.fixed_view_mut::<3, 3>(3 * corners[p], 3 * corners[q]);
                        blk += cache.a.fixed_view::<3, 3>(3 * p, 3 * q);
                    }
                    let mut blk = s.fixed_view_mut::<6, 3>(0, 3 * corners[p]);
                    blk += cache.s.fixed_view::<6, 3>(0, 3 * p);
                }
            }
            tet_ref.push(tets);
            voxel_a.push(a);
            voxel_s.push(s);
        }

        let mut sys = System {
            layout,
            options,
            assembly: assembly.clone(),
            nodal,
            stiffness,
            bounds,
            voxel_kind: Vec::new(),
            mixed: Vec::new(),
            voxel_a,
            voxel_s,
            tet_ref,
            ref_grads,
            cut: Vec::new(),
            fallback: Vec::new(),
            scale: Vec::new(),
            c_total: Matrix6::zeros(),
            stats: SystemStats::default(),
        };
        sys.classify_voxels()?;
        Ok(sys)
    }

    fn voxel_origin(&self, voxel: usize) -> Vector3<f64> {
        self.layout.grid.node_position(voxel)
    }

    /// Phase of a tet no interface cuts. Nodes on an interface defer to the
    /// other nodes; a tet with all nodes on the interface uses its centroid.
    fn uncut_phase(&self, nodes: &[usize; 4], centroid: &Vector3<f64>, cut: Option<(usize, bool)>) -> usize {
        let nodal = &self.nodal;
        self.assembly.phase_from_inside(|k| {
            if let Some((kc, side)) = cut {
                if k == kc {
                    return side;
                }
            }
            let v = nodal.values(k);
            if nodes.iter().any(|&n| v[n] < 0.0) {
                false
            } else if nodes.iter().any(|&n| nodal.is_inside(v[n])) {
                true
            } else {
                self.assembly.regions[k].level_set.eval(centroid, &self.assembly.cell) > 0.0
            }
        })
    }

    fn classify_voxels(&mut self) -> Result<()> {
        let grid = self.layout.grid;
        let topo = self.layout.topology;
        let h = grid.spacing();
        let nv = grid.voxel_count();
        let tet_volume = grid.voxel_volume() / 6.0;
        let mut kind = vec![0u32; nv];
        let mut mixed = Vec::new();
        let mut cut_jobs = Vec::new();
        let mut fallback_jobs = Vec::new();
        let mut c_total = Matrix6::zeros();
        let mut phase_volume = vec![0.0; self.stiffness.len()];

        if self.options.discretization == Discretization::P1 {
            for (v, slot) in kind.iter_mut().enumerate() {
                let center = self.voxel_origin(v) + Vector3::new(0.5 * h[0], 0.5 * h[1], 0.5 * h[2]);
                let p = self.assembly.phase_at(&center);
                *slot = p as u32;
                phase_volume[p] += grid.voxel_volume();
            }
        } else {
            let mut ci = 0;
            let mut mi = 0;
            let cuts = &self.layout.cut_tets;
            let multis = &self.layout.multi_tets;
            for (v, slot_kind) in kind.iter_mut().enumerate() {
                let origin = self.voxel_origin(v);
                let mut slots = [TetSlot::Plain(0); 6];
                for (t, slot) in slots.iter_mut().enumerate() {
                    if ci < cuts.len() && cuts[ci].voxel as usize == v && cuts[ci].local as usize == t {
                        *slot = TetSlot::Cut(cut_jobs.len() as u32);
                        cut_jobs.push(ci);
                        ci += 1;
                    } else if mi < multis.len() && multis[mi] == (v as u32, t as u8) {
                        *slot = TetSlot::Fallback(fallback_jobs.len() as u32);
                        fallback_jobs.push((v, t));
                        mi += 1;
                    } else {
                        let nodes = self.layout.tet_nodes(v, t);
                        let x = topo.vertices(t, &origin, &h);
                        let centroid = (x[0] + x[1] + x[2] + x[3]) / 4.0;
                        *slot = TetSlot::Plain(self.uncut_phase(&nodes, &centroid, None) as u16);
                    }
                }
                let homogeneous = match slots[0] {
                    TetSlot::Plain(p) => slots.iter().all(|s| *s == TetSlot::Plain(p)).then_some(p),
                    _ => None,
                };
                if let Some(p) = homogeneous {
                    *slot_kind = p as u32;
                    phase_volume[p as usize] += grid.voxel_volume();
                } else {
                    *slot_kind = MIXED | mixed.len() as u32;
                    for s in &slots {
                        if let TetSlot::Plain(p) = s {
                            phase_volume[*p as usize] += tet_volume;
                        }
                    }
                    mixed.push(slots);
                }
            }
        }
        for (p, vol) in phase_volume.iter().enumerate() {
            c_total += self.stiffness[p].matrix() * *vol;
        }

        // Cut tets: unscaled matrices and the enriched diagonal.
        let sys = &*self;
        let built: Vec<Result<(EnrichedCache, [f64; 12], u16, u16, u16)>> = par_map(&cut_jobs, |&ci| {
            let ct = sys.layout.cut_tets[ci];
            let (v, t, k) = (ct.voxel as usize, ct.local as usize, ct.interface as usize);
            let nodes = sys.layout.tet_nodes(v, t);
            let x = topo.vertices(t, &sys.voxel_origin(v), &h);
            let centroid = (x[0] + x[1] + x[2] + x[3]) / 4.0;
            let lv = sys.nodal.values(k);
            let l: [f64; 4] = core::array::from_fn(|a| lv[nodes[a]]);
            let pp = sys.uncut_phase(&nodes, &centroid, Some((k, true)));
            let pn = sys.uncut_phase(&nodes, &centroid, Some((k, false)));
            let (cache, diag) = assemble_enriched(&x, &l, |pos| sys.stiffness[if pos { pp } else { pn }])?;
            Ok((cache, diag, k as u16, pp as u16, pn as u16))
        });
        let built = built.into_iter().collect::<Result<Vec<_>>>()?;
        let fallback = par_map(&fallback_jobs, |&(v, t)| {
            let x = topo.vertices(t, &sys.voxel_origin(v), &h);
            assemble_plain_sampled(&x, |p| sys.stiffness[sys.assembly.phase_at(&grid.wrap(p))])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let nx = self.layout.n_x();
        let mut d0 = vec![0.0; 3 * nx];
        let enriched_of = |ci: usize| -> [usize; 4] {
            let ct = self.layout.cut_tets[ci];
            let nodes = self.layout.tet_nodes(ct.voxel as usize, ct.local as usize);
            nodes.map(|n| self.layout.enriched_index(n).expect("cut tet node is enriched"))
        };
        for (job, (_, diag, ..)) in cut_jobs.iter().zip(&built) {
            let e = enriched_of(*job);
            for a in 0..4 {
                for c in 0..3 {
                    d0[3 * e[a] + c] += diag[3 * a + c];
                }
            }
        }
        let mut scale = vec![0.0; 3 * nx];
        let mut dropped = 0;
        for e in 0..nx {
            let mean = (d0[3 * e] + d0[3 * e + 1] + d0[3 * e + 2]) / 3.0;
            for c in 0..3 {
                let d = match self.options.scaling {
                    ScalingMode::PerDof => d0[3 * e + c],
                    ScalingMode::PerNode => mean,
                };
                if d > 1e-300 {
                    scale[3 * e + c] = 1.0 / libm::sqrt(d);
                } else {
                    dropped += 1;
                }
            }
        }
        let cut: Vec<CutEntry> = cut_jobs
            .iter()
            .zip(built)
            .map(|(&ci, (mut cache, _, k, pp, pn))| {
                let e = enriched_of(ci);
                let mut t = [1.0; 24];
                for a in 0..4 {
                    for c in 0..3 {
                        t[12 + 3 * a + c] = scale[3 * e[a] + c];
                    }
                }
                cache.scale_dofs(&t);
                c_total += cache.c_volume;
                CutEntry {
                    a: pack(&cache.a),
                    s: cache.s,
                    interface: k,
                    positive_phase: pp,
                    negative_phase: pn,
                }
            })
            .collect();
        for f in &fallback {
            c_total += f.c_volume;
        }

        self.stats = SystemStats {
            n_fe: self.layout.n_fe(),
            n_x: nx,
            cut_tets: cut.len(),
            multi_tets: fallback.len(),
            mixed_voxels: mixed.len(),
            dropped_dofs: dropped,
            cache_bytes: cut.len() * core::mem::size_of::<CutEntry>()
                + fallback.len() * core::mem::size_of::<PlainCache>()
                + mixed.len() * core::mem::size_of::<[TetSlot; 6]>()
                + kind.len() * 4,
        };
        self.voxel_kind = kind;
        self.mixed = mixed;
        self.cut = cut;
        self.fallback = fallback;
        self.scale = scale;
        self.c_total = c_total;
        Ok(())
    }

    /// Nodal level-set values of interface `k` after snapping.
    pub fn nodal_values(&self, k: usize) -> &[f64] {
        self.nodal.values(k)
    }

    /// Rebuilds tet `local` of `voxel` from the geometry, bypassing the
    /// cached matrices.
    pub fn element(&self, voxel: usize, local: usize) -> Result<ElementView> {
        let grid = self.layout.grid;
        let h = grid.spacing();
        let origin = self.voxel_origin(voxel);
        if self.options.discretization == Discretization::P1 {
            let center = origin + Vector3::new(0.5 * h[0], 0.5 * h[1], 0.5 * h[2]);
            return Ok(ElementView::Plain(self.stiffness[self.assembly.phase_at(&center)]));
        }
        let x = self.layout.topology.vertices(local, &origin, &h);
        let nodes = self.layout.tet_nodes(voxel, local);
        let centroid = (x[0] + x[1] + x[2] + x[3]) / 4.0;
        let key = (voxel as u32, local as u8);
        if let Ok(i) = self.layout.cut_tets.binary_search_by_key(&key, |c| (c.voxel, c.local)) {
            let k = self.layout.cut_tets[i].interface as usize;
            let lv = self.nodal.values(k);
            let l: [f64; 4] = core::array::from_fn(|a| lv[nodes[a]]);
            let pp = self.uncut_phase(&nodes, &centroid, Some((k, true)));
            let pn = self.uncut_phase(&nodes, &centroid, Some((k, false)));
            let (mut cache, _) = assemble_enriched(&x, &l, |pos| self.stiffness[if pos { pp } else { pn }])?;
            let mut t = [1.0; 24];
            t[12..].copy_from_slice(&self.tet_scale(&nodes));
            cache.scale_dofs(&t);
            return Ok(ElementView::Cut(cache));
        }
        if self.layout.multi_tets.binary_search(&key).is_ok() {
            let cache = assemble_plain_sampled(&x, |p| self.stiffness[self.assembly.phase_at(&grid.wrap(p))])?;
            return Ok(ElementView::Sampled(cache));
        }
        Ok(ElementView::Plain(self.stiffness[self.uncut_phase(&nodes, &centroid, None)]))
    }

    pub fn grid(&self) -> &Grid {
        &self.layout.grid
    }

    pub fn stats(&self) -> SystemStats {
        self.stats
    }

    pub fn phase_stiffness(&self) -> &[Stiffness66] {
        &self.stiffness
    }

    pub fn phase_assembly(&self) -> &PhaseAssembly {
        &self.assembly
    }

    /// Extreme eigenvalues over all phase stiffnesses.
    pub fn stiffness_bounds(&self) -> (f64, f64) {
        self.bounds
    }

    /// `s₀ = (λ⁻ + λ⁺)/2`.
    pub fn reference_stiffness(&self) -> f64 {
        0.5 * (self.bounds.0 + self.bounds.1)
    }

    /// Scaling factors of the enriched dofs; zero marks a dropped dof.
    pub fn enrichment_scaling(&self) -> &[f64] {
        &self.scale
    }

    /// `Σ_e ∫ C`, the volume-integrated stiffness.
    pub fn integrated_stiffness(&self) -> &Matrix6<f64> {
        &self.c_total
    }

    /// Element-by-element accumulation of `out = A u + Σ ΛᵀSᵀε̄`, returning
    /// `Σ S u_e`. Either input may be absent.
    fn accumulate(&self, u: Option<&[f64]>, eps: Option<&Strain6>, out: &mut [f64]) -> Stress6 {
        let grid = self.layout.grid;
        let plane = grid.plane_size();
        let n2 = grid.n[2];
        let nfe3 = 3 * grid.node_count();
        let (fe, xs) = out.split_at_mut(nfe3);
        let mut jobs: Vec<(usize, &mut [f64], &mut [f64])> = Vec::with_capacity(n2);
        let mut rest = xs;
        for (k, fe_plane) in fe.chunks_mut(3 * plane).enumerate() {
            let (s, e) = self.layout.plane_range(k);
            let (xp, r) = rest.split_at_mut(3 * (e - s));
            rest = r;
            jobs.push((k, fe_plane, xp));
        }
        let run = |(k, fe_plane, x_plane): &mut (usize, &mut [f64], &mut [f64])| {
            let (s1, e1) = self.layout.plane_range((*k + 1) % n2);
            let mut up_fe = vec![0.0; 3 * plane];
            let mut up_x = vec![0.0; 3 * (e1 - s1)];
            fe_plane.fill(0.0);
            x_plane.fill(0.0);
            let stress = self.slab(*k, u, eps, fe_plane, x_plane, &mut up_fe, &mut up_x);
            (stress, up_fe, up_x)
        };
        #[cfg(feature = "parallel")]
        let partial: Vec<(Stress6, Vec<f64>, Vec<f64>)> = {
            use rayon::prelude::*;
            jobs.par_iter_mut().map(run).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let partial: Vec<(Stress6, Vec<f64>, Vec<f64>)> = jobs.iter_mut().map(run).collect();
        let mut stress = Stress6::zeros();
        for (k, (s, up_fe, up_x)) in partial.iter().enumerate() {
            stress += s;
            let target = &mut jobs[(k + 1) % n2];
            target.1.iter_mut().zip(up_fe).for_each(|(o, v)| *o += v);
            target.2.iter_mut().zip(up_x).for_each(|(o, v)| *o += v);
        }
        stress
    }

    #[allow(clippy::too_many_arguments)]
    fn slab(
        &self,
        k: usize,
        u: Option<&[f64]>,
        eps: Option<&Strain6>,
        fe: &mut [f64],
        xs: &mut [f64],
        up_fe: &mut [f64],
        up_x: &mut [f64],
    ) -> Stress6 {
        let grid = &self.layout.grid;
        let [n0, n1, n2] = grid.n;
        let nfe3 = 3 * grid.node_count();
        let x0 = self.layout.plane_range(k).0;
        let x1 = self.layout.plane_range((k + 1) % n2).0;
        let topo = &self.layout.topology;
        let mut stress = Stress6::zeros();
        for j in 0..n1 {
            for i in 0..n0 {
                let v = grid.node_index(i, j, k);
                // Plane-local index and upper flag of each corner.
                let mut local = [0usize; 8];
                let mut node = [0usize; 8];
                for c in 0..8 {
                    let o = corner_offset(c);
                    let ii = (i + o[0]) % n0;
                    let jj = (j + o[1]) % n1;
                    local[c] = ii + n0 * jj;
                    node[c] = grid.node_index(ii, jj, (k + o[2]) % n2);
                }
                let kind = self.voxel_kind[v];
                if kind & MIXED == 0 {
                    let p = kind as usize;
                    let mut y = SVector::<f64, 24>::zeros();
                    if let Some(u) = u {
                        let ue = SVector::<f64, 24>::from_fn(|r, _| u[3 * node[r / 3] + r % 3]);
                        y += self.voxel_a[p] * ue;
                        stress += self.voxel_s[p] * ue;
                    }
                    if let Some(e) = eps {
                        y += self.voxel_s[p].tr_mul(e);
                    }
                    for c in 0..8 {
                        let dst = if c < 4 { &mut *fe } else { &mut *up_fe };
                        for d in 0..3 {
                            dst[3 * local[c] + d] += y[3 * c + d];
                        }
                    }
                    continue;
                }
                let slots = &self.mixed[(kind & !MIXED) as usize];
                for (t, slot) in slots.iter().enumerate() {
                    let corners = topo.tets[t];
                    match *slot {
                        TetSlot::Plain(_) | TetSlot::Fallback(_) => {
                            let cache = match *slot {
                                TetSlot::Plain(p) => &self.tet_ref[p as usize][t],
                                TetSlot::Fallback(f) => &self.fallback[f as usize],
                                TetSlot::Cut(_) => unreachable!(),
                            };
                            let mut y = SVector::<f64, 12>::zeros();
                            if let Some(u) = u {
                                let ue = SVector::<f64, 12>::from_fn(|r, _| u[3 * node[corners[r / 3]] + r % 3]);
                                y += cache.a * ue;
                                stress += cache.s * ue;
                            }
                            if let Some(e) = eps {
                                y += cache.s.tr_mul(e);
                            }
                            for a in 0..4 {
                                let c = corners[a];
                                let dst = if c < 4 { &mut *fe } else { &mut *up_fe };
                                for d in 0..3 {
                                    dst[3 * local[c] + d] += y[3 * a + d];
                                }
                            }
                        }
                        TetSlot::Cut(ci) => {
                            let entry = &self.cut[ci as usize];
                            let en: [usize; 4] = core::array::from_fn(|a| {
                                self.layout.enriched_index(node[corners[a]]).expect("enriched")
                            });
                            let mut y = [0.0; 24];
                            if let Some(u) = u {
                                let mut ue = [0.0; 24];
                                for a in 0..4 {
                                    for d in 0..3 {
                                        ue[3 * a + d] = u[3 * node[corners[a]] + d];
                                        ue[12 + 3 * a + d] = u[nfe3 + 3 * en[a] + d];
                                    }
                                }
                                packed_matvec(&entry.a, &ue, &mut y);
                                stress += entry.s * SVector::<f64, 24>::from_column_slice(&ue);
                            }
                            if let Some(e) = eps {
                                let l = entry.s.tr_mul(e);
                                for r in 0..24 {
                                    y[r] += l[r];
                                }
                            }
                            for a in 0..4 {
                                let c = corners[a];
                                let upper = c >= 4;
                                for d in 0..3 {
                                    if upper {
                                        up_fe[3 * local[c] + d] += y[3 * a + d];
                                        up_x[3 * (en[a] - x1) + d] += y[12 + 3 * a + d];
                                    } else {
                                        fe[3 * local[c] + d] += y[3 * a + d];
                                        xs[3 * (en[a] - x0) + d] += y[12 + 3 * a + d];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        stress
    }

    /// `⟨σ⟩ = (∫C ε̄ + Σ S u_e) / |Y|`.
    pub fn average_stress(&self, u: &[f64], eps: &Strain6) -> Stress6 {
        let mut scratch = vec![0.0; u.len()];
        let s = self.accumulate(Some(u), None, &mut scratch);
        (self.c_total * eps + s) / self.layout.grid.volume()
    }

    /// Full residual `r(u) = A u + Σ ΛᵀSᵀε̄`.
    pub fn residual(&self, u: &[f64], eps: &Strain6, out: &mut [f64]) -> Stress6 {
        self.accumulate(Some(u), Some(eps), out) + self.c_total * eps
    }

    fn tet_u(&self, u: &[f64], nodes: &[usize; 4], enriched: bool) -> SVector<f64, 24> {
        let nfe3 = 3 * self.layout.n_fe();
        SVector::from_fn(|r, _| {
            let a = (r % 12) / 3;
            let d = r % 3;
            if r < 12 {
                u[3 * nodes[a] + d]
            } else if enriched {
                let e = self.layout.enriched_index(nodes[a]).expect("enriched");
                u[nfe3 + 3 * e + d]
            } else {
                0.0
            }
        })
    }

    fn tet_scale(&self, nodes: &[usize; 4]) -> [f64; 12] {
        let mut t = [0.0; 12];
        for a in 0..4 {
            if let Some(e) = self.layout.enriched_index(nodes[a]) {
                for d in 0..3 {
                    t[3 * a + d] = self.scale[3 * e + d];
                }
            }
        }
        t
    }

    /// Visits every quadrature point with the local strain `ε̄ + B u`.
    pub fn for_each_sample(&self, u: &[f64], eps: &Strain6, mut f: impl FnMut(&Sample)) {
        let grid = self.layout.grid;
        let topo = &self.layout.topology;
        let h = grid.spacing();
        let plain_b_ref: [SMatrix<f64, 6, 12>; 6] = core::array::from_fn(|t| plain_b(&self.ref_grads[t]));
        for v in 0..grid.voxel_count() {
            let origin = self.voxel_origin(v);
            let kind = self.voxel_kind[v];
            for t in 0..6 {
                let slot = if kind & MIXED == 0 {
                    TetSlot::Plain(kind as u16)
                } else {
                    self.mixed[(kind & !MIXED) as usize][t]
                };
                let nodes = self.layout.tet_nodes(v, t);
                let x = topo.vertices(t, &origin, &h);
                match slot {
                    TetSlot::Plain(_) | TetSlot::Fallback(_) => {
                        let ue = self.tet_u(u, &nodes, false);
                        let strain = eps + plain_b_ref[t] * ue.fixed_rows::<12>(0);
                        for q in crate::element::shunn_ham_4(&x) {
                            let phase = match slot {
                                TetSlot::Plain(p) => p as usize,
                                _ => self.assembly.phase_at(&grid.wrap(&q.position)),
                            };
                            f(&Sample {
                                voxel: v,
                                position: q.position,
                                weight: q.weight,
                                phase,
                                strain,
                            });
                        }
                    }
                    TetSlot::Cut(ci) => {
                        let entry = &self.cut[ci as usize];
                        let lv = self.nodal.values(entry.interface as usize);
                        let l: [f64; 4] = core::array::from_fn(|a| lv[nodes[a]]);
                        let ue = self.tet_u(u, &nodes, true);
                        let scale = self.tet_scale(&nodes);
                        for (q, positive) in tet_quadrature(&x, Some(&l)) {
                            let n = barycentric(&x, &q.position);
                            let b = enriched_b(&self.ref_grads[t], &l, &n, positive, &scale);
                            f(&Sample {
                                voxel: v,
                                position: q.position,
                                weight: q.weight,
                                phase: if positive { entry.positive_phase } else { entry.negative_phase } as usize,
                                strain: eps + b * ue,
                            });
                        }
                    }
                }
            }
        }
    }

    /// Strain `ε̄ + B u` at a point of the cell.
    pub fn strain_at(&self, u: &[f64], eps: &Strain6, x: &Vector3<f64>) -> Strain6 {
        let grid = self.layout.grid;
        let h = grid.spacing();
        let p = grid.wrap(x);
        let mut ijk = [0usize; 3];
        let mut xi = [0.0; 3];
        for a in 0..3 {
            let s = p[a] / h[a];
            let cell = (libm::floor(s) as usize).min(grid.n[a] - 1);
            ijk[a] = cell;
            xi[a] = (s - cell as f64).clamp(0.0, 1.0);
        }
        let v = grid.node_index(ijk[0], ijk[1], ijk[2]);
        let t = self.layout.topology.locate(&xi);
        let nodes = self.layout.tet_nodes(v, t);
        let kind = self.voxel_kind[v];
        let slot = if kind & MIXED == 0 {
            TetSlot::Plain(kind as u16)
        } else {
            self.mixed[(kind & !MIXED) as usize][t]
        };
        match slot {
            TetSlot::Cut(ci) => {
                let entry = &self.cut[ci as usize];
                let lv = self.nodal.values(entry.interface as usize);
                let l: [f64; 4] = core::array::from_fn(|a| lv[nodes[a]]);
                let origin = self.voxel_origin(v);
                let xt = self.layout.topology.vertices(t, &origin, &h);
                let local = origin + Vector3::new(xi[0] * h[0], xi[1] * h[1], xi[2] * h[2]);
                let n = barycentric(&xt, &local);
                let lh: f64 = (0..4).map(|a| n[a] * l[a]).sum();
                let b = enriched_b(&self.ref_grads[t], &l, &n, lh > 0.0, &self.tet_scale(&nodes));
                eps + b * self.tet_u(u, &nodes, true)
            }
            _ => {
                let ue = self.tet_u(u, &nodes, false);
                eps + plain_b(&self.ref_grads[t]) * ue.fixed_rows::<12>(0)
            }
        }
    }
}

impl Problem for System {
    fn dofs(&self) -> usize {
        self.layout.total_dofs()
    }

    fn volume(&self) -> f64 {
        self.layout.grid.volume()
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) -> Stress6 {
        self.accumulate(Some(u), None, out)
    }

    fn load(&self, eps: &Strain6, out: &mut [f64]) -> Stress6 {
        self.accumulate(None, Some(eps), out);
        self.c_total * eps
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{LevelSet, Region};
    use crate::voigt::MaterialIso;
    use nalgebra::{DMatrix, DVector};
    use rand::{rngs::StdRng, Rng, SeedableRng};

    pub(crate) fn two_phase_sphere(n: usize) -> (PhaseAssembly, Grid) {
        let grid = Grid::cubic(n, 1.0).unwrap();
        let a = PhaseAssembly::new(
            [1.0; 3],
            vec![MaterialIso::new(1.0, 0.3).unwrap(), MaterialIso::new(10.0, 0.2).unwrap()],
            0,
            vec![Region {
                level_set: LevelSet::sphere(Vector3::new(0.5, 0.45, 0.52), 0.3).unwrap(),
                phase: 1,
            }],
        )
        .unwrap();
        (a, grid)
    }

    /// Dense A and load matrix assembled straight from the element routines
    /// with global scatter, the oracle for the slab sweep.
    fn dense(sys: &System) -> (DMatrix<f64>, DMatrix<f64>) {
        crate::properties::dense_operator(sys).unwrap()
    }

    #[test]
    fn slab_sweep_matches_dense_assembly() {
        let (asm, grid) = two_phase_sphere(5);
        let sys = System::build(&asm, &grid, SystemOptions::default()).unwrap();
        assert!(sys.stats().cut_tets > 0 && sys.stats().n_x > 0);
        let (a, l) = dense(&sys);
        let mut rng = StdRng::seed_from_u64(1);
        let u: Vec<f64> = (0..sys.dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; sys.dofs()];
        sys.apply(&u, &mut out);
        let expect = &a * DVector::from_vec(u.clone());
        let tol = 1e-12 * a.amax();
        for i in 0..sys.dofs() {
            assert!((out[i] - expect[i]).abs() < tol, "dof {i}: {} vs {}", out[i], expect[i]);
        }
        let eps = Strain6::new(0.3, -0.1, 0.2, 0.05, 0.4, -0.2);
        sys.load(&eps, &mut out);
        let expect = &l * DVector::from_column_slice(eps.as_slice());
        for i in 0..sys.dofs() {
            assert!((out[i] - expect[i]).abs() < tol);
        }
        // A is symmetric positive semidefinite, and its scaled enriched
        // diagonal is one.
        assert!((&a - a.transpose()).amax() < tol);
        let nfe3 = 3 * sys.layout.n_fe();
        for i in nfe3..sys.dofs() {
            if sys.enrichment_scaling()[i - nfe3] > 0.0 {
                // Unit stiffness diagonal is one; with the phase stiffness it
                // lies within the stiffness bounds.
                let (lo, hi) = sys.stiffness_bounds();
                assert!(a[(i, i)] >= lo * (1.0 - 1e-12) && a[(i, i)] <= hi * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn homogeneous_cell_has_no_enrichment_and_exact_average() {
        let grid = Grid::cubic(4, 2.0).unwrap();
        let m = MaterialIso::new(2.0, 0.3).unwrap();
        let asm = PhaseAssembly::homogeneous([2.0; 3], m).unwrap();
        let sys = System::build(&asm, &grid, SystemOptions::default()).unwrap();
        assert_eq!(sys.stats().n_x, 0);
        assert_eq!(sys.stats().mixed_voxels, 0);
        let c = iso_stiffness(&m).unwrap();
        assert!((sys.integrated_stiffness() - c.matrix() * 8.0).amax() < 1e-12);
        // Load vanishes: every element's S^T ε̄ sums to zero at each node.
        let mut out = vec![0.0; sys.dofs()];
        sys.load(&Strain6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0), &mut out);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn integrated_stiffness_matches_phase_volumes() {
        let (asm, grid) = two_phase_sphere(6);
        let sys = System::build(&asm, &grid, SystemOptions::default()).unwrap();
        let mut vol = [0.0; 2];
        sys.for_each_sample(&vec![0.0; sys.dofs()], &Strain6::zeros(), |s| vol[s.phase] += s.weight);
        assert!((vol[0] + vol[1] - 1.0).abs() < 1e-12);
        let expect = sys.stiffness[0].matrix() * vol[0] + sys.stiffness[1].matrix() * vol[1];
        assert!((sys.integrated_stiffness() - expect).amax() < 1e-12);
        // The interpolated sphere shrinks by O(h²).
        let exact = 4.0 / 3.0 * core::f64::consts::PI * 0.027;
        let err6 = exact - vol[1];
        let (asm12, grid12) = two_phase_sphere(12);
        let sys12 = System::build(&asm12, &grid12, SystemOptions::default()).unwrap();
        let mut v12 = 0.0;
        sys12.for_each_sample(&vec![0.0; sys12.dofs()], &Strain6::zeros(), |s| {
            if s.phase == 1 {
                v12 += s.weight
            }
        });
        let err12 = exact - v12;
        assert!(err6 > 0.0 && err12 > 0.0);
        assert!(err6 / err12 > 3.0, "{err6} {err12}");
    }

    #[test]
    fn residual_pieces_are_consistent() {
        let (asm, grid) = two_phase_sphere(4);
        let sys = System::build(&asm, &grid, SystemOptions::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(2);
        let u: Vec<f64> = (0..sys.dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = Strain6::new(1.0, 0.0, 0.0, 0.0, 0.5, 0.0);
        let mut r = vec![0.0; sys.dofs()];
        let mut a = vec![0.0; sys.dofs()];
        let mut l = vec![0.0; sys.dofs()];
        let s_full = sys.residual(&u, &eps, &mut r);
        let s_a = sys.apply(&u, &mut a);
        let s_l = sys.load(&eps, &mut l);
        for i in 0..r.len() {
            assert!((r[i] - a[i] - l[i]).abs() < 1e-12);
        }
        assert!((s_full - s_a - s_l).amax() < 1e-12);
        let avg = sys.average_stress(&u, &eps);
        assert!((avg - s_full / sys.volume()).amax() < 1e-12);
        // Average stress equals the quadrature average of C ε.
        let mut acc = Stress6::zeros();
        sys.for_each_sample(&u, &eps, |s| acc += sys.stiffness[s.phase].apply(&s.strain) * s.weight);
        assert!((acc / sys.volume() - avg).amax() < 1e-10 * avg.amax());
    }

    #[test]
    fn strain_at_matches_samples() {
        let (asm, grid) = two_phase_sphere(4);
        let sys = System::build(&asm, &grid, SystemOptions::default()).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let u: Vec<f64> = (0..sys.dofs()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps = Strain6::new(0.1, 0.2, 0.3, 0.0, 0.0, 0.0);
        let mut checked = 0;
        sys.for_each_sample(&u, &eps, |s| {
            let e = sys.strain_at(&u, &eps, &s.position);
            assert!((e - s.strain).amax() < 1e-9 * s.strain.amax().max(1.0));
            checked += 1;
        });
        assert!(checked > 6 * 4 * 64);
    }

    #[test]
    fn p1_mode_uses_voxel_centers() {
        let (asm, grid) = two_phase_sphere(6);
        let sys = System::build(&asm, &grid, SystemOptions { discretization: Discretization::P1, ..Default::default() }).unwrap();
        assert_eq!(sys.stats().n_x, 0);
        assert_eq!(sys.stats().mixed_voxels, 0);
        let h = 1.0 / 6.0;
        let inside = (0..216)
            .filter(|&v| {
                let p = grid.node_position(v) + Vector3::new(0.5 * h, 0.5 * h, 0.5 * h);
                asm.phase_at(&p) == 1
            })
            .count() as f64;
        let c = sys.stiffness[0].matrix() * (216.0 - inside) * h * h * h + sys.stiffness[1].matrix() * inside * h * h * h;
        assert!((sys.integrated_stiffness() - c).amax() < 1e-12);
    }

    #[test]
    fn mismatched_cell_rejected() {
        let (asm, _) = two_phase_sphere(4);
        let grid = Grid::cubic(4, 2.0).unwrap();
        assert!(System::build(&asm, &grid, SystemOptions::default()).is_err());
    }

    #[test]
    fn per_node_scaling_shares_factor() {
        let (asm, grid) = two_phase_sphere(4);
        let sys = System::build(&asm, &grid, SystemOptions { scaling: ScalingMode::PerNode, ..Default::default() }).unwrap();
        for e in sys.enrichment_scaling().chunks(3) {
            assert_eq!(e[0], e[1]);
            assert_eq!(e[1], e[2]);
        }
    }
}
