//! Periodic voxel grid, the six-tetrahedra voxel split and the degree-of-freedom
//! layout of the enriched space.
//!
//! Every voxel uses the same Kuhn (Freudenthal) split along its main diagonal
//! from corner `(0,0,0)` to corner `(1,1,1)`. A single fixed table keeps the
//! constant-coefficient operator translation invariant, so it diagonalizes
//! under the discrete Fourier transform.

use alloc::{format, vec, vec::Vec};

use nalgebra::Vector3;

use crate::geometry::NodalLevelSet;
use crate::{Error, Result};

/// Regular periodic grid of `n[0]×n[1]×n[2]` voxels covering the cell
/// `[0,ℓ₁]×[0,ℓ₂]×[0,ℓ₃]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub n: [usize; 3],
    pub lengths: [f64; 3],
}

impl Grid {
    pub fn new(n: [usize; 3], lengths: [f64; 3]) -> Result<Self> {
        if n.iter().any(|&k| k < 2) {
            return Err(Error::InvalidGrid(format!(
                "at least two voxels per axis required, got {n:?}"
            )));
        }
        if lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "cell lengths must be positive, got {lengths:?}"
            )));
        }
        if n.iter().product::<usize>() >= u32::MAX as usize {
            return Err(Error::InvalidGrid(format!("grid {n:?} too large")));
        }
        Ok(Grid { n, lengths })
    }

    pub fn cubic(n: usize, length: f64) -> Result<Self> {
        Self::new([n; 3], [length; 3])
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.lengths[0] / self.n[0] as f64,
            self.lengths[1] / self.n[1] as f64,
            self.lengths[2] / self.n[2] as f64,
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        let h = self.spacing();
        h[0].min(h[1]).min(h[2])
    }

    pub fn node_count(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    /// Voxels and nodes coincide in number under periodic identification.
    pub fn voxel_count(&self) -> usize {
        self.node_count()
    }

    pub fn plane_size(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn volume(&self) -> f64 {
        self.lengths[0] * self.lengths[1] * self.lengths[2]
    }

    pub fn voxel_volume(&self) -> f64 {
        let h = self.spacing();
        h[0] * h[1] * h[2]
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.n[0] * (j + self.n[1] * k)
    }

    #[inline]
    pub fn node_ijk(&self, node: usize) -> [usize; 3] {
        let i = node % self.n[0];
        let j = (node / self.n[0]) % self.n[1];
        let k = node / self.plane_size();
        [i, j, k]
    }

    pub fn node_position(&self, node: usize) -> Vector3<f64> {
        let [i, j, k] = self.node_ijk(node);
        let h = self.spacing();
        Vector3::new(i as f64 * h[0], j as f64 * h[1], k as f64 * h[2])
    }

    /// Global node at corner `c` (bit 0 = x, bit 1 = y, bit 2 = z) of voxel `v`.
    #[inline]
    pub fn corner_node(&self, voxel: usize, corner: usize) -> usize {
        let [i, j, k] = self.node_ijk(voxel);
        let i = (i + (corner & 1)) % self.n[0];
        let j = (j + ((corner >> 1) & 1)) % self.n[1];
        let k = (k + ((corner >> 2) & 1)) % self.n[2];
        self.node_index(i, j, k)
    }

    pub fn voxel_corner_nodes(&self, voxel: usize) -> [usize; 8] {
        core::array::from_fn(|c| self.corner_node(voxel, c))
    }

    /// Wraps a point into the cell `[0, ℓ)³`.
    pub fn wrap(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|a, _| wrap_coordinate(x[a], self.lengths[a]))
    }
}

pub(crate) fn wrap_coordinate(x: f64, length: f64) -> f64 {
    let r = x - length * libm::floor(x / length);
    if r >= length {
        0.0
    } else {
        r
    }
}

/// Offset of voxel corner `c` in units of the grid spacing.
#[inline]
pub fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The six tetrahedra of a voxel, as voxel corner indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElementTopology {
    pub tets: [[usize; 4]; 6],
    /// Axis permutation `π` of each tet: the tet holds the points whose
    /// local coordinates satisfy `ξ[π0] ≥ ξ[π1] ≥ ξ[π2]`.
    pub orderings: [[usize; 3]; 6],
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Builds the Kuhn split: tet `π` has vertices `0, e_π0, e_π0 + e_π1, (1,1,1)`.
/// Odd permutations get their middle vertices swapped so that every tet is
/// positively oriented.
pub fn build_topology() -> ElementTopology {
    let mut tets = [[0usize; 4]; 6];
    for (t, p) in PERMUTATIONS.iter().enumerate() {
        let a = 1 << p[0];
        let b = a | (1 << p[1]);
        let even = matches!(t, 0 | 3 | 4);
        tets[t] = if even { [0, a, b, 7] } else { [0, b, a, 7] };
    }
    ElementTopology {
        tets,
        orderings: PERMUTATIONS,
    }
}

impl ElementTopology {
    /// Which of the six tets contains local voxel coordinates `ξ ∈ [0,1]³`.
    pub fn locate(&self, xi: &[f64; 3]) -> usize {
        let mut best = 0;
        for (t, p) in self.orderings.iter().enumerate() {
            if xi[p[0]] >= xi[p[1]] && xi[p[1]] >= xi[p[2]] {
                best = t;
                break;
            }
        }
        best
    }

    /// Vertex coordinates of tet `t` of the voxel with lower corner `origin`.
    pub fn vertices(&self, t: usize, origin: &Vector3<f64>, h: &[f64; 3]) -> [Vector3<f64>; 4] {
        core::array::from_fn(|a| {
            let o = corner_offset(self.tets[t][a]);
            origin + Vector3::new(o[0] as f64 * h[0], o[1] as f64 * h[1], o[2] as f64 * h[2])
        })
    }
}

/// How a level set interacts with one tetrahedron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TetCut {
    Uncut,
    /// Exactly one interface field changes sign in the tet.
    Cut(u16),
    /// More than one interface crosses the tet; assembled without enrichment.
    Multi,
}

/// A tetrahedron crossed by exactly one interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutTet {
    pub voxel: u32,
    pub local: u8,
    pub interface: u16,
}

pub const NOT_ENRICHED: u32 = u32::MAX;

/// Node numbering of the enriched space: `3·n_FE` standard dofs followed by
/// `3·n_X` enriched ones. Enriched nodes are numbered in increasing global node
/// order, so the enriched nodes of each z-plane form a contiguous range.
#[derive(Debug, Clone, PartialEq)]
pub struct DofLayout {
    pub grid: Grid,
    pub topology: ElementTopology,
    pub enriched_nodes: Vec<u32>,
    enriched_of_node: Vec<u32>,
    pub cut_tets: Vec<CutTet>,
    pub multi_tets: Vec<(u32, u8)>,
    plane_ranges: Vec<(usize, usize)>,
}

impl DofLayout {
    pub fn n_fe(&self) -> usize {
        self.grid.node_count()
    }

    pub fn n_x(&self) -> usize {
        self.enriched_nodes.len()
    }

    pub fn total_dofs(&self) -> usize {
        3 * (self.n_fe() + self.n_x())
    }

    /// Dense enriched index of a global node, if it carries enrichment.
    #[inline]
    pub fn enriched_index(&self, node: usize) -> Option<usize> {
        match self.enriched_of_node[node] {
            NOT_ENRICHED => None,
            e => Some(e as usize),
        }
    }

    /// Enriched indices belonging to nodes of z-plane `k`.
    pub fn plane_range(&self, k: usize) -> (usize, usize) {
        self.plane_ranges[k]
    }

    /// Global node numbers of tet `local` of voxel `voxel`.
    pub fn tet_nodes(&self, voxel: usize, local: usize) -> [usize; 4] {
        let t = self.topology.tets[local];
        core::array::from_fn(|a| self.grid.corner_node(voxel, t[a]))
    }

    /// Gather map Λ_e of a tet: 12 standard dof slots, then 12 enriched dof
    /// slots (offset by `3·n_FE`) when every node is enriched.
    pub fn gather(&self, voxel: usize, local: usize, enriched: bool) -> Vec<usize> {
        let nodes = self.tet_nodes(voxel, local);
        let mut dofs = Vec::with_capacity(if enriched { 24 } else { 12 });
        for n in nodes {
            for c in 0..3 {
                dofs.push(3 * n + c);
            }
        }
        if enriched {
            let off = 3 * self.n_fe();
            for n in nodes {
                let e = self
                    .enriched_index(n)
                    .expect("node of a cut tet must be enriched");
                for c in 0..3 {
                    dofs.push(off + 3 * e + c);
                }
            }
        }
        dofs
    }

    /// Layout without enrichment.
    pub fn plain(grid: Grid) -> Self {
        Self::from_cuts(grid, build_topology(), Vec::new(), Vec::new())
    }

    fn from_cuts(
        grid: Grid,
        topology: ElementTopology,
        cut_tets: Vec<CutTet>,
        multi_tets: Vec<(u32, u8)>,
    ) -> Self {
        let mut flag = vec![false; grid.node_count()];
        for ct in &cut_tets {
            let t = topology.tets[ct.local as usize];
            for c in t {
                flag[grid.corner_node(ct.voxel as usize, c)] = true;
            }
        }
        let mut enriched_of_node = vec![NOT_ENRICHED; grid.node_count()];
        let mut enriched_nodes = Vec::new();
        for (n, &f) in flag.iter().enumerate() {
            if f {
                enriched_of_node[n] = enriched_nodes.len() as u32;
                enriched_nodes.push(n as u32);
            }
        }
        let plane = grid.plane_size();
        let mut plane_ranges = Vec::with_capacity(grid.n[2]);
        let mut start = 0;
        for k in 0..grid.n[2] {
            let end = start
                + enriched_nodes[start..]
                    .iter()
                    .take_while(|&&n| (n as usize) / plane == k)
                    .count();
            plane_ranges.push((start, end));
            start = end;
        }
        DofLayout {
            grid,
            topology,
            enriched_nodes,
            enriched_of_node,
            cut_tets,
            multi_tets,
            plane_ranges,
        }
    }
}

/// Classifies one tet against the sampled interfaces. An interface cuts the
/// tet when it has a node strictly inside and a node outside; nodes carrying
/// the snap marker lie on the interface and do not cut on their own.
pub fn classify_tet(nodal: &NodalLevelSet, nodes: &[usize; 4]) -> TetCut {
    let mut found = None;
    for k in 0..nodal.interface_count() {
        let v = nodal.values(k);
        let inside = nodes.iter().any(|&n| nodal.is_inside(v[n]));
        let outside = nodes.iter().any(|&n| v[n] < 0.0);
        if inside && outside {
            if found.is_some() {
                return TetCut::Multi;
            }
            found = Some(k as u16);
        }
    }
    match found {
        Some(k) => TetCut::Cut(k),
        None => TetCut::Uncut,
    }
}

/// Finds the cut tets and numbers the enriched nodes: a tet is cut when the
/// nodal values of exactly one interface field have mixed signs in it, and
/// every node of a cut tet is enriched. Tets crossed by several interfaces are
/// listed separately and do not drive enrichment.
pub fn detect_enrichment(nodal: &NodalLevelSet, topology: &ElementTopology, grid: &Grid) -> DofLayout {
    let mut cut = Vec::new();
    let mut multi = Vec::new();
    for voxel in 0..grid.voxel_count() {
        for (local, t) in topology.tets.iter().enumerate() {
            let nodes: [usize; 4] = core::array::from_fn(|a| grid.corner_node(voxel, t[a]));
            match classify_tet(nodal, &nodes) {
                TetCut::Uncut => {}
                TetCut::Cut(k) => cut.push(CutTet {
                    voxel: voxel as u32,
                    local: local as u8,
                    interface: k,
                }),
                TetCut::Multi => multi.push((voxel as u32, local as u8)),
            }
        }
    }
    DofLayout::from_cuts(*grid, *topology, cut, multi)
}
