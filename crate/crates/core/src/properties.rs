//! Measured checks of discretization invariants, each against an oracle that
//! does not share code with the quantity it checks. The unit tests and the
//! acceptance runner both call these; inputs such as random tetrahedra are
//! supplied by the caller.

use alloc::vec;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::assembly::{ElementView, System, SystemOptions};
use crate::element::{
    assemble_enriched, assemble_plain, cut_tet, modified_abs, p1_grads, shunn_ham_4, tet_quadrature, tet_volume,
};
use crate::geometry::PhaseAssembly;
use crate::greenop::{Fft3, GreenOperator};
use crate::mesh::Grid;
use crate::solver::Problem;
use crate::voigt::{MaterialIso, Stiffness66, Strain6, Stress6};
use crate::Result;

type Tet = [Vector3<f64>; 4];

fn powi(x: f64, k: i32) -> f64 {
    (0..k).fold(1.0, |acc, _| acc * x)
}

/// `∫_T f` for quadratic `f` from vertex and edge-midpoint values: weights
/// `−1/20` at the vertices and `1/5` at the midpoints.
pub fn quadratic_rule(x: &Tet, f: impl Fn(&Vector3<f64>) -> f64) -> f64 {
    let v = tet_volume(x).abs();
    let mut s = 0.0;
    for a in 0..4 {
        s -= f(&x[a]) / 20.0;
        for b in a + 1..4 {
            s += f(&((x[a] + x[b]) * 0.5)) / 5.0;
        }
    }
    v * s
}

/// The 16 sign patterns of a tet's nodal level-set values with magnitudes
/// `mags`.
pub fn sign_patterns(mags: [f64; 4]) -> [[f64; 4]; 16] {
    core::array::from_fn(|bits| core::array::from_fn(|a| if bits >> a & 1 == 1 { mags[a] } else { -mags[a] }))
}

const MAGS: [f64; 4] = [0.7, 1.3, 0.4, 2.1];

/// Largest relative deviation of the summed quadrature weights from the tet
/// volume, for the plain rule and for the cut rule under every sign pattern.
pub fn quadrature_volume_error(tets: &[Tet]) -> f64 {
    let mut worst: f64 = 0.0;
    for x in tets {
        let v = tet_volume(x).abs();
        let s: f64 = shunn_ham_4(x).iter().map(|p| p.weight).sum();
        worst = worst.max((s - v).abs() / v);
        for l in sign_patterns(MAGS) {
            let s: f64 = tet_quadrature(x, Some(&l)).iter().map(|(p, _)| p.weight).sum();
            worst = worst.max((s - v).abs() / v);
        }
    }
    worst
}

/// Largest error of the four-point rule on the ten monomials of degree ≤ 2,
/// relative to `|T| max|f|` over the vertices.
pub fn quadratic_exactness_error(tets: &[Tet]) -> f64 {
    let mut worst: f64 = 0.0;
    for x in tets {
        let v = tet_volume(x).abs();
        let scale = x.iter().map(|p| p.amax()).fold(1.0, f64::max);
        for a in 0..=2i32 {
            for b in 0..=(2 - a) {
                for c in 0..=(2 - a - b) {
                    let f = |p: &Vector3<f64>| powi(p[0], a) * powi(p[1], b) * powi(p[2], c);
                    let exact = quadratic_rule(x, f);
                    let num: f64 = shunn_ham_4(x).iter().map(|q| q.weight * f(&q.position)).sum();
                    let denom = v * powi(scale, a + b + c);
                    worst = worst.max((num - exact).abs() / denom);
                }
            }
        }
    }
    worst
}

/// Largest relative deviation of the summed subtet volumes from the parent
/// volume over all sign patterns.
pub fn subtet_volume_error(tets: &[Tet]) -> f64 {
    let mut worst: f64 = 0.0;
    for x in tets {
        let v = tet_volume(x).abs();
        for l in sign_patterns(MAGS) {
            let total: f64 = cut_tet(x, &l).iter().map(|s| s.volume()).sum();
            worst = worst.max((total - v).abs() / v);
        }
    }
    worst
}

/// Largest `|ρᵐ|` at the given barycentric points of uncut tets and at the
/// nodes of cut tets. Both are zero by construction, so the expected value is
/// exactly `0.0`.
pub fn enrichment_leak(points: &[[f64; 4]]) -> f64 {
    let mut worst: f64 = 0.0;
    for l in sign_patterns(MAGS) {
        let positive = l.iter().filter(|&&v| v > 0.0).count();
        if positive == 0 || positive == 4 {
            for n in points {
                worst = worst.max(modified_abs(&l, n).abs());
            }
        } else {
            for a in 0..4 {
                let mut n = [0.0; 4];
                n[a] = 1.0;
                worst = worst.max(modified_abs(&l, &n).abs());
            }
        }
    }
    worst
}

/// Largest `|‖∇ˢ(t Ñ)‖²_{L²} − 1|` over the retained enriched dofs of a
/// per-dof scaled system. The enriched gradients are rebuilt from the level
/// set and integrated exactly (they are linear on each subtet).
pub fn enriched_norm_error(system: &System) -> f64 {
    let layout = &system.layout;
    let grid = layout.grid;
    let h = grid.spacing();
    let mut sq = vec![0.0; 3 * layout.n_x()];
    for c in &layout.cut_tets {
        let (v, t) = (c.voxel as usize, c.local as usize);
        let x = layout.topology.vertices(t, &grid.node_position(v), &h);
        let nodes = layout.tet_nodes(v, t);
        let values = system.nodal_values(c.interface as usize);
        let l: [f64; 4] = core::array::from_fn(|a| values[nodes[a]]);
        let g = match p1_grads(&x) {
            Ok(g) => g,
            Err(_) => continue,
        };
        for sub in cut_tet(&x, &l) {
            let side = if sub.positive { 1.0 } else { -1.0 };
            // ψ is linear on the subtet: Σ Nᵢ|Lᵢ| − side Σ Nᵢ Lᵢ.
            let psi_grad: Vector3<f64> = (0..4).map(|i| g[i] * (l[i].abs() - side * l[i])).sum();
            let n_at = |p: &Vector3<f64>| -> [f64; 4] {
                let d = p - x[0];
                let n1 = g[1].dot(&d);
                let n2 = g[2].dot(&d);
                let n3 = g[3].dot(&d);
                [1.0 - n1 - n2 - n3, n1, n2, n3]
            };
            for a in 0..4 {
                let Some(e) = layout.enriched_index(nodes[a]) else { continue };
                let grad = |p: &Vector3<f64>| {
                    let n = n_at(p);
                    let psi: f64 = (0..4).map(|i| n[i] * (l[i].abs() - side * l[i])).sum();
                    g[a] * psi + psi_grad * n[a]
                };
                for comp in 0..3 {
                    // |sym(g ⊗ e_c)|² = ½|g|² + ½ g_c².
                    sq[3 * e + comp] += quadratic_rule(&sub.vertices, |p| {
                        let gg = grad(p);
                        0.5 * gg.norm_squared() + 0.5 * gg[comp] * gg[comp]
                    });
                }
            }
        }
    }
    let scale = system.enrichment_scaling();
    let mut worst: f64 = 0.0;
    for (d, s) in sq.iter().enumerate() {
        if scale[d] > 0.0 {
            worst = worst.max((scale[d] * scale[d] * s - 1.0).abs());
        }
    }
    worst
}

/// Relative asymmetry and relative smallest eigenvalue of enriched element
/// matrices over every cut sign pattern.
pub fn element_psd(tets: &[Tet], c_pos: &Stiffness66, c_neg: &Stiffness66) -> Result<(f64, f64)> {
    let (mut asym, mut min_eig): (f64, f64) = (0.0, f64::INFINITY);
    for x in tets {
        for l in sign_patterns(MAGS) {
            let positive = l.iter().filter(|&&v| v > 0.0).count();
            if positive == 0 || positive == 4 {
                continue;
            }
            let (cache, _) = assemble_enriched(x, &l, |p| if p { *c_pos } else { *c_neg })?;
            let a = cache.a;
            let norm = a.amax();
            asym = asym.max((a - a.transpose()).amax() / norm);
            let d = DMatrix::from_fn(24, 24, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
            min_eig = min_eig.min(d.symmetric_eigenvalues().min() / norm);
        }
    }
    Ok((asym, min_eig))
}

fn remove_mean(f: &mut [f64]) {
    let nn = f.len() / 3;
    for c in 0..3 {
        let m: f64 = (0..nn).map(|i| f[3 * i + c]).sum::<f64>() / nn as f64;
        for i in 0..nn {
            f[3 * i + c] -= m;
        }
    }
}

/// `max|P⁺(A₁₁⁰ v) − v| / max|v|` for the mean-free part of `v`. `A₁₁⁰` is
/// applied through a homogeneous cell whose stiffness is the Mandel identity
/// (`E = 1`, `ν = 0`).
pub fn preconditioner_round_trip<F: Fft3>(grid: &Grid, fft: F, v: &[f64]) -> Result<f64> {
    let asm = PhaseAssembly::homogeneous(grid.lengths, MaterialIso::new(1.0, 0.0)?)?;
    let system = System::build(&asm, grid, SystemOptions::default())?;
    let mut v = v.to_vec();
    remove_mean(&mut v);
    let mut av = vec![0.0; v.len()];
    system.apply(&v, &mut av);
    let mut green = GreenOperator::new(grid, fft)?;
    let mut back = vec![0.0; v.len()];
    green.apply_standard(&av, &mut back);
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok(back.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale)
}

/// Global stiffness matrix and load matrix (`r = A u + L ε̄`) assembled
/// element by element into dense storage.
pub fn dense_operator(system: &System) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = system.dofs();
    let mut a = DMatrix::zeros(n, n);
    let mut l = DMatrix::zeros(n, 6);
    let layout = &system.layout;
    let grid = layout.grid;
    let h = grid.spacing();
    for v in 0..grid.voxel_count() {
        for t in 0..6 {
            let x = layout.topology.vertices(t, &grid.node_position(v), &h);
            let (ke, se, dofs) = match system.element(v, t)? {
                ElementView::Cut(cache) => (
                    DMatrix::from_iterator(24, 24, cache.a.iter().copied()),
                    DMatrix::from_iterator(6, 24, cache.s.iter().copied()),
                    layout.gather(v, t, true),
                ),
                ElementView::Plain(c) => {
                    let cache = assemble_plain(&x, &c)?;
                    (
                        DMatrix::from_iterator(12, 12, cache.a.iter().copied()),
                        DMatrix::from_iterator(6, 12, cache.s.iter().copied()),
                        layout.gather(v, t, false),
                    )
                }
                ElementView::Sampled(cache) => (
                    DMatrix::from_iterator(12, 12, cache.a.iter().copied()),
                    DMatrix::from_iterator(6, 12, cache.s.iter().copied()),
                    layout.gather(v, t, false),
                ),
            };
            for (i, &gi) in dofs.iter().enumerate() {
                for (j, &gj) in dofs.iter().enumerate() {
                    a[(gi, gj)] += ke[(i, j)];
                }
                for c in 0..6 {
                    l[(gi, c)] += se[(c, i)];
                }
            }
        }
    }
    Ok((a, l))
}

/// `max|r_matrix-free(u) − (A u + L ε̄)| / max|A|`.
pub fn residual_dense_error(system: &System, u: &[f64], eps: &Strain6) -> Result<f64> {
    let (a, l) = dense_operator(system)?;
    let expect = &a * DVector::from_column_slice(u) + &l * DVector::from_column_slice(eps.as_slice());
    let mut r = vec![0.0; system.dofs()];
    system.residual(u, eps, &mut r);
    Ok(r.iter().zip(expect.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / a.amax())
}

/// Average stress from a dense pseudo-inverse solve of `A u = −L ε̄`.
pub fn dense_solve_stress(system: &System, eps: &Strain6) -> Result<Stress6> {
    let (a, l) = dense_operator(system)?;
    let b = -(&l * DVector::from_column_slice(eps.as_slice()));
    let svd = a.clone().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max();
    let u = svd
        .solve(&b, cutoff)
        .map_err(|e| crate::Error::InvalidConfig(alloc::string::String::from(e)))?;
    Ok(system.average_stress(u.as_slice(), eps))
}

/// Largest number of quadrature points in any voxel.
pub fn max_points_per_voxel(system: &System) -> usize {
    let mut count = vec![0usize; system.grid().voxel_count()];
    let u = vec![0.0; system.dofs()];
    system.for_each_sample(&u, &Strain6::zeros(), |s| count[s.voxel] += 1);
    count.into_iter().max().unwrap_or(0)
}
