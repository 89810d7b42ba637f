//! Discrete Green operator of the constant-coefficient P1 problem.
//!
//! With the unit reference stiffness the standard block `A₁₁⁰` is a periodic
//! convolution with a 27-point stencil of 3×3 blocks, so it is diagonalized by
//! the DFT. The preconditioner is `P = diag(A₁₁⁰, I)`; its pseudo-inverse on
//! the standard block is applied as three real FFTs, a 3×3 Hermitian multiply
//! per frequency, and three inverse FFTs.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex;

use crate::element::assemble_plain;
use crate::mesh::{build_topology, corner_offset, Grid};
use crate::voigt::Stiffness66;
use crate::{Error, Result};

pub type C64 = Complex<f64>;

/// Real-to-complex 3-D transform on an `n0 × n1 × n2` array stored x-fastest.
///
/// The spectrum is the half spectrum along x: `nh = n0/2 + 1` entries, indexed
/// `kx + nh·(ky + n1·kz)`. `inverse` includes the `1/(n0 n1 n2)` factor.
pub trait Fft3 {
    fn shape(&self) -> [usize; 3];
    fn forward(&mut self, input: &[f64], output: &mut [C64]);
    /// May overwrite `input`.
    fn inverse(&mut self, input: &mut [C64], output: &mut [f64]);
}

pub fn half_spectrum_len(n: [usize; 3]) -> usize {
    (n[0] / 2 + 1) * n[1] * n[2]
}

/// Separable direct DFT, `O(N³ Σn)`. Reference backend for small grids and
/// for builds without an FFT library.
#[derive(Debug, Clone)]
pub struct NaiveDft3 {
    n: [usize; 3],
    twiddles: [Vec<C64>; 3],
    work: Vec<C64>,
    line: Vec<C64>,
}

impl NaiveDft3 {
    pub fn new(n: [usize; 3]) -> Self {
        let tw = |m: usize| {
            (0..m)
                .map(|k| {
                    let a = -2.0 * core::f64::consts::PI * k as f64 / m as f64;
                    C64::new(libm::cos(a), libm::sin(a))
                })
                .collect()
        };
        NaiveDft3 {
            n,
            twiddles: [tw(n[0]), tw(n[1]), tw(n[2])],
            work: vec![C64::new(0.0, 0.0); n[0] * n[1] * n[2]],
            line: vec![C64::new(0.0, 0.0); n[0].max(n[1]).max(n[2])],
        }
    }

    /// In-place DFT of `self.work` along `axis`; `inverse` conjugates the kernel.
    fn transform_axis(&mut self, axis: usize, inverse: bool) {
        let n = self.n;
        let m = n[axis];
        let stride = [1, n[0], n[0] * n[1]][axis];
        let total = n[0] * n[1] * n[2];
        for start in 0..total {
            if (start / stride) % m != 0 {
                continue;
            }
            for k in 0..m {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..m {
                    let w = self.twiddles[axis][(j * k) % m];
                    let w = if inverse { w.conj() } else { w };
                    acc += self.work[start + j * stride] * w;
                }
                self.line[k] = acc;
            }
            for k in 0..m {
                self.work[start + k * stride] = self.line[k];
            }
        }
    }
}

impl Fft3 for NaiveDft3 {
    fn shape(&self) -> [usize; 3] {
        self.n
    }

    fn forward(&mut self, input: &[f64], output: &mut [C64]) {
        for (w, &x) in self.work.iter_mut().zip(input) {
            *w = C64::new(x, 0.0);
        }
        for axis in 0..3 {
            self.transform_axis(axis, false);
        }
        let n = self.n;
        let nh = n[0] / 2 + 1;
        for kz in 0..n[2] {
            for ky in 0..n[1] {
                for kx in 0..nh {
                    output[kx + nh * (ky + n[1] * kz)] = self.work[kx + n[0] * (ky + n[1] * kz)];
                }
            }
        }
    }

    fn inverse(&mut self, input: &mut [C64], output: &mut [f64]) {
        let n = self.n;
        let nh = n[0] / 2 + 1;
        for kz in 0..n[2] {
            for ky in 0..n[1] {
                for kx in 0..n[0] {
                    self.work[kx + n[0] * (ky + n[1] * kz)] = if kx < nh {
                        input[kx + nh * (ky + n[1] * kz)]
                    } else {
                        let (mx, my, mz) = (n[0] - kx, (n[1] - ky) % n[1], (n[2] - kz) % n[2]);
                        input[mx + nh * (my + n[1] * mz)].conj()
                    };
                }
            }
        }
        for axis in 0..3 {
            self.transform_axis(axis, true);
        }
        let scale = 1.0 / (n[0] * n[1] * n[2]) as f64;
        for (o, w) in output.iter_mut().zip(&self.work) {
            *o = w.re * scale;
        }
    }
}

/// The 27 node-to-node blocks `K(δ)`, `δ ∈ {−1,0,1}³`, of the unit-stiffness
/// P1 matrix: `(A₁₁⁰ u)ᵢ = Σ_δ K(δ) u_{i+δ}`. Indexed `(δx+1) + 3(δy+1) + 9(δz+1)`.
pub fn stencil(grid: &Grid) -> Result<[Matrix3<f64>; 27]> {
    let topo = build_topology();
    let h = grid.spacing();
    let unit = Stiffness66::identity();
    let mut k = [Matrix3::zeros(); 27];
    for t in 0..6 {
        let x = topo.vertices(t, &Vector3::zeros(), &h);
        let a = assemble_plain(&x, &unit)?.a;
        for p in 0..4 {
            let cp = corner_offset(topo.tets[t][p]);
            for q in 0..4 {
                let cq = corner_offset(topo.tets[t][q]);
                let d: [i64; 3] = core::array::from_fn(|i| cq[i] as i64 - cp[i] as i64);
                let idx = (d[0] + 1) + 3 * (d[1] + 1) + 9 * (d[2] + 1);
                k[idx as usize] += a.fixed_view::<3, 3>(3 * p, 3 * q);
            }
        }
    }
    Ok(k)
}

/// Upper triangle `(00, 01, 02, 11, 12, 22)` of a Hermitian 3×3 matrix.
pub type Hermitian3 = [C64; 6];

const UPPER: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

fn herm_get(h: &Hermitian3, i: usize, j: usize) -> C64 {
    let (a, b, conj) = if i <= j { (i, j, false) } else { (j, i, true) };
    let idx = UPPER.iter().position(|&p| p == (a, b)).unwrap();
    if conj {
        h[idx].conj()
    } else {
        h[idx]
    }
}

/// Inverse of a Hermitian positive definite 3×3 matrix. Positive definiteness
/// is checked through the leading principal minors relative to the trace.
fn herm_inverse(h: &Hermitian3) -> Option<Hermitian3> {
    let m = |i, j| herm_get(h, i, j);
    let tr = m(0, 0).re + m(1, 1).re + m(2, 2).re;
    let tol = 1e-12;
    let d1 = m(0, 0).re;
    let d2 = (m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)).re;
    let cof = |i: usize, j: usize| {
        // Cofactor C_ij via the 2×2 minor that excludes row i, column j.
        let r: Vec<usize> = (0..3).filter(|&x| x != i).collect();
        let c: Vec<usize> = (0..3).filter(|&x| x != j).collect();
        let minor = m(r[0], c[0]) * m(r[1], c[1]) - m(r[0], c[1]) * m(r[1], c[0]);
        if (i + j) % 2 == 0 {
            minor
        } else {
            -minor
        }
    };
    let det = (m(0, 0) * cof(0, 0) + m(0, 1) * cof(0, 1) + m(0, 2) * cof(0, 2)).re;
    if !(tr > 0.0 && d1 > tol * tr && d2 > tol * tr * tr && det > tol * tr * tr * tr) {
        return None;
    }
    // inv_ij = C_ji / det
    Some(UPPER.map(|(i, j)| cof(j, i) / det))
}

fn herm_apply(h: &Hermitian3, v: [C64; 3]) -> [C64; 3] {
    let [a00, a01, a02, a11, a12, a22] = *h;
    [
        a00 * v[0] + a01 * v[1] + a02 * v[2],
        a01.conj() * v[0] + a11 * v[1] + a12 * v[2],
        a02.conj() * v[0] + a12.conj() * v[1] + a22 * v[2],
    ]
}

/// Frequency `k` of an axis with `m` points mapped to `(−m/2, m/2]`.
pub fn signed_frequency(k: usize, m: usize) -> i64 {
    if 2 * k > m {
        k as i64 - m as i64
    } else {
        k as i64
    }
}

/// `Â(ξ) = Σ_δ K(δ) e^{2πi ξ·δ/N}` on the half spectrum.
pub fn symbol(grid: &Grid) -> Result<Vec<Hermitian3>> {
    let k = stencil(grid)?;
    let n = grid.n;
    let nh = n[0] / 2 + 1;
    let phase = |m: usize| -> Vec<[C64; 3]> {
        (0..m)
            .map(|f| {
                core::array::from_fn(|d| {
                    let a = 2.0 * core::f64::consts::PI * f as f64 * (d as f64 - 1.0) / m as f64;
                    C64::new(libm::cos(a), libm::sin(a))
                })
            })
            .collect()
    };
    let (px, py, pz) = (phase(n[0]), phase(n[1]), phase(n[2]));
    let mut out = Vec::with_capacity(half_spectrum_len(n));
    for kz in 0..n[2] {
        for ky in 0..n[1] {
            for kx in 0..nh {
                let mut s = [C64::new(0.0, 0.0); 6];
                for dz in 0..3 {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let e = px[kx][dx] * py[ky][dy] * pz[kz][dz];
                            let b = &k[dx + 3 * dy + 9 * dz];
                            for (slot, &(i, j)) in UPPER.iter().enumerate() {
                                s[slot] += e * b[(i, j)];
                            }
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Pseudo-inverse of `P = diag(A₁₁⁰, I)` with `Ĝ(0) = 0`.
pub struct GreenOperator<F: Fft3> {
    grid: Grid,
    green: Vec<Hermitian3>,
    fft: F,
    real: Vec<f64>,
    spectra: [Vec<C64>; 3],
}

impl<F: Fft3> GreenOperator<F> {
    pub fn new(grid: &Grid, fft: F) -> Result<Self> {
        if fft.shape() != grid.n {
            return Err(Error::DimensionMismatch {
                expected: grid.node_count(),
                got: fft.shape().iter().product(),
            });
        }
        let n = grid.n;
        let nh = n[0] / 2 + 1;
        let sym = symbol(grid)?;
        let mut green = Vec::with_capacity(sym.len());
        for (idx, s) in sym.iter().enumerate() {
            if idx == 0 {
                green.push([C64::new(0.0, 0.0); 6]);
                continue;
            }
            let g = herm_inverse(s).ok_or_else(|| {
                let kx = idx % nh;
                let ky = (idx / nh) % n[1];
                Error::SingularSymbol([kx, ky, idx / (nh * n[1])])
            })?;
            green.push(g);
        }
        let len = half_spectrum_len(n);
        Ok(GreenOperator {
            grid: *grid,
            green,
            fft,
            real: vec![0.0; grid.node_count()],
            spectra: [vec![C64::new(0.0, 0.0); len], vec![C64::new(0.0, 0.0); len], vec![C64::new(0.0, 0.0); len]],
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `Ĝ` on the half spectrum, upper triangles.
    pub fn green_symbol(&self) -> &[Hermitian3] {
        &self.green
    }

    /// `out = (A₁₁⁰)⁺ f` for a standard-dof field `f` of length `3·n_FE`.
    pub fn apply_standard(&mut self, f: &[f64], out: &mut [f64]) {
        let nn = self.grid.node_count();
        for c in 0..3 {
            for (i, r) in self.real.iter_mut().enumerate() {
                *r = f[3 * i + c];
            }
            self.fft.forward(&self.real, &mut self.spectra[c]);
        }
        let [s0, s1, s2] = &mut self.spectra;
        for (idx, g) in self.green.iter().enumerate() {
            let v = herm_apply(g, [s0[idx], s1[idx], s2[idx]]);
            s0[idx] = v[0];
            s1[idx] = v[1];
            s2[idx] = v[2];
        }
        let n = self.grid.n;
        let nh = n[0] / 2 + 1;
        for c in 0..3 {
            let spec = &mut self.spectra[c];
            // Self-conjugate frequencies must be real for a C2R transform.
            for kz in [0, n[2] / 2] {
                for ky in [0, n[1] / 2] {
                    for kx in [0, n[0] / 2] {
                        if (kx == 0 || 2 * kx == n[0]) && (ky == 0 || 2 * ky == n[1]) && (kz == 0 || 2 * kz == n[2]) {
                            spec[kx + nh * (ky + n[1] * kz)].im = 0.0;
                        }
                    }
                }
            }
            self.fft.inverse(spec, &mut self.real);
            for i in 0..nn {
                out[3 * i + c] = self.real[i];
            }
        }
    }

    /// `out = P⁺ f` on the full enriched space: Green operator on the first
    /// `3·n_FE` entries, identity on the rest.
    pub fn apply(&mut self, f: &[f64], out: &mut [f64]) {
        let nfe = 3 * self.grid.node_count();
        self.apply_standard(&f[..nfe], &mut out[..nfe]);
        out[nfe..].copy_from_slice(&f[nfe..]);
    }
}
