//! Mandel-notation tensor algebra and isotropic stiffness construction.
//!
//! A symmetric tensor `ε` maps to `(ε11, ε22, ε33, √2 ε23, √2 ε13, √2 ε12)`,
//! so the Frobenius product of two tensors is the dot product of their
//! 6-vectors and a 6×6 stiffness acts by plain matrix multiplication.

use alloc::format;
use core::f64::consts::SQRT_2;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::{Error, Result};

pub type Strain6 = Vector6<f64>;
pub type Stress6 = Vector6<f64>;

/// Index pairs of the Mandel components.
pub const MANDEL_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)];

pub fn mandel_from_tensor(t: &Matrix3<f64>) -> Vector6<f64> {
    let s = 0.5 * (t + t.transpose());
    Vector6::new(
        s[(0, 0)],
        s[(1, 1)],
        s[(2, 2)],
        SQRT_2 * s[(1, 2)],
        SQRT_2 * s[(0, 2)],
        SQRT_2 * s[(0, 1)],
    )
}

pub fn tensor_from_mandel(v: &Vector6<f64>) -> Matrix3<f64> {
    let r = 1.0 / SQRT_2;
    Matrix3::new(
        v[0],
        r * v[5],
        r * v[4],
        r * v[5],
        v[1],
        r * v[3],
        r * v[4],
        r * v[3],
        v[2],
    )
}

/// Mandel vector of `sym(e_c ⊗ g)`: the strain of the vector field `ψ e_c`
/// whose scalar factor has gradient `g`.
#[inline]
pub fn sym_grad_column(g: &Vector3<f64>, c: usize) -> Vector6<f64> {
    let r = 1.0 / SQRT_2;
    match c {
        0 => Vector6::new(g[0], 0.0, 0.0, 0.0, r * g[2], r * g[1]),
        1 => Vector6::new(0.0, g[1], 0.0, r * g[2], 0.0, r * g[0]),
        _ => Vector6::new(0.0, 0.0, g[2], r * g[1], r * g[0], 0.0),
    }
}

/// Isotropic material given by Young's modulus (MPa) and Poisson's ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialIso {
    pub young: f64,
    pub poisson: f64,
}

impl MaterialIso {
    pub fn new(young: f64, poisson: f64) -> Result<Self> {
        let m = MaterialIso { young, poisson };
        m.validate()?;
        Ok(m)
    }

    /// Material with the given bulk and shear moduli.
    pub fn from_bulk_shear(bulk: f64, shear: f64) -> Result<Self> {
        if !(bulk > 0.0 && shear > 0.0) {
            return Err(Error::InvalidMaterial(format!(
                "bulk {bulk} and shear {shear} moduli must be positive"
            )));
        }
        let young = 9.0 * bulk * shear / (3.0 * bulk + shear);
        let poisson = (3.0 * bulk - 2.0 * shear) / (2.0 * (3.0 * bulk + shear));
        Self::new(young, poisson)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.young > 0.0) || !self.young.is_finite() {
            return Err(Error::InvalidMaterial(format!(
                "Young's modulus must be positive, got {}",
                self.young
            )));
        }
        if !(self.poisson > -1.0 && self.poisson < 0.5) {
            return Err(Error::InvalidMaterial(format!(
                "Poisson's ratio must lie in (-1, 0.5), got {}",
                self.poisson
            )));
        }
        Ok(())
    }

    pub fn shear(&self) -> f64 {
        self.young / (2.0 * (1.0 + self.poisson))
    }

    pub fn lame_lambda(&self) -> f64 {
        self.young * self.poisson / ((1.0 + self.poisson) * (1.0 - 2.0 * self.poisson))
    }

    pub fn bulk(&self) -> f64 {
        self.young / (3.0 * (1.0 - 2.0 * self.poisson))
    }
}

/// 6×6 stiffness in Mandel notation (MPa).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stiffness66(pub Matrix6<f64>);

impl Stiffness66 {
    pub fn identity() -> Self {
        Stiffness66(Matrix6::identity())
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.0
    }

    pub fn apply(&self, eps: &Strain6) -> Stress6 {
        self.0 * eps
    }

    /// `ε : C : ε`.
    pub fn energy(&self, eps: &Strain6) -> f64 {
        eps.dot(&(self.0 * eps))
    }

    pub fn eigenvalues(&self) -> Vector6<f64> {
        let sym = 0.5 * (self.0 + self.0.transpose());
        SymmetricEigen::new(sym).eigenvalues
    }

    pub fn symmetrized(&self) -> Self {
        Stiffness66(0.5 * (self.0 + self.0.transpose()))
    }

    /// `max |C - Cᵀ| / max |C|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.0.amax();
        if scale == 0.0 {
            return 0.0;
        }
        (self.0 - self.0.transpose()).amax() / scale
    }
}

/// `C = 2μ I + λ 1⊗1` in Mandel form.
pub fn iso_stiffness(m: &MaterialIso) -> Result<Stiffness66> {
    m.validate()?;
    let mu = m.shear();
    let lambda = m.lame_lambda();
    let mut c = Matrix6::identity() * (2.0 * mu);
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] += lambda;
        }
    }
    Ok(Stiffness66(c))
}

/// Smallest and largest stiffness eigenvalues over all phases, the constants
/// `C₋` and `C₊` with `C₋‖ε‖² ≤ ε:C:ε ≤ C₊‖ε‖²`.
pub fn stiffness_bounds(materials: &[Stiffness66]) -> Result<(f64, f64)> {
    if materials.is_empty() {
        return Err(Error::InvalidMaterial("no phases given".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in materials {
        let scale = c.0.amax();
        if c.asymmetry() > 1e-12 {
            return Err(Error::InvalidMaterial(format!(
                "stiffness is not symmetric (relative asymmetry {:e})",
                c.asymmetry()
            )));
        }
        let ev = c.eigenvalues();
        let min = ev.min();
        if !(min > 1e-14 * scale) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
        lo = lo.min(min);
        hi = hi.max(ev.max());
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn full_tensor(c: &Stiffness66) -> [[[[f64; 3]; 3]; 3]; 3] {
        // C_ijkl from the Mandel matrix: divide the √2 factors back out.
        let mut t = [[[[0.0; 3]; 3]; 3]; 3];
        let factor = |a: usize| if a < 3 { 1.0 } else { SQRT_2 };
        for a in 0..6 {
            for b in 0..6 {
                let v = c.0[(a, b)] / (factor(a) * factor(b));
                let (i, j) = MANDEL_PAIRS[a];
                let (k, l) = MANDEL_PAIRS[b];
                for (p, q) in [(i, j), (j, i)] {
                    for (r, s) in [(k, l), (l, k)] {
                        t[p][q][r][s] = v;
                    }
                }
            }
        }
        t
    }

    #[test]
    fn hashin_matrix_moduli() {
        let m = MaterialIso::new(1.5, 0.25).unwrap();
        assert!((m.bulk() - 1.0).abs() < 1e-15);
        assert!((m.shear() - 0.6).abs() < 1e-15);
        let coating = MaterialIso::new(1.212036, 0.25).unwrap();
        assert!((coating.bulk() - 0.808024).abs() < 1e-12);
    }

    #[test]
    fn zero_poisson_decouples() {
        let c = iso_stiffness(&MaterialIso::new(1.0, 0.0).unwrap()).unwrap();
        assert!((c.0 - Matrix6::identity()).amax() < 1e-15);
    }

    #[test]
    fn rejects_invalid_poisson() {
        assert!(MaterialIso::new(1.0, 0.5).is_err());
        assert!(MaterialIso::new(1.0, -1.0).is_err());
        assert!(MaterialIso::new(-1.0, 0.2).is_err());
    }

    #[test]
    fn bounds_of_single_phase() {
        let c = iso_stiffness(&MaterialIso::new(1.5, 0.25).unwrap()).unwrap();
        let (lo, hi) = stiffness_bounds(&[c]).unwrap();
        assert!((lo - 1.2).abs() < 1e-13);
        assert!((hi - 3.0).abs() < 1e-13);
        assert_eq!(stiffness_bounds(&[c, c]).unwrap(), (lo, hi));
    }

    #[test]
    fn bounds_with_bulk_ratio_ten() {
        let soft = MaterialIso::from_bulk_shear(1.0, 0.6).unwrap();
        let stiff = MaterialIso::from_bulk_shear(10.0, 6.0).unwrap();
        let cs = [iso_stiffness(&soft).unwrap(), iso_stiffness(&stiff).unwrap()];
        let (lo, hi) = stiffness_bounds(&cs).unwrap();
        // Dense eigensolve of each matrix as the independent route.
        let mut all = alloc::vec::Vec::new();
        for c in &cs {
            let e = nalgebra::DMatrix::from_fn(6, 6, |i, j| c.0[(i, j)]).symmetric_eigenvalues();
            all.extend(e.iter().copied());
        }
        let dlo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let dhi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - dlo).abs() < 1e-12 && (hi - dhi).abs() < 1e-12);
        assert!((hi / lo - 25.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let mut c = Stiffness66::identity();
        c.0[(2, 2)] = -1.0;
        assert!(matches!(
            stiffness_bounds(&[c]),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn mandel_energy_matches_full_contraction() {
        let mut rng = StdRng::seed_from_u64(7);
        let c = iso_stiffness(&MaterialIso::new(12.120361, 0.25).unwrap()).unwrap();
        // Perturb to a generic anisotropic symmetric stiffness.
        let mut m = c.0;
        for i in 0..6 {
            for j in i..6 {
                let d = rng.gen_range(-0.1..0.1);
                m[(i, j)] += d;
                m[(j, i)] = m[(i, j)];
            }
        }
        let c = Stiffness66(m);
        let t = full_tensor(&c);
        for _ in 0..100 {
            let e = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let e = 0.5 * (e + e.transpose());
            let v = mandel_from_tensor(&e);
            let mut full = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        for l in 0..3 {
                            full += e[(i, j)] * t[i][j][k][l] * e[(k, l)];
                        }
                    }
                }
            }
            let mandel = c.energy(&v);
            assert!((full - mandel).abs() <= 1e-13 * full.abs().max(1.0));
            assert!((v.norm() - e.norm()).abs() < 1e-14);
            assert!((tensor_from_mandel(&v) - e).amax() < 1e-15);
        }
    }

    #[test]
    fn bounds_hold_for_random_strains() {
        let mut rng = StdRng::seed_from_u64(11);
        for m in [
            MaterialIso::new(1.5, 0.25).unwrap(),
            MaterialIso::new(1.212036, 0.25).unwrap(),
            MaterialIso::new(12.120361, 0.25).unwrap(),
        ] {
            let c = iso_stiffness(&m).unwrap();
            let (lo, hi) = stiffness_bounds(&[c]).unwrap();
            for _ in 0..1000 {
                let e = Vector6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                let w = c.energy(&e);
                let n2 = e.norm_squared();
                assert!(lo * n2 <= w * (1.0 + 1e-14) && w <= hi * n2 * (1.0 + 1e-14));
            }
        }
    }

    #[test]
    fn sym_grad_column_norm_identity() {
        let g = Vector3::new(0.3, -1.2, 2.5);
        for c in 0..3 {
            let col = sym_grad_column(&g, c);
            let mut t = Matrix3::zeros();
            t.set_column(c, &g);
            let direct = mandel_from_tensor(&t.transpose());
            assert!((col - direct).amax() < 1e-15);
            let expected = 0.5 * g.norm_squared() + 0.5 * g[c] * g[c];
            assert!((col.norm_squared() - expected).abs() < 1e-14);
        }
    }
}
