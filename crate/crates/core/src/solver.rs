//! Matrix-free iterative schemes for `A u = −b(ε̄)`.
//!
//! The residual is `r(u) = A u + Σ Λᵀ Sᵀ ε̄`, the gradient of the potential
//! energy. All schemes precondition with `P⁺` and stop when
//! `√(rᵀP⁺r) ≤ tol · ‖Σₑ Sₑ uₑ‖`, the right-hand side being the stress
//! integral `|Y| ‖⟨σ⟩‖`.

use alloc::vec;
use alloc::vec::Vec;

use crate::voigt::{Strain6, Stress6};
use crate::{Error, Result};

const CHUNK: usize = 4096;

/// Dot product summed in fixed-size chunks, in a fixed order, so that the
/// result does not depend on the number of threads.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let partial: Vec<f64> = a
            .par_chunks(CHUNK)
            .zip(b.par_chunks(CHUNK))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
            .collect();
        partial.iter().sum()
    }
    #[cfg(not(feature = "parallel"))]
    {
        a.chunks(CHUNK)
            .zip(b.chunks(CHUNK))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
            .sum()
    }
}

/// `y += a x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        y.par_chunks_mut(CHUNK)
            .zip(x.par_chunks(CHUNK))
            .for_each(|(y, x)| y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x));
    }
    #[cfg(not(feature = "parallel"))]
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// `y = a x + b y`.
fn axpby(a: f64, x: &[f64], b: f64, y: &mut [f64]) {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        y.par_chunks_mut(CHUNK)
            .zip(x.par_chunks(CHUNK))
            .for_each(|(y, x)| y.iter_mut().zip(x).for_each(|(y, x)| *y = a * x + b * *y));
    }
    #[cfg(not(feature = "parallel"))]
    y.iter_mut().zip(x).for_each(|(y, x)| *y = a * x + b * *y);
}

/// The discretized cell problem seen by the solvers.
pub trait Problem {
    fn dofs(&self) -> usize;
    fn volume(&self) -> f64;
    /// `out = A u`; returns the stress contribution `Σ_e S_e u_e`.
    fn apply(&self, u: &[f64], out: &mut [f64]) -> Stress6;
    /// `out = Σ Λᵀ Sᵀ ε̄`, the residual at `u = 0`; returns `Σ_e C_e|Y_e| ε̄`.
    fn load(&self, eps: &Strain6, out: &mut [f64]) -> Stress6;
}

pub trait Preconditioner {
    /// `out = P⁺ r`.
    fn apply(&mut self, r: &[f64], out: &mut [f64]);
}

impl<F: crate::greenop::Fft3> Preconditioner for crate::greenop::GreenOperator<F> {
    fn apply(&mut self, r: &[f64], out: &mut [f64]) {
        crate::greenop::GreenOperator::apply(self, r, out)
    }
}

/// `P = I`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&mut self, r: &[f64], out: &mut [f64]) {
        out.copy_from_slice(r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Preconditioned linear conjugate gradients.
    Lcg,
    /// Fixed-step gradient descent with step `1/s₀`.
    Basic,
    /// Gradient descent with the Barzilai–Borwein step.
    BarzilaiBorwein,
    /// Fletcher–Reeves nonlinear conjugate gradients with a secant line search.
    Ncg,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Lcg => "lcg",
            Scheme::Basic => "basic",
            Scheme::BarzilaiBorwein => "bb",
            Scheme::Ncg => "ncg",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "lcg" | "cg" => Some(Scheme::Lcg),
            "basic" => Some(Scheme::Basic),
            "bb" => Some(Scheme::BarzilaiBorwein),
            "ncg" => Some(Scheme::Ncg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub tol: f64,
    pub maxit: usize,
    /// `s₀ = (λ⁻ + λ⁺)/2` of the phase stiffnesses, the inverse step size of
    /// the gradient schemes.
    pub reference_stiffness: f64,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.maxit == 0 {
            return Err(Error::InvalidConfig("maxit must be at least 1".into()));
        }
        if !(self.reference_stiffness > 0.0 && self.reference_stiffness.is_finite()) {
            return Err(Error::InvalidConfig("reference stiffness must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `√(rᵀP⁺r)`.
    pub absolute: f64,
    /// `√(rᵀP⁺r) / (|Y| ‖⟨σ⟩‖)`.
    pub residual: f64,
    pub stress: Stress6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Relative residual of the last iterate as tracked by the scheme.
    pub residual: f64,
    /// Relative residual recomputed from scratch at the returned `u`.
    pub verified_residual: f64,
    pub stress: Stress6,
    pub history: Vec<f64>,
}

struct Tracker<'a> {
    volume: f64,
    tol: f64,
    history: Vec<f64>,
    observer: Option<&'a mut dyn FnMut(&IterationRecord)>,
}

impl Tracker<'_> {
    fn absolute(&self, rps: f64) -> f64 {
        libm::sqrt(rps.max(0.0))
    }

    fn relative(&self, rps: f64, stress: &Stress6) -> f64 {
        let res = self.absolute(rps);
        let s = self.volume * stress.norm();
        if stress.norm() < 1e-300 {
            res
        } else {
            res / s
        }
    }

    /// Records iteration `k` and reports convergence.
    fn record(&mut self, k: usize, rps: f64, sum_stress: &Stress6) -> (bool, f64) {
        let stress = sum_stress / self.volume;
        let rel = self.relative(rps, &stress);
        self.history.push(rel);
        let absolute = self.absolute(rps);
        if let Some(obs) = self.observer.as_mut() {
            obs(&IterationRecord {
                iteration: k,
                absolute,
                residual: rel,
                stress,
            });
        }
        (rel <= self.tol, rel)
    }
}

/// Solves the cell problem for the average strain `eps` from `u = 0`.
pub fn solve<P: Problem, M: Preconditioner>(
    problem: &P,
    precond: &mut M,
    eps: &Strain6,
    config: &SolverConfig,
    observer: Option<&mut dyn FnMut(&IterationRecord)>,
) -> Result<SolveResult> {
    config.validate()?;
    let n = problem.dofs();
    let mut u = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut stress = problem.load(eps, &mut r);
    let mut tracker = Tracker {
        volume: problem.volume(),
        tol: config.tol,
        history: Vec::new(),
        observer,
    };
    let mut s = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut d = vec![0.0; n];
    precond.apply(&r, &mut s);
    let mut rs = dot(&r, &s);
    if rs < -1e-12 * dot(&r, &r).max(1e-300) {
        return Err(Error::IndefinitePreconditioner(rs));
    }
    let (mut converged, mut rel) = tracker.record(0, rs, &stress);
    let mut k = 0;
    let mut tau_prev = 1.0 / config.reference_stiffness;
    while !converged && k < config.maxit {
        match config.scheme {
            Scheme::Lcg | Scheme::Ncg => {
                if k == 0 {
                    axpby(-1.0, &s, 0.0, &mut d);
                }
                let dstress = problem.apply(&d, &mut q);
                let curvature = dot(&d, &q);
                let slope = dot(&r, &d);
                if !(curvature > 0.0) {
                    return Err(Error::Indefinite {
                        iteration: k,
                        curvature,
                    });
                }
                // Exact minimizer along d; for the secant variant the
                // two-point secant on the gradient gives the same value.
                let alpha = if config.scheme == Scheme::Lcg { rs / curvature } else { -slope / curvature };
                axpy(alpha, &d, &mut u);
                axpy(alpha, &q, &mut r);
                stress += dstress * alpha;
                precond.apply(&r, &mut s);
                let rs_new = dot(&r, &s);
                let beta = rs_new / rs;
                rs = rs_new;
                axpby(-1.0, &s, beta, &mut d);
                if config.scheme == Scheme::Ncg && dot(&r, &d) >= 0.0 {
                    axpby(-1.0, &s, 0.0, &mut d);
                }
            }
            Scheme::Basic | Scheme::BarzilaiBorwein => {
                let tau = if config.scheme == Scheme::Basic { 1.0 / config.reference_stiffness } else { tau_prev };
                let dstress = problem.apply(&s, &mut q);
                let curvature = dot(&s, &q);
                if config.scheme == Scheme::BarzilaiBorwein {
                    // Next step: exact line-search step along the current
                    // direction (BB1 with the P metric).
                    tau_prev = if curvature > 0.0 { rs / curvature } else { 1.0 / config.reference_stiffness };
                }
                axpy(-tau, &s, &mut u);
                axpy(-tau, &q, &mut r);
                stress -= dstress * tau;
                precond.apply(&r, &mut s);
                rs = dot(&r, &s);
            }
        }
        k += 1;
        (converged, rel) = tracker.record(k, rs, &stress);
    }
    // Recompute the residual and stress from u.
    let mut r_true = vec![0.0; n];
    let mut stress_true = problem.load(eps, &mut r_true) + problem.apply(&u, &mut q);
    axpy(1.0, &q, &mut r_true);
    precond.apply(&r_true, &mut s);
    let verified = tracker.relative(dot(&r_true, &s), &(stress_true / tracker.volume));
    stress_true /= tracker.volume;
    Ok(SolveResult {
        u,
        iterations: k,
        converged,
        residual: rel,
        verified_residual: verified,
        stress: stress_true,
        history: tracker.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{rngs::StdRng, Rng, SeedableRng};

    /// A dense SPD system with a stress map, to exercise the schemes apart from
    /// the mechanics.
    struct Dense {
        a: DMatrix<f64>,
        load: DMatrix<f64>,
    }

    impl Dense {
        fn new(n: usize, cond: f64, seed: u64) -> Self {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = m.qr().q();
            let eig = DVector::from_fn(n, |i, _| 1.0 + (cond - 1.0) * i as f64 / (n - 1) as f64);
            let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
            let load = DMatrix::from_fn(n, 6, |_, _| rng.gen_range(-1.0..1.0));
            Dense {
                a,
                load,
            }
        }

        fn exact(&self, eps: &Strain6) -> DVector<f64> {
            let b = &self.load * DVector::from_column_slice(eps.as_slice());
            -self.a.clone().cholesky().unwrap().solve(&b)
        }
    }

    impl Problem for Dense {
        fn dofs(&self) -> usize {
            self.a.nrows()
        }
        fn volume(&self) -> f64 {
            1.0
        }
        fn apply(&self, u: &[f64], out: &mut [f64]) -> Stress6 {
            let v = &self.a * DVector::from_column_slice(u);
            out.copy_from_slice(v.as_slice());
            // A stress functional: first six entries of A u.
            Stress6::from_fn(|i, _| v[i])
        }
        fn load(&self, eps: &Strain6, out: &mut [f64]) -> Stress6 {
            let v = &self.load * DVector::from_column_slice(eps.as_slice());
            out.copy_from_slice(v.as_slice());
            Stress6::from_fn(|i, _| 10.0 + v[i])
        }
    }

    fn config(scheme: Scheme) -> SolverConfig {
        SolverConfig {
            scheme,
            tol: 1e-10,
            maxit: 2000,
            reference_stiffness: 5.5,
        }
    }

    #[test]
    fn all_schemes_reach_the_exact_solution() {
        let p = Dense::new(40, 10.0, 1);
        let eps = Strain6::new(1.0, 0.5, -0.2, 0.1, 0.0, 0.3);
        let exact = p.exact(&eps);
        for scheme in [Scheme::Lcg, Scheme::Basic, Scheme::BarzilaiBorwein, Scheme::Ncg] {
            let res = solve(&p, &mut IdentityPreconditioner, &eps, &config(scheme), None).unwrap();
            assert!(res.converged, "{scheme:?}");
            let err = (DVector::from_vec(res.u.clone()) - &exact).norm() / exact.norm();
            assert!(err < 1e-8, "{scheme:?}: {err}");
            assert!(res.verified_residual < 1e-9, "{scheme:?}");
        }
    }

    #[test]
    fn cg_terminates_within_distinct_eigenvalue_count() {
        // Four distinct eigenvalues: CG converges in at most four steps.
        let n = 30;
        let mut rng = StdRng::seed_from_u64(2);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let q = m.qr().q();
        let eig = DVector::from_fn(n, |i, _| [1.0, 2.0, 5.0, 9.0][i % 4]);
        let mut p = Dense::new(n, 2.0, 3);
        p.a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let eps = Strain6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let res = solve(&p, &mut IdentityPreconditioner, &eps, &config(Scheme::Lcg), None).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 4, "{}", res.iterations);
    }

    #[test]
    fn cg_and_ncg_agree_on_quadratics() {
        let p = Dense::new(25, 50.0, 4);
        let eps = Strain6::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        let a = solve(&p, &mut IdentityPreconditioner, &eps, &config(Scheme::Lcg), None).unwrap();
        let b = solve(&p, &mut IdentityPreconditioner, &eps, &config(Scheme::Ncg), None).unwrap();
        // Rounding separates the two in late iterations.
        assert!(a.iterations.abs_diff(b.iterations) <= 2);
        for (x, y) in a.history.iter().zip(&b.history).take(8) {
            assert!((x - y).abs() <= 1e-6 * x.max(1e-12));
        }
    }

    #[test]
    fn cg_beats_basic_scheme() {
        let p = Dense::new(60, 100.0, 5);
        let eps = Strain6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let mut cfg = config(Scheme::Basic);
        cfg.reference_stiffness = 50.5;
        cfg.tol = 1e-6;
        let basic = solve(&p, &mut IdentityPreconditioner, &eps, &cfg, None).unwrap();
        cfg.scheme = Scheme::Lcg;
        let cg = solve(&p, &mut IdentityPreconditioner, &eps, &cfg, None).unwrap();
        assert!(basic.converged && cg.converged);
        assert!(cg.iterations < basic.iterations);
    }

    #[test]
    fn observer_sees_every_iteration_and_history_matches() {
        let p = Dense::new(20, 5.0, 6);
        let eps = Strain6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let mut seen = Vec::new();
        let mut obs = |rec: &IterationRecord| seen.push((rec.iteration, rec.residual));
        let res = solve(&p, &mut IdentityPreconditioner, &eps, &config(Scheme::Lcg), Some(&mut obs)).unwrap();
        assert_eq!(seen.len(), res.iterations + 1);
        for (i, (k, r)) in seen.iter().enumerate() {
            assert_eq!(*k, i);
            assert_eq!(*r, res.history[i]);
        }
    }

    #[test]
    fn maxit_reached_reports_not_converged() {
        let p = Dense::new(50, 1000.0, 7);
        let eps = Strain6::new(1.0, 1.0, 1.0, 0.0, 0.0, 0.0);
        let mut cfg = config(Scheme::Basic);
        cfg.maxit = 3;
        cfg.reference_stiffness = 500.5;
        let res = solve(&p, &mut IdentityPreconditioner, &eps, &cfg, None).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 3);
        assert_eq!(res.history.len(), 4);
    }

    #[test]
    fn indefinite_system_is_reported() {
        let mut p = Dense::new(10, 5.0, 8);
        p.a = -p.a.clone();
        let eps = Strain6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let err = solve(&p, &mut IdentityPreconditioner, &eps, &config(Scheme::Lcg), None).unwrap_err();
        assert!(matches!(err, Error::Indefinite { iteration: 0, .. }));
    }

    #[test]
    fn invalid_configuration_rejected() {
        let p = Dense::new(10, 5.0, 9);
        let eps = Strain6::zeros();
        let mut cfg = config(Scheme::Lcg);
        cfg.tol = 0.0;
        assert!(solve(&p, &mut IdentityPreconditioner, &eps, &cfg, None).is_err());
        cfg.tol = 1e-6;
        cfg.maxit = 0;
        assert!(solve(&p, &mut IdentityPreconditioner, &eps, &cfg, None).is_err());
    }

    #[test]
    fn chunked_dot_matches_naive_sum() {
        let mut rng = StdRng::seed_from_u64(10);
        let a: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-10);
    }
}
