//! Seeded synthetic states for tests and validation runs.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dimer_exact::FockState;
use crate::error::Result;
use crate::symspace::{CMat, SymBasis, SymOperator};

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im)
}

/// Haar-random normalized state of `n` bosons in the two-site Fock basis.
pub fn random_fock_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> FockState {
    let v: Vec<Complex64> = (0..=n).map(|_| gaussian_complex(rng)).collect();
    FockState::normalized(v).expect("gaussian vector is nonzero")
}

/// Random Hermitian matrix with unit trace (not necessarily positive).
pub fn random_hermitian_unit_trace<R: Rng + ?Sized>(
    m: usize,
    o: usize,
    rng: &mut R,
) -> Result<SymOperator> {
    let basis = SymBasis::shared(m, o)?;
    let d = basis.dim();
    let g = CMat::from_fn(d, d, |_, _| gaussian_complex(rng));
    let mut h = (&g + g.adjoint()) * Complex64::new(0.5, 0.0);
    let shift = (Complex64::new(1.0, 0.0) - h.trace()) / d as f64;
    for i in 0..d {
        h[(i, i)] += shift;
    }
    SymOperator::new(basis, h)
}

/// Random density matrix `G G† / tr(G G†)`.
pub fn random_density<R: Rng + ?Sized>(m: usize, o: usize, rng: &mut R) -> Result<SymOperator> {
    let basis = SymBasis::shared(m, o)?;
    let d = basis.dim();
    let g = CMat::from_fn(d, d, |_, _| gaussian_complex(rng));
    let mut rho = &g * g.adjoint();
    let t = rho.trace();
    rho /= t;
    SymOperator::new(basis, rho)
}
