//! Exact N-boson solution of the two-site Bose-Hubbard model
//!
//! `H = -J (a_L† a_R + a_R† a_L) + (U/2) Σ_s n_s (n_s - 1)`
//!
//! in the Fock basis `|N - n, n⟩` (`n` atoms on the right site).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::bbgky::Rdm;
use crate::error::{Error, Result};
use crate::symspace::{binom, CMat, SymBasis, SymOperator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimerParams {
    pub n: usize,
    pub j: f64,
    pub u: f64,
}

impl DimerParams {
    pub fn new(n: usize, j: f64, u: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidArgument("need at least one particle".into()));
        }
        if !(j > 0.0) || !u.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need J > 0 and finite U, got J={j}, U={u}"
            )));
        }
        Ok(Self { n, j, u })
    }

    /// Parameters at fixed `Λ = U (N - 1) / (2 J)`.
    pub fn from_lambda(n: usize, j: f64, lambda: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(
                "Λ is only defined for N >= 2".into(),
            ));
        }
        Self::new(n, j, 2.0 * j * lambda / (n as f64 - 1.0))
    }

    pub fn lambda(&self) -> f64 {
        self.u * (self.n as f64 - 1.0) / (2.0 * self.j)
    }

    /// Quantum break time `sqrt(2N + 1) / (J Λ)`.
    pub fn break_time(&self) -> f64 {
        (2.0 * self.n as f64 + 1.0).sqrt() / (self.j * self.lambda())
    }
}

/// Coefficients in the basis `|N - n, n⟩`, entry `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    coeffs: Vec<Complex64>,
}

impl FockState {
    pub fn new(coeffs: Vec<Complex64>) -> Result<Self> {
        let s = Self { coeffs };
        if (s.norm_sqr() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "state norm² is {}, expected 1",
                s.norm_sqr()
            )));
        }
        Ok(s)
    }

    pub fn normalized(mut coeffs: Vec<Complex64>) -> Result<Self> {
        let norm = coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument("cannot normalize zero vector".into()));
        }
        coeffs.iter_mut().for_each(|c| *c /= norm);
        Ok(Self { coeffs })
    }

    /// `|N, 0⟩`: every atom in the left well.
    pub fn all_left(n: usize) -> Self {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n + 1];
        coeffs[0] = Complex64::new(1.0, 0.0);
        Self { coeffs }
    }

    /// `(|N, 0⟩ + e^{iθ} |0, N⟩) / √2`.
    pub fn noon(n: usize, theta: f64) -> Self {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); n + 1];
        let s = std::f64::consts::FRAC_1_SQRT_2;
        coeffs[0] = Complex64::new(s, 0.0);
        coeffs[n] += Complex64::from_polar(s, theta);
        Self { coeffs }
    }

    pub fn particles(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }
}

pub fn build_hamiltonian(p: &DimerParams) -> DMatrix<f64> {
    let n = p.n;
    let mut h = DMatrix::zeros(n + 1, n + 1);
    for r in 0..=n {
        let l = n - r;
        h[(r, r)] = 0.5 * p.u * ((l * l.saturating_sub(1)) + r * r.saturating_sub(1)) as f64;
        if r < n {
            let t = -p.j * ((l * (r + 1)) as f64).sqrt();
            h[(r + 1, r)] = t;
            h[(r, r + 1)] = t;
        }
    }
    h
}

/// Spectral propagator `exp(-i H t)` of a fixed dimer Hamiltonian.
#[derive(Debug, Clone)]
pub struct DimerPropagator {
    params: DimerParams,
    energies: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl DimerPropagator {
    pub fn new(params: DimerParams) -> Result<Self> {
        let h = build_hamiltonian(&params);
        let dim = h.nrows();
        let eig = SymmetricEigen::try_new(h, 1e-15, 10_000).ok_or(Error::Eigensolver(dim))?;
        Ok(Self {
            params,
            energies: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    pub fn params(&self) -> &DimerParams {
        &self.params
    }

    pub fn energies(&self) -> &DVector<f64> {
        &self.energies
    }

    pub fn evolve(&self, psi0: &FockState, t: f64) -> Result<FockState> {
        let dim = self.energies.len();
        if psi0.coeffs.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "state has {} coefficients, propagator expects {dim}",
                psi0.coeffs.len()
            )));
        }
        // c_k = <k|ψ0>, then ψ(t) = Σ_k e^{-i E_k t} c_k |k⟩
        let mut out = vec![Complex64::new(0.0, 0.0); dim];
        for k in 0..dim {
            let v = self.vectors.column(k);
            let ck: Complex64 = v
                .iter()
                .zip(&psi0.coeffs)
                .map(|(&a, &b)| b * a)
                .sum();
            let ph = Complex64::from_polar(1.0, -self.energies[k] * t) * ck;
            for (o, &a) in out.iter_mut().zip(v.iter()) {
                *o += ph * a;
            }
        }
        Ok(FockState { coeffs: out })
    }

    /// `⟨ψ|H|ψ⟩`.
    pub fn energy(&self, psi: &FockState) -> f64 {
        let h = build_hamiltonian(&self.params);
        let c = &psi.coeffs;
        let mut e = 0.0;
        for i in 0..c.len() {
            for j in 0..c.len() {
                e += (c[i].conj() * c[j]).re * h[(i, j)];
            }
        }
        e
    }
}

/// One-shot `exp(-i H t) ψ0`.
pub fn evolve(psi0: &FockState, p: &DimerParams, t: f64) -> Result<FockState> {
    DimerPropagator::new(*p)?.evolve(psi0, t)
}

/// Trace-one `o`-RDM of an N-boson dimer state, in the two-mode occupation
/// basis of order `o`.
///
/// With `a^n = a_L^{n_L} a_R^{n_R}` the element is
/// `⟨n|ρ_o|n'⟩ = o! (N-o)!/N! ⟨(a†)^{n'} a^n⟩ / sqrt(n! n'!)`, evaluated as a
/// Gram product of the vectors `a^n ψ` with hypergeometric weights
/// `sqrt(C(N-r, n_L) C(r, n_R) / C(N, o))` that never exceed one.
pub fn exact_rdm(psi: &FockState, o: usize) -> Result<Rdm> {
    let n = psi.particles();
    if o == 0 || o > n {
        return Err(Error::InvalidArgument(format!(
            "RDM order {o} outside 1..={n}"
        )));
    }
    let basis = SymBasis::shared(2, o)?;
    let d = basis.dim();
    let rest = n - o + 1;
    let norm = binom(n, o);
    // amp[i][s] = component of a^{n_i} ψ along |N-o-s, s⟩ (normalized)
    let amp: Vec<Vec<Complex64>> = (0..d)
        .map(|i| {
            let (nl, nr) = (o - i, i);
            (0..rest)
                .map(|s| {
                    let r = s + nr;
                    let w = binom(n - r, nl) * binom(r, nr) / norm;
                    psi.coeffs[r] * w.sqrt()
                })
                .collect()
        })
        .collect();
    let mat = CMat::from_fn(d, d, |i, j| {
        amp[i]
            .iter()
            .zip(&amp[j])
            .map(|(a, b)| a * b.conj())
            .sum()
    });
    Rdm::new(SymOperator::new(basis, mat)?)
}

/// `|⟨N - n, n|ψ⟩|²` for `n = 0..=N`.
pub fn fock_probabilities(psi: &FockState) -> Vec<f64> {
    psi.coeffs.iter().map(|c| c.norm_sqr()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symspace::partial_trace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force second quantization on the full two-mode Fock space
    /// truncated to `n` particles, used as an independent oracle.
    fn ladder(n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        // basis |l, r⟩ with l + r = n, l, r in 0..=n, flattened as l*(n+1)+r
        let dim = (n + 1) * (n + 1);
        let mut al = DMatrix::zeros(dim, dim);
        let mut ar = DMatrix::zeros(dim, dim);
        for l in 0..=n {
            for r in 0..=n {
                let from = l * (n + 1) + r;
                if l > 0 {
                    al[((l - 1) * (n + 1) + r, from)] = (l as f64).sqrt();
                }
                if r > 0 {
                    ar[(l * (n + 1) + r - 1, from)] = (r as f64).sqrt();
                }
            }
        }
        (al, ar)
    }

    #[test]
    fn hamiltonian_matches_second_quantization() {
        let p = DimerParams::new(5, 1.3, 0.7).unwrap();
        let n = p.n;
        let (al, ar) = ladder(n);
        let nl = al.transpose() * &al;
        let nr = ar.transpose() * &ar;
        let id = DMatrix::<f64>::identity(nl.nrows(), nl.ncols());
        let h2 = -p.j * (al.transpose() * &ar + ar.transpose() * &al)
            + 0.5 * p.u * (&nl * (&nl - &id) + &nr * (&nr - &id));
        let h = build_hamiltonian(&p);
        for r in 0..=n {
            for r2 in 0..=n {
                let a = (n - r) * (n + 1) + r;
                let b = (n - r2) * (n + 1) + r2;
                assert!((h[(r, r2)] - h2[(a, b)]).abs() < 1e-12);
            }
        }
        assert!((h[(1, 0)] + p.j * (n as f64).sqrt()).abs() < 1e-14);
        assert!((h[(0, 0)] - p.u * (n * (n - 1)) as f64 / 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_particle_splitting() {
        let p = DimerParams::new(1, 1.0, 0.0).unwrap();
        let prop = DimerPropagator::new(p).unwrap();
        let mut e: Vec<f64> = prop.energies().iter().copied().collect();
        e.sort_by(f64::total_cmp);
        assert!((e[0] + 1.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lambda_roundtrip() {
        let p = DimerParams::from_lambda(10, 1.0, 0.1).unwrap();
        assert!((p.lambda() - 0.1).abs() < 1e-12);
        assert!((p.u - 0.2 / 9.0).abs() < 1e-15);
        assert!((p.break_time() - 45.83).abs() < 0.01);
        assert!(DimerParams::new(3, 0.0, 1.0).is_err());
    }

    #[test]
    fn evolve_identity_and_norm() {
        let p = DimerParams::from_lambda(10, 1.0, 0.1).unwrap();
        let prop = DimerPropagator::new(p).unwrap();
        let psi0 = FockState::all_left(10);
        let same = prop.evolve(&psi0, 0.0).unwrap();
        for (a, b) in same.coeffs().iter().zip(psi0.coeffs()) {
            assert!((a - b).norm() < 1e-13);
        }
        let e0 = prop.energy(&psi0);
        for t in [1.0, 17.3, 99.0] {
            let psi = prop.evolve(&psi0, t).unwrap();
            assert!((psi.norm_sqr() - 1.0).abs() < 1e-10);
            assert!((prop.energy(&psi) - e0).abs() <= 1e-10 * e0.abs().max(1.0));
        }
    }

    #[test]
    fn free_tunneling_is_rabi() {
        let p = DimerParams::new(7, 1.0, 0.0).unwrap();
        let prop = DimerPropagator::new(p).unwrap();
        let psi0 = FockState::all_left(7);
        for k in 0..=100 {
            let t = k as f64;
            let rho1 = exact_rdm(&prop.evolve(&psi0, t).unwrap(), 1).unwrap();
            let imb = (rho1.matrix()[(0, 0)] - rho1.matrix()[(1, 1)]).re;
            assert!((imb - (2.0 * t).cos()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn rdm_of_condensate_and_noon() {
        for o in 1..=6 {
            let r = exact_rdm(&FockState::all_left(6), o).unwrap();
            let want = SymOperator::projector(2, &[o as u16, 0]).unwrap();
            assert!(r.max_abs_diff(&want) < 1e-14);
        }
        let noon = FockState::noon(8, 0.7);
        for o in 1..8 {
            let r = exact_rdm(&noon, o).unwrap();
            let want = SymOperator::projector(2, &[o as u16, 0])
                .unwrap()
                .try_add(&SymOperator::projector(2, &[0, o as u16]).unwrap())
                .unwrap()
                .scaled(0.5);
            assert!(r.max_abs_diff(&want) < 1e-14, "o={o}");
        }
        assert!(exact_rdm(&noon, 9).is_err());
        assert!(exact_rdm(&noon, 0).is_err());
    }

    #[test]
    fn rdm_matches_second_quantized_moments() {
        // ⟨a_j† a_i⟩ / N and ⟨a†a† a a⟩ / (N(N-1)) from brute-force ladders
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 4;
        let psi = crate::sampling::random_fock_state(n, &mut rng);
        let (al, ar) = ladder(n);
        let dim = (n + 1) * (n + 1);
        let mut v = DVector::<Complex64>::zeros(dim);
        for (r, c) in psi.coeffs().iter().enumerate() {
            v[(n - r) * (n + 1) + r] = *c;
        }
        let lift = |m: &DMatrix<f64>| m.map(|x| Complex64::new(x, 0.0));
        let (al, ar) = (lift(&al), lift(&ar));
        let ops = [&al, &ar];
        let expect = |m: &CMat| (v.adjoint() * m * &v)[(0, 0)];
        let rho1 = exact_rdm(&psi, 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = expect(&(ops[j].adjoint() * ops[i])) / n as f64;
                assert!((rho1.matrix()[(i, j)] - want).norm() < 1e-12);
            }
        }
        // order 2: |2,0⟩ = a_L†²/√2, |1,1⟩ = a_L† a_R†, |0,2⟩ = a_R†²/√2
        let pair = |i: usize| -> (CMat, f64) {
            match i {
                0 => (&al * &al, 2f64.sqrt()),
                1 => (&al * &ar, 1.0),
                _ => (&ar * &ar, 2f64.sqrt()),
            }
        };
        let rho2 = exact_rdm(&psi, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (ai, ni) = pair(i);
                let (aj, nj) = pair(j);
                let want = expect(&(aj.adjoint() * ai)) * 2.0 / (ni * nj * (n * (n - 1)) as f64);
                assert!((rho2.matrix()[(i, j)] - want).norm() < 1e-12, "{i},{j}");
            }
        }
        assert!((partial_trace(&rho2, 1).unwrap().max_abs_diff(&rho1)) < 1e-10);
    }

    #[test]
    fn fock_probabilities_sum_to_one() {
        assert_eq!(fock_probabilities(&FockState::all_left(3)), vec![1.0, 0.0, 0.0, 0.0]);
        let p = fock_probabilities(&FockState::noon(4, 0.3));
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[4] - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let psi = crate::sampling::random_fock_state(20, &mut rng);
        assert!((fock_probabilities(&psi).iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}
