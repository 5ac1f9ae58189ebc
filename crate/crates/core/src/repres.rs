//! Representability diagnostics: Hermitian spectra and the
//! one-particle-one-hole matrix `K`.
//!
//! `K` is the Gram matrix of the operators `a_l† a_k`,
//! `K[(i,j),(k,l)] = ⟨a_i† a_j a_l† a_k⟩ / N²`, so it is positive
//! semidefinite for every N-boson state. Pairs `(i, j)` are flattened as
//! `i·m + j`. In terms of trace-one RDMs,
//! `K[(i,j),(k,l)] = [N(N−1) ⟨k j|ρ_2|i l⟩ + δ_{jl} N ⟨k|ρ_1|i⟩] / N²`
//! with `ρ_2` in the ordered pair basis. Its trace is `1 + (m − 1)/N`.

use nalgebra::SymmetricEigen;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::symspace::{embed_ordered, max_abs, partial_trace, CMat, SymOperator};

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: CMat,
}

impl Spectrum {
    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(f64::NAN)
    }
}

fn check_hermitian(a: &CMat) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "matrix is {}x{}, not square",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = max_abs(a).max(1.0);
    let err = max_abs(&(a - a.adjoint()));
    if err > 1e-10 * scale {
        return Err(Error::InvalidArgument(format!(
            "matrix is not Hermitian (|A - A†| = {err:e})"
        )));
    }
    Ok(())
}

fn decompose(a: &CMat) -> Result<SymmetricEigen<Complex64, nalgebra::Dyn>> {
    check_hermitian(a)?;
    let n = a.nrows();
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Eigensolver(n));
    }
    let h = (a + a.adjoint()) * Complex64::new(0.5, 0.0);
    SymmetricEigen::try_new(h, 1e-15, 100_000).ok_or(Error::Eigensolver(n))
}

/// Eigenvalues ascending and orthonormal eigenvectors. Each eigenvector's
/// largest-magnitude component is made real and positive.
pub fn spectrum(a: &CMat) -> Result<Spectrum> {
    let eig = decompose(a)?;
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .unwrap_or(Complex64::new(1.0, 0.0));
        let phase = if pivot.norm() > 0.0 {
            pivot.conj() / pivot.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        vectors.set_column(dst, &(col * phase));
    }
    Ok(Spectrum { values, vectors })
}

/// Eigenvalues only, ascending.
pub fn eigenvalues(a: &SymOperator) -> Result<Vec<f64>> {
    let eig = decompose(a.matrix())?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

#[derive(Debug, Clone)]
pub struct KMatrix {
    m: usize,
    matrix: CMat,
}

impl KMatrix {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn spectrum(&self) -> Result<Spectrum> {
        spectrum(&self.matrix)
    }
}

fn check_order(op: &SymOperator, o: usize) -> Result<()> {
    if op.order() != o {
        return Err(Error::OrderMismatch {
            expected: o,
            got: op.order(),
        });
    }
    Ok(())
}

/// The linear map `(ρ_2, ρ_1) ↦ K`. No consistency check; used for both
/// states and time derivatives.
pub fn k_linear(rho2: &SymOperator, rho1: &SymOperator, n: usize) -> Result<CMat> {
    check_order(rho2, 2)?;
    check_order(rho1, 1)?;
    if rho1.m() != rho2.m() {
        return Err(Error::ModeMismatch(rho2.m(), rho1.m()));
    }
    let m = rho2.m();
    let nf = n as f64;
    let two = embed_ordered(rho2);
    let one = rho1.matrix();
    let w2 = nf * (nf - 1.0) / (nf * nf);
    let w1 = 1.0 / nf;
    let mut k = CMat::zeros(m * m, m * m);
    for i in 0..m {
        for j in 0..m {
            for kk in 0..m {
                for l in 0..m {
                    let mut v = two[(kk * m + j, i * m + l)] * w2;
                    if j == l {
                        v += one[(kk, i)] * w1;
                    }
                    k[(i * m + j, kk * m + l)] = v;
                }
            }
        }
    }
    Ok(k)
}

/// `K` of a compatible pair `(ρ_2, ρ_1 = tr_1 ρ_2)` of an `n`-particle state.
pub fn k_matrix(rho2: &SymOperator, rho1: &SymOperator, n: usize) -> Result<KMatrix> {
    check_order(rho2, 2)?;
    let dev = partial_trace(rho2, 1)?.max_abs_diff(rho1);
    if dev > 1e-8 {
        return Err(Error::Incompatible {
            order: 2,
            deviation: dev,
        });
    }
    Ok(KMatrix {
        m: rho2.m(),
        matrix: k_linear(rho2, rho1, n)?,
    })
}

/// Change of `K` under `ρ_2 → ρ_2 + C` for contraction-free `C`.
pub fn k_perturbation(c: &SymOperator, n: usize) -> Result<CMat> {
    check_order(c, 2)?;
    let contraction = partial_trace(c, 1)?;
    let dev = max_abs(contraction.matrix());
    if dev > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "correction is not contraction-free (|tr_1 C| = {dev:e})"
        )));
    }
    k_linear(c, &contraction, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimer_exact::{exact_rdm, FockState};
    use crate::sampling::random_fock_state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    #[test]
    fn spectrum_examples() {
        let half = CMat::identity(2, 2) * c(0.5);
        let s = spectrum(&half).unwrap();
        assert_eq!(s.values.len(), 2);
        assert!(s.values.iter().all(|v| (v - 0.5).abs() < 1e-15));

        let noon2 = exact_rdm(&FockState::noon(6, 0.0), 2).unwrap();
        let s = spectrum(noon2.matrix()).unwrap();
        assert!(s.values[0].abs() < 1e-14);
        assert!((s.values[1] - 0.5).abs() < 1e-14 && (s.values[2] - 0.5).abs() < 1e-14);

        let cond = exact_rdm(&FockState::all_left(5), 1).unwrap();
        let s = spectrum(cond.matrix()).unwrap();
        assert!(s.values[0].abs() < 1e-15 && (s.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectrum_residual_and_phase() {
        let a = CMat::from_row_slice(
            3,
            3,
            &[
                c(2.0),
                Complex64::new(0.3, 0.4),
                c(0.0),
                Complex64::new(0.3, -0.4),
                c(-1.0),
                Complex64::new(0.0, 1.0),
                c(0.0),
                Complex64::new(0.0, -1.0),
                c(0.5),
            ],
        );
        let s = spectrum(&a).unwrap();
        assert!(s.values.windows(2).all(|w| w[0] <= w[1]));
        let scale = a.norm();
        for i in 0..3 {
            let v = s.vectors.column(i);
            let r = &a * v - v * c(s.values[i]);
            assert!(r.norm() < 1e-10 * scale);
            let pivot = v.iter().max_by(|x, y| x.norm().total_cmp(&y.norm())).unwrap();
            assert!(pivot.im.abs() < 1e-14 && pivot.re > 0.0);
        }
        let ortho = s.vectors.adjoint() * &s.vectors;
        assert!(max_abs(&(ortho - CMat::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn spectrum_rejects_non_hermitian() {
        let a = CMat::from_row_slice(2, 2, &[c(1.0), c(1.0), c(0.0), c(1.0)]);
        assert!(spectrum(&a).is_err());
    }

    #[test]
    fn condensate_k_spectrum() {
        for n in [2usize, 10, 100] {
            let psi = FockState::all_left(n);
            let k = k_matrix(&exact_rdm(&psi, 2).unwrap(), &exact_rdm(&psi, 1).unwrap(), n).unwrap();
            let s = k.spectrum().unwrap();
            let want = [0.0, 0.0, 1.0 / n as f64, 1.0];
            for (a, b) in s.values.iter().zip(want) {
                assert!((a - b).abs() < 1e-10, "n={n}: {:?}", s.values);
            }
        }
    }

    #[test]
    fn k_matches_second_quantized_gram() {
        // brute force ⟨a_i† a_j a_l† a_k⟩ on the two-mode Fock space
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 5;
        let psi = random_fock_state(n, &mut rng);
        let dim = n + 1;
        // operators in the fixed-N sector: basis index r = atoms right
        let mut hop = vec![vec![CMat::zeros(dim, dim); 2]; 2]; // hop[i][j] = a_i† a_j
        for r in 0..=n {
            let l = n - r;
            hop[0][0][(r, r)] = c(l as f64);
            hop[1][1][(r, r)] = c(r as f64);
            if r < n {
                // a_R† a_L : r -> r+1
                hop[1][0][(r + 1, r)] = c(((l * (r + 1)) as f64).sqrt());
                hop[0][1][(r, r + 1)] = c(((l * (r + 1)) as f64).sqrt());
            }
        }
        let v = nalgebra::DVector::from_column_slice(psi.coeffs());
        let k = k_matrix(&exact_rdm(&psi, 2).unwrap(), &exact_rdm(&psi, 1).unwrap(), n).unwrap();
        let nf2 = (n * n) as f64;
        for i in 0..2 {
            for j in 0..2 {
                for kk in 0..2 {
                    for l in 0..2 {
                        let op = &hop[i][j] * &hop[l][kk];
                        let want = (v.adjoint() * op * &v)[(0, 0)] / nf2;
                        let got = k.matrix()[(i * 2 + j, kk * 2 + l)];
                        assert!((got - want).norm() < 1e-12);
                    }
                }
            }
        }
        let tr = k.matrix().trace().re;
        assert!((tr - (1.0 + 1.0 / n as f64)).abs() < 1e-12);
    }

    #[test]
    fn k_perturbation_is_exact_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let psi = random_fock_state(n, &mut rng);
        let r2 = exact_rdm(&psi, 2).unwrap();
        let r1 = exact_rdm(&psi, 1).unwrap();
        // contraction-free perturbation: difference of two pair states with equal 1-RDM
        let x = SymOperator::projector(2, &[1, 1]).unwrap();
        let y = SymOperator::projector(2, &[2, 0])
            .unwrap()
            .try_add(&SymOperator::projector(2, &[0, 2]).unwrap())
            .unwrap()
            .scaled(0.5);
        let cf = x.try_sub(&y).unwrap();
        assert!(max_abs(partial_trace(&cf, 1).unwrap().matrix()) < 1e-15);
        let s = 1e-3;
        let k0 = k_matrix(&r2, &r1, n).unwrap();
        let k1 = k_matrix(&r2.try_add(&cf.scaled(s)).unwrap(), &r1, n).unwrap();
        let dk = k_perturbation(&cf, n).unwrap();
        assert!(max_abs(&((k1.matrix() - k0.matrix()) - dk.clone() * c(s))) < 1e-15);
        assert!(dk.trace().norm() < 1e-15);
        assert!(max_abs(&k_perturbation(&SymOperator::zeros(2, 2).unwrap(), n).unwrap()) == 0.0);
        assert!(k_perturbation(&x, n).is_err());
    }
}
