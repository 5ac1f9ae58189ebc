//! Truncated BBGKY equation of motion for the top propagated RDM.
//!
//! With trace-one RDMs and `H = Σ_k h^(k) + Σ_{k<l} W^(kl)`,
//!
//! ```text
//! i dρ_o/dt = [H_o, ρ_o] + (N − o) Σ_{k=1}^{o} tr_{o+1}[W^(k,o+1), ρ_{o+1}]
//! ```
//!
//! Writing `Σ_k W^(k,o+1) = V_{o+1} − V_o ⊗ 1` with `V_o` the pair
//! interaction of `o` particles, the collision integral becomes
//! `tr_1[V_{o+1}, ρ_{o+1}] − [V_o, tr_1 ρ_{o+1}]`, which only needs operators
//! on symmetric spaces.

use std::ops::Deref;

use num_complex::Complex64;

use crate::cluster::{closure_with, ClosureStrategy, ClusterWeights};
use crate::dimer_exact::DimerParams;
use crate::error::{Error, Result};
use crate::symspace::{embed_ordered, partial_trace, trace_down, CMat, SymBasis, SymOperator, ZERO};

/// Reduced density matrix: a Hermitian operator on a symmetric space,
/// normalized to unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Rdm(SymOperator);

impl Rdm {
    /// Wraps a Hermitian operator. The trace is not enforced because
    /// unstable trajectories are kept as data.
    pub fn new(op: SymOperator) -> Result<Self> {
        let scale = op.matrix().norm().max(1.0);
        let err = op.hermiticity_error();
        if !(err <= 1e-10 * scale) {
            return Err(Error::InvalidArgument(format!(
                "RDM is not Hermitian (|ρ - ρ†| = {err:e})"
            )));
        }
        Ok(Self(op))
    }

    pub fn operator(&self) -> &SymOperator {
        &self.0
    }

    pub fn into_operator(self) -> SymOperator {
        self.0
    }

    /// Partial trace down to order `o`.
    pub fn traced(&self, o: usize) -> Result<Rdm> {
        Ok(Rdm(trace_down(&self.0, o)?))
    }

    /// `ρ_1 … ρ_o` with `ρ_o = self`.
    pub fn family(&self) -> Result<Vec<Rdm>> {
        (1..=self.order()).map(|o| self.traced(o)).collect()
    }

    /// Lower triangle, row by row: diagonal entries contribute their real
    /// part, off-diagonal entries real and imaginary parts. Length `dim²`.
    pub fn pack(&self) -> Vec<f64> {
        pack_lower(self.matrix())
    }

    pub fn from_packed(m: usize, o: usize, packed: &[f64]) -> Result<Self> {
        let basis = SymBasis::shared(m, o)?;
        let d = basis.dim();
        if packed.len() != d * d {
            return Err(Error::InvalidArgument(format!(
                "packed length {} != {}",
                packed.len(),
                d * d
            )));
        }
        Ok(Rdm(SymOperator::new(basis, unpack_lower(d, packed))?))
    }
}

impl Deref for Rdm {
    type Target = SymOperator;

    fn deref(&self) -> &SymOperator {
        &self.0
    }
}

pub(crate) fn pack_lower(a: &CMat) -> Vec<f64> {
    let d = a.nrows();
    let mut out = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..i {
            out.push(a[(i, j)].re);
            out.push(a[(i, j)].im);
        }
        out.push(a[(i, i)].re);
    }
    out
}

pub(crate) fn unpack_lower(d: usize, packed: &[f64]) -> CMat {
    let mut a = CMat::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..i {
            let z = Complex64::new(packed[k], packed[k + 1]);
            a[(i, j)] = z;
            a[(j, i)] = z.conj();
            k += 2;
        }
        a[(i, i)] = Complex64::new(packed[k], 0.0);
        k += 1;
    }
    a
}

/// One- and two-body terms of the Hamiltonian plus particle bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOperators {
    /// One-body matrix, `m × m`.
    pub h: CMat,
    /// Two-body matrix `⟨ij|W|kl⟩` on ordered pairs, index `i·m + j`.
    pub w: CMat,
    /// Total particle number.
    pub n: usize,
    /// Truncation order.
    pub order: usize,
}

impl ModelOperators {
    pub fn new(h: CMat, w: CMat, n: usize, order: usize) -> Result<Self> {
        let m = h.nrows();
        if h.ncols() != m || w.nrows() != m * m || w.ncols() != m * m {
            return Err(Error::InvalidArgument(
                "h must be m×m and W m²×m²".into(),
            ));
        }
        if order == 0 || order > n {
            return Err(Error::InvalidArgument(format!(
                "truncation order {order} outside 1..={n}"
            )));
        }
        Ok(Self { h, w, n, order })
    }

    /// Two-site Bose-Hubbard model, modes `L = 0`, `R = 1`.
    pub fn bose_hubbard(p: &DimerParams, order: usize) -> Result<Self> {
        let mut h = CMat::zeros(2, 2);
        h[(0, 1)] = Complex64::new(-p.j, 0.0);
        h[(1, 0)] = Complex64::new(-p.j, 0.0);
        let mut w = CMat::zeros(4, 4);
        w[(0, 0)] = Complex64::new(p.u, 0.0);
        w[(3, 3)] = Complex64::new(p.u, 0.0);
        Self::new(h, w, p.n, order)
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }
}

/// Applies `a_s` to an occupation vector, returning the amplitude.
fn lower(occ: &mut [u16], s: usize) -> Option<f64> {
    if occ[s] == 0 {
        return None;
    }
    let a = (occ[s] as f64).sqrt();
    occ[s] -= 1;
    Some(a)
}

fn raise(occ: &mut [u16], s: usize) -> f64 {
    occ[s] += 1;
    (occ[s] as f64).sqrt()
}

/// `Σ h_ij a_i† a_j` on the order-`o` occupation basis.
pub fn one_body(h: &CMat, o: usize) -> Result<SymOperator> {
    let m = h.nrows();
    let basis = SymBasis::shared(m, o)?;
    let d = basis.dim();
    let mut out = CMat::zeros(d, d);
    for (col, n) in basis.states().iter().enumerate() {
        for j in 0..m {
            let mut a = n.clone();
            let Some(aj) = lower(&mut a, j) else { continue };
            for i in 0..m {
                let hij = h[(i, j)];
                if hij == ZERO {
                    continue;
                }
                let mut b = a.clone();
                let ai = raise(&mut b, i);
                let row = basis.index_of(&b).expect("number conserving");
                out[(row, col)] += hij * (aj * ai);
            }
        }
    }
    SymOperator::new(basis, out)
}

/// `½ Σ ⟨ij|W|kl⟩ a_i† a_j† a_l a_k` on the order-`o` occupation basis.
pub fn two_body(w: &CMat, m: usize, o: usize) -> Result<SymOperator> {
    let basis = SymBasis::shared(m, o)?;
    let d = basis.dim();
    let mut out = CMat::zeros(d, d);
    for (col, n) in basis.states().iter().enumerate() {
        for k in 0..m {
            let mut s1 = n.clone();
            let Some(ak) = lower(&mut s1, k) else { continue };
            for l in 0..m {
                let mut s2 = s1.clone();
                let Some(al) = lower(&mut s2, l) else { continue };
                for j in 0..m {
                    let mut s3 = s2.clone();
                    let aj = raise(&mut s3, j);
                    for i in 0..m {
                        let wv = w[(i * m + j, k * m + l)];
                        if wv == ZERO {
                            continue;
                        }
                        let mut s4 = s3.clone();
                        let ai = raise(&mut s4, i);
                        let row = basis.index_of(&s4).expect("number conserving");
                        out[(row, col)] += wv * (0.5 * ak * al * aj * ai);
                    }
                }
            }
        }
    }
    SymOperator::new(basis, out)
}

/// `Σ_k h^(k) + Σ_{k<l} W^(kl)` restricted to the symmetric `o`-particle space.
pub fn h_full(ops: &ModelOperators, o: usize) -> Result<SymOperator> {
    if o == 0 {
        return Err(Error::InvalidArgument("h_full needs o >= 1".into()));
    }
    one_body(&ops.h, o)?.try_add(&two_body(&ops.w, ops.m(), o)?)
}

fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Truncated hierarchy at order `ops.order` with precomputed operators.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    ops: ModelOperators,
    closure: ClosureStrategy,
    weights: ClusterWeights,
    h_top: CMat,
    v_top: CMat,
    v_next: CMat,
}

impl Hierarchy {
    pub fn new(ops: ModelOperators, closure: ClosureStrategy) -> Result<Self> {
        Self::with_weights(ops, closure, ClusterWeights::default())
    }

    pub fn with_weights(
        ops: ModelOperators,
        closure: ClosureStrategy,
        weights: ClusterWeights,
    ) -> Result<Self> {
        let o = ops.order;
        if o + 1 > ops.n {
            return Err(Error::InvalidArgument(format!(
                "truncation order {o} must be below N = {}",
                ops.n
            )));
        }
        let m = ops.m();
        Ok(Self {
            h_top: h_full(&ops, o)?.into_matrix(),
            v_top: two_body(&ops.w, m, o)?.into_matrix(),
            v_next: two_body(&ops.w, m, o + 1)?.into_matrix(),
            ops,
            closure,
            weights,
        })
    }

    pub fn ops(&self) -> &ModelOperators {
        &self.ops
    }

    pub fn closure_strategy(&self) -> ClosureStrategy {
        self.closure
    }

    pub fn cluster_weights(&self) -> ClusterWeights {
        self.weights
    }

    fn check(&self, rho: &SymOperator) -> Result<()> {
        if rho.order() != self.ops.order {
            return Err(Error::OrderMismatch {
                expected: self.ops.order,
                got: rho.order(),
            });
        }
        if rho.m() != self.ops.m() {
            return Err(Error::ModeMismatch(self.ops.m(), rho.m()));
        }
        Ok(())
    }

    /// `dρ_ō/dt` with a caller-supplied `ρ_{ō+1}` (no truncation).
    pub fn rhs_with(&self, rho: &SymOperator, rho_next: &SymOperator) -> Result<CMat> {
        self.check(rho)?;
        if rho_next.order() != self.ops.order + 1 {
            return Err(Error::OrderMismatch {
                expected: self.ops.order + 1,
                got: rho_next.order(),
            });
        }
        let r = rho.matrix();
        let x = rho_next.matrix();
        let free = commutator(&self.h_top, r);
        let comm_next = SymOperator::new(rho_next.basis().clone(), commutator(&self.v_next, x))?;
        let traced = partial_trace(&comm_next, 1)?;
        let lowered = partial_trace(rho_next, 1)?;
        let collision = traced.matrix() - commutator(&self.v_top, lowered.matrix());
        let weight = (self.ops.n - self.ops.order) as f64;
        let minus_i = Complex64::new(0.0, -1.0);
        Ok((free + collision * Complex64::new(weight, 0.0)) * minus_i)
    }

    /// Closure approximant of `ρ_{ō+1}`.
    pub fn closure(&self, rho: &SymOperator) -> Result<SymOperator> {
        closure_with(rho, self.ops.n, self.closure, self.weights)
    }

    /// Truncated `dρ_ō/dt`.
    pub fn rhs(&self, rho: &SymOperator) -> Result<CMat> {
        self.check(rho)?;
        let next = self.closure(rho)?;
        self.rhs_with(rho, &next)
    }

    /// Total energy from the traced-down `ρ_1`, `ρ_2` of `rho`.
    pub fn energy(&self, rho: &SymOperator) -> Result<f64> {
        energy_of(rho, &self.ops)
    }
}

/// Truncated right-hand side with the default closure.
pub fn rhs(rho: &Rdm, ops: &ModelOperators) -> Result<CMat> {
    Hierarchy::new(ops.clone(), ClosureStrategy::default())?.rhs(rho)
}

/// `E = N tr(h ρ_1) + N(N−1)/2 tr(W ρ_2)` in units of `J`.
pub fn energy(rho: &Rdm, ops: &ModelOperators) -> Result<f64> {
    energy_of(rho, ops)
}

fn energy_of(rho: &SymOperator, ops: &ModelOperators) -> Result<f64> {
    if rho.order() < 2 {
        return Err(Error::InvalidArgument("energy needs an RDM of order >= 2".into()));
    }
    let rho1 = trace_down(rho, 1)?;
    let rho2 = trace_down(rho, 2)?;
    let nf = ops.n as f64;
    let one = (&ops.h * rho1.matrix()).trace().re;
    let two = (&ops.w * embed_ordered(&rho2)).trace().re;
    Ok(nf * one + 0.5 * nf * (nf - 1.0) * two)
}
