//! Symmetric few-boson spaces of `m` modes.
//!
//! An operator of order `o` is stored as a dense matrix in the occupation
//! basis `|n_1, …, n_m⟩` with `Σ n_s = o`. Partial traces and symmetrized
//! products are evaluated directly in that basis through "split tables":
//! for every occupation vector `n` of order `o` and every `k ≤ n` of order
//! `p`, the overlap of `|n⟩` with `|k⟩ ⊗ |n − k⟩` is
//! `sqrt(C(n, k) / C(o, p))`, where `C(n, k) = Π_s C(n_s, k_s)`.
//!
//! The ordered tensor embedding (`embed_ordered`) is only needed for small
//! spaces; none of the hot paths go through it.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use parking_lot::RwLock;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

pub(crate) const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Number of occupation vectors of `o` bosons in `m` modes, `C(m+o-1, o)`.
pub fn dimension(m: usize, o: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::InvalidArgument("mode count must be >= 1".into()));
    }
    let overflow = || Error::DimensionOverflow { m, o };
    let mut r: u128 = 1;
    for i in 1..=o as u128 {
        r = r
            .checked_mul(m as u128 - 1 + i)
            .ok_or_else(overflow)?
            / i;
    }
    if r > i64::MAX as u128 {
        return Err(overflow());
    }
    Ok(r as usize)
}

/// Binomial coefficient as a float. Exact for every value this crate needs
/// (arguments stay well below the point where f64 loses integers).
pub fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

fn multi_binom(n: &[u16], k: &[u16]) -> f64 {
    n.iter()
        .zip(k)
        .map(|(&a, &b)| binom(a as usize, b as usize))
        .product()
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Occupation-number basis of the symmetric `o`-particle space of `m` modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymBasis {
    m: usize,
    o: usize,
    states: Vec<Vec<u16>>,
    index: HashMap<Vec<u16>, usize>,
}

static BASES: Lazy<RwLock<HashMap<(usize, usize), Arc<SymBasis>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

impl SymBasis {
    /// States are ordered lexicographically descending by `n_1`, then `n_2`, ….
    /// For two modes, index `i` is the state `|o - i, i⟩`.
    pub fn new(m: usize, o: usize) -> Result<Self> {
        let dim = dimension(m, o)?;
        let mut states = Vec::with_capacity(dim);
        let mut cur = vec![0u16; m];
        fill_states(&mut states, &mut cur, 0, o);
        debug_assert_eq!(states.len(), dim);
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            m,
            o,
            states,
            index,
        })
    }

    /// Process-wide cached basis.
    pub fn shared(m: usize, o: usize) -> Result<Arc<Self>> {
        if let Some(b) = BASES.read().get(&(m, o)) {
            return Ok(b.clone());
        }
        let b = Arc::new(Self::new(m, o)?);
        Ok(BASES.write().entry((m, o)).or_insert(b).clone())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> usize {
        self.o
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[Vec<u16>] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &[u16] {
        &self.states[i]
    }

    pub fn index_of(&self, occ: &[u16]) -> Option<usize> {
        self.index.get(occ).copied()
    }
}

fn fill_states(out: &mut Vec<Vec<u16>>, cur: &mut [u16], mode: usize, left: usize) {
    if mode + 1 == cur.len() {
        cur[mode] = left as u16;
        out.push(cur.to_vec());
        return;
    }
    for n in (0..=left).rev() {
        cur[mode] = n as u16;
        fill_states(out, cur, mode + 1, left - n);
    }
    cur[mode] = 0;
}

/// Overlaps `⟨n| (|low⟩ ⊗ |rest⟩)` between an order-`o` state and a product
/// of an order-`p` state (first particles) with an order-`o - p` state.
#[derive(Debug)]
pub(crate) struct SplitTable {
    /// For each `n`: `(low, rest, coefficient)`.
    pub per_state: Vec<Vec<(usize, usize, f64)>>,
    /// For each `rest`: `(n, low, coefficient)`.
    pub by_rest: Vec<Vec<(usize, usize, f64)>>,
}

static SPLITS: Lazy<RwLock<HashMap<(usize, usize, usize), Arc<SplitTable>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

pub(crate) fn split_table(m: usize, o: usize, p: usize) -> Result<Arc<SplitTable>> {
    if let Some(t) = SPLITS.read().get(&(m, o, p)) {
        return Ok(t.clone());
    }
    let full = SymBasis::shared(m, o)?;
    let low = SymBasis::shared(m, p)?;
    let rest = SymBasis::shared(m, o - p)?;
    let norm = binom(o, p);
    let mut per_state = vec![Vec::new(); full.dim()];
    let mut by_rest = vec![Vec::new(); rest.dim()];
    let mut diff = vec![0u16; m];
    for (ni, n) in full.states().iter().enumerate() {
        for (ki, k) in low.states().iter().enumerate() {
            if n.iter().zip(k).any(|(a, b)| b > a) {
                continue;
            }
            for s in 0..m {
                diff[s] = n[s] - k[s];
            }
            let ri = rest.index_of(&diff).expect("complement is a basis state");
            let c = (multi_binom(n, k) / norm).sqrt();
            per_state[ni].push((ki, ri, c));
            by_rest[ri].push((ni, ki, c));
        }
    }
    let t = Arc::new(SplitTable { per_state, by_rest });
    Ok(SPLITS.write().entry((m, o, p)).or_insert(t).clone())
}

/// Operator on a symmetric `o`-particle space, in the occupation basis.
#[derive(Debug, Clone, PartialEq)]
pub struct SymOperator {
    basis: Arc<SymBasis>,
    mat: CMat,
}

impl SymOperator {
    pub fn new(basis: Arc<SymBasis>, mat: CMat) -> Result<Self> {
        let d = basis.dim();
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::InvalidArgument(format!(
                "matrix is {}x{}, basis dimension is {d}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        Ok(Self { basis, mat })
    }

    pub fn zeros(m: usize, o: usize) -> Result<Self> {
        let basis = SymBasis::shared(m, o)?;
        let d = basis.dim();
        Ok(Self {
            basis,
            mat: CMat::zeros(d, d),
        })
    }

    pub fn identity(m: usize, o: usize) -> Result<Self> {
        let basis = SymBasis::shared(m, o)?;
        let d = basis.dim();
        Ok(Self {
            basis,
            mat: CMat::identity(d, d),
        })
    }

    /// `|occ⟩⟨occ|` for a single occupation vector.
    pub fn projector(m: usize, occ: &[u16]) -> Result<Self> {
        let o = occ.iter().map(|&n| n as usize).sum();
        let mut op = Self::zeros(m, o)?;
        let i = op
            .basis
            .index_of(occ)
            .ok_or_else(|| Error::InvalidArgument(format!("{occ:?} is not a {m}-mode state")))?;
        op.mat[(i, i)] = ONE;
        Ok(op)
    }

    /// `|ψ⟩⟨ψ|` for a vector given in the occupation basis.
    pub fn from_ket(m: usize, o: usize, ket: &[Complex64]) -> Result<Self> {
        let basis = SymBasis::shared(m, o)?;
        if ket.len() != basis.dim() {
            return Err(Error::InvalidArgument(format!(
                "ket length {} != dimension {}",
                ket.len(),
                basis.dim()
            )));
        }
        let v = nalgebra::DVector::from_column_slice(ket);
        let mat = &v * v.adjoint();
        Ok(Self { basis, mat })
    }

    pub fn basis(&self) -> &Arc<SymBasis> {
        &self.basis
    }

    pub fn m(&self) -> usize {
        self.basis.m
    }

    pub fn order(&self) -> usize {
        self.basis.o
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn matrix_mut(&mut self) -> &mut CMat {
        &mut self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn trace(&self) -> Complex64 {
        self.mat.trace()
    }

    /// Largest element of `|A - A†|`.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(&self.mat - self.mat.adjoint()))
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() < tol
    }

    /// `(A + A†) / 2`.
    pub fn hermitian_part(&self) -> Self {
        Self {
            basis: self.basis.clone(),
            mat: (&self.mat + self.mat.adjoint()) * Complex64::new(0.5, 0.0),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        max_abs(&(&self.mat - &other.mat))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            basis: self.basis.clone(),
            mat: &self.mat * Complex64::new(s, 0.0),
        }
    }

    pub(crate) fn same_space(&self, other: &Self) -> Result<()> {
        if self.m() != other.m() {
            return Err(Error::ModeMismatch(self.m(), other.m()));
        }
        if self.order() != other.order() {
            return Err(Error::OrderMismatch {
                expected: self.order(),
                got: other.order(),
            });
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Ok(Self {
            basis: self.basis.clone(),
            mat: &self.mat + &other.mat,
        })
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.same_space(other)?;
        Ok(Self {
            basis: self.basis.clone(),
            mat: &self.mat - &other.mat,
        })
    }
}

pub(crate) fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Isometry `U: Sym^o → (C^m)^{⊗o}` mapping `|n⟩` to the normalized
/// symmetrized tensor. Row index is the ordered sequence `s_1 … s_o` read as
/// a base-`m` number with `s_1` most significant.
pub fn ordered_isometry(basis: &SymBasis) -> nalgebra::DMatrix<f64> {
    let (m, o) = (basis.m, basis.o);
    let full = m.pow(o as u32);
    let of = factorial(o);
    let mut u = nalgebra::DMatrix::zeros(full, basis.dim());
    let mut occ = vec![0u16; m];
    for row in 0..full {
        occ.iter_mut().for_each(|x| *x = 0);
        let mut r = row;
        for _ in 0..o {
            occ[r % m] += 1;
            r /= m;
        }
        let col = basis.index_of(&occ).expect("occupation of a sequence");
        let nf: f64 = occ.iter().map(|&n| factorial(n as usize)).product();
        u[(row, col)] = (nf / of).sqrt();
    }
    u
}

/// `U A U†` on the ordered tensor space `(C^m)^{⊗o}`.
pub fn embed_ordered(a: &SymOperator) -> CMat {
    let u = ordered_isometry(&a.basis).map(|x| Complex64::new(x, 0.0));
    &u * &a.mat * u.adjoint()
}

/// Trace over `k` of the `o` particles; the result has order `o - k`.
pub fn partial_trace(a: &SymOperator, k: usize) -> Result<SymOperator> {
    let o = a.order();
    if k == 0 || k >= o {
        return Err(Error::InvalidArgument(format!(
            "cannot trace {k} particles out of an order-{o} operator"
        )));
    }
    let p = o - k;
    let table = split_table(a.m(), o, p)?;
    let basis = SymBasis::shared(a.m(), p)?;
    let d = basis.dim();
    let mut out = CMat::zeros(d, d);
    for group in &table.by_rest {
        for &(n, low, c) in group {
            for &(n2, low2, c2) in group {
                out[(low, low2)] += a.mat[(n, n2)] * (c * c2);
            }
        }
    }
    Ok(SymOperator { basis, mat: out })
}

/// Trace down to order `target` (identity if already there).
pub fn trace_down(a: &SymOperator, target: usize) -> Result<SymOperator> {
    match a.order().cmp(&target) {
        std::cmp::Ordering::Equal => Ok(a.clone()),
        std::cmp::Ordering::Greater => partial_trace(a, a.order() - target),
        std::cmp::Ordering::Less => Err(Error::InvalidArgument(format!(
            "cannot trace order {} up to {target}",
            a.order()
        ))),
    }
}

fn sym_product2(a: &SymOperator, b: &SymOperator) -> Result<SymOperator> {
    if a.m() != b.m() {
        return Err(Error::ModeMismatch(a.m(), b.m()));
    }
    let m = a.m();
    let o = a.order() + b.order();
    let table = split_table(m, o, a.order())?;
    let basis = SymBasis::shared(m, o)?;
    let d = basis.dim();
    let mut out = CMat::zeros(d, d);
    for (n, row) in table.per_state.iter().enumerate() {
        for (n2, col) in table.per_state.iter().enumerate() {
            let mut acc = ZERO;
            for &(k, r, c) in row {
                for &(k2, r2, c2) in col {
                    acc += a.mat[(k, k2)] * b.mat[(r, r2)] * (c * c2);
                }
            }
            out[(n, n2)] = acc;
        }
    }
    Ok(SymOperator { basis, mat: out })
}

/// `P_s (A_1 ⊗ … ⊗ A_p) P_s` on the symmetric space of order `Σ o_i`.
///
/// The product is commutative and associative, so it is folded pairwise.
pub fn sym_product(ops: &[&SymOperator]) -> Result<SymOperator> {
    let (first, rest) = ops
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("sym_product of no operands".into()))?;
    rest.iter()
        .try_fold((*first).clone(), |acc, op| sym_product2(&acc, op))
}
