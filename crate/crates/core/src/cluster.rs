//! Cluster (correlation) decomposition of RDM families and the truncation
//! closure.
//!
//! The expansion is
//!
//! ```text
//! ρ_o = Σ_{λ ⊢ o} w_λ Sym(c_{λ_1} ⊗ c_{λ_2} ⊗ …)
//! ```
//!
//! over integer partitions `λ` of `o`, with `Sym` the projected symmetric
//! product of [`sym_product`]. By default `w_λ` counts the set partitions of
//! `o` labels with block sizes `λ`, which makes the clusters the ordinary
//! cumulants of the symmetrized RDMs; [`ClusterWeights::Unit`] sets every
//! `w_λ = 1`. Clusters follow by Möbius inversion,
//! `c_o = ρ_o − Σ_{λ ≠ (o)} w_λ Sym(…)`, and vanish for `o ≥ 2` on a pure
//! condensate at any particle number under either convention.
//!
//! The plain closure (`ClosureStrategy::Projector`) drops the top cluster.
//! Its partial trace does not reproduce `ρ_ō` once `ρ_1` is mixed, so the
//! default strategy adds the minimal Frobenius-norm correction that restores
//! `tr_1 ρ_{ō+1} = ρ_ō`. The correction vanishes whenever the plain closure
//! is already compatible (condensates, states with `c_{ō+1} = 0`).

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::bbgky::Rdm;
use crate::error::{Error, Result};
use crate::repres::eigenvalues;
use crate::symspace::{factorial, partial_trace, split_table, sym_product, CMat, SymBasis, SymOperator};

/// How `ρ_{ō+1}` is reconstructed from the propagated `ρ_ō`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureStrategy {
    /// Cluster expansion with the top cluster set to zero.
    Projector,
    /// `Projector`, followed by the minimal-norm lift that makes the
    /// result's partial trace equal `ρ_ō`.
    #[default]
    Compatible,
}

/// Weight of each partition type in the cluster expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeights {
    /// One symmetrized product per integer partition.
    Unit,
    /// Each partition weighted by its number of set partitions.
    #[default]
    SetPartition,
}

impl ClusterWeights {
    /// Weight of partition `lambda` (parts non-increasing).
    pub fn weight(self, lambda: &[usize]) -> f64 {
        match self {
            ClusterWeights::Unit => 1.0,
            ClusterWeights::SetPartition => {
                let o: usize = lambda.iter().sum();
                let mut w = factorial(o);
                for &p in lambda {
                    w /= factorial(p);
                }
                let mut i = 0;
                while i < lambda.len() {
                    let j = lambda[i..].iter().take_while(|&&p| p == lambda[i]).count();
                    w /= factorial(j);
                    i += j;
                }
                w.round()
            }
        }
    }
}

/// Compatibility tolerance for RDM families fed to [`clusters_from_rdms`].
pub const COMPAT_TOL: f64 = 1e-8;

static PARTITIONS: Lazy<RwLock<HashMap<usize, Arc<Vec<Vec<usize>>>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

/// Integer partitions of `o`, parts in non-increasing order, listed in
/// reverse lexicographic order starting with `(o)`.
pub fn partitions(o: usize) -> Arc<Vec<Vec<usize>>> {
    if let Some(p) = PARTITIONS.read().get(&o) {
        return p.clone();
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    gen_partitions(o, o, &mut cur, &mut out);
    let p = Arc::new(out);
    PARTITIONS.write().entry(o).or_insert(p).clone()
}

fn gen_partitions(left: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if left == 0 {
        out.push(cur.clone());
        return;
    }
    for part in (1..=left.min(max)).rev() {
        cur.push(part);
        gen_partitions(left - part, part, cur, out);
        cur.pop();
    }
}

/// Partitions entering the closure of order `o_bar`: every partition of
/// `o_bar + 1` except the single block.
pub fn closure_terms(o_bar: usize) -> Vec<Vec<usize>> {
    partitions(o_bar + 1)
        .iter()
        .filter(|p| p.len() > 1)
        .cloned()
        .collect()
}

/// Correlation operators `c_1 … c_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    clusters: Vec<SymOperator>,
    weights: ClusterWeights,
}

impl ClusterSet {
    pub fn new(clusters: Vec<SymOperator>) -> Result<Self> {
        Self::with_weights(clusters, ClusterWeights::default())
    }

    pub fn with_weights(clusters: Vec<SymOperator>, weights: ClusterWeights) -> Result<Self> {
        for (i, c) in clusters.iter().enumerate() {
            if c.order() != i + 1 {
                return Err(Error::OrderMismatch {
                    expected: i + 1,
                    got: c.order(),
                });
            }
        }
        Ok(Self { clusters, weights })
    }

    pub fn weights(&self) -> ClusterWeights {
        self.weights
    }

    /// Highest order present.
    pub fn order(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster of order `o` (1-based).
    pub fn get(&self, o: usize) -> Option<&SymOperator> {
        o.checked_sub(1).and_then(|i| self.clusters.get(i))
    }

    pub fn clusters(&self) -> &[SymOperator] {
        &self.clusters
    }
}

/// Memo of symmetrized products keyed by partition.
struct Products<'a> {
    clusters: &'a [SymOperator],
    weights: ClusterWeights,
    memo: HashMap<Vec<usize>, SymOperator>,
}

impl<'a> Products<'a> {
    fn new(clusters: &'a [SymOperator], weights: ClusterWeights) -> Self {
        Self {
            clusters,
            weights,
            memo: HashMap::new(),
        }
    }

    /// `Sym(c_{λ_1} ⊗ …)`, built by peeling off the smallest part so each
    /// partition costs one binary product.
    fn get(&mut self, lambda: &[usize]) -> Result<SymOperator> {
        if lambda.len() == 1 {
            return Ok(self.clusters[lambda[0] - 1].clone());
        }
        if let Some(p) = self.memo.get(lambda) {
            return Ok(p.clone());
        }
        let (last, head) = lambda.split_last().expect("non-empty partition");
        let head = self.get(head)?;
        let prod = sym_product(&[&head, &self.clusters[last - 1]])?;
        self.memo.insert(lambda.to_vec(), prod.clone());
        Ok(prod)
    }

    /// `Σ_{λ ⊢ o, λ ≠ (o)} w_λ Sym(…)`.
    fn disconnected(&mut self, m: usize, o: usize) -> Result<SymOperator> {
        let mut acc = SymOperator::zeros(m, o)?;
        for lambda in partitions(o).iter().filter(|p| p.len() > 1) {
            let term = self.get(lambda)?;
            let w = self.weights.weight(lambda);
            if w == 1.0 {
                *acc.matrix_mut() += term.matrix();
            } else {
                *acc.matrix_mut() += term.matrix() * Complex64::new(w, 0.0);
            }
        }
        Ok(acc)
    }
}

fn check_family(rdms: &[Rdm]) -> Result<()> {
    let m = rdms
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty RDM family".into()))?
        .m();
    for (i, r) in rdms.iter().enumerate() {
        if r.order() != i + 1 {
            return Err(Error::OrderMismatch {
                expected: i + 1,
                got: r.order(),
            });
        }
        if r.m() != m {
            return Err(Error::ModeMismatch(m, r.m()));
        }
        let dev = (r.trace() - Complex64::new(1.0, 0.0)).norm();
        if dev > COMPAT_TOL {
            return Err(Error::Incompatible {
                order: i + 1,
                deviation: dev,
            });
        }
    }
    for pair in rdms.windows(2) {
        let dev = partial_trace(&pair[1], 1)?.max_abs_diff(&pair[0]);
        if dev > COMPAT_TOL {
            return Err(Error::Incompatible {
                order: pair[1].order(),
                deviation: dev,
            });
        }
    }
    Ok(())
}

fn invert(rdms: &[&SymOperator], weights: ClusterWeights) -> Result<ClusterSet> {
    let m = rdms[0].m();
    let mut clusters: Vec<SymOperator> = Vec::with_capacity(rdms.len());
    for (i, rho) in rdms.iter().enumerate() {
        let o = i + 1;
        let c = if o == 1 {
            (*rho).clone()
        } else {
            let disc = Products::new(&clusters, weights).disconnected(m, o)?;
            rho.try_sub(&disc)?
        };
        clusters.push(c);
    }
    ClusterSet::with_weights(clusters, weights)
}

/// Clusters `c_1 … c_K` of a compatible, trace-one family `ρ_1 … ρ_K`
/// (`rdms[o - 1]` has order `o`).
pub fn clusters_from_rdms(rdms: &[Rdm]) -> Result<ClusterSet> {
    clusters_from_rdms_with(rdms, ClusterWeights::default())
}

pub fn clusters_from_rdms_with(rdms: &[Rdm], weights: ClusterWeights) -> Result<ClusterSet> {
    check_family(rdms)?;
    let ops: Vec<&SymOperator> = rdms.iter().map(|r| &**r).collect();
    invert(&ops, weights)
}

/// Clusters of the family obtained by partial tracing a single top RDM.
/// Compatibility holds by construction, so no check is made.
pub fn clusters_from_top(top: &SymOperator) -> Result<ClusterSet> {
    clusters_from_top_with(top, ClusterWeights::default())
}

pub fn clusters_from_top_with(top: &SymOperator, weights: ClusterWeights) -> Result<ClusterSet> {
    let k = top.order();
    let mut family = Vec::with_capacity(k);
    for o in 1..k {
        family.push(partial_trace(top, k - o)?);
    }
    family.push(top.clone());
    let refs: Vec<&SymOperator> = family.iter().collect();
    invert(&refs, weights)
}

/// `ρ_o = Σ_{λ ⊢ o} w_λ Sym(c_{λ_1} ⊗ …)` with the weights of `cs`.
pub fn recompose_rdm(cs: &ClusterSet, o: usize) -> Result<SymOperator> {
    if o == 0 || o > cs.order() {
        return Err(Error::InvalidArgument(format!(
            "cannot recompose order {o} from clusters up to {}",
            cs.order()
        )));
    }
    let m = cs.clusters[0].m();
    let mut products = Products::new(&cs.clusters[..o], cs.weights);
    let disc = if o == 1 {
        SymOperator::zeros(m, 1)?
    } else {
        products.disconnected(m, o)?
    };
    disc.try_add(&cs.clusters[o - 1])
}

/// Approximant of `ρ_{ō+1}` built from `ρ_ō` and its partial traces.
pub fn closure(rdm_top: &SymOperator, n: usize, strategy: ClosureStrategy) -> Result<SymOperator> {
    closure_with(rdm_top, n, strategy, ClusterWeights::default())
}

pub fn closure_with(
    rdm_top: &SymOperator,
    n: usize,
    strategy: ClosureStrategy,
    weights: ClusterWeights,
) -> Result<SymOperator> {
    let o_bar = rdm_top.order();
    if o_bar < 1 || o_bar + 1 > n {
        return Err(Error::InvalidArgument(format!(
            "closure order {o_bar} requires 1 <= ō <= N-1 (N={n})"
        )));
    }
    let cs = clusters_from_top_with(rdm_top, weights)?;
    let m = rdm_top.m();
    let plain = Products::new(cs.clusters(), weights).disconnected(m, o_bar + 1)?;
    match strategy {
        ClosureStrategy::Projector => Ok(plain),
        ClosureStrategy::Compatible => {
            let defect = rdm_top.try_sub(&partial_trace(&plain, 1)?)?;
            let lifted = lift(&defect)?;
            plain.try_add(&lifted)
        }
    }
}

/// Minimal-norm right inverse of the one-particle partial trace, as a real
/// matrix acting on column-major vectorized operators.
struct Lift {
    upper: Arc<SymBasis>,
    matrix: DMatrix<f64>,
}

static LIFTS: Lazy<RwLock<HashMap<(usize, usize), Arc<Lift>>>> =
    Lazy::new(|| RwLock::new(HashMap::new()));

fn lift_for(m: usize, o: usize) -> Result<Arc<Lift>> {
    if let Some(l) = LIFTS.read().get(&(m, o)) {
        return Ok(l.clone());
    }
    let upper = SymBasis::shared(m, o + 1)?;
    let lower = SymBasis::shared(m, o)?;
    let (du, dl) = (upper.dim(), lower.dim());
    let table = split_table(m, o + 1, o)?;
    // trace map T: vec(order o+1) -> vec(order o)
    let mut t = DMatrix::<f64>::zeros(dl * dl, du * du);
    for group in &table.by_rest {
        for &(n, a, c) in group {
            for &(n2, a2, c2) in group {
                t[(a + a2 * dl, n + n2 * du)] += c * c2;
            }
        }
    }
    let gram = &t * t.transpose();
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("partial-trace Gram matrix, m={m}, o={o}")))?;
    let matrix = t.transpose() * chol.inverse();
    let l = Arc::new(Lift { upper, matrix });
    Ok(LIFTS.write().entry((m, o)).or_insert(l).clone())
}

/// Smallest-norm `X` of order `o + 1` with `tr_1 X = defect`.
fn lift(defect: &SymOperator) -> Result<SymOperator> {
    let l = lift_for(defect.m(), defect.order())?;
    let re: Vec<f64> = defect.matrix().iter().map(|z| z.re).collect();
    let im: Vec<f64> = defect.matrix().iter().map(|z| z.im).collect();
    let re = &l.matrix * nalgebra::DVector::from_vec(re);
    let im = &l.matrix * nalgebra::DVector::from_vec(im);
    let du = l.upper.dim();
    let mat = CMat::from_fn(du, du, |i, j| {
        let k = i + j * du;
        Complex64::new(re[k], im[k])
    });
    SymOperator::new(l.upper.clone(), mat)
}

/// Trace-class norms `‖c_o‖_1`, entry `o - 1`.
pub fn cluster_norms(cs: &ClusterSet) -> Result<Vec<f64>> {
    cs.clusters
        .iter()
        .map(|c| Ok(eigenvalues(&c.hermitian_part())?.iter().map(|x| x.abs()).sum()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dimer_exact::{exact_rdm, FockState};
    use crate::sampling::{random_density, random_fock_state};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn family(psi: &FockState, k: usize) -> Vec<Rdm> {
        (1..=k).map(|o| exact_rdm(psi, o).unwrap()).collect()
    }

    #[test]
    fn partition_counts() {
        let counts: Vec<usize> = (1..=13).map(|o| partitions(o).len()).collect();
        assert_eq!(counts, vec![1, 2, 3, 5, 7, 11, 15, 22, 30, 42, 56, 77, 101]);
        assert_eq!(partitions(4)[0], vec![4]);
        assert_eq!(partitions(4)[4], vec![1, 1, 1, 1]);
        // ρ_13 approximant at ō = 12 has 100 terms
        assert_eq!(closure_terms(12).len(), 100);
    }

    #[test]
    fn closure_polynomial_degrees() {
        for o_bar in 2..=9 {
            let terms = closure_terms(o_bar);
            // degree ō+1 in ρ_1 (all-ones partition) …
            let deg1 = terms
                .iter()
                .map(|t| t.iter().filter(|&&p| p == 1).count())
                .max()
                .unwrap();
            assert_eq!(deg1, o_bar + 1);
            // … and ⌊(ō+1)/o⌋ in c_o
            for o in 2..=o_bar {
                let deg = terms
                    .iter()
                    .map(|t| t.iter().filter(|&&p| p == o).count())
                    .max()
                    .unwrap();
                assert_eq!(deg, (o_bar + 1) / o);
            }
            assert!(terms.iter().all(|t| t[0] <= o_bar));
        }
    }

    #[test]
    fn condensate_clusters_vanish() {
        let psi = FockState::all_left(7);
        let cs = clusters_from_rdms(&family(&psi, 6)).unwrap();
        assert!(cs.get(1).unwrap().max_abs_diff(&SymOperator::projector(2, &[1, 0]).unwrap()) < 1e-14);
        for o in 2..=6 {
            let z = SymOperator::zeros(2, o).unwrap();
            assert!(cs.get(o).unwrap().max_abs_diff(&z) < 1e-12, "o={o}");
        }
        let norms = cluster_norms(&cs).unwrap();
        assert!((norms[0] - 1.0).abs() < 1e-12);
        assert!(norms[1..].iter().all(|&x| x < 1e-12));
    }

    #[test]
    fn rotated_condensate_clusters_vanish() {
        // |φ⟩^{⊗N} with φ = (cos a, e^{ib} sin a); build from ρ_1 products
        let (a, b) = (0.4f64, 1.1f64);
        let phi = [Complex64::new(a.cos(), 0.0), Complex64::from_polar(a.sin(), b)];
        let rho1 = SymOperator::from_ket(2, 1, &phi).unwrap();
        let mut fam = vec![Rdm::new(rho1.clone()).unwrap()];
        for o in 2..=5 {
            let ops: Vec<&SymOperator> = (0..o).map(|_| &rho1).collect();
            fam.push(Rdm::new(sym_product(&ops).unwrap()).unwrap());
        }
        let cs = clusters_from_rdms(&fam).unwrap();
        for o in 2..=5 {
            assert!(cs.get(o).unwrap().matrix().norm() < 1e-12);
        }
    }

    #[test]
    fn mixed_rho1_product_family_has_nonzero_clusters() {
        // converse of the condensate characterization
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rho1 = random_density(2, 1, &mut rng).unwrap();
        let rho2 = sym_product(&[&rho1, &rho1]).unwrap();
        let t = rho2.trace().re;
        let fam = vec![
            Rdm::new(rho1.clone()).unwrap(),
            Rdm::new(rho2.scaled(1.0 / t)).unwrap(),
        ];
        // not compatible in general: the product of a mixed state loses trace
        assert!(t < 1.0 - 1e-6);
        let cs = invert(&[&fam[0], &fam[1]], ClusterWeights::Unit).unwrap();
        assert!(cs.get(2).unwrap().matrix().norm() > 1e-6);
    }

    #[test]
    fn round_trip_on_exact_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3usize, 5, 8] {
            let psi = random_fock_state(n, &mut rng);
            let k = n.min(6);
            let fam = family(&psi, k);
            let cs = clusters_from_rdms(&fam).unwrap();
            assert!(cs.get(1).unwrap().max_abs_diff(&fam[0]) < 1e-15);
            for o in 1..=k {
                let back = recompose_rdm(&cs, o).unwrap();
                assert!(back.max_abs_diff(&fam[o - 1]) < 1e-10, "n={n} o={o}");
                assert!(cs.get(o).unwrap().is_hermitian(1e-12));
            }
            assert!(recompose_rdm(&cs, k + 1).is_err());
        }
    }

    #[test]
    fn noon_round_trip_top_order() {
        let fam = family(&FockState::noon(6, 0.2), 2);
        let cs = clusters_from_rdms(&fam).unwrap();
        assert!(recompose_rdm(&cs, 2).unwrap().max_abs_diff(&fam[1]) < 1e-14);
    }

    #[test]
    fn incompatible_family_is_rejected() {
        let fam = vec![
            Rdm::new(SymOperator::projector(2, &[1, 0]).unwrap()).unwrap(),
            Rdm::new(SymOperator::projector(2, &[0, 2]).unwrap()).unwrap(),
        ];
        match clusters_from_rdms(&fam) {
            Err(Error::Incompatible { order: 2, deviation }) => assert!((deviation - 1.0).abs() < 1e-12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn closure_of_condensate_is_exact() {
        for strategy in [ClosureStrategy::Projector, ClosureStrategy::Compatible] {
            for o_bar in 2..=6 {
                let top = SymOperator::projector(2, &[o_bar as u16, 0]).unwrap();
                let next = closure(&top, 10, strategy).unwrap();
                let want = SymOperator::projector(2, &[o_bar as u16 + 1, 0]).unwrap();
                assert!(next.max_abs_diff(&want) < 1e-12);
            }
        }
    }

    #[test]
    fn closure_drops_only_the_top_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let psi = random_fock_state(4, &mut rng);
        let fam = family(&psi, 3);
        let cs = clusters_from_rdms(&fam).unwrap();
        let mut truncated = cs.clusters().to_vec();
        let top = truncated.last_mut().unwrap();
        *top = SymOperator::zeros(2, 3).unwrap();
        let want = recompose_rdm(&ClusterSet::new(truncated).unwrap(), 3).unwrap();
        let got = closure(&fam[1], 4, ClosureStrategy::Projector).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn compatible_closure_traces_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for o_bar in 2..=5 {
            let psi = random_fock_state(8, &mut rng);
            let top = exact_rdm(&psi, o_bar).unwrap();
            let plain = closure(&top, 8, ClosureStrategy::Projector).unwrap();
            let next = closure(&top, 8, ClosureStrategy::Compatible).unwrap();
            assert!(partial_trace(&next, 1).unwrap().max_abs_diff(&top) < 1e-12);
            assert!(next.is_hermitian(1e-12));
            // the plain closure is generically not compatible
            assert!(partial_trace(&plain, 1).unwrap().max_abs_diff(&top) > 1e-6);
        }
    }

    #[test]
    fn closure_order_bounds() {
        let top = SymOperator::projector(2, &[3, 0]).unwrap();
        assert!(closure(&top, 3, ClosureStrategy::Compatible).is_err());
        assert!(closure(&top, 4, ClosureStrategy::Compatible).is_ok());
    }

    #[test]
    fn noon_odd_clusters_vanish_and_even_ones_grow() {
        let cs = clusters_from_rdms(&family(&FockState::noon(10, 0.0), 9)).unwrap();
        let norms = cluster_norms(&cs).unwrap();
        for o in (3..=9).step_by(2) {
            assert!(norms[o - 1] < 1e-12, "{norms:?}");
        }
        assert!((norms[1] - 0.75).abs() < 1e-12);
        assert!(norms[3] < norms[5] && norms[5] < norms[7], "{norms:?}");
    }

    #[test]
    fn unit_weights_keep_odd_noon_clusters() {
        let cs = clusters_from_rdms_with(&family(&FockState::noon(10, 0.0), 5), ClusterWeights::Unit)
            .unwrap();
        let norms = cluster_norms(&cs).unwrap();
        assert!(norms[2] > 0.5, "{norms:?}");
        let back = recompose_rdm(&cs, 5).unwrap();
        assert!(back.max_abs_diff(&family(&FockState::noon(10, 0.0), 5)[4]) < 1e-12);
    }

    #[test]
    fn set_partition_weights() {
        let w = |l: &[usize]| ClusterWeights::SetPartition.weight(l);
        assert_eq!(w(&[1, 1]), 1.0);
        assert_eq!(w(&[2, 1]), 3.0);
        assert_eq!(w(&[2, 2]), 3.0);
        assert_eq!(w(&[3, 1]), 4.0);
        assert_eq!(w(&[2, 1, 1]), 6.0);
        // Bell numbers
        for (o, bell) in [(4, 15.0), (6, 203.0), (8, 4140.0)] {
            let total: f64 = partitions(o).iter().map(|l| w(l)).sum();
            assert_eq!(total, bell);
        }
    }
}
