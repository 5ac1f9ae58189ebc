//! Observables along trajectories: imbalance, natural populations, first
//! negativity times, trace distances and the observable-deviation bound.
//!
//! Nothing is clamped. Imbalances outside `[−1, 1]`, negative populations and
//! trace distances above one are kept, since they are the signature of a
//! non-representable state.

use rayon::prelude::*;

use crate::bbgky::{energy, ModelOperators, Rdm};
use crate::cluster::{cluster_norms, clusters_from_top_with, ClusterWeights};
use crate::corrections::CorrectionEvent;
use crate::dimer_exact::{exact_rdm, fock_probabilities, DimerPropagator, FockState};
use crate::error::{Error, Result};
use crate::integrator::Emission;
use crate::repres::{eigenvalues, k_linear};
use crate::symspace::{trace_down, CMat, SymOperator};

/// `(⟨n_L⟩ − ⟨n_R⟩)/N` from an RDM of any order of the two-site model.
pub fn imbalance(rho: &SymOperator) -> Result<f64> {
    if rho.m() != 2 {
        return Err(Error::ModeMismatch(2, rho.m()));
    }
    let o = rho.order() as f64;
    let b = rho.basis();
    Ok((0..rho.dim())
        .map(|i| {
            let occ = b.state(i);
            rho.matrix()[(i, i)].re * (occ[0] as f64 - occ[1] as f64)
        })
        .sum::<f64>()
        / o)
}

/// Eigenvalues, largest first.
pub fn natural_populations(rho: &SymOperator) -> Result<Vec<f64>> {
    let mut v = eigenvalues(rho)?;
    v.reverse();
    Ok(v)
}

fn hermitian_eigs(a: &CMat) -> Result<Vec<f64>> {
    Ok(crate::repres::spectrum(a)?.values)
}

/// `Σ |eigenvalues|` of a Hermitian matrix.
pub fn trace_norm(a: &CMat) -> Result<f64> {
    Ok(hermitian_eigs(a)?.iter().map(|x| x.abs()).sum())
}

/// Largest `|eigenvalue|` of a Hermitian matrix.
pub fn operator_norm(a: &CMat) -> Result<f64> {
    Ok(hermitian_eigs(a)?.iter().fold(0.0, |m, x| m.max(x.abs())))
}

/// `‖A − B‖_1 / 2`.
pub fn trace_distance(a: &SymOperator, b: &SymOperator) -> Result<f64> {
    let diff = a.try_sub(b)?;
    Ok(0.5 * trace_norm(diff.matrix())?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableBound {
    /// `|tr(A ρ_a) − tr(A ρ_b)|`.
    pub deviation: f64,
    /// `2 ‖A‖_1 D(ρ_a, ρ_b)`.
    pub trace_norm_bound: f64,
    /// `2 ‖A‖_∞ D(ρ_a, ρ_b)`, never larger than the trace-norm bound.
    pub operator_norm_bound: f64,
}

/// Deviation of a Hermitian observable between two states and its bounds.
pub fn observable_bound(
    obs: &SymOperator,
    rho_a: &SymOperator,
    rho_b: &SymOperator,
) -> Result<ObservableBound> {
    obs.same_space(rho_a)?;
    let d = trace_distance(rho_a, rho_b)?;
    let diff = rho_a.try_sub(rho_b)?;
    let deviation = (obs.matrix() * diff.matrix()).trace().norm();
    Ok(ObservableBound {
        deviation,
        trace_norm_bound: 2.0 * trace_norm(obs.matrix())? * d,
        operator_norm_bound: 2.0 * operator_norm(obs.matrix())? * d,
    })
}

/// One write-out time.
#[derive(Debug, Clone)]
pub struct Record {
    pub time: f64,
    /// `ρ_1 … ρ_K`.
    pub family: Vec<SymOperator>,
    /// Natural populations per order, largest first.
    pub populations: Vec<Vec<f64>>,
    /// Eigenvalues of `K`, ascending; absent below order 2.
    pub k_spectrum: Option<Vec<f64>>,
    pub imbalance: f64,
    pub energy: Option<f64>,
    pub trace: f64,
    pub steps: usize,
    pub rejected: usize,
    pub correction: Option<CorrectionEvent>,
    /// Fock-space probabilities, exact runs only.
    pub fock: Option<Vec<f64>>,
    /// `‖c_o‖_1` for `o = 1 …`, when requested.
    pub cluster_norms: Option<Vec<f64>>,
}

impl Record {
    fn from_family(
        time: f64,
        family: Vec<SymOperator>,
        n: usize,
        ops: Option<&ModelOperators>,
    ) -> Result<Self> {
        let populations = family
            .iter()
            .map(natural_populations)
            .collect::<Result<Vec<_>>>()?;
        let k_spectrum = if family.len() >= 2 {
            let k = k_linear(&family[1], &family[0], n)?;
            Some(crate::repres::spectrum(&k)?.values)
        } else {
            None
        };
        let top = family.last().expect("non-empty family");
        let energy = match ops {
            Some(ops) if family.len() >= 2 => Some(energy(&Rdm::new(family[1].clone())?, ops)?),
            _ => None,
        };
        Ok(Self {
            time,
            imbalance: imbalance(&family[0])?,
            trace: top.trace().re,
            family,
            populations,
            k_spectrum,
            energy,
            steps: 0,
            rejected: 0,
            correction: None,
            fock: None,
            cluster_norms: None,
        })
    }

    /// Record of a propagated top-order RDM and its partial traces.
    pub fn from_state(
        time: f64,
        top: &SymOperator,
        n: usize,
        ops: Option<&ModelOperators>,
    ) -> Result<Self> {
        let family = (1..=top.order())
            .map(|o| trace_down(top, o))
            .collect::<Result<Vec<_>>>()?;
        Self::from_family(time, family, n, ops)
    }

    pub fn from_emission(e: &Emission, n: usize, ops: Option<&ModelOperators>) -> Result<Self> {
        let mut r = Self::from_state(e.time, &e.state, n, ops)?;
        r.steps = e.steps;
        r.rejected = e.rejected;
        r.correction = e.correction;
        Ok(r)
    }

    /// Record of an exact state with RDMs up to `max_order`.
    pub fn from_exact(
        time: f64,
        psi: &FockState,
        max_order: usize,
        ops: Option<&ModelOperators>,
    ) -> Result<Self> {
        let n = psi.particles();
        let top = exact_rdm(psi, max_order.clamp(1, n))?.into_operator();
        let mut r = Self::from_state(time, &top, n, ops)?;
        r.fock = Some(fock_probabilities(psi));
        Ok(r)
    }

    /// Fills `cluster_norms` from the top of the family. The family is
    /// compatible by construction, so a drifting trace is not an error here.
    pub fn with_cluster_norms(mut self, weights: ClusterWeights) -> Result<Self> {
        let top = self.family.last().expect("non-empty family");
        self.cluster_norms = Some(cluster_norms(&clusters_from_top_with(top, weights)?)?);
        Ok(self)
    }

    pub fn min_population(&self, o: usize) -> Option<f64> {
        self.populations.get(o.checked_sub(1)?)?.last().copied()
    }
}

/// Time-ordered records of one run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    records: Vec<Record>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: Record) -> Result<()> {
        if let Some(last) = self.records.last() {
            if !(r.time > last.time) {
                return Err(Error::InvalidArgument(format!(
                    "record time {} does not follow {}",
                    r.time, last.time
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest `|tr ρ − 1|` over the run.
    pub fn trace_drift(&self) -> f64 {
        self.records
            .iter()
            .fold(0.0, |m, r| m.max((r.trace - 1.0).abs()))
    }

    /// Largest `|E(t) − E(0)| / max(|E(0)|, 1)` over the run.
    pub fn energy_drift(&self) -> Option<f64> {
        let e0 = self.records.first()?.energy?;
        let scale = e0.abs().max(1.0);
        self.records
            .iter()
            .map(|r| r.energy.map(|e| (e - e0).abs() / scale))
            .try_fold(0.0_f64, |m, d| d.map(|d| m.max(d)))
    }
}

/// Threshold below which a natural population counts as negative.
pub const NEGATIVITY_EPS: f64 = -1e-10;

/// First time the lowest natural population of `ρ_o` falls below `eps`.
pub fn t_neg(traj: &Trajectory, o: usize, eps: f64) -> Option<f64> {
    traj.records
        .iter()
        .find(|r| r.min_population(o).is_some_and(|l| l < eps))
        .map(|r| r.time)
}

/// Exact trajectory sampled at `times`, records computed in parallel.
pub fn exact_trajectory(
    prop: &DimerPropagator,
    psi0: &FockState,
    times: &[f64],
    max_order: usize,
    ops: Option<&ModelOperators>,
    cluster_weights: Option<ClusterWeights>,
) -> Result<Trajectory> {
    let records = times
        .par_iter()
        .map(|&t| {
            let psi = prop.evolve(psi0, t)?;
            let r = Record::from_exact(t, &psi, max_order, ops)?;
            match cluster_weights {
                Some(w) => r.with_cluster_norms(w),
                None => Ok(r),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut traj = Trajectory::new();
    for r in records {
        traj.push(r)?;
    }
    Ok(traj)
}
