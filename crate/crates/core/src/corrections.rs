//! Minimal-norm corrections of the two-particle RDM that restore positivity of
//! `ρ_2` and of `K`, either by purifying the state at write-out boundaries or
//! by damping negative eigenvalues inside the equation of motion.
//!
//! Hermitian corrections are parametrized by real coordinates in the
//! Frobenius-orthonormal basis `E_ii`, `(E_ij + E_ji)/√2`, `i(E_ij − E_ji)/√2`
//! (`i < j`), so the Euclidean norm of the coordinates is the Frobenius norm
//! of the correction.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bbgky::{Hierarchy, ModelOperators};
use crate::error::{Error, Result};
use crate::repres::{k_linear, spectrum};
use crate::symspace::{embed_ordered, max_abs, partial_trace, CMat, SymBasis, SymOperator};

const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    #[default]
    None,
    Purify,
    Eom,
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrectionMode::None => "none",
            CorrectionMode::Purify => "purify",
            CorrectionMode::Eom => "eom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Eigenvalues below this count as negative.
    pub epsilon: f64,
    /// Damping rate of negative eigenvalues, in units of `J`.
    pub eta: f64,
    pub max_iter: usize,
    pub mode: CorrectionMode,
    /// Purification interval, in `1/J`.
    pub dt: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            epsilon: -1e-10,
            eta: 10.0,
            max_iter: 500,
            mode: CorrectionMode::None,
            dt: 0.1,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon < 0.0) {
            return Err(Error::Config(format!("epsilon must be negative, got {}", self.epsilon)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }
}

/// Real parameters of a Hermitian operator on the symmetric two-particle space.
pub fn parameter_count(m: usize) -> usize {
    m * m * (m + 1) * (m + 1) / 4
}

/// Contraction-free rows plus the energy row.
pub fn base_constraint_count(m: usize) -> usize {
    m * m + 1
}

/// Rows removing parity-violating entries when half of the `m` modes are odd.
pub fn parity_constraint_count(m: usize) -> usize {
    m.pow(4) / 8 + m.pow(3) / 4
}

/// Active eigenvalue rows `d + d′` must stay below this for the system to
/// keep free parameters.
pub fn active_row_limit(m: usize, parity: bool) -> usize {
    let used = base_constraint_count(m) + if parity { parity_constraint_count(m) } else { 0 };
    parameter_count(m).saturating_sub(used)
}

/// Real coordinates of a Hermitian matrix in the orthonormal basis.
pub fn hermitian_coords(a: &CMat) -> Vec<f64> {
    let d = a.nrows();
    let mut x = Vec::with_capacity(d * d);
    for i in 0..d {
        x.push(a[(i, i)].re);
    }
    for i in 0..d {
        for j in i + 1..d {
            let z = a[(i, j)];
            x.push(std::f64::consts::SQRT_2 * z.re);
            x.push(-std::f64::consts::SQRT_2 * z.im);
        }
    }
    x
}

/// Inverse of [`hermitian_coords`].
pub fn from_hermitian_coords(x: &[f64], d: usize) -> CMat {
    assert_eq!(x.len(), d * d);
    let mut a = CMat::zeros(d, d);
    for i in 0..d {
        a[(i, i)] = Complex64::new(x[i], 0.0);
    }
    let mut p = d;
    for i in 0..d {
        for j in i + 1..d {
            let z = Complex64::new(x[p] * SQRT_HALF, -x[p + 1] * SQRT_HALF);
            a[(i, j)] = z;
            a[(j, i)] = z.conj();
            p += 2;
        }
    }
    a
}

fn basis_element(p: usize, d: usize) -> CMat {
    let mut x = vec![0.0; d * d];
    x[p] = 1.0;
    from_hermitian_coords(&x, d)
}

fn quad(v: &CMat, col: usize, a: &CMat) -> f64 {
    let v = v.column(col);
    (v.adjoint() * a * v)[(0, 0)].re
}

/// Fixed data of the constraint problem for one model: the parameter basis
/// and its images under the linear maps the rows are built from.
#[derive(Debug, Clone)]
pub struct CorrectionModel {
    basis: std::sync::Arc<SymBasis>,
    n: usize,
    elements: Vec<CMat>,
    k_images: Vec<CMat>,
    standing: Vec<(Vec<f64>, &'static str)>,
    k_condition: bool,
}

impl CorrectionModel {
    /// Contraction-free and energy rows for the interaction of `ops`, with
    /// both the `ρ_2` and the `K` conditions enforced.
    pub fn new(ops: &ModelOperators) -> Result<Self> {
        let mut model = Self::decoupled(ops.m(), ops.n)?;
        model.k_condition = true;
        let d = model.basis.dim();
        let params = d * d;
        let traces: Vec<Vec<f64>> = model
            .elements
            .iter()
            .map(|b| {
                let op = SymOperator::new(model.basis.clone(), b.clone())?;
                Ok(hermitian_coords(partial_trace(&op, 1)?.matrix()))
            })
            .collect::<Result<_>>()?;
        let m = ops.m();
        for q in 0..m * m {
            model.standing.push(((0..params).map(|p| traces[p][q]).collect(), "contraction"));
        }
        let energy: Vec<f64> = model
            .elements
            .iter()
            .map(|b| {
                let op = SymOperator::new(model.basis.clone(), b.clone())?;
                Ok((&ops.w * embed_ordered(&op)).trace().re)
            })
            .collect::<Result<_>>()?;
        model.standing.push((energy, "energy"));
        Ok(model)
    }

    /// No standing rows and no `K` condition; only explicit eigenvalue rows.
    pub fn decoupled(m: usize, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need N >= 2, got {n}")));
        }
        let basis = SymBasis::shared(m, 2)?;
        let d = basis.dim();
        let elements: Vec<CMat> = (0..d * d).map(|p| basis_element(p, d)).collect();
        let k_images = elements
            .iter()
            .map(|b| {
                let op = SymOperator::new(basis.clone(), b.clone())?;
                k_linear(&op, &partial_trace(&op, 1)?, n)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            basis,
            n,
            elements,
            k_images,
            standing: Vec::new(),
            k_condition: false,
        })
    }

    /// Adds rows zeroing every entry between pair states of opposite parity.
    /// `odd[s]` marks the odd modes.
    pub fn with_parity(mut self, odd: &[bool]) -> Result<Self> {
        let m = self.basis.m();
        if odd.len() != m {
            return Err(Error::ModeMismatch(m, odd.len()));
        }
        let d = self.basis.dim();
        let parity = |i: usize| {
            self.basis
                .state(i)
                .iter()
                .zip(odd)
                .filter(|(&k, &o)| o && k % 2 == 1)
                .count()
                % 2
        };
        let par: Vec<usize> = (0..d).map(parity).collect();
        let mut p = d;
        for i in 0..d {
            for j in i + 1..d {
                if par[i] != par[j] {
                    for q in [p, p + 1] {
                        let mut row = vec![0.0; d * d];
                        row[q] = 1.0;
                        self.standing.push((row, "parity"));
                    }
                }
                p += 2;
            }
        }
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn parameter_count(&self) -> usize {
        self.elements.len()
    }

    pub fn standing_rows(&self) -> usize {
        self.standing.len()
    }

    pub fn enforces_k(&self) -> bool {
        self.k_condition
    }

    /// A fresh system holding only the standing rows.
    pub fn system(&self) -> ConstraintSystem<'_> {
        ConstraintSystem {
            model: self,
            rows: self.standing.iter().map(|(r, _)| r.clone()).collect(),
            rhs: vec![0.0; self.standing.len()],
            d_rho: 0,
            d_k: 0,
        }
    }

    fn operator(&self, x: &[f64]) -> Result<SymOperator> {
        SymOperator::new(self.basis.clone(), from_hermitian_coords(x, self.basis.dim()))
    }

    /// `K` of a two-particle operator and its contraction.
    pub fn k_of(&self, rho2: &SymOperator) -> Result<CMat> {
        k_linear(rho2, &partial_trace(rho2, 1)?, self.n)
    }
}

/// Equality rows on the correction coordinates.
#[derive(Debug, Clone)]
pub struct ConstraintSystem<'a> {
    model: &'a CorrectionModel,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    d_rho: usize,
    d_k: usize,
}

impl ConstraintSystem<'_> {
    /// `⟨v|C|v⟩ = target` for column `col` of `vectors`.
    pub fn add_rho_row(&mut self, vectors: &CMat, col: usize, target: f64) {
        let row = self.model.elements.iter().map(|b| quad(vectors, col, b)).collect();
        self.rows.push(row);
        self.rhs.push(target);
        self.d_rho += 1;
    }

    /// `⟨w|ΔK(C)|w⟩ = target` for column `col` of `vectors`.
    pub fn add_k_row(&mut self, vectors: &CMat, col: usize, target: f64) {
        let row = self.model.k_images.iter().map(|k| quad(vectors, col, k)).collect();
        self.rows.push(row);
        self.rhs.push(target);
        self.d_k += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows.len()
    }

    pub fn active_rows(&self) -> (usize, usize) {
        (self.d_rho, self.d_k)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let p = self.model.parameter_count();
        DMatrix::from_fn(self.rows.len(), p, |i, j| self.rows[i][j])
    }

    /// Numerical rank of the row matrix.
    pub fn rank(&self) -> usize {
        if self.rows.is_empty() {
            return 0;
        }
        let a = self.matrix();
        let sv = a.singular_values();
        let top = sv.max();
        sv.iter().filter(|&&s| s > 1e-10 * top.max(1e-300)).count()
    }

    /// Dimension of the solution set of the homogeneous system.
    pub fn free_dimension(&self) -> usize {
        self.model.parameter_count() - self.rank()
    }
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub operator: SymOperator,
    pub coords: Vec<f64>,
    /// Largest violation among the rows, after row normalization.
    pub residual: f64,
}

impl Correction {
    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Smallest-Frobenius-norm Hermitian `C` satisfying every row of `sys`.
pub fn least_norm_correction(sys: &ConstraintSystem) -> Result<Correction> {
    let p = sys.model.parameter_count();
    let zero = || -> Result<Correction> {
        let coords = vec![0.0; p];
        Ok(Correction {
            operator: sys.model.operator(&coords)?,
            coords,
            residual: 0.0,
        })
    };
    if sys.rhs.iter().all(|&b| b == 0.0) {
        return zero();
    }
    // normalize rows so the residual is measured on a common scale
    let mut a = sys.matrix();
    let mut b = DVector::from_column_slice(&sys.rhs);
    for i in 0..a.nrows() {
        let s = a.row(i).norm();
        if s > 0.0 {
            a.row_mut(i).scale_mut(1.0 / s);
            b[i] /= s;
        }
    }
    let svd = a.clone().svd(true, true);
    let top = svd.singular_values.max();
    let x = svd
        .solve(&b, 1e-12 * top)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let residual = (&a * &x - &b).amax();
    let scale = b.amax().max(1.0);
    if !(residual <= 1e-10 * scale) {
        return Err(Error::InfeasibleCorrection {
            residual,
            rows: sys.rows(),
            params: p,
        });
    }
    let coords: Vec<f64> = x.iter().copied().collect();
    Ok(Correction {
        operator: sys.model.operator(&coords)?,
        coords,
        residual,
    })
}

/// One correction step as written to the corrections stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionEvent {
    pub time: f64,
    /// Active `ρ_2` rows.
    pub d_rho: usize,
    /// Active `K` rows.
    pub d_k: usize,
    pub norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest entry of `tr_1 C` over the corrections applied.
    pub contraction: f64,
    /// Largest `|tr(W C)|` over the corrections applied.
    pub energy: f64,
}

fn check_two(rho2: &SymOperator, model: &CorrectionModel) -> Result<()> {
    if rho2.order() != 2 {
        return Err(Error::OrderMismatch {
            expected: 2,
            got: rho2.order(),
        });
    }
    if rho2.m() != model.m() {
        return Err(Error::ModeMismatch(model.m(), rho2.m()));
    }
    Ok(())
}

fn audit(c: &SymOperator, w: Option<&CMat>) -> Result<(f64, f64)> {
    let contraction = max_abs(partial_trace(c, 1)?.matrix());
    let energy = w.map_or(0.0, |w| (w * embed_ordered(c)).trace().re.abs());
    Ok((contraction, energy))
}

#[derive(Debug, Clone)]
pub struct Purified {
    pub rho2: SymOperator,
    pub iterations: usize,
    pub converged: bool,
    pub event: CorrectionEvent,
}

/// Repeatedly shifts eigenvalues of `ρ_2` and `K` below `ε` to zero in first
/// order until none remain or `max_iter` corrections have been applied.
/// `w` is only used to audit energy conservation of the corrections.
pub fn purify(
    rho2: &SymOperator,
    model: &CorrectionModel,
    cfg: &CorrectionConfig,
    w: Option<&CMat>,
) -> Result<Purified> {
    check_two(rho2, model)?;
    let mut rho = rho2.clone();
    let mut event = CorrectionEvent {
        time: f64::NAN,
        d_rho: 0,
        d_k: 0,
        norm: 0.0,
        iterations: 0,
        converged: false,
        contraction: 0.0,
        energy: 0.0,
    };
    let mut total = CMat::zeros(rho.dim(), rho.dim());
    for it in 0..=cfg.max_iter {
        let s = spectrum(rho.matrix())?;
        let mut sys = model.system();
        for (i, &l) in s.values.iter().enumerate() {
            if l < cfg.epsilon {
                sys.add_rho_row(&s.vectors, i, -l);
            }
        }
        if model.enforces_k() {
            let k = spectrum(&model.k_of(&rho)?)?;
            for (i, &x) in k.values.iter().enumerate() {
                if x < cfg.epsilon {
                    sys.add_k_row(&k.vectors, i, -x);
                }
            }
        }
        let (d_rho, d_k) = sys.active_rows();
        if it == 0 {
            event.d_rho = d_rho;
            event.d_k = d_k;
        }
        if d_rho + d_k == 0 {
            event.converged = true;
            break;
        }
        if it == cfg.max_iter {
            break;
        }
        let c = least_norm_correction(&sys)?;
        let (contraction, energy) = audit(&c.operator, w)?;
        event.contraction = event.contraction.max(contraction);
        event.energy = event.energy.max(energy);
        total += c.operator.matrix();
        rho = rho.try_add(&c.operator)?;
        event.iterations = it + 1;
    }
    event.norm = total.norm();
    Ok(Purified {
        rho2: rho,
        iterations: event.iterations,
        converged: event.converged,
        event,
    })
}

/// `R + C` where `R` is the uncorrected derivative of `ρ_2` and `C` the
/// smallest correction making every eigenvalue below `ε` (of `ρ_2` and of
/// `K`) decay as `exp(−η t)` to first order.
pub fn correct_derivative(
    rho2: &SymOperator,
    r: CMat,
    model: &CorrectionModel,
    cfg: &CorrectionConfig,
    w: Option<&CMat>,
) -> Result<(CMat, Option<CorrectionEvent>)> {
    check_two(rho2, model)?;
    let s = spectrum(rho2.matrix())?;
    let rate = SymOperator::new(rho2.basis().clone(), r)?;
    let mut sys = model.system();
    for (i, &l) in s.values.iter().enumerate() {
        if l < cfg.epsilon {
            sys.add_rho_row(&s.vectors, i, -cfg.eta * l - quad(&s.vectors, i, rate.matrix()));
        }
    }
    if model.enforces_k() {
        let k = spectrum(&model.k_of(rho2)?)?;
        let k_dot = model.k_of(&rate)?;
        for (i, &x) in k.values.iter().enumerate() {
            if x < cfg.epsilon {
                sys.add_k_row(&k.vectors, i, -cfg.eta * x - quad(&k.vectors, i, &k_dot));
            }
        }
    }
    let (d_rho, d_k) = sys.active_rows();
    let r = rate.into_matrix();
    if d_rho + d_k == 0 {
        return Ok((r, None));
    }
    let c = least_norm_correction(&sys)?;
    let (contraction, energy) = audit(&c.operator, w)?;
    let event = CorrectionEvent {
        time: f64::NAN,
        d_rho,
        d_k,
        norm: c.norm(),
        iterations: 1,
        converged: true,
        contraction,
        energy,
    };
    Ok((r + c.operator.matrix(), Some(event)))
}

/// Corrected truncated derivative of `ρ_2` for `hierarchy` (order 2).
pub fn corrected_rhs(
    rho2: &SymOperator,
    hierarchy: &Hierarchy,
    model: &CorrectionModel,
    cfg: &CorrectionConfig,
) -> Result<(CMat, Option<CorrectionEvent>)> {
    if hierarchy.ops().order != 2 {
        return Err(Error::InvalidArgument(format!(
            "EOM corrections need truncation order 2, got {}",
            hierarchy.ops().order
        )));
    }
    let r = hierarchy.rhs(rho2)?;
    correct_derivative(rho2, r, model, cfg, Some(&hierarchy.ops().w))
}

/// How far below `ε`, in units of `ε`, an accepted step may carry an
/// unconstrained eigenvalue.
pub const CROSSING_SLACK: f64 = 10.0;

/// Truncated order-2 dynamics with the configured correction applied.
#[derive(Debug, Clone)]
pub struct CorrectedDynamics {
    hierarchy: Hierarchy,
    model: CorrectionModel,
    cfg: CorrectionConfig,
    pending: Option<CorrectionEvent>,
}

impl CorrectedDynamics {
    pub fn new(hierarchy: Hierarchy, cfg: CorrectionConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != CorrectionMode::None && hierarchy.ops().order != 2 {
            return Err(Error::InvalidArgument(format!(
                "corrections need truncation order 2, got {}",
                hierarchy.ops().order
            )));
        }
        let model = CorrectionModel::new(hierarchy.ops())?;
        Ok(Self {
            hierarchy,
            model,
            cfg,
            pending: None,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    fn merge(&mut self, ev: CorrectionEvent) {
        let acc = self.pending.get_or_insert(CorrectionEvent {
            iterations: 0,
            ..ev
        });
        acc.d_rho = acc.d_rho.max(ev.d_rho);
        acc.d_k = acc.d_k.max(ev.d_k);
        acc.norm = acc.norm.max(ev.norm);
        acc.contraction = acc.contraction.max(ev.contraction);
        acc.energy = acc.energy.max(ev.energy);
        acc.iterations += 1;
    }
}

impl crate::integrator::Dynamics for CorrectedDynamics {
    fn derivative(&mut self, _t: f64, rho: &SymOperator) -> Result<CMat> {
        match self.cfg.mode {
            CorrectionMode::Eom => {
                let (r, ev) = corrected_rhs(rho, &self.hierarchy, &self.model, &self.cfg)?;
                if let Some(ev) = ev {
                    self.merge(ev);
                }
                Ok(r)
            }
            CorrectionMode::None | CorrectionMode::Purify => self.hierarchy.rhs(rho),
        }
    }

    /// In EOM mode, refuses steps that carry the lowest eigenvalue of `ρ_2`
    /// or `K` from above the threshold to below [`CROSSING_SLACK`]`·ε`. The
    /// corrected derivative switches on at `ε`, a kink the step error
    /// estimate cannot see, so a long step would overshoot it unchecked.
    fn admissible(&mut self, from: &SymOperator, to: &SymOperator) -> Result<bool> {
        if self.cfg.mode != CorrectionMode::Eom {
            return Ok(true);
        }
        let floor = CROSSING_SLACK * self.cfg.epsilon;
        let lowest = |rho: &SymOperator| -> Result<f64> {
            let l = spectrum(rho.matrix())?.min();
            let x = if self.model.enforces_k() {
                spectrum(&self.model.k_of(rho)?)?.min()
            } else {
                f64::INFINITY
            };
            Ok(l.min(x))
        };
        let after = lowest(to)?;
        Ok(after >= floor || after >= lowest(from)?)
    }

    /// In EOM mode, reports the corrected evaluations since the last call
    /// (`iterations` counts them; sizes and residuals are maxima). In purify
    /// mode, purifies the state on multiples of the purification interval.
    fn at_boundary(&mut self, t: f64, rho: &mut SymOperator) -> Result<Option<CorrectionEvent>> {
        match self.cfg.mode {
            CorrectionMode::None => Ok(None),
            CorrectionMode::Eom => Ok(self.pending.take()),
            CorrectionMode::Purify => {
                let k = (t / self.cfg.dt).round();
                if (k * self.cfg.dt - t).abs() > 1e-9 * self.cfg.dt.max(t) {
                    return Ok(None);
                }
                let out = purify(rho, &self.model, &self.cfg, Some(&self.hierarchy.ops().w))?;
                if out.iterations == 0 {
                    return Ok(None);
                }
                *rho = out.rho2;
                Ok(Some(out.event))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClosureStrategy;
    use crate::dimer_exact::{exact_rdm, DimerParams};
    use crate::sampling::random_fock_state;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(n: usize) -> (ModelOperators, CorrectionModel) {
        let p = DimerParams::from_lambda(n, 1.0, 0.1).unwrap();
        let ops = ModelOperators::bose_hubbard(&p, 2).unwrap();
        let cm = CorrectionModel::new(&ops).unwrap();
        (ops, cm)
    }

    fn ket(d: usize, i: usize) -> CMat {
        let mut v = CMat::zeros(d, 1);
        v[(i, 0)] = Complex64::new(1.0, 0.0);
        v
    }

    #[test]
    fn coordinates_round_trip_and_are_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = crate::sampling::random_hermitian_unit_trace(2, 3, &mut rng).unwrap();
        let x = hermitian_coords(a.matrix());
        let back = from_hermitian_coords(&x, a.dim());
        assert!(max_abs(&(back - a.matrix())) < 1e-14);
        let n2: f64 = x.iter().map(|v| v * v).sum();
        assert!((n2.sqrt() - a.matrix().norm()).abs() < 1e-12);
    }

    #[test]
    fn counting_matches_formulas() {
        assert_eq!(parameter_count(2), 9);
        assert_eq!(base_constraint_count(2), 5);
        assert_eq!(active_row_limit(2, false), 4);
        assert_eq!(parameter_count(4), 100);
        assert_eq!(base_constraint_count(4), 17);
        assert_eq!(parity_constraint_count(4), 48);
        assert_eq!(active_row_limit(4, true), 35);

        let (_, cm) = model(10);
        assert_eq!(cm.parameter_count(), 9);
        assert_eq!(cm.standing_rows(), 5);
        assert_eq!(cm.system().rank(), 5);
        let p4 = CorrectionModel::decoupled(4, 10)
            .unwrap()
            .with_parity(&[false, true, false, true])
            .unwrap();
        assert_eq!(p4.parameter_count(), 100);
        assert_eq!(p4.standing_rows(), 48);
    }

    #[test]
    fn no_active_rows_gives_zero() {
        let (_, cm) = model(10);
        let c = least_norm_correction(&cm.system()).unwrap();
        assert_eq!(c.norm(), 0.0);
    }

    #[test]
    fn single_basis_row_without_standing_rows() {
        let cm = CorrectionModel::decoupled(2, 10).unwrap();
        let mut sys = cm.system();
        sys.add_rho_row(&ket(3, 1), 0, 0.3);
        let c = least_norm_correction(&sys).unwrap();
        let mut expect = CMat::zeros(3, 3);
        expect[(1, 1)] = Complex64::new(0.3, 0.0);
        assert!(max_abs(&(c.operator.matrix() - expect)) < 1e-14);
    }

    #[test]
    fn single_row_satisfies_kkt() {
        let (ops, cm) = model(10);
        let mut sys = cm.system();
        let v = CMat::from_column_slice(
            3,
            1,
            &[
                Complex64::new(0.6, 0.0),
                Complex64::new(0.0, 0.48),
                Complex64::new(0.64, 0.0),
            ],
        );
        sys.add_rho_row(&v, 0, 0.3);
        let c = least_norm_correction(&sys).unwrap();
        assert!((quad(&v, 0, c.operator.matrix()) - 0.3).abs() < 1e-12);
        let (contraction, energy) = audit(&c.operator, Some(&ops.w)).unwrap();
        assert!(contraction < 1e-12 && energy < 1e-12);
        // the optimum lies in the row space: x = Aᵀ μ
        let a = sys.matrix();
        let x = DVector::from_column_slice(&c.coords);
        let mu = a.transpose().svd(true, true).solve(&x, 1e-12).unwrap();
        assert!((a.transpose() * mu - x).amax() < 1e-12);
    }

    #[test]
    fn diagonal_is_pinned_in_the_dimer() {
        // contraction-free plus energy-neutral leaves only off-diagonal freedom
        let (_, cm) = model(10);
        for i in 0..3 {
            let mut sys = cm.system();
            sys.add_rho_row(&ket(3, i), 0, 0.3);
            assert!(matches!(
                least_norm_correction(&sys),
                Err(Error::InfeasibleCorrection { .. })
            ));
        }
    }

    #[test]
    fn free_dimension_positive_iff_few_rows() {
        let (_, cm) = model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for active in 0..=5 {
            let mut sys = cm.system();
            for k in 0..active {
                let v = crate::sampling::random_density(2, 2, &mut rng).unwrap();
                let s = spectrum(v.matrix()).unwrap();
                if k % 2 == 0 {
                    sys.add_rho_row(&s.vectors, 0, 0.0);
                } else {
                    let kv = spectrum(&cm.k_of(&v).unwrap()).unwrap();
                    sys.add_k_row(&kv.vectors, 0, 0.0);
                }
            }
            assert_eq!(sys.free_dimension() > 0, active < 4, "active={active}");
        }
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let cm = CorrectionModel::decoupled(2, 10).unwrap();
        let mut sys = cm.system();
        sys.add_rho_row(&ket(3, 0), 0, 1.0);
        sys.add_rho_row(&ket(3, 0), 0, 2.0);
        assert!(matches!(
            least_norm_correction(&sys),
            Err(Error::InfeasibleCorrection { .. })
        ));
    }

    #[test]
    fn purify_leaves_representable_state() {
        let (ops, cm) = model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let psi = random_fock_state(10, &mut rng);
        let rho2 = exact_rdm(&psi, 2).unwrap();
        let out = purify(&rho2, &cm, &CorrectionConfig::default(), Some(&ops.w)).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.rho2.max_abs_diff(&rho2), 0.0);
    }

    #[test]
    fn purify_diagonal_in_one_step() {
        let cm = CorrectionModel::decoupled(2, 10).unwrap();
        let mut a = CMat::zeros(3, 3);
        a[(0, 0)] = Complex64::new(1.05, 0.0);
        a[(1, 1)] = Complex64::new(-0.05, 0.0);
        let rho2 = SymOperator::new(SymBasis::shared(2, 2).unwrap(), a).unwrap();
        let cfg = CorrectionConfig::default();
        let out = purify(&rho2, &cm, &cfg, None).unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 1);
        let s = spectrum(out.rho2.matrix()).unwrap();
        assert!(s.min() >= cfg.epsilon);
    }

    #[test]
    fn purify_restores_positivity_with_standing_rows() {
        let (ops, cm) = model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let psi = random_fock_state(10, &mut rng);
        let exact = exact_rdm(&psi, 2).unwrap();
        let s = spectrum(exact.matrix()).unwrap();
        // push the smallest eigenvalue slightly negative
        let v = s.vectors.column(0).into_owned();
        let shift = SymOperator::new(exact.basis().clone(), &v * v.adjoint() * Complex64::new(-(s.values[0] + 1e-4), 0.0)).unwrap();
        let bad = exact.try_add(&shift).unwrap();
        let cfg = CorrectionConfig::default();
        let out = purify(&bad, &cm, &cfg, Some(&ops.w)).unwrap();
        assert!(out.converged, "{:?}", out.event);
        assert!(spectrum(out.rho2.matrix()).unwrap().min() >= cfg.epsilon);
        assert!(out.event.contraction < 1e-10 && out.event.energy < 1e-10);
    }

    #[test]
    fn empty_active_set_is_pass_through() {
        let (ops, cm) = model(10);
        let h = Hierarchy::new(ops, ClosureStrategy::Compatible).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let psi = random_fock_state(10, &mut rng);
        let rho2 = exact_rdm(&psi, 2).unwrap();
        let (r, ev) = corrected_rhs(&rho2, &h, &cm, &CorrectionConfig::default()).unwrap();
        assert!(ev.is_none());
        assert_eq!(r, h.rhs(&rho2).unwrap());
    }

    #[test]
    fn corrected_derivative_damps_active_eigenvalue() {
        let (ops, cm) = model(10);
        let h = Hierarchy::new(ops.clone(), ClosureStrategy::Compatible).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let psi = random_fock_state(10, &mut rng);
        let exact = exact_rdm(&psi, 2).unwrap();
        let s = spectrum(exact.matrix()).unwrap();
        let v = s.vectors.column(0).into_owned();
        let shift = &v * v.adjoint() * Complex64::new(-(s.values[0] + 1e-6), 0.0);
        let rho2 = SymOperator::new(exact.basis().clone(), exact.matrix() + shift).unwrap();
        let cfg = CorrectionConfig::default();
        let (r, ev) = corrected_rhs(&rho2, &h, &cm, &cfg).unwrap();
        let ev = ev.unwrap();
        assert_eq!(ev.d_rho, 1);
        assert!(ev.contraction < 1e-10 && ev.energy < 1e-10);
        let s2 = spectrum(rho2.matrix()).unwrap();
        let rate = quad(&s2.vectors, 0, &r);
        assert!((rate + cfg.eta * s2.values[0]).abs() < 1e-12);
    }

    #[test]
    fn eom_starts_from_a_pure_condensate() {
        // trial states near |N,0⟩ carry O(h²) negative eigenvalues along basis
        // kets whose rows the standing constraints contradict
        use crate::integrator::{integrate_collect, IntegratorConfig, Termination};
        let (ops, _) = model(10);
        let h = Hierarchy::new(ops, ClosureStrategy::Compatible).unwrap();
        let cfg = CorrectionConfig { mode: CorrectionMode::Eom, ..Default::default() };
        let mut dynamics = CorrectedDynamics::new(h, cfg.clone()).unwrap();
        let rho0 = exact_rdm(&crate::dimer_exact::FockState::all_left(10), 2).unwrap();
        let icfg = IntegratorConfig { t_final: 2.0, ..Default::default() };
        let (ems, out) = integrate_collect(&rho0, &mut dynamics, &icfg).unwrap();
        assert_eq!(out.termination, Termination::Completed);
        for e in &ems {
            assert!(spectrum(e.state.matrix()).unwrap().min() > CROSSING_SLACK * cfg.epsilon);
        }
    }
}
