//! Adaptive explicit Runge-Kutta propagation of a packed top-order RDM with
//! write-out at exact multiples of `Δt`.
//!
//! The state vector is the lower triangle of `ρ_ō` (real and imaginary parts
//! interleaved, diagonal real only), so the unpacked matrix is Hermitian by
//! construction.

use serde::{Deserialize, Serialize};

use crate::bbgky::{pack_lower, unpack_lower, Hierarchy, Rdm};
use crate::corrections::CorrectionEvent;
use crate::error::{Error, Result};
use crate::symspace::{CMat, SymOperator};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Dormand-Prince 8(5,3).
    #[default]
    Dop853,
    /// Dormand-Prince 5(4).
    Dopri5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Write-out interval in `1/J`.
    pub dt: f64,
    pub t_final: f64,
    /// Attempted steps allowed between two write-outs.
    pub max_steps_per_dt: usize,
    /// Abort once a packed state entry exceeds this in magnitude. RDM
    /// entries of a physical state never exceed one; past this point the
    /// trajectory is dominated by cancellation error.
    pub divergence_bound: f64,
    pub method: Method,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            dt: 0.1,
            t_final: 1.0,
            max_steps_per_dt: 1_000_000,
            divergence_bound: 1e6,
            method: Method::Dop853,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x > 0.0 && x.is_finite();
        if !pos(self.rtol) || !pos(self.atol) {
            return Err(Error::Config("rtol and atol must be positive".into()));
        }
        if !pos(self.dt) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(Error::Config(format!("t_final must be >= 0, got {}", self.t_final)));
        }
        if !(self.divergence_bound >= 1.0) {
            return Err(Error::Config(format!(
                "divergence_bound must be at least 1, got {}",
                self.divergence_bound
            )));
        }
        if self.max_steps_per_dt == 0 {
            return Err(Error::Config("max_steps_per_dt must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of write-out intervals; the last one may be shorter than `dt`.
    pub fn intervals(&self) -> usize {
        (self.t_final / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    /// Time of write-out `k`.
    pub fn output_time(&self, k: usize) -> f64 {
        (k as f64 * self.dt).min(self.t_final)
    }
}

/// Right-hand side of the propagated equation plus an optional hook at
/// write-out times.
pub trait Dynamics {
    fn derivative(&mut self, t: f64, rho: &SymOperator) -> Result<CMat>;

    /// Runs on the state at every write-out time before it is emitted. A
    /// changed state restarts the integrator.
    fn at_boundary(&mut self, _t: f64, _rho: &mut SymOperator) -> Result<Option<CorrectionEvent>> {
        Ok(None)
    }

    /// Whether a step from `from` to `to` may be accepted. A refused step
    /// is retried with half the step size.
    fn admissible(&mut self, _from: &SymOperator, _to: &SymOperator) -> Result<bool> {
        Ok(true)
    }
}

impl Dynamics for Hierarchy {
    fn derivative(&mut self, _t: f64, rho: &SymOperator) -> Result<CMat> {
        self.rhs(rho)
    }
}

#[derive(Debug, Clone)]
pub struct Emission {
    pub time: f64,
    pub state: Rdm,
    /// Accepted and rejected steps since the previous emission.
    pub steps: usize,
    pub rejected: usize,
    pub evaluations: usize,
    pub correction: Option<CorrectionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Completed,
    /// Step count per interval exceeded, step size underflow, or a diverged
    /// or non-finite state.
    StiffnessAbort { time: f64, reason: String },
    InfeasibleCorrection { time: f64, message: String },
    Failed { time: f64, message: String },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::StiffnessAbort { .. } => "StiffnessAbort",
            Termination::InfeasibleCorrection { .. } => "InfeasibleCorrection",
            Termination::Failed { .. } => "failed",
        }
    }

    pub fn detail(&self) -> Option<String> {
        match self {
            Termination::Completed => None,
            Termination::StiffnessAbort { time, reason } => Some(format!("t={time}: {reason}")),
            Termination::InfeasibleCorrection { time, message }
            | Termination::Failed { time, message } => Some(format!("t={time}: {message}")),
        }
    }

    fn from_error(time: f64, e: Error) -> Self {
        match e {
            Error::InfeasibleCorrection { .. } => Termination::InfeasibleCorrection {
                time,
                message: e.to_string(),
            },
            other => Termination::Failed {
                time,
                message: other.to_string(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub termination: Termination,
    /// Last emitted record.
    pub last: Option<Emission>,
    pub total_steps: usize,
    pub total_evaluations: usize,
}

struct System<'a, D> {
    dynamics: &'a mut D,
    m: usize,
    o: usize,
    d: usize,
    evals: usize,
}

impl<D: Dynamics> System<'_, D> {
    fn unpack(&self, y: &[f64]) -> SymOperator {
        let basis = crate::symspace::SymBasis::shared(self.m, self.o).expect("basis exists");
        SymOperator::new(basis, unpack_lower(self.d, y)).expect("square")
    }

    fn admissible(&mut self, from: &[f64], to: &[f64]) -> Result<bool> {
        let (a, b) = (self.unpack(from), self.unpack(to));
        self.dynamics.admissible(&a, &b)
    }

    fn eval(&mut self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        self.evals += 1;
        let rho = self.unpack(y);
        let r = self.dynamics.derivative(t, &rho)?;
        out.copy_from_slice(&pack_lower(&r));
        Ok(())
    }
}

// Dormand-Prince 8(5,3) coefficients
const C8: [f64; 12] = [
    0.0,
    0.526001519587677318785587544488e-1,
    0.789002279381515978178381316732e-1,
    0.118350341907227396726757197510,
    0.281649658092772603273242802490,
    0.333333333333333333333333333333,
    0.25,
    0.307692307692307692307692307692,
    0.651282051282051282051282051282,
    0.6,
    0.857142857142857142857142857142,
    1.0,
];

const A8: [&[(usize, f64)]; 12] = [
    &[],
    &[(0, 5.26001519587677318785587544488e-2)],
    &[(0, 1.97250569845378994544595329183e-2), (1, 5.91751709536136983633785987549e-2)],
    &[(0, 2.95875854768068491816892993775e-2), (2, 8.87627564304205475450678981324e-2)],
    &[
        (0, 2.41365134159266685502369798665e-1),
        (2, -8.84549479328286085344864962717e-1),
        (3, 9.24834003261792003115737966543e-1),
    ],
    &[
        (0, 3.7037037037037037037037037037e-2),
        (3, 1.70828608729473871279604482173e-1),
        (4, 1.25467687566822425016691814123e-1),
    ],
    &[
        (0, 3.7109375e-2),
        (3, 1.70252211019544039314978060272e-1),
        (4, 6.02165389804559606850219397283e-2),
        (5, -1.7578125e-2),
    ],
    &[
        (0, 3.70920001185047927108779319836e-2),
        (3, 1.70383925712239993810214054705e-1),
        (4, 1.07262030446373284651809199168e-1),
        (5, -1.53194377486244017527936158236e-2),
        (6, 8.27378916381402288758473766002e-3),
    ],
    &[
        (0, 6.24110958716075717114429577812e-1),
        (3, -3.36089262944694129406857109825),
        (4, -8.68219346841726006818189891453e-1),
        (5, 2.75920996994467083049415600797e1),
        (6, 2.01540675504778934086186788979e1),
        (7, -4.34898841810699588477366255144e1),
    ],
    &[
        (0, 4.77662536438264365890433908527e-1),
        (3, -2.48811461997166764192642586468),
        (4, -5.90290826836842996371446475743e-1),
        (5, 2.12300514481811942347288949897e1),
        (6, 1.52792336328824235832596922938e1),
        (7, -3.32882109689848629194453265587e1),
        (8, -2.03312017085086261358222928593e-2),
    ],
    &[
        (0, -9.3714243008598732571704021658e-1),
        (3, 5.18637242884406370830023853209),
        (4, 1.09143734899672957818500254654),
        (5, -8.14978701074692612513997267357),
        (6, -1.85200656599969598641566180701e1),
        (7, 2.27394870993505042818970056734e1),
        (8, 2.49360555267965238987089396762),
        (9, -3.0467644718982195003823669022),
    ],
    &[
        (0, 2.27331014751653820792359768449),
        (3, -1.05344954667372501984066689879e1),
        (4, -2.00087205822486249909675718444),
        (5, -1.79589318631187989172765950534e1),
        (6, 2.79488845294199600508499808837e1),
        (7, -2.85899827713502369474065508674),
        (8, -8.87285693353062954433549289258),
        (9, 1.23605671757943030647266201528e1),
        (10, 6.43392746015763530355970484046e-1),
    ],
];

const B8: [(usize, f64); 8] = [
    (0, 5.42937341165687622380535766363e-2),
    (5, 4.45031289275240888144113950566),
    (6, 1.89151789931450038304281599044),
    (7, -5.8012039600105847814672114227),
    (8, 3.1116436695781989440891606237e-1),
    (9, -1.52160949662516078556178806805e-1),
    (10, 2.01365400804030348374776537501e-1),
    (11, 4.47106157277725905176885569043e-2),
];

const BHH: [(usize, f64); 3] = [
    (0, 0.244094488188976377952755905512),
    (8, 0.733846688281611857341361741547),
    (11, 0.220588235294117647058823529412e-1),
];

const ER8: [(usize, f64); 8] = [
    (0, 0.1312004499419488073250102996e-1),
    (5, -0.1225156446376204440720569753e1),
    (6, -0.4957589496572501915214079952),
    (7, 0.1664377182454986536961530415e1),
    (8, -0.3503288487499736816886487290),
    (9, 0.3341791187130174790297318841),
    (10, 0.8192320648511571246570742613e-1),
    (11, -0.2235530786388629525884427845e-1),
];

// Dormand-Prince 5(4) coefficients
const C5: [f64; 6] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0];

const A5: [&[(usize, f64)]; 6] = [
    &[],
    &[(0, 0.2)],
    &[(0, 3.0 / 40.0), (1, 9.0 / 40.0)],
    &[(0, 44.0 / 45.0), (1, -56.0 / 15.0), (2, 32.0 / 9.0)],
    &[
        (0, 19372.0 / 6561.0),
        (1, -25360.0 / 2187.0),
        (2, 64448.0 / 6561.0),
        (3, -212.0 / 729.0),
    ],
    &[
        (0, 9017.0 / 3168.0),
        (1, -355.0 / 33.0),
        (2, 46732.0 / 5247.0),
        (3, 49.0 / 176.0),
        (4, -5103.0 / 18656.0),
    ],
];

const B5: [(usize, f64); 5] = [
    (0, 35.0 / 384.0),
    (2, 500.0 / 1113.0),
    (3, 125.0 / 192.0),
    (4, -2187.0 / 6784.0),
    (5, 11.0 / 84.0),
];

// error weights; index 6 is the derivative at the new point
const E5: [(usize, f64); 6] = [
    (0, 71.0 / 57600.0),
    (2, -71.0 / 16695.0),
    (3, 71.0 / 1920.0),
    (4, -17253.0 / 339200.0),
    (5, 22.0 / 525.0),
    (6, -1.0 / 40.0),
];

struct Control {
    expo: f64,
    beta: f64,
    safe: f64,
    /// Bounds on `h_old / h_new`.
    fac_min: f64,
    fac_max: f64,
    order: i32,
}

impl Method {
    fn control(self) -> Control {
        match self {
            Method::Dop853 => Control {
                expo: 1.0 / 8.0 - 0.04 * 0.2,
                beta: 0.04,
                safe: 0.9,
                fac_min: 1.0 / 6.0,
                fac_max: 1.0 / 0.333,
                order: 8,
            },
            Method::Dopri5 => Control {
                expo: 0.2 - 0.04 * 0.75,
                beta: 0.04,
                safe: 0.9,
                fac_min: 1.0 / 10.0,
                fac_max: 1.0 / 0.2,
                order: 5,
            },
        }
    }
}

fn combine(y: &[f64], k: &[Vec<f64>], coeffs: &[(usize, f64)], h: f64, out: &mut [f64]) {
    out.copy_from_slice(y);
    for &(s, a) in coeffs {
        let ha = h * a;
        for (o, v) in out.iter_mut().zip(&k[s]) {
            *o += ha * v;
        }
    }
}

struct Stepper {
    method: Method,
    ctl: Control,
    rtol: f64,
    atol: f64,
    k: Vec<Vec<f64>>,
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
    f_new: Vec<f64>,
    facold: f64,
}

enum StepResult {
    Accepted { h_next: f64 },
    Rejected { h_next: f64 },
    /// A trial state had no feasible correction; retried with a smaller step.
    Infeasible { h_next: f64, error: Error },
}

impl Stepper {
    fn new(method: Method, cfg: &IntegratorConfig, n: usize) -> Self {
        let stages = match method {
            Method::Dop853 => 12,
            Method::Dopri5 => 7,
        };
        Self {
            method,
            ctl: method.control(),
            rtol: cfg.rtol,
            atol: cfg.atol,
            k: vec![vec![0.0; n]; stages],
            y_stage: vec![0.0; n],
            y_new: vec![0.0; n],
            f_new: vec![0.0; n],
            facold: 1e-4,
        }
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.atol + self.rtol * a.abs().max(b.abs())
    }

    /// Initial step guess for an integrator of the given order.
    fn initial_step<D: Dynamics>(
        &mut self,
        sys: &mut System<D>,
        t: f64,
        y: &[f64],
        f0: &[f64],
        h_max: f64,
    ) -> Result<f64> {
        let mut dnf = 0.0;
        let mut dny = 0.0;
        for (yi, fi) in y.iter().zip(f0) {
            let sk = self.atol + self.rtol * yi.abs();
            dnf += (fi / sk).powi(2);
            dny += (yi / sk).powi(2);
        }
        let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
            1e-6
        } else {
            (dny / dnf).sqrt() * 0.01
        };
        h = h.min(h_max);
        loop {
            for ((s, yi), fi) in self.y_stage.iter_mut().zip(y).zip(f0) {
                *s = yi + h * fi;
            }
            let y1 = self.y_stage.clone();
            match sys.eval(t + h, &y1, &mut self.f_new) {
                Err(Error::InfeasibleCorrection { .. }) if h > 1e-12 => h *= 0.25,
                r => break r?,
            }
        }
        let mut der2 = 0.0;
        for ((yi, fi), f1) in y.iter().zip(f0).zip(&self.f_new) {
            let sk = self.atol + self.rtol * yi.abs();
            der2 += ((f1 - fi) / sk).powi(2);
        }
        let der2 = der2.sqrt() / h;
        let der12 = der2.max(dnf.sqrt());
        let h1 = if der12 <= 1e-15 {
            (h * 1e-3).max(1e-6)
        } else {
            (0.01 / der12).powf(1.0 / self.ctl.order as f64)
        };
        Ok((100.0 * h).min(h1).min(h_max))
    }

    /// One attempted step from `(t, y)` with `k[0] = f(t, y)`. On acceptance
    /// `y_new` and `f_new` hold the new state and its derivative. Trial
    /// states are extrapolations, so an infeasible correction there rejects
    /// the step instead of ending the run.
    fn step<D: Dynamics>(
        &mut self,
        sys: &mut System<D>,
        t: f64,
        y: &[f64],
        h: f64,
        after_reject: bool,
    ) -> Result<StepResult> {
        match self.attempt(sys, t, y, h, after_reject) {
            Err(error @ Error::InfeasibleCorrection { .. }) => Ok(StepResult::Infeasible {
                h_next: 0.25 * h,
                error,
            }),
            other => other,
        }
    }

    fn attempt<D: Dynamics>(
        &mut self,
        sys: &mut System<D>,
        t: f64,
        y: &[f64],
        h: f64,
        after_reject: bool,
    ) -> Result<StepResult> {
        let n = y.len();
        let err = match self.method {
            Method::Dop853 => {
                for s in 1..12 {
                    combine(y, &self.k, A8[s], h, &mut self.y_stage);
                    let ys = std::mem::take(&mut self.y_stage);
                    let mut ks = std::mem::take(&mut self.k[s]);
                    let r = sys.eval(t + C8[s] * h, &ys, &mut ks);
                    self.y_stage = ys;
                    self.k[s] = ks;
                    r?;
                }
                combine(y, &self.k, &B8, h, &mut self.y_new);
                let mut err5 = 0.0;
                let mut err3 = 0.0;
                for i in 0..n {
                    let sk = self.scale(y[i], self.y_new[i]);
                    let bsum: f64 = B8.iter().map(|&(s, b)| b * self.k[s][i]).sum();
                    let e3 = bsum - BHH.iter().map(|&(s, b)| b * self.k[s][i]).sum::<f64>();
                    let e5: f64 = ER8.iter().map(|&(s, b)| b * self.k[s][i]).sum();
                    err3 += (e3 / sk).powi(2);
                    err5 += (e5 / sk).powi(2);
                }
                let mut deno = err5 + 0.01 * err3;
                if deno <= 0.0 {
                    deno = 1.0;
                }
                h.abs() * err5 * (1.0 / (deno * n as f64)).sqrt()
            }
            Method::Dopri5 => {
                for s in 1..6 {
                    combine(y, &self.k, A5[s], h, &mut self.y_stage);
                    let ys = std::mem::take(&mut self.y_stage);
                    let mut ks = std::mem::take(&mut self.k[s]);
                    let r = sys.eval(t + C5[s] * h, &ys, &mut ks);
                    self.y_stage = ys;
                    self.k[s] = ks;
                    r?;
                }
                combine(y, &self.k, &B5, h, &mut self.y_new);
                let yn = std::mem::take(&mut self.y_new);
                let mut k6 = std::mem::take(&mut self.k[6]);
                let r = sys.eval(t + h, &yn, &mut k6);
                self.y_new = yn;
                self.k[6] = k6;
                r?;
                let mut err = 0.0;
                for i in 0..n {
                    let sk = self.scale(y[i], self.y_new[i]);
                    let e: f64 = E5.iter().map(|&(s, b)| b * self.k[s][i]).sum();
                    err += (h * e / sk).powi(2);
                }
                (err / n as f64).sqrt()
            }
        };
        let ctl = &self.ctl;
        if !err.is_finite() || self.y_new.iter().any(|v| !v.is_finite()) {
            return Ok(StepResult::Rejected { h_next: 0.1 * h });
        }
        let fac11 = err.powf(ctl.expo);
        let fac = (fac11 / self.facold.powf(ctl.beta) / ctl.safe).clamp(ctl.fac_min, ctl.fac_max);
        if err <= 1.0 && !sys.admissible(y, &self.y_new)? {
            return Ok(StepResult::Rejected { h_next: 0.5 * h });
        }
        if err <= 1.0 {
            self.facold = err.max(1e-4);
            match self.method {
                Method::Dop853 => {
                    let yn = std::mem::take(&mut self.y_new);
                    let mut fnew = std::mem::take(&mut self.f_new);
                    let r = sys.eval(t + h, &yn, &mut fnew);
                    self.y_new = yn;
                    self.f_new = fnew;
                    r?;
                }
                Method::Dopri5 => self.f_new.copy_from_slice(&self.k[6]),
            }
            let mut h_next = h / fac;
            if after_reject {
                h_next = h_next.min(h);
            }
            Ok(StepResult::Accepted { h_next })
        } else {
            let h_next = h / (fac11 / ctl.safe).min(ctl.fac_max);
            Ok(StepResult::Rejected { h_next })
        }
    }
}

/// Propagates `rho0` under `dynamics` and hands every write-out record,
/// starting with `t = 0`, to `sink`. Failures of the dynamics end the run
/// with a diagnosed [`Termination`]; only errors from `sink` are returned.
pub fn integrate<D, F>(
    rho0: &Rdm,
    dynamics: &mut D,
    cfg: &IntegratorConfig,
    mut sink: F,
) -> Result<Outcome>
where
    D: Dynamics,
    F: FnMut(&Emission) -> Result<()>,
{
    cfg.validate()?;
    let (m, o, d) = (rho0.m(), rho0.order(), rho0.dim());
    let mut sys = System {
        dynamics,
        m,
        o,
        d,
        evals: 0,
    };
    let mut y = rho0.pack();
    let n = y.len();
    let mut stepper = Stepper::new(cfg.method, cfg, n);
    let mut total_steps = 0;
    let mut last: Option<Emission> = None;

    let finish = |termination, last, total_steps, evals| Outcome {
        termination,
        last,
        total_steps,
        total_evaluations: evals,
    };

    // boundary hook, emission; returns whether the state changed
    macro_rules! boundary {
        ($t:expr, $steps:expr, $rejected:expr, $evals:expr) => {{
            let mut rho = sys.unpack(&y);
            let before = y.clone();
            let correction = match sys.dynamics.at_boundary($t, &mut rho) {
                Ok(c) => c,
                Err(e) => {
                    let evals = sys.evals;
                    return Ok(finish(Termination::from_error($t, e), last, total_steps, evals));
                }
            };
            y = pack_lower(rho.matrix());
            let state = Rdm::new(sys.unpack(&y))?;
            let em = Emission {
                time: $t,
                state,
                steps: $steps,
                rejected: $rejected,
                evaluations: $evals,
                correction: correction.map(|mut c| {
                    c.time = $t;
                    c
                }),
            };
            sink(&em)?;
            last = Some(em);
            y != before
        }};
    }

    let _ = boundary!(0.0, 0, 0, 0);
    let mut t = 0.0;
    let mut f0 = vec![0.0; n];
    if let Err(e) = sys.eval(t, &y, &mut f0) {
        let evals = sys.evals;
        return Ok(finish(Termination::from_error(t, e), last, total_steps, evals));
    }
    let h_max = cfg.dt;
    let mut h = match stepper.initial_step(&mut sys, t, &y, &f0, h_max) {
        Ok(h) => h,
        Err(e) => {
            let evals = sys.evals;
            return Ok(finish(Termination::from_error(t, e), last, total_steps, evals));
        }
    };

    let mut infeasible = None;
    for k in 1..=cfg.intervals() {
        let t_out = cfg.output_time(k);
        let evals_start = sys.evals;
        let mut steps = 0;
        let mut rejected = 0;
        let mut after_reject = false;
        while t < t_out {
            if steps >= cfg.max_steps_per_dt {
                let evals = sys.evals;
                let term = Termination::StiffnessAbort {
                    time: t,
                    reason: format!("more than {} steps in one write-out interval", cfg.max_steps_per_dt),
                };
                return Ok(finish(term, last, total_steps, evals));
            }
            if h < 1e-14 * t.abs().max(1.0) {
                let evals = sys.evals;
                let term = match infeasible.take() {
                    Some(e) => Termination::from_error(t, e),
                    None => Termination::StiffnessAbort {
                        time: t,
                        reason: format!("step size underflow (h = {h:e})"),
                    },
                };
                return Ok(finish(term, last, total_steps, evals));
            }
            let lands = t + 1.01 * h >= t_out;
            let h_try = if lands { t_out - t } else { h };
            stepper.k[0].copy_from_slice(&f0);
            steps += 1;
            total_steps += 1;
            match stepper.step(&mut sys, t, &y, h_try, after_reject) {
                Err(e) => {
                    let evals = sys.evals;
                    return Ok(finish(Termination::from_error(t, e), last, total_steps, evals));
                }
                Ok(StepResult::Accepted { h_next }) => {
                    t = if lands { t_out } else { t + h_try };
                    y.copy_from_slice(&stepper.y_new);
                    f0.copy_from_slice(&stepper.f_new);
                    after_reject = false;
                    infeasible = None;
                    h = if lands { h_next.max(h) } else { h_next }.min(h_max);
                }
                Ok(StepResult::Rejected { h_next }) => {
                    rejected += 1;
                    after_reject = true;
                    h = h_next;
                }
                Ok(StepResult::Infeasible { h_next, error }) => {
                    rejected += 1;
                    after_reject = true;
                    h = h_next;
                    infeasible = Some(error);
                }
            }
        }
        let largest = y.iter().fold(0.0_f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if largest > cfg.divergence_bound {
            let evals = sys.evals;
            let reason = if largest.is_finite() {
                format!("state diverged (entry {largest:.3e})")
            } else {
                "non-finite state".into()
            };
            let term = Termination::StiffnessAbort { time: t, reason };
            return Ok(finish(term, last, total_steps, evals));
        }
        let evals = sys.evals - evals_start;
        if boundary!(t_out, steps, rejected, evals) {
            if let Err(e) = sys.eval(t, &y, &mut f0) {
                let evals = sys.evals;
                return Ok(finish(Termination::from_error(t, e), last, total_steps, evals));
            }
        }
    }
    let evals = sys.evals;
    Ok(finish(Termination::Completed, last, total_steps, evals))
}

/// Integrates and collects every emission.
pub fn integrate_collect<D: Dynamics>(
    rho0: &Rdm,
    dynamics: &mut D,
    cfg: &IntegratorConfig,
) -> Result<(Vec<Emission>, Outcome)> {
    let mut out = Vec::new();
    let outcome = integrate(rho0, dynamics, cfg, |e| {
        out.push(e.clone());
        Ok(())
    })?;
    Ok((out, outcome))
}
