//! Orchestration: one worker per run on a rayon pool, each run owning its
//! output directory.
//!
//! Layout of `out/`:
//!
//! ```text
//! manifest.json
//! exact/   imbalance np_o{o} kspec clusternorms fockprob energy
//! o{ō}/    imbalance np_o{o} kspec clusternorms tracedist_o{o} steps energy
//! o2_eom/  … plus corrections
//! ```
//!
//! Column order: `np_o{o}` holds `lambda1 … lambdaD` descending; `kspec`
//! holds `xi1 … xi4` ascending; `clusternorms` holds `c1 … cK` (trace
//! norms); `fockprob` holds `p0 … pN` with `p_k = |⟨N−k, k|ψ⟩|²`;
//! `tracedist_o{o}` holds `d`; `steps` holds `steps,rejected,evaluations`
//! since the previous row; `energy` holds `energy,trace`; `corrections`
//! holds `d_rho,d_k,norm,iterations,converged,contraction,energy`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{RunSpec, ScenarioConfig};
use super::output::{header, named, sci, Csv};
use super::CliError;
use crate::bbgky::{Hierarchy, ModelOperators};
use crate::corrections::{CorrectedDynamics, CorrectionMode};
use crate::diagnostics::{trace_distance, Record, NEGATIVITY_EPS};
use crate::dimer_exact::{exact_rdm, DimerPropagator, FockState};
use crate::integrator::{integrate, Termination};
use crate::symspace::{dimension, trace_down};

pub const SCHEMA: u32 = 1;

/// Rows per parallel batch of the exact run.
const EXACT_BATCH: usize = 256;

#[derive(Debug, Clone, Serialize)]
pub struct TNeg {
    pub order: usize,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub kind: &'static str,
    pub order: Option<usize>,
    pub correction: Option<CorrectionMode>,
    /// `completed`, `StiffnessAbort`, `InfeasibleCorrection` or `failed`.
    pub termination: &'static str,
    pub detail: Option<String>,
    pub records: usize,
    pub t_end: Option<f64>,
    pub steps: usize,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub energy_initial: Option<f64>,
    pub energy_final: Option<f64>,
    /// Largest `|E(t) − E(0)| / max(|E(0)|, 1)`.
    pub max_energy_drift: Option<f64>,
    pub max_trace_drift: f64,
    pub correction_events: usize,
    pub t_neg: Vec<TNeg>,
}

impl RunReport {
    /// Completed or ended with a diagnosed abort.
    pub fn diagnosed(&self) -> bool {
        self.termination != "failed"
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub bbgky_bose: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema: u32,
    pub versions: Versions,
    pub config: ScenarioConfig,
    pub threads: usize,
    pub wall_seconds: f64,
    pub runs: Vec<RunReport>,
}

impl Manifest {
    pub fn all_diagnosed(&self) -> bool {
        self.runs.iter().all(RunReport::diagnosed)
    }

    pub fn run(&self, name: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.name == name)
    }
}

/// All files of one run.
struct RunFiles {
    imbalance: Csv,
    populations: Vec<Csv>,
    kspec: Option<Csv>,
    cluster_norms: Option<Csv>,
    energy: Csv,
    fock: Option<Csv>,
    trace_distances: Vec<Csv>,
    steps: Option<Csv>,
    corrections: Option<Csv>,
    stats: Stats,
}

#[derive(Default)]
struct Stats {
    records: usize,
    t_end: Option<f64>,
    energy_initial: Option<f64>,
    energy_final: Option<f64>,
    energy_drift: Option<f64>,
    trace_drift: f64,
    corrections: usize,
    t_neg: Vec<Option<f64>>,
}

struct Layout {
    top: usize,
    n: usize,
    cluster_norms: bool,
    exact: bool,
    trace_distances: bool,
    corrections: bool,
}

impl RunFiles {
    fn create(dir: &Path, l: &Layout) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let populations = (1..=l.top)
            .map(|o| Csv::create(dir, &format!("np_o{o}.csv"), &header("lambda", o + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let kspec = if l.top >= 2 {
            Some(Csv::create(dir, "kspec.csv", &header("xi", 4))?)
        } else {
            None
        };
        let cluster_norms = if l.cluster_norms {
            Some(Csv::create(dir, "clusternorms.csv", &header("c", l.top))?)
        } else {
            None
        };
        let fock = if l.exact {
            let cols: Vec<String> = std::iter::once("time".to_string())
                .chain((0..=l.n).map(|k| format!("p{k}")))
                .collect();
            Some(Csv::create(dir, "fockprob.csv", &cols)?)
        } else {
            None
        };
        let trace_distances = if l.trace_distances {
            (1..=l.top)
                .map(|o| Csv::create(dir, &format!("tracedist_o{o}.csv"), &named(&["d"])))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let steps = if l.exact {
            None
        } else {
            Some(Csv::create(dir, "steps.csv", &named(&["steps", "rejected", "evaluations"]))?)
        };
        let corrections = if l.corrections {
            Some(Csv::create(
                dir,
                "corrections.csv",
                &named(&["d_rho", "d_k", "norm", "iterations", "converged", "contraction", "energy"]),
            )?)
        } else {
            None
        };
        Ok(Self {
            imbalance: Csv::create(dir, "imbalance.csv", &named(&["imbalance"]))?,
            populations,
            kspec,
            cluster_norms,
            energy: Csv::create(dir, "energy.csv", &named(&["energy", "trace"]))?,
            fock,
            trace_distances,
            steps,
            corrections,
            stats: Stats {
                t_neg: vec![None; l.top],
                ..Stats::default()
            },
        })
    }

    fn write(&mut self, r: &Record, evaluations: usize, dists: &[f64]) -> Result<(), CliError> {
        let t = r.time;
        self.imbalance.row(t, &[r.imbalance])?;
        for (csv, np) in self.populations.iter_mut().zip(&r.populations) {
            csv.row(t, np)?;
        }
        if let (Some(csv), Some(k)) = (&mut self.kspec, &r.k_spectrum) {
            csv.row(t, k)?;
        }
        if let (Some(csv), Some(c)) = (&mut self.cluster_norms, &r.cluster_norms) {
            csv.row(t, c)?;
        }
        self.energy
            .row(t, &[r.energy.unwrap_or(f64::NAN), r.trace])?;
        if let (Some(csv), Some(p)) = (&mut self.fock, &r.fock) {
            csv.row(t, p)?;
        }
        for (csv, d) in self.trace_distances.iter_mut().zip(dists) {
            csv.row(t, &[*d])?;
        }
        if let Some(csv) = &mut self.steps {
            csv.raw(
                t,
                &[r.steps.to_string(), r.rejected.to_string(), evaluations.to_string()],
            )?;
        }
        if let (Some(csv), Some(ev)) = (&mut self.corrections, &r.correction) {
            csv.raw(
                t,
                &[
                    ev.d_rho.to_string(),
                    ev.d_k.to_string(),
                    sci(ev.norm),
                    ev.iterations.to_string(),
                    ev.converged.to_string(),
                    sci(ev.contraction),
                    sci(ev.energy),
                ],
            )?;
            self.stats.corrections += 1;
        }

        let s = &mut self.stats;
        s.records += 1;
        s.t_end = Some(t);
        s.trace_drift = s.trace_drift.max((r.trace - 1.0).abs());
        if let Some(e) = r.energy {
            let e0 = *s.energy_initial.get_or_insert(e);
            let d = (e - e0).abs() / e0.abs().max(1.0);
            s.energy_drift = Some(s.energy_drift.map_or(d, |m| m.max(d)));
            s.energy_final = Some(e);
        }
        for (o, slot) in s.t_neg.iter_mut().enumerate() {
            if slot.is_none() && r.min_population(o + 1).is_some_and(|l| l < NEGATIVITY_EPS) {
                *slot = Some(t);
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Stats, CliError> {
        let all = std::iter::once(self.imbalance)
            .chain(self.populations)
            .chain(self.kspec)
            .chain(self.cluster_norms)
            .chain(std::iter::once(self.energy))
            .chain(self.fock)
            .chain(self.trace_distances)
            .chain(self.steps)
            .chain(self.corrections);
        for csv in all {
            csv.finish()?;
        }
        Ok(self.stats)
    }
}

fn report(
    spec: RunSpec,
    stats: Stats,
    termination: &Termination,
    steps: usize,
    evaluations: usize,
    started: Instant,
) -> RunReport {
    let (kind, order, correction) = match spec {
        RunSpec::Exact => ("exact", None, None),
        RunSpec::Truncated { order, mode } => ("truncated", Some(order), Some(mode)),
    };
    RunReport {
        name: spec.name(),
        kind,
        order,
        correction,
        termination: termination.label(),
        detail: termination.detail(),
        records: stats.records,
        t_end: stats.t_end,
        steps,
        evaluations,
        wall_seconds: started.elapsed().as_secs_f64(),
        energy_initial: stats.energy_initial,
        energy_final: stats.energy_final,
        max_energy_drift: stats.energy_drift,
        max_trace_drift: stats.trace_drift,
        correction_events: stats.corrections,
        t_neg: stats
            .t_neg
            .iter()
            .enumerate()
            .map(|(i, &time)| TNeg { order: i + 1, time })
            .collect(),
    }
}

fn run_exact(cfg: &ScenarioConfig, dir: &Path) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let top = cfg.exact_order();
    let ops = cfg.operators(2)?;
    let prop = DimerPropagator::new(cfg.params()?)?;
    let psi0 = cfg.initial_state();
    let mut files = RunFiles::create(
        dir,
        &Layout {
            top,
            n: cfg.n,
            cluster_norms: cfg.cluster_norms,
            exact: true,
            trace_distances: false,
            corrections: false,
        },
    )?;
    let icfg = cfg.integrator_config();
    let times: Vec<f64> = (0..=icfg.intervals()).map(|k| icfg.output_time(k)).collect();
    for batch in times.chunks(EXACT_BATCH) {
        let records = batch
            .par_iter()
            .map(|&t| {
                let psi = prop.evolve(&psi0, t)?;
                let r = Record::from_exact(t, &psi, top, Some(&ops))?;
                if cfg.cluster_norms {
                    r.with_cluster_norms(cfg.cluster_weights)
                } else {
                    Ok(r)
                }
            })
            .collect::<crate::Result<Vec<_>>>()?;
        for r in &records {
            files.write(r, 0, &[])?;
        }
    }
    let stats = files.finish()?;
    Ok(report(RunSpec::Exact, stats, &Termination::Completed, 0, 0, started))
}

/// Exact reference for trace distances.
struct Reference {
    prop: DimerPropagator,
    psi0: FockState,
}

impl Reference {
    fn distances(&self, r: &Record) -> crate::Result<Vec<f64>> {
        let top = r.family.len();
        let psi = self.prop.evolve(&self.psi0, r.time)?;
        let exact = exact_rdm(&psi, top)?;
        r.family
            .iter()
            .enumerate()
            .map(|(i, rho)| trace_distance(rho, &trace_down(&exact, i + 1)?))
            .collect()
    }
}

fn run_truncated(
    cfg: &ScenarioConfig,
    order: usize,
    mode: CorrectionMode,
    dir: &Path,
) -> Result<RunReport, CliError> {
    let started = Instant::now();
    let spec = RunSpec::Truncated { order, mode };
    let ops: ModelOperators = cfg.operators(order)?;
    let hierarchy = Hierarchy::with_weights(ops.clone(), cfg.closure, cfg.cluster_weights)?;
    let mut correction = cfg.correction.clone();
    correction.mode = mode;
    let mut dynamics = CorrectedDynamics::new(hierarchy, correction)?;
    let psi0 = cfg.initial_state();
    let rho0 = exact_rdm(&psi0, order)?;
    let reference = if cfg.trace_distances() {
        Some(Reference {
            prop: DimerPropagator::new(cfg.params()?)?,
            psi0,
        })
    } else {
        None
    };
    let mut files = RunFiles::create(
        dir,
        &Layout {
            top: order,
            n: cfg.n,
            cluster_norms: cfg.cluster_norms,
            exact: false,
            trace_distances: reference.is_some(),
            corrections: mode != CorrectionMode::None,
        },
    )?;

    let mut io_failure: Option<CliError> = None;
    let outcome = integrate(&rho0, &mut dynamics, &cfg.integrator_config(), |e| {
        let mut r = Record::from_emission(e, cfg.n, Some(&ops))?;
        if cfg.cluster_norms {
            r = r.with_cluster_norms(cfg.cluster_weights)?;
        }
        let dists = match &reference {
            Some(rf) => rf.distances(&r)?,
            None => Vec::new(),
        };
        files.write(&r, e.evaluations, &dists).map_err(|err| {
            let msg = err.to_string();
            io_failure = Some(err);
            crate::Error::InvalidArgument(msg)
        })
    });
    if let Some(err) = io_failure {
        return Err(err);
    }
    let stats_time = files.stats.t_end.unwrap_or(0.0);
    let (termination, steps, evaluations) = match outcome {
        Ok(o) => (o.termination, o.total_steps, o.total_evaluations),
        Err(e) => (
            Termination::Failed {
                time: stats_time,
                message: e.to_string(),
            },
            0,
            0,
        ),
    };
    let stats = files.finish()?;
    Ok(report(spec, stats, &termination, steps, evaluations, started))
}

fn run_one(cfg: &ScenarioConfig, spec: RunSpec, out: &Path) -> Result<RunReport, CliError> {
    let dir = out.join(spec.name());
    let attempt = match spec {
        RunSpec::Exact => run_exact(cfg, &dir),
        RunSpec::Truncated { order, mode } => run_truncated(cfg, order, mode, &dir),
    };
    match attempt {
        Err(CliError::Run(message)) => {
            let (kind, order, correction) = match spec {
                RunSpec::Exact => ("exact", None, None),
                RunSpec::Truncated { order, mode } => ("truncated", Some(order), Some(mode)),
            };
            Ok(RunReport {
                name: spec.name(),
                kind,
                order,
                correction,
                termination: "failed",
                detail: Some(message),
                records: 0,
                t_end: None,
                steps: 0,
                evaluations: 0,
                wall_seconds: 0.0,
                energy_initial: None,
                energy_final: None,
                max_energy_drift: None,
                max_trace_drift: 0.0,
                correction_events: 0,
                t_neg: Vec::new(),
            })
        }
        other => other,
    }
}

/// Output directory: explicit override, then the config's `out`, then
/// `./out`.
pub fn output_dir(cfg: &ScenarioConfig, overridden: Option<&Path>) -> PathBuf {
    overridden
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs every scenario of `cfg` into `out` and writes `manifest.json`.
/// `threads = None` uses all cores.
pub fn execute(cfg: &ScenarioConfig, out: &Path, threads: Option<usize>) -> Result<Manifest, CliError> {
    cfg.validate()?;
    // guard against absurd sizes before spawning anything
    for o in cfg.orders.iter().copied().chain([cfg.exact_order()]) {
        dimension(2, o)?;
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = threads {
        builder = builder.num_threads(k);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Run(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let specs = cfg.runs();
    let runs = pool.install(|| {
        specs
            .par_iter()
            .map(|&spec| run_one(cfg, spec, out))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let manifest = Manifest {
        schema: SCHEMA,
        versions: Versions {
            bbgky_bose: env!("CARGO_PKG_VERSION"),
        },
        config: cfg.clone(),
        threads: pool.current_num_threads(),
        wall_seconds: started.elapsed().as_secs_f64(),
        runs,
    };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Run(format!("manifest: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::output::read_csv;

    fn smoke(extra: &str) -> ScenarioConfig {
        ScenarioConfig::from_toml(&format!(
            "n = 4\nlambda = 0.1\norders = [2]\nt_final = 1.0\nexact = true\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn smoke_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let m = execute(&smoke(""), dir.path(), Some(2)).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0);
        assert!(m.all_diagnosed());
        assert_eq!(m.runs.len(), 2);
        for r in &m.runs {
            assert_eq!(r.termination, "completed");
            assert_eq!(r.records, 11);
        }
        let o2 = dir.path().join("o2");
        for f in ["imbalance", "np_o1", "np_o2", "kspec", "clusternorms", "tracedist_o1", "tracedist_o2", "steps", "energy"] {
            let (_, rows) = read_csv(&o2.join(format!("{f}.csv"))).unwrap();
            assert_eq!(rows.len(), 11, "{f}");
        }
        assert!(!o2.join("corrections.csv").exists());
        let (h, rows) = read_csv(&dir.path().join("exact/fockprob.csv")).unwrap();
        assert_eq!(h.len(), 6);
        assert!((rows[0][1] - 1.0).abs() < 1e-15);
        let (_, d) = read_csv(&o2.join("tracedist_o2.csv")).unwrap();
        assert!(d.iter().all(|r| r[1] < 1e-4));
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["schema"], 1);
        assert_eq!(manifest["runs"][1]["termination"], "completed");
    }

    #[test]
    fn csv_bodies_are_reproducible() {
        let cfg = smoke("[correction]\nmode = \"eom\"\n");
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        execute(&cfg, a.path(), Some(1)).unwrap();
        execute(&cfg, b.path(), Some(3)).unwrap();
        for run in ["exact", "o2", "o2_eom"] {
            for entry in std::fs::read_dir(a.path().join(run)).unwrap() {
                let p = entry.unwrap().path();
                let q = b.path().join(run).join(p.file_name().unwrap());
                assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap(), "{}", p.display());
            }
        }
    }

    #[test]
    fn step_limit_is_reported_as_abort() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke("[integrator]\nmax_steps_per_dt = 1\n");
        let m = execute(&cfg, dir.path(), None).unwrap();
        let r = m.run("o2").unwrap();
        assert_eq!(r.termination, "StiffnessAbort");
        assert!(m.all_diagnosed());
    }
}
