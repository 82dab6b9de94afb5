//! Experiment drivers: convergence sweeps against references, long-time
//! invariant monitoring, Poincare sections and defect-decay ladders, with
//! CSV persistence and generated gnuplot scripts.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};

use ua_core::averaging::{AveragingFlavor, ChangeOfVariable, FixedPointParams};
use ua_core::field::{EpsilonParams, PeriodicField};
use ua_core::micromacro::MicroMacroSystem;
use ua_core::problems::henon_heiles::{self, HenonHeiles};
use ua_core::problems::klein_gordon::{self, KleinGordon};
use ua_core::pullback::{PullbackMap, PullbackSystem};
use ua_core::schemes::{
    integrate, reference_solve, Scheme, StepControls, Trajectory, TransformedRhs,
};
use ua_core::state::{self, C64, State};
use ua_core::torus::ThetaGrid;

use crate::config::{ExperimentConfig, Method, Problem};
use crate::csvout::{fmt, plot_path, sibling, write_csv};

/// Deterministic generator for probe states.
pub fn splitmix(seed: &mut u64) -> f64 {
    *seed = seed.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *seed;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z = z ^ (z >> 31);
    (z >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// What the trajectory starts from.
#[derive(Clone, Copy, Debug)]
pub enum InitialData {
    /// the convergence-study data of each benchmark
    Convergence,
    /// (q1,q2,p1,p2) = (0, 0, sqrt(2 eps H) sin(a pi/2), sqrt(2 H) cos(a pi/2))
    Section { h_target: f64, angle: f64 },
    /// the invariant-study data (nontrivial charge for Klein-Gordon)
    Invariants,
}

/// One problem instance wired to a UA method.
pub struct Instance {
    pub problem: Problem,
    pub method: Method,
    pub eps_problem: f64,
    pub sys: UaSystem,
    pub u0: State,
    pub kg: Option<Arc<KleinGordon>>,
    pub hh: Option<Arc<HenonHeiles>>,
    pub controls: StepControls,
}

pub enum UaSystem {
    MicroMacro(MicroMacroSystem),
    Pullback(PullbackSystem),
}

impl TransformedRhs for UaSystem {
    fn dim(&self) -> usize {
        match self {
            UaSystem::MicroMacro(s) => s.dim(),
            UaSystem::Pullback(s) => s.dim(),
        }
    }
    fn eps(&self) -> EpsilonParams {
        match self {
            UaSystem::MicroMacro(s) => s.eps(),
            UaSystem::Pullback(s) => s.eps(),
        }
    }
    fn theta_profile(&self, t: f64, u: &[C64]) -> ua_core::Result<ua_core::torus::ThetaSamples> {
        match self {
            UaSystem::MicroMacro(s) => s.theta_profile(t, u),
            UaSystem::Pullback(s) => s.theta_profile(t, u),
        }
    }
    fn theta_profile_with_tol(
        &self,
        t: f64,
        u: &[C64],
        tol: f64,
    ) -> ua_core::Result<ua_core::torus::ThetaSamples> {
        match self {
            UaSystem::MicroMacro(s) => s.theta_profile_with_tol(t, u, tol),
            UaSystem::Pullback(s) => s.theta_profile_with_tol(t, u, tol),
        }
    }
    fn fused_midpoint_step(
        &self,
        t_k: f64,
        dt: f64,
        u_k: &[C64],
        controls: StepControls,
    ) -> Option<ua_core::Result<State>> {
        match self {
            UaSystem::MicroMacro(s) => s.fused_midpoint_step(t_k, dt, u_k, controls),
            UaSystem::Pullback(s) => s.fused_midpoint_step(t_k, dt, u_k, controls),
        }
    }
}

/// Minimal scalar benchmark: du/dt = (1 + cos(2 pi t / eps)) u with a closed
/// form solution; natively 1-periodic.
struct ScalarField;
impl PeriodicField for ScalarField {
    fn dim(&self) -> usize {
        1
    }
    fn eval(&self, theta: f64, _t: f64, u: &[C64], out: &mut [C64]) {
        out[0] = (1.0 + (2.0 * PI * theta).cos()) * u[0];
    }
    fn dir_deriv(&self, theta: f64, _t: f64, _u: &[C64], p: &[C64], out: &mut [C64]) {
        out[0] = (1.0 + (2.0 * PI * theta).cos()) * p[0];
    }
    fn second_dir_deriv(&self, _th: f64, _t: f64, _u: &[C64], _p: &[C64], _q: &[C64], out: &mut [C64]) {
        out[0] = C64::new(0.0, 0.0);
    }
    fn third_dir_deriv(
        &self,
        _th: f64,
        _t: f64,
        _u: &[C64],
        _p: &[C64],
        _q: &[C64],
        _r: &[C64],
        out: &mut [C64],
    ) {
        out[0] = C64::new(0.0, 0.0);
    }
}

impl Instance {
    pub fn new(cfg: &ExperimentConfig, eps_problem: f64, initial: InitialData) -> Result<Self> {
        let n_theta = cfg.n_theta_resolved();
        let grid = ThetaGrid::new(n_theta).map_err(|e| anyhow!("{e}"))?;
        let controls = StepControls {
            tol: cfg.tol_step,
            max_iter: 50,
        };
        let fp = FixedPointParams {
            tol: cfg.tol_fp,
            max_iter: 100,
        };

        let (field, eps, u0, kg, hh): (
            Arc<dyn PeriodicField>,
            EpsilonParams,
            State,
            Option<Arc<KleinGordon>>,
            Option<Arc<HenonHeiles>>,
        ) = match cfg.problem {
            Problem::Scalar => {
                let eps = EpsilonParams::new(eps_problem)
                    .map_err(|e| anyhow!("{e}"))?
                    .with_damping(cfg.damping);
                (
                    Arc::new(ScalarField),
                    eps,
                    vec![state::real(1.0)],
                    None,
                    None,
                )
            }
            Problem::HenonHeiles => {
                let eps = EpsilonParams::from_period_two_pi(eps_problem)
                    .map_err(|e| anyhow!("{e}"))?
                    .with_damping(cfg.damping);
                let field: Arc<HenonHeiles> = Arc::new(HenonHeiles::new(&grid));
                let hh_handle = field.clone();
                let u0 = match initial {
                    InitialData::Convergence => vec![
                        state::real(0.12),
                        state::real(0.12),
                        state::real(0.12),
                        state::real(0.12),
                    ],
                    InitialData::Section { h_target, angle } => {
                        henon_heiles::section_initial_data(eps_problem, h_target, angle)
                    }
                    InitialData::Invariants => henon_heiles::section_initial_data(
                        eps_problem,
                        1.0 / 12.0,
                        0.25,
                    ),
                };
                (field, eps, u0, None, Some(hh_handle))
            }
            Problem::KleinGordon => {
                let eps = EpsilonParams::from_period_two_pi(eps_problem)
                    .map_err(|e| anyhow!("{e}"))?
                    .with_damping(cfg.damping);
                let kg = Arc::new(KleinGordon::new(cfg.n_x, eps_problem, &grid).map_err(|e| anyhow!("{e}"))?);
                let u0 = match initial {
                    InitialData::Invariants => klein_gordon::invariant_initial_state(&kg),
                    _ => klein_gordon::default_initial_state(&kg),
                };
                (kg.clone(), eps, u0, Some(kg), None)
            }
        };

        let sys = match cfg.method {
            Method::MicroMacro => {
                let mut cov = ChangeOfVariable::new(
                    cfg.scheme.map_order(),
                    AveragingFlavor::Standard,
                    field,
                    eps,
                    grid,
                )
                .map_err(|e| anyhow!("{e}"))?;
                cov.fp = fp;
                UaSystem::MicroMacro(MicroMacroSystem::new(cov).map_err(|e| anyhow!("{e}"))?)
            }
            Method::Pullback => {
                let mut pm = PullbackMap::new(cfg.scheme.map_order(), field, eps, grid)
                    .map_err(|e| anyhow!("{e}"))?;
                pm.fp = fp;
                UaSystem::Pullback(PullbackSystem::new(pm))
            }
        };
        Ok(Self {
            problem: cfg.problem,
            method: cfg.method,
            eps_problem,
            sys,
            u0,
            kg,
            hh,
            controls,
        })
    }

    pub fn init_state(&self) -> Result<State> {
        match &self.sys {
            UaSystem::MicroMacro(s) => s.init(&self.u0).map_err(|e| anyhow!("{e}")),
            UaSystem::Pullback(s) => s.init(&self.u0).map_err(|e| anyhow!("{e}")),
        }
    }

    pub fn run(&self, scheme: Scheme, t_end: f64, n_steps: usize) -> Result<Trajectory> {
        let s0 = self.init_state()?;
        integrate(scheme, &self.sys, &s0, t_end, n_steps, self.controls).map_err(|e| anyhow!("{e}"))
    }

    /// Back to the original unknown u(t).
    pub fn reconstruct(&self, t: f64, s: &[C64]) -> Result<State> {
        match &self.sys {
            UaSystem::MicroMacro(sys) => sys.reconstruct(t, s).map_err(|e| anyhow!("{e}")),
            UaSystem::Pullback(sys) => sys.reconstruct(t, s).map_err(|e| anyhow!("{e}")),
        }
    }
}

// ---------------------------------------------------------------------------
// References and error metrics.
// ---------------------------------------------------------------------------

/// A reference solution at final time for one (problem, eps).
pub enum Reference {
    /// exact closed form (scalar model)
    Exact(State),
    /// filtered state from the adaptive reference integrator (Henon-Heiles)
    Adaptive(State),
    /// filtered spectral state from the high-resolution third-order UA run
    /// (Klein-Gordon), together with its own operators
    KgRecipe { kg: Arc<KleinGordon>, v: State },
}

pub fn compute_reference(cfg: &ExperimentConfig, eps_problem: f64, t_end: f64) -> Result<Reference> {
    match cfg.problem {
        Problem::Scalar => {
            let exact =
                (t_end + eps_problem * (2.0 * PI * t_end / eps_problem).sin() / (2.0 * PI)).exp();
            Ok(Reference::Exact(vec![state::real(exact)]))
        }
        Problem::HenonHeiles => {
            let grid = ThetaGrid::new(cfg.n_theta_resolved()).map_err(|e| anyhow!("{e}"))?;
            let field = Arc::new(HenonHeiles::new(&grid));
            let eps_lib = 2.0 * PI * eps_problem;
            let w0 = vec![
                state::real(0.12),
                state::real(0.12),
                state::real(0.12),
                state::real(0.12),
            ];
            let rhs = move |t: f64, u: &[C64], out: &mut [C64]| {
                field.eval(t / eps_lib, t, u, out);
            };
            let traj =
                reference_solve(&rhs, &w0, t_end, 1e-11, 1e-13).map_err(|e| anyhow!("{e}"))?;
            Ok(Reference::Adaptive(traj.final_state().clone()))
        }
        Problem::KleinGordon => {
            // third-order UA micro-macro at 256 x-points, 128 theta-points,
            // dt = T/4096
            let grid = ThetaGrid::new(128).map_err(|e| anyhow!("{e}"))?;
            let kg = Arc::new(KleinGordon::new(256, eps_problem, &grid).map_err(|e| anyhow!("{e}"))?);
            let eps = EpsilonParams::from_period_two_pi(eps_problem).map_err(|e| anyhow!("{e}"))?;
            let cov = ChangeOfVariable::new(2, AveragingFlavor::Standard, kg.clone(), eps, grid)
                .map_err(|e| anyhow!("{e}"))?;
            let sys = MicroMacroSystem::new(cov).map_err(|e| anyhow!("{e}"))?;
            let v0 = klein_gordon::default_initial_state(&kg);
            let s0 = sys.init(&v0).map_err(|e| anyhow!("{e}"))?;
            let traj = integrate(
                Scheme::Extrap3,
                &sys,
                &s0,
                t_end,
                4096,
                StepControls::default(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let v = sys
                .reconstruct(t_end, traj.final_state())
                .map_err(|e| anyhow!("{e}"))?;
            Ok(Reference::KgRecipe { kg, v })
        }
    }
}

/// Error of a reconstructed final state against the reference: sup-norm for
/// the finite-dimensional problems, H1 relative for Klein-Gordon.
pub fn error_vs_reference(inst: &Instance, reference: &Reference, t_end: f64, u_num: &State) -> f64 {
    match reference {
        Reference::Exact(u_ref) | Reference::Adaptive(u_ref) => u_ref
            .iter()
            .zip(u_num)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max),
        Reference::KgRecipe { kg: kg_ref, v } => {
            let kg_num = inst.kg.as_ref().expect("kg instance");
            kg_h1_cross_error(kg_ref, v, kg_num, u_num, t_end)
        }
    }
}

/// H1 relative error between states living on different spatial resolutions,
/// compared mode-by-mode over the coarse set (the reference tail decays far
/// below the discretization error).
pub fn kg_h1_cross_error(
    kg_ref: &KleinGordon,
    v_ref: &[C64],
    kg_num: &KleinGordon,
    v_num: &[C64],
    t: f64,
) -> f64 {
    let (u_ref, _) = kg_ref.reconstruct_u(v_ref, t);
    let (u_num, _) = kg_num.reconstruct_u(v_num, t);
    let n_ref = kg_ref.n_x;
    let n_num = kg_num.n_x;
    let mut err = 0.0;
    let mut nrm = 0.0;
    for i in 0..n_ref {
        let k = klein_gordon::wavenumber(i, n_ref);
        let w = 1.0 + (k * k) as f64;
        nrm += w * u_ref[i].norm_sqr();
        let num_val = if k >= -(n_num as i64) / 2 && k < (n_num as i64) / 2 {
            let idx = k.rem_euclid(n_num as i64) as usize;
            u_num[idx]
        } else {
            C64::new(0.0, 0.0)
        };
        err += w * (u_ref[i] - num_val).norm_sqr();
    }
    (err / nrm).sqrt()
}

// ---------------------------------------------------------------------------
// Parallel cells.
// ---------------------------------------------------------------------------

/// Run `f` over the items with up to `workers` threads; results keep the
/// input order regardless of completion order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let workers = workers.min(n).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::<(usize, R)>::new());
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..workers {
            let results = &results;
            let next = &next;
            let f = &f;
            handles.push(scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap().push((i, r));
            }));
        }
        for h in handles {
            h.join().expect("worker panicked");
        }
    });
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    for (i, r) in results.into_inner().unwrap() {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

// ---------------------------------------------------------------------------
// Convergence sweeps.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub eps: f64,
    pub dt: f64,
    pub error: f64,
    pub wall_time: f64,
    pub scheme: Scheme,
    pub method: Method,
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// fitted log-log slope per eps
    pub slopes: Vec<(f64, f64)>,
    /// per dt: (dt, min over eps, max over eps) of the error
    pub max_curve: Vec<(f64, f64, f64)>,
    pub any_failed: bool,
}

/// Least-squares slope of ln(err) vs ln(dt), restricted to errors inside
/// [floor, ceiling] so round-off plateaus and pre-asymptotic blowups do not
/// pollute the fit.
pub fn fit_loglog_slope(points: &[(f64, f64)], floor: f64, ceiling: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| e.is_finite() && *e > floor && *e < ceiling)
        .map(|(d, e)| (d.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-30 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

pub fn run_convergence(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    let t_end = cfg.t_end;

    // references once per eps (cells share them)
    let refs: Vec<Result<Reference>> = parallel_map(&cfg.eps_list, cfg.workers, |eps| {
        compute_reference(cfg, *eps, t_end)
    });
    let mut references = Vec::new();
    for (eps, r) in cfg.eps_list.iter().zip(refs) {
        references.push((
            *eps,
            r.map_err(|e| anyhow!("reference for eps {eps}: {e}"))?,
        ));
    }

    let cells: Vec<(usize, f64)> = cfg
        .eps_list
        .iter()
        .enumerate()
        .flat_map(|(i, _)| cfg.dt_list.iter().map(move |dt| (i, *dt)))
        .collect();

    let rows: Vec<SweepRow> = parallel_map(&cells, cfg.workers, |(eps_idx, dt)| {
        let eps = cfg.eps_list[*eps_idx];
        let reference = &references[*eps_idx].1;
        let started = Instant::now();
        let outcome = (|| -> Result<f64> {
            let inst = Instance::new(cfg, eps, InitialData::Convergence)?;
            let n_steps = (t_end / dt).round().max(1.0) as usize;
            let traj = inst.run(cfg.scheme, t_end, n_steps)?;
            let u_num = inst.reconstruct(t_end, traj.final_state())?;
            Ok(error_vs_reference(&inst, reference, t_end, &u_num))
        })();
        let wall = started.elapsed().as_secs_f64();
        match outcome {
            Ok(error) => SweepRow {
                eps,
                dt: *dt,
                error,
                wall_time: wall,
                scheme: cfg.scheme,
                method: cfg.method,
                status: "ok".into(),
            },
            Err(e) => SweepRow {
                eps,
                dt: *dt,
                error: f64::NAN,
                wall_time: wall,
                scheme: cfg.scheme,
                method: cfg.method,
                status: format!("error: {e}").replace(',', ";"),
            },
        }
    });

    let mut rows = rows;
    rows.sort_by(|a, b| {
        (a.eps, a.dt)
            .partial_cmp(&(b.eps, b.dt))
            .expect("finite keys")
    });

    let mut slopes = Vec::new();
    for &eps in &cfg.eps_list {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.eps == eps && r.status == "ok")
            .map(|r| (r.dt, r.error))
            .collect();
        if let Some(s) = fit_loglog_slope(&pts, 1e-10, 1e-1) {
            slopes.push((eps, s));
        }
    }
    slopes.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));

    let mut max_curve = Vec::new();
    for &dt in &cfg.dt_list {
        let errs: Vec<f64> = rows
            .iter()
            .filter(|r| r.dt == dt && r.status == "ok" && r.error.is_finite())
            .map(|r| r.error)
            .collect();
        if !errs.is_empty() {
            let lo = errs.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = errs.iter().cloned().fold(0.0f64, f64::max);
            max_curve.push((dt, lo, hi));
        }
    }
    max_curve.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));

    let any_failed = rows.iter().any(|r| r.status != "ok");
    Ok(SweepResult {
        rows,
        slopes,
        max_curve,
        any_failed,
    })
}

pub fn write_convergence(out: &Path, result: &SweepResult) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt(r.eps),
                fmt(r.dt),
                fmt(r.error),
                fmt(r.wall_time),
                r.scheme.name().into(),
                r.method.name().into(),
                r.status.clone(),
            ]
        })
        .collect();
    write_csv(
        out,
        &["epsilon", "dt", "error", "wall_time", "scheme", "method", "status"],
        &rows,
    )?;
    let slope_rows: Vec<Vec<String>> = result
        .slopes
        .iter()
        .map(|(e, s)| vec![fmt(*e), fmt(*s)])
        .collect();
    write_csv(&sibling(out, "slopes"), &["epsilon", "slope"], &slope_rows)?;
    let curve_rows: Vec<Vec<String>> = result
        .max_curve
        .iter()
        .map(|(dt, lo, hi)| vec![fmt(*dt), fmt(*lo), fmt(*hi)])
        .collect();
    write_csv(
        &sibling(out, "maxcurve"),
        &["dt", "min_error", "max_error"],
        &curve_rows,
    )?;
    write_convergence_plot(out, result)?;
    Ok(())
}

fn write_convergence_plot(out: &Path, result: &SweepResult) -> Result<()> {
    let mut script = String::new();
    script.push_str("set logscale xy\nset xlabel 'dt'\nset ylabel 'error'\nset key outside\n");
    let mut eps_values: Vec<f64> = result.rows.iter().map(|r| r.eps).collect();
    eps_values.dedup();
    for (block, eps) in eps_values.iter().enumerate() {
        script.push_str(&format!("$d{block} << EOD\n"));
        for r in result.rows.iter().filter(|r| r.eps == *eps && r.status == "ok") {
            script.push_str(&format!("{} {}\n", fmt(r.dt), fmt(r.error)));
        }
        script.push_str("EOD\n");
    }
    script.push_str("plot ");
    let parts: Vec<String> = eps_values
        .iter()
        .enumerate()
        .map(|(block, eps)| format!("$d{block} using 1:2 with linespoints title 'eps={eps}'"))
        .collect();
    script.push_str(&parts.join(", \\\n     "));
    script.push('\n');
    std::fs::write(plot_path(out), script)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Long-time invariants.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct InvariantSeries {
    pub name: &'static str,
    /// (t, value, relative error)
    pub samples: Vec<(f64, f64, f64)>,
    pub max_rel_error: f64,
    /// least-squares drift of the relative error per unit time
    pub trend: f64,
    /// standard error of the trend estimate
    pub trend_se: f64,
}

pub struct InvariantResult {
    pub series: Vec<InvariantSeries>,
}

fn ols_trend(samples: &[(f64, f64)]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.len() < 3 {
        return (0.0, f64::INFINITY);
    }
    let sx: f64 = samples.iter().map(|p| p.0).sum();
    let sy: f64 = samples.iter().map(|p| p.1).sum();
    let sxx: f64 = samples.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = samples.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return (0.0, f64::INFINITY);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let ss_res: f64 = samples
        .iter()
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    let sigma2 = ss_res / (n - 2.0);
    let se = (sigma2 * n / denom).sqrt();
    (slope, se)
}

pub fn run_invariants(cfg: &ExperimentConfig) -> Result<InvariantResult> {
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    if cfg.method != Method::Pullback {
        bail!("invariant monitoring runs on the pullback method (geometric)");
    }
    let eps = cfg.eps_list[0];
    let dt = cfg.dt_list[0];
    let initial = match cfg.problem {
        Problem::HenonHeiles => InitialData::Section {
            h_target: cfg.h_target.unwrap_or(1.0 / 12.0),
            angle: cfg.angles.first().copied().unwrap_or(0.25),
        },
        _ => InitialData::Invariants,
    };
    let inst = Instance::new(cfg, eps, initial)?;
    let n_steps = (cfg.t_end / dt).round().max(1.0) as usize;
    let traj = inst.run(cfg.scheme, cfg.t_end, n_steps)?;
    let stride = (n_steps / 2000).max(1);

    let mut series = Vec::new();
    match cfg.problem {
        Problem::HenonHeiles => {
            let mut samples = Vec::new();
            let mut h0 = 0.0;
            for (k, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
                if k % stride != 0 && k != n_steps {
                    continue;
                }
                let w = inst.reconstruct(*t, s)?;
                let q = henon_heiles::unfilter(t / eps, &w);
                let h = henon_heiles::hamiltonian(&q, eps);
                if k == 0 {
                    h0 = h;
                }
                let rel = (h - h0).abs() / h0.abs().max(1e-300);
                samples.push((*t, h, rel));
            }
            series.push(summarize("H", samples));
        }
        Problem::KleinGordon => {
            let kg = inst.kg.as_ref().expect("kg instance");
            let mut q_samples = Vec::new();
            let mut e_samples = Vec::new();
            let (mut q0, mut e0) = (0.0, 0.0);
            for (k, (t, s)) in traj.times.iter().zip(&traj.states).enumerate() {
                if k % stride != 0 && k != n_steps {
                    continue;
                }
                let v = inst.reconstruct(*t, s)?;
                let q = kg.charge(&v);
                let e = kg.energy(&v, *t);
                if k == 0 {
                    q0 = q;
                    e0 = e;
                }
                q_samples.push((*t, q, (q - q0).abs() / q0.abs().max(1e-300)));
                e_samples.push((*t, e, (e - e0).abs() / e0.abs().max(1e-300)));
            }
            series.push(summarize("Q", q_samples));
            series.push(summarize("E", e_samples));
        }
        Problem::Scalar => bail!("no invariants defined for the scalar model"),
    }
    Ok(InvariantResult { series })
}

fn summarize(name: &'static str, samples: Vec<(f64, f64, f64)>) -> InvariantSeries {
    let max_rel_error = samples.iter().map(|s| s.2).fold(0.0, f64::max);
    let (trend, trend_se) = ols_trend(
        &samples
            .iter()
            .map(|(t, _, rel)| (*t, *rel))
            .collect::<Vec<_>>(),
    );
    InvariantSeries {
        name,
        samples,
        max_rel_error,
        trend,
        trend_se,
    }
}

pub fn write_invariants(out: &Path, result: &InvariantResult) -> Result<()> {
    let mut rows = Vec::new();
    for s in &result.series {
        for (t, v, rel) in &s.samples {
            rows.push(vec![fmt(*t), s.name.to_string(), fmt(*v), fmt(*rel)]);
        }
    }
    write_csv(out, &["t", "invariant", "value", "rel_error"], &rows)?;
    let summary: Vec<Vec<String>> = result
        .series
        .iter()
        .map(|s| {
            vec![
                s.name.to_string(),
                fmt(s.max_rel_error),
                fmt(s.trend),
                fmt(s.trend_se),
            ]
        })
        .collect();
    write_csv(
        &sibling(out, "summary"),
        &["invariant", "max_rel_error", "trend", "trend_se"],
        &summary,
    )?;

    let mut script = String::from("set xlabel 't'\nset ylabel 'relative error'\nset logscale y\n");
    for s in &result.series {
        script.push_str(&format!("${} << EOD\n", s.name));
        for (t, _, rel) in &s.samples {
            script.push_str(&format!("{} {}\n", fmt(*t), fmt(rel.max(1e-20))));
        }
        script.push_str("EOD\n");
    }
    let parts: Vec<String> = result
        .series
        .iter()
        .map(|s| format!("${} using 1:2 with lines title '{}'", s.name, s.name))
        .collect();
    script.push_str(&format!("plot {}\n", parts.join(", ")));
    std::fs::write(plot_path(out), script)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Poincare sections.
// ---------------------------------------------------------------------------

pub struct PoincareResult {
    /// (q2, p2, orbit id)
    pub cuts: Vec<(f64, f64, usize)>,
    pub h_target: f64,
    /// per orbit: worst |H - H_target| over the emitted cut points
    pub max_h_error_cuts: f64,
    /// worst Hamiltonian error along the trajectories themselves
    pub max_h_error_traj: f64,
}

pub fn run_poincare(cfg: &ExperimentConfig) -> Result<PoincareResult> {
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    if cfg.problem != Problem::HenonHeiles {
        bail!("poincare sections are defined for the Henon-Heiles problem");
    }
    let eps = cfg.eps_list[0];
    let dt = cfg.dt_list[0];
    let h_target = cfg.h_target.unwrap_or(1.0 / 12.0);
    let angles: Vec<f64> = if cfg.angles.is_empty() {
        vec![0.025, 0.25, 0.75, 0.95, 1.25]
    } else {
        cfg.angles.clone()
    };

    let n_steps = (cfg.t_end / dt).round().max(1.0) as usize;
    let orbit_ids: Vec<usize> = (0..angles.len()).collect();
    let outcomes: Vec<Result<(Vec<(f64, f64, usize)>, f64, f64)>> =
        parallel_map(&orbit_ids, cfg.workers, |&orbit| {
            let angle = angles[orbit];
            let inst = Instance::new(cfg, eps, InitialData::Section { h_target, angle })?;
            let traj = inst.run(cfg.scheme, cfg.t_end, n_steps)?;
            let mut times = Vec::with_capacity(traj.times.len());
            let mut unfiltered = Vec::with_capacity(traj.times.len());
            let mut max_h_traj = 0.0f64;
            for (t, s) in traj.times.iter().zip(&traj.states) {
                let w = inst.reconstruct(*t, s)?;
                let q = henon_heiles::unfilter(t / eps, &w);
                max_h_traj = max_h_traj.max((henon_heiles::hamiltonian(&q, eps) - h_target).abs());
                times.push(*t);
                unfiltered.push(q);
            }
            let crossings = henon_heiles::poincare_crossings(&times, &unfiltered, eps, true);
            let mut max_h_cuts = 0.0f64;
            let rows: Vec<(f64, f64, usize)> = crossings
                .iter()
                .map(|c| {
                    let h = henon_heiles::hamiltonian(&c.q, eps);
                    max_h_cuts = max_h_cuts.max((h - h_target).abs());
                    (c.q[1], c.q[3], orbit)
                })
                .collect();
            Ok((rows, max_h_cuts, max_h_traj))
        });

    let mut cuts = Vec::new();
    let mut max_h_error_cuts = 0.0f64;
    let mut max_h_error_traj = 0.0f64;
    for o in outcomes {
        let (rows, hc, ht) = o?;
        cuts.extend(rows);
        max_h_error_cuts = max_h_error_cuts.max(hc);
        max_h_error_traj = max_h_error_traj.max(ht);
    }
    Ok(PoincareResult {
        cuts,
        h_target,
        max_h_error_cuts,
        max_h_error_traj,
    })
}

pub fn write_poincare(out: &Path, result: &PoincareResult) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .cuts
        .iter()
        .map(|(q2, p2, orbit)| vec![fmt(*q2), fmt(*p2), orbit.to_string()])
        .collect();
    write_csv(out, &["q2", "p2", "orbit_id"], &rows)?;
    let mut script = String::from("set xlabel 'q2'\nset ylabel 'p2'\nset size ratio -1\n");
    let orbits: std::collections::BTreeSet<usize> = result.cuts.iter().map(|c| c.2).collect();
    for orbit in &orbits {
        script.push_str(&format!("$o{orbit} << EOD\n"));
        for (q2, p2, _) in result.cuts.iter().filter(|c| c.2 == *orbit) {
            script.push_str(&format!("{} {}\n", fmt(*q2), fmt(*p2)));
        }
        script.push_str("EOD\n");
    }
    let parts: Vec<String> = orbits
        .iter()
        .map(|o| format!("$o{o} using 1:2 with dots title 'orbit {o}'"))
        .collect();
    script.push_str(&format!("plot {}\n", parts.join(", ")));
    std::fs::write(plot_path(out), script)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Defect decay ladder.
// ---------------------------------------------------------------------------

pub struct DefectResult {
    /// (order, eps, defect max norm)
    pub rows: Vec<(usize, f64, f64)>,
    /// (order, eps, log2 ratio to the next halved eps)
    pub ratios: Vec<(usize, f64, f64)>,
}

pub fn run_defect(cfg: &ExperimentConfig) -> Result<DefectResult> {
    cfg.validate().map_err(|e| anyhow!("{e}"))?;
    if cfg.problem != Problem::HenonHeiles {
        bail!("the defect ladder runs on the Henon-Heiles problem");
    }
    let grid = ThetaGrid::new(cfg.n_theta_resolved()).map_err(|e| anyhow!("{e}"))?;
    let field = Arc::new(HenonHeiles::new(&grid));
    let mut seed = cfg.seed;
    let mut probes = vec![vec![
        state::real(0.12),
        state::real(0.12),
        state::real(0.12),
        state::real(0.12),
    ]];
    for _ in 0..3 {
        probes.push((0..4).map(|_| state::real(0.4 * splitmix(&mut seed))).collect());
    }

    let mut rows = Vec::new();
    for order in 1..=3usize {
        for &eps in &cfg.eps_list {
            let ep = EpsilonParams::from_period_two_pi(eps)
                .map_err(|e| anyhow!("{e}"))?
                .with_damping(cfg.damping);
            let cov = ChangeOfVariable::new(
                order,
                AveragingFlavor::Standard,
                field.clone(),
                ep,
                grid.clone(),
            )
            .map_err(|e| anyhow!("{e}"))?;
            let report = cov.defect(0.0, &probes).map_err(|e| anyhow!("{e}"))?;
            rows.push((order, eps, report.theta_max_norm));
        }
    }

    let mut ratios = Vec::new();
    for order in 1..=3usize {
        let mut per: Vec<(f64, f64)> = rows
            .iter()
            .filter(|(o, _, _)| *o == order)
            .map(|(_, e, d)| (*e, *d))
            .collect();
        per.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
        for w in per.windows(2) {
            let (e1, d1) = w[0];
            let (e2, d2) = w[1];
            if (e1 / e2 - 2.0).abs() < 1e-9 {
                ratios.push((order, e1, (d1 / d2).log2()));
            }
        }
    }
    Ok(DefectResult { rows, ratios })
}

pub fn write_defect(out: &Path, result: &DefectResult) -> Result<()> {
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|(n, e, d)| vec![n.to_string(), fmt(*e), fmt(*d)])
        .collect();
    write_csv(out, &["order", "epsilon", "defect_norm"], &rows)?;
    let ratio_rows: Vec<Vec<String>> = result
        .ratios
        .iter()
        .map(|(n, e, r)| vec![n.to_string(), fmt(*e), fmt(*r)])
        .collect();
    write_csv(
        &sibling(out, "ratios"),
        &["order", "epsilon", "log2_ratio"],
        &ratio_rows,
    )?;
    Ok(())
}
