//! Run orchestration: suite routing, kappa policy, localization ladders,
//! residual and Monte-Carlo checks, persistence.

use std::path::PathBuf;

use crate::error::{Result, SolverError};
use crate::feynman_kac::{crosscheck_solution, CrossCheckReport, McSettings};
use crate::grid::GridField;
use crate::hamiltonian::{
    eval_isaacs, validate_assumptions, Hamiltonian, ValidationLattice, ValidationReport,
};
use crate::kernel::KernelParams;
use crate::localization::{
    localize_problem, CutoffFamily, StabilityReport, StabilitySettings,
};
use crate::picard::{estimate_contraction, iterate, pde_residual, IterationTrace};
use crate::problem::{Problem, Suite};
use crate::rng::CounterRng;

/// Residual threshold above which a converged run is flagged with a warning.
pub const RESIDUAL_WARN: f64 = 5e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaPolicy {
    Fixed(f64),
    /// start at 8, double until the empirical contraction factor < 0.5
    /// (capped at 1024)
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kappa: KappaPolicy,
    pub tol: f64,
    pub max_iter: usize,
    pub quad_nodes: usize,
    pub tail_sigmas: f64,
    pub ladder: Vec<f64>,
    pub mc: McSettings,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kappa: KappaPolicy::Adaptive,
            tol: 1e-4,
            max_iter: 60,
            quad_nodes: 33,
            tail_sigmas: 6.0,
            ladder: vec![2.0, 4.0, 8.0],
            mc: McSettings::default(),
            seed: 42,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn kernel_params(&self, problem: &Problem) -> KernelParams {
        KernelParams {
            frozen_point: None,
            domain_box: problem.grid.box_radius(),
            quad_nodes_per_dim: self.quad_nodes,
            tail_cut_sigmas: self.tail_sigmas,
        }
    }
}

/// Saddle control indices per node for Isaacs solutions (node-major,
/// level * spatial_count + s).
#[derive(Debug, Clone)]
pub struct SaddleField {
    pub delta_idx: Vec<usize>,
    pub eta_idx: Vec<usize>,
}

#[derive(Clone)]
pub struct RunResult {
    pub problem_name: String,
    pub suite: Suite,
    pub solution: GridField,
    pub trace: IterationTrace,
    pub validation: ValidationReport,
    pub crosscheck: CrossCheckReport,
    pub stability: Option<StabilityReport>,
    pub residual: f64,
    pub kappa: f64,
    pub saddle: Option<SaddleField>,
    /// the problem the solution field actually solves (localized for B/C/D)
    pub solved_problem: Problem,
    pub crosscheck_points: Vec<(Vec<f64>, f64)>,
    /// final cutoff family for localized runs
    pub final_cutoffs: Option<CutoffFamily>,
    pub tol: f64,
    pub seed: u64,
    pub mc: McSettings,
}

impl RunResult {
    pub fn converged(&self) -> bool {
        if !self.trace.converged {
            return false;
        }
        match (&self.stability, self.suite) {
            (Some(st), Suite::D) => {
                !st.inconclusive && st.monotone && st.final_gap <= 5.0 * self.tol
            }
            (Some(st), _) => !st.rung_converged.is_empty() && *st.rung_converged.last().unwrap(),
            (None, _) => true,
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.residual > RESIDUAL_WARN {
            out.push(format!(
                "pde residual {} above {RESIDUAL_WARN}",
                self.residual
            ));
        }
        if !self.crosscheck.passed {
            out.push("feynman-kac crosscheck failed".into());
        }
        if self.crosscheck.n_skipped > 0 {
            out.push(format!(
                "{} crosscheck points skipped",
                self.crosscheck.n_skipped
            ));
        }
        if let Some(st) = &self.stability {
            if st.inconclusive {
                out.push("stability ladder had non-converged rungs".into());
            }
            if !st.monotone {
                out.push("stability differences not monotone".into());
            }
            if self.suite != Suite::D && st.final_gap > 5.0 * self.tol {
                out.push(format!("stability final gap {}", st.final_gap));
            }
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.converged() && self.validation.passed() && self.warnings().is_empty()
    }
}

/// Resolve the kappa policy against a concrete (already localized) problem.
pub fn resolve_kappa(
    problem: &Problem,
    policy: &KappaPolicy,
    params: &KernelParams,
    seed: u64,
) -> Result<f64> {
    match policy {
        KappaPolicy::Fixed(v) => {
            if !(*v > 0.0) {
                return Err(SolverError::InvalidParameter(
                    "kappa must be positive".into(),
                ));
            }
            Ok(*v)
        }
        KappaPolicy::Adaptive => {
            let mut kappa = 8.0;
            loop {
                let est = estimate_contraction(problem, kappa, 3, params, seed)?;
                if est < 0.5 || kappa >= 1024.0 {
                    return Ok(kappa.min(1024.0));
                }
                kappa *= 2.0;
            }
        }
    }
}

/// Deterministic interior probe points for the Monte-Carlo crosscheck.
pub fn default_crosscheck_points(problem: &Problem, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let rng = CounterRng::new(seed ^ 0xc05c_c05c_c05c_c05c);
    let r = problem.grid.box_radius() / 4.0;
    let horizon = problem.horizon;
    (0..5u64)
        .map(|i| {
            let x: Vec<f64> = (0..problem.dim)
                .map(|d| rng.range(-r, r, i, d as u64, 0))
                .collect();
            let t = rng.range(0.2 * horizon, 0.8 * horizon, i, 99, 0);
            (x, t)
        })
        .collect()
}

fn saddle_field(problem: &Problem, field: &GridField) -> Option<SaddleField> {
    let Hamiltonian::Isaacs(spec) = &problem.hamiltonian else {
        return None;
    };
    let grid = field.grid();
    let ns = grid.spatial_count();
    let mut delta_idx = vec![0usize; grid.node_count()];
    let mut eta_idx = vec![0usize; grid.node_count()];
    let mut xbuf = vec![0.0; grid.dim()];
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let node = level * ns + s;
            let saddle = eval_isaacs(spec, field.grad_at(level, s), field.u[node], &xbuf, t)
                .expect("saddle re-evaluation on converged field");
            delta_idx[node] = saddle.delta_star;
            eta_idx[node] = saddle.eta_star;
        }
    }
    Some(SaddleField {
        delta_idx,
        eta_idx,
    })
}

/// Pilot solve at generous cutoffs to size the value/gradient plateaus
/// (m* = 1.5 sup|u|, p* = 1.5 sup|D_x u|).
fn pilot_bounds(
    problem: &Problem,
    config: &RunConfig,
    params: &KernelParams,
) -> Result<(f64, f64, f64)> {
    let generous = 8.0 * problem.terminal_sup().max(1.0);
    let fam = CutoffFamily::new(problem.grid.box_radius() / 2.0, generous, generous)?;
    let loc = localize_problem(problem, &fam)?;
    let kappa = resolve_kappa(&loc.problem, &config.kappa, params, config.seed)?;
    let (field, trace) = iterate(
        &loc.problem,
        kappa,
        (config.tol * 10.0).min(1e-2),
        config.max_iter,
        params,
    )?;
    if !trace.converged {
        return Err(SolverError::stage(
            "pilot",
            "pilot solve at generous cutoffs did not converge; raise max_iter or kappa",
        ));
    }
    let m_star = (1.5 * field.max_abs_u()).max(0.5);
    let p_star = (1.5 * field.max_grad_norm()).max(0.5);
    Ok((m_star, p_star, kappa))
}

struct LadderRun {
    solutions: Vec<GridField>,
    traces: Vec<IterationTrace>,
    localized: Vec<crate::localization::LocalizedProblem>,
    report: StabilityReport,
}

/// Walk the radius ladder, optionally stopping once consecutive solutions
/// agree within `stop_gap` on the measurement ball.
fn run_ladder(
    problem: &Problem,
    radii: &[f64],
    settings: &StabilitySettings,
    stop_gap: Option<f64>,
) -> Result<LadderRun> {
    if radii.len() < 2 {
        return Err(SolverError::InvalidParameter(
            "localization ladder needs at least 2 radii".into(),
        ));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolverError::InvalidParameter(
            "ladder radii must be strictly increasing".into(),
        ));
    }
    let ball_radius = radii[0] / 2.0;
    let mut solutions: Vec<GridField> = Vec::new();
    let mut traces = Vec::new();
    let mut localized = Vec::new();
    let mut rung_converged = Vec::new();
    let mut diffs = Vec::new();
    let mut used_radii = Vec::new();
    for &r in radii {
        let fam = CutoffFamily::new(
            r,
            settings.k_p_floor.map_or(r, |f| f.max(r)),
            settings.k_u.unwrap_or(r),
        )?;
        let loc = localize_problem(problem, &fam)?;
        let (field, trace) = iterate(
            &loc.problem,
            settings.kappa,
            settings.tol,
            settings.max_iter,
            &settings.kernel,
        )?;
        rung_converged.push(trace.converged);
        if let Some(prev) = solutions.last() {
            diffs.push(prev.sup_diff_on_ball(&field, ball_radius));
        }
        solutions.push(field);
        traces.push(trace);
        localized.push(loc);
        used_radii.push(r);
        if let (Some(gap), Some(&last_diff)) = (stop_gap, diffs.last()) {
            if used_radii.len() >= 2 && last_diff <= gap {
                break;
            }
        }
    }
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0]);
    let final_gap = diffs.last().copied().unwrap_or(f64::INFINITY);
    let inconclusive = rung_converged.iter().any(|c| !c);
    Ok(LadderRun {
        solutions,
        traces,
        localized,
        report: StabilityReport {
            radii: used_radii,
            diffs,
            rung_converged,
            monotone,
            final_gap,
            ball_radius,
            inconclusive,
        },
    })
}

/// Solve a problem end to end: validate, route by suite, iterate (with
/// localization ladder where required), then residual and Monte-Carlo
/// checks; persists results when an output directory is configured.
pub fn solve(problem: &Problem, config: &RunConfig) -> Result<RunResult> {
    let params = config.kernel_params(problem);
    params.validate()?;
    let lattice = ValidationLattice::default_for(&problem.grid, config.seed);
    let validation = validate_assumptions(problem, problem.suite, &lattice);
    if !validation.passed() {
        // a problem failing its declared suite is never iterated directly
        return Err(SolverError::stage(
            "validate",
            format!(
                "problem '{}' fails its declared suite {}: {}",
                problem.name,
                problem.suite.name(),
                validation.summary()
            ),
        ));
    }

    let (solution, trace, stability, solved_problem, kappa, final_cutoffs) = match problem.suite {
        Suite::A => {
            let kappa = resolve_kappa(problem, &config.kappa, &params, config.seed)?;
            let (field, trace) = iterate(problem, kappa, config.tol, config.max_iter, &params)?;
            (field, trace, None, problem.clone(), kappa, None)
        }
        Suite::B | Suite::C | Suite::D => {
            let (k_u, k_p_floor, pilot_kappa) = match (&problem.hamiltonian, problem.suite) {
                (Hamiltonian::Generic(_), Suite::B) => {
                    let (m, p, k) = pilot_bounds(problem, config, &params)?;
                    (Some(m), Some(p), Some(k))
                }
                // Isaacs problems localize coefficientwise in x only
                _ => (None, None, None),
            };
            let kappa = match pilot_kappa {
                Some(k) => k,
                None => {
                    let first = CutoffFamily::new(
                        config.ladder[0],
                        k_p_floor.map_or(config.ladder[0], |f| f.max(config.ladder[0])),
                        k_u.unwrap_or(config.ladder[0]),
                    )?;
                    let loc = localize_problem(problem, &first)?;
                    resolve_kappa(&loc.problem, &config.kappa, &params, config.seed)?
                }
            };
            let settings = StabilitySettings {
                kappa,
                tol: config.tol,
                max_iter: config.max_iter,
                kernel: params.clone(),
                k_u,
                k_p_floor,
            };
            let stop_gap = match problem.suite {
                Suite::D => Some(5.0 * config.tol),
                _ => None,
            };
            let ladder = run_ladder(problem, &config.ladder, &settings, stop_gap)?;
            let last = ladder.solutions.len() - 1;
            let trace = ladder.traces[last].clone();
            let field = ladder.solutions[last].clone();
            let loc = &ladder.localized[last];
            (
                field,
                trace,
                Some(ladder.report),
                loc.problem.clone(),
                kappa,
                Some(loc.cutoffs),
            )
        }
    };

    let residual = pde_residual(&solution, &solved_problem)?;
    let points = default_crosscheck_points(problem, config.seed);
    let crosscheck = crosscheck_solution(&solution, &solved_problem, &points, &config.mc)?;
    let saddle = saddle_field(&solved_problem, &solution);

    let result = RunResult {
        problem_name: problem.name.clone(),
        suite: problem.suite,
        solution,
        trace,
        validation,
        crosscheck,
        stability,
        residual,
        kappa,
        saddle,
        solved_problem,
        crosscheck_points: points,
        final_cutoffs,
        tol: config.tol,
        seed: config.seed,
        mc: config.mc.clone(),
    };
    if let Some(dir) = &config.out_dir {
        super::export::export(&result, dir)?;
    }
    Ok(result)
}
