//! Command-line interface for the semilinear parabolic solver.
//!
//! Exit codes: 0 = converged and all checks passed, 2 = converged with
//! warnings, 1 = failure (non-convergence, validation failure, or error).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semilinear::harness::{
    self, export_with_source, import_run, read_points, RunSource,
};
use semilinear::{
    crosscheck_solution, validate_assumptions, KappaPolicy, Problem, RunConfig, RunResult, Suite,
    ValidationLattice,
};

#[derive(Parser)]
#[command(
    name = "semilinear",
    about = "Solve terminal-value semilinear parabolic Cauchy problems and Isaacs equations \
             by fixed-point iteration on heat kernels, with Monte-Carlo cross-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct SolveFlags {
    /// Output directory for result tables and the manifest
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed weighting exponent for the iteration norm
    #[arg(long, conflicts_with = "kappa_adaptive")]
    kappa: Option<f64>,
    /// Calibrate kappa by doubling until the empirical contraction factor
    /// drops below 0.5 (default policy)
    #[arg(long)]
    kappa_adaptive: bool,
    /// Convergence tolerance on the weighted-norm iteration delta
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap
    #[arg(long)]
    max_iter: Option<usize>,
    /// Base seed for deterministic sampling
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo paths for the cross-check
    #[arg(long)]
    mc_paths: Option<usize>,
    /// Monte-Carlo time step
    #[arg(long)]
    mc_dt: Option<f64>,
    /// Localization ladder radii, e.g. 2,4,8
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem described by a config file
    Solve {
        config: PathBuf,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Check a config file against an assumption suite
    Validate {
        config: PathBuf,
        #[arg(long)]
        suite: String,
    },
    /// Solve a built-in benchmark problem
    Builtin {
        name: String,
        #[command(flatten)]
        flags: SolveFlags,
    },
    /// Re-run the Monte-Carlo cross-check on a stored run directory
    Crosscheck {
        result_dir: PathBuf,
        #[arg(long)]
        points: PathBuf,
    },
}

fn apply_flags(config: &mut RunConfig, flags: &SolveFlags) {
    if let Some(k) = flags.kappa {
        config.kappa = KappaPolicy::Fixed(k);
    }
    if flags.kappa_adaptive {
        config.kappa = KappaPolicy::Adaptive;
    }
    if let Some(v) = flags.tol {
        config.tol = v;
    }
    if let Some(v) = flags.max_iter {
        config.max_iter = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
        config.mc.seed = v;
    }
    if let Some(v) = flags.mc_paths {
        config.mc.n_paths = v;
    }
    if let Some(v) = flags.mc_dt {
        config.mc.dt = v;
    }
    if let Some(v) = &flags.ladder {
        config.ladder = v.clone();
    }
}

fn report(result: &RunResult) -> ExitCode {
    println!(
        "problem {} (suite {}): converged={} iterations={} kappa={} residual={:.4e}",
        result.problem_name,
        result.suite.name(),
        result.converged(),
        result.trace.iterations,
        result.kappa,
        result.residual
    );
    if let Some(st) = &result.stability {
        println!(
            "ladder radii {:?}: diffs {:?} (ball radius {}), monotone={} final_gap={:.3e}",
            st.radii, st.diffs, st.ball_radius, st.monotone, st.final_gap
        );
    }
    for p in &result.crosscheck.points {
        if p.skipped {
            println!("crosscheck ({:?}, t={}): skipped ({})", p.x, p.t, p.note);
        } else {
            println!(
                "crosscheck ({:?}, t={:.4}): u={:.6} mc={:.6} stderr={:.2e} |diff|={:.2e} {}",
                p.x,
                p.t,
                p.u_pde,
                p.mc_mean,
                p.mc_stderr,
                p.abs_diff,
                if p.passed { "ok" } else { "MISMATCH" }
            );
        }
    }
    let warnings = result.warnings();
    for w in &warnings {
        println!("warning: {w}");
    }
    if !result.converged() || !result.validation.passed() {
        println!("status: FAILED");
        ExitCode::from(1)
    } else if warnings.is_empty() {
        println!("status: converged, all checks passed");
        ExitCode::SUCCESS
    } else {
        println!("status: converged with warnings");
        ExitCode::from(2)
    }
}

fn run_solve(problem: &Problem, mut config: RunConfig, flags: &SolveFlags, source: RunSource, config_path: Option<&PathBuf>) -> ExitCode {
    apply_flags(&mut config, flags);
    let out_dir = flags.out.clone();
    config.out_dir = None; // export explicitly with source info below
    match semilinear::solve(problem, &config) {
        Ok(result) => {
            if let Some(dir) = &out_dir {
                match export_with_source(&result, dir, source, config_path.map(|p| p.as_path())) {
                    Ok(_) => println!("results written to {}", dir.display()),
                    Err(e) => {
                        eprintln!("error: export failed: {e}");
                        return ExitCode::from(1);
                    }
                }
            }
            report(&result)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config, flags } => {
            let loaded = match harness::load_config_file(&config) {
                Ok(l) => l,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let mut run_config = RunConfig::default();
            let o = &loaded.overrides;
            if let Some(k) = o.kappa {
                run_config.kappa = k;
            }
            if let Some(v) = o.tol {
                run_config.tol = v;
            }
            if let Some(v) = o.max_iter {
                run_config.max_iter = v;
            }
            if let Some(v) = o.seed {
                run_config.seed = v;
                run_config.mc.seed = v;
            }
            if let Some(v) = o.mc_paths {
                run_config.mc.n_paths = v;
            }
            if let Some(v) = o.mc_dt {
                run_config.mc.dt = v;
            }
            if let Some(v) = &o.ladder {
                run_config.ladder = v.clone();
            }
            if let Some(v) = o.quad_nodes {
                run_config.quad_nodes = v;
            }
            if let Some(v) = o.tail_sigmas {
                run_config.tail_sigmas = v;
            }
            run_solve(
                &loaded.problem,
                run_config,
                &flags,
                RunSource::ConfigFile,
                Some(&config),
            )
        }
        Command::Builtin { name, flags } => match harness::builtin(&name) {
            Ok(problem) => run_solve(&problem, RunConfig::default(), &flags, RunSource::Builtin, None),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Validate { config, suite } => {
            let suite = match Suite::parse(&suite) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match harness::load_problem(&config) {
                Ok(problem) => {
                    let lattice = ValidationLattice::default_for(&problem.grid, 42);
                    let report = validate_assumptions(&problem, suite, &lattice);
                    for c in &report.checks {
                        println!(
                            "{}: {} (worst margin {:.4e}) {}",
                            c.name,
                            if c.passed { "pass" } else { "FAIL" },
                            c.worst_margin,
                            c.detail
                        );
                    }
                    if report.passed() {
                        println!("suite {}: all checks passed", suite.name());
                        ExitCode::SUCCESS
                    } else {
                        println!("suite {}: FAILED", suite.name());
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Crosscheck { result_dir, points } => {
            let run = match import_run(&result_dir) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let pts = match read_points(&points, run.field.grid().dim()) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let mc = semilinear::McSettings {
                n_paths: run
                    .manifest
                    .get("run.mc_paths")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(10_000),
                dt: run
                    .manifest
                    .get("run.mc_dt")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(1e-3),
                seed: run
                    .manifest
                    .get("run.mc_seed")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(42),
                chunk: 20_000,
            };
            match crosscheck_solution(&run.field, &run.problem, &pts, &mc) {
                Ok(report) => {
                    for p in &report.points {
                        if p.skipped {
                            println!("({:?}, t={}): skipped ({})", p.x, p.t, p.note);
                        } else {
                            println!(
                                "({:?}, t={:.4}): u={:.6} mc={:.6} stderr={:.2e} |diff|={:.2e} {}",
                                p.x,
                                p.t,
                                p.u_pde,
                                p.mc_mean,
                                p.mc_stderr,
                                p.abs_diff,
                                if p.passed { "ok" } else { "MISMATCH" }
                            );
                        }
                    }
                    if report.passed && report.n_skipped == 0 {
                        ExitCode::SUCCESS
                    } else if report.passed {
                        ExitCode::from(2)
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
