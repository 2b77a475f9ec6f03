//! Solver for terminal-value semilinear parabolic Cauchy problems
//!
//!     u_t + 1/2 Tr(a(x,t) D_x^2 u) + H(D_x u, u, x, t) = 0,  u(x,T) = beta(x)
//!
//! including Isaacs-type max-min Hamiltonians over discretized compact
//! control sets. The solution is constructed as the fixed point of the
//! integral operator that convolves terminal data and the Hamiltonian term
//! against the frozen-coefficient heat kernel; convergence is driven by
//! exponentially weighted supremum norms. Problems with unbounded data are
//! reduced to the bounded setting by piecewise-linear cutoff families, and an
//! independent Euler-Maruyama / Monte Carlo estimator cross-checks solutions
//! through their linearized stochastic representation.

pub mod error;
pub mod expr;
pub mod grid;
pub mod hamiltonian;
pub mod harness;
pub mod kernel;
pub mod localization;
pub mod picard;
pub mod problem;
pub mod rng;

pub mod feynman_kac;

pub use error::{Result, SolverError};
pub use grid::{FieldKind, Grid, GridField};
pub use hamiltonian::{
    decompose_to_linear, eval_generic, eval_isaacs, validate_assumptions, Hamiltonian,
    HamiltonianSpec, IsaacsBounds, IsaacsSpec, SaddleValue, ValidationLattice, ValidationReport,
};
pub use kernel::{
    build_kernel_table, convolve, convolve_gradient, frozen_kernel, gaussian_kernel,
    kernel_gradient, DiffusionSpec, KernelParams, KernelTable, Quad, QuadGrad, SpatialSlice,
};
pub use localization::{
    cutoff, localize_problem, stability_check, truncate_sigma, CutoffFamily, LocalizedProblem,
    StabilityReport, StabilitySettings,
};
pub use picard::{
    apply_t, estimate_contraction, iterate, kappa_norm, pde_residual, IterationTrace,
};
pub use problem::{Problem, Suite};

pub use feynman_kac::{
    crosscheck_solution, exp_moment_probe, mc_estimate, simulate_paths, CrossCheckReport,
    McEstimate, McSettings, PathEnsemble, SdeSpec,
};
pub use harness::{builtin, export, load_problem, solve, KappaPolicy, RunConfig, RunResult};
