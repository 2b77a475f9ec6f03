//! Built-in benchmark problems.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Result, SolverError};
use crate::grid::Grid;
use crate::hamiltonian::{Hamiltonian, HamiltonianSpec, IsaacsBounds, IsaacsSpec};
use crate::kernel::DiffusionSpec;
use crate::localization::cutoff;
use crate::problem::{Problem, Suite};

fn default_grid(dim: usize, horizon: f64) -> Grid {
    Grid::new(dim, 8.0, 129, 65, horizon).expect("default grid")
}

/// `linear_heat`: a = 1, H = 1, beta = 0.5, T = 1; closed form
/// u(x,t) = 0.5 + (T - t).
fn linear_heat() -> Result<Problem> {
    Problem::new(
        "linear_heat",
        1,
        1.0,
        DiffusionSpec::constant(DMatrix::identity(1, 1))?,
        Hamiltonian::Generic(HamiltonianSpec::new(
            1.0,
            BTreeMap::new(),
            |_, _, _, _| 1.0,
        )?),
        Arc::new(|_| 0.5),
        Suite::A,
        default_grid(1, 1.0),
    )
}

/// `burgers`: a = 1, H = u p, beta = 0.5 xi_2(x) tanh(-x), T = 0.5. The
/// Hamiltonian is only locally Lipschitz, so the run is routed through the
/// cutoff localization ladder (suite B).
fn burgers() -> Result<Problem> {
    let mut table = BTreeMap::new();
    for m in [1u32, 2, 4, 8, 16, 32] {
        for n in [1u32, 2, 4, 8, 16, 32] {
            table.insert((m, n), m as f64);
        }
    }
    Problem::new(
        "burgers",
        1,
        0.5,
        DiffusionSpec::constant(DMatrix::identity(1, 1))?,
        Hamiltonian::Generic(HamiltonianSpec::new(4.0, table, |p, u, _, _| u * p[0])?),
        Arc::new(|x: &[f64]| 0.5 * cutoff(x[0], 2.0) * (-x[0]).tanh()),
        Suite::B,
        default_grid(1, 0.5),
    )
}

/// `robust_game`: Isaacs equation with D = Gamma = {-1,-0.5,0,0.5,1},
/// i = delta + 0.5 eta, h = -0.1, f = -delta^2 + eta^2 - x^2 xi_4(x),
/// beta = xi_4(x), T = 1 (suite C: f bounded, h bounded above).
fn robust_game() -> Result<Problem> {
    let controls: Vec<Vec<f64>> = [-1.0, -0.5, 0.0, 0.5, 1.0]
        .iter()
        .map(|&v| vec![v])
        .collect();
    let spec = IsaacsSpec::new(
        controls.clone(),
        controls,
        IsaacsBounds {
            growth_a: 1.0,
            growth_b: 2.0,
            f_bound: Some(21.0),
            h_upper: Some(-0.1),
        },
        |_, _, d, g| vec![d[0] + 0.5 * g[0]],
        |_, _, _, _| -0.1,
        |x, _, d, g| -d[0] * d[0] + g[0] * g[0] - x[0] * x[0] * cutoff(x[0], 4.0),
    )?;
    Problem::new(
        "robust_game",
        1,
        1.0,
        DiffusionSpec::constant(DMatrix::identity(1, 1))?,
        Hamiltonian::Isaacs(spec),
        Arc::new(|x: &[f64]| cutoff(x[0], 4.0)),
        Suite::C,
        default_grid(1, 1.0),
    )
}

/// Look up a built-in problem by name.
pub fn builtin(name: &str) -> Result<Problem> {
    match name {
        "linear_heat" => linear_heat(),
        "burgers" => burgers(),
        "robust_game" => robust_game(),
        other => Err(SolverError::UnknownBuiltin(other.to_string())),
    }
}

pub const BUILTIN_NAMES: [&str; 3] = ["linear_heat", "burgers", "robust_game"];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{validate_assumptions, ValidationLattice};
    use crate::localization::{localize_problem, CutoffFamily};

    #[test]
    fn builtin_names_resolve() {
        for name in BUILTIN_NAMES {
            assert!(builtin(name).is_ok(), "{name}");
        }
        assert!(matches!(
            builtin("nope"),
            Err(SolverError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn linear_heat_passes_suite_a() {
        let p = builtin("linear_heat").unwrap();
        let lattice = ValidationLattice::default_for(&p.grid, 1);
        let report = validate_assumptions(&p, Suite::A, &lattice);
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn robust_game_passes_suite_c() {
        let p = builtin("robust_game").unwrap();
        let lattice = ValidationLattice::default_for(&p.grid, 1);
        let report = validate_assumptions(&p, Suite::C, &lattice);
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn burgers_fails_a_until_localized() {
        let p = builtin("burgers").unwrap();
        let lattice = ValidationLattice::default_for(&p.grid, 1);
        let before = validate_assumptions(&p, Suite::A, &lattice);
        assert!(!before.passed(), "unlocalized Burgers should fail suite A");
        assert!(before
            .checks
            .iter()
            .any(|c| c.name == "A3.growth" && !c.passed));

        let fam = CutoffFamily::new(4.0, 4.0, 4.0).unwrap();
        let loc = localize_problem(&p, &fam).unwrap();
        let after = validate_assumptions(&loc.problem, Suite::A, &lattice);
        assert!(after.passed(), "{}", after.summary());
        // but it does satisfy its declared suite B
        let own = validate_assumptions(&p, Suite::B, &lattice);
        assert!(own.passed(), "{}", own.summary());
    }

    #[test]
    fn burgers_terminal_supported_in_ball_4() {
        let p = builtin("burgers").unwrap();
        assert_eq!((p.terminal)(&[4.0]), 0.0);
        assert_eq!((p.terminal)(&[-5.0]), 0.0);
        assert!((p.terminal)(&[1.0]) < 0.0);
        assert!(((p.terminal)(&[3.0])
            - 0.5 * 0.5 * (-3.0f64).tanh())
        .abs()
            < 1e-15);
    }
}
