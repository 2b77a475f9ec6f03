//! Problem definition: diffusion, Hamiltonian, terminal data, assumption
//! suite, and discretization grid.

use std::sync::Arc;

use crate::error::{Result, SolverError};
use crate::grid::Grid;
use crate::hamiltonian::Hamiltonian;
use crate::kernel::DiffusionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    A,
    B,
    C,
    D,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        match s.trim() {
            "A" | "a" => Ok(Suite::A),
            "B" | "b" => Ok(Suite::B),
            "C" | "c" => Ok(Suite::C),
            "D" | "d" => Ok(Suite::D),
            other => Err(SolverError::InvalidParameter(format!(
                "unknown assumption suite '{other}'"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::A => "A",
            Suite::B => "B",
            Suite::C => "C",
            Suite::D => "D",
        }
    }
}

/// Terminal-value Cauchy problem on [-R, R]^N x [0, T].
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub diffusion: DiffusionSpec,
    pub hamiltonian: Hamiltonian,
    pub terminal: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub suite: Suite,
    pub grid: Grid,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("suite", &self.suite)
            .finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        diffusion: DiffusionSpec,
        hamiltonian: Hamiltonian,
        terminal: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
        suite: Suite,
        grid: Grid,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(SolverError::InvalidParameter(
                "horizon must be positive".into(),
            ));
        }
        if diffusion.dim() != dim {
            return Err(SolverError::DimensionMismatch(format!(
                "diffusion dim {} vs problem dim {dim}",
                diffusion.dim()
            )));
        }
        if grid.dim() != dim {
            return Err(SolverError::DimensionMismatch(format!(
                "grid dim {} vs problem dim {dim}",
                grid.dim()
            )));
        }
        if (grid.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(SolverError::InvalidParameter(format!(
                "grid horizon {} does not match problem horizon {horizon}",
                grid.horizon()
            )));
        }
        let problem = Problem {
            name: name.into(),
            dim,
            horizon,
            diffusion,
            hamiltonian,
            terminal,
            suite,
            grid,
        };
        problem.check_terminal_finite()?;
        Ok(problem)
    }

    fn check_terminal_finite(&self) -> Result<()> {
        let mut bad: Option<Vec<f64>> = None;
        self.grid.for_each_spatial(|_, x| {
            if bad.is_none() && !(self.terminal)(x).is_finite() {
                bad = Some(x.to_vec());
            }
        });
        match bad {
            Some(x) => Err(SolverError::NonFinite(format!(
                "terminal data at x={x:?}"
            ))),
            None => Ok(()),
        }
    }

    /// Terminal data sampled on the spatial lattice.
    pub fn terminal_slice(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.grid.spatial_count()];
        self.grid.for_each_spatial(|s, x| beta[s] = (self.terminal)(x));
        beta
    }

    pub fn terminal_sup(&self) -> f64 {
        self.terminal_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
