//! Cutoff families and coefficient truncations that reduce problems with
//! unbounded or locally-regular data to the bounded setting, plus the
//! empirical stability check across widening cutoff radii.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, SolverError};
use crate::grid::GridField;
use crate::hamiltonian::{Hamiltonian, HamiltonianSpec};
use crate::kernel::{DiffusionSpec, KernelParams};
use crate::picard::{iterate, IterationTrace};
use crate::problem::{Problem, Suite};

/// Piecewise-linear bump: 1 on [0, k], linear down to 0 on [k, 2k].
///
/// Panics if k <= 0.
pub fn cutoff(z: f64, k: f64) -> f64 {
    assert!(k > 0.0, "cutoff radius must be positive, got {k}");
    let az = z.abs();
    if az <= k {
        1.0
    } else if az >= 2.0 * k {
        0.0
    } else {
        2.0 - az / k
    }
}

/// Cutoff applied to the Euclidean norm of a vector argument.
pub fn cutoff_vec(z: &[f64], k: f64) -> f64 {
    cutoff(z.iter().map(|v| v * v).sum::<f64>().sqrt(), k)
}

/// Cutoff radii for state, gradient, and value arguments.
#[derive(Debug, Clone, Copy)]
pub struct CutoffFamily {
    pub k_x: f64,
    pub k_p: f64,
    pub k_u: f64,
}

impl CutoffFamily {
    pub fn new(k_x: f64, k_p: f64, k_u: f64) -> Result<Self> {
        if !(k_x > 0.0 && k_p > 0.0 && k_u > 0.0) {
            return Err(SolverError::InvalidParameter(format!(
                "cutoff radii must be strictly positive, got ({k_x}, {k_p}, {k_u})"
            )));
        }
        Ok(CutoffFamily { k_x, k_p, k_u })
    }

    pub fn uniform(k: f64) -> Result<Self> {
        CutoffFamily::new(k, k, k)
    }
}

/// Diffusion factor radially frozen at the sphere |x| = k.
pub fn truncate_sigma(diff: &DiffusionSpec, k: f64) -> Result<DiffusionSpec> {
    if !(k > 0.0) {
        return Err(SolverError::InvalidParameter(
            "truncation radius must be positive".into(),
        ));
    }
    Ok(diff.remap(move |x| {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= k {
            x.to_vec()
        } else {
            x.iter().map(|v| v * k / norm).collect()
        }
    }))
}

/// A problem with cutoff-localized data, ready for direct iteration.
#[derive(Clone)]
pub struct LocalizedProblem {
    pub base_name: String,
    pub cutoffs: CutoffFamily,
    pub problem: Problem,
}

/// Apply the cutoff localization:
/// - generic H: H * xi_{k_x}(x) xi_{k_u}(u) xi_{k_p}(p),
/// - Isaacs: coefficientwise i,f (and h unless bounded above) times zeta_{k_x},
/// - terminal data times xi_{k_x}, diffusion radially frozen at k_x.
pub fn localize_problem(problem: &Problem, cutoffs: &CutoffFamily) -> Result<LocalizedProblem> {
    let k_x = cutoffs.k_x;
    let hamiltonian = match &problem.hamiltonian {
        Hamiltonian::Generic(spec) => {
            let (k_p, k_u) = (cutoffs.k_p, cutoffs.k_u);
            let inner = spec.clone();
            let eval = move |p: &[f64], u: f64, x: &[f64], t: f64| {
                let c = cutoff_vec(x, k_x) * cutoff(u, k_u) * cutoff_vec(p, k_p);
                if c == 0.0 {
                    0.0
                } else {
                    c * inner.raw_eval(p, u, x, t)
                }
            };
            // growth/Lipschitz constant of the localized H, measured on a
            // probe set covering the doubled radii
            let growth = measure_growth(problem, &eval, cutoffs);
            Hamiltonian::Generic(HamiltonianSpec::new(growth, BTreeMap::new(), eval)?)
        }
        Hamiltonian::Isaacs(spec) => {
            let truncate_h = spec.bounds.h_upper.is_none();
            Hamiltonian::Isaacs(
                spec.truncated(move |x: &[f64]| cutoff_vec(x, k_x), truncate_h),
            )
        }
    };
    let beta = Arc::clone(&problem.terminal);
    let terminal = Arc::new(move |x: &[f64]| cutoff_vec(x, k_x) * beta(x));
    let diffusion = truncate_sigma(&problem.diffusion, k_x)?;
    let localized = Problem::new(
        format!(
            "{}@loc(kx={},kp={},ku={})",
            problem.name, cutoffs.k_x, cutoffs.k_p, cutoffs.k_u
        ),
        problem.dim,
        problem.horizon,
        diffusion,
        hamiltonian,
        terminal,
        Suite::A,
        problem.grid,
    )?;
    Ok(LocalizedProblem {
        base_name: problem.name.clone(),
        cutoffs: *cutoffs,
        problem: localized,
    })
}

/// Sup of |H_loc| / (1 + |p| + |u|) and of the difference quotients over a
/// probe set; the localized problem passes suite-A validation with this K.
fn measure_growth(
    problem: &Problem,
    eval: &impl Fn(&[f64], f64, &[f64], f64) -> f64,
    cutoffs: &CutoffFamily,
) -> f64 {
    let grid = &problem.grid;
    let dim = grid.dim();
    let mut k: f64 = 0.0;
    let samples = |k: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| -2.2 * k + i as f64 * (4.4 * k / (n - 1) as f64))
            .collect()
    };
    let xs = samples(cutoffs.k_x, 9);
    let us = samples(cutoffs.k_u, 25);
    let ps = samples(cutoffs.k_p, 25);
    let ts = [0.0, 0.5 * problem.horizon, problem.horizon];
    let mut x = vec![0.0; dim];
    let mut p = vec![0.0; dim];
    let mut values = vec![0.0; us.len() * ps.len()];
    for &xv in &xs {
        x[0] = xv.clamp(-grid.box_radius(), grid.box_radius());
        for &t in &ts {
            for (ui, &uv) in us.iter().enumerate() {
                for (pi, &pv) in ps.iter().enumerate() {
                    p[0] = pv;
                    let v = eval(&p, uv, &x, t);
                    values[ui * ps.len() + pi] = v;
                    k = k.max(v.abs() / (1.0 + uv.abs() + pv.abs()));
                }
            }
            // difference quotients along both the u and p directions
            for ui in 0..us.len() {
                for pi in 1..ps.len() {
                    let dv = values[ui * ps.len() + pi] - values[ui * ps.len() + pi - 1];
                    k = k.max(dv.abs() / (ps[pi] - ps[pi - 1]).abs());
                }
            }
            for pi in 0..ps.len() {
                for ui in 1..us.len() {
                    let dv = values[ui * ps.len() + pi] - values[(ui - 1) * ps.len() + pi];
                    k = k.max(dv.abs() / (us[ui] - us[ui - 1]).abs());
                }
            }
        }
    }
    (k * 1.1).max(1e-6)
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub radii: Vec<f64>,
    /// sup differences of consecutive solutions on the measurement ball
    pub diffs: Vec<f64>,
    pub rung_converged: Vec<bool>,
    pub monotone: bool,
    pub final_gap: f64,
    /// radius of the common measurement ball (half the smallest rung radius)
    pub ball_radius: f64,
    /// set when any rung failed to converge
    pub inconclusive: bool,
}

#[derive(Debug, Clone)]
pub struct StabilitySettings {
    pub kappa: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub kernel: KernelParams,
    /// fixed value-cutoff radius across rungs (m* policy); rung radius if None
    pub k_u: Option<f64>,
    /// floor for the gradient-cutoff radius; rung radius if None
    pub k_p_floor: Option<f64>,
}

pub struct LadderOutcome {
    pub report: StabilityReport,
    pub solutions: Vec<GridField>,
    pub traces: Vec<IterationTrace>,
    pub localized: Vec<LocalizedProblem>,
}

/// Solve the localized problem at each radius and measure consecutive
/// sup-differences on the ball of half the smallest radius.
pub fn solve_ladder(
    problem: &Problem,
    radii: &[f64],
    settings: &StabilitySettings,
) -> Result<LadderOutcome> {
    if radii.len() < 2 {
        return Err(SolverError::InvalidParameter(
            "stability ladder needs at least 2 radii".into(),
        ));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SolverError::InvalidParameter(
            "ladder radii must be strictly increasing".into(),
        ));
    }
    let ball_radius = radii[0] / 2.0;
    let mut solutions = Vec::new();
    let mut traces = Vec::new();
    let mut localized = Vec::new();
    let mut rung_converged = Vec::new();
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
        solutions.push(field);
        traces.push(trace);
        localized.push(loc);
    }
    let mut diffs = Vec::new();
    for w in solutions.windows(2) {
        diffs.push(w[0].sup_diff_on_ball(&w[1], ball_radius));
    }
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0]);
    let final_gap = *diffs.last().unwrap();
    let inconclusive = rung_converged.iter().any(|c| !c);
    Ok(LadderOutcome {
        report: StabilityReport {
            radii: radii.to_vec(),
            diffs,
            rung_converged,
            monotone,
            final_gap,
            ball_radius,
            inconclusive,
        },
        solutions,
        traces,
        localized,
    })
}

/// Stability of solutions as the cutoffs widen; see `solve_ladder`.
pub fn stability_check(
    problem: &Problem,
    radii: &[f64],
    settings: &StabilitySettings,
) -> Result<StabilityReport> {
    solve_ladder(problem, radii, settings).map(|o| o.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::CounterRng;
    use nalgebra::DMatrix;

    #[test]
    fn cutoff_piecewise_values() {
        assert_eq!(cutoff(1.0, 2.0), 1.0);
        assert_eq!(cutoff(3.0, 2.0), 0.5);
        assert_eq!(cutoff(5.0, 2.0), 0.0);
        assert_eq!(cutoff(-3.0, 2.0), 0.5);
        assert_eq!(cutoff(2.0, 2.0), 1.0);
        assert_eq!(cutoff(4.0, 2.0), 0.0);
    }

    #[test]
    #[should_panic(expected = "cutoff radius must be positive")]
    fn cutoff_rejects_nonpositive_radius() {
        cutoff(1.0, 0.0);
    }

    #[test]
    fn cutoff_lipschitz_constant() {
        let rng = CounterRng::new(17);
        for case in 0..1000u64 {
            let k = rng.range(0.1, 5.0, case, 0, 0);
            let z1 = rng.range(-12.0, 12.0, case, 1, 0);
            let z2 = rng.range(-12.0, 12.0, case, 1, 1);
            let lhs = (cutoff(z1, k) - cutoff(z2, k)).abs();
            assert!(
                lhs <= (z1 - z2).abs() / k + 1e-12,
                "lipschitz violated at k={k}, z1={z1}, z2={z2}"
            );
        }
    }

    #[test]
    fn lipschitz_product_bound() {
        // multiplying a Lipschitz phi by xi_l keeps the constant below
        // (1/l)(2 l L + |phi(0)|) + L
        let rng = CounterRng::new(23);
        for case in 0..200u64 {
            let c = rng.range(-2.0, 2.0, case, 0, 0);
            let d = rng.range(-2.0, 2.0, case, 0, 1);
            let phi = |z: f64| c * z + d * z.sin();
            let lip = c.abs() + d.abs();
            let l = rng.range(0.5, 4.0, case, 0, 2);
            let bound = (2.0 * l * lip + phi(0.0).abs()) / l + lip;
            for pair in 0..5u64 {
                let z1 = rng.range(-3.0 * l, 3.0 * l, case, 1 + pair, 0);
                let z2 = rng.range(-3.0 * l, 3.0 * l, case, 1 + pair, 1);
                if (z1 - z2).abs() < 1e-9 {
                    continue;
                }
                let q = (cutoff(z1, l) * phi(z1) - cutoff(z2, l) * phi(z2)).abs()
                    / (z1 - z2).abs();
                assert!(q <= bound + 1e-9, "quotient {q} above bound {bound}");
            }
        }
    }

    #[test]
    fn truncate_sigma_examples() {
        let constant = DiffusionSpec::constant(DMatrix::identity(1, 1)).unwrap();
        let trunc = truncate_sigma(&constant, 3.0).unwrap();
        for &x in &[0.0, 2.0, 10.0] {
            assert_eq!(trunc.sigma_at(&[x], 0.0)[(0, 0)], 1.0);
        }

        let linear = DiffusionSpec::scalar_1d(1.0, 100.0, |x| 1.0 + x.abs()).unwrap();
        let trunc = truncate_sigma(&linear, 2.0).unwrap();
        assert_eq!(trunc.sigma_at(&[5.0], 0.0)[(0, 0)], 3.0);
        assert_eq!(trunc.sigma_at(&[1.0], 0.0)[(0, 0)], 2.0);
        // continuity at the truncation sphere
        assert!(
            (trunc.sigma_at(&[2.0], 0.0)[(0, 0)] - linear.sigma_at(&[2.0], 0.0)[(0, 0)]).abs()
                < 1e-14
        );
        assert!(trunc.is_time_invariant());
    }

    fn burgers_like() -> Problem {
        use crate::hamiltonian::HamiltonianSpec;
        use std::collections::BTreeMap;
        let grid = Grid::new(1, 8.0, 33, 9, 0.5).unwrap();
        Problem::new(
            "tburgers",
            1,
            0.5,
            DiffusionSpec::constant(DMatrix::identity(1, 1)).unwrap(),
            Hamiltonian::Generic(
                HamiltonianSpec::new(4.0, BTreeMap::new(), |p, u, _, _| u * p[0]).unwrap(),
            ),
            Arc::new(|x: &[f64]| 0.5 * cutoff(x[0], 2.0) * (-x[0]).tanh()),
            Suite::B,
            grid,
        )
        .unwrap()
    }

    #[test]
    fn localized_hamiltonian_plateau_and_support() {
        let problem = burgers_like();
        let fam = CutoffFamily::new(4.0, 1.0, 1.0).unwrap();
        let loc = localize_problem(&problem, &fam).unwrap();
        // plateau: inside all radii the localized H equals u*p
        let v = loc
            .problem
            .hamiltonian
            .eval(&[0.5], 0.8, &[1.0], 0.1)
            .unwrap();
        assert!((v - 0.8 * 0.5).abs() < 1e-14);
        // support: vanishes once any argument passes its doubled radius
        let v = loc
            .problem
            .hamiltonian
            .eval(&[3.0], 3.0, &[1.0], 0.1)
            .unwrap();
        assert_eq!(v, 0.0);
        let v = loc
            .problem
            .hamiltonian
            .eval(&[0.1], 0.1, &[9.0], 0.1)
            .unwrap();
        assert_eq!(v, 0.0);
        // terminal data cut by xi_{k_x}
        assert_eq!((loc.problem.terminal)(&[9.0]), 0.0);
        assert!(
            ((loc.problem.terminal)(&[1.0]) - (problem.terminal)(&[1.0])).abs() < 1e-14
        );
    }

    #[test]
    fn localized_growth_constant_bounds_lattice() {
        let problem = burgers_like();
        let fam = CutoffFamily::new(4.0, 4.0, 4.0).unwrap();
        let loc = localize_problem(&problem, &fam).unwrap();
        let Hamiltonian::Generic(spec) = &loc.problem.hamiltonian else {
            panic!("generic expected")
        };
        let k = spec.growth_k;
        let rng = CounterRng::new(3);
        for case in 0..500u64 {
            let p = [rng.range(-10.0, 10.0, case, 0, 0)];
            let u = rng.range(-10.0, 10.0, case, 0, 1);
            let x = [rng.range(-8.0, 8.0, case, 0, 2)];
            let v = loc.problem.hamiltonian.eval(&p, u, &x, 0.1).unwrap();
            assert!(
                v.abs() <= k * (1.0 + u.abs() + p[0].abs()) + 1e-9,
                "growth violated: |H|={} vs K(1+..)={}",
                v.abs(),
                k * (1.0 + u.abs() + p[0].abs())
            );
        }
    }

    #[test]
    fn localization_identity_when_data_inside_plateau() {
        let problem = burgers_like();
        // data supported in |x|<=4, |u|<=0.5, |p|<=1
        let fam = CutoffFamily::new(6.0, 6.0, 6.0).unwrap();
        let loc = localize_problem(&problem, &fam).unwrap();
        let grid = problem.grid;
        grid.for_each_spatial(|_, x| {
            let b0 = (problem.terminal)(x);
            let b1 = (loc.problem.terminal)(x);
            assert!((b0 - b1).abs() < 1e-14);
        });
        for &(p, u, x) in &[(0.3, 0.4, 1.0), (-0.9, 0.1, -3.5)] {
            let v0 = problem.hamiltonian.eval(&[p], u, &[x], 0.2).unwrap();
            let v1 = loc.problem.hamiltonian.eval(&[p], u, &[x], 0.2).unwrap();
            assert!((v0 - v1).abs() < 1e-14);
        }
    }

    #[test]
    fn single_radius_ladder_is_error() {
        let problem = burgers_like();
        let settings = StabilitySettings {
            kappa: 8.0,
            tol: 1e-3,
            max_iter: 10,
            kernel: KernelParams::for_grid(&problem.grid),
            k_u: None,
            k_p_floor: None,
        };
        assert!(matches!(
            stability_check(&problem, &[4.0], &settings),
            Err(SolverError::InvalidParameter(_))
        ));
    }

    #[test]
    fn bounded_problem_ladder_rungs_agree() {
        // data supported well inside the smallest rung: rungs coincide
        let problem = burgers_like();
        let settings = StabilitySettings {
            kappa: 8.0,
            tol: 1e-5,
            max_iter: 25,
            kernel: KernelParams::for_grid(&problem.grid),
            k_u: Some(4.0),
            k_p_floor: Some(4.0),
        };
        let report = stability_check(&problem, &[4.0, 8.0], &settings).unwrap();
        assert!(!report.inconclusive);
        assert!(
            report.final_gap <= 2.0 * 1e-5,
            "rungs with identical effective data differ by {}",
            report.final_gap
        );
    }
}
