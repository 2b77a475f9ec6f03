//! The integral operator, weighted norms, and the fixed-point iteration.
//!
//! The operator maps a candidate (u, D_x u) to
//!
//!     (T u)(x,t) = int beta(y) G(x,t,y,T) dy
//!                + int_t^T int H(D_x u(y,s), u(y,s), y, s) G(x,t,y,s) dy ds
//!
//! with G the frozen-coefficient kernel. The time integral uses the
//! trapezoid rule over the field's own levels; the degenerate s -> t endpoint
//! goes through the kernel module's sub-grid identity rule. Gradients of the
//! output come from the analytic kernel gradient, not from differencing u.

use std::time::Instant;

use crate::error::{Result, SolverError};
use crate::grid::{FieldKind, Grid, GridField};
use crate::kernel::{
    build_kernel_table, convolve, convolve_gradient, first_interval_rows_1d, kernel_row_1d,
    row_gradient, row_value, sym_eigen_bounds, FirstRows, KernelParams, KernelTable, SpatialSlice,
    DEFAULT_TAIL_CUT_SIGMAS,
};
use crate::problem::Problem;
use crate::rng::CounterRng;

/// Per-iteration record of the fixed-point loop.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    pub kappa: f64,
    pub deltas: Vec<f64>,
    pub ratios: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iter_seconds: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
}

/// Weighted supremum norm: sup e^{-kappa (T-t)} |u| + sup e^{-kappa (T-t)} |D_x u|.
pub fn kappa_norm(field: &GridField, kappa: f64) -> f64 {
    let grid = field.grid();
    let horizon = grid.horizon();
    let ns = grid.spatial_count();
    let mut sup_u: f64 = 0.0;
    let mut sup_g: f64 = 0.0;
    for level in 0..grid.time_levels() {
        let w = (-kappa * (horizon - grid.time(level))).exp();
        for s in 0..ns {
            sup_u = sup_u.max(w * field.u[level * ns + s].abs());
            sup_g = sup_g.max(w * field.grad_norm(level, s));
        }
    }
    sup_u + sup_g
}

/// Terminal-data slice with lattice finite differences as its gradient.
fn terminal_level(problem: &Problem) -> (Vec<f64>, Vec<f64>) {
    let grid = &problem.grid;
    let beta = problem.terminal_slice();
    let mut grad = vec![0.0; grid.spatial_count() * grid.dim()];
    for s in 0..grid.spatial_count() {
        for d in 0..grid.dim() {
            grad[s * grid.dim() + d] = grid.fd_axis(&beta, s, d);
        }
    }
    (beta, grad)
}

/// First iterate: terminal data extended constantly backward in time.
pub fn initial_iterate(problem: &Problem) -> GridField {
    let grid = problem.grid;
    let (beta, bgrad) = terminal_level(problem);
    let ns = grid.spatial_count();
    let mut field = GridField::zeros(grid, FieldKind::Iterate);
    for level in 0..grid.time_levels() {
        field.u[level * ns..(level + 1) * ns].copy_from_slice(&beta);
        let base = level * ns * grid.dim();
        field.grad[base..base + ns * grid.dim()].copy_from_slice(&bgrad);
    }
    field
}

/// Hamiltonian samples of a field on every level.
fn hamiltonian_slices(field: &GridField, problem: &Problem) -> Result<Vec<Vec<f64>>> {
    let grid = field.grid();
    let ns = grid.spatial_count();
    let mut xbuf = vec![0.0; grid.dim()];
    let mut slices = Vec::with_capacity(grid.time_levels());
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        let mut slice = vec![0.0; ns];
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            slice[s] = problem
                .hamiltonian
                .eval(field.grad_at(level, s), field.u[level * ns + s], &xbuf, t)?;
        }
        slices.push(slice);
    }
    Ok(slices)
}

/// One application of the integral operator.
pub fn apply_t(field: &GridField, problem: &Problem, params: &KernelParams) -> Result<GridField> {
    params.validate()?;
    if *field.grid() != problem.grid {
        return Err(SolverError::DimensionMismatch(
            "field grid does not match problem grid".into(),
        ));
    }
    let table = build_kernel_table(&problem.grid, &problem.diffusion, params);
    apply_t_with(field, problem, params, table.as_ref())
}

pub(crate) fn apply_t_with(
    field: &GridField,
    problem: &Problem,
    params: &KernelParams,
    table: Option<&KernelTable>,
) -> Result<GridField> {
    let grid = problem.grid;
    let ns = grid.spatial_count();
    let dim = grid.dim();
    let last = grid.time_levels() - 1;
    let dt = grid.dt();

    let (beta, bgrad) = terminal_level(problem);
    let hs = hamiltonian_slices(field, problem)?;

    let mut out = GridField::zeros(grid, FieldKind::Iterate);
    out.u[last * ns..(last + 1) * ns].copy_from_slice(&beta);
    out.grad[last * ns * dim..(last + 1) * ns * dim].copy_from_slice(&bgrad);

    let beta_slice = SpatialSlice::new(&grid, &beta);
    // slope slices H_{j+1} - H_j for the first-interval rule
    let diffs: Vec<Vec<f64>> = (0..last)
        .map(|j| (0..ns).map(|s| hs[j + 1][s] - hs[j][s]).collect())
        .collect();
    let mut xbuf = vec![0.0; dim];
    for level in 0..last {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let (mut val, mut gvec) = convolve_pair(
                &beta_slice,
                &xbuf,
                s,
                t,
                grid.horizon(),
                Gap::Levels(last - level),
                problem,
                params,
                table,
            )?;
            // the first interval [t, t + dt]: tau-integrated kernel rows
            // applied to H_level and the slope slice (H_{level+1} - H_level),
            // so no raw slice enters u
            first_interval(
                &grid,
                &hs[level],
                &diffs[level],
                &xbuf,
                s,
                t,
                dt,
                problem,
                params,
                table,
                &mut val,
                &mut gvec,
            )?;
            // trapezoid over the remaining levels [t + dt, T]
            for j in (level + 1)..=last {
                if j == last && j == level + 1 {
                    break;
                }
                let tw = if j == level + 1 || j == last {
                    0.5 * dt
                } else {
                    dt
                };
                let h_slice = SpatialSlice::new(&grid, &hs[j]);
                let (cv, cg) = convolve_pair(
                    &h_slice,
                    &xbuf,
                    s,
                    t,
                    grid.time(j),
                    Gap::Levels(j - level),
                    problem,
                    params,
                    table,
                )?;
                val += tw * cv;
                for d in 0..dim {
                    gvec[d] += tw * cg[d];
                }
            }
            let node = level * ns + s;
            out.u[node] = val;
            out.grad[node * dim..node * dim + dim].copy_from_slice(&gvec);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Gap {
    Levels(usize),
}

/// First-interval contribution: rowG0 applied to the level slice plus rowG1
/// applied to the slope slice; masses dt and dt/2 are folded into the rows.
#[allow(clippy::too_many_arguments)]
fn first_interval(
    grid: &Grid,
    level_slice: &[f64],
    slope_slice: &[f64],
    x: &[f64],
    sidx: usize,
    t: f64,
    dt: f64,
    problem: &Problem,
    params: &KernelParams,
    table: Option<&KernelTable>,
    val: &mut f64,
    gvec: &mut [f64],
) -> Result<()> {
    let dim = grid.dim();
    let lvl = SpatialSlice::new(grid, level_slice);
    let slope = SpatialSlice::new(grid, slope_slice);
    let built;
    let rows: Option<&FirstRows> = if let Some(tbl) = table {
        Some(tbl.first_rows(sidx))
    } else if dim == 1 {
        let a = problem.diffusion.a_at(x, t)[(0, 0)];
        built = first_interval_rows_1d(grid, x[0], a, dt, params);
        Some(&built)
    } else {
        None
    };
    match rows {
        Some(FirstRows::Rows { r0, r1 }) => {
            *val += row_value(r0, &lvl, x)?.value + row_value(r1, &slope, x)?.value;
            let g0 = row_gradient(r0, &lvl, x)?.value;
            let g1 = row_gradient(r1, &slope, x)?.value;
            for d in 0..dim {
                gvec[d] += g0[d] + g1[d];
            }
        }
        Some(FirstRows::Degenerate) => {
            *val += dt * level_slice[sidx] + 0.5 * dt * slope_slice[sidx];
            for d in 0..dim {
                gvec[d] += dt * grid.fd_axis(level_slice, sidx, d)
                    + 0.5 * dt * grid.fd_axis(slope_slice, sidx, d);
            }
        }
        None => {
            // dim >= 2 fallback: midpoint rule at half-gap smoothing
            let mut mid = vec![0.0; grid.spatial_count()];
            for (m, (lv, sv)) in mid
                .iter_mut()
                .zip(level_slice.iter().zip(slope_slice.iter()))
            {
                *m = lv + 0.5 * sv;
            }
            let mid_slice = SpatialSlice::new(grid, &mid);
            let v = convolve(&mid_slice, x, t, t + 0.5 * dt, &problem.diffusion, params)?;
            let g = convolve_gradient(&mid_slice, x, t, t + 0.5 * dt, &problem.diffusion, params)?;
            *val += dt * v.value;
            for d in 0..dim {
                gvec[d] += dt * g.value[d];
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn convolve_pair(
    slice: &SpatialSlice,
    x: &[f64],
    sidx: usize,
    t: f64,
    s: f64,
    gap: Gap,
    problem: &Problem,
    params: &KernelParams,
    table: Option<&KernelTable>,
) -> Result<(f64, Vec<f64>)> {
    if let Some(tbl) = table {
        let Gap::Levels(g) = gap;
        let row = tbl.row(g, sidx);
        let v = row_value(row, slice, x)?;
        let g = row_gradient(row, slice, x)?;
        return Ok((v.value, g.value));
    }
    if slice.grid.dim() == 1 {
        let a = problem.diffusion.a_at(x, t)[(0, 0)];
        let row = kernel_row_1d(slice.grid, x[0], (s - t) * a, params);
        let v = row_value(&row, slice, x)?;
        let g = row_gradient(&row, slice, x)?;
        return Ok((v.value, g.value));
    }
    let v = convolve(slice, x, t, s, &problem.diffusion, params)?;
    let g = convolve_gradient(slice, x, t, s, &problem.diffusion, params)?;
    Ok((v.value, g.value))
}

/// Fixed-point loop u_{n+1} = T u_n from the terminal-data initial iterate.
pub fn iterate(
    problem: &Problem,
    kappa: f64,
    tol: f64,
    max_iter: usize,
    params: &KernelParams,
) -> Result<(GridField, IterationTrace)> {
    if !(kappa > 0.0) {
        return Err(SolverError::InvalidParameter(
            "kappa must be positive".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(SolverError::InvalidParameter("tol must be positive".into()));
    }
    params.validate()?;
    let table = build_kernel_table(&problem.grid, &problem.diffusion, params);

    let mut trace = IterationTrace {
        kappa,
        deltas: Vec::new(),
        ratios: Vec::new(),
        residuals: Vec::new(),
        iter_seconds: Vec::new(),
        iterations: 0,
        converged: false,
        diverged: false,
    };

    let mut current = initial_iterate(problem);
    let mut growing = 0usize;
    for _ in 0..max_iter {
        let started = Instant::now();
        let next = apply_t_with(&current, problem, params, table.as_ref())?;
        let delta = kappa_norm(&next.sub(&current), kappa);
        trace.iter_seconds.push(started.elapsed().as_secs_f64());
        if let Some(&prev) = trace.deltas.last() {
            if prev > 0.0 {
                trace.ratios.push(delta / prev);
            }
            if delta > prev {
                growing += 1;
            } else {
                growing = 0;
            }
        }
        trace.deltas.push(delta);
        trace.iterations += 1;
        current = next;
        trace
            .residuals
            .push(pde_residual(&current, problem).unwrap_or(f64::NAN));
        if delta < tol {
            trace.converged = true;
            break;
        }
        if growing >= 5 {
            trace.diverged = true;
            break;
        }
    }
    current.kind = if trace.converged {
        FieldKind::Solution
    } else {
        FieldKind::Iterate
    };
    Ok((current, trace))
}

/// Empirical contraction factor: max over random smooth field pairs of
/// ||T u - T v||_kappa / ||u - v||_kappa.
pub fn estimate_contraction(
    problem: &Problem,
    kappa: f64,
    n_pairs: usize,
    params: &KernelParams,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(SolverError::InvalidParameter(
            "n_pairs must be >= 1".into(),
        ));
    }
    params.validate()?;
    let table = build_kernel_table(&problem.grid, &problem.diffusion, params);
    let rng = CounterRng::new(seed);
    let mut worst: f64 = 0.0;
    for pair in 0..n_pairs as u64 {
        let mut attempt = 0u64;
        let (u, v, den) = loop {
            let u = random_bump_field(&problem.grid, &rng, pair * 2 + attempt * 1000);
            let v = random_bump_field(&problem.grid, &rng, pair * 2 + 1 + attempt * 1000);
            let den = kappa_norm(&u.sub(&v), kappa);
            if den > 0.0 {
                break (u, v, den);
            }
            attempt += 1;
            if attempt > 16 {
                return Err(SolverError::Stage {
                    stage: "estimate_contraction".into(),
                    message: "could not sample distinct field pair".into(),
                });
            }
        };
        let tu = apply_t_with(&u, problem, params, table.as_ref())?;
        let tv = apply_t_with(&v, problem, params, table.as_ref())?;
        let num = kappa_norm(&tu.sub(&tv), kappa);
        worst = worst.max(num / den);
    }
    Ok(worst)
}

/// Sum of three separable Gaussian bumps modulated in time, |u| <= 1, with
/// analytic gradients.
fn random_bump_field(grid: &Grid, rng: &CounterRng, stream: u64) -> GridField {
    let dim = grid.dim();
    let r = grid.box_radius();
    let horizon = grid.horizon();
    const NB: usize = 3;
    let mut amp = [0.0; NB];
    let mut width = [0.0; NB];
    let mut omega = [0.0; NB];
    let mut phase = [0.0; NB];
    let mut centers = [[0.0; 4]; NB];
    for b in 0..NB {
        let bs = b as u64;
        amp[b] = rng.range(-0.33, 0.33, stream, bs, 0);
        width[b] = rng.range(0.6, 2.0, stream, bs, 1);
        omega[b] = rng.range(0.0, 3.0, stream, bs, 2);
        phase[b] = rng.range(0.0, horizon, stream, bs, 3);
        for d in 0..dim {
            centers[b][d] = rng.range(-0.5 * r, 0.5 * r, stream, bs, 4 + d as u64);
        }
    }
    let ns = grid.spatial_count();
    let mut field = GridField::zeros(*grid, FieldKind::Iterate);
    let mut xbuf = vec![0.0; dim];
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let node = level * ns + s;
            let mut u = 0.0;
            let mut g = vec![0.0; dim];
            for b in 0..NB {
                let tmod = 0.5 + 0.5 * (omega[b] * (t - phase[b])).cos();
                let mut bump = amp[b] * tmod;
                for d in 0..dim {
                    let z = (xbuf[d] - centers[b][d]) / width[b];
                    bump *= (-0.5 * z * z).exp();
                }
                u += bump;
                for d in 0..dim {
                    g[d] += bump * (-(xbuf[d] - centers[b][d]) / (width[b] * width[b]));
                }
            }
            field.u[node] = u;
            field.grad[node * dim..node * dim + dim].copy_from_slice(&g);
        }
    }
    field
}

/// Sup of the finite-difference PDE residual
/// |u_t + 1/2 Tr(a D^2 u) + H(D_x u, u, x, t)| over interior nodes, excluding
/// a boundary margin where the kernel's smoothing is below grid scale.
pub fn pde_residual(field: &GridField, problem: &Problem) -> Result<f64> {
    let grid = *field.grid();
    let ns = grid.spatial_count();
    let dim = grid.dim();
    if grid.time_levels() < 3 || grid.nodes_per_dim() < 3 {
        return Err(SolverError::GridTooSmall(
            "pde_residual needs >= 3 time levels and >= 3 nodes per dim".into(),
        ));
    }
    let h = grid.spacing();
    let dt = grid.dt();
    let horizon = grid.horizon();

    // worst lambda_max(a) over a coarse sample
    let mut lam: f64 = 0.0;
    let mut xbuf = vec![0.0; dim];
    for s in (0..ns).step_by((ns / 64).max(1)) {
        grid.spatial_coords(s, &mut xbuf);
        for &t in &[0.0, 0.5 * horizon, horizon] {
            lam = lam.max(sym_eigen_bounds(&problem.diffusion.a_at(&xbuf, t)).1);
        }
    }
    let lam = lam.max(problem.diffusion.mu_ellipticity);

    // require the kernel smoothing length >= 3h at included levels (below
    // that, centered differences cannot resolve terminal-data structure)
    let smooth_floor = 9.0 * h * h / lam;
    let mut levels: Vec<usize> = (1..grid.time_levels() - 1)
        .filter(|&j| horizon - grid.time(j) >= smooth_floor)
        .collect();
    if levels.is_empty() {
        levels = (1..grid.time_levels() - 1).collect();
    }

    // boundary margin of tail-influence width: the kernel's tail-cut radius
    // over the full horizon is how far box truncation reaches inward; fall
    // back to one diffusion length, then to the lattice interior, when the
    // margin would exclude everything
    let mut interior = vec![false; ns];
    for space_margin in [
        DEFAULT_TAIL_CUT_SIGMAS * (lam * horizon).sqrt(),
        (lam * horizon).sqrt(),
        0.0,
    ] {
        grid.for_each_spatial(|s, x| {
            let mut ok = true;
            for d in 0..dim {
                let i = grid.axis_index(s, d);
                if i == 0 || i == grid.nodes_per_dim() - 1 {
                    ok = false;
                }
                if grid.box_radius() - x[d].abs() < space_margin {
                    ok = false;
                }
            }
            interior[s] = ok;
        });
        if interior.iter().any(|&b| b) {
            break;
        }
    }

    let mut grad = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    for &j in &levels {
        let t = grid.time(j);
        let cur = field.level_u(j);
        let up = field.level_u(j + 1);
        let lo = field.level_u(j - 1);
        for s in 0..ns {
            if !interior[s] {
                continue;
            }
            grid.spatial_coords(s, &mut xbuf);
            let ut = (up[s] - lo[s]) / (2.0 * dt);
            let a = problem.diffusion.a_at(&xbuf, t);
            let mut tr = 0.0;
            for d in 0..dim {
                tr += a[(d, d)] * grid.fd_second(cur, s, d);
                for e in (d + 1)..dim {
                    tr += 2.0 * a[(d, e)] * grid.fd_mixed(cur, s, d, e);
                }
            }
            for d in 0..dim {
                grad[d] = grid.fd_axis(cur, s, d);
            }
            let hval = problem.hamiltonian.eval(&grad, cur[s], &xbuf, t)?;
            let res = (ut + 0.5 * tr + hval).abs();
            if res > worst {
                worst = res;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{Hamiltonian, HamiltonianSpec};
    use crate::kernel::DiffusionSpec;
    use crate::problem::Suite;
    use nalgebra::DMatrix;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn const_problem(h_value: f64, beta_value: f64, grid: Grid) -> Problem {
        Problem::new(
            "const",
            1,
            grid.horizon(),
            DiffusionSpec::constant(DMatrix::identity(1, 1)).unwrap(),
            Hamiltonian::Generic(
                HamiltonianSpec::new(h_value.abs().max(1.0), BTreeMap::new(), move |_, _, _, _| {
                    h_value
                })
                .unwrap(),
            ),
            Arc::new(move |_| beta_value),
            Suite::A,
            grid,
        )
        .unwrap()
    }

    fn small_grid() -> Grid {
        Grid::new(1, 8.0, 65, 17, 1.0).unwrap()
    }

    #[test]
    fn kappa_norm_examples() {
        let grid = small_grid();
        let mut f = GridField::zeros(grid, FieldKind::Iterate);
        f.u.iter_mut().for_each(|v| *v = 1.0);
        assert!((kappa_norm(&f, 3.0) - 1.0).abs() < 1e-14);
        assert!((kappa_norm(&f, 0.0) - 1.0).abs() < 1e-14);

        // weight cancellation: u = e^{kappa (T-t)} has weighted sup 1
        let kappa = 2.0;
        let ns = grid.spatial_count();
        for level in 0..grid.time_levels() {
            let w = (kappa * (grid.horizon() - grid.time(level))).exp();
            for s in 0..ns {
                f.u[level * ns + s] = w;
            }
        }
        assert!((kappa_norm(&f, kappa) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_norm_axioms_on_random_fields() {
        let grid = Grid::new(1, 4.0, 17, 5, 1.0).unwrap();
        let rng = CounterRng::new(91);
        for case in 0..100u64 {
            let f = random_bump_field(&grid, &rng, case * 3);
            let g = random_bump_field(&grid, &rng, case * 3 + 1);
            let kappa = rng.range(0.0, 16.0, case, 9, 0);
            // homogeneity
            let mut f2 = f.clone();
            let lam = rng.range(-3.0, 3.0, case, 9, 1);
            f2.u.iter_mut().for_each(|v| *v *= lam);
            f2.grad.iter_mut().for_each(|v| *v *= lam);
            assert!(
                (kappa_norm(&f2, kappa) - lam.abs() * kappa_norm(&f, kappa)).abs()
                    < 1e-12 * (1.0 + kappa_norm(&f, kappa)),
            );
            // triangle inequality
            let mut sum = f.clone();
            sum.u.iter_mut().zip(&g.u).for_each(|(a, b)| *a += b);
            sum.grad.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += b);
            assert!(
                kappa_norm(&sum, kappa)
                    <= kappa_norm(&f, kappa) + kappa_norm(&g, kappa) + 1e-12
            );
            // weight monotonicity in kappa
            let k2 = kappa + rng.range(0.1, 8.0, case, 9, 2);
            assert!(kappa_norm(&f, kappa) >= kappa_norm(&f, k2) - 1e-14);
        }
    }

    #[test]
    fn apply_t_reproduces_constant_terminal() {
        let problem = const_problem(0.0, 2.0, small_grid());
        let params = KernelParams::for_grid(&problem.grid);
        let f0 = initial_iterate(&problem);
        let out = apply_t(&f0, &problem, &params).unwrap();
        for (lvl, s) in [(0usize, 32usize), (8, 10), (15, 60)] {
            let node = lvl * problem.grid.spatial_count() + s;
            assert!(
                (out.u[node] - 2.0).abs() < 1e-6,
                "u at ({lvl},{s}) = {}",
                out.u[node]
            );
            assert!(out.grad_norm(lvl, s) < 1e-6);
        }
    }

    #[test]
    fn apply_t_integrates_constant_source() {
        let problem = const_problem(3.0, 0.0, small_grid());
        let params = KernelParams::for_grid(&problem.grid);
        let f0 = initial_iterate(&problem);
        let out = apply_t(&f0, &problem, &params).unwrap();
        let grid = problem.grid;
        for lvl in [0usize, 5, 12] {
            let expect = 3.0 * (grid.horizon() - grid.time(lvl));
            let node = lvl * grid.spatial_count() + 32;
            assert!(
                (out.u[node] - expect).abs() < 1e-6,
                "level {lvl}: {} vs {expect}",
                out.u[node]
            );
        }
    }

    #[test]
    fn linear_fixed_point_is_stationary() {
        let grid = small_grid();
        let problem = const_problem(1.5, 0.5, grid);
        let params = KernelParams::for_grid(&grid);
        // u*(x,t) = b + c (T - t)
        let ns = grid.spatial_count();
        let mut star = GridField::zeros(grid, FieldKind::Iterate);
        for lvl in 0..grid.time_levels() {
            let v = 0.5 + 1.5 * (grid.horizon() - grid.time(lvl));
            for s in 0..ns {
                star.u[lvl * ns + s] = v;
            }
        }
        let image = apply_t(&star, &problem, &params).unwrap();
        let dev = kappa_norm(&image.sub(&star), 1.0);
        assert!(dev <= 1e-4, "fixed point deviation {dev}");
    }

    #[test]
    fn iterate_linear_problem_two_steps() {
        let problem = const_problem(1.0, 0.5, small_grid());
        let params = KernelParams::for_grid(&problem.grid);
        let (field, trace) = iterate(&problem, 8.0, 1e-4, 20, &params).unwrap();
        assert!(trace.converged);
        assert!(trace.iterations <= 2, "iterations {}", trace.iterations);
        let grid = problem.grid;
        let ns = grid.spatial_count();
        let mut worst: f64 = 0.0;
        for lvl in 0..grid.time_levels() {
            let expect = 0.5 + (grid.horizon() - grid.time(lvl));
            for s in 0..ns {
                worst = worst.max((field.u[lvl * ns + s] - expect).abs());
            }
        }
        assert!(worst <= 1e-4, "sup error {worst}");
    }

    #[test]
    fn iterate_with_infinite_tol_stops_immediately() {
        let problem = const_problem(1.0, 0.5, small_grid());
        let params = KernelParams::for_grid(&problem.grid);
        let (_, trace) = iterate(&problem, 8.0, f64::INFINITY, 20, &params).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn iterate_sine_hamiltonian_contracts() {
        let grid = Grid::new(1, 8.0, 65, 33, 1.0).unwrap();
        let problem = Problem::new(
            "sine",
            1,
            1.0,
            DiffusionSpec::constant(DMatrix::identity(1, 1)).unwrap(),
            Hamiltonian::Generic(
                HamiltonianSpec::new(1.0, BTreeMap::new(), |_, u, _, _| 0.5 * u.sin()).unwrap(),
            ),
            Arc::new(|_| 0.0),
            Suite::A,
            grid,
        )
        .unwrap();
        let params = KernelParams::for_grid(&grid);
        let (_, trace) = iterate(&problem, 8.0, 1e-10, 30, &params).unwrap();
        assert!(trace.converged || trace.deltas.len() >= 5);
        for r in trace.ratios.iter().take(5) {
            assert!(*r < 1.0, "non-contracting ratio {r}");
        }
    }

    #[test]
    fn contraction_estimate_zero_for_constant_operator() {
        let problem = const_problem(2.0, 0.3, Grid::new(1, 8.0, 33, 9, 1.0).unwrap());
        let params = KernelParams::for_grid(&problem.grid);
        let est = estimate_contraction(&problem, 4.0, 3, &params, 7).unwrap();
        assert!(est < 1e-12, "estimate {est}");
    }

    #[test]
    fn contraction_estimate_decreases_in_kappa() {
        let grid = Grid::new(1, 8.0, 33, 17, 1.0).unwrap();
        let problem = Problem::new(
            "lip",
            1,
            1.0,
            DiffusionSpec::constant(DMatrix::identity(1, 1)).unwrap(),
            Hamiltonian::Generic(
                HamiltonianSpec::new(1.0, BTreeMap::new(), |p, u, _, _| {
                    0.5 * u.sin() + 0.5 * p[0].sin()
                })
                .unwrap(),
            ),
            Arc::new(|_| 0.0),
            Suite::A,
            grid,
        )
        .unwrap();
        let params = KernelParams::for_grid(&grid);
        let lo = estimate_contraction(&problem, 1.0, 4, &params, 13).unwrap();
        let hi = estimate_contraction(&problem, 64.0, 4, &params, 13).unwrap();
        assert!(hi < lo, "kappa=64 estimate {hi} not below kappa=1 {lo}");
    }

    #[test]
    fn residual_exact_for_linear_solution() {
        let grid = small_grid();
        let problem = const_problem(1.5, 0.5, grid);
        let ns = grid.spatial_count();
        let mut star = GridField::zeros(grid, FieldKind::Solution);
        for lvl in 0..grid.time_levels() {
            let v = 0.5 + 1.5 * (grid.horizon() - grid.time(lvl));
            for s in 0..ns {
                star.u[lvl * ns + s] = v;
            }
        }
        let res = pde_residual(&star, &problem).unwrap();
        assert!(res <= 1e-6, "residual {res}");
    }

    #[test]
    fn residual_detects_parabola() {
        let grid = small_grid();
        let problem = const_problem(0.0, 0.0, grid);
        let ns = grid.spatial_count();
        let mut f = GridField::zeros(grid, FieldKind::Solution);
        grid.for_each_spatial(|s, x| {
            for lvl in 0..grid.time_levels() {
                f.u[lvl * ns + s] = x[0] * x[0];
            }
        });
        let res = pde_residual(&f, &problem).unwrap();
        assert!((res - 1.0).abs() < 1e-9, "residual {res}");
    }

    #[test]
    fn residual_requires_grid() {
        let grid = Grid::new(1, 1.0, 9, 2, 1.0).unwrap();
        let problem = const_problem(0.0, 0.0, grid);
        let f = GridField::zeros(grid, FieldKind::Solution);
        assert!(matches!(
            pde_residual(&f, &problem),
            Err(SolverError::GridTooSmall(_))
        ));
    }
}
