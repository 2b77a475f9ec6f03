use semilinear::*;

// Crank-Nicolson reference (backward in time via tau = T - t), Dirichlet
// boundary pinned at beta; inner Picard iterations on the nonlinear term.
fn crank_nicolson(
    problem: &Problem, nx: usize, nt: usize,
) -> (Vec<Vec<f64>>, f64, f64) {
    let r = problem.grid.box_radius();
    let h = 2.0 * r / (nx - 1) as f64;
    let dtau = problem.horizon / (nt - 1) as f64;
    let a = problem.diffusion.a_at(&[0.0], 0.0)[(0, 0)];
    let xs: Vec<f64> = (0..nx).map(|i| -r + i as f64 * h).collect();
    let mut v: Vec<f64> = xs.iter().map(|&x| (problem.terminal)(&[x])).collect();
    let mut levels = vec![v.clone()];
    let lam = 0.5 * a * dtau / (h * h);
    // tridiagonal (I - lam/2 D2) factorization constants
    let n_in = nx - 2;
    let mut du = vec![0.0; n_in];
    let mut dd = vec![0.0; n_in];
    let mut rhs = vec![0.0; n_in];
    for m in 1..nt {
        let t_new = problem.horizon - m as f64 * dtau;
        let t_old = t_new + dtau;
        let mut w = v.clone();
        for _inner in 0..6 {
            // rhs = v + lam/2 D2 v + dtau/2 (N(v,t_old) + N(w,t_new))
            for i in 1..nx - 1 {
                let d2v = v[i + 1] - 2.0 * v[i] + v[i - 1];
                let pxo = (v[i + 1] - v[i - 1]) / (2.0 * h);
                let no = problem.hamiltonian.eval(&[pxo], v[i], &[xs[i]], t_old).unwrap();
                let pxn = (w[i + 1] - w[i - 1]) / (2.0 * h);
                let nn = problem.hamiltonian.eval(&[pxn], w[i], &[xs[i]], t_new).unwrap();
                rhs[i - 1] = v[i] + 0.5 * lam * d2v + 0.5 * dtau * (no + nn);
            }
            rhs[0] += 0.5 * lam * v[0];
            rhs[n_in - 1] += 0.5 * lam * v[nx - 1];
            // Thomas solve of (1+lam) main, -lam/2 off
            for i in 0..n_in {
                dd[i] = 1.0 + lam;
                du[i] = -0.5 * lam;
            }
            for i in 1..n_in {
                let mfac = -0.5 * lam / dd[i - 1];
                dd[i] -= mfac * du[i - 1];
                rhs[i] -= mfac * rhs[i - 1];
            }
            let mut sol = vec![0.0; n_in];
            sol[n_in - 1] = rhs[n_in - 1] / dd[n_in - 1];
            for i in (0..n_in - 1).rev() {
                sol[i] = (rhs[i] - du[i] * sol[i + 1]) / dd[i];
            }
            for i in 1..nx - 1 {
                w[i] = sol[i - 1];
            }
            w[0] = v[0];
            w[nx - 1] = v[nx - 1];
        }
        v = w;
        levels.push(v.clone());
    }
    levels.reverse(); // levels[j] at t_j = j * dt ... with nt levels
    (levels, h, dtau)
}

fn main() {
    burgers_vs_cn();
    robust_vs_cn();
    let base = builtin("robust_game").unwrap();
    let fam = CutoffFamily::new(8.0, 8.0, 8.0).unwrap();
    let loc = localize_problem(&base, &fam).unwrap();
    // fine CN: 1025 x 2049, downsample to the default 129 x 65 and measure
    // the same interior FD residual
    let (cn, _, _) = crank_nicolson(&loc.problem, 1025, 2049);
    let grid = base.grid;
    let (nsub_x, nsub_t) = (8usize, 32usize); // 1025 = 8*128+1, 2049 = 32*64+1
    let ns = grid.spatial_count();
    let h = grid.spacing();
    let dt = grid.dt();
    let mut worst = (0.0f64, 0usize, 0usize);
    for j in 1..64 {
        if 1.0 - grid.time(j) < 9.0 * h * h { continue; }
        for s in 1..ns - 1 {
            let x = grid.coord(s);
            if x.abs() > 2.0 { continue; }
            let u = |jj: usize, ss: usize| cn[jj * nsub_t][ss * nsub_x];
            let ut = (u(j + 1, s) - u(j - 1, s)) / (2.0 * dt);
            let uxx = (u(j, s + 1) - 2.0 * u(j, s) + u(j, s - 1)) / (h * h);
            let ux = (u(j, s + 1) - u(j, s - 1)) / (2.0 * h);
            let hv = loc.problem.hamiltonian.eval(&[ux], u(j, s), &[x], grid.time(j)).unwrap();
            let r = (ut + 0.5 * uxx + hv).abs();
            if r > worst.0 { worst = (r, j, s); }
        }
    }
    println!("CN reference residual on default grid, |x|<=2: {:.3e} at t={:.3} x={:.3}",
        worst.0, grid.time(worst.1), grid.coord(worst.2));
}


fn burgers_vs_cn() {
    let base = builtin("burgers").unwrap();
    let config = RunConfig::default();
    let result = solve(&base, &config).unwrap();
    // CN on the localized final-rung problem's equation == plain burgers on
    // the grid (rung 8 cutoffs are identities on the box for the data range)
    let fam = CutoffFamily::new(8.0, 8.0, 8.0).unwrap();
    let loc = localize_problem(&base, &fam).unwrap();
    let (cn, _, _) = crank_nicolson(&loc.problem, 513, 1025);
    let grid = base.grid;
    let (sx, st) = (4usize, 16usize); // 513 = 4*128+1, 1025 = 16*64+1
    let ns = grid.spatial_count();
    let mut sup = 0.0f64;
    let mut sup_at = (0usize, 0usize);
    for j in 0..grid.time_levels() {
        for s in 0..ns {
            if grid.coord(s).abs() > 4.0 { continue; }
            let d = (result.solution.u[j * ns + s] - cn[j * st][s * sx]).abs();
            if d > sup { sup = d; sup_at = (j, s); }
        }
    }
    println!("burgers vs CN sup on [-4,4]x[0,T]: {sup:.3e} at t={:.3} x={:.3}",
        grid.time(sup_at.0), grid.coord(sup_at.1));
}

fn robust_vs_cn() {
    let base = builtin("robust_game").unwrap();
    let config = RunConfig::default();
    let result = solve(&base, &config).unwrap();
    let fam = CutoffFamily::new(8.0, 8.0, 8.0).unwrap();
    let loc = localize_problem(&base, &fam).unwrap();
    let (cn, _, _) = crank_nicolson(&loc.problem, 513, 1025);
    let grid = base.grid;
    let (sx, st) = (4usize, 16usize);
    let ns = grid.spatial_count();
    let mut sup = 0.0f64;
    for j in 0..grid.time_levels() {
        for s in 0..ns {
            if grid.coord(s).abs() > 4.0 { continue; }
            let d = (result.solution.u[j * ns + s] - cn[j * st][s * sx]).abs();
            if d > sup { sup = d; }
        }
    }
    println!("robust_game vs CN sup on [-4,4]x[0,T]: {sup:.3e}");
}
