//! Hamiltonian evaluation: generic H(p,u,x,t), Isaacs max-min over
//! discretized compact control sets, assumption-suite validation, and the
//! decomposition of H along a candidate solution into linear coefficients
//! (b*, h*, f*).

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, SolverError};
use crate::grid::{Grid, GridField};
use crate::kernel::sym_eigen_bounds;
use crate::problem::{Problem, Suite};
use crate::rng::CounterRng;

/// Division guard for the difference-quotient decomposition.
pub const EPS_DIV: f64 = 1e-10;

#[derive(Clone)]
pub struct HamiltonianSpec {
    eval: Arc<dyn Fn(&[f64], f64, &[f64], f64) -> f64 + Send + Sync>,
    pub growth_k: f64,
    /// K_{m,n} constants: bound on |H(0,u,x,t)| and the p-Lipschitz constant
    /// over |u| <= m, |x| <= n.
    pub lipschitz_table: BTreeMap<(u32, u32), f64>,
}

impl HamiltonianSpec {
    pub fn new(
        growth_k: f64,
        lipschitz_table: BTreeMap<(u32, u32), f64>,
        eval: impl Fn(&[f64], f64, &[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(growth_k > 0.0) {
            return Err(SolverError::InvalidParameter(
                "growth constant K must be strictly positive".into(),
            ));
        }
        if lipschitz_table.values().any(|k| !(*k > 0.0)) {
            return Err(SolverError::InvalidParameter(
                "lipschitz table entries must be strictly positive".into(),
            ));
        }
        Ok(HamiltonianSpec {
            eval: Arc::new(eval),
            growth_k,
            lipschitz_table,
        })
    }

    pub fn raw_eval(&self, p: &[f64], u: f64, x: &[f64], t: f64) -> f64 {
        (self.eval)(p, u, x, t)
    }
}

/// Declared constants for the C4/D4 bound checks.
#[derive(Debug, Clone, Copy)]
pub struct IsaacsBounds {
    pub growth_a: f64,
    pub growth_b: f64,
    pub f_bound: Option<f64>,
    pub h_upper: Option<f64>,
}

#[derive(Clone)]
pub struct IsaacsSpec {
    pub d_points: Vec<Vec<f64>>,
    pub gamma_points: Vec<Vec<f64>>,
    i_fn: Arc<dyn Fn(&[f64], f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    h_fn: Arc<dyn Fn(&[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    f_fn: Arc<dyn Fn(&[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    pub bounds: IsaacsBounds,
}

impl IsaacsSpec {
    pub fn new(
        d_points: Vec<Vec<f64>>,
        gamma_points: Vec<Vec<f64>>,
        bounds: IsaacsBounds,
        i_fn: impl Fn(&[f64], f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        h_fn: impl Fn(&[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        f_fn: impl Fn(&[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if d_points.is_empty() || gamma_points.is_empty() {
            return Err(SolverError::InvalidParameter(
                "control sets D and Gamma must be nonempty".into(),
            ));
        }
        Ok(IsaacsSpec {
            d_points,
            gamma_points,
            i_fn: Arc::new(i_fn),
            h_fn: Arc::new(h_fn),
            f_fn: Arc::new(f_fn),
            bounds,
        })
    }

    pub fn i_at(&self, x: &[f64], t: f64, delta: &[f64], eta: &[f64]) -> Vec<f64> {
        (self.i_fn)(x, t, delta, eta)
    }
    pub fn h_at(&self, x: &[f64], t: f64, delta: &[f64], eta: &[f64]) -> f64 {
        (self.h_fn)(x, t, delta, eta)
    }
    pub fn f_at(&self, x: &[f64], t: f64, delta: &[f64], eta: &[f64]) -> f64 {
        (self.f_fn)(x, t, delta, eta)
    }

    /// Wrap all coefficient functions with an x-dependent factor (cutoff
    /// truncation); h is wrapped only when `truncate_h` is set.
    pub(crate) fn truncated(
        &self,
        factor: impl Fn(&[f64]) -> f64 + Send + Sync + Clone + 'static,
        truncate_h: bool,
    ) -> IsaacsSpec {
        let fi = factor.clone();
        let inner_i = Arc::clone(&self.i_fn);
        let i_fn = move |x: &[f64], t: f64, d: &[f64], g: &[f64]| {
            let c = fi(x);
            let mut v = inner_i(x, t, d, g);
            for vi in &mut v {
                *vi *= c;
            }
            v
        };
        let ff = factor.clone();
        let inner_f = Arc::clone(&self.f_fn);
        let f_fn = move |x: &[f64], t: f64, d: &[f64], g: &[f64]| ff(x) * inner_f(x, t, d, g);
        let inner_h = Arc::clone(&self.h_fn);
        let h_fn: Arc<dyn Fn(&[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync> = if truncate_h {
            let fh = factor;
            Arc::new(move |x: &[f64], t: f64, d: &[f64], g: &[f64]| fh(x) * inner_h(x, t, d, g))
        } else {
            inner_h
        };
        IsaacsSpec {
            d_points: self.d_points.clone(),
            gamma_points: self.gamma_points.clone(),
            i_fn: Arc::new(i_fn),
            h_fn,
            f_fn: Arc::new(f_fn),
            bounds: self.bounds,
        }
    }
}

#[derive(Clone)]
pub enum Hamiltonian {
    Generic(HamiltonianSpec),
    Isaacs(IsaacsSpec),
}

impl Hamiltonian {
    /// Evaluate H(p, u, x, t); Isaacs variants take the max-min value.
    pub fn eval(&self, p: &[f64], u: f64, x: &[f64], t: f64) -> Result<f64> {
        match self {
            Hamiltonian::Generic(spec) => eval_generic(spec, p, u, x, t),
            Hamiltonian::Isaacs(spec) => eval_isaacs(spec, p, u, x, t).map(|s| s.value),
        }
    }
}

/// Saddle value with the selected control indices; `eta_star` is the
/// minimizer for the winning `delta_star`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaddleValue {
    pub value: f64,
    pub delta_star: usize,
    pub eta_star: usize,
}

pub fn eval_generic(
    spec: &HamiltonianSpec,
    p: &[f64],
    u: f64,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let v = spec.raw_eval(p, u, x, t);
    if !v.is_finite() {
        return Err(SolverError::NonFinite(format!(
            "H(p={p:?}, u={u}, x={x:?}, t={t}) = {v}"
        )));
    }
    Ok(v)
}

/// Exhaustive max over D of min over Gamma of i·p + h·u + f; ties broken by
/// lowest list index at both levels.
pub fn eval_isaacs(
    spec: &IsaacsSpec,
    p: &[f64],
    u: f64,
    x: &[f64],
    t: f64,
) -> Result<SaddleValue> {
    let mut best: Option<SaddleValue> = None;
    for (di, delta) in spec.d_points.iter().enumerate() {
        let mut inner: Option<(f64, usize)> = None;
        for (gi, eta) in spec.gamma_points.iter().enumerate() {
            let ivec = spec.i_at(x, t, delta, eta);
            let h = spec.h_at(x, t, delta, eta);
            let f = spec.f_at(x, t, delta, eta);
            let mut val = h * u + f;
            for (pd, id) in p.iter().zip(ivec.iter()) {
                val += pd * id;
            }
            if !val.is_finite() {
                return Err(SolverError::NonFinite(format!(
                    "isaacs coefficients at delta index {di}, eta index {gi}"
                )));
            }
            match inner {
                Some((cur, _)) if val >= cur => {}
                _ => inner = Some((val, gi)),
            }
        }
        let (val, gi) = inner.expect("gamma points nonempty");
        match best {
            Some(b) if val <= b.value => {}
            _ => {
                best = Some(SaddleValue {
                    value: val,
                    delta_star: di,
                    eta_star: gi,
                })
            }
        }
    }
    Ok(best.expect("d points nonempty"))
}

/// Min over Gamma of max over D — reported for the max-min <= min-max gap.
pub fn eval_isaacs_minmax(spec: &IsaacsSpec, p: &[f64], u: f64, x: &[f64], t: f64) -> Result<f64> {
    let mut outer: Option<f64> = None;
    for eta in &spec.gamma_points {
        let mut inner: Option<f64> = None;
        for delta in &spec.d_points {
            let ivec = spec.i_at(x, t, delta, eta);
            let mut val = spec.h_at(x, t, delta, eta) * u + spec.f_at(x, t, delta, eta);
            for (pd, id) in p.iter().zip(ivec.iter()) {
                val += pd * id;
            }
            if !val.is_finite() {
                return Err(SolverError::NonFinite("isaacs coefficients".into()));
            }
            inner = Some(inner.map_or(val, |c: f64| c.max(val)));
        }
        let v = inner.unwrap();
        outer = Some(outer.map_or(v, |c: f64| c.min(v)));
    }
    Ok(outer.unwrap())
}

/// Linear coefficients (b*, h*, f*) extracted along a field, satisfying
/// H(p,u,x,t) = sum_i b_i p_i + h u + f at every node with no clipped
/// denominator.
pub struct LinearCoeffs {
    pub grid: Grid,
    /// node-major, dim components per node
    pub b: Vec<f64>,
    pub h: Vec<f64>,
    pub f: Vec<f64>,
    pub clipped_nodes: usize,
}

pub fn decompose_to_linear(hamiltonian: &Hamiltonian, field: &GridField) -> Result<LinearCoeffs> {
    let grid = *field.grid();
    let dim = grid.dim();
    let ns = grid.spatial_count();
    let nodes = grid.node_count();
    let mut b = vec![0.0; nodes * dim];
    let mut h = vec![0.0; nodes];
    let mut f = vec![0.0; nodes];
    let mut clipped_nodes = 0usize;

    let zero_p = vec![0.0; dim];
    let mut pbuf = vec![0.0; dim];
    let mut xbuf = vec![0.0; dim];
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let node = level * ns + s;
            let u = field.u[node];
            let p = field.grad_at(level, s);

            let f0 = hamiltonian.eval(&zero_p, 0.0, &xbuf, t)?;
            f[node] = f0;
            let mut node_clipped = false;

            let h_at_u = hamiltonian.eval(&zero_p, u, &xbuf, t)?;
            if u.abs() > EPS_DIV {
                h[node] = (h_at_u - f0) / u;
            } else {
                h[node] = 0.0;
                if u != 0.0 {
                    node_clipped = true;
                }
            }

            // H^i keeps gradient coordinates 1..i, zeroes i+1..N.
            pbuf.iter_mut().for_each(|v| *v = 0.0);
            let mut prev = h_at_u;
            for d in 0..dim {
                pbuf[d] = p[d];
                let cur = hamiltonian.eval(&pbuf, u, &xbuf, t)?;
                if p[d].abs() > EPS_DIV {
                    b[node * dim + d] = (cur - prev) / p[d];
                } else {
                    b[node * dim + d] = 0.0;
                    if p[d] != 0.0 {
                        node_clipped = true;
                    }
                }
                prev = cur;
            }
            if node_clipped {
                clipped_nodes += 1;
            }
        }
    }
    Ok(LinearCoeffs {
        grid,
        b,
        h,
        f,
        clipped_nodes,
    })
}

/// Finite sample set over which the assumption inequalities are checked.
#[derive(Debug, Clone)]
pub struct ValidationLattice {
    pub xs: Vec<Vec<f64>>,
    pub ts: Vec<f64>,
    pub us: Vec<f64>,
    pub p_mags: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

impl ValidationLattice {
    pub fn default_for(grid: &Grid, seed: u64) -> Self {
        let rng = CounterRng::new(seed);
        let n_axis = 9usize.min(grid.nodes_per_dim());
        let stride = (grid.nodes_per_dim() - 1) / (n_axis - 1).max(1);
        let axis: Vec<f64> = (0..n_axis).map(|k| grid.coord(k * stride)).collect();
        let mut xs = Vec::new();
        match grid.dim() {
            1 => {
                for &a in &axis {
                    xs.push(vec![a]);
                }
            }
            _ => {
                // tensor sample of the first two axes, other axes at 0
                for &a in &axis {
                    for &b in &axis {
                        let mut x = vec![0.0; grid.dim()];
                        x[0] = a;
                        x[1] = b;
                        xs.push(x);
                    }
                }
            }
        }
        let t_end = grid.horizon();
        let ts = vec![0.0, 0.25 * t_end, 0.5 * t_end, 0.75 * t_end, t_end];
        let us = vec![
            0.0, 0.5, -0.5, 1.0, -1.0, 2.0, -2.0, 4.0, -4.0, 10.0, -10.0, 20.0, -20.0,
        ];
        let p_mags = vec![0.0, 0.5, 1.0, 2.0, 4.0, 10.0, 20.0];
        let mut directions = Vec::new();
        for d in 0..grid.dim() {
            let mut e = vec![0.0; grid.dim()];
            e[d] = 1.0;
            directions.push(e.clone());
            e[d] = -1.0;
            directions.push(e);
        }
        for k in 0..8u64 {
            let mut v: Vec<f64> = (0..grid.dim())
                .map(|d| rng.normal(k, d as u64, 0))
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-12 {
                v.iter_mut().for_each(|a| *a /= norm);
                directions.push(v);
            }
        }
        ValidationLattice {
            xs,
            ts,
            us,
            p_mags,
            directions,
        }
    }

    fn p_probes(&self, dim: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for &m in &self.p_mags {
            for dir in &self.directions {
                if dir.len() == dim {
                    out.push(dir.iter().map(|d| d * m).collect());
                }
            }
            if m == 0.0 {
                // a single zero probe is enough
                out.truncate(out.len().saturating_sub(self.directions.len() - 1));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Positive margin = slack against the inequality; for informational
    /// checks this carries the measured value.
    pub worst_margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub suite: Suite,
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = format!("suite {}: ", self.suite.name());
        for c in &self.checks {
            out.push_str(&format!(
                "[{} {} margin={:.3e}] ",
                c.name,
                if c.passed { "pass" } else { "FAIL" },
                c.worst_margin
            ));
        }
        out
    }
}

fn spectral_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    let a = m * m.transpose();
    sym_eigen_bounds(&a).1.max(0.0).sqrt()
}

struct CheckAcc {
    name: String,
    worst: f64,
    at: String,
    failed_eval: Option<String>,
}

impl CheckAcc {
    fn new(name: &str) -> Self {
        CheckAcc {
            name: name.to_string(),
            worst: f64::INFINITY,
            at: String::new(),
            failed_eval: None,
        }
    }

    fn update(&mut self, margin: f64, loc: impl Fn() -> String) {
        if margin < self.worst {
            self.worst = margin;
            self.at = loc();
        }
    }

    fn eval_failed(&mut self, msg: String) {
        if self.failed_eval.is_none() {
            self.failed_eval = Some(msg);
        }
    }

    fn finish(self) -> AssumptionCheck {
        if let Some(msg) = self.failed_eval {
            return AssumptionCheck {
                name: self.name,
                passed: false,
                worst_margin: f64::NEG_INFINITY,
                detail: msg,
            };
        }
        AssumptionCheck {
            name: self.name,
            passed: self.worst >= 0.0,
            worst_margin: self.worst,
            detail: self.at,
        }
    }
}

fn info_check(name: &str, value: f64, finite_required: bool) -> AssumptionCheck {
    AssumptionCheck {
        name: name.to_string(),
        passed: !finite_required || value.is_finite(),
        worst_margin: value,
        detail: "measured value (no declared bound)".into(),
    }
}

/// Check every inequality of the chosen suite over the lattice. Failures are
/// report entries, never errors.
pub fn validate_assumptions(
    problem: &Problem,
    suite: Suite,
    lattice: &ValidationLattice,
) -> ValidationReport {
    let mut checks = Vec::new();

    checks.push(check_ellipticity(problem, lattice, suite));
    match suite {
        Suite::A => {
            checks.push(check_sigma_bound(problem, lattice, problem.diffusion.sigma_bound, "A1.sigma_bound"));
            let (sup_beta, lip_beta) = beta_stats(problem, lattice);
            checks.push(info_check("A2.beta_sup", sup_beta, true));
            checks.push(info_check("A2.beta_lipschitz", lip_beta, true));
            let k = growth_constant(problem);
            checks.push(check_growth(problem, lattice, k));
            checks.push(check_lipschitz(problem, lattice, k));
        }
        Suite::B => {
            match &problem.hamiltonian {
                Hamiltonian::Generic(spec) => {
                    checks.push(check_h00(problem, lattice, spec.growth_k));
                    checks.push(check_one_sided_u(problem, lattice, spec.growth_k));
                    checks.push(check_b2_table(problem, lattice, spec));
                }
                Hamiltonian::Isaacs(_) => {
                    let k = growth_constant(problem);
                    checks.push(check_h00(problem, lattice, k));
                    checks.push(check_one_sided_u(problem, lattice, k));
                }
            }
            let (sup_beta, lip_beta) = beta_stats(problem, lattice);
            checks.push(info_check("B3.beta_sup", sup_beta, true));
            checks.push(info_check("B3.beta_local_lipschitz", lip_beta, true));
        }
        Suite::C => match &problem.hamiltonian {
            Hamiltonian::Isaacs(spec) => {
                checks.push(coeff_lipschitz_check(spec, lattice, "C2.coeff_local_lipschitz"));
                let (sup_beta, _) = beta_stats(problem, lattice);
                checks.push(info_check("C3.beta_sup", sup_beta, true));
                checks.push(check_f_bound(spec, lattice, "C4.f_bound"));
                checks.push(check_h_upper(spec, lattice, "C4.h_upper"));
            }
            Hamiltonian::Generic(_) => checks.push(AssumptionCheck {
                name: "C.requires_isaacs".into(),
                passed: false,
                worst_margin: f64::NEG_INFINITY,
                detail: "suite C applies to Isaacs Hamiltonians".into(),
            }),
        },
        Suite::D => match &problem.hamiltonian {
            Hamiltonian::Isaacs(spec) => {
                checks.push(coeff_lipschitz_check(spec, lattice, "D2.coeff_local_lipschitz"));
                let (_, lip_beta) = beta_stats(problem, lattice);
                checks.push(info_check("D3.beta_local_lipschitz", lip_beta, true));
                checks.push(check_i_growth(spec, lattice));
                checks.push(check_exp_growth(problem, spec, lattice));
                checks.push(check_sigma_bound(problem, lattice, spec.bounds.growth_b, "D4.sigma_bound"));
                checks.push(check_h_growth_or_upper(spec, lattice));
            }
            Hamiltonian::Generic(_) => checks.push(AssumptionCheck {
                name: "D.requires_isaacs".into(),
                passed: false,
                worst_margin: f64::NEG_INFINITY,
                detail: "suite D applies to Isaacs Hamiltonians".into(),
            }),
        },
    }

    ValidationReport { suite, checks }
}

/// Growth constant used for suite-A checks: declared K for generic specs,
/// derived from coefficient sups for Isaacs.
pub fn growth_constant(problem: &Problem) -> f64 {
    match &problem.hamiltonian {
        Hamiltonian::Generic(spec) => spec.growth_k,
        Hamiltonian::Isaacs(spec) => {
            // sup over small probe triple of |i|, |h|, |f| near the origin;
            // the A3 check then reports honest margins over the lattice.
            let mut k: f64 = 0.0;
            let x0 = vec![0.0; problem.dim];
            for delta in &spec.d_points {
                for eta in &spec.gamma_points {
                    let iv = spec.i_at(&x0, 0.0, delta, eta);
                    let inorm = iv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    k = k
                        .max(inorm)
                        .max(spec.h_at(&x0, 0.0, delta, eta).abs())
                        .max(spec.f_at(&x0, 0.0, delta, eta).abs());
                }
            }
            k.max(1.0)
        }
    }
}

fn check_ellipticity(problem: &Problem, lattice: &ValidationLattice, suite: Suite) -> AssumptionCheck {
    let name = format!("{}1.ellipticity", suite.name());
    let mut acc = CheckAcc::new(&name);
    let mu = problem.diffusion.mu_ellipticity;
    for x in &lattice.xs {
        for &t in &lattice.ts {
            let a = problem.diffusion.a_at(x, t);
            for xi in &lattice.directions {
                let mut quad = 0.0;
                for i in 0..problem.dim {
                    for j in 0..problem.dim {
                        quad += a[(i, j)] * xi[i] * xi[j];
                    }
                }
                let norm2: f64 = xi.iter().map(|v| v * v).sum();
                acc.update(quad - mu * norm2, || format!("x={x:?}, t={t}"));
            }
        }
    }
    acc.finish()
}

fn check_sigma_bound(
    problem: &Problem,
    lattice: &ValidationLattice,
    bound: f64,
    name: &str,
) -> AssumptionCheck {
    let mut acc = CheckAcc::new(name);
    for x in &lattice.xs {
        for &t in &lattice.ts {
            let s = problem.diffusion.sigma_at(x, t);
            acc.update(bound - spectral_norm(&s), || format!("x={x:?}, t={t}"));
        }
    }
    acc.finish()
}

fn beta_stats(problem: &Problem, lattice: &ValidationLattice) -> (f64, f64) {
    let mut sup: f64 = 0.0;
    for x in &lattice.xs {
        sup = sup.max((problem.terminal)(x).abs());
    }
    // worst difference quotient over lattice pairs
    let mut lip: f64 = 0.0;
    for (i, x) in lattice.xs.iter().enumerate() {
        for y in lattice.xs.iter().skip(i + 1) {
            let dist = x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist > 1e-12 {
                lip = lip.max(((problem.terminal)(x) - (problem.terminal)(y)).abs() / dist);
            }
        }
    }
    (sup, lip)
}

fn check_growth(problem: &Problem, lattice: &ValidationLattice, k: f64) -> AssumptionCheck {
    let mut acc = CheckAcc::new("A3.growth");
    let probes = lattice.p_probes(problem.dim);
    for x in &lattice.xs {
        for &t in &lattice.ts {
            for &u in &lattice.us {
                for p in &probes {
                    match problem.hamiltonian.eval(p, u, x, t) {
                        Ok(v) => {
                            let pn = p.iter().map(|a| a * a).sum::<f64>().sqrt();
                            acc.update(k * (1.0 + u.abs() + pn) - v.abs(), || {
                                format!("u={u}, |p|={pn}, x={x:?}")
                            });
                        }
                        Err(e) => acc.eval_failed(e.to_string()),
                    }
                }
            }
        }
    }
    acc.finish()
}

fn check_lipschitz(problem: &Problem, lattice: &ValidationLattice, k: f64) -> AssumptionCheck {
    let mut acc = CheckAcc::new("A3.lipschitz");
    let probes = lattice.p_probes(problem.dim);
    for x in &lattice.xs {
        for &t in &lattice.ts {
            for (ui, &u) in lattice.us.iter().enumerate() {
                for &ub in lattice.us.iter().skip(ui + 1) {
                    for p in &probes {
                        let (Ok(v1), Ok(v2)) = (
                            problem.hamiltonian.eval(p, u, x, t),
                            problem.hamiltonian.eval(p, ub, x, t),
                        ) else {
                            acc.eval_failed("H evaluation failed".into());
                            continue;
                        };
                        acc.update(k * (u - ub).abs() - (v1 - v2).abs(), || {
                            format!("u pair ({u},{ub}), x={x:?}")
                        });
                    }
                }
                for (pi, p1) in probes.iter().enumerate() {
                    for p2 in probes.iter().skip(pi + 1) {
                        let (Ok(v1), Ok(v2)) = (
                            problem.hamiltonian.eval(p1, u, x, t),
                            problem.hamiltonian.eval(p2, u, x, t),
                        ) else {
                            acc.eval_failed("H evaluation failed".into());
                            continue;
                        };
                        let dp = p1
                            .iter()
                            .zip(p2.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt();
                        acc.update(k * dp - (v1 - v2).abs(), || {
                            format!("p pair at u={u}, x={x:?}")
                        });
                    }
                }
            }
        }
    }
    acc.finish()
}

fn check_h00(problem: &Problem, lattice: &ValidationLattice, k: f64) -> AssumptionCheck {
    let mut acc = CheckAcc::new("B2.h00_bound");
    let zero_p = vec![0.0; problem.dim];
    for x in &lattice.xs {
        for &t in &lattice.ts {
            match problem.hamiltonian.eval(&zero_p, 0.0, x, t) {
                Ok(v) => acc.update(k - v.abs(), || format!("x={x:?}, t={t}")),
                Err(e) => acc.eval_failed(e.to_string()),
            }
        }
    }
    acc.finish()
}

fn check_one_sided_u(problem: &Problem, lattice: &ValidationLattice, k: f64) -> AssumptionCheck {
    let mut acc = CheckAcc::new("B2.one_sided_u");
    let zero_p = vec![0.0; problem.dim];
    for x in &lattice.xs {
        for &t in &lattice.ts {
            for &u in &lattice.us {
                for &ub in &lattice.us {
                    if u > ub {
                        let (Ok(v1), Ok(v2)) = (
                            problem.hamiltonian.eval(&zero_p, u, x, t),
                            problem.hamiltonian.eval(&zero_p, ub, x, t),
                        ) else {
                            acc.eval_failed("H evaluation failed".into());
                            continue;
                        };
                        acc.update(k * (u - ub) - (v1 - v2), || {
                            format!("u={u} > ubar={ub}, x={x:?}")
                        });
                    }
                }
            }
        }
    }
    acc.finish()
}

fn check_b2_table(
    problem: &Problem,
    lattice: &ValidationLattice,
    spec: &HamiltonianSpec,
) -> AssumptionCheck {
    let mut acc = CheckAcc::new("B2.local_constants");
    if spec.lipschitz_table.is_empty() {
        return AssumptionCheck {
            name: acc.name,
            passed: false,
            worst_margin: f64::NEG_INFINITY,
            detail: "suite B requires a K_{m,n} table".into(),
        };
    }
    let probes = lattice.p_probes(problem.dim);
    let zero_p = vec![0.0; problem.dim];
    for (&(m, n), &kmn) in &spec.lipschitz_table {
        let (mf, nf) = (m as f64, n as f64);
        for x in &lattice.xs {
            let xnorm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            if xnorm > nf {
                continue;
            }
            for &t in &lattice.ts {
                for &u in &lattice.us {
                    if u.abs() > mf {
                        continue;
                    }
                    match problem.hamiltonian.eval(&zero_p, u, x, t) {
                        Ok(v) => acc.update(kmn - v.abs(), || {
                            format!("|H(0,u)| at (m,n)=({m},{n}), u={u}")
                        }),
                        Err(e) => acc.eval_failed(e.to_string()),
                    }
                    for (pi, p1) in probes.iter().enumerate() {
                        for p2 in probes.iter().skip(pi + 1) {
                            let (Ok(v1), Ok(v2)) = (
                                problem.hamiltonian.eval(p1, u, x, t),
                                problem.hamiltonian.eval(p2, u, x, t),
                            ) else {
                                acc.eval_failed("H evaluation failed".into());
                                continue;
                            };
                            let dp = p1
                                .iter()
                                .zip(p2.iter())
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>()
                                .sqrt();
                            acc.update(kmn * dp - (v1 - v2).abs(), || {
                                format!("p-lipschitz at (m,n)=({m},{n}), u={u}")
                            });
                        }
                    }
                }
            }
        }
    }
    acc.finish()
}

fn for_controls(
    spec: &IsaacsSpec,
    mut body: impl FnMut(&[f64], &[f64]),
) {
    for delta in &spec.d_points {
        for eta in &spec.gamma_points {
            body(delta, eta);
        }
    }
}

fn coeff_lipschitz_check(
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
    name: &str,
) -> AssumptionCheck {
    // Local Lipschitz constants are not declared; measure the worst
    // difference quotient and require it finite.
    let mut worst: f64 = 0.0;
    for (i, x) in lattice.xs.iter().enumerate() {
        for y in lattice.xs.iter().skip(i + 1) {
            let dist = x
                .iter()
                .zip(y.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist <= 1e-12 {
                continue;
            }
            for &t in &lattice.ts {
                for_controls(spec, |delta, eta| {
                    let iv1 = spec.i_at(x, t, delta, eta);
                    let iv2 = spec.i_at(y, t, delta, eta);
                    let di = iv1
                        .iter()
                        .zip(iv2.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    let dh = (spec.h_at(x, t, delta, eta) - spec.h_at(y, t, delta, eta)).abs();
                    let df = (spec.f_at(x, t, delta, eta) - spec.f_at(y, t, delta, eta)).abs();
                    worst = worst.max(di / dist).max(dh / dist).max(df / dist);
                });
            }
        }
    }
    info_check(name, worst, true)
}

fn check_f_bound(
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
    name: &str,
) -> AssumptionCheck {
    let mut sup: f64 = 0.0;
    for x in &lattice.xs {
        for &t in &lattice.ts {
            for_controls(spec, |delta, eta| {
                sup = sup.max(spec.f_at(x, t, delta, eta).abs());
            });
        }
    }
    match spec.bounds.f_bound {
        Some(bound) => AssumptionCheck {
            name: name.to_string(),
            passed: sup <= bound,
            worst_margin: bound - sup,
            detail: format!("sup|f| = {sup}"),
        },
        None => info_check(name, sup, true),
    }
}

fn check_h_upper(
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
    name: &str,
) -> AssumptionCheck {
    let mut sup = f64::NEG_INFINITY;
    for x in &lattice.xs {
        for &t in &lattice.ts {
            for_controls(spec, |delta, eta| {
                sup = sup.max(spec.h_at(x, t, delta, eta));
            });
        }
    }
    match spec.bounds.h_upper {
        Some(bound) => AssumptionCheck {
            name: name.to_string(),
            passed: sup <= bound,
            worst_margin: bound - sup,
            detail: format!("sup h = {sup}"),
        },
        None => info_check(name, sup, true),
    }
}

fn check_i_growth(
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
) -> AssumptionCheck {
    let mut acc = CheckAcc::new("D4.i_growth");
    let b = spec.bounds.growth_b;
    for x in &lattice.xs {
        let xnorm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        for &t in &lattice.ts {
            for_controls(spec, |delta, eta| {
                let iv = spec.i_at(x, t, delta, eta);
                let inorm = iv.iter().map(|v| v * v).sum::<f64>().sqrt();
                acc.update(b * (1.0 + xnorm) - inorm, || format!("x={x:?}"));
            });
        }
    }
    acc.finish()
}

fn check_exp_growth(
    problem: &Problem,
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
) -> AssumptionCheck {
    let mut acc = CheckAcc::new("D4.exp_growth");
    let (a, b) = (spec.bounds.growth_a, spec.bounds.growth_b);
    for x in &lattice.xs {
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let beta = (problem.terminal)(x).abs();
        for &t in &lattice.ts {
            for_controls(spec, |delta, eta| {
                let f = spec.f_at(x, t, delta, eta).abs();
                acc.update(b * (a * xnorm).exp() - (f + beta), || format!("x={x:?}"));
            });
        }
    }
    acc.finish()
}

fn check_h_growth_or_upper(
    spec: &IsaacsSpec,
    lattice: &ValidationLattice,
) -> AssumptionCheck {
    let b = spec.bounds.growth_b;
    let mut margin_growth = f64::INFINITY;
    let mut margin_upper = f64::INFINITY;
    for x in &lattice.xs {
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for &t in &lattice.ts {
            for_controls(spec, |delta, eta| {
                let h = spec.h_at(x, t, delta, eta);
                margin_growth = margin_growth.min(b * (1.0 + xnorm) - h.abs());
                margin_upper = margin_upper.min(b - h);
            });
        }
    }
    let margin = margin_growth.max(margin_upper);
    AssumptionCheck {
        name: "D4.h_growth_or_upper".into(),
        passed: margin >= 0.0,
        worst_margin: margin,
        detail: format!("growth margin {margin_growth}, upper margin {margin_upper}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FieldKind, Grid};

    fn burgers_spec() -> HamiltonianSpec {
        let mut table = BTreeMap::new();
        for m in [1u32, 2, 4, 8, 16, 32] {
            for n in [1u32, 2, 4, 8, 16, 32] {
                table.insert((m, n), m as f64);
            }
        }
        HamiltonianSpec::new(4.0, table, |p, u, _, _| u * p[0]).unwrap()
    }

    #[test]
    fn eval_generic_examples() {
        let spec = burgers_spec();
        assert_eq!(eval_generic(&spec, &[2.0], 3.0, &[0.0], 0.0).unwrap(), 6.0);
        let zero = HamiltonianSpec::new(1.0, BTreeMap::new(), |_, _, _, _| 0.0).unwrap();
        assert_eq!(eval_generic(&zero, &[1.0], 5.0, &[2.0], 0.3).unwrap(), 0.0);
        let sinu = HamiltonianSpec::new(1.0, BTreeMap::new(), |p, u, _, _| p[0].sin() + u).unwrap();
        assert_eq!(eval_generic(&sinu, &[0.0], 0.0, &[0.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn eval_generic_rejects_nonfinite() {
        let bad = HamiltonianSpec::new(1.0, BTreeMap::new(), |_, _, _, _| f64::NAN).unwrap();
        assert!(matches!(
            eval_generic(&bad, &[0.0], 0.0, &[0.0], 0.0),
            Err(SolverError::NonFinite(_))
        ));
    }

    fn product_game() -> IsaacsSpec {
        IsaacsSpec::new(
            vec![vec![-1.0], vec![1.0]],
            vec![vec![-1.0], vec![1.0]],
            IsaacsBounds {
                growth_a: 1.0,
                growth_b: 1.0,
                f_bound: Some(0.0),
                h_upper: Some(0.0),
            },
            |_, _, d, g| vec![d[0] * g[0]],
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
        )
        .unwrap()
    }

    #[test]
    fn isaacs_product_example() {
        let spec = product_game();
        let s = eval_isaacs(&spec, &[2.0], 0.0, &[0.0], 0.0).unwrap();
        assert_eq!(s.value, -2.0);
        assert_eq!(s.delta_star, 0);
        assert_eq!(s.eta_star, 1);
    }

    #[test]
    fn isaacs_singleton_reduces_to_affine() {
        let spec = IsaacsSpec::new(
            vec![vec![0.5]],
            vec![vec![-0.25]],
            IsaacsBounds {
                growth_a: 1.0,
                growth_b: 1.0,
                f_bound: None,
                h_upper: None,
            },
            |_, _, d, g| vec![d[0] + g[0]],
            |_, _, d, _| d[0],
            |x, _, _, g| x[0] + g[0],
        )
        .unwrap();
        let s = eval_isaacs(&spec, &[3.0], 2.0, &[1.0], 0.0).unwrap();
        // i = 0.25, h = 0.5, f = 0.75
        assert!((s.value - (0.25 * 3.0 + 0.5 * 2.0 + 0.75)).abs() < 1e-14);
        assert_eq!((s.delta_star, s.eta_star), (0, 0));
    }

    #[test]
    fn isaacs_constant_f() {
        let spec = IsaacsSpec::new(
            vec![vec![-1.0], vec![1.0]],
            vec![vec![-1.0], vec![1.0]],
            IsaacsBounds {
                growth_a: 1.0,
                growth_b: 1.0,
                f_bound: Some(7.0),
                h_upper: Some(0.0),
            },
            |_, _, _, _| vec![0.0],
            |_, _, _, _| 0.0,
            |_, _, _, _| 7.0,
        )
        .unwrap();
        let s = eval_isaacs(&spec, &[0.0], 0.0, &[0.0], 0.0).unwrap();
        assert_eq!(s.value, 7.0);
        assert_eq!((s.delta_star, s.eta_star), (0, 0));
    }

    #[test]
    fn maxmin_leq_minmax() {
        let rng = CounterRng::new(11);
        for case in 0..200u64 {
            let nd = 1 + (rng.raw(case, 0, 0) % 6) as usize;
            let ng = 1 + (rng.raw(case, 1, 0) % 6) as usize;
            let d_points: Vec<Vec<f64>> = (0..nd)
                .map(|i| vec![rng.range(-2.0, 2.0, case, 2, i as u64)])
                .collect();
            let g_points: Vec<Vec<f64>> = (0..ng)
                .map(|i| vec![rng.range(-2.0, 2.0, case, 3, i as u64)])
                .collect();
            let (c1, c2, c3) = (
                rng.range(-1.0, 1.0, case, 4, 0),
                rng.range(-1.0, 1.0, case, 4, 1),
                rng.range(-1.0, 1.0, case, 4, 2),
            );
            let spec = IsaacsSpec::new(
                d_points,
                g_points,
                IsaacsBounds {
                    growth_a: 1.0,
                    growth_b: 10.0,
                    f_bound: None,
                    h_upper: None,
                },
                move |_, _, d, g| vec![c1 * d[0] + c2 * g[0]],
                move |_, _, d, g| c3 * d[0] * g[0],
                move |x, _, d, g| x[0].sin() + d[0] * d[0] - g[0] * g[0],
            )
            .unwrap();
            let p = [rng.range(-3.0, 3.0, case, 5, 0)];
            let u = rng.range(-2.0, 2.0, case, 5, 1);
            let x = [rng.range(-2.0, 2.0, case, 5, 2)];
            let maxmin = eval_isaacs(&spec, &p, u, &x, 0.1).unwrap().value;
            let minmax = eval_isaacs_minmax(&spec, &p, u, &x, 0.1).unwrap();
            assert!(maxmin <= minmax + 1e-12, "maxmin {maxmin} > minmax {minmax}");
        }
    }

    #[test]
    fn pure_drift_scaling_in_p() {
        let spec = IsaacsSpec::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![vec![-1.0], vec![0.5], vec![1.0]],
            IsaacsBounds {
                growth_a: 1.0,
                growth_b: 2.0,
                f_bound: Some(0.0),
                h_upper: Some(0.0),
            },
            |_, _, d, g| vec![d[0] + 0.5 * g[0]],
            |_, _, _, _| 0.0,
            |_, _, _, _| 0.0,
        )
        .unwrap();
        for &p in &[0.7, -1.3, 2.0] {
            let base = eval_isaacs(&spec, &[p], 0.0, &[0.0], 0.0).unwrap();
            for &lam in &[2.0, 5.0, 0.25] {
                let scaled = eval_isaacs(&spec, &[lam * p], 0.0, &[0.0], 0.0).unwrap();
                assert!((scaled.value - lam * base.value).abs() < 1e-12);
                assert_eq!(scaled.delta_star, base.delta_star);
                assert_eq!(scaled.eta_star, base.eta_star);
            }
        }
    }

    fn field_with(grid: Grid, u: f64, p: f64) -> GridField {
        let mut f = GridField::zeros(grid, FieldKind::Iterate);
        f.u.iter_mut().for_each(|v| *v = u);
        f.grad.iter_mut().for_each(|v| *v = p);
        f
    }

    #[test]
    fn decompose_burgers_node() {
        let grid = Grid::new(1, 2.0, 5, 3, 1.0).unwrap();
        let field = field_with(grid, 3.0, 2.0);
        let ham = Hamiltonian::Generic(burgers_spec());
        let c = decompose_to_linear(&ham, &field).unwrap();
        for node in 0..grid.node_count() {
            assert_eq!(c.f[node], 0.0);
            assert_eq!(c.h[node], 0.0);
            assert!((c.b[node] - 3.0).abs() < 1e-14);
            let recon = c.b[node] * 2.0 + c.h[node] * 3.0 + c.f[node];
            assert!((recon - 6.0).abs() < 1e-12);
        }
        assert_eq!(c.clipped_nodes, 0);
    }

    #[test]
    fn decompose_source_only_and_linear() {
        let grid = Grid::new(1, 2.0, 5, 3, 1.0).unwrap();
        let field = field_with(grid, 1.5, -0.7);
        let src = Hamiltonian::Generic(
            HamiltonianSpec::new(10.0, BTreeMap::new(), |_, _, x, t| x[0] + t).unwrap(),
        );
        let c = decompose_to_linear(&src, &field).unwrap();
        let mut xbuf = [0.0];
        for level in 0..grid.time_levels() {
            for s in 0..grid.spatial_count() {
                grid.spatial_coords(s, &mut xbuf);
                let node = level * grid.spatial_count() + s;
                assert_eq!(c.b[node], 0.0);
                assert_eq!(c.h[node], 0.0);
                assert!((c.f[node] - (xbuf[0] + grid.time(level))).abs() < 1e-14);
            }
        }

        let lin = Hamiltonian::Generic(
            HamiltonianSpec::new(10.0, BTreeMap::new(), |p, u, _, _| {
                2.5 * p[0] - 0.5 * u + 3.0
            })
            .unwrap(),
        );
        let c = decompose_to_linear(&lin, &field).unwrap();
        for node in 0..grid.node_count() {
            assert!((c.b[node] - 2.5).abs() < 1e-12);
            assert!((c.h[node] + 0.5).abs() < 1e-12);
            assert!((c.f[node] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_reconstruction_random() {
        let grid = Grid::new(2, 2.0, 5, 3, 1.0).unwrap();
        let rng = CounterRng::new(3);
        let mut field = GridField::zeros(grid, FieldKind::Iterate);
        for (i, v) in field.u.iter_mut().enumerate() {
            *v = rng.range(-2.0, 2.0, i as u64, 0, 0);
        }
        for (i, v) in field.grad.iter_mut().enumerate() {
            *v = rng.range(-2.0, 2.0, i as u64, 1, 0);
        }
        let ham = Hamiltonian::Generic(
            HamiltonianSpec::new(10.0, BTreeMap::new(), |p, u, x, t| {
                (p[0] * u).sin() + p[1] * p[1] * 0.3 + x[0] * u + t * p[0]
            })
            .unwrap(),
        );
        let c = decompose_to_linear(&ham, &field).unwrap();
        let ns = grid.spatial_count();
        let mut xbuf = [0.0; 2];
        for level in 0..grid.time_levels() {
            let t = grid.time(level);
            for s in 0..ns {
                grid.spatial_coords(s, &mut xbuf);
                let node = level * ns + s;
                let p = field.grad_at(level, s);
                let u = field.u[node];
                let recon =
                    c.b[node * 2] * p[0] + c.b[node * 2 + 1] * p[1] + c.h[node] * u + c.f[node];
                let direct = ham.eval(p, u, &xbuf, t).unwrap();
                assert!(
                    (recon - direct).abs() <= 1e-9 * (1.0 + direct.abs()),
                    "reconstruction off at node {node}: {recon} vs {direct}"
                );
            }
        }
    }
}
