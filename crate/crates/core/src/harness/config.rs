//! Problem configuration files: flat key-value text with sectioned blocks
//! (`[problem] [diffusion] [hamiltonian] [controls] [terminal] [grid] [run]`)
//! and inline coefficient expressions.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Result, SolverError};
use crate::expr::{parse_expr, EvalEnv, Expr, VarContext, VarRef};
use crate::grid::Grid;
use crate::hamiltonian::{Hamiltonian, HamiltonianSpec, IsaacsBounds, IsaacsSpec};
use crate::harness::solve::KappaPolicy;
use crate::kernel::DiffusionSpec;
use crate::problem::{Problem, Suite};

#[derive(Debug, Clone, Default)]
pub struct RunOverrides {
    pub kappa: Option<KappaPolicy>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub mc_paths: Option<usize>,
    pub mc_dt: Option<f64>,
    pub ladder: Option<Vec<f64>>,
    pub quad_nodes: Option<usize>,
    pub tail_sigmas: Option<f64>,
}

pub struct LoadedConfig {
    pub problem: Problem,
    pub overrides: RunOverrides,
}

struct Entry {
    value: String,
    line: usize,
    /// 1-based column where the value starts in its line
    value_col: usize,
    used: std::cell::Cell<bool>,
}

struct Sections {
    map: BTreeMap<String, BTreeMap<String, Entry>>,
}

impl Sections {
    fn parse(text: &str) -> Result<Sections> {
        let mut map: BTreeMap<String, BTreeMap<String, Entry>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let without_comment = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = without_comment.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(SolverError::Parse {
                        line: line_no,
                        column: 1,
                        message: "unterminated section header".into(),
                    });
                }
                let name = line[1..line.len() - 1].trim().to_lowercase();
                current = Some(name.clone());
                map.entry(name).or_default();
                continue;
            }
            let Some((key_part, value_part)) = without_comment.split_once('=') else {
                return Err(SolverError::Parse {
                    line: line_no,
                    column: 1,
                    message: "expected 'key = value' or '[section]'".into(),
                });
            };
            let Some(section) = &current else {
                return Err(SolverError::Parse {
                    line: line_no,
                    column: 1,
                    message: "key outside any [section]".into(),
                });
            };
            let key = key_part.trim().to_lowercase();
            let value = value_part.trim().to_string();
            let value_col = key_part.len() + 1 + (value_part.len() - value_part.trim_start().len()) + 1;
            let section_map = map.get_mut(section).unwrap();
            if section_map.contains_key(&key) {
                return Err(SolverError::Parse {
                    line: line_no,
                    column: 1,
                    message: format!("duplicate key '{key}' in section [{section}]"),
                });
            }
            section_map.insert(
                key,
                Entry {
                    value,
                    line: line_no,
                    value_col,
                    used: std::cell::Cell::new(false),
                },
            );
        }
        Ok(Sections { map })
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        let e = self.map.get(section)?.get(key)?;
        e.used.set(true);
        Some(e)
    }

    fn require(&self, section: &str, key: &str) -> Result<&Entry> {
        self.entry(section, key).ok_or_else(|| {
            SolverError::InvalidParameter(format!("missing '{key}' in section [{section}]"))
        })
    }

    fn has_section(&self, section: &str) -> bool {
        self.map.contains_key(section)
    }
}

fn at_line(err: SolverError, entry: &Entry) -> SolverError {
    match err {
        SolverError::Parse {
            column, message, ..
        } => SolverError::Parse {
            line: entry.line,
            column: entry.value_col + column.saturating_sub(1),
            message,
        },
        other => other,
    }
}

fn parse_value_expr(entry: &Entry, ctx: VarContext) -> Result<Expr> {
    parse_expr(&entry.value, ctx).map_err(|e| at_line(e, entry))
}

fn parse_num<T: std::str::FromStr>(entry: &Entry, what: &str) -> Result<T> {
    entry.value.parse().map_err(|_| SolverError::Parse {
        line: entry.line,
        column: entry.value_col,
        message: format!("expected {what}, got '{}'", entry.value),
    })
}

/// Expression references `t`?
fn uses_time(expr: &Expr) -> bool {
    match expr {
        Expr::Num(_) => false,
        Expr::Var(v) => *v == VarRef::T,
        Expr::Neg(e) => uses_time(e),
        Expr::Add(a, b)
        | Expr::Sub(a, b)
        | Expr::Mul(a, b)
        | Expr::Div(a, b)
        | Expr::Pow(a, b)
        | Expr::Call2(_, a, b) => uses_time(a) || uses_time(b),
        Expr::Call1(_, e) => uses_time(e),
    }
}

fn parse_point_list(entry: &Entry, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for chunk in entry.value.split(';') {
        let comps: Vec<f64> = chunk
            .split_whitespace()
            .map(|c| {
                c.parse::<f64>().map_err(|_| SolverError::Parse {
                    line: entry.line,
                    column: entry.value_col,
                    message: format!("bad component '{c}' in {what}"),
                })
            })
            .collect::<Result<_>>()?;
        if !comps.is_empty() {
            out.push(comps);
        }
    }
    if out.is_empty() {
        return Err(SolverError::Parse {
            line: entry.line,
            column: entry.value_col,
            message: format!("{what} must list at least one point"),
        });
    }
    let len = out[0].len();
    if out.iter().any(|p| p.len() != len) {
        return Err(SolverError::Parse {
            line: entry.line,
            column: entry.value_col,
            message: format!("{what} points have inconsistent dimensions"),
        });
    }
    Ok(out)
}

/// Load a validated problem (plus `[run]` overrides) from a config file.
pub fn load_config_file(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    load_config_text(&text)
}

pub fn load_problem(path: &Path) -> Result<Problem> {
    load_config_file(path).map(|c| c.problem)
}

pub fn load_config_text(text: &str) -> Result<LoadedConfig> {
    let sections = Sections::parse(text)?;

    // [problem]
    let name = sections.require("problem", "name")?.value.clone();
    let dim: usize = parse_num(sections.require("problem", "dim")?, "a positive integer")?;
    if dim == 0 || dim > crate::grid::MAX_DIM {
        return Err(SolverError::InvalidParameter(format!(
            "dim must be in 1..={}, got {dim}",
            crate::grid::MAX_DIM
        )));
    }
    let horizon: f64 = parse_num(sections.require("problem", "horizon")?, "a number")?;
    if !(horizon > 0.0) {
        return Err(SolverError::InvalidParameter(
            "horizon must be positive".into(),
        ));
    }
    let suite = Suite::parse(&sections.require("problem", "suite")?.value)?;

    // [grid]
    let grid = Grid::new(
        dim,
        parse_num(sections.require("grid", "box_radius")?, "a number")?,
        parse_num(sections.require("grid", "nodes_per_dim")?, "an integer")?,
        parse_num(sections.require("grid", "time_levels")?, "an integer")?,
        horizon,
    )?;

    // [diffusion]
    let sigma_ctx = VarContext::space_time(dim);
    let mut sigma_exprs: Vec<Expr> = Vec::with_capacity(dim * dim);
    let mut sigma_time_dependent = false;
    if dim == 1 {
        let entry = sections
            .entry("diffusion", "sigma")
            .or_else(|| sections.entry("diffusion", "sigma_1_1"))
            .ok_or_else(|| {
                SolverError::InvalidParameter("missing 'sigma' in section [diffusion]".into())
            })?;
        let e = parse_value_expr(entry, sigma_ctx)?;
        sigma_time_dependent |= uses_time(&e);
        sigma_exprs.push(e);
    } else {
        for i in 1..=dim {
            for j in 1..=dim {
                let key = format!("sigma_{i}_{j}");
                let entry = sections.require("diffusion", &key)?;
                let e = parse_value_expr(entry, sigma_ctx)?;
                sigma_time_dependent |= uses_time(&e);
                sigma_exprs.push(e);
            }
        }
    }
    let mu: f64 = parse_num(
        sections.require("diffusion", "mu_ellipticity")?,
        "a number",
    )?;
    let sigma_bound: f64 = parse_num(sections.require("diffusion", "sigma_bound")?, "a number")?;
    let sigma_dim = dim;
    let diffusion = DiffusionSpec::new(
        dim,
        mu,
        sigma_bound,
        !sigma_time_dependent,
        move |x: &[f64], t: f64| {
            let env = EvalEnv {
                x,
                t,
                ..Default::default()
            };
            DMatrix::from_fn(sigma_dim, sigma_dim, |i, j| {
                sigma_exprs[i * sigma_dim + j].eval(&env)
            })
        },
    )?;

    // [hamiltonian] (+ [controls] for the Isaacs variant)
    let kind = sections
        .require("hamiltonian", "kind")?
        .value
        .to_lowercase();
    let hamiltonian = match kind.as_str() {
        "generic" => {
            let expr_entry = sections.require("hamiltonian", "expr")?;
            let expr = parse_value_expr(expr_entry, VarContext::hamiltonian(dim))?;
            let growth_k: f64 =
                parse_num(sections.require("hamiltonian", "growth_k")?, "a number")?;
            let mut table = BTreeMap::new();
            if let Some(section) = sections.map.get("hamiltonian") {
                for (key, entry) in section {
                    if let Some(rest) = key.strip_prefix("lipschitz_") {
                        entry.used.set(true);
                        let parts: Vec<&str> = rest.split('_').collect();
                        let parse_u32 = |s: &str| -> Result<u32> {
                            s.parse().map_err(|_| SolverError::Parse {
                                line: entry.line,
                                column: 1,
                                message: format!("bad lipschitz key '{key}'"),
                            })
                        };
                        if parts.len() != 2 {
                            return Err(SolverError::Parse {
                                line: entry.line,
                                column: 1,
                                message: format!(
                                    "lipschitz keys look like lipschitz_<m>_<n>, got '{key}'"
                                ),
                            });
                        }
                        let m = parse_u32(parts[0])?;
                        let n = parse_u32(parts[1])?;
                        table.insert((m, n), parse_num(entry, "a number")?);
                    }
                }
            }
            Hamiltonian::Generic(HamiltonianSpec::new(
                growth_k,
                table,
                move |p: &[f64], u: f64, x: &[f64], t: f64| {
                    expr.eval(&EvalEnv {
                        x,
                        t,
                        u,
                        p,
                        d: &[],
                        g: &[],
                    })
                },
            )?)
        }
        "isaacs" => {
            if !sections.has_section("controls") {
                return Err(SolverError::InvalidParameter(
                    "isaacs hamiltonian requires a [controls] section".into(),
                ));
            }
            let d_points = parse_point_list(sections.require("controls", "d_points")?, "d_points")?;
            let g_points =
                parse_point_list(sections.require("controls", "gamma_points")?, "gamma_points")?;
            let (n_d, n_g) = (d_points[0].len(), g_points[0].len());
            let ctx = VarContext::isaacs_coeff(dim, n_d, n_g);
            let i_exprs: Vec<Expr> = if dim == 1 {
                vec![parse_value_expr(sections.require("controls", "i")?, ctx)?]
            } else {
                (1..=dim)
                    .map(|d| parse_value_expr(sections.require("controls", &format!("i_{d}"))?, ctx))
                    .collect::<Result<_>>()?
            };
            let h_expr = parse_value_expr(sections.require("controls", "h")?, ctx)?;
            let f_expr = parse_value_expr(sections.require("controls", "f")?, ctx)?;
            let bounds = IsaacsBounds {
                growth_a: sections
                    .entry("controls", "growth_a")
                    .map(|e| parse_num(e, "a number"))
                    .transpose()?
                    .unwrap_or(1.0),
                growth_b: sections
                    .entry("controls", "growth_b")
                    .map(|e| parse_num(e, "a number"))
                    .transpose()?
                    .unwrap_or(1.0),
                f_bound: sections
                    .entry("controls", "f_bound")
                    .map(|e| parse_num(e, "a number"))
                    .transpose()?,
                h_upper: sections
                    .entry("controls", "h_upper")
                    .map(|e| parse_num(e, "a number"))
                    .transpose()?,
            };
            let i_fn = move |x: &[f64], t: f64, d: &[f64], g: &[f64]| -> Vec<f64> {
                let env = EvalEnv {
                    x,
                    t,
                    d,
                    g,
                    ..Default::default()
                };
                i_exprs.iter().map(|e| e.eval(&env)).collect()
            };
            let h_fn = move |x: &[f64], t: f64, d: &[f64], g: &[f64]| {
                h_expr.eval(&EvalEnv {
                    x,
                    t,
                    d,
                    g,
                    ..Default::default()
                })
            };
            let f_fn = move |x: &[f64], t: f64, d: &[f64], g: &[f64]| {
                f_expr.eval(&EvalEnv {
                    x,
                    t,
                    d,
                    g,
                    ..Default::default()
                })
            };
            Hamiltonian::Isaacs(IsaacsSpec::new(
                d_points, g_points, bounds, i_fn, h_fn, f_fn,
            )?)
        }
        other => {
            return Err(SolverError::InvalidParameter(format!(
                "hamiltonian kind must be 'generic' or 'isaacs', got '{other}'"
            )))
        }
    };
    if suite == Suite::D && matches!(hamiltonian, Hamiltonian::Generic(_)) {
        return Err(SolverError::InvalidParameter(
            "suite D applies to Isaacs problems".into(),
        ));
    }

    // [terminal]
    let beta_entry = sections.require("terminal", "beta")?;
    let beta_expr = parse_value_expr(beta_entry, VarContext::terminal(dim))?;
    let terminal = Arc::new(move |x: &[f64]| {
        beta_expr.eval(&EvalEnv {
            x,
            ..Default::default()
        })
    });

    // [run] overrides
    let mut overrides = RunOverrides::default();
    if sections.has_section("run") {
        if let Some(e) = sections.entry("run", "kappa") {
            overrides.kappa = Some(if e.value.eq_ignore_ascii_case("adaptive") {
                KappaPolicy::Adaptive
            } else {
                KappaPolicy::Fixed(parse_num(e, "a number or 'adaptive'")?)
            });
        }
        if let Some(e) = sections.entry("run", "tol") {
            overrides.tol = Some(parse_num(e, "a number")?);
        }
        if let Some(e) = sections.entry("run", "max_iter") {
            overrides.max_iter = Some(parse_num(e, "an integer")?);
        }
        if let Some(e) = sections.entry("run", "seed") {
            overrides.seed = Some(parse_num(e, "an integer")?);
        }
        if let Some(e) = sections.entry("run", "mc_paths") {
            overrides.mc_paths = Some(parse_num(e, "an integer")?);
        }
        if let Some(e) = sections.entry("run", "mc_dt") {
            overrides.mc_dt = Some(parse_num(e, "a number")?);
        }
        if let Some(e) = sections.entry("run", "quad_nodes") {
            overrides.quad_nodes = Some(parse_num(e, "an integer")?);
        }
        if let Some(e) = sections.entry("run", "tail_sigmas") {
            overrides.tail_sigmas = Some(parse_num(e, "a number")?);
        }
        if let Some(e) = sections.entry("run", "ladder") {
            let radii: Vec<f64> = e
                .value
                .split([',', ' '])
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|_| SolverError::Parse {
                        line: e.line,
                        column: e.value_col,
                        message: format!("bad ladder radius '{s}'"),
                    })
                })
                .collect::<Result<_>>()?;
            overrides.ladder = Some(radii);
        }
    }

    let problem = Problem::new(name, dim, horizon, diffusion, hamiltonian, terminal, suite, grid)?;
    Ok(LoadedConfig {
        problem,
        overrides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINEAR_HEAT_CFG: &str = "\
# linear heat benchmark
[problem]
name = linear_heat_cfg
dim = 1
horizon = 1.0
suite = A

[diffusion]
sigma = 1.0
mu_ellipticity = 1.0
sigma_bound = 1.0

[hamiltonian]
kind = generic
expr = 1.0
growth_k = 1.0

[terminal]
beta = 0.5

[grid]
box_radius = 8.0
nodes_per_dim = 65
time_levels = 17

[run]
kappa = 8
tol = 1e-4
";

    #[test]
    fn linear_heat_config_loads() {
        let cfg = load_config_text(LINEAR_HEAT_CFG).unwrap();
        assert_eq!(cfg.problem.name, "linear_heat_cfg");
        assert_eq!(cfg.problem.dim, 1);
        assert_eq!(cfg.problem.suite, Suite::A);
        assert_eq!((cfg.problem.terminal)(&[3.0]), 0.5);
        assert_eq!(
            cfg.problem.hamiltonian.eval(&[2.0], 1.0, &[0.0], 0.1).unwrap(),
            1.0
        );
        assert_eq!(cfg.overrides.kappa, Some(KappaPolicy::Fixed(8.0)));
        assert_eq!(cfg.overrides.tol, Some(1e-4));
        assert!(cfg.problem.diffusion.is_time_invariant());
    }

    #[test]
    fn negative_horizon_rejected() {
        let bad = LINEAR_HEAT_CFG.replace("horizon = 1.0", "horizon = -1");
        match load_config_text(&bad) {
            Err(err) => assert!(
                err.to_string().contains("horizon must be positive"),
                "{err}"
            ),
            Ok(_) => panic!("negative horizon accepted"),
        }
    }

    #[test]
    fn isaacs_config_maps_controls() {
        let cfg_text = "\
[problem]
name = game
dim = 1
horizon = 1.0
suite = C

[diffusion]
sigma = 1.0
mu_ellipticity = 1.0
sigma_bound = 1.0

[hamiltonian]
kind = isaacs

[controls]
d_points = -1; 1
gamma_points = -1; 1
i = d1 * g1
h = 0.0 - 0.1
f = 0.0
f_bound = 0.1
h_upper = 0.0

[terminal]
beta = max(0, 1 - abs(x1))

[grid]
box_radius = 4.0
nodes_per_dim = 33
time_levels = 9
";
        let cfg = load_config_text(cfg_text).unwrap();
        let Hamiltonian::Isaacs(spec) = &cfg.problem.hamiltonian else {
            panic!("isaacs expected");
        };
        assert_eq!(spec.d_points.len(), 2);
        assert_eq!(spec.gamma_points.len(), 2);
        assert_eq!(spec.i_at(&[0.0], 0.0, &[-1.0], &[1.0]), vec![-1.0]);
        assert_eq!(spec.h_at(&[0.0], 0.0, &[1.0], &[1.0]), -0.1);
        assert_eq!(spec.bounds.h_upper, Some(0.0));
        // saddle of d1*g1*p at p=2 (same as the hand example)
        let s = crate::hamiltonian::eval_isaacs(spec, &[2.0], 0.0, &[0.0], 0.0).unwrap();
        assert_eq!(s.value, -2.0);
        assert_eq!((s.delta_star, s.eta_star), (0, 1));
    }

    #[test]
    fn expression_errors_carry_position() {
        let bad = LINEAR_HEAT_CFG.replace("expr = 1.0", "expr = 1.0 + frob(2)");
        match load_config_text(&bad) {
            Err(SolverError::Parse { line, column, message }) => {
                assert_eq!(line, 15, "line {line}");
                assert!(column > 8, "column {column}");
                assert!(message.contains("unknown function"));
            }
            Ok(_) => panic!("expected positioned parse error, got a parsed config"),
            Err(other) => panic!("expected positioned parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let bad = LINEAR_HEAT_CFG.replace("beta = 0.5", "beta = x2");
        match load_config_text(&bad) {
            Err(SolverError::Parse { message, .. }) => {
                assert!(message.contains("out of range"), "{message}");
            }
            Ok(_) => panic!("expected parse error, got a parsed config"),
            Err(other) => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn suite_d_requires_isaacs() {
        let bad = LINEAR_HEAT_CFG.replace("suite = A", "suite = D");
        assert!(load_config_text(&bad).is_err());
    }
}
