//! Result persistence: delimiter-separated tables plus a key-value manifest
//! with file digests. Numeric formatting uses the shortest round-trip
//! representation, so identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SolverError};
use crate::grid::{FieldKind, Grid, GridField};
use crate::harness::solve::RunResult;
use crate::localization::{localize_problem, CutoffFamily};
use crate::problem::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunSource {
    Builtin,
    ConfigFile,
    InMemory,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            SolverError::InvalidParameter(format!("manifest missing key '{key}'"))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(SolverError::Parse {
                    line: i + 1,
                    column: 1,
                    message: "manifest lines must be 'key = value'".into(),
                });
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { entries })
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn solution_csv(result: &RunResult) -> String {
    let grid = result.solution.grid();
    let dim = grid.dim();
    let mut out = String::from("t");
    for d in 1..=dim {
        let _ = write!(out, ",x{d}");
    }
    out.push_str(",u");
    for d in 1..=dim {
        let _ = write!(out, ",du_{d}");
    }
    out.push('\n');
    let ns = grid.spatial_count();
    let mut xbuf = vec![0.0; dim];
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let _ = write!(out, "{}", fmt_f(t));
            for d in 0..dim {
                let _ = write!(out, ",{}", fmt_f(xbuf[d]));
            }
            let node = level * ns + s;
            let _ = write!(out, ",{}", fmt_f(result.solution.u[node]));
            let g = result.solution.grad_at(level, s);
            for d in 0..dim {
                let _ = write!(out, ",{}", fmt_f(g[d]));
            }
            out.push('\n');
        }
    }
    out
}

fn trace_csv(result: &RunResult) -> String {
    let mut out = String::from("iteration,delta,ratio,residual\n");
    for (i, delta) in result.trace.deltas.iter().enumerate() {
        let ratio = if i == 0 {
            String::new()
        } else {
            fmt_f(result.trace.ratios.get(i - 1).copied().unwrap_or(f64::NAN))
        };
        let res = result
            .trace
            .residuals
            .get(i)
            .copied()
            .unwrap_or(f64::NAN);
        let _ = writeln!(out, "{},{},{},{}", i + 1, fmt_f(*delta), ratio, fmt_f(res));
    }
    out
}

fn crosscheck_csv(result: &RunResult) -> String {
    let dim = result.solution.grid().dim();
    let mut out = String::from("t");
    for d in 1..=dim {
        let _ = write!(out, ",x{d}");
    }
    out.push_str(",u_pde,mc_mean,mc_stderr,abs_diff,passed,skipped\n");
    for p in &result.crosscheck.points {
        let _ = write!(out, "{}", fmt_f(p.t));
        for d in 0..dim {
            let _ = write!(out, ",{}", fmt_f(p.x[d]));
        }
        let _ = writeln!(
            out,
            ",{},{},{},{},{},{}",
            fmt_f(p.u_pde),
            fmt_f(p.mc_mean),
            fmt_f(p.mc_stderr),
            fmt_f(p.abs_diff),
            p.passed,
            p.skipped
        );
    }
    out
}

fn saddle_csv(result: &RunResult) -> Option<String> {
    let saddle = result.saddle.as_ref()?;
    let grid = result.solution.grid();
    let dim = grid.dim();
    let mut out = String::from("t");
    for d in 1..=dim {
        let _ = write!(out, ",x{d}");
    }
    out.push_str(",delta_star,eta_star\n");
    let ns = grid.spatial_count();
    let mut xbuf = vec![0.0; dim];
    for level in 0..grid.time_levels() {
        let t = grid.time(level);
        for s in 0..ns {
            grid.spatial_coords(s, &mut xbuf);
            let node = level * ns + s;
            let _ = write!(out, "{}", fmt_f(t));
            for d in 0..dim {
                let _ = write!(out, ",{}", fmt_f(xbuf[d]));
            }
            let _ = writeln!(out, ",{},{}", saddle.delta_idx[node], saddle.eta_idx[node]);
        }
    }
    Some(out)
}

fn stability_csv(result: &RunResult) -> Option<String> {
    let st = result.stability.as_ref()?;
    let mut out = String::from("radius_lo,radius_hi,diff,rung_lo_converged,rung_hi_converged\n");
    for (i, d) in st.diffs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f(st.radii[i]),
            fmt_f(st.radii[i + 1]),
            fmt_f(*d),
            st.rung_converged[i],
            st.rung_converged[i + 1]
        );
    }
    Some(out)
}

fn validation_csv(result: &RunResult) -> String {
    let mut out = String::from("check,passed,worst_margin\n");
    for c in &result.validation.checks {
        let _ = writeln!(out, "{},{},{}", c.name, c.passed, fmt_f(c.worst_margin));
    }
    out
}

/// Write all result tables plus the manifest into `dir`.
pub fn export(result: &RunResult, dir: &Path) -> Result<Manifest> {
    export_with_source(result, dir, RunSource::InMemory, None)
}

/// As `export`; `source` records how to rebuild the problem (for the
/// crosscheck subcommand), copying the config file into the run directory.
pub fn export_with_source(
    result: &RunResult,
    dir: &Path,
    source: RunSource,
    config_path: Option<&Path>,
) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<(&'static str, String)> = vec![
        ("solution.csv", solution_csv(result)),
        ("trace.csv", trace_csv(result)),
        ("crosscheck.csv", crosscheck_csv(result)),
        ("validation.csv", validation_csv(result)),
    ];
    if let Some(s) = saddle_csv(result) {
        files.push(("saddle.csv", s));
    }
    if let Some(s) = stability_csv(result) {
        files.push(("stability.csv", s));
    }

    let mut manifest = Manifest::default();
    let grid = result.solution.grid();
    let m = &mut manifest.entries;
    m.insert("problem.name".into(), result.problem_name.clone());
    m.insert("problem.suite".into(), result.suite.name().into());
    m.insert("problem.dim".into(), grid.dim().to_string());
    m.insert("grid.box_radius".into(), fmt_f(grid.box_radius()));
    m.insert("grid.nodes_per_dim".into(), grid.nodes_per_dim().to_string());
    m.insert("grid.time_levels".into(), grid.time_levels().to_string());
    m.insert("grid.horizon".into(), fmt_f(grid.horizon()));
    m.insert("run.kappa".into(), fmt_f(result.kappa));
    m.insert("run.tol".into(), fmt_f(result.tol));
    m.insert("run.seed".into(), result.seed.to_string());
    m.insert("run.mc_paths".into(), result.mc.n_paths.to_string());
    m.insert("run.mc_dt".into(), fmt_f(result.mc.dt));
    m.insert("run.mc_seed".into(), result.mc.seed.to_string());
    m.insert("result.converged".into(), result.converged().to_string());
    m.insert("result.iterations".into(), result.trace.iterations.to_string());
    m.insert("result.residual".into(), fmt_f(result.residual));
    m.insert(
        "result.crosscheck_passed".into(),
        result.crosscheck.passed.to_string(),
    );
    if let Some(fam) = &result.final_cutoffs {
        m.insert("localization.k_x".into(), fmt_f(fam.k_x));
        m.insert("localization.k_p".into(), fmt_f(fam.k_p));
        m.insert("localization.k_u".into(), fmt_f(fam.k_u));
    }
    if let Some(st) = &result.stability {
        m.insert("stability.ball_radius".into(), fmt_f(st.ball_radius));
        m.insert("stability.final_gap".into(), fmt_f(st.final_gap));
        m.insert("stability.monotone".into(), st.monotone.to_string());
    }
    match source {
        RunSource::Builtin => {
            m.insert("source.builtin".into(), result.problem_name.clone());
        }
        RunSource::ConfigFile => {
            let path = config_path.ok_or_else(|| {
                SolverError::InvalidParameter("config source requires a path".into())
            })?;
            let text = fs::read_to_string(path)?;
            fs::write(dir.join("problem.cfg"), &text)?;
            m.insert("source.config".into(), "problem.cfg".into());
            m.insert("digest.problem.cfg".into(), sha256_hex(text.as_bytes()));
        }
        RunSource::InMemory => {
            m.insert("source.in_memory".into(), "true".into());
        }
    }

    for (name, content) in &files {
        fs::write(dir.join(name), content.as_bytes())?;
        m.insert(format!("digest.{name}"), sha256_hex(content.as_bytes()));
    }
    fs::write(dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

pub struct ImportedRun {
    pub manifest: Manifest,
    pub field: GridField,
    /// the problem the stored field solves (localization re-applied)
    pub problem: Problem,
}

/// Reload a run directory: manifest, solution field, and the rebuilt
/// (re-localized) problem.
pub fn import_run(dir: &Path) -> Result<ImportedRun> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    let dim: usize = manifest
        .require("problem.dim")?
        .parse()
        .map_err(|_| SolverError::InvalidParameter("bad problem.dim".into()))?;
    let grid = Grid::new(
        dim,
        parse_f(&manifest, "grid.box_radius")?,
        parse_usize(&manifest, "grid.nodes_per_dim")?,
        parse_usize(&manifest, "grid.time_levels")?,
        parse_f(&manifest, "grid.horizon")?,
    )?;

    let base = if let Some(name) = manifest.get("source.builtin") {
        crate::harness::builtins::builtin(name)?
    } else if let Some(cfg) = manifest.get("source.config") {
        crate::harness::config::load_problem(&dir.join(cfg))?
    } else {
        return Err(SolverError::InvalidParameter(
            "run directory has no reconstructible problem source".into(),
        ));
    };
    let problem = if let Some(kx) = manifest.get("localization.k_x") {
        let fam = CutoffFamily::new(
            kx.parse().map_err(|_| {
                SolverError::InvalidParameter("bad localization.k_x".into())
            })?,
            parse_f(&manifest, "localization.k_p")?,
            parse_f(&manifest, "localization.k_u")?,
        )?;
        localize_problem(&base, &fam)?.problem
    } else {
        base
    };

    let field = read_solution(&dir.join("solution.csv"), grid)?;
    Ok(ImportedRun {
        manifest,
        field,
        problem,
    })
}

fn parse_f(manifest: &Manifest, key: &str) -> Result<f64> {
    manifest
        .require(key)?
        .parse()
        .map_err(|_| SolverError::InvalidParameter(format!("bad value for '{key}'")))
}

fn parse_usize(manifest: &Manifest, key: &str) -> Result<usize> {
    manifest
        .require(key)?
        .parse()
        .map_err(|_| SolverError::InvalidParameter(format!("bad value for '{key}'")))
}

fn read_solution(path: &Path, grid: Grid) -> Result<GridField> {
    let text = fs::read_to_string(path)?;
    let dim = grid.dim();
    let mut field = GridField::zeros(grid, FieldKind::Solution);
    let expected = grid.node_count();
    let mut count = 0usize;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 1 + dim + 1 + dim {
            return Err(SolverError::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected {} columns", 2 + 2 * dim),
            });
        }
        if count >= expected {
            return Err(SolverError::Parse {
                line: i + 1,
                column: 1,
                message: "more rows than grid nodes".into(),
            });
        }
        let parse = |s: &str, col: usize| -> Result<f64> {
            s.parse().map_err(|_| SolverError::Parse {
                line: i + 1,
                column: col,
                message: format!("bad float '{s}'"),
            })
        };
        field.u[count] = parse(cols[1 + dim], 2 + dim)?;
        for d in 0..dim {
            field.grad[count * dim + d] = parse(cols[2 + dim + d], 3 + dim + d)?;
        }
        count += 1;
    }
    if count != expected {
        return Err(SolverError::InvalidParameter(format!(
            "solution file has {count} rows, grid needs {expected}"
        )));
    }
    Ok(field)
}

/// Load crosscheck probe points from a DSV file with header `t,x1..xN`.
pub fn read_points(path: &Path, dim: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 1 {
            return Err(SolverError::Parse {
                line: i + 1,
                column: 1,
                message: format!("expected {} columns (t,x1..x{dim})", dim + 1),
            });
        }
        let t: f64 = cols[0].parse().map_err(|_| SolverError::Parse {
            line: i + 1,
            column: 1,
            message: format!("bad float '{}'", cols[0]),
        })?;
        let mut x = Vec::with_capacity(dim);
        for (d, col) in cols[1..].iter().enumerate() {
            x.push(col.parse().map_err(|_| SolverError::Parse {
                line: i + 1,
                column: d + 2,
                message: format!("bad float '{col}'"),
            })?);
        }
        out.push((x, t));
    }
    Ok(out)
}
