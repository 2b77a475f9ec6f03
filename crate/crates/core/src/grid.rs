//! Space-time lattice and sampled fields.
//!
//! Space is the box [-R, R]^N with `nodes_per_dim` uniform nodes per axis;
//! time runs over `time_levels` uniform levels t_0 = 0 .. t_{M} = T. Axis 0
//! is the fastest-varying spatial index.

use crate::error::{Result, SolverError};

pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    box_radius: f64,
    nodes_per_dim: usize,
    time_levels: usize,
    horizon: f64,
}

impl Grid {
    pub fn new(
        dim: usize,
        box_radius: f64,
        nodes_per_dim: usize,
        time_levels: usize,
        horizon: f64,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(SolverError::InvalidParameter(format!(
                "grid dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if !(box_radius > 0.0) || !box_radius.is_finite() {
            return Err(SolverError::InvalidParameter(format!(
                "box radius must be positive, got {box_radius}"
            )));
        }
        if nodes_per_dim < 3 {
            return Err(SolverError::InvalidParameter(format!(
                "need at least 3 spatial nodes per dim, got {nodes_per_dim}"
            )));
        }
        if time_levels < 2 {
            return Err(SolverError::InvalidParameter(format!(
                "need at least 2 time levels, got {time_levels}"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(SolverError::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Grid {
            dim,
            box_radius,
            nodes_per_dim,
            time_levels,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn box_radius(&self) -> f64 {
        self.box_radius
    }
    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }
    pub fn time_levels(&self) -> usize {
        self.time_levels
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Spatial mesh width.
    pub fn spacing(&self) -> f64 {
        2.0 * self.box_radius / (self.nodes_per_dim - 1) as f64
    }

    /// Time step between consecutive levels.
    pub fn dt(&self) -> f64 {
        self.horizon / (self.time_levels - 1) as f64
    }

    pub fn spatial_count(&self) -> usize {
        self.nodes_per_dim.pow(self.dim as u32)
    }

    pub fn node_count(&self) -> usize {
        self.spatial_count() * self.time_levels
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.box_radius + i as f64 * self.spacing()
    }

    pub fn time(&self, level: usize) -> f64 {
        if level + 1 == self.time_levels {
            self.horizon
        } else {
            level as f64 * self.dt()
        }
    }

    pub fn axis_index(&self, sidx: usize, d: usize) -> usize {
        (sidx / self.nodes_per_dim.pow(d as u32)) % self.nodes_per_dim
    }

    pub fn spatial_coords(&self, sidx: usize, out: &mut [f64]) {
        for d in 0..self.dim {
            out[d] = self.coord(self.axis_index(sidx, d));
        }
    }

    /// Visit every spatial node as (flat index, coordinates).
    pub fn for_each_spatial<F: FnMut(usize, &[f64])>(&self, mut f: F) {
        let n = self.nodes_per_dim;
        let mut idx = [0usize; MAX_DIM];
        let mut x = [0.0f64; MAX_DIM];
        for d in 0..self.dim {
            x[d] = self.coord(0);
        }
        let total = self.spatial_count();
        for s in 0..total {
            f(s, &x[..self.dim]);
            for d in 0..self.dim {
                idx[d] += 1;
                if idx[d] < n {
                    x[d] = self.coord(idx[d]);
                    break;
                }
                idx[d] = 0;
                x[d] = self.coord(0);
            }
        }
    }

    /// Cell index and offset fraction along one axis, clamped to the box.
    pub fn axis_cell(&self, xi: f64) -> (usize, f64) {
        let h = self.spacing();
        let xi = xi.clamp(-self.box_radius, self.box_radius);
        let pos = (xi + self.box_radius) / h;
        let mut cell = pos.floor() as isize;
        if cell < 0 {
            cell = 0;
        }
        let max_cell = (self.nodes_per_dim - 2) as isize;
        if cell > max_cell {
            cell = max_cell;
        }
        let theta = (pos - cell as f64).clamp(0.0, 1.0);
        (cell as usize, theta)
    }

    /// Multilinear interpolation of a spatial slice; coordinates outside the
    /// box are clamped (constant extension).
    pub fn interp_spatial(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.spatial_count());
        let mut cell = [0usize; MAX_DIM];
        let mut theta = [0.0f64; MAX_DIM];
        for d in 0..self.dim {
            let (c, th) = self.axis_cell(x[d]);
            cell[d] = c;
            theta[d] = th;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut sidx = 0;
            let mut stride = 1;
            for d in 0..self.dim {
                let up = (corner >> d) & 1 == 1;
                w *= if up { theta[d] } else { 1.0 - theta[d] };
                sidx += (cell[d] + up as usize) * stride;
                stride *= self.nodes_per_dim;
            }
            acc += w * values[sidx];
        }
        acc
    }

    /// Central difference along axis `d`; one-sided at box faces.
    pub fn fd_axis(&self, values: &[f64], sidx: usize, d: usize) -> f64 {
        let h = self.spacing();
        let stride = self.nodes_per_dim.pow(d as u32);
        let i = self.axis_index(sidx, d);
        if i == 0 {
            (values[sidx + stride] - values[sidx]) / h
        } else if i == self.nodes_per_dim - 1 {
            (values[sidx] - values[sidx - stride]) / h
        } else {
            (values[sidx + stride] - values[sidx - stride]) / (2.0 * h)
        }
    }

    /// Second difference along axis `d` (interior nodes only).
    pub fn fd_second(&self, values: &[f64], sidx: usize, d: usize) -> f64 {
        let h = self.spacing();
        let stride = self.nodes_per_dim.pow(d as u32);
        (values[sidx + stride] - 2.0 * values[sidx] + values[sidx - stride]) / (h * h)
    }

    /// Mixed second difference along axes `d != e` (interior nodes only).
    pub fn fd_mixed(&self, values: &[f64], sidx: usize, d: usize, e: usize) -> f64 {
        let h = self.spacing();
        let sd = self.nodes_per_dim.pow(d as u32);
        let se = self.nodes_per_dim.pow(e as u32);
        (values[sidx + sd + se] + values[sidx - sd - se]
            - values[sidx + sd - se]
            - values[sidx - sd + se])
            / (4.0 * h * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Iterate,
    Solution,
}

/// Sampled (u, D_x u) on a space-time lattice.
#[derive(Debug, Clone)]
pub struct GridField {
    grid: Grid,
    pub u: Vec<f64>,
    pub grad: Vec<f64>,
    pub kind: FieldKind,
}

impl GridField {
    pub fn zeros(grid: Grid, kind: FieldKind) -> Self {
        let nodes = grid.node_count();
        GridField {
            grid,
            u: vec![0.0; nodes],
            grad: vec![0.0; nodes * grid.dim()],
            kind,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn idx(&self, level: usize, sidx: usize) -> usize {
        level * self.grid.spatial_count() + sidx
    }

    pub fn level_u(&self, level: usize) -> &[f64] {
        let ns = self.grid.spatial_count();
        &self.u[level * ns..(level + 1) * ns]
    }

    pub fn grad_at(&self, level: usize, sidx: usize) -> &[f64] {
        let base = self.idx(level, sidx) * self.grid.dim();
        &self.grad[base..base + self.grid.dim()]
    }

    /// Euclidean norm of the stored gradient at a node.
    pub fn grad_norm(&self, level: usize, sidx: usize) -> f64 {
        self.grad_at(level, sidx)
            .iter()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Space-time interpolation of u; t clamped to [0, T].
    pub fn value_at(&self, x: &[f64], t: f64) -> f64 {
        interp_spacetime(&self.grid, &self.u, x, t)
    }

    /// Nodewise difference (same grid).
    pub fn sub(&self, other: &GridField) -> GridField {
        assert_eq!(self.grid, other.grid, "field grids differ");
        let u = self
            .u
            .iter()
            .zip(&other.u)
            .map(|(a, b)| a - b)
            .collect();
        let grad = self
            .grad
            .iter()
            .zip(&other.grad)
            .map(|(a, b)| a - b)
            .collect();
        GridField {
            grid: self.grid,
            u,
            grad,
            kind: self.kind,
        }
    }

    /// Sup of |u_self - u_other| over nodes with |x| <= radius, all levels.
    pub fn sup_diff_on_ball(&self, other: &GridField, radius: f64) -> f64 {
        assert_eq!(self.grid, other.grid, "field grids differ");
        let mut sup: f64 = 0.0;
        let ns = self.grid.spatial_count();
        let mut inside = vec![false; ns];
        self.grid.for_each_spatial(|s, x| {
            inside[s] = x.iter().map(|v| v * v).sum::<f64>().sqrt() <= radius;
        });
        for level in 0..self.grid.time_levels() {
            for s in 0..ns {
                if inside[s] {
                    let d = (self.u[self.idx(level, s)] - other.u[other.idx(level, s)]).abs();
                    if d > sup {
                        sup = d;
                    }
                }
            }
        }
        sup
    }

    pub fn max_abs_u(&self) -> f64 {
        self.u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_grad_norm(&self) -> f64 {
        let mut m: f64 = 0.0;
        for level in 0..self.grid.time_levels() {
            for s in 0..self.grid.spatial_count() {
                m = m.max(self.grad_norm(level, s));
            }
        }
        m
    }
}

/// Space-time multilinear interpolation over level-major storage.
pub fn interp_spacetime(grid: &Grid, values: &[f64], x: &[f64], t: f64) -> f64 {
    let ns = grid.spatial_count();
    let dt = grid.dt();
    let t = t.clamp(0.0, grid.horizon());
    let pos = t / dt;
    let mut lvl = pos.floor() as usize;
    if lvl >= grid.time_levels() - 1 {
        lvl = grid.time_levels() - 2;
    }
    let theta = (pos - lvl as f64).clamp(0.0, 1.0);
    let lo = grid.interp_spatial(&values[lvl * ns..(lvl + 1) * ns], x);
    let hi = grid.interp_spatial(&values[(lvl + 1) * ns..(lvl + 2) * ns], x);
    lo + theta * (hi - lo)
}
