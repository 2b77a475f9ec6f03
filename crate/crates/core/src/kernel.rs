//! Fundamental-solution kernel of the pure second-order operator and spatial
//! convolutions against it.
//!
//! The variable-coefficient kernel is approximated by a single frozen-
//! coefficient Gaussian: covariance (s-t)·a(x,t) with a frozen at the
//! evaluation point (exact when a is constant). Convolutions integrate over
//! the tail-cut box around x with tensor trapezoid weights; the integrand
//! samples f by piecewise-linear interpolation with coordinates clamped to
//! the domain box, so kernel mass is never discarded at box edges.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SolverError};
use crate::grid::{Grid, MAX_DIM};

/// Diffusion data: factor sigma, derived a = sigma·sigma^T, ellipticity floor
/// and uniform bound.
#[derive(Clone)]
pub struct DiffusionSpec {
    dim: usize,
    sigma: Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>,
    pub mu_ellipticity: f64,
    pub sigma_bound: f64,
    time_invariant: bool,
}

impl std::fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionSpec")
            .field("dim", &self.dim)
            .field("mu_ellipticity", &self.mu_ellipticity)
            .field("sigma_bound", &self.sigma_bound)
            .field("time_invariant", &self.time_invariant)
            .finish()
    }
}

impl DiffusionSpec {
    pub fn new(
        dim: usize,
        mu_ellipticity: f64,
        sigma_bound: f64,
        time_invariant: bool,
        sigma: impl Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(SolverError::InvalidParameter(format!(
                "diffusion dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if !(mu_ellipticity > 0.0) {
            return Err(SolverError::InvalidParameter(
                "ellipticity constant must be positive".into(),
            ));
        }
        if !(sigma_bound > 0.0) {
            return Err(SolverError::InvalidParameter(
                "sigma bound must be positive".into(),
            ));
        }
        Ok(DiffusionSpec {
            dim,
            sigma: Arc::new(sigma),
            mu_ellipticity,
            sigma_bound,
            time_invariant,
        })
    }

    /// Constant diffusion factor; ellipticity and bound derived from the
    /// spectrum of sigma·sigma^T.
    pub fn constant(sigma: DMatrix<f64>) -> Result<Self> {
        let dim = sigma.nrows();
        if sigma.ncols() != dim {
            return Err(SolverError::DimensionMismatch(
                "sigma must be square".into(),
            ));
        }
        let a = &sigma * sigma.transpose();
        let (lmin, lmax) = sym_eigen_bounds(&a);
        if !(lmin > 0.0) {
            return Err(SolverError::NotSpd(format!(
                "sigma sigma^T has min eigenvalue {lmin}"
            )));
        }
        let s = sigma.clone();
        DiffusionSpec::new(dim, lmin, lmax.sqrt(), true, move |_, _| s.clone())
    }

    /// Scalar sigma(x) in one dimension, constant in time.
    pub fn scalar_1d(
        mu_ellipticity: f64,
        sigma_bound: f64,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        DiffusionSpec::new(1, mu_ellipticity, sigma_bound, true, move |x, _| {
            DMatrix::from_element(1, 1, sigma(x[0]))
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_time_invariant(&self) -> bool {
        self.time_invariant
    }

    pub fn sigma_at(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        (self.sigma)(x, t)
    }

    pub fn a_at(&self, x: &[f64], t: f64) -> DMatrix<f64> {
        let s = (self.sigma)(x, t);
        &s * s.transpose()
    }

    /// Wrap sigma with a state-space transform (used by localization).
    pub(crate) fn remap(
        &self,
        map: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> DiffusionSpec {
        let inner = Arc::clone(&self.sigma);
        DiffusionSpec {
            dim: self.dim,
            sigma: Arc::new(move |x, t| inner(&map(x), t)),
            mu_ellipticity: self.mu_ellipticity,
            sigma_bound: self.sigma_bound,
            time_invariant: self.time_invariant,
        }
    }
}

/// Eigenvalue range of a small symmetric matrix.
pub fn sym_eigen_bounds(a: &DMatrix<f64>) -> (f64, f64) {
    match a.nrows() {
        1 => (a[(0, 0)], a[(0, 0)]),
        2 => {
            let half_tr = 0.5 * (a[(0, 0)] + a[(1, 1)]);
            let half_diff = 0.5 * (a[(0, 0)] - a[(1, 1)]);
            let r = (half_diff * half_diff + a[(0, 1)] * a[(1, 0)]).sqrt();
            (half_tr - r, half_tr + r)
        }
        _ => {
            let eig = a.clone().symmetric_eigen();
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in eig.eigenvalues.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo, hi)
        }
    }
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(SolverError::DimensionMismatch("matrix not square".into()));
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(SolverError::NotSpd(format!(
                    "asymmetry at ({i},{j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Default Gaussian tail truncation radius in standard deviations.
pub const DEFAULT_TAIL_CUT_SIGMAS: f64 = 6.0;

/// Discretization parameters for kernel quadrature.
#[derive(Debug, Clone)]
pub struct KernelParams {
    /// Optional fixed parametrix anchor; defaults to the evaluation point.
    pub frozen_point: Option<Vec<f64>>,
    /// Half-width R of the domain box [-R, R]^N.
    pub domain_box: f64,
    /// Minimum quadrature nodes per axis across the tail-cut region.
    pub quad_nodes_per_dim: usize,
    /// Gaussian tail truncation radius in standard deviations.
    pub tail_cut_sigmas: f64,
}

impl KernelParams {
    pub fn for_grid(grid: &Grid) -> Self {
        KernelParams {
            frozen_point: None,
            domain_box: grid.box_radius(),
            quad_nodes_per_dim: 33,
            tail_cut_sigmas: DEFAULT_TAIL_CUT_SIGMAS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quad_nodes_per_dim < 16 {
            return Err(SolverError::InvalidParameter(format!(
                "quad_nodes_per_dim must be >= 16, got {}",
                self.quad_nodes_per_dim
            )));
        }
        if !(self.tail_cut_sigmas > 0.0) {
            return Err(SolverError::InvalidParameter(
                "tail_cut_sigmas must be positive".into(),
            ));
        }
        if !(self.domain_box > 0.0) {
            return Err(SolverError::InvalidParameter(
                "domain box radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen-covariance Gaussian kernel with cached factorization.
struct FrozenGaussian {
    dim: usize,
    chol: Cholesky<f64, Dyn>,
    norm: f64,
}

impl FrozenGaussian {
    fn new(cov: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&cov)?;
        let dim = cov.nrows();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| SolverError::NotSpd("covariance factorization failed".into()))?;
        let det = chol.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(SolverError::NotSpd(format!(
                "covariance determinant {det}"
            )));
        }
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).powi(dim as i32) * det).sqrt();
        Ok(FrozenGaussian { dim, chol, norm })
    }

    fn density(&self, d: &DVector<f64>) -> f64 {
        let z = self.chol.solve(d);
        self.norm * (-0.5 * d.dot(&z)).exp()
    }

    /// Gradient in x of the density at offset d = y - x: density · cov^{-1} d.
    fn gradient(&self, d: &DVector<f64>) -> DVector<f64> {
        let z = self.chol.solve(d);
        let g = self.density(d);
        z * g
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

fn time_gap(t: f64, s: f64) -> Result<f64> {
    if !(s > t) {
        return Err(SolverError::TimeOrder { t, s });
    }
    Ok(s - t)
}

/// Gaussian density with mean x and covariance (s-t)·a_const, evaluated at y.
pub fn gaussian_kernel(x: &[f64], t: f64, y: &[f64], s: f64, a_const: &DMatrix<f64>) -> Result<f64> {
    let gap = time_gap(t, s)?;
    if x.len() != a_const.nrows() || y.len() != a_const.nrows() {
        return Err(SolverError::DimensionMismatch(
            "point dimension does not match coefficient matrix".into(),
        ));
    }
    let kern = FrozenGaussian::new(a_const * gap)?;
    let d = DVector::from_fn(kern.dim(), |i, _| y[i] - x[i]);
    Ok(kern.density(&d))
}

/// Exact gradient in x of `gaussian_kernel`.
pub fn kernel_gradient(
    x: &[f64],
    t: f64,
    y: &[f64],
    s: f64,
    a_const: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let gap = time_gap(t, s)?;
    if x.len() != a_const.nrows() || y.len() != a_const.nrows() {
        return Err(SolverError::DimensionMismatch(
            "point dimension does not match coefficient matrix".into(),
        ));
    }
    let kern = FrozenGaussian::new(a_const * gap)?;
    let d = DVector::from_fn(kern.dim(), |i, _| y[i] - x[i]);
    Ok(kern.gradient(&d).as_slice().to_vec())
}

/// Frozen-coefficient kernel: Gaussian with a frozen at (x, t).
pub fn frozen_kernel(x: &[f64], t: f64, y: &[f64], s: f64, diff: &DiffusionSpec) -> Result<f64> {
    let a = diff.a_at(x, t);
    gaussian_kernel(x, t, y, s, &a)
}

/// A spatial function sampled on a grid's spatial lattice.
#[derive(Clone, Copy)]
pub struct SpatialSlice<'a> {
    pub grid: &'a Grid,
    pub values: &'a [f64],
}

impl<'a> SpatialSlice<'a> {
    pub fn new(grid: &'a Grid, values: &'a [f64]) -> Self {
        debug_assert_eq!(values.len(), grid.spatial_count());
        SpatialSlice { grid, values }
    }

    fn interp(&self, x: &[f64]) -> f64 {
        self.grid.interp_spatial(self.values, x)
    }

    /// Gradient of the interpolant by central differences of width h.
    fn fd_gradient(&self, x: &[f64], out: &mut [f64]) {
        let g = self.grid;
        let h = g.spacing();
        let mut probe = [0.0f64; MAX_DIM];
        probe[..g.dim()].copy_from_slice(&x[..g.dim()]);
        for d in 0..g.dim() {
            // At a node, fall back to the lattice stencil (proper one-sided
            // differences at box faces).
            let rel = (x[d] + g.box_radius()) / h;
            let near = rel.round();
            if (rel - near).abs() < 1e-9 && x.iter().all(|v| v.abs() <= g.box_radius() + 1e-12) {
                let mut sidx = 0;
                let mut stride = 1;
                let mut on_lattice = true;
                for e in 0..g.dim() {
                    let re = (x[e] + g.box_radius()) / h;
                    let ne = re.round();
                    if (re - ne).abs() < 1e-9 {
                        sidx += (ne as usize) * stride;
                        stride *= g.nodes_per_dim();
                    } else {
                        on_lattice = false;
                        break;
                    }
                }
                if on_lattice {
                    out[d] = g.fd_axis(self.values, sidx, d);
                    continue;
                }
            }
            probe[d] = x[d] + h;
            let up = self.interp(&probe[..g.dim()]);
            probe[d] = x[d] - h;
            let lo = self.interp(&probe[..g.dim()]);
            probe[d] = x[d];
            out[d] = (up - lo) / (2.0 * h);
        }
    }
}

/// Scalar convolution result with quadrature warning flag.
#[derive(Debug, Clone, Copy)]
pub struct Quad {
    pub value: f64,
    pub warned: bool,
}

/// Vector convolution result.
#[derive(Debug, Clone)]
pub struct QuadGrad {
    pub value: Vec<f64>,
    pub warned: bool,
}

/// Per-target quadrature row over lattice nodes (one spatial dimension).
#[derive(Debug, Clone)]
pub(crate) enum KernelRow {
    /// Sub-grid time gap: the kernel acts as the identity.
    Identity,
    Row {
        start: usize,
        w: Vec<f64>,
        wg: Vec<f64>,
    },
}

/// Node range and integer subdivision factor for a tail-cut interval
/// [x - r, x + r]: the quadrature lattice is anchored to grid nodes (snapped
/// outward to whole cells) so that quadrature and interpolation errors vary
/// smoothly with the time gap instead of oscillating with the lattice phase.
fn aligned_lattice(grid: &Grid, x: f64, r: f64, quad_nodes: usize) -> (isize, isize, usize, f64) {
    let h = grid.spacing();
    let i_lo = ((x - r + grid.box_radius()) / h).floor() as isize;
    let i_hi = ((x + r + grid.box_radius()) / h).ceil() as isize;
    let cells = (i_hi - i_lo).max(1) as usize;
    let refine = ((quad_nodes - 1).div_ceil(cells)).max(1);
    let dq = h / refine as f64;
    (i_lo, i_hi, refine, dq)
}

#[inline]
fn pdf1(z: f64, sigma: f64) -> f64 {
    (-(z * z) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

#[inline]
fn cdf1(z: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc(-z / (sigma * std::f64::consts::SQRT_2))
}

/// Build the node-weight row for a 1-D frozen Gaussian with the given
/// variance = (s-t)·a, by exact integration of the Gaussian (and its
/// x-gradient) against the piecewise-linear hat basis. Hats of virtual nodes
/// beyond the box fold onto the edge nodes (constant extension), so the
/// value weights sum to 1 up to the tail cut. Valid at every gap; only a
/// degenerate (precision-losing) variance falls back to the identity.
pub(crate) fn kernel_row_1d(grid: &Grid, x: f64, variance: f64, params: &KernelParams) -> KernelRow {
    let h = grid.spacing();
    // below this the erf differences lose all precision and the kernel is an
    // identity at grid scale anyway
    if variance < (1e-6 * h) * (1e-6 * h) {
        return KernelRow::Identity;
    }
    let n = grid.nodes_per_dim();
    let mut w = vec![0.0; n];
    let mut wg = vec![0.0; n];
    if !accumulate_hat_weights(grid, x, variance, params.tail_cut_sigmas, 1.0, &mut w, &mut wg) {
        return KernelRow::Row {
            start: 0,
            w: Vec::new(),
            wg: Vec::new(),
        };
    }
    trim_row(w, wg)
}

fn trim_row(w: Vec<f64>, wg: Vec<f64>) -> KernelRow {
    let n = w.len();
    let mut start = 0;
    while start < n && w[start] == 0.0 && wg[start] == 0.0 {
        start += 1;
    }
    let mut end = n;
    while end > start && w[end - 1] == 0.0 && wg[end - 1] == 0.0 {
        end -= 1;
    }
    KernelRow::Row {
        start,
        w: w[start..end].to_vec(),
        wg: wg[start..end].to_vec(),
    }
}

/// Add `scale` times the exact hat-basis weights of the Gaussian with the
/// given variance into full-length accumulators. Returns false when the
/// tail-cut radius is degenerate.
fn accumulate_hat_weights(
    grid: &Grid,
    x: f64,
    variance: f64,
    tail_sigmas: f64,
    scale: f64,
    w: &mut [f64],
    wg: &mut [f64],
) -> bool {
    let h = grid.spacing();
    let sigma = variance.sqrt();
    let r = tail_sigmas * sigma + h;
    if !(r > 0.0) || !r.is_finite() {
        return false;
    }
    let n = grid.nodes_per_dim();
    let max_node = (n - 1) as isize;
    let i_lo = ((x - r + grid.box_radius()) / h).floor() as isize;
    let i_hi = ((x + r + grid.box_radius()) / h).ceil() as isize;
    for node in i_lo..=i_hi {
        let yn = -grid.box_radius() + node as f64 * h;
        let za = yn - h - x;
        let zb = yn - x;
        let zc = yn + h - x;
        let (pa, pb, pc) = (pdf1(za, sigma), pdf1(zb, sigma), pdf1(zc, sigma));
        let i0l = cdf1(zb, sigma) - cdf1(za, sigma);
        let i0r = cdf1(zc, sigma) - cdf1(zb, sigma);
        let i1l = variance * (pa - pb);
        let i1r = variance * (pb - pc);
        // hat = (z - za)/h on the left cell, (zc - z)/h on the right cell
        let wv = ((i1l - za * i0l) + (zc * i0r - i1r)) / h;
        // d/dx kernel = (z / variance) * pdf; int z^2/variance pdf = I0 - [z pdf]
        let g0l = pa - pb;
        let g0r = pb - pc;
        let g1l = i0l + za * pa - zb * pb;
        let g1r = i0r + zb * pb - zc * pc;
        let gv = ((g1l - za * g0l) + (zc * g0r - g1r)) / h;
        let c = node.clamp(0, max_node) as usize;
        w[c] += scale * wv;
        wg[c] += scale * gv;
    }
    true
}

// 8-point Gauss-Legendre nodes/weights on [0, 1]
const GL8: [(f64, f64); 8] = [
    (0.019855071751231884, 0.05061426814518813),
    (0.10166676129318664, 0.11119051722668724),
    (0.2372337950418355, 0.15685332293894364),
    (0.40828267875217505, 0.18134189168918098),
    (0.5917173212478249, 0.18134189168918098),
    (0.7627662049581645, 0.15685332293894364),
    (0.8983332387068134, 0.11119051722668724),
    (0.9801449282487681, 0.05061426814518813),
];

/// Weight rows for the first interval of the time integral:
///
///   int_0^dt [Gamma_tau * f](x) dtau            (mass dt,   row 0)
///   int_0^dt (tau/dt) [Gamma_tau * f](x) dtau   (mass dt/2, row 1)
///
/// computed by Gauss-Legendre in sqrt(tau) over the exact hat-basis rows, so
/// the near-singular endpoint gets its true tau-distributed smoothing. The
/// quadrature masses are folded into the weights.
pub(crate) enum FirstRows {
    /// degenerate variance: apply slice values at x with masses dt and dt/2
    Degenerate,
    Rows { r0: KernelRow, r1: KernelRow },
}

pub(crate) fn first_interval_rows_1d(
    grid: &Grid,
    x: f64,
    a_frozen: f64,
    dt: f64,
    params: &KernelParams,
) -> FirstRows {
    let h = grid.spacing();
    if dt * a_frozen < (1e-6 * h) * (1e-6 * h) {
        return FirstRows::Degenerate;
    }
    let n = grid.nodes_per_dim();
    let mut w0 = vec![0.0; n];
    let mut wg0 = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut wg1 = vec![0.0; n];
    for (q, gw) in GL8 {
        let variance = dt * a_frozen * q * q;
        let scale = 2.0 * dt * q * gw;
        if variance < (1e-9 * h) * (1e-9 * h) {
            continue;
        }
        accumulate_hat_weights(grid, x, variance, params.tail_cut_sigmas, scale, &mut w0, &mut wg0);
        accumulate_hat_weights(
            grid,
            x,
            variance,
            params.tail_cut_sigmas,
            scale * q * q,
            &mut w1,
            &mut wg1,
        );
    }
    FirstRows::Rows {
        r0: trim_row(w0, wg0),
        r1: trim_row(w1, wg1),
    }
}

fn locate_nan(values: &[f64]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

pub(crate) fn row_value(row: &KernelRow, slice: &SpatialSlice, x: &[f64]) -> Result<Quad> {
    match row {
        KernelRow::Identity => {
            let value = slice.interp(x);
            if !value.is_finite() {
                return Err(SolverError::NonFinite(format!(
                    "f_slice near x={:?}",
                    x
                )));
            }
            Ok(Quad {
                value,
                warned: false,
            })
        }
        KernelRow::Row { start, w, .. } => {
            if w.is_empty() {
                return Ok(Quad {
                    value: 0.0,
                    warned: true,
                });
            }
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * slice.values[start + k];
            }
            if !acc.is_finite() {
                if let Some(i) = locate_nan(slice.values) {
                    return Err(SolverError::NonFinite(format!(
                        "f_slice at node {i}"
                    )));
                }
                return Err(SolverError::NonFinite("convolution overflow".into()));
            }
            Ok(Quad {
                value: acc,
                warned: false,
            })
        }
    }
}

pub(crate) fn row_gradient(row: &KernelRow, slice: &SpatialSlice, x: &[f64]) -> Result<QuadGrad> {
    match row {
        KernelRow::Identity => {
            let mut g = vec![0.0; slice.grid.dim()];
            slice.fd_gradient(x, &mut g);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::NonFinite(format!(
                    "f_slice gradient near x={:?}",
                    x
                )));
            }
            Ok(QuadGrad {
                value: g,
                warned: false,
            })
        }
        KernelRow::Row { start, wg, .. } => {
            if wg.is_empty() {
                return Ok(QuadGrad {
                    value: vec![0.0; slice.grid.dim()],
                    warned: true,
                });
            }
            let mut acc = 0.0;
            for (k, wk) in wg.iter().enumerate() {
                acc += wk * slice.values[start + k];
            }
            if !acc.is_finite() {
                if let Some(i) = locate_nan(slice.values) {
                    return Err(SolverError::NonFinite(format!("f_slice at node {i}")));
                }
                return Err(SolverError::NonFinite("convolution overflow".into()));
            }
            Ok(QuadGrad {
                value: vec![acc],
                warned: false,
            })
        }
    }
}

fn frozen_a(x: &[f64], t: f64, diff: &DiffusionSpec, params: &KernelParams) -> DMatrix<f64> {
    match &params.frozen_point {
        Some(p) => diff.a_at(p, t),
        None => diff.a_at(x, t),
    }
}

/// Quadrature approximation of the kernel convolution
/// `int Gamma(x,t,y,s) f(y) dy` with the frozen-coefficient kernel.
pub fn convolve(
    f_slice: &SpatialSlice,
    x: &[f64],
    t: f64,
    s: f64,
    diff: &DiffusionSpec,
    params: &KernelParams,
) -> Result<Quad> {
    params.validate()?;
    let gap = time_gap(t, s)?;
    let a = frozen_a(x, t, diff, params);
    if f_slice.grid.dim() == 1 {
        let row = kernel_row_1d(f_slice.grid, x[0], gap * a[(0, 0)], params);
        return row_value(&row, f_slice, x);
    }
    convolve_nd(f_slice, x, t, s, &a, params, false).map(|(v, _, warned)| Quad { value: v, warned })
}

/// Quadrature approximation of `int D_x Gamma(x,t,y,s) f(y) dy`.
pub fn convolve_gradient(
    f_slice: &SpatialSlice,
    x: &[f64],
    t: f64,
    s: f64,
    diff: &DiffusionSpec,
    params: &KernelParams,
) -> Result<QuadGrad> {
    params.validate()?;
    let gap = time_gap(t, s)?;
    let a = frozen_a(x, t, diff, params);
    if f_slice.grid.dim() == 1 {
        let row = kernel_row_1d(f_slice.grid, x[0], gap * a[(0, 0)], params);
        return row_gradient(&row, f_slice, x);
    }
    convolve_nd(f_slice, x, t, s, &a, params, true).map(|(_, g, warned)| QuadGrad {
        value: g,
        warned,
    })
}

/// Direct tensor-trapezoid evaluation for dim >= 2.
fn convolve_nd(
    f_slice: &SpatialSlice,
    x: &[f64],
    t: f64,
    s: f64,
    a: &DMatrix<f64>,
    params: &KernelParams,
    want_grad: bool,
) -> Result<(f64, Vec<f64>, bool)> {
    let grid = f_slice.grid;
    let dim = grid.dim();
    let gap = s - t;
    let (_, lmax) = sym_eigen_bounds(a);
    let h = grid.spacing();
    if gap * lmax < h * h {
        let value = f_slice.interp(x);
        let mut g = vec![0.0; dim];
        if want_grad {
            f_slice.fd_gradient(x, &mut g);
        }
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::NonFinite(format!("f_slice near x={:?}", x)));
        }
        return Ok((value, g, false));
    }
    let r = params.tail_cut_sigmas * (gap * lmax).sqrt();
    if !(r > 0.0) || !r.is_finite() {
        return Ok((0.0, vec![0.0; dim], true));
    }
    // node-aligned lattice per axis (the tail-cut radius is shared)
    let mut y_origin = [0.0f64; MAX_DIM];
    let mut m = [0usize; MAX_DIM];
    let mut dq = [0.0f64; MAX_DIM];
    for e in 0..dim {
        let (i_lo, i_hi, refine, step) =
            aligned_lattice(grid, x[e], r, params.quad_nodes_per_dim);
        y_origin[e] = -grid.box_radius() + i_lo as f64 * h;
        m[e] = (i_hi - i_lo) as usize * refine + 1;
        dq[e] = step;
    }
    let kern = FrozenGaussian::new(a * gap)?;

    let mut value = 0.0;
    let mut gradient = vec![0.0; dim];
    let mut idx = [0usize; MAX_DIM];
    let mut y = [0.0f64; MAX_DIM];
    let total: usize = m[..dim].iter().product();
    let mut d = DVector::zeros(dim);
    for _ in 0..total {
        let mut tw = 1.0;
        for e in 0..dim {
            y[e] = y_origin[e] + dq[e] * idx[e] as f64;
            tw *= if idx[e] == 0 || idx[e] == m[e] - 1 {
                0.5 * dq[e]
            } else {
                dq[e]
            };
        }
        for e in 0..dim {
            d[e] = y[e] - x[e];
        }
        let fval = f_slice.interp(&y[..dim]);
        if !fval.is_finite() {
            return Err(SolverError::NonFinite(format!(
                "f_slice near y={:?}",
                &y[..dim]
            )));
        }
        if want_grad {
            let g = kern.gradient(&d);
            for e in 0..dim {
                gradient[e] += tw * g[e] * fval;
            }
        } else {
            value += tw * kern.density(&d) * fval;
        }
        for e in 0..dim {
            idx[e] += 1;
            if idx[e] < m[e] {
                break;
            }
            idx[e] = 0;
        }
    }
    if !value.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFinite("convolution overflow".into()));
    }
    Ok((value, gradient, false))
}

/// Precomputed weight rows for every (node, time-gap) pair; only available
/// for 1-D problems with time-invariant coefficients. The first-interval
/// rows carry the tau-integrated smoothing of the time integral's
/// near-singular endpoint.
pub struct KernelTable {
    /// rows[gap-1][node]
    rows: Vec<Vec<KernelRow>>,
    first: Vec<FirstRows>,
}

impl KernelTable {
    pub(crate) fn row(&self, gap_levels: usize, node: usize) -> &KernelRow {
        &self.rows[gap_levels - 1][node]
    }

    pub(crate) fn first_rows(&self, node: usize) -> &FirstRows {
        &self.first[node]
    }
}

pub fn build_kernel_table(
    grid: &Grid,
    diff: &DiffusionSpec,
    params: &KernelParams,
) -> Option<KernelTable> {
    if grid.dim() != 1 || !diff.is_time_invariant() {
        return None;
    }
    let dt = grid.dt();
    let mut rows = Vec::with_capacity(grid.time_levels() - 1);
    for gap in 1..grid.time_levels() {
        let smt = gap as f64 * dt;
        let mut level_rows = Vec::with_capacity(grid.nodes_per_dim());
        for i in 0..grid.nodes_per_dim() {
            let x = grid.coord(i);
            let a = diff.a_at(&[x], 0.0)[(0, 0)];
            level_rows.push(kernel_row_1d(grid, x, smt * a, params));
        }
        rows.push(level_rows);
    }
    let first = (0..grid.nodes_per_dim())
        .map(|i| {
            let x = grid.coord(i);
            let a = diff.a_at(&[x], 0.0)[(0, 0)];
            first_interval_rows_1d(grid, x, a, dt, params)
        })
        .collect();
    Some(KernelTable { rows, first })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::rng::CounterRng;

    fn ident(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn heat_kernel_closed_form_1d() {
        let a = ident(1);
        let v = gaussian_kernel(&[0.0], 0.0, &[0.0], 1.0, &a).unwrap();
        assert_relative_eq!(v, 0.3989422804014327, max_relative = 1e-12);
        let v = gaussian_kernel(&[0.0], 0.0, &[1.0], 1.0, &a).unwrap();
        assert_relative_eq!(v, 0.24197072451914337, max_relative = 1e-12);
    }

    #[test]
    fn kernel_symmetric_in_endpoints() {
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let rng = CounterRng::new(5);
        for i in 0..20u64 {
            let x = [rng.range(-2.0, 2.0, i, 0, 0), rng.range(-2.0, 2.0, i, 0, 1)];
            let y = [rng.range(-2.0, 2.0, i, 1, 0), rng.range(-2.0, 2.0, i, 1, 1)];
            let v1 = gaussian_kernel(&x, 0.0, &y, 0.7, &a).unwrap();
            let v2 = gaussian_kernel(&y, 0.0, &x, 0.7, &a).unwrap();
            assert_relative_eq!(v1, v2, max_relative = 1e-14);
        }
    }

    #[test]
    fn kernel_requires_time_order() {
        let a = ident(1);
        assert!(matches!(
            gaussian_kernel(&[0.0], 1.0, &[0.0], 1.0, &a),
            Err(SolverError::TimeOrder { .. })
        ));
        assert!(matches!(
            gaussian_kernel(&[0.0], 2.0, &[0.0], 1.0, &a),
            Err(SolverError::TimeOrder { .. })
        ));
    }

    #[test]
    fn kernel_rejects_non_spd() {
        let a = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(gaussian_kernel(&[0.0], 0.0, &[0.0], 1.0, &a).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(gaussian_kernel(&[0.0, 0.0], 0.0, &[0.0, 0.0], 1.0, &asym).is_err());
    }

    #[test]
    fn gradient_zero_at_peak_and_matches_closed_form() {
        let a = ident(1);
        let g = kernel_gradient(&[0.3], 0.0, &[0.3], 1.0, &a).unwrap();
        assert_eq!(g[0], 0.0);
        let g = kernel_gradient(&[0.0], 0.0, &[1.0], 1.0, &a).unwrap();
        assert_relative_eq!(g[0], 0.24197072451914337, max_relative = 1e-12);
    }

    #[test]
    fn gradient_antisymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.2, -0.2, -0.2, 0.9]);
        let g1 = kernel_gradient(&[0.4, -0.1], 0.0, &[-0.3, 0.8], 0.5, &a).unwrap();
        let g2 = kernel_gradient(&[-0.3, 0.8], 0.0, &[0.4, -0.1], 0.5, &a).unwrap();
        for d in 0..2 {
            assert_relative_eq!(g1[d], -g2[d], max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = DMatrix::from_row_slice(2, 2, &[1.3, 0.25, 0.25, 0.7]);
        let rng = CounterRng::new(77);
        let step = 1e-5;
        for i in 0..40u64 {
            let x = [rng.range(-1.0, 1.0, i, 0, 0), rng.range(-1.0, 1.0, i, 0, 1)];
            let off = [rng.range(0.3, 1.5, i, 1, 0), rng.range(0.3, 1.5, i, 1, 1)];
            let y = [x[0] + off[0], x[1] + off[1]];
            let s = rng.range(0.3, 1.5, i, 2, 0);
            let g = kernel_gradient(&x, 0.0, &y, s, &a).unwrap();
            for d in 0..2 {
                let mut xp = x;
                xp[d] += step;
                let mut xm = x;
                xm[d] -= step;
                let fd = (gaussian_kernel(&xp, 0.0, &y, s, &a).unwrap()
                    - gaussian_kernel(&xm, 0.0, &y, s, &a).unwrap())
                    / (2.0 * step);
                assert_relative_eq!(g[d], fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn frozen_kernel_reduces_to_gaussian() {
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let v1 = frozen_kernel(&[0.2], 0.1, &[0.9], 0.8, &diff).unwrap();
        let v2 = gaussian_kernel(&[0.2], 0.1, &[0.9], 0.8, &ident(1)).unwrap();
        assert_eq!(v1, v2);

        // variable coefficient frozen at the evaluation point x=0, where a=1
        let vardiff = DiffusionSpec::scalar_1d(1.0, 2.0, |x| {
            (1.0 + x * x / (1.0 + x * x)).sqrt()
        })
        .unwrap();
        let v3 = frozen_kernel(&[0.0], 0.1, &[0.9], 0.8, &vardiff).unwrap();
        let v4 = gaussian_kernel(&[0.0], 0.1, &[0.9], 0.8, &ident(1)).unwrap();
        assert_relative_eq!(v3, v4, max_relative = 1e-14);
    }

    #[test]
    fn gaussian_bound_holds() {
        let a = DMatrix::from_row_slice(2, 2, &[1.4, 0.3, 0.3, 0.9]);
        let (lmin, lmax) = sym_eigen_bounds(&a);
        let c = 1.0 / (2.0 * lmax * (1.0 + 1e-12));
        let rng = CounterRng::new(9);
        for i in 0..200u64 {
            let x = [rng.range(-3.0, 3.0, i, 0, 0), rng.range(-3.0, 3.0, i, 0, 1)];
            let y = [rng.range(-3.0, 3.0, i, 1, 0), rng.range(-3.0, 3.0, i, 1, 1)];
            let gap = rng.range(0.05, 2.0, i, 2, 0);
            let v = gaussian_kernel(&x, 0.0, &y, gap, &a).unwrap();
            let r2 = (y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2);
            let bound = (2.0 * std::f64::consts::PI * lmin).powi(-1) / gap
                * (-c * r2 / gap).exp();
            assert!(
                v <= bound * (1.0 + 1e-9),
                "kernel {v} above bound {bound} at r2={r2}, gap={gap}"
            );
        }
    }

    fn test_grid() -> Grid {
        Grid::new(1, 8.0, 129, 65, 1.0).unwrap()
    }

    #[test]
    fn convolve_normalizes_constant() {
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let ones = vec![1.0; grid.spatial_count()];
        let slice = SpatialSlice::new(&grid, &ones);
        for &(x, gap) in &[(0.0, 1.0), (1.3, 0.5), (-3.1, 0.05), (7.9, 0.9)] {
            let q = convolve(&slice, &[x], 0.0, gap, &diff, &params).unwrap();
            assert!(
                (q.value - 1.0).abs() < 1e-6,
                "normalization at x={x}, gap={gap}: {}",
                q.value
            );
        }
    }

    #[test]
    fn convolve_odd_integrand_vanishes() {
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| vals[s] = x[0]);
        let slice = SpatialSlice::new(&grid, &vals);
        let q = convolve(&slice, &[0.0], 0.0, 1.0, &diff, &params).unwrap();
        assert!(q.value.abs() < 1e-10, "odd moment {}", q.value);
    }

    #[test]
    fn convolve_second_moment() {
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| vals[s] = x[0] * x[0]);
        let slice = SpatialSlice::new(&grid, &vals);
        let q = convolve(&slice, &[0.0], 0.0, 1.0, &diff, &params).unwrap();
        // Piecewise-linear interpolation of y^2 biases the moment up by h^2/6.
        assert!(
            (q.value - 1.0).abs() < 1e-4 + grid.spacing() * grid.spacing() / 6.0,
            "second moment {}",
            q.value
        );
    }

    #[test]
    fn convolve_gradient_constant_and_linear() {
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let consts = vec![4.2; grid.spatial_count()];
        let slice = SpatialSlice::new(&grid, &consts);
        let g = convolve_gradient(&slice, &[0.7], 0.0, 0.4, &diff, &params).unwrap();
        // outward node-snapping leaves a ~6-sigma tail asymmetry
        assert!(g.value[0].abs() < 1e-6, "{}", g.value[0]);

        let mut lin = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| lin[s] = x[0]);
        let slice = SpatialSlice::new(&grid, &lin);
        for &gap in &[0.05, 0.3, 1.0] {
            let g = convolve_gradient(&slice, &[-0.4], 0.0, gap, &diff, &params).unwrap();
            assert!(
                (g.value[0] - 1.0).abs() < 1e-4,
                "d/dx of linear at gap {gap}: {}",
                g.value[0]
            );
        }
    }

    #[test]
    fn convolve_gradient_magnitude_scaling() {
        // |convolve_gradient| <= C max|f| / sqrt(s-t); fitted exponent near -1/2.
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let rng = CounterRng::new(31);
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| {
            vals[s] = (rng.uniform(s as u64, 0, 0) - 0.5).signum() * (x[0] * 0.7).sin().abs()
        });
        let slice = SpatialSlice::new(&grid, &vals);
        let gaps = [0.01f64, 0.1, 1.0];
        let mut mags = Vec::new();
        for &gap in &gaps {
            let mut worst: f64 = 0.0;
            for xi in (10..119).step_by(12) {
                let x = grid.coord(xi);
                let g = convolve_gradient(&slice, &[x], 0.0, gap, &diff, &params).unwrap();
                worst = worst.max(g.value[0].abs());
            }
            mags.push(worst);
        }
        // log-log slope across the sweep
        let slope = (mags[2].ln() - mags[0].ln()) / (gaps[2].ln() - gaps[0].ln());
        assert!(
            slope > -0.75 && slope < -0.25,
            "gradient magnitude exponent {slope}, mags {mags:?}"
        );
        for (i, &gap) in gaps.iter().enumerate() {
            assert!(mags[i] <= 1.0 / gap.sqrt() * 1.0, "C exceeds 1 at {gap}");
        }
    }

    #[test]
    fn sub_grid_gap_approaches_identity() {
        // below grid scale the kernel acts as the identity up to its own
        // mollification width: |conv - f(x)| <= variance/2 * sup|f''|
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| vals[s] = (x[0]).cos());
        let slice = SpatialSlice::new(&grid, &vals);
        let h = grid.spacing();
        for &variance in &[0.5 * h * h, 0.01 * h * h] {
            let q = convolve(&slice, &[1.5], 0.0, variance, &diff, &params).unwrap();
            let reference = grid.interp_spatial(&vals, &[1.5]);
            assert!(
                (q.value - reference).abs() <= 0.51 * variance + 1e-12,
                "variance {variance}: {} vs {reference}",
                q.value
            );
        }
        // degenerate gap: exact identity
        let q = convolve(&slice, &[1.5], 0.0, 1e-14 * h * h, &diff, &params).unwrap();
        assert_eq!(q.value, grid.interp_spatial(&vals, &[1.5]));
    }

    #[test]
    fn chapman_kolmogorov_constant_a() {
        let grid = Grid::new(1, 8.0, 257, 65, 1.0).unwrap();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let a = ident(1);
        let (t, r, s) = (0.0, 0.4, 0.9);
        let y = [0.8];
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|sidx, z| {
            vals[sidx] = gaussian_kernel(z, r, &y, s, &a).unwrap();
        });
        let slice = SpatialSlice::new(&grid, &vals);
        for &x in &[0.0, -1.2, 2.5] {
            let lhs = convolve(&slice, &[x], t, r, &diff, &params).unwrap().value;
            let rhs = gaussian_kernel(&[x], t, &y, s, &a).unwrap();
            // dominant error: piecewise-linear interpolation of the inner
            // kernel between grid nodes, O(h^2 Gamma'')
            assert!(
                (lhs - rhs).abs() < 5e-4,
                "chapman-kolmogorov at x={x}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn nan_slice_is_data_error() {
        let grid = test_grid();
        let diff = DiffusionSpec::constant(ident(1)).unwrap();
        let params = KernelParams::for_grid(&grid);
        let mut vals = vec![0.0; grid.spatial_count()];
        vals[64] = f64::NAN;
        let slice = SpatialSlice::new(&grid, &vals);
        assert!(matches!(
            convolve(&slice, &[0.0], 0.0, 1.0, &diff, &params),
            Err(SolverError::NonFinite(_))
        ));
    }

    #[test]
    fn table_rows_match_pointwise_convolve() {
        let grid = Grid::new(1, 8.0, 65, 17, 1.0).unwrap();
        let diff = DiffusionSpec::scalar_1d(0.5, 1.5, |x| (1.0 + 0.5 * (x * 0.3).sin().powi(2)).sqrt()).unwrap();
        let params = KernelParams::for_grid(&grid);
        let table = build_kernel_table(&grid, &diff, &params).unwrap();
        let mut vals = vec![0.0; grid.spatial_count()];
        grid.for_each_spatial(|s, x| vals[s] = (0.4 * x[0]).cos());
        let slice = SpatialSlice::new(&grid, &vals);
        for gap in [1usize, 4, 16] {
            let smt = gap as f64 * grid.dt();
            for node in (0..grid.nodes_per_dim()).step_by(7) {
                let x = [grid.coord(node)];
                let via_table = row_value(table.row(gap, node), &slice, &x).unwrap().value;
                let direct = convolve(&slice, &x, 0.0, smt, &diff, &params)
                    .unwrap()
                    .value;
                assert_eq!(via_table.to_bits(), direct.to_bits());
                let gt = row_gradient(table.row(gap, node), &slice, &x).unwrap().value[0];
                let gd = convolve_gradient(&slice, &x, 0.0, smt, &diff, &params)
                    .unwrap()
                    .value[0];
                assert_eq!(gt.to_bits(), gd.to_bits());
            }
        }
    }

    #[test]
    fn normalization_2d() {
        let grid = Grid::new(2, 8.0, 65, 5, 1.0).unwrap();
        let diff = DiffusionSpec::constant(DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 0.2, 0.2, 0.8],
        ))
        .unwrap();
        let params = KernelParams::for_grid(&grid);
        let ones = vec![1.0; grid.spatial_count()];
        let slice = SpatialSlice::new(&grid, &ones);
        for &(x0, x1, gap) in &[(0.0, 0.0, 0.5), (1.0, -2.0, 1.0), (3.0, 3.0, 0.2)] {
            let q = convolve(&slice, &[x0, x1], 0.0, gap, &diff, &params).unwrap();
            assert!(
                (q.value - 1.0).abs() < 1e-6,
                "2d normalization at ({x0},{x1}) gap {gap}: {}",
                q.value
            );
        }
    }

    #[test]
    fn params_validation() {
        let grid = test_grid();
        let mut p = KernelParams::for_grid(&grid);
        p.quad_nodes_per_dim = 8;
        assert!(p.validate().is_err());
    }
}
