//! Pathwise trees: the frozen linear solution, its renormalized square and
//! cube, the first three generic quantities and the pairing with rescaled
//! test functions.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chebyshev::Chebyshev;
use crate::corr_field::{build_coefficients, build_driver_stationary, CoeffField, CorrelationKernel, MatrixProfile};
use crate::error::{Error, Result};
use crate::fft::{wavenumbers, Fft2};
use crate::gauss_kernels::{cherry_counterterm, convolution_quantity, heat_kernel, CherryTable, FrozenKernelSpec};
use crate::lattice_noise::{
    mollify, sample_white_noise_realization, stream_rng, MollifierSpec, Point, ScalarField, SpaceTimeGrid, StreamRole,
};
use crate::linalg::Sym2;

/// `int profile`, from `int_0^1 (4 s (1 - s))^4 ds = 256/630` and
/// `int_{|y|<1} (1 - |y|^2)^4 dy = pi/5`.
pub const PROFILE_INTEGRAL: f64 = 256.0 / 630.0 * std::f64::consts::PI / 5.0;

/// `psi^lambda(z) = lambda^-4 profile((t - t*) / lambda^2, (x - x*) / lambda)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub lambda: f64,
    pub base: Point,
}

impl TestFunction {
    pub fn new(lambda: f64, base: Point) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= (-1.0f64).exp() + 1e-15) {
            return Err(Error::Config(format!("test scale {lambda} outside (0, 1/e]")));
        }
        Ok(Self { lambda, base })
    }

    /// Bump on the unit cylinder `[0, 1) x B_1` with maximum 1 at `(1/2, 0)`.
    pub fn profile(tau: f64, y: [f64; 2]) -> f64 {
        let r2 = y[0] * y[0] + y[1] * y[1];
        if !(0.0..1.0).contains(&tau) || r2 >= 1.0 {
            return 0.0;
        }
        (4.0 * tau * (1.0 - tau)).powi(4) * (1.0 - r2).powi(4)
    }

    pub fn eval(&self, z: Point) -> f64 {
        let l = self.lambda;
        let tau = (z.t - self.base.t) / (l * l);
        Self::profile(tau, [(z.x - self.base.x) / l, (z.y - self.base.y) / l]) / (l * l * l * l)
    }

    pub fn shifted(&self, dt: f64, dx: f64, dy: f64) -> Self {
        Self {
            lambda: self.lambda,
            base: Point::new(self.base.t + dt, self.base.x + dx, self.base.y + dy),
        }
    }

    /// Resolvability and support checks against a grid.
    pub fn check_on(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let l = self.lambda;
        if l < 2.0 * grid.dx.max(grid.dy) || l * l < 2.0 * grid.dt {
            return Err(Error::UnresolvableScale {
                scale: l,
                reason: format!("need lambda >= 2 dx and lambda^2 >= 2 dt, dx = {}, dt = {}", grid.dx, grid.dt),
            });
        }
        let b = self.base;
        let t_last = grid.time(grid.n_t - 1);
        let x_last = grid.x(grid.n_x - 1);
        let y_last = grid.y(grid.n_y - 1);
        let eps = 1e-12;
        if b.t < grid.t0 - eps
            || b.t + l * l > t_last + eps
            || b.x - l < grid.x(0) - eps
            || b.x + l > x_last + eps
            || b.y - l < grid.y(0) - eps
            || b.y + l > y_last + eps
        {
            return Err(Error::SupportEscapesGrid(format!(
                "cylinder of scale {l} at ({}, {}, {}) leaves the grid",
                b.t, b.x, b.y
            )));
        }
        Ok(())
    }

    /// Grid nodes in the support with their weights `psi^lambda(z)`.
    pub fn nodes(&self, grid: &SpaceTimeGrid) -> Result<Vec<((usize, usize, usize), f64)>> {
        self.check_on(grid)?;
        let l = self.lambda;
        let b = self.base;
        let j_lo = ((b.t - grid.t0) / grid.dt).floor().max(0.0) as usize;
        let j_hi = (((b.t + l * l - grid.t0) / grid.dt).ceil() as usize).min(grid.n_t - 1);
        let i_lo = ((b.x - l - grid.x(0)) / grid.dx).floor().max(0.0) as usize;
        let i_hi = (((b.x + l - grid.x(0)) / grid.dx).ceil() as usize).min(grid.n_x - 1);
        let k_lo = ((b.y - l - grid.y(0)) / grid.dy).floor().max(0.0) as usize;
        let k_hi = (((b.y + l - grid.y(0)) / grid.dy).ceil() as usize).min(grid.n_y - 1);
        let mut out = Vec::new();
        for j in j_lo..=j_hi {
            for i in i_lo..=i_hi {
                for k in k_lo..=k_hi {
                    let w = self.eval(grid.point(j, i, k));
                    if w != 0.0 {
                        out.push(((j, i, k), w));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Riemann-sum pairing `int field psi^lambda`.
pub fn pair(field: &ScalarField, test: &TestFunction) -> Result<f64> {
    let g = field.grid;
    let dv = g.cell_volume();
    Ok(test
        .nodes(&g)?
        .into_iter()
        .map(|((j, i, k), w)| w * field.get(j, i, k))
        .sum::<f64>()
        * dv)
}

/// Index of the slice at `t = 0`; trees start there.
pub fn time_origin_index(grid: &SpaceTimeGrid) -> Result<usize> {
    let p = -grid.t0 / grid.dt;
    let j0 = p.round();
    if j0 < 0.0 || (p - j0).abs() > 1e-9 || j0 as usize >= grid.n_t {
        return Err(Error::InvalidGrid(format!(
            "t = 0 must be a grid time, got t0 = {} and dt = {}",
            grid.t0, grid.dt
        )));
    }
    Ok(j0 as usize)
}

/// Trapezoid weight of source slice `m` for target slice `j`, both `>= j0`.
fn trapezoid_weight(m: usize, j: usize, j0: usize) -> f64 {
    if m == j0 || m == j {
        0.5
    } else {
        1.0
    }
}

/// Frozen linear solution at one node by direct summation,
/// `sum_{t' in [0, t]} w dt sum_x' K_a(t - t', x - x') xi_delta(t', x') dx dy`
/// with trapezoid time weights and the spatial Gaussian cut at six standard
/// deviations. The lag-zero kernel is the lattice delta.
pub fn lollipop_at(a: &Sym2, xi_delta: &ScalarField, node: (usize, usize, usize)) -> Result<f64> {
    let g = xi_delta.grid;
    let j0 = time_origin_index(&g)?;
    let (j, i, k) = node;
    if j <= j0 {
        return Ok(0.0);
    }
    let (_, lmax) = a.eigenvalues();
    let (x, y) = (g.x(i), g.y(k));
    let mut total = 0.0;
    for m in j0..=j {
        let w = trapezoid_weight(m, j, j0) * g.dt;
        if m == j {
            total += w * xi_delta.get(j, i, k);
            continue;
        }
        let s = (j - m) as f64 * g.dt;
        let reach = 6.0 * (2.0 * s * lmax).sqrt();
        let (xlo, xhi) = window(reach / g.dx, g.n_x);
        let (ylo, yhi) = window(reach / g.dy, g.n_y);
        let slice = xi_delta.slice(m);
        let mut acc = 0.0;
        for di in xlo..=xhi {
            let ii = (i as i64 + di).rem_euclid(g.n_x as i64) as usize;
            let ox = g.wrap_dx(x - g.x(ii));
            for dk in ylo..=yhi {
                let kk = (k as i64 + dk).rem_euclid(g.n_y as i64) as usize;
                let oy = g.wrap_dy(y - g.y(kk));
                if ox * ox + oy * oy > reach * reach {
                    continue;
                }
                acc += heat_kernel(a, s, [ox, oy]) * slice[ii * g.n_y + kk];
            }
        }
        total += w * acc * g.dx * g.dy;
    }
    Ok(total)
}

/// Offsets `lo..=hi` covering `|d| <= r` cells, each periodic image at most once.
fn window(r: f64, n: usize) -> (i64, i64) {
    let r = r.ceil() as i64;
    let n = n as i64;
    if 2 * r + 1 >= n {
        (-(n - 1) / 2, n / 2)
    } else {
        (-r, r)
    }
}

/// How the frozen linear solution is evaluated on a whole grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum LollipopEngine {
    /// Node-by-node summation, `O(window)` per node.
    Direct,
    /// Per-slice Fourier recursion for a handful of matrices `A(g_n)` and
    /// Chebyshev interpolation in the driver value `g`.
    Spectral { nodes: usize },
}

impl Default for LollipopEngine {
    fn default() -> Self {
        LollipopEngine::Spectral { nodes: 16 }
    }
}

fn check_grids(coeff: &CoeffField, xi_delta: &ScalarField) -> Result<()> {
    if coeff.grid() != xi_delta.grid {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// The frozen linear solution at every node by direct summation.
pub fn build_lollipop_hat(coeff: &CoeffField, xi_delta: &ScalarField) -> Result<ScalarField> {
    build_lollipop_hat_with(coeff, xi_delta, LollipopEngine::Direct)
}

pub fn build_lollipop_hat_with(coeff: &CoeffField, xi_delta: &ScalarField, engine: LollipopEngine) -> Result<ScalarField> {
    check_grids(coeff, xi_delta)?;
    match engine {
        LollipopEngine::Direct => {
            let g = xi_delta.grid;
            time_origin_index(&g)?;
            let values = (0..g.len())
                .into_par_iter()
                .map(|idx| lollipop_at(&coeff.a[idx], xi_delta, g.unindex(idx)))
                .collect::<Result<Vec<f64>>>()?;
            ScalarField::from_values(g, values)
        }
        LollipopEngine::Spectral { nodes } => lollipop_spectral(coeff, xi_delta, nodes),
    }
}

/// `Some(a)` when the coefficient field is one constant matrix.
fn constant_matrix(coeff: &CoeffField) -> Option<Sym2> {
    let first = *coeff.a.first()?;
    coeff.a.iter().all(|m| *m == first).then_some(first)
}

fn driver_range(coeff: &CoeffField) -> (f64, f64) {
    coeff
        .g
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn lollipop_spectral(coeff: &CoeffField, xi_delta: &ScalarField, nodes: usize) -> Result<ScalarField> {
    frozen_solution_spectral(coeff, xi_delta, nodes, FrozenScheme::HeatTrapezoid)
}

/// Time discretization of the frozen-coefficient solution operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenScheme {
    /// Exact heat semigroup in Fourier space with trapezoid weights in time.
    HeatTrapezoid,
    /// Implicit Euler for the five-point flux discretization with constant
    /// coefficients, matching the variable-coefficient solver.
    ImplicitEuler,
}

/// Symbol `q_h(k) >= 0` of minus the discrete flux operator for constant `a`.
pub fn discrete_symbol(a: &Sym2, kx: f64, ky: f64, dx: f64, dy: f64) -> f64 {
    let sx = 2.0 * (0.5 * kx * dx).sin() / dx;
    let sy = 2.0 * (0.5 * ky * dy).sin() / dy;
    let cx = (kx * dx).sin() / dx;
    let cy = (ky * dy).sin() / dy;
    a.a11 * sx * sx + a.a22 * sy * sy + 2.0 * a.a12 * cx * cy
}

/// `u(z) = int_0^t (frozen kernel at a(z)) source` for every node, by a
/// Fourier recursion for the matrices `A(g_n)` at Chebyshev nodes in `g`,
/// interpolated pointwise in the realized driver.
pub fn frozen_solution_spectral(
    coeff: &CoeffField,
    source: &ScalarField,
    nodes: usize,
    scheme: FrozenScheme,
) -> Result<ScalarField> {
    check_grids(coeff, source)?;
    let g = source.grid;
    let j0 = time_origin_index(&g)?;
    let (matrices, cheb) = match constant_matrix(coeff) {
        Some(a) => (vec![a], None),
        None => {
            let (lo, hi) = driver_range(coeff);
            let cheb = Chebyshev::new(lo, hi, nodes.max(2));
            let mats = cheb.nodes().iter().map(|&v| coeff.profile.apply(v)).collect();
            (mats, Some(cheb))
        }
    };
    let fft = Fft2::new(g.n_x, g.n_y);
    let n = g.slice_len();
    let kx = wavenumbers(g.n_x, g.dx);
    let ky = wavenumbers(g.n_y, g.dy);
    let decay: Vec<Vec<f64>> = matrices
        .iter()
        .map(|a| {
            let mut e = vec![0.0; n];
            for i in 0..g.n_x {
                for k in 0..g.n_y {
                    e[i * g.n_y + k] = match scheme {
                        FrozenScheme::HeatTrapezoid => (-g.dt * a.quad([kx[i], ky[k]])).exp(),
                        FrozenScheme::ImplicitEuler => 1.0 / (1.0 + g.dt * discrete_symbol(a, kx[i], ky[k], g.dx, g.dy)),
                    };
                }
            }
            e
        })
        .collect();
    let zero = Complex64::new(0.0, 0.0);
    let mut sums = vec![vec![zero; n]; matrices.len()];
    let mut firsts = vec![vec![zero; n]; matrices.len()];
    if scheme == FrozenScheme::HeatTrapezoid {
        let spec0 = fft.forward_real(source.slice(j0));
        for (s, f) in sums.iter_mut().zip(firsts.iter_mut()) {
            s.copy_from_slice(&spec0);
            f.copy_from_slice(&spec0);
        }
    }
    let mut out = vec![0.0; g.len()];
    let mut basis = vec![0.0; matrices.len()];
    for j in j0 + 1..g.n_t {
        let spec = fft.forward_real(source.slice(j));
        let mut updates: Vec<Vec<Complex64>> = Vec::with_capacity(matrices.len());
        for ((s, p), e) in sums.iter_mut().zip(firsts.iter_mut()).zip(&decay) {
            let mut u = vec![zero; n];
            match scheme {
                FrozenScheme::HeatTrapezoid => {
                    // s = sum_m E^{j-m} f_m, p = E^{j-j0} f_{j0}
                    for q in 0..n {
                        s[q] = e[q] * s[q] + spec[q];
                        p[q] *= e[q];
                        u[q] = g.dt * (s[q] - 0.5 * p[q] - 0.5 * spec[q]);
                    }
                }
                FrozenScheme::ImplicitEuler => {
                    for q in 0..n {
                        s[q] = e[q] * (s[q] + g.dt * spec[q]);
                        u[q] = s[q];
                    }
                }
            }
            updates.push(u);
        }
        let mut reals: Vec<Vec<f64>> = Vec::with_capacity(updates.len());
        for pair in updates.chunks(2) {
            if pair.len() == 2 {
                let (a, b) = fft.inverse_real_pair(&pair[0], &pair[1]);
                reals.push(a);
                reals.push(b);
            } else {
                reals.push(fft.inverse_real(&pair[0]));
            }
        }
        let dst = &mut out[j * n..(j + 1) * n];
        match &cheb {
            None => dst.copy_from_slice(&reals[0]),
            Some(c) => {
                let gs = &coeff.g.values[j * n..(j + 1) * n];
                for q in 0..n {
                    c.basis(gs[q], &mut basis);
                    dst[q] = basis.iter().zip(&reals).map(|(b, r)| b * r[q]).sum();
                }
            }
        }
    }
    ScalarField::from_values(g, out)
}

/// Counterterm field `c^cherry_delta(z)`: exact per slice for constant
/// coefficients, otherwise interpolated from `table` (or a table over the
/// realized driver range), with exact quadrature for drivers outside it.
pub fn cherry_field(coeff: &CoeffField, spec: &MollifierSpec, table: Option<&CherryTable>) -> Result<ScalarField> {
    let g = coeff.grid();
    let n = g.slice_len();
    let mut out = vec![0.0; g.len()];
    if let Some(a) = constant_matrix(coeff) {
        for j in 0..g.n_t {
            let t = g.time(j);
            if t > 1e-12 {
                let c = cherry_counterterm(&a, t, spec)?;
                out[j * n..(j + 1) * n].iter_mut().for_each(|v| *v = c);
            }
        }
        return ScalarField::from_values(g, out);
    }
    let owned;
    let table = match table {
        Some(t) => t,
        None => {
            owned = CherryTable::build(&g, &coeff.profile, spec, driver_range(coeff), 16)?;
            &owned
        }
    };
    let (lo, hi) = (table.cheb.lo, table.cheb.hi);
    for j in 0..g.n_t {
        let t = g.time(j);
        if t <= 1e-12 {
            continue;
        }
        for q in 0..n {
            let v = coeff.g.values[j * n + q];
            out[j * n + q] = if v >= lo && v <= hi {
                table.eval(j, v)
            } else {
                cherry_counterterm(&coeff.profile.apply(v), t, spec)?
            };
        }
    }
    ScalarField::from_values(g, out)
}

/// One realization of the trees and their renormalized versions.
#[derive(Debug, Clone)]
pub struct TreeRealization {
    pub coeff: CoeffField,
    pub xi_delta: ScalarField,
    pub lollipop_hat: ScalarField,
    pub c_cherry: ScalarField,
    pub cherry_bar: ScalarField,
    pub chickenfoot_bar: ScalarField,
    pub seed: Option<u64>,
    pub realization: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TreeOptions<'a> {
    pub engine: LollipopEngine,
    pub cherry_table: Option<&'a CherryTable>,
}

pub fn build_trees(coeff: &CoeffField, xi_delta: &ScalarField, spec: &MollifierSpec) -> Result<TreeRealization> {
    build_trees_with(coeff, xi_delta, spec, TreeOptions::default())
}

pub fn build_trees_with(
    coeff: &CoeffField,
    xi_delta: &ScalarField,
    spec: &MollifierSpec,
    options: TreeOptions<'_>,
) -> Result<TreeRealization> {
    check_grids(coeff, xi_delta)?;
    spec.check_resolvable(&xi_delta.grid)?;
    let lollipop_hat = build_lollipop_hat_with(coeff, xi_delta, options.engine)?;
    let c_cherry = cherry_field(coeff, spec, options.cherry_table)?;
    let g = xi_delta.grid;
    let cherry = lollipop_hat.values.iter().zip(&c_cherry.values).map(|(l, c)| l * l - c).collect();
    let chicken = lollipop_hat
        .values
        .iter()
        .zip(&c_cherry.values)
        .map(|(l, c)| l * l * l - 3.0 * c * l)
        .collect();
    Ok(TreeRealization {
        coeff: coeff.clone(),
        xi_delta: xi_delta.clone(),
        lollipop_hat,
        c_cherry,
        cherry_bar: ScalarField::from_values(g, cherry)?,
        chickenfoot_bar: ScalarField::from_values(g, chicken)?,
        seed: None,
        realization: None,
    })
}

impl TreeRealization {
    /// Largest deviation from `cherry_bar + c = lollipop^2` and
    /// `chickenfoot_bar + 3 c lollipop = lollipop^3`.
    pub fn identity_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for q in 0..self.lollipop_hat.values.len() {
            let l = self.lollipop_hat.values[q];
            let c = self.c_cherry.values[q];
            worst = worst.max((self.cherry_bar.values[q] + c - l * l).abs());
            worst = worst.max((self.chickenfoot_bar.values[q] + 3.0 * c * l - l * l * l).abs());
        }
        worst
    }
}

/// Everything needed to draw one realization of `(a, xi_delta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizationSpec {
    pub grid: SpaceTimeGrid,
    pub mollifier: MollifierSpec,
    pub kernel: CorrelationKernel,
    pub profile: MatrixProfile,
}

/// Inputs of one realization: the raw noise drives both `a = A(m * xi)` and
/// `xi_delta = rho_delta * xi`.
#[derive(Debug, Clone)]
pub struct TreeInputs {
    pub xi: ScalarField,
    pub xi_delta: ScalarField,
    pub coeff: CoeffField,
}

impl TreeInputs {
    pub fn sample(spec: &RealizationSpec, seed: u64, realization: u64) -> Result<Self> {
        let xi = sample_white_noise_realization(&spec.grid, seed, realization)?;
        Self::from_noise(spec, xi, seed, realization)
    }

    pub fn from_noise(spec: &RealizationSpec, xi: ScalarField, seed: u64, realization: u64) -> Result<Self> {
        let xi_delta = mollify(&xi, &spec.mollifier)?;
        let mut rng = stream_rng(seed, realization, StreamRole::Complement);
        let driver = build_driver_stationary(&spec.kernel, &xi, &mut rng)?;
        let coeff = build_coefficients(&driver, &spec.profile)?;
        Ok(Self { xi, xi_delta, coeff })
    }

    pub fn trees(&self, spec: &RealizationSpec, options: TreeOptions<'_>) -> Result<TreeRealization> {
        build_trees_with(&self.coeff, &self.xi_delta, &spec.mollifier, options)
    }
}

/// Frozen linear solution at the nodes carrying a nonzero weight.
fn lollipop_on_support(
    coeff: &CoeffField,
    xi_delta: &ScalarField,
    weights: &[((usize, usize, usize), f64)],
) -> Result<Vec<f64>> {
    weights
        .par_iter()
        .map(|&((j, i, k), _)| lollipop_at(&coeff.at(j, i, k), xi_delta, (j, i, k)))
        .collect()
}

fn support_of(field: &ScalarField) -> Vec<((usize, usize, usize), f64)> {
    field
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(idx, v)| (field.grid.unindex(idx), *v))
        .collect()
}

/// `C(a1(z), a2(z))` at one node: the pairing of two frozen kernels through
/// the mollifier covariance.
fn pairing_constant(a1: &Sym2, a2: &Sym2, t: f64, spec: &MollifierSpec) -> Result<f64> {
    if t <= 1e-12 {
        return Ok(0.0);
    }
    if a1 == a2 {
        return cherry_counterterm(a1, t, spec);
    }
    let p = Point::new(t, 0.0, 0.0);
    convolution_quantity(&FrozenKernelSpec::new(*a1, p)?, &FrozenKernelSpec::new(*a2, p)?, spec.delta)
}

/// `X_1(chi, K) = int chi(z) int K_z(z - z') xi_delta(z') dz' dz`.
pub fn x1_quantity(chi: &ScalarField, coeff: &CoeffField, xi_delta: &ScalarField) -> Result<f64> {
    check_grids(coeff, xi_delta)?;
    if chi.grid != xi_delta.grid {
        return Err(Error::GridMismatch);
    }
    let weights = support_of(chi);
    let l = lollipop_on_support(coeff, xi_delta, &weights)?;
    Ok(weights.iter().zip(&l).map(|((_, w), v)| w * v).sum::<f64>() * chi.grid.cell_volume())
}

/// `X_2(eta, K, K)` with the Wick square `xi_delta(z') ⋄ xi_delta(z'')`.
pub fn x2_quantity(eta: &ScalarField, coeff: &CoeffField, xi_delta: &ScalarField, spec: &MollifierSpec) -> Result<f64> {
    x2_quantity_general(eta, [coeff, coeff], xi_delta, spec)
}

/// `X_2` for two kernels frozen from two coefficient fields.
pub fn x2_quantity_general(
    eta: &ScalarField,
    coeffs: [&CoeffField; 2],
    xi_delta: &ScalarField,
    spec: &MollifierSpec,
) -> Result<f64> {
    for c in coeffs {
        check_grids(c, xi_delta)?;
    }
    if eta.grid != xi_delta.grid {
        return Err(Error::GridMismatch);
    }
    let g = eta.grid;
    let weights = support_of(eta);
    let l1 = lollipop_on_support(coeffs[0], xi_delta, &weights)?;
    let l2 = if std::ptr::eq(coeffs[0], coeffs[1]) {
        l1.clone()
    } else {
        lollipop_on_support(coeffs[1], xi_delta, &weights)?
    };
    let terms = weights
        .par_iter()
        .enumerate()
        .map(|(q, &((j, i, k), w))| {
            let c = pairing_constant(&coeffs[0].at(j, i, k), &coeffs[1].at(j, i, k), g.time(j), spec)?;
            Ok(w * (l1[q] * l2[q] - c))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() * g.cell_volume())
}

/// `X_3(psi^lambda, K, K, K)`, the Wick cube paired with the test function.
pub fn x3_quantity(test: &TestFunction, coeff: &CoeffField, xi_delta: &ScalarField, spec: &MollifierSpec) -> Result<f64> {
    x3_quantity_general(test, [coeff, coeff, coeff], xi_delta, spec)
}

/// `X_3` for three kernels: `L1 L2 L3 - C12 L3 - C13 L2 - C23 L1` per node.
pub fn x3_quantity_general(
    test: &TestFunction,
    coeffs: [&CoeffField; 3],
    xi_delta: &ScalarField,
    spec: &MollifierSpec,
) -> Result<f64> {
    for c in coeffs {
        check_grids(c, xi_delta)?;
    }
    let g = xi_delta.grid;
    let weights = test.nodes(&g)?;
    let ls: Vec<Vec<f64>> = coeffs
        .iter()
        .map(|c| lollipop_on_support(c, xi_delta, &weights))
        .collect::<Result<_>>()?;
    let terms = weights
        .par_iter()
        .enumerate()
        .map(|(q, &((j, i, k), w))| {
            let t = g.time(j);
            let a: Vec<Sym2> = coeffs.iter().map(|c| c.at(j, i, k)).collect();
            let c12 = pairing_constant(&a[0], &a[1], t, spec)?;
            let c13 = pairing_constant(&a[0], &a[2], t, spec)?;
            let c23 = pairing_constant(&a[1], &a[2], t, spec)?;
            let (l1, l2, l3) = (ls[0][q], ls[1][q], ls[2][q]);
            Ok(w * (l1 * l2 * l3 - c12 * l3 - c13 * l2 - c23 * l1))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() * g.cell_volume())
}

/// Pairing of `(lollipop_hat, cherry_bar, chickenfoot_bar)` with one test function.
pub fn pair_trees(trees: &TreeRealization, test: &TestFunction) -> Result<[f64; 3]> {
    Ok([
        pair(&trees.lollipop_hat, test)?,
        pair(&trees.cherry_bar, test)?,
        pair(&trees.chickenfoot_bar, test)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr_field::MatrixProfile;
    use crate::lattice_noise::sample_white_noise;

    fn grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new(14, 24, 24, 0.005, 0.05, 0.05, -0.01).unwrap()
    }

    fn constant_coeff(grid: SpaceTimeGrid, a: f64) -> CoeffField {
        build_coefficients(&ScalarField::zeros(grid), &MatrixProfile::isotropic_logistic(2.0 * a - 1.0)).unwrap()
    }

    #[test]
    fn profile_shape() {
        assert_eq!(TestFunction::profile(0.5, [0.0, 0.0]), 1.0);
        assert_eq!(TestFunction::profile(0.0, [0.0, 0.0]), 0.0);
        assert_eq!(TestFunction::profile(0.5, [1.0, 0.0]), 0.0);
        assert_eq!(TestFunction::profile(-0.1, [0.0, 0.0]), 0.0);
        assert!(TestFunction::new(0.5, Point::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn pairing_checks_and_mass() {
        let g = SpaceTimeGrid::new(60, 64, 64, 0.0025, 0.02, 0.02, 0.0).unwrap();
        let one = ScalarField::constant(g, 1.0);
        let test = TestFunction::new(0.3, Point::new(0.02, 0.0, 0.0)).unwrap();
        let v = pair(&one, &test).unwrap();
        assert!((v / PROFILE_INTEGRAL - 1.0).abs() < 0.01, "{v}");
        assert_eq!(pair(&ScalarField::zeros(g), &test).unwrap(), 0.0);
        let far = TestFunction::new(0.3, Point::new(0.02, 0.5, 0.0)).unwrap();
        assert!(matches!(pair(&one, &far), Err(Error::SupportEscapesGrid(_))));
        let tiny = TestFunction::new(0.03, Point::new(0.02, 0.0, 0.0)).unwrap();
        assert!(matches!(pair(&one, &tiny), Err(Error::UnresolvableScale { .. })));
    }

    #[test]
    fn pairing_is_translation_equivariant() {
        let g = SpaceTimeGrid::new(40, 48, 48, 0.005, 0.025, 0.025, 0.0).unwrap();
        let f = sample_white_noise(&g, 5).unwrap();
        let test = TestFunction::new(0.2, Point::new(0.01, -0.1, 0.05)).unwrap();
        let (sj, si, sk) = (3usize, 4usize, 2usize);
        let shifted = ScalarField::from_fn(g, |p| {
            let j = g.time_index(p.t).unwrap();
            let (i, k) = g.space_index(p.x, p.y);
            if j < sj {
                0.0
            } else {
                f.get(j - sj, (i + g.n_x - si) % g.n_x, (k + g.n_y - sk) % g.n_y)
            }
        });
        let moved = test.shifted(sj as f64 * g.dt, si as f64 * g.dx, sk as f64 * g.dy);
        let a = pair(&f, &test).unwrap();
        let b = pair(&shifted, &moved).unwrap();
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn zero_noise_gives_zero_lollipop() {
        let g = grid();
        let coeff = constant_coeff(g, 0.8);
        let l = build_lollipop_hat(&coeff, &ScalarField::zeros(g)).unwrap();
        assert_eq!(l.max_abs(), 0.0);
        let bad = SpaceTimeGrid::new(14, 24, 24, 0.005, 0.05, 0.05, -0.0123).unwrap();
        assert!(build_lollipop_hat(&constant_coeff(bad, 0.8), &ScalarField::zeros(bad)).is_err());
    }

    #[test]
    fn impulse_response_matches_kernel() {
        let g = grid();
        let a = 0.8;
        let coeff = constant_coeff(g, a);
        let j0 = time_origin_index(&g).unwrap();
        let mut xi = ScalarField::zeros(g);
        let src = g.index(j0 + 3, 12, 12);
        xi.values[src] = 1.0;
        let l = build_lollipop_hat(&coeff, &xi).unwrap();
        let (j, i, k) = (j0 + 9, 14, 11);
        let s = 6.0 * g.dt;
        let expect = g.dt * heat_kernel(&Sym2::scalar(a), s, [2.0 * g.dx, -g.dy]) * g.dx * g.dy;
        assert!((l.get(j, i, k) - expect).abs() < 1e-15, "{} vs {expect}", l.get(j, i, k));
        // the source slice itself carries the half-weighted lattice delta
        assert!((l.get(j0 + 3, 12, 12) - 0.5 * g.dt).abs() < 1e-15);
        // causality
        assert_eq!(l.get(j0 + 2, 12, 12), 0.0);
    }

    #[test]
    fn spectral_matches_direct() {
        let g = SpaceTimeGrid::new(16, 48, 48, 0.0025, 0.05, 0.05, -0.01).unwrap();
        let spec = MollifierSpec::new(0.1).unwrap();
        let xi_delta = mollify(&sample_white_noise(&g, 9).unwrap(), &spec).unwrap();
        for coeff in [
            constant_coeff(g, 0.7),
            build_coefficients(
                &ScalarField::from_fn(g, |p| 1.5 * (3.0 * p.x).sin() + p.y),
                &MatrixProfile::anisotropic_rotation(0.3, 0.6),
            )
            .unwrap(),
        ] {
            let d = build_lollipop_hat(&coeff, &xi_delta).unwrap();
            let scale = d.max_abs();
            let errs: Vec<f64> = [8, 16, 32]
                .iter()
                .map(|&nodes| {
                    let s = build_lollipop_hat_with(&coeff, &xi_delta, LollipopEngine::Spectral { nodes }).unwrap();
                    d.values.iter().zip(&s.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
                })
                .collect();
            assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
            let err = errs[2] * scale;
            assert!(err < 1e-5 * scale, "err {err} scale {scale}");
        }
    }

    #[test]
    fn tree_identities_hold() {
        let g = SpaceTimeGrid::new(12, 24, 24, 0.0025, 0.05, 0.05, -0.01).unwrap();
        let spec = RealizationSpec {
            grid: g,
            mollifier: MollifierSpec::new(0.1).unwrap(),
            kernel: CorrelationKernel::gaussian_bump(0.15, 4.0),
            profile: MatrixProfile::isotropic_logistic(0.3),
        };
        let inputs = TreeInputs::sample(&spec, 11, 0).unwrap();
        let trees = inputs.trees(&spec, TreeOptions::default()).unwrap();
        assert!(trees.identity_residual() <= 1e-12);
        assert!(trees.c_cherry.values.iter().all(|c| *c >= 0.0));
        assert!(trees.lollipop_hat.is_finite());
    }

    #[test]
    fn x_quantities_agree_with_trees() {
        let g = SpaceTimeGrid::new(40, 32, 32, 0.0025, 0.05, 0.05, -0.01).unwrap();
        let spec = MollifierSpec::new(0.1).unwrap();
        let coeff = constant_coeff(g, 0.6);
        let xi_delta = mollify(&sample_white_noise(&g, 4).unwrap(), &spec).unwrap();
        let trees = build_trees_with(&coeff, &xi_delta, &spec, TreeOptions {
            engine: LollipopEngine::Direct,
            cherry_table: None,
        })
        .unwrap();
        let test = TestFunction::new(0.2, Point::new(0.04, 0.0, 0.0)).unwrap();
        let eta = ScalarField::from_fn(g, |p| test.eval(p));
        let x1 = x1_quantity(&eta, &coeff, &xi_delta).unwrap();
        assert!((x1 - pair(&trees.lollipop_hat, &test).unwrap()).abs() < 1e-10);
        let x2 = x2_quantity(&eta, &coeff, &xi_delta, &spec).unwrap();
        assert!((x2 - pair(&trees.cherry_bar, &test).unwrap()).abs() < 1e-10);
        let x3 = x3_quantity(&test, &coeff, &xi_delta, &spec).unwrap();
        assert!((x3 - pair(&trees.chickenfoot_bar, &test).unwrap()).abs() < 1e-10);

        let zero = ScalarField::zeros(g);
        assert_eq!(x1_quantity(&zero, &coeff, &xi_delta).unwrap(), 0.0);
        assert_eq!(x3_quantity(&test, &coeff, &zero, &spec).unwrap(), 0.0);
        // without noise only the pairing term survives
        let x2_0 = x2_quantity(&eta, &coeff, &zero, &spec).unwrap();
        let c_pair = pair(&trees.c_cherry, &test).unwrap();
        assert!((x2_0 + c_pair).abs() <= 1e-12 * c_pair.abs());
    }

    #[test]
    fn x1_impulse_oracle() {
        let g = grid();
        let coeff = build_coefficients(
            &ScalarField::from_fn(g, |p| 2.0 * p.x - p.y),
            &MatrixProfile::isotropic_logistic(0.4),
        )
        .unwrap();
        let j0 = time_origin_index(&g).unwrap();
        let src = (j0 + 2, 10, 13);
        let mut xi = ScalarField::zeros(g);
        xi.values[g.index(src.0, src.1, src.2)] = 1.0;
        let chi = ScalarField::from_fn(g, |p| {
            let r2 = p.x * p.x + p.y * p.y;
            if p.t > 0.02 && r2 < 0.09 {
                1.0 - r2 / 0.09
            } else {
                0.0
            }
        });
        let got = x1_quantity(&chi, &coeff, &xi).unwrap();
        let mut want = 0.0;
        for idx in 0..g.len() {
            let (j, i, k) = g.unindex(idx);
            if chi.values[idx] == 0.0 || j < src.0 {
                continue;
            }
            let a = coeff.at(j, i, k);
            let w = if j == src.0 { 0.5 } else { 1.0 } * g.dt;
            let col = if j == src.0 {
                if (i, k) == (src.1, src.2) {
                    1.0
                } else {
                    0.0
                }
            } else {
                let s = (j - src.0) as f64 * g.dt;
                let d = [g.wrap_dx(g.x(i) - g.x(src.1)), g.wrap_dy(g.y(k) - g.y(src.2))];
                let reach = 6.0 * (2.0 * s * a.eigenvalues().1).sqrt();
                if d[0] * d[0] + d[1] * d[1] > reach * reach {
                    0.0
                } else {
                    heat_kernel(&a, s, d) * g.dx * g.dy
                }
            };
            want += chi.values[idx] * w * col * g.cell_volume();
        }
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{got} vs {want}");
    }
}
