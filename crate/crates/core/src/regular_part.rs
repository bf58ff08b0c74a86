//! Variable-coefficient parabolic solver, Green columns, the regular part
//! `R = Gamma - K_z` and its moment experiment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corr_field::CoeffField;
use crate::error::{Error, Result};
use crate::gauss_kernels::heat_kernel;
use crate::lattice_noise::{ScalarField, SpaceTimeGrid};
use crate::linalg::Sym2;
use crate::renorm_trees::{frozen_solution_spectral, pair, time_origin_index, FrozenScheme, RealizationSpec, TestFunction, TreeInputs};
use crate::stats::{abs_moment_root, ols, MeanEstimate, MomentEstimate};

/// Implicit Euler for `d_t u = div(a grad u)` with a five-point flux
/// discretization plus centred cross terms, periodic in space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicSolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for ParabolicSolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 2000,
        }
    }
}

/// `-div(a grad .)` on one time slice.
struct SliceOperator<'a> {
    a: &'a [Sym2],
    nx: usize,
    ny: usize,
    dx: f64,
    dy: f64,
}

impl<'a> SliceOperator<'a> {
    fn new(coeff: &'a CoeffField, j: usize) -> Self {
        let g = coeff.grid();
        let n = g.slice_len();
        Self {
            a: &coeff.a[j * n..(j + 1) * n],
            nx: g.n_x,
            ny: g.n_y,
            dx: g.dx,
            dy: g.dy,
        }
    }

    #[inline]
    fn idx(&self, i: usize, k: usize) -> usize {
        i * self.ny + k
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let (hx2, hy2, hxy) = (self.dx * self.dx, self.dy * self.dy, 4.0 * self.dx * self.dy);
        for i in 0..nx {
            let ip = (i + 1) % nx;
            let im = (i + nx - 1) % nx;
            for k in 0..ny {
                let kp = (k + 1) % ny;
                let km = (k + ny - 1) % ny;
                let c = self.idx(i, k);
                let a = &self.a[c];
                let ax_p = 0.5 * (a.a11 + self.a[self.idx(ip, k)].a11);
                let ax_m = 0.5 * (a.a11 + self.a[self.idx(im, k)].a11);
                let ay_p = 0.5 * (a.a22 + self.a[self.idx(i, kp)].a22);
                let ay_m = 0.5 * (a.a22 + self.a[self.idx(i, km)].a22);
                let uc = u[c];
                let mut lu = (ax_p * (u[self.idx(ip, k)] - uc) - ax_m * (uc - u[self.idx(im, k)])) / hx2
                    + (ay_p * (u[self.idx(i, kp)] - uc) - ay_m * (uc - u[self.idx(i, km)])) / hy2;
                let cross = self.a[self.idx(ip, k)].a12 * (u[self.idx(ip, kp)] - u[self.idx(ip, km)])
                    - self.a[self.idx(im, k)].a12 * (u[self.idx(im, kp)] - u[self.idx(im, km)])
                    + self.a[self.idx(i, kp)].a12 * (u[self.idx(ip, kp)] - u[self.idx(im, kp)])
                    - self.a[self.idx(i, km)].a12 * (u[self.idx(ip, km)] - u[self.idx(im, km)]);
                lu += cross / hxy;
                out[c] = -lu;
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let mut d = vec![0.0; nx * ny];
        for i in 0..nx {
            for k in 0..ny {
                let c = self.idx(i, k);
                let a = &self.a[c];
                let ax = a.a11 + 0.5 * (self.a[self.idx((i + 1) % nx, k)].a11 + self.a[self.idx((i + nx - 1) % nx, k)].a11);
                let ay = a.a22 + 0.5 * (self.a[self.idx(i, (k + 1) % ny)].a22 + self.a[self.idx(i, (k + ny - 1) % ny)].a22);
                d[c] = ax / (self.dx * self.dx) + ay / (self.dy * self.dy);
            }
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `(I - dt L_j) u = rhs` by Jacobi-preconditioned conjugate gradients,
/// starting from `u`.
fn implicit_step(coeff: &CoeffField, j: usize, rhs: &[f64], u: &mut [f64], cfg: &ParabolicSolverConfig) -> Result<usize> {
    let dt = coeff.grid().dt;
    let op = SliceOperator::new(coeff, j);
    let n = rhs.len();
    let precond: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / (1.0 + dt * d)).collect();
    let apply = |x: &[f64], out: &mut [f64]| {
        op.apply(x, out);
        out.iter_mut().zip(x).for_each(|(o, xv)| *o = xv + dt * *o);
    };
    let bnorm = dot(rhs, rhs).sqrt();
    if bnorm == 0.0 {
        u.iter_mut().for_each(|v| *v = 0.0);
        return Ok(0);
    }
    let mut ax = vec![0.0; n];
    apply(u, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&precond).map(|(a, p)| a * p).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..cfg.max_iterations {
        let rn = dot(&r, &r).sqrt();
        if rn <= cfg.tolerance * bnorm {
            return Ok(it);
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::LinearSolveFailure {
                residual: rn / bnorm,
                iterations: it,
            });
        }
        let alpha = rz / pap;
        for q in 0..n {
            u[q] += alpha * p[q];
            r[q] -= alpha * ap[q];
        }
        for q in 0..n {
            z[q] = r[q] * precond[q];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for q in 0..n {
            p[q] = z[q] + beta * p[q];
        }
    }
    let rn = dot(&r, &r).sqrt();
    if rn <= cfg.tolerance * bnorm {
        return Ok(cfg.max_iterations);
    }
    Err(Error::LinearSolveFailure {
        residual: rn / bnorm,
        iterations: cfg.max_iterations,
    })
}

/// `Gamma(., z')` on the slices `t >= t'`.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenColumn {
    pub grid: SpaceTimeGrid,
    pub source: (usize, usize, usize),
    /// Slices `source.0..n_t`, each `n_x * n_y` values.
    pub values: Vec<f64>,
}

impl GreenColumn {
    pub fn at(&self, j: usize, i: usize, k: usize) -> f64 {
        if j < self.source.0 {
            return 0.0;
        }
        let n = self.grid.slice_len();
        self.values[(j - self.source.0) * n + i * self.grid.n_y + k]
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.grid.slice_len();
        let o = (j - self.source.0) * n;
        &self.values[o..o + n]
    }

    /// `sum_x Gamma(t_j, x) dx dy`.
    pub fn mass(&self, j: usize) -> f64 {
        self.slice(j).iter().sum::<f64>() * self.grid.dx * self.grid.dy
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_binary(&self, path: &std::path::Path) -> Result<()> {
        let mut field = ScalarField::zeros(self.grid);
        let n = self.grid.slice_len();
        field.values[self.source.0 * n..].copy_from_slice(&self.values);
        field.write_binary(path)
    }
}

/// Evolves the lattice delta of unit mass at `source` with the implicit scheme.
pub fn solve_parabolic(coeff: &CoeffField, source: (usize, usize, usize), cfg: &ParabolicSolverConfig) -> Result<GreenColumn> {
    let g = coeff.grid();
    let (j1, i1, k1) = source;
    if j1 + 1 >= g.n_t || i1 >= g.n_x || k1 >= g.n_y {
        return Err(Error::InvalidGrid(format!("source {source:?} has no later slice on the grid")));
    }
    let n = g.slice_len();
    let mut values = vec![0.0; (g.n_t - j1) * n];
    values[i1 * g.n_y + k1] = 1.0 / (g.dx * g.dy);
    for j in j1 + 1..g.n_t {
        let (prev, next) = values.split_at_mut((j - j1) * n);
        let rhs = &prev[(j - j1 - 1) * n..];
        let u = &mut next[..n];
        u.copy_from_slice(rhs);
        implicit_step(coeff, j, rhs, u, cfg)?;
    }
    Ok(GreenColumn { grid: g, source, values })
}

/// `v` with `v = 0` on `t <= 0` and
/// `(v_j - v_{j-1}) / dt = div(a_j grad v_j) + f_j`, i.e. `int Gamma f`.
pub fn solve_with_source(coeff: &CoeffField, source: &ScalarField, cfg: &ParabolicSolverConfig) -> Result<ScalarField> {
    let g = coeff.grid();
    if source.grid != g {
        return Err(Error::GridMismatch);
    }
    let j0 = time_origin_index(&g)?;
    let n = g.slice_len();
    let mut out = vec![0.0; g.len()];
    let mut rhs = vec![0.0; n];
    for j in j0 + 1..g.n_t {
        let (prev, next) = out.split_at_mut(j * n);
        let vprev = &prev[(j - 1) * n..];
        for q in 0..n {
            rhs[q] = vprev[q] + g.dt * source.values[j * n + q];
        }
        let u = &mut next[..n];
        u.copy_from_slice(vprev);
        implicit_step(coeff, j, &rhs, u, cfg)?;
    }
    ScalarField::from_values(g, out)
}

/// `R(z, z') = Gamma(z, z') - K_z(z - z')` with the closed-form frozen kernel.
pub fn regular_part(
    coeff: &CoeffField,
    z: (usize, usize, usize),
    z_src: (usize, usize, usize),
    cfg: &ParabolicSolverConfig,
) -> Result<f64> {
    if z.0 <= z_src.0 {
        return Err(Error::InvalidGrid("regular part needs t > t'".into()));
    }
    let column = solve_parabolic(coeff, z_src, cfg)?;
    Ok(regular_part_from_column(&column, coeff, z))
}

/// `R(z, z')` for a column that has already been solved.
pub fn regular_part_from_column(column: &GreenColumn, coeff: &CoeffField, z: (usize, usize, usize)) -> f64 {
    column.at(z.0, z.1, z.2) - frozen_at(column, coeff, z)
}

fn frozen_at(column: &GreenColumn, coeff: &CoeffField, z: (usize, usize, usize)) -> f64 {
    let g = column.grid;
    let (j1, i1, k1) = column.source;
    let s = (z.0 - j1) as f64 * g.dt;
    let d = [g.wrap_dx(g.x(z.1) - g.x(i1)), g.wrap_dy(g.y(z.2) - g.y(k1))];
    heat_kernel(&coeff.at(z.0, z.1, z.2), s, d)
}

/// `int R(z, z') f(z') dz'` for every `z`, with `K_z` taken as the lattice
/// frozen kernel of the same implicit scheme, so that the field vanishes
/// for constant coefficients.
pub fn regular_part_field(coeff: &CoeffField, source: &ScalarField, cfg: &ParabolicSolverConfig, nodes: usize) -> Result<ScalarField> {
    let full = solve_with_source(coeff, source, cfg)?;
    let frozen = frozen_solution_spectral(coeff, source, nodes, FrozenScheme::ImplicitEuler)?;
    let values = full.values.iter().zip(&frozen.values).map(|(a, b)| a - b).collect();
    ScalarField::from_values(coeff.grid(), values)
}

/// Result of the regular-part moment experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularMomentReport {
    pub m_power: u32,
    pub lambda: f64,
    pub delta: f64,
    pub realizations: usize,
    pub mean: MeanEstimate,
    /// `E^{1/(2p)} [X^{2p}]` for `p = 1, 2`, reported as moments of order `2p`.
    pub moments: Vec<MomentEstimate>,
    pub values: Vec<f64>,
}

/// Pairings `X = (psi^lambda, (int R xi_delta)^m)` over realizations.
pub fn regular_part_moment_experiment(
    spec: &RealizationSpec,
    cfg: &ParabolicSolverConfig,
    m_power: u32,
    test: &TestFunction,
    realizations: usize,
    seed: u64,
    nodes: usize,
) -> Result<RegularMomentReport> {
    if !(1..=3).contains(&m_power) {
        return Err(Error::Config(format!("m_power must be 1, 2 or 3, got {m_power}")));
    }
    test.check_on(&spec.grid)?;
    let values = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let inputs = TreeInputs::sample(spec, seed, r as u64)?;
            let field = regular_part_field(&inputs.coeff, &inputs.xi_delta, cfg, nodes)?;
            let powered = ScalarField::from_values(field.grid, field.values.iter().map(|v| v.powi(m_power as i32)).collect())?;
            pair(&powered, test)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RegularMomentReport {
        m_power,
        lambda: test.lambda,
        delta: spec.mollifier.delta,
        realizations,
        mean: MeanEstimate::of(&values),
        moments: [2.0, 4.0].iter().map(|&q| abs_moment_root(&values, q)).collect(),
        values,
    })
}

/// Regression of `log E|R|` on `log (t - t')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub window: (f64, f64),
}

/// `E|R(z, z')|` at `x = x'` as a function of the lag, over realizations,
/// with the source at `t' = 0` in the middle of the box.
pub fn regular_part_decay_profile(
    spec: &RealizationSpec,
    cfg: &ParabolicSolverConfig,
    realizations: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let g = spec.grid;
    let j0 = time_origin_index(&g)?;
    let src = (j0, g.n_x / 2, g.n_y / 2);
    let per: Vec<Vec<f64>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let inputs = TreeInputs::sample(spec, seed, r as u64)?;
            let column = solve_parabolic(&inputs.coeff, src, cfg)?;
            Ok((j0 + 1..g.n_t)
                .map(|j| regular_part_from_column(&column, &inputs.coeff, (j, src.1, src.2)).abs())
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok((j0 + 1..g.n_t)
        .enumerate()
        .map(|(q, j)| {
            let s = (j - j0) as f64 * g.dt;
            let m = per.iter().map(|v| v[q]).sum::<f64>() / realizations.max(1) as f64;
            (s, m)
        })
        .collect())
}

pub fn fit_decay(profile: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = profile
        .iter()
        .filter(|(s, v)| *s >= window.0 - 1e-12 && *s <= window.1 + 1e-12 && *v > 0.0)
        .map(|(s, v)| (s.ln(), v.ln()))
        .collect();
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let f = ols(&x, &y)?;
    Ok(DecayFit {
        slope: f.slope,
        intercept: f.intercept,
        r2: f.r2,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr_field::{build_coefficients, MatrixProfile};
    use crate::lattice_noise::sample_white_noise;

    fn constant(grid: SpaceTimeGrid, a: Sym2) -> CoeffField {
        let mut c = build_coefficients(&ScalarField::zeros(grid), &MatrixProfile::isotropic_logistic(0.2)).unwrap();
        c.a.iter_mut().for_each(|m| *m = a);
        c
    }

    #[test]
    fn mass_and_positivity() {
        let g = SpaceTimeGrid::new(30, 32, 32, 0.005, 0.1, 0.1, 0.0).unwrap();
        let coeff = build_coefficients(
            &ScalarField::from_fn(g, |p| 2.0 * (2.0 * p.x).sin() + p.y + 3.0 * p.t),
            &MatrixProfile::isotropic_logistic(0.3),
        )
        .unwrap();
        let col = solve_parabolic(&coeff, (0, 16, 16), &ParabolicSolverConfig::default()).unwrap();
        for j in 0..g.n_t {
            assert!((col.mass(j) - 1.0).abs() < 1e-8, "slice {j}: {}", col.mass(j));
        }
        assert!(col.min_value() >= -1e-10);
        // anisotropic coefficients still conserve mass
        let aniso = build_coefficients(
            &ScalarField::from_fn(g, |p| (3.0 * p.x).cos() - p.y),
            &MatrixProfile::anisotropic_rotation(0.3, 0.5),
        )
        .unwrap();
        let col = solve_parabolic(&aniso, (2, 10, 20), &ParabolicSolverConfig::default()).unwrap();
        for j in 2..g.n_t {
            assert!((col.mass(j) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_coefficients_track_the_heat_kernel() {
        // L1 error at lag 0.25 under joint refinement dt ~ dx
        let errs: Vec<f64> = [(0.1, 0.01), (0.05, 0.005), (0.025, 0.0025)]
            .iter()
            .map(|&(dx, dt): &(f64, f64)| {
                let n = (6.4 / dx).round() as usize;
                let steps = (0.25 / dt).round() as usize;
                let g = SpaceTimeGrid::new(steps + 1, n, n, dt, dx, dx, 0.0).unwrap();
                let coeff = constant(g, Sym2::IDENTITY);
                let col = solve_parabolic(&coeff, (0, n / 2, n / 2), &ParabolicSolverConfig::default()).unwrap();
                let mut err = 0.0;
                for i in 0..n {
                    for k in 0..n {
                        let d = [g.x(i) - g.x(n / 2), g.y(k) - g.y(n / 2)];
                        err += (col.at(steps, i, k) - heat_kernel(&Sym2::IDENTITY, 0.25, d)).abs() * dx * dx;
                    }
                }
                err
            })
            .collect();
        let o1 = (errs[0] / errs[1]).log2();
        let o2 = (errs[1] / errs[2]).log2();
        assert!(o1 >= 0.9 && o2 >= 0.9, "errors {errs:?}");
    }

    #[test]
    fn discrete_frozen_kernel_cancels_for_constant_coefficients() {
        let g = SpaceTimeGrid::new(24, 32, 32, 0.005, 0.1, 0.1, -0.01).unwrap();
        let coeff = constant(g, Sym2::new(0.7, 0.1, 0.5));
        let f = sample_white_noise(&g, 3).unwrap();
        let r = regular_part_field(&coeff, &f, &ParabolicSolverConfig::default(), 8).unwrap();
        let v = solve_with_source(&coeff, &f, &ParabolicSolverConfig::default()).unwrap();
        assert!(r.max_abs() <= 1e-8 * v.max_abs(), "{} vs {}", r.max_abs(), v.max_abs());
    }

    #[test]
    fn decomposition_identity() {
        let g = SpaceTimeGrid::new(20, 32, 32, 0.005, 0.1, 0.1, 0.0).unwrap();
        let coeff = build_coefficients(
            &ScalarField::from_fn(g, |p| p.x - 2.0 * p.y),
            &MatrixProfile::isotropic_logistic(0.4),
        )
        .unwrap();
        let cfg = ParabolicSolverConfig::default();
        let col = solve_parabolic(&coeff, (0, 16, 16), &cfg).unwrap();
        for &z in &[(5, 16, 16), (12, 18, 15), (19, 10, 20)] {
            let r = regular_part_from_column(&col, &coeff, z);
            let k = frozen_at(&col, &coeff, z);
            assert!((r + k - col.at(z.0, z.1, z.2)).abs() <= 1e-12 * col.at(z.0, z.1, z.2).abs().max(1.0));
            assert!(r.is_finite());
        }
        assert!(regular_part(&coeff, (0, 1, 1), (0, 1, 1), &cfg).is_err());
    }
}
