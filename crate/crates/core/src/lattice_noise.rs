//! Space-time grids, lattice white noise, the mollifier and Gaussian densities.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{gauss_legendre, integrate_fixed};

/// A point of space-time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Self { t, x, y }
    }

    /// Parabolic distance `sqrt(|t - t'| + |x - x'|^2)`.
    pub fn parabolic_distance(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        ((self.t - other.t).abs() + dx * dx + dy * dy).sqrt()
    }
}

/// Uniform lattice on `[t0, t0 + n_t dt) x [-L_x, L_x) x [-L_y, L_y)` with
/// periodic space. Values are stored row-major in the order t, x, y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub n_t: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub dt: f64,
    pub dx: f64,
    pub dy: f64,
    pub t0: f64,
}

impl SpaceTimeGrid {
    pub fn new(n_t: usize, n_x: usize, n_y: usize, dt: f64, dx: f64, dy: f64, t0: f64) -> Result<Self> {
        let grid = Self {
            n_t,
            n_x,
            n_y,
            dt,
            dx,
            dy,
            t0,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Square box of half-width `half_width` with `n` nodes per spatial axis.
    pub fn square(n_t: usize, n: usize, dt: f64, half_width: f64, t0: f64) -> Result<Self> {
        let dx = 2.0 * half_width / n as f64;
        Self::new(n_t, n, n, dt, dx, dx, t0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_t < 2 || self.n_x < 2 || self.n_y < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 nodes per axis, got {}x{}x{}",
                self.n_t, self.n_x, self.n_y
            )));
        }
        let steps_ok = [self.dt, self.dx, self.dy].iter().all(|h| h.is_finite() && *h > 0.0);
        if !steps_ok || !self.t0.is_finite() {
            return Err(Error::InvalidGrid("steps must be positive and finite".into()));
        }
        self.n_t
            .checked_mul(self.n_x)
            .and_then(|n| n.checked_mul(self.n_y))
            .filter(|&n| n <= isize::MAX as usize / 8)
            .ok_or(Error::Overflow {
                n_t: self.n_t,
                n_x: self.n_x,
                n_y: self.n_y,
            })?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn half_width_x(&self) -> f64 {
        0.5 * self.n_x as f64 * self.dx
    }

    pub fn half_width_y(&self) -> f64 {
        0.5 * self.n_y as f64 * self.dy
    }

    pub fn cell_volume(&self) -> f64 {
        self.dt * self.dx * self.dy
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }

    pub fn x(&self, i: usize) -> f64 {
        -self.half_width_x() + i as f64 * self.dx
    }

    pub fn y(&self, k: usize) -> f64 {
        -self.half_width_y() + k as f64 * self.dy
    }

    pub fn point(&self, j: usize, i: usize, k: usize) -> Point {
        Point::new(self.time(j), self.x(i), self.y(k))
    }

    #[inline]
    pub fn index(&self, j: usize, i: usize, k: usize) -> usize {
        (j * self.n_x + i) * self.n_y + k
    }

    pub fn unindex(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.n_y;
        let i = (idx / self.n_y) % self.n_x;
        let j = idx / (self.n_x * self.n_y);
        (j, i, k)
    }

    /// Index of the time node closest to `t`, if inside the grid.
    pub fn time_index(&self, t: f64) -> Option<usize> {
        let j = ((t - self.t0) / self.dt).round();
        (j >= 0.0 && (j as usize) < self.n_t).then_some(j as usize)
    }

    /// Index of the spatial node closest to `(x, y)` after periodic wrapping.
    pub fn space_index(&self, x: f64, y: f64) -> (usize, usize) {
        let wrap = |v: f64, l: f64, h: f64, n: usize| {
            let r = ((v + l) / h).round() as i64;
            r.rem_euclid(n as i64) as usize
        };
        (
            wrap(x, self.half_width_x(), self.dx, self.n_x),
            wrap(y, self.half_width_y(), self.dy, self.n_y),
        )
    }

    /// `dt / dx^2` within a factor 4 of one.
    pub fn is_parabolic(&self) -> bool {
        let r = self.dt / (self.dx * self.dy);
        (0.25..=4.0).contains(&r)
    }

    /// Periodic minimum-image displacement along x.
    pub fn wrap_dx(&self, d: f64) -> f64 {
        let p = 2.0 * self.half_width_x();
        d - p * (d / p).round()
    }

    pub fn wrap_dy(&self, d: f64) -> f64 {
        let p = 2.0 * self.half_width_y();
        d - p * (d / p).round()
    }
}

/// One lattice function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: SpaceTimeGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn from_values(grid: SpaceTimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(Point) -> f64>(grid: SpaceTimeGrid, f: F) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let (j, i, k) = grid.unindex(idx);
                f(grid.point(j, i, k))
            })
            .collect();
        Self { grid, values }
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize, k: usize) -> f64 {
        self.values[self.grid.index(j, i, k)]
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.values[j * n..(j + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Riemann-sum inner product `sum f g dV`.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(s * self.grid.cell_volume())
    }

    /// Writes the values as little-endian f64 plus a JSON sidecar `<path>.json`.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        let sidecar = FieldSidecar {
            grid: self.grid,
            components: 1,
            layout: "row-major t,x,y; little-endian f64".into(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let sidecar: FieldSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let values = read_f64_le(path)?;
        Self::from_values(sidecar.grid, values)
    }
}

/// JSON description written next to every binary export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSidecar {
    pub grid: SpaceTimeGrid,
    pub components: usize,
    pub layout: String,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Io(format!("{} is not a whole number of f64", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Which independent random stream a generator serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    Noise = 0,
    Complement = 1,
    Bootstrap = 2,
    Auxiliary = 3,
}

/// Generator for one (realization, role) pair. Streams never overlap.
pub fn stream_rng(seed: u64, realization: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((realization << 8) | role as u64);
    rng
}

/// Iid `N(0, 1/(dt dx dy))` cell values, a pure function of `(grid, seed)`.
pub fn sample_white_noise(grid: &SpaceTimeGrid, seed: u64) -> Result<ScalarField> {
    sample_white_noise_realization(grid, seed, 0)
}

pub fn sample_white_noise_realization(grid: &SpaceTimeGrid, seed: u64, realization: u64) -> Result<ScalarField> {
    grid.validate()?;
    let mut rng = stream_rng(seed, realization, StreamRole::Noise);
    let sd = grid.cell_volume().powf(-0.5);
    let values = (0..grid.len())
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(ScalarField { grid: *grid, values })
}

/// Normalizing constant of the time bump `c (1 - s^2)^4`.
pub const TIME_BUMP_NORM: f64 = 315.0 / 256.0;

/// Even polynomial bump on [-1, 1] with unit integral.
pub fn time_bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let u = 1.0 - s * s;
        let u2 = u * u;
        TIME_BUMP_NORM * u2 * u2
    }
}

/// The mollifier `rho_delta(t, x) = psi_delta(t) delta^-2 exp(-|x|^2 / delta^2)`.
/// Its spatial factor has mass pi, as written.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollifierSpec {
    pub delta: f64,
}

impl MollifierSpec {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::UnresolvableScale {
                scale: delta,
                reason: "delta must lie in (0, 1)".into(),
            });
        }
        Ok(Self { delta })
    }

    pub fn time_factor(&self, t: f64) -> f64 {
        let d2 = self.delta * self.delta;
        time_bump(t / d2) / d2
    }

    pub fn space_factor(&self, x: f64, y: f64) -> f64 {
        let d2 = self.delta * self.delta;
        (-(x * x + y * y) / d2).exp() / d2
    }

    pub fn rho(&self, t: f64, x: f64, y: f64) -> f64 {
        self.time_factor(t) * self.space_factor(x, y)
    }

    /// Total mass of `rho_delta`, equal to pi.
    pub fn mass(&self) -> f64 {
        PI
    }

    pub fn check_resolvable(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let d = self.delta;
        if d < 2.0 * grid.dx.max(grid.dy) {
            return Err(Error::UnresolvableScale {
                scale: d,
                reason: format!("delta below twice the spatial step {}", grid.dx.max(grid.dy)),
            });
        }
        if d * d < 2.0 * grid.dt {
            return Err(Error::UnresolvableScale {
                scale: d,
                reason: format!("delta^2 below twice the time step {}", grid.dt),
            });
        }
        Ok(())
    }

    /// Discrete time weights `psi_delta(l dt) dt` for lags `-r..=r`.
    pub fn time_taps(&self, dt: f64) -> Vec<f64> {
        let r = (self.delta * self.delta / dt).ceil() as i64;
        (-r..=r).map(|l| self.time_factor(l as f64 * dt) * dt).collect()
    }

    /// One-dimensional spatial weights `exp(-(l h)^2 / delta^2) h` truncated at `6 delta`.
    pub fn space_taps(&self, h: f64) -> Vec<f64> {
        let r = (6.0 * self.delta / h).ceil() as i64;
        (-r..=r)
            .map(|l| {
                let x = l as f64 * h;
                (-(x * x) / (self.delta * self.delta)).exp() * h
            })
            .collect()
    }
}

/// Convolution along the time axis with symmetric taps; zero outside the grid.
pub(crate) fn convolve_time(field: &ScalarField, taps: &[f64]) -> ScalarField {
    let g = field.grid;
    let r = (taps.len() / 2) as i64;
    let n = g.slice_len();
    let mut out = vec![0.0; g.len()];
    for j in 0..g.n_t {
        let dst = &mut out[j * n..(j + 1) * n];
        for (l, w) in taps.iter().enumerate() {
            let src_j = j as i64 - (l as i64 - r);
            if src_j < 0 || src_j >= g.n_t as i64 || *w == 0.0 {
                continue;
            }
            let src = field.slice(src_j as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    ScalarField { grid: g, values: out }
}

/// Periodic separable convolution of every time slice along x and then y.
pub(crate) fn convolve_space(field: &ScalarField, taps_x: &[f64], taps_y: &[f64]) -> ScalarField {
    let g = field.grid;
    let (nx, ny) = (g.n_x, g.n_y);
    let rx = (taps_x.len() / 2) as i64;
    let ry = (taps_y.len() / 2) as i64;
    let mut out = vec![0.0; g.len()];
    let mut tmp = vec![0.0; nx * ny];
    let mut padded = vec![0.0; ny + 2 * ry as usize];
    for j in 0..g.n_t {
        let src = field.slice(j);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..nx {
            let row = &mut tmp[i * ny..(i + 1) * ny];
            for (l, w) in taps_x.iter().enumerate() {
                let si = (i as i64 - (l as i64 - rx)).rem_euclid(nx as i64) as usize;
                for (d, s) in row.iter_mut().zip(&src[si * ny..(si + 1) * ny]) {
                    *d += w * s;
                }
            }
        }
        let dst = &mut out[j * nx * ny..(j + 1) * nx * ny];
        for i in 0..nx {
            let row = &tmp[i * ny..(i + 1) * ny];
            // periodic row padded by ry on both sides
            for (p, v) in padded.iter_mut().enumerate() {
                *v = row[(p as i64 - ry).rem_euclid(ny as i64) as usize];
            }
            for k in 0..ny {
                let mut acc = 0.0;
                for (l, w) in taps_y.iter().enumerate() {
                    acc += w * padded[k + 2 * ry as usize - l];
                }
                dst[i * ny + k] = acc;
            }
        }
    }
    ScalarField { grid: g, values: out }
}

/// `xi_delta = rho_delta * xi` by separable discrete convolution.
pub fn mollify(xi: &ScalarField, spec: &MollifierSpec) -> Result<ScalarField> {
    spec.check_resolvable(&xi.grid)?;
    let d2 = spec.delta * spec.delta;
    let time = convolve_time(xi, &spec.time_taps(xi.grid.dt));
    let mut out = convolve_space(&time, &spec.space_taps(xi.grid.dx), &spec.space_taps(xi.grid.dy));
    out.values.iter_mut().for_each(|v| *v /= d2);
    Ok(out)
}

/// `G_sigma(x) = exp(-|x|^2 / (2 sigma^2)) / (2 pi sigma^2)`.
pub fn gaussian_density(sigma: f64, x: [f64; 2]) -> f64 {
    let s2 = sigma * sigma;
    (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp() / (2.0 * PI * s2)
}

/// Time factor `(psi_delta * psi_delta)(t)`, exact up to rounding.
pub fn time_autoconvolution(spec: &MollifierSpec, t: f64) -> f64 {
    let d2 = spec.delta * spec.delta;
    let lo = (-d2).max(t - d2);
    let hi = d2.min(t + d2);
    if hi <= lo {
        return 0.0;
    }
    // the integrand is a polynomial of degree 16 on the overlap
    thread_local! {
        static RULE: (Vec<f64>, Vec<f64>) = gauss_legendre(9);
    }
    RULE.with(|rule| integrate_fixed(|s| spec.time_factor(s) * spec.time_factor(t - s), lo, hi, rule))
}

/// Spatial factor `(pi / (2 delta^2)) exp(-|x|^2 / (2 delta^2))`, the exact
/// self-convolution of `delta^-2 exp(-|x|^2 / delta^2)`.
pub fn space_autoconvolution(spec: &MollifierSpec, x: [f64; 2]) -> f64 {
    PI * PI * gaussian_density(spec.delta, x)
}

/// `rho_delta * rho_delta` at the space-time offset `(t, x)`.
pub fn mollifier_autoconvolution(spec: &MollifierSpec, z: Point) -> f64 {
    let tf = time_autoconvolution(spec, z.t);
    if tf == 0.0 {
        return 0.0;
    }
    tf * space_autoconvolution(spec, [z.x, z.y])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::quadrature::{integrate_adaptive, QuadratureTolerance};

    fn small_grid() -> SpaceTimeGrid {
        SpaceTimeGrid::new(40, 32, 32, 0.01, 0.1, 0.1, 0.0).unwrap()
    }

    #[test]
    fn white_noise_cell_variance() {
        let g = small_grid();
        let xi = sample_white_noise(&g, 11).unwrap();
        let n = xi.values.len() as f64;
        let var = xi.values.iter().map(|v| v * v).sum::<f64>() / n;
        // variance of the sample variance of a Gaussian is 2 sigma^4 / n
        let se = (2.0f64 / n).sqrt() * 1.0e4;
        assert!((var - 1.0e4).abs() < 3.0 * se, "var {var}");
        assert!(xi.values.len() >= 40_000);
    }

    #[test]
    fn white_noise_is_deterministic() {
        let g = small_grid();
        let a = sample_white_noise(&g, 5).unwrap();
        let b = sample_white_noise(&g, 5).unwrap();
        assert_eq!(a.values, b.values);
        let c = sample_white_noise(&g, 6).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn overflow_is_rejected() {
        let r = SpaceTimeGrid::new(usize::MAX / 2, 4, 4, 0.1, 0.1, 0.1, 0.0);
        assert!(matches!(r, Err(Error::Overflow { .. })));
        assert!(SpaceTimeGrid::new(1, 4, 4, 0.1, 0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn impulse_reproduces_mollifier() {
        let delta = 0.16;
        let g = SpaceTimeGrid::new(24, 48, 48, 0.002, 0.02, 0.02, -0.024).unwrap();
        let spec = MollifierSpec::new(delta).unwrap();
        let mut xi = ScalarField::zeros(g);
        let (j0, i0, k0) = (12, 24, 24);
        xi.values[g.index(j0, i0, k0)] = 1.0 / g.cell_volume();
        let out = mollify(&xi, &spec).unwrap();
        let z0 = g.point(j0, i0, k0);
        let peak = spec.rho(0.0, 0.0, 0.0);
        for idx in 0..g.len() {
            let (j, i, k) = g.unindex(idx);
            let p = g.point(j, i, k);
            let exact = spec.rho(p.t - z0.t, g.wrap_dx(p.x - z0.x), g.wrap_dy(p.y - z0.y));
            let r = (out.values[idx] - exact).abs() / peak;
            assert!(r < 0.02, "relative error {r}");
        }
        let zero = mollify(&ScalarField::zeros(g), &spec).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn mollify_rejects_unresolved_scale() {
        let g = small_grid();
        let spec = MollifierSpec::new(0.15).unwrap();
        let r = mollify(&ScalarField::zeros(g), &spec);
        assert!(matches!(r, Err(Error::UnresolvableScale { .. })));
    }

    #[test]
    fn mollifier_is_even_on_lattice() {
        let spec = MollifierSpec::new(0.3).unwrap();
        for &(t, x, y) in &[(0.01, 0.1, -0.2), (0.05, 0.0, 0.3), (0.089, -0.4, 0.05)] {
            assert_eq!(spec.rho(t, x, y), spec.rho(-t, -x, -y));
        }
        let taps = spec.time_taps(0.01);
        for l in 0..taps.len() {
            assert_eq!(taps[l], taps[taps.len() - 1 - l]);
        }
    }

    #[test]
    fn gaussian_density_values() {
        assert!((gaussian_density(1.0, [0.0, 0.0]) - 0.159154943).abs() < 1e-9);
        let h = 0.05;
        let n = (8.0 / h) as i64;
        let mut s = 0.0;
        for a in -n..=n {
            for b in -n..=n {
                let x = [a as f64 * h, b as f64 * h];
                if x[0] * x[0] + x[1] * x[1] <= 64.0 {
                    s += gaussian_density(1.0, x) * h * h;
                }
            }
        }
        assert!((s - 1.0).abs() < 1e-6, "mass {s}");
    }

    #[test]
    fn semigroup_on_fine_lattice() {
        let h = 0.02;
        let n = (8.0 / h) as i64;
        for &(s1, s2) in &[(1.0f64, 1.0f64), (0.5, 2.0)] {
            let target: f64 = (s1 * s1 + s2 * s2).sqrt();
            let mut worst: f64 = 0.0;
            for &p in &[[0.0, 0.0], [0.7, -0.3], [1.5, 1.1]] {
                let mut acc = 0.0;
                for a in -n..=n {
                    let u = a as f64 * h;
                    for b in -n..=n {
                        let v = b as f64 * h;
                        acc += gaussian_density(s1, [u, v]) * gaussian_density(s2, [p[0] - u, p[1] - v]);
                    }
                }
                worst = worst.max((acc * h * h - gaussian_density(target, p)).abs());
            }
            assert!(worst < 1e-4, "sup error {worst}");
        }
    }

    #[test]
    fn autoconvolution_support_symmetry_and_mass() {
        let spec = MollifierSpec::new(0.2).unwrap();
        let d2 = 0.04;
        assert_eq!(mollifier_autoconvolution(&spec, Point::new(2.0 * d2 + 1e-9, 0.0, 0.0)), 0.0);
        let z = Point::new(0.013, 0.05, -0.11);
        let zm = Point::new(-0.013, -0.05, 0.11);
        let (a, b) = (mollifier_autoconvolution(&spec, z), mollifier_autoconvolution(&spec, zm));
        assert!((a - b).abs() <= 1e-14 * a);
        // integral of the time factor by adaptive quadrature, spatial factor in closed form
        let tol = QuadratureTolerance::relative(1e-12);
        let time_mass = integrate_adaptive(|t| Ok(time_autoconvolution(&spec, t)), -2.0 * d2, 2.0 * d2, tol).unwrap();
        let psi_mass = integrate_adaptive(|t| Ok(spec.time_factor(t)), -d2, d2, tol).unwrap();
        let total = time_mass * PI * PI;
        let squared = (psi_mass * spec.mass()).powi(2);
        assert!((total - squared).abs() < 1e-6 * squared);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn index_round_trip(j in 0usize..40, i in 0usize..32, k in 0usize..32) {
            let g = small_grid();
            prop_assert_eq!(g.unindex(g.index(j, i, k)), (j, i, k));
        }

        #[test]
        fn wrapped_displacement_is_short(d in -20.0f64..20.0) {
            let g = small_grid();
            let w = g.wrap_dx(d);
            prop_assert!(w.abs() <= g.half_width_x() + 1e-12);
            let turns = (d - w) / (2.0 * g.half_width_x());
            prop_assert!((turns - turns.round()).abs() < 1e-9);
        }

        #[test]
        fn mollifier_is_even(delta in 0.05f64..0.9, t in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let m = MollifierSpec::new(delta).unwrap();
            let (s, r) = (t * delta * delta, [x * delta, y * delta]);
            prop_assert_eq!(m.rho(s, r[0], r[1]), m.rho(-s, -r[0], -r[1]));
            prop_assert!(m.rho(s, r[0], r[1]) >= 0.0);
        }
    }
}
