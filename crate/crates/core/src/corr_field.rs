//! Correlation kernels `m`, the Gaussian driver `g = m * xi` and the
//! coefficient field `a = A(g)`.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_offset, Fft2};
use crate::lattice_noise::{Point, ScalarField, SpaceTimeGrid};
use crate::linalg::Sym2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `amp exp(-(|t| + |x|^2) / l^2)`
    GaussianBump,
    /// `amp (1 - t^2/l^4 - |x|^2/l^2)_+^3`
    CompactBump,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub family: KernelFamily,
    pub scale: f64,
    pub amplitude: f64,
    pub holder_alpha: f64,
    pub weight_sigma: f64,
}

impl CorrelationKernel {
    pub fn gaussian_bump(scale: f64, amplitude: f64) -> Self {
        Self {
            family: KernelFamily::GaussianBump,
            scale,
            amplitude,
            holder_alpha: 0.9,
            weight_sigma: 1.0,
        }
    }

    pub fn compact_bump(scale: f64, amplitude: f64) -> Self {
        Self {
            family: KernelFamily::CompactBump,
            scale,
            amplitude,
            holder_alpha: 0.9,
            weight_sigma: 1.0,
        }
    }

    pub fn zero() -> Self {
        Self {
            family: KernelFamily::Zero,
            scale: 1.0,
            amplitude: 0.0,
            holder_alpha: 0.9,
            weight_sigma: 1.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.family == KernelFamily::Zero || self.amplitude == 0.0
    }

    pub fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        let l2 = self.scale * self.scale;
        match self.family {
            KernelFamily::Zero => 0.0,
            KernelFamily::GaussianBump => self.amplitude * (-(t.abs() + x * x + y * y) / l2).exp(),
            KernelFamily::CompactBump => {
                let u = 1.0 - t * t / (l2 * l2) - (x * x + y * y) / l2;
                if u <= 0.0 {
                    0.0
                } else {
                    self.amplitude * u * u * u
                }
            }
        }
    }

    /// Both built-in families decay faster than any polynomial and are
    /// Hölder of every order below one in the parabolic metric.
    pub fn is_certified_for(&self, alpha: f64, sigma: f64) -> bool {
        alpha > 0.0 && alpha < 1.0 && sigma > 0.5
    }

    /// `||m||_{L^2}^2` in closed form.
    pub fn l2_norm_sq(&self) -> f64 {
        self.autocorrelation(0.0, 0.0, 0.0)
    }

    /// `<m, m(. + h)>` for a space-time shift `h = (tau, hx, hy)`.
    pub fn autocorrelation(&self, tau: f64, hx: f64, hy: f64) -> f64 {
        let l2 = self.scale * self.scale;
        let a2 = self.amplitude * self.amplitude;
        match self.family {
            KernelFamily::Zero => 0.0,
            KernelFamily::GaussianBump => {
                let time = (tau.abs() + l2) * (-tau.abs() / l2).exp();
                let space = 0.5 * PI * l2 * (-(hx * hx + hy * hy) / (2.0 * l2)).exp();
                a2 * time * space
            }
            KernelFamily::CompactBump => {
                // no closed form; product Gauss-Legendre over the support box
                let rule = crate::quadrature::gauss_legendre(48);
                let l = self.scale;
                let mut acc = 0.0;
                for (ti, tw) in rule.0.iter().zip(&rule.1) {
                    let t = ti * l2;
                    for (xi, xw) in rule.0.iter().zip(&rule.1) {
                        let x = xi * l;
                        for (yi, yw) in rule.0.iter().zip(&rule.1) {
                            let y = yi * l;
                            acc += tw * xw * yw * self.eval(t, x, y) * self.eval(t + tau, x + hx, y + hy);
                        }
                    }
                }
                acc * l2 * l * l
            }
        }
    }

    /// `||m(. + h) - m||_{L^2}^2`.
    pub fn increment_norm_sq(&self, tau: f64, hx: f64, hy: f64) -> f64 {
        (2.0 * (self.l2_norm_sq() - self.autocorrelation(tau, hx, hy))).max(0.0)
    }

    /// Besov-type constant `sup_h ||m(.+h) - m||^2 / |h|^{2 alpha}` over a
    /// log-spaced set of shifts in time and space.
    pub fn besov_constant_sq(&self, alpha: f64) -> f64 {
        let mut best: f64 = 0.0;
        for i in 0..=60 {
            let r = 10f64.powf(-3.0 + 4.0 * i as f64 / 60.0);
            for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
                // split |h|^2 = |tau| + |x|^2 between time and space
                let tau = frac * r * r;
                let hx = ((1.0 - frac) * r * r).sqrt();
                let v = self.increment_norm_sq(tau, hx, 0.0) / r.powf(2.0 * alpha);
                best = best.max(v);
            }
        }
        best
    }

    pub fn check_resolvable(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.is_zero() {
            return Ok(());
        }
        if self.scale < 2.0 * grid.dx.max(grid.dy) {
            return Err(Error::UnresolvableScale {
                scale: self.scale,
                reason: "correlation scale below twice the spatial step".into(),
            });
        }
        Ok(())
    }

    /// Time lags beyond which the kernel is dropped, in steps.
    fn time_reach(&self, dt: f64) -> usize {
        let l2 = self.scale * self.scale;
        match self.family {
            KernelFamily::CompactBump => (l2 / dt).ceil() as usize,
            _ => (36.0 * l2 / dt).ceil() as usize,
        }
    }

    /// Spectrum of the spatial factor at time lag `tau`, sampled on the
    /// periodic lattice, truncated at radius `6 l`, including `dx dy`.
    fn spatial_symbol(&self, grid: &SpaceTimeGrid, fft: &Fft2, tau: f64) -> Vec<Complex64> {
        let (nx, ny) = (grid.n_x, grid.n_y);
        let reach = 6.0 * self.scale;
        let mut k = vec![0.0; nx * ny];
        for i in 0..nx {
            let x = signed_offset(i, nx) as f64 * grid.dx;
            for j in 0..ny {
                let y = signed_offset(j, ny) as f64 * grid.dy;
                if x * x + y * y <= reach * reach {
                    let spatial = match self.family {
                        KernelFamily::GaussianBump => {
                            self.amplitude * (-(x * x + y * y) / (self.scale * self.scale)).exp()
                        }
                        _ => self.eval(tau, x, y),
                    };
                    k[i * ny + j] = spatial * grid.dx * grid.dy;
                }
            }
        }
        fft.forward_real(&k)
    }
}

/// `g = m * xi` from the noise on the grid only; cells outside the time
/// window contribute nothing.
pub fn build_driver(m: &CorrelationKernel, xi: &ScalarField) -> Result<ScalarField> {
    build_driver_impl::<rand_chacha::ChaCha8Rng>(m, xi, None)
}

/// `g = m * xi` where the noise before and after the time window is drawn
/// from `rng`, independent of `xi`, so that `g` is stationary in time.
pub fn build_driver_stationary<R: Rng>(m: &CorrelationKernel, xi: &ScalarField, rng: &mut R) -> Result<ScalarField> {
    build_driver_impl(m, xi, Some(rng))
}

fn build_driver_impl<R: Rng>(m: &CorrelationKernel, xi: &ScalarField, rng: Option<&mut R>) -> Result<ScalarField> {
    let grid = xi.grid;
    if m.is_zero() {
        return Ok(ScalarField::zeros(grid));
    }
    m.check_resolvable(&grid)?;
    let fft = Fft2::new(grid.n_x, grid.n_y);
    let n = grid.slice_len();
    let sd = grid.cell_volume().powf(-0.5);
    match m.family {
        KernelFamily::Zero => unreachable!(),
        KernelFamily::GaussianBump => {
            // exp(-|t|/l^2) by a forward and a backward first-order recursion
            let r = (-grid.dt / (m.scale * m.scale)).exp();
            let mut fwd = vec![0.0; n];
            let mut bwd = vec![0.0; n];
            if let Some(rng) = rng {
                let past = sd / (1.0 - r * r).sqrt();
                fwd.iter_mut().for_each(|v| *v = past * r * rng.sample::<f64, _>(StandardNormal));
                bwd.iter_mut().for_each(|v| *v = past * r * rng.sample::<f64, _>(StandardNormal));
            }
            let mut time = vec![0.0; grid.len()];
            for j in 0..grid.n_t {
                let src = xi.slice(j);
                for s in 0..n {
                    fwd[s] = src[s] + if j == 0 { fwd[s] } else { r * fwd[s] };
                }
                time[j * n..(j + 1) * n].copy_from_slice(&fwd);
            }
            for j in (0..grid.n_t).rev() {
                let dst = &mut time[j * n..(j + 1) * n];
                for s in 0..n {
                    dst[s] += bwd[s];
                    dst[s] *= grid.dt;
                    bwd[s] = r * (bwd[s] + xi.values[j * n + s]);
                }
            }
            let symbol = m.spatial_symbol(&grid, &fft, 0.0);
            let mut out = vec![0.0; grid.len()];
            for j in 0..grid.n_t {
                let mut spec = fft.forward_real(&time[j * n..(j + 1) * n]);
                spec.iter_mut().zip(&symbol).for_each(|(a, b)| *a *= b);
                out[j * n..(j + 1) * n].copy_from_slice(&fft.inverse_real(&spec));
            }
            ScalarField::from_values(grid, out)
        }
        KernelFamily::CompactBump => {
            let reach = m.time_reach(grid.dt);
            let mut rng = rng;
            // extended noise spectra, `reach` slices of padding on each side
            let total = grid.n_t + 2 * reach;
            let mut spectra = Vec::with_capacity(total);
            for e in 0..total {
                let slice: Vec<f64> = if e >= reach && e < reach + grid.n_t {
                    xi.slice(e - reach).to_vec()
                } else if let Some(rng) = rng.as_deref_mut() {
                    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
                } else {
                    vec![0.0; n]
                };
                spectra.push(fft.forward_real(&slice));
            }
            let symbols: Vec<Vec<Complex64>> = (0..=2 * reach)
                .map(|l| m.spatial_symbol(&grid, &fft, (l as f64 - reach as f64) * grid.dt))
                .collect();
            let mut out = vec![0.0; grid.len()];
            for j in 0..grid.n_t {
                let mut acc = vec![Complex64::new(0.0, 0.0); n];
                for (l, sym) in symbols.iter().enumerate() {
                    // g(t_j) collects xi(t_j - tau) with tau = (l - reach) dt
                    let src = &spectra[j + 2 * reach - l];
                    acc.iter_mut().zip(sym.iter().zip(src)).for_each(|(a, (s, x))| *a += s * x);
                }
                let vals = fft.inverse_real(&acc);
                out[j * n..(j + 1) * n].iter_mut().zip(vals).for_each(|(o, v)| *o = v * grid.dt);
            }
            ScalarField::from_values(grid, out)
        }
    }
}

/// Lattice variance of `g(z)` for the stationary driver, `sum m^2 dV`.
pub fn lattice_driver_variance(m: &CorrelationKernel, grid: &SpaceTimeGrid) -> f64 {
    if m.is_zero() {
        return 0.0;
    }
    let reach_x = (6.0 * m.scale / grid.dx).ceil() as i64;
    let reach_y = (6.0 * m.scale / grid.dy).ceil() as i64;
    let reach_t = m.time_reach(grid.dt) as i64;
    let mut space = 0.0;
    for a in -reach_x..=reach_x {
        for b in -reach_y..=reach_y {
            let (x, y) = (a as f64 * grid.dx, b as f64 * grid.dy);
            if x * x + y * y <= 36.0 * m.scale * m.scale {
                let v = match m.family {
                    KernelFamily::GaussianBump => (-(x * x + y * y) / (m.scale * m.scale)).exp(),
                    _ => 1.0,
                };
                space += v * v;
            }
        }
    }
    match m.family {
        KernelFamily::GaussianBump => {
            let r = (-grid.dt / (m.scale * m.scale)).exp();
            let time = (1.0 + r * r) / (1.0 - r * r);
            m.amplitude * m.amplitude * time * space * grid.cell_volume()
        }
        _ => {
            let mut acc = 0.0;
            for l in -reach_t..=reach_t {
                for a in -reach_x..=reach_x {
                    for b in -reach_y..=reach_y {
                        let v = m.eval(l as f64 * grid.dt, a as f64 * grid.dx, b as f64 * grid.dy);
                        acc += v * v;
                    }
                }
            }
            acc * grid.cell_volume()
        }
    }
}

fn logistic(g: f64) -> f64 {
    1.0 / (1.0 + (-g).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum ProfileKind {
    /// `(lambda + (1 - lambda) logistic(g)) Id`
    IsotropicLogistic,
    /// `R(theta) diag(d1, d2) R(theta)^T` with `theta = theta_max tanh(g)`,
    /// `d1 = lambda + (1 - lambda) logistic(g)`, `d2` the same at `-g`.
    AnisotropicRotation { theta_max: f64 },
}

/// Smooth uniformly elliptic map `A: R -> 2x2` matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixProfile {
    pub lambda: f64,
    pub kind: ProfileKind,
}

impl MatrixProfile {
    pub fn isotropic_logistic(lambda: f64) -> Self {
        Self {
            lambda,
            kind: ProfileKind::IsotropicLogistic,
        }
    }

    pub fn anisotropic_rotation(lambda: f64, theta_max: f64) -> Self {
        Self {
            lambda,
            kind: ProfileKind::AnisotropicRotation { theta_max },
        }
    }

    /// Derivatives of `A` are bounded at least up to this order.
    pub const DECLARED_SMOOTHNESS: usize = 4;

    pub fn apply(&self, g: f64) -> Sym2 {
        let lam = self.lambda;
        match self.kind {
            ProfileKind::IsotropicLogistic => Sym2::scalar(lam + (1.0 - lam) * logistic(g)),
            ProfileKind::AnisotropicRotation { theta_max } => {
                let theta = theta_max * g.tanh();
                let (s, c) = theta.sin_cos();
                let d1 = lam + (1.0 - lam) * logistic(g);
                let d2 = lam + (1.0 - lam) * logistic(-g);
                Sym2::new(c * c * d1 + s * s * d2, c * s * (d1 - d2), s * s * d1 + c * c * d2)
            }
        }
    }
}

/// Per-site coefficient field with its driver.
#[derive(Debug, Clone)]
pub struct CoeffField {
    pub g: ScalarField,
    pub a: Vec<Sym2>,
    pub profile: MatrixProfile,
}

impl CoeffField {
    pub fn grid(&self) -> SpaceTimeGrid {
        self.g.grid
    }

    pub fn at(&self, j: usize, i: usize, k: usize) -> Sym2 {
        self.a[self.g.grid.index(j, i, k)]
    }

    /// Scalar field of one matrix entry (0: a11, 1: a12, 2: a22).
    pub fn component(&self, which: usize) -> ScalarField {
        let values = self
            .a
            .iter()
            .map(|m| match which {
                0 => m.a11,
                1 => m.a12,
                _ => m.a22,
            })
            .collect();
        ScalarField {
            grid: self.g.grid,
            values,
        }
    }

    /// Flat binary export with four components per site: g, a11, a12, a22.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (g, m) in self.g.values.iter().zip(&self.a) {
            for v in [*g, m.a11, m.a12, m.a22] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        let sidecar = crate::lattice_noise::FieldSidecar {
            grid: self.g.grid,
            components: 4,
            layout: "row-major t,x,y; per site g,a11,a12,a22; little-endian f64".into(),
        };
        std::fs::write(
            crate::lattice_noise::sidecar_path(path),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }
}

/// Pointwise `a = A(g)`, checking the ellipticity window at every site.
pub fn build_coefficients(g: &ScalarField, profile: &MatrixProfile) -> Result<CoeffField> {
    let lam = profile.lambda;
    let tol = 1e-12;
    let mut a = Vec::with_capacity(g.values.len());
    for (site, &gv) in g.values.iter().enumerate() {
        let m = profile.apply(gv);
        let (lo, hi) = m.eigenvalues();
        if !m.is_finite() || lo < lam - tol || hi > 1.0 + tol {
            return Err(Error::EllipticityViolation {
                site,
                min_eig: lo,
                max_eig: hi,
                lambda: lam,
            });
        }
        a.push(m);
    }
    Ok(CoeffField {
        g: g.clone(),
        a,
        profile: *profile,
    })
}

/// Parabolic cylinder `[t, t + r^2) x B_r(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub base: Point,
    pub radius: f64,
}

impl Cylinder {
    pub fn contains(&self, p: &Point) -> bool {
        let (dx, dy) = (p.x - self.base.x, p.y - self.base.y);
        p.t >= self.base.t && p.t < self.base.t + self.radius * self.radius && dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Discrete Hölder seminorm `sup |f(z) - f(z')| / |z - z'|^alpha` over node
/// pairs inside the cylinder, parabolic distance. Quadratic in the node count.
pub fn holder_seminorm_estimate(field: &ScalarField, alpha: f64, cylinder: &Cylinder) -> Result<f64> {
    let grid = field.grid;
    let mut nodes: Vec<(Point, f64)> = Vec::new();
    for (idx, &v) in field.values.iter().enumerate() {
        let (j, i, k) = grid.unindex(idx);
        let p = grid.point(j, i, k);
        if cylinder.contains(&p) {
            nodes.push((p, v));
        }
    }
    if nodes.len() < 16 {
        return Err(Error::EmptyRegion {
            found: nodes.len(),
            needed: 16,
        });
    }
    let mut best: f64 = 0.0;
    for (a, (pa, va)) in nodes.iter().enumerate() {
        for (pb, vb) in &nodes[a + 1..] {
            let d = pa.parabolic_distance(pb);
            best = best.max((va - vb).abs() / d.powf(alpha));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use crate::lattice_noise::{sample_white_noise, stream_rng, StreamRole};

    #[test]
    fn zero_family_gives_zero_driver() {
        let g = SpaceTimeGrid::square(8, 16, 0.01, 0.8, 0.0).unwrap();
        let xi = sample_white_noise(&g, 1).unwrap();
        let d = build_driver(&CorrelationKernel::zero(), &xi).unwrap();
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn closed_form_norm_matches_lattice_sum() {
        let m = CorrelationKernel::gaussian_bump(0.3, 2.0);
        let g = SpaceTimeGrid::square(4, 128, 0.001, 3.2, 0.0).unwrap();
        let lattice = lattice_driver_variance(&m, &g);
        let exact = m.l2_norm_sq();
        assert!((lattice - exact).abs() / exact < 1e-3, "{lattice} vs {exact}");
    }

    #[test]
    fn impulse_response_matches_kernel() {
        for m in [CorrelationKernel::gaussian_bump(0.25, 1.5), CorrelationKernel::compact_bump(0.3, 1.0)] {
            let g = SpaceTimeGrid::square(40, 32, 0.005, 0.8, 0.0).unwrap();
            let mut xi = ScalarField::zeros(g);
            let src = (20, 16, 16);
            xi.values[g.index(src.0, src.1, src.2)] = 1.0 / g.cell_volume();
            let d = build_driver(&m, &xi).unwrap();
            let z0 = g.point(src.0, src.1, src.2);
            let mut worst: f64 = 0.0;
            for idx in 0..g.len() {
                let (j, i, k) = g.unindex(idx);
                let p = g.point(j, i, k);
                let (dx, dy) = (g.wrap_dx(p.x - z0.x), g.wrap_dy(p.y - z0.y));
                let exact = if dx * dx + dy * dy <= 36.0 * m.scale * m.scale {
                    m.eval(p.t - z0.t, dx, dy)
                } else {
                    0.0
                };
                worst = worst.max((d.values[idx] - exact).abs());
            }
            assert!(worst < 1e-10 * m.amplitude, "{:?}: {worst}", m.family);
        }
    }

    #[test]
    fn stationary_driver_has_flat_variance_in_time() {
        let m = CorrelationKernel::gaussian_bump(0.3, 3.0);
        let g = SpaceTimeGrid::square(16, 32, 0.02, 1.6, 0.0).unwrap();
        let target = lattice_driver_variance(&m, &g);
        let reps = 300;
        let mut first = 0.0;
        let mut last = 0.0;
        for r in 0..reps {
            let xi = crate::lattice_noise::sample_white_noise_realization(&g, 9, r).unwrap();
            let mut rng = stream_rng(9, r, StreamRole::Complement);
            let d = build_driver_stationary(&m, &xi, &mut rng).unwrap();
            first += d.slice(0).iter().map(|v| v * v).sum::<f64>();
            last += d.slice(15).iter().map(|v| v * v).sum::<f64>();
        }
        let norm = (reps as usize * g.slice_len()) as f64;
        for v in [first / norm, last / norm] {
            assert!((v - target).abs() / target < 0.1, "{v} vs {target}");
        }
    }

    #[test]
    fn coefficient_midpoint_and_ellipticity() {
        let grid = SpaceTimeGrid::square(2, 4, 0.1, 1.0, 0.0).unwrap();
        let g = ScalarField::zeros(grid);
        let c = build_coefficients(&g, &MatrixProfile::isotropic_logistic(0.5)).unwrap();
        for m in &c.a {
            let (lo, hi) = m.eigenvalues();
            assert!((lo - 0.75).abs() < 1e-15 && (hi - 0.75).abs() < 1e-15);
        }
        let mut rng = stream_rng(3, 0, StreamRole::Auxiliary);
        let profiles = [MatrixProfile::isotropic_logistic(0.3), MatrixProfile::anisotropic_rotation(0.3, 0.7)];
        for p in profiles {
            for _ in 0..200_000 {
                let gv: f64 = 4.0 * rng.sample::<f64, _>(StandardNormal);
                let (lo, hi) = p.apply(gv).eigenvalues();
                assert!(lo >= 0.3 - 1e-12 && hi <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn profile_derivatives_are_bounded() {
        let p = MatrixProfile::anisotropic_rotation(0.4, 0.8);
        let h = 1e-2;
        let mut worst: f64 = 0.0;
        for i in -3000..=3000 {
            let g = i as f64 * 0.01;
            // fourth central difference of every entry
            let f = |x: f64| p.apply(x);
            let d4 = |sel: fn(&Sym2) -> f64| {
                (sel(&f(g + 2.0 * h)) - 4.0 * sel(&f(g + h)) + 6.0 * sel(&f(g)) - 4.0 * sel(&f(g - h)) + sel(&f(g - 2.0 * h)))
                    / h.powi(4)
            };
            worst = worst.max(d4(|m| m.a11).abs()).max(d4(|m| m.a12).abs()).max(d4(|m| m.a22).abs());
        }
        assert!(worst.is_finite() && worst < 50.0, "{worst}");
    }

    #[test]
    fn holder_of_constant_and_lipschitz_fields() {
        let grid = SpaceTimeGrid::square(6, 40, 0.04, 2.0, 0.0).unwrap();
        let cyl = Cylinder {
            base: Point::new(0.0, 0.0, 0.0),
            radius: 1.0,
        };
        let c = ScalarField::constant(grid, 2.5);
        assert_eq!(holder_seminorm_estimate(&c, 0.5, &cyl).unwrap(), 0.0);
        let f = ScalarField::from_fn(grid, |p| p.x.abs());
        let v = holder_seminorm_estimate(&f, 1.0, &cyl).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
        let tiny = Cylinder {
            base: Point::new(0.0, 0.0, 0.0),
            radius: 0.05,
        };
        assert!(matches!(holder_seminorm_estimate(&f, 1.0, &tiny), Err(Error::EmptyRegion { .. })));
    }

    proptest! {
        #[test]
        fn profiles_are_uniformly_elliptic(g in -50.0f64..50.0, lam in 0.05f64..0.9, theta_max in 0.0f64..1.5) {
            for p in [MatrixProfile::isotropic_logistic(lam), MatrixProfile::anisotropic_rotation(lam, theta_max)] {
                let (lo, hi) = p.apply(g).eigenvalues();
                prop_assert!(lo >= lam - 1e-12 && hi <= 1.0 + 1e-12, "{lo} {hi}");
            }
        }
    }
}
