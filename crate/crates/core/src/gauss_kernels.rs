//! Frozen-coefficient heat kernels, heat-kernel bound certificates, the
//! convolution quantity and the two counterterms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::chebyshev::Chebyshev;
use crate::corr_field::{CoeffField, MatrixProfile};
use crate::error::{Error, Result};
use crate::lattice_noise::{gaussian_density, time_autoconvolution, MollifierSpec, Point, SpaceTimeGrid};
use crate::linalg::{gaussian_density_cov, Sym2};
use crate::quadrature::{integrate_2d, QuadratureTolerance};

/// The matrix `a(z)` frozen at a base point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrozenKernelSpec {
    pub base_matrix: Sym2,
    pub base_point: Point,
}

impl FrozenKernelSpec {
    pub fn new(base_matrix: Sym2, base_point: Point) -> Result<Self> {
        let det = base_matrix.det();
        if !(det > 0.0) || base_matrix.a11 <= 0.0 || !det.is_finite() {
            return Err(Error::SingularMatrix(det));
        }
        Ok(Self {
            base_matrix,
            base_point,
        })
    }
}

/// `K(s, y) = exp(-y.a^{-1}y / (4s)) / (4 pi s sqrt(det a))` for `s > 0`, else 0.
/// This is the density of `N(0, 2 s a)`.
#[inline]
pub fn heat_kernel(a: &Sym2, s: f64, y: [f64; 2]) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let det = a.det();
    let inv = Sym2::new(a.a22 / det, -a.a12 / det, a.a11 / det);
    (-inv.quad(y) / (4.0 * s)).exp() / (4.0 * PI * s * det.sqrt())
}

pub fn frozen_kernel(spec: &FrozenKernelSpec, s: f64, y: [f64; 2]) -> f64 {
    heat_kernel(&spec.base_matrix, s, y)
}

/// `L1` norm over `s in [0.5, 1]`, `|x|_inf <= 3` of the centred
/// finite-difference residual `(d_s - div(a grad)) K_a` with step `h` in
/// space and time.
pub fn heat_residual_l1(a: &Sym2, h: f64) -> f64 {
    let ns = (0.5 / h).round() as usize;
    let nx = (3.0 / h).round() as i64;
    let mut total = 0.0;
    for m in 0..=ns {
        let s = 0.5 + m as f64 * h;
        let w = if m == 0 || m == ns { 0.5 } else { 1.0 };
        let mut acc = 0.0;
        for i in -nx..=nx {
            let x = i as f64 * h;
            for k in -nx..=nx {
                let y = k as f64 * h;
                let kv = |dx: f64, dy: f64| heat_kernel(a, s, [x + dx, y + dy]);
                let dt = (heat_kernel(a, s + h, [x, y]) - heat_kernel(a, s - h, [x, y])) / (2.0 * h);
                let c = kv(0.0, 0.0);
                let dxx = (kv(h, 0.0) - 2.0 * c + kv(-h, 0.0)) / (h * h);
                let dyy = (kv(0.0, h) - 2.0 * c + kv(0.0, -h)) / (h * h);
                let dxy = (kv(h, h) - kv(h, -h) - kv(-h, h) + kv(-h, -h)) / (4.0 * h * h);
                acc += (dt - a.a11 * dxx - 2.0 * a.a12 * dxy - a.a22 * dyy).abs();
            }
        }
        total += w * acc * h * h * h;
    }
    total
}

/// Fourier symbol `exp(-s k.a k)` of the frozen kernel.
#[inline]
pub fn heat_symbol(a: &Sym2, s: f64, k: [f64; 2]) -> f64 {
    (-s * a.quad(k)).exp()
}

/// One probe offset `(s, y)` of a certificate search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub s: f64,
    pub y: [f64; 2],
    /// Probes in the far spatial shell or at the finest time scale. The
    /// prefactor is fitted on the others and must also cover these.
    pub holdout: bool,
}

/// Log-spaced offsets over three decades of time with spatial shells
/// `|y|^2 / s` up to `400 / lambda` in eight directions.
pub fn default_probes(lambda: f64) -> Vec<Probe> {
    let stretch = 1.0 / lambda.clamp(0.05, 1.0);
    let times: Vec<f64> = (0..=12).map(|i| 10f64.powf(-3.0 + 0.25 * i as f64)).collect();
    let shells = [0.0, 0.5, 2.0, 8.0, 32.0, 128.0, 256.0, 400.0];
    let mut probes = Vec::new();
    for (ti, &s) in times.iter().enumerate() {
        for (si, &q) in shells.iter().enumerate() {
            let r = (q * stretch * s).sqrt();
            let dirs = if q == 0.0 { 1 } else { 8 };
            for d in 0..dirs {
                let th = PI * d as f64 / 4.0 + 0.1;
                probes.push(Probe {
                    s,
                    y: [r * th.cos(), r * th.sin()],
                    holdout: ti == 0 || si >= 5,
                });
            }
        }
    }
    probes
}

/// Certifies `K(s, y) <= prefactor G_{sqrt(s)}(y / sqrt(C))` over probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatBoundCertificate {
    #[serde(rename = "C")]
    pub constant: f64,
    pub prefactor: f64,
    pub probes_checked: usize,
    pub violations: usize,
}

/// Envelope `G_{sqrt(s)}(y / sqrt(C))`.
pub fn heat_envelope(c: f64, s: f64, y: [f64; 2]) -> f64 {
    gaussian_density(s.sqrt(), [y[0] / c.sqrt(), y[1] / c.sqrt()])
}

/// Candidate constants `C = 2^k`, `k = -2..=8`.
pub fn certificate_candidates() -> Vec<f64> {
    (-2..=8).map(|k| 2f64.powi(k)).collect()
}

pub fn certify_heat_bound<K: Fn(f64, [f64; 2]) -> f64>(kernel: K, lambda: f64) -> Result<HeatBoundCertificate> {
    certify_heat_bound_on(kernel, &default_probes(lambda))
}

/// Smallest candidate `C` whose prefactor, fitted as the exact supremum of
/// the ratio over the non-holdout probes, also bounds the holdout probes.
/// A ratio that keeps growing into the far field or the small-time limit
/// therefore fails every candidate.
pub fn certify_heat_bound_on<K: Fn(f64, [f64; 2]) -> f64>(
    kernel: K,
    probes: &[Probe],
) -> Result<HeatBoundCertificate> {
    if probes.is_empty() {
        return Err(Error::EmptyRegion { found: 0, needed: 1 });
    }
    let values: Vec<f64> = probes.iter().map(|p| kernel(p.s, p.y).abs()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoBoundFound);
    }
    let slack = 1.0 + 1e-9;
    for c in certificate_candidates() {
        let ratios: Vec<f64> = probes
            .iter()
            .zip(&values)
            .map(|(p, v)| {
                if *v == 0.0 {
                    0.0
                } else {
                    v / heat_envelope(c, p.s, p.y)
                }
            })
            .collect();
        let fitted = probes
            .iter()
            .zip(&ratios)
            .filter(|(p, _)| !p.holdout)
            .fold(0.0f64, |m, (_, r)| m.max(*r));
        let all = ratios.iter().fold(0.0f64, |m, r| m.max(*r));
        if !all.is_finite() {
            continue;
        }
        if all <= fitted * slack {
            let violations = ratios.iter().filter(|r| **r > fitted * slack).count();
            return Ok(HeatBoundCertificate {
                constant: c,
                prefactor: fitted,
                probes_checked: probes.len(),
                violations,
            });
        }
    }
    Err(Error::NoBoundFound)
}

/// `C_{z,delta}(K1, K2)(z~)` for frozen kernels at `z` (outer) and `z~`
/// (inner), with both time integrals starting at 0.
pub fn convolution_quantity(outer: &FrozenKernelSpec, inner: &FrozenKernelSpec, delta: f64) -> Result<f64> {
    convolution_quantity_tol(outer, inner, delta, QuadratureTolerance::default())
}

pub fn convolution_quantity_tol(
    outer: &FrozenKernelSpec,
    inner: &FrozenKernelSpec,
    delta: f64,
    tol: QuadratureTolerance,
) -> Result<f64> {
    let spec = MollifierSpec { delta };
    let (z, zt) = (outer.base_point, inner.base_point);
    let (t, tt) = (z.t, zt.t);
    if t <= 0.0 || tt <= 0.0 {
        return Ok(0.0);
    }
    let diff = [z.x - zt.x, z.y - zt.y];
    let (a1, a2) = (outer.base_matrix, inner.base_matrix);
    let d2 = delta * delta;
    let band = 2.0 * d2;
    let integrand = |u: f64, v: f64| {
        let w = time_autoconvolution(&spec, u - v);
        if w == 0.0 {
            return 0.0;
        }
        let cov = a1.scale(2.0 * (t - u)).add(&a2.scale(2.0 * (tt - v))).add_scalar(d2);
        w * PI * PI * gaussian_density_cov(&cov, diff)
    };
    // split the band at the diagonal, where the time factor has a kink in its
    // higher derivatives, by integrating the two triangles separately
    let lower = integrate_2d(integrand, 0.0, t, |u| ((u - band).max(0.0), u.min(tt)), tol)?;
    let upper = integrate_2d(integrand, 0.0, t, |u| (u.max(0.0), (u + band).min(tt)), tol)?;
    Ok(lower + upper)
}

/// One probe of the logarithmic bound on `C_{z,delta}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogBoundProbe {
    pub delta: f64,
    pub t: f64,
    pub t_tilde: f64,
    pub distance: f64,
    pub value: f64,
    /// `value / (1 + |log distance|)`.
    pub ratio: f64,
}

/// `C_{z,delta}(K_z, K_z~)(z~) / (1 + |log|x - x~||)` at `count` random pairs
/// for every `delta`: times uniform in `[0.05, t_max]`, distances
/// log-uniform in `d_range`, matrices `A(g)` with `g ~ N(0, 1)`.
pub fn convolution_log_ratios(
    profile: &MatrixProfile,
    deltas: &[f64],
    count: usize,
    d_range: (f64, f64),
    t_max: f64,
    seed: u64,
) -> Result<Vec<LogBoundProbe>> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    use rayon::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Sym2, Sym2, f64, f64, f64, f64)> = (0..count)
        .map(|_| {
            let a1 = profile.apply(rng.sample(StandardNormal));
            let a2 = profile.apply(rng.sample(StandardNormal));
            let t = rng.random_range(0.05..t_max);
            let tt = rng.random_range(0.05..t_max);
            let d = (d_range.0.ln() + rng.random::<f64>() * (d_range.1 / d_range.0).ln()).exp();
            let angle = rng.random_range(0.0..2.0 * PI);
            (a1, a2, t, tt, d, angle)
        })
        .collect();
    let jobs: Vec<(f64, usize)> = deltas.iter().flat_map(|&d| (0..count).map(move |q| (d, q))).collect();
    jobs.par_iter()
        .map(|&(delta, q)| {
            let (a1, a2, t, tt, d, angle) = pairs[q];
            let outer = FrozenKernelSpec::new(a1, Point::new(t, 0.0, 0.0))?;
            let inner = FrozenKernelSpec::new(a2, Point::new(tt, d * angle.cos(), d * angle.sin()))?;
            let value = convolution_quantity(&outer, &inner, delta)?;
            Ok(LogBoundProbe {
                delta,
                t,
                t_tilde: tt,
                distance: d,
                value,
                ratio: value / (1.0 + d.ln().abs()),
            })
        })
        .collect()
}

/// Monte Carlo estimate of
/// `l_n = avg_{B_lambda^n} prod_i (1 + |log|x_i - x~||) prod_{(i,j) in alpha} (1 + |log|x_i - x_j||)`
/// and of the right-hand side
/// `|log lambda|^{#alpha} (1 + avg_{B_lambda} |log|x - x~||^2)^{n/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogConvolution {
    pub n: usize,
    pub alpha_sum: usize,
    pub lambda: f64,
    pub ell: f64,
    pub bound: f64,
    pub ratio: f64,
}

pub fn log_convolution_estimate(
    n: usize,
    alpha: &[(usize, usize)],
    lambda: f64,
    x_tilde: [f64; 2],
    samples: usize,
    seed: u64,
) -> LogConvolution {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut disc = || loop {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if p[0] * p[0] + p[1] * p[1] < 1.0 {
            return [lambda * p[0], lambda * p[1]];
        }
    };
    let lg = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).hypot(a[1] - b[1])).ln().abs();
    let (mut ell, mut sq) = (0.0, 0.0);
    for _ in 0..samples {
        let xs: Vec<[f64; 2]> = (0..n).map(|_| disc()).collect();
        let mut v: f64 = xs.iter().map(|x| 1.0 + lg(*x, x_tilde)).product();
        for &(i, j) in alpha {
            v *= 1.0 + lg(xs[i], xs[j]);
        }
        ell += v;
        sq += lg(xs[0], x_tilde).powi(2);
    }
    let ell = ell / samples as f64;
    let bound = lambda.ln().abs().powi(alpha.len() as i32) * (1.0 + sq / samples as f64).powf(n as f64 / 2.0);
    LogConvolution {
        n,
        alpha_sum: alpha.len(),
        lambda,
        ell,
        bound,
        ratio: ell / bound,
    }
}

/// `c^cherry_delta` at time `t` for the frozen matrix `a`.
pub fn cherry_counterterm(a: &Sym2, t: f64, spec: &MollifierSpec) -> Result<f64> {
    let k = FrozenKernelSpec::new(*a, Point::new(t, 0.0, 0.0))?;
    convolution_quantity(&k, &k, spec.delta)
}

/// `c^cherry_delta(z)` at the grid node `(j, i, k)` with the realized `a(z)`.
pub fn counterterm_cherry(coeff: &CoeffField, node: (usize, usize, usize), spec: &MollifierSpec) -> Result<f64> {
    let grid = coeff.grid();
    let t = grid.time(node.0);
    if t <= 0.0 {
        return Err(Error::InvalidGrid(format!("counterterm needs t(z) > 0, got {t}")));
    }
    cherry_counterterm(&coeff.at(node.0, node.1, node.2), t, spec)
}

pub fn counterterm_chickenfoot(c_cherry: f64, lollipop_hat_value: f64) -> f64 {
    3.0 * c_cherry * lollipop_hat_value
}

/// `c^cherry` on every time slice as a Chebyshev interpolant in the driver
/// value `g`, valid because `a = A(g)` pointwise.
#[derive(Debug, Clone)]
pub struct CherryTable {
    pub cheb: Chebyshev,
    /// `values[j][n]`: slice `j`, Chebyshev node `n`. Zero for `t_j <= 0`.
    pub values: Vec<Vec<f64>>,
}

impl CherryTable {
    pub fn build(
        grid: &SpaceTimeGrid,
        profile: &MatrixProfile,
        spec: &MollifierSpec,
        g_range: (f64, f64),
        nodes: usize,
    ) -> Result<Self> {
        let cheb = Chebyshev::new(g_range.0, g_range.1, nodes);
        let mut values = Vec::with_capacity(grid.n_t);
        for j in 0..grid.n_t {
            let t = grid.time(j);
            let row = if t <= 0.0 {
                vec![0.0; cheb.len()]
            } else {
                cheb.nodes()
                    .iter()
                    .map(|&g| cherry_counterterm(&profile.apply(g), t, spec))
                    .collect::<Result<Vec<f64>>>()?
            };
            values.push(row);
        }
        Ok(Self { cheb, values })
    }

    pub fn eval(&self, j: usize, g: f64) -> f64 {
        self.cheb.eval(&self.values[j], g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::quadrature::integrate_adaptive;

    #[test]
    fn kernel_at_origin_and_causality() {
        let k = FrozenKernelSpec::new(Sym2::IDENTITY, Point::new(0.0, 0.0, 0.0)).unwrap();
        assert!((frozen_kernel(&k, 1.0, [0.0, 0.0]) - 0.0795775).abs() < 1e-7);
        assert_eq!(frozen_kernel(&k, 0.0, [0.0, 0.0]), 0.0);
        assert_eq!(frozen_kernel(&k, -0.3, [0.1, 0.0]), 0.0);
        assert!(matches!(
            FrozenKernelSpec::new(Sym2::new(1.0, 1.0, 1.0), Point::new(0.0, 0.0, 0.0)),
            Err(Error::SingularMatrix(_))
        ));
    }

    #[test]
    fn kernel_has_unit_mass() {
        let a = Sym2::new(0.7, 0.2, 0.5);
        for s in [0.1f64, 1.0] {
            let tol = QuadratureTolerance {
                relative: 1e-10,
                absolute: 1e-13,
                max_evaluations: 400_000,
            };
            let r = 12.0 * (2.0 * s).sqrt();
            let mass = integrate_adaptive(
                |x| integrate_adaptive(|y| Ok(heat_kernel(&a, s, [x, y])), -r, r, tol),
                -r,
                r,
                tol,
            )
            .unwrap();
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        }
    }

    #[test]
    fn finite_difference_residual_is_second_order() {
        let a = Sym2::new(0.8, 0.25, 0.6);
        let r: Vec<f64> = [0.1, 0.05, 0.025].iter().map(|&h| heat_residual_l1(&a, h)).collect();
        for w in r.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.8, "residuals {r:?}");
        }
    }

    #[test]
    fn log_convolution_without_pairs_is_bounded() {
        // for n = 1 and no pairs, E(1 + |L|) <= sqrt(2 (1 + E L^2))
        for k in 1..=3 {
            let r = log_convolution_estimate(1, &[], (-(k as f64)).exp(), [0.0, 0.0], 20_000, 4);
            assert!(r.ratio <= std::f64::consts::SQRT_2 && r.ratio > 0.5, "{r:?}");
        }
    }

    #[test]
    fn log_ratio_probes_are_finite() {
        let probes = convolution_log_ratios(&MatrixProfile::isotropic_logistic(0.3), &[0.2], 4, (0.05, 0.8), 1.0, 1).unwrap();
        assert_eq!(probes.len(), 4);
        assert!(probes.iter().all(|p| p.ratio.is_finite() && p.ratio > 0.0));
    }

    #[test]
    fn identity_certificate_is_two_with_half_prefactor() {
        let cert = certify_heat_bound(|s, y| heat_kernel(&Sym2::IDENTITY, s, y), 0.5).unwrap();
        assert_eq!(cert.constant, 2.0);
        assert!((cert.prefactor - 0.5).abs() < 1e-12);
        assert_eq!(cert.violations, 0);
    }

    #[test]
    fn zero_and_flat_kernels() {
        let cert = certify_heat_bound(|_, _| 0.0, 0.5).unwrap();
        assert_eq!(cert.constant, 0.25);
        assert_eq!(cert.prefactor, 0.0);
        let flat = certify_heat_bound(|s, _| if s > 0.0 { 1.0 / s } else { 0.0 }, 0.5);
        assert!(matches!(flat, Err(Error::NoBoundFound)));
    }

    #[test]
    fn elliptic_matrices_certify_at_two() {
        let a = Sym2::new(0.6, 0.15, 0.9);
        let cert = certify_heat_bound(|s, y| heat_kernel(&a, s, y), 0.5).unwrap();
        assert!(cert.constant <= 2.0);
        assert!(cert.prefactor <= 1.0 / (2.0 * a.det().sqrt()) + 1e-12);
    }

    #[test]
    fn chickenfoot_arithmetic() {
        assert_eq!(counterterm_chickenfoot(0.0, 1.3), 0.0);
        assert_eq!(counterterm_chickenfoot(1.3, 0.0), 0.0);
        assert_eq!(counterterm_chickenfoot(2.0, 0.5), 3.0);
    }

    #[test]
    fn time_boundary_case_is_finite() {
        let k = FrozenKernelSpec::new(Sym2::IDENTITY, Point::new(0.0, 0.0, 0.0)).unwrap();
        let v = convolution_quantity(&k, &k, 0.1).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cherry_is_translation_invariant_for_constant_matrix() {
        let a = Sym2::scalar(0.75);
        let spec = MollifierSpec::new(0.1).unwrap();
        let k1 = FrozenKernelSpec::new(a, Point::new(0.4, 0.0, 0.0)).unwrap();
        let k2 = FrozenKernelSpec::new(a, Point::new(0.4, 0.3, -0.2)).unwrap();
        let c1 = convolution_quantity(&k1, &k1, spec.delta).unwrap();
        let c2 = convolution_quantity(&k2, &k2, spec.delta).unwrap();
        assert!((c1 - c2).abs() <= 1e-12 * c1);
    }

    proptest! {
        #[test]
        fn heat_kernel_is_even_and_positive(s in 0.01f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0, g in -3.0f64..3.0) {
            let a = crate::corr_field::MatrixProfile::anisotropic_rotation(0.3, 0.7).apply(g);
            let k = heat_kernel(&a, s, [x, y]);
            prop_assert!(k > 0.0 && k <= heat_kernel(&a, s, [0.0, 0.0]));
            prop_assert_eq!(k, heat_kernel(&a, s, [-x, -y]));
        }
    }
}
