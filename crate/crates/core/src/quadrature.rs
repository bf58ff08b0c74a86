//! Gauss-Legendre rules and adaptive Gauss-Kronrod (7,15) integration.

use crate::error::{Error, Result};

/// Abscissae and weights of the n-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..(n + 1) / 2 {
        // Chebyshev initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (1.0, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = ((2 * j - 1) as f64 * z * p2 - (j - 1) as f64 * p3) / j as f64;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let z_old = z;
            z = z_old - p1 / pp;
            if (z - z_old).abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Fixed Gauss-Legendre integration of `f` over [a, b].
pub fn integrate_fixed<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    rule.0
        .iter()
        .zip(&rule.1)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: FnMut(f64) -> Result<f64>>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center)?;
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx)?;
        let f2 = f(center + dx)?;
        kronrod += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    Ok((kronrod * half, ((kronrod - gauss) * half).abs()))
}

/// Tolerances and evaluation budget for the adaptive integrators.
#[derive(Debug, Clone, Copy)]
pub struct QuadratureTolerance {
    pub relative: f64,
    pub absolute: f64,
    pub max_evaluations: usize,
}

impl Default for QuadratureTolerance {
    fn default() -> Self {
        Self {
            relative: 1e-4,
            absolute: 1e-14,
            max_evaluations: 200_000,
        }
    }
}

impl QuadratureTolerance {
    pub fn relative(relative: f64) -> Self {
        Self {
            relative,
            ..Self::default()
        }
    }
}

/// Globally adaptive Gauss-Kronrod integration of a fallible integrand.
pub fn integrate_adaptive<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    a: f64,
    b: f64,
    tol: QuadratureTolerance,
) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut intervals: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (v, e) = gk15(&mut f, a, b)?;
    intervals.push((a, b, v, e));
    let mut evaluations = 15;
    loop {
        let total: f64 = intervals.iter().map(|i| i.2).sum();
        let err: f64 = intervals.iter().map(|i| i.3).sum();
        if err <= tol.absolute.max(tol.relative * total.abs()) {
            return Ok(total);
        }
        if evaluations + 30 > tol.max_evaluations {
            return Err(Error::QuadratureFailure {
                tolerance: tol.relative,
                evaluations,
            });
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            // Interval cannot be split further in floating point.
            return Err(Error::QuadratureFailure {
                tolerance: tol.relative,
                evaluations,
            });
        }
        let (v1, e1) = gk15(&mut f, lo, mid)?;
        let (v2, e2) = gk15(&mut f, mid, hi)?;
        evaluations += 30;
        intervals.push((lo, mid, v1, e1));
        intervals.push((mid, hi, v2, e2));
    }
}

/// Nested adaptive integration of `f(x, y)` over `x in [a, b]`, `y in bounds(x)`.
/// The inner tolerance is tightened by a factor 10 so the outer error estimate
/// is not polluted by inner noise.
pub fn integrate_2d<F, B>(f: F, a: f64, b: f64, bounds: B, tol: QuadratureTolerance) -> Result<f64>
where
    F: Fn(f64, f64) -> f64,
    B: Fn(f64) -> (f64, f64),
{
    let inner_tol = QuadratureTolerance {
        relative: tol.relative * 0.1,
        absolute: tol.absolute * 0.1,
        max_evaluations: tol.max_evaluations,
    };
    integrate_adaptive(
        |x| {
            let (lo, hi) = bounds(x);
            if hi <= lo {
                return Ok(0.0);
            }
            integrate_adaptive(|y| Ok(f(x, y)), lo, hi, inner_tol)
        },
        a,
        b,
        tol,
    )
}
