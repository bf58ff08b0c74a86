//! Symmetric 2x2 matrices, the only linear algebra the lattice needs pointwise.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 {
        a11: 1.0,
        a12: 0.0,
        a22: 1.0,
    };

    pub fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub fn scalar(c: f64) -> Self {
        Self::new(c, 0.0, c)
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let diff = 0.5 * (self.a11 - self.a22);
        let r = (diff * diff + self.a12 * self.a12).sqrt();
        (half_tr - r, half_tr + r)
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        Some(Sym2::new(self.a22 / det, -self.a12 / det, self.a11 / det))
    }

    /// `v . A v`.
    pub fn quad(&self, v: [f64; 2]) -> f64 {
        self.a11 * v[0] * v[0] + 2.0 * self.a12 * v[0] * v[1] + self.a22 * v[1] * v[1]
    }

    pub fn scale(&self, s: f64) -> Sym2 {
        Sym2::new(self.a11 * s, self.a12 * s, self.a22 * s)
    }

    pub fn add(&self, other: &Sym2) -> Sym2 {
        Sym2::new(
            self.a11 + other.a11,
            self.a12 + other.a12,
            self.a22 + other.a22,
        )
    }

    pub fn add_scalar(&self, s: f64) -> Sym2 {
        Sym2::new(self.a11 + s, self.a12, self.a22 + s)
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a22.is_finite()
    }
}

/// Density of the centred Gaussian N(0, cov) on R^2 evaluated at `x`.
/// Returns 0 for a covariance that is not positive definite.
pub fn gaussian_density_cov(cov: &Sym2, x: [f64; 2]) -> f64 {
    let det = cov.det();
    if !(det > 0.0) {
        return 0.0;
    }
    let inv = Sym2::new(cov.a22 / det, -cov.a12 / det, cov.a11 / det);
    (-0.5 * inv.quad(x)).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eigenvalues_of_rotated_diagonal() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let (d1, d2) = (0.6, 0.9);
        let m = Sym2::new(
            c * c * d1 + s * s * d2,
            c * s * (d1 - d2),
            s * s * d1 + c * c * d2,
        );
        let (lo, hi) = m.eigenvalues();
        assert!((lo - 0.6).abs() < 1e-14);
        assert!((hi - 0.9).abs() < 1e-14);
        assert!((m.det() - 0.54).abs() < 1e-14);
    }

    #[test]
    fn inverse_round_trip() {
        let m = Sym2::new(2.0, 0.5, 1.0);
        let inv = m.inverse().unwrap();
        // m * inv = I
        let p11 = m.a11 * inv.a11 + m.a12 * inv.a12;
        let p12 = m.a11 * inv.a12 + m.a12 * inv.a22;
        let p22 = m.a12 * inv.a12 + m.a22 * inv.a22;
        assert!((p11 - 1.0).abs() < 1e-14 && p12.abs() < 1e-14 && (p22 - 1.0).abs() < 1e-14);
        assert!(Sym2::new(1.0, 1.0, 1.0).inverse().is_none());
    }

    proptest! {
        #[test]
        fn inverse_and_eigenvalues(d1 in 0.1f64..2.0, d2 in 0.1f64..2.0, theta in 0.0f64..3.2) {
            let (c, s) = (theta.cos(), theta.sin());
            let a = Sym2::new(c * c * d1 + s * s * d2, c * s * (d1 - d2), s * s * d1 + c * c * d2);
            let (lo, hi) = a.eigenvalues();
            prop_assert!((lo - d1.min(d2)).abs() < 1e-12 && (hi - d1.max(d2)).abs() < 1e-12);
            let inv = a.inverse().unwrap();
            let v = [0.3, -1.1];
            let av = [a.a11 * v[0] + a.a12 * v[1], a.a12 * v[0] + a.a22 * v[1]];
            prop_assert!((inv.quad(av) - a.quad(v)).abs() < 1e-10 * (1.0 + a.quad(v)));
        }
    }
}
