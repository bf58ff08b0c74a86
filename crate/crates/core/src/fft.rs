//! Two-dimensional periodic FFTs over one spatial slice of the lattice.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Forward/inverse 2-D FFT plans for an `n_x` by `n_y` slice stored x-major.
#[derive(Clone)]
pub struct Fft2 {
    n_x: usize,
    n_y: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n_x", &self.n_x).field("n_y", &self.n_y).finish()
    }
}

impl Fft2 {
    pub fn new(n_x: usize, n_y: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n_x,
            n_y,
            fwd_x: planner.plan_fft_forward(n_x),
            fwd_y: planner.plan_fft_forward(n_y),
            inv_x: planner.plan_fft_inverse(n_x),
            inv_y: planner.plan_fft_inverse(n_y),
        }
    }

    pub fn len(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transform(&self, data: &mut [Complex64], fx: &Arc<dyn Fft<f64>>, fy: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len());
        fy.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); self.n_x];
        for j in 0..self.n_y {
            for i in 0..self.n_x {
                column[i] = data[i * self.n_y + j];
            }
            fx.process(&mut column);
            for i in 0..self.n_x {
                data[i * self.n_y + j] = column[i];
            }
        }
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fwd_x, &self.fwd_y);
    }

    /// Inverse transform in place, normalized so that `inverse(forward(f)) == f`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inv_x, &self.inv_y);
        let scale = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    pub fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut data);
        data
    }

    pub fn inverse_real(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        self.inverse(&mut data);
        data.into_iter().map(|c| c.re).collect()
    }

    /// Transforms two real slices with one complex FFT.
    pub fn forward_real_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut data: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.forward(&mut data);
        let n = self.len();
        let mut fa = vec![Complex64::new(0.0, 0.0); n];
        let mut fb = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..self.n_x {
            let ni = (self.n_x - i) % self.n_x;
            for j in 0..self.n_y {
                let nj = (self.n_y - j) % self.n_y;
                let z = data[i * self.n_y + j];
                let zc = data[ni * self.n_y + nj].conj();
                fa[i * self.n_y + j] = 0.5 * (z + zc);
                fb[i * self.n_y + j] = Complex64::new(0.0, -0.5) * (z - zc);
            }
        }
        (fa, fb)
    }

    /// Inverse of two Hermitian spectra at once; returns the two real slices.
    pub fn inverse_real_pair(&self, a: &[Complex64], b: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut data: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| x + i * y).collect();
        self.inverse(&mut data);
        (data.iter().map(|c| c.re).collect(), data.iter().map(|c| c.im).collect())
    }
}

/// Angular wavenumbers of a periodic axis with `n` nodes and spacing `h`, in FFT order.
pub fn wavenumbers(n: usize, h: f64) -> Vec<f64> {
    let period = n as f64 * h;
    (0..n)
        .map(|m| {
            let signed = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
            2.0 * std::f64::consts::PI * signed / period
        })
        .collect()
}

/// Signed periodic offset of index `i` on an axis of length `n`.
pub fn signed_offset(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
