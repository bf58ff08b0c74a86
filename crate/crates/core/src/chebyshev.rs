//! Barycentric interpolation on Chebyshev points of the second kind.

/// Interpolation nodes on `[lo, hi]` with barycentric weights.
#[derive(Debug, Clone)]
pub struct Chebyshev {
    pub lo: f64,
    pub hi: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Chebyshev {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 2, "need at least two nodes");
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let m = n - 1;
        let nodes = (0..n)
            .map(|k| {
                let c = (std::f64::consts::PI * k as f64 / m as f64).cos();
                0.5 * (lo + hi) + 0.5 * (hi - lo) * c
            })
            .collect();
        let weights = (0..n)
            .map(|k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                if k == 0 || k == m {
                    0.5 * sign
                } else {
                    sign
                }
            })
            .collect();
        Self { lo, hi, nodes, weights }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cardinal basis values `l_k(x)`, so that `p(x) = sum_k l_k(x) f_k`.
    pub fn basis(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.nodes.len());
        for (k, &xk) in self.nodes.iter().enumerate() {
            if x == xk {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[k] = 1.0;
                return;
            }
        }
        let mut denom = 0.0;
        for ((o, &xk), &wk) in out.iter_mut().zip(&self.nodes).zip(&self.weights) {
            *o = wk / (x - xk);
            denom += *o;
        }
        out.iter_mut().for_each(|v| *v /= denom);
    }

    pub fn eval(&self, values: &[f64], x: f64) -> f64 {
        let mut b = vec![0.0; self.nodes.len()];
        self.basis(x, &mut b);
        b.iter().zip(values).map(|(a, v)| a * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_smooth_function() {
        let c = Chebyshev::new(-3.0, 2.0, 24);
        let f = |x: f64| 1.0 / (1.0 + (-x).exp());
        let vals: Vec<f64> = c.nodes().iter().map(|&x| f(x)).collect();
        for i in 0..=100 {
            let x = -3.0 + 5.0 * i as f64 / 100.0;
            assert!((c.eval(&vals, x) - f(x)).abs() < 1e-9);
        }
        // polynomials of degree below the node count are reproduced
        let p = |x: f64| 2.0 * x.powi(3) - x + 0.5;
        let vp: Vec<f64> = c.nodes().iter().map(|&x| p(x)).collect();
        assert!((c.eval(&vp, 0.3) - p(0.3)).abs() < 1e-12);
    }
}
