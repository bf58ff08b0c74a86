//! Wick products, exact Gaussian moments and the finite-rank Gaussian
//! integration-by-parts identity.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice_noise::{stream_rng, StreamRole};

pub const MAX_MOMENT_DEGREE: usize = 12;
pub const MAX_IBP_DEGREE: usize = 8;
pub const MAX_IBP_FACTORS: usize = 4;
pub const MAX_IBP_RANK: usize = 8;
const MAX_WICK_FACTORS: usize = 24;

/// Centred Gaussian vector described by its covariance, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianVector {
    pub dim: usize,
    pub cov: Vec<f64>,
}

impl GaussianVector {
    pub fn new(dim: usize, cov: Vec<f64>) -> Result<Self> {
        if cov.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: cov.len(),
            });
        }
        let g = Self { dim, cov };
        for i in 0..dim {
            for j in 0..i {
                if (g.c(i, j) - g.c(j, i)).abs() > 1e-12 {
                    return Err(Error::Config(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        if let Some(&min) = symmetric_eigenvalues(&g.cov, dim).first() {
            if min < -1e-10 {
                return Err(Error::Config(format!("covariance has negative eigenvalue {min}")));
            }
        }
        Ok(g)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let cov: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(dim, cov)
    }

    pub fn identity(dim: usize) -> Self {
        let mut cov = vec![0.0; dim * dim];
        (0..dim).for_each(|i| cov[i * dim + i] = 1.0);
        Self { dim, cov }
    }

    #[inline]
    pub fn c(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.dim + j]
    }

    /// A square root `L` with `L L^T = cov`, from the eigen-decomposition so
    /// that semidefinite covariances are accepted.
    pub fn sqrt_factor(&self) -> Vec<f64> {
        let n = self.dim;
        let (vals, vecs) = jacobi_eigen(&self.cov, n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                l[i * n + k] = vecs[i * n + k] * vals[k].max(0.0).sqrt();
            }
        }
        l
    }

    pub fn sample<R: Rng>(&self, factor: &[f64], rng: &mut R) -> Vec<f64> {
        let n = self.dim;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n).map(|i| (0..n).map(|k| factor[i * n + k] * z[k]).sum()).collect()
    }
}

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix. Returns
/// eigenvalues and eigenvectors stored column-wise.
fn jacobi_eigen(m: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Eigenvalues in ascending order.
pub fn symmetric_eigenvalues(m: &[f64], n: usize) -> Vec<f64> {
    let mut vals = jacobi_eigen(m, n).0;
    vals.sort_by(f64::total_cmp);
    vals
}

/// `X_1 ⋄ ... ⋄ X_n` at the sample values, by the recursion
/// `⋄^n = X_n ⋄^{n-1} - sum_j E[X_n X_j] ⋄^{n-1}_{\j}` memoized over subsets.
pub fn wick_product(samples: &[f64], cov: &GaussianVector) -> Result<f64> {
    let n = samples.len();
    if cov.dim != n {
        return Err(Error::DimensionMismatch {
            expected: cov.dim,
            got: n,
        });
    }
    if n > MAX_WICK_FACTORS {
        return Err(Error::DegreeTooLarge {
            degree: n,
            max: MAX_WICK_FACTORS,
        });
    }
    let full = (1usize << n) - 1;
    let mut memo = vec![0.0; full + 1];
    memo[0] = 1.0;
    for mask in 1..=full {
        let top = usize::BITS as usize - 1 - mask.leading_zeros() as usize;
        let rest = mask & !(1 << top);
        let mut v = samples[top] * memo[rest];
        let mut bits = rest;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            v -= cov.c(top, j) * memo[rest & !(1 << j)];
        }
        memo[mask] = v;
    }
    Ok(memo[full])
}

/// Exact `E[prod X_i^{k_i}]` by the pairing recursion
/// `E[X_i X^m] = sum_j C_ij m_j E[X^{m - e_j}]` with `m = k - e_i`.
pub fn isserlis_moment(exponents: &[usize], cov: &GaussianVector) -> Result<f64> {
    if exponents.len() != cov.dim {
        return Err(Error::DimensionMismatch {
            expected: cov.dim,
            got: exponents.len(),
        });
    }
    let degree: usize = exponents.iter().sum();
    if degree > MAX_MOMENT_DEGREE {
        return Err(Error::DegreeTooLarge {
            degree,
            max: MAX_MOMENT_DEGREE,
        });
    }
    let mut memo = HashMap::new();
    let key: Vec<u8> = exponents.iter().map(|&k| k as u8).collect();
    Ok(moment_rec(&key, cov, &mut memo))
}

fn moment_rec(k: &[u8], cov: &GaussianVector, memo: &mut HashMap<Vec<u8>, f64>) -> f64 {
    let degree: u32 = k.iter().map(|&v| v as u32).sum();
    if degree == 0 {
        return 1.0;
    }
    if degree % 2 == 1 {
        return 0.0;
    }
    if let Some(&v) = memo.get(k) {
        return v;
    }
    let i = k.iter().position(|&v| v > 0).expect("positive degree");
    let mut m = k.to_vec();
    m[i] -= 1;
    let mut total = 0.0;
    for j in 0..k.len() {
        if m[j] == 0 {
            continue;
        }
        let c = cov.c(i, j);
        if c == 0.0 {
            continue;
        }
        let mult = m[j] as f64;
        m[j] -= 1;
        total += c * mult * moment_rec(&m, cov, memo);
        m[j] += 1;
    }
    memo.insert(k.to_vec(), total);
    total
}

/// Polynomial in `dim` real variables, monomials keyed by exponent vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PolynomialFunctional {
    pub dim: usize,
    pub terms: BTreeMap<Vec<u8>, f64>,
}

impl PolynomialFunctional {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        let mut p = Self::zero(dim);
        p.add_term(vec![0; dim], c);
        p
    }

    /// The coordinate `x_i`.
    pub fn coordinate(dim: usize, i: usize) -> Self {
        let mut e = vec![0u8; dim];
        e[i] = 1;
        let mut p = Self::zero(dim);
        p.add_term(e, 1.0);
        p
    }

    /// The linear form `sum_k w_k x_k`.
    pub fn linear(weights: &[f64]) -> Self {
        let dim = weights.len();
        let mut p = Self::zero(dim);
        for (k, &w) in weights.iter().enumerate() {
            let mut e = vec![0u8; dim];
            e[k] = 1;
            p.add_term(e, w);
        }
        p
    }

    pub fn monomial(exponents: &[u8], c: f64) -> Self {
        let mut p = Self::zero(exponents.len());
        p.add_term(exponents.to_vec(), c);
        p
    }

    pub fn add_term(&mut self, exponents: Vec<u8>, c: f64) {
        assert_eq!(exponents.len(), self.dim, "exponent length");
        if c == 0.0 {
            return;
        }
        let e = self.terms.entry(exponents).or_insert(0.0);
        *e += c;
    }

    pub fn degree(&self) -> usize {
        self.terms
            .keys()
            .map(|e| e.iter().map(|&v| v as usize).sum())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, &v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.dim);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Vec<u8> = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    /// `d/dx_i`.
    pub fn derivative(&self, i: usize) -> Self {
        let mut out = Self::zero(self.dim);
        for (e, c) in &self.terms {
            if e[i] > 0 {
                let mut f = e.clone();
                f[i] -= 1;
                out.add_term(f, c * e[i] as f64);
            }
        }
        out
    }

    /// Exact expectation under `N(0, cov)`.
    pub fn expectation(&self, cov: &GaussianVector) -> Result<f64> {
        if cov.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: cov.dim,
            });
        }
        let mut memo = HashMap::new();
        let mut total = 0.0;
        for (e, c) in &self.terms {
            let degree: usize = e.iter().map(|&v| v as usize).sum();
            if degree > MAX_MOMENT_DEGREE {
                return Err(Error::DegreeTooLarge {
                    degree,
                    max: MAX_MOMENT_DEGREE,
                });
            }
            total += c * moment_rec(e, cov, &mut memo);
        }
        Ok(total)
    }
}

/// Symbolic expansion of `L_1 ⋄ ... ⋄ L_n` for linear forms `L_i` of a
/// Gaussian vector with covariance `cov`, using the same recursion.
pub fn wick_polynomial(forms: &[PolynomialFunctional], pair_cov: &[Vec<f64>]) -> PolynomialFunctional {
    let n = forms.len();
    let dim = forms.first().map(|f| f.dim).unwrap_or(0);
    let full = (1usize << n) - 1;
    let mut memo: Vec<PolynomialFunctional> = Vec::with_capacity(full + 1);
    memo.push(PolynomialFunctional::constant(dim, 1.0));
    for mask in 1..=full {
        let top = usize::BITS as usize - 1 - mask.leading_zeros() as usize;
        let rest = mask & !(1 << top);
        let mut v = forms[top].mul(&memo[rest]);
        let mut bits = rest;
        while bits != 0 {
            let j = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            v = v.add(&memo[rest & !(1 << j)].scale(-pair_cov[top][j]));
        }
        memo.push(v);
    }
    memo.swap_remove(full)
}

/// Exact and Monte Carlo check that a Wick product is centred.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WickMeanReport {
    pub n: usize,
    pub exact: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub trials: usize,
    pub exact_is_zero: bool,
    pub mc_within_3se: bool,
}

pub fn wick_expectation_is_zero(n: usize, cov: &GaussianVector, trials: usize, seed: u64) -> Result<WickMeanReport> {
    if cov.dim != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: cov.dim,
        });
    }
    let forms: Vec<PolynomialFunctional> = (0..n).map(|i| PolynomialFunctional::coordinate(n, i)).collect();
    let pair: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cov.c(i, j)).collect()).collect();
    let exact = wick_polynomial(&forms, &pair).expectation(cov)?;
    let factor = cov.sqrt_factor();
    let mut rng = stream_rng(seed, 0, StreamRole::Auxiliary);
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        let x = cov.sample(&factor, &mut rng);
        let w = wick_product(&x, cov)?;
        s1 += w;
        s2 += w * w;
    }
    let nt = trials.max(1) as f64;
    let mean = s1 / nt;
    let var = if trials > 1 { (s2 - nt * mean * mean) / (nt - 1.0) } else { 0.0 };
    let se = (var.max(0.0) / nt).sqrt();
    Ok(WickMeanReport {
        n,
        exact,
        mc_mean: mean,
        mc_se: se,
        trials,
        exact_is_zero: exact.abs() <= 1e-10,
        mc_within_3se: mean.abs() <= 3.0 * se,
    })
}

/// One line of the integration-by-parts report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IbpReport {
    pub instance_id: usize,
    pub degree: usize,
    pub n_factors: usize,
    pub rank: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// Compares `E[F(G) ⋄_i (G, phi_i)]` with
/// `sum_{j_1..j_n} E[d_{j_1}...d_{j_n} F(G)] prod_i (cov phi_i)_{j_i}`
/// for `G ~ N(0, cov)` of rank `N`, both sides exactly.
pub fn verify_gaussian_ibp(f: &PolynomialFunctional, test_vectors: &[Vec<f64>], cov: &GaussianVector) -> Result<IbpReport> {
    let rank = cov.dim;
    if rank > MAX_IBP_RANK {
        return Err(Error::RankTooLarge {
            rank,
            max: MAX_IBP_RANK,
        });
    }
    if f.degree() > MAX_IBP_DEGREE {
        return Err(Error::DegreeTooLarge {
            degree: f.degree(),
            max: MAX_IBP_DEGREE,
        });
    }
    let n = test_vectors.len();
    if n > MAX_IBP_FACTORS {
        return Err(Error::DegreeTooLarge {
            degree: n,
            max: MAX_IBP_FACTORS,
        });
    }
    if f.dim != rank {
        return Err(Error::DimensionMismatch {
            expected: rank,
            got: f.dim,
        });
    }
    for phi in test_vectors {
        if phi.len() != rank {
            return Err(Error::DimensionMismatch {
                expected: rank,
                got: phi.len(),
            });
        }
    }
    // (cov phi_i)_k
    let smeared: Vec<Vec<f64>> = test_vectors
        .iter()
        .map(|phi| (0..rank).map(|k| (0..rank).map(|l| cov.c(k, l) * phi[l]).sum()).collect())
        .collect();
    let pair: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| test_vectors[i].iter().zip(&smeared[j]).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let forms: Vec<PolynomialFunctional> = test_vectors.iter().map(|phi| PolynomialFunctional::linear(phi)).collect();
    let lhs = if n == 0 {
        f.expectation(cov)?
    } else {
        f.mul(&wick_polynomial(&forms, &pair)).expectation(cov)?
    };

    // sum over index tuples, one derivative per factor
    let mut rhs = 0.0;
    let mut idx = vec![0usize; n];
    loop {
        let weight: f64 = idx.iter().enumerate().map(|(i, &j)| smeared[i][j]).product();
        if weight != 0.0 {
            let mut d = f.clone();
            for &j in &idx {
                d = d.derivative(j);
            }
            rhs += weight * d.expectation(cov)?;
        }
        // advance the mixed-radix counter
        let mut pos = 0;
        while pos < n {
            idx[pos] += 1;
            if idx[pos] < rank {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
        if pos == n {
            break;
        }
    }
    Ok(IbpReport {
        instance_id: 0,
        degree: f.degree(),
        n_factors: n,
        rank,
        lhs,
        rhs,
        abs_err: (lhs - rhs).abs(),
    })
}

/// A random instance within the verifier budgets.
pub struct IbpInstance {
    pub f: PolynomialFunctional,
    pub test_vectors: Vec<Vec<f64>>,
    pub cov: GaussianVector,
}

pub fn random_ibp_instance<R: Rng>(rng: &mut R) -> IbpInstance {
    let rank = rng.random_range(1..=MAX_IBP_RANK);
    let n = rng.random_range(1..=MAX_IBP_FACTORS);
    let mut b = vec![0.0; rank * rank];
    b.iter_mut().for_each(|v| *v = 0.6 * rng.sample::<f64, _>(StandardNormal));
    let mut cov = vec![0.0; rank * rank];
    for i in 0..rank {
        for j in 0..rank {
            cov[i * rank + j] = (0..rank).map(|k| b[i * rank + k] * b[j * rank + k]).sum::<f64>() / rank as f64;
        }
    }
    // occasionally drop to a semidefinite covariance
    if rank > 1 && rng.random_bool(0.2) {
        for j in 0..rank {
            cov[(rank - 1) * rank + j] = cov[j];
            cov[j * rank + rank - 1] = cov[j * rank];
        }
        cov[rank * rank - 1] = cov[0];
    }
    let cov = GaussianVector { dim: rank, cov };
    let mut f = PolynomialFunctional::zero(rank);
    let n_terms = rng.random_range(1..=6);
    for _ in 0..n_terms {
        let degree = rng.random_range(0..=MAX_IBP_DEGREE);
        let mut e = vec![0u8; rank];
        for _ in 0..degree {
            e[rng.random_range(0..rank)] += 1;
        }
        f.add_term(e, rng.random_range(-1.0..1.0));
    }
    let test_vectors = (0..n)
        .map(|_| (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    IbpInstance { f, test_vectors, cov }
}

/// Runs `count` random instances and returns one report per instance.
pub fn randomized_ibp_suite(count: usize, seed: u64) -> Result<Vec<IbpReport>> {
    (0..count)
        .map(|id| {
            let mut rng = stream_rng(seed, id as u64, StreamRole::Auxiliary);
            let inst = random_ibp_instance(&mut rng);
            let mut r = verify_gaussian_ibp(&inst.f, &inst.test_vectors, &inst.cov)?;
            r.instance_id = id;
            Ok(r)
        })
        .collect()
}

/// Probabilists' Hermite polynomial `He_n(x)`.
pub fn hermite_he(n: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return 1.0;
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cov2(c: f64) -> GaussianVector {
        GaussianVector::from_rows(&[vec![1.0, c], vec![c, 1.0]]).unwrap()
    }

    #[test]
    fn small_wick_products() {
        let one = GaussianVector::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(wick_product(&[1.7], &one).unwrap(), 1.7);
        assert!((wick_product(&[0.4, -1.2], &cov2(0.3)).unwrap() - (0.4 * -1.2 - 0.3)).abs() < 1e-15);
        let same = GaussianVector::new(3, vec![1.0; 9]).unwrap();
        assert!((wick_product(&[2.0, 2.0, 2.0], &same).unwrap() - 2.0).abs() < 1e-14);
        assert!(matches!(wick_product(&[1.0, 2.0], &one), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn isserlis_examples() {
        let v = GaussianVector::from_rows(&[vec![0.7]]).unwrap();
        assert!((isserlis_moment(&[2], &v).unwrap() - 0.7).abs() < 1e-15);
        let one = GaussianVector::identity(1);
        assert!((isserlis_moment(&[4], &one).unwrap() - 3.0).abs() < 1e-15);
        assert!((isserlis_moment(&[2, 2], &cov2(0.3)).unwrap() - 1.18).abs() < 1e-14);
        assert!(matches!(isserlis_moment(&[14], &one), Err(Error::DegreeTooLarge { .. })));
    }

    #[test]
    fn isserlis_agrees_with_sampling() {
        let cov = cov2(0.3);
        let factor = cov.sqrt_factor();
        let mut rng = stream_rng(17, 0, StreamRole::Auxiliary);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = cov.sample(&factor, &mut rng);
            let v = x[0] * x[0] * x[1] * x[1];
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.18).abs() < 3.0 * se, "{mean} +- {se}");
    }

    #[test]
    fn wick_means_vanish() {
        let c3 = GaussianVector::from_rows(&[vec![1.0, 0.5, 0.5], vec![0.5, 1.0, 0.5], vec![0.5, 0.5, 1.0]]).unwrap();
        for (n, cov) in [(2, cov2(0.8)), (3, c3), (4, GaussianVector::identity(4))] {
            let r = wick_expectation_is_zero(n, &cov, 20_000, 3).unwrap();
            assert!(r.exact_is_zero, "{r:?}");
            assert!(r.mc_within_3se, "{r:?}");
        }
    }

    #[test]
    fn hermite_agreement() {
        for n in 1..=6 {
            for &sigma2 in &[0.5f64, 1.0, 2.3] {
                let cov = GaussianVector::new(n, vec![sigma2; n * n]).unwrap();
                for &x in &[-1.3, 0.0, 0.4, 2.0] {
                    let w = wick_product(&vec![x; n], &cov).unwrap();
                    let s = sigma2.sqrt();
                    let h = s.powi(n as i32) * hermite_he(n, x / s);
                    assert!((w - h).abs() < 1e-12 * (1.0 + h.abs()), "n={n} x={x}: {w} vs {h}");
                }
            }
        }
    }

    #[test]
    fn ibp_examples() {
        let id = GaussianVector::identity(1);
        let r = verify_gaussian_ibp(&PolynomialFunctional::constant(1, 2.5), &[vec![1.0]], &id).unwrap();
        assert_eq!((r.lhs, r.rhs, r.abs_err), (0.0, 0.0, 0.0));
        let r = verify_gaussian_ibp(&PolynomialFunctional::coordinate(1, 0), &[vec![1.0]], &id).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-12 && r.abs_err < 1e-12);
        let f = PolynomialFunctional::monomial(&[2, 1], 1.0);
        let r = verify_gaussian_ibp(&f, &[vec![1.0, 0.0], vec![0.0, 1.0]], &cov2(0.3)).unwrap();
        assert!(r.abs_err < 1e-10, "{r:?}");
        let big = GaussianVector::identity(9);
        assert!(matches!(
            verify_gaussian_ibp(&PolynomialFunctional::zero(9), &[vec![0.0; 9]], &big),
            Err(Error::RankTooLarge { .. })
        ));
        let deg9 = PolynomialFunctional::monomial(&[9], 1.0);
        assert!(matches!(verify_gaussian_ibp(&deg9, &[vec![1.0]], &id), Err(Error::DegreeTooLarge { .. })));
    }

    #[test]
    fn randomized_ibp_suite_is_exact() {
        let reports = randomized_ibp_suite(100, 2024).unwrap();
        for r in &reports {
            assert!(r.abs_err <= 1e-10, "{r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn first_slot_is_linear(alpha in -3.0f64..3.0, x in proptest::collection::vec(-2.0f64..2.0, 4), c in -0.3f64..0.4) {
            let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { c }).collect()).collect();
            let cov = GaussianVector::from_rows(&rows).unwrap();
            let base = wick_product(&x, &cov).unwrap();
            // scaling X_1 scales its sample and its row and column of the covariance
            let mut scaled_rows = rows.clone();
            for j in 0..4 {
                scaled_rows[0][j] *= alpha;
                scaled_rows[j][0] *= alpha;
            }
            let mut xs = x.clone();
            xs[0] *= alpha;
            let scaled_cov = GaussianVector { dim: 4, cov: scaled_rows.into_iter().flatten().collect() };
            let scaled = wick_product(&xs, &scaled_cov).unwrap();
            prop_assert!((scaled - alpha * base).abs() <= 1e-12 * (1.0 + base.abs() * alpha.abs()));
        }

        #[test]
        fn permutation_invariance(x in proptest::collection::vec(-2.0f64..2.0, 4), shift in 1usize..4) {
            let rows = vec![
                vec![1.0, 0.2, -0.1, 0.3],
                vec![0.2, 0.8, 0.05, 0.0],
                vec![-0.1, 0.05, 1.2, 0.4],
                vec![0.3, 0.0, 0.4, 0.9],
            ];
            let cov = GaussianVector::from_rows(&rows).unwrap();
            let perm: Vec<usize> = (0..4).map(|i| (i + shift) % 4).collect();
            let xp: Vec<f64> = perm.iter().map(|&p| x[p]).collect();
            let rp: Vec<Vec<f64>> = perm.iter().map(|&p| perm.iter().map(|&q| rows[p][q]).collect()).collect();
            let a = wick_product(&x, &cov).unwrap();
            let b = wick_product(&xp, &GaussianVector::from_rows(&rp).unwrap()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
