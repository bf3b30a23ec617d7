//! Covariance of rank-1 factored Hessian estimators.
//!
//! For a factorization `A Bᵀ = H` with `A, B ∈ ℂ^{n×ℓ}` and real noise `u`
//! with `E[u uᵀ] = I`, the estimator is `X_ij = Re((A u)_i (B u)_j)`. Each
//! entry is a quadratic form `uᵀ C^{ij} u` with `C^{ij}_{ab} = Re(A_ia B_jb)`,
//! so for Gaussian noise
//!
//! ```text
//! Cov_G[X_ij, X_kl] = Σ_ab C^{ij}_ab C^{kl}_ab + Σ_ab C^{ij}_ab C^{kl}_ba
//! ```
//!
//! and ±1 noise subtracts `2 Σ_a C^{ij}_aa C^{kl}_aa`. Expanding
//! `Re x Re y = ½ Re(x y) + ½ Re(x ȳ)` turns both sums into products of
//! row dot products. For real factors this is
//! `(A_i·A_k)(B_j·B_l) + H_il H_jk`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::cp::FactorMatrix;
use crate::error::{Error, Result};
use crate::noise::NoiseDist;

/// The pair `(A, B)` behind an estimator, and `H = Re(A Bᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredEstimator {
    a: DMatrix<Complex64>,
    b: DMatrix<Complex64>,
    h: DMatrix<f64>,
    symmetrized: bool,
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

impl FactoredEstimator {
    pub fn new(a: DMatrix<Complex64>, b: DMatrix<Complex64>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!(
                "factors have shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let h = (&a * b.transpose()).map(|z| z.re);
        Ok(Self {
            a,
            b,
            h,
            symmetrized: false,
        })
    }

    pub fn real(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        Self::new(complexify(a), complexify(b))
    }

    /// `A = B = S̃` for the S sweep, `A = T̃`, `B = Ũ` for T/U.
    pub fn from_factor_matrix(f: &FactorMatrix) -> Self {
        let (a, b) = match f {
            FactorMatrix::S(s) => (s.clone(), s.clone()),
            FactorMatrix::TU { t, u } => (complexify(t), complexify(u)),
        };
        Self::new(a, b).expect("factor matrices share a shape")
    }

    /// The simple estimator `H w wᵀ`: `A = H`, `B = I`.
    pub fn simple(h: &DMatrix<f64>) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::Contract("Hessian must be square".into()));
        }
        Self::real(h, &DMatrix::identity(h.nrows(), h.nrows()))
    }

    /// Switches to the estimator `½(X + Xᵀ)`.
    pub fn symmetrized(mut self) -> Self {
        self.symmetrized = true;
        self
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    pub fn a(&self) -> &DMatrix<Complex64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<Complex64> {
        &self.b
    }

    /// `Re(A Bᵀ)`.
    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Noise dimension `ℓ`.
    pub fn noise_len(&self) -> usize {
        self.a.ncols()
    }

    /// Checks `A Bᵀ = H` (including a vanishing imaginary part) to rel 1e-10.
    pub fn check(&self, h: &DMatrix<f64>) -> Result<()> {
        let prod = &self.a * self.b.transpose();
        let scale = h.norm().max(f64::MIN_POSITIVE);
        let re_err = (prod.map(|z| z.re) - h).norm() / scale;
        let im_err = prod.map(|z| z.im).norm() / scale;
        if re_err <= 1e-10 && im_err <= 1e-10 {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "A Bᵀ differs from H: real part rel {re_err:e}, imaginary part rel {im_err:e}"
            )))
        }
    }

    /// `X_ij` for one noise vector `u`.
    pub fn sample_entry(&self, u: &[f64], i: usize, j: usize) -> f64 {
        let raw = |i: usize, j: usize| {
            let ai: Complex64 = self.a.row(i).iter().zip(u).map(|(x, &v)| x * v).sum();
            let bj: Complex64 = self.b.row(j).iter().zip(u).map(|(x, &v)| x * v).sum();
            (ai * bj).re
        };
        if self.symmetrized {
            0.5 * (raw(i, j) + raw(j, i))
        } else {
            raw(i, j)
        }
    }

    fn raw_covariance(&self, i: usize, j: usize, k: usize, l: usize, dist: NoiseDist) -> f64 {
        let dot = |x: &DMatrix<Complex64>, r: usize, y: &DMatrix<Complex64>, s: usize, conj: bool| -> Complex64 {
            x.row(r)
                .iter()
                .zip(y.row(s).iter())
                .map(|(p, q)| if conj { p * q.conj() } else { p * q })
                .sum()
        };
        let (a, b) = (&self.a, &self.b);
        let gauss = 0.5
            * ((dot(a, i, a, k, false) * dot(b, j, b, l, false)).re
                + (dot(a, i, a, k, true) * dot(b, j, b, l, true)).re
                + (dot(a, i, b, l, false) * dot(b, j, a, k, false)).re
                + (dot(a, i, b, l, true) * dot(b, j, a, k, true)).re);
        match dist {
            NoiseDist::Gaussian => gauss,
            NoiseDist::Rademacher => {
                let corr: f64 = (0..a.ncols())
                    .map(|c| (a[(i, c)] * b[(j, c)]).re * (a[(k, c)] * b[(l, c)]).re)
                    .sum();
                gauss - 2.0 * corr
            }
        }
    }
}

/// `Cov[X_ij, X_kl]` under Gaussian or ±1 noise.
pub fn closed_form_covariance(
    est: &FactoredEstimator,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
    dist: NoiseDist,
) -> Result<f64> {
    let n = est.n();
    if [i, j, k, l].iter().any(|&x| x >= n) {
        return Err(Error::Contract(format!("index out of range for n = {n}")));
    }
    Ok(if est.symmetrized {
        0.25 * (est.raw_covariance(i, j, k, l, dist)
            + est.raw_covariance(i, j, l, k, dist)
            + est.raw_covariance(j, i, k, l, dist)
            + est.raw_covariance(j, i, l, k, dist))
    } else {
        est.raw_covariance(i, j, k, l, dist)
    })
}

/// The complex covariance `E[Y_ij Y_kl] − H_ij H_kl` of the unprojected
/// estimator `Y = (A u)(B u)ᵀ`, with plain transposes:
/// `(A_iᵀA_k)(B_jᵀB_l) + (A_iᵀB_l)(A_kᵀB_j)`, minus
/// `2 Σ_a A_ia B_ja A_ka B_la` for ±1 noise. For real factors it agrees with
/// [`closed_form_covariance`].
pub fn pseudo_covariance(
    est: &FactoredEstimator,
    i: usize,
    j: usize,
    k: usize,
    l: usize,
    dist: NoiseDist,
) -> Result<Complex64> {
    let n = est.n();
    if [i, j, k, l].iter().any(|&x| x >= n) {
        return Err(Error::Contract(format!("index out of range for n = {n}")));
    }
    let (a, b) = (&est.a, &est.b);
    let dot = |x: &DMatrix<Complex64>, r: usize, y: &DMatrix<Complex64>, s: usize| -> Complex64 {
        x.row(r).iter().zip(y.row(s).iter()).map(|(p, q)| p * q).sum()
    };
    let gauss = dot(a, i, a, k) * dot(b, j, b, l) + dot(a, i, b, l) * dot(a, k, b, j);
    Ok(match dist {
        NoiseDist::Gaussian => gauss,
        NoiseDist::Rademacher => {
            let corr: Complex64 = (0..a.ncols()).map(|c| a[(i, c)] * b[(j, c)] * a[(k, c)] * b[(l, c)]).sum();
            gauss - 2.0 * corr
        }
    })
}

/// Sample mean and unbiased sample variance.
pub fn empirical_moments(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least two samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

/// `Var_G[X_ii] − 2 H_ii²`, which is never negative.
pub fn theorem41_gap(est: &FactoredEstimator, h: &DMatrix<f64>, i: usize) -> Result<f64> {
    est.check(h)?;
    let var = closed_form_covariance(est, i, i, i, i, NoiseDist::Gaussian)?;
    Ok(var - 2.0 * h[(i, i)] * h[(i, i)])
}
