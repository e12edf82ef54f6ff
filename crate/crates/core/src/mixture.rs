//! Heteroscedastic multivariate normal mixture on the stacked random effects.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_jittered, forward_solve_sq_norm, LN_2PI};

/// Relative diagonal jitter tried once before a covariance is rejected.
pub const DEFAULT_JITTER: f64 = 1e-10;

/// Tolerance on `|sum(w) - 1|`.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Mixture parameters with cached Cholesky factors and precisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chols: Vec<DMatrix<f64>>,
    precisions: Vec<DMatrix<f64>>,
    log_dets: Vec<f64>,
}

/// Plain, unchecked mixture parameters as stored per MCMC draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaDraw {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl ThetaDraw {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn to_params(&self) -> Result<MixtureParams> {
        MixtureParams::new(self.weights.clone(), self.means.clone(), self.covs.clone())
    }

    /// Component `k` of the result is component `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> ThetaDraw {
        ThetaDraw {
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
            means: perm.iter().map(|&j| self.means[j].clone()).collect(),
            covs: perm.iter().map(|&j| self.covs[j].clone()).collect(),
        }
    }
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::with_jitter(weights, means, covs, DEFAULT_JITTER)
    }

    pub fn with_jitter(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        rel_jitter: f64,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Validation("a mixture needs at least one component".into()));
        }
        if means.len() != k || covs.len() != k {
            return Err(Error::Dimension(format!(
                "{} weights, {} means, {} covariances",
                k,
                means.len(),
                covs.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!("invalid mixture weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::Validation(format!("mixture weights sum to {total}, not 1")));
        }
        let q = means[0].len();
        let mut chols = Vec::with_capacity(k);
        let mut precisions = Vec::with_capacity(k);
        let mut log_dets = Vec::with_capacity(k);
        let mut fixed_covs = Vec::with_capacity(k);
        for (j, (m, d)) in means.iter().zip(&covs).enumerate() {
            if m.len() != q || d.nrows() != q || d.ncols() != q {
                return Err(Error::Dimension(format!("component {j} does not have dimension {q}")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("component {j} mean is not finite")));
            }
            let l = cholesky_jittered(d, rel_jitter)
                .ok_or_else(|| Error::Numerical(format!("covariance of component {j} is not positive definite")))?;
            let cov = &l * l.transpose();
            log_dets.push(linalg::log_det_from_chol(&l));
            precisions.push(linalg::inverse_from_chol(&l));
            chols.push(l);
            fixed_covs.push(cov);
        }
        Ok(Self {
            weights,
            means,
            covs: fixed_covs,
            chols,
            precisions,
            log_dets,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.means[k]
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.covs[k]
    }

    pub fn chol(&self, k: usize) -> &DMatrix<f64> {
        &self.chols[k]
    }

    pub fn precision(&self, k: usize) -> &DMatrix<f64> {
        &self.precisions[k]
    }

    pub fn log_det(&self, k: usize) -> f64 {
        self.log_dets[k]
    }

    /// `log phi(b; mu_k, D_k)`.
    #[inline]
    pub fn log_component_density(&self, k: usize, b: &[f64]) -> f64 {
        let mut r: Vec<f64> = b.iter().zip(self.means[k].iter()).map(|(x, m)| x - m).collect();
        let quad = forward_solve_sq_norm(&self.chols[k], &mut r);
        -0.5 * (b.len() as f64 * LN_2PI + self.log_dets[k] + quad)
    }

    /// `log w_k + log phi(b; mu_k, D_k)` for every component.
    pub fn log_weighted_components(&self, b: &[f64]) -> Vec<f64> {
        (0..self.k())
            .map(|k| self.weights[k].ln() + self.log_component_density(k, b))
            .collect()
    }

    pub fn log_density(&self, b: &[f64]) -> f64 {
        log_sum_exp(&self.log_weighted_components(b))
    }

    pub fn allocation_probs(&self, b: &[f64]) -> Vec<f64> {
        normalize_log_weights(&self.log_weighted_components(b))
    }

    pub fn overall_fixed_effects(&self) -> DVector<f64> {
        let mut beta = DVector::zeros(self.dim());
        for (w, m) in self.weights.iter().zip(&self.means) {
            beta += m * *w;
        }
        beta
    }

    /// Component `k` of the result is component `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
            means: perm.iter().map(|&j| self.means[j].clone()).collect(),
            covs: perm.iter().map(|&j| self.covs[j].clone()).collect(),
            chols: perm.iter().map(|&j| self.chols[j].clone()).collect(),
            precisions: perm.iter().map(|&j| self.precisions[j].clone()).collect(),
            log_dets: perm.iter().map(|&j| self.log_dets[j]).collect(),
        }
    }

    pub fn to_draw(&self) -> ThetaDraw {
        ThetaDraw {
            weights: self.weights.clone(),
            means: self.means.clone(),
            covs: self.covs.clone(),
        }
    }
}

/// `log sum exp(x)`, ignoring `-inf` entries; `-inf` when all are.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights into a probability vector without overflow.
pub fn normalize_log_weights(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    if !lse.is_finite() {
        // nothing to distinguish the entries: fall back to uniform
        return vec![1.0 / x.len() as f64; x.len()];
    }
    let mut p: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn check_dim(b: &[f64], theta: &MixtureParams) -> Result<()> {
    if b.len() != theta.dim() {
        return Err(Error::Dimension(format!(
            "random-effect vector of length {} for a mixture of dimension {}",
            b.len(),
            theta.dim()
        )));
    }
    Ok(())
}

/// `log sum_k w_k phi(b; mu_k, D_k)`.
pub fn log_mixture_density(b: &[f64], theta: &MixtureParams) -> Result<f64> {
    check_dim(b, theta)?;
    Ok(theta.log_density(b))
}

/// Full conditional of the allocation given `b`: `p_k ∝ w_k phi(b; mu_k, D_k)`.
pub fn conditional_allocation_probs(b: &[f64], theta: &MixtureParams) -> Result<Vec<f64>> {
    check_dim(b, theta)?;
    Ok(theta.allocation_probs(b))
}

/// `beta = sum_k w_k mu_k`.
pub fn overall_fixed_effects(theta: &MixtureParams) -> DVector<f64> {
    theta.overall_fixed_effects()
}
