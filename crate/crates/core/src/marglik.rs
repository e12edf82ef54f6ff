//! Per-subject marginal likelihoods `L_{i,k}` with the random effects
//! integrated out, the mixture marginal, and the observed-data deviance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::mixture::{log_sum_exp, MixtureParams};
use crate::model::{row_derivatives, Family, GlmmParams, SubjectDesign, ValidatedDataset};
use crate::rng::{substream, Block};

pub const NEWTON_MAX_ITER: usize = 50;
pub const NEWTON_GRAD_TOL: f64 = 1e-8;
/// Newton decrement `g^T H^{-1} g` below which the mode is accepted; twice
/// the predicted remaining gain in the log-integrand.
pub const NEWTON_DECREMENT_TOL: f64 = 1e-12;
const MAX_HALVINGS: usize = 40;

/// Approximation used for `L_{i,k}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarglikMethod {
    /// Exact; only for models whose markers are all gaussian.
    ClosedForm,
    Laplace,
    /// Plain Monte Carlo over the component density.
    Mc,
}

impl std::str::FromStr for MarglikMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(Self::ClosedForm),
            "laplace" => Ok(Self::Laplace),
            "mc" => Ok(Self::Mc),
            other => Err(Error::Validation(format!(
                "unknown marginal-likelihood method '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarglikOptions {
    pub method: MarglikMethod,
    /// Draws per evaluation for `mc`, and for the Laplace fallback.
    pub mc_draws: usize,
    /// Seed of the Monte Carlo streams.
    pub seed: u64,
}

impl Default for MarglikOptions {
    fn default() -> Self {
        Self {
            method: MarglikMethod::Laplace,
            mc_draws: 2000,
            seed: 0,
        }
    }
}

impl MarglikOptions {
    pub fn check(&self, ds: &ValidatedDataset) -> Result<()> {
        if self.method == MarglikMethod::ClosedForm && !ds.layout.all_gaussian() {
            return Err(Error::Method("closed form requires every marker to be gaussian".into()));
        }
        if self.method == MarglikMethod::Mc && self.mc_draws == 0 {
            return Err(Error::Validation("mc needs at least one draw".into()));
        }
        Ok(())
    }
}

/// Mode of `b -> log p(y | b) + log N(b; mean, P^{-1})` with the curvature
/// there and the resulting Laplace approximation of the integral over `b`.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mode: Vec<f64>,
    /// Negative Hessian of the log-integrand at the mode.
    pub neg_hessian: DMatrix<f64>,
    pub neg_hessian_chol: DMatrix<f64>,
    /// Log of the integrand at the mode.
    pub log_peak: f64,
    pub log_integral: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Accumulates log-integrand, gradient and negative Hessian at `b`.
/// Returns the log-integrand.
fn integrand_derivatives(
    design: &SubjectDesign,
    psi: &GlmmParams,
    mean: &[f64],
    precision: &DMatrix<f64>,
    log_det_cov: f64,
    b: &[f64],
    grad: &mut [f64],
    hess: &mut DMatrix<f64>,
) -> f64 {
    let q = b.len();
    grad.iter_mut().for_each(|g| *g = 0.0);
    hess.fill(0.0);
    let mut ll = 0.0;
    for row in &design.rows {
        let eta = design.eta(row, &psi.alpha, b);
        let (l, d1, w) = row_derivatives(row, eta, psi.phi[row.marker]);
        ll += l;
        let off = design.z_offset(row);
        let z = design.z_row(row);
        for (a, za) in z.iter().enumerate() {
            grad[off + a] += d1 * za;
            for (c, zc) in z.iter().enumerate().take(a + 1) {
                hess[(off + a, off + c)] += w * za * zc;
            }
        }
    }
    let mut quad = 0.0;
    for a in 0..q {
        let mut pr = 0.0;
        for c in 0..q {
            pr += precision[(a, c)] * (b[c] - mean[c]);
        }
        grad[a] -= pr;
        quad += (b[a] - mean[a]) * pr;
        for c in 0..=a {
            hess[(a, c)] += precision[(a, c)];
        }
    }
    for a in 0..q {
        for c in 0..a {
            hess[(c, a)] = hess[(a, c)];
        }
    }
    ll - 0.5 * (q as f64 * LN_2PI + log_det_cov + quad)
}

fn log_integrand(
    design: &SubjectDesign,
    psi: &GlmmParams,
    mean: &[f64],
    precision: &DMatrix<f64>,
    log_det_cov: f64,
    b: &[f64],
) -> f64 {
    let q = b.len();
    let mut quad = 0.0;
    for a in 0..q {
        let ra = b[a] - mean[a];
        quad += precision[(a, a)] * ra * ra;
        for c in 0..a {
            quad += 2.0 * precision[(a, c)] * ra * (b[c] - mean[c]);
        }
    }
    design.log_lik(psi, b) - 0.5 * (q as f64 * LN_2PI + log_det_cov + quad)
}

/// Newton iterations with step halving from `start`.
pub fn laplace_fit(
    design: &SubjectDesign,
    psi: &GlmmParams,
    mean: &[f64],
    precision: &DMatrix<f64>,
    log_det_cov: f64,
    start: &[f64],
) -> LaplaceFit {
    let q = mean.len();
    let mut b = start.to_vec();
    let mut grad = vec![0.0; q];
    let mut hess = DMatrix::zeros(q, q);
    let mut trial = vec![0.0; q];
    let mut converged = false;
    let mut iterations = 0;
    let mut f = integrand_derivatives(design, psi, mean, precision, log_det_cov, &b, &mut grad, &mut hess);
    let mut chol = None;
    while iterations < NEWTON_MAX_ITER {
        let c = match hess.clone().cholesky() {
            Some(c) => c,
            None => break,
        };
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let step = c.solve(&DVector::from_column_slice(&grad));
        let decrement: f64 = step.iter().zip(&grad).map(|(s, g)| s * g).sum();
        chol = Some(c);
        if gnorm <= NEWTON_GRAD_TOL || decrement <= NEWTON_DECREMENT_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            for a in 0..q {
                trial[a] = b[a] + t * step[a];
            }
            let ft = log_integrand(design, psi, mean, precision, log_det_cov, &trial);
            if ft.is_finite() && ft >= f {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent possible at floating-point resolution
            converged = decrement <= 1e-8 || gnorm <= 1e-5 * f.abs().max(1.0);
            break;
        }
        b.copy_from_slice(&trial);
        f = integrand_derivatives(design, psi, mean, precision, log_det_cov, &b, &mut grad, &mut hess);
        chol = None;
    }
    let l = match chol {
        Some(c) => c.l(),
        None => match linalg::cholesky_jittered(&hess, 1e-10) {
            Some(l) => l,
            None => DMatrix::from_diagonal(&DVector::from_iterator(
                q,
                (0..q).map(|a| hess[(a, a)].abs().max(1e-300).sqrt()),
            )),
        },
    };
    if !converged && iterations >= NEWTON_MAX_ITER {
        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        converged = gnorm <= NEWTON_GRAD_TOL;
    }
    let log_integral = f + 0.5 * q as f64 * LN_2PI - 0.5 * linalg::log_det_from_chol(&l);
    LaplaceFit {
        mode: b,
        neg_hessian: hess,
        neg_hessian_chol: l,
        log_peak: f,
        log_integral,
        converged,
        iterations,
    }
}

fn check_component(design: &SubjectDesign, k: usize, psi: &GlmmParams, theta: &MixtureParams) -> Result<()> {
    if k >= theta.k() {
        return Err(Error::Dimension(format!(
            "component {k} of a {}-component mixture",
            theta.k()
        )));
    }
    if psi.alpha.len() != psi.phi.len() {
        return Err(Error::Dimension("alpha and phi have different marker counts".into()));
    }
    if let Some(row) = design.rows.iter().find(|r| r.marker >= psi.alpha.len()) {
        return Err(Error::Dimension(format!(
            "row of marker {} but {} markers in psi",
            row.marker,
            psi.alpha.len()
        )));
    }
    Ok(())
}

/// Exact `log L_{i,k}` for all-gaussian models.
pub fn gaussian_closed_form(design: &SubjectDesign, k: usize, psi: &GlmmParams, theta: &MixtureParams) -> Result<f64> {
    check_component(design, k, psi, theta)?;
    let n = design.n_obs();
    if n == 0 {
        return Ok(0.0);
    }
    if design.rows.iter().any(|r| r.family != Family::Gaussian) {
        return Err(Error::Method("closed form requires every marker to be gaussian".into()));
    }
    let mu = theta.mean(k).as_slice();
    let d = theta.cov(k);
    let mut resid = Vec::with_capacity(n);
    let mut v = DMatrix::zeros(n, n);
    for (j, rj) in design.rows.iter().enumerate() {
        resid.push(rj.y - design.eta(rj, &psi.alpha, mu));
        let (oj, zj) = (design.z_offset(rj), design.z_row(rj));
        for (l, rl) in design.rows.iter().enumerate().take(j + 1) {
            let (ol, zl) = (design.z_offset(rl), design.z_row(rl));
            let mut s = 0.0;
            for (a, za) in zj.iter().enumerate() {
                for (c, zc) in zl.iter().enumerate() {
                    s += za * d[(oj + a, ol + c)] * zc;
                }
            }
            v[(j, l)] = s;
            v[(l, j)] = s;
        }
        let phi = psi.phi[rj.marker]
            .ok_or_else(|| Error::Validation(format!("gaussian marker {} has no dispersion", rj.marker)))?;
        v[(j, j)] += phi;
    }
    let l = v
        .cholesky()
        .ok_or_else(|| Error::Numerical("marginal covariance is not positive definite".into()))?
        .l();
    let quad = linalg::forward_solve_sq_norm(&l, &mut resid);
    Ok(-0.5 * (n as f64 * LN_2PI + linalg::log_det_from_chol(&l) + quad))
}

/// Result of a Laplace evaluation of `log L_{i,k}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceEstimate {
    pub log_l: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Laplace approximation of `log L_{i,k}` with Newton started at `mu_k`.
/// Non-convergence is reported through `converged`; callers with a random
/// stream fall back to [`mc_log_marginal`].
pub fn laplace_log_marginal(
    design: &SubjectDesign,
    k: usize,
    psi: &GlmmParams,
    theta: &MixtureParams,
) -> Result<LaplaceEstimate> {
    check_component(design, k, psi, theta)?;
    let mu = theta.mean(k).as_slice();
    let fit = laplace_fit(design, psi, mu, theta.precision(k), theta.log_det(k), mu);
    Ok(LaplaceEstimate {
        log_l: fit.log_integral,
        converged: fit.converged,
        iterations: fit.iterations,
    })
}

/// Monte Carlo estimate of `log L_{i,k}` and its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub log_l: f64,
    pub se: f64,
}

/// `log (1/S) sum_s exp(log p(y | b_s))` with `b_s ~ N(mu_k, D_k)`.
pub fn mc_log_marginal<R: Rng + ?Sized>(
    design: &SubjectDesign,
    k: usize,
    psi: &GlmmParams,
    theta: &MixtureParams,
    s: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    check_component(design, k, psi, theta)?;
    if s == 0 {
        return Err(Error::Validation("mc needs at least one draw".into()));
    }
    let mu = theta.mean(k);
    let l = theta.chol(k);
    let lls: Vec<f64> = (0..s)
        .map(|_| {
            let b = linalg::sample_mvn_chol(mu, l, rng);
            design.log_lik(psi, b.as_slice())
        })
        .collect();
    let max = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sf = s as f64;
    let scaled: Vec<f64> = lls.iter().map(|v| (v - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / sf;
    let var = if s > 1 {
        scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (sf - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        log_l: max + mean.ln(),
        se: (var / sf).sqrt() / mean,
    })
}

/// `log L_{i,k}` for every component under the chosen method.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMarginals {
    pub log_l: Vec<f64>,
    /// Components where Laplace failed to converge and Monte Carlo was used.
    pub fallbacks: usize,
}

/// Evaluates every `log L_{i,k}`. Monte Carlo streams are keyed by
/// `(opts.seed, draw, subject * K + k)`.
pub fn log_component_marginals(
    design: &SubjectDesign,
    psi: &GlmmParams,
    theta: &MixtureParams,
    opts: &MarglikOptions,
    subject: usize,
    draw: u64,
) -> Result<ComponentMarginals> {
    let kk = theta.k();
    let mut log_l = Vec::with_capacity(kk);
    let mut fallbacks = 0;
    for k in 0..kk {
        let stream = || substream(opts.seed, Block::MonteCarloMarginal, draw, (subject * kk + k) as u64);
        let v = match opts.method {
            MarglikMethod::ClosedForm => gaussian_closed_form(design, k, psi, theta)?,
            MarglikMethod::Laplace => {
                let est = laplace_log_marginal(design, k, psi, theta)?;
                if est.converged && est.log_l.is_finite() {
                    est.log_l
                } else {
                    fallbacks += 1;
                    mc_log_marginal(design, k, psi, theta, opts.mc_draws.max(1), &mut stream())?.log_l
                }
            }
            MarglikMethod::Mc => mc_log_marginal(design, k, psi, theta, opts.mc_draws, &mut stream())?.log_l,
        };
        log_l.push(v);
    }
    Ok(ComponentMarginals { log_l, fallbacks })
}

/// `log sum_k w_k exp(log_l_k)`.
pub fn mix_log_marginals(weights: &[f64], log_l: &[f64]) -> f64 {
    let terms: Vec<f64> = weights.iter().zip(log_l).map(|(w, l)| w.ln() + l).collect();
    log_sum_exp(&terms)
}

/// `log sum_k w_k L_{i,k}`.
pub fn log_mixture_marglik(
    design: &SubjectDesign,
    psi: &GlmmParams,
    theta: &MixtureParams,
    opts: &MarglikOptions,
    subject: usize,
    draw: u64,
) -> Result<f64> {
    if opts.method == MarglikMethod::ClosedForm && design.rows.iter().any(|r| r.family != Family::Gaussian) {
        return Err(Error::Method("closed form requires every marker to be gaussian".into()));
    }
    let c = log_component_marginals(design, psi, theta, opts, subject, draw)?;
    Ok(mix_log_marginals(theta.weights(), &c.log_l))
}

/// Per-subject `log sum_k w_k L_{i,k}`, evaluated in parallel.
pub fn subject_log_marglik(
    ds: &ValidatedDataset,
    psi: &GlmmParams,
    theta: &MixtureParams,
    opts: &MarglikOptions,
    draw: u64,
) -> Result<Vec<f64>> {
    opts.check(ds)?;
    (0..ds.n_subjects())
        .into_par_iter()
        .map(|i| log_mixture_marglik(ds.design(i), psi, theta, opts, i, draw))
        .collect()
}

/// `D = -2 sum_i log sum_k w_k L_{i,k}`; the sum runs in subject order.
pub fn observed_deviance(
    ds: &ValidatedDataset,
    psi: &GlmmParams,
    theta: &MixtureParams,
    opts: &MarglikOptions,
) -> Result<f64> {
    observed_deviance_at(ds, psi, theta, opts, 0)
}

/// As [`observed_deviance`] with an explicit Monte Carlo stream index.
pub fn observed_deviance_at(
    ds: &ValidatedDataset,
    psi: &GlmmParams,
    theta: &MixtureParams,
    opts: &MarglikOptions,
    draw: u64,
) -> Result<f64> {
    let per = subject_log_marglik(ds, psi, theta, opts, draw)?;
    Ok(-2.0 * per.iter().sum::<f64>())
}
