//! Block Gibbs sampler with Metropolis-Hastings steps for the joint posterior
//! of GLMM parameters, mixture parameters, random effects and allocations.
//!
//! One sweep updates, in order: allocations, weights, component means and
//! covariances, the Wishart hyper-scale, random effects, GLMM parameters.
//! Every random draw comes from a stream keyed by the sweep index and the
//! subject (or component, or marker), so per-subject loops run in parallel
//! without changing the output.

mod init;
mod kmeans;

pub use init::{crude_effects, population_fit, PopulationFit, SUBJECT_PENALTY};
pub use kmeans::kmeans;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::marglik::{laplace_fit, MarglikOptions};
use crate::mixture::{MixtureParams, ThetaDraw, DEFAULT_JITTER};
use crate::model::{row_derivatives, Family, GlmmParams, ValidatedDataset};
use crate::priors::{default_hyperparameters, ln_normal, PriorOverrides, PriorSpec};
use crate::rng::{substream, Block};

pub const DEFAULT_ADAPT_WINDOW: usize = 50;

/// MCMC run settings. Raw sweeps are `(burnin + keep) * thin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub keep: usize,
    pub thin: usize,
    /// Burn-in in stored-draw units; `burnin * thin` raw sweeps.
    pub burnin: usize,
    pub seed: u64,
    /// Adapt proposal scales during burn-in.
    pub adapt: bool,
    #[serde(default = "default_window")]
    pub adapt_window: usize,
    /// Backend recorded for the probability and deviance computations
    /// downstream of this chain.
    pub marglik: MarglikOptions,
    #[serde(default)]
    pub store_random_effects: bool,
    /// Use random-walk MH for random effects even when an exact draw exists.
    #[serde(default)]
    pub force_mh: bool,
    /// Drop the likelihood; the chain then targets the prior.
    #[serde(default)]
    pub prior_only: bool,
}

fn default_window() -> usize {
    DEFAULT_ADAPT_WINDOW
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            keep: 10_000,
            thin: 100,
            burnin: 1000,
            seed: 1,
            adapt: true,
            adapt_window: DEFAULT_ADAPT_WINDOW,
            marglik: MarglikOptions::default(),
            store_random_effects: false,
            force_mh: false,
            prior_only: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keep < 1 || self.thin < 1 {
            return Err(Error::Validation("keep and thin must be at least 1".into()));
        }
        if self.adapt_window < 1 {
            return Err(Error::Validation("adaptation window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn burnin_sweeps(&self) -> u64 {
        (self.burnin * self.thin) as u64
    }

    pub fn total_sweeps(&self) -> u64 {
        ((self.burnin + self.keep) * self.thin) as u64
    }
}

/// Target acceptance of a random-walk proposal in `dim` dimensions: 0.44 in
/// one dimension, 0.234 from five on, linear in between.
pub fn target_acceptance(dim: usize) -> f64 {
    match dim {
        0 | 1 => 0.44,
        d if d >= 5 => 0.234,
        d => 0.44 - (d as f64 - 1.0) * (0.44 - 0.234) / 4.0,
    }
}

/// Random-walk proposal `x + s * F z`, `z ~ N(0, I)`, `F` upper triangular.
#[derive(Debug, Clone, PartialEq)]
pub struct RwProposal {
    pub log_scale: f64,
    pub factor: DMatrix<f64>,
    pub window_accepted: u32,
    pub window_tried: u32,
    pub accepted: u64,
    pub tried: u64,
    pub accepted_burnin: u64,
    pub tried_burnin: u64,
}

impl RwProposal {
    pub fn new(dim: usize) -> Self {
        Self {
            log_scale: (2.38 / (dim.max(1) as f64).sqrt()).ln(),
            factor: DMatrix::identity(dim, dim),
            window_accepted: 0,
            window_tried: 0,
            accepted: 0,
            tried: 0,
            accepted_burnin: 0,
            tried_burnin: 0,
        }
    }

    /// Sets `F = L^{-T}` where `L L^T` is the given precision, so the proposal
    /// covariance is `s^2` times its inverse.
    pub fn set_precision(&mut self, precision: &DMatrix<f64>) {
        if let Some(l) = linalg::cholesky_jittered(precision, 1e-8) {
            let n = l.nrows();
            let mut linv = DMatrix::identity(n, n);
            l.solve_lower_triangular_mut(&mut linv);
            self.factor = linv.transpose();
        }
    }

    fn propose<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let n = x.len();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let s = self.log_scale.exp();
        (0..n)
            .map(|a| x[a] + s * (a..n).map(|c| self.factor[(a, c)] * z[c]).sum::<f64>())
            .collect()
    }

    fn record(&mut self, accepted: bool, burnin: bool) {
        self.window_tried += 1;
        self.window_accepted += accepted as u32;
        if burnin {
            self.tried_burnin += 1;
            self.accepted_burnin += accepted as u64;
        } else {
            self.tried += 1;
            self.accepted += accepted as u64;
        }
    }

    /// Robbins-Monro step on `log s` at the end of adaptation window `w`
    /// (1-based).
    fn adapt(&mut self, w: u64, target: f64) {
        if self.window_tried > 0 {
            let rate = self.window_accepted as f64 / self.window_tried as f64;
            let gamma = (2.0 / (w as f64).sqrt()).min(1.0);
            self.log_scale += gamma * (rate - target);
        }
        self.window_accepted = 0;
        self.window_tried = 0;
    }
}

/// The full latent state of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub psi: GlmmParams,
    pub theta: MixtureParams,
    /// Diagonal of the Wishart scale hyperparameter.
    pub hyper_scale: Vec<f64>,
    /// Random effects, one vector of length `q` per subject.
    pub b: Vec<Vec<f64>>,
    /// Allocations in `0..K`.
    pub u: Vec<usize>,
    pub re_proposals: Vec<RwProposal>,
    /// Proposals for fixed effects of non-gaussian markers.
    pub alpha_proposals: Vec<Option<RwProposal>>,
}

impl ChainState {
    pub fn k(&self) -> usize {
        self.theta.k()
    }

    /// Checks the invariants that must hold after every sweep.
    pub fn check(&self) -> std::result::Result<(), String> {
        let s: f64 = self.theta.weights().iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("weights sum to {s}"));
        }
        if let Some(u) = self.u.iter().find(|&&u| u >= self.k()) {
            return Err(format!("allocation {u} out of range"));
        }
        if self.psi.phi.iter().flatten().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err("non-positive dispersion".into());
        }
        if self.b.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite random effect".into());
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let mut counts = vec![0usize; self.k()];
        for &u in &self.u {
            counts[u] += 1;
        }
        format!(
            "weights={:?} counts={:?} means={:?} alpha={:?} phi={:?} hyper_scale={:?}",
            self.theta.weights(),
            counts,
            self.theta
                .means()
                .iter()
                .map(|m| m.as_slice().to_vec())
                .collect::<Vec<_>>(),
            self.psi.alpha,
            self.psi.phi,
            self.hyper_scale
        )
    }
}

/// One stored posterior draw of `(psi, theta, Xi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub psi: GlmmParams,
    pub theta: ThetaDraw,
    pub hyper_scale: Vec<f64>,
}

impl Draw {
    pub fn permuted(&self, perm: &[usize]) -> Draw {
        Draw {
            psi: self.psi.clone(),
            theta: self.theta.permuted(perm),
            hyper_scale: self.hyper_scale.clone(),
        }
    }
}

/// Acceptance rates of the MH blocks; `None` where no MH step ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub random_effects_burnin: Option<f64>,
    pub random_effects: Option<f64>,
    pub alpha_burnin: Vec<Option<f64>>,
    pub alpha: Vec<Option<f64>>,
}

/// Stored output of one chain.
#[derive(Debug, Clone)]
pub struct ChainSample {
    pub k: usize,
    pub n_subjects: usize,
    pub q: usize,
    pub draws: Vec<Draw>,
    /// Per draw, `N x K` row-major conditional allocation probabilities
    /// `w_k phi(b_i; mu_k, D_k) / sum_l (...)`.
    pub alloc_probs: Vec<Vec<f64>>,
    /// Per draw, `N x q` row-major random effects (when requested).
    pub random_effects: Option<Vec<Vec<f64>>>,
    pub acceptance: AcceptanceSummary,
    pub config: McmcConfig,
    pub prior: PriorSpec,
    /// Random-effect proposal log-scales at the end of burn-in and at the end.
    pub scales_after_burnin: Vec<f64>,
    pub scales_at_end: Vec<f64>,
    /// Permutation applied to each draw by relabeling (identity if none).
    pub permutations: Vec<Vec<usize>>,
}

impl ChainSample {
    pub fn m(&self) -> usize {
        self.draws.len()
    }

    /// Conditional allocation probability `p^{(m)}_{i,k}`.
    pub fn alloc_prob(&self, m: usize, i: usize, k: usize) -> f64 {
        self.alloc_probs[m][i * self.k + k]
    }
}

/// Sweep operations over a fixed dataset, prior and configuration.
pub struct Sampler<'a> {
    pub ds: &'a ValidatedDataset,
    pub prior: &'a PriorSpec,
    pub config: &'a McmcConfig,
    exact_random_effects: bool,
}

fn chain_err(iteration: u64, block: &'static str, message: String, state: &ChainState) -> Error {
    Error::Chain {
        iteration,
        block,
        message,
        state: state.dump(),
    }
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> std::result::Result<f64, String> {
    Gamma::new(shape, 1.0 / rate)
        .map_err(|e| format!("invalid gamma({shape}, {rate}): {e}"))
        .map(|g| g.sample(rng))
}

impl<'a> Sampler<'a> {
    pub fn new(ds: &'a ValidatedDataset, prior: &'a PriorSpec, config: &'a McmcConfig) -> Result<Self> {
        config.validate()?;
        prior.validate(ds.layout.q)?;
        Ok(Self {
            ds,
            prior,
            config,
            exact_random_effects: ds.layout.all_gaussian() && !config.force_mh,
        })
    }

    /// Whether random effects use the exact conjugate draw.
    pub fn exact_random_effects(&self) -> bool {
        self.exact_random_effects
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn update_allocations(&self, st: &mut ChainState, iter: u64) {
        if st.k() == 1 {
            return;
        }
        let theta = &st.theta;
        let seed = self.seed();
        st.u.par_iter_mut()
            .zip(st.b.par_iter())
            .enumerate()
            .for_each(|(i, (u, b))| {
                let p = theta.allocation_probs(b);
                let mut rng = substream(seed, Block::Allocations, iter, i as u64);
                *u = categorical(&p, rng.random::<f64>());
            });
    }

    pub fn update_weights(&self, st: &mut ChainState, iter: u64) -> std::result::Result<(), String> {
        let k = st.k();
        let mut counts = vec![0usize; k];
        for &u in &st.u {
            counts[u] += 1;
        }
        let mut rng = substream(self.seed(), Block::Weights, iter, 0);
        let g: Vec<f64> = counts
            .iter()
            .map(|&n| gamma_draw(self.prior.delta + n as f64, 1.0, &mut rng))
            .collect::<std::result::Result<_, _>>()?;
        let total: f64 = g.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err("degenerate dirichlet draw".into());
        }
        let w: Vec<f64> = g.iter().map(|v| v / total).collect();
        st.theta = MixtureParams::new(
            w,
            st.theta.means().to_vec(),
            (0..k).map(|j| st.theta.cov(j).clone()).collect(),
        )
        .map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn update_means_covariances(&self, st: &mut ChainState, iter: u64) -> std::result::Result<(), String> {
        let k = st.k();
        let q = self.ds.layout.q;
        let pr = self.prior;
        let c_inv = DMatrix::from_diagonal(&DVector::from_iterator(q, pr.c_diag.iter().map(|c| 1.0 / c)));
        let c_inv_xi = DVector::from_iterator(q, pr.xi.iter().zip(&pr.c_diag).map(|(x, c)| x / c));
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            let mut rng = substream(self.seed(), Block::MeansCovariances, iter, j as u64);
            let members: Vec<&Vec<f64>> =
                st.b.iter()
                    .zip(&st.u)
                    .filter(|(_, &u)| u == j)
                    .map(|(b, _)| b)
                    .collect();
            let n = members.len() as f64;
            let mut sum = DVector::zeros(q);
            for b in &members {
                for a in 0..q {
                    sum[a] += b[a];
                }
            }
            let d_inv = st.theta.precision(j);
            let precision = &c_inv + d_inv * n;
            let h = &c_inv_xi + d_inv * &sum;
            let lp = linalg::cholesky_jittered(&precision, DEFAULT_JITTER)
                .ok_or_else(|| format!("mean full-conditional precision of component {j} is not PD"))?;
            let mu = linalg::sample_mvn_canonical(&h, &lp, &mut rng);

            let mut scatter = DMatrix::from_diagonal(&DVector::from_column_slice(&st.hyper_scale));
            for b in &members {
                let r = DVector::from_iterator(q, (0..q).map(|a| b[a] - mu[a]));
                scatter += &r * r.transpose();
            }
            let ls = linalg::cholesky_jittered(&scatter, DEFAULT_JITTER)
                .ok_or_else(|| format!("wishart scale of component {j} is not PD"))?;
            let scale = linalg::inverse_from_chol(&ls);
            let scale_chol = linalg::cholesky_jittered(&scale, DEFAULT_JITTER)
                .ok_or_else(|| format!("inverse wishart scale of component {j} is not PD"))?;
            let w = linalg::sample_wishart(pr.zeta + n, &scale_chol, &mut rng);
            let lw = linalg::cholesky_jittered(&w, DEFAULT_JITTER)
                .ok_or_else(|| format!("precision draw of component {j} is not PD"))?;
            means.push(mu);
            covs.push(linalg::inverse_from_chol(&lw));
        }
        st.theta = MixtureParams::new(st.theta.weights().to_vec(), means, covs).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn update_hyper_scale(&self, st: &mut ChainState, iter: u64) -> std::result::Result<(), String> {
        let q = self.ds.layout.q;
        let k = st.k() as f64;
        let mut rng = substream(self.seed(), Block::HyperScale, iter, 0);
        for j in 0..q {
            let s: f64 = (0..st.k()).map(|c| st.theta.precision(c)[(j, j)]).sum();
            let shape = self.prior.gamma_shape + 0.5 * k * self.prior.zeta;
            let rate = self.prior.gamma_rate[j] + 0.5 * s;
            let v = gamma_draw(shape, rate, &mut rng)?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("hyper-scale draw {v} for coordinate {j}"));
            }
            st.hyper_scale[j] = v;
        }
        Ok(())
    }

    /// `log p(y_i | b) + log phi(b; mu_k, D_k)`, without the data term in
    /// prior-only mode.
    fn re_log_target(&self, i: usize, psi: &GlmmParams, theta: &MixtureParams, k: usize, b: &[f64]) -> f64 {
        let prior = theta.log_component_density(k, b);
        if self.config.prior_only {
            prior
        } else {
            self.ds.design(i).log_lik(psi, b) + prior
        }
    }

    /// Negative Hessian of the random-effect target around the current value.
    fn re_curvature(&self, i: usize, psi: &GlmmParams, theta: &MixtureParams, k: usize, b: &[f64]) -> DMatrix<f64> {
        if self.config.prior_only {
            return theta.precision(k).clone();
        }
        let fit = laplace_fit(
            self.ds.design(i),
            psi,
            theta.mean(k).as_slice(),
            theta.precision(k),
            theta.log_det(k),
            b,
        );
        fit.neg_hessian
    }

    /// Exact draw of `b_i` when every marker is gaussian.
    fn exact_re_draw<R: Rng + ?Sized>(
        &self,
        i: usize,
        psi: &GlmmParams,
        theta: &MixtureParams,
        k: usize,
        rng: &mut R,
    ) -> Vec<f64> {
        let q = self.ds.layout.q;
        let d_inv = theta.precision(k);
        let mut precision = d_inv.clone();
        let mut h = d_inv * theta.mean(k);
        if !self.config.prior_only {
            let design = self.ds.design(i);
            for row in &design.rows {
                let phi = psi.phi[row.marker].unwrap_or(1.0);
                let off = design.z_offset(row);
                let z = design.z_row(row);
                let resid = row.y - design.fixed_part(row, &psi.alpha);
                for (a, za) in z.iter().enumerate() {
                    h[off + a] += za * resid / phi;
                    for (c, zc) in z.iter().enumerate() {
                        precision[(off + a, off + c)] += za * zc / phi;
                    }
                }
            }
        }
        let l = linalg::cholesky_jittered(&precision, DEFAULT_JITTER).unwrap_or_else(|| DMatrix::identity(q, q));
        linalg::sample_mvn_canonical(&h, &l, rng).as_slice().to_vec()
    }

    pub fn update_random_effects(&self, st: &mut ChainState, iter: u64) {
        let seed = self.seed();
        let burnin = iter < self.config.burnin_sweeps();
        let adapting = self.config.adapt && burnin;
        let window = self.config.adapt_window as u64;
        let window_end = adapting && (iter + 1) % window == 0;
        let target = target_acceptance(self.ds.layout.q);
        let (psi, theta, u) = (&st.psi, &st.theta, &st.u);
        let exact = self.exact_random_effects;
        st.b.par_iter_mut()
            .zip(st.re_proposals.par_iter_mut())
            .enumerate()
            .for_each(|(i, (b, prop))| {
                let mut rng = substream(seed, Block::RandomEffects, iter, i as u64);
                let k = u[i];
                if exact {
                    *b = self.exact_re_draw(i, psi, theta, k, &mut rng);
                    return;
                }
                let cand = prop.propose(b, &mut rng);
                let log_ratio = self.re_log_target(i, psi, theta, k, &cand) - self.re_log_target(i, psi, theta, k, b);
                let accept = rng.random::<f64>().ln() < log_ratio;
                if accept {
                    *b = cand;
                }
                prop.record(accept, burnin);
                if window_end {
                    prop.adapt((iter + 1) / window, target);
                    let h = self.re_curvature(i, psi, theta, k, b);
                    prop.set_precision(&h);
                }
            });
    }

    /// Log-likelihood contributions of marker `r` with fixed effects `alpha_r`,
    /// plus their gradient-free Fisher information when requested.
    fn marker_log_lik(&self, st: &ChainState, r: usize, alpha_r: &[f64]) -> f64 {
        let mut total = 0.0;
        for (s, b) in self.ds.subjects.iter().zip(&st.b) {
            let d = &s.design;
            for row in d.rows.iter().filter(|row| row.marker == r) {
                let eta = d.x_row(row).iter().zip(alpha_r).map(|(x, a)| x * a).sum::<f64>() + d.random_part(row, b);
                total += row_derivatives(row, eta, st.psi.phi[r]).0;
            }
        }
        total
    }

    fn marker_information(&self, st: &ChainState, r: usize) -> DMatrix<f64> {
        let p = self.ds.layout.fixed_dims[r];
        let mut info = DMatrix::identity(p, p) / self.prior.alpha_prior_var;
        if self.config.prior_only {
            return info;
        }
        for (s, b) in self.ds.subjects.iter().zip(&st.b) {
            let d = &s.design;
            for row in d.rows.iter().filter(|row| row.marker == r) {
                let eta = d.eta(row, &st.psi.alpha, b);
                let w = row_derivatives(row, eta, st.psi.phi[r]).2;
                let x = d.x_row(row);
                for a in 0..p {
                    for c in 0..p {
                        info[(a, c)] += w * x[a] * x[c];
                    }
                }
            }
        }
        info
    }

    fn alpha_log_prior(&self, alpha_r: &[f64]) -> f64 {
        alpha_r
            .iter()
            .map(|a| ln_normal(*a, self.prior.alpha_prior_mean, self.prior.alpha_prior_var))
            .sum()
    }

    pub fn update_glmm_params(&self, st: &mut ChainState, iter: u64) -> std::result::Result<(), String> {
        let layout = &self.ds.layout;
        let burnin = iter < self.config.burnin_sweeps();
        let window = self.config.adapt_window as u64;
        let window_end = self.config.adapt && burnin && (iter + 1) % window == 0;
        for r in 0..layout.n_markers() {
            let mut rng = substream(self.seed(), Block::GlmmParams, iter, r as u64);
            let p = layout.fixed_dims[r];
            match layout.families[r] {
                Family::Gaussian => {
                    if p > 0 {
                        self.gaussian_alpha_draw(st, r, &mut rng)?;
                    }
                    self.gaussian_phi_draw(st, r, &mut rng)?;
                }
                _ if p == 0 => {}
                _ => {
                    let prop = st.alpha_proposals[r].as_ref().ok_or("missing fixed-effect proposal")?;
                    let cur = st.psi.alpha[r].clone();
                    let cand = prop.propose(&cur, &mut rng);
                    let log_ratio = if self.config.prior_only {
                        self.alpha_log_prior(&cand) - self.alpha_log_prior(&cur)
                    } else {
                        self.marker_log_lik(st, r, &cand) + self.alpha_log_prior(&cand)
                            - self.marker_log_lik(st, r, &cur)
                            - self.alpha_log_prior(&cur)
                    };
                    let accept = rng.random::<f64>().ln() < log_ratio;
                    if accept {
                        st.psi.alpha[r] = cand;
                    }
                    let info = if window_end {
                        Some(self.marker_information(st, r))
                    } else {
                        None
                    };
                    let prop = st.alpha_proposals[r].as_mut().expect("checked above");
                    prop.record(accept, burnin);
                    if let Some(info) = info {
                        prop.adapt((iter + 1) / window, target_acceptance(p));
                        prop.set_precision(&info);
                    }
                }
            }
        }
        Ok(())
    }

    fn gaussian_alpha_draw<R: Rng + ?Sized>(
        &self,
        st: &mut ChainState,
        r: usize,
        rng: &mut R,
    ) -> std::result::Result<(), String> {
        let p = self.ds.layout.fixed_dims[r];
        let v0 = self.prior.alpha_prior_var;
        let mut precision = DMatrix::identity(p, p) / v0;
        let mut h = DVector::from_element(p, self.prior.alpha_prior_mean / v0);
        if !self.config.prior_only {
            let phi = st.psi.phi[r].ok_or("gaussian marker without dispersion")?;
            for (s, b) in self.ds.subjects.iter().zip(&st.b) {
                let d = &s.design;
                for row in d.rows.iter().filter(|row| row.marker == r) {
                    let x = d.x_row(row);
                    let resid = row.y - d.random_part(row, b);
                    for a in 0..p {
                        h[a] += x[a] * resid / phi;
                        for c in 0..p {
                            precision[(a, c)] += x[a] * x[c] / phi;
                        }
                    }
                }
            }
        }
        let l = linalg::cholesky_jittered(&precision, DEFAULT_JITTER).ok_or("fixed-effect precision is not PD")?;
        st.psi.alpha[r] = linalg::sample_mvn_canonical(&h, &l, rng).as_slice().to_vec();
        Ok(())
    }

    fn gaussian_phi_draw<R: Rng + ?Sized>(
        &self,
        st: &mut ChainState,
        r: usize,
        rng: &mut R,
    ) -> std::result::Result<(), String> {
        let mut n = 0usize;
        let mut ss = 0.0;
        if !self.config.prior_only {
            for (s, b) in self.ds.subjects.iter().zip(&st.b) {
                let d = &s.design;
                for row in d.rows.iter().filter(|row| row.marker == r) {
                    let e = row.y - d.eta(row, &st.psi.alpha, b);
                    ss += e * e;
                    n += 1;
                }
            }
        }
        let shape = self.prior.phi_prior_shape + 0.5 * n as f64;
        let rate = self.prior.phi_prior_rate + 0.5 * ss;
        let g = gamma_draw(shape, rate, rng)?;
        let phi = 1.0 / g;
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(format!("dispersion draw {phi}"));
        }
        st.psi.phi[r] = Some(phi);
        Ok(())
    }

    /// One full sweep in the fixed block order.
    pub fn sweep(&self, st: &mut ChainState, iter: u64) -> Result<()> {
        self.update_allocations(st, iter);
        self.update_weights(st, iter)
            .map_err(|m| chain_err(iter, "weights", m, st))?;
        self.update_means_covariances(st, iter)
            .map_err(|m| chain_err(iter, "means_covariances", m, st))?;
        self.update_hyper_scale(st, iter)
            .map_err(|m| chain_err(iter, "hyper_scale", m, st))?;
        self.update_random_effects(st, iter);
        self.update_glmm_params(st, iter)
            .map_err(|m| chain_err(iter, "glmm_params", m, st))?;
        st.check().map_err(|m| chain_err(iter, "invariants", m, st))
    }

    /// Conditional allocation probabilities of every subject, `N x K`
    /// row-major.
    pub fn allocation_probs(&self, st: &ChainState) -> Vec<f64> {
        let theta = &st.theta;
        let rows: Vec<Vec<f64>> = st.b.par_iter().map(|b| theta.allocation_probs(b)).collect();
        rows.concat()
    }
}

/// Index `k` with `cum_{k-1} <= u < cum_k`.
fn categorical(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return k;
        }
    }
    // rounding left u above the final cumulative sum
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

/// Starting state and data-driven prior.
///
/// Crude per-subject estimates come from penalized fits around a population
/// GLM; k-means on their standardized values gives the allocations; the
/// component means are cluster means and every covariance starts at the pooled
/// within-cluster covariance.
pub fn initialize(
    ds: &ValidatedDataset,
    k: usize,
    overrides: &PriorOverrides,
    config: &McmcConfig,
) -> Result<(ChainState, PriorSpec)> {
    let n = ds.n_subjects();
    let q = ds.layout.q;
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Validation(format!(
            "K = {k} exceeds the number of subjects ({n})"
        )));
    }
    if q == 0 {
        return Err(Error::Validation("the model has no random effects to cluster".into()));
    }
    let pop = population_fit(ds);
    let crude = crude_effects(ds, &pop);
    let prior = default_hyperparameters(ds, k, &crude)?.with_overrides(overrides)?;

    let mean: Vec<f64> = (0..q)
        .map(|j| crude.iter().map(|b| b[j]).sum::<f64>() / n as f64)
        .collect();
    let sd: Vec<f64> = (0..q)
        .map(|j| {
            let v = crude.iter().map(|b| (b[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let standardized: Vec<Vec<f64>> = crude
        .iter()
        .map(|b| (0..q).map(|j| (b[j] - mean[j]) / sd[j]).collect())
        .collect();
    let mut rng = substream(config.seed, Block::Init, 0, 0);
    let u = kmeans(&standardized, k, &mut rng);

    let mut counts = vec![0usize; k];
    let mut means = vec![DVector::<f64>::zeros(q); k];
    for (b, &c) in crude.iter().zip(&u) {
        counts[c] += 1;
        for j in 0..q {
            means[c][j] += b[j];
        }
    }
    for c in 0..k {
        means[c] /= counts[c] as f64;
    }
    let mut pooled = DMatrix::<f64>::zeros(q, q);
    for (b, &c) in crude.iter().zip(&u) {
        let r = DVector::from_iterator(q, (0..q).map(|j| b[j] - means[c][j]));
        pooled += &r * r.transpose();
    }
    pooled /= (n as f64 - k as f64).max(1.0);
    for j in 0..q {
        let floor = (1e-3 * pooled[(j, j)]).max(1e-4 * prior.c_diag[j]);
        pooled[(j, j)] += floor;
    }
    let floor = 1.0 / (10.0 * k as f64);
    let shares: Vec<f64> = counts.iter().map(|&c| (c as f64 / n as f64).max(floor)).collect();
    let total: f64 = shares.iter().sum();
    let weights: Vec<f64> = shares.iter().map(|s| s / total).collect();
    let theta = MixtureParams::new(weights, means, vec![pooled; k])?;

    let hyper_scale: Vec<f64> = (0..q)
        .map(|j| {
            let s: f64 = (0..k).map(|c| theta.precision(c)[(j, j)]).sum();
            (prior.gamma_shape + 0.5 * k as f64 * prior.zeta) / (prior.gamma_rate[j] + 0.5 * s)
        })
        .collect();

    let layout = &ds.layout;
    let mut state = ChainState {
        psi: pop.psi.clone(),
        theta,
        hyper_scale,
        b: crude,
        u,
        re_proposals: vec![RwProposal::new(q); n],
        alpha_proposals: (0..layout.n_markers())
            .map(|r| {
                (layout.families[r] != Family::Gaussian && layout.fixed_dims[r] > 0)
                    .then(|| RwProposal::new(layout.fixed_dims[r]))
            })
            .collect(),
    };
    let sampler = Sampler::new(ds, &prior, config)?;
    refresh_proposals(&sampler, &mut state);
    Ok((state, prior))
}

/// Recomputes every proposal covariance from the current state.
pub fn refresh_proposals(sampler: &Sampler, st: &mut ChainState) {
    let (psi, theta, u) = (&st.psi, &st.theta, &st.u);
    let b = &st.b;
    st.re_proposals.par_iter_mut().enumerate().for_each(|(i, prop)| {
        let h = sampler.re_curvature(i, psi, theta, u[i], &b[i]);
        prop.set_precision(&h);
    });
    for r in 0..st.alpha_proposals.len() {
        if st.alpha_proposals[r].is_some() {
            let info = sampler.marker_information(st, r);
            st.alpha_proposals[r].as_mut().expect("checked").set_precision(&info);
        }
    }
}

fn rate(acc: u64, tried: u64) -> Option<f64> {
    (tried > 0).then(|| acc as f64 / tried as f64)
}

/// Runs `burnin * thin` adaptation sweeps followed by `keep * thin` sweeps,
/// storing every `thin`-th state.
pub fn run_chain(ds: &ValidatedDataset, k: usize, prior: &PriorOverrides, config: &McmcConfig) -> Result<ChainSample> {
    config.validate()?;
    let (state, spec) = initialize(ds, k, prior, config)?;
    run_chain_from(ds, state, spec, config)
}

/// As [`run_chain`] from a given starting state and prior.
pub fn run_chain_from(
    ds: &ValidatedDataset,
    mut st: ChainState,
    prior: PriorSpec,
    config: &McmcConfig,
) -> Result<ChainSample> {
    let sampler = Sampler::new(ds, &prior, config)?;
    let burn = config.burnin_sweeps();
    let total = config.total_sweeps();
    let thin = config.thin as u64;
    let mut draws = Vec::with_capacity(config.keep);
    let mut alloc_probs = Vec::with_capacity(config.keep);
    let mut random_effects = config.store_random_effects.then(|| Vec::with_capacity(config.keep));
    let mut scales_after_burnin = st.re_proposals.iter().map(|p| p.log_scale).collect();
    for iter in 0..total {
        sampler.sweep(&mut st, iter)?;
        if iter + 1 == burn {
            scales_after_burnin = st.re_proposals.iter().map(|p| p.log_scale).collect();
        }
        if iter >= burn && (iter - burn + 1) % thin == 0 {
            draws.push(Draw {
                psi: st.psi.clone(),
                theta: st.theta.to_draw(),
                hyper_scale: st.hyper_scale.clone(),
            });
            alloc_probs.push(sampler.allocation_probs(&st));
            if let Some(re) = random_effects.as_mut() {
                re.push(st.b.concat());
            }
        }
    }
    let re_acc = |burnin: bool| {
        let (a, t) = st.re_proposals.iter().fold((0, 0), |(a, t), p| {
            if burnin {
                (a + p.accepted_burnin, t + p.tried_burnin)
            } else {
                (a + p.accepted, t + p.tried)
            }
        });
        rate(a, t)
    };
    let acceptance = AcceptanceSummary {
        random_effects_burnin: re_acc(true),
        random_effects: re_acc(false),
        alpha_burnin: st
            .alpha_proposals
            .iter()
            .map(|p| p.as_ref().and_then(|p| rate(p.accepted_burnin, p.tried_burnin)))
            .collect(),
        alpha: st
            .alpha_proposals
            .iter()
            .map(|p| p.as_ref().and_then(|p| rate(p.accepted, p.tried)))
            .collect(),
    };
    let m = draws.len();
    Ok(ChainSample {
        k: st.k(),
        n_subjects: ds.n_subjects(),
        q: ds.layout.q,
        draws,
        alloc_probs,
        random_effects,
        acceptance,
        config: config.clone(),
        prior,
        scales_after_burnin,
        scales_at_end: st.re_proposals.iter().map(|p| p.log_scale).collect(),
        permutations: vec![(0..st.k()).collect(); m],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_interpolate() {
        assert_eq!(target_acceptance(1), 0.44);
        assert_eq!(target_acceptance(5), 0.234);
        assert_eq!(target_acceptance(9), 0.234);
        assert!(target_acceptance(2) < 0.44 && target_acceptance(4) > 0.234);
    }

    #[test]
    fn categorical_edges() {
        assert_eq!(categorical(&[1.0], 0.999), 0);
        assert_eq!(categorical(&[0.5, 0.5], 0.5), 1);
        assert_eq!(categorical(&[0.3, 0.7, 0.0], 0.99999999999999999), 1);
    }

    #[test]
    fn zero_step_is_always_accepted() {
        let mut p = RwProposal::new(3);
        p.log_scale = f64::NEG_INFINITY;
        let x = [0.1, 0.2, 0.3];
        let mut rng = substream(1, Block::Test, 0, 0);
        let y = p.propose(&x, &mut rng);
        assert_eq!(y, x.to_vec());
        // equal targets give log-ratio 0, accepted since ln U < 0 a.s.
        assert!(rng.random::<f64>().ln() < 0.0);
    }

    #[test]
    fn proposal_factor_reproduces_inverse_precision() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let mut p = RwProposal::new(2);
        p.set_precision(&h);
        let cov = &p.factor * p.factor.transpose();
        let inv = h.try_inverse().unwrap();
        assert!((cov - inv).amax() < 1e-12);
    }
}
