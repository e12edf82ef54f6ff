//! Label-switching correction, posterior component probabilities,
//! classification with optional deferral, and posterior summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marglik::{log_component_marginals, MarglikOptions};
use crate::mixture::{normalize_log_weights, MixtureParams};
use crate::model::{logistic, Covariate, Family, GlmmParams, ValidatedDataset};
use crate::sampler::ChainSample;

/// Largest K solved by enumerating all permutations.
pub const EXHAUSTIVE_MAX_K: usize = 6;
pub const MAX_RELABEL_ROUNDS: usize = 100;

/// All permutations of `0..k` in lexicographic order.
pub fn all_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..k).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..k).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..k).rev().find(|&j| p[j] > p[i - 1]).expect("pivot exists");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// `perm[k] = l` minimizing `sum_k cost[k][perm[k]]` by enumeration; ties go
/// to the lexicographically first permutation.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let k = cost.len();
    let mut best = (0..k).collect::<Vec<_>>();
    let mut best_v = f64::INFINITY;
    for p in all_permutations(k) {
        let v: f64 = p.iter().enumerate().map(|(a, &b)| cost[a][b]).sum();
        if v < best_v {
            best_v = v;
            best = p;
        }
    }
    best
}

/// Square assignment problem by the Hungarian method (shortest augmenting
/// paths with potentials), `O(k^3)`. Returns `perm[row] = column`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays as in the classical formulation; index 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            if j1 == 0 {
                // only non-finite costs remain; take any free column
                j1 = (1..=n).find(|&j| !used[j]).expect("free column");
                delta = 0.0;
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

/// Minimum-cost permutation: enumeration for `K <= 6`, Hungarian above.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    if cost.len() <= EXHAUSTIVE_MAX_K {
        exhaustive_assignment(cost)
    } else {
        hungarian(cost)
    }
}

/// Outcome of the relabeling iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabeling {
    /// Per draw `nu` with relabeled component `k` = original `nu[k]`.
    pub permutations: Vec<Vec<usize>>,
    pub rounds: usize,
    pub converged: bool,
}

fn stephens_cost(q: &[f64], p: &[f64], n: usize, k: usize) -> Vec<Vec<f64>> {
    let mut cost = vec![vec![0.0; k]; k];
    for i in 0..n {
        for a in 0..k {
            let qa = q[i * k + a];
            if qa == 0.0 {
                continue;
            }
            for (l, c) in cost[a].iter_mut().enumerate() {
                *c -= qa * p[i * k + l].max(1e-300).ln();
            }
        }
    }
    cost
}

/// Stephens' KL relabeling on per-draw `N x K` allocation probabilities.
///
/// Alternates between the mean relabeled probability matrix `Q` and, for each
/// draw, the permutation minimizing `sum_i sum_k q_ik log(q_ik / p_{i,nu(k)})`.
/// Stops when no permutation changes, or after 100 rounds.
pub fn stephens_relabel(probs: &[Vec<f64>], n: usize, k: usize) -> Result<Relabeling> {
    let m = probs.len();
    if let Some(bad) = probs.iter().find(|p| p.len() != n * k) {
        return Err(Error::Dimension(format!(
            "probability matrix of length {} for N={n}, K={k}",
            bad.len()
        )));
    }
    let identity: Vec<usize> = (0..k).collect();
    let mut perms = vec![identity; m];
    if k <= 1 || m == 0 {
        return Ok(Relabeling {
            permutations: perms,
            rounds: 0,
            converged: true,
        });
    }
    let mut rounds = 0;
    let mut converged = false;
    while rounds < MAX_RELABEL_ROUNDS {
        rounds += 1;
        let mut q = vec![0.0; n * k];
        for (p, nu) in probs.iter().zip(&perms) {
            for i in 0..n {
                for a in 0..k {
                    q[i * k + a] += p[i * k + nu[a]];
                }
            }
        }
        q.iter_mut().for_each(|v| *v /= m as f64);
        let next: Vec<Vec<usize>> = probs
            .par_iter()
            .map(|p| min_cost_assignment(&stephens_cost(&q, p, n, k)))
            .collect();
        let changed = next != perms;
        perms = next;
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(Relabeling {
        permutations: perms,
        rounds,
        converged,
    })
}

/// Relabels a chain in place: parameters and stored probabilities of each
/// draw are permuted together. Returns the relabeling.
pub fn relabel_chain(chain: &mut ChainSample) -> Result<Relabeling> {
    let r = stephens_relabel(&chain.alloc_probs, chain.n_subjects, chain.k)?;
    apply_permutations(chain, &r.permutations);
    Ok(r)
}

/// Applies `nu_m` to draw `m` (component `k` becomes original `nu_m[k]`).
pub fn apply_permutations(chain: &mut ChainSample, perms: &[Vec<usize>]) {
    let (n, k) = (chain.n_subjects, chain.k);
    for (m, nu) in perms.iter().enumerate() {
        chain.draws[m] = chain.draws[m].permuted(nu);
        let old = chain.alloc_probs[m].clone();
        for i in 0..n {
            for a in 0..k {
                chain.alloc_probs[m][i * k + a] = old[i * k + nu[a]];
            }
        }
        let prev = chain.permutations[m].clone();
        chain.permutations[m] = nu.iter().map(|&j| prev[j]).collect();
    }
}

/// How per-draw component probabilities are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbBackend {
    /// `w_k L_{i,k} / sum_l w_l L_{i,l}` with the random effects integrated out.
    #[default]
    Marginal,
    /// `w_k phi(b_i; mu_k, D_k) / sum_l (...)` at the sampled random effects.
    Augmented,
}

impl std::str::FromStr for ProbBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(Self::Marginal),
            "augmented" => Ok(Self::Augmented),
            other => Err(Error::Validation(format!("unknown probability backend '{other}'"))),
        }
    }
}

/// Posterior component probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentProbs {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    /// `pi_hat[i][k]`, the mean of `p_draws` over draws.
    pub pi_hat: Vec<Vec<f64>>,
    /// `p^{(m)}_{i,k}` at index `(i * K + k) * M + m`.
    pub p_draws: Vec<f64>,
    /// Laplace evaluations that fell back to Monte Carlo.
    pub fallbacks: usize,
}

impl ComponentProbs {
    pub fn draws(&self, i: usize, k: usize) -> &[f64] {
        let s = (i * self.k + k) * self.m;
        &self.p_draws[s..s + self.m]
    }

    /// Builds the record from per-draw `N x K` matrices.
    pub fn from_draw_matrices(mats: &[Vec<f64>], n: usize, k: usize) -> Self {
        let m = mats.len();
        let mut p_draws = vec![0.0; n * k * m];
        for (d, mat) in mats.iter().enumerate() {
            for ik in 0..n * k {
                p_draws[ik * m + d] = mat[ik];
            }
        }
        let pi_hat = (0..n)
            .map(|i| {
                (0..k)
                    .map(|c| {
                        let s = (i * k + c) * m;
                        p_draws[s..s + m].iter().sum::<f64>() / m.max(1) as f64
                    })
                    .collect()
            })
            .collect();
        Self {
            n,
            k,
            m,
            pi_hat,
            p_draws,
            fallbacks: 0,
        }
    }
}

/// `p^{(m)}_{i,.}` for every draw and their means over draws. The chain should
/// already be relabeled. `ds` may hold subjects that were not in the fit.
pub fn posterior_component_probs(
    chain: &ChainSample,
    ds: &ValidatedDataset,
    backend: ProbBackend,
    opts: &MarglikOptions,
) -> Result<ComponentProbs> {
    let (k, m) = (chain.k, chain.m());
    let n = ds.n_subjects();
    match backend {
        ProbBackend::Augmented => {
            if n != chain.n_subjects {
                return Err(Error::Method(
                    "the augmented backend needs the subjects of the fit".into(),
                ));
            }
            Ok(ComponentProbs::from_draw_matrices(&chain.alloc_probs, n, k))
        }
        ProbBackend::Marginal => {
            opts.check(ds)?;
            let thetas: Vec<MixtureParams> = chain.draws.iter().map(|d| d.theta.to_params()).collect::<Result<_>>()?;
            let per_subject: Vec<(Vec<f64>, usize)> = (0..n)
                .into_par_iter()
                .map(|i| -> Result<(Vec<f64>, usize)> {
                    let mut out = vec![0.0; k * m];
                    let mut fallbacks = 0;
                    for (d, (draw, theta)) in chain.draws.iter().zip(&thetas).enumerate() {
                        let c = log_component_marginals(ds.design(i), &draw.psi, theta, opts, i, d as u64)?;
                        fallbacks += c.fallbacks;
                        let terms: Vec<f64> = theta.weights().iter().zip(&c.log_l).map(|(w, l)| w.ln() + l).collect();
                        for (c, p) in normalize_log_weights(&terms).into_iter().enumerate() {
                            out[c * m + d] = p;
                        }
                    }
                    Ok((out, fallbacks))
                })
                .collect::<Result<_>>()?;
            let mut p_draws = Vec::with_capacity(n * k * m);
            let mut fallbacks = 0;
            for (v, f) in &per_subject {
                p_draws.extend_from_slice(v);
                fallbacks += f;
            }
            let pi_hat = (0..n)
                .map(|i| {
                    (0..k)
                        .map(|c| {
                            let s = (i * k + c) * m;
                            p_draws[s..s + m].iter().sum::<f64>() / m as f64
                        })
                        .collect()
                })
                .collect();
            Ok(ComponentProbs {
                n,
                k,
                m,
                pi_hat,
                p_draws,
                fallbacks,
            })
        }
    }
}

/// Shortest interval among windows of `ceil(level * M)` consecutive sorted
/// samples; the leftmost on ties.
pub fn hpd_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!(
            "HPD interval needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("HPD level {level} outside (0, 1)")));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::Numerical("NaN among HPD samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let inside = ((level * m as f64).ceil() as usize).clamp(1, m);
    let mut best = (s[0], s[inside - 1]);
    for j in 1..=m - inside {
        let (lo, hi) = (s[j], s[j + inside - 1]);
        if hi - lo < best.1 - best.0 {
            best = (lo, hi);
        }
    }
    Ok(best)
}

/// HPD interval, zero-width at the value for a single sample.
fn hpd_or_point(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    if samples.len() == 1 {
        Ok((samples[0], samples[0]))
    } else {
        hpd_interval(samples, level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// 0-based component.
    pub cluster: usize,
    /// Another component attains the same maximum.
    pub tie: bool,
}

/// Argmax per row, ties resolved toward the lower index and flagged.
pub fn classify(pi_hat: &[Vec<f64>]) -> Vec<Assignment> {
    pi_hat
        .iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            let tie = row.iter().enumerate().any(|(k, v)| k != best && *v == row[best]);
            Assignment { cluster: best, tie }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeferredAssignment {
    /// `None` when deferred.
    pub cluster: Option<usize>,
    /// HPD interval of `p_{i,k}` for every component.
    pub hpd: Vec<(f64, f64)>,
}

/// Assigns subject `i` to `k` iff the HPD lower limit of `p_{i,k}` exceeds
/// `threshold`; defers otherwise. Should several components qualify (only
/// possible for thresholds below 1/2), the largest lower limit wins.
pub fn classify_thresholded(probs: &ComponentProbs, level: f64, threshold: f64) -> Result<Vec<DeferredAssignment>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold {threshold} outside (0, 1)")));
    }
    (0..probs.n)
        .map(|i| {
            let hpd: Vec<(f64, f64)> = (0..probs.k)
                .map(|k| hpd_or_point(probs.draws(i, k), level))
                .collect::<Result<_>>()?;
            let mut cluster = None;
            for (k, (lo, _)) in hpd.iter().enumerate() {
                if *lo > threshold && cluster.is_none_or(|c: usize| *lo > hpd[c].0) {
                    cluster = Some(k);
                }
            }
            Ok(DeferredAssignment { cluster, hpd })
        })
        .collect()
}

/// Posterior mean and HPD interval of one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarSummary {
    pub name: String,
    pub mean: f64,
    pub hpd_lo: f64,
    pub hpd_hi: f64,
}

/// Posterior-mean covariance of a component as standard deviations and
/// correlations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCovariance {
    pub sd: Vec<f64>,
    pub corr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub level: f64,
    pub parameters: Vec<ScalarSummary>,
    pub covariances: Vec<ComponentCovariance>,
    /// `sum_k w_hat_k mu_hat_k`.
    pub beta: Vec<f64>,
    pub effect_names: Vec<String>,
}

impl ChainSummary {
    pub fn get(&self, name: &str) -> Option<&ScalarSummary> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Posterior means and HPD intervals of `w`, `mu`, `alpha` and `sigma`.
/// Component labels are 1-based in the names.
pub fn summarize(chain: &ChainSample, ds: &ValidatedDataset, level: f64) -> Result<ChainSummary> {
    let m = chain.m();
    if m == 0 {
        return Err(Error::Validation("chain has no stored draws".into()));
    }
    let layout = &ds.layout;
    let (k, q) = (chain.k, chain.q);
    let mut parameters = Vec::new();
    let mut push = |name: String, xs: Vec<f64>| -> Result<f64> {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let (lo, hi) = hpd_or_point(&xs, level)?;
        parameters.push(ScalarSummary {
            name,
            mean,
            hpd_lo: lo,
            hpd_hi: hi,
        });
        Ok(mean)
    };
    let mut w_hat = vec![0.0; k];
    let mut mu_hat = vec![vec![0.0; q]; k];
    for c in 0..k {
        w_hat[c] = push(
            format!("w[{}]", c + 1),
            chain.draws.iter().map(|d| d.theta.weights[c]).collect(),
        )?;
    }
    for c in 0..k {
        for j in 0..q {
            mu_hat[c][j] = push(
                format!("mu[{}][{}]", c + 1, layout.effect_names[j]),
                chain.draws.iter().map(|d| d.theta.means[c][j]).collect(),
            )?;
        }
    }
    for r in 0..layout.n_markers() {
        for (a, name) in layout.fixed_names[r].iter().enumerate() {
            push(
                format!("alpha[{name}]"),
                chain.draws.iter().map(|d| d.psi.alpha[r][a]).collect(),
            )?;
        }
    }
    for r in 0..layout.n_markers() {
        if chain.draws[0].psi.phi[r].is_some() {
            push(
                format!("sigma[{}]", layout.marker_ids[r]),
                chain
                    .draws
                    .iter()
                    .map(|d| d.psi.phi[r].unwrap_or(f64::NAN).sqrt())
                    .collect(),
            )?;
        }
    }
    let covariances = (0..k)
        .map(|c| {
            let mut d = nalgebra::DMatrix::<f64>::zeros(q, q);
            for draw in &chain.draws {
                d += &draw.theta.covs[c];
            }
            d /= m as f64;
            let sd: Vec<f64> = (0..q).map(|j| d[(j, j)].sqrt()).collect();
            let corr = (0..q)
                .map(|a| (0..q).map(|b| (d[(a, b)] / (sd[a] * sd[b])).clamp(-1.0, 1.0)).collect())
                .collect();
            ComponentCovariance { sd, corr }
        })
        .collect();
    let beta = (0..q).map(|j| (0..k).map(|c| w_hat[c] * mu_hat[c][j]).sum()).collect();
    Ok(ChainSummary {
        level,
        parameters,
        covariances,
        beta,
        effect_names: layout.effect_names.clone(),
    })
}

/// A point of a cluster-specific marginal mean curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub marker: String,
    /// 0-based component.
    pub cluster: usize,
    pub time: f64,
    pub mean: f64,
}

/// `n` equally spaced times spanning the observed follow-up.
pub fn time_grid(ds: &ValidatedDataset, n: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &ds.subjects {
        for t in s.series.iter().flat_map(|x| &x.times) {
            lo = lo.min(*t);
            hi = hi.max(*t);
        }
    }
    if !lo.is_finite() {
        return Vec::new();
    }
    if n < 2 || hi <= lo {
        return vec![lo];
    }
    (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect()
}

/// `E[g^{-1}(m + s Z)]`, `Z ~ N(0, 1)`, for the logit link (trapezoid rule on
/// `[-8, 8]`).
fn logistic_normal_mean(m: f64, s: f64) -> f64 {
    if s <= 0.0 {
        return logistic(m);
    }
    const STEPS: usize = 800;
    let h = 16.0 / STEPS as f64;
    let mut acc = 0.0;
    for j in 0..=STEPS {
        let z = -8.0 + h * j as f64;
        let wt = if j == 0 || j == STEPS { 0.5 } else { 1.0 };
        acc += wt * logistic(m + s * z) * (-0.5 * z * z).exp();
    }
    acc * h / (2.0 * std::f64::consts::PI).sqrt()
}

/// Marginal mean `E[Y | u = k, t]` of every marker for every component,
/// integrating the random effects over `N(mu_k, D_k)`. Attribute covariates
/// take their average over subjects.
pub fn mean_curves(ds: &ValidatedDataset, psi: &GlmmParams, theta: &MixtureParams, grid: &[f64]) -> Vec<CurvePoint> {
    let attr_mean = |name: &str| -> f64 {
        let vals: Vec<f64> = ds.attributes.values().filter_map(|a| a.get(name).copied()).collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let value = |c: &Covariate, t: f64| match c {
        Covariate::Attribute(name) => attr_mean(name),
        other => other.evaluate(t, None).unwrap_or(0.0),
    };
    let layout = &ds.layout;
    let mut out = Vec::new();
    for (r, marker) in ds.markers.iter().enumerate() {
        let off = layout.offsets[r];
        for k in 0..theta.k() {
            let (mu, cov) = (theta.mean(k), theta.cov(k));
            for &t in grid {
                let x: Vec<f64> = marker.fixed.iter().map(|c| value(c, t)).collect();
                let z: Vec<f64> = marker.random.iter().map(|c| value(c, t)).collect();
                let mut m: f64 = x.iter().zip(&psi.alpha[r]).map(|(a, b)| a * b).sum();
                m += z.iter().enumerate().map(|(j, v)| v * mu[off + j]).sum::<f64>();
                let mut var = 0.0;
                for (a, za) in z.iter().enumerate() {
                    for (b, zb) in z.iter().enumerate() {
                        var += za * zb * cov[(off + a, off + b)];
                    }
                }
                let mean = match marker.family {
                    Family::Gaussian => m,
                    Family::Poisson => (m + 0.5 * var).exp(),
                    Family::Bernoulli => logistic_normal_mean(m, var.max(0.0).sqrt()),
                };
                out.push(CurvePoint {
                    marker: marker.id.clone(),
                    cluster: k,
                    time: t,
                    mean,
                });
            }
        }
    }
    out
}
