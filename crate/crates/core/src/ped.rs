//! Penalized expected deviance from two independent chains per K.
//!
//! The optimism of subject `i` is the expected Jeffreys divergence between
//! the predictive laws of `y_i` under two parameter values drawn
//! independently from the leave-one-out posterior. Pairs of draws (one per
//! chain) are reweighted by `1 / (p(y_i | A) p(y_i | B))` to move from the full
//! posterior to the leave-one-out one. The divergence itself is estimated with
//! replicate data drawn from each member of the pair.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::marglik::{log_mixture_marglik, subject_log_marglik, MarglikMethod, MarglikOptions};
use crate::mixture::{log_sum_exp, MixtureParams, ThetaDraw};
use crate::model::{logistic, Family, GlmmParams, SubjectDesign, ValidatedDataset};
use crate::postprocess::relabel_chain;
use crate::rng::{derive_seed, substream, Block};
use crate::sampler::ChainSample;

/// Importance weights count as degenerate when the effective sample size of
/// any subject falls below this fraction of the number of pairs.
pub const MIN_ESS_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimismEstimator {
    PlummerIs,
    TwoPdFallback,
}

impl OptimismEstimator {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimismEstimator::PlummerIs => "plummer_is",
            OptimismEstimator::TwoPdFallback => "two_pD_fallback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimismOptions {
    /// Replicate datasets drawn from each member of a pair.
    pub replicates: usize,
    /// Use at most this many evenly spaced pairs for the divergence estimate.
    pub max_pairs: Option<usize>,
    pub seed: u64,
}

impl Default for OptimismOptions {
    fn default() -> Self {
        Self {
            replicates: 1,
            max_pairs: None,
            seed: 0,
        }
    }
}

/// One row of the model-selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PedRecord {
    pub k: usize,
    pub expected_deviance: f64,
    pub p_opt: f64,
    pub ped: f64,
    pub estimator: OptimismEstimator,
    /// Monte Carlo standard error of the expected deviance (batch means).
    pub mc_se: f64,
    pub method: MarglikMethod,
    pub flags: Vec<String>,
}

impl PedRecord {
    /// Assembles a record; `ped` is computed here so the identity
    /// `ped == expected_deviance + p_opt` always holds.
    pub fn new(
        k: usize,
        expected_deviance: f64,
        p_opt: f64,
        estimator: OptimismEstimator,
        mc_se: f64,
        method: MarglikMethod,
        flags: Vec<String>,
    ) -> Self {
        Self {
            k,
            expected_deviance,
            p_opt,
            ped: expected_deviance + p_opt,
            estimator,
            mc_se,
            method,
            flags,
        }
    }
}

/// `log p(y_i | psi^(m), theta^(m))` for every kept draw, `[m][i]`.
pub fn draw_log_marglik(chain: &ChainSample, ds: &ValidatedDataset, opts: &MarglikOptions) -> Result<Vec<Vec<f64>>> {
    check_chain(chain, ds)?;
    chain
        .draws
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let theta = d.theta.to_params()?;
            subject_log_marglik(ds, &d.psi, &theta, opts, m as u64)
        })
        .collect()
}

fn check_chain(chain: &ChainSample, ds: &ValidatedDataset) -> Result<()> {
    if chain.m() == 0 {
        return Err(Error::Validation("chain has no stored draws".into()));
    }
    if chain.n_subjects != ds.n_subjects() || chain.q != ds.layout.q {
        return Err(Error::Dimension(format!(
            "chain was run on N = {}, q = {} but the data have N = {}, q = {}",
            chain.n_subjects,
            chain.q,
            ds.n_subjects(),
            ds.layout.q
        )));
    }
    Ok(())
}

fn deviances(ll: &[Vec<f64>]) -> Vec<f64> {
    ll.iter().map(|row| -2.0 * row.iter().sum::<f64>()).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean by non-overlapping batch means with
/// `floor(sqrt(M))` batches.
pub fn batch_means_se(series: &[f64]) -> f64 {
    let m = series.len();
    let b = (m as f64).sqrt().floor() as usize;
    if b < 2 {
        return 0.0;
    }
    let size = m / b;
    let means: Vec<f64> = (0..b).map(|j| mean(&series[j * size..(j + 1) * size])).collect();
    let grand = mean(&means);
    let var = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

/// Posterior mean of the observed-data deviance over the kept draws.
pub fn expected_deviance(chain: &ChainSample, ds: &ValidatedDataset, opts: &MarglikOptions) -> Result<f64> {
    Ok(mean(&deviances(&draw_log_marglik(chain, ds, opts)?)))
}

/// Draws responses for a subject's design from the model at `(psi, theta)`.
pub fn replicate_responses<R: Rng + ?Sized>(
    design: &SubjectDesign,
    psi: &GlmmParams,
    theta: &MixtureParams,
    rng: &mut R,
) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = theta.k() - 1;
    for (c, w) in theta.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            k = c;
            break;
        }
    }
    let b = linalg::sample_mvn_chol(theta.mean(k), theta.chol(k), rng);
    let b = b.as_slice();
    design
        .rows
        .iter()
        .map(|row| {
            let eta = design.eta(row, &psi.alpha, b);
            match row.family {
                Family::Gaussian => {
                    let sd = psi.phi[row.marker].unwrap_or(1.0).sqrt();
                    eta + sd * linalg::standard_normal_vec(1, rng)[0]
                }
                Family::Poisson => {
                    // rates beyond this are unreachable for sane parameters
                    let rate = eta.min(40.0).exp();
                    if rate <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
                    }
                }
                Family::Bernoulli => Bernoulli::new(logistic(eta))
                    .map(|d| d.sample(rng) as u8 as f64)
                    .unwrap_or(0.0),
            }
        })
        .collect()
}

/// Result of the optimism computation.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimism {
    pub p_opt: f64,
    pub estimator: OptimismEstimator,
    /// Per-subject contributions of the importance-sampling estimator.
    pub per_subject: Vec<f64>,
    /// Importance-sampling estimate, reported even when it is not used.
    pub is_estimate: f64,
    /// Per-subject effective sample sizes of the importance weights.
    pub ess: Vec<f64>,
    pub min_ess: f64,
    pub pairs: usize,
    pub flags: Vec<String>,
}

fn same_draws(a: &ChainSample, b: &ChainSample) -> bool {
    a.m() == b.m()
        && a.draws
            .iter()
            .zip(&b.draws)
            .all(|(x, y)| x.psi == y.psi && x.theta == y.theta)
}

fn pair_indices(m: usize, max_pairs: Option<usize>) -> Vec<usize> {
    let p = max_pairs.map_or(m, |c| c.clamp(1, m));
    (0..p).map(|j| j * m / p).collect()
}

/// Importance-sampling estimate of the divergence term for all subjects,
/// given precomputed `log p(y_i | draw)` tables of both chains.
fn plummer_terms(
    a: &ChainSample,
    b: &ChainSample,
    ds: &ValidatedDataset,
    opts: &MarglikOptions,
    ll_a: &[Vec<f64>],
    ll_b: &[Vec<f64>],
    oopts: &OptimismOptions,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let pairs = pair_indices(a.m().min(b.m()), oopts.max_pairs);
    let thetas_a: Vec<MixtureParams> = pairs
        .iter()
        .map(|&m| a.draws[m].theta.to_params())
        .collect::<Result<_>>()?;
    let thetas_b: Vec<MixtureParams> = pairs
        .iter()
        .map(|&m| b.draws[m].theta.to_params())
        .collect::<Result<_>>()?;
    let reps = oopts.replicates.max(1);
    let per: Vec<(f64, f64)> = (0..ds.n_subjects())
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let design = ds.design(i);
            let mut log_w = Vec::with_capacity(pairs.len());
            let mut j = Vec::with_capacity(pairs.len());
            for (p, &m) in pairs.iter().enumerate() {
                let (psi_a, psi_b) = (&a.draws[m].psi, &b.draws[m].psi);
                let (th_a, th_b) = (&thetas_a[p], &thetas_b[p]);
                log_w.push(-(ll_a[m][i] + ll_b[m][i]));
                let mut div = 0.0;
                for r in 0..reps {
                    let mopts = MarglikOptions {
                        seed: derive_seed(opts.seed, Block::Optimism as u64, (p * reps + r) as u64),
                        ..opts.clone()
                    };
                    let idx = (r as u64) << 32 | i as u64;
                    let mut rng = substream(oopts.seed, Block::Replicate, m as u64, 2 * idx);
                    let ya = design.with_values(&replicate_responses(design, psi_a, th_a, &mut rng));
                    let mut rng = substream(oopts.seed, Block::Replicate, m as u64, 2 * idx + 1);
                    let yb = design.with_values(&replicate_responses(design, psi_b, th_b, &mut rng));
                    div += log_mixture_marglik(&ya, psi_a, th_a, &mopts, i, 0)?
                        - log_mixture_marglik(&ya, psi_b, th_b, &mopts, i, 0)?;
                    div += log_mixture_marglik(&yb, psi_b, th_b, &mopts, i, 1)?
                        - log_mixture_marglik(&yb, psi_a, th_a, &mopts, i, 1)?;
                }
                j.push(div / reps as f64);
            }
            let lse = log_sum_exp(&log_w);
            let w: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
            let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            let contrib = w.iter().zip(&j).map(|(w, j)| w * j).sum::<f64>();
            Ok((contrib, ess))
        })
        .collect::<Result<_>>()?;
    let (contrib, ess) = per.into_iter().unzip();
    Ok((contrib, ess, pairs.len()))
}

/// Posterior-mean plug-in `(psi_bar, theta_bar)` of one chain, taken after
/// relabeling a copy of it.
pub fn posterior_mean_plugin(chain: &ChainSample) -> Result<(GlmmParams, MixtureParams)> {
    let mut rc = chain.clone();
    relabel_chain(&mut rc)?;
    let draws = &rc.draws;
    let k = rc.k;
    let m = draws.len() as f64;
    let first = &draws[0];
    let mut psi = first.psi.clone();
    for (r, alpha) in psi.alpha.iter_mut().enumerate() {
        for (j, v) in alpha.iter_mut().enumerate() {
            *v = draws.iter().map(|d| d.psi.alpha[r][j]).sum::<f64>() / m;
        }
        if psi.phi[r].is_some() {
            psi.phi[r] = Some(draws.iter().map(|d| d.psi.phi[r].unwrap_or(1.0)).sum::<f64>() / m);
        }
    }
    let q = first.theta.means[0].len();
    let mut theta = ThetaDraw {
        weights: vec![0.0; k],
        means: vec![DVector::zeros(q); k],
        covs: vec![DMatrix::zeros(q, q); k],
    };
    for d in draws {
        for c in 0..k {
            theta.weights[c] += d.theta.weights[c] / m;
            theta.means[c] += &d.theta.means[c] / m;
            theta.covs[c] += &d.theta.covs[c] / m;
        }
    }
    let total: f64 = theta.weights.iter().sum();
    theta.weights.iter_mut().for_each(|w| *w /= total);
    Ok((psi, theta.to_params()?))
}

fn check_pair(a: &ChainSample, b: &ChainSample, ds: &ValidatedDataset) -> Result<()> {
    check_chain(a, ds)?;
    check_chain(b, ds)?;
    if a.k != b.k {
        return Err(Error::Dimension(format!("chains have K = {} and K = {}", a.k, b.k)));
    }
    Ok(())
}

struct ChainTables {
    ll_a: Vec<Vec<f64>>,
    ll_b: Vec<Vec<f64>>,
    dev_a: Vec<f64>,
    dev_b: Vec<f64>,
}

impl ChainTables {
    fn build(a: &ChainSample, b: &ChainSample, ds: &ValidatedDataset, opts: &MarglikOptions) -> Result<Self> {
        let ll_a = draw_log_marglik(a, ds, opts)?;
        // distinct Monte Carlo streams for the second chain
        let opts_b = MarglikOptions {
            seed: derive_seed(opts.seed, 2, 0),
            ..opts.clone()
        };
        let ll_b = draw_log_marglik(b, ds, &opts_b)?;
        let dev_a = deviances(&ll_a);
        let dev_b = deviances(&ll_b);
        Ok(Self {
            ll_a,
            ll_b,
            dev_a,
            dev_b,
        })
    }

    fn expected_deviance(&self) -> f64 {
        0.5 * (mean(&self.dev_a) + mean(&self.dev_b))
    }
}

fn optimism_from_tables(
    a: &ChainSample,
    b: &ChainSample,
    ds: &ValidatedDataset,
    opts: &MarglikOptions,
    oopts: &OptimismOptions,
    t: &ChainTables,
) -> Result<Optimism> {
    let mut flags = Vec::new();
    let identical = same_draws(a, b);
    let (per_subject, ess, pairs) = if identical {
        flags.push("identical_chains".to_string());
        (vec![0.0; ds.n_subjects()], vec![0.0; ds.n_subjects()], a.m())
    } else {
        plummer_terms(a, b, ds, opts, &t.ll_a, &t.ll_b, oopts)?
    };
    let min_ess = ess.iter().copied().fold(f64::INFINITY, f64::min);
    let p_is: f64 = per_subject.iter().sum();
    let degenerate = identical || min_ess < MIN_ESS_FRACTION * pairs as f64 || !p_is.is_finite();
    if !degenerate {
        return Ok(Optimism {
            p_opt: p_is,
            estimator: OptimismEstimator::PlummerIs,
            per_subject,
            is_estimate: p_is,
            ess,
            min_ess,
            pairs,
            flags,
        });
    }
    if !identical {
        flags.push("degenerate_weights".to_string());
    }
    // each chain against its own plug-in, so chains in different modes do
    // not blur the posterior means
    let plug = |c: &ChainSample| -> Result<f64> {
        let (psi_bar, theta_bar) = posterior_mean_plugin(c)?;
        crate::marglik::observed_deviance(ds, &psi_bar, &theta_bar, opts)
    };
    let p_d = 0.5 * ((mean(&t.dev_a) - plug(a)?) + (mean(&t.dev_b) - plug(b)?));
    let mut p_opt = 2.0 * p_d;
    if !(p_opt > 0.0) {
        // variance form of the effective number of parameters, doubled
        let all: Vec<f64> = t.dev_a.iter().chain(&t.dev_b).copied().collect();
        let mu = mean(&all);
        p_opt = all.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (all.len().max(2) - 1) as f64;
        flags.push("variance_fallback".to_string());
    }
    if !(p_opt > 0.0) || !p_opt.is_finite() {
        return Err(Error::Numerical(format!("optimism fallback produced {p_opt}")));
    }
    Ok(Optimism {
        p_opt,
        estimator: OptimismEstimator::TwoPdFallback,
        per_subject,
        is_estimate: p_is,
        ess,
        min_ess,
        pairs,
        flags,
    })
}

/// Optimism from two independent chains with the same K.
pub fn optimism(
    a: &ChainSample,
    b: &ChainSample,
    ds: &ValidatedDataset,
    opts: &MarglikOptions,
    oopts: &OptimismOptions,
) -> Result<Optimism> {
    check_pair(a, b, ds)?;
    let t = ChainTables::build(a, b, ds, opts)?;
    optimism_from_tables(a, b, ds, opts, oopts, &t)
}

/// Full record: expected deviance averaged over both chains plus optimism.
pub fn ped(
    a: &ChainSample,
    b: &ChainSample,
    ds: &ValidatedDataset,
    opts: &MarglikOptions,
    oopts: &OptimismOptions,
) -> Result<PedRecord> {
    check_pair(a, b, ds)?;
    let t = ChainTables::build(a, b, ds, opts)?;
    let opt = optimism_from_tables(a, b, ds, opts, oopts, &t)?;
    let e_d = t.expected_deviance();
    let mc_se = 0.5 * (batch_means_se(&t.dev_a).powi(2) + batch_means_se(&t.dev_b).powi(2)).sqrt();
    Ok(PedRecord::new(
        a.k,
        e_d,
        opt.p_opt,
        opt.estimator,
        mc_se,
        opts.method,
        opt.flags,
    ))
}

/// K with the smallest PED; ties go to the smaller K.
pub fn select_k(records: &[PedRecord]) -> Result<usize> {
    let mut best: Option<&PedRecord> = None;
    for r in records {
        if !r.ped.is_finite() {
            continue;
        }
        best = match best {
            Some(b) if b.ped < r.ped || (b.ped == r.ped && b.k <= r.k) => Some(b),
            _ => Some(r),
        };
    }
    best.map(|r| r.k)
        .ok_or_else(|| Error::Validation("no finite PED records to select from".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(k: usize, e: f64, p: f64) -> PedRecord {
        PedRecord::new(
            k,
            e,
            p,
            OptimismEstimator::PlummerIs,
            0.0,
            MarglikMethod::Laplace,
            vec![],
        )
    }

    #[test]
    fn record_identity() {
        let r = rec(2, 14088.3, 75.8);
        assert_eq!(r.ped, r.expected_deviance + r.p_opt);
        assert!((r.ped - 14164.1).abs() < 1e-9);
        let z = rec(1, 123.4, 0.0);
        assert_eq!(z.ped, 123.4);
    }

    #[test]
    fn select_examples() {
        let table = [
            rec(1, 14277.9, 0.0),
            rec(2, 14164.1, 0.0),
            rec(3, 14183.1, 0.0),
            rec(4, 22405.1, 0.0),
        ];
        assert_eq!(select_k(&table).unwrap(), 2);
        assert_eq!(select_k(&table[2..3]).unwrap(), 3);
        assert_eq!(select_k(&[rec(3, 10.0, 1.0), rec(2, 10.0, 1.0)]).unwrap(), 2);
        assert!(select_k(&[]).is_err());
    }

    #[test]
    fn batch_means_of_constant_is_zero() {
        assert_eq!(batch_means_se(&[3.0; 100]), 0.0);
        let alt: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(batch_means_se(&alt) < 1e-3);
    }

    #[test]
    fn pairs_are_evenly_spaced() {
        assert_eq!(pair_indices(10, None), (0..10).collect::<Vec<_>>());
        assert_eq!(pair_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(pair_indices(10, Some(50)).len(), 10);
    }
}
