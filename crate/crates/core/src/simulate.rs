//! Synthetic data for the three-marker design (log-bilirubin-like gaussian,
//! platelet-like poisson, spider-like bernoulli) with known cluster labels,
//! and scoring of fits against the truth.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{logistic, Covariate, Dataset, Family, MarkerSpec, ModelConfig, Observation, DAYS_PER_MONTH};
use crate::postprocess::min_cost_assignment;
use crate::rng::{substream, Block};

/// Visit windows in days after the baseline visit at day 0.
pub const VISIT_WINDOWS_DAYS: [(f64, f64); 3] = [(170.0, 200.0), (350.0, 390.0), (710.0, 770.0)];
pub const MVT_DF: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandomEffectLaw {
    Normal,
    /// Multivariate t with 5 degrees of freedom, scaled to covariance `D_k`.
    Mvt5,
}

/// One simulation design.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSetting {
    pub weights: Vec<f64>,
    /// Component means in the order (lbili intercept, lbili slope, platelet
    /// intercept, platelet slope, spiders intercept).
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub sigma1: f64,
    pub alpha3: f64,
    pub law: RandomEffectLaw,
    /// Subjects per cluster.
    pub sizes: Vec<usize>,
    pub seed: u64,
    /// Draw one set of visit times per subject instead of per marker.
    pub shared_times: bool,
}

fn cov_from_sd_corr(sd: [f64; 5], upper: [f64; 10]) -> DMatrix<f64> {
    let mut r = DMatrix::identity(5, 5);
    let mut idx = 0;
    for a in 0..5 {
        for b in a + 1..5 {
            r[(a, b)] = upper[idx];
            r[(b, a)] = upper[idx];
            idx += 1;
        }
    }
    let s = DMatrix::from_diagonal(&DVector::from_row_slice(&sd));
    &s * r * &s
}

/// Covariance of the first component (standard deviations and correlations of
/// the fitted two-cluster model of the motivating data).
pub fn reference_cov_1() -> DMatrix<f64> {
    cov_from_sd_corr(
        [0.428, 0.00837, 0.309, 0.0105, 4.02],
        [
            0.031, -0.282, -0.086, 0.326, 0.040, -0.214, 0.100, -0.039, -0.042, 0.028,
        ],
    )
}

/// Covariance of the second component.
pub fn reference_cov_2() -> DMatrix<f64> {
    cov_from_sd_corr(
        [0.776, 0.03090, 0.398, 0.0232, 2.42],
        [
            -0.183, 0.119, -0.139, 0.171, -0.034, 0.249, 0.116, -0.046, -0.191, -0.043,
        ],
    )
}

const MU_1: [f64; 5] = [0.0, 0.01, 5.0, -0.005, -3.0];
const MU_2: [f64; 5] = [1.0, 0.01, 5.0, -0.02, -1.0];
const MU_3: [f64; 5] = [1.3, -0.03, 5.5, 0.0, -2.0];

impl SimSetting {
    /// Two clusters with weights (0.6, 0.4).
    pub fn k2(law: RandomEffectLaw, sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            weights: vec![0.6, 0.4],
            means: vec![MU_1.to_vec(), MU_2.to_vec()],
            covs: vec![reference_cov_1(), reference_cov_2()],
            sigma1: 0.3,
            alpha3: 0.05,
            law,
            sizes,
            seed,
            shared_times: false,
        }
    }

    /// Three clusters with weights (0.60, 0.34, 0.06); the small third cluster
    /// reuses the second covariance.
    pub fn k3(law: RandomEffectLaw, sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            weights: vec![0.60, 0.34, 0.06],
            means: vec![MU_1.to_vec(), MU_2.to_vec(), MU_3.to_vec()],
            covs: vec![reference_cov_1(), reference_cov_2(), reference_cov_2()],
            sigma1: 0.3,
            alpha3: 0.05,
            law,
            sizes,
            seed,
            shared_times: false,
        }
    }

    /// `k2-normal`, `k2-mvt5`, `k3-normal` or `k3-mvt5`.
    pub fn preset(name: &str, sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let s = match name {
            "k2-normal" => Self::k2(RandomEffectLaw::Normal, sizes, seed),
            "k2-mvt5" => Self::k2(RandomEffectLaw::Mvt5, sizes, seed),
            "k3-normal" => Self::k3(RandomEffectLaw::Normal, sizes, seed),
            "k3-mvt5" => Self::k3(RandomEffectLaw::Mvt5, sizes, seed),
            other => return Err(Error::Validation(format!("unknown simulation setting '{other}'"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn k_true(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k_true();
        if self.sizes.len() != k || self.means.len() != k || self.covs.len() != k {
            return Err(Error::Validation(format!(
                "setting with {k} weights needs {k} cluster sizes, means and covariances (got {} sizes)",
                self.sizes.len()
            )));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Validation("weights must sum to 1".into()));
        }
        if self.sizes.iter().any(|&n| n == 0) {
            return Err(Error::Validation("every cluster needs at least one subject".into()));
        }
        if self.means.iter().any(|m| m.len() != 5) || self.covs.iter().any(|c| c.nrows() != 5 || c.ncols() != 5) {
            return Err(Error::Dimension("the design has 5 random effects".into()));
        }
        if self.covs.iter().any(|c| c.clone().cholesky().is_none()) {
            return Err(Error::Numerical("a cluster covariance is not positive definite".into()));
        }
        if !(self.sigma1 > 0.0) {
            return Err(Error::Validation("sigma1 must be positive".into()));
        }
        Ok(())
    }
}

/// Marker declarations of the three-marker design: random intercept and slope
/// for the gaussian and poisson markers, random intercept and fixed slope for
/// the bernoulli marker.
pub fn three_marker_config() -> ModelConfig {
    ModelConfig::new(vec![
        MarkerSpec::new(
            "lbili",
            Family::Gaussian,
            vec![],
            vec![Covariate::Intercept, Covariate::Time],
        ),
        MarkerSpec::new(
            "platelet",
            Family::Poisson,
            vec![],
            vec![Covariate::Intercept, Covariate::Time],
        ),
        MarkerSpec::new(
            "spiders",
            Family::Bernoulli,
            vec![Covariate::Time],
            vec![Covariate::Intercept],
        ),
    ])
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub subject_ids: Vec<String>,
    /// 0-based true cluster per subject, in subject order.
    pub truth: Vec<usize>,
    pub b: Vec<Vec<f64>>,
}

fn visit_times<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let mut t = [0.0; 4];
    for (j, (lo, hi)) in VISIT_WINDOWS_DAYS.iter().enumerate() {
        t[j + 1] = rng.random_range(*lo..*hi) / DAYS_PER_MONTH;
    }
    t
}

/// Draws one random-effect vector from component `k` under the setting's law.
pub fn draw_random_effect<R: Rng + ?Sized>(
    mean: &[f64],
    chol: &DMatrix<f64>,
    law: RandomEffectLaw,
    rng: &mut R,
) -> Vec<f64> {
    let z = linalg::standard_normal_vec(mean.len(), rng);
    let scale = match law {
        RandomEffectLaw::Normal => 1.0,
        RandomEffectLaw::Mvt5 => {
            // scale matrix (nu-2)/nu * D, mixed by nu / chi2_nu
            let w = ChiSquared::new(MVT_DF).expect("positive df").sample(rng);
            ((MVT_DF - 2.0) / MVT_DF).sqrt() * (MVT_DF / w).sqrt()
        }
    };
    let lz = chol * z;
    mean.iter().zip(lz.iter()).map(|(m, v)| m + scale * v).collect()
}

/// Generates one dataset. Subjects `s001, s002, ...` come in random cluster
/// order; each has 4 visits per marker, the first at time 0.
pub fn simulate_dataset(setting: &SimSetting) -> Result<SimulatedData> {
    setting.validate()?;
    let config = three_marker_config();
    let chols: Vec<DMatrix<f64>> = setting
        .covs
        .iter()
        .map(|c| c.clone().cholesky().expect("validated").l())
        .collect();
    let mut truth: Vec<usize> = setting
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    truth.shuffle(&mut substream(setting.seed, Block::Simulation, 0, 0));
    let n = truth.len();
    let width = n.to_string().len().max(3);
    let noise = Normal::new(0.0, setting.sigma1).expect("validated sigma");
    let mut observations = Vec::with_capacity(n * 12);
    let mut subject_ids = Vec::with_capacity(n);
    let mut bs = Vec::with_capacity(n);
    for (i, &k) in truth.iter().enumerate() {
        let id = format!("s{:0width$}", i + 1);
        let mut rng = substream(setting.seed, Block::Simulation, 1, i as u64);
        let b = draw_random_effect(&setting.means[k], &chols[k], setting.law, &mut rng);
        let shared = visit_times(&mut rng);
        for (r, marker) in config.markers.iter().enumerate() {
            let times = if setting.shared_times {
                shared
            } else {
                visit_times(&mut rng)
            };
            for &t in &times {
                let value = match r {
                    0 => b[0] + b[1] * t + noise.sample(&mut rng),
                    1 => {
                        let mean = (b[2] + b[3] * t).exp();
                        Poisson::new(mean)
                            .map_err(|e| Error::Numerical(format!("poisson mean {mean}: {e}")))?
                            .sample(&mut rng)
                    }
                    _ => {
                        let p = logistic(b[4] + setting.alpha3 * t);
                        Bernoulli::new(p).expect("probability in [0, 1]").sample(&mut rng) as u8 as f64
                    }
                };
                observations.push(Observation {
                    subject: id.clone(),
                    marker: marker.id.clone(),
                    time: t,
                    value,
                });
            }
        }
        subject_ids.push(id);
        bs.push(b);
    }
    Ok(SimulatedData {
        dataset: Dataset::from_config(&config, observations),
        subject_ids,
        truth,
        b: bs,
    })
}

/// Label matching between a classification and the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatch {
    /// Fraction of subjects misclassified under the best matching.
    pub error: f64,
    /// `truth_to_fit[k]` is the fitted label matched to true cluster `k`.
    pub truth_to_fit: Vec<usize>,
}

/// Minimum over label permutations of the misclassification rate, with the
/// minimizing permutation.
pub fn match_labels(assigned: &[usize], truth: &[usize], k: usize) -> Result<LabelMatch> {
    if assigned.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} assignments for {} subjects",
            assigned.len(),
            truth.len()
        )));
    }
    if let Some(bad) = assigned.iter().chain(truth).find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {bad} out of range for K = {k}")));
    }
    if truth.is_empty() {
        return Ok(LabelMatch {
            error: 0.0,
            truth_to_fit: (0..k).collect(),
        });
    }
    let mut agree = vec![vec![0.0; k]; k];
    for (&a, &t) in assigned.iter().zip(truth) {
        agree[t][a] += 1.0;
    }
    let cost: Vec<Vec<f64>> = agree.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let perm = min_cost_assignment(&cost);
    let matched: f64 = perm.iter().enumerate().map(|(t, &a)| agree[t][a]).sum();
    Ok(LabelMatch {
        error: 1.0 - matched / truth.len() as f64,
        truth_to_fit: perm,
    })
}

/// Minimum over label permutations of the misclassification rate.
pub fn classification_error(assigned: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    Ok(match_labels(assigned, truth, k)?.error)
}

/// Point estimates of one fit (or the truth), aligned to the true labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimates {
    pub weights: Vec<f64>,
    /// `means[k][j]`.
    pub means: Vec<Vec<f64>>,
    /// Component-free parameters (e.g. `alpha3`, `sigma1`).
    pub shared: Vec<f64>,
}

/// Root mean squared errors over replicates, averaged over components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub weights: f64,
    /// One entry per random-effect coordinate.
    pub means: Vec<f64>,
    pub shared: Vec<f64>,
    pub replicates: usize,
}

/// For each parameter: the mean over replicates of the squared error of the
/// estimate, averaged over components, square-rooted.
pub fn mse_report(fits: &[ParamEstimates], truth: &ParamEstimates) -> Result<MseReport> {
    if fits.is_empty() {
        return Err(Error::Validation("at least one replicate is required".into()));
    }
    let k = truth.weights.len();
    let q = truth.means.first().map_or(0, |m| m.len());
    for f in fits {
        if f.weights.len() != k
            || f.means.len() != k
            || f.means.iter().any(|m| m.len() != q)
            || f.shared.len() != truth.shared.len()
        {
            return Err(Error::Dimension(
                "replicate estimates do not match the truth's shape".into(),
            ));
        }
    }
    let r = fits.len() as f64;
    let weights = ((0..k)
        .map(|c| {
            fits.iter()
                .map(|f| (f.weights[c] - truth.weights[c]).powi(2))
                .sum::<f64>()
                / r
        })
        .sum::<f64>()
        / k as f64)
        .sqrt();
    let means = (0..q)
        .map(|j| {
            ((0..k)
                .map(|c| {
                    fits.iter()
                        .map(|f| (f.means[c][j] - truth.means[c][j]).powi(2))
                        .sum::<f64>()
                        / r
                })
                .sum::<f64>()
                / k as f64)
                .sqrt()
        })
        .collect();
    let shared = (0..truth.shared.len())
        .map(|s| {
            (fits
                .iter()
                .map(|f| (f.shared[s] - truth.shared[s]).powi(2))
                .sum::<f64>()
                / r)
                .sqrt()
        })
        .collect();
    Ok(MseReport {
        weights,
        means,
        shared,
        replicates: fits.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_dataset;
    use approx::assert_relative_eq;

    #[test]
    fn reference_covariances_are_pd() {
        assert!(reference_cov_1().cholesky().is_some());
        assert!(reference_cov_2().cholesky().is_some());
        assert_relative_eq!(reference_cov_1()[(4, 4)], 4.02 * 4.02, epsilon = 1e-12);
        assert_relative_eq!(reference_cov_2()[(0, 1)], -0.183 * 0.776 * 0.0309, epsilon = 1e-12);
    }

    #[test]
    fn generated_data_follows_the_design() {
        let s = SimSetting::preset("k2-normal", vec![12, 8], 5).unwrap();
        let sim = simulate_dataset(&s).unwrap();
        let ds = validate_dataset(&sim.dataset).unwrap();
        assert_eq!(ds.n_subjects(), 20);
        assert_eq!(ds.n_observations(), 20 * 12);
        for subj in &ds.subjects {
            for series in &subj.series {
                assert_eq!(series.times.len(), 4);
                assert_eq!(series.times[0], 0.0);
                for (j, (lo, hi)) in VISIT_WINDOWS_DAYS.iter().enumerate() {
                    let days = series.times[j + 1] * DAYS_PER_MONTH;
                    assert!(days >= *lo - 1e-9 && days <= *hi + 1e-9);
                }
            }
        }
        let mut counts = [0; 2];
        sim.truth.iter().for_each(|&k| counts[k] += 1);
        assert_eq!(counts, [12, 8]);
        assert_eq!(simulate_dataset(&s).unwrap(), sim);
    }

    #[test]
    fn shared_times_repeat_across_markers() {
        let mut s = SimSetting::preset("k3-mvt5", vec![3, 2, 1], 2).unwrap();
        s.shared_times = true;
        let ds = validate_dataset(&simulate_dataset(&s).unwrap().dataset).unwrap();
        for subj in &ds.subjects {
            assert_eq!(subj.series[0].times, subj.series[1].times);
            assert_eq!(subj.series[1].times, subj.series[2].times);
        }
    }

    #[test]
    fn classification_error_examples() {
        assert_eq!(classification_error(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 0.0);
        assert_eq!(classification_error(&[1, 0, 0, 1], &[0, 1, 1, 0], 2).unwrap(), 0.0);
        assert_relative_eq!(classification_error(&[0, 0, 1, 0], &[0, 1, 1, 0], 2).unwrap(), 0.25);
        assert!(classification_error(&[0, 2], &[0, 1], 2).is_err());
        assert!(classification_error(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn random_assignment_errs_half_the_time() {
        let mut rng = substream(8, Block::Test, 0, 0);
        let truth: Vec<usize> = (0..10_000).map(|i| i % 2).collect();
        let assigned: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let e = classification_error(&assigned, &truth, 2).unwrap();
        assert!((e - 0.5).abs() < 0.02, "{e}");
    }

    #[test]
    fn mse_examples() {
        let truth = ParamEstimates {
            weights: vec![0.6, 0.4],
            means: vec![vec![0.0], vec![1.0]],
            shared: vec![0.05],
        };
        let zero = mse_report(std::slice::from_ref(&truth), &truth).unwrap();
        assert_eq!(zero.weights, 0.0);
        assert_eq!(zero.means, vec![0.0]);
        let mut off = truth.clone();
        off.shared[0] += 0.1;
        off.means[0][0] += 0.1;
        off.means[1][0] += 0.1;
        let r = mse_report(&[off], &truth).unwrap();
        assert_relative_eq!(r.shared[0], 0.1, epsilon = 1e-12);
        assert_relative_eq!(r.means[0], 0.1, epsilon = 1e-12);
        assert!(mse_report(&[], &truth).is_err());
    }

    #[test]
    fn mvt5_covariance_matches_target() {
        let d = reference_cov_2();
        let l = d.clone().cholesky().unwrap().l();
        let mu = vec![0.0; 5];
        let n = 1_000_000;
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        let mut rng = substream(21, Block::Test, 0, 0);
        for _ in 0..n {
            let b = DVector::from_vec(draw_random_effect(&mu, &l, RandomEffectLaw::Mvt5, &mut rng));
            acc += &b * b.transpose();
        }
        acc /= n as f64;
        for a in 0..5 {
            // diagonal within 2%; off-diagonals within 2% of the diagonal scale
            let scale = (d[(a, a)]).sqrt();
            for c in 0..5 {
                let tol = 0.02 * scale * d[(c, c)].sqrt();
                assert!(
                    (acc[(a, c)] - d[(a, c)]).abs() <= tol,
                    "entry ({a},{c}): {} vs {}",
                    acc[(a, c)],
                    d[(a, c)]
                );
            }
        }
    }
}
