//! Prior distributions on the GLMM parameters and the mixture, with
//! data-driven defaults.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};
use crate::mixture::{ThetaDraw, WEIGHT_TOLERANCE};
use crate::model::{GlmmParams, ValidatedDataset};

/// Hyperparameters of the joint prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Symmetric Dirichlet concentration for the weights.
    pub delta: f64,
    /// Prior mean of every component mean.
    pub xi: Vec<f64>,
    /// Diagonal of the prior covariance of every component mean.
    pub c_diag: Vec<f64>,
    /// Wishart degrees of freedom for `D_k^{-1}`.
    pub zeta: f64,
    /// Gamma shape for each diagonal entry of the Wishart scale matrix.
    pub gamma_shape: f64,
    /// Gamma rate per coordinate.
    pub gamma_rate: Vec<f64>,
    pub alpha_prior_mean: f64,
    pub alpha_prior_var: f64,
    pub phi_prior_shape: f64,
    pub phi_prior_rate: f64,
}

/// Optional user overrides of the defaults, as read from the model config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_diag: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_shape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_rate: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_prior_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_prior_var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_prior_shape: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_prior_rate: Option<f64>,
}

pub const DEFAULT_GAMMA_SHAPE: f64 = 0.2;
/// Numerator of the default Gamma rate `h_j = 10 / range_j^2`.
pub const DEFAULT_GAMMA_RATE_SCALE: f64 = 10.0;
pub const DEFAULT_ALPHA_VAR: f64 = 1e4;
pub const DEFAULT_PHI_SHAPE: f64 = 1.0;
pub const DEFAULT_PHI_RATE: f64 = 0.005;

impl PriorSpec {
    pub fn dim(&self) -> usize {
        self.xi.len()
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("prior: {what}")));
        if self.xi.len() != q || self.c_diag.len() != q || self.gamma_rate.len() != q {
            return Err(Error::Dimension(format!(
                "prior vectors have lengths {}/{}/{}, expected {q}",
                self.xi.len(),
                self.c_diag.len(),
                self.gamma_rate.len()
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if self.xi.iter().any(|v| !v.is_finite()) {
            return bad("xi must be finite");
        }
        if self.c_diag.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("C must have a positive diagonal");
        }
        if !(self.zeta >= q as f64 && self.zeta.is_finite()) {
            return bad("zeta must be at least q");
        }
        if !(self.gamma_shape > 0.0) || self.gamma_rate.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("gamma hyperprior parameters must be positive");
        }
        if !self.alpha_prior_mean.is_finite() || !(self.alpha_prior_var > 0.0) {
            return bad("fixed-effect prior needs a finite mean and positive variance");
        }
        if !(self.phi_prior_shape > 0.0 && self.phi_prior_rate > 0.0) {
            return bad("dispersion prior parameters must be positive");
        }
        Ok(())
    }

    pub fn with_overrides(mut self, o: &PriorOverrides) -> Result<Self> {
        let q = self.dim();
        if let Some(v) = o.delta {
            self.delta = v;
        }
        if let Some(v) = &o.xi {
            self.xi = v.clone();
        }
        if let Some(v) = &o.c_diag {
            self.c_diag = v.clone();
        }
        if let Some(v) = o.zeta {
            self.zeta = v;
        }
        if let Some(v) = o.gamma_shape {
            self.gamma_shape = v;
        }
        if let Some(v) = &o.gamma_rate {
            self.gamma_rate = v.clone();
        }
        if let Some(v) = o.alpha_prior_mean {
            self.alpha_prior_mean = v;
        }
        if let Some(v) = o.alpha_prior_var {
            self.alpha_prior_var = v;
        }
        if let Some(v) = o.phi_prior_shape {
            self.phi_prior_shape = v;
        }
        if let Some(v) = o.phi_prior_rate {
            self.phi_prior_rate = v;
        }
        self.validate(q)?;
        Ok(self)
    }
}

/// Default hyperparameters from crude per-subject random-effect estimates.
///
/// `xi_j` is the midrange and `C_jj` the squared range of coordinate `j`; a
/// zero range is replaced by 1 and logged.
pub fn default_hyperparameters(ds: &ValidatedDataset, k: usize, init_effects: &[Vec<f64>]) -> Result<PriorSpec> {
    let q = ds.layout.q;
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    if init_effects.is_empty() {
        return Err(Error::Validation("no initial random-effect estimates".into()));
    }
    if let Some(bad) = init_effects.iter().find(|b| b.len() != q) {
        return Err(Error::Dimension(format!(
            "initial estimate of length {}, expected {q}",
            bad.len()
        )));
    }
    let mut xi = Vec::with_capacity(q);
    let mut c_diag = Vec::with_capacity(q);
    let mut gamma_rate = Vec::with_capacity(q);
    for j in 0..q {
        let (lo, hi) = init_effects
            .iter()
            .map(|b| b[j])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let mut range = hi - lo;
        if !(range > 0.0 && range.is_finite()) {
            log::warn!(
                "random effect '{}' has a degenerate initial range; using 1",
                ds.layout.effect_names[j]
            );
            range = 1.0;
        }
        let mid = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            0.0
        };
        xi.push(mid);
        c_diag.push(range * range);
        gamma_rate.push(DEFAULT_GAMMA_RATE_SCALE / (range * range));
    }
    let spec = PriorSpec {
        delta: 1.0,
        xi,
        c_diag,
        zeta: q as f64 + 1.0,
        gamma_shape: DEFAULT_GAMMA_SHAPE,
        gamma_rate,
        alpha_prior_mean: 0.0,
        alpha_prior_var: DEFAULT_ALPHA_VAR,
        phi_prior_shape: DEFAULT_PHI_SHAPE,
        phi_prior_rate: DEFAULT_PHI_RATE,
    };
    spec.validate(q)?;
    Ok(spec)
}

/// Log-prior split by block. Every entry is `-inf` when its block is out of
/// support.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPriorBlocks {
    pub weights: f64,
    pub means: f64,
    pub precisions: f64,
    pub hyper_scale: f64,
    pub alpha: f64,
    pub phi: f64,
}

impl LogPriorBlocks {
    pub fn total(&self) -> f64 {
        self.weights + self.means + self.precisions + self.hyper_scale + self.alpha + self.phi
    }
}

/// `log Gamma_q(a)`, the multivariate gamma function.
pub fn ln_multi_gamma(q: usize, a: f64) -> f64 {
    let qf = q as f64;
    0.25 * qf * (qf - 1.0) * std::f64::consts::PI.ln() + (0..q).map(|j| ln_gamma(a - 0.5 * j as f64)).sum::<f64>()
}

/// `log N(x; m, v)`.
#[inline]
pub fn ln_normal(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v)
}

/// `log Gamma(x; shape, rate)`.
pub fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `log IG(x; shape, rate)`.
pub fn ln_inv_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Log-density of `W ~ Wishart(df, diag(xi)^{-1})` given `log|W|`.
fn ln_wishart_diag_inv_scale(w: &DMatrix<f64>, log_det_w: f64, df: f64, xi: &[f64]) -> f64 {
    let q = xi.len();
    let tr: f64 = (0..q).map(|j| xi[j] * w[(j, j)]).sum();
    let log_det_xi: f64 = xi.iter().map(|v| v.ln()).sum();
    0.5 * (df - q as f64 - 1.0) * log_det_w - 0.5 * tr - 0.5 * df * q as f64 * std::f64::consts::LN_2
        + 0.5 * df * log_det_xi
        - ln_multi_gamma(q, 0.5 * df)
}

/// Block-wise log-prior. Out-of-support values give `-inf` in the offending
/// block rather than an error.
pub fn log_prior_blocks(psi: &GlmmParams, theta: &ThetaDraw, hyper_scale: &[f64], spec: &PriorSpec) -> LogPriorBlocks {
    let q = spec.dim();
    let k = theta.k();

    let weights = {
        let ok = k > 0
            && theta.weights.iter().all(|w| w.is_finite() && *w >= 0.0)
            && (theta.weights.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_TOLERANCE;
        if !ok {
            f64::NEG_INFINITY
        } else {
            let d = spec.delta;
            let mut v = ln_gamma(d * k as f64) - k as f64 * ln_gamma(d);
            if d != 1.0 {
                v += theta.weights.iter().map(|w| (d - 1.0) * w.ln()).sum::<f64>();
            }
            v
        }
    };

    let means = if theta.means.len() != k || theta.means.iter().any(|m| m.len() != q) {
        f64::NEG_INFINITY
    } else {
        theta
            .means
            .iter()
            .map(|m| {
                if m.iter().any(|v| !v.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                (0..q).map(|j| ln_normal(m[j], spec.xi[j], spec.c_diag[j])).sum::<f64>()
            })
            .sum()
    };

    let hyper_ok = hyper_scale.len() == q && hyper_scale.iter().all(|v| *v > 0.0 && v.is_finite());
    let precisions = if theta.covs.len() != k || !hyper_ok {
        f64::NEG_INFINITY
    } else {
        theta
            .covs
            .iter()
            .map(|d| {
                if d.nrows() != q || d.ncols() != q || d.iter().any(|v| !v.is_finite()) {
                    return f64::NEG_INFINITY;
                }
                // no jitter: a non-PD matrix is outside the support
                match linalg::symmetrize(d).cholesky() {
                    Some(c) => {
                        let l = c.l();
                        let w = linalg::inverse_from_chol(&l);
                        let log_det_w = -linalg::log_det_from_chol(&l);
                        ln_wishart_diag_inv_scale(&w, log_det_w, spec.zeta, hyper_scale)
                    }
                    None => f64::NEG_INFINITY,
                }
            })
            .sum()
    };

    let hyper = if hyper_scale.len() != q {
        f64::NEG_INFINITY
    } else {
        (0..q)
            .map(|j| ln_gamma_density(hyper_scale[j], spec.gamma_shape, spec.gamma_rate[j]))
            .sum()
    };

    let alpha = psi
        .alpha
        .iter()
        .flatten()
        .map(|a| {
            if a.is_finite() {
                ln_normal(*a, spec.alpha_prior_mean, spec.alpha_prior_var)
            } else {
                f64::NEG_INFINITY
            }
        })
        .sum();

    let phi = psi
        .phi
        .iter()
        .flatten()
        .map(|p| ln_inv_gamma_density(*p, spec.phi_prior_shape, spec.phi_prior_rate))
        .sum();

    LogPriorBlocks {
        weights,
        means,
        precisions,
        hyper_scale: hyper,
        alpha,
        phi,
    }
}

/// `log p(psi) + log p(theta | Xi) + log p(Xi)`.
pub fn log_prior(psi: &GlmmParams, theta: &ThetaDraw, hyper_scale: &[f64], spec: &PriorSpec) -> f64 {
    log_prior_blocks(psi, theta, hyper_scale, spec).total()
}

/// Forward draw of `(theta, Xi)` from the mixture part of the prior.
pub fn sample_mixture_prior<R: Rng + ?Sized>(spec: &PriorSpec, k: usize, rng: &mut R) -> (ThetaDraw, Vec<f64>) {
    let q = spec.dim();
    let xi: Vec<f64> = (0..q)
        .map(|j| {
            Gamma::new(spec.gamma_shape, 1.0 / spec.gamma_rate[j])
                .expect("validated gamma hyperprior")
                .sample(rng)
        })
        .collect();
    let gammas: Vec<f64> = (0..k)
        .map(|_| Gamma::new(spec.delta, 1.0).expect("validated delta").sample(rng))
        .collect();
    let total: f64 = gammas.iter().sum();
    let weights = gammas.iter().map(|g| g / total).collect();
    let means = (0..k)
        .map(|_| {
            DVector::from_iterator(
                q,
                (0..q).map(|j| {
                    Normal::new(spec.xi[j], spec.c_diag[j].sqrt())
                        .expect("validated prior variance")
                        .sample(rng)
                }),
            )
        })
        .collect();
    let scale_chol = DMatrix::from_diagonal(&DVector::from_iterator(q, xi.iter().map(|v| 1.0 / v.sqrt())));
    let covs = (0..k)
        .map(|_| {
            let w = linalg::sample_wishart(spec.zeta, &scale_chol, rng);
            let l = linalg::cholesky_jittered(&w, 1e-10).expect("wishart draw is PD");
            linalg::inverse_from_chol(&l)
        })
        .collect();
    (ThetaDraw { weights, means, covs }, xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dataset, Covariate, Dataset, Family, MarkerSpec, Observation};
    use approx::assert_relative_eq;

    fn spec(q: usize) -> PriorSpec {
        PriorSpec {
            delta: 1.0,
            xi: vec![0.0; q],
            c_diag: vec![4.0; q],
            zeta: q as f64 + 1.0,
            gamma_shape: 0.2,
            gamma_rate: vec![1.0; q],
            alpha_prior_mean: 0.0,
            alpha_prior_var: 1e4,
            phi_prior_shape: 1.0,
            phi_prior_rate: 0.005,
        }
    }

    fn theta(q: usize, k: usize) -> ThetaDraw {
        ThetaDraw {
            weights: vec![1.0 / k as f64; k],
            means: (0..k).map(|j| DVector::from_element(q, j as f64 * 0.5)).collect(),
            covs: vec![DMatrix::identity(q, q); k],
        }
    }

    fn psi() -> GlmmParams {
        GlmmParams {
            alpha: vec![vec![0.1], vec![]],
            phi: vec![Some(0.09), None],
        }
    }

    fn toy_dataset(q_markers: usize) -> ValidatedDataset {
        let markers: Vec<MarkerSpec> = (0..q_markers)
            .map(|r| MarkerSpec::new(&format!("m{r}"), Family::Gaussian, vec![], vec![Covariate::Intercept]))
            .collect();
        let obs = (0..q_markers)
            .map(|r| Observation {
                subject: "a".into(),
                marker: format!("m{r}"),
                time: 0.0,
                value: 1.0,
            })
            .collect();
        validate_dataset(&Dataset::new(markers, obs)).unwrap()
    }

    #[test]
    fn defaults_follow_the_range_rules() {
        let ds = toy_dataset(5);
        let effects: Vec<Vec<f64>> = vec![vec![-2.0, 0.0, 1.0, 1.0, 3.0], vec![2.0, 1.0, 1.0, 2.0, 5.0]];
        let s = default_hyperparameters(&ds, 3, &effects).unwrap();
        assert_eq!(s.zeta, 6.0);
        assert_eq!(s.delta, 1.0);
        assert_relative_eq!(s.xi[0], 0.0);
        assert_relative_eq!(s.c_diag[0], 16.0);
        assert_relative_eq!(s.gamma_rate[0], 10.0 / 16.0);
        // degenerate coordinate falls back to range 1
        assert_relative_eq!(s.c_diag[2], 1.0);
        assert_relative_eq!(s.xi[2], 1.0);
        assert_eq!(s.gamma_shape, 0.2);
        assert_eq!(s.alpha_prior_var, 1e4);
        assert_eq!((s.phi_prior_shape, s.phi_prior_rate), (1.0, 0.005));
    }

    #[test]
    fn overrides_replace_defaults_and_are_validated() {
        let base = spec(2);
        let o = PriorOverrides {
            delta: Some(2.0),
            gamma_rate: Some(vec![3.0, 4.0]),
            ..Default::default()
        };
        let s = base.clone().with_overrides(&o).unwrap();
        assert_eq!(s.delta, 2.0);
        assert_eq!(s.gamma_rate, vec![3.0, 4.0]);
        let bad = PriorOverrides {
            zeta: Some(0.5),
            ..Default::default()
        };
        assert!(base.with_overrides(&bad).is_err());
        let json: PriorOverrides = serde_json::from_str(r#"{"delta": 0.5}"#).unwrap();
        assert_eq!(json.delta, Some(0.5));
        assert!(serde_json::from_str::<PriorOverrides>(r#"{"detla": 0.5}"#).is_err());
    }

    #[test]
    fn boundary_weight_is_finite_under_uniform_dirichlet() {
        let mut th = theta(2, 2);
        th.weights = vec![0.0, 1.0];
        let v = log_prior(&psi(), &th, &[1.0, 1.0], &spec(2));
        assert!(v.is_finite());
    }

    #[test]
    fn non_pd_covariance_gives_negative_infinity() {
        let mut th = theta(2, 2);
        th.covs[1] = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let blocks = log_prior_blocks(&psi(), &th, &[1.0, 1.0], &spec(2));
        assert_eq!(blocks.precisions, f64::NEG_INFINITY);
        assert!(blocks.weights.is_finite());
        assert_eq!(blocks.total(), f64::NEG_INFINITY);
        let mut bad_phi = psi();
        bad_phi.phi[0] = Some(-1.0);
        assert_eq!(
            log_prior(&bad_phi, &theta(2, 2), &[1.0, 1.0], &spec(2)),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn doubling_c_changes_the_mean_block_analytically() {
        let th = theta(3, 2);
        let s1 = spec(3);
        let mut s2 = s1.clone();
        s2.c_diag.iter_mut().for_each(|c| *c *= 2.0);
        let b1 = log_prior_blocks(&psi(), &th, &[1.0; 3], &s1);
        let b2 = log_prior_blocks(&psi(), &th, &[1.0; 3], &s2);
        let mut expected = 0.0;
        for m in &th.means {
            for j in 0..3 {
                let quad = (m[j] - s1.xi[j]).powi(2) / s1.c_diag[j];
                expected += -0.5 * std::f64::consts::LN_2 + 0.25 * quad;
            }
        }
        assert_relative_eq!(b2.means - b1.means, expected, epsilon = 1e-12);
        assert_eq!(b1.precisions, b2.precisions);
    }

    #[test]
    fn prior_factorizes_into_blocks() {
        let th = theta(2, 3);
        let xi = [0.7, 1.3];
        let s = spec(2);
        let b = log_prior_blocks(&psi(), &th, &xi, &s);
        // each block evaluated on its own
        let w = ln_gamma(3.0);
        let m: f64 = th
            .means
            .iter()
            .flat_map(|m| m.iter().map(|v| ln_normal(*v, 0.0, 4.0)).collect::<Vec<_>>())
            .sum();
        let h: f64 = xi.iter().map(|v| ln_gamma_density(*v, 0.2, 1.0)).sum();
        let a = ln_normal(0.1, 0.0, 1e4);
        let p = ln_inv_gamma_density(0.09, 1.0, 0.005);
        assert_relative_eq!(b.weights, w, epsilon = 1e-12);
        assert_relative_eq!(b.means, m, epsilon = 1e-12);
        assert_relative_eq!(b.hyper_scale, h, epsilon = 1e-12);
        assert_relative_eq!(b.alpha, a, epsilon = 1e-12);
        assert_relative_eq!(b.phi, p, epsilon = 1e-12);
        assert_relative_eq!(
            log_prior(&psi(), &th, &xi, &s),
            w + m + h + a + p + b.precisions,
            epsilon = 1e-10
        );
    }

    #[test]
    fn wishart_density_matches_one_dimensional_gamma() {
        // q = 1: W ~ Wishart(df, 1/xi) is Gamma(df/2, rate xi/2)
        let s = PriorSpec { zeta: 3.0, ..spec(1) };
        let xi = 0.8;
        for d in [0.3, 1.0, 2.5] {
            let th = ThetaDraw {
                weights: vec![1.0],
                means: vec![DVector::zeros(1)],
                covs: vec![DMatrix::from_element(1, 1, d)],
            };
            let b = log_prior_blocks(&psi(), &th, &[xi], &s);
            assert_relative_eq!(b.precisions, ln_gamma_density(1.0 / d, 1.5, xi / 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn multi_gamma_reduces_to_gamma() {
        assert_relative_eq!(ln_multi_gamma(1, 2.7), ln_gamma(2.7), epsilon = 1e-14);
        let two = 0.5 * std::f64::consts::PI.ln() + ln_gamma(3.0) + ln_gamma(2.5);
        assert_relative_eq!(ln_multi_gamma(2, 3.0), two, epsilon = 1e-13);
    }
}
