//! Moment checks of the conjugate full conditionals on frozen states.

use longmix::linalg;
use longmix::priors::PriorOverrides;
use longmix::sampler::{initialize, ChainState, McmcConfig, Sampler};
use nalgebra::{DMatrix, DVector};

use super::gaussian_two_marker;

pub struct Check {
    pub name: String,
    /// Largest |z| over the compared moments.
    pub max_z: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_z <= 3.0
    }
}

/// z-score of a sample mean of `x` against `target`.
fn z_mean(x: &[f64], target: f64) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m - target) / (v / n).sqrt()
}

/// z-score of the sample variance of `x` against `target`.
fn z_var(x: &[f64], target: f64) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let d2: Vec<f64> = x.iter().map(|v| (v - m).powi(2)).collect();
    z_mean(&d2, target)
}

fn frozen(draws: usize) -> (longmix::model::ValidatedDataset, McmcConfig, usize) {
    let ds = gaussian_two_marker(30, 4);
    let config = McmcConfig {
        keep: 1,
        thin: 1,
        burnin: 0,
        seed: 77,
        ..Default::default()
    };
    (ds, config, draws)
}

fn state(ds: &longmix::model::ValidatedDataset, config: &McmcConfig) -> (ChainState, longmix::priors::PriorSpec) {
    initialize(ds, 2, &PriorOverrides::default(), config).unwrap()
}

pub fn weights(draws: usize) -> Check {
    let (ds, config, n_draws) = frozen(draws);
    let (mut st, prior) = state(&ds, &config);
    let sampler = Sampler::new(&ds, &prior, &config).unwrap();
    let k = st.k();
    let mut counts = vec![0.0; k];
    st.u.iter().for_each(|&u| counts[u] += 1.0);
    let a: Vec<f64> = counts.iter().map(|c| prior.delta + c).collect();
    let a0: f64 = a.iter().sum();
    let mut w = vec![Vec::with_capacity(n_draws); k];
    for it in 0..n_draws {
        sampler.update_weights(&mut st, it as u64).unwrap();
        for c in 0..k {
            w[c].push(st.theta.weights()[c]);
        }
    }
    let mut max_z = 0.0f64;
    for c in 0..k {
        let mean = a[c] / a0;
        let var = a[c] * (a0 - a[c]) / (a0 * a0 * (a0 + 1.0));
        max_z = max_z.max(z_mean(&w[c], mean).abs()).max(z_var(&w[c], var).abs());
    }
    Check {
        name: "weights ~ Dirichlet(delta + n_k)".into(),
        max_z,
    }
}

pub fn means_covariances(draws: usize) -> Check {
    let (ds, config, n_draws) = frozen(draws);
    let (st0, prior) = state(&ds, &config);
    let sampler = Sampler::new(&ds, &prior, &config).unwrap();
    let q = ds.layout.q;
    let k = st0.k();
    let c_inv = DMatrix::from_diagonal(&DVector::from_iterator(q, prior.c_diag.iter().map(|c| 1.0 / c)));
    let c_inv_xi = DVector::from_iterator(q, prior.xi.iter().zip(&prior.c_diag).map(|(x, c)| x / c));
    let mut max_z = 0.0f64;
    for c in 0..k {
        let members: Vec<&Vec<f64>> = st0
            .b
            .iter()
            .zip(&st0.u)
            .filter(|(_, &u)| u == c)
            .map(|(b, _)| b)
            .collect();
        let n = members.len() as f64;
        let sum = members
            .iter()
            .fold(DVector::zeros(q), |acc, b| acc + DVector::from_column_slice(b));
        let d_inv = st0.theta.precision(c);
        let precision = &c_inv + d_inv * n;
        let cov = precision.clone().try_inverse().unwrap();
        let mean = &cov * (&c_inv_xi + d_inv * &sum);

        let mut mu = vec![Vec::with_capacity(n_draws); q];
        // residuals of D^{-1} entries around their conditional mean given mu,
        // and squared residuals around the conditional variance
        let mut resid = vec![Vec::with_capacity(n_draws); q * q];
        let mut resid2 = vec![Vec::with_capacity(n_draws); q * q];
        for it in 0..n_draws {
            let mut st = st0.clone();
            sampler.update_means_covariances(&mut st, it as u64).unwrap();
            let m = st.theta.mean(c).clone();
            for j in 0..q {
                mu[j].push(m[j]);
            }
            let mut scatter = DMatrix::from_diagonal(&DVector::from_column_slice(&st0.hyper_scale));
            for b in &members {
                let r = DVector::from_column_slice(b) - &m;
                scatter += &r * r.transpose();
            }
            let df = prior.zeta + n;
            let sigma = linalg::inverse_from_chol(&scatter.cholesky().unwrap().l());
            let w = st.theta.precision(c);
            for i in 0..q {
                for j in 0..=i {
                    let e = w[(i, j)] - df * sigma[(i, j)];
                    let v = df * (sigma[(i, j)].powi(2) + sigma[(i, i)] * sigma[(j, j)]);
                    resid[i * q + j].push(e);
                    resid2[i * q + j].push(e * e - v);
                }
            }
        }
        for j in 0..q {
            max_z = max_z
                .max(z_mean(&mu[j], mean[j]).abs())
                .max(z_var(&mu[j], cov[(j, j)]).abs());
        }
        for (r, r2) in resid.iter().zip(&resid2) {
            if !r.is_empty() {
                max_z = max_z.max(z_mean(r, 0.0).abs()).max(z_mean(r2, 0.0).abs());
            }
        }
    }
    Check {
        name: "mu_k normal and D_k^-1 Wishart".into(),
        max_z,
    }
}

pub fn gaussian_glmm(draws: usize) -> Check {
    let (ds, config, n_draws) = frozen(draws);
    let (st0, prior) = state(&ds, &config);
    let sampler = Sampler::new(&ds, &prior, &config).unwrap();
    // marker 0 has one fixed slope and is drawn given the frozen dispersion;
    // marker 1 has no fixed effects so its dispersion depends on frozen values only
    let phi0 = st0.psi.phi[0].unwrap();
    let v0 = prior.alpha_prior_var;
    let (mut prec, mut h) = (1.0 / v0, prior.alpha_prior_mean / v0);
    let (mut n1, mut ss1) = (0.0, 0.0);
    for (s, b) in ds.subjects.iter().zip(&st0.b) {
        let d = &s.design;
        for row in &d.rows {
            if row.marker == 0 {
                let x = d.x_row(row)[0];
                prec += x * x / phi0;
                h += x * (row.y - d.random_part(row, b)) / phi0;
            } else {
                let e = row.y - d.eta(row, &st0.psi.alpha, b);
                n1 += 1.0;
                ss1 += e * e;
            }
        }
    }
    let shape = prior.phi_prior_shape + 0.5 * n1;
    let rate = prior.phi_prior_rate + 0.5 * ss1;
    let phi_mean = rate / (shape - 1.0);
    let phi_var = rate * rate / ((shape - 1.0).powi(2) * (shape - 2.0));
    let mut alpha = Vec::with_capacity(n_draws);
    let mut phi = Vec::with_capacity(n_draws);
    for it in 0..n_draws {
        let mut st = st0.clone();
        sampler.update_glmm_params(&mut st, it as u64).unwrap();
        alpha.push(st.psi.alpha[0][0]);
        phi.push(st.psi.phi[1].unwrap());
    }
    let max_z = [
        z_mean(&alpha, h / prec),
        z_var(&alpha, 1.0 / prec),
        z_mean(&phi, phi_mean),
        z_var(&phi, phi_var),
    ]
    .iter()
    .fold(0.0f64, |a, z| a.max(z.abs()));
    Check {
        name: "gaussian alpha normal and phi inverse-gamma".into(),
        max_z,
    }
}
