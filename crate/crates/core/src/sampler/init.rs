//! Starting values: a population GLM per marker, penalized per-subject fits of
//! the random effects, and k-means on those fits.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::linalg;
use crate::marglik::laplace_fit;
use crate::model::{row_derivatives, Family, GlmmParams, ValidatedDataset};

const POP_MAX_ITER: usize = 100;
const POP_RIDGE: f64 = 1e-6;
/// Strength of the per-subject penalty relative to the average information
/// one subject carries about its random effects.
pub const SUBJECT_PENALTY: f64 = 0.1;

/// Fixed effects, dispersions and Fisher information of the no-random-effect
/// GLM fitted marker by marker on `[x, z]`.
#[derive(Debug, Clone)]
pub struct PopulationFit {
    pub psi: GlmmParams,
    /// Coefficients of the random-effect covariates, stacked as `b`.
    pub beta: Vec<f64>,
    /// Information about the `z` coefficients, one block per marker.
    pub z_info: Vec<DMatrix<f64>>,
}

fn features(ds: &ValidatedDataset, r: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut f = Vec::new();
    let mut y = Vec::new();
    let mut log_norm = Vec::new();
    for s in &ds.subjects {
        let d = &s.design;
        for row in d.rows.iter().filter(|row| row.marker == r) {
            let mut v = d.x_row(row).to_vec();
            v.extend_from_slice(d.z_row(row));
            f.push(v);
            y.push(row.y);
            log_norm.push(row.log_norm);
        }
    }
    (f, y, log_norm)
}

fn glm_objective(family: Family, f: &[Vec<f64>], y: &[f64], log_norm: &[f64], gamma: &[f64]) -> f64 {
    let mut v = -0.5 * POP_RIDGE * gamma.iter().map(|g| g * g).sum::<f64>();
    for ((fi, yi), ln) in f.iter().zip(y).zip(log_norm) {
        let eta: f64 = fi.iter().zip(gamma).map(|(a, b)| a * b).sum();
        let row = crate::model::DesignRow {
            marker: 0,
            family,
            y: *yi,
            log_norm: *ln,
            x_start: 0,
            z_start: 0,
        };
        v += row_derivatives(&row, eta, Some(1.0)).0;
    }
    v
}

fn glm_derivatives(family: Family, f: &[Vec<f64>], y: &[f64], gamma: &[f64], phi: f64) -> (DVector<f64>, DMatrix<f64>) {
    let p = gamma.len();
    let mut g = DVector::from_iterator(p, gamma.iter().map(|v| -POP_RIDGE * v));
    let mut h = DMatrix::identity(p, p) * POP_RIDGE;
    for (fi, yi) in f.iter().zip(y) {
        let eta: f64 = fi.iter().zip(gamma).map(|(a, b)| a * b).sum();
        let row = crate::model::DesignRow {
            marker: 0,
            family,
            y: *yi,
            log_norm: 0.0,
            x_start: 0,
            z_start: 0,
        };
        let (_, d1, w) = row_derivatives(&row, eta, Some(phi));
        for a in 0..p {
            g[a] += d1 * fi[a];
            for c in 0..p {
                h[(a, c)] += w * fi[a] * fi[c];
            }
        }
    }
    (g, h)
}

/// Newton fit of one marker's GLM without random effects.
fn fit_marker(family: Family, f: &[Vec<f64>], y: &[f64], log_norm: &[f64], p: usize) -> Vec<f64> {
    let mut gamma = vec![0.0; p];
    if f.is_empty() || p == 0 {
        return gamma;
    }
    let mut obj = glm_objective(family, f, y, log_norm, &gamma);
    for _ in 0..POP_MAX_ITER {
        let (g, h) = glm_derivatives(family, f, y, &gamma, 1.0);
        let Some(c) = h.cholesky() else { break };
        let step = c.solve(&g);
        let dec = step.dot(&g);
        if g.amax() <= 1e-8 * (1.0 + f.len() as f64) || dec <= 1e-14 * obj.abs().max(1.0) {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let trial: Vec<f64> = gamma.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ot = glm_objective(family, f, y, log_norm, &trial);
            if ot.is_finite() && ot >= obj {
                gamma = trial;
                obj = ot;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    gamma
}

pub fn population_fit(ds: &ValidatedDataset) -> PopulationFit {
    let layout = &ds.layout;
    let mut psi = GlmmParams::zeros(layout);
    let mut beta = vec![0.0; layout.q];
    let mut z_info = Vec::with_capacity(layout.n_markers());
    for r in 0..layout.n_markers() {
        let (px, pz) = (layout.fixed_dims[r], layout.sizes[r]);
        let family = layout.families[r];
        let (f, y, log_norm) = features(ds, r);
        let gamma = fit_marker(family, &f, &y, &log_norm, px + pz);
        let mut phi = 1.0;
        if family == Family::Gaussian {
            let rss: f64 = f
                .iter()
                .zip(&y)
                .map(|(fi, yi)| {
                    let eta: f64 = fi.iter().zip(&gamma).map(|(a, b)| a * b).sum();
                    (yi - eta) * (yi - eta)
                })
                .sum();
            let df = (f.len() as f64 - (px + pz) as f64).max(1.0);
            phi = if f.is_empty() { 1.0 } else { (rss / df).max(1e-8) };
            psi.phi[r] = Some(phi);
        }
        psi.alpha[r] = gamma[..px].to_vec();
        beta[layout.offsets[r]..layout.offsets[r] + pz].copy_from_slice(&gamma[px..]);
        let (_, h) = glm_derivatives(family, &f, &y, &gamma, phi);
        z_info.push(h.view((px, px), (pz, pz)).into_owned());
    }
    PopulationFit { psi, beta, z_info }
}

/// Penalized per-subject estimates of `b_i`, shrunk toward the population
/// coefficients.
pub fn crude_effects(ds: &ValidatedDataset, pop: &PopulationFit) -> Vec<Vec<f64>> {
    let layout = &ds.layout;
    let q = layout.q;
    let n = ds.n_subjects().max(1) as f64;
    let mut p = DMatrix::zeros(q, q);
    for r in 0..layout.n_markers() {
        let (o, s) = (layout.offsets[r], layout.sizes[r]);
        let block = &pop.z_info[r] * (SUBJECT_PENALTY / n);
        let scale = (0..s).map(|j| block[(j, j)]).fold(0.0f64, f64::max).max(1e-8);
        for a in 0..s {
            for c in 0..s {
                p[(o + a, o + c)] = block[(a, c)];
            }
            p[(o + a, o + a)] += 1e-6 * scale;
        }
    }
    let l = linalg::cholesky_jittered(&p, 1e-6).unwrap_or_else(|| DMatrix::identity(q, q) * 1e-3);
    let precision = &l * l.transpose();
    let log_det_cov = -linalg::log_det_from_chol(&l);
    (0..ds.n_subjects())
        .into_par_iter()
        .map(|i| laplace_fit(ds.design(i), &pop.psi, &pop.beta, &precision, log_det_cov, &pop.beta).mode)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_dataset, Covariate, Dataset, MarkerSpec, Observation};
    use approx::assert_relative_eq;

    #[test]
    fn population_fit_recovers_a_line() {
        let markers = vec![MarkerSpec::new(
            "y",
            Family::Gaussian,
            vec![Covariate::Time],
            vec![Covariate::Intercept],
        )];
        let mut obs = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                let t = j as f64;
                obs.push(Observation {
                    subject: format!("s{i}"),
                    marker: "y".into(),
                    time: t,
                    value: 2.0 + 0.5 * t + if (i + j) % 2 == 0 { 0.1 } else { -0.1 },
                });
            }
        }
        let ds = validate_dataset(&Dataset::new(markers, obs)).unwrap();
        let pop = population_fit(&ds);
        assert_relative_eq!(pop.psi.alpha[0][0], 0.5, epsilon = 0.05);
        assert_relative_eq!(pop.beta[0], 2.0, epsilon = 0.1);
        assert!(pop.psi.phi[0].unwrap() > 0.0);
        let crude = crude_effects(&ds, &pop);
        assert_eq!(crude.len(), 5);
    }

    #[test]
    fn poisson_and_bernoulli_fits_are_finite() {
        let markers = vec![
            MarkerSpec::new("c", Family::Poisson, vec![], vec![Covariate::Intercept]),
            MarkerSpec::new(
                "b",
                Family::Bernoulli,
                vec![Covariate::Time],
                vec![Covariate::Intercept],
            ),
        ];
        let mut obs = Vec::new();
        for i in 0..6 {
            for j in 0..3 {
                obs.push(Observation {
                    subject: format!("s{i}"),
                    marker: "c".into(),
                    time: j as f64,
                    value: (i * j % 4) as f64 + 30.0,
                });
                obs.push(Observation {
                    subject: format!("s{i}"),
                    marker: "b".into(),
                    time: j as f64,
                    value: ((i + j) % 2) as f64,
                });
            }
        }
        let ds = validate_dataset(&Dataset::new(markers, obs)).unwrap();
        let pop = population_fit(&ds);
        assert!((pop.beta[0] - 31f64.ln()).abs() < 0.1);
        let crude = crude_effects(&ds, &pop);
        assert!(crude.iter().flatten().all(|v| v.is_finite()));
    }
}
