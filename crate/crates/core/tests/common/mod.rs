#![allow(dead_code)]

pub mod conjugacy;

use longmix::model::{validate_dataset, Covariate, Dataset, Family, MarkerSpec, Observation, ValidatedDataset};
use longmix::rng::{substream, Block};
use rand_distr::{Distribution, Normal};

/// Two gaussian markers, one with a fixed slope, on `n` subjects whose
/// intercepts come from two well separated groups.
pub fn gaussian_two_marker(n: usize, seed: u64) -> ValidatedDataset {
    let markers = vec![
        MarkerSpec::new(
            "g1",
            Family::Gaussian,
            vec![Covariate::Time],
            vec![Covariate::Intercept],
        ),
        MarkerSpec::new(
            "g2",
            Family::Gaussian,
            vec![],
            vec![Covariate::Intercept, Covariate::Time],
        ),
    ];
    let mut rng = substream(seed, Block::Test, 0, 0);
    let e = Normal::new(0.0, 0.5).unwrap();
    let mut obs = Vec::new();
    for i in 0..n {
        let shift = if i % 3 == 0 { 3.0 } else { 0.0 };
        let b1 = shift + e.sample(&mut rng);
        let b2 = -shift + e.sample(&mut rng);
        let b3 = 0.1 * e.sample(&mut rng);
        for j in 0..4 {
            let t = j as f64 * 2.0 + 0.1 * i as f64;
            obs.push(Observation {
                subject: format!("s{i:03}"),
                marker: "g1".into(),
                time: t,
                value: b1 + 0.2 * t + e.sample(&mut rng),
            });
            obs.push(Observation {
                subject: format!("s{i:03}"),
                marker: "g2".into(),
                time: t,
                value: b2 + b3 * t + e.sample(&mut rng),
            });
        }
    }
    validate_dataset(&Dataset::new(markers, obs)).unwrap()
}

/// Single gaussian marker with random intercept and slope.
pub fn gaussian_one_marker(n: usize, seed: u64) -> ValidatedDataset {
    let markers = vec![MarkerSpec::new(
        "y",
        Family::Gaussian,
        vec![],
        vec![Covariate::Intercept, Covariate::Time],
    )];
    let mut rng = substream(seed, Block::Test, 1, 0);
    let e = Normal::new(0.0, 1.0).unwrap();
    let mut obs = Vec::new();
    for i in 0..n {
        let b0 = 1.0 + e.sample(&mut rng);
        let b1 = 0.3 * e.sample(&mut rng);
        for j in 0..5 {
            let t = j as f64;
            obs.push(Observation {
                subject: format!("s{i:03}"),
                marker: "y".into(),
                time: t,
                value: b0 + b1 * t + 0.5 * e.sample(&mut rng),
            });
        }
    }
    validate_dataset(&Dataset::new(markers, obs)).unwrap()
}

pub fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// KS critical value at level 0.001.
pub fn ks_critical(n: usize, m: usize) -> f64 {
    1.95 * ((n + m) as f64 / (n * m) as f64).sqrt()
}
