mod common;

use common::{gaussian_two_marker, ks_critical, ks_statistic, mean_sd};
use longmix::io::write_params_csv;
use longmix::linalg::sample_mvn_chol;
use longmix::model::validate_dataset;
use longmix::postprocess::{hpd_interval, relabel_chain};
use longmix::priors::{sample_mixture_prior, PriorOverrides};
use longmix::rng::{substream, Block};
use longmix::sampler::{initialize, run_chain, McmcConfig, Sampler};
use longmix::simulate::{simulate_dataset, SimSetting};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn frozen_config(seed: u64) -> McmcConfig {
    McmcConfig {
        keep: 1,
        thin: 1,
        burnin: 0,
        seed,
        ..Default::default()
    }
}

#[test]
fn allocations_follow_conditional_probabilities() {
    let ds = gaussian_two_marker(12, 3);
    let config = frozen_config(5);
    let (mut st, prior) = initialize(&ds, 3, &PriorOverrides::default(), &config).unwrap();
    // move every subject to the midpoint of two components so no probability is extreme
    let q = ds.layout.q;
    for (i, b) in st.b.iter_mut().enumerate() {
        let (a, c) = (i % 3, (i + 1) % 3);
        let s = 0.3 + 0.4 * (i as f64 / 12.0);
        for j in 0..q {
            b[j] = s * st.theta.mean(a)[j] + (1.0 - s) * st.theta.mean(c)[j];
        }
    }
    let sampler = Sampler::new(&ds, &prior, &config).unwrap();
    let n_draws = 100_000;
    let k = st.k();
    let mut counts = vec![vec![0.0; k]; ds.n_subjects()];
    for it in 0..n_draws {
        sampler.update_allocations(&mut st, it as u64);
        for (i, &u) in st.u.iter().enumerate() {
            counts[i][u] += 1.0;
        }
    }
    let crit = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(1.0 - 1e-4);
    for (i, b) in st.b.iter().enumerate() {
        let p = st.theta.allocation_probs(b);
        let stat: f64 = (0..k)
            .filter(|&c| p[c] * n_draws as f64 > 5.0)
            .map(|c| {
                let e = p[c] * n_draws as f64;
                (counts[i][c] - e).powi(2) / e
            })
            .sum();
        assert!(stat < crit, "subject {i}: chi2 = {stat} vs {crit}, p = {p:?}");
    }
}

#[test]
fn forced_mh_matches_the_exact_random_effect_draw() {
    let ds = gaussian_two_marker(4, 9);
    let exact_cfg = frozen_config(11);
    let mh_cfg = McmcConfig {
        force_mh: true,
        ..frozen_config(12)
    };
    let (st0, prior) = initialize(&ds, 2, &PriorOverrides::default(), &exact_cfg).unwrap();
    let exact = Sampler::new(&ds, &prior, &exact_cfg).unwrap();
    let mh = Sampler::new(&ds, &prior, &mh_cfg).unwrap();
    assert!(exact.exact_random_effects() && !mh.exact_random_effects());
    let mut st_exact = st0.clone();
    let mut st_mh = st0.clone();
    let (n_exact, n_mh, thin) = (4000usize, 4000usize, 25usize);
    let q = ds.layout.q;
    let mut a = vec![vec![]; q];
    let mut b = vec![vec![]; q];
    for it in 0..n_exact {
        exact.update_random_effects(&mut st_exact, it as u64);
        for j in 0..q {
            a[j].push(st_exact.b[0][j]);
        }
    }
    for it in 0..n_mh * thin {
        mh.update_random_effects(&mut st_mh, it as u64);
        if it % thin == 0 {
            for j in 0..q {
                b[j].push(st_mh.b[0][j]);
            }
        }
    }
    for j in 0..q {
        let d = ks_statistic(&a[j], &b[j]);
        assert!(d < ks_critical(n_exact, n_mh), "coordinate {j}: KS = {d}");
    }
}

#[test]
fn prior_only_sweeps_leave_the_prior_invariant() {
    // start each replicate from an exact joint prior draw; a few sweeps must not move the law
    let ds = gaussian_two_marker(3, 2);
    let config = McmcConfig {
        keep: 1,
        thin: 1,
        burnin: 0,
        seed: 21,
        prior_only: true,
        adapt: false,
        ..Default::default()
    };
    let (template, prior) = initialize(&ds, 2, &PriorOverrides::default(), &config).unwrap();
    let sampler = Sampler::new(&ds, &prior, &config).unwrap();
    let reps = 4000;
    let sweeps = 3u64;
    let stat = |st: &longmix::sampler::ChainState| -> [f64; 5] {
        [
            st.theta.weights()[0],
            st.theta.mean(0)[0],
            st.theta.cov(1)[(0, 0)].ln(),
            st.b[0][0],
            st.psi.phi[0].unwrap().ln(),
        ]
    };
    let mut before = vec![vec![]; 5];
    let mut after = vec![vec![]; 5];
    for r in 0..reps {
        let mut rng = substream(22, Block::Test, r, 0);
        let (theta, xi) = sample_mixture_prior(&prior, 2, &mut rng);
        let mut st = template.clone();
        st.theta = theta.to_params().unwrap();
        st.hyper_scale = xi;
        for i in 0..ds.n_subjects() {
            let w = st.theta.weights();
            let k = if rng.random::<f64>() < w[0] { 0 } else { 1 };
            st.u[i] = k;
            let l = st.theta.chol(k).clone();
            st.b[i] = sample_mvn_chol(st.theta.mean(k), &l, &mut rng).as_slice().to_vec();
        }
        for (a, alpha) in st.psi.alpha.iter_mut().enumerate() {
            for v in alpha.iter_mut() {
                *v = Normal::new(prior.alpha_prior_mean, prior.alpha_prior_var.sqrt())
                    .unwrap()
                    .sample(&mut rng);
            }
            if st.psi.phi[a].is_some() {
                let g: f64 = Gamma::new(prior.phi_prior_shape, 1.0 / prior.phi_prior_rate)
                    .unwrap()
                    .sample(&mut rng);
                st.psi.phi[a] = Some(1.0 / g);
            }
        }
        for (j, v) in stat(&st).iter().enumerate() {
            before[j].push(*v);
        }
        for s in 0..sweeps {
            sampler.sweep(&mut st, r * sweeps + s).unwrap();
        }
        for (j, v) in stat(&st).iter().enumerate() {
            after[j].push(*v);
        }
    }
    let names = ["w1", "mu1[0]", "log D2[0,0]", "b1[0]", "log phi1"];
    for j in 0..5 {
        let d = ks_statistic(&before[j], &after[j]);
        assert!(d < ks_critical(reps as usize, reps as usize), "{}: KS = {d}", names[j]);
    }
}

fn pbc_like(sizes: Vec<usize>, seed: u64) -> longmix::model::ValidatedDataset {
    let s = SimSetting::preset("k2-normal", sizes, seed).unwrap();
    validate_dataset(&simulate_dataset(&s).unwrap().dataset).unwrap()
}

#[test]
fn burnin_adaptation_reaches_the_target_band() {
    let ds = pbc_like(vec![60, 40], 31);
    let config = McmcConfig {
        keep: 100,
        thin: 5,
        burnin: 100,
        seed: 3,
        ..Default::default()
    };
    let chain = run_chain(&ds, 2, &PriorOverrides::default(), &config).unwrap();
    let rate = chain.acceptance.random_effects.unwrap();
    assert!((0.15..=0.40).contains(&rate), "post burn-in acceptance {rate}");
}

#[test]
fn recovers_dispersion_and_fixed_slope() {
    let ds = pbc_like(vec![90, 60], 8);
    let config = McmcConfig {
        keep: 1000,
        thin: 5,
        burnin: 200,
        seed: 4,
        ..Default::default()
    };
    let mut chain = run_chain(&ds, 2, &PriorOverrides::default(), &config).unwrap();
    relabel_chain(&mut chain).unwrap();
    let sigma: Vec<f64> = chain.draws.iter().map(|d| d.psi.phi[0].unwrap().sqrt()).collect();
    let (m, _) = mean_sd(&sigma);
    assert!((m - 0.3).abs() < 0.03, "sigma1 posterior mean {m}");
    let alpha: Vec<f64> = chain.draws.iter().map(|d| d.psi.alpha[2][0]).collect();
    let (lo, hi) = hpd_interval(&alpha, 0.95).unwrap();
    assert!(lo < 0.05 && 0.05 < hi, "alpha3 HPD ({lo}, {hi})");
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let ds = pbc_like(vec![12, 8], 5);
    let config = McmcConfig {
        keep: 30,
        thin: 2,
        burnin: 10,
        seed: 9,
        ..Default::default()
    };
    let run = |threads: usize| -> Vec<u8> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut chain = run_chain(&ds, 2, &PriorOverrides::default(), &config).unwrap();
            relabel_chain(&mut chain).unwrap();
            let mut buf = Vec::new();
            write_params_csv(&mut buf, &chain, &ds.layout).unwrap();
            buf
        })
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}
