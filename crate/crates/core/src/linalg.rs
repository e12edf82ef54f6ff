//! Small dense helpers on top of nalgebra used by the samplers and the
//! marginal-likelihood code.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower Cholesky factor of a symmetric matrix. If the plain factorization
/// fails, `rel_jitter * trace / q` is added to the diagonal once and the
/// factorization is retried.
pub fn cholesky_jittered(m: &DMatrix<f64>, rel_jitter: f64) -> Option<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let sym = symmetrize(m);
    if let Some(c) = sym.clone().cholesky() {
        return Some(c.l());
    }
    let q = sym.nrows().max(1) as f64;
    let bump = rel_jitter * sym.trace().abs() / q;
    if bump <= 0.0 || !bump.is_finite() {
        return None;
    }
    let mut jittered = sym;
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += bump;
    }
    jittered.cholesky().map(|c| c.l())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `log |A|` from the lower Cholesky factor of `A`.
pub fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Inverse of an SPD matrix given its lower Cholesky factor.
pub fn inverse_from_chol(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut linv = DMatrix::identity(n, n);
    // L is lower triangular with positive diagonal, so this cannot fail.
    l.solve_lower_triangular_mut(&mut linv);
    linv.transpose() * linv
}

/// Solves `L v = r` in place and returns `|v|^2`.
#[inline]
pub fn forward_solve_sq_norm(l: &DMatrix<f64>, r: &mut [f64]) -> f64 {
    let n = r.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = r[i];
        for j in 0..i {
            s -= l[(i, j)] * r[j];
        }
        let v = s / l[(i, i)];
        r[i] = v;
        acc += v * v;
    }
    acc
}

/// Log-density of `N(mean, L L^T)` at `x`, with `log_det = log|L L^T|`.
pub fn mvn_log_density_chol(x: &[f64], mean: &[f64], l: &DMatrix<f64>, log_det: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(x.iter().zip(mean).map(|(a, b)| a - b));
    let q = x.len() as f64;
    let quad = forward_solve_sq_norm(l, scratch);
    -0.5 * (q * LN_2PI + log_det + quad)
}

pub fn standard_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draw from `N(mean, L L^T)`.
pub fn sample_mvn_chol<R: Rng + ?Sized>(mean: &DVector<f64>, l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let z = standard_normal_vec(mean.len(), rng);
    mean + l * z
}

/// Draw from `N(P^{-1} h, P^{-1})` given the lower Cholesky factor of the
/// precision `P = L L^T`.
pub fn sample_mvn_canonical<R: Rng + ?Sized>(h: &DVector<f64>, l: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let mut mean = h.clone();
    l.solve_lower_triangular_mut(&mut mean);
    let mut z = standard_normal_vec(h.len(), rng);
    z += &mean;
    // solve L^T x = z
    l.tr_solve_lower_triangular_mut(&mut z);
    z
}

/// Wishart draw with `df` degrees of freedom and scale `S = L L^T`
/// (mean `df * S`), via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale_chol: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let q = scale_chol.nrows();
    let mut a = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        let chi = ChiSquared::new(df - i as f64).expect("wishart df must exceed q - 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = scale_chol * a;
    &la * la.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Block};
    use approx::assert_relative_eq;

    fn spd3() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0])
    }

    #[test]
    fn inverse_and_log_det_match_nalgebra() {
        let m = spd3();
        let l = cholesky_jittered(&m, 0.0).unwrap();
        let inv = inverse_from_chol(&l);
        let direct = m.clone().try_inverse().unwrap();
        assert_relative_eq!(inv, direct, epsilon = 1e-12);
        assert_relative_eq!(log_det_from_chol(&l), m.determinant().ln(), epsilon = 1e-12);
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(cholesky_jittered(&m, 0.0).is_none());
        assert!(cholesky_jittered(&m, 1e-10).is_some());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_jittered(&bad, 1e-10).is_none());
    }

    #[test]
    fn mvn_density_matches_closed_form_in_1d() {
        let l = DMatrix::from_element(1, 1, 2.0);
        let mut s = Vec::new();
        let v = mvn_log_density_chol(&[1.0], &[0.0], &l, (4.0f64).ln(), &mut s);
        let expect = -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 1.0 / 8.0;
        assert_relative_eq!(v, expect, epsilon = 1e-14);
    }

    #[test]
    fn canonical_sampler_has_right_mean() {
        let p = spd3();
        let l = cholesky_jittered(&p, 0.0).unwrap();
        let h = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let target = p.clone().try_inverse().unwrap() * &h;
        let mut rng = substream(1, Block::Test, 0, 0);
        let n = 20_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            acc += sample_mvn_canonical(&h, &l, &mut rng);
        }
        acc /= n as f64;
        for i in 0..3 {
            assert!((acc[i] - target[i]).abs() < 0.03, "{acc} vs {target}");
        }
    }

    #[test]
    fn wishart_mean_is_df_times_scale() {
        let s = spd3();
        let l = cholesky_jittered(&s, 0.0).unwrap();
        let mut rng = substream(2, Block::Test, 0, 0);
        let n = 20_000;
        let df = 7.0;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..n {
            acc += sample_wishart(df, &l, &mut rng);
        }
        acc /= n as f64;
        let expect = &s * df;
        for (a, e) in acc.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 0.05 * e.abs().max(2.0), "{acc} vs {expect}");
        }
    }
}
