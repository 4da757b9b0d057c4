use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use super::linalg;
use super::transform::{CorrelationCholesky, ScaleVector};

/// Draws the Cholesky factor of an LKJ(η) correlation matrix.
///
/// Partial correlations in column `j` are `2·Beta(α_j, α_j) − 1` with
/// `α_j = η + (dim − 2 − j) / 2`, assembled through the same CPC map used by
/// the unconstrained transform.
pub fn lkj_cholesky_sample<R: Rng + ?Sized>(dim: usize, eta: f64, rng: &mut R) -> CorrelationCholesky {
    assert!(eta > 0.0, "LKJ shape must be positive");
    let mut cpcs = Vec::with_capacity(super::n_corr_free(dim));
    for i in 1..dim {
        for j in 0..i {
            let alpha = eta + 0.5 * (dim as f64 - 2.0 - j as f64);
            let b = Beta::new(alpha, alpha).expect("positive Beta shape");
            let z: f64 = 2.0 * b.sample(rng) - 1.0;
            cpcs.push(z.clamp(-1.0 + 1e-15, 1.0 - 1e-15));
        }
    }
    CorrelationCholesky::from_cpcs(dim, &cpcs).expect("CPCs inside (-1, 1)")
}

pub fn half_cauchy_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    scale * (0.5 * std::f64::consts::PI * u).tan()
}

/// Draws from `N(0, diag(σ) L Lᵀ diag(σ))`.
pub fn mvn_chol_sample<R: Rng + ?Sized>(
    sigma: &ScaleVector,
    l: &CorrelationCholesky,
    rng: &mut R,
) -> Vec<f64> {
    let d = l.dim();
    let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = vec![0.0; d];
    linalg::lower_mul(l.as_slice(), d, &eps, &mut out);
    out.iter_mut()
        .zip(sigma.as_slice())
        .for_each(|(o, s)| *o *= s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ks_uniform(mut xs: Vec<f64>, lo: f64, hi: f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x - lo) / (hi - lo);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn lkj1_dim2_correlation_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r: Vec<f64> = (0..100_000)
            .map(|_| lkj_cholesky_sample(2, 1.0, &mut rng).get(1, 0))
            .collect();
        assert!(ks_uniform(r, -1.0, 1.0) < 0.01);
    }

    #[test]
    fn lkj1_dim3_marginal_is_beta() {
        // Marginal of each correlation under LKJ(η) in dim d is
        // 2·Beta(η − 1 + d/2, same) − 1; for η = 1, d = 3 that is Beta(1.5, 1.5),
        // whose variance on (−1, 1) is 1/(2·1.5 + 1) = 0.25.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50_000;
        let mut s = [0.0; 3];
        for _ in 0..n {
            let om = lkj_cholesky_sample(3, 1.0, &mut rng).correlation();
            s[0] += om[3] * om[3];
            s[1] += om[6] * om[6];
            s[2] += om[7] * om[7];
        }
        for v in s {
            assert!((v / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn half_cauchy_median_is_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut xs: Vec<f64> = (0..100_001).map(|_| half_cauchy_sample(2.5, &mut rng)).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[50_000] / 2.5 - 1.0).abs() < 0.02);
    }

    #[test]
    fn mvn_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let om = [1.0, 0.6, 0.6, 1.0];
        let l = CorrelationCholesky::from_correlation(2, &om).unwrap();
        let s = ScaleVector::new(vec![2.0, 0.5]).unwrap();
        let n = 200_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let x = mvn_chol_sample(&s, &l, &mut rng);
            acc[0] += x[0] * x[0];
            acc[1] += x[1] * x[1];
            acc[2] += x[0] * x[1];
        }
        let n = n as f64;
        assert!((acc[0] / n - 4.0).abs() < 0.05);
        assert!((acc[1] / n - 0.25).abs() < 0.005);
        assert!((acc[2] / n - 0.6).abs() < 0.01);
    }
}
