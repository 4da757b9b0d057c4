use std::f64::consts::{LN_2, PI};

use super::linalg;
use super::transform::{CorrelationCholesky, ScaleVector};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn ln_factorial(k: u64) -> f64 {
    statrs::function::factorial::ln_factorial(k)
}

/// `ln(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Poisson log mass at `k` with log-rate `log_mu`.
pub fn poisson_log_pmf(k: i64, log_mu: f64) -> Result<f64> {
    if k < 0 {
        return Err(Error::Domain(format!("poisson count must be >= 0, got {k}")));
    }
    Ok(k as f64 * log_mu - log_mu.exp() - ln_factorial(k as u64))
}

/// Bernoulli log mass with logit-scale parameter `eta`.
pub fn bernoulli_logit_log_pmf(y: bool, eta: f64) -> f64 {
    if y {
        -log1p_exp(-eta)
    } else {
        -log1p_exp(eta)
    }
}

/// Per-row coefficients `c_i` such that the LKJ(η) log density on a Cholesky
/// factor is `Σ_i c_i ln L[i][i]`. Entry 0 is unused (`L[0][0] = 1`).
pub fn lkj_diag_coefficients(dim: usize, eta: f64) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                (dim - 1 - i) as f64 + 2.0 * (eta - 1.0)
            }
        })
        .collect()
}

/// Unnormalised LKJ(η) log density of `Ω = L Lᵀ`, expressed on the strict
/// lower triangle of `L` (so it includes the `L → Ω` Jacobian).
pub fn lkj_log_density(l: &CorrelationCholesky, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("LKJ shape must be positive, got {eta}")));
    }
    let d = l.dim();
    let coef = lkj_diag_coefficients(d, eta);
    Ok((1..d).map(|i| coef[i] * l.get(i, i).ln()).sum())
}

pub fn half_cauchy_log_density(s: f64, scale: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("half-Cauchy support is s > 0, got {s}")));
    }
    if !(scale > 0.0) {
        return Err(Error::Parameter(format!("half-Cauchy scale must be positive, got {scale}")));
    }
    let r = s / scale;
    Ok(LN_2 - (PI * scale).ln() - (r * r).ln_1p())
}

/// Half-Cauchy log density of `exp(v)` plus the log-map Jacobian `v`, and its
/// derivative in `v`.
pub fn half_cauchy_log_density_log_scale_grad(v: f64, scale: f64) -> (f64, f64) {
    let s = v.exp();
    let r2 = (s / scale) * (s / scale);
    let value = LN_2 - (PI * scale).ln() - r2.ln_1p() + v;
    (value, 1.0 - 2.0 * r2 / (1.0 + r2))
}

pub fn normal_prior_log_density(beta: f64, sd: f64) -> f64 {
    if !(sd > 0.0) {
        return f64::NEG_INFINITY;
    }
    let z = beta / sd;
    -0.5 * (LN_2PI + 2.0 * sd.ln()) - 0.5 * z * z
}

/// Log density of `N(0, diag(σ) L Lᵀ diag(σ))` at `x`.
pub fn mvn_log_density_chol(x: &[f64], sigma: &ScaleVector, l: &CorrelationCholesky) -> Result<f64> {
    check_dims(x, sigma, l)?;
    let d = x.len();
    let mut w: Vec<f64> = x.iter().zip(sigma.as_slice()).map(|(a, s)| a / s).collect();
    linalg::forward_solve(l.as_slice(), d, &mut w);
    let log_det: f64 = (0..d)
        .map(|j| sigma.as_slice()[j].ln() + l.get(j, j).ln())
        .sum();
    Ok(-0.5 * d as f64 * LN_2PI - log_det - 0.5 * w.iter().map(|v| v * v).sum::<f64>())
}

/// Value and gradients of [`mvn_log_density_chol`].
#[derive(Debug, Clone)]
pub struct MvnGrad {
    pub value: f64,
    pub x: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Row-major, lower triangle only.
    pub chol: Vec<f64>,
}

pub fn mvn_log_density_chol_grad(
    x: &[f64],
    sigma: &ScaleVector,
    l: &CorrelationCholesky,
) -> Result<MvnGrad> {
    check_dims(x, sigma, l)?;
    let d = x.len();
    let s = sigma.as_slice();
    let mut w: Vec<f64> = x.iter().zip(s).map(|(a, b)| a / b).collect();
    linalg::forward_solve(l.as_slice(), d, &mut w);
    let mut v = w.clone();
    linalg::backward_solve_t(l.as_slice(), d, &mut v);
    let log_det: f64 = (0..d).map(|j| s[j].ln() + l.get(j, j).ln()).sum();
    let value = -0.5 * d as f64 * LN_2PI - log_det - 0.5 * w.iter().map(|t| t * t).sum::<f64>();
    let gx = (0..d).map(|j| -v[j] / s[j]).collect();
    let gs = (0..d)
        .map(|j| -1.0 / s[j] + v[j] * x[j] / (s[j] * s[j]))
        .collect();
    let mut gl = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            gl[i * d + j] = v[i] * w[j];
        }
        gl[i * d + i] -= 1.0 / l.get(i, i);
    }
    Ok(MvnGrad {
        value,
        x: gx,
        sigma: gs,
        chol: gl,
    })
}

fn check_dims(x: &[f64], sigma: &ScaleVector, l: &CorrelationCholesky) -> Result<()> {
    for got in [sigma.len(), l.dim()] {
        if got != x.len() {
            return Err(Error::Dimension {
                expected: x.len(),
                got,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::CorrTransform;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn poisson_values() {
        assert_eq!(poisson_log_pmf(0, 0.0).unwrap(), -1.0);
        assert_eq!(poisson_log_pmf(1, 0.0).unwrap(), -1.0);
        // mpmath, 50 digits: 10*2.3 - exp(2.3) - log(10!)
        let oracle = -2.078_595_027_890_236;
        assert!((poisson_log_pmf(10, 2.3).unwrap() - oracle).abs() < 1e-12);
        assert!(poisson_log_pmf(-1, 0.0).is_err());
    }

    #[test]
    fn bernoulli_values() {
        let l2 = -(2f64.ln());
        assert!((bernoulli_logit_log_pmf(true, 0.0) - l2).abs() < 1e-15);
        assert!((bernoulli_logit_log_pmf(false, 0.0) - l2).abs() < 1e-15);
        let sat = bernoulli_logit_log_pmf(true, 1000.0);
        assert!(sat.is_finite() && sat.abs() < 1e-300);
        assert!((bernoulli_logit_log_pmf(false, 1000.0) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn half_cauchy_values() {
        let mode = (2.0 / (PI * 2.5)).ln();
        assert!((half_cauchy_log_density(1e-300, 2.5).unwrap() - mode).abs() < 1e-15);
        assert!((half_cauchy_log_density(2.5, 2.5).unwrap() - (mode - LN_2)).abs() < 1e-15);
        // mpmath: log(2/(pi*2.5)) - log(1 + 16)
        let oracle = -4.201_086_781_219_826;
        assert!((half_cauchy_log_density(10.0, 2.5).unwrap() - oracle).abs() < 1e-12);
        assert!(half_cauchy_log_density(0.0, 2.5).is_err());
        assert!(half_cauchy_log_density(-1.0, 2.5).is_err());
    }

    #[test]
    fn normal_prior_values() {
        let mode = -0.5 * (2.0 * PI * 49.0).ln();
        assert!((normal_prior_log_density(0.0, 7.0) - mode).abs() < 1e-14);
        assert!((normal_prior_log_density(7.0, 7.0) - (mode - 0.5)).abs() < 1e-14);
        // one prior sd on the log-count scale spans exp(-7) ~ 1e-4 to exp(7) ~ 1096 counts
        assert!(((-7f64).exp() - 9.1e-4).abs() < 1e-5);
        assert_eq!(7f64.exp().floor(), 1096.0);
        assert!(normal_prior_log_density(0.0, 0.0) == f64::NEG_INFINITY);
    }

    #[test]
    fn mvn_closed_forms() {
        let id = CorrelationCholesky::identity(3);
        let v = mvn_log_density_chol(&[0.0; 3], &ScaleVector::ones(3), &id).unwrap();
        assert!((v + 1.5 * (2.0 * PI).ln()).abs() < 1e-14);
        let one = CorrelationCholesky::identity(1);
        let v = mvn_log_density_chol(&[2.0], &ScaleVector::new(vec![2.0]).unwrap(), &one).unwrap();
        assert!((v - (-0.5 * (2.0 * PI * 4.0).ln() - 0.5)).abs() < 1e-14);
        assert!(mvn_log_density_chol(&[0.0; 2], &ScaleVector::ones(3), &id).is_err());
    }

    fn dense_oracle(x: &[f64], sigma: &[f64], l: &CorrelationCholesky) -> f64 {
        let d = x.len();
        let lm = DMatrix::from_row_slice(d, d, l.as_slice());
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(sigma));
        let cov = &s * &lm * lm.transpose() * &s;
        let inv = cov.clone().try_inverse().unwrap();
        let xv = nalgebra::DVector::from_column_slice(x);
        let quad = (xv.transpose() * inv * &xv)[(0, 0)];
        -0.5 * (d as f64 * (2.0 * PI).ln() + cov.determinant().ln() + quad)
    }

    fn random_instance(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, ScaleVector, CorrelationCholesky) {
        let y: Vec<f64> = (0..d * (d - 1) / 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l = CorrTransform::forward(d, &y).into_cholesky();
        let s = ScaleVector::new((0..d).map(|_| rng.random_range(0.3..3.0)).collect()).unwrap();
        let x = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, s, l)
    }

    #[test]
    fn mvn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=10 {
            for _ in 0..10 {
                let (x, s, l) = random_instance(&mut rng, d);
                let a = mvn_log_density_chol(&x, &s, &l).unwrap();
                let b = dense_oracle(&x, s.as_slice(), &l);
                assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()), "d={d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mvn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 4;
        let h = 1e-6;
        for _ in 0..20 {
            let (x, s, l) = random_instance(&mut rng, d);
            let g = mvn_log_density_chol_grad(&x, &s, &l).unwrap();
            for k in 0..d {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let num = (mvn_log_density_chol(&xp, &s, &l).unwrap()
                    - mvn_log_density_chol(&xm, &s, &l).unwrap())
                    / (2.0 * h);
                assert!(close(g.x[k], num, 1e-6));
                let mut sp = s.as_slice().to_vec();
                sp[k] += h;
                let mut sm = s.as_slice().to_vec();
                sm[k] -= h;
                let num = (mvn_log_density_chol(&x, &ScaleVector::new(sp).unwrap(), &l).unwrap()
                    - mvn_log_density_chol(&x, &ScaleVector::new(sm).unwrap(), &l).unwrap())
                    / (2.0 * h);
                assert!(close(g.sigma[k], num, 1e-6));
            }
            // chol entries are perturbed freely (no unit-norm constraint)
            let f = |lv: &[f64]| {
                let mut w: Vec<f64> = x.iter().zip(s.as_slice()).map(|(a, b)| a / b).collect();
                linalg::forward_solve(lv, d, &mut w);
                -(0..d).map(|j| lv[j * d + j].ln()).sum::<f64>()
                    - 0.5 * w.iter().map(|t| t * t).sum::<f64>()
            };
            for i in 0..d {
                for j in 0..=i {
                    let mut lp = l.as_slice().to_vec();
                    lp[i * d + j] += h;
                    let mut lm = l.as_slice().to_vec();
                    lm[i * d + j] -= h;
                    let num = (f(&lp) - f(&lm)) / (2.0 * h);
                    assert!(close(g.chol[i * d + j], num, 1e-6));
                }
            }
        }
    }

    #[test]
    fn lkj_uniform_on_omega_is_the_jacobian_of_l_to_omega() {
        // For η = 1 the density of Ω is constant, so the density on the strict
        // lower triangle of L must equal log|det ∂Ω_strict/∂L_strict|.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 3;
        let strict = |lv: &[f64]| -> Vec<f64> {
            // L_strict -> full L with diag from unit rows -> Ω strict lower
            let mut full = vec![0.0; d * d];
            let mut k = 0;
            full[0] = 1.0;
            for i in 1..d {
                let mut ss = 0.0;
                for j in 0..i {
                    full[i * d + j] = lv[k];
                    ss += lv[k] * lv[k];
                    k += 1;
                }
                full[i * d + i] = (1.0 - ss).sqrt();
            }
            let om = linalg::outer_lower(&full, d);
            let mut out = Vec::new();
            for i in 1..d {
                for j in 0..i {
                    out.push(om[i * d + j]);
                }
            }
            out
        };
        for _ in 0..10 {
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let l = CorrTransform::forward(d, &y).into_cholesky();
            let ls = vec![l.get(1, 0), l.get(2, 0), l.get(2, 1)];
            let h = 1e-6;
            let mut jac = DMatrix::<f64>::zeros(3, 3);
            for c in 0..3 {
                let mut p = ls.clone();
                p[c] += h;
                let mut m = ls.clone();
                m[c] -= h;
                let (fp, fm) = (strict(&p), strict(&m));
                for r in 0..3 {
                    jac[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            let num = jac.determinant().abs().ln();
            let val = lkj_log_density(&l, 1.0).unwrap();
            assert!((val - num).abs() < 1e-7, "{val} vs {num}");
        }
    }

    #[test]
    fn lkj_identity_is_finite_and_eta_checked() {
        let id = CorrelationCholesky::identity(5);
        for eta in [0.5, 1.0, 4.0] {
            assert_eq!(lkj_log_density(&id, eta).unwrap(), 0.0);
        }
        assert!(lkj_log_density(&id, 0.0).is_err());
    }

    #[test]
    fn half_cauchy_log_scale_gradient() {
        for v in [-3.0, -0.2, 0.0, 1.1, 4.0] {
            let (val, g) = half_cauchy_log_density_log_scale_grad(v, 2.5);
            let direct = half_cauchy_log_density(v.exp(), 2.5).unwrap() + v;
            assert!((val - direct).abs() < 1e-13);
            let h = 1e-5;
            let num = (half_cauchy_log_density_log_scale_grad(v + h, 2.5).0
                - half_cauchy_log_density_log_scale_grad(v - h, 2.5).0)
                / (2.0 * h);
            assert!((g - num).abs() < 1e-8);
        }
    }
}
