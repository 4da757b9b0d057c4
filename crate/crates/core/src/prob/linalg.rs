//! Small dense helpers on row-major square matrices. Dimensions here are the
//! marker count, so everything is O(J²) or O(J³) with tiny J.

/// `out = L x` for lower-triangular `L`.
pub fn lower_mul(l: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..dim {
        let row = &l[i * dim..i * dim + i + 1];
        out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out = Lᵀ x` for lower-triangular `L`.
pub fn lower_t_mul(l: &[f64], dim: usize, x: &[f64], out: &mut [f64]) {
    for j in 0..dim {
        out[j] = (j..dim).map(|i| l[i * dim + j] * x[i]).sum();
    }
}

/// Solves `L x = b` in place by forward substitution.
pub fn forward_solve(l: &[f64], dim: usize, b: &mut [f64]) {
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * dim + k] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
}

/// Solves `Lᵀ x = b` in place by back substitution.
pub fn backward_solve_t(l: &[f64], dim: usize, b: &mut [f64]) {
    for i in (0..dim).rev() {
        let mut s = b[i];
        for k in i + 1..dim {
            s -= l[k * dim + i] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, or `None`.
pub fn cholesky(a: &[f64], dim: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Some(l)
}

/// `L Lᵀ`.
pub fn outer_lower(l: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let s: f64 = (0..=j).map(|k| l[i * dim + k] * l[j * dim + k]).sum();
            out[i * dim + j] = s;
            out[j * dim + i] = s;
        }
    }
    out
}
