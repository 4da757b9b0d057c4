//! Constrained parameter types and their maps to unconstrained space.
//!
//! Scales are mapped through `log`. Correlation Cholesky factors are mapped
//! through canonical partial correlations (CPCs): each free coordinate `y`
//! gives a CPC `z = tanh(y)`, and row `i` of the factor is
//!
//! ```text
//! L[i][j] = z[i][j] * sqrt(prod_{k<j} (1 - z[i][k]^2))    j < i
//! L[i][i] =           sqrt(prod_{k<i} (1 - z[i][k]^2))
//! ```
//!
//! Free coordinates are ordered row-major over the strict lower triangle.
//! All log-Jacobians are with respect to Lebesgue measure on the strict lower
//! triangle of `L`, which is the measure [`lkj_log_density`] is written in.
//!
//! [`lkj_log_density`]: super::lkj_log_density

use serde::{Deserialize, Serialize};

use super::linalg;
use crate::error::{Error, Result};

/// Lower-triangular factor `L` of a correlation matrix `Ω = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCholesky {
    dim: usize,
    data: Vec<f64>,
}

impl CorrelationCholesky {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        CorrelationCholesky { dim, data }
    }

    /// Validates a row-major lower-triangular factor: unit-norm rows, positive
    /// diagonal, zero upper triangle.
    pub fn from_lower(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::Dimension {
                expected: dim * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite Cholesky entry".into()));
        }
        for i in 0..dim {
            if !(data[i * dim + i] > 0.0) {
                return Err(Error::Domain(format!("non-positive diagonal at row {i}")));
            }
            if data[i * dim + i + 1..(i + 1) * dim].iter().any(|&v| v != 0.0) {
                return Err(Error::Domain(format!("non-zero upper entry in row {i}")));
            }
            let norm: f64 = data[i * dim..i * dim + i + 1].iter().map(|v| v * v).sum();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::Domain(format!("row {i} has squared norm {norm}")));
            }
        }
        Ok(CorrelationCholesky { dim, data })
    }

    /// Cholesky factor of a correlation matrix given row-major.
    pub fn from_correlation(dim: usize, omega: &[f64]) -> Result<Self> {
        let l = linalg::cholesky(omega, dim)
            .ok_or_else(|| Error::Domain("correlation matrix is not positive definite".into()))?;
        // Renormalise rows so tiny rounding in Ω does not break the unit-norm invariant.
        let mut l = l;
        for i in 0..dim {
            let norm: f64 = l[i * dim..i * dim + i + 1].iter().map(|v| v * v).sum::<f64>().sqrt();
            l[i * dim..i * dim + i + 1].iter_mut().for_each(|v| *v /= norm);
        }
        Self::from_lower(dim, l)
    }

    /// Builds the factor from canonical partial correlations in (−1, 1).
    pub fn from_cpcs(dim: usize, cpcs: &[f64]) -> Result<Self> {
        if cpcs.len() != super::n_corr_free(dim) {
            return Err(Error::Dimension {
                expected: super::n_corr_free(dim),
                got: cpcs.len(),
            });
        }
        if cpcs.iter().any(|z| !(z.abs() < 1.0)) {
            return Err(Error::Domain("partial correlation outside (-1, 1)".into()));
        }
        let mut data = vec![0.0; dim * dim];
        if dim > 0 {
            data[0] = 1.0;
        }
        let mut k = 0;
        for i in 1..dim {
            let mut remaining: f64 = 1.0;
            for j in 0..i {
                let z = cpcs[k];
                k += 1;
                data[i * dim + j] = z * remaining.sqrt();
                remaining *= 1.0 - z * z;
            }
            data[i * dim + i] = remaining.sqrt();
        }
        Ok(CorrelationCholesky { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `dim × dim` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// `Ω = L Lᵀ`, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        linalg::outer_lower(&self.data, self.dim)
    }

    /// Free coordinates (inverse of the CPC map).
    pub fn unconstrain(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(super::n_corr_free(d));
        for i in 1..d {
            let mut used: f64 = 0.0;
            for j in 0..i {
                let v = self.data[i * d + j];
                let z = (v / (1.0 - used).sqrt()).clamp(-1.0, 1.0);
                out.push(z.atanh());
                used += v * v;
            }
        }
        out
    }
}

/// Positive standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector(Vec<f64>);

impl ScaleVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("scale must be positive and finite, got {v}")));
        }
        Ok(ScaleVector(values))
    }

    pub fn ones(len: usize) -> Self {
        ScaleVector(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ln(1 - tanh(y)^2) = -2 ln cosh(y)`, stable for large `|y|`.
fn log1m_tanh_sq(y: f64) -> f64 {
    let a = y.abs();
    -2.0 * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
}

/// Forward CPC transform with the intermediates needed for reverse-mode
/// gradients.
#[derive(Debug, Clone)]
pub struct CorrTransform {
    dim: usize,
    z: Vec<f64>,
    /// `ln(1 - z²)` per free coordinate.
    log1m_z2: Vec<f64>,
    /// `sqrt(1 - Σ_{k<j} L[i][k]²)` per free coordinate (the multiplier of `z`).
    w: Vec<f64>,
    l: CorrelationCholesky,
    log_jacobian: f64,
}

impl CorrTransform {
    pub fn forward(dim: usize, y: &[f64]) -> Self {
        debug_assert_eq!(y.len(), super::n_corr_free(dim));
        let n = y.len();
        let mut z = Vec::with_capacity(n);
        let mut log1m_z2 = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut data = vec![0.0; dim * dim];
        let mut log_jacobian = 0.0;
        if dim > 0 {
            data[0] = 1.0;
        }
        let mut k = 0;
        for i in 1..dim {
            let mut cum: f64 = 0.0;
            for j in 0..i {
                let zk = y[k].tanh();
                let a = log1m_tanh_sq(y[k]);
                let wk = (0.5 * cum).exp();
                data[i * dim + j] = zk * wk;
                log_jacobian += a + 0.5 * cum;
                cum += a;
                z.push(zk);
                log1m_z2.push(a);
                w.push(wk);
                k += 1;
            }
            data[i * dim + i] = (0.5 * cum).exp();
        }
        CorrTransform {
            dim,
            z,
            log1m_z2,
            w,
            l: CorrelationCholesky { dim, data },
            log_jacobian,
        }
    }

    pub fn cholesky(&self) -> &CorrelationCholesky {
        &self.l
    }

    pub fn into_cholesky(self) -> CorrelationCholesky {
        self.l
    }

    pub fn log_jacobian(&self) -> f64 {
        self.log_jacobian
    }

    /// Accumulates into `gy` the gradient of `f(L(y)) + log|J(y)|`, where `gl`
    /// is the row-major gradient of `f` with respect to the lower triangle of
    /// `L` (diagonal included; upper entries ignored).
    pub fn backward(&self, gl: &[f64], gy: &mut [f64]) {
        let d = self.dim;
        let l = &self.l.data;
        let mut k = 0;
        for i in 1..d {
            // suffix[j] = Σ_{t=j..=i} gL[i][t] L[i][t]
            let mut suffix = vec![0.0; i + 2];
            for t in (0..=i).rev() {
                suffix[t] = suffix[t + 1] + gl[i * d + t] * l[i * d + t];
            }
            for m in 0..i {
                let z = self.z[k];
                let dz = self.log1m_z2[k].exp();
                gy[k] += gl[i * d + m] * dz * self.w[k] - z * suffix[m + 1]
                    - z * (i - m + 1) as f64;
                k += 1;
            }
        }
    }
}

/// Kind of a parameter block in an unconstrained layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Unconstrained reals.
    Real(usize),
    /// Positive scales, log-mapped.
    Scale(usize),
    /// Correlation Cholesky factor of the given dimension, CPC-mapped.
    CorrCholesky(usize),
}

impl BlockKind {
    pub fn free_len(&self) -> usize {
        match *self {
            BlockKind::Real(n) | BlockKind::Scale(n) => n,
            BlockKind::CorrCholesky(d) => super::n_corr_free(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockValue {
    Real(Vec<f64>),
    Scale(ScaleVector),
    Corr(CorrelationCholesky),
}

/// Bijection between a list of constrained blocks and one flat real vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    blocks: Vec<(String, BlockKind, usize)>,
    dim: usize,
}

impl ParamLayout {
    pub fn new(blocks: impl IntoIterator<Item = (String, BlockKind)>) -> Self {
        let mut offset = 0;
        let blocks = blocks
            .into_iter()
            .map(|(name, kind)| {
                let b = (name, kind, offset);
                offset += kind.free_len();
                b
            })
            .collect();
        ParamLayout {
            blocks,
            dim: offset,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Offset of the named block in the flat vector.
    pub fn offset(&self, name: &str) -> Option<usize> {
        self.blocks.iter().find(|b| b.0 == name).map(|b| b.2)
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, BlockKind, usize)> {
        self.blocks.iter().map(|(n, k, o)| (n.as_str(), *k, *o))
    }

    pub fn to_unconstrained(&self, values: &[BlockValue]) -> Result<Vec<f64>> {
        if values.len() != self.blocks.len() {
            return Err(Error::Dimension {
                expected: self.blocks.len(),
                got: values.len(),
            });
        }
        let mut out = Vec::with_capacity(self.dim);
        for ((name, kind, _), value) in self.blocks.iter().zip(values) {
            match (kind, value) {
                (BlockKind::Real(n), BlockValue::Real(v)) if v.len() == *n => {
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Domain(format!("non-finite value in block '{name}'")));
                    }
                    out.extend_from_slice(v);
                }
                (BlockKind::Scale(n), BlockValue::Scale(s)) if s.len() == *n => {
                    out.extend(s.as_slice().iter().map(|x| x.ln()));
                }
                (BlockKind::CorrCholesky(d), BlockValue::Corr(l)) if l.dim() == *d => {
                    out.extend(l.unconstrain());
                }
                _ => {
                    return Err(Error::Domain(format!(
                        "value does not match block '{name}' ({kind:?})"
                    )))
                }
            }
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("unconstrained value is not finite".into()));
        }
        Ok(out)
    }

    /// Constrained blocks and the total log-Jacobian of the map.
    pub fn from_unconstrained(&self, x: &[f64]) -> Result<(Vec<BlockValue>, f64)> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite unconstrained input".into()));
        }
        let mut log_jac = 0.0;
        let values = self
            .blocks
            .iter()
            .map(|(_, kind, off)| {
                let seg = &x[*off..*off + kind.free_len()];
                match *kind {
                    BlockKind::Real(_) => BlockValue::Real(seg.to_vec()),
                    BlockKind::Scale(_) => {
                        log_jac += seg.iter().sum::<f64>();
                        BlockValue::Scale(ScaleVector(seg.iter().map(|v| v.exp()).collect()))
                    }
                    BlockKind::CorrCholesky(d) => {
                        let t = CorrTransform::forward(d, seg);
                        log_jac += t.log_jacobian();
                        BlockValue::Corr(t.into_cholesky())
                    }
                }
            })
            .collect();
        Ok((values, log_jac))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn strict_lower(l: &CorrelationCholesky) -> Vec<f64> {
        let d = l.dim();
        let mut v = Vec::new();
        for i in 1..d {
            for j in 0..i {
                v.push(l.get(i, j));
            }
        }
        v
    }

    #[test]
    fn identity_maps_to_zero() {
        assert!(CorrelationCholesky::identity(4).unconstrain().iter().all(|v| *v == 0.0));
        let layout = ParamLayout::new([("s".to_string(), BlockKind::Scale(2))]);
        let u = layout
            .to_unconstrained(&[BlockValue::Scale(ScaleVector::ones(2))])
            .unwrap();
        assert_eq!(u, vec![0.0, 0.0]);
    }

    #[test]
    fn round_trip_random_dim3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let l = CorrTransform::forward(3, &y).into_cholesky();
            let back = l.unconstrain();
            let l2 = CorrTransform::forward(3, &back).into_cholesky();
            let dev = l
                .as_slice()
                .iter()
                .zip(l2.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dev < 1e-12, "{dev}");
            for (a, b) in y.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_gives_valid_factor() {
        let t = CorrTransform::forward(4, &[0.3, -1.1, 2.0, 0.0, 0.7, -0.4]);
        CorrelationCholesky::from_lower(4, t.cholesky().as_slice().to_vec()).unwrap();
        let omega = t.cholesky().correlation();
        for i in 0..4 {
            assert!((omega[i * 5] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn from_cpcs_matches_forward() {
        let y = [0.5, -0.2, 1.3];
        let z: Vec<f64> = y.iter().map(|v: &f64| v.tanh()).collect();
        let a = CorrelationCholesky::from_cpcs(3, &z).unwrap();
        let b = CorrTransform::forward(3, &y).into_cholesky();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    /// log|det ∂L_strict/∂y| by central differences.
    fn numeric_log_jacobian(dim: usize, y: &[f64]) -> f64 {
        let n = y.len();
        let h = 1e-6;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[c] += h;
            ym[c] -= h;
            let lp = strict_lower(CorrTransform::forward(dim, &yp).cholesky());
            let lm = strict_lower(CorrTransform::forward(dim, &ym).cholesky());
            for r in 0..n {
                jac[(r, c)] = (lp[r] - lm[r]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn log_jacobian_matches_numeric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 2..=5 {
            let y: Vec<f64> = (0..super::super::n_corr_free(dim))
                .map(|_| rng.random_range(-1.5..1.5))
                .collect();
            let t = CorrTransform::forward(dim, &y);
            let num = numeric_log_jacobian(dim, &y);
            assert!((t.log_jacobian() - num).abs() < 1e-6, "dim {dim}: {} vs {num}", t.log_jacobian());
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 4;
        let n = super::super::n_corr_free(dim);
        // f(L) = Σ c_ij L_ij over the lower triangle
        let coef: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |y: &[f64]| {
            let t = CorrTransform::forward(dim, y);
            let l = t.cholesky().as_slice();
            let mut s = t.log_jacobian();
            for i in 0..dim {
                for j in 0..=i {
                    s += coef[i * dim + j] * l[i * dim + j];
                }
            }
            s
        };
        for _ in 0..20 {
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = vec![0.0; n];
            CorrTransform::forward(dim, &y).backward(&coef, &mut g);
            for k in 0..n {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[k] += 1e-5;
                ym[k] -= 1e-5;
                let num = (f(&yp) - f(&ym)) / 2e-5;
                assert!((g[k] - num).abs() < 1e-7 * (1.0 + num.abs()), "{k}: {} vs {num}", g[k]);
            }
        }
    }

    #[test]
    fn large_coordinates_stay_finite() {
        let t = CorrTransform::forward(3, &[40.0, -40.0, 800.0]);
        assert!(t.log_jacobian().is_finite());
        assert!(t.cholesky().as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn non_finite_input_rejected() {
        let layout = ParamLayout::new([
            ("b".to_string(), BlockKind::Real(1)),
            ("l".to_string(), BlockKind::CorrCholesky(2)),
        ]);
        assert!(layout.from_unconstrained(&[f64::NAN, 0.0]).is_err());
        assert!(layout
            .to_unconstrained(&[
                BlockValue::Real(vec![f64::INFINITY]),
                BlockValue::Corr(CorrelationCholesky::identity(2))
            ])
            .is_err());
        assert!(ScaleVector::new(vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn layout_round_trip(
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            s in proptest::collection::vec(-3.0f64..3.0, 3),
            c in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let layout = ParamLayout::new([
                ("b".to_string(), BlockKind::Real(3)),
                ("s".to_string(), BlockKind::Scale(3)),
                ("l".to_string(), BlockKind::CorrCholesky(3)),
            ]);
            let x: Vec<f64> = b.iter().chain(&s).chain(&c).copied().collect();
            let (vals, _) = layout.from_unconstrained(&x).unwrap();
            let back = layout.to_unconstrained(&vals).unwrap();
            for (p, q) in x.iter().zip(&back) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }
    }
}
