use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{CellTable, Marker};
use crate::error::{Error, Result};
use crate::llmm::LlmmData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DagKind {
    /// `X → Y1`, `X → Y2`.
    NoConfounder,
    /// `X → Y2 → Y1`.
    Pipe,
    /// `X → Y1 ← Y2 ← X`.
    Collider,
}

/// Linear-Gaussian structural equations on the transformed-expression scale:
///
/// ```text
/// Y2 = base_y2 + b·X + v2_d + ε2
/// Y1 = base_y1 + a·X + c·Y2 + v1_d + ε1    (a = 0 for a pipe, c = 0 without confounder)
/// ```
///
/// `X ~ Bernoulli(0.5)` per cell; `v_d ~ N(0, donor_sd²)` per donor and
/// outcome; `ε ~ N(0, noise²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagScenario {
    pub kind: DagKind,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub noise_y1: f64,
    pub noise_y2: f64,
    pub base_y1: f64,
    pub base_y2: f64,
    pub donor_sd: f64,
    pub donors: usize,
    pub cells_per_donor: usize,
    /// Cofactor of the approximate count export.
    pub cofactor: f64,
}

impl DagScenario {
    /// Unit noise, baselines that keep counts mostly positive, and the given
    /// effect sizes.
    pub fn new(kind: DagKind, a: f64, b: f64, c: f64) -> Self {
        DagScenario {
            kind,
            a,
            b,
            c,
            noise_y1: 1.0,
            noise_y2: 1.0,
            base_y1: 3.0,
            base_y2: 3.0,
            donor_sd: 0.3,
            donors: 6,
            cells_per_donor: 400,
            cofactor: crate::data::DEFAULT_COFACTOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.a, self.b, self.c, self.base_y1, self.base_y2];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("effect sizes and baselines must be finite".into()));
        }
        for (name, v) in [("noise_y1", self.noise_y1), ("noise_y2", self.noise_y2), ("donor_sd", self.donor_sd)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.cofactor > 0.0 && self.cofactor.is_finite()) {
            return Err(Error::Parameter("cofactor must be positive".into()));
        }
        if self.donors == 0 || self.cells_per_donor < 2 {
            return Err(Error::Parameter("need at least one donor and two cells per donor".into()));
        }
        Ok(())
    }

    /// Effective `(a, c)` after applying the DAG's missing edges.
    fn edges(&self) -> (f64, f64) {
        match self.kind {
            DagKind::NoConfounder => (self.a, 0.0),
            DagKind::Pipe => (0.0, self.c),
            DagKind::Collider => (self.a, self.c),
        }
    }

    /// Within-donor mean shift `E[Y | X=1] − E[Y | X=0]` and covariance of
    /// `(Y1, Y2)` given X.
    pub fn conditional_moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let (a, c) = self.edges();
        let (s1, s2) = (self.noise_y1.powi(2), self.noise_y2.powi(2));
        let shift = [a + c * self.b, self.b];
        let cov = [[c * c * s2 + s1, c * s2], [c * s2, s2]];
        (shift, cov)
    }
}

/// Population log-odds coefficients of X on `(Y1, Y2)` within a donor, or on
/// `Y2` alone when `include_y1` is false. With Gaussian outcomes of common
/// covariance Σ the logistic regression is exact with slope `Σ⁻¹ Δμ`.
pub fn dag_logit_coefficients(s: &DagScenario, include_y1: bool) -> Result<Vec<f64>> {
    let (d, v) = s.conditional_moments();
    if !include_y1 {
        if !(v[1][1] > 0.0) {
            return Err(Error::Domain("Y2 has zero conditional variance".into()));
        }
        return Ok(vec![d[1] / v[1][1]]);
    }
    let det = v[0][0] * v[1][1] - v[0][1] * v[1][0];
    if !(det > 0.0) {
        return Err(Error::Domain("singular outcome covariance".into()));
    }
    Ok(vec![(v[1][1] * d[0] - v[0][1] * d[1]) / det, (v[0][0] * d[1] - v[1][0] * d[0]) / det])
}

/// Simulated DAG cells on the transformed scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DagSimulation {
    /// `Y1, Y2` per cell (N×2).
    pub values: Vec<f64>,
    pub x: Vec<u8>,
    pub donor: Vec<String>,
    pub cofactor: f64,
}

pub const DAG_MARKERS: [&str; 2] = ["Y1", "Y2"];
pub const DAG_LEVELS: [&str; 2] = ["cond1", "cond2"];

impl DagSimulation {
    pub fn n_cells(&self) -> usize {
        self.x.len()
    }

    /// Outcomes as predictors and X as response, ready for the LLMM.
    pub fn llmm_data(&self) -> Result<LlmmData> {
        LlmmData::new(
            DAG_MARKERS.iter().map(|s| s.to_string()).collect(),
            self.values.clone(),
            self.x.clone(),
            &self.donor,
            DAG_LEVELS.map(String::from),
        )
    }

    /// Approximate counts `round(cofactor · sinh(y))`, negative values set to
    /// zero. Returns the table and the number of clamped entries.
    pub fn count_table(&self) -> Result<(CellTable, usize)> {
        let mut clamped = 0;
        let counts = self
            .values
            .iter()
            .map(|&y| {
                let v = (self.cofactor * y.sinh()).round();
                if v < 0.0 {
                    clamped += 1;
                    0
                } else {
                    v as u64
                }
            })
            .collect();
        let cond = self.x.iter().map(|&x| DAG_LEVELS[x as usize].to_string()).collect();
        let table = CellTable::from_parts(
            DAG_MARKERS.iter().map(|m| Marker::functional(*m)).collect(),
            self.donor.clone(),
            cond,
            vec!["sim".into(); self.n_cells()],
            counts,
            Some(DAG_LEVELS[0]),
        )?;
        Ok((table, clamped))
    }
}

/// Simulates the scenario. A donor whose draw of X lacks one class has a
/// random cell flipped so every donor is observed in both conditions.
pub fn simulate_dag(s: &DagScenario, seed: u64) -> Result<DagSimulation> {
    s.validate()?;
    let (a, c) = s.edges();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = s.donors.to_string().len().max(2);
    let n = s.donors * s.cells_per_donor;
    let mut values = Vec::with_capacity(2 * n);
    let mut xs = Vec::with_capacity(n);
    let mut donor = Vec::with_capacity(n);
    let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    for d in 0..s.donors {
        let v1 = s.donor_sd * normal(&mut rng);
        let v2 = s.donor_sd * normal(&mut rng);
        let mut x: Vec<u8> = (0..s.cells_per_donor).map(|_| u8::from(rng.random::<bool>())).collect();
        let ones = x.iter().filter(|&&v| v == 1).count();
        if ones == 0 || ones == x.len() {
            let k = rng.random_range(0..x.len());
            x[k] = 1 - x[k];
        }
        for &xi in &x {
            let xf = xi as f64;
            let y2 = s.base_y2 + s.b * xf + v2 + s.noise_y2 * normal(&mut rng);
            let y1 = s.base_y1 + a * xf + c * y2 + v1 + s.noise_y1 * normal(&mut rng);
            values.extend([y1, y2]);
        }
        xs.extend(x);
        donor.extend(std::iter::repeat_n(format!("donor{:0width$}", d + 1), s.cells_per_donor));
    }
    Ok(DagSimulation {
        values,
        x: xs,
        donor,
        cofactor: s.cofactor,
    })
}
