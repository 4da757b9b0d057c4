use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retained posterior draws, one row per (chain, iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    names: Vec<String>,
    chain: Vec<usize>,
    iteration: Vec<usize>,
    /// Row-major: draw × parameter.
    values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct LongRow {
    chain: usize,
    iteration: usize,
    parameter: String,
    value: f64,
}

impl PosteriorDraws {
    pub fn new(names: Vec<String>) -> Self {
        Self::with_capacity(names, 0)
    }

    pub fn with_capacity(names: Vec<String>, draws: usize) -> Self {
        let n = names.len();
        PosteriorDraws {
            names,
            chain: Vec::with_capacity(draws),
            iteration: Vec::with_capacity(draws),
            values: Vec::with_capacity(draws * n),
        }
    }

    /// Appends one draw. Panics if `row` does not match the parameter count.
    pub fn push(&mut self, chain: usize, iteration: usize, row: &[f64]) {
        assert_eq!(row.len(), self.names.len(), "draw width mismatch");
        self.chain.push(chain);
        self.iteration.push(iteration);
        self.values.extend_from_slice(row);
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn n_draws(&self) -> usize {
        self.chain.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn chain_ids(&self) -> &[usize] {
        &self.chain
    }

    pub fn iterations(&self) -> &[usize] {
        &self.iteration
    }

    pub fn row(&self, draw: usize) -> &[f64] {
        let n = self.n_params();
        &self.values[draw * n..(draw + 1) * n]
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::NotFound(format!("parameter '{name}'")))
    }

    /// All draws of parameter `j`, chains concatenated.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.n_params();
        (0..self.n_draws()).map(|i| self.values[i * n + j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.column(self.param_index(name)?))
    }

    /// Distinct chain ids in first-appearance order.
    pub fn chains(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for &c in &self.chain {
            if !seen.contains(&c) {
                seen.push(c);
            }
        }
        seen
    }

    /// Draws of parameter `j` split by chain, in [`Self::chains`] order.
    pub fn by_chain(&self, j: usize) -> Vec<Vec<f64>> {
        let ids = self.chains();
        let pos: HashMap<usize, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let mut out = vec![Vec::new(); ids.len()];
        let n = self.n_params();
        for (i, c) in self.chain.iter().enumerate() {
            out[pos[c]].push(self.values[i * n + j]);
        }
        out
    }

    /// Keeps only the named parameters, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let idx: Vec<usize> = names.iter().map(|n| self.param_index(n)).collect::<Result<_>>()?;
        let mut out = PosteriorDraws::with_capacity(
            names.iter().map(|s| s.to_string()).collect(),
            self.n_draws(),
        );
        let mut row = Vec::with_capacity(idx.len());
        for i in 0..self.n_draws() {
            row.clear();
            row.extend(idx.iter().map(|&j| self.row(i)[j]));
            out.push(self.chain[i], self.iteration[i], &row);
        }
        Ok(out)
    }

    /// Long format: `chain,iteration,parameter,value`. Values use the shortest
    /// representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["chain", "iteration", "parameter", "value"])?;
        for i in 0..self.n_draws() {
            let c = self.chain[i].to_string();
            let it = self.iteration[i].to_string();
            for (name, v) in self.names.iter().zip(self.row(i)) {
                w.write_record([c.as_str(), it.as_str(), name.as_str(), &v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<draws>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads the long format written by [`Self::write_csv`]. Rows of one draw
    /// must be contiguous; parameter order is taken from the first draw.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut names: Vec<String> = Vec::new();
        let mut names_done = false;
        let mut out: Option<PosteriorDraws> = None;
        let mut current: Option<(usize, usize)> = None;
        let mut row: Vec<f64> = Vec::new();
        let flush = |out: &mut Option<PosteriorDraws>,
                         names: &Vec<String>,
                         key: (usize, usize),
                         row: &mut Vec<f64>|
         -> Result<()> {
            let d = out.get_or_insert_with(|| PosteriorDraws::new(names.clone()));
            if row.len() != d.n_params() {
                return Err(Error::Validation {
                    row: d.n_draws() + 1,
                    message: format!(
                        "draw (chain {}, iteration {}) has {} parameters, expected {}",
                        key.0,
                        key.1,
                        row.len(),
                        d.n_params()
                    ),
                });
            }
            d.push(key.0, key.1, row);
            row.clear();
            Ok(())
        };
        for (i, rec) in rdr.deserialize::<LongRow>().enumerate() {
            let rec = rec?;
            let key = (rec.chain, rec.iteration);
            if current != Some(key) {
                if let Some(k) = current {
                    names_done = true;
                    flush(&mut out, &names, k, &mut row)?;
                }
                current = Some(key);
            }
            if !names_done {
                names.push(rec.parameter);
            } else if names.get(row.len()) != Some(&rec.parameter) {
                return Err(Error::Validation {
                    row: i + 1,
                    message: format!("unexpected parameter '{}'", rec.parameter),
                });
            }
            row.push(rec.value);
        }
        if let Some(k) = current {
            flush(&mut out, &names, k, &mut row)?;
        }
        Ok(out.unwrap_or_else(|| PosteriorDraws::new(Vec::new())))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}
