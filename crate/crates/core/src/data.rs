//! Single-cell tables: ingestion, validation, filtering, subsampling and the
//! arcsinh variance-stabilising transform.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COFACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarkerRole {
    Gating,
    #[default]
    Functional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub name: String,
    pub role: MarkerRole,
}

impl Marker {
    pub fn functional(name: impl Into<String>) -> Self {
        Marker {
            name: name.into(),
            role: MarkerRole::Functional,
        }
    }
}

/// Column-name mapping used when reading a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub donor: String,
    pub condition: String,
    pub celltype: String,
    /// Marker columns to read, in order. Empty means every non-annotation column.
    pub markers: Vec<String>,
    /// Marker roles; unlisted markers are functional.
    pub roles: HashMap<String, MarkerRole>,
    /// Reference condition level (coded 0). Defaults to the lexicographically first level.
    pub reference: Option<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            donor: "donor".into(),
            condition: "condition".into(),
            celltype: "celltype".into(),
            markers: Vec::new(),
            roles: HashMap::new(),
            reference: None,
        }
    }
}

/// Cells × markers count matrix with donor, condition and cell-type annotations.
///
/// Counts are stored row-major. Conditions are coded `0` for the reference
/// level and `1` for the other level; donors are indexed in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    markers: Vec<Marker>,
    counts: Vec<u64>,
    donors: Vec<String>,
    donor_idx: Vec<usize>,
    levels: [String; 2],
    condition: Vec<u8>,
    celltype: Vec<String>,
}

impl CellTable {
    /// Builds and validates a table. `counts` is row-major with one row per cell.
    pub fn from_parts(
        markers: Vec<Marker>,
        donor: Vec<String>,
        condition: Vec<String>,
        celltype: Vec<String>,
        counts: Vec<u64>,
        reference: Option<&str>,
    ) -> Result<Self> {
        validate_markers(&markers)?;
        let n = donor.len();
        let j = markers.len();
        if condition.len() != n || celltype.len() != n {
            return Err(Error::Schema(format!(
                "annotation columns have different lengths ({n}, {}, {})",
                condition.len(),
                celltype.len()
            )));
        }
        if counts.len() != n * j {
            return Err(Error::Dimension {
                expected: n * j,
                got: counts.len(),
            });
        }
        let levels = condition_levels(&condition, reference)?;
        let coded = condition
            .iter()
            .map(|c| u8::from(*c != levels[0]))
            .collect();
        let (donors, donor_idx) = index_labels(&donor);
        Ok(CellTable {
            markers,
            counts,
            donors,
            donor_idx,
            levels,
            condition: coded,
            celltype,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.donor_idx.len()
    }

    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }

    pub fn n_donors(&self) -> usize {
        self.donors.len()
    }

    pub fn markers(&self) -> &[Marker] {
        &self.markers
    }

    pub fn marker_names(&self) -> Vec<String> {
        self.markers.iter().map(|m| m.name.clone()).collect()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, cell: usize, marker: usize) -> u64 {
        self.counts[cell * self.markers.len() + marker]
    }

    pub fn row(&self, cell: usize) -> &[u64] {
        let j = self.markers.len();
        &self.counts[cell * j..(cell + 1) * j]
    }

    pub fn donors(&self) -> &[String] {
        &self.donors
    }

    /// Donor index of every cell.
    pub fn donor_index(&self) -> &[usize] {
        &self.donor_idx
    }

    /// Condition levels, reference first.
    pub fn levels(&self) -> &[String; 2] {
        &self.levels
    }

    /// Condition code (0 = reference, 1 = other) of every cell.
    pub fn condition(&self) -> &[u8] {
        &self.condition
    }

    pub fn celltype(&self) -> &[String] {
        &self.celltype
    }

    /// True iff every donor contributes cells under both conditions.
    pub fn is_paired(&self) -> bool {
        let mut seen = vec![[false; 2]; self.donors.len()];
        for (d, c) in self.donor_idx.iter().zip(&self.condition) {
            seen[*d][*c as usize] = true;
        }
        seen.iter().all(|s| s[0] && s[1])
    }

    fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let j = self.markers.len();
        let mut counts = Vec::with_capacity(rows.len() * j);
        for &r in rows {
            counts.extend_from_slice(self.row(r));
        }
        CellTable::from_parts(
            self.markers.clone(),
            rows.iter()
                .map(|&r| self.donors[self.donor_idx[r]].clone())
                .collect(),
            rows.iter()
                .map(|&r| self.levels[self.condition[r] as usize].clone())
                .collect(),
            rows.iter().map(|&r| self.celltype[r].clone()).collect(),
            counts,
            Some(&self.levels[0]),
        )
    }

    /// Keeps only the cells labelled `keep`.
    pub fn filter_celltype(&self, keep: &str) -> Result<Self> {
        let rows: Vec<usize> = (0..self.n_cells())
            .filter(|&i| self.celltype[i] == keep)
            .collect();
        if rows.is_empty() {
            return Err(Error::NotFound(format!("cell type '{keep}' not in table")));
        }
        self.select_rows(&rows)
    }

    /// Keeps the listed markers, in the given order.
    pub fn select_markers(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.marker_index(n)
                    .ok_or_else(|| Error::NotFound(format!("marker '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut counts = Vec::with_capacity(self.n_cells() * idx.len());
        for i in 0..self.n_cells() {
            let row = self.row(i);
            counts.extend(idx.iter().map(|&j| row[j]));
        }
        let markers: Vec<Marker> = idx.iter().map(|&j| self.markers[j].clone()).collect();
        validate_markers(&markers)?;
        Ok(CellTable {
            markers,
            counts,
            ..self.clone()
        })
    }

    /// Retains `min(k, m)` cells, uniformly without replacement, from each
    /// (donor, condition) group of `m` cells. Row order is preserved.
    pub fn subsample_per_donor(&self, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("subsample size must be >= 1".into()));
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.n_donors() * 2];
        for i in 0..self.n_cells() {
            groups[self.donor_idx[i] * 2 + self.condition[i] as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for g in &groups {
            if g.len() <= k {
                keep.extend_from_slice(g);
            } else {
                keep.extend(sample(&mut rng, g.len(), k).into_iter().map(|s| g[s]));
            }
        }
        keep.sort_unstable();
        self.select_rows(&keep)
    }

    /// Elementwise `asinh(count / cofactor)`.
    pub fn arcsinh_transform(&self, cofactor: f64) -> Result<TransformedTable> {
        if !(cofactor > 0.0) || !cofactor.is_finite() {
            return Err(Error::Parameter(format!(
                "cofactor must be positive, got {cofactor}"
            )));
        }
        let values = self
            .counts
            .iter()
            .map(|&c| (c as f64 / cofactor).asinh())
            .collect();
        Ok(TransformedTable {
            values,
            cofactor,
            source: Arc::new(self.clone()),
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["donor".to_string(), "condition".into(), "celltype".into()];
        header.extend(self.marker_names());
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_cells() {
            record.clear();
            record.push(self.donors[self.donor_idx[i]].clone());
            record.push(self.levels[self.condition[i] as usize].clone());
            record.push(self.celltype[i].clone());
            record.extend(self.row(i).iter().map(u64::to_string));
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Reads and validates a cell table from a CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<CellTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file), schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<CellTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let donor_col = find(&schema.donor)?;
    let cond_col = find(&schema.condition)?;
    let type_col = find(&schema.celltype)?;
    let marker_cols: Vec<(usize, String)> = if schema.markers.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![donor_col, cond_col, type_col].contains(i))
            .map(|(i, h)| (i, h.to_string()))
            .collect()
    } else {
        schema
            .markers
            .iter()
            .map(|m| Ok((find(m)?, m.clone())))
            .collect::<Result<_>>()?
    };
    if marker_cols.is_empty() {
        return Err(Error::Schema("no marker columns".into()));
    }
    for name in schema.roles.keys() {
        if !marker_cols.iter().any(|(_, m)| m == name) {
            return Err(Error::Schema(format!("role given for unknown marker '{name}'")));
        }
    }
    let markers: Vec<Marker> = marker_cols
        .iter()
        .map(|(_, name)| Marker {
            name: name.clone(),
            role: schema.roles.get(name).copied().unwrap_or_default(),
        })
        .collect();

    let mut donor = Vec::new();
    let mut condition = Vec::new();
    let mut celltype = Vec::new();
    let mut counts = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        donor.push(record[donor_col].to_string());
        condition.push(record[cond_col].to_string());
        celltype.push(record[type_col].to_string());
        for (c, name) in &marker_cols {
            let raw = record[*c].trim();
            let value: i64 = raw.parse().map_err(|_| Error::Validation {
                row,
                message: format!("count '{raw}' for marker '{name}' is not an integer"),
            })?;
            if value < 0 {
                return Err(Error::Validation {
                    row,
                    message: format!("negative count {value} for marker '{name}'"),
                });
            }
            counts.push(value as u64);
        }
    }
    CellTable::from_parts(
        markers,
        donor,
        condition,
        celltype,
        counts,
        schema.reference.as_deref(),
    )
}

fn validate_markers(markers: &[Marker]) -> Result<()> {
    if markers.is_empty() {
        return Err(Error::Schema("no markers".into()));
    }
    let mut seen = HashSet::new();
    for m in markers {
        if !seen.insert(m.name.as_str()) {
            return Err(Error::Schema(format!("duplicate marker '{}'", m.name)));
        }
    }
    if !markers.iter().any(|m| m.role == MarkerRole::Functional) {
        return Err(Error::Schema("panel has no functional marker".into()));
    }
    Ok(())
}

fn condition_levels(condition: &[String], reference: Option<&str>) -> Result<[String; 2]> {
    let observed: BTreeSet<&str> = condition.iter().map(String::as_str).collect();
    if observed.len() != 2 {
        return Err(Error::Factor(format!(
            "condition must have exactly two levels, found {}: {:?}",
            observed.len(),
            observed
        )));
    }
    let mut it = observed.into_iter();
    let (a, b) = (it.next().unwrap(), it.next().unwrap());
    match reference {
        None => Ok([a.to_string(), b.to_string()]),
        Some(r) if r == a => Ok([a.to_string(), b.to_string()]),
        Some(r) if r == b => Ok([b.to_string(), a.to_string()]),
        Some(r) => Err(Error::Factor(format!(
            "reference level '{r}' not among observed levels '{a}', '{b}'"
        ))),
    }
}

fn index_labels(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut order: Vec<String> = Vec::new();
    let mut lookup: HashMap<&str, usize> = HashMap::new();
    let idx = labels
        .iter()
        .map(|l| {
            *lookup.entry(l.as_str()).or_insert_with(|| {
                order.push(l.clone());
                order.len() - 1
            })
        })
        .collect();
    (order, idx)
}

/// Arcsinh-transformed expression values with a link to the source counts.
#[derive(Debug, Clone)]
pub struct TransformedTable {
    values: Vec<f64>,
    cofactor: f64,
    source: Arc<CellTable>,
}

impl TransformedTable {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize, marker: usize) -> f64 {
        self.values[cell * self.source.n_markers() + marker]
    }

    pub fn cofactor(&self) -> f64 {
        self.cofactor
    }

    pub fn source(&self) -> &CellTable {
        &self.source
    }
}
