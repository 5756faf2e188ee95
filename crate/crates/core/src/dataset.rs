//! Tabular ingestion and cleaning: sparse-column removal, imputation,
//! negative-value shifting and categorical ranking.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: u64, msg: String },
    #[error("label column `{0}` not present in header")]
    MissingLabelColumn(String),
    #[error("label value `{0}` cannot be mapped to 0/1")]
    UnmappableLabel(String),
    #[error("every column was dropped as too sparse")]
    AllColumnsDropped,
    #[error("column `{0}` has no observed values")]
    AllMissingColumn(String),
    #[error("column `{0}` still has missing cells")]
    ResidualMissing(String),
    #[error("column `{0}` is still categorical")]
    ResidualCategorical(String),
    #[error("invalid sparsity threshold {0}")]
    InvalidThreshold(f64),
    #[error("column length mismatch in `{0}`")]
    LengthMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_count(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.iter().filter(|c| c.is_none()).count(),
            ColumnValues::Categorical(v) => v.iter().filter(|c| c.is_none()).count(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, ColumnValues::Categorical(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
}

/// Raw table as read from disk: typed columns with missing cells, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub labels: Vec<u8>,
}

impl RawTable {
    pub fn new(columns: Vec<Column>, labels: Vec<u8>) -> Result<Self> {
        for c in &columns {
            if c.values.len() != labels.len() {
                return Err(DatasetError::LengthMismatch(c.name.clone()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(DatasetError::UnmappableLabel(bad.to_string()));
        }
        Ok(Self { columns, labels })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }
}

/// Preprocessed data: dense nonnegative features with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub x: Matrix,
    pub labels: Vec<u8>,
    pub feature_names: Vec<String>,
}

impl FeatureMatrix {
    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (self.labels.len() - pos, pos)
    }

    /// Writes a header of feature names plus `label`, then one row per sample.
    /// Floats use Rust's shortest round-trip formatting, so reading back is exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = self.feature_names.join(",");
        if !header.is_empty() {
            header.push(',');
        }
        header.push_str("label");
        writeln!(w, "{header}")?;
        for (row, &label) in self.x.iter_rows().zip(&self.labels) {
            let mut line = String::new();
            for v in row {
                line.push_str(&format!("{v},"));
            }
            line.push_str(&label.to_string());
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))?;
        Ok(())
    }

    /// Reads a file written by [`FeatureMatrix::write_csv`] (or any all-numeric
    /// CSV whose last column is `label`).
    pub fn load_csv(path: &Path) -> Result<Self> {
        let opts = CsvOptions::default();
        let table = load_csv(path, "label", &opts)?;
        finalize(&table)
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub positive_token: String,
    pub negative_tokens: Vec<String>,
    /// Cell contents treated as missing in addition to the empty cell.
    pub missing_markers: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            positive_token: "1".into(),
            negative_tokens: vec!["0".into(), "-1".into()],
            missing_markers: Vec::new(),
        }
    }
}

pub fn load_csv(path: &Path, label_column: &str, opts: &CsvOptions) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DatasetError::FileNotFound(path.display().to_string()),
        _ => DatasetError::Io(e),
    })?;
    read_csv(file, label_column, opts)
}

pub fn read_csv<R: Read>(reader: R, label_column: &str, opts: &CsvOptions) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |e: csv::Error| DatasetError::ParseError {
        line: e.position().map_or(0, |p| p.line()),
        msg: e.to_string(),
    };
    let header: Vec<String> = rdr
        .headers()
        .map_err(parse_err)?
        .iter()
        .map(str::to_owned)
        .collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DatasetError::MissingLabelColumn(label_column.to_owned()))?;

    let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); header.len()];
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(parse_err)?;
        for (j, field) in rec.iter().enumerate() {
            if j == label_idx {
                labels.push(map_label(field, opts)?);
            } else if field.is_empty() || opts.missing_markers.iter().any(|m| m == field) {
                cells[j].push(None);
            } else {
                cells[j].push(Some(field.to_owned()));
            }
        }
    }

    let mut columns = Vec::with_capacity(header.len() - 1);
    for (j, (name, col)) in header.into_iter().zip(cells).enumerate() {
        if j == label_idx {
            continue;
        }
        let numeric: Option<Vec<Option<f64>>> = col
            .iter()
            .map(|c| match c {
                None => Some(None),
                Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
            })
            .collect();
        let values = match numeric {
            Some(v) => ColumnValues::Numeric(v),
            None => ColumnValues::Categorical(col),
        };
        columns.push(Column { name, values });
    }
    RawTable::new(columns, labels)
}

fn map_label(field: &str, opts: &CsvOptions) -> Result<u8> {
    if field == opts.positive_token {
        Ok(1)
    } else if opts.negative_tokens.iter().any(|t| t == field) {
        Ok(0)
    } else {
        Err(DatasetError::UnmappableLabel(field.to_owned()))
    }
}

/// Removes columns whose missing fraction is strictly greater than `threshold`.
pub fn drop_sparse_features(t: &RawTable, threshold: f64) -> Result<RawTable> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(DatasetError::InvalidThreshold(threshold));
    }
    let n = t.n_rows().max(1) as f64;
    let columns: Vec<Column> = t
        .columns
        .iter()
        .filter(|c| (c.values.missing_count() as f64 / n) <= threshold)
        .cloned()
        .collect();
    if columns.is_empty() {
        return Err(DatasetError::AllColumnsDropped);
    }
    Ok(RawTable {
        columns,
        labels: t.labels.clone(),
    })
}

/// Numeric gaps get the observed mean; categorical gaps get the mode, with
/// ties going to the lexicographically first category.
pub fn impute_mean(t: &RawTable) -> Result<RawTable> {
    let mut columns = Vec::with_capacity(t.columns.len());
    for c in &t.columns {
        let values = match &c.values {
            ColumnValues::Numeric(v) => {
                let observed: Vec<f64> = v.iter().flatten().copied().collect();
                if observed.is_empty() {
                    return Err(DatasetError::AllMissingColumn(c.name.clone()));
                }
                let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                ColumnValues::Numeric(v.iter().map(|x| Some(x.unwrap_or(mean))).collect())
            }
            ColumnValues::Categorical(v) => {
                let counts = category_counts(v);
                let mode = counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(k, _)| (*k).to_owned())
                    .ok_or_else(|| DatasetError::AllMissingColumn(c.name.clone()))?;
                ColumnValues::Categorical(
                    v.iter()
                        .map(|x| Some(x.clone().unwrap_or_else(|| mode.clone())))
                        .collect(),
                )
            }
        };
        columns.push(Column {
            name: c.name.clone(),
            values,
        });
    }
    Ok(RawTable {
        columns,
        labels: t.labels.clone(),
    })
}

fn category_counts(v: &[Option<String>]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for s in v.iter().flatten() {
        *counts.entry(s.as_str()).or_insert(0) += 1;
    }
    counts
}

/// Moves negative entries onto the positive scale: with `m = min(v)`, each
/// `x < 0` becomes `x + m * (-1)`. Nonnegative entries are left alone.
pub fn shift_negatives(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::INFINITY, f64::min);
    v.iter()
        .map(|&x| if x < 0.0 { x + m * -1.0 } else { x })
        .collect()
}

/// Applies [`shift_negatives`] to every numeric column. Missing cells stay missing.
pub fn shift_table(t: &RawTable) -> RawTable {
    let columns = t
        .columns
        .iter()
        .map(|c| match &c.values {
            ColumnValues::Numeric(v) if v.iter().all(Option::is_some) => {
                let dense: Vec<f64> = v.iter().flatten().copied().collect();
                Column {
                    name: c.name.clone(),
                    values: ColumnValues::Numeric(shift_negatives(&dense).into_iter().map(Some).collect()),
                }
            }
            ColumnValues::Numeric(v) => {
                let dense: Vec<f64> = v.iter().flatten().copied().collect();
                let m = dense.iter().copied().fold(f64::INFINITY, f64::min);
                Column {
                    name: c.name.clone(),
                    values: ColumnValues::Numeric(
                        v.iter()
                            .map(|x| x.map(|x| if x < 0.0 { x + m * -1.0 } else { x }))
                            .collect(),
                    ),
                }
            }
            ColumnValues::Categorical(_) => c.clone(),
        })
        .collect();
    RawTable {
        columns,
        labels: t.labels.clone(),
    }
}

/// Category to rank (3 = large, 2 = medium, 1 = small).
///
/// Categories are ordered by descending frequency (ties lexicographic). Walking
/// that order, the current rank drops by one after each category whose
/// cumulative instance count reaches the next tercile boundary of the column.
pub fn category_ranks(v: &[Option<String>]) -> BTreeMap<String, u8> {
    let counts = category_counts(v);
    let total: usize = counts.values().sum();
    let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut ranks = BTreeMap::new();
    let mut rank = 3u8;
    let mut cumulative = 0usize;
    for (cat, count) in ordered {
        ranks.insert(cat.to_owned(), rank);
        cumulative += count;
        let boundary = (4 - rank as usize) * total;
        if rank > 1 && cumulative * 3 >= boundary {
            rank -= 1;
        }
    }
    ranks
}

pub fn rank_categoricals(t: &RawTable) -> RawTable {
    let columns = t
        .columns
        .iter()
        .map(|c| match &c.values {
            ColumnValues::Categorical(v) => {
                let ranks = category_ranks(v);
                Column {
                    name: c.name.clone(),
                    values: ColumnValues::Numeric(
                        v.iter()
                            .map(|s| s.as_ref().map(|s| f64::from(ranks[s.as_str()])))
                            .collect(),
                    ),
                }
            }
            ColumnValues::Numeric(_) => c.clone(),
        })
        .collect();
    RawTable {
        columns,
        labels: t.labels.clone(),
    }
}

pub fn finalize(t: &RawTable) -> Result<FeatureMatrix> {
    let n = t.n_rows();
    let cols = t.columns.len();
    let mut x = Matrix::zeros(n, cols);
    for (j, c) in t.columns.iter().enumerate() {
        match &c.values {
            ColumnValues::Categorical(_) => {
                return Err(DatasetError::ResidualCategorical(c.name.clone()))
            }
            ColumnValues::Numeric(v) => {
                for (i, cell) in v.iter().enumerate() {
                    x[(i, j)] = cell.ok_or_else(|| DatasetError::ResidualMissing(c.name.clone()))?;
                }
            }
        }
    }
    Ok(FeatureMatrix {
        x,
        labels: t.labels.clone(),
        feature_names: t.columns.iter().map(|c| c.name.clone()).collect(),
    })
}

/// Full cleaning pipeline: drop sparse, impute, shift negatives, rank
/// categoricals, finalize.
pub fn preprocess(t: &RawTable, sparse_threshold: f64) -> Result<FeatureMatrix> {
    let dropped = drop_sparse_features(t, sparse_threshold)?;
    let imputed = impute_mean(&dropped)?;
    let shifted = shift_table(&imputed);
    let ranked = rank_categoricals(&shifted);
    finalize(&ranked)
}
