//! Tabular datasets: schema, CSV ingestion, feature transforms and
//! deterministic splitting/sampling.
//!
//! Feature values are stored row-major as `f64` regardless of column kind:
//! booleans map to `0.0`/`1.0`, integers are stored exactly (up to 2^53),
//! categorical cells hold the dense code of their interned string.

mod csv_io;
mod transform;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use csv_io::{ingest_csv, read_csv, write_csv, write_csv_to};
pub use transform::{apply_transform, TransformKind};

const SCHEMA_FORMAT: &str = "tabdistill.schema";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Bool,
    Int,
    Float,
    Categorical,
}

impl FeatureKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, FeatureKind::Int | FeatureKind::Float)
    }

    fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Bool => "bool",
            FeatureKind::Int => "int",
            FeatureKind::Float => "float",
            FeatureKind::Categorical => "categorical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: FeatureKind,
    /// Interned values of a categorical column, indexed by code.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        Column {
            name: name.into(),
            kind,
            categories: Vec::new(),
        }
    }
}

/// Ordered column list (label included) plus the name of the label column.
///
/// Column order is the feature index order used by every learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<Column>,
    label_column: String,
}

#[derive(Serialize, Deserialize)]
struct SchemaDocument {
    format: String,
    version: u32,
    schema: Schema,
}

impl Schema {
    pub fn new(columns: Vec<Column>, label_column: impl Into<String>) -> Result<Self> {
        let schema = Schema {
            columns,
            label_column: label_column.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name `{}`", c.name)));
            }
            if c.kind != FeatureKind::Categorical && !c.categories.is_empty() {
                return Err(Error::Schema(format!(
                    "non-categorical column `{}` carries categories",
                    c.name
                )));
            }
        }
        let label = self
            .columns
            .iter()
            .find(|c| c.name == self.label_column)
            .ok_or_else(|| Error::MissingColumn(self.label_column.clone()))?;
        if !matches!(label.kind, FeatureKind::Bool | FeatureKind::Int) {
            return Err(Error::Schema(format!(
                "label column `{}` must be bool or int, found {}",
                label.name,
                label.kind.as_str()
            )));
        }
        Ok(())
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn label_column(&self) -> &str {
        &self.label_column
    }

    pub fn label_position(&self) -> usize {
        self.columns
            .iter()
            .position(|c| c.name == self.label_column)
            .expect("validated schema contains its label column")
    }

    pub fn label_kind(&self) -> FeatureKind {
        self.columns[self.label_position()].kind
    }

    /// Feature columns in feature-index order (label excluded).
    pub fn features(&self) -> impl Iterator<Item = &Column> {
        self.columns.iter().filter(move |c| c.name != self.label_column)
    }

    pub fn feature(&self, j: usize) -> &Column {
        self.features().nth(j).expect("feature index in range")
    }

    pub fn n_features(&self) -> usize {
        self.columns.len() - 1
    }

    /// Hex digest of feature names and kinds in order. Two schemas with the
    /// same fingerprint are interchangeable for prediction.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in self.features() {
            h.update(c.name.as_bytes());
            h.update([0u8]);
            h.update(c.kind.as_str().as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SchemaDocument {
            format: SCHEMA_FORMAT.to_string(),
            version: SCHEMA_VERSION,
            schema: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SchemaDocument = serde_json::from_str(text)?;
        if doc.format != SCHEMA_FORMAT {
            return Err(Error::Corrupted(format!("unexpected format tag `{}`", doc.format)));
        }
        if doc.version != SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: doc.version,
                expected: SCHEMA_VERSION,
            });
        }
        doc.schema.validate()?;
        Ok(doc.schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// An immutable labelled table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    features: Vec<f64>,
    labels: Vec<u8>,
    row_ids: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset from row-major feature values. Every value must
    /// conform to its column kind.
    pub fn new(schema: Schema, features: Vec<f64>, labels: Vec<u8>, row_ids: Vec<u64>) -> Result<Self> {
        let n = labels.len();
        let d = schema.n_features();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        if features.len() != n * d {
            return Err(Error::LengthMismatch {
                expected: n * d,
                found: features.len(),
            });
        }
        if row_ids.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: row_ids.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {bad} is not in {{0,1}}")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = row_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::invalid(format!("duplicate row id {dup}")));
        }
        let cols: Vec<&Column> = schema.features().collect();
        for (i, row) in features.chunks(d.max(1)).enumerate().filter(|_| d > 0) {
            for (j, (&v, col)) in row.iter().zip(&cols).enumerate() {
                let ok = match col.kind {
                    FeatureKind::Bool => v == 0.0 || v == 1.0,
                    FeatureKind::Int => v.is_finite() && v.fract() == 0.0,
                    FeatureKind::Float => v.is_finite(),
                    FeatureKind::Categorical => {
                        v >= 0.0 && v.fract() == 0.0 && (v as usize) < col.categories.len()
                    }
                };
                if !ok {
                    return Err(Error::Schema(format!(
                        "row {i}, feature {j} (`{}`): value {v} does not conform to kind {}",
                        col.name,
                        col.kind.as_str()
                    )));
                }
            }
        }
        Ok(Dataset {
            schema,
            features,
            labels,
            row_ids,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.n_features()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n_rows()).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let d = self.n_features();
        (0..self.n_rows()).map(|i| self.features[i * d + j]).collect()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row_ids(&self) -> &[u64] {
        &self.row_ids
    }

    pub fn count_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Rows at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> Result<Dataset> {
        let d = self.n_features();
        let mut features = Vec::with_capacity(positions.len() * d);
        let mut labels = Vec::with_capacity(positions.len());
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            if p >= self.n_rows() {
                return Err(Error::invalid(format!("row position {p} out of range")));
            }
            features.extend_from_slice(self.row(p));
            labels.push(self.labels[p]);
            ids.push(self.row_ids[p]);
        }
        Dataset::new(self.schema.clone(), features, labels, ids)
    }

    /// Rows for which `keep` returns true, order preserved.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> Result<Dataset> {
        let positions: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(i)).collect();
        self.select(&positions)
    }

    /// Stacks `other` below `self`. Schemas must agree and row ids must stay
    /// unique.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot concatenate datasets with different schemas".into()));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut ids = self.row_ids.clone();
        ids.extend_from_slice(&other.row_ids);
        Dataset::new(self.schema.clone(), features, labels, ids)
    }

    /// Same rows with every row id shifted by `offset`.
    pub fn with_row_id_offset(&self, offset: u64) -> Dataset {
        let mut out = self.clone();
        for id in &mut out.row_ids {
            *id += offset;
        }
        out
    }

    /// Appends a feature column at the end of the feature order (after the
    /// label, if the label is last).
    pub fn with_column(&self, column: Column, values: &[f64]) -> Result<Dataset> {
        if values.len() != self.n_rows() {
            return Err(Error::LengthMismatch {
                expected: self.n_rows(),
                found: values.len(),
            });
        }
        let mut columns = self.schema.columns.clone();
        columns.push(column);
        let schema = Schema::new(columns, self.schema.label_column.clone())?;
        let d = self.n_features();
        let mut features = Vec::with_capacity(self.n_rows() * (d + 1));
        for (i, v) in values.iter().enumerate() {
            features.extend_from_slice(self.row(i));
            features.push(*v);
        }
        Dataset::new(schema, features, self.labels.clone(), self.row_ids.clone())
    }

    /// Applies `f` to every value of feature `j`; the column kind may change.
    pub(crate) fn map_column(&self, j: usize, kind: FeatureKind, f: impl Fn(f64) -> f64) -> Result<Dataset> {
        let d = self.n_features();
        let mut features = self.features.clone();
        for i in 0..self.n_rows() {
            features[i * d + j] = f(features[i * d + j]);
        }
        let mut columns = self.schema.columns.clone();
        let label_pos = self.schema.label_position();
        let pos = if j >= label_pos { j + 1 } else { j };
        columns[pos].kind = kind;
        if kind != FeatureKind::Categorical {
            columns[pos].categories.clear();
        }
        let schema = Schema::new(columns, self.schema.label_column.clone())?;
        Dataset::new(schema, features, self.labels.clone(), self.row_ids.clone())
    }

    /// Removes the named feature columns, keeping the order of the rest.
    pub fn drop_columns(&self, names: &[String]) -> Result<Dataset> {
        if names.is_empty() {
            return Ok(self.clone());
        }
        if let Some(missing) = names.iter().find(|n| !self.schema.features().any(|c| &c.name == *n)) {
            return Err(Error::MissingColumn(missing.clone()));
        }
        if names.iter().any(|n| n == &self.schema.label_column) {
            return Err(Error::Schema("the label column cannot be dropped".into()));
        }
        let keep: Vec<bool> = self.schema.features().map(|c| !names.contains(&c.name)).collect();
        let columns: Vec<Column> = self.schema.columns.iter().filter(|c| !names.contains(&c.name)).cloned().collect();
        let schema = Schema::new(columns, self.schema.label_column.clone())?;
        let mut features = Vec::with_capacity(self.n_rows() * keep.iter().filter(|k| **k).count());
        for row in self.rows() {
            features.extend(row.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| *v));
        }
        Dataset::new(schema, features, self.labels.clone(), self.row_ids.clone())
    }

    /// Replaces the schema by one with identical feature layout (used when
    /// re-binding data to a model's training schema).
    pub fn with_schema(&self, schema: Schema) -> Result<Dataset> {
        if schema.fingerprint() != self.schema.fingerprint() {
            return Err(Error::Schema("feature layout differs".into()));
        }
        Dataset::new(schema, self.features.clone(), self.labels.clone(), self.row_ids.clone())
    }
}

/// Drops every feature column with fewer than two distinct values.
pub fn remove_constant_columns(ds: &Dataset) -> Result<(Dataset, Vec<String>)> {
    let removed: Vec<String> = ds
        .schema()
        .features()
        .enumerate()
        .filter(|(j, _)| {
            let first = ds.row(0)[*j];
            ds.rows().all(|r| r[*j] == first)
        })
        .map(|(_, col)| col.name.clone())
        .collect();
    Ok((ds.drop_columns(&removed)?, removed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.train_fraction) || !in_unit(self.valid_fraction) {
            return Err(Error::invalid("split fractions must lie in (0,1)"));
        }
        if self.train_fraction + self.valid_fraction >= 1.0 {
            return Err(Error::invalid("train_fraction + valid_fraction must be < 1"));
        }
        Ok(())
    }
}

/// Seeded shuffle into train/valid/test. Each part keeps the original row
/// order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.n_rows();
    if n < 3 {
        return Err(Error::invalid(format!("need at least 3 rows to split, have {n}")));
    }
    let n_train = (n as f64 * spec.train_fraction).round() as usize;
    let n_valid = (n as f64 * spec.valid_fraction).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::invalid(format!(
            "fractions {}/{} leave an empty partition for {n} rows",
            spec.train_fraction, spec.valid_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let perm = index::sample(&mut rng, n, n).into_vec();
    let part = |range: &[usize]| {
        let mut p = range.to_vec();
        p.sort_unstable();
        ds.select(&p)
    };
    Ok((
        part(&perm[..n_train])?,
        part(&perm[n_train..n_train + n_valid])?,
        part(&perm[n_train + n_valid..])?,
    ))
}

/// Uniform sample of `n` rows without replacement, original order kept.
pub fn sample_rows(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.n_rows() {
        return Err(Error::invalid(format!(
            "sample size {n} outside 1..={}",
            ds.n_rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, ds.n_rows(), n).into_vec();
    picked.sort_unstable();
    ds.select(&picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn float_schema(d: usize) -> Schema {
        let mut cols: Vec<Column> = (0..d).map(|j| Column::new(format!("f{j}"), FeatureKind::Float)).collect();
        cols.push(Column::new("label", FeatureKind::Int));
        Schema::new(cols, "label").unwrap()
    }

    fn ds_from(cols: &[Vec<f64>], labels: &[u8]) -> Dataset {
        let n = labels.len();
        let mut feats = Vec::new();
        for i in 0..n {
            for c in cols {
                feats.push(c[i]);
            }
        }
        Dataset::new(float_schema(cols.len()), feats, labels.to_vec(), (0..n as u64).collect()).unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_bad_label() {
        let cols = vec![Column::new("a", FeatureKind::Float), Column::new("a", FeatureKind::Int)];
        assert!(Schema::new(cols, "a").is_err());
        let cols = vec![Column::new("a", FeatureKind::Float), Column::new("y", FeatureKind::Float)];
        assert!(matches!(Schema::new(cols, "y"), Err(Error::Schema(_))));
        let cols = vec![Column::new("a", FeatureKind::Float)];
        assert!(matches!(Schema::new(cols, "y"), Err(Error::MissingColumn(_))));
    }

    #[test]
    fn schema_json_round_trip_and_version_check() {
        let s = float_schema(2);
        assert_eq!(Schema::from_json(&s.to_json().unwrap()).unwrap(), s);
        let bumped = s.to_json().unwrap().replace("\"version\": 1", "\"version\": 9");
        assert!(matches!(Schema::from_json(&bumped), Err(Error::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn remove_single_constant_column() {
        let ds = ds_from(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]], &[0, 1, 0]);
        let (out, removed) = remove_constant_columns(&ds).unwrap();
        assert_eq!(removed, vec!["f1".to_string()]);
        assert_eq!(out.n_features(), 1);
        assert_eq!(out.column(0), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn remove_constant_columns_identity_when_none() {
        let ds = ds_from(&[vec![1.0, 2.0, 3.0]], &[0, 1, 0]);
        let (out, removed) = remove_constant_columns(&ds).unwrap();
        assert!(removed.is_empty());
        assert_eq!(out, ds);
    }

    #[test]
    fn remove_five_appended_all_one_columns() {
        let mut ds = ds_from(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.1, 0.3, 0.3]], &[0, 1, 0, 1]);
        for k in 0..5 {
            ds = ds.with_column(Column::new(format!("one{k}"), FeatureKind::Float), &[1.0; 4]).unwrap();
        }
        let (out, removed) = remove_constant_columns(&ds).unwrap();
        assert_eq!(removed, (0..5).map(|k| format!("one{k}")).collect::<Vec<_>>());
        assert_eq!(out.n_features(), 2);
        let (again, removed_again) = remove_constant_columns(&out).unwrap();
        assert!(removed_again.is_empty());
        assert_eq!(again, out);
    }

    #[test]
    fn all_constant_gives_zero_feature_dataset() {
        let ds = ds_from(&[vec![2.0, 2.0], vec![3.0, 3.0]], &[0, 1]);
        let (out, removed) = remove_constant_columns(&ds).unwrap();
        assert_eq!(removed.len(), 2);
        assert_eq!(out.n_features(), 0);
        assert_eq!(out.n_rows(), 2);
        assert_eq!(out.schema().label_column(), "label");
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = ds_from(&[(0..10).map(f64::from).collect()], &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let spec = SplitSpec {
            train_fraction: 0.6,
            valid_fraction: 0.2,
            seed: 7,
        };
        let (tr, va, te) = split(&ds, &spec).unwrap();
        assert_eq!((tr.n_rows(), va.n_rows(), te.n_rows()), (6, 2, 2));
        let mut all: Vec<u64> = tr.row_ids().iter().chain(va.row_ids()).chain(te.row_ids()).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (tr2, va2, te2) = split(&ds, &spec).unwrap();
        assert_eq!((tr, va, te), (tr2, va2, te2));
    }

    #[test]
    fn split_rejects_empty_partition() {
        let ds = ds_from(&[vec![1.0, 2.0, 3.0]], &[0, 1, 0]);
        let spec = SplitSpec {
            train_fraction: 0.9,
            valid_fraction: 0.05,
            seed: 0,
        };
        assert!(split(&ds, &spec).is_err());
        let bad = SplitSpec {
            train_fraction: 0.7,
            valid_fraction: 0.3,
            seed: 0,
        };
        assert!(split(&ds, &bad).is_err());
    }

    #[test]
    fn sample_rows_edges() {
        let ds = ds_from(&[(0..20).map(f64::from).collect()], &[0; 20]);
        let all = sample_rows(&ds, 20, 3).unwrap();
        assert_eq!(all.row_ids(), ds.row_ids());
        let one = sample_rows(&ds, 1, 3).unwrap();
        assert_eq!(one.n_rows(), 1);
        assert!(ds.row_ids().contains(&one.row_ids()[0]));
        assert_eq!(sample_rows(&ds, 5, 11).unwrap(), sample_rows(&ds, 5, 11).unwrap());
        assert!(sample_rows(&ds, 0, 1).is_err());
        assert!(sample_rows(&ds, 21, 1).is_err());
    }

    #[test]
    fn concat_rejects_duplicate_ids() {
        let ds = ds_from(&[vec![1.0, 2.0]], &[0, 1]);
        assert!(ds.concat(&ds).is_err());
        let shifted = ds.with_row_id_offset(10);
        let both = ds.concat(&shifted).unwrap();
        assert_eq!(both.row_ids(), &[0, 1, 10, 11]);
    }

    #[test]
    fn dataset_rejects_nonconforming_values() {
        let cols = vec![Column::new("b", FeatureKind::Bool), Column::new("y", FeatureKind::Bool)];
        let schema = Schema::new(cols, "y").unwrap();
        assert!(Dataset::new(schema.clone(), vec![0.5], vec![1], vec![0]).is_err());
        assert!(Dataset::new(schema, vec![1.0], vec![1], vec![0]).is_ok());
    }
}
