use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Column, Dataset, FeatureKind, Schema};
use crate::error::{Error, Result};

fn parse_bool(s: &str) -> Option<bool> {
    if s.eq_ignore_ascii_case("true") {
        Some(true)
    } else if s.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn parse_label(s: &str) -> Option<u8> {
    if let Some(b) = parse_bool(s) {
        return Some(b as u8);
    }
    match s.parse::<f64>() {
        Ok(v) if v == 0.0 => Some(0),
        Ok(v) if v == 1.0 => Some(1),
        _ => None,
    }
}

fn infer_kind(cells: &[&str]) -> FeatureKind {
    let present: Vec<&str> = cells.iter().copied().filter(|c| !c.is_empty()).collect();
    if present.is_empty() {
        return FeatureKind::Categorical;
    }
    if present.iter().all(|c| parse_bool(c).is_some()) {
        FeatureKind::Bool
    } else if present.iter().all(|c| c.parse::<i64>().is_ok()) {
        FeatureKind::Int
    } else if present.iter().all(|c| c.parse::<f64>().is_ok()) {
        FeatureKind::Float
    } else {
        FeatureKind::Categorical
    }
}

/// Reads a CSV file. Without a schema hint, column kinds are inferred:
/// all `true`/`false` is bool, all integers is int, any other numeric column
/// is float and everything else is categorical.
pub fn ingest_csv(path: &Path, label_column: &str, schema_hint: Option<&Schema>) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, schema_hint).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.display().to_string()),
        other => other,
    })
}

pub fn read_csv<R: Read>(reader: R, label_column: &str, schema_hint: Option<&Schema>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::EmptyFile("input".into()));
    }
    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::EmptyFile("input".into()));
    }
    let label_pos = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingColumn(label_column.to_string()))?;

    if let Some(hint) = schema_hint {
        let names: Vec<&str> = hint.columns().iter().map(|c| c.name.as_str()).collect();
        if names != header.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Schema(format!(
                "header {header:?} does not match schema columns {names:?}"
            )));
        }
        if hint.label_column() != label_column {
            return Err(Error::Schema(format!(
                "schema label is `{}`, requested `{label_column}`",
                hint.label_column()
            )));
        }
    }

    let n = records.len();
    let mut columns = Vec::with_capacity(header.len());
    for (j, name) in header.iter().enumerate() {
        let cells: Vec<&str> = records.iter().map(|r| r.get(j).unwrap_or("")).collect();
        let col = match schema_hint {
            Some(h) => h.columns()[j].clone(),
            None if j == label_pos => {
                let kind = if cells.iter().all(|c| parse_bool(c).is_some()) {
                    FeatureKind::Bool
                } else {
                    FeatureKind::Int
                };
                Column::new(name.clone(), kind)
            }
            None => Column::new(name.clone(), infer_kind(&cells)),
        };
        columns.push(col);
    }

    let d = header.len() - 1;
    let mut features = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in records.iter().enumerate() {
        let cell = rec.get(label_pos).unwrap_or("");
        let y = parse_label(cell).ok_or_else(|| Error::UnparseableCell {
            row: i + 1,
            column: label_column.to_string(),
            value: cell.to_string(),
            expected: "label in {0,1}",
        })?;
        labels.push(y);
    }

    let mut fj = 0;
    for (j, col) in columns.iter_mut().enumerate() {
        if j == label_pos {
            continue;
        }
        let mut codes: HashMap<String, usize> =
            col.categories.iter().enumerate().map(|(c, s)| (s.clone(), c)).collect();
        for (i, rec) in records.iter().enumerate() {
            let cell = rec.get(j).unwrap_or("");
            let bad = |expected| Error::UnparseableCell {
                row: i + 1,
                column: col.name.clone(),
                value: cell.to_string(),
                expected,
            };
            let v = match col.kind {
                FeatureKind::Bool => parse_bool(cell).ok_or_else(|| bad("bool"))? as u8 as f64,
                FeatureKind::Int => cell.parse::<i64>().map_err(|_| bad("integer"))? as f64,
                FeatureKind::Float => {
                    let v: f64 = cell.parse().map_err(|_| bad("finite float"))?;
                    if !v.is_finite() {
                        return Err(bad("finite float"));
                    }
                    v
                }
                FeatureKind::Categorical => {
                    let next = codes.len();
                    let code = *codes.entry(cell.to_string()).or_insert_with(|| {
                        col.categories.push(cell.to_string());
                        next
                    });
                    code as f64
                }
            };
            features[i * d + fj] = v;
        }
        fj += 1;
    }

    let label_kind = columns[label_pos].kind;
    if !matches!(label_kind, FeatureKind::Bool | FeatureKind::Int) {
        return Err(Error::Schema(format!("label column `{label_column}` must be bool or int")));
    }
    let schema = Schema::new(columns, label_column)?;
    Dataset::new(schema, features, labels, (0..n as u64).collect())
}

fn format_cell(v: f64, col: &Column) -> String {
    match col.kind {
        FeatureKind::Bool => if v == 1.0 { "true" } else { "false" }.to_string(),
        FeatureKind::Int => format!("{}", v as i64),
        // Debug keeps a fractional part or exponent so the column re-infers as float.
        FeatureKind::Float => format!("{v:?}"),
        FeatureKind::Categorical => col.categories[v as usize].clone(),
    }
}

pub fn write_csv_to<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let schema = ds.schema();
    w.write_record(schema.columns().iter().map(|c| c.name.as_str()))?;
    let label_pos = schema.label_position();
    let feature_cols: Vec<&Column> = schema.features().collect();
    for (i, row) in ds.rows().enumerate() {
        let mut out = Vec::with_capacity(schema.columns().len());
        let mut fj = 0;
        for j in 0..schema.columns().len() {
            if j == label_pos {
                let y = ds.labels()[i];
                out.push(match schema.label_kind() {
                    FeatureKind::Bool => if y == 1 { "true" } else { "false" }.to_string(),
                    _ => y.to_string(),
                });
            } else {
                out.push(format_cell(row[fj], feature_cols[fj]));
                fj += 1;
            }
        }
        w.write_record(&out)?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))?;
    Ok(())
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_csv_to(ds, &mut buf)?;
    crate::io::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, label: &str) -> Result<Dataset> {
        read_csv(text.as_bytes(), label, None)
    }

    #[test]
    fn three_row_float_file() {
        let ds = read("f1,label\n0.5,1\n1.5,0\n-2.25,1\n", "label").unwrap();
        assert_eq!(ds.n_rows(), 3);
        assert_eq!(ds.n_features(), 1);
        assert_eq!(ds.schema().feature(0).kind, FeatureKind::Float);
        assert_eq!(ds.labels(), &[1, 0, 1]);
        assert_eq!(ds.row_ids(), &[0, 1, 2]);
    }

    #[test]
    fn categorical_inference_interns_codes() {
        let ds = read("c,y\na,0\nb,1\na,1\n", "y").unwrap();
        let col = ds.schema().feature(0);
        assert_eq!(col.kind, FeatureKind::Categorical);
        assert_eq!(col.categories, vec!["a", "b"]);
        assert_eq!(ds.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn kind_inference_rules() {
        let ds = read("b,i,f,y\ntrue,1,1,0\nFALSE,-3,2.5,1\n", "y").unwrap();
        let kinds: Vec<_> = ds.schema().features().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![FeatureKind::Bool, FeatureKind::Int, FeatureKind::Float]);
        assert_eq!(ds.column(0), vec![1.0, 0.0]);
        assert_eq!(ds.schema().label_kind(), FeatureKind::Int);
    }

    #[test]
    fn missing_label_column_is_named() {
        let err = read("f1,f2\n1,2\n", "target").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "target"), "{err}");
        assert!(err.to_string().contains("target"));
    }

    #[test]
    fn unparseable_cells_report_row_and_column() {
        let err = read("f,y\n1.0,1\n2.0,7\n", "y").unwrap_err();
        assert!(matches!(err, Error::UnparseableCell { row: 2, ref column, .. } if column == "y"));
        let err = read("f,y\n1.0,1\n,0\n", "y").unwrap_err();
        assert!(matches!(err, Error::UnparseableCell { row: 2, ref column, .. } if column == "f"));
        let err = read("f,y\n1.0,1\nnan,0\n", "y").unwrap_err();
        assert!(matches!(err, Error::UnparseableCell { .. }));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(read("", "y"), Err(Error::EmptyFile(_))));
        assert!(matches!(read("f,y\n", "y"), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn hint_must_match_header() {
        let ds = read("a,y\n1.5,0\n2.5,1\n", "y").unwrap();
        let err = read_csv("b,y\n1.5,0\n".as_bytes(), "y", Some(ds.schema())).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn hint_keeps_category_codes() {
        let train = read("c,y\nx,0\ny,1\n", "y").unwrap();
        let other = read_csv("c,y\ny,0\nz,1\n".as_bytes(), "y", Some(train.schema())).unwrap();
        assert_eq!(other.column(0), vec![1.0, 2.0]);
        assert_eq!(other.schema().feature(0).categories, vec!["x", "y", "z"]);
    }

    #[test]
    fn write_then_read_is_identity() {
        let text = "f,i,b,c,y\n1.0,3,true,red,1\n0.1,-2,false,blue,0\n1e-7,0,true,red,1\n";
        let ds = read(text, "y").unwrap();
        let mut buf = Vec::new();
        write_csv_to(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "y", None).unwrap();
        assert_eq!(back, ds);
    }
}
