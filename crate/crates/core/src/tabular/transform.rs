use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Standardize,
    Quantile,
}

/// Transforms every int/float feature column. Statistics come from the rows
/// whose id is in `fit_rows`; the fitted map is applied to all rows and the
/// transformed columns become float.
///
/// * standardize: `(x - mean) / std` with population std, std of zero
///   replaced by one.
/// * quantile: `r / (n + 1)` where `r` is the mid-rank of `x` among the `n`
///   fitted values (values absent from the fit set get `below + 1/2`).
pub fn apply_transform(ds: &Dataset, kind: TransformKind, fit_rows: &[u64]) -> Result<Dataset> {
    let wanted: HashSet<u64> = fit_rows.iter().copied().collect();
    let fit_pos: Vec<usize> = (0..ds.n_rows()).filter(|&i| wanted.contains(&ds.row_ids()[i])).collect();
    if fit_pos.is_empty() {
        return Err(Error::invalid("transform needs at least one fit row present in the dataset"));
    }
    let numeric: Vec<usize> = ds
        .schema()
        .features()
        .enumerate()
        .filter(|(_, c)| c.kind.is_numeric())
        .map(|(j, _)| j)
        .collect();

    let mut out = ds.clone();
    for j in numeric {
        let col = ds.column(j);
        let fitted: Vec<f64> = fit_pos.iter().map(|&i| col[i]).collect();
        out = match kind {
            TransformKind::Standardize => {
                let n = fitted.len() as f64;
                let mean = fitted.iter().sum::<f64>() / n;
                let var = fitted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                out.map_column(j, FeatureKind::Float, |x| (x - mean) / std)?
            }
            TransformKind::Quantile => {
                let mut sorted = fitted;
                sorted.sort_by(f64::total_cmp);
                let denom = sorted.len() as f64 + 1.0;
                out.map_column(j, FeatureKind::Float, |x| {
                    let below = sorted.partition_point(|&v| v < x);
                    let equal = sorted.partition_point(|&v| v <= x) - below;
                    let rank = below as f64 + (equal as f64 + 1.0) / 2.0;
                    rank / denom
                })?
            }
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{Column, Schema};
    use proptest::prelude::*;

    fn one_column(values: &[f64], kind: FeatureKind) -> Dataset {
        let schema = Schema::new(vec![Column::new("x", kind), Column::new("y", FeatureKind::Int)], "y").unwrap();
        let n = values.len();
        Dataset::new(schema, values.to_vec(), vec![0; n], (0..n as u64).collect()).unwrap()
    }

    #[test]
    fn standardize_one_two_three() {
        let ds = one_column(&[1.0, 2.0, 3.0], FeatureKind::Int);
        let out = apply_transform(&ds, TransformKind::Standardize, &[0, 1, 2]).unwrap();
        // mean 2, population std sqrt(2/3)
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in out.column(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out.schema().feature(0).kind, FeatureKind::Float);
    }

    #[test]
    fn standardize_constant_column_is_zero() {
        let ds = one_column(&[4.0, 4.0, 4.0], FeatureKind::Float);
        let out = apply_transform(&ds, TransformKind::Standardize, &[0, 1, 2]).unwrap();
        assert_eq!(out.column(0), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quantile_mid_rank() {
        let ds = one_column(&[10.0, 20.0, 30.0], FeatureKind::Float);
        let out = apply_transform(&ds, TransformKind::Quantile, &[0, 1, 2]).unwrap();
        assert_eq!(out.column(0), vec![0.25, 0.5, 0.75]);

        let tied = one_column(&[5.0, 5.0, 7.0], FeatureKind::Float);
        let out = apply_transform(&tied, TransformKind::Quantile, &[0, 1, 2]).unwrap();
        assert_eq!(out.column(0), vec![1.5 / 4.0, 1.5 / 4.0, 0.75]);
    }

    #[test]
    fn fit_rows_only_drive_statistics() {
        let ds = one_column(&[0.0, 2.0, 100.0], FeatureKind::Float);
        let out = apply_transform(&ds, TransformKind::Standardize, &[0, 1]).unwrap();
        assert_eq!(out.column(0), vec![-1.0, 1.0, 99.0]);
        let q = apply_transform(&ds, TransformKind::Quantile, &[0, 1]).unwrap();
        assert_eq!(q.column(0)[2], 2.5 / 3.0);
    }

    #[test]
    fn empty_fit_rows_is_an_error() {
        let ds = one_column(&[1.0, 2.0], FeatureKind::Float);
        assert!(apply_transform(&ds, TransformKind::Quantile, &[]).is_err());
        assert!(apply_transform(&ds, TransformKind::Quantile, &[99]).is_err());
    }

    #[test]
    fn bool_and_categorical_columns_untouched() {
        let ds = one_column(&[1.0, 0.0, 1.0], FeatureKind::Bool);
        let out = apply_transform(&ds, TransformKind::Standardize, &[0, 1, 2]).unwrap();
        assert_eq!(out, ds);
    }

    proptest! {
        #[test]
        fn standardize_preserves_order(values in prop::collection::vec(-1e6f64..1e6, 2..60)) {
            let ds = one_column(&values, FeatureKind::Float);
            let ids: Vec<u64> = (0..values.len() as u64).collect();
            let out = apply_transform(&ds, TransformKind::Standardize, &ids).unwrap().column(0);
            for i in 0..values.len() {
                for k in 0..values.len() {
                    if values[i] < values[k] {
                        prop_assert!(out[i] <= out[k]);
                        if values[k] - values[i] > 1e-6 {
                            prop_assert!(out[i] < out[k]);
                        }
                    }
                }
            }
        }

        #[test]
        fn quantile_lands_in_open_unit_interval(values in prop::collection::vec(-1e3f64..1e3, 1..60)) {
            let ds = one_column(&values, FeatureKind::Float);
            let out = apply_transform(&ds, TransformKind::Quantile, &[0]).unwrap().column(0);
            prop_assert!(out.iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }
}
