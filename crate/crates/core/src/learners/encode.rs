use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, FeatureKind};

/// Categorical columns keep their most frequent codes as one-hot slots; the
/// rest share an "other" slot.
pub const MAX_ONE_HOT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Slot {
    Numeric { feature: usize },
    OneHot { feature: usize, codes: Vec<u32>, other: bool },
}

/// Maps schema rows onto a dense numeric matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    slots: Vec<Slot>,
    width: usize,
}

impl FeatureEncoder {
    pub fn fit(ds: &Dataset) -> Self {
        let mut slots = Vec::new();
        let mut width = 0;
        for (j, col) in ds.schema().features().enumerate() {
            if col.kind != FeatureKind::Categorical {
                slots.push(Slot::Numeric { feature: j });
                width += 1;
                continue;
            }
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for row in ds.rows() {
                *counts.entry(row[j] as u32).or_default() += 1;
            }
            let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let other = ranked.len() > MAX_ONE_HOT;
            let mut codes: Vec<u32> = ranked.iter().take(MAX_ONE_HOT).map(|(c, _)| *c).collect();
            codes.sort_unstable();
            width += codes.len() + other as usize;
            slots.push(Slot::OneHot { feature: j, codes, other });
        }
        FeatureEncoder { slots, width }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn encode_row_into(&self, row: &[f64], out: &mut Vec<f64>) {
        for slot in &self.slots {
            match slot {
                Slot::Numeric { feature } => out.push(row[*feature]),
                Slot::OneHot { feature, codes, other } => {
                    let code = row[*feature] as u32;
                    let hit = codes.binary_search(&code).ok();
                    out.extend((0..codes.len()).map(|k| if Some(k) == hit { 1.0 } else { 0.0 }));
                    if *other {
                        out.push(if hit.is_none() { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    /// Row-major `n × width` matrix. Rejects non-finite values.
    pub fn encode(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ds.n_rows() * self.width);
        for (i, row) in ds.rows().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i, feature: j });
            }
            self.encode_row_into(row, &mut out);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::read_csv;

    #[test]
    fn numeric_passthrough_and_one_hot() {
        let ds = read_csv("x,c,y\n1.5,a,0\n2.5,b,1\n3.5,a,1\n".as_bytes(), "y", None).unwrap();
        let enc = FeatureEncoder::fit(&ds);
        assert_eq!(enc.width(), 3);
        assert_eq!(enc.encode(&ds).unwrap(), vec![1.5, 1.0, 0.0, 2.5, 0.0, 1.0, 3.5, 1.0, 0.0]);
    }

    #[test]
    fn cardinality_cap_collapses_rare_codes() {
        let mut text = String::from("c,y\n");
        for k in 0..70 {
            // code k appears 70 - k times, so codes 64..70 are the rarest
            for _ in 0..(70 - k) {
                text.push_str(&format!("v{k},0\n"));
            }
        }
        text.push_str("v0,1\n");
        let ds = read_csv(text.as_bytes(), "y", None).unwrap();
        let enc = FeatureEncoder::fit(&ds);
        assert_eq!(enc.width(), MAX_ONE_HOT + 1);
        let m = enc.encode(&ds).unwrap();
        let last_row = &m[(ds.n_rows() - 1) * enc.width()..];
        assert_eq!(last_row[0], 1.0);
        let rare = ds.rows().position(|r| r[0] == 69.0).unwrap();
        let rare_row = &m[rare * enc.width()..(rare + 1) * enc.width()];
        assert_eq!(rare_row[MAX_ONE_HOT], 1.0);
        assert_eq!(rare_row.iter().sum::<f64>(), 1.0);
    }
}
