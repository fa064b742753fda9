//! Weighted-training learners: gradient-boosted trees and a feed-forward
//! network behind a single [`Model`] type.

mod encode;
pub mod gbdt;
pub mod mlp;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encode::{FeatureEncoder, MAX_ONE_HOT};
pub use gbdt::{GbdtModel, GbdtParams, TreeNode};
pub use mlp::{EarlyStopping, MlpModel, MlpParams, Network, StopDecision, TrainingHistory};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, Schema};

const MODEL_FORMAT: &str = "tabdistill.model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Gbdt(GbdtParams),
    Mlp(MlpParams),
}

impl LearnerSpec {
    pub fn gbdt() -> Self {
        LearnerSpec::Gbdt(GbdtParams::default())
    }

    pub fn mlp() -> Self {
        LearnerSpec::Mlp(MlpParams::default())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LearnerSpec::Gbdt(_) => "gbdt",
            LearnerSpec::Mlp(_) => "mlp",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            LearnerSpec::Gbdt(p) => p.seed,
            LearnerSpec::Mlp(p) => p.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            LearnerSpec::Gbdt(p) => p.seed = seed,
            LearnerSpec::Mlp(p) => p.seed = seed,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LearnerSpec::Gbdt(p) => p.validate(),
            LearnerSpec::Mlp(p) => p.validate(),
        }
    }

    /// Whether training needs a validation set.
    pub fn needs_validation(&self) -> bool {
        matches!(self, LearnerSpec::Mlp(p) if p.patience.is_some())
    }
}

/// What the learner is fit to.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingTarget {
    /// The dataset's own labels.
    HardLabels,
    /// Each row counts as `(x, 1)` with weight `positive[i]` and `(x, 0)` with
    /// weight `negative[i]`.
    RowWeighted { positive: Vec<f64>, negative: Vec<f64> },
    /// One sampled label per row, used in place of the dataset's labels.
    LabelSampled { labels: Vec<u8> },
}

impl TrainingTarget {
    /// Resolves the target into per-row `(w⁺, w⁻)` vectors.
    pub fn row_weights(&self, ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = ds.n_rows();
        let hard = |labels: &[u8]| -> (Vec<f64>, Vec<f64>) {
            (
                labels.iter().map(|&y| y as f64).collect(),
                labels.iter().map(|&y| 1.0 - y as f64).collect(),
            )
        };
        match self {
            TrainingTarget::HardLabels => Ok(hard(ds.labels())),
            TrainingTarget::LabelSampled { labels } => {
                if labels.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        found: labels.len(),
                    });
                }
                if labels.iter().any(|&z| z > 1) {
                    return Err(Error::invalid("sampled labels must be 0 or 1"));
                }
                Ok(hard(labels))
            }
            TrainingTarget::RowWeighted { positive, negative } => {
                for v in [positive, negative] {
                    if v.len() != n {
                        return Err(Error::LengthMismatch {
                            expected: n,
                            found: v.len(),
                        });
                    }
                }
                for (i, (p, q)) in positive.iter().zip(negative).enumerate() {
                    if !(p.is_finite() && q.is_finite() && *p >= 0.0 && *q >= 0.0) {
                        return Err(Error::invalid(format!("row {i} has a negative or non-finite weight")));
                    }
                    if p + q <= 0.0 {
                        return Err(Error::ZeroWeightRow(i));
                    }
                }
                Ok((positive.clone(), negative.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Learned {
    Gbdt(GbdtModel),
    Mlp(Network),
}

/// A trained learner bound to the schema it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: LearnerSpec,
    schema: Schema,
    fingerprint: String,
    encoder: FeatureEncoder,
    learned: Learned,
    history: Option<TrainingHistory>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    spec: LearnerSpec,
    schema: Schema,
    fingerprint: String,
    encoder: FeatureEncoder,
    learned: Learned,
    #[serde(default)]
    history: Option<TrainingHistory>,
}

impl Model {
    pub fn train(spec: &LearnerSpec, train: &Dataset, target: &TrainingTarget, valid: Option<&Dataset>) -> Result<Model> {
        spec.validate()?;
        let (w_pos, w_neg) = target.row_weights(train)?;
        let encoder = FeatureEncoder::fit(train);
        let x = encoder.encode(train)?;
        let width = encoder.width();
        let (learned, history) = match spec {
            LearnerSpec::Gbdt(p) => (Learned::Gbdt(gbdt::fit(p, &x, width, &w_pos, &w_neg)?), None),
            LearnerSpec::Mlp(_) if width == 0 => {
                return Err(Error::invalid("the mlp learner needs at least one feature"));
            }
            LearnerSpec::Mlp(p) => {
                let valid = match valid {
                    Some(v) => {
                        check_schema(train.schema(), v.schema())?;
                        Some((encoder.encode(v)?, v.labels().to_vec()))
                    }
                    None => None,
                };
                let m = mlp::fit(
                    p,
                    &x,
                    width,
                    &w_pos,
                    &w_neg,
                    valid.as_ref().map(|(vx, vy)| (vx.as_slice(), vy.as_slice())),
                )?;
                (Learned::Mlp(m.network), Some(m.history))
            }
        };
        Ok(Model {
            spec: spec.clone(),
            schema: train.schema().clone(),
            fingerprint: train.schema().fingerprint(),
            encoder,
            learned,
            history,
        })
    }

    pub fn spec(&self) -> &LearnerSpec {
        &self.spec
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn learned(&self) -> &Learned {
        &self.learned
    }

    pub fn history(&self) -> Option<&TrainingHistory> {
        self.history.as_ref()
    }

    /// Probability of the positive class for every row of `ds`.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        if ds.schema().fingerprint() != self.fingerprint {
            return Err(Error::Schema(
                "rows do not match the model's training schema (names, kinds or order differ)".into(),
            ));
        }
        let x = self.encoder.encode(ds)?;
        let width = self.encoder.width();
        Ok(match &self.learned {
            Learned::Gbdt(m) => {
                if width == 0 {
                    vec![m.predict_row(&[]); ds.n_rows()]
                } else {
                    x.chunks(width).map(|r| m.predict_row(r)).collect()
                }
            }
            Learned::Mlp(net) => net.predict(&x),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: self.spec.clone(),
            schema: self.schema.clone(),
            fingerprint: self.fingerprint.clone(),
            encoder: self.encoder.clone(),
            learned: self.learned.clone(),
            history: self.history.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Corrupted(format!("model document is not JSON: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::Corrupted("missing or unexpected model format tag".into()));
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    found: v.min(u32::MAX as u64) as u32,
                    expected: MODEL_VERSION,
                })
            }
            None => return Err(Error::Corrupted("model document has no version".into())),
        }
        let doc: ModelDocument =
            serde_json::from_value(value).map_err(|e| Error::Corrupted(format!("model document: {e}")))?;
        if doc.schema.fingerprint() != doc.fingerprint {
            return Err(Error::Corrupted("schema fingerprint does not match stored schema".into()));
        }
        Ok(Model {
            spec: doc.spec,
            schema: doc.schema,
            fingerprint: doc.fingerprint,
            encoder: doc.encoder,
            learned: doc.learned,
            history: doc.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_json(&crate::io::read_to_string(path)?)
    }
}

fn check_schema(expected: &Schema, found: &Schema) -> Result<()> {
    if expected.fingerprint() != found.fingerprint() {
        return Err(Error::Schema("validation rows do not match the training schema".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::read_csv;

    fn tiny() -> Dataset {
        read_csv("a,b,y\n0,1.5,0\n1,2.5,1\n2,0.5,1\n3,3.5,0\n".as_bytes(), "y", None).unwrap()
    }

    #[test]
    fn zero_weight_row_is_rejected() {
        let ds = tiny();
        let t = TrainingTarget::RowWeighted {
            positive: vec![1.0, 0.0, 0.5, 0.2],
            negative: vec![0.0, 0.0, 0.5, 0.8],
        };
        assert!(matches!(
            Model::train(&LearnerSpec::gbdt(), &ds, &t, None),
            Err(Error::ZeroWeightRow(1))
        ));
    }

    #[test]
    fn target_length_must_match() {
        let t = TrainingTarget::LabelSampled { labels: vec![0, 1] };
        assert!(matches!(t.row_weights(&tiny()), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn spec_json_is_tagged_by_kind() {
        let text = serde_json::to_string(&LearnerSpec::gbdt()).unwrap();
        assert!(text.starts_with("{\"kind\":\"gbdt\""));
        let back: LearnerSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, LearnerSpec::gbdt());
    }

    #[test]
    fn unknown_version_is_reported() {
        let m = Model::train(&LearnerSpec::gbdt(), &tiny(), &TrainingTarget::HardLabels, None).unwrap();
        let text = m.to_json().unwrap().replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(
            Model::from_json(&text),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
        assert!(matches!(Model::from_json("{\"format\":"), Err(Error::Corrupted(_))));
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let m = Model::train(&LearnerSpec::gbdt(), &tiny(), &TrainingTarget::HardLabels, None).unwrap();
        let other = read_csv("b,a,y\n1.5,0,0\n2.5,1,1\n".as_bytes(), "y", None).unwrap();
        assert!(matches!(m.predict(&other), Err(Error::Schema(_))));
    }
}
