//! Entity feature vectors: hashed text features and optional image sidecars.

use std::collections::HashMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusedSummary, Variant};
use crate::io::read_jsonl;
use crate::kgdata::{Dataset, Qid};

pub const DEFAULT_TEXT_DIM: usize = 256;
pub const MIN_TEXT_DIM: usize = 8;

/// Sparse vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    fn from_dense(dense: &[f64]) -> Self {
        let mut s = SparseVec::default();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                s.indices.push(i as u32);
                s.values.push(v);
            }
        }
        s
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Signed feature hashing of token counts, L2-normalized when nonzero.
pub fn featurize_text_sparse(text: &str, dim: usize) -> SparseVec {
    assert!(dim >= MIN_TEXT_DIM, "text dimension must be at least {MIN_TEXT_DIM}");
    let mut dense = vec![0.0; dim];
    for token in tokenize(text) {
        let h = fnv1a(token.as_bytes());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        dense[(h % dim as u64) as usize] += sign;
    }
    let norm = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        dense.iter_mut().for_each(|v| *v /= norm);
    }
    SparseVec::from_dense(&dense)
}

pub fn featurize_text(text: &str, dim: usize) -> Vec<f64> {
    featurize_text_sparse(text, dim).to_dense(dim)
}

/// One `features_img.jsonl` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatureRow {
    pub qid: Qid,
    pub vector: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{}: {source}", path.display())]
    Io { path: std::path::PathBuf, source: io::Error },
    #[error("image feature for {qid} has dimension {got}, expected {expected}")]
    DimensionMismatch { qid: String, got: usize, expected: usize },
    #[error("image feature for {0} contains a non-finite value")]
    NonFinite(String),
    #[error("no {0} rows in summaries")]
    MissingVariant(Variant),
}

pub fn load_image_features(path: &Path) -> Result<Vec<ImageFeatureRow>, FeatureError> {
    read_jsonl(path).map_err(|source| FeatureError::Io { path: path.to_owned(), source })
}

/// Per-entity inputs, aligned with `Dataset::entities`.
#[derive(Clone, Debug, Default)]
pub struct FeatureSet {
    pub text_dim: usize,
    /// Original descriptions.
    pub text: Vec<SparseVec>,
    /// Caption-derived text of the chosen variant, when one is chosen.
    pub generated: Vec<SparseVec>,
    pub variant: Option<Variant>,
    pub image_dim: usize,
    pub image: Vec<Option<Vec<f64>>>,
}

impl FeatureSet {
    /// Description features plus, if `variant` is set, that variant's rows from
    /// `summaries`. Entities without a Fusion row fall back to their description.
    pub fn build(
        dataset: &Dataset,
        summaries: &[FusedSummary],
        variant: Option<Variant>,
        text_dim: usize,
    ) -> Result<Self, FeatureError> {
        let text: Vec<SparseVec> =
            dataset.entities.iter().map(|e| featurize_text_sparse(e.text().unwrap_or(""), text_dim)).collect();
        let generated = match variant {
            None => Vec::new(),
            Some(v) => {
                let rows: HashMap<&Qid, &str> =
                    summaries.iter().filter(|s| s.variant == v).map(|s| (&s.qid, s.text.as_str())).collect();
                if rows.is_empty() {
                    return Err(FeatureError::MissingVariant(v));
                }
                dataset
                    .entities
                    .iter()
                    .zip(&text)
                    .map(|(e, desc)| match rows.get(&e.qid) {
                        Some(t) => featurize_text_sparse(t, text_dim),
                        None if v == Variant::Fusion => desc.clone(),
                        None => SparseVec::default(),
                    })
                    .collect()
            }
        };
        Ok(Self { text_dim, text, generated, variant, image_dim: 0, image: vec![None; dataset.entities.len()] })
    }

    pub fn with_image_features(mut self, dataset: &Dataset, rows: &[ImageFeatureRow]) -> Result<Self, FeatureError> {
        let Some(first) = rows.first() else { return Ok(self) };
        let dim = first.vector.len();
        let mut image = vec![None; dataset.entities.len()];
        let by_qid: HashMap<&Qid, usize> = dataset.entities.iter().enumerate().map(|(i, e)| (&e.qid, i)).collect();
        for row in rows {
            if row.vector.len() != dim {
                return Err(FeatureError::DimensionMismatch {
                    qid: row.qid.to_string(),
                    got: row.vector.len(),
                    expected: dim,
                });
            }
            if row.vector.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::NonFinite(row.qid.to_string()));
            }
            match by_qid.get(&row.qid) {
                Some(&i) => image[i] = Some(row.vector.clone()),
                None => tracing::debug!(qid = %row.qid, "image feature for unknown entity ignored"),
            }
        }
        self.image_dim = dim;
        self.image = image;
        Ok(self)
    }

    pub fn has_images(&self) -> bool {
        self.image.iter().any(Option::is_some)
    }

    pub fn entity_count(&self) -> usize {
        self.text.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_is_zero() {
        assert!(featurize_text("", 16).iter().all(|v| *v == 0.0));
        assert!(featurize_text("  ,.; ", 16).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        assert_eq!(featurize_text("Amsterdam, canals!", 64), featurize_text("amsterdam canals", 64));
    }

    #[test]
    fn unit_norm_at_any_dim() {
        for dim in [8, 64, 256] {
            let v = featurize_text("amsterdam canals", dim);
            assert_eq!(v.len(), dim);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn deterministic_and_normalized(text in ".{0,80}", dim in 8usize..300) {
            let a = featurize_text_sparse(&text, dim);
            prop_assert_eq!(&a, &featurize_text_sparse(&text, dim));
            prop_assert!(a.is_zero() || (a.norm() - 1.0).abs() < 1e-9);
            prop_assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
