//! Post records, the CFE1 embedding archive, dataset splits and the synthetic
//! generator.

mod archive;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use archive::{
    decode_archive, encode_archive, read_archive, write_archive, ArchiveHeader, EmbeddingArchive,
    ARCHIVE_MAGIC, ARCHIVE_VERSION,
};
pub use split::{split_dataset, DatasetSplit, SplitPart};
pub use synthetic::{generate_synthetic, inconsistency_direction, SyntheticConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    Real = 0,
    Fake = 1,
}

impl Label {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    #[inline]
    pub fn as_byte(self) -> u8 {
        self as u8
    }

    /// Class index used by the classifier logits (`FAKE` = 1).
    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_prob_fake(prob_fake: f64) -> Self {
        if prob_fake >= 0.5 {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Real => f.write_str("REAL"),
            Label::Fake => f.write_str("FAKE"),
        }
    }
}

/// One multimodal post: per-token text embeddings, per-region image embeddings
/// and the binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct PostRecord {
    post_id: String,
    label: Label,
    word_embeddings: Matrix<f32>,
    region_embeddings: Matrix<f32>,
    token_mask: Vec<bool>,
}

impl PostRecord {
    pub fn new(
        post_id: impl Into<String>,
        label: Label,
        word_embeddings: Matrix<f32>,
        region_embeddings: Matrix<f32>,
        token_mask: Vec<bool>,
    ) -> Result<Self> {
        let post_id = post_id.into();
        if word_embeddings.rows() == 0 {
            return Err(Error::Validation(format!("post `{post_id}` has no tokens")));
        }
        if region_embeddings.rows() == 0 {
            return Err(Error::Validation(format!(
                "post `{post_id}` has no regions"
            )));
        }
        if token_mask.len() != word_embeddings.rows() {
            return Err(Error::DimensionMismatch(format!(
                "post `{post_id}`: token mask length {} != token count {}",
                token_mask.len(),
                word_embeddings.rows()
            )));
        }
        if !token_mask.iter().any(|&m| m) {
            return Err(Error::Validation(format!(
                "post `{post_id}` has no content tokens"
            )));
        }
        if !word_embeddings.is_finite() || !region_embeddings.is_finite() {
            return Err(Error::Validation(format!(
                "post `{post_id}` contains a non-finite embedding entry"
            )));
        }
        Ok(Self {
            post_id,
            label,
            word_embeddings,
            region_embeddings,
            token_mask,
        })
    }

    pub fn post_id(&self) -> &str {
        &self.post_id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn word_embeddings(&self) -> &Matrix<f32> {
        &self.word_embeddings
    }

    pub fn region_embeddings(&self) -> &Matrix<f32> {
        &self.region_embeddings
    }

    pub fn token_mask(&self) -> &[bool] {
        &self.token_mask
    }

    pub fn n_tokens(&self) -> usize {
        self.word_embeddings.rows()
    }

    pub fn n_content_tokens(&self) -> usize {
        self.token_mask.iter().filter(|&&m| m).count()
    }

    pub fn n_regions(&self) -> usize {
        self.region_embeddings.rows()
    }

    pub fn text_dim(&self) -> usize {
        self.word_embeddings.cols()
    }

    pub fn region_dim(&self) -> usize {
        self.region_embeddings.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: f32) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, vec![v; rows * cols]).unwrap()
    }

    #[test]
    fn record_requires_a_content_token() {
        let err = PostRecord::new(
            "p",
            Label::Real,
            mat(2, 3, 0.1),
            mat(1, 3, 0.1),
            vec![false; 2],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn record_rejects_non_finite_entries() {
        let mut words = mat(2, 3, 0.1);
        words.set(1, 2, f32::NAN);
        let err = PostRecord::new("p", Label::Fake, words, mat(1, 3, 0.1), vec![true; 2]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn record_rejects_mask_length_mismatch() {
        let err = PostRecord::new("p", Label::Fake, mat(2, 3, 0.1), mat(1, 3, 0.1), vec![true]);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn threshold_is_inclusive_for_fake() {
        assert_eq!(Label::from_prob_fake(0.5), Label::Fake);
        assert_eq!(Label::from_prob_fake(0.4999), Label::Real);
    }
}
