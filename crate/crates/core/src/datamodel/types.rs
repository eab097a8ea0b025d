use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
}

/// Unified `n × d` token matrix: text tokens first, then video tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Tensor,
    n_text: usize,
    n_video: usize,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, n_text: usize, n_video: usize) -> Result<Self> {
        if tokens.rows() != n_text + n_video {
            return Err(Error::dim(
                "token_sequence",
                format!("{} rows but n_text + n_video = {}", tokens.rows(), n_text + n_video),
            ));
        }
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::invalid("token sequence must be non-empty"));
        }
        if !tokens.is_finite() {
            return Err(Error::invalid("token sequence contains non-finite values"));
        }
        Ok(TokenSequence {
            tokens,
            n_text,
            n_video,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_video(&self) -> usize {
        self.n_video
    }

    pub fn modality(&self, i: usize) -> Modality {
        if i < self.n_text {
            Modality::Text
        } else {
            Modality::Video
        }
    }

    pub fn modality_tags(&self) -> Vec<Modality> {
        (0..self.len()).map(|i| self.modality(i)).collect()
    }
}

/// Intent label names and their embedding anchors (`L × d`).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    names: Vec<String>,
    embeddings: Tensor,
}

impl LabelSet {
    pub fn new(names: Vec<String>, embeddings: Tensor) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::invalid(format!("need at least 2 labels, got {}", names.len())));
        }
        if embeddings.rows() != names.len() {
            return Err(Error::dim(
                "label_set",
                format!("{} names but {} embedding rows", names.len(), embeddings.rows()),
            ));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate label name {n:?}")));
            }
        }
        if !embeddings.is_finite() {
            return Err(Error::invalid("label embeddings contain non-finite values"));
        }
        if let Some(i) = embeddings.iter_rows().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid(format!("label {:?} has a zero embedding", names[i])));
        }
        Ok(LabelSet { names, embeddings })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub sequence: TokenSequence,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub(crate) fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Samples sharing one embedding width and label set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    labels: LabelSet,
    split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, labels: LabelSet, split: Split) -> Result<Self> {
        let d = labels.dim();
        for s in &samples {
            if s.sequence.dim() != d {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    reason: format!("token width {} differs from label width {d}", s.sequence.dim()),
                });
            }
            if s.label >= labels.len() {
                return Err(Error::InvalidSample {
                    id: s.id.clone(),
                    reason: format!("label index {} out of range for {} labels", s.label, labels.len()),
                });
            }
        }
        Ok(Dataset {
            samples,
            labels,
            split,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.labels.dim()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// New dataset over the samples at `indices`, same labels and split.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: self.labels.clone(),
            split: self.split,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::new(
            vec!["a".into(), "b".into()],
            Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn label_set_invariants() {
        let e = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(LabelSet::new(vec!["a".into(), "a".into()], e.clone()).is_err());
        assert!(LabelSet::new(vec!["a".into()], Tensor::row(&[1.0, 0.0])).is_err());
        let zero = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(LabelSet::new(vec!["a".into(), "b".into()], zero).is_err());
    }

    #[test]
    fn token_sequence_counts() {
        let t = Tensor::zeros(3, 2);
        assert!(TokenSequence::new(t.clone(), 1, 1).is_err());
        let seq = TokenSequence::new(t, 2, 1).unwrap();
        assert_eq!(seq.modality_tags(), vec![Modality::Text, Modality::Text, Modality::Video]);
        let bad = Tensor::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(TokenSequence::new(bad, 1, 0).is_err());
    }

    #[test]
    fn dataset_rejects_label_out_of_range() {
        let seq = TokenSequence::new(Tensor::filled(1, 2, 1.0), 1, 0).unwrap();
        let s = Sample {
            id: "x".into(),
            sequence: seq,
            label: 2,
        };
        assert!(matches!(
            Dataset::new(vec![s], labels(), Split::Train),
            Err(Error::InvalidSample { .. })
        ));
    }
}
