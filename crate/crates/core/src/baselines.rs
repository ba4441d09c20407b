//! Matching the LLM's raw class prediction straight to a label.
//!
//! These are the alternatives the fused classifier is compared against:
//! ROUGE-N and ROUGE-L F1 over word tokens, and cosine similarity of text
//! encodings.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EncoderBackend};
use crate::embedding::{argmax_index, normalize, EmbeddingVector, SimilarityScores, VectorError};

/// Lowercased word tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// Lowercase, then split on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect(),
    )
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

fn f1(matches: usize, candidate_total: usize, reference_total: usize) -> f64 {
    if candidate_total == 0 || reference_total == 0 || matches == 0 {
        return 0.0;
    }
    // Equal to 2PR / (P + R), with a single rounding.
    (2 * matches) as f64 / (candidate_total + reference_total) as f64
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n_f1(candidate: &TokenSequence, reference: &TokenSequence, n: usize) -> f64 {
    assert!(n >= 1, "ROUGE-N needs n >= 1");
    let cand = ngram_counts(&candidate.0, n);
    let refs = ngram_counts(&reference.0, n);
    let matches: usize = cand
        .iter()
        .map(|(gram, &c)| refs.get(gram).map_or(0, |&r| c.min(r)))
        .sum();
    f1(
        matches,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l_f1(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    f1(
        lcs_len(&candidate.0, &reference.0),
        candidate.len(),
        reference.len(),
    )
}

/// How a prediction text is compared with each label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchMetric {
    RougeN { n: usize },
    RougeL,
    Embedding,
}

impl fmt::Display for MatchMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchMetric::RougeN { n } => write!(f, "rouge{n}"),
            MatchMetric::RougeL => f.write_str("rougeL"),
            MatchMetric::Embedding => f.write_str("embed"),
        }
    }
}

impl FromStr for MatchMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rougeL" | "rougel" | "rouge-l" => Ok(MatchMetric::RougeL),
            "embed" | "embedding" => Ok(MatchMetric::Embedding),
            other => other
                .strip_prefix("rouge")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(|n| MatchMetric::RougeN { n })
                .ok_or_else(|| {
                    format!("unknown baseline {other:?} (expected rouge<N>, rougeL or embed)")
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub class_index: usize,
    pub score: f64,
    pub metric: MatchMetric,
}

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("label set is empty")]
    EmptyLabels,
    #[error("embedding matching needs an encoder")]
    MissingEncoder,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

/// Scores prediction texts against a fixed label set. Label encodings for
/// the embedding metric are computed once, up front.
pub struct LabelMatcher<'a> {
    metric: MatchMetric,
    label_tokens: Vec<TokenSequence>,
    label_features: Vec<EmbeddingVector>,
    encoder: Option<&'a dyn EncoderBackend>,
}

impl<'a> LabelMatcher<'a> {
    pub fn new<S: AsRef<str>>(
        labels: &[S],
        metric: MatchMetric,
        encoder: Option<&'a dyn EncoderBackend>,
    ) -> Result<Self, MatchError> {
        if labels.is_empty() {
            return Err(MatchError::EmptyLabels);
        }
        let label_tokens = labels.iter().map(|l| tokenize(l.as_ref())).collect();
        let label_features = if metric == MatchMetric::Embedding {
            let enc = encoder.ok_or(MatchError::MissingEncoder)?;
            labels
                .iter()
                .map(|l| Ok(normalize(&enc.encode_text(l.as_ref())?)?))
                .collect::<Result<_, MatchError>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            metric,
            label_tokens,
            label_features,
            encoder,
        })
    }

    pub fn metric(&self) -> MatchMetric {
        self.metric
    }

    /// One score per label.
    pub fn scores(&self, prediction_text: &str) -> Result<SimilarityScores, MatchError> {
        let scores = match self.metric {
            MatchMetric::RougeN { n } => {
                let cand = tokenize(prediction_text);
                self.label_tokens
                    .iter()
                    .map(|l| rouge_n_f1(&cand, l, n))
                    .collect()
            }
            MatchMetric::RougeL => {
                let cand = tokenize(prediction_text);
                self.label_tokens
                    .iter()
                    .map(|l| rouge_l_f1(&cand, l))
                    .collect()
            }
            MatchMetric::Embedding => {
                let enc = self.encoder.ok_or(MatchError::MissingEncoder)?;
                let q = normalize(&enc.encode_text(prediction_text)?)?;
                self.label_features
                    .iter()
                    .map(|l| q.dot(l))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        Ok(SimilarityScores::new(scores)?)
    }

    pub fn best(&self, prediction_text: &str) -> Result<MatchResult, MatchError> {
        let scores = self.scores(prediction_text)?;
        let class_index = argmax_index(&scores)?;
        Ok(MatchResult {
            class_index,
            score: scores.as_slice()[class_index],
            metric: self.metric,
        })
    }
}

/// Best-matching label for a raw LLM prediction; ties go to the lower index.
pub fn match_prediction<S: AsRef<str>>(
    prediction_text: &str,
    labels: &[S],
    metric: MatchMetric,
    encoder: Option<&dyn EncoderBackend>,
) -> Result<MatchResult, MatchError> {
    LabelMatcher::new(labels, metric, encoder)?.best(prediction_text)
}
