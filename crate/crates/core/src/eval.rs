//! Evaluation metrics, run orchestration and report emission.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backends, CounterSnapshot, GenerateRequest};
use crate::baselines::{LabelMatcher, MatchError, MatchMetric};
use crate::classifier::{ClassFeatureMode, ClassifierModel, Provenance};
use crate::embedding::{top_k_indices, SimilarityScores};
use crate::manifest::DatasetManifest;
use crate::pipeline::{self, FeatureKind, InferenceOptions, PipelineError, INFERENCE_TEMPERATURE};
use crate::prompts;

/// Largest k reported per record.
pub const REPORT_TOP_K: usize = 5;

pub const DEFAULT_MAX_FAILURE_FRACTION: f64 = 0.01;

/// Tokenization rule used by the text-match baselines, recorded in reports.
pub const TOKENIZATION_RULE: &str = "lowercase; split on non-alphanumeric runs";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    EmptyPredictions,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("{scores} score vectors for {truths} ground-truth indices")]
    LengthMismatch { scores: usize, truths: usize },
    #[error("score vector {record} has {found} entries, expected {expected}")]
    ScoreLength {
        record: usize,
        expected: usize,
        found: usize,
    },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("manifest labels differ from the model labels")]
    LabelMismatch,
    #[error(
        "{failed} of {total} records failed, above the allowed fraction {allowed}; first: {first}"
    )]
    TooManyFailures {
        failed: usize,
        total: usize,
        allowed: f64,
        first: String,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

/// Counts indexed by [true class][predicted class].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let m = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != m) {
            return Err(EvalError::ClassOutOfRange {
                index: row.len(),
                classes: m,
            });
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Self, EvalError> {
        let mut cm = Self::new(classes);
        for &(t, p) in pairs {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), EvalError> {
        let classes = self.classes();
        for index in [truth, predicted] {
            if index >= classes {
                return Err(EvalError::ClassOutOfRange { index, classes });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.classes())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn is_diagonal(&self) -> bool {
        self.trace() == self.total()
    }
}

/// Fraction of records whose true class is among the `k` best scores.
pub fn top_k_accuracy(
    scores: &[SimilarityScores],
    truths: &[usize],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if scores.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            truths: truths.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    let m = scores[0].len();
    let mut hits = 0usize;
    for (record, (s, &t)) in scores.iter().zip(truths).enumerate() {
        if s.len() != m {
            return Err(EvalError::ScoreLength {
                record,
                expected: m,
                found: s.len(),
            });
        }
        if t >= m {
            return Err(EvalError::ClassOutOfRange {
                index: t,
                classes: m,
            });
        }
        if s.top_k(k).contains(&t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Chance-corrected agreement between truth and prediction.
pub fn cohens_kappa(confusion: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = confusion.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let rows = confusion.row_sums();
    let cols = confusion.column_sums();
    let chance: u128 = rows
        .iter()
        .zip(&cols)
        .map(|(&r, &c)| r as u128 * c as u128)
        .sum();
    let total_sq = total as u128 * total as u128;
    if chance == total_sq {
        // Every record in one class on both sides.
        return Ok(1.0);
    }
    let p_o = confusion.trace() as f64 / total as f64;
    let p_e = chance as f64 / total_sq as f64;
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// What produces the per-record class scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMethod {
    /// Feature fusion against the class feature matrix.
    Fusion { options: InferenceOptions },
    /// Match the LLM's free-text prediction against the labels.
    Baseline { metric: MatchMetric },
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMethod::Fusion { options } => {
                write!(f, "fusion[{}; {}]", options.selection, options.strategy)
            }
            EvalMethod::Baseline { metric } => write!(f, "baseline[{metric}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub method: EvalMethod,
    pub max_failure_fraction: f64,
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: EvalMethod::Fusion {
                options: InferenceOptions::default(),
            },
            max_failure_fraction: DEFAULT_MAX_FAILURE_FRACTION,
            parallelism: crate::classifier::DEFAULT_PARALLELISM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub image: String,
    pub true_index: usize,
    /// None when the record failed.
    pub predicted_index: Option<usize>,
    pub top_k: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degraded: Vec<FeatureKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RecordOutcome {
    pub fn correct(&self) -> bool {
        self.predicted_index == Some(self.true_index)
    }

    pub fn top_k_hit(&self) -> bool {
        self.top_k.contains(&self.true_index)
    }
}

/// Everything needed to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub dataset: String,
    pub labels: Vec<String>,
    pub method: EvalMethod,
    pub max_failure_fraction: f64,
    pub parallelism: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_mode: Option<ClassFeatureMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_provenance: Option<Provenance>,
    pub backends: String,
    pub prompt_version: String,
    pub tokenization: String,
    /// Resolved front-end configuration, filled in by the caller.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ConfigSnapshot,
    pub records: Vec<RecordOutcome>,
    pub evaluated: usize,
    pub failed: usize,
    /// Records with at least one skipped feature.
    pub degraded: usize,
    pub top1: f64,
    pub top5: f64,
    pub kappa: f64,
    pub confusion: ConfusionMatrix,
    /// Backend calls made during this run only.
    pub counters: CounterSnapshot,
}

struct Scored {
    scores: SimilarityScores,
    degraded: Vec<FeatureKind>,
}

fn baseline_scores(
    bytes: &[u8],
    labels: &[String],
    matcher: &LabelMatcher<'_>,
    backends: &Backends,
) -> Result<SimilarityScores, EvalError> {
    let prepared = pipeline::prepare_image(bytes)?;
    let prompt = prompts::render_classification_prompt(labels).map_err(PipelineError::from)?;
    let text = backends
        .llm
        .generate(&GenerateRequest::new(
            &prompt,
            Some(&prepared),
            INFERENCE_TEMPERATURE,
        ))
        .map_err(MatchError::from)?;
    Ok(matcher.scores(&text)?)
}

/// Runs `config.method` over every manifest record and computes the metrics
/// over the records that succeeded.
pub fn evaluate(
    manifest: &DatasetManifest,
    model: Option<&ClassifierModel>,
    config: &EvalConfig,
    backends: &Backends,
) -> Result<EvaluationReport, EvalError> {
    if manifest.records.is_empty() {
        return Err(EvalError::EmptyPredictions);
    }
    if let Some(model) = model {
        if model.labels() != manifest.labels.as_slice() {
            return Err(EvalError::LabelMismatch);
        }
    }
    let before = backends.counters();

    let matcher = match config.method {
        EvalMethod::Baseline { metric } => Some(LabelMatcher::new(
            &manifest.labels,
            metric,
            Some(&*backends.encoder),
        )?),
        EvalMethod::Fusion { .. } => None,
    };
    let score_record = |bytes: &[u8]| -> Result<Scored, String> {
        match (&config.method, model, &matcher) {
            (EvalMethod::Fusion { options }, Some(model), _) => {
                pipeline::classify(bytes, model, options, backends)
                    .map(|p| Scored {
                        scores: p.scores,
                        degraded: p.degraded,
                    })
                    .map_err(|e| e.to_string())
            }
            (EvalMethod::Baseline { .. }, _, Some(matcher)) => {
                baseline_scores(bytes, &manifest.labels, matcher, backends)
                    .map(|scores| Scored {
                        scores,
                        degraded: Vec::new(),
                    })
                    .map_err(|e| e.to_string())
            }
            _ => Err("feature fusion needs a classifier model".to_owned()),
        }
    };

    let outcomes: Vec<Result<Scored, String>> = pipeline::run_pool(config.parallelism, || {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let path = manifest.image_path(record);
                let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                score_record(&bytes)
            })
            .collect()
    });

    let classes = manifest.labels.len();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    let mut confusion = ConfusionMatrix::new(classes);
    let mut failures = Vec::new();
    for (record, outcome) in manifest.records.iter().zip(outcomes) {
        let image = record.image.display().to_string();
        match outcome {
            Ok(s) => {
                let predicted = top_k_indices(s.scores.as_slice(), 1)[0];
                confusion.record(record.label_index, predicted)?;
                records.push(RecordOutcome {
                    image,
                    true_index: record.label_index,
                    predicted_index: Some(predicted),
                    top_k: s.scores.top_k(REPORT_TOP_K),
                    degraded: s.degraded,
                    error: None,
                });
                scores.push(s.scores);
                truths.push(record.label_index);
            }
            Err(message) => {
                log::warn!("{image}: {message}");
                failures.push(format!("{image}: {message}"));
                records.push(RecordOutcome {
                    image,
                    true_index: record.label_index,
                    predicted_index: None,
                    top_k: Vec::new(),
                    degraded: Vec::new(),
                    error: Some(message),
                });
            }
        }
    }

    let total = records.len();
    let failed = failures.len();
    if failed as f64 > config.max_failure_fraction * total as f64 || failed == total {
        return Err(EvalError::TooManyFailures {
            failed,
            total,
            allowed: config.max_failure_fraction,
            first: failures.into_iter().next().unwrap_or_default(),
        });
    }

    Ok(EvaluationReport {
        config: ConfigSnapshot {
            dataset: manifest.name.clone(),
            labels: manifest.labels.clone(),
            method: config.method,
            max_failure_fraction: config.max_failure_fraction,
            parallelism: config.parallelism,
            model_mode: model
                .filter(|_| matches!(config.method, EvalMethod::Fusion { .. }))
                .map(|m| m.mode().clone()),
            model_provenance: model
                .filter(|_| matches!(config.method, EvalMethod::Fusion { .. }))
                .map(|m| m.provenance().clone()),
            backends: backends.identity(),
            prompt_version: prompts::asset_version().to_owned(),
            tokenization: TOKENIZATION_RULE.to_owned(),
            run: None,
        },
        evaluated: scores.len(),
        failed,
        degraded: records.iter().filter(|r| !r.degraded.is_empty()).count(),
        top1: top_k_accuracy(&scores, &truths, 1)?,
        top5: top_k_accuracy(&scores, &truths, REPORT_TOP_K)?,
        kappa: cohens_kappa(&confusion)?,
        confusion,
        records,
        counters: backends.counters().since(&before),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!(
                "unknown report format {other:?} (expected json or csv)"
            )),
        }
    }
}

/// Header row of the CSV report.
pub const CSV_HEADER: [&str; 8] = [
    "image",
    "true",
    "predicted",
    "correct",
    "top5_hit",
    "true_label",
    "predicted_label",
    "error",
];

/// Footer lines following the per-record rows.
pub const CSV_FOOTER_LINES: usize = 7;

fn csv_bytes(report: &EvaluationReport) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let labels = &report.config.labels;
    w.write_record(CSV_HEADER).expect("write to memory");
    for r in &report.records {
        let predicted = r.predicted_index.map(|p| p.to_string()).unwrap_or_default();
        let predicted_label = r
            .predicted_index
            .and_then(|p| labels.get(p))
            .cloned()
            .unwrap_or_default();
        w.write_record([
            r.image.as_str(),
            &r.true_index.to_string(),
            &predicted,
            if r.correct() { "1" } else { "0" },
            if r.top_k_hit() { "1" } else { "0" },
            labels.get(r.true_index).map(String::as_str).unwrap_or(""),
            &predicted_label,
            r.error.as_deref().unwrap_or(""),
        ])
        .expect("write to memory");
    }
    let footer = [
        ("#method", report.config.method.to_string()),
        ("#evaluated", report.evaluated.to_string()),
        ("#failed", report.failed.to_string()),
        ("#degraded", report.degraded.to_string()),
        ("#top1", report.top1.to_string()),
        ("#top5", report.top5.to_string()),
        ("#kappa", report.kappa.to_string()),
    ];
    debug_assert_eq!(footer.len(), CSV_FOOTER_LINES);
    for (k, v) in footer {
        w.write_record([k, v.as_str()]).expect("write to memory");
    }
    w.into_inner().expect("flush to memory")
}

/// Serialized report. JSON is the full structure; CSV is one row per record
/// plus a summary footer.
pub fn emit_report(report: &EvaluationReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::Csv => csv_bytes(report),
    }
}
