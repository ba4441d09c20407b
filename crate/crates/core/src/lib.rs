//! Zero-shot image classification by fusing image, LLM description and LLM
//! prediction embeddings against per-class text features.

pub mod attribution;
pub mod backend;
pub mod baselines;
pub mod classifier;
pub mod embedding;
pub mod eval;
pub mod manifest;
pub mod pipeline;
pub mod prompts;

pub use attribution::{
    attribute, render_heatmap, AttributionError, AttributionMap, AttributionSettings,
    ImageMaskSchedule, TextMaskSchedule,
};
pub use backend::{
    BackendError, Backends, CallCounters, CounterSnapshot, EncoderBackend, GenerateRequest,
    LlmBackend,
};
pub use baselines::{LabelMatcher, MatchMetric};
pub use classifier::{build_classifier, BuildError, ClassFeatureMode, ClassifierModel};
pub use embedding::{ClassFeatureMatrix, EmbeddingVector, SimilarityScores, VectorError};
pub use eval::{
    emit_report, evaluate, EvalConfig, EvalError, EvalMethod, EvaluationReport, ReportFormat,
};
pub use manifest::{load_manifest, DatasetManifest, ImageRecord, ManifestError};
pub use pipeline::{
    classify, classify_batch, FeatureKind, FeatureSelection, FusionStrategy, InferenceOptions,
    PipelineError, Prediction, QueryMode,
};

/// Any failure from this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Prompt(#[from] prompts::PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Cache(#[from] backend::CacheError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Match(#[from] baselines::MatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}
