//! Zero-shot inference: gather image, description and prediction features,
//! fuse them, score against the class matrix and take the argmax.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::FilterType;
use image::{ImageEncoder, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends, GenerateRequest};
use crate::classifier::ClassifierModel;
use crate::embedding::{
    argmax_index, fuse_average, normalize, score, EmbeddingVector, SimilarityScores, VectorError,
};
use crate::manifest::DatasetManifest;
use crate::prompts::{self, PromptError};

/// Side length every input image is resized to.
pub const INPUT_SIZE: u32 = 224;

/// LLM temperature for the per-image description and class prediction.
pub const INFERENCE_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot decode image: {0}")]
    ImageDecode(String),
    #[error("model dimension {model} does not match encoder dimension {encoder}")]
    DimMismatch { model: usize, encoder: usize },
    #[error("no features available; failures: {}", .failures.join("; "))]
    NoFeaturesAvailable { failures: Vec<String> },
    #[error("{feature} feature: {source}")]
    Feature {
        feature: FeatureKind,
        #[source]
        source: BackendError,
    },
    #[error("feature selection must enable at least one feature")]
    EmptySelection,
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Image,
    Description,
    Prediction,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Image => "image",
            FeatureKind::Description => "description",
            FeatureKind::Prediction => "prediction",
        })
    }
}

/// Which input features feed the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub use_image: bool,
    pub use_description: bool,
    pub use_prediction: bool,
}

impl FeatureSelection {
    pub const ALL: FeatureSelection = FeatureSelection {
        use_image: true,
        use_description: true,
        use_prediction: true,
    };
    pub const IMAGE_ONLY: FeatureSelection = FeatureSelection {
        use_image: true,
        use_description: false,
        use_prediction: false,
    };

    pub fn new(
        use_image: bool,
        use_description: bool,
        use_prediction: bool,
    ) -> Result<Self, PipelineError> {
        let s = Self {
            use_image,
            use_description,
            use_prediction,
        };
        if s.count() == 0 {
            return Err(PipelineError::EmptySelection);
        }
        Ok(s)
    }

    pub fn count(&self) -> usize {
        usize::from(self.use_image)
            + usize::from(self.use_description)
            + usize::from(self.use_prediction)
    }

    pub fn includes(&self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Image => self.use_image,
            FeatureKind::Description => self.use_description,
            FeatureKind::Prediction => self.use_prediction,
        }
    }

    /// The seven nonempty subsets of {IF, DF, PF}.
    pub fn all_subsets() -> Vec<FeatureSelection> {
        (1u8..8)
            .map(|bits| FeatureSelection {
                use_image: bits & 1 != 0,
                use_description: bits & 2 != 0,
                use_prediction: bits & 4 != 0,
            })
            .collect()
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.use_image, "if"),
            (self.use_description, "df"),
            (self.use_prediction, "pf"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for FeatureSelection {
    type Err = String;

    /// Comma-separated subset of `if`, `df`, `pf`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut sel = FeatureSelection {
            use_image: false,
            use_description: false,
            use_prediction: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "if" | "image" => sel.use_image = true,
                "df" | "description" => sel.use_description = true,
                "pf" | "prediction" => sel.use_prediction = true,
                other => return Err(format!("unknown feature {other:?} (expected if, df, pf)")),
            }
        }
        if sel.count() == 0 {
            return Err("select at least one of if, df, pf".into());
        }
        Ok(sel)
    }
}

/// How selected features are combined into class scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Normalized sum of features, then one dot product per class.
    #[default]
    AverageFeature,
    /// Mean over features of the per-feature class scores.
    AverageSimilarity,
    /// Max over features of the per-feature class scores.
    MaxSimilarity,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::AverageFeature,
        FusionStrategy::AverageSimilarity,
        FusionStrategy::MaxSimilarity,
    ];
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::AverageFeature => "avg-feature",
            FusionStrategy::AverageSimilarity => "avg-similarity",
            FusionStrategy::MaxSimilarity => "max-similarity",
        })
    }
}

impl FromStr for FusionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg-feature" | "average-feature" => Ok(FusionStrategy::AverageFeature),
            "avg-similarity" | "average-similarity" => Ok(FusionStrategy::AverageSimilarity),
            "max-similarity" => Ok(FusionStrategy::MaxSimilarity),
            other => Err(format!("unknown fusion strategy {other:?}")),
        }
    }
}

/// Whether description and classification go to the LLM as two requests or one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    Dual,
    /// One combined prompt; the reply serves as both description and prediction text.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub selection: FeatureSelection,
    pub strategy: FusionStrategy,
    /// Skip features whose backend call fails instead of failing the image.
    pub degraded: bool,
    pub query_mode: QueryMode,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            selection: FeatureSelection::ALL,
            strategy: FusionStrategy::AverageFeature,
            degraded: false,
            query_mode: QueryMode::Dual,
        }
    }
}

impl InferenceOptions {
    pub fn new(selection: FeatureSelection, strategy: FusionStrategy) -> Self {
        Self {
            selection,
            strategy,
            ..Self::default()
        }
    }
}

/// Per-image features, with the LLM texts they were encoded from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryFeatures {
    pub image_feature: Option<EmbeddingVector>,
    pub description_feature: Option<EmbeddingVector>,
    pub prediction_feature: Option<EmbeddingVector>,
    pub description_text: Option<String>,
    pub prediction_text: Option<String>,
    /// Selected features that failed and were skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degraded: Vec<FeatureKind>,
}

impl QueryFeatures {
    /// Present features in IF, DF, PF order.
    pub fn present(&self) -> Vec<&EmbeddingVector> {
        [
            &self.image_feature,
            &self.description_feature,
            &self.prediction_feature,
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_index: usize,
    pub class_label: String,
    pub scores: SimilarityScores,
    pub features: QueryFeatures,
    pub degraded: Vec<FeatureKind>,
}

impl Prediction {
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        self.scores.top_k(k)
    }
}

/// Decodes any supported raster, resizes it to 224×224 (bilinear, aspect
/// ratio not kept) and returns it as RGB.
pub fn prepare_rgb(bytes: &[u8]) -> Result<RgbImage, PipelineError> {
    let img =
        image::load_from_memory(bytes).map_err(|e| PipelineError::ImageDecode(e.to_string()))?;
    let rgb = img.to_rgb8();
    if rgb.width() == INPUT_SIZE && rgb.height() == INPUT_SIZE {
        return Ok(rgb);
    }
    Ok(image::imageops::resize(
        &rgb,
        INPUT_SIZE,
        INPUT_SIZE,
        FilterType::Triangle,
    ))
}

/// PNG bytes of an RGB image. Output is deterministic for identical pixels.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(
        Cursor::new(&mut out),
        CompressionType::Fast,
        PngFilter::NoFilter,
    )
    .write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )
    .expect("PNG encoding into memory cannot fail");
    out
}

/// The exact bytes sent to the encoder and LLM for an input image.
pub fn prepare_image(bytes: &[u8]) -> Result<Vec<u8>, PipelineError> {
    Ok(encode_png(&prepare_rgb(bytes)?))
}

fn check_dim(model: &ClassifierModel, backends: &Backends) -> Result<(), PipelineError> {
    match backends.encoder.reported_dim() {
        Some(encoder) if encoder != model.dim() => Err(PipelineError::DimMismatch {
            model: model.dim(),
            encoder,
        }),
        _ => Ok(()),
    }
}

fn encode_text_feature(backends: &Backends, text: &str) -> Result<EmbeddingVector, BackendError> {
    Ok(normalize(&backends.encoder.encode_text(text)?)?)
}

/// Features for an image that has already gone through [`prepare_image`].
pub fn extract_prepared(
    prepared: &[u8],
    model: &ClassifierModel,
    options: &InferenceOptions,
    backends: &Backends,
) -> Result<QueryFeatures, PipelineError> {
    check_dim(model, backends)?;
    let selection = options.selection;
    if selection.count() == 0 {
        return Err(PipelineError::EmptySelection);
    }
    let mut features = QueryFeatures::default();
    let mut failures = Vec::new();
    let mut fail = |kind: FeatureKind, err: BackendError, features: &mut QueryFeatures| {
        if options.degraded {
            log::warn!("skipping {kind} feature: {err}");
            failures.push(format!("{kind}: {err}"));
            features.degraded.push(kind);
            Ok(())
        } else {
            Err(PipelineError::Feature {
                feature: kind,
                source: err,
            })
        }
    };

    if selection.use_image {
        match backends
            .encoder
            .encode_image(prepared)
            .and_then(|v| Ok(normalize(&v)?))
        {
            Ok(v) => features.image_feature = Some(v),
            Err(e) => fail(FeatureKind::Image, e, &mut features)?,
        }
    }

    let generate = |prompt: &str| {
        backends
            .llm
            .generate(&GenerateRequest::new(
                prompt,
                Some(prepared),
                INFERENCE_TEMPERATURE,
            ))
            .and_then(|t| encode_text_feature(backends, &t).map(|v| (t, v)))
    };
    let single = options.query_mode == QueryMode::Single
        && selection.use_description
        && selection.use_prediction;
    if single {
        match generate(&prompts::render_combined_prompt(model.labels())?) {
            Ok((t, v)) => {
                features.description_text = Some(t.clone());
                features.description_feature = Some(v.clone());
                features.prediction_text = Some(t);
                features.prediction_feature = Some(v);
            }
            Err(e) => {
                fail(FeatureKind::Description, e, &mut features)?;
                // Only reached in degraded mode; the one reply backed both texts.
                features.degraded.push(FeatureKind::Prediction);
            }
        }
    } else {
        if selection.use_description {
            match generate(prompts::description_prompt()) {
                Ok((t, v)) => {
                    features.description_text = Some(t);
                    features.description_feature = Some(v);
                }
                Err(e) => fail(FeatureKind::Description, e, &mut features)?,
            }
        }
        if selection.use_prediction {
            match generate(&prompts::render_classification_prompt(model.labels())?) {
                Ok((t, v)) => {
                    features.prediction_text = Some(t);
                    features.prediction_feature = Some(v);
                }
                Err(e) => fail(FeatureKind::Prediction, e, &mut features)?,
            }
        }
    }

    if features.present().is_empty() {
        return Err(PipelineError::NoFeaturesAvailable { failures });
    }
    Ok(features)
}

/// Resizes the image and computes the selected features.
pub fn extract_features(
    image: &[u8],
    model: &ClassifierModel,
    options: &InferenceOptions,
    backends: &Backends,
) -> Result<QueryFeatures, PipelineError> {
    let prepared = prepare_image(image)?;
    extract_prepared(&prepared, model, options, backends)
}

/// Class scores for a set of unit-norm features under `strategy`.
pub fn fused_scores(
    features: &[&EmbeddingVector],
    model: &ClassifierModel,
    strategy: FusionStrategy,
) -> Result<SimilarityScores, PipelineError> {
    if features.is_empty() {
        return Err(PipelineError::NoFeaturesAvailable {
            failures: Vec::new(),
        });
    }
    let matrix = model.matrix();
    match strategy {
        FusionStrategy::AverageFeature => {
            let owned: Vec<EmbeddingVector> = features.iter().map(|f| (*f).clone()).collect();
            Ok(score(&fuse_average(&owned)?, matrix)?)
        }
        FusionStrategy::AverageSimilarity | FusionStrategy::MaxSimilarity => {
            let per_feature = features
                .iter()
                .map(|f| score(f, matrix))
                .collect::<Result<Vec<_>, _>>()?;
            let combined = (0..matrix.len())
                .map(|i| {
                    let column = per_feature.iter().map(|s| s.as_slice()[i]);
                    if strategy == FusionStrategy::MaxSimilarity {
                        column.fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        column.sum::<f64>() / per_feature.len() as f64
                    }
                })
                .collect();
            Ok(SimilarityScores::new(combined)?)
        }
    }
}

/// Scores already-extracted features and picks the class.
pub fn predict(
    features: QueryFeatures,
    model: &ClassifierModel,
    strategy: FusionStrategy,
) -> Result<Prediction, PipelineError> {
    let scores = fused_scores(&features.present(), model, strategy)?;
    let class_index = argmax_index(&scores)?;
    Ok(Prediction {
        class_index,
        class_label: model.labels()[class_index].clone(),
        scores,
        degraded: features.degraded.clone(),
        features,
    })
}

/// Classifies one encoded image.
pub fn classify(
    image: &[u8],
    model: &ClassifierModel,
    options: &InferenceOptions,
    backends: &Backends,
) -> Result<Prediction, PipelineError> {
    let features = extract_features(image, model, options, backends)?;
    predict(features, model, options.strategy)
}

/// A record that could not be classified.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub record: usize,
    pub image: String,
    pub message: String,
}

pub type BatchOutcome = Result<Prediction, RecordFailure>;

pub(crate) fn run_pool<T: Send>(parallelism: usize, job: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool builds")
        .install(job)
}

/// One outcome per manifest record, in manifest order.
pub fn classify_batch(
    manifest: &DatasetManifest,
    model: &ClassifierModel,
    options: &InferenceOptions,
    backends: &Backends,
    parallelism: usize,
) -> Vec<BatchOutcome> {
    run_pool(parallelism, || {
        manifest
            .records
            .par_iter()
            .enumerate()
            .map(|(i, record)| {
                let path = manifest.image_path(record);
                let failure = |message: String| RecordFailure {
                    record: i,
                    image: record.image.display().to_string(),
                    message,
                };
                let bytes = std::fs::read(&path)
                    .map_err(|e| failure(format!("{}: {e}", path.display())))?;
                classify(&bytes, model, options, backends).map_err(|e| failure(e.to_string()))
            })
            .collect()
    })
}
