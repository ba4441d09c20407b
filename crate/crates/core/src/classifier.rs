//! Builds the class label feature matrix, the zero-shot linear classifier.
//!
//! Four column regimes are supported: plain label text, a label template,
//! the mean encoding of LLM-generated class descriptions, and the three
//! combined.

use std::collections::HashSet;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends, EncoderBackend, GenerateRequest, LlmBackend};
use crate::embedding::{
    mean_vectors, normalize, sum_vectors, ClassFeatureMatrix, EmbeddingVector, VectorError,
};
use crate::prompts::{self, LabelTemplate, PromptError, CLASS_DESCRIPTION_PROMPTS};

/// Descriptions per class: five prompts, ten samples each.
pub const DEFAULT_DESCRIPTION_COUNT: usize = 50;

/// Sampling temperature for class-description harvesting.
pub const DESCRIPTION_TEMPERATURE: f64 = 0.99;

pub const DEFAULT_PARALLELISM: usize = 8;

const MODEL_MAGIC: &[u8; 4] = b"ZSFM";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("no class labels given")]
    EmptyLabels,
    #[error("duplicate class label {0:?}")]
    DuplicateLabel(String),
    #[error("description count {0} must be a positive multiple of {CLASS_DESCRIPTION_PROMPTS}")]
    InvalidDescriptionCount(usize),
    #[error("only {obtained} of {expected} descriptions generated for {label:?}; failing prompts {failed_prompts:?}")]
    PartialGeneration {
        label: String,
        obtained: usize,
        expected: usize,
        failed_prompts: Vec<usize>,
    },
    #[error("building features for {label:?}: {source}")]
    Label {
        label: String,
        #[source]
        source: Box<BuildError>,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which text representation of each class becomes its column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassFeatureMode {
    Labels,
    Template { template: LabelTemplate },
    Descriptions { k: usize },
    Combined { k: usize, template: LabelTemplate },
}

impl ClassFeatureMode {
    pub fn validate(&self) -> Result<(), BuildError> {
        match self {
            ClassFeatureMode::Descriptions { k } | ClassFeatureMode::Combined { k, .. } => {
                if *k < CLASS_DESCRIPTION_PROMPTS || k % CLASS_DESCRIPTION_PROMPTS != 0 {
                    return Err(BuildError::InvalidDescriptionCount(*k));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClassFeatureMode::Labels => "labels",
            ClassFeatureMode::Template { .. } => "template",
            ClassFeatureMode::Descriptions { .. } => "descriptions",
            ClassFeatureMode::Combined { .. } => "combined",
        }
    }

    fn uses_llm(&self) -> bool {
        matches!(
            self,
            ClassFeatureMode::Descriptions { .. } | ClassFeatureMode::Combined { .. }
        )
    }
}

/// Where a model's columns came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<String>,
    pub prompt_version: String,
}

/// Class feature matrix plus the labels its columns stand for.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    matrix: ClassFeatureMatrix,
    labels: Vec<String>,
    mode: ClassFeatureMode,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format_version: u32,
    dtype: String,
    dim: usize,
    count: usize,
    labels: Vec<String>,
    mode: ClassFeatureMode,
    provenance: Provenance,
}

fn check_labels<S: AsRef<str>>(labels: &[S]) -> Result<(), BuildError> {
    if labels.is_empty() {
        return Err(BuildError::EmptyLabels);
    }
    let mut seen = HashSet::new();
    for l in labels {
        let l = l.as_ref();
        if l.is_empty() {
            return Err(PromptError::EmptyLabel.into());
        }
        if !seen.insert(l) {
            return Err(BuildError::DuplicateLabel(l.to_owned()));
        }
    }
    Ok(())
}

impl ClassifierModel {
    pub fn new(
        matrix: ClassFeatureMatrix,
        labels: Vec<String>,
        mode: ClassFeatureMode,
        provenance: Provenance,
    ) -> Result<Self, BuildError> {
        check_labels(&labels)?;
        if labels.len() != matrix.len() {
            return Err(BuildError::Format(format!(
                "{} labels for {} columns",
                labels.len(),
                matrix.len()
            )));
        }
        Ok(Self {
            matrix,
            labels,
            mode,
            provenance,
        })
    }

    pub fn matrix(&self) -> &ClassFeatureMatrix {
        &self.matrix
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mode(&self) -> &ClassFeatureMode {
        &self.mode
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// `ZSFM`, format version (u32 LE), header length (u32 LE), JSON header,
    /// then the columns as little-endian f64 in label order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            dtype: "f64le".into(),
            dim: self.dim(),
            count: self.num_classes(),
            labels: self.labels.clone(),
            mode: self.mode.clone(),
            provenance: self.provenance.clone(),
        };
        let header = serde_json::to_vec(&header).expect("model header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.dim() * self.num_classes());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for col in self.matrix.columns() {
            for v in col.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BuildError> {
        let bad = |m: &str| BuildError::Format(m.to_owned());
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated magic"))?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(word);
        if version != MODEL_FORMAT_VERSION {
            return Err(BuildError::Format(format!(
                "unsupported model format version {version}"
            )));
        }
        r.read_exact(&mut word)
            .map_err(|_| bad("truncated header length"))?;
        let header_len = u32::from_le_bytes(word) as usize;
        if r.len() < header_len {
            return Err(bad("truncated header"));
        }
        let (header, body) = r.split_at(header_len);
        let header: ModelHeader = serde_json::from_slice(header)
            .map_err(|e| BuildError::Format(format!("header: {e}")))?;
        if header.dtype != "f64le" {
            return Err(BuildError::Format(format!(
                "unsupported dtype {}",
                header.dtype
            )));
        }
        let expected = header.dim * header.count * 8;
        if body.len() != expected || header.dim == 0 {
            return Err(BuildError::Format(format!(
                "column data is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let columns = body
            .chunks_exact(header.dim * 8)
            .map(|col| {
                EmbeddingVector::new(
                    col.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(
            ClassFeatureMatrix::new(columns)?,
            header.labels,
            header.mode,
            header.provenance,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), BuildError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| BuildError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BuildError> {
        let bytes = std::fs::read(path).map_err(|source| BuildError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Normalized encoding of the bare label text.
pub fn build_label_feature(
    label: &str,
    encoder: &dyn EncoderBackend,
) -> Result<EmbeddingVector, BuildError> {
    if label.is_empty() {
        return Err(PromptError::EmptyLabel.into());
    }
    Ok(normalize(&encoder.encode_text(label)?)?)
}

/// Normalized encoding of the label rendered into `template`.
pub fn build_template_feature(
    label: &str,
    template: &LabelTemplate,
    encoder: &dyn EncoderBackend,
) -> Result<EmbeddingVector, BuildError> {
    let text = prompts::render_label_template(template, label)?;
    Ok(normalize(&encoder.encode_text(&text)?)?)
}

/// Generates `k` class descriptions (`k / 5` samples of each description
/// prompt at temperature 0.99) and returns the unnormalized mean of their
/// raw encodings.
pub fn description_mean(
    label: &str,
    k: usize,
    llm: &dyn LlmBackend,
    encoder: &dyn EncoderBackend,
) -> Result<EmbeddingVector, BuildError> {
    ClassFeatureMode::Descriptions { k }.validate()?;
    let prompts = prompts::render_class_description_prompts(label)?;
    let rounds = k / CLASS_DESCRIPTION_PROMPTS;
    let mut texts = Vec::with_capacity(k);
    let mut failed = Vec::new();
    for round in 0..rounds {
        for (i, prompt) in prompts.iter().enumerate() {
            let req = GenerateRequest::new(prompt, None, DESCRIPTION_TEMPERATURE)
                .with_sample(round as u32);
            match llm.generate(&req) {
                Ok(text) => texts.push(text),
                Err(e) => {
                    log::warn!(
                        "class description prompt {} for {label:?} failed: {e}",
                        i + 1
                    );
                    failed.push(i + 1);
                }
            }
        }
    }
    if texts.len() < k {
        failed.sort_unstable();
        failed.dedup();
        return Err(BuildError::PartialGeneration {
            label: label.to_owned(),
            obtained: texts.len(),
            expected: k,
            failed_prompts: failed,
        });
    }
    let encodings = texts
        .iter()
        .map(|t| encoder.encode_text(t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_vectors(&encodings)?)
}

/// Normalized mean description encoding, the column used in descriptions-only mode.
pub fn build_description_feature(
    label: &str,
    k: usize,
    llm: &dyn LlmBackend,
    encoder: &dyn EncoderBackend,
) -> Result<EmbeddingVector, BuildError> {
    Ok(normalize(&description_mean(label, k, llm, encoder)?)?)
}

/// The three per-class parts of a combined column.
#[derive(Debug, Clone)]
pub struct CombinedParts {
    pub label: EmbeddingVector,
    pub template: EmbeddingVector,
    pub description_mean: EmbeddingVector,
}

/// `normalize(label + template + description_mean)`.
pub fn build_combined_feature(parts: &CombinedParts) -> Result<EmbeddingVector, BuildError> {
    let sum = sum_vectors(&[
        parts.label.clone(),
        parts.template.clone(),
        parts.description_mean.clone(),
    ])?;
    Ok(normalize(&sum)?)
}

fn build_column(
    label: &str,
    mode: &ClassFeatureMode,
    backends: &Backends,
) -> Result<EmbeddingVector, BuildError> {
    let encoder = backends.encoder.as_ref();
    match mode {
        ClassFeatureMode::Labels => build_label_feature(label, encoder),
        ClassFeatureMode::Template { template } => build_template_feature(label, template, encoder),
        ClassFeatureMode::Descriptions { k } => {
            build_description_feature(label, *k, backends.llm.as_ref(), encoder)
        }
        ClassFeatureMode::Combined { k, template } => {
            let parts = CombinedParts {
                label: build_label_feature(label, encoder)?,
                template: build_template_feature(label, template, encoder)?,
                description_mean: description_mean(label, *k, backends.llm.as_ref(), encoder)?,
            };
            build_combined_feature(&parts)
        }
    }
}

/// One column per label, in label order. Labels are built concurrently on
/// up to `parallelism` threads.
pub fn build_classifier<S: AsRef<str> + Sync>(
    labels: &[S],
    mode: &ClassFeatureMode,
    backends: &Backends,
    parallelism: usize,
) -> Result<ClassifierModel, BuildError> {
    check_labels(labels)?;
    mode.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("thread pool builds");
    let columns: Vec<Result<EmbeddingVector, BuildError>> = pool.install(|| {
        labels
            .par_iter()
            .map(|l| build_column(l.as_ref(), mode, backends))
            .collect()
    });
    let columns = labels
        .iter()
        .zip(columns)
        .map(|(l, c)| {
            c.map_err(|source| BuildError::Label {
                label: l.as_ref().to_owned(),
                source: Box::new(source),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let provenance = Provenance {
        encoder: backends.encoder.identity(),
        llm: mode.uses_llm().then(|| backends.llm.identity()),
        prompt_version: prompts::asset_version().to_owned(),
    };
    ClassifierModel::new(
        ClassFeatureMatrix::new(columns)?,
        labels.iter().map(|l| l.as_ref().to_owned()).collect(),
        mode.clone(),
        provenance,
    )
}
