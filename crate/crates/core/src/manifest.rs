//! Dataset manifests: label list plus image records with ground truth.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{LabelTemplate, PromptError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest has no labels")]
    NoLabels,
    #[error("duplicate label {0:?} in manifest")]
    DuplicateLabel(String),
    #[error("record {record}: label index {index} out of range for {labels} labels")]
    IndexOutOfRange {
        record: usize,
        index: usize,
        labels: usize,
    },
    #[error("record {record}: image {path} does not exist")]
    MissingImage { record: usize, path: PathBuf },
    #[error("template override: {0}")]
    Template(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: PathBuf,
    pub label_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_override: Option<String>,
    pub records: Vec<ImageRecord>,
    /// Directory relative image paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, labels: Vec<String>, records: Vec<ImageRecord>) -> Self {
        Self {
            name: name.into(),
            labels,
            template_override: None,
            records,
            base_dir: PathBuf::new(),
        }
    }

    /// Checks label uniqueness, index ranges and the template override.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.labels.is_empty() {
            return Err(ManifestError::NoLabels);
        }
        let mut seen = HashSet::new();
        for l in &self.labels {
            if !seen.insert(l.as_str()) {
                return Err(ManifestError::DuplicateLabel(l.clone()));
            }
        }
        for (record, r) in self.records.iter().enumerate() {
            if r.label_index >= self.labels.len() {
                return Err(ManifestError::IndexOutOfRange {
                    record,
                    index: r.label_index,
                    labels: self.labels.len(),
                });
            }
        }
        self.label_template()?;
        Ok(())
    }

    /// Additionally requires every image file to exist.
    pub fn validate_strict(&self) -> Result<(), ManifestError> {
        self.validate()?;
        for (record, r) in self.records.iter().enumerate() {
            let path = self.image_path(r);
            if !path.is_file() {
                return Err(ManifestError::MissingImage { record, path });
            }
        }
        Ok(())
    }

    pub fn image_path(&self, record: &ImageRecord) -> PathBuf {
        if record.image.is_absolute() {
            record.image.clone()
        } else {
            self.base_dir.join(&record.image)
        }
    }

    /// The dataset's label template: the override if present, else the default.
    pub fn label_template(&self) -> Result<LabelTemplate, ManifestError> {
        match &self.template_override {
            Some(p) => Ok(LabelTemplate::new(p.clone(), Some(self.name.clone()))?),
            None => Ok(LabelTemplate::default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Reads and validates a manifest; relative image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Unreadable {
        path: path.to_owned(),
        source,
    })?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

/// Like [`load_manifest`], but every image must exist.
pub fn load_manifest_strict(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let m = load_manifest(path)?;
    m.validate_strict()?;
    Ok(m)
}
