//! The fixed prompt set and the class label templates.
//!
//! Prompt bodies live in `assets/prompts.json`, compiled into the binary, so
//! the exact bytes sent to the LLM can be audited and carry a version tag
//! that ends up in model provenance.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CLASSES_PLACEHOLDER: &str = "{classes}";
pub const CLASS_LABEL_PLACEHOLDER: &str = "{class_label}";

/// Number of class-description prompts; description sample counts must be a multiple of it.
pub const CLASS_DESCRIPTION_PROMPTS: usize = 5;

const PROMPT_ASSET: &str = include_str!("../assets/prompts.json");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("class label set is empty")]
    EmptyLabelSet,
    #[error("class label is empty")]
    EmptyLabel,
    #[error("label template {pattern:?} must contain exactly one {{class_label}} placeholder")]
    BadTemplate { pattern: String },
}

#[derive(Debug, Deserialize)]
struct PromptAsset {
    version: String,
    classification: String,
    description: String,
    class_descriptions: Vec<String>,
    label_templates: LabelTemplateAsset,
}

#[derive(Debug, Deserialize)]
struct LabelTemplateAsset {
    default: String,
    pets: String,
    dtd: String,
    cars: String,
}

fn asset() -> &'static PromptAsset {
    static ASSET: OnceLock<PromptAsset> = OnceLock::new();
    ASSET.get_or_init(|| {
        let asset: PromptAsset =
            serde_json::from_str(PROMPT_ASSET).expect("embedded prompt asset is valid JSON");
        assert_eq!(asset.class_descriptions.len(), CLASS_DESCRIPTION_PROMPTS);
        asset
    })
}

/// Version tag of the embedded prompt asset.
pub fn asset_version() -> &'static str {
    &asset().version
}

/// Identifies one of the fixed prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    Classification,
    Description,
    ClassDescription(u8),
}

/// Raw body of a fixed prompt, placeholders intact.
pub fn body(id: PromptId) -> &'static str {
    let a = asset();
    match id {
        PromptId::Classification => &a.classification,
        PromptId::Description => &a.description,
        PromptId::ClassDescription(i) => {
            let i = usize::from(i);
            assert!(
                (1..=CLASS_DESCRIPTION_PROMPTS).contains(&i),
                "class description prompts are numbered 1..=5"
            );
            &a.class_descriptions[i - 1]
        }
    }
}

/// The image description prompt. It takes no parameters.
pub fn description_prompt() -> &'static str {
    body(PromptId::Description)
}

/// Classification prompt listing every label, comma separated, in order.
pub fn render_classification_prompt<S: AsRef<str>>(labels: &[S]) -> Result<String, PromptError> {
    if labels.is_empty() {
        return Err(PromptError::EmptyLabelSet);
    }
    if labels.iter().any(|l| l.as_ref().is_empty()) {
        return Err(PromptError::EmptyLabel);
    }
    let joined = labels
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(", ");
    Ok(body(PromptId::Classification).replace(CLASSES_PLACEHOLDER, &joined))
}

/// Single query asking for both the description and the class.
pub fn render_combined_prompt<S: AsRef<str>>(labels: &[S]) -> Result<String, PromptError> {
    let classification = render_classification_prompt(labels)?;
    Ok(format!("{}\n{}", description_prompt(), classification))
}

/// The five class-description prompts for `label`, in table order.
pub fn render_class_description_prompts(label: &str) -> Result<Vec<String>, PromptError> {
    if label.is_empty() {
        return Err(PromptError::EmptyLabel);
    }
    Ok((1..=CLASS_DESCRIPTION_PROMPTS as u8)
        .map(|i| body(PromptId::ClassDescription(i)).replace(CLASS_LABEL_PLACEHOLDER, label))
        .collect())
}

/// A class label template such as `A photo of {class_label}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTemplate {
    pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_tag: Option<String>,
}

impl LabelTemplate {
    pub fn new(
        pattern: impl Into<String>,
        dataset_tag: Option<String>,
    ) -> Result<Self, PromptError> {
        let pattern = pattern.into();
        if pattern.matches(CLASS_LABEL_PLACEHOLDER).count() != 1 {
            return Err(PromptError::BadTemplate { pattern });
        }
        Ok(Self {
            pattern,
            dataset_tag,
        })
    }

    /// `A photo of {class_label}`, used for every dataset without an override.
    pub fn default_template() -> Self {
        Self::new(asset().label_templates.default.clone(), None).expect("asset template is valid")
    }

    /// The override for a dataset tag (`pets`, `dtd`, `cars`), or the default.
    pub fn for_dataset(tag: &str) -> Self {
        let t = &asset().label_templates;
        let pattern = match tag.to_ascii_lowercase().as_str() {
            "pets" => &t.pets,
            "dtd" => &t.dtd,
            "cars" => &t.cars,
            _ => return Self::default_template(),
        };
        Self::new(pattern.clone(), Some(tag.to_ascii_lowercase())).expect("asset template is valid")
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn dataset_tag(&self) -> Option<&str> {
        self.dataset_tag.as_deref()
    }
}

impl Default for LabelTemplate {
    fn default() -> Self {
        Self::default_template()
    }
}

pub fn render_label_template(template: &LabelTemplate, label: &str) -> Result<String, PromptError> {
    if label.is_empty() {
        return Err(PromptError::EmptyLabel);
    }
    Ok(template.pattern.replace(CLASS_LABEL_PLACEHOLDER, label))
}
