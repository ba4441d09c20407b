//! Occlusion attribution: mask image patches or drop words from the LLM
//! texts and measure how far the predicted class's score falls.

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, Backends};
use crate::classifier::ClassifierModel;
use crate::embedding::{argmax_index, normalize, EmbeddingVector, VectorError};
use crate::pipeline::{
    self, FeatureSelection, FusionStrategy, InferenceOptions, PipelineError, QueryFeatures,
    INPUT_SIZE,
};

pub const DEFAULT_KERNEL: u32 = 50;
pub const DEFAULT_STRIDE: u32 = 10;
pub const DEFAULT_GROWTH: u32 = 50;
pub const DEFAULT_MAX_KERNEL: u32 = 200;
pub const DEFAULT_START_WIDTH: usize = 3;
pub const DEFAULT_MIN_WIDTH: usize = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const DEFAULT_MASK_FILL: [u8; 3] = [128, 128, 128];

/// Heatmap tint colour and its opacity at full importance.
const TINT: [f64; 3] = [255.0, 0.0, 0.0];
const TINT_ALPHA: f64 = 0.6;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("image is {width}x{height}, smaller than the {kernel}px kernel")]
    DegenerateImage {
        width: u32,
        height: u32,
        kernel: u32,
    },
    #[error("grid is {rows}x{cols}, expected {expected_rows}x{expected_cols} for this image")]
    GridMismatch {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMaskSchedule {
    pub kernel: u32,
    pub stride: u32,
    pub growth: u32,
    pub max_kernel: u32,
}

impl Default for ImageMaskSchedule {
    fn default() -> Self {
        Self {
            kernel: DEFAULT_KERNEL,
            stride: DEFAULT_STRIDE,
            growth: DEFAULT_GROWTH,
            max_kernel: DEFAULT_MAX_KERNEL,
        }
    }
}

impl ImageMaskSchedule {
    pub fn validate(&self) -> Result<(), AttributionError> {
        if self.kernel == 0 || self.kernel > self.max_kernel {
            return Err(AttributionError::Schedule(format!(
                "kernel {} must be in 1..={}",
                self.kernel, self.max_kernel
            )));
        }
        if self.stride == 0 || self.growth == 0 {
            return Err(AttributionError::Schedule(
                "stride and growth must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Kernel sizes tried in order; the last one is clamped to `max_kernel`.
    pub fn kernels(&self) -> Vec<u32> {
        let mut out = vec![self.kernel];
        let mut k = self.kernel;
        while k < self.max_kernel {
            k = k.saturating_add(self.growth).min(self.max_kernel);
            out.push(k);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMaskSchedule {
    pub start_width: usize,
    pub min_width: usize,
}

impl Default for TextMaskSchedule {
    fn default() -> Self {
        Self {
            start_width: DEFAULT_START_WIDTH,
            min_width: DEFAULT_MIN_WIDTH,
        }
    }
}

impl TextMaskSchedule {
    pub fn validate(&self) -> Result<(), AttributionError> {
        if self.min_width == 0 || self.start_width < self.min_width {
            return Err(AttributionError::Schedule(format!(
                "need start_width ({}) >= min_width ({}) >= 1",
                self.start_width, self.min_width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionSettings {
    pub image: ImageMaskSchedule,
    pub text: TextMaskSchedule,
    /// A position counts as highlighted when its importance exceeds this.
    pub threshold: f64,
    pub mask_fill: [u8; 3],
    pub strategy: FusionStrategy,
    pub parallelism: usize,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self {
            image: ImageMaskSchedule::default(),
            text: TextMaskSchedule::default(),
            threshold: DEFAULT_THRESHOLD,
            mask_fill: DEFAULT_MASK_FILL,
            strategy: FusionStrategy::AverageFeature,
            parallelism: crate::classifier::DEFAULT_PARALLELISM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageRound {
    pub kernel: u32,
    pub rows: usize,
    pub cols: usize,
    pub max_importance: f64,
    pub highlighted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextRound {
    /// Window width after clamping to the text length.
    pub width: usize,
    pub windows: usize,
    pub max_importance: f64,
    pub highlighted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttribution {
    /// Row-major importance per kernel position of the final round.
    pub grid: Vec<Vec<f64>>,
    /// Positions whose masking changed the predicted class.
    pub flips: Vec<Vec<bool>>,
    pub kernel_used: u32,
    pub stride: u32,
    pub rounds: Vec<ImageRound>,
}

impl ImageAttribution {
    pub fn highlighted(&self, threshold: f64) -> bool {
        self.grid.iter().flatten().any(|&v| v > threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    pub word: String,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TextAttribution {
    pub tokens: Vec<TokenImportance>,
    /// Final window width, 0 for an empty text.
    pub width_used: usize,
    pub rounds: Vec<TextRound>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMaps {
    pub description: Vec<TokenImportance>,
    pub prediction: Vec<TokenImportance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRounds {
    pub description: Vec<TextRound>,
    pub prediction: Vec<TextRound>,
}

/// Full attribution result; also the heatmap sidecar format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub baseline_index: usize,
    pub baseline_label: String,
    pub baseline_score: f64,
    pub grid: Vec<Vec<f64>>,
    pub flips: Vec<Vec<bool>>,
    pub kernel_used: u32,
    pub stride: u32,
    pub image_rounds: Vec<ImageRound>,
    pub tokens: TokenMaps,
    pub text_widths: TextWidths,
    pub text_rounds: TextRounds,
    pub settings: AttributionSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextWidths {
    pub description: usize,
    pub prediction: usize,
}

impl AttributionMap {
    pub fn image_highlighted(&self) -> bool {
        self.grid
            .iter()
            .flatten()
            .any(|&v| v > self.settings.threshold)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("attribution map serializes")
    }
}

/// Kernel origins along one axis: 0, s, 2s, … while inside the image.
pub fn positions(extent: u32, stride: u32) -> Vec<u32> {
    (0..extent).step_by(stride.max(1) as usize).collect()
}

/// Pixel rectangle of a patch, clipped to the image: (x0, y0, x1, y1) exclusive.
pub fn patch_rect(x: u32, y: u32, kernel: u32, width: u32, height: u32) -> (u32, u32, u32, u32) {
    (
        x,
        y,
        x.saturating_add(kernel).min(width),
        y.saturating_add(kernel).min(height),
    )
}

/// Copy of `img` with the clipped patch filled.
pub fn mask_patch(img: &RgbImage, x: u32, y: u32, kernel: u32, fill: [u8; 3]) -> RgbImage {
    let mut out = img.clone();
    let (x0, y0, x1, y1) = patch_rect(x, y, kernel, img.width(), img.height());
    for py in y0..y1 {
        for px in x0..x1 {
            out.put_pixel(px, py, Rgb(fill));
        }
    }
    out
}

/// Holds the features that stay fixed while one input is perturbed.
struct Rescorer<'a> {
    model: &'a ClassifierModel,
    strategy: FusionStrategy,
    baseline_index: usize,
    baseline_score: f64,
}

impl Rescorer<'_> {
    /// (importance, flipped) for a perturbed feature set.
    fn drop(&self, features: &[&EmbeddingVector]) -> Result<(f64, bool), AttributionError> {
        let scores = pipeline::fused_scores(features, self.model, self.strategy)?;
        let flipped = argmax_index(&scores)? != self.baseline_index;
        Ok((
            self.baseline_score - scores.as_slice()[self.baseline_index],
            flipped,
        ))
    }
}

fn in_pool<T: Send>(parallelism: usize, job: impl FnOnce() -> T + Send) -> T {
    pipeline::run_pool(parallelism, job)
}

fn attribute_image_inner(
    base: &RgbImage,
    features: &QueryFeatures,
    rescorer: &Rescorer<'_>,
    backends: &Backends,
    settings: &AttributionSettings,
) -> Result<ImageAttribution, AttributionError> {
    let schedule = settings.image;
    let (w, h) = base.dimensions();
    if w < schedule.kernel || h < schedule.kernel {
        return Err(AttributionError::DegenerateImage {
            width: w,
            height: h,
            kernel: schedule.kernel,
        });
    }
    let xs = positions(w, schedule.stride);
    let ys = positions(h, schedule.stride);
    let others: Vec<&EmbeddingVector> =
        [&features.description_feature, &features.prediction_feature]
            .into_iter()
            .flatten()
            .collect();

    let mut rounds = Vec::new();
    let mut last = None;
    for kernel in schedule.kernels() {
        let cells: Vec<(u32, u32)> = ys
            .iter()
            .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
            .collect();
        let results: Vec<Result<(f64, bool), AttributionError>> =
            in_pool(settings.parallelism, || {
                cells
                    .par_iter()
                    .map(|&(x, y)| {
                        let masked = pipeline::encode_png(&mask_patch(
                            base,
                            x,
                            y,
                            kernel,
                            settings.mask_fill,
                        ));
                        let feature = normalize(&backends.encoder.encode_image(&masked)?)?;
                        let mut all = vec![&feature];
                        all.extend(others.iter().copied());
                        rescorer.drop(&all)
                    })
                    .collect()
            });
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        let grid: Vec<Vec<f64>> = results
            .chunks(xs.len())
            .map(|r| r.iter().map(|p| p.0).collect())
            .collect();
        let flips: Vec<Vec<bool>> = results
            .chunks(xs.len())
            .map(|r| r.iter().map(|p| p.1).collect())
            .collect();
        let highlighted = results.iter().filter(|p| p.0 > settings.threshold).count();
        let max_importance = results
            .iter()
            .map(|p| p.0)
            .fold(f64::NEG_INFINITY, f64::max);
        rounds.push(ImageRound {
            kernel,
            rows: ys.len(),
            cols: xs.len(),
            max_importance,
            highlighted,
        });
        last = Some((kernel, grid, flips));
        if highlighted > 0 {
            break;
        }
        log::info!("no patch above {} at kernel {kernel}", settings.threshold);
    }
    let (kernel_used, grid, flips) = last.expect("at least one kernel size");
    Ok(ImageAttribution {
        grid,
        flips,
        kernel_used,
        stride: schedule.stride,
        rounds,
    })
}

/// Which LLM text is being perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextRole {
    Description,
    Prediction,
}

fn attribute_text_inner(
    text: &str,
    role: TextRole,
    features: &QueryFeatures,
    rescorer: &Rescorer<'_>,
    backends: &Backends,
    settings: &AttributionSettings,
) -> Result<TextAttribution, AttributionError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let n = words.len();
    if n == 0 {
        return Ok(TextAttribution::default());
    }
    let other_text = match role {
        TextRole::Description => &features.prediction_feature,
        TextRole::Prediction => &features.description_feature,
    };
    let fixed: Vec<&EmbeddingVector> = [&features.image_feature, other_text]
        .into_iter()
        .flatten()
        .collect();

    let mut rounds = Vec::new();
    let mut importance = vec![0.0; n];
    let mut width_used = 0;
    for width in (settings.text.min_width..=settings.text.start_width).rev() {
        let width = width.min(n);
        let starts: Vec<usize> = (0..=n - width).collect();
        let drops: Vec<Result<f64, AttributionError>> = in_pool(settings.parallelism, || {
            starts
                .par_iter()
                .map(|&s| {
                    let kept: Vec<&str> = words[..s]
                        .iter()
                        .chain(&words[s + width..])
                        .copied()
                        .collect();
                    let mut all = fixed.clone();
                    let feature;
                    if !kept.is_empty() {
                        feature = normalize(&backends.encoder.encode_text(&kept.join(" "))?)?;
                        all.push(&feature);
                    }
                    // With every word removed the text contributes no feature.
                    Ok(rescorer.drop(&all)?.0)
                })
                .collect()
        });
        let drops = drops.into_iter().collect::<Result<Vec<_>, _>>()?;
        importance = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(width - 1);
                let hi = i.min(n - width);
                drops[lo..=hi]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let highlighted = drops.iter().filter(|&&d| d > settings.threshold).count();
        let max_importance = drops.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rounds.push(TextRound {
            width,
            windows: drops.len(),
            max_importance,
            highlighted,
        });
        width_used = width;
        if highlighted > 0 {
            break;
        }
    }
    let tokens = words
        .iter()
        .zip(importance)
        .map(|(w, importance)| TokenImportance {
            word: (*w).to_owned(),
            importance,
        })
        .collect();
    Ok(TextAttribution {
        tokens,
        width_used,
        rounds,
    })
}

/// Unmasked run: prepared image, its three features and the baseline prediction.
pub struct AttributionBase {
    pub image: RgbImage,
    pub features: QueryFeatures,
    pub baseline_index: usize,
    pub baseline_label: String,
    pub baseline_score: f64,
}

pub fn baseline(
    image: &[u8],
    model: &ClassifierModel,
    backends: &Backends,
    strategy: FusionStrategy,
) -> Result<AttributionBase, AttributionError> {
    let rgb = pipeline::prepare_rgb(image)?;
    let options = InferenceOptions::new(FeatureSelection::ALL, strategy);
    let features =
        pipeline::extract_prepared(&pipeline::encode_png(&rgb), model, &options, backends)?;
    let prediction = pipeline::predict(features.clone(), model, strategy)?;
    Ok(AttributionBase {
        image: rgb,
        features,
        baseline_index: prediction.class_index,
        baseline_score: prediction.scores.as_slice()[prediction.class_index],
        baseline_label: prediction.class_label,
    })
}

fn rescorer<'a>(
    base: &AttributionBase,
    model: &'a ClassifierModel,
    strategy: FusionStrategy,
) -> Rescorer<'a> {
    Rescorer {
        model,
        strategy,
        baseline_index: base.baseline_index,
        baseline_score: base.baseline_score,
    }
}

/// Image part: masks patches of the 224×224 input, DF and PF held fixed.
pub fn attribute_image(
    base: &AttributionBase,
    model: &ClassifierModel,
    backends: &Backends,
    settings: &AttributionSettings,
) -> Result<ImageAttribution, AttributionError> {
    settings.image.validate()?;
    attribute_image_inner(
        &base.image,
        &base.features,
        &rescorer(base, model, settings.strategy),
        backends,
        settings,
    )
}

/// Word importances for one LLM text, image and the other text held fixed.
pub fn attribute_text(
    base: &AttributionBase,
    role: TextRole,
    model: &ClassifierModel,
    backends: &Backends,
    settings: &AttributionSettings,
) -> Result<TextAttribution, AttributionError> {
    settings.text.validate()?;
    let text = match role {
        TextRole::Description => base.features.description_text.as_deref(),
        TextRole::Prediction => base.features.prediction_text.as_deref(),
    }
    .unwrap_or("");
    attribute_text_inner(
        text,
        role,
        &base.features,
        &rescorer(base, model, settings.strategy),
        backends,
        settings,
    )
}

/// Image and both text attributions for one image.
pub fn attribute(
    image: &[u8],
    model: &ClassifierModel,
    backends: &Backends,
    settings: &AttributionSettings,
) -> Result<AttributionMap, AttributionError> {
    settings.image.validate()?;
    settings.text.validate()?;
    let base = baseline(image, model, backends, settings.strategy)?;
    let img = attribute_image(&base, model, backends, settings)?;
    let description = attribute_text(&base, TextRole::Description, model, backends, settings)?;
    let prediction = attribute_text(&base, TextRole::Prediction, model, backends, settings)?;
    Ok(AttributionMap {
        baseline_index: base.baseline_index,
        baseline_label: base.baseline_label,
        baseline_score: base.baseline_score,
        grid: img.grid,
        flips: img.flips,
        kernel_used: img.kernel_used,
        stride: img.stride,
        image_rounds: img.rounds,
        tokens: TokenMaps {
            description: description.tokens,
            prediction: prediction.tokens,
        },
        text_widths: TextWidths {
            description: description.width_used,
            prediction: prediction.width_used,
        },
        text_rounds: TextRounds {
            description: description.rounds,
            prediction: prediction.rounds,
        },
        settings: *settings,
    })
}

/// Per-pixel tint strength in [0, 1]: the largest normalized positive
/// importance among the patches covering the pixel.
pub fn intensity_map(
    map: &AttributionMap,
    width: u32,
    height: u32,
) -> Result<Vec<f64>, AttributionError> {
    let xs = positions(width, map.stride);
    let ys = positions(height, map.stride);
    let rows = map.grid.len();
    let cols = map.grid.first().map_or(0, Vec::len);
    if rows != ys.len() || cols != xs.len() || map.grid.iter().any(|r| r.len() != cols) {
        return Err(AttributionError::GridMismatch {
            rows,
            cols,
            expected_rows: ys.len(),
            expected_cols: xs.len(),
        });
    }
    let mut out = vec![0.0f64; (width * height) as usize];
    let peak = map.grid.iter().flatten().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(out);
    }
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            let v = map.grid[r][c].max(0.0) / peak;
            if v == 0.0 {
                continue;
            }
            let (x0, y0, x1, y1) = patch_rect(x, y, map.kernel_used, width, height);
            for py in y0..y1 {
                for px in x0..x1 {
                    let cell = &mut out[(py * width + px) as usize];
                    *cell = cell.max(v);
                }
            }
        }
    }
    Ok(out)
}

/// PNG of the prepared input image with importances blended in as a red tint.
pub fn render_heatmap(map: &AttributionMap, image: &[u8]) -> Result<Vec<u8>, AttributionError> {
    let mut img = pipeline::prepare_rgb(image)?;
    let (w, h) = img.dimensions();
    debug_assert_eq!((w, h), (INPUT_SIZE, INPUT_SIZE));
    let intensity = intensity_map(map, w, h)?;
    for (i, px) in img.pixels_mut().enumerate() {
        let a = TINT_ALPHA * intensity[i];
        if a == 0.0 {
            continue;
        }
        for (ch, tint) in px.0.iter_mut().zip(TINT) {
            *ch = ((1.0 - a) * f64::from(*ch) + a * tint)
                .round()
                .clamp(0.0, 255.0) as u8;
        }
    }
    Ok(pipeline::encode_png(&img))
}
