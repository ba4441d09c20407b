//! Deterministic offline backends.
//!
//! `MockEncoder` maps every input to a unit vector derived from a keyed
//! PRNG seeded with the input digest, unless a fixture says otherwise.
//! Fixtures come in a few flavors so tests can build scenes with a known
//! answer: exact text or image lookups, keyword sums for text, and colour
//! markers for images.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_temperature, BackendError, EncoderBackend, GenerateRequest, LlmBackend};
use crate::baselines::tokenize;
use crate::embedding::{normalize, EmbeddingVector};

type Digest32 = [u8; 32];

fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

fn digest_from_hex(hex_str: &str) -> Result<Digest32, String> {
    let bytes = hex::decode(hex_str).map_err(|e| format!("bad sha256 hex {hex_str:?}: {e}"))?;
    bytes
        .try_into()
        .map_err(|_| format!("sha256 digest {hex_str:?} must be 32 bytes"))
}

/// Pixels of exactly this colour pull the image feature towards `vector`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMarker {
    pub rgb: [u8; 3],
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
    text_table: HashMap<String, EmbeddingVector>,
    image_table: HashMap<Digest32, EmbeddingVector>,
    keywords: HashMap<String, EmbeddingVector>,
    markers: Vec<([u8; 3], EmbeddingVector)>,
    background: Option<EmbeddingVector>,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "mock encoder dimension must be positive");
        Self {
            dim,
            seed,
            text_table: HashMap::new(),
            image_table: HashMap::new(),
            keywords: HashMap::new(),
            markers: Vec::new(),
            background: None,
        }
    }

    fn checked(&self, vector: Vec<f64>) -> Result<EmbeddingVector, BackendError> {
        if vector.len() != self.dim {
            return Err(BackendError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        Ok(EmbeddingVector::new(vector)?)
    }

    /// Exact-match output for `text`.
    pub fn with_text(
        mut self,
        text: impl Into<String>,
        vector: Vec<f64>,
    ) -> Result<Self, BackendError> {
        let v = self.checked(vector)?;
        self.text_table.insert(text.into(), v);
        Ok(self)
    }

    /// Exact-match output for the given image bytes.
    pub fn with_image(mut self, image: &[u8], vector: Vec<f64>) -> Result<Self, BackendError> {
        let v = self.checked(vector)?;
        self.image_table.insert(sha256(image), v);
        Ok(self)
    }

    fn with_image_digest(
        mut self,
        digest: Digest32,
        vector: Vec<f64>,
    ) -> Result<Self, BackendError> {
        let v = self.checked(vector)?;
        self.image_table.insert(digest, v);
        Ok(self)
    }

    /// Texts without an exact entry become the sum of their keyword vectors
    /// plus the background vector.
    pub fn with_keyword(mut self, word: &str, vector: Vec<f64>) -> Result<Self, BackendError> {
        let v = self.checked(vector)?;
        self.keywords.insert(word.to_lowercase(), v);
        Ok(self)
    }

    /// Images without an exact entry become the pixel-fraction-weighted sum
    /// of marker vectors, with non-marker pixels weighting the background.
    pub fn with_marker(mut self, rgb: [u8; 3], vector: Vec<f64>) -> Result<Self, BackendError> {
        let v = self.checked(vector)?;
        self.markers.push((rgb, v));
        Ok(self)
    }

    pub fn with_background(mut self, vector: Vec<f64>) -> Result<Self, BackendError> {
        self.background = Some(self.checked(vector)?);
        Ok(self)
    }

    fn background_vector(&self) -> EmbeddingVector {
        self.background
            .clone()
            .unwrap_or_else(|| self.hashed(b"background", b""))
    }

    /// Unit vector from a ChaCha stream keyed by `seed ∥ kind ∥ sha256(bytes)`.
    pub fn hashed(&self, kind: &[u8], bytes: &[u8]) -> EmbeddingVector {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(kind);
        hasher.update([0u8]);
        hasher.update(bytes);
        let mut rng = ChaCha8Rng::from_seed(hasher.finalize().into());
        loop {
            let values: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = EmbeddingVector::new(values).expect("uniform samples are finite");
            if let Ok(n) = normalize(&v) {
                return n;
            }
        }
    }

    fn keyword_encoding(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        let mut acc = self.background_vector().into_inner();
        for token in tokenize(text).tokens() {
            if let Some(v) = self.keywords.get(token) {
                for (a, b) in acc.iter_mut().zip(v.as_slice()) {
                    *a += b;
                }
            }
        }
        Ok(normalize(&EmbeddingVector::new(acc)?)?)
    }

    fn marker_encoding(&self, image: &[u8]) -> Result<EmbeddingVector, BackendError> {
        let rgb = image::load_from_memory(image)
            .map_err(|e| BackendError::InvalidImage(e.to_string()))?
            .to_rgb8();
        let total = f64::from(rgb.width()) * f64::from(rgb.height());
        let mut counts = vec![0u64; self.markers.len()];
        let mut other = 0u64;
        for px in rgb.pixels() {
            match self.markers.iter().position(|(c, _)| *c == px.0) {
                Some(i) => counts[i] += 1,
                None => other += 1,
            }
        }
        let mut acc: Vec<f64> = self
            .background_vector()
            .as_slice()
            .iter()
            .map(|b| b * other as f64 / total)
            .collect();
        for ((_, v), &count) in self.markers.iter().zip(&counts) {
            let w = count as f64 / total;
            for (a, b) in acc.iter_mut().zip(v.as_slice()) {
                *a += w * b;
            }
        }
        Ok(normalize(&EmbeddingVector::new(acc)?)?)
    }
}

impl EncoderBackend for MockEncoder {
    fn identity(&self) -> String {
        format!("mock-encoder:dim={}:seed={}", self.dim, self.seed)
    }

    fn reported_dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if let Some(v) = self.text_table.get(text) {
            return Ok(normalize(v)?);
        }
        if !self.keywords.is_empty() {
            return self.keyword_encoding(text);
        }
        Ok(self.hashed(b"text", text.as_bytes()))
    }

    fn encode_image(&self, image: &[u8]) -> Result<EmbeddingVector, BackendError> {
        if let Some(v) = self.image_table.get(&sha256(image)) {
            return Ok(normalize(v)?);
        }
        if !self.markers.is_empty() {
            return self.marker_encoding(image);
        }
        Ok(self.hashed(b"image", image))
    }
}

#[derive(Debug, Clone)]
enum MockReply {
    Text(Vec<String>),
    Refuse,
}

/// Fixture-table LLM. Unknown requests answer `mock-response-<digest prefix>`.
#[derive(Debug, Clone, Default)]
pub struct MockLlm {
    replies: HashMap<Digest32, MockReply>,
    refuse_all: HashSet<String>,
}

impl MockLlm {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(prompt: &str, image_digest: Option<&Digest32>) -> Digest32 {
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        if let Some(d) = image_digest {
            hasher.update([0u8]);
            hasher.update(d);
        }
        hasher.finalize().into()
    }

    pub fn request_key(prompt: &str, image: Option<&[u8]>) -> [u8; 32] {
        let digest = image.map(sha256);
        Self::key(prompt, digest.as_ref())
    }

    /// Fixed reply for `(prompt, image)`.
    pub fn with_reply(self, prompt: &str, image: Option<&[u8]>, reply: impl Into<String>) -> Self {
        self.with_variants(prompt, image, vec![reply.into()])
    }

    /// Replies for `(prompt, image)`. Temperature 0 always answers the first;
    /// otherwise `variants[sample % len]`.
    pub fn with_variants(
        mut self,
        prompt: &str,
        image: Option<&[u8]>,
        variants: Vec<String>,
    ) -> Self {
        assert!(!variants.is_empty(), "at least one reply variant");
        self.replies
            .insert(Self::request_key(prompt, image), MockReply::Text(variants));
        self
    }

    /// `(prompt, image)` answers with a safety refusal.
    pub fn with_refusal(mut self, prompt: &str, image: Option<&[u8]>) -> Self {
        self.replies
            .insert(Self::request_key(prompt, image), MockReply::Refuse);
        self
    }

    /// Every request whose prompt equals `prompt` is refused, regardless of image.
    pub fn refusing_prompt(mut self, prompt: &str) -> Self {
        self.refuse_all.insert(prompt.to_owned());
        self
    }

    fn with_digest_reply(mut self, key: Digest32, reply: MockReply) -> Self {
        self.replies.insert(key, reply);
        self
    }
}

impl LlmBackend for MockLlm {
    fn identity(&self) -> String {
        "mock-llm".to_owned()
    }

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, BackendError> {
        check_temperature(request.temperature)?;
        if self.refuse_all.contains(request.prompt) {
            return Err(BackendError::SafetyRefusal("mock refusal".into()));
        }
        let key = Self::request_key(request.prompt, request.image);
        match self.replies.get(&key) {
            Some(MockReply::Refuse) => Err(BackendError::SafetyRefusal("mock refusal".into())),
            Some(MockReply::Text(variants)) => {
                let i = if request.temperature == 0.0 {
                    0
                } else {
                    request.sample as usize % variants.len()
                };
                Ok(variants[i].clone())
            }
            None => {
                let prefix = hex::encode(&key[..3]);
                if request.temperature == 0.0 {
                    Ok(format!("mock-response-{prefix}"))
                } else {
                    Ok(format!("mock-response-{prefix}-s{}", request.sample))
                }
            }
        }
    }
}

/// Points at an image either by file (resolved and prepared by the loader)
/// or by the SHA-256 of the prepared bytes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageVectorFixture {
    #[serde(flatten)]
    pub image: ImageRef,
    pub vector: Vec<f64>,
}

/// One LLM fixture entry. `prompt` may be `@description` for the fixed
/// description prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmFixture {
    pub prompt: String,
    #[serde(flatten)]
    pub image: ImageRef,
    #[serde(default)]
    pub responses: Vec<String>,
    #[serde(default)]
    pub refuse: bool,
}

/// JSON description of a mock backend pair, as read by `--mock-fixtures`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixtures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default)]
    pub text_vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub keyword_vectors: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub image_vectors: Vec<ImageVectorFixture>,
    #[serde(default)]
    pub image_markers: Vec<ImageMarker>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_background: Option<Vec<f64>>,
    #[serde(default)]
    pub llm: Vec<LlmFixture>,
}

impl MockFixtures {
    /// Reads a fixture file. Image paths are relative to the file.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut fixtures: MockFixtures =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let absolutize = |r: &mut ImageRef| {
            if let Some(p) = r.image.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fixtures
            .image_vectors
            .iter_mut()
            .for_each(|f| absolutize(&mut f.image));
        fixtures
            .llm
            .iter_mut()
            .for_each(|f| absolutize(&mut f.image));
        Ok(fixtures)
    }

    fn resolve(image: &ImageRef) -> Result<Option<Digest32>, String> {
        match (&image.image, &image.image_sha256) {
            (Some(path), _) => {
                let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
                let prepared = crate::pipeline::prepare_image(&raw)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(Some(sha256(&prepared)))
            }
            (None, Some(hex_str)) => digest_from_hex(hex_str).map(Some),
            (None, None) => Ok(None),
        }
    }

    /// Builds the backend pair. `dim` applies when the file does not set one.
    pub fn build(&self, dim: usize, seed: u64) -> Result<(MockEncoder, MockLlm), String> {
        let dim = self.dim.unwrap_or(dim);
        let err = |e: BackendError| e.to_string();
        let mut enc = MockEncoder::new(dim, seed);
        for (text, v) in &self.text_vectors {
            enc = enc.with_text(text.clone(), v.clone()).map_err(err)?;
        }
        for (word, v) in &self.keyword_vectors {
            enc = enc.with_keyword(word, v.clone()).map_err(err)?;
        }
        for fixture in &self.image_vectors {
            let digest =
                Self::resolve(&fixture.image)?.ok_or("image vector fixture needs an image")?;
            enc = enc
                .with_image_digest(digest, fixture.vector.clone())
                .map_err(err)?;
        }
        for m in &self.image_markers {
            enc = enc.with_marker(m.rgb, m.vector.clone()).map_err(err)?;
        }
        if let Some(bg) = &self.image_background {
            enc = enc.with_background(bg.clone()).map_err(err)?;
        }
        let mut llm = MockLlm::new();
        for f in &self.llm {
            let prompt = match f.prompt.as_str() {
                "@description" => crate::prompts::description_prompt().to_owned(),
                other => other.to_owned(),
            };
            let digest = Self::resolve(&f.image)?;
            let key = MockLlm::key(&prompt, digest.as_ref());
            let reply = if f.refuse {
                MockReply::Refuse
            } else if f.responses.is_empty() {
                return Err(format!("LLM fixture for {prompt:?} has no responses"));
            } else {
                MockReply::Text(f.responses.clone())
            };
            llm = llm.with_digest_reply(key, reply);
        }
        Ok((enc, llm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashed_vectors_are_deterministic_unit() {
        let enc = MockEncoder::new(32, 7);
        let a = enc.encode_text("a photo of a cat").unwrap();
        let b = enc.encode_text("a photo of a cat").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert_eq!(a.dim(), 32);
        for v in a.as_slice() {
            assert!(v.abs() < 1.0);
        }
        // text and image inputs with the same bytes live in different streams
        assert_ne!(enc.encode_image(b"a photo of a cat").unwrap(), a);
        // the seed keys the stream
        assert_ne!(
            MockEncoder::new(32, 8)
                .encode_text("a photo of a cat")
                .unwrap(),
            a
        );
    }

    #[test]
    fn distinct_corpus_gives_distinct_vectors() {
        let enc = MockEncoder::new(16, 0);
        let corpus: Vec<String> = (0..100)
            .map(|i| format!("fixture string number {i}"))
            .collect();
        let vectors: Vec<_> = corpus.iter().map(|s| enc.encode_text(s).unwrap()).collect();
        for i in 0..vectors.len() {
            assert!((vectors[i].norm() - 1.0).abs() < 1e-6);
            for j in i + 1..vectors.len() {
                assert_ne!(vectors[i].as_slice(), vectors[j].as_slice(), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn exact_fixtures_are_normalized() {
        let enc = MockEncoder::new(3, 0)
            .with_text("cat", vec![0.0, 3.0, 4.0])
            .unwrap();
        assert_eq!(enc.encode_text("cat").unwrap().as_slice(), &[0.0, 0.6, 0.8]);
        assert!(MockEncoder::new(3, 0).with_text("x", vec![1.0]).is_err());
    }

    #[test]
    fn keyword_mode_sums_keywords() {
        let enc = MockEncoder::new(3, 0)
            .with_background(vec![0.0, 0.0, 0.1])
            .unwrap()
            .with_keyword("cat", vec![1.0, 0.0, 0.0])
            .unwrap();
        let with_cat = enc.encode_text("A small Cat sits").unwrap();
        let without = enc.encode_text("A small sits").unwrap();
        assert!(with_cat.as_slice()[0] > 0.99);
        assert_eq!(without.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn llm_fixture_lookup_and_fallback() {
        let llm = MockLlm::new()
            .with_reply("classify", Some(b"img_A"), "cat")
            .with_variants("describe", None, vec!["one".into(), "two".into()]);
        let req = GenerateRequest::new("classify", Some(b"img_A"), 0.0);
        assert_eq!(llm.generate(&req).unwrap(), "cat");
        assert_eq!(llm.generate(&req).unwrap(), "cat");

        let other = llm
            .generate(&GenerateRequest::new("classify", Some(b"img_B"), 0.0))
            .unwrap();
        assert!(other.starts_with("mock-response-"));
        assert_eq!(other.len(), "mock-response-".len() + 6);

        let d = |t, s| {
            llm.generate(&GenerateRequest::new("describe", None, t).with_sample(s))
                .unwrap()
        };
        assert_eq!(d(0.0, 1), "one");
        assert_eq!(d(0.99, 0), "one");
        assert_eq!(d(0.99, 1), "two");
        assert_eq!(d(0.99, 2), "one");

        let bad = llm.generate(&GenerateRequest::new("classify", None, 1.5));
        assert!(matches!(bad, Err(BackendError::InvalidTemperature(_))));
    }

    #[test]
    fn refusals() {
        let llm = MockLlm::new().with_refusal("p", None).refusing_prompt("q");
        assert!(matches!(
            llm.generate(&GenerateRequest::new("p", None, 0.0)),
            Err(BackendError::SafetyRefusal(_))
        ));
        assert!(matches!(
            llm.generate(&GenerateRequest::new("q", Some(b"x"), 0.0)),
            Err(BackendError::SafetyRefusal(_))
        ));
    }

    #[test]
    fn fixtures_from_json() {
        let json = r#"{
            "dim": 2,
            "text_vectors": {"cat": [1.0, 0.0]},
            "llm": [{"prompt": "@description", "image_sha256": "00000000000000000000000000000000000000000000000000000000000000ff", "responses": ["a cat"]}]
        }"#;
        let fx: MockFixtures = serde_json::from_str(json).unwrap();
        let (enc, llm) = fx.build(8, 0).unwrap();
        assert_eq!(enc.reported_dim(), Some(2));
        assert_eq!(enc.encode_text("cat").unwrap().as_slice(), &[1.0, 0.0]);
        let mut digest = [0u8; 32];
        digest[31] = 0xff;
        let key = MockLlm::key(crate::prompts::description_prompt(), Some(&digest));
        assert!(
            matches!(llm.replies.get(&key), Some(MockReply::Text(t)) if t == &vec!["a cat".to_string()])
        );
    }
}
