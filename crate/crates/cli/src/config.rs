//! Run configuration: flags override environment variables, which override
//! the TOML config file, which overrides built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use zsfuse_core::backend::{
    CacheStore, HttpEncoder, HttpLlm, MockEncoder, MockFixtures, MockLlm, ENV_API_KEY,
    ENV_CACHE_DIR, ENV_ENCODER_URL, ENV_LLM_URL,
};
use zsfuse_core::classifier::DEFAULT_PARALLELISM;
use zsfuse_core::{
    Backends, ClassFeatureMode, FeatureSelection, FusionStrategy, InferenceOptions, QueryMode,
};

use crate::error::CliError;

pub const DEFAULT_MOCK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryModeArg {
    Dual,
    Single,
}

impl From<QueryModeArg> for QueryMode {
    fn from(q: QueryModeArg) -> Self {
        match q {
            QueryModeArg::Dual => QueryMode::Dual,
            QueryModeArg::Single => QueryMode::Single,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Backend pair to use
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Seed for the mock backends
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Embedding dimension (mock) or expected dimension (http)
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// JSON fixture table for the mock backends
    #[arg(long, global = true)]
    pub mock_fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    pub encoder_url: Option<String>,
    #[arg(long, global = true)]
    pub llm_url: Option<String>,
    /// Response cache directory
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// TOML config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for building and batch inference
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Log progress and print where each setting came from
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Machine-readable output
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct InferenceArgs {
    /// Comma-separated subset of if, df, pf
    #[arg(long)]
    pub features: Option<String>,
    /// avg-feature, avg-similarity or max-similarity
    #[arg(long)]
    pub strategy: Option<String>,
    /// Drop features whose backend call fails instead of failing the image
    #[arg(long)]
    pub degraded: bool,
    #[arg(long, value_enum)]
    pub query_mode: Option<QueryModeArg>,
}

/// Contents of `--config`. Relative paths resolve against the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<BackendKind>,
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub mock_fixtures: Option<PathBuf>,
    pub encoder_url: Option<String>,
    pub llm_url: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub api_key: Option<String>,
    pub parallelism: Option<usize>,
    pub features: Option<String>,
    pub strategy: Option<String>,
    pub degraded: Option<bool>,
    pub query_mode: Option<QueryModeArg>,
    pub max_failure_fraction: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut file: FileConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut file.mock_fixtures, &mut file.cache_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "config file",
            Source::Default => "default",
        })
    }
}

/// Fully resolved settings for one invocation. Serialized into reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub backend: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub seed: u64,
    pub dim: usize,
    #[serde(skip)]
    dim_explicit: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_fixtures: Option<PathBuf>,
    pub parallelism: usize,
    pub inference: InferenceOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ClassFeatureMode>,
    #[serde(skip)]
    pub max_failure_fraction: Option<f64>,
    #[serde(skip)]
    pub sources: Vec<(&'static str, Source)>,
}

fn pick<T>(
    sources: &mut Vec<(&'static str, Source)>,
    name: &'static str,
    flag: Option<T>,
    env: Option<T>,
    file: Option<T>,
) -> Option<T> {
    let (value, source) = match (flag, env, file) {
        (Some(v), _, _) => (Some(v), Source::Flag),
        (None, Some(v), _) => (Some(v), Source::Env),
        (None, None, Some(v)) => (Some(v), Source::File),
        (None, None, None) => (None, Source::Default),
    };
    sources.push((name, source));
    value
}

impl RunConfig {
    /// `env` looks up an environment variable; empty values count as unset.
    pub fn resolve(
        args: &GlobalArgs,
        inference: &InferenceArgs,
        file: &FileConfig,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let env = |k: &str| env(k).filter(|v| !v.is_empty());
        let mut s = Vec::new();
        let backend =
            pick(&mut s, "backend", args.backend, None, file.backend).unwrap_or(BackendKind::Http);
        let encoder_url = pick(
            &mut s,
            "encoder_url",
            args.encoder_url.clone(),
            env(ENV_ENCODER_URL),
            file.encoder_url.clone(),
        );
        let llm_url = pick(
            &mut s,
            "llm_url",
            args.llm_url.clone(),
            env(ENV_LLM_URL),
            file.llm_url.clone(),
        );
        let cache_dir = pick(
            &mut s,
            "cache_dir",
            args.cache_dir.clone(),
            env(ENV_CACHE_DIR).map(PathBuf::from),
            file.cache_dir.clone(),
        );
        let api_key = pick(
            &mut s,
            "api_key",
            None,
            env(ENV_API_KEY),
            file.api_key.clone(),
        );
        let seed = pick(&mut s, "seed", args.seed, None, file.seed).unwrap_or(0);
        let dim = pick(&mut s, "dim", args.dim, None, file.dim);
        let dim_explicit = dim.is_some();
        let mock_fixtures = pick(
            &mut s,
            "mock_fixtures",
            args.mock_fixtures.clone(),
            None,
            file.mock_fixtures.clone(),
        );
        let parallelism = pick(
            &mut s,
            "parallelism",
            args.parallelism,
            None,
            file.parallelism,
        )
        .unwrap_or(DEFAULT_PARALLELISM);
        if parallelism == 0 {
            return Err(CliError::usage("parallelism must be at least 1"));
        }

        let features = pick(
            &mut s,
            "features",
            inference.features.clone(),
            None,
            file.features.clone(),
        );
        let selection = match features {
            Some(f) => f.parse::<FeatureSelection>().map_err(CliError::usage)?,
            None => FeatureSelection::ALL,
        };
        let strategy = match pick(
            &mut s,
            "strategy",
            inference.strategy.clone(),
            None,
            file.strategy.clone(),
        ) {
            Some(st) => st.parse::<FusionStrategy>().map_err(CliError::usage)?,
            None => FusionStrategy::default(),
        };
        let degraded = pick(
            &mut s,
            "degraded",
            inference.degraded.then_some(true),
            None,
            file.degraded,
        )
        .unwrap_or(false);
        let query_mode = pick(
            &mut s,
            "query_mode",
            inference.query_mode,
            None,
            file.query_mode,
        )
        .map(QueryMode::from)
        .unwrap_or_default();

        Ok(RunConfig {
            backend,
            encoder_url,
            llm_url,
            cache_dir,
            api_key,
            seed,
            dim: dim.unwrap_or(DEFAULT_MOCK_DIM),
            dim_explicit,
            mock_fixtures,
            parallelism,
            inference: InferenceOptions {
                selection,
                strategy,
                degraded,
                query_mode,
            },
            mode: None,
            max_failure_fraction: file.max_failure_fraction,
            sources: s,
        })
    }

    #[cfg(test)]
    pub fn source(&self, name: &str) -> Option<Source> {
        self.sources
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| *s)
    }

    /// One line per setting, for `--verbose`.
    pub fn describe(&self) -> Vec<String> {
        let value = serde_json::to_value(self).unwrap_or_default();
        self.sources
            .iter()
            .map(|(name, source)| {
                let shown = match *name {
                    "api_key" => self
                        .api_key
                        .as_ref()
                        .map_or("unset".to_owned(), |_| "<set>".to_owned()),
                    "features" => self.inference.selection.to_string(),
                    "strategy" => self.inference.strategy.to_string(),
                    "degraded" => self.inference.degraded.to_string(),
                    "query_mode" => format!("{:?}", self.inference.query_mode).to_lowercase(),
                    _ => match value.get(name) {
                        Some(v) => v.to_string(),
                        None => "unset".to_owned(),
                    },
                };
                format!("{name} = {shown} ({source})")
            })
            .collect()
    }

    pub fn open_cache(&self) -> Result<CacheStore, CliError> {
        let dir = self.cache_dir.as_ref().ok_or_else(|| {
            CliError::usage(format!(
                "no cache directory; pass --cache-dir or set {ENV_CACHE_DIR}"
            ))
        })?;
        CacheStore::open(dir).map_err(CliError::runtime)
    }

    pub fn backends(&self) -> Result<Backends, CliError> {
        let (encoder, llm): (
            Arc<dyn zsfuse_core::EncoderBackend>,
            Arc<dyn zsfuse_core::LlmBackend>,
        ) = match self.backend {
            BackendKind::Mock => match &self.mock_fixtures {
                Some(path) => {
                    let fixtures = MockFixtures::load(path).map_err(CliError::usage)?;
                    let (e, l) = fixtures
                        .build(self.dim, self.seed)
                        .map_err(CliError::usage)?;
                    (Arc::new(e), Arc::new(l))
                }
                None => (
                    Arc::new(MockEncoder::new(self.dim, self.seed)),
                    Arc::new(MockLlm::new()),
                ),
            },
            BackendKind::Http => {
                let missing = |what: &str, var: &str| {
                    CliError::usage(format!("http backend needs --{what} or {var}"))
                };
                let enc_url = self
                    .encoder_url
                    .as_deref()
                    .ok_or_else(|| missing("encoder-url", ENV_ENCODER_URL))?;
                let llm_url = self
                    .llm_url
                    .as_deref()
                    .ok_or_else(|| missing("llm-url", ENV_LLM_URL))?;
                let mut enc = HttpEncoder::new(enc_url, self.api_key.clone());
                if self.dim_explicit {
                    enc = enc.with_dim(self.dim);
                }
                (
                    Arc::new(enc),
                    Arc::new(HttpLlm::new(llm_url, self.api_key.clone())),
                )
            }
        };
        Ok(match &self.cache_dir {
            Some(_) => Backends::with_cache(encoder, llm, self.open_cache()?),
            None => Backends::new(encoder, llm),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let file = FileConfig {
            encoder_url: Some("http://file-enc".into()),
            llm_url: Some("http://file-llm".into()),
            cache_dir: Some("/file/cache".into()),
            seed: Some(9),
            ..Default::default()
        };
        let env = env_of(&[
            (ENV_ENCODER_URL, "http://env-enc"),
            (ENV_CACHE_DIR, "/env/cache"),
        ]);
        let args = GlobalArgs {
            encoder_url: Some("http://flag-enc".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&args, &InferenceArgs::default(), &file, &env).unwrap();
        assert_eq!(c.encoder_url.as_deref(), Some("http://flag-enc"));
        assert_eq!(c.source("encoder_url"), Some(Source::Flag));
        assert_eq!(c.cache_dir, Some(PathBuf::from("/env/cache")));
        assert_eq!(c.source("cache_dir"), Some(Source::Env));
        assert_eq!(c.llm_url.as_deref(), Some("http://file-llm"));
        assert_eq!(c.source("llm_url"), Some(Source::File));
        assert_eq!(c.seed, 9);
        assert_eq!(c.source("dim"), Some(Source::Default));
        assert_eq!(c.dim, DEFAULT_MOCK_DIM);
    }

    #[test]
    fn empty_env_values_are_unset() {
        let env = env_of(&[(ENV_LLM_URL, "")]);
        let c = RunConfig::resolve(
            &GlobalArgs::default(),
            &InferenceArgs::default(),
            &FileConfig::default(),
            &env,
        )
        .unwrap();
        assert_eq!(c.llm_url, None);
        assert_eq!(c.backend, BackendKind::Http);
        assert!(matches!(c.backends(), Err(CliError::Usage(_))));
    }

    #[test]
    fn inference_options_resolve_and_validate() {
        let file = FileConfig {
            strategy: Some("max-similarity".into()),
            degraded: Some(true),
            ..Default::default()
        };
        let inf = InferenceArgs {
            features: Some("if,pf".into()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&GlobalArgs::default(), &inf, &file, &env_of(&[])).unwrap();
        assert_eq!(
            c.inference.selection,
            FeatureSelection::new(true, false, true).unwrap()
        );
        assert_eq!(c.inference.strategy, FusionStrategy::MaxSimilarity);
        assert!(c.inference.degraded);

        let bad = InferenceArgs {
            strategy: Some("median".into()),
            ..Default::default()
        };
        assert!(matches!(
            RunConfig::resolve(
                &GlobalArgs::default(),
                &bad,
                &FileConfig::default(),
                &env_of(&[])
            ),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn api_key_is_never_serialized() {
        let env = env_of(&[(ENV_API_KEY, "hunter2")]);
        let c = RunConfig::resolve(
            &GlobalArgs::default(),
            &InferenceArgs::default(),
            &FileConfig::default(),
            &env,
        )
        .unwrap();
        assert_eq!(c.api_key.as_deref(), Some("hunter2"));
        assert!(!serde_json::to_string(&c).unwrap().contains("hunter2"));
        assert!(c.describe().iter().all(|l| !l.contains("hunter2")));
    }

    #[test]
    fn config_file_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zsfuse.toml");
        std::fs::write(
            &path,
            "backend = \"mock\"\ncache_dir = \"cache\"\nseed = 3\n",
        )
        .unwrap();
        let file = FileConfig::load(&path).unwrap();
        assert_eq!(file.backend, Some(BackendKind::Mock));
        assert_eq!(file.cache_dir, Some(dir.path().join("cache")));

        std::fs::write(&path, "colour = \"blue\"\n").unwrap();
        assert!(matches!(FileConfig::load(&path), Err(CliError::Usage(_))));
    }
}
