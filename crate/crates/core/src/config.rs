//! Runtime configuration, read from a JSON document.
//!
//! Relative paths are resolved against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sourceclient::SourceSpec;

pub const CONFIG_ENV: &str = "EVIDEX_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    #[default]
    Fixture,
}

/// Settings for the HTTP search adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveSettings {
    pub timeout_secs: f64,
    pub retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for LiveSettings {
    fn default() -> Self {
        LiveSettings {
            timeout_secs: 10.0,
            retries: 2,
            initial_backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub embeddings_path: PathBuf,
    /// Stopword list; the bundled list for `language` when absent.
    pub stopwords_path: Option<PathBuf>,
    pub language: String,
    pub location: Option<String>,
    pub sources: Vec<SourceSpec>,
    /// Exact WMD below which a candidate counts as supporting evidence.
    pub threshold: f64,
    /// Sinkhorn epsilon as a fraction of the median pairwise cost.
    pub epsilon_rel: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub prefilter_keep: usize,
    pub max_per_source: usize,
    pub date_window_days: i64,
    pub query_keyword_count: usize,
    pub fixture_corpus_path: Option<PathBuf>,
    pub overrides_path: Option<PathBuf>,
    pub mode: Mode,
    pub live: LiveSettings,
    pub cors_origin: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            embeddings_path: PathBuf::from("embeddings.txt"),
            stopwords_path: None,
            language: "en".into(),
            location: None,
            sources: Vec::new(),
            threshold: 1.669268,
            epsilon_rel: 0.05,
            sinkhorn_tol: crate::transport::SINKHORN_TOL,
            sinkhorn_max_iter: crate::transport::SINKHORN_MAX_ITER,
            prefilter_keep: 5,
            max_per_source: 10,
            date_window_days: 7,
            query_keyword_count: 6,
            fixture_corpus_path: None,
            overrides_path: None,
            mode: Mode::Fixture,
            live: LiveSettings::default(),
            cors_origin: None,
        }
    }
}

impl Config {
    /// Parses a config whose relative paths are anchored at `base_dir`.
    pub fn parse(json: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        Self::parse_from(json, base_dir, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let json = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_from(&json, path.parent().unwrap_or_else(|| Path::new(".")), path)
    }

    fn parse_from(json: &str, base_dir: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let mut config: Config = serde_json::from_str(json).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    /// Loads from `path`, or from `$EVIDEX_CONFIG` when no path is given.
    pub fn locate(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) => Self::load(Path::new(&p)),
                None => Err(ConfigError::Invalid(format!(
                    "no config given; pass --config or set {CONFIG_ENV}"
                ))),
            },
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.embeddings_path);
        for p in [
            &mut self.stopwords_path,
            &mut self.fixture_corpus_path,
            &mut self.overrides_path,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        for source in &mut self.sources {
            if let Some(p) = &mut source.fixture_path {
                join(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return invalid(format!("threshold must be finite and >= 0, got {}", self.threshold));
        }
        if !(self.epsilon_rel.is_finite() && self.epsilon_rel > 0.0) {
            return invalid(format!("epsilon_rel must be positive, got {}", self.epsilon_rel));
        }
        if !(self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iter == 0 {
            return invalid("sinkhorn_tol and sinkhorn_max_iter must be positive".into());
        }
        if self.prefilter_keep == 0 || self.max_per_source == 0 || self.query_keyword_count == 0 {
            return invalid(
                "prefilter_keep, max_per_source and query_keyword_count must be at least 1".into(),
            );
        }
        if self.date_window_days < 0 {
            return invalid("date_window_days must be non-negative".into());
        }
        let mut seen = HashSet::new();
        for s in &self.sources {
            if !seen.insert(s.id.as_str()) {
                return invalid(format!("duplicate source id {:?}", s.id));
            }
        }
        if self.mode == Mode::Fixture
            && self.fixture_corpus_path.is_none()
            && self.sources.iter().any(|s| s.fixture_path.is_none())
        {
            return invalid("fixture mode needs fixture_corpus_path".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_paths() {
        let json = r#"{
            "embeddings_path": "emb.txt",
            "fixture_corpus_path": "/abs/corpus.jsonl",
            "threshold": 0.9,
            "sources": [{"id": "cnn", "display_name": "CNN"}]
        }"#;
        let c = Config::parse(json, Path::new("/etc/evidex")).unwrap();
        assert_eq!(c.embeddings_path, PathBuf::from("/etc/evidex/emb.txt"));
        assert_eq!(c.fixture_corpus_path, Some(PathBuf::from("/abs/corpus.jsonl")));
        assert_eq!(c.threshold, 0.9);
        assert_eq!(c.prefilter_keep, 5);
        assert_eq!(c.max_per_source, 10);
        assert_eq!(c.date_window_days, 7);
        assert_eq!(c.query_keyword_count, 6);
        assert_eq!(c.epsilon_rel, 0.05);
        assert!(c.sources[0].enabled);
    }

    #[test]
    fn rejects_bad_values() {
        let base = Path::new(".");
        let fixture = r#""fixture_corpus_path": "c.jsonl""#;
        for bad in [
            format!(r#"{{{fixture}, "prefilter_keep": 0}}"#),
            format!(r#"{{{fixture}, "epsilon_rel": -1}}"#),
            format!(r#"{{{fixture}, "sources": [{{"id":"a","display_name":"A"}},{{"id":"a","display_name":"B"}}]}}"#),
            r#"{"mode": "fixture", "sources": [{"id":"a","display_name":"A"}]}"#.to_string(),
            format!(r#"{{{fixture}, "unknown_key": 1}}"#),
        ] {
            assert!(Config::parse(&bad, base).is_err(), "{bad}");
        }
    }
}
