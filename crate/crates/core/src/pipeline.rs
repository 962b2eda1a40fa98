//! Verification pipeline.
//!
//! Aggregation: extract the query article, pick keywords, search the
//! selected sources and extract every candidate. Refining: turn each text
//! into a normalized bag of words, screen all candidates with entropic
//! transport, re-rank the closest few with exact WMD and apply the
//! threshold.

use std::collections::HashSet;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::config::{Config, ConfigError, Mode};
use crate::embeddings::{EmbeddingError, EmbeddingTable};
use crate::extract::{extract_article_with, Article, ExtractError, OverrideRules, RulesError};
use crate::sourceclient::{
    build_query, fetch_candidates, ClientRouter, FailureStage, FixtureClient, LiveClient,
    QueryParams, RetryPolicy, SearchQuery, SourceClient, SourceError, SourceFailure,
    SourceRegistry,
};
use crate::textproc::{build_document, clean, extract_keywords, Document, StopWords, TextError};
use crate::transport::{cost_matrix, emd_exact, wmd, SinkhornParams, TransportError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("loading config: {0}")]
    Config(#[from] ConfigError),
    #[error("loading embeddings: {0}")]
    Embeddings(#[from] EmbeddingError),
    #[error("loading stopwords {path}: {source}")]
    Stopwords {
        path: String,
        source: std::io::Error,
    },
    #[error("loading extraction overrides: {0}")]
    Rules(#[from] RulesError),
    #[error("retrieving the article: {0}")]
    Retrieve(SourceError),
    #[error("extracting the article: {0}")]
    Extract(#[from] ExtractError),
    #[error("query article: {0}")]
    Document(#[from] TextError),
    #[error("{0}")]
    Query(SourceError),
    #[error("all sources failed")]
    AllSourcesFailed(Vec<SourceFailure>),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

impl PipelineError {
    /// True for failures caused by the article itself rather than the
    /// request or the sources.
    pub fn is_extraction(&self) -> bool {
        matches!(
            self,
            PipelineError::Retrieve(_)
                | PipelineError::Extract(_)
                | PipelineError::Document(_)
                | PipelineError::Query(SourceError::EmptyKeywords)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyInput {
    Url(String),
    /// Raw page; `url` is used only to label the article and to exclude it
    /// from its own candidates.
    Html { html: String, url: Option<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    SupportFound,
    PotentiallyFake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMatch {
    pub article: Article,
    pub source_id: String,
    pub exact_distance: f64,
    pub prefilter_distance: f64,
    pub below_threshold: bool,
}

/// A candidate's prefilter outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedCandidate {
    pub url: String,
    pub source_id: String,
    pub prefilter_distance: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoticeKind {
    /// Nothing usable came back; the story may be too recent to be covered.
    NoCandidates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notice {
    pub kind: NoticeKind,
    pub message: String,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub extract_ms: f64,
    pub search_ms: f64,
    pub fetch_ms: f64,
    pub prefilter_ms: f64,
    pub exact_ms: f64,
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub query_article: Article,
    pub query: SearchQuery,
    pub matches: Vec<EvidenceMatch>,
    pub screened: Vec<ScreenedCandidate>,
    pub threshold: f64,
    pub verdict: Verdict,
    pub source_errors: Vec<SourceFailure>,
    pub notices: Vec<Notice>,
    pub timing: Timing,
}

impl VerificationReport {
    /// The report with timing zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        VerificationReport {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// A fetched candidate ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub article: Article,
    pub source_id: String,
    pub document: Document,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSettings {
    pub epsilon_rel: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub prefilter_keep: usize,
    pub threshold: f64,
}

impl RefineSettings {
    pub fn from_config(config: &Config) -> Self {
        RefineSettings {
            epsilon_rel: config.epsilon_rel,
            sinkhorn_tol: config.sinkhorn_tol,
            sinkhorn_max_iter: config.sinkhorn_max_iter,
            prefilter_keep: config.prefilter_keep,
            threshold: config.threshold,
        }
    }
}

impl Default for RefineSettings {
    fn default() -> Self {
        Self::from_config(&Config::default())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Refined {
    pub matches: Vec<EvidenceMatch>,
    pub screened: Vec<ScreenedCandidate>,
    pub failures: Vec<SourceFailure>,
    pub prefilter_time: Duration,
    pub exact_time: Duration,
}

/// Entropic transport distance with epsilon relative to the median cost.
pub fn prefilter_distance(
    a: &Document,
    b: &Document,
    table: &EmbeddingTable,
    settings: &RefineSettings,
) -> Result<f64, TransportError> {
    let c = cost_matrix(a, b, table)?;
    let mut params = SinkhornParams::relative_to(&c, settings.epsilon_rel);
    params.tol = settings.sinkhorn_tol;
    params.max_iter = settings.sinkhorn_max_iter;
    let result = params.run(a.weights(), b.weights(), &c)?;
    if !result.converged {
        debug!(epsilon = params.epsilon, "sinkhorn stopped at the iteration limit");
    }
    Ok(result.distance)
}

/// Prefilters all candidates with Sinkhorn, keeps the `prefilter_keep`
/// closest (ties by url) and scores those with exact WMD. Matches come back
/// sorted by exact distance, ties by url.
pub fn refine(
    query: &Document,
    candidates: &[Candidate],
    table: &EmbeddingTable,
    settings: &RefineSettings,
) -> Refined {
    let start = Instant::now();
    let prefiltered: Vec<Result<f64, TransportError>> = candidates
        .par_iter()
        .map(|cand| prefilter_distance(query, &cand.document, table, settings))
        .collect();
    let mut refined = Refined::default();
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());
    for (i, r) in prefiltered.into_iter().enumerate() {
        match r {
            Ok(d) => scored.push((d, i)),
            Err(e) => refined.failures.push(document_failure(&candidates[i], e.to_string())),
        }
    }
    scored.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then_with(|| candidates[x.1].article.url.cmp(&candidates[y.1].article.url))
    });
    let keep = settings.prefilter_keep.min(scored.len());
    refined.screened = scored
        .iter()
        .enumerate()
        .map(|(rank, &(d, i))| ScreenedCandidate {
            url: candidates[i].article.url.clone(),
            source_id: candidates[i].source_id.clone(),
            prefilter_distance: d,
            kept: rank < keep,
        })
        .collect();
    refined.prefilter_time = start.elapsed();

    let start = Instant::now();
    let exact: Vec<(usize, f64, Result<f64, TransportError>)> = scored[..keep]
        .par_iter()
        .map(|&(d, i)| {
            let cand = &candidates[i];
            let r = cost_matrix(query, &cand.document, table)
                .and_then(|c| emd_exact(query.weights(), cand.document.weights(), &c))
                .map(|r| r.distance);
            (i, d, r)
        })
        .collect();
    for (i, prefilter, r) in exact {
        match r {
            Ok(distance) => refined.matches.push(EvidenceMatch {
                article: candidates[i].article.clone(),
                source_id: candidates[i].source_id.clone(),
                exact_distance: distance,
                prefilter_distance: prefilter,
                below_threshold: distance < settings.threshold,
            }),
            Err(e) => refined.failures.push(document_failure(&candidates[i], e.to_string())),
        }
    }
    refined.matches.sort_by(|a, b| {
        a.exact_distance
            .total_cmp(&b.exact_distance)
            .then_with(|| a.article.url.cmp(&b.article.url))
    });
    refined.exact_time = start.elapsed();
    refined
}

fn document_failure(cand: &Candidate, message: String) -> SourceFailure {
    SourceFailure {
        source_id: cand.source_id.clone(),
        url: Some(cand.article.url.clone()),
        stage: FailureStage::Document,
        message,
    }
}

/// Cleaned tokens of an article: title followed by body.
pub fn article_tokens(article: &Article, stopwords: &StopWords) -> Vec<String> {
    clean(&format!("{}\n{}", article.title, article.body), stopwords)
}

pub fn article_document(
    article: &Article,
    stopwords: &StopWords,
    table: &EmbeddingTable,
) -> Result<Document, TextError> {
    build_document(&article_tokens(article, stopwords), table)
}

/// Everything a verification needs, shared across concurrent requests.
pub struct Engine {
    config: Config,
    table: Arc<EmbeddingTable>,
    stopwords: StopWords,
    registry: RwLock<Arc<SourceRegistry>>,
    clients: ClientRouter,
    resolver: Arc<dyn SourceClient>,
    rules: OverrideRules,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("mode", &self.config.mode)
            .field("vocab", &self.table.len())
            .field("sources", &self.registry().ids())
            .finish()
    }
}

impl Engine {
    /// Assembles an engine from parts. `resolver` retrieves the query
    /// article when verifying by URL.
    pub fn new(
        config: Config,
        table: Arc<EmbeddingTable>,
        stopwords: StopWords,
        registry: SourceRegistry,
        clients: ClientRouter,
        resolver: Arc<dyn SourceClient>,
        rules: OverrideRules,
    ) -> Self {
        Engine {
            config,
            table,
            stopwords,
            registry: RwLock::new(Arc::new(registry)),
            clients,
            resolver,
            rules,
        }
    }

    /// Loads the embedding table named by the config, then builds the engine.
    pub fn from_config(config: Config) -> Result<Self, PipelineError> {
        let started = Instant::now();
        let table = EmbeddingTable::load_path(&config.embeddings_path)?;
        info!(
            tokens = table.len(),
            dimension = table.dimension(),
            elapsed_ms = ms(started.elapsed()),
            "embeddings loaded"
        );
        Self::with_table(config, Arc::new(table))
    }

    /// Builds the engine around an already-loaded table.
    pub fn with_table(config: Config, table: Arc<EmbeddingTable>) -> Result<Self, PipelineError> {
        let stopwords = match &config.stopwords_path {
            Some(p) => StopWords::load(p).map_err(|source| PipelineError::Stopwords {
                path: p.display().to_string(),
                source,
            })?,
            None => StopWords::english(),
        };
        let rules = match &config.overrides_path {
            Some(p) => OverrideRules::load(p)?,
            None => OverrideRules::default(),
        };
        let registry = registry_from_config(&config).map_err(PipelineError::Query)?;
        let (clients, resolver) = clients_from_config(&config, &rules)?;
        Ok(Self::new(config, table, stopwords, registry, clients, resolver, rules))
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn table(&self) -> &Arc<EmbeddingTable> {
        &self.table
    }

    pub fn stopwords(&self) -> &StopWords {
        &self.stopwords
    }

    /// Current registry snapshot; in-flight verifications keep theirs.
    pub fn registry(&self) -> Arc<SourceRegistry> {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn replace_registry(&self, registry: SourceRegistry) {
        *self.registry.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
    }

    pub fn verify(
        &self,
        input: &VerifyInput,
        sources: &[String],
    ) -> Result<VerificationReport, PipelineError> {
        self.verify_on(input, sources, chrono::Local::now().date_naive())
    }

    /// Runs a verification with `today` fixing the fallback search window.
    pub fn verify_on(
        &self,
        input: &VerifyInput,
        sources: &[String],
        today: NaiveDate,
    ) -> Result<VerificationReport, PipelineError> {
        let total = Instant::now();
        let registry = self.registry();
        let mut timing = Timing::default();

        let started = Instant::now();
        let query_article = match input {
            VerifyInput::Url(url) => self.resolver.fetch_article(url).map_err(|e| match e {
                SourceError::Extract { source, .. } => PipelineError::Extract(source),
                other => PipelineError::Retrieve(other),
            })?,
            VerifyInput::Html { html, url } => {
                extract_article_with(html, url.as_deref().unwrap_or(""), &self.rules)?
            }
        };
        let query_doc = article_document(&query_article, &self.stopwords, &self.table)?;
        let keywords = extract_keywords(
            &query_article.title,
            &query_article.body,
            self.config.query_keyword_count,
            &self.stopwords,
        );
        let query = build_query(
            &query_article,
            &keywords,
            sources,
            &registry,
            &self.query_params(),
            today,
        )
        .map_err(PipelineError::Query)?;
        timing.extract_ms = ms(started.elapsed());

        let started = Instant::now();
        let fetched = fetch_candidates(&query, &registry, &self.clients).map_err(|e| match e {
            SourceError::AllSourcesFailed(f) => PipelineError::AllSourcesFailed(f),
            other => PipelineError::Query(other),
        })?;
        timing.search_ms = ms(started.elapsed());
        let mut source_errors = fetched.failures;

        let started = Instant::now();
        let mut seen = HashSet::new();
        let links: Vec<_> = fetched
            .links
            .into_iter()
            .filter(|l| l.url != query_article.url && seen.insert(l.url.clone()))
            .collect();
        let built: Vec<Result<Candidate, SourceFailure>> = links
            .par_iter()
            .map(|link| {
                let failure = |stage, message: String| SourceFailure {
                    source_id: link.source_id.clone(),
                    url: Some(link.url.clone()),
                    stage,
                    message,
                };
                let article = self
                    .clients
                    .client_for(&link.source_id)
                    .fetch_article(&link.url)
                    .map_err(|e| failure(FailureStage::Fetch, e.to_string()))?;
                let document = article_document(&article, &self.stopwords, &self.table)
                    .map_err(|e| failure(FailureStage::Document, e.to_string()))?;
                Ok(Candidate {
                    article,
                    source_id: link.source_id.clone(),
                    document,
                })
            })
            .collect();
        let mut candidates = Vec::with_capacity(built.len());
        for b in built {
            match b {
                Ok(c) => candidates.push(c),
                Err(f) => source_errors.push(f),
            }
        }
        timing.fetch_ms = ms(started.elapsed());

        let settings = RefineSettings::from_config(&self.config);
        let refined = refine(&query_doc, &candidates, &self.table, &settings);
        source_errors.extend(refined.failures);
        timing.prefilter_ms = ms(refined.prefilter_time);
        timing.exact_ms = ms(refined.exact_time);

        let mut notices = Vec::new();
        if candidates.is_empty() {
            notices.push(Notice {
                kind: NoticeKind::NoCandidates,
                message: format!(
                    "no candidate articles were found between {} and {}; recent stories may not be covered yet",
                    query.date_from, query.date_to
                ),
            });
        }
        let verdict = if refined.matches.iter().any(|m| m.below_threshold) {
            Verdict::SupportFound
        } else {
            Verdict::PotentiallyFake
        };
        timing.total_ms = ms(total.elapsed());
        Ok(VerificationReport {
            query_article,
            query,
            matches: refined.matches,
            screened: refined.screened,
            threshold: self.config.threshold,
            verdict,
            source_errors,
            notices,
            timing,
        })
    }

    fn query_params(&self) -> QueryParams {
        QueryParams {
            keyword_count: self.config.query_keyword_count,
            date_window_days: self.config.date_window_days.max(0) as u64,
            max_per_source: self.config.max_per_source,
            language: self.config.language.clone(),
            location: self.config.location.clone(),
        }
    }
}

pub fn registry_from_config(config: &Config) -> Result<SourceRegistry, SourceError> {
    SourceRegistry::new(config.sources.iter().cloned())
}

type Clients = (ClientRouter, Arc<dyn SourceClient>);

fn clients_from_config(config: &Config, rules: &OverrideRules) -> Result<Clients, PipelineError> {
    let fixture = |path: &std::path::Path| -> Result<Arc<dyn SourceClient>, PipelineError> {
        let client = FixtureClient::load(path).map_err(PipelineError::Query)?;
        Ok(Arc::new(client.with_rules(rules.clone())))
    };
    match config.mode {
        Mode::Fixture => {
            let default: Arc<dyn SourceClient> = match &config.fixture_corpus_path {
                Some(p) => fixture(p)?,
                None => Arc::new(FixtureClient::default()),
            };
            let mut router = ClientRouter::new(default.clone());
            for s in &config.sources {
                if let Some(p) = &s.fixture_path {
                    router = router.with_source(s.id.clone(), fixture(p)?);
                }
            }
            Ok((router, default))
        }
        Mode::Live => {
            let retry = RetryPolicy {
                retries: config.live.retries,
                initial_backoff: Duration::from_millis(config.live.initial_backoff_ms),
                timeout: Duration::from_secs_f64(config.live.timeout_secs.max(0.001)),
            };
            let live: Arc<dyn SourceClient> =
                Arc::new(LiveClient::new(retry, rules.clone()).map_err(PipelineError::Query)?);
            Ok((ClientRouter::new(live.clone()), live))
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("calibration needs at least one related and one unrelated pair")]
    EmptyClass,
    #[error("non-finite distance")]
    NonFinite,
    #[error("pair {index}: {source}")]
    Distance { index: usize, source: TransportError },
}

/// Picks a threshold from labelled document pairs by exact WMD.
pub fn calibrate_threshold(
    pairs: &[(Document, Document, bool)],
    table: &EmbeddingTable,
) -> Result<f64, CalibrationError> {
    let mut related = Vec::new();
    let mut unrelated = Vec::new();
    for (index, (a, b, is_related)) in pairs.iter().enumerate() {
        let d = wmd(a, b, table).map_err(|source| CalibrationError::Distance { index, source })?;
        if *is_related {
            related.push(d);
        } else {
            unrelated.push(d);
        }
    }
    threshold_from_distances(&related, &unrelated)
}

/// Midpoint between the classes when they separate; otherwise the midpoint
/// between adjacent observed distances with the fewest misclassifications,
/// preferring the smaller one. A pair counts as related when its distance
/// is strictly below the threshold.
pub fn threshold_from_distances(related: &[f64], unrelated: &[f64]) -> Result<f64, CalibrationError> {
    if related.is_empty() || unrelated.is_empty() {
        return Err(CalibrationError::EmptyClass);
    }
    if related.iter().chain(unrelated).any(|d| !d.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    let max_related = related.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_unrelated = unrelated.iter().copied().fold(f64::INFINITY, f64::min);
    if max_related < min_unrelated {
        return Ok((max_related + min_unrelated) / 2.0);
    }
    let mut values: Vec<f64> = related.iter().chain(unrelated).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let errors = |t: f64| {
        related.iter().filter(|&&d| d >= t).count() + unrelated.iter().filter(|&&d| d < t).count()
    };
    let mut best = (usize::MAX, f64::NAN);
    for w in values.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let e = errors(t);
        if e < best.0 {
            best = (e, t);
        }
    }
    if best.1.is_nan() {
        best.1 = values[0];
    }
    Ok(best.1)
}
