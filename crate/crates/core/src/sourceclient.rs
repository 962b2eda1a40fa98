//! Reliable-source registry, search query construction and candidate fetching.
//!
//! A [`SourceClient`] answers two questions for a source: which article URLs
//! match a [`SearchQuery`], and what a given URL's article looks like. The
//! [`FixtureClient`] serves both from a local JSON-lines corpus; the
//! [`LiveClient`] talks to a news search API over HTTP.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::extract::{extract_article_with, Article, ExtractError, OverrideRules};
use crate::textproc::{tokenize, KeywordSet};

pub const API_KEY_ENV: &str = "NEWS_API_KEY";

/// Trailing window used when the query article carries no date.
pub const UNDATED_WINDOW_DAYS: u64 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("unknown source {0:?}")]
    UnknownSource(String),
    #[error("source {0:?} is disabled")]
    DisabledSource(String),
    #[error("duplicate source id {0:?}")]
    DuplicateSource(String),
    #[error("no keywords to build a query from")]
    EmptyKeywords,
    #[error("no sources selected")]
    NoSources,
    #[error("source {0:?} has no search endpoint")]
    MissingEndpoint(String),
    #[error("request to {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("request to {url} timed out")]
    Timeout { url: String },
    #[error("request to {url} returned status {status}")]
    Status { url: String, status: u16 },
    #[error("malformed response from {url}: {message}")]
    Decode { url: String, message: String },
    #[error("article {0} not found")]
    NotFound(String),
    #[error("extracting {url}: {source}")]
    Extract { url: String, source: ExtractError },
    #[error("fixture corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("all sources failed: {}", summarize(.0))]
    AllSourcesFailed(Vec<SourceFailure>),
}

fn summarize(failures: &[SourceFailure]) -> String {
    failures
        .iter()
        .map(|f| format!("{}: {}", f.source_id, f.message))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: String,
    pub display_name: String,
    /// Search API endpoint for live mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Fixture corpus serving this source, overriding the global one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<std::path::PathBuf>,
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

fn default_enabled() -> bool {
    true
}

impl SourceSpec {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        SourceSpec {
            id: id.into(),
            display_name: display_name.into(),
            endpoint: None,
            fixture_path: None,
            enabled: true,
        }
    }
}

/// Sources keyed by id, iterated in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceRegistry {
    sources: BTreeMap<String, SourceSpec>,
}

impl SourceRegistry {
    pub fn new(specs: impl IntoIterator<Item = SourceSpec>) -> Result<Self, SourceError> {
        let mut registry = SourceRegistry::default();
        for spec in specs {
            registry.add(spec)?;
        }
        Ok(registry)
    }

    pub fn add(&mut self, spec: SourceSpec) -> Result<(), SourceError> {
        if self.sources.contains_key(&spec.id) {
            return Err(SourceError::DuplicateSource(spec.id));
        }
        self.sources.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Option<SourceSpec> {
        self.sources.remove(id)
    }

    pub fn get(&self, id: &str) -> Option<&SourceSpec> {
        self.sources.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceSpec> {
        self.sources.values()
    }

    pub fn ids(&self) -> Vec<String> {
        self.sources.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Looks up an id that must be registered and enabled.
    pub fn enabled(&self, id: &str) -> Result<&SourceSpec, SourceError> {
        match self.sources.get(id) {
            None => Err(SourceError::UnknownSource(id.to_string())),
            Some(s) if !s.enabled => Err(SourceError::DisabledSource(id.to_string())),
            Some(s) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub keywords: Vec<String>,
    pub date_from: NaiveDate,
    pub date_to: NaiveDate,
    pub sources: Vec<String>,
    pub language: String,
    pub location: Option<String>,
    pub max_per_source: usize,
}

impl SearchQuery {
    pub fn contains_date(&self, date: NaiveDate) -> bool {
        self.date_from <= date && date <= self.date_to
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLink {
    pub url: String,
    pub source_id: String,
    /// 1-based position in the source's result list.
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Search,
    Fetch,
    Document,
}

/// A per-source or per-candidate problem that did not abort verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFailure {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub stage: FailureStage,
    pub message: String,
}

/// Knobs for [`build_query`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryParams {
    pub keyword_count: usize,
    pub date_window_days: u64,
    pub max_per_source: usize,
    pub language: String,
    pub location: Option<String>,
}

impl Default for QueryParams {
    fn default() -> Self {
        QueryParams {
            keyword_count: 6,
            date_window_days: 7,
            max_per_source: 10,
            language: "en".into(),
            location: None,
        }
    }
}

/// Builds the search query for an article: its top keywords, a date window
/// centred on the publication date (or trailing `today` when undated), and
/// the selected sources.
pub fn build_query(
    article: &Article,
    keywords: &KeywordSet,
    sources: &[String],
    registry: &SourceRegistry,
    params: &QueryParams,
    today: NaiveDate,
) -> Result<SearchQuery, SourceError> {
    if keywords.is_empty() {
        return Err(SourceError::EmptyKeywords);
    }
    if sources.is_empty() {
        return Err(SourceError::NoSources);
    }
    let mut selected = Vec::with_capacity(sources.len());
    for id in sources {
        registry.enabled(id)?;
        if !selected.contains(id) {
            selected.push(id.clone());
        }
    }
    selected.sort();
    let (date_from, date_to) = match article.published_at {
        Some(date) => {
            let w = Days::new(params.date_window_days);
            (
                date.checked_sub_days(w).unwrap_or(NaiveDate::MIN),
                date.checked_add_days(w).unwrap_or(NaiveDate::MAX),
            )
        }
        None => (
            today
                .checked_sub_days(Days::new(UNDATED_WINDOW_DAYS))
                .unwrap_or(NaiveDate::MIN),
            today,
        ),
    };
    Ok(SearchQuery {
        keywords: keywords
            .terms()
            .take(params.keyword_count)
            .map(str::to_string)
            .collect(),
        date_from,
        date_to,
        sources: selected,
        language: params.language.clone(),
        location: params.location.clone(),
        max_per_source: params.max_per_source.max(1),
    })
}

/// Search and article retrieval for one kind of backend.
pub trait SourceClient: Send + Sync {
    /// Ranked article URLs from `source` matching `query`.
    fn search(&self, source: &SourceSpec, query: &SearchQuery) -> Result<Vec<String>, SourceError>;

    fn fetch_article(&self, url: &str) -> Result<Article, SourceError>;
}

/// Routes each source id to its client.
#[derive(Clone)]
pub struct ClientRouter {
    default: Arc<dyn SourceClient>,
    per_source: HashMap<String, Arc<dyn SourceClient>>,
}

impl ClientRouter {
    pub fn new(default: Arc<dyn SourceClient>) -> Self {
        ClientRouter {
            default,
            per_source: HashMap::new(),
        }
    }

    pub fn with_source(mut self, id: impl Into<String>, client: Arc<dyn SourceClient>) -> Self {
        self.per_source.insert(id.into(), client);
        self
    }

    pub fn client_for(&self, id: &str) -> &Arc<dyn SourceClient> {
        self.per_source.get(id).unwrap_or(&self.default)
    }
}

impl std::fmt::Debug for ClientRouter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClientRouter")
            .field("per_source", &self.per_source.keys().collect::<Vec<_>>())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FetchOutcome {
    pub links: Vec<CandidateLink>,
    pub failures: Vec<SourceFailure>,
}

/// Queries every selected source concurrently and merges the results in
/// (source id, rank) order. Individual source failures are recorded; the
/// call fails only when every source failed.
pub fn fetch_candidates(
    query: &SearchQuery,
    registry: &SourceRegistry,
    clients: &ClientRouter,
) -> Result<FetchOutcome, SourceError> {
    if query.sources.is_empty() {
        return Err(SourceError::NoSources);
    }
    let mut ids = query.sources.clone();
    ids.sort();
    ids.dedup();
    let specs = ids
        .iter()
        .map(|id| registry.enabled(id).cloned())
        .collect::<Result<Vec<_>, _>>()?;

    let results: Vec<Result<Vec<String>, SourceError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .map(|spec| scope.spawn(move || clients.client_for(&spec.id).search(spec, query)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(SourceError::Http {
                        url: String::new(),
                        message: "search worker panicked".into(),
                    })
                })
            })
            .collect()
    });

    let mut outcome = FetchOutcome::default();
    let mut succeeded = 0;
    for (spec, result) in specs.iter().zip(results) {
        match result {
            Ok(urls) => {
                succeeded += 1;
                let mut seen = HashSet::new();
                let ranked = urls
                    .into_iter()
                    .filter(|u| seen.insert(u.clone()))
                    .take(query.max_per_source);
                for (i, url) in ranked.enumerate() {
                    outcome.links.push(CandidateLink {
                        url,
                        source_id: spec.id.clone(),
                        rank: i + 1,
                    });
                }
            }
            Err(e) => {
                warn!(source = %spec.id, error = %e, "source search failed");
                outcome.failures.push(SourceFailure {
                    source_id: spec.id.clone(),
                    url: None,
                    stage: FailureStage::Search,
                    message: e.to_string(),
                });
            }
        }
    }
    if succeeded == 0 {
        return Err(SourceError::AllSourcesFailed(outcome.failures));
    }
    Ok(outcome)
}

/// One line of a fixture corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub url: String,
    pub source_id: String,
    pub title: String,
    pub body: String,
    pub published_at: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub authors: Vec<String>,
    /// Full page; when present the article is extracted from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub html: Option<String>,
}

/// Serves searches and articles from an in-memory corpus.
///
/// A record matches a query when its publication date falls inside the
/// window and at least one keyword occurs among its title or body tokens.
/// Matches are ranked by the number of distinct keywords hit, then by URL.
#[derive(Debug, Clone, Default)]
pub struct FixtureClient {
    records: Vec<IndexedRecord>,
    by_url: HashMap<String, usize>,
    rules: OverrideRules,
}

#[derive(Debug, Clone)]
struct IndexedRecord {
    record: FixtureRecord,
    date: Option<NaiveDate>,
    terms: HashSet<String>,
}

impl FixtureClient {
    pub fn new(records: Vec<FixtureRecord>) -> Self {
        let mut client = FixtureClient::default();
        for record in records {
            if client.by_url.contains_key(&record.url) {
                warn!(url = %record.url, "duplicate fixture url ignored");
                continue;
            }
            let date = record.published_at.as_deref().and_then(crate::extract::parse_date);
            let terms = tokenize(&record.title)
                .into_iter()
                .chain(tokenize(&record.body))
                .collect();
            client.by_url.insert(record.url.clone(), client.records.len());
            client.records.push(IndexedRecord { record, date, terms });
        }
        client
    }

    pub fn with_rules(mut self, rules: OverrideRules) -> Self {
        self.rules = rules;
        self
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, SourceError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| SourceError::Corpus {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(&line).map_err(|e| SourceError::Corpus {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        Ok(Self::new(records))
    }

    pub fn load(path: &Path) -> Result<Self, SourceError> {
        let file = std::fs::File::open(path).map_err(|e| SourceError::Corpus {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(std::io::BufReader::new(file))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &FixtureRecord> {
        self.records.iter().map(|r| &r.record)
    }
}

impl SourceClient for FixtureClient {
    fn search(&self, source: &SourceSpec, query: &SearchQuery) -> Result<Vec<String>, SourceError> {
        let keywords: HashSet<String> = query.keywords.iter().map(|k| k.to_lowercase()).collect();
        let mut hits: Vec<(usize, &str)> = self
            .records
            .iter()
            .filter(|r| r.record.source_id == source.id)
            .filter(|r| r.date.is_some_and(|d| query.contains_date(d)))
            .map(|r| (keywords.iter().filter(|k| r.terms.contains(*k)).count(), r.record.url.as_str()))
            .filter(|(n, _)| *n > 0)
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(hits
            .into_iter()
            .take(query.max_per_source)
            .map(|(_, url)| url.to_string())
            .collect())
    }

    fn fetch_article(&self, url: &str) -> Result<Article, SourceError> {
        let indexed = self
            .by_url
            .get(url)
            .map(|&i| &self.records[i])
            .ok_or_else(|| SourceError::NotFound(url.to_string()))?;
        let record = &indexed.record;
        match &record.html {
            Some(html) => extract_article_with(html, url, &self.rules).map_err(|source| {
                SourceError::Extract {
                    url: url.to_string(),
                    source,
                }
            }),
            None => Ok(Article::new(
                url,
                record.title.clone(),
                record.authors.clone(),
                indexed.date,
                record.body.clone(),
            )),
        }
    }
}

/// Retry schedule for live requests: `retries` extra attempts with doubling
/// backoff starting at `initial_backoff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            initial_backoff: Duration::from_millis(500),
            timeout: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff.saturating_mul(1u32 << attempt.min(16))
    }
}

#[derive(Debug, Deserialize)]
struct SearchResponse {
    articles: Vec<SearchHit>,
}

#[derive(Debug, Deserialize)]
struct SearchHit {
    url: String,
}

/// HTTP adapter for a news search API.
///
/// Searches issue `GET <endpoint>?q=..&from=..&to=..&pageSize=..&sources=..`
/// and expect `{"articles": [{"url": ..}, ..]}`. The API key is read from
/// `NEWS_API_KEY` and sent as `X-Api-Key`.
#[derive(Debug, Clone)]
pub struct LiveClient {
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    rules: OverrideRules,
}

impl LiveClient {
    pub fn new(retry: RetryPolicy, rules: OverrideRules) -> Result<Self, SourceError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(retry.timeout)
            .user_agent(concat!("evidex/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| SourceError::Http {
                url: String::new(),
                message: e.to_string(),
            })?;
        Ok(LiveClient {
            http,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry,
            rules,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn get_with_retry(&self, url: &str, params: &[(&str, String)]) -> Result<String, SourceError> {
        let mut attempt = 0;
        loop {
            let result = self.get_once(url, params);
            match result {
                Err(e) if attempt < self.retry.retries && retryable(&e) => {
                    let wait = self.retry.backoff(attempt);
                    debug!(url, attempt, ?wait, error = %e, "retrying request");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn get_once(&self, url: &str, params: &[(&str, String)]) -> Result<String, SourceError> {
        let mut request = self.http.get(url).query(params);
        if let Some(key) = &self.api_key {
            request = request.header("X-Api-Key", key);
        }
        let response = request.send().map_err(|e| request_error(url, e))?;
        let status = response.status();
        if !status.is_success() {
            return Err(SourceError::Status {
                url: url.to_string(),
                status: status.as_u16(),
            });
        }
        response.text().map_err(|e| request_error(url, e))
    }
}

fn request_error(url: &str, e: reqwest::Error) -> SourceError {
    if e.is_timeout() {
        SourceError::Timeout { url: url.to_string() }
    } else {
        SourceError::Http {
            url: url.to_string(),
            message: e.to_string(),
        }
    }
}

fn retryable(e: &SourceError) -> bool {
    match e {
        SourceError::Http { .. } | SourceError::Timeout { .. } => true,
        SourceError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl SourceClient for LiveClient {
    fn search(&self, source: &SourceSpec, query: &SearchQuery) -> Result<Vec<String>, SourceError> {
        let endpoint = source
            .endpoint
            .as_deref()
            .ok_or_else(|| SourceError::MissingEndpoint(source.id.clone()))?;
        let mut params = vec![
            ("q", query.keywords.join(" ")),
            ("from", query.date_from.to_string()),
            ("to", query.date_to.to_string()),
            ("pageSize", query.max_per_source.to_string()),
            ("sources", source.id.clone()),
            ("language", query.language.clone()),
        ];
        if let Some(location) = &query.location {
            params.push(("country", location.clone()));
        }
        let body = self.get_with_retry(endpoint, &params)?;
        let parsed: SearchResponse = serde_json::from_str(&body).map_err(|e| SourceError::Decode {
            url: endpoint.to_string(),
            message: e.to_string(),
        })?;
        Ok(parsed.articles.into_iter().map(|a| a.url).collect())
    }

    fn fetch_article(&self, url: &str) -> Result<Article, SourceError> {
        let html = self.get_with_retry(url, &[])?;
        extract_article_with(&html, url, &self.rules).map_err(|source| SourceError::Extract {
            url: url.to_string(),
            source,
        })
    }
}
