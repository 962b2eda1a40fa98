//! Article extraction from HTML pages.
//!
//! Metadata comes from the usual meta tags. The body is chosen with a
//! paragraph-density heuristic: every `<p>` outside boilerplate subtrees
//! scores its parent with its text length and its grandparent with half of
//! it; the best-scoring element contributes all of its paragraphs. Hosts can
//! override any field with CSS selectors.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use scraper::{ElementRef, Html, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textproc::tokenize;

/// Elements whose subtrees never contribute text.
const BOILERPLATE: &[&str] = &["nav", "footer", "script", "style", "noscript"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no title")]
    NoTitle,
    #[error("no content")]
    NoContent,
}

#[derive(Debug, Error)]
pub enum RulesError {
    #[error("reading override rules: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing override rules: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid selector {selector:?} for {host}")]
    Selector { host: String, selector: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    pub url: String,
    pub title: String,
    pub authors: Vec<String>,
    pub published_at: Option<NaiveDate>,
    pub body: String,
    pub word_count: usize,
}

impl Article {
    /// Assembles an article from already-extracted fields.
    pub fn new(
        url: impl Into<String>,
        title: impl Into<String>,
        authors: Vec<String>,
        published_at: Option<NaiveDate>,
        body: impl Into<String>,
    ) -> Self {
        let body = body.into();
        Article {
            url: url.into(),
            title: title.into(),
            authors,
            published_at,
            word_count: tokenize(&body).len(),
            body,
        }
    }
}

/// Per-field CSS selectors for one host.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

/// Host name -> selector overrides, loaded from a JSON object.
#[derive(Debug, Clone, Default)]
pub struct OverrideRules {
    rules: HashMap<String, CompiledRule>,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    title: Option<Selector>,
    body: Option<Selector>,
    date: Option<Selector>,
}

impl OverrideRules {
    pub fn new(rules: BTreeMap<String, ExtractRule>) -> Result<Self, RulesError> {
        let mut compiled = HashMap::new();
        for (host, rule) in rules {
            let compile = |s: &Option<String>| -> Result<Option<Selector>, RulesError> {
                s.as_deref()
                    .map(|sel| {
                        Selector::parse(sel).map_err(|_| RulesError::Selector {
                            host: host.clone(),
                            selector: sel.to_string(),
                        })
                    })
                    .transpose()
            };
            let rule = CompiledRule {
                title: compile(&rule.title)?,
                body: compile(&rule.body)?,
                date: compile(&rule.date)?,
            };
            compiled.insert(normalize_host(&host).to_string(), rule);
        }
        Ok(OverrideRules { rules: compiled })
    }

    pub fn parse(json: &str) -> Result<Self, RulesError> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn load(path: &Path) -> Result<Self, RulesError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    fn for_url(&self, url: &str) -> Option<&CompiledRule> {
        let parsed = url::Url::parse(url).ok()?;
        self.rules.get(normalize_host(parsed.host_str()?))
    }
}

fn normalize_host(host: &str) -> &str {
    host.strip_prefix("www.").unwrap_or(host)
}

/// Extracts an article with the default heuristics only.
pub fn extract_article(html: &str, url: &str) -> Result<Article, ExtractError> {
    extract_article_with(html, url, &OverrideRules::default())
}

/// Extracts an article, applying any override rule registered for the URL's
/// host before falling back to the heuristics.
pub fn extract_article_with(
    html: &str,
    url: &str,
    rules: &OverrideRules,
) -> Result<Article, ExtractError> {
    let doc = Html::parse_document(html);
    let rule = rules.for_url(url);

    let title = rule
        .and_then(|r| r.title.as_ref())
        .and_then(|sel| doc.select(sel).map(|e| element_text(e)).find(|t| !t.is_empty()))
        .or_else(|| find_title(&doc))
        .ok_or(ExtractError::NoTitle)?;

    let published_at = rule
        .and_then(|r| r.date.as_ref())
        .and_then(|sel| {
            doc.select(sel).find_map(|e| {
                let v = e.value();
                v.attr("datetime")
                    .or_else(|| v.attr("content"))
                    .and_then(parse_date)
                    .or_else(|| parse_date(&element_text(e)))
            })
        })
        .or_else(|| find_date(&doc));

    let body = rule
        .and_then(|r| r.body.as_ref())
        .map(|sel| {
            doc.select(sel)
                .filter(|e| !in_boilerplate(*e))
                .map(element_text)
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
                .join("\n\n")
        })
        .filter(|b| !b.is_empty())
        .or_else(|| densest_body(&doc))
        .ok_or(ExtractError::NoContent)?;

    Ok(Article::new(url, title, find_authors(&doc), published_at, body))
}

fn selector(css: &str) -> Selector {
    Selector::parse(css).expect("static selector")
}

fn meta_content<'a>(doc: &'a Html, css: &str) -> impl Iterator<Item = String> + 'a {
    let sel = selector(css);
    doc.select(&sel)
        .filter_map(|e| e.value().attr("content"))
        .map(collapse_whitespace)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .into_iter()
}

fn find_title(doc: &Html) -> Option<String> {
    meta_content(doc, r#"meta[property="og:title"], meta[name="og:title"]"#)
        .next()
        .or_else(|| first_text(doc, "title"))
        .or_else(|| first_text(doc, "h1"))
}

fn first_text(doc: &Html, css: &str) -> Option<String> {
    let sel = selector(css);
    doc.select(&sel).map(element_text).find(|t| !t.is_empty())
}

fn find_date(doc: &Html) -> Option<NaiveDate> {
    meta_content(
        doc,
        r#"meta[property="article:published_time"], meta[name="article:published_time"]"#,
    )
    .find_map(|raw| parse_date(&raw))
    .or_else(|| {
        let sel = selector("time[datetime]");
        doc.select(&sel)
            .filter_map(|e| e.value().attr("datetime"))
            .find_map(parse_date)
    })
}

fn find_authors(doc: &Html) -> Vec<String> {
    let mut authors: Vec<String> = Vec::new();
    for name in meta_content(
        doc,
        r#"meta[name="author"], meta[property="article:author"], meta[name="article:author"]"#,
    ) {
        if !authors.contains(&name) {
            authors.push(name);
        }
    }
    authors
}

fn in_boilerplate(element: ElementRef<'_>) -> bool {
    BOILERPLATE.contains(&element.value().name())
        || element.ancestors().any(|node| {
            node.value()
                .as_element()
                .is_some_and(|e| BOILERPLATE.contains(&e.name()))
        })
}

/// Text content with boilerplate descendants skipped and whitespace collapsed.
fn element_text(element: ElementRef<'_>) -> String {
    let mut out = String::new();
    for node in element.descendants() {
        if let Some(text) = node.value().as_text() {
            let skip = node.ancestors().any(|a| {
                a.value()
                    .as_element()
                    .is_some_and(|e| BOILERPLATE.contains(&e.name()))
            });
            if !skip {
                out.push_str(text);
                out.push(' ');
            }
        }
    }
    collapse_whitespace(&out)
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn densest_body(doc: &Html) -> Option<String> {
    let p = selector("p");
    let paragraphs: Vec<(ElementRef<'_>, String)> = doc
        .select(&p)
        .filter(|e| !in_boilerplate(*e))
        .map(|e| (e, element_text(e)))
        .filter(|(_, t)| !t.is_empty())
        .collect();

    // Scores keyed by node id; `order` keeps first-seen order for ties.
    let mut scores = HashMap::new();
    let mut order = Vec::new();
    for (element, text) in &paragraphs {
        let len = text.chars().count() as f64;
        let mut ancestors = element.ancestors().filter(|n| n.value().is_element());
        for weight in [1.0, 0.5] {
            if let Some(node) = ancestors.next() {
                let key = node.id();
                let entry = scores.entry(key).or_insert_with(|| {
                    order.push(key);
                    0.0
                });
                *entry += weight * len;
            }
        }
    }
    let best = order
        .iter()
        .copied()
        .fold(None, |best, key| {
            let score: f64 = scores[&key];
            match best {
                Some((_, s)) if s >= score => best,
                _ => Some((key, score)),
            }
        })?
        .0;

    let body: Vec<&str> = paragraphs
        .iter()
        .filter(|(element, _)| element.ancestors().any(|n| n.id() == best))
        .map(|(_, t)| t.as_str())
        .collect();
    (!body.is_empty()).then(|| body.join("\n\n"))
}

/// Parses an ISO-8601 date or timestamp into a UTC calendar date. Timestamps
/// without an offset are taken as UTC.
pub fn parse_date(raw: &str) -> Option<NaiveDate> {
    let raw = raw.trim();
    if raw.is_empty() {
        return None;
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.with_timezone(&Utc).date_naive());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z"] {
        if let Ok(dt) = DateTime::parse_from_str(raw, fmt) {
            return Some(dt.with_timezone(&Utc).date_naive());
        }
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(raw, fmt) {
            return Some(dt.date());
        }
    }
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").ok()
}
