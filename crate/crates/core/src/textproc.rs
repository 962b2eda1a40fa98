//! Tokenization, stopword filtering, normalized bag-of-words documents and
//! keyword extraction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingTable;

const ENGLISH_STOPWORDS: &str = include_str!("../../../data/stopwords/en.txt");

/// Multiplier applied to the frequency of terms that also occur in the title.
pub const TITLE_BOOST: f64 = 3.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("empty document support")]
    EmptySupport { dropped_oov: Vec<String> },
}

/// Lowercases `text` and splits it on every character that is neither a
/// letter nor a digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercased stopword set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StopWords(HashSet<String>);

impl StopWords {
    /// Parses one word per line; `#` starts a comment.
    pub fn parse(contents: &str) -> Self {
        StopWords(
            contents
                .lines()
                .map(|line| line.split('#').next().unwrap_or("").trim())
                .filter(|w| !w.is_empty())
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(ENGLISH_STOPWORDS)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for StopWords {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        StopWords(iter.into_iter().map(|s| s.into().to_lowercase()).collect())
    }
}

/// Order-preserving stopword filter.
pub fn remove_stopwords(tokens: Vec<String>, stoplist: &StopWords) -> Vec<String> {
    tokens.into_iter().filter(|t| !stoplist.contains(t)).collect()
}

/// `tokenize` followed by `remove_stopwords`.
pub fn clean(text: &str, stoplist: &StopWords) -> Vec<String> {
    remove_stopwords(tokenize(text), stoplist)
}

/// Normalized bag of words over the in-vocabulary support of a text.
///
/// Tokens are kept in lexicographic order, so two token lists that are
/// permutations of each other produce equal documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    tokens: Vec<String>,
    weights: Vec<f64>,
    source_token_count: usize,
    dropped_oov: Vec<String>,
}

impl Document {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Token count before out-of-vocabulary removal.
    pub fn source_token_count(&self) -> usize {
        self.source_token_count
    }

    /// Distinct out-of-vocabulary tokens, in first-seen order.
    pub fn dropped_oov(&self) -> &[String] {
        &self.dropped_oov
    }

    pub fn support_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn weight_of(&self, token: &str) -> Option<f64> {
        self.tokens
            .binary_search_by(|t| t.as_str().cmp(token))
            .ok()
            .map(|i| self.weights[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.tokens.iter().map(String::as_str).zip(self.weights.iter().copied())
    }
}

/// Builds the nBOW document: each in-vocabulary word gets weight
/// `count / total`, where `total` counts the remaining (in-vocabulary)
/// occurrences.
pub fn build_document<S: AsRef<str>>(
    tokens: &[S],
    table: &EmbeddingTable,
) -> Result<Document, TextError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut dropped_oov: Vec<String> = Vec::new();
    let mut seen_oov: HashSet<&str> = HashSet::new();
    let mut kept = 0usize;
    for token in tokens {
        let token = token.as_ref();
        if table.contains(token) {
            *counts.entry(token).or_default() += 1;
            kept += 1;
        } else if seen_oov.insert(token) {
            dropped_oov.push(token.to_string());
        }
    }
    if kept == 0 {
        return Err(TextError::EmptySupport { dropped_oov });
    }
    let total = kept as f64;
    let (tokens_out, weights) = counts
        .into_iter()
        .map(|(t, c)| (t.to_string(), c as f64 / total))
        .unzip();
    Ok(Document {
        tokens: tokens_out,
        weights,
        source_token_count: tokens.len(),
        dropped_oov,
    })
}

/// Ranked keyword list, highest score first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeywordSet {
    pub keywords: Vec<(String, f64)>,
}

impl KeywordSet {
    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.keywords.iter().map(|(t, _)| t.as_str())
    }
}

/// Scores terms by frequency over title and body, tripled for terms present
/// in the title; returns the top `k` with ties broken lexicographically.
pub fn extract_keywords(title: &str, body: &str, k: usize, stoplist: &StopWords) -> KeywordSet {
    let title_terms: HashSet<String> = clean(title, stoplist).into_iter().collect();
    let mut freq: HashMap<String, usize> = HashMap::new();
    for term in clean(title, stoplist).into_iter().chain(clean(body, stoplist)) {
        *freq.entry(term).or_default() += 1;
    }
    let mut scored: Vec<(String, f64)> = freq
        .into_iter()
        .map(|(term, count)| {
            let boost = if title_terms.contains(&term) { TITLE_BOOST } else { 1.0 };
            let score = count as f64 * boost;
            (term, score)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    KeywordSet { keywords: scored }
}
