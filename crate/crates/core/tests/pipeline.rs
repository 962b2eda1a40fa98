use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::NaiveDate;
use proptest::prelude::*;

use evidex_core::config::Config;
use evidex_core::embeddings::{EmbeddingTable, TableBuilder};
use evidex_core::extract::{Article, OverrideRules};
use evidex_core::pipeline::{
    refine, Candidate, Engine, NoticeKind, PipelineError, RefineSettings, Verdict, VerifyInput,
};
use evidex_core::sourceclient::{
    ClientRouter, FailureStage, FixtureClient, FixtureRecord, SourceRegistry, SourceSpec,
};
use evidex_core::textproc::{build_document, StopWords};

const QUERY_URL: &str = "https://viralnews.example/2020/07/14/gatorade-banned-in-schools";
const NEAR_DUPLICATE: &str = "https://cnn.example/2020/07/15/health/gatorade-school-ban";

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn today() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 3, 28).unwrap()
}

fn bundled() -> Engine {
    Engine::from_config(Config::load(&data_dir().join("config.json")).unwrap()).unwrap()
}

fn below_threshold(engine: &Engine, sources: &[String]) -> BTreeSet<String> {
    engine
        .verify_on(&VerifyInput::Url(QUERY_URL.into()), sources, today())
        .unwrap()
        .matches
        .into_iter()
        .filter(|m| m.below_threshold)
        .map(|m| m.article.url)
        .collect()
}

#[test]
fn bundled_scenario_report_shape() {
    let engine = bundled();
    let sources = engine.registry().ids();
    let report = engine.verify_on(&VerifyInput::Url(QUERY_URL.into()), &sources, today()).unwrap();
    assert_eq!(report.verdict, Verdict::SupportFound);
    assert_eq!(report.matches[0].article.url, NEAR_DUPLICATE);
    assert_eq!(report.matches[0].source_id, "cnn");
    assert!(report.matches.len() <= engine.config().prefilter_keep);
    for pair in report.matches.windows(2) {
        assert!(
            (pair[0].exact_distance, &pair[0].article.url) < (pair[1].exact_distance, &pair[1].article.url)
        );
    }
    for m in &report.matches {
        assert_eq!(m.below_threshold, m.exact_distance < report.threshold);
        assert!(m.prefilter_distance >= m.exact_distance - 1e-9);
    }
    assert_eq!(report.query.date_from, NaiveDate::from_ymd_opt(2020, 7, 7).unwrap());
    assert_eq!(report.query.date_to, NaiveDate::from_ymd_opt(2020, 7, 21).unwrap());
    assert!(report.notices.is_empty());
    assert!(report.source_errors.is_empty());
}

#[test]
fn html_input_matches_url_input() {
    let engine = bundled();
    let sources = engine.registry().ids();
    let html = std::fs::read_to_string(data_dir().join("fixtures/pages/query.html")).unwrap();
    let by_html = engine
        .verify_on(&VerifyInput::Html { html, url: Some(QUERY_URL.into()) }, &sources, today())
        .unwrap();
    let by_url = engine.verify_on(&VerifyInput::Url(QUERY_URL.into()), &sources, today()).unwrap();
    assert_eq!(by_html.without_timing(), by_url.without_timing());
}

#[test]
fn deselecting_the_matching_source_flips_the_verdict() {
    let engine = bundled();
    let without_cnn: Vec<String> = engine.registry().ids().into_iter().filter(|s| s != "cnn").collect();
    let report = engine.verify_on(&VerifyInput::Url(QUERY_URL.into()), &without_cnn, today()).unwrap();
    assert_eq!(report.verdict, Verdict::PotentiallyFake);
    assert!(report.matches.iter().all(|m| m.source_id != "cnn"));
}

#[test]
fn deselecting_a_source_never_adds_supporting_matches() {
    let engine = bundled();
    let all = engine.registry().ids();
    let full = below_threshold(&engine, &all);
    for removed in &all {
        let subset: Vec<String> = all.iter().filter(|s| *s != removed).cloned().collect();
        let partial = below_threshold(&engine, &subset);
        assert!(partial.is_subset(&full), "removing {removed} added {:?}", partial.difference(&full));
    }
}

#[test]
fn unknown_source_is_rejected() {
    let err = bundled()
        .verify_on(&VerifyInput::Url(QUERY_URL.into()), &["nosuch".into()], today())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Query(_)), "{err:?}");
    assert!(!err.is_extraction());
}

#[test]
fn unresolvable_url_is_an_extraction_failure() {
    let err = bundled()
        .verify_on(&VerifyInput::Url("https://missing.example/x".into()), &["cnn".into()], today())
        .unwrap_err();
    assert!(err.is_extraction(), "{err:?}");
}

#[test]
fn empty_page_is_an_extraction_failure() {
    let err = bundled()
        .verify_on(&VerifyInput::Html { html: "<html></html>".into(), url: None }, &["cnn".into()], today())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Extract(_)), "{err:?}");
}

fn word_table() -> Arc<EmbeddingTable> {
    let mut b = TableBuilder::new(2);
    for (w, v) in [
        ("flood", [0.0, 0.0]),
        ("river", [0.1, 0.0]),
        ("rain", [0.0, 0.1]),
        ("stocks", [5.0, 5.0]),
        ("market", [5.1, 5.0]),
    ] {
        b.push(w, &v).unwrap();
    }
    Arc::new(b.build())
}

fn record(url: &str, source: &str, text: &str, date: &str) -> FixtureRecord {
    FixtureRecord {
        url: url.into(),
        source_id: source.into(),
        title: text.into(),
        body: text.into(),
        published_at: Some(date.into()),
        authors: vec![],
        html: None,
    }
}

fn small_engine(records: Vec<FixtureRecord>) -> Engine {
    let fixture = Arc::new(FixtureClient::new(records));
    let config = Config {
        threshold: 0.5,
        fixture_corpus_path: Some("unused".into()),
        ..Config::default()
    };
    let registry = SourceRegistry::new([SourceSpec::new("wire", "Wire"), SourceSpec::new("daily", "Daily")]).unwrap();
    Engine::new(
        config,
        word_table(),
        StopWords::english(),
        registry,
        ClientRouter::new(fixture.clone()),
        fixture,
        OverrideRules::default(),
    )
}

#[test]
fn query_article_is_not_its_own_evidence() {
    let engine = small_engine(vec![
        record("https://wire.example/q", "wire", "flood river rain", "2020-05-01"),
        record("https://daily.example/a", "daily", "flood river", "2020-05-02"),
    ]);
    let report = engine
        .verify_on(&VerifyInput::Url("https://wire.example/q".into()), &["wire".into(), "daily".into()], today())
        .unwrap();
    let urls: Vec<&str> = report.matches.iter().map(|m| m.article.url.as_str()).collect();
    assert_eq!(urls, ["https://daily.example/a"]);
    assert_eq!(report.verdict, Verdict::SupportFound);
}

#[test]
fn unusable_candidates_are_recorded_and_skipped() {
    // "zzzz" is a keyword of the query but has no embedding.
    let engine = small_engine(vec![
        record("https://wire.example/q", "wire", "flood river rain zzzz zzzz zzzz", "2020-05-01"),
        record("https://daily.example/oov", "daily", "zzzz", "2020-05-02"),
        FixtureRecord {
            html: Some("<html><body><h2>no paragraphs</h2></body></html>".into()),
            ..record("https://daily.example/broken", "daily", "flood", "2020-05-02")
        },
        record("https://daily.example/ok", "daily", "river rain", "2020-05-02"),
    ]);
    let report = engine
        .verify_on(&VerifyInput::Url("https://wire.example/q".into()), &["daily".into()], today())
        .unwrap();
    let urls: Vec<&str> = report.matches.iter().map(|m| m.article.url.as_str()).collect();
    assert_eq!(urls, ["https://daily.example/ok"]);
    let failures: Vec<(&str, FailureStage)> = report
        .source_errors
        .iter()
        .map(|f| (f.url.as_deref().unwrap(), f.stage))
        .collect();
    assert_eq!(
        failures,
        [
            ("https://daily.example/broken", FailureStage::Fetch),
            ("https://daily.example/oov", FailureStage::Document),
        ]
    );
}

#[test]
fn no_candidates_gives_a_notice() {
    let engine = small_engine(vec![
        record("https://wire.example/q", "wire", "flood river rain", "2020-05-01"),
        record("https://daily.example/old", "daily", "flood river", "2019-01-01"),
    ]);
    let report = engine
        .verify_on(&VerifyInput::Url("https://wire.example/q".into()), &["daily".into()], today())
        .unwrap();
    assert!(report.matches.is_empty());
    assert_eq!(report.verdict, Verdict::PotentiallyFake);
    assert_eq!(report.notices.len(), 1);
    assert_eq!(report.notices[0].kind, NoticeKind::NoCandidates);
}

#[test]
fn registry_replacement_is_seen_by_later_calls() {
    let engine = small_engine(vec![record("https://wire.example/q", "wire", "flood river rain", "2020-05-01")]);
    let before = engine.registry();
    engine.replace_registry(SourceRegistry::new([SourceSpec::new("wire", "Wire")]).unwrap());
    assert_eq!(before.len(), 2);
    assert_eq!(engine.registry().len(), 1);
    let err = engine
        .verify_on(&VerifyInput::Url("https://wire.example/q".into()), &["daily".into()], today())
        .unwrap_err();
    assert!(matches!(err, PipelineError::Query(_)));
}

#[test]
fn concurrent_verifications_agree() {
    let engine = Arc::new(bundled());
    let sources = engine.registry().ids();
    let reports: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let engine = engine.clone();
                let sources = sources.clone();
                s.spawn(move || engine.verify_on(&VerifyInput::Url(QUERY_URL.into()), &sources, today()).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap().without_timing()).collect()
    });
    assert!(reports.windows(2).all(|w| w[0] == w[1]));
}

fn grid_table() -> EmbeddingTable {
    let mut b = TableBuilder::new(2);
    for i in 0..6 {
        for j in 0..6 {
            b.push(&format!("t{i}{j}"), &[i as f64, j as f64 * 0.7]).unwrap();
        }
    }
    b.build()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn refine_reports_sorted_subset_of_prefilter_survivors(
        query in proptest::collection::vec((0usize..6, 0usize..6), 1..6),
        cands in proptest::collection::vec(proptest::collection::vec((0usize..6, 0usize..6), 1..6), 0..10),
        keep in 1usize..7,
    ) {
        let table = grid_table();
        let doc = |cells: &[(usize, usize)]| {
            let tokens: Vec<String> = cells.iter().map(|(i, j)| format!("t{i}{j}")).collect();
            build_document(&tokens, &table).unwrap()
        };
        let q = doc(&query);
        let candidates: Vec<Candidate> = cands
            .iter()
            .enumerate()
            .map(|(k, c)| Candidate {
                article: Article::new(format!("https://p/{k:02}"), "t", vec![], None, "t"),
                source_id: "s".into(),
                document: doc(c),
            })
            .collect();
        let settings = RefineSettings { prefilter_keep: keep, threshold: 1.0, ..RefineSettings::default() };
        let r = refine(&q, &candidates, &table, &settings);
        prop_assert_eq!(r.matches.len(), keep.min(candidates.len()));
        let kept: BTreeSet<&str> = r.screened.iter().filter(|s| s.kept).map(|s| s.url.as_str()).collect();
        for m in &r.matches {
            prop_assert!(kept.contains(m.article.url.as_str()));
            prop_assert!(m.prefilter_distance >= m.exact_distance - 1e-9);
        }
        for w in r.screened.windows(2) {
            prop_assert!((w[0].prefilter_distance, &w[0].url) <= (w[1].prefilter_distance, &w[1].url));
        }
        for w in r.matches.windows(2) {
            prop_assert!((w[0].exact_distance, &w[0].article.url) <= (w[1].exact_distance, &w[1].article.url));
        }
    }
}
