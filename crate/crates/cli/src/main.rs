//! `evidex` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or config errors, 2 on usage
//! errors.

use std::io::BufRead;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use tracing_subscriber::EnvFilter;

use evidex_core::config::{Config, CONFIG_ENV};
use evidex_core::embeddings::EmbeddingTable;
use evidex_core::extract::extract_article;
use evidex_core::pipeline::{
    article_tokens, calibrate_threshold, prefilter_distance, Engine, RefineSettings,
    VerificationReport, Verdict, VerifyInput,
};
use evidex_core::textproc::{build_document, clean, Document, StopWords};
use evidex_core::transport::{wmd, wrd};

#[derive(Debug, Parser)]
#[command(name = "evidex", version, about = "Find supporting evidence for news articles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Verify an article against the configured sources.
    Verify {
        /// Article URL, resolved through the configured client.
        #[arg(long, conflicts_with = "file", required_unless_present = "file")]
        url: Option<String>,
        /// Local HTML page.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Comma-separated source ids; all enabled sources when omitted.
        #[arg(long, value_delimiter = ',')]
        sources: Vec<String>,
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Distance between two documents (plain text or HTML).
    Distance {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Wmd)]
        method: Method,
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
    },
    /// Derive a distance threshold from labelled document pairs.
    Calibrate {
        /// JSON lines of {"a_path", "b_path", "related"}; paths relative to
        /// this file.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Store the threshold in the config file.
        #[arg(long)]
        write: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = CONFIG_ENV)]
        config: Option<PathBuf>,
        /// Overrides EVIDEX_PORT.
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Wmd,
    Sinkhorn,
    Wrd,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Verify {
            url,
            file,
            sources,
            config,
            json,
        } => verify(url, file, sources, config.as_deref(), json),
        Command::Distance { a, b, method, config } => distance(&a, &b, method, config.as_deref()),
        Command::Calibrate { pairs, config, write } => calibrate(&pairs, config.as_deref(), write),
        Command::Serve { config, port } => serve(config.as_deref(), port),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    Ok(Config::locate(path)?)
}

fn verify(
    url: Option<String>,
    file: Option<PathBuf>,
    sources: Vec<String>,
    config: Option<&Path>,
    json: bool,
) -> Result<()> {
    let config = load_config(config)?;
    let input = match (url, file) {
        (Some(url), _) => VerifyInput::Url(url),
        (None, Some(path)) => VerifyInput::Html {
            html: std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))?,
            url: None,
        },
        (None, None) => bail!("give --url or --file"),
    };
    let engine = Engine::from_config(config)?;
    let sources = if sources.is_empty() {
        engine.registry().iter().filter(|s| s.enabled).map(|s| s.id.clone()).collect()
    } else {
        sources
    };
    let report = engine.verify(&input, &sources)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print_report(&report, &engine);
    }
    Ok(())
}

fn print_report(report: &VerificationReport, engine: &Engine) {
    let registry = engine.registry();
    let article = &report.query_article;
    println!("Article:   {}", article.title);
    if let Some(date) = article.published_at {
        println!("Published: {date}");
    }
    println!(
        "Searched:  {} from {} to {}",
        report.query.keywords.join(" "),
        report.query.date_from,
        report.query.date_to
    );
    println!();
    if report.matches.is_empty() {
        println!("No candidate articles were scored.");
    } else {
        println!("{:>4}  {:>9}  {:>9}  {:<20}  title", "rank", "distance", "prefilter", "source");
        for (i, m) in report.matches.iter().enumerate() {
            let source = registry
                .get(&m.source_id)
                .map_or(m.source_id.as_str(), |s| s.display_name.as_str());
            let mark = if m.below_threshold { "*" } else { " " };
            println!(
                "{:>4}{mark} {:>9.4}  {:>9.4}  {:<20}  {}",
                i + 1,
                m.exact_distance,
                m.prefilter_distance,
                source,
                m.article.title
            );
            println!("{:>28}{}", "", m.article.url);
        }
    }
    println!();
    for e in &report.source_errors {
        match &e.url {
            Some(url) => println!("warning: {} {url}: {}", e.source_id, e.message),
            None => println!("warning: {}: {}", e.source_id, e.message),
        }
    }
    for n in &report.notices {
        println!("note: {}", n.message);
    }
    match report.verdict {
        Verdict::SupportFound => println!(
            "Verdict: support found (* = distance below {:.4})",
            report.threshold
        ),
        Verdict::PotentiallyFake => println!(
            "Verdict: potentially fake, no article within distance {:.4}",
            report.threshold
        ),
    }
}

/// Cleaned document for a file: HTML pages go through the extractor, other
/// files are read as plain text.
fn file_document(path: &Path, stopwords: &StopWords, table: &EmbeddingTable) -> Result<Document> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_html = matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("html" | "htm")
    );
    let tokens = if is_html {
        let url = format!("file://{}", path.display());
        let article = extract_article(&text, &url).with_context(|| format!("extracting {}", path.display()))?;
        article_tokens(&article, stopwords)
    } else {
        clean(&text, stopwords)
    };
    build_document(&tokens, table).with_context(|| format!("{}", path.display()))
}

struct Resources {
    config: Config,
    table: EmbeddingTable,
    stopwords: StopWords,
}

fn resources(config: Option<&Path>) -> Result<Resources> {
    let config = load_config(config)?;
    let table = EmbeddingTable::load_path(&config.embeddings_path)
        .with_context(|| format!("loading {}", config.embeddings_path.display()))?;
    let stopwords = match &config.stopwords_path {
        Some(p) => StopWords::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => StopWords::english(),
    };
    Ok(Resources {
        config,
        table,
        stopwords,
    })
}

fn distance(a: &Path, b: &Path, method: Method, config: Option<&Path>) -> Result<()> {
    let r = resources(config)?;
    let da = file_document(a, &r.stopwords, &r.table)?;
    let db = file_document(b, &r.stopwords, &r.table)?;
    let d = match method {
        Method::Wmd => wmd(&da, &db, &r.table)?,
        Method::Wrd => wrd(&da, &db, &r.table)?,
        Method::Sinkhorn => {
            prefilter_distance(&da, &db, &r.table, &RefineSettings::from_config(&r.config))?
        }
    };
    println!("{d:.6}");
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelledPair {
    a_path: PathBuf,
    b_path: PathBuf,
    related: bool,
}

fn calibrate(pairs_path: &Path, config_path: Option<&Path>, write: bool) -> Result<()> {
    let file = std::fs::File::open(pairs_path)
        .with_context(|| format!("opening {}", pairs_path.display()))?;
    let base = pairs_path.parent().unwrap_or_else(|| Path::new("."));
    let r = resources(config_path)?;
    let mut pairs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: LabelledPair = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", pairs_path.display(), i + 1))?;
        let a = file_document(&base.join(&pair.a_path), &r.stopwords, &r.table)?;
        let b = file_document(&base.join(&pair.b_path), &r.stopwords, &r.table)?;
        pairs.push((a, b, pair.related));
    }
    let threshold = calibrate_threshold(&pairs, &r.table)?;
    println!("{threshold:.6}");
    if write {
        let path = match config_path {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(CONFIG_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| anyhow!("no config file to write to"))?,
        };
        write_threshold(&path, threshold)?;
        eprintln!("threshold written to {}", path.display());
    }
    Ok(())
}

/// Rewrites only the `threshold` key, keeping the rest of the file as is.
fn write_threshold(path: &Path, threshold: f64) -> Result<()> {
    let raw = std::fs::read_to_string(path)?;
    let mut doc: serde_json::Value = serde_json::from_str(&raw)?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| anyhow!("{} is not a JSON object", path.display()))?;
    obj.insert("threshold".into(), serde_json::json!(threshold));
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn serve(config: Option<&Path>, port: Option<u16>) -> Result<()> {
    let config = load_config(config)?;
    let port = match port {
        Some(p) => p,
        None => evidex_service::port_from_env().map_err(|e| anyhow!(e))?,
    };
    let addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, port));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        evidex_service::serve(config, addr, shutdown).await
    })?;
    Ok(())
}
