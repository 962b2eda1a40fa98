use std::path::{Path, PathBuf};

use evidex_core::config::{Config, Mode, CONFIG_ENV};

fn bundled_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/config.json")
}

#[test]
fn bundled_config_lists_six_sources() {
    let config = Config::load(&bundled_path()).unwrap();
    assert_eq!(config.sources.len(), 6);
    assert_eq!(config.mode, Mode::Fixture);
    assert!(config.embeddings_path.is_absolute() || config.embeddings_path.exists());
    assert!(config.fixture_corpus_path.as_deref().is_some_and(Path::exists));
}

// The only test in this binary touching the environment.
#[test]
fn locate_falls_back_to_the_environment() {
    std::env::remove_var(CONFIG_ENV);
    assert!(Config::locate(None).is_err());
    std::env::set_var(CONFIG_ENV, bundled_path());
    let config = Config::locate(None).unwrap();
    assert_eq!(config.sources.len(), 6);
    std::env::remove_var(CONFIG_ENV);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = Config::load(Path::new("/nonexistent/evidex.json")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/evidex.json"));
}
