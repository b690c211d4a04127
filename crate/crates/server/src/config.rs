use std::path::{Path, PathBuf};

use annserve_core::engine::EngineConfig;
use serde::{Deserialize, Serialize};

use crate::ServeError;

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_max_concurrent() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}
fn default_max_queued() -> usize {
    64
}
fn default_drain_ms() -> u64 {
    10_000
}
fn default_registry() -> usize {
    100_000
}

/// Service configuration, read from TOML or (for `.json` files) JSON.
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// vote_log = "votes.jsonl"
///
/// [engine]
/// store = "store"
/// graph = "index.vmna"
/// encoder = { name = "trigram-hash-64", dim = 64, kind = "reference", role = "retrieval" }
///
/// [engine.defaults]
/// k = 10
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub engine: EngineConfig,
    #[serde(default = "default_listen")]
    pub listen: String,
    pub vote_log: PathBuf,
    /// Searches running at once.
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Searches allowed to wait for a slot; beyond this, 429.
    #[serde(default = "default_max_queued")]
    pub max_queued: usize,
    /// Directory served under `/ui`.
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
    /// How long shutdown waits for in-flight requests.
    #[serde(default = "default_drain_ms")]
    pub drain_ms: u64,
    /// Recent query ids remembered for vote validation.
    #[serde(default = "default_registry")]
    pub query_registry: usize,
}

impl ServeConfig {
    pub fn new(engine: EngineConfig, vote_log: impl Into<PathBuf>) -> Self {
        Self {
            engine,
            listen: default_listen(),
            vote_log: vote_log.into(),
            max_concurrent: default_max_concurrent(),
            max_queued: default_max_queued(),
            ui_dir: None,
            drain_ms: default_drain_ms(),
            query_registry: default_registry(),
        }
    }

    /// Parses `path`; relative paths inside are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServeError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let mut config = parsed.map_err(|message| ServeError::Config {
            path: path.to_path_buf(),
            message,
        })?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let e = &mut self.engine;
        fix(&mut e.store);
        for p in [&mut e.graph, &mut e.ivfpq, &mut e.vectors, &mut self.ui_dir].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.vote_log);
    }

    pub fn validate(&self) -> Result<(), ServeError> {
        if self.max_concurrent == 0 {
            return Err(ServeError::Invalid("max_concurrent must be >= 1".into()));
        }
        if self.query_registry == 0 {
            return Err(ServeError::Invalid("query_registry must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree_and_paths_rebase() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("serve.toml");
        std::fs::write(
            &toml_path,
            r#"
vote_log = "votes.jsonl"
max_concurrent = 2

[engine]
store = "store"
graph = "/abs/g.vmna"
encoder = { name = "h", dim = 64, kind = "reference", role = "retrieval" }

[engine.defaults]
k = 5
"#,
        )
        .unwrap();
        let c = ServeConfig::load(&toml_path).unwrap();
        assert_eq!(c.engine.store, dir.path().join("store"));
        assert_eq!(c.engine.graph.as_deref(), Some(Path::new("/abs/g.vmna")));
        assert_eq!(c.vote_log, dir.path().join("votes.jsonl"));
        assert_eq!(c.engine.defaults.k, 5);
        assert_eq!(c.engine.defaults.big_k, 1000);
        assert_eq!((c.max_concurrent, c.max_queued), (2, 64));

        let json_path = dir.path().join("serve.json");
        std::fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(ServeConfig::load(&json_path).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "vote_log = \"v\"\nportt = 1\n[engine]\nstore = \"s\"\n").unwrap();
        assert!(matches!(ServeConfig::load(&p), Err(ServeError::Config { .. })));
    }
}
