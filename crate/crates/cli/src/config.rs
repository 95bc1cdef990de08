use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Hash,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    Live,
    Replay,
}

/// Keys accepted in the `--config` JSON file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub lambda: f64,
    pub k: usize,
    pub stage1_n: usize,
    pub thoughts_l: usize,
    pub temperature: f64,
    pub chunk_ns: usize,
    pub embedder: EmbedderKind,
    pub dense_dim: usize,
    pub endpoint: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    pub transport: TransportMode,
    pub fixtures: Option<PathBuf>,
    pub error_db: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub retry_base_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            lambda: 0.5,
            k: 5,
            stage1_n: 50,
            thoughts_l: 5,
            temperature: 0.7,
            chunk_ns: 256,
            embedder: EmbedderKind::Hash,
            dense_dim: 256,
            endpoint: None,
            chat_model: "default".into(),
            embedding_model: "default".into(),
            transport: TransportMode::Live,
            fixtures: None,
            error_db: None,
            index: None,
            dataset: None,
            max_tokens: 1024,
            max_in_flight: 4,
            retry_base_ms: 1000,
        }
    }
}

pub const CONFIG_HELP: &str = "\
Configuration (JSON file via --config; flags override the file, the file overrides defaults):
  key              default    flag
  lambda           0.5        --lambda      keyword weight in the hybrid similarity
  k                5          -k            similar instances returned per query
  stage1_n         50         --stage1-n    candidates kept by the first stage
  thoughts_l       5          -L            thoughts sampled per training instance
  temperature      0.7        --temperature thought sampling temperature
  chunk_ns         256        --chunk-ns    tokens per chunk for the remote embedder
  embedder         hash       --embedder    hash | remote
  dense_dim        256        --dense-dim   semantic vector length
  endpoint         (none)     --endpoint    service base URL
  chat_model       default    --chat-model
  embedding_model  default    --embedding-model
  transport        live       --transport   live | replay
  fixtures         (none)     --fixtures    replay source; in live mode, responses are recorded here
  error_db         (shipped)  --error-db    error database JSONL
  index            (none)     --index       default index directory
  dataset          (none)     --dataset     default dataset JSONL
  max_tokens       1024       --max-tokens
  max_in_flight    4          --max-in-flight
  retry_base_ms    1000       --retry-base-ms first retry delay, doubled per attempt
Relative paths in a config file are resolved against the file's directory.
The API key is read from HDLDBG_API_KEY.";

/// Flags that override config keys.
#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct Overrides {
    /// JSON config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(short = 'k', long = "k", global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub stage1_n: Option<usize>,
    #[arg(short = 'L', long = "thoughts-l", global = true)]
    pub thoughts_l: Option<usize>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub chunk_ns: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long, global = true)]
    pub dense_dim: Option<usize>,
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub chat_model: Option<String>,
    #[arg(long, global = true)]
    pub embedding_model: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub transport: Option<TransportMode>,
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, global = true)]
    pub error_db: Option<PathBuf>,
    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,
    #[arg(long, global = true)]
    pub max_in_flight: Option<usize>,
    #[arg(long, global = true)]
    pub retry_base_ms: Option<u64>,
}

fn set<T>(slot: &mut T, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = v.clone();
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.fixtures,
            &mut cfg.error_db,
            &mut cfg.index,
            &mut cfg.dataset,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        set(&mut self.lambda, &o.lambda);
        set(&mut self.k, &o.k);
        set(&mut self.stage1_n, &o.stage1_n);
        set(&mut self.thoughts_l, &o.thoughts_l);
        set(&mut self.temperature, &o.temperature);
        set(&mut self.chunk_ns, &o.chunk_ns);
        set(&mut self.embedder, &o.embedder);
        set(&mut self.dense_dim, &o.dense_dim);
        set(&mut self.chat_model, &o.chat_model);
        set(&mut self.embedding_model, &o.embedding_model);
        set(&mut self.transport, &o.transport);
        set(&mut self.max_tokens, &o.max_tokens);
        set(&mut self.max_in_flight, &o.max_in_flight);
        set(&mut self.retry_base_ms, &o.retry_base_ms);
        if o.endpoint.is_some() {
            self.endpoint = o.endpoint.clone();
        }
        if o.fixtures.is_some() {
            self.fixtures = o.fixtures.clone();
        }
        if o.error_db.is_some() {
            self.error_db = o.error_db.clone();
        }
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(path) => Self::load(path)?,
            None => Config::default(),
        };
        cfg.apply(o);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.k == 0 || self.stage1_n == 0 || self.k > self.stage1_n {
            return bad(format!(
                "need 1 <= k <= stage1_n, got k = {} and stage1_n = {}",
                self.k, self.stage1_n
            ));
        }
        if self.thoughts_l == 0 {
            return bad("thoughts_l must be positive".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad(format!(
                "temperature must lie in [0, 2], got {}",
                self.temperature
            ));
        }
        if self.chunk_ns < 8 {
            return bad(format!(
                "chunk_ns must be at least 8, got {}",
                self.chunk_ns
            ));
        }
        if self.dense_dim < 8 {
            return bad(format!(
                "dense_dim must be at least 8, got {}",
                self.dense_dim
            ));
        }
        if self.max_tokens == 0 || self.max_in_flight == 0 {
            return bad("max_tokens and max_in_flight must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            Config::from_json(r#"{"lamda": 0.3}"#),
            Err(CliError::Config(_))
        ));
        let c = Config::from_json(r#"{"lambda": 0.3, "embedder": "remote"}"#).unwrap();
        assert_eq!(c.lambda, 0.3);
        assert_eq!(c.embedder, EmbedderKind::Remote);
        assert_eq!(c.k, 5);
    }

    #[test]
    fn help_lists_the_defaults() {
        let d = Config::default();
        let row = |key: &str| {
            CONFIG_HELP
                .lines()
                .find(|l| l.trim_start().starts_with(&format!("{key} ")))
                .unwrap_or_else(|| panic!("{key} missing"))
                .split_whitespace()
                .nth(1)
                .unwrap()
                .to_string()
        };
        assert_eq!(row("lambda"), d.lambda.to_string());
        assert_eq!(row("k"), d.k.to_string());
        assert_eq!(row("stage1_n"), d.stage1_n.to_string());
        assert_eq!(row("thoughts_l"), d.thoughts_l.to_string());
        assert_eq!(row("temperature"), d.temperature.to_string());
        assert_eq!(row("chunk_ns"), d.chunk_ns.to_string());
        assert_eq!(row("dense_dim"), d.dense_dim.to_string());
        assert_eq!(row("embedder"), "hash");
        assert_eq!(row("transport"), "live");
        assert_eq!(row("chat_model"), d.chat_model);
        assert_eq!(row("max_tokens"), d.max_tokens.to_string());
        assert_eq!(row("max_in_flight"), d.max_in_flight.to_string());
        assert_eq!(row("retry_base_ms"), d.retry_base_ms.to_string());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"fixtures": "fx", "error_db": "/abs/db.jsonl"}"#).unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.fixtures.unwrap(), dir.path().join("fx"));
        assert_eq!(c.error_db.unwrap(), PathBuf::from("/abs/db.jsonl"));
    }

    #[test]
    fn invalid_values_rejected() {
        let c = Config {
            k: 60,
            ..Config::default()
        };
        assert!(c.validate().is_err());
        let c = Config {
            dense_dim: 4,
            ..Config::default()
        };
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn flags_beat_file_beat_defaults(
            file_k in proptest::option::of(1usize..50),
            flag_k in proptest::option::of(1usize..50),
            file_l in proptest::option::of(0.0f64..=1.0),
            flag_l in proptest::option::of(0.0f64..=1.0),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            let mut file = serde_json::Map::new();
            if let Some(k) = file_k {
                file.insert("k".into(), k.into());
            }
            if let Some(l) = file_l {
                file.insert("lambda".into(), l.into());
            }
            std::fs::write(&path, serde_json::Value::Object(file).to_string()).unwrap();
            let o = Overrides {
                config: Some(path),
                k: flag_k,
                lambda: flag_l,
                ..Overrides::default()
            };
            let c = Config::resolve(&o).unwrap();
            let d = Config::default();
            prop_assert_eq!(c.k, flag_k.or(file_k).unwrap_or(d.k));
            prop_assert_eq!(c.lambda, flag_l.or(file_l).unwrap_or(d.lambda));
        }
    }
}
