//! TOML configuration schema and run manifests.
//!
//! Every numeric default lives here (or in the per-module config structs),
//! never in command code; ablations are config diffs. An empty TOML file
//! yields the full desk-scale defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalSpec;
use crate::extension::DownscaleScheme;
use crate::model::{ModelConfig, PretrainConfig};
use crate::training::TrainerConfig;

/// Streaming/offline inference knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default = "default_inf_k")]
    pub k: usize,
    /// Rows reserved for raw tokens per session; defaults to window/8.
    #[serde(default)]
    pub session_len: Option<usize>,
    /// Session capacity in rows; defaults to the model window.
    #[serde(default)]
    pub capacity: Option<usize>,
    #[serde(default = "default_gen_tokens")]
    pub gen_tokens: usize,
    /// Greedy decoding unless a temperature is set.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub scheme: DownscaleScheme,
}

fn default_inf_k() -> usize {
    8
}
fn default_gen_tokens() -> usize {
    64
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            k: default_inf_k(),
            session_len: None,
            capacity: None,
            gen_tokens: default_gen_tokens(),
            temperature: None,
            scheme: DownscaleScheme::default(),
        }
    }
}

/// Top-level configuration: one file drives every command.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    /// Documents generated for pretraining and embedder training.
    #[serde(default = "default_train_docs")]
    pub train_docs: usize,
    /// Report wall-clock columns in CSV outputs. Disable for byte-identical
    /// reruns; timings are then written as 0.
    #[serde(default = "default_timing")]
    pub timing: bool,
}

fn default_train_docs() -> usize {
    64
}
fn default_timing() -> bool {
    true
}

/// Held-out evaluation corpora use a shifted generator seed so they never
/// overlap the training documents.
pub const EVAL_SEED_OFFSET: u64 = 1000;

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: AppConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Apply a command-line seed override to every seeded section.
    pub fn override_seed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.trainer.seed = seed;
        self.corpus.seed = seed;
    }

    pub fn eval_corpus(&self) -> CorpusSpec {
        CorpusSpec { seed: self.corpus.seed + EVAL_SEED_OFFSET, ..self.corpus.clone() }
    }
}

/// Provenance record written next to every produced artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub config: AppConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub fn begin(command: &str, seed: u64, config: &AppConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            input_hashes: BTreeMap::new(),
            output_paths: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) {
        self.output_paths.push(path.display().to_string());
    }

    /// Write `<first output>.manifest.json`.
    pub fn finish(mut self) -> Result<()> {
        self.finished_unix_ms = now_ms();
        let Some(first) = self.output_paths.first() else {
            return Ok(());
        };
        let path = format!("{first}.manifest.json");
        let json = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}
