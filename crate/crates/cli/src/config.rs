//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::Path;

use clap::ValueEnum;
use ohd_core::countergen::LlmConfig;
use ohd_core::encoder::{DEFAULT_EMBED_DIM, DEFAULT_VOCAB_HASH_SIZE, TOY_INIT_STD};
use ohd_core::hashing::fingerprint;
use ohd_core::objective::{LossConfig, MarginAggregation, NegativesPerImage};
use ohd_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::LossFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    /// Hosted chat-completions model; needs `OHD_LLM_API_KEY`.
    Api,
    /// Deterministic rewrite grammar.
    #[default]
    Template,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    #[default]
    Toy,
    Adapter,
}

/// Shape of a freshly initialized toy encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyShape {
    pub vocab_hash_size: usize,
    pub embed_dim: usize,
    pub init_std: f64,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self {
            vocab_hash_size: DEFAULT_VOCAB_HASH_SIZE,
            embed_dim: DEFAULT_EMBED_DIM,
            init_std: TOY_INIT_STD,
        }
    }
}

/// Everything a config file may set. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub llm_mode: Option<LlmMode>,
    pub encoder_mode: Option<EncoderMode>,
    /// Partial `LossConfig`; unset keys keep the encoder's defaults.
    pub loss: Option<toml::Table>,
    pub llm: Option<LlmConfig>,
    pub toy: Option<ToyShape>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {}", e.message())))
    }

    /// `base` with the file's `[loss]` keys applied.
    pub fn loss_over(&self, base: LossConfig) -> Result<LossConfig> {
        let Some(table) = &self.loss else { return Ok(base) };
        let mut value = serde_json::to_value(&base).expect("loss config serializes");
        let overlay = serde_json::to_value(table).map_err(|e| Error::Validation(format!("[loss]: {e}")))?;
        if let (Some(dst), Some(src)) = (value.as_object_mut(), overlay.as_object()) {
            for (k, v) in src {
                dst.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("[loss]: {e}")))
    }
}

impl LossFlags {
    /// Apply the flags that were given on top of `cfg`.
    pub fn apply(&self, mut cfg: LossConfig) -> Result<LossConfig> {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        set!(epochs, batch_size, learning_rate, tau1, tau2, lambda1, lambda2);
        if let Some(n) = self.max_steps {
            cfg.max_steps = Some(n);
        }
        if let Some(n) = &self.negatives {
            cfg.negatives_per_image = match n.as_str() {
                "all" => NegativesPerImage::All,
                other => NegativesPerImage::Count(
                    other
                        .parse()
                        .map_err(|_| Error::Validation(format!("--negatives must be a count or \"all\", got {other:?}")))?,
                ),
            };
        }
        if let Some(m) = &self.margin {
            cfg.margin_aggregation = serde_json::from_value::<MarginAggregation>(serde_json::Value::String(m.clone()))
                .map_err(|_| Error::Validation(format!("--margin must be mean, sum or max, got {m:?}")))?;
        }
        if self.freeze_logit_scale {
            cfg.learn_logit_scale = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn shape(&self, base: ToyShape) -> ToyShape {
        ToyShape {
            vocab_hash_size: self.vocab.unwrap_or(base.vocab_hash_size),
            embed_dim: self.dim.unwrap_or(base.embed_dim),
            init_std: self.init_std.unwrap_or(base.init_std),
        }
    }
}

/// Fingerprint of a command and its resolved settings. Output paths and the
/// worker count are left out because they do not change what is written.
pub fn config_hash(command: &str, settings: &serde_json::Value) -> String {
    let canonical = serde_json::json!({ "command": command, "settings": settings });
    fingerprint(canonical.to_string().as_bytes())
}
