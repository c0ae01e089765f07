use serde::{Deserialize, Serialize};

use impress_core::prompt::Arch;

use crate::ModelError;

/// Shape of a toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub arch: Arch,
    pub d_model: usize,
    pub n_heads: usize,
    /// Ignored for decoder-only models.
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Positional table size for each stack.
    pub max_len: usize,
    pub lora: Option<LoraConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl ModelConfig {
    /// `tiny` (d=64) and `small` (d=128) presets.
    pub fn preset(name: &str, arch: Arch) -> Result<Self, ModelError> {
        let (d_model, n_heads, layers, d_ff, max_len) = match name {
            "tiny" => (64, 4, 2, 256, 512),
            "small" => (128, 4, 3, 512, 1024),
            _ => return Err(ModelError::Config(format!("unknown preset {name:?} (tiny, small)"))),
        };
        Ok(ModelConfig {
            preset: name.to_string(),
            arch,
            d_model,
            n_heads,
            n_enc_layers: if arch == Arch::EncoderDecoder { layers } else { 0 },
            n_dec_layers: layers,
            d_ff,
            max_len,
            lora: None,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config("d_model must be a positive multiple of n_heads".into()));
        }
        if self.n_dec_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(ModelError::Config("layer counts, d_ff and max_len must be positive".into()));
        }
        if self.arch == Arch::EncoderDecoder && self.n_enc_layers == 0 {
            return Err(ModelError::Config("encoder-decoder model needs encoder layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    Full,
    Lora,
}

fn default_batch() -> usize {
    16
}
fn default_steps() -> usize {
    1000
}
fn default_budget() -> usize {
    512
}
fn default_target() -> usize {
    256
}
fn default_eval_every() -> usize {
    100
}
fn default_alpha() -> f64 {
    16.0
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `toy:<preset>` for a fresh model or a checkpoint directory.
    pub model_ref: String,
    pub arch: Arch,
    pub adaptation: Adaptation,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
    /// Defaults to 5e-5 (full) or 1e-4 (LoRA) when omitted.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Prompt length limit in tokens; findings are truncated to fit.
    #[serde(default = "default_budget")]
    pub token_budget: usize,
    #[serde(default = "default_target")]
    pub max_target_tokens: usize,
    /// Validation interval in steps; 0 disables validation.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(model_ref: &str, arch: Arch, adaptation: Adaptation) -> Self {
        TrainConfig {
            model_ref: model_ref.to_string(),
            arch,
            adaptation,
            lora_rank: (adaptation == Adaptation::Lora).then_some(8),
            lora_alpha: default_alpha(),
            learning_rate: None,
            batch_size: default_batch(),
            max_steps: default_steps(),
            seed: 0,
            token_budget: default_budget(),
            max_target_tokens: default_target(),
            eval_every: default_eval_every(),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.adaptation {
            Adaptation::Full => 5e-5,
            Adaptation::Lora => 1e-4,
        })
    }

    /// A zero learning rate is accepted and yields a null update.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        match (self.adaptation, self.lora_rank) {
            (Adaptation::Lora, None) | (Adaptation::Lora, Some(0)) => return bad("lora adaptation needs lora_rank > 0"),
            (Adaptation::Full, Some(_)) => return bad("lora_rank is only valid with adaptation = lora"),
            _ => {}
        }
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.token_budget == 0 || self.max_target_tokens == 0 {
            return bad("batch_size, max_steps, token_budget and max_target_tokens must be positive");
        }
        if !(self.lora_alpha > 0.0) || self.weight_decay < 0.0 {
            return bad("lora_alpha must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Hypothesis score is `sum log p / len^length_penalty`.
    pub length_penalty: f64,
    /// 0 disables the repeated n-gram block.
    pub no_repeat_ngram: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 4,
            max_new_tokens: 256,
            length_penalty: 1.0,
            no_repeat_ngram: 3,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        DecodeConfig {
            beam_width: 1,
            max_new_tokens,
            no_repeat_ngram: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.beam_width == 0 || self.max_new_tokens == 0 {
            return Err(ModelError::Config("beam_width and max_new_tokens must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(ModelError::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_rank_iff_lora() {
        let mut c = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Lora);
        assert!(c.validate().is_ok());
        c.lora_rank = None;
        assert!(c.validate().is_err());
        let mut f = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
        assert!(f.validate().is_ok());
        f.lora_rank = Some(4);
        assert!(f.validate().is_err());
    }

    #[test]
    fn defaults_by_adaptation() {
        assert_eq!(TrainConfig::new("toy:tiny", Arch::DecoderOnly, Adaptation::Full).lr(), 5e-5);
        assert_eq!(TrainConfig::new("toy:tiny", Arch::DecoderOnly, Adaptation::Lora).lr(), 1e-4);
        let d = DecodeConfig::default();
        assert_eq!((d.beam_width, d.no_repeat_ngram, d.max_new_tokens), (4, 3, 256));
    }

    #[test]
    fn toml_with_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"model_ref":"toy:tiny","arch":"decoder_only","adaptation":"full"}"#).unwrap();
        assert_eq!(c.batch_size, 16);
        assert!(c.validate().is_ok());
        assert!(ModelConfig::preset("huge", Arch::DecoderOnly).is_err());
    }
}
