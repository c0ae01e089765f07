//! Teacher-forced likelihood scoring and token embeddings backed by a
//! model, plus light adaptation of a scorer to in-domain pairs.

use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use impress_core::metrics::embedding::TokenEncoder;
use impress_core::metrics::likelihood::SequenceScorer;
use impress_core::metrics::MetricError;
use impress_core::prompt::Arch;
use impress_core::tokenizer::{BOS, EOS};

use crate::model::Seq2SeqModel;
use crate::train::{Batch, Encoded};
use crate::ModelError;

/// Encodes a raw (source, target) pair. The target is truncated first so
/// that at least one target token survives; the source takes what is left.
pub fn encode_pair(model: &Seq2SeqModel, source: &str, target: &str) -> Result<Encoded, ModelError> {
    let max_len = model.config.max_len;
    let mut tgt = model.vocab.encode(target);
    let mut src = model.vocab.encode(source);
    match model.config.arch {
        Arch::EncoderDecoder => {
            tgt.truncate(max_len.saturating_sub(2));
            src.truncate(max_len);
            if src.is_empty() {
                src.push(EOS);
            }
            Ok(Encoded {
                report_id: String::new(),
                src,
                seq: std::iter::once(BOS).chain(tgt).chain([EOS]).collect(),
                loss_from: 0,
            })
        }
        Arch::DecoderOnly => {
            src.push(model.vocab.id("\n").unwrap_or(EOS));
            tgt.truncate(max_len.saturating_sub(3).max(1));
            let room = max_len.saturating_sub(tgt.len() + 2);
            // Keep the end of the source, nearest the target.
            if src.len() > room {
                src.drain(..src.len() - room);
            }
            let loss_from = src.len();
            Ok(Encoded {
                report_id: String::new(),
                src: Vec::new(),
                seq: std::iter::once(BOS).chain(src).chain(tgt).chain([EOS]).collect(),
                loss_from,
            })
        }
    }
}

/// Per-token log-probabilities of the target (and its end token).
pub fn pair_log_probs(model: &Seq2SeqModel, source: &str, target: &str) -> Result<Vec<f64>, ModelError> {
    let enc = encode_pair(model, source, target)?;
    let lp: Vec<Vec<f32>> = Batch::new(&[&enc]).log_probs(model)?.to_vec2()?;
    let n = enc.seq.len() - 1;
    Ok(lp[0][enc.loss_from..n].iter().map(|v| *v as f64).collect())
}

pub struct ModelScorer {
    pub model: Seq2SeqModel,
}

impl ModelScorer {
    pub fn new(model: Seq2SeqModel) -> Self {
        ModelScorer { model }
    }
}

impl SequenceScorer for ModelScorer {
    fn token_log_probs(&self, source: &str, target: &str) -> Result<Vec<f64>, MetricError> {
        pair_log_probs(&self.model, source, target).map_err(|e| MetricError::Scorer(e.to_string()))
    }
}

/// Contextual hidden states: the encoder output for encoder-decoder
/// models, the final decoder states otherwise. End markers are dropped.
pub struct ModelTokenEncoder {
    pub model: Seq2SeqModel,
}

impl ModelTokenEncoder {
    pub fn new(model: Seq2SeqModel) -> Self {
        ModelTokenEncoder { model }
    }

    fn states(&self, text: &str) -> Result<Vec<Vec<f32>>, ModelError> {
        let mut ids = self.model.vocab.encode(text);
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        ids.truncate(self.model.config.max_len - 1);
        let hidden = match self.model.config.arch {
            Arch::EncoderDecoder => self.model.encode(&self.model.to_ids_tensor(&ids)?, None)?,
            Arch::DecoderOnly => {
                let seq: Vec<u32> = std::iter::once(BOS).chain(ids).collect();
                let h = self.model.decode_hidden(&self.model.to_ids_tensor(&seq)?, None)?;
                h.narrow(1, 1, seq.len() - 1)?
            }
        };
        Ok(hidden.squeeze(0)?.to_vec2()?)
    }
}

impl TokenEncoder for ModelTokenEncoder {
    fn encode(&self, text: &str) -> Result<Vec<Vec<f32>>, MetricError> {
        self.states(text).map_err(|e| MetricError::Encoder(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 100,
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Fine-tunes a copy of `base` on (source, target) pairs. The base model
/// is never modified; zero steps return an exact copy.
pub fn adapt_scorer(base: &Seq2SeqModel, pairs: &[(String, String)], cfg: &AdaptConfig) -> Result<Seq2SeqModel, ModelError> {
    let model = base.deep_clone()?;
    if cfg.steps == 0 {
        return Ok(model);
    }
    if pairs.is_empty() {
        return Err(ModelError::NoExamples);
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) || cfg.batch_size == 0 {
        return Err(ModelError::Config(
            "adaptation needs a finite learning rate and a positive batch size".into(),
        ));
    }
    let encoded: Vec<Encoded> = pairs.iter().map(|(s, t)| encode_pair(&model, s, t)).collect::<Result<_, _>>()?;
    let mut opt = AdamW::new(
        model.params.vars_where(|_| true),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(encoded.len()) {
            if cursor == order.len() {
                order = (0..encoded.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        idx.sort_unstable();
        let refs: Vec<&Encoded> = idx.iter().map(|&i| &encoded[i]).collect();
        let loss = Batch::new(&refs).loss(&model)?;
        if !loss.to_scalar::<f32>()?.is_finite() {
            return Err(ModelError::Diverged { step, last_good: None });
        }
        opt.backward_step(&loss)?;
    }
    Ok(model)
}
