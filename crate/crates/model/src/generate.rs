//! Beam-search decoding.

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use impress_core::prompt::{Arch, FormattedExample, RESPONSE_PREFIX};
use impress_core::tokenizer::{BOS, EOS, PAD, UNK};

use crate::config::DecodeConfig;
use crate::model::Seq2SeqModel;
use crate::train::encode_prompt;
use crate::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub report_id: String,
    pub text: String,
    /// No end token within `max_new_tokens` (or the positional limit).
    pub truncated: bool,
    /// Length-normalized log-probability of the returned tokens.
    pub score: f64,
    pub token_ids: Vec<u32>,
}

/// Conditioning shared by every hypothesis of one example.
struct Context {
    memory: Option<Tensor>,
    prefix: Vec<u32>,
}

fn context(model: &Seq2SeqModel, example: &FormattedExample, decode: &DecodeConfig) -> Result<Context, ModelError> {
    let prompt = encode_prompt(model, example, model.config.max_len, decode.max_new_tokens)?;
    Ok(match model.config.arch {
        Arch::EncoderDecoder => {
            let src = model.to_ids_tensor(&prompt)?;
            Context {
                memory: Some(model.encode(&src, None)?),
                prefix: vec![BOS],
            }
        }
        Arch::DecoderOnly => Context {
            memory: None,
            prefix: std::iter::once(BOS).chain(prompt).collect(),
        },
    })
}

/// Next-token log-probabilities for equal-length continuations.
fn next_log_probs(model: &Seq2SeqModel, ctx: &Context, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f32>>, ModelError> {
    let rows: Vec<Vec<u32>> = seqs.iter().map(|s| ctx.prefix.iter().chain(s).copied().collect()).collect();
    let (ids, _) = model.pad_batch(&rows)?;
    let (k, t) = ids.dims2()?;
    let hidden = match &ctx.memory {
        Some(mem) => {
            let (_, s, d) = mem.dims3()?;
            let mem = mem.broadcast_as((k, s, d))?.contiguous()?;
            model.decode_hidden(&ids, Some((&mem, None)))?
        }
        None => model.decode_hidden(&ids, None)?,
    };
    let last = hidden.narrow(1, t - 1, 1)?;
    let logp = candle_nn::ops::log_softmax(&model.project(&last)?.squeeze(1)?, candle_core::D::Minus1)?;
    let mut out: Vec<Vec<f32>> = logp.to_vec2()?;
    let base = model.vocab.base_size();
    for row in &mut out {
        for id in [PAD, BOS, UNK] {
            row[id as usize] = f32::NEG_INFINITY;
        }
        // Style tokens condition the input only.
        for v in row.iter_mut().skip(base) {
            *v = f32::NEG_INFINITY;
        }
    }
    Ok(out)
}

fn banned_by_ngram(seq: &[u32], n: usize, token: u32) -> bool {
    if n == 0 || seq.len() + 1 < n {
        return false;
    }
    let tail = &seq[seq.len() + 1 - n..];
    seq.windows(n).any(|w| w[..n - 1] == *tail && w[n - 1] == token)
}

pub fn normalized_score(log_prob: f64, len: usize, length_penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(length_penalty)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    log_prob: f64,
    finished: bool,
}

impl Hyp {
    /// Scored length counts the end token when present.
    fn score(&self, lp: f64) -> f64 {
        normalized_score(self.log_prob, self.tokens.len() + self.finished as usize, lp)
    }
}

fn beam_search(model: &Seq2SeqModel, ctx: &Context, decode: &DecodeConfig, width: usize) -> Result<Hyp, ModelError> {
    let room = model.config.max_len.saturating_sub(ctx.prefix.len());
    let max_new = decode.max_new_tokens.min(room);
    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_new {
        let seqs: Vec<Vec<u32>> = beams.iter().map(|b| b.tokens.clone()).collect();
        let lps = next_log_probs(model, ctx, &seqs)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, (beam, lp)) in beams.iter().zip(&lps).enumerate() {
            let mut ranked: Vec<(u32, f32)> = lp
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, v)| (i as u32, *v))
                .filter(|(tok, _)| !banned_by_ngram(&beam.tokens, decode.no_repeat_ngram, *tok))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for (tok, v) in ranked.into_iter().take(2 * width) {
                cands.push((beam.log_prob + v as f64, bi, tok));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (rank, (lp, bi, tok)) in cands.into_iter().enumerate() {
            if tok == EOS {
                // Only an end token ranked within the beam closes a hypothesis.
                if rank < width && finished.len() < width {
                    finished.push(Hyp {
                        tokens: beams[bi].tokens.clone(),
                        log_prob: lp,
                        finished: true,
                    });
                }
            } else if next.len() < width {
                let mut tokens = beams[bi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp {
                    tokens,
                    log_prob: lp,
                    finished: false,
                });
            }
            if next.len() == width && finished.len() >= width {
                break;
            }
        }
        if finished.len() >= width || next.is_empty() {
            break;
        }
        beams = next;
    }
    let pool = if finished.is_empty() { beams } else { finished };
    let lp = decode.length_penalty;
    Ok(pool
        .into_iter()
        .fold(None::<Hyp>, |best, h| match best {
            Some(b) if b.score(lp) >= h.score(lp) => Some(b),
            _ => Some(h),
        })
        .expect("at least one hypothesis"))
}

/// Collapses runs of blank lines, strips a leading response label and
/// surrounding whitespace. Numbered lists are kept as they are.
pub fn post_process(text: &str) -> String {
    let text = text.trim_start();
    let text = text.strip_prefix(RESPONSE_PREFIX).unwrap_or(text);
    let mut out = String::with_capacity(text.len());
    let mut blank_run = 0;
    for (i, line) in text.split('\n').enumerate() {
        if line.trim().is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        if i > 0 {
            out.push('\n');
        }
        out.push_str(line);
    }
    out.trim().to_string()
}

/// Highest-scoring completed hypothesis of a width-`beam_width` search.
/// The greedy rollout is always among the candidates, so the result never
/// scores below greedy decoding.
pub fn generate_impression(model: &Seq2SeqModel, example: &FormattedExample, decode: &DecodeConfig) -> Result<Generation, ModelError> {
    decode.validate()?;
    let ctx = context(model, example, decode)?;
    let greedy = beam_search(model, &ctx, decode, 1)?;
    let best = if decode.beam_width > 1 {
        let beam = beam_search(model, &ctx, decode, decode.beam_width)?;
        let lp = decode.length_penalty;
        // Completed hypotheses beat truncated ones.
        match (beam.finished, greedy.finished) {
            (true, false) => beam,
            (false, true) => greedy,
            _ if beam.score(lp) >= greedy.score(lp) => beam,
            _ => greedy,
        }
    } else {
        greedy
    };
    Ok(Generation {
        report_id: example.report_id.clone(),
        text: post_process(&model.vocab.decode(&best.tokens)),
        truncated: !best.finished,
        score: best.score(decode.length_penalty),
        token_ids: best.tokens,
    })
}

/// Teacher-forced log-probability of `tokens` (plus the end token when
/// `finished`) for `example`, length-normalized like the decoder.
pub fn continuation_score(
    model: &Seq2SeqModel,
    example: &FormattedExample,
    tokens: &[u32],
    finished: bool,
    decode: &DecodeConfig,
) -> Result<f64, ModelError> {
    let ctx = context(model, example, decode)?;
    let mut seq: Vec<u32> = tokens.to_vec();
    if finished {
        seq.push(EOS);
    }
    let mut total = 0.0;
    for i in 0..seq.len() {
        let lp = next_log_probs(model, &ctx, &[seq[..i].to_vec()])?;
        total += lp[0][seq[i] as usize] as f64;
    }
    Ok(normalized_score(total, seq.len(), decode.length_penalty))
}

/// Order-preserving; each example is decoded independently so results
/// match single calls. Failures are returned per example.
pub fn batch_generate(
    model: &Seq2SeqModel,
    examples: &[FormattedExample],
    decode: &DecodeConfig,
) -> Vec<(String, Result<Generation, ModelError>)> {
    examples
        .par_iter()
        .map(|ex| (ex.report_id.clone(), generate_impression(model, ex, decode)))
        .collect()
}
