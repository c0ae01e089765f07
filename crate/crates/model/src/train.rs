//! Teacher-forced fine-tuning.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use impress_core::prompt::{truncate_to_budget, Arch, FormattedExample, PromptMode};
use impress_core::tokenizer::{BOS, EOS};

use crate::config::{Adaptation, LoraConfig, TrainConfig};
use crate::model::Seq2SeqModel;
use crate::params::is_adapter_param;
use crate::ModelError;

/// One example as token ids. `seq` is what the decoder reads (BOS first,
/// EOS last); labels are `seq[1..]` and only label positions at or after
/// `loss_from` count. For encoder-decoder models `src` is the encoder
/// input and `loss_from` is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub report_id: String,
    pub src: Vec<u32>,
    pub seq: Vec<u32>,
    pub loss_from: usize,
}

/// Prompt ids for `example` after truncation to the budget and the
/// model's positional limit.
pub fn encode_prompt(model: &Seq2SeqModel, example: &FormattedExample, budget: usize, reserve: usize) -> Result<Vec<u32>, ModelError> {
    if example.arch != model.config.arch {
        return Err(ModelError::ExampleArch {
            report_id: example.report_id.clone(),
            expected: model.config.arch,
            found: example.arch,
        });
    }
    if model.vocab.id(&example.style_token).is_none() {
        return Err(ModelError::MissingStyleToken(example.style_token.clone()));
    }
    let limit = match example.arch {
        Arch::EncoderDecoder => budget.min(model.config.max_len),
        Arch::DecoderOnly => budget.min(model.config.max_len.saturating_sub(reserve + 1)),
    };
    let fitted = truncate_to_budget(example, limit, &model.vocab)?;
    Ok(model.vocab.encode(&fitted.prompt()))
}

pub fn encode_example(model: &Seq2SeqModel, example: &FormattedExample, cfg: &TrainConfig) -> Result<Encoded, ModelError> {
    if example.mode != PromptMode::Train {
        return Err(ModelError::Config(format!(
            "{}: training needs train-mode examples",
            example.report_id
        )));
    }
    let max_t = cfg.max_target_tokens.min(model.config.max_len - 1);
    let prompt = encode_prompt(model, example, cfg.token_budget, max_t + 1)?;
    let target_text = match example.arch {
        Arch::EncoderDecoder => example.target_text.clone(),
        Arch::DecoderOnly => format!(" {}", example.target_text),
    };
    let mut target = model.vocab.encode(&target_text);
    target.truncate(max_t);
    Ok(match example.arch {
        Arch::EncoderDecoder => Encoded {
            report_id: example.report_id.clone(),
            src: prompt,
            seq: std::iter::once(BOS).chain(target).chain([EOS]).collect(),
            loss_from: 0,
        },
        Arch::DecoderOnly => {
            let loss_from = prompt.len();
            Encoded {
                report_id: example.report_id.clone(),
                src: Vec::new(),
                seq: std::iter::once(BOS).chain(prompt).chain(target).chain([EOS]).collect(),
                loss_from,
            }
        }
    })
}

/// A padded batch in plain vectors. `weights[i][j]` is 1 where label `j`
/// of row `i` contributes to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub inputs: Vec<Vec<u32>>,
    pub labels: Vec<Vec<u32>>,
    pub weights: Vec<Vec<f32>>,
}

impl Batch {
    pub fn new(examples: &[&Encoded]) -> Batch {
        let t = examples.iter().map(|e| e.seq.len() - 1).max().unwrap_or(1);
        let pad = |v: &[u32]| -> Vec<u32> { v.iter().copied().chain(std::iter::repeat(0)).take(t).collect() };
        Batch {
            src: examples.iter().map(|e| e.src.clone()).collect(),
            inputs: examples.iter().map(|e| pad(&e.seq[..e.seq.len() - 1])).collect(),
            labels: examples.iter().map(|e| pad(&e.seq[1..])).collect(),
            weights: examples
                .iter()
                .map(|e| (0..t).map(|j| (j >= e.loss_from && j < e.seq.len() - 1) as u8 as f32).collect())
                .collect(),
        }
    }

    /// Mean cross-entropy over the weighted label positions.
    pub fn loss(&self, model: &Seq2SeqModel) -> Result<Tensor, ModelError> {
        let logp = self.log_probs(model)?;
        let w = self.weight_tensor(model)?;
        let total = (logp * &w)?.sum_all()?;
        let count = self.weights.iter().flatten().sum::<f32>().max(1.0);
        Ok((total.neg()? / count as f64)?)
    }

    /// Log-probability of each label, `[b, t]`.
    pub fn log_probs(&self, model: &Seq2SeqModel) -> Result<Tensor, ModelError> {
        let (inputs, _) = model.pad_batch(&self.inputs)?;
        let hidden = match model.config.arch {
            Arch::EncoderDecoder => {
                let (src, lens) = model.pad_batch(&self.src)?;
                let mask = model.padding_mask(&lens, src.dim(1)?)?;
                let mem = model.encode(&src, Some(&mask))?;
                model.decode_hidden(&inputs, Some((&mem, Some(&mask))))?
            }
            Arch::DecoderOnly => model.decode_hidden(&inputs, None)?,
        };
        let logp = candle_nn::ops::log_softmax(&model.project(&hidden)?, candle_core::D::Minus1)?;
        let (labels, _) = model.pad_batch(&self.labels)?;
        Ok(logp.gather(&labels.unsqueeze(2)?, 2)?.squeeze(2)?)
    }

    fn weight_tensor(&self, model: &Seq2SeqModel) -> Result<Tensor, ModelError> {
        let t = self.labels.first().map(Vec::len).unwrap_or(0);
        let flat: Vec<f32> = self.weights.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.weights.len(), t), model.device())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    /// Training cross-entropy of the batch seen at each step, before the update.
    pub loss_curve: Vec<(usize, f64)>,
    pub val_curve: Vec<(usize, f64)>,
    pub best_val: Option<(usize, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    /// Style tokens the model carries beyond its base vocabulary.
    pub vocab_delta: Vec<String>,
    pub registry_hash: String,
    pub num_params: usize,
    pub trainable_params: usize,
}

impl TrainRun {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_curve.first().map(|x| x.1)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().map(|x| x.1)
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "val_loss"])?;
        for (step, loss) in &self.loss_curve {
            let val = self
                .val_curve
                .iter()
                .find(|(s, _)| s == step)
                .map(|(_, v)| v.to_string())
                .unwrap_or_default();
            w.write_record([step.to_string(), loss.to_string(), val])?;
        }
        w.flush().map_err(|e| ModelError::io(path, e))
    }
}

/// Mean per-token loss over `examples` in batches of `batch_size`.
pub fn evaluate(model: &Seq2SeqModel, examples: &[Encoded], batch_size: usize) -> Result<f64, ModelError> {
    let (mut total, mut count) = (0.0f64, 0.0f64);
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let b = Batch::new(&refs);
        let n: f32 = b.weights.iter().flatten().sum();
        let loss: f32 = b.loss(model)?.to_scalar()?;
        total += loss as f64 * n as f64;
        count += n as f64;
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

fn trainable(adaptation: Adaptation) -> fn(&str) -> bool {
    match adaptation {
        Adaptation::Full => |_| true,
        Adaptation::Lora => is_adapter_param,
    }
}

/// Fine-tunes `model` in place. With LoRA, only adapter factors and the
/// added style-token embeddings are updated. Checkpoints (when `out_dir`
/// is given) go to `out_dir/best` on validation improvement and
/// `out_dir/last` at each evaluation and at the end.
pub fn train(
    model: &mut Seq2SeqModel,
    cfg: &TrainConfig,
    train_examples: &[FormattedExample],
    val_examples: &[FormattedExample],
    out_dir: Option<&Path>,
) -> Result<TrainRun, ModelError> {
    cfg.validate()?;
    if cfg.arch != model.config.arch {
        return Err(ModelError::ArchMismatch {
            expected: cfg.arch,
            found: model.config.arch,
        });
    }
    if train_examples.is_empty() {
        return Err(ModelError::NoExamples);
    }
    if cfg.adaptation == Adaptation::Lora {
        model.enable_lora(LoraConfig {
            rank: cfg.lora_rank.unwrap_or(8),
            alpha: cfg.lora_alpha,
        })?;
    }
    let encoded: Vec<Encoded> = train_examples
        .iter()
        .map(|e| encode_example(model, e, cfg))
        .collect::<Result<_, _>>()?;
    let val: Vec<Encoded> = val_examples
        .iter()
        .map(|e| encode_example(model, e, cfg))
        .collect::<Result<_, _>>()?;

    let keep = trainable(cfg.adaptation);
    let vars = model.params.vars_where(keep);
    let trainable_params = vars.iter().map(|v| v.elem_count()).sum();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr(),
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let snapshot = serde_json::to_value(cfg)?;
    let mut run = TrainRun {
        config: cfg.clone(),
        loss_curve: Vec::with_capacity(cfg.max_steps),
        val_curve: Vec::new(),
        best_val: None,
        checkpoints: Vec::new(),
        best_checkpoint: None,
        vocab_delta: model.vocab.added_tokens().to_vec(),
        registry_hash: model.registry_hash(),
        num_params: model.num_params(),
        trainable_params,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let last_dir = out_dir.map(|d| d.join("last"));
    let best_dir = out_dir.map(|d| d.join("best"));

    for step in 1..=cfg.max_steps {
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
        // Canonical order within a batch keeps the reduction order fixed.
        idx.sort_unstable();
        let refs: Vec<&Encoded> = idx.iter().map(|&i| &encoded[i]).collect();
        let loss = Batch::new(&refs).loss(model)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            let last_good = [&best_dir, &last_dir].into_iter().flatten().find(|p| p.exists()).cloned();
            return Err(ModelError::Diverged { step, last_good });
        }
        opt.backward_step(&loss)?;
        run.loss_curve.push((step, value));

        let evaluate_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.max_steps;
        if evaluate_now {
            if !val.is_empty() {
                let v = evaluate(model, &val, cfg.batch_size)?;
                if !v.is_finite() {
                    let last_good = [&best_dir, &last_dir].into_iter().flatten().find(|p| p.exists()).cloned();
                    return Err(ModelError::Diverged { step, last_good });
                }
                run.val_curve.push((step, v));
                tracing::info!(step, train_loss = value, val_loss = v, "evaluation");
                if run.best_val.is_none_or(|(_, b)| v < b) {
                    run.best_val = Some((step, v));
                    if let Some(dir) = &best_dir {
                        model.save(dir, snapshot.clone())?;
                        run.best_checkpoint = Some(dir.clone());
                    }
                }
            } else {
                tracing::info!(step, train_loss = value, "step");
            }
            if let Some(dir) = &last_dir {
                model.save(dir, snapshot.clone())?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if let Some(last) = &last_dir {
            run.checkpoints.push(last.clone());
        }
        if let Some(best) = &run.best_checkpoint {
            run.checkpoints.push(best.clone());
        }
        run.write_loss_csv(&dir.join("loss.csv"))?;
        std::fs::write(dir.join("train_run.json"), serde_json::to_string_pretty(&run)?).map_err(|e| ModelError::io(dir, e))?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use impress_core::corpus::Report;
    use impress_core::prompt::{build_example, StyleTokenRegistry};
    use impress_core::tokenizer::Vocabulary;

    fn setup(arch: Arch) -> (Seq2SeqModel, Vec<FormattedExample>) {
        let reports: Vec<Report> = (0..4)
            .map(|i| Report {
                report_id: format!("R{i}"),
                exam_description: "PET/CT".into(),
                physician_id: format!("P{}", i % 2),
                findings: format!("Node {i} in the neck with uptake."),
                indications: "Staging.".into(),
                impression: format!("Node {i}."),
                cohort_tag: None,
            })
            .collect();
        let mut reg = StyleTokenRegistry::new();
        let examples: Vec<FormattedExample> = reports
            .iter()
            .map(|r| {
                reg.register(&r.physician_id);
                build_example(r, &reg, arch, PromptMode::Train).unwrap()
            })
            .collect();
        let vocab = Vocabulary::build(examples.iter().map(|e| e.input_text.as_str()), 1);
        let mut m = Seq2SeqModel::init(ModelConfig::preset("tiny", arch).unwrap(), vocab, 1).unwrap();
        m.add_style_tokens(&reg).unwrap();
        (m, examples)
    }

    #[test]
    fn decoder_only_loss_covers_only_the_response() {
        let (m, ex) = setup(Arch::DecoderOnly);
        let cfg = TrainConfig::new("toy:tiny", Arch::DecoderOnly, Adaptation::Full);
        let e = encode_example(&m, &ex[0], &cfg).unwrap();
        let target_len = m.vocab.encode(&format!(" {}", ex[0].target_text)).len();
        let b = Batch::new(&[&e]);
        assert_eq!(b.weights[0].iter().sum::<f32>() as usize, target_len + 1);
        let base: f32 = b.loss(&m).unwrap().to_scalar().unwrap();
        let mut perturbed = b.clone();
        for j in 0..e.loss_from {
            perturbed.labels[0][j] = (perturbed.labels[0][j] + 3) % m.vocab.len() as u32;
        }
        assert_eq!(base, perturbed.loss(&m).unwrap().to_scalar::<f32>().unwrap());
    }

    #[test]
    fn arch_and_token_checks() {
        let (m, ex) = setup(Arch::EncoderDecoder);
        let cfg = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
        let dec = ex[0].clone();
        let wrong = FormattedExample {
            arch: Arch::DecoderOnly,
            ..dec.clone()
        };
        assert!(matches!(encode_example(&m, &wrong, &cfg), Err(ModelError::ExampleArch { .. })));
        let missing = dec.with_style_token("[PHY_099]");
        assert!(matches!(encode_example(&m, &missing, &cfg), Err(ModelError::MissingStyleToken(_))));
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (mut m, ex) = setup(Arch::EncoderDecoder);
        let before = m.params.checksum(|_| true).unwrap();
        let mut cfg = TrainConfig::new("toy:tiny", Arch::EncoderDecoder, Adaptation::Full);
        cfg.learning_rate = Some(0.0);
        cfg.batch_size = 4;
        cfg.max_steps = 5;
        let run = train(&mut m, &cfg, &ex, &[], None).unwrap();
        assert_eq!(before, m.params.checksum(|_| true).unwrap());
        assert!(run.loss_curve.windows(2).all(|w| w[0].1 == w[1].1));
    }

    #[test]
    fn lora_leaves_base_weights_alone() {
        let (mut m, ex) = setup(Arch::DecoderOnly);
        let base = m.params.base_checksum().unwrap();
        let mut cfg = TrainConfig::new("toy:tiny", Arch::DecoderOnly, Adaptation::Lora);
        cfg.learning_rate = Some(1e-2);
        cfg.batch_size = 2;
        cfg.max_steps = 3;
        let dir = tempfile::tempdir().unwrap();
        let run = train(&mut m, &cfg, &ex, &ex[..1], Some(dir.path())).unwrap();
        assert_eq!(base, m.params.base_checksum().unwrap());
        assert!(run.trainable_params < run.num_params);
        assert!(dir.path().join("best/weights.safetensors").exists());
        assert!(dir.path().join("loss.csv").exists());
        let reloaded = Seq2SeqModel::load(&dir.path().join("last")).unwrap();
        assert_eq!(reloaded.params.checksum(|_| true).unwrap(), m.params.checksum(|_| true).unwrap());
    }
}
