//! Pre-norm transformer in two layouts: encoder-decoder with
//! cross-attention, and a single causal decoder stack. The output
//! projection is tied to the token embeddings.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use impress_core::prompt::{Arch, StyleTokenRegistry};
use impress_core::tokenizer::Vocabulary;

use crate::config::{LoraConfig, ModelConfig};
use crate::params::{init_values, Init, ParamStore};
use crate::ModelError;

const NEG: f32 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub registry: StyleTokenRegistry,
    pub seed: u64,
    device: Device,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    seed: u64,
    registry_hash: String,
    #[serde(default)]
    train: serde_json::Value,
}

/// Tokens added after the base vocabulary (style tokens).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VocabDelta {
    pub added: Vec<String>,
    pub size_before: usize,
    pub size_after: usize,
}

impl Seq2SeqModel {
    /// Fresh model with seeded random weights over `vocab`.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let dev = Device::Cpu;
        let d = config.d_model;
        let mut p = ParamStore::new();
        p.init("embed.base", &[vocab.base_size(), d], Init::Normal(1.0), seed, &dev)?;
        let added = vocab.len() - vocab.base_size();
        if added > 0 {
            p.init("embed.added", &[added, d], Init::Normal(1.0), seed, &dev)?;
        }
        let mut linear = |p: &mut ParamStore, name: &str, out: usize, inp: usize| -> Result<(), ModelError> {
            p.init(&format!("{name}.w"), &[out, inp], Init::Uniform, seed, &dev)?;
            p.init(&format!("{name}.b"), &[out], Init::Zeros, seed, &dev)
        };
        let norm = |p: &mut ParamStore, name: &str| -> Result<(), ModelError> {
            p.init(&format!("{name}.g"), &[d], Init::Ones, seed, &dev)?;
            p.init(&format!("{name}.b"), &[d], Init::Zeros, seed, &dev)
        };
        let attn = |p: &mut ParamStore, lin: &mut dyn FnMut(&mut ParamStore, &str, usize, usize) -> Result<(), ModelError>, name: &str| {
            for w in ["q", "k", "v", "o"] {
                lin(p, &format!("{name}.{w}"), d, d)?;
            }
            Ok::<(), ModelError>(())
        };
        if config.arch == Arch::EncoderDecoder {
            p.init("pos.enc", &[config.max_len, d], Init::Normal(1.0), seed, &dev)?;
            for i in 0..config.n_enc_layers {
                norm(&mut p, &format!("enc.{i}.ln1"))?;
                attn(&mut p, &mut linear, &format!("enc.{i}.attn"))?;
                norm(&mut p, &format!("enc.{i}.ln2"))?;
                linear(&mut p, &format!("enc.{i}.ff1"), config.d_ff, d)?;
                linear(&mut p, &format!("enc.{i}.ff2"), d, config.d_ff)?;
            }
            norm(&mut p, "enc.ln")?;
        }
        p.init("pos.dec", &[config.max_len, d], Init::Normal(1.0), seed, &dev)?;
        for i in 0..config.n_dec_layers {
            norm(&mut p, &format!("dec.{i}.ln1"))?;
            attn(&mut p, &mut linear, &format!("dec.{i}.self"))?;
            if config.arch == Arch::EncoderDecoder {
                norm(&mut p, &format!("dec.{i}.ln2"))?;
                attn(&mut p, &mut linear, &format!("dec.{i}.cross"))?;
            }
            norm(&mut p, &format!("dec.{i}.ln3"))?;
            linear(&mut p, &format!("dec.{i}.ff1"), config.d_ff, d)?;
            linear(&mut p, &format!("dec.{i}.ff2"), d, config.d_ff)?;
        }
        norm(&mut p, "dec.ln")?;
        let lora = config.lora;
        let mut model = Seq2SeqModel {
            config: ModelConfig { lora: None, ..config },
            vocab,
            params: p,
            registry: StyleTokenRegistry::new(),
            seed,
            device: dev,
        };
        if let Some(l) = lora {
            model.enable_lora(l)?;
        }
        Ok(model)
    }

    /// Resolves `toy:<preset>` (fresh weights, vocabulary built from
    /// `vocab_texts`) or a checkpoint directory.
    pub fn from_ref<'a>(
        model_ref: &str,
        arch: Arch,
        vocab_texts: impl IntoIterator<Item = &'a str>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if let Some(preset) = model_ref.strip_prefix("toy:") {
            let vocab = Vocabulary::build(vocab_texts, 1);
            return Self::init(ModelConfig::preset(preset, arch)?, vocab, seed);
        }
        let m = Self::load(Path::new(model_ref))?;
        if m.config.arch != arch {
            return Err(ModelError::ArchMismatch {
                expected: arch,
                found: m.config.arch,
            });
        }
        Ok(m)
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn attention_prefixes(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.config.n_enc_layers).map(|i| format!("enc.{i}.attn")).collect();
        for i in 0..self.config.n_dec_layers {
            out.push(format!("dec.{i}.self"));
            if self.config.arch == Arch::EncoderDecoder {
                out.push(format!("dec.{i}.cross"));
            }
        }
        out
    }

    /// Adds zero-initialized LoRA factors on the query and value
    /// projections of every attention block. No-op if already enabled.
    pub fn enable_lora(&mut self, lora: LoraConfig) -> Result<(), ModelError> {
        if lora.rank == 0 {
            return Err(ModelError::Config("lora rank must be positive".into()));
        }
        if let Some(existing) = self.config.lora {
            if existing.rank != lora.rank {
                return Err(ModelError::Config(format!("model already has rank-{} adapters", existing.rank)));
            }
            return Ok(());
        }
        let d = self.config.d_model;
        for prefix in self.attention_prefixes() {
            for w in ["q", "v"] {
                let name = format!("lora.{prefix}.{w}");
                self.params
                    .init(&format!("{name}.a"), &[lora.rank, d], Init::Uniform, self.seed, &self.device)?;
                self.params
                    .init(&format!("{name}.b"), &[d, lora.rank], Init::Zeros, self.seed, &self.device)?;
            }
        }
        self.config.lora = Some(lora);
        Ok(())
    }

    /// Registers each style token as one vocabulary entry. New rows start
    /// around the mean of the existing embeddings; existing rows are untouched.
    pub fn add_style_tokens(&mut self, registry: &StyleTokenRegistry) -> Result<VocabDelta, ModelError> {
        registry.check_vocabulary(|t| self.vocab.is_base_token(t))?;
        let size_before = self.vocab.len();
        let added = self.vocab.add_tokens(&registry.tokens());
        for token in registry.tokens() {
            let physician = registry.physician(token).unwrap_or_default();
            if self.registry.token(physician).is_none() {
                let got = self.registry.register(physician);
                if got != token {
                    return Err(ModelError::Config(format!(
                        "registry order mismatch: {physician} maps to {token} but model assigns {got}"
                    )));
                }
            }
        }
        if !added.is_empty() {
            let emb = self.embeddings()?;
            let mean = emb.mean_keepdim(0)?;
            let std = emb.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?.sqrt()?;
            // Centered on the mean with the spread of the existing rows, so
            // distinct tokens start distinguishable.
            let d = self.config.d_model;
            let mut rows = Vec::with_capacity(added.len());
            for token in &added {
                let z = init_values(self.seed, &format!("embed.added/{token}"), d, d, Init::Normal(1.0));
                let z = Tensor::from_vec(z, (1, d), &self.device)?;
                rows.push(mean.broadcast_add(&z.broadcast_mul(&std)?)?);
            }
            let fresh = Tensor::cat(&rows, 0)?;
            let rows = match self.params.contains("embed.added") {
                true => Tensor::cat(&[self.params.get("embed.added")?, &fresh], 0)?,
                false => fresh,
            };
            self.params.insert("embed.added", &rows)?;
        }
        Ok(VocabDelta {
            added,
            size_before,
            size_after: self.vocab.len(),
        })
    }

    /// Full token embedding matrix `[vocab, d]`.
    pub fn embeddings(&self) -> Result<Tensor, ModelError> {
        let base = self.params.get("embed.base")?;
        Ok(match self.params.contains("embed.added") {
            true => Tensor::cat(&[base, self.params.get("embed.added")?], 0)?,
            false => base.clone(),
        })
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor, ModelError> {
        let w = self.params.get(&format!("{name}.w"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let mut y = x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?;
        if let Some(l) = self.config.lora {
            let a_name = format!("lora.{name}.a");
            if self.params.contains(&a_name) {
                let a = self.params.get(&a_name)?;
                let bb = self.params.get(&format!("lora.{name}.b"))?;
                let delta = x.broadcast_matmul(&a.t()?)?.broadcast_matmul(&bb.t()?)?;
                y = (y + (delta * (l.alpha / l.rank as f64))?)?;
            }
        }
        Ok(y)
    }

    fn layer_norm(&self, x: &Tensor, name: &str) -> Result<Tensor, ModelError> {
        let g = self.params.get(&format!("{name}.g"))?;
        let b = self.params.get(&format!("{name}.b"))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(g)?.broadcast_add(b)?)
    }

    fn attention(&self, name: &str, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, ModelError> {
        let (b, tq, d) = xq.dims3()?;
        let tk = xkv.dim(1)?;
        let h = self.config.n_heads;
        let dh = d / h;
        let split = |x: Tensor, t: usize| -> Result<Tensor, ModelError> { Ok(x.reshape((b, t, h, dh))?.transpose(1, 2)?.contiguous()?) };
        let q = split(self.linear(xq, &format!("{name}.q"))?, tq)?;
        let k = split(self.linear(xkv, &format!("{name}.k"))?, tk)?;
        let v = split(self.linear(xkv, &format!("{name}.v"))?, tk)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let o = att.matmul(&v)?.transpose(1, 2)?.reshape((b, tq, d))?;
        self.linear(&o, &format!("{name}.o"))
    }

    fn feed_forward(&self, x: &Tensor, name: &str) -> Result<Tensor, ModelError> {
        let hdn = self.linear(x, &format!("{name}.ff1"))?.gelu()?;
        self.linear(&hdn, &format!("{name}.ff2"))
    }

    fn embed(&self, ids: &Tensor, pos: &str) -> Result<Tensor, ModelError> {
        let (b, t) = ids.dims2()?;
        if t > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.config.max_len,
            });
        }
        let e = self
            .embeddings()?
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, t, self.config.d_model))?;
        let p = self.params.get(pos)?.narrow(0, 0, t)?;
        Ok(e.broadcast_add(&p)?)
    }

    fn causal_mask(&self, t: usize) -> Result<Tensor, ModelError> {
        let v: Vec<f32> = (0..t * t).map(|i| if i % t > i / t { NEG } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (1, 1, t, t), &self.device)?)
    }

    /// Additive key mask `[b, 1, 1, s]` hiding positions at or beyond each length.
    pub fn padding_mask(&self, lengths: &[usize], s: usize) -> Result<Tensor, ModelError> {
        let v: Vec<f32> = lengths
            .iter()
            .flat_map(|&len| (0..s).map(move |j| if j < len { 0.0 } else { NEG }))
            .collect();
        Ok(Tensor::from_vec(v, (lengths.len(), 1, 1, s), &self.device)?)
    }

    /// Encoder states `[b, s, d]`.
    pub fn encode(&self, src: &Tensor, src_mask: Option<&Tensor>) -> Result<Tensor, ModelError> {
        if self.config.arch != Arch::EncoderDecoder {
            return Err(ModelError::Config("decoder-only model has no encoder".into()));
        }
        let mut x = self.embed(src, "pos.enc")?;
        for i in 0..self.config.n_enc_layers {
            let h = self.layer_norm(&x, &format!("enc.{i}.ln1"))?;
            x = (&x + self.attention(&format!("enc.{i}.attn"), &h, &h, src_mask)?)?;
            let h = self.layer_norm(&x, &format!("enc.{i}.ln2"))?;
            x = (&x + self.feed_forward(&h, &format!("enc.{i}"))?)?;
        }
        self.layer_norm(&x, "enc.ln")
    }

    /// Final decoder states `[b, t, d]`; `memory` is required for the
    /// encoder-decoder layout and ignored otherwise.
    pub fn decode_hidden(&self, tgt: &Tensor, memory: Option<(&Tensor, Option<&Tensor>)>) -> Result<Tensor, ModelError> {
        let t = tgt.dim(1)?;
        let causal = self.causal_mask(t)?;
        let mut x = self.embed(tgt, "pos.dec")?;
        for i in 0..self.config.n_dec_layers {
            let h = self.layer_norm(&x, &format!("dec.{i}.ln1"))?;
            x = (&x + self.attention(&format!("dec.{i}.self"), &h, &h, Some(&causal))?)?;
            if self.config.arch == Arch::EncoderDecoder {
                let (mem, mask) = memory.ok_or_else(|| ModelError::Config("encoder memory required".into()))?;
                let h = self.layer_norm(&x, &format!("dec.{i}.ln2"))?;
                x = (&x + self.attention(&format!("dec.{i}.cross"), &h, mem, mask)?)?;
            }
            let h = self.layer_norm(&x, &format!("dec.{i}.ln3"))?;
            x = (&x + self.feed_forward(&h, &format!("dec.{i}"))?)?;
        }
        self.layer_norm(&x, "dec.ln")
    }

    /// Vocabulary logits `[b, t, V]` from decoder states.
    pub fn project(&self, hidden: &Tensor) -> Result<Tensor, ModelError> {
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        Ok((hidden.broadcast_matmul(&self.embeddings()?.t()?)? * scale)?)
    }

    /// Right-padded `[b, t]` id tensor and the true lengths.
    pub fn pad_batch(&self, seqs: &[Vec<u32>]) -> Result<(Tensor, Vec<usize>), ModelError> {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let flat: Vec<u32> = seqs
            .iter()
            .flat_map(|s| {
                s.iter()
                    .copied()
                    .chain(std::iter::repeat(impress_core::tokenizer::PAD).take(t - s.len()))
            })
            .collect();
        Ok((Tensor::from_vec(flat, (seqs.len(), t), &self.device)?, lengths))
    }

    pub fn to_ids_tensor(&self, ids: &[u32]) -> Result<Tensor, ModelError> {
        Ok(Tensor::from_vec(ids.to_vec(), (1, ids.len()), &self.device)?)
    }

    pub fn registry_hash(&self) -> String {
        self.registry.content_hash()
    }

    /// Writes the checkpoint atomically: everything goes to a sibling
    /// temporary directory that is renamed over `dir`.
    pub fn save(&self, dir: &Path, train_snapshot: serde_json::Value) -> Result<(), ModelError> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| ModelError::io(parent, e))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "ckpt".into());
        let tmp: PathBuf = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| ModelError::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| ModelError::io(&tmp, e))?;
        let meta = CheckpointMeta {
            model: self.config.clone(),
            seed: self.seed,
            registry_hash: self.registry_hash(),
            train: train_snapshot,
        };
        let write = |file: &str, text: String| {
            let p = tmp.join(file);
            std::fs::write(&p, text).map_err(|e| ModelError::io(&p, e))
        };
        write("config.json", serde_json::to_string_pretty(&meta)?)?;
        write("vocab.json", self.vocab.to_json())?;
        write("registry.json", self.registry.to_json())?;
        write("registry.sha256", self.registry_hash())?;
        self.params
            .save_split(&tmp.join("weights.safetensors"), &tmp.join("adapter.safetensors"))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| ModelError::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| ModelError::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let read = |file: &str| {
            let p = dir.join(file);
            std::fs::read_to_string(&p).map_err(|e| ModelError::io(&p, e))
        };
        let meta: CheckpointMeta = serde_json::from_str(&read("config.json")?)?;
        let vocab = Vocabulary::from_json(&read("vocab.json")?).map_err(|e| ModelError::Config(e.to_string()))?;
        let registry = StyleTokenRegistry::from_json(&read("registry.json")?)?;
        if registry.content_hash() != meta.registry_hash {
            return Err(ModelError::Config(format!("{}: registry hash mismatch", dir.display())));
        }
        let dev = Device::Cpu;
        let params = ParamStore::load_files(&[&dir.join("weights.safetensors"), &dir.join("adapter.safetensors")], &dev)?;
        let model = Seq2SeqModel {
            config: meta.model,
            vocab,
            params,
            registry,
            seed: meta.seed,
            device: dev,
        };
        let rows = model.embeddings()?.dim(0)?;
        if rows != model.vocab.len() {
            return Err(ModelError::Config(format!(
                "{}: {} embedding rows for {} vocabulary entries",
                dir.display(),
                rows,
                model.vocab.len()
            )));
        }
        Ok(model)
    }

    /// Independent copy with its own parameter storage.
    pub fn deep_clone(&self) -> Result<Self, ModelError> {
        Ok(Seq2SeqModel {
            params: self.params.deep_clone()?,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> Seq2SeqModel {
        let vocab = Vocabulary::build(["Findings: node in the neck. Impression: lymphoma."], 1);
        Seq2SeqModel::init(ModelConfig::preset("tiny", arch).unwrap(), vocab, 7).unwrap()
    }

    #[test]
    fn shapes() {
        for arch in [Arch::EncoderDecoder, Arch::DecoderOnly] {
            let m = tiny(arch);
            let (ids, _) = m.pad_batch(&[vec![1, 5, 6], vec![1, 7]]).unwrap();
            let mem = match arch {
                Arch::EncoderDecoder => Some(m.encode(&ids, None).unwrap()),
                Arch::DecoderOnly => None,
            };
            let h = m.decode_hidden(&ids, mem.as_ref().map(|t| (t, None))).unwrap();
            let logits = m.project(&h).unwrap();
            assert_eq!(logits.dims(), &[2, 3, m.vocab.len()]);
        }
    }

    #[test]
    fn style_tokens_extend_vocabulary_once() {
        let mut m = tiny(Arch::EncoderDecoder);
        let before = m.embeddings().unwrap().to_vec2::<f32>().unwrap();
        let mut reg = StyleTokenRegistry::new();
        for i in 0..65 {
            reg.register(&format!("P{i}"));
        }
        let delta = m.add_style_tokens(&reg).unwrap();
        assert_eq!(delta.added.len(), 65);
        assert_eq!(m.vocab.len(), delta.size_before + 65);
        let after = m.embeddings().unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(&after[..before.len()], &before[..]);
        assert_eq!(m.add_style_tokens(&reg).unwrap().added.len(), 0);
        assert_eq!(m.add_style_tokens(&StyleTokenRegistry::new()).unwrap().size_after, m.vocab.len());
        // new rows scatter around the mean of the old ones with their spread
        let col = |rows: &[Vec<f32>], j: usize| -> (f32, f32) {
            let n = rows.len() as f32;
            let m = rows.iter().map(|r| r[j]).sum::<f32>() / n;
            (m, (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f32>() / n).sqrt())
        };
        let new_rows = &after[before.len()..];
        assert_ne!(new_rows[0], new_rows[1]);
        for j in 0..4 {
            let ((m0, s0), (m1, _)) = (col(&before, j), col(new_rows, j));
            assert!((m1 - m0).abs() < 4.0 * s0 / 65f32.sqrt(), "{m0} {m1} {s0}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny(Arch::DecoderOnly);
        let mut reg = StyleTokenRegistry::new();
        reg.register("P1");
        m.add_style_tokens(&reg).unwrap();
        m.enable_lora(LoraConfig { rank: 2, alpha: 4.0 }).unwrap();
        let path = dir.path().join("ckpt");
        m.save(&path, serde_json::json!({"note": "x"})).unwrap();
        m.save(&path, serde_json::Value::Null).unwrap();
        let back = Seq2SeqModel::load(&path).unwrap();
        assert_eq!(back.params.checksum(|_| true).unwrap(), m.params.checksum(|_| true).unwrap());
        assert_eq!(back.registry, m.registry);
        assert_eq!(back.config, m.config);
        assert!(Seq2SeqModel::from_ref(path.to_str().unwrap(), Arch::EncoderDecoder, [], 0).is_err());
    }

    #[test]
    fn tiny_is_small() {
        assert!(tiny(Arch::EncoderDecoder).num_params() < 10_000_000);
    }
}
