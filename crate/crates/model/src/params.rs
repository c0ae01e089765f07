//! Named parameter store with seeded initialization and safetensors I/O.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ModelError;

/// Parameters owned by the adapter file: LoRA factors and embeddings of
/// tokens added after the base vocabulary.
pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("lora.") || name == "embed.added"
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` where fan_in is the last dimension.
    Uniform,
    Normal(f32),
    Zeros,
    Ones,
}

fn name_stream(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Deterministic values for one parameter: the stream depends only on the
/// seed and the name, so adding parameters never shifts the others.
pub fn init_values(seed: u64, name: &str, numel: usize, fan_in: usize, init: Init) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(name));
    match init {
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::Uniform => {
            let a = 1.0 / (fan_in.max(1) as f32).sqrt();
            (0..numel).map(|_| rng.random_range(-a..a)).collect()
        }
        Init::Normal(std) => (0..numel)
            .map(|_| {
                // Box-Muller
                let u1: f32 = rng.random_range(f32::EPSILON..1.0);
                let u2: f32 = rng.random::<f32>();
                std * (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64, device: &Device) -> Result<(), ModelError> {
        let numel = shape.iter().product();
        let fan_in = *shape.last().unwrap_or(&1);
        let values = init_values(seed, name, numel, fan_in, init);
        let t = Tensor::from_vec(values, shape, device)?;
        self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn insert(&mut self, name: &str, t: &Tensor) -> Result<(), ModelError> {
        self.vars
            .insert(name.to_string(), Var::from_tensor(&t.to_dtype(DType::F32)?.contiguous()?)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|k| k.as_str())
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars.iter().filter(|(k, _)| keep(k)).map(|(_, v)| v.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Independent copy of every tensor.
    pub fn deep_clone(&self) -> Result<ParamStore, ModelError> {
        let mut out = ParamStore::new();
        for (k, v) in &self.vars {
            out.vars.insert(k.clone(), Var::from_tensor(&v.as_detached_tensor().copy()?)?);
        }
        Ok(out)
    }

    /// Overwrites values in place from `other` (same names and shapes).
    pub fn assign_from(&self, other: &ParamStore) -> Result<(), ModelError> {
        for (k, v) in &self.vars {
            let src = other.get(k)?;
            v.set(&src.copy()?)?;
        }
        Ok(())
    }

    fn subset(&self, keep: impl Fn(&str) -> bool) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.as_detached_tensor()))
            .collect()
    }

    pub fn save_split(&self, base_path: &Path, adapter_path: &Path) -> Result<(), ModelError> {
        candle_core::safetensors::save(&self.subset(|k| !is_adapter_param(k)), base_path)?;
        candle_core::safetensors::save(&self.subset(is_adapter_param), adapter_path)?;
        Ok(())
    }

    pub fn load_files(paths: &[&Path], device: &Device) -> Result<ParamStore, ModelError> {
        let mut out = ParamStore::new();
        for p in paths {
            if !p.exists() {
                continue;
            }
            for (k, t) in candle_core::safetensors::load(p, device)? {
                out.insert(&k, &t)?;
            }
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// parameters in name order.
    pub fn checksum(&self, keep: impl Fn(&str) -> bool) -> Result<String, ModelError> {
        let mut h = Sha256::new();
        for (k, v) in self.vars.iter().filter(|(k, _)| keep(k)) {
            h.update(k.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            let values: Vec<f32> = v.as_detached_tensor().flatten_all()?.to_vec1()?;
            for x in values {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn base_checksum(&self) -> Result<String, ModelError> {
        self.checksum(|k| !is_adapter_param(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_per_name() {
        let a = init_values(1, "x", 8, 4, Init::Uniform);
        assert_eq!(a, init_values(1, "x", 8, 4, Init::Uniform));
        assert_ne!(a, init_values(1, "y", 8, 4, Init::Uniform));
        assert!(a.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn normal_init_has_roughly_the_right_spread() {
        let v = init_values(3, "n", 20_000, 1, Init::Normal(0.5));
        let m = v.iter().sum::<f32>() / v.len() as f32;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f32>() / v.len() as f32).sqrt();
        assert!(m.abs() < 0.02 && (s - 0.5).abs() < 0.02, "{m} {s}");
    }

    #[test]
    fn split_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.init("w", &[3, 2], Init::Uniform, 0, &Device::Cpu).unwrap();
        p.init("lora.q.a", &[2, 2], Init::Uniform, 0, &Device::Cpu).unwrap();
        let (b, a) = (dir.path().join("w.safetensors"), dir.path().join("a.safetensors"));
        p.save_split(&b, &a).unwrap();
        let q = ParamStore::load_files(&[&b, &a], &Device::Cpu).unwrap();
        assert_eq!(p.checksum(|_| true).unwrap(), q.checksum(|_| true).unwrap());
        assert_eq!(ParamStore::load_files(&[&b], &Device::Cpu).unwrap().names().count(), 1);
    }
}
