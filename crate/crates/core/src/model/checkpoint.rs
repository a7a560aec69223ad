//! Checkpoints as safetensors files: every array is stored as little-endian
//! `F64` under its `ParamSet` name, and the header metadata carries the model
//! configuration, RNG state, corpus hash and training counters as strings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::params::{AdapterBank, ModelConfig, ParamSet, Parameters};
use crate::error::{Error, Result};

const FORMAT: &str = "shiftlab-checkpoint-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub adapters: Option<AdapterBank>,
    pub rng: Option<ChaCha8Rng>,
    pub corpus_hash: String,
    /// Completed epochs of the stage that wrote this checkpoint.
    pub epoch: usize,
    /// Free-form string annotations (stage, method, ...).
    pub notes: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: Parameters, corpus_hash: impl Into<String>) -> Self {
        Checkpoint {
            params,
            adapters: None,
            rng: None,
            corpus_hash: corpus_hash.into(),
            epoch: 0,
            notes: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let mut push = |name: String, view: ndarray::ArrayViewD<'_, f64>| {
            let bytes = view.iter().flat_map(|x| x.to_le_bytes()).collect();
            owned.push((name, view.shape().to_vec(), bytes));
        };
        for (name, a) in self.params.arrays() {
            push(name, a);
        }
        if let Some(bank) = &self.adapters {
            for (name, a) in bank.arrays() {
                push(name, a);
            }
        }
        let views = owned
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.clone(), bytes)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::invalid(format!("tensor {n}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("config".to_string(), json(&self.params.config)?);
        meta.insert("corpus_hash".to_string(), self.corpus_hash.clone());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        if let Some(rng) = &self.rng {
            meta.insert("rng".to_string(), json(rng)?);
        }
        if let Some(bank) = &self.adapters {
            meta.insert("adapters_enabled".to_string(), bank.enabled.to_string());
        }
        for (k, v) in &self.notes {
            meta.insert(format!("note.{k}"), v.clone());
        }
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::invalid(format!("serialize: {e}")))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: origin.to_path_buf(), reason };
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(format!("unreadable header: {e}")))?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not a shiftlab checkpoint".into()));
        }
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("missing metadata `{k}`")));
        let config: ModelConfig = serde_json::from_str(get("config")?).map_err(|e| bad(format!("bad config: {e}")))?;
        config.validate().map_err(|e| bad(e.to_string()))?;
        let epoch = get("epoch")?.parse().map_err(|_| bad("bad epoch".into()))?;
        let rng = meta
            .get("rng")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| bad(format!("bad rng state: {e}")))?;
        let notes =
            meta.iter().filter_map(|(k, v)| k.strip_prefix("note.").map(|k| (k.to_string(), v.clone()))).collect();

        let tensors = SafeTensors::deserialize(bytes).map_err(|e| bad(format!("unreadable tensors: {e}")))?;
        let mut params = Parameters::init(&config, 0).map_err(|e| bad(e.to_string()))?;
        fill(&mut params, &tensors).map_err(bad)?;

        let adapters = match meta.get("adapters_enabled") {
            Some(flag) => {
                let mut bank = AdapterBank::init(&config, 0).map_err(|e| bad(e.to_string()))?;
                bank.enabled = flag.parse().map_err(|_| bad("bad adapters_enabled".into()))?;
                fill(&mut bank, &tensors).map_err(bad)?;
                Some(bank)
            }
            None => None,
        };

        Ok(Checkpoint { params, adapters, rng, corpus_hash: get("corpus_hash")?.clone(), epoch, notes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Adapters if present, otherwise an inactive empty bank.
    pub fn active_adapters(&self) -> AdapterBank {
        self.adapters.clone().unwrap_or_else(|| AdapterBank::empty(&self.params.config))
    }
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::invalid(e.to_string()))
}

fn fill<P: ParamSet>(target: &mut P, tensors: &SafeTensors<'_>) -> std::result::Result<(), String> {
    for (name, mut arr) in target.arrays_mut() {
        let view = tensors.tensor(&name).map_err(|_| format!("missing tensor `{name}`"))?;
        if view.dtype() != Dtype::F64 {
            return Err(format!("tensor `{name}` is {:?}, expected F64", view.dtype()));
        }
        if view.shape() != arr.shape() {
            return Err(format!("tensor `{name}` has shape {:?}, expected {:?}", view.shape(), arr.shape()));
        }
        for (dst, chunk) in arr.iter_mut().zip(view.data().chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::new(10);
        cfg.n_layers = 2;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.max_seq = 8;
        cfg.adapter_rank = 2;
        cfg
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_config();
        let mut ck = Checkpoint::new(Parameters::init(&cfg, 1).unwrap(), "abc");
        let mut bank = AdapterBank::init(&cfg, 2).unwrap();
        bank.sites[1][0].as_mut().unwrap().up[[3, 1]] = -1.234_567_890_123e-7;
        ck.adapters = Some(bank);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.next_u64();
        ck.rng = Some(rng);
        ck.epoch = 17;
        ck.notes.insert("stage".into(), "pretrain".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let a: Vec<u64> = ck.params.flatten().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.params.flatten().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_bytes_are_named() {
        let cfg = small_config();
        let ck = Checkpoint::new(Parameters::init(&cfg, 1).unwrap(), "abc");
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() / 2);
        match Checkpoint::from_bytes(&bytes, Path::new("broken.safetensors")) {
            Err(Error::Checkpoint { path, .. }) => assert_eq!(path, Path::new("broken.safetensors")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
