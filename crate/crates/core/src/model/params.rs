use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{read_dump, write_dump, Precision, Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        let idx = Arc::make_mut(&mut self.index);
        if let Some(&i) = idx.get(&name) {
            self.tensors[i] = Arc::new(t);
        } else {
            idx.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(Arc::new(t));
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| self.tensors[i].as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.tensors[i]))
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            *t = Arc::new(Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| t.as_ref().clone()).collect()
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.len() {
            return Err(Error::dim(format!("{} tensors for {} parameters", tensors.len(), self.len())));
        }
        let mut out = self.clone();
        for (slot, t) in out.tensors.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::dim(format!("parameter shape {:?} replaced by {:?}", slot.shape(), t.shape())));
            }
            *slot = Arc::new(t);
        }
        Ok(out)
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.tensors.iter().map(|t| tape.input_shared(Arc::clone(t))).collect();
        BoundParams { vars, index: Arc::clone(&self.index) }
    }

    /// Rebinds already-recorded leaves, in store order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundParams {
        BoundParams { vars: vars.to_vec(), index: Arc::clone(&self.index) }
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Parameters recorded on a tape, looked up by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::config(format!("missing parameter {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn push_fft_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    let inner = 4 * d;
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), xavier(&[d, d], d, d, rng));
    }
    store.insert(format!("{prefix}.ln1.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ffn.w1"), xavier(&[3, d, inner], 3 * d, inner, rng));
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[inner]));
    store.insert(format!("{prefix}.ffn.w2"), xavier(&[3, inner, d], 3 * inner, d, rng));
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.ln2.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
}

fn push_predictor(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for i in 1..=2 {
        store.insert(format!("{prefix}.conv{i}.w"), xavier(&[3, d, d], 3 * d, d, rng));
        store.insert(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[d]));
        store.insert(format!("{prefix}.ln{i}.g"), Tensor::filled(&[d], 1.0));
        store.insert(format!("{prefix}.ln{i}.b"), Tensor::zeros(&[d]));
    }
    store.insert(format!("{prefix}.proj.w"), xavier(&[d, 1], d, 1, rng));
    store.insert(format!("{prefix}.proj.b"), Tensor::zeros(&[1]));
}

/// Deterministic initialization: Xavier-uniform weights, zero biases, unit
/// layer-norm gains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let mut store = ParamStore::new();
    store.insert("enc.embed", xavier(&[cfg.vocab_size, d], cfg.vocab_size, d, &mut rng));
    for l in 0..cfg.n_enc_layers {
        push_fft_block(&mut store, &format!("enc.{l}"), d, &mut rng);
    }
    push_predictor(&mut store, "dur", d, &mut rng);
    push_predictor(&mut store, "pitch", d, &mut rng);
    store.insert("pitch_embed.w", xavier(&[3, 1, d], 3, d, &mut rng));
    store.insert("pitch_embed.b", Tensor::zeros(&[d]));
    if cfg.hpc.is_some() {
        store.insert("hpc.sentence.w", xavier(&[1, d], 1, d, &mut rng));
        store.insert("hpc.sentence.b", Tensor::zeros(&[d]));
        store.insert("hpc.word.w", xavier(&[3, 1, d], 3, d, &mut rng));
        store.insert("hpc.word.b", Tensor::zeros(&[d]));
    }
    for l in 0..cfg.n_dec_layers {
        push_fft_block(&mut store, &format!("dec.{l}"), d, &mut rng);
    }
    store.insert("mel_proj.w", xavier(&[d, cfg.mel_bins], d, cfg.mel_bins, &mut rng));
    store.insert("mel_proj.b", Tensor::zeros(&[cfg.mel_bins]));
    store
}

const CHECKPOINT_MAGIC: &str = "hctts-checkpoint v1";

#[derive(Serialize, Deserialize)]
struct Manifest<M> {
    meta: M,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes the magic line, a JSON manifest line, then every parameter as a
/// 64-bit tensor dump in manifest order.
pub fn write_checkpoint<W: Write, M: Serialize>(w: &mut W, meta: &M, store: &ParamStore) -> Result<()> {
    let manifest = Manifest {
        meta,
        params: store
            .names
            .iter()
            .zip(&store.tensors)
            .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(&manifest)?)?;
    for t in &store.tensors {
        write_dump(w, t, Precision::F64)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead, M: for<'de> Deserialize<'de>>(r: &mut R) -> Result<(M, ParamStore)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Parse(format!("not a checkpoint (header {:?})", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let manifest: Manifest<M> = serde_json::from_str(line.trim_end())?;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        let t = read_dump(r, Precision::F64)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Parse(format!(
                "parameter {} has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.insert(entry.name, t);
    }
    Ok((manifest.meta, store))
}
