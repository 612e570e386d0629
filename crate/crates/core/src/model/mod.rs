//! Decoder-only transformer with additive sinusoidal positions, pre-norm
//! residual blocks, KV-cache input/output and low-rank adapters.

mod forward;
mod lora;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{AttentionCapture, ForwardResult, KvSegment, ModelView};
pub(crate) use forward::{Bound, ForwardSpec};
pub use lora::{
    AdapterInit, AdapterSet, AdapterTarget, LoraAdapter, Projection, DEFAULT_ALPHA, DEFAULT_DROPOUT, DEFAULT_RANK,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 256, vocab_size: 512, max_positions: 512, init_seed: 0 }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even for sinusoidal positions", self.d_model)));
        }
        Ok(())
    }
}

/// Weights of one pre-norm block. Projections are `[d_in × d_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Tensor<f64>,
    pub ln1_bias: Tensor<f64>,
    pub w_q: Tensor<f64>,
    pub w_k: Tensor<f64>,
    pub w_v: Tensor<f64>,
    pub w_o: Tensor<f64>,
    pub ln2_gain: Tensor<f64>,
    pub ln2_bias: Tensor<f64>,
    pub w_up: Tensor<f64>,
    pub b_up: Tensor<f64>,
    pub w_down: Tensor<f64>,
    pub b_down: Tensor<f64>,
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Tensor<f64> {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<f64>); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }
}

/// Trainable and fixed weights. The positional table is derived from the
/// config and never stored or trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `[vocab × d]`
    pub token_embedding: Tensor<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor<f64>,
    pub final_bias: Tensor<f64>,
    /// `[vocab × d]`; logits are `LN(x) · unembeddingᵀ + output_bias`.
    pub unembedding: Tensor<f64>,
    /// `[vocab]`
    pub output_bias: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    positions: Tensor<f64>,
}

/// Row `i` is the sinusoidal encoding of absolute position `i`:
/// `sin(i / 10000^(2k/d))` at column `2k`, `cos(..)` at `2k + 1`.
pub fn sinusoidal_table(max_positions: usize, d: usize) -> Tensor<f64> {
    let mut data = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for k in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            data[pos * d + 2 * k] = angle.sin();
            data[pos * d + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_positions, d], data).expect("position table shape")
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

const MODEL_FORMAT: &str = "permubias-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    /// Deterministic initialization from `config.init_seed`: embeddings
    /// `N(0, 1)`, projections `N(0, 1/d_in)`, unit norm gains, zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let token_embedding = gaussian(&mut rng, &[v, d], 1.0);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: gaussian(&mut rng, &[d, d], sd),
                w_k: gaussian(&mut rng, &[d, d], sd),
                w_v: gaussian(&mut rng, &[d, d], sd),
                w_o: gaussian(&mut rng, &[d, d], sd),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_up: gaussian(&mut rng, &[d, f], sd),
                b_up: Tensor::zeros(&[f]),
                w_down: gaussian(&mut rng, &[f, d], sf),
                b_down: Tensor::zeros(&[d]),
            })
            .collect();
        let unembedding = gaussian(&mut rng, &[v, d], sd);
        let weights = ModelWeights {
            token_embedding,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            unembedding,
            output_bias: Tensor::zeros(&[v]),
        };
        Self::from_parts(config, weights)
    }

    /// Assembles a model from explicit weights after checking every shape.
    pub fn from_parts(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut expected: Vec<(&str, &Tensor<f64>, Vec<usize>)> = vec![
            ("token_embedding", &weights.token_embedding, vec![v, d]),
            ("final_gain", &weights.final_gain, vec![d]),
            ("final_bias", &weights.final_bias, vec![d]),
            ("unembedding", &weights.unembedding, vec![v, d]),
            ("output_bias", &weights.output_bias, vec![v]),
        ];
        if weights.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layers of weights for n_layers {}",
                weights.layers.len(),
                config.n_layers
            )));
        }
        for layer in &weights.layers {
            for (name, t) in layer.tensors() {
                let shape = match name {
                    "w_up" => vec![d, f],
                    "b_up" => vec![f],
                    "w_down" => vec![f, d],
                    n if n.starts_with("w_") => vec![d, d],
                    _ => vec![d],
                };
                expected.push((name, t, shape));
            }
        }
        for (name, t, shape) in expected {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::Numeric(format!("{name} has non-finite values")));
            }
        }
        let positions = sinusoidal_table(config.max_positions, d);
        Ok(Self { config, weights, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn positions(&self) -> &Tensor<f64> {
        &self.positions
    }

    /// Copy of this model with different weights (shapes re-checked).
    pub fn with_weights(&self, weights: ModelWeights) -> Result<Self> {
        Self::from_parts(self.config.clone(), weights)
    }

    /// Adds `shift` to the output bias of `token`, e.g. to give a model a
    /// fixed preference for one option label.
    pub fn with_logit_shift(&self, token: u32, shift: f64) -> Result<Self> {
        let mut w = self.weights.clone();
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(Error::Range(format!("token {t} outside vocabulary")));
        }
        w.output_bias.data_mut()[t] += shift;
        self.with_weights(w)
    }

    /// Same model with the unembedding zeroed (every logit becomes the bias).
    pub fn with_zero_unembedding(&self) -> Self {
        let mut w = self.weights.clone();
        w.unembedding = Tensor::zeros(w.unembedding.shape());
        self.with_weights(w).expect("shapes unchanged")
    }

    pub fn param_count(&self) -> usize {
        let w = &self.weights;
        w.token_embedding.len()
            + w.final_gain.len()
            + w.final_bias.len()
            + w.unembedding.len()
            + w.output_bias.len()
            + w.layers.iter().flat_map(|l| l.tensors().map(|(_, t)| t.len())).sum::<usize>()
    }

    /// SHA-256 over the config and every weight, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        let w = &self.weights;
        let mut feed = |t: &Tensor<f64>| {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        };
        feed(&w.token_embedding);
        for layer in &w.layers {
            for (_, t) in layer.tensors() {
                feed(t);
            }
        }
        feed(&w.final_gain);
        feed(&w.final_bias);
        feed(&w.unembedding);
        feed(&w.output_bias);
        format!("{:x}", h.finalize())
    }

    /// JSON checkpoint: `{format, version, config, weights}` with weights as
    /// `{shape, data}` objects. Floats round-trip exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            weights: self.weights.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!("unsupported model file {} v{}", f.format, f.version)));
        }
        Self::from_parts(f.config, f.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// View without adapters.
    pub fn view(&self) -> ModelView<'_> {
        ModelView { model: self, adapters: None }
    }

    /// View that applies `adapters` on top of the frozen base weights.
    pub fn attach<'a>(&'a self, adapters: &'a AdapterSet) -> Result<ModelView<'a>> {
        adapters.validate(&self.config)?;
        Ok(ModelView { model: self, adapters: Some(adapters) })
    }
}
