//! The naturalness regressor: a small transformer encoder over log-Mel frames,
//! masked mean pooling, a learned locale embedding, and a linear head.
//!
//! ```text
//! frames --strided proj--> LN --+pos--> [pre-norm MHA + GELU FFN] x N --> LN --> e_1..e_T
//! e* = mean over valid e_t
//! y_hat = M . [e*, E[locale]] + b
//! ```

mod checkpoint;
mod layers;
mod network;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use layers::{LayerNorm, Linear};
pub use network::{
    backward, backward_into, batch_loss, encode, loss, mean_pool, predict, Encoded, ForwardTrace,
    Prediction,
};

/// Wildcard locale, used for a fraction of training items and for any locale
/// not in the vocabulary.
pub const ANY_LOC: &str = "ANY-LOC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub subsample_stride: usize,
    pub num_blocks: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub locale_emb_dim: usize,
    pub n_mels: usize,
    pub t_max: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                subsample_stride: 4,
                num_blocks: 2,
                d_model: 128,
                num_heads: 4,
                ffn_mult: 4,
            },
            locale_emb_dim: 64,
            n_mels: 80,
            t_max: 512,
        }
    }

    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig {
                subsample_stride: 4,
                num_blocks: 4,
                d_model: 256,
                num_heads: 4,
                ffn_mult: 4,
            },
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let dims = [
            e.subsample_stride,
            e.num_blocks,
            e.d_model,
            e.num_heads,
            e.ffn_mult,
            self.locale_emb_dim,
            self.n_mels,
            self.t_max,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if e.d_model % e.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                e.d_model, e.num_heads
            )));
        }
        Ok(())
    }

    /// Encoder output length: `ceil(t_max / stride)`.
    pub fn encoded_len(&self) -> usize {
        self.t_max.div_ceil(self.encoder.subsample_stride)
    }

    pub fn head_dim(&self) -> usize {
        self.encoder.d_model / self.encoder.num_heads
    }
}

/// Ordered locale tags; index 0 is always [`ANY_LOC`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocaleVocab {
    tags: Vec<String>,
}

impl LocaleVocab {
    pub fn new<I, S>(locales: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tags = vec![ANY_LOC.to_string()];
        for l in locales {
            let l = l.into();
            if !tags.contains(&l) {
                tags.push(l);
            }
        }
        Self { tags }
    }

    /// Index of `locale`, falling back to [`ANY_LOC`] for unknown tags.
    pub fn index(&self, locale: &str) -> usize {
        self.tags.iter().position(|t| t == locale).unwrap_or(0)
    }

    pub fn contains(&self, locale: &str) -> bool {
        self.tags.iter().any(|t| t == locale)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// All trainable weights. The same type doubles as a gradient / moment
/// accumulator via [`ModelParameters::zeros_like`].
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub vocab: LocaleVocab,
    pub input_proj: Linear,
    pub input_norm: LayerNorm,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    /// `|vocab| x locale_emb_dim`
    pub locale_embedding: Array2<f64>,
    /// `d_model + locale_emb_dim`; the first `d_model` entries weight the pooled encoding.
    pub head_weight: Array1<f64>,
    pub head_bias: f64,
    generation: u64,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.tensors().iter().zip(other.tensors()).all(|(a, b)| a.data == b.data)
    }
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

impl ModelParameters {
    /// Random initialization: fan-in scaled uniform weights, zero biases, unit
    /// LayerNorm gains, head bias 0.5. The head weights use a 0.1 gain so an
    /// untrained model predicts close to mid-scale.
    pub fn init(config: &ModelConfig, vocab: &LocaleVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = &config.encoder;
        let d = e.d_model;
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let fan_in = |n: usize| 1.0 / (n as f64).sqrt();
        let linear = |w: Array2<f64>| Linear {
            b: Array1::zeros(w.ncols()),
            w,
        };
        let in_dim = e.subsample_stride * config.n_mels;
        let input_proj = linear(uniform(in_dim, d, fan_in(in_dim)));
        let mut blocks = Vec::with_capacity(e.num_blocks);
        for _ in 0..e.num_blocks {
            let qkv = linear(uniform(d, 3 * d, fan_in(d)));
            let attn_out = linear(uniform(d, d, fan_in(d)));
            let ff1 = linear(uniform(d, d * e.ffn_mult, fan_in(d)));
            let ff2 = linear(uniform(d * e.ffn_mult, d, fan_in(d * e.ffn_mult)));
            blocks.push(Block {
                norm1: LayerNorm::new(d),
                qkv,
                attn_out,
                norm2: LayerNorm::new(d),
                ff1,
                ff2,
            });
        }
        let emb = config.locale_emb_dim;
        let locale_embedding = uniform(vocab.len(), emb, fan_in(emb));
        let head_weight = uniform(1, d + emb, 0.1 * fan_in(d + emb))
            .into_shape_with_order(d + emb)
            .expect("row vector");
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            input_proj,
            input_norm: LayerNorm::new(d),
            blocks,
            final_norm: LayerNorm::new(d),
            locale_embedding,
            head_weight,
            head_bias: 0.5,
            generation: next_generation(),
        })
    }

    /// Same shapes, all zeros (LayerNorm gains included).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Identifies the current weight values; changes on every mutable access
    /// through [`Self::tensors_mut`] or [`Self::touch`].
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks the parameters as modified, invalidating earlier forward traces.
    pub fn touch(&mut self) {
        self.generation = next_generation();
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out: Vec<TensorRef<'_>> = Vec::new();
        fn lin<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, l: &'a Linear) {
            out.push(TensorRef {
                name: format!("{name}.w"),
                shape: l.w.shape().to_vec(),
                data: l.w.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: format!("{name}.b"),
                shape: l.b.shape().to_vec(),
                data: l.b.as_slice().expect("standard layout"),
            });
        }
        fn ln<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, l: &'a LayerNorm) {
            out.push(TensorRef {
                name: format!("{name}.gamma"),
                shape: l.gamma.shape().to_vec(),
                data: l.gamma.as_slice().expect("standard layout"),
            });
            out.push(TensorRef {
                name: format!("{name}.beta"),
                shape: l.beta.shape().to_vec(),
                data: l.beta.as_slice().expect("standard layout"),
            });
        }
        fn arr<'a, D: ndarray::Dimension>(
            out: &mut Vec<TensorRef<'a>>,
            name: &str,
            a: &'a ndarray::Array<f64, D>,
        ) {
            out.push(TensorRef {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            });
        }
        fn scalar<'a>(out: &mut Vec<TensorRef<'a>>, name: &str, v: &'a f64) {
            out.push(TensorRef {
                name: name.to_string(),
                shape: vec![],
                data: std::slice::from_ref(v),
            });
        }
        lin(&mut out, "input_proj", &self.input_proj);
        ln(&mut out, "input_norm", &self.input_norm);
        for (i, b) in self.blocks.iter().enumerate() {
            ln(&mut out, &format!("blocks.{i}.norm1"), &b.norm1);
            lin(&mut out, &format!("blocks.{i}.qkv"), &b.qkv);
            lin(&mut out, &format!("blocks.{i}.attn_out"), &b.attn_out);
            ln(&mut out, &format!("blocks.{i}.norm2"), &b.norm2);
            lin(&mut out, &format!("blocks.{i}.ff1"), &b.ff1);
            lin(&mut out, &format!("blocks.{i}.ff2"), &b.ff2);
        }
        ln(&mut out, "final_norm", &self.final_norm);
        arr(&mut out, "locale_embedding", &self.locale_embedding);
        arr(&mut out, "head_weight", &self.head_weight);
        scalar(&mut out, "head_bias", &self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        self.generation = next_generation();
        let mut out: Vec<TensorMut<'_>> = Vec::new();
        fn lin<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, l: &'a mut Linear) {
            out.push(TensorMut {
                name: format!("{name}.w"),
                shape: l.w.shape().to_vec(),
                data: l.w.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorMut {
                name: format!("{name}.b"),
                shape: l.b.shape().to_vec(),
                data: l.b.as_slice_mut().expect("standard layout"),
            });
        }
        fn ln<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, l: &'a mut LayerNorm) {
            out.push(TensorMut {
                name: format!("{name}.gamma"),
                shape: l.gamma.shape().to_vec(),
                data: l.gamma.as_slice_mut().expect("standard layout"),
            });
            out.push(TensorMut {
                name: format!("{name}.beta"),
                shape: l.beta.shape().to_vec(),
                data: l.beta.as_slice_mut().expect("standard layout"),
            });
        }
        fn arr<'a, D: ndarray::Dimension>(
            out: &mut Vec<TensorMut<'a>>,
            name: &str,
            a: &'a mut ndarray::Array<f64, D>,
        ) {
            out.push(TensorMut {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.as_slice_mut().expect("standard layout"),
            });
        }
        fn scalar<'a>(out: &mut Vec<TensorMut<'a>>, name: &str, v: &'a mut f64) {
            out.push(TensorMut {
                name: name.to_string(),
                shape: vec![],
                data: std::slice::from_mut(v),
            });
        }
        let Self {
            input_proj,
            input_norm,
            blocks,
            final_norm,
            locale_embedding,
            head_weight,
            head_bias,
            ..
        } = self;
        lin(&mut out, "input_proj", input_proj);
        ln(&mut out, "input_norm", input_norm);
        for (i, b) in blocks.iter_mut().enumerate() {
            ln(&mut out, &format!("blocks.{i}.norm1"), &mut b.norm1);
            lin(&mut out, &format!("blocks.{i}.qkv"), &mut b.qkv);
            lin(&mut out, &format!("blocks.{i}.attn_out"), &mut b.attn_out);
            ln(&mut out, &format!("blocks.{i}.norm2"), &mut b.norm2);
            lin(&mut out, &format!("blocks.{i}.ff1"), &mut b.ff1);
            lin(&mut out, &format!("blocks.{i}.ff2"), &mut b.ff2);
        }
        ln(&mut out, "final_norm", final_norm);
        arr(&mut out, "locale_embedding", locale_embedding);
        arr(&mut out, "head_weight", head_weight);
        scalar(&mut out, "head_bias", head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Reads one coordinate by flat index over [`Self::tensors`] order.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.data.len() {
                return t.data[idx];
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.data.len() {
                t.data[idx] = value;
                return;
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range")
    }

    /// Name of the tensor holding flat index `idx`.
    pub fn flat_name(&self, mut idx: usize) -> String {
        for t in self.tensors() {
            if idx < t.data.len() {
                return t.name;
            }
            idx -= t.data.len();
        }
        panic!("flat parameter index out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Sum of squares over every coordinate.
    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
