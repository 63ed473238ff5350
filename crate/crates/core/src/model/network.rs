use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::layers::{gelu, gelu_grad, positions, softmax_rows, LayerNormCache};
use super::{Block, ModelParameters};
use crate::dsp::LogMelSpectrogram;
use crate::error::{Error, Result};

struct BlockCache {
    input: Array2<f64>,
    norm1: LayerNormCache,
    normed1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: LayerNormCache,
    normed2: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
}

/// Activations retained from a forward pass for the matching backward pass.
pub struct ForwardTrace {
    generation: u64,
    chunks: Array2<f64>,
    input_norm: LayerNormCache,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    /// Per-position encoder outputs `e_1..e_n` for the valid positions.
    pub embeddings: Array2<f64>,
    /// Pooled encoding `e*`.
    pub pooled: Array1<f64>,
    pub locale_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Model-scale score, nominally in [0, 1], never clamped.
    pub y_hat: f64,
    /// `1 + 4 * y_hat`
    pub mos_scale: f64,
}

impl Prediction {
    pub fn new(y_hat: f64) -> Self {
        Self {
            y_hat,
            mos_scale: 1.0 + 4.0 * y_hat,
        }
    }
}

/// Encoder output at full length `ceil(t_max / stride)`; masked rows are zero.
pub struct Encoded {
    pub embeddings: Array2<f64>,
    pub mask: Vec<bool>,
}

fn check_input(p: &ModelParameters, s: &LogMelSpectrogram) -> Result<usize> {
    let cfg = &p.config;
    if s.t_max() != cfg.t_max || s.n_mels != cfg.n_mels {
        return Err(Error::Shape(format!(
            "spectrogram is {} x {}, model expects {} x {}",
            s.t_max(),
            s.n_mels,
            cfg.t_max,
            cfg.n_mels
        )));
    }
    if s.frames.len() != s.t_max() * s.n_mels {
        return Err(Error::Shape("spectrogram data length".into()));
    }
    let valid = s.valid_frames();
    if valid == 0 {
        return Err(Error::Empty("spectrogram has no valid frames".into()));
    }
    Ok(valid)
}

/// Groups valid frames into `stride`-frame chunks (one row per encoder
/// position). Frames past the valid prefix contribute zeros.
fn chunk_frames(s: &LogMelSpectrogram, valid: usize, stride: usize) -> Array2<f64> {
    let n_pos = valid.div_ceil(stride);
    let width = stride * s.n_mels;
    let mut out = Array2::zeros((n_pos, width));
    for t in 0..valid {
        let (pos, off) = (t / stride, (t % stride) * s.n_mels);
        for (dst, src) in out
            .slice_mut(s![pos, off..off + s.n_mels])
            .iter_mut()
            .zip(s.row(t))
        {
            *dst = *src as f64;
        }
    }
    out
}

fn block_forward(block: &Block, h: Array2<f64>, n_heads: usize) -> (Array2<f64>, BlockCache) {
    let n = h.nrows();
    let d = h.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (normed1, norm1) = block.norm1.forward(&h.view());
    let qkv = block.qkv.forward(&normed1.view());
    let mut attn = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let q = qkv.slice(s![.., head * dh..(head + 1) * dh]);
        let k = qkv.slice(s![.., d + head * dh..d + (head + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + head * dh..2 * d + (head + 1) * dh]);
        let mut scores = q.dot(&k.t());
        scores *= scale;
        softmax_rows(&mut scores);
        attn.slice_mut(s![.., head * dh..(head + 1) * dh])
            .assign(&scores.dot(&v));
        probs.push(scores);
    }
    let mut mid = block.attn_out.forward(&attn.view());
    mid += &h;
    let (normed2, norm2) = block.norm2.forward(&mid.view());
    let ff_pre = block.ff1.forward(&normed2.view());
    let ff_act = ff_pre.mapv(gelu);
    let mut out = block.ff2.forward(&ff_act.view());
    out += &mid;
    (
        out,
        BlockCache {
            input: h,
            norm1,
            normed1,
            qkv,
            probs,
            attn,
            norm2,
            normed2,
            ff_pre,
            ff_act,
        },
    )
}

fn block_backward(
    block: &Block,
    cache: &BlockCache,
    d_out: Array2<f64>,
    grad: &mut Block,
    n_heads: usize,
) -> Array2<f64> {
    let d = cache.input.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward half
    let d_act = block
        .ff2
        .backward(&cache.ff_act.view(), &d_out.view(), &mut grad.ff2);
    let d_pre = d_act * &cache.ff_pre.mapv(gelu_grad);
    let d_normed2 = block
        .ff1
        .backward(&cache.normed2.view(), &d_pre.view(), &mut grad.ff1);
    let mut d_mid = block
        .norm2
        .backward(&cache.norm2, &d_normed2.view(), &mut grad.norm2);
    d_mid += &d_out;

    // attention half
    let d_attn = block
        .attn_out
        .backward(&cache.attn.view(), &d_mid.view(), &mut grad.attn_out);
    let mut d_qkv = Array2::zeros(cache.qkv.raw_dim());
    for head in 0..n_heads {
        let qs = s![.., head * dh..(head + 1) * dh];
        let ks = s![.., d + head * dh..d + (head + 1) * dh];
        let vs = s![.., 2 * d + head * dh..2 * d + (head + 1) * dh];
        let q = cache.qkv.slice(qs);
        let k = cache.qkv.slice(ks);
        let v = cache.qkv.slice(vs);
        let p = &cache.probs[head];
        let d_head = d_attn.slice(s![.., head * dh..(head + 1) * dh]);
        let d_p = d_head.dot(&v.t());
        d_qkv.slice_mut(vs).assign(&p.t().dot(&d_head));
        // softmax backward: dS = P * (dP - rowsum(dP * P))
        let mut d_s = &d_p * p;
        let row_dot = d_s.sum_axis(Axis(1));
        d_s -= &(p * &row_dot.insert_axis(Axis(1)));
        d_s *= scale;
        d_qkv.slice_mut(qs).assign(&d_s.dot(&k));
        d_qkv.slice_mut(ks).assign(&d_s.t().dot(&q));
    }
    let d_normed1 = block
        .qkv
        .backward(&cache.normed1.view(), &d_qkv.view(), &mut grad.qkv);
    let mut d_in = block
        .norm1
        .backward(&cache.norm1, &d_normed1.view(), &mut grad.norm1);
    d_in += &d_mid;
    d_in
}

struct EncoderPass {
    chunks: Array2<f64>,
    input_norm: LayerNormCache,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    embeddings: Array2<f64>,
}

/// Runs the encoder over the valid positions only. Keys never include padded
/// positions and padded queries do not feed pooling, so skipping them is exact.
fn encoder_forward(p: &ModelParameters, s: &LogMelSpectrogram) -> Result<EncoderPass> {
    let valid = check_input(p, s)?;
    let cfg = &p.config.encoder;
    let chunks = chunk_frames(s, valid, cfg.subsample_stride);
    let projected = p.input_proj.forward(&chunks.view());
    let (mut h, input_norm) = p.input_norm.forward(&projected.view());
    h += &positions(h.nrows(), cfg.d_model);
    let mut caches = Vec::with_capacity(p.blocks.len());
    for block in &p.blocks {
        let (next, cache) = block_forward(block, h, cfg.num_heads);
        caches.push(cache);
        h = next;
    }
    let (embeddings, final_norm) = p.final_norm.forward(&h.view());
    Ok(EncoderPass {
        chunks,
        input_norm,
        blocks: caches,
        final_norm,
        embeddings,
    })
}

/// Per-position embeddings (`ceil(t_max / stride) x d_model`) and the
/// downsampled mask. A position is valid when its first frame is valid.
pub fn encode(p: &ModelParameters, s: &LogMelSpectrogram) -> Result<Encoded> {
    let pass = encoder_forward(p, s)?;
    let n_out = p.config.encoded_len();
    let n_valid = pass.embeddings.nrows();
    let mut embeddings = Array2::zeros((n_out, p.config.encoder.d_model));
    embeddings.slice_mut(s![..n_valid, ..]).assign(&pass.embeddings);
    Ok(Encoded {
        embeddings,
        mask: (0..n_out).map(|i| i < n_valid).collect(),
    })
}

/// Mean of the unmasked rows, summed in row order.
pub fn mean_pool(e: &ArrayView2<f64>, mask: &[bool]) -> Result<Array1<f64>> {
    if mask.len() != e.nrows() {
        return Err(Error::Shape(format!(
            "mask of length {} for {} positions",
            mask.len(),
            e.nrows()
        )));
    }
    let mut sum = Array1::zeros(e.ncols());
    let mut count = 0usize;
    for (row, keep) in e.rows().into_iter().zip(mask) {
        if *keep {
            sum += &row;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("cannot pool a fully masked sequence".into()));
    }
    Ok(sum / count as f64)
}

/// Scores one utterance: `y_hat = M . [e*, E[locale]] + b`. Unknown locales use
/// the wildcard embedding.
pub fn predict(
    p: &ModelParameters,
    s: &LogMelSpectrogram,
    locale: &str,
) -> Result<(Prediction, ForwardTrace)> {
    let pass = encoder_forward(p, s)?;
    let mask = vec![true; pass.embeddings.nrows()];
    let pooled = mean_pool(&pass.embeddings.view(), &mask)?;
    let locale_index = p.vocab.index(locale);
    let d = p.config.encoder.d_model;
    let y_hat = p.head_weight.slice(s![..d]).dot(&pooled)
        + p.head_weight
            .slice(s![d..])
            .dot(&p.locale_embedding.row(locale_index))
        + p.head_bias;
    let trace = ForwardTrace {
        generation: p.generation(),
        chunks: pass.chunks,
        input_norm: pass.input_norm,
        blocks: pass.blocks,
        final_norm: pass.final_norm,
        embeddings: pass.embeddings,
        pooled,
        locale_index,
    };
    Ok((Prediction::new(y_hat), trace))
}

/// Squared error on the rescaled target.
pub fn loss(y_hat: f64, y: f64) -> f64 {
    (y_hat - y) * (y_hat - y)
}

/// Mean squared error over `(y_hat, y)` pairs.
pub fn batch_loss(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|(a, b)| loss(*a, *b)).sum::<f64>() / pairs.len() as f64
}

/// Accumulates `dL/dy_hat`-scaled gradients of every parameter into `grad`.
pub fn backward_into(
    p: &ModelParameters,
    trace: &ForwardTrace,
    dl_dy: f64,
    grad: &mut ModelParameters,
) -> Result<()> {
    if trace.generation != p.generation() {
        return Err(Error::StaleTrace(
            "parameters changed since the forward pass".into(),
        ));
    }
    let d = p.config.encoder.d_model;
    let n_heads = p.config.encoder.num_heads;
    let loc = trace.locale_index;

    grad.head_bias += dl_dy;
    grad.head_weight
        .slice_mut(s![..d])
        .scaled_add(dl_dy, &trace.pooled);
    grad.head_weight
        .slice_mut(s![d..])
        .scaled_add(dl_dy, &p.locale_embedding.row(loc));
    grad.locale_embedding
        .row_mut(loc)
        .scaled_add(dl_dy, &p.head_weight.slice(s![d..]));

    let n = trace.embeddings.nrows();
    let d_pooled = p.head_weight.slice(s![..d]).mapv(|m| m * dl_dy / n as f64);
    let d_emb = d_pooled
        .insert_axis(Axis(0))
        .broadcast((n, d))
        .expect("broadcast pooled gradient")
        .to_owned();
    let mut dh = p
        .final_norm
        .backward(&trace.final_norm, &d_emb.view(), &mut grad.final_norm);
    for ((block, cache), g) in p
        .blocks
        .iter()
        .zip(&trace.blocks)
        .zip(grad.blocks.iter_mut())
        .rev()
    {
        dh = block_backward(block, cache, dh, g, n_heads);
    }
    // positions are constant, so dh flows straight into the input LayerNorm
    let d_proj = p
        .input_norm
        .backward(&trace.input_norm, &dh.view(), &mut grad.input_norm);
    p.input_proj
        .backward(&trace.chunks.view(), &d_proj.view(), &mut grad.input_proj);
    grad.touch();
    Ok(())
}

/// Gradients of `y_hat` scaled by `dl_dy`, in a fresh accumulator.
pub fn backward(p: &ModelParameters, trace: &ForwardTrace, dl_dy: f64) -> Result<ModelParameters> {
    let mut grad = p.zeros_like();
    backward_into(p, trace, dl_dy, &mut grad)?;
    Ok(grad)
}
