//! Transformer encoder/decoder pair over the tape engine.
//!
//! The encoder produces per-token hidden states and a sentence representation
//! taken from the [CLS] slot of the last layer. The decoder mirrors the
//! encoder config at half the depth (min 1) and reconstructs token sequences
//! auto-regressively with the sentence representation as its step-0 input
//! embedding.

use std::cell::Cell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaptError};
use crate::params::{Binding, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    /// Desk-scale default, sized for CPU runs.
    pub fn desk() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.1,
        }
    }

    /// The full-scale configuration: 300-dim, 6 layers, 6 heads.
    pub fn paper() -> Self {
        EncoderConfig {
            d_model: 300,
            n_layers: 6,
            n_heads: 6,
            d_ff: 1200,
            max_len: 128,
            dropout_rate: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ScaptError::Config("encoder dims must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ScaptError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(ScaptError::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn decoder_layers(&self) -> usize {
        (self.n_layers / 2).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which heads to allocate parameters for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSet {
    /// Decoder + reconstruction/masked-prediction heads (pre-training).
    pub pretrain: bool,
    /// Three-way aspect classifier (fine-tuning).
    pub classifier: bool,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data }
}

fn xavier_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform_init(rng, vec![rows, cols], bound)
}

fn block_params(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_ff: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{name}"), xavier_init(rng, d, d));
        params.insert(format!("{prefix}.b{}", &name[1..]), Tensor::zeros(vec![d]));
    }
    params.insert(format!("{prefix}.ff1.w"), xavier_init(rng, d, d_ff));
    params.insert(format!("{prefix}.ff1.b"), Tensor::zeros(vec![d_ff]));
    params.insert(format!("{prefix}.ff2.w"), xavier_init(rng, d_ff, d));
    params.insert(format!("{prefix}.ff2.b"), Tensor::zeros(vec![d]));
    for ln in ["ln1", "ln2"] {
        params.insert(
            format!("{prefix}.{ln}.g"),
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        );
        params.insert(format!("{prefix}.{ln}.b"), Tensor::zeros(vec![d]));
    }
}

/// Fresh parameters: uniform(−0.1, 0.1) embeddings, Xavier linear maps.
pub fn init_params(
    config: &EncoderConfig,
    vocab_size: usize,
    heads: HeadSet,
    rng: &mut ChaCha8Rng,
) -> Result<ParamSet> {
    config.validate()?;
    let d = config.d_model;
    let mut params = ParamSet::new();
    params.insert("emb.tok", uniform_init(rng, vec![vocab_size, d], 0.1));
    for layer in 0..config.n_layers {
        block_params(&mut params, rng, &format!("enc.{layer}"), d, config.d_ff);
    }
    // sentiment perceptron, shared by pre-training and fine-tuning
    params.insert("w_s", xavier_init(rng, d, d));
    if heads.pretrain {
        for layer in 0..config.decoder_layers() {
            block_params(&mut params, rng, &format!("dec.{layer}"), d, config.d_ff);
        }
        params.insert("dec.out.w", xavier_init(rng, d, vocab_size));
        params.insert("dec.out.b", Tensor::zeros(vec![vocab_size]));
        params.insert("map.w_o", xavier_init(rng, d, vocab_size));
    }
    if heads.classifier {
        add_classifier_head(&mut params, config, rng);
    }
    Ok(params)
}

pub fn add_classifier_head(params: &mut ParamSet, config: &EncoderConfig, rng: &mut ChaCha8Rng) {
    params.insert("clf.w_a", xavier_init(rng, 2 * config.d_model, 3));
    params.insert("clf.b", Tensor::zeros(vec![3]));
}

/// Checks a loaded checkpoint against the config it is about to run under.
pub fn check_compatible(params: &ParamSet, config: &EncoderConfig) -> Result<()> {
    let emb = params.get("emb.tok").map_err(|_| {
        ScaptError::CheckpointMismatch("checkpoint has no token embedding".into())
    })?;
    if emb.cols() != config.d_model {
        return Err(ScaptError::CheckpointMismatch(format!(
            "embedding width {} vs configured d_model {}",
            emb.cols(),
            config.d_model
        )));
    }
    for layer in 0..config.n_layers {
        if !params.contains(&format!("enc.{layer}.wq")) {
            return Err(ScaptError::CheckpointMismatch(format!(
                "checkpoint lacks encoder layer {layer} required by config"
            )));
        }
    }
    if params.contains(&format!("enc.{}.wq", config.n_layers)) {
        return Err(ScaptError::CheckpointMismatch(format!(
            "checkpoint has more encoder layers than the configured {}",
            config.n_layers
        )));
    }
    let ff = params.get("enc.0.ff1.w")?;
    if ff.cols() != config.d_ff {
        return Err(ScaptError::CheckpointMismatch(format!(
            "feed-forward width {} vs configured d_ff {}",
            ff.cols(),
            config.d_ff
        )));
    }
    Ok(())
}

/// Sinusoidal positional encodings for positions [0, len).
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor {
        shape: vec![len, d],
        data,
    }
}

/// Hidden states and sentence representation for one formatted input.
pub struct EncodedSentence {
    /// L×d last-layer hidden states, row 0 is the [CLS] slot.
    pub hidden: Var,
    /// 1×d sentence representation, identical to `hidden` row 0.
    pub sentence_rep: Var,
}

/// Dropout: None in evaluation and gradient tests, Some(rng) while training.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn apply_dropout(
    tape: &mut Tape,
    x: Var,
    ctx: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let Some(ctx) = ctx else { return Ok(x) };
    if ctx.rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - ctx.rate;
    let shape = tape.value(x).shape.clone();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if ctx.rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(Tensor { shape, data: mask });
    tape.mul(x, m)
}

struct Block<'a> {
    prefix: String,
    binding: &'a Binding,
    config: &'a EncoderConfig,
}

impl<'a> Block<'a> {
    fn projected(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = self.binding.var(&format!("{}.{w}", self.prefix))?;
        let bv = self.binding.var(&format!("{}.{b}", self.prefix))?;
        let p = tape.matmul(x, wv)?;
        tape.add_bias(p, bv)
    }

    /// One post-norm Transformer block. `score_mask` is added to every
    /// attention score row (additive key mask, causal mask, or both).
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        score_mask: &Tensor,
        dropout: &mut Option<&mut DropoutCtx<'_>>,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let hd = self.config.head_dim();
        let q = self.projected(tape, x, "wq", "bq")?;
        let k = self.projected(tape, x, "wk", "bk")?;
        let v = self.projected(tape, x, "wv", "bv")?;
        let mask = tape.constant(score_mask.clone());
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let scaled = tape.scale(raw, 1.0 / (hd as f64).sqrt())?;
            let masked = tape.add(scaled, mask)?;
            let attn = tape.softmax_rows(masked)?;
            let attn = apply_dropout(tape, attn, dropout)?;
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat_cols(&head_outputs)?;
        let o = self.projected(tape, ctx, "wo", "bo")?;
        let o = apply_dropout(tape, o, dropout)?;
        let res1 = tape.add(x, o)?;
        let ln1g = self.binding.var(&format!("{}.ln1.g", self.prefix))?;
        let ln1b = self.binding.var(&format!("{}.ln1.b", self.prefix))?;
        let x1 = tape.layer_norm(res1, ln1g, ln1b, LN_EPS)?;
        let h = self.projected(tape, x1, "ff1.w", "ff1.b")?;
        let h = tape.relu(h)?;
        let f = self.projected(tape, h, "ff2.w", "ff2.b")?;
        let f = apply_dropout(tape, f, dropout)?;
        let res2 = tape.add(x1, f)?;
        let ln2g = self.binding.var(&format!("{}.ln2.g", self.prefix))?;
        let ln2b = self.binding.var(&format!("{}.ln2.b", self.prefix))?;
        tape.layer_norm(res2, ln2g, ln2b, LN_EPS)
    }
}

/// Counts encoder invocations; fine-tuning asserts one pass per sentence.
#[derive(Debug, Default)]
pub struct EncodeCounter(Cell<u64>);

impl EncodeCounter {
    pub fn count(&self) -> u64 {
        self.0.get()
    }

    fn bump(&self) {
        self.0.set(self.0.get() + 1);
    }
}

/// Encodes one formatted id sequence. `attention_mask[i]` is true for real
/// tokens, false for padding; padded positions are never attend-able.
pub fn encode(
    tape: &mut Tape,
    binding: &Binding,
    config: &EncoderConfig,
    ids: &[usize],
    attention_mask: &[bool],
    mut dropout: Option<&mut DropoutCtx<'_>>,
    counter: Option<&EncodeCounter>,
) -> Result<EncodedSentence> {
    if ids.len() != attention_mask.len() {
        return Err(ScaptError::ShapeMismatch(
            "encode: ids and attention_mask lengths differ".into(),
        ));
    }
    if ids.len() > config.max_len {
        return Err(ScaptError::Contract(format!(
            "encode: input length {} exceeds max_len {}",
            ids.len(),
            config.max_len
        )));
    }
    if let Some(c) = counter {
        c.bump();
    }
    let len = ids.len();
    let d = config.d_model;
    let emb = binding.var("emb.tok")?;
    let mut x = tape.gather_rows(emb, ids)?;
    let pos = tape.constant(positional_encoding(len, d));
    x = tape.add(x, pos)?;
    x = apply_dropout(tape, x, &mut dropout)?;
    // additive key mask, broadcast over query rows
    let mut mask = vec![0.0; len * len];
    for row in 0..len {
        for col in 0..len {
            if !attention_mask[col] {
                mask[row * len + col] = MASK_NEG;
            }
        }
    }
    let score_mask = Tensor {
        shape: vec![len, len],
        data: mask,
    };
    for layer in 0..config.n_layers {
        let block = Block {
            prefix: format!("enc.{layer}"),
            binding,
            config,
        };
        x = block.forward(tape, x, &score_mask, &mut dropout)?;
    }
    let sentence_rep = tape.gather_rows(x, &[0])?;
    Ok(EncodedSentence {
        hidden: x,
        sentence_rep,
    })
}

/// Teacher-forced decoder: step 0 consumes the sentence representation as its
/// input embedding, steps t ≥ 1 the embedding of target[t−1]; causal masking
/// throughout. Returns T×V logits, one row per target position.
pub fn decode_autoregressive(
    tape: &mut Tape,
    binding: &Binding,
    config: &EncoderConfig,
    sentence_rep: Var,
    target_ids: &[usize],
    mut dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    if target_ids.is_empty() {
        return Err(ScaptError::Contract(
            "decode_autoregressive: empty target".into(),
        ));
    }
    let t = target_ids.len();
    let d = config.d_model;
    let emb = binding.var("emb.tok")?;
    let mut parts = vec![sentence_rep];
    if t > 1 {
        parts.push(tape.gather_rows(emb, &target_ids[..t - 1])?);
    }
    let mut x = tape.concat_rows(&parts)?;
    let pos = tape.constant(positional_encoding(t, d));
    x = tape.add(x, pos)?;
    x = apply_dropout(tape, x, &mut dropout)?;
    let mut mask = vec![0.0; t * t];
    for row in 0..t {
        for col in (row + 1)..t {
            mask[row * t + col] = MASK_NEG;
        }
    }
    let causal = Tensor {
        shape: vec![t, t],
        data: mask,
    };
    for layer in 0..config.decoder_layers() {
        let block = Block {
            prefix: format!("dec.{layer}"),
            binding,
            config,
        };
        x = block.forward(tape, x, &causal, &mut dropout)?;
    }
    let w = binding.var("dec.out.w")?;
    let b = binding.var("dec.out.b")?;
    let logits = tape.matmul(x, w)?;
    tape.add_bias(logits, b)
}
