//! The three pre-training objectives and their joint combination:
//! supervised contrastive learning over sentiment representations, review
//! reconstruction through the decoder, and masked aspect prediction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSentence, SentimentLabel};
use crate::error::{Result, ScaptError};
use crate::model::{decode_autoregressive, encode, DropoutCtx, EncoderConfig};
use crate::params::Binding;
use crate::tape::{Tape, Var};
use crate::vocab::{self, Vocab, CLS, NUM_RESERVED, SEP};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Softmax temperature of the contrastive loss.
    pub tau: f64,
    /// Weight of the reconstruction term.
    pub alpha: f64,
    /// Weight of the masked-prediction term.
    pub beta: f64,
    /// Minimum fraction of tokens that must be masked per sentence.
    pub mask_floor: f64,
    /// Normalize sentiment representations before taking dot products.
    /// Off by default: similarity is the raw dot product.
    pub normalize_similarity: bool,
    /// Feed the corrupted input to all three objectives (single encoder
    /// pass). When false, the contrastive and reconstruction terms see a
    /// second, uncorrupted pass.
    pub corrupted_input_for_all: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tau: 0.07,
            alpha: 1.0,
            beta: 1.0,
            mask_floor: 0.15,
            normalize_similarity: false,
            corrupted_input_for_all: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(ScaptError::Config("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_floor) {
            return Err(ScaptError::Config("mask_floor must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Corrupted token sequence with recoverable originals.
#[derive(Debug, Clone)]
pub struct MaskedInput {
    /// Vocab ids after corruption, sentence-token indexing (no [CLS]/[SEP]).
    pub corrupted_ids: Vec<usize>,
    /// Prediction-target positions, sorted ascending.
    pub mask_positions: Vec<usize>,
    /// Uncorrupted vocab ids.
    pub original_ids: Vec<usize>,
}

fn corrupt_id(original: usize, vocab_size: usize, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    if u < 0.8 {
        vocab::MASK
    } else if u < 0.9 && vocab_size > NUM_RESERVED {
        rng.gen_range(NUM_RESERVED..vocab_size)
    } else {
        original
    }
}

/// Two-step masking: every aspect-span token is corrupted 80/10/10 and becomes
/// a prediction target regardless of the branch taken; if targets cover less
/// than `mask_floor` of the sentence, extra non-aspect positions are drawn
/// uniformly without replacement and corrupted the same way.
pub fn mask_review(
    sentence: &LabeledSentence,
    vocab: &Vocab,
    mask_floor: f64,
    rng: &mut ChaCha8Rng,
) -> MaskedInput {
    let original_ids = vocab.ids(&sentence.tokens);
    let mut corrupted_ids = original_ids.clone();
    let n = original_ids.len();
    let mut is_target = vec![false; n];
    for span in &sentence.aspect_spans {
        for p in span.indices() {
            if p < n && !is_target[p] {
                is_target[p] = true;
                corrupted_ids[p] = corrupt_id(original_ids[p], vocab.len(), rng);
            }
        }
    }
    let required = (mask_floor * n as f64).ceil() as usize;
    let mut masked_count = is_target.iter().filter(|&&t| t).count();
    if masked_count < required {
        let mut rest: Vec<usize> = (0..n).filter(|&p| !is_target[p]).collect();
        // Fisher-Yates for uniform sampling without replacement
        for i in (1..rest.len()).rev() {
            let j = rng.gen_range(0..=i);
            rest.swap(i, j);
        }
        for p in rest {
            if masked_count >= required {
                break;
            }
            is_target[p] = true;
            corrupted_ids[p] = corrupt_id(original_ids[p], vocab.len(), rng);
            masked_count += 1;
        }
    }
    let mask_positions: Vec<usize> = (0..n).filter(|&p| is_target[p]).collect();
    MaskedInput {
        corrupted_ids,
        mask_positions,
        original_ids,
    }
}

/// s = W_s·h̄, a pure linear map with no bias and no nonlinearity.
pub fn sentiment_projection(tape: &mut Tape, hbar: Var, w_s: Var) -> Result<Var> {
    tape.matmul(hbar, w_s)
}

/// Contrastive loss over a batch of 1×d sentiment representations.
pub fn supervised_contrastive_loss(
    tape: &mut Tape,
    reps: &[Var],
    labels: &[SentimentLabel],
    tau: f64,
    normalize: bool,
) -> Result<Var> {
    if reps.len() != labels.len() {
        return Err(ScaptError::ShapeMismatch(
            "contrastive loss: reps vs labels length".into(),
        ));
    }
    let mut s = tape.concat_rows(reps)?;
    if normalize {
        s = tape.normalize_rows(s)?;
    }
    let st = tape.transpose(s)?;
    let sim = tape.matmul(s, st)?;
    let label_ids: Vec<usize> = labels
        .iter()
        .map(|l| match l {
            SentimentLabel::Positive => 0,
            SentimentLabel::Negative => 1,
        })
        .collect();
    tape.sup_contrastive(sim, &label_ids, tau)
}

/// Teacher-forced reconstruction of the original sentence from h̄ alone:
/// mean token-level cross-entropy against the uncorrupted ids + [SEP].
pub fn reconstruction_loss(
    tape: &mut Tape,
    binding: &Binding,
    config: &EncoderConfig,
    hbar: Var,
    original_ids: &[usize],
    dropout: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let mut target: Vec<usize> = original_ids.to_vec();
    target.truncate(config.max_len - 2);
    target.push(SEP);
    let logits = decode_autoregressive(tape, binding, config, hbar, &target, dropout)?;
    tape.cross_entropy(logits, &target)
}

/// Result of the masked-prediction term. `loss` is the per-position mean;
/// the raw sum of Eq-style accumulation is `mean · positions`.
pub struct MapLoss {
    pub loss: Var,
    pub positions: usize,
}

/// −log softmax(W_o·h_p)[original_p] over masked positions, divided by the
/// number of positions for optimizer scale stability.
pub fn masked_aspect_prediction_loss(
    tape: &mut Tape,
    binding: &Binding,
    hidden: Var,
    masked: &MaskedInput,
    max_positions: usize,
) -> Result<MapLoss> {
    // positions index sentence tokens; +1 skips the [CLS] row, and anything
    // truncated away by max_len is ignored
    let usable: Vec<usize> = masked
        .mask_positions
        .iter()
        .copied()
        .filter(|&p| p + 1 < max_positions)
        .collect();
    if usable.is_empty() {
        log::warn!("masked_aspect_prediction_loss: no masked positions, zero loss");
        let zero = tape.constant(crate::tensor::Tensor::scalar(0.0));
        return Ok(MapLoss {
            loss: zero,
            positions: 0,
        });
    }
    let rows: Vec<usize> = usable.iter().map(|&p| p + 1).collect();
    let targets: Vec<usize> = usable.iter().map(|&p| masked.original_ids[p]).collect();
    let h = tape.gather_rows(hidden, &rows)?;
    let w_o = binding.var("map.w_o")?;
    let logits = tape.matmul(h, w_o)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(MapLoss {
        loss,
        positions: usable.len(),
    })
}

/// Joint loss over a batch plus its component breakdown.
pub struct JointLoss {
    pub total: Var,
    pub contrastive: Var,
    /// Σ_b of per-sentence reconstruction losses (unweighted).
    pub reconstruction_sum: Var,
    /// Σ_b of per-sentence (normalized) masked-prediction losses.
    pub masked_prediction_sum: Var,
    /// Raw Eq-style sum over all masked positions, for logging.
    pub masked_prediction_raw_sum: f64,
    pub empty_mask_sentences: usize,
}

fn truncated(sentence: &LabeledSentence, max_tokens: usize) -> LabeledSentence {
    if sentence.tokens.len() <= max_tokens {
        return sentence.clone();
    }
    let mut s = sentence.clone();
    s.tokens.truncate(max_tokens);
    s.aspect_spans.retain(|sp| sp.from < max_tokens);
    for sp in &mut s.aspect_spans {
        sp.to = sp.to.min(max_tokens);
    }
    s
}

/// Masks every sentence, encodes each corrupted input once, and combines
/// L = L_sup + α·Σ L_rec + β·Σ L_map on one tape.
#[allow(clippy::too_many_arguments)]
pub fn joint_pretrain_loss(
    tape: &mut Tape,
    binding: &Binding,
    enc_config: &EncoderConfig,
    pre_config: &PretrainConfig,
    vocab: &Vocab,
    batch: &[LabeledSentence],
    rng: &mut ChaCha8Rng,
    mut dropout_rate: f64,
) -> Result<JointLoss> {
    pre_config.validate()?;
    if batch.len() < 2 {
        return Err(ScaptError::Contract(
            "pre-training batch must have at least 2 sentences".into(),
        ));
    }
    if dropout_rate < 0.0 {
        dropout_rate = 0.0;
    }
    let w_s = binding.var("w_s")?;
    let mut reps = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut rec_losses = Vec::with_capacity(batch.len());
    let mut map_losses = Vec::with_capacity(batch.len());
    let mut map_raw_sum = 0.0;
    let mut empty_mask_sentences = 0;
    for sentence in batch {
        let sentence = truncated(sentence, enc_config.max_len - 2);
        sentence.validate()?;
        let masked = mask_review(&sentence, vocab, pre_config.mask_floor, rng);
        let mut corrupted_input = vec![CLS];
        corrupted_input.extend_from_slice(&masked.corrupted_ids);
        corrupted_input.push(SEP);
        let attn = vec![true; corrupted_input.len()];
        let dropout_on = dropout_rate > 0.0;
        let corrupted_enc = {
            let mut ctx = DropoutCtx {
                rate: dropout_rate,
                rng,
            };
            encode(
                tape,
                binding,
                enc_config,
                &corrupted_input,
                &attn,
                if dropout_on { Some(&mut ctx) } else { None },
                None,
            )?
        };
        let hbar = if pre_config.corrupted_input_for_all {
            corrupted_enc.sentence_rep
        } else {
            let mut clean_input = vec![CLS];
            clean_input.extend_from_slice(&masked.original_ids);
            clean_input.push(SEP);
            let mut ctx = DropoutCtx {
                rate: dropout_rate,
                rng,
            };
            encode(
                tape,
                binding,
                enc_config,
                &clean_input,
                &attn,
                if dropout_on { Some(&mut ctx) } else { None },
                None,
            )?
            .sentence_rep
        };
        reps.push(sentiment_projection(tape, hbar, w_s)?);
        labels.push(sentence.label);
        let rec = {
            let mut ctx = DropoutCtx {
                rate: dropout_rate,
                rng,
            };
            reconstruction_loss(
                tape,
                binding,
                enc_config,
                hbar,
                &masked.original_ids,
                if dropout_on { Some(&mut ctx) } else { None },
            )?
        };
        rec_losses.push(rec);
        let map = masked_aspect_prediction_loss(
            tape,
            binding,
            corrupted_enc.hidden,
            &masked,
            corrupted_input.len() - 1,
        )?;
        if map.positions == 0 {
            empty_mask_sentences += 1;
        }
        map_raw_sum += tape.value(map.loss).data[0] * map.positions as f64;
        map_losses.push(map.loss);
    }
    let contrastive = supervised_contrastive_loss(
        tape,
        &reps,
        &labels,
        pre_config.tau,
        pre_config.normalize_similarity,
    )?;
    let rec_sum = sum_scalars(tape, &rec_losses)?;
    let map_sum = sum_scalars(tape, &map_losses)?;
    let rec_weighted = tape.scale(rec_sum, pre_config.alpha)?;
    let map_weighted = tape.scale(map_sum, pre_config.beta)?;
    let partial = tape.add(contrastive, rec_weighted)?;
    let total = tape.add(partial, map_weighted)?;
    Ok(JointLoss {
        total,
        contrastive,
        reconstruction_sum: rec_sum,
        masked_prediction_sum: map_sum,
        masked_prediction_raw_sum: map_raw_sum,
        empty_mask_sentences,
    })
}

fn sum_scalars(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(acc)
}
