//! Aspect-aware fine-tuning: aspect-based pooling over hidden states,
//! combination with the sentiment representation, and the 3-way classifier.

use crate::data::{AspectExample, Polarity, Span};
use crate::error::{Result, ScaptError};
use crate::model::{encode, DropoutCtx, EncodeCounter, EncoderConfig};
use crate::params::Binding;
use crate::pretrain::sentiment_projection;
use crate::tape::{Tape, Var};
use crate::vocab::{format_input, Vocab};

/// Mean of last-layer hidden states over the aspect's token indices.
/// `span` indexes sentence tokens; the +1 [CLS] shift happens here.
pub fn aspect_representation(tape: &mut Tape, hidden: Var, span: Span) -> Result<Var> {
    if span.is_empty() {
        return Err(ScaptError::Contract(
            "aspect_representation: empty span".into(),
        ));
    }
    let rows: Vec<usize> = span.indices().map(|p| p + 1).collect();
    let gathered = tape.gather_rows(hidden, &rows)?;
    tape.mean_rows(gathered)
}

/// All aspect representations of one sentence from a single encoder pass.
pub fn extract_all_aspects(tape: &mut Tape, hidden: Var, spans: &[Span]) -> Result<Vec<Var>> {
    spans
        .iter()
        .map(|&span| aspect_representation(tape, hidden, span))
        .collect()
}

/// Logits for softmax(W_a·[s_ab ; h̄_a]).
pub fn aspect_logits(tape: &mut Tape, binding: &Binding, s_ab: Var, h_a: Var) -> Result<Var> {
    let joint = tape.concat_cols(&[s_ab, h_a])?;
    let w_a = binding.var("clf.w_a")?;
    let b = binding.var("clf.b")?;
    let logits = tape.matmul(joint, w_a)?;
    tape.add_bias(logits, b)
}

/// Probability 3-vector plus the argmax polarity (ties broken by class order).
pub fn classify_aspect(
    tape: &mut Tape,
    binding: &Binding,
    s_ab: Var,
    h_a: Var,
) -> Result<(Var, Polarity)> {
    let logits = aspect_logits(tape, binding, s_ab, h_a)?;
    let probs = tape.softmax_rows(logits)?;
    let row = tape.value(probs).row(0);
    let mut best = 0;
    for i in 1..3 {
        if row[i] > row[best] {
            best = i;
        }
    }
    Ok((probs, Polarity::from_index(best)))
}

/// Examples sharing one sentence, so the encoder runs once per sentence.
/// Each entry keeps its index into the original slice.
pub struct SentenceGroup<'a> {
    pub tokens: &'a [String],
    pub examples: Vec<(usize, &'a AspectExample)>,
}

pub fn group_by_sentence(examples: &[AspectExample]) -> Vec<SentenceGroup<'_>> {
    let mut groups: Vec<SentenceGroup<'_>> = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match groups.iter_mut().find(|g| g.tokens == ex.tokens.as_slice()) {
            Some(g) => g.examples.push((i, ex)),
            None => groups.push(SentenceGroup {
                tokens: &ex.tokens,
                examples: vec![(i, ex)],
            }),
        }
    }
    groups
}

/// Mean cross-entropy over all (sentence, aspect) pairs in the batch.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loss(
    tape: &mut Tape,
    binding: &Binding,
    config: &EncoderConfig,
    vocab: &Vocab,
    batch: &[AspectExample],
    mut dropout: Option<&mut DropoutCtx<'_>>,
    counter: Option<&EncodeCounter>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(ScaptError::Contract("finetune_loss: empty batch".into()));
    }
    let w_s = binding.var("w_s")?;
    let mut logit_rows = Vec::new();
    let mut targets = Vec::new();
    for group in group_by_sentence(batch) {
        let ids = format_input(vocab, group.tokens, config.max_len)?;
        let attn = vec![true; ids.len()];
        let enc = encode(
            tape,
            binding,
            config,
            &ids,
            &attn,
            dropout.as_deref_mut(),
            counter,
        )?;
        let s_ab = sentiment_projection(tape, enc.sentence_rep, w_s)?;
        for &(_, ex) in &group.examples {
            ex.validate()?;
            if ex.aspect_span.to + 1 >= ids.len() {
                return Err(ScaptError::Contract(format!(
                    "aspect span [{}, {}) truncated away at max_len {}",
                    ex.aspect_span.from, ex.aspect_span.to, config.max_len
                )));
            }
            let h_a = aspect_representation(tape, enc.hidden, ex.aspect_span)?;
            logit_rows.push(aspect_logits(tape, binding, s_ab, h_a)?);
            targets.push(ex.polarity.index());
        }
    }
    let logits = tape.concat_rows(&logit_rows)?;
    tape.cross_entropy(logits, &targets)
}

/// Predicted polarity for every example, one encoder pass per sentence.
pub fn predict(
    params_binding: (&mut Tape, &Binding),
    config: &EncoderConfig,
    vocab: &Vocab,
    examples: &[AspectExample],
    counter: Option<&EncodeCounter>,
) -> Result<Vec<Polarity>> {
    let (tape, binding) = params_binding;
    let w_s = binding.var("w_s")?;
    let mut out = vec![Polarity::Neutral; examples.len()];
    for group in group_by_sentence(examples) {
        let ids = format_input(vocab, group.tokens, config.max_len)?;
        let attn = vec![true; ids.len()];
        let enc = encode(tape, binding, config, &ids, &attn, None, counter)?;
        let s_ab = sentiment_projection(tape, enc.sentence_rep, w_s)?;
        for &(i, ex) in &group.examples {
            let h_a = aspect_representation(tape, enc.hidden, ex.aspect_span)?;
            let (_, label) = classify_aspect(tape, binding, s_ab, h_a)?;
            out[i] = label;
        }
    }
    Ok(out)
}
