//! Label-balanced batch construction for contrastive pre-training.
//!
//! Every anchor needs at least one positive in its batch, so each batch must
//! contain at least two sentences per represented label.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SentimentLabel;
use crate::error::{Result, ScaptError};

/// Indices into the corpus, grouped into batches where each label present in
/// the corpus appears at least twice. A trailing remainder that cannot meet
/// the guarantee is dropped for that epoch.
pub fn balanced_batches<R: Rng>(
    labels: &[SentimentLabel],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 4 {
        return Err(ScaptError::Config(
            "batch_size must be at least 4 for label-balanced batches".into(),
        ));
    }
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        match label {
            SentimentLabel::Positive => pos.push(i),
            SentimentLabel::Negative => neg.push(i),
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(ScaptError::Config(
            "pre-training corpus must contain both positive and negative sentences".into(),
        ));
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut batches = Vec::new();
    let (mut pi, mut ni) = (0, 0);
    // reserve two of each label per batch, fill the rest alternately from
    // whichever pool has more left
    while pos.len() - pi >= 2 && neg.len() - ni >= 2 {
        let mut batch = vec![pos[pi], pos[pi + 1], neg[ni], neg[ni + 1]];
        pi += 2;
        ni += 2;
        while batch.len() < batch_size {
            let pos_left = pos.len() - pi;
            let neg_left = neg.len() - ni;
            if pos_left == 0 && neg_left == 0 {
                break;
            }
            if pos_left >= neg_left {
                batch.push(pos[pi]);
                pi += 1;
            } else {
                batch.push(neg[ni]);
                ni += 1;
            }
        }
        if batch.len() < batch_size {
            // short final batch is fine as long as the guarantee held, which
            // it does by construction here
            batches.push(batch);
            break;
        }
        batches.push(batch);
    }
    Ok(batches)
}
