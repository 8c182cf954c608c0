//! Synthetic restaurant-style domain for end-to-end checks.
//!
//! The domain separates explicit sentiment (opinion adjectives next to the
//! aspect) from implicit sentiment (behavioral cue phrases with no opinion
//! word). Implicit cues come in two disjoint sets: set A appears in the
//! fine-tuning training split, set B only in the noisy pre-training corpus
//! and in the held-out test slice. A model trained from scratch on the
//! fine-tuning split has never seen set B, while a pre-trained model has.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AspectExample, LabeledSentence, Polarity, SentimentLabel, Span};

const ASPECTS: [&str; 6] = ["food", "service", "coffee", "pasta", "dessert", "soup"];

const POS_OPINIONS: [&str; 5] = ["great", "excellent", "amazing", "fantastic", "lovely"];
const NEG_OPINIONS: [&str; 5] = ["terrible", "awful", "horrible", "disappointing", "bland"];

// {a} marks the aspect token, {o} the opinion token
const EXPLICIT_TEMPLATES: [&str; 4] = [
    "the {a} was {o}",
    "{o} {a} overall",
    "we thought the {a} was really {o}",
    "such {o} {a} here",
];

const IMPLICIT_POS_A: [&str; 3] = [
    "i will definitely return for the {a}",
    "my friends keep asking about the {a}",
    "we told our neighbors about the {a}",
];

const IMPLICIT_NEG_A: [&str; 3] = [
    "i sent the {a} straight back",
    "we left most of the {a} untouched",
    "i warned my coworkers about the {a}",
];

const IMPLICIT_POS_B: [&str; 3] = [
    "we finished the {a} in seconds",
    "everyone wanted more of the {a}",
    "the {a} disappeared from the table fast",
];

const IMPLICIT_NEG_B: [&str; 3] = [
    "i asked for a refund after the {a}",
    "nobody touched the {a} again",
    "the {a} went straight into the bin",
];

const NEUTRAL_TEMPLATES: [&str; 4] = [
    "the {a} arrived at noon",
    "the {a} came with a side of rice",
    "we ordered the {a} on tuesday",
    "the {a} was listed on the menu",
];

/// Fills a template; returns tokens plus the aspect index and, when an
/// opinion slot exists, the opinion index.
fn fill(template: &str, aspect: &str, opinion: Option<&str>) -> (Vec<String>, usize, Option<usize>) {
    let mut tokens = Vec::new();
    let mut aspect_idx = 0;
    let mut opinion_idx = None;
    for word in template.split_whitespace() {
        match word {
            "{a}" => {
                aspect_idx = tokens.len();
                tokens.push(aspect.to_string());
            }
            "{o}" => {
                opinion_idx = Some(tokens.len());
                tokens.push(opinion.expect("template has no opinion word").to_string());
            }
            other => tokens.push(other.to_string()),
        }
    }
    (tokens, aspect_idx, opinion_idx)
}

pub struct SynthDomain {
    /// Noisy sentence-level corpus for pre-training.
    pub pretrain: Vec<LabeledSentence>,
    /// Aspect-level training split (explicit + implicit set A + neutral).
    pub finetune_train: Vec<AspectExample>,
    /// Held-out test split; its implicit slice uses set B cues.
    pub test: Vec<AspectExample>,
}

fn pretrain_sentence(rng: &mut ChaCha8Rng, noise: f64) -> LabeledSentence {
    let aspect = ASPECTS.choose(rng).unwrap();
    let positive = rng.gen_bool(0.5);
    let (tokens, aspect_idx) = if rng.gen_bool(0.5) {
        let template = EXPLICIT_TEMPLATES.choose(rng).unwrap();
        let opinion = if positive {
            POS_OPINIONS.choose(rng).unwrap()
        } else {
            NEG_OPINIONS.choose(rng).unwrap()
        };
        let (t, a, _) = fill(template, aspect, Some(opinion));
        (t, a)
    } else {
        let pool: &[&str] = match (positive, rng.gen_bool(0.5)) {
            (true, true) => &IMPLICIT_POS_A,
            (true, false) => &IMPLICIT_POS_B,
            (false, true) => &IMPLICIT_NEG_A,
            (false, false) => &IMPLICIT_NEG_B,
        };
        let (t, a, _) = fill(pool.choose(rng).unwrap(), aspect, None);
        (t, a)
    };
    // document ratings are a noisy sentiment signal; flip a fraction
    let flipped = rng.gen_bool(noise);
    let label = match positive != flipped {
        true => SentimentLabel::Positive,
        false => SentimentLabel::Negative,
    };
    LabeledSentence {
        tokens,
        label,
        aspect_spans: vec![Span {
            from: aspect_idx,
            to: aspect_idx + 1,
        }],
    }
}

fn explicit_example(rng: &mut ChaCha8Rng, polarity: Polarity) -> AspectExample {
    let aspect = ASPECTS.choose(rng).unwrap();
    let template = EXPLICIT_TEMPLATES.choose(rng).unwrap();
    let opinion = match polarity {
        Polarity::Positive => POS_OPINIONS.choose(rng).unwrap(),
        Polarity::Negative => NEG_OPINIONS.choose(rng).unwrap(),
        Polarity::Neutral => unreachable!("neutral has no opinion words"),
    };
    let (tokens, aspect_idx, opinion_idx) = fill(template, aspect, Some(opinion));
    let o = opinion_idx.unwrap();
    AspectExample {
        tokens,
        aspect_span: Span {
            from: aspect_idx,
            to: aspect_idx + 1,
        },
        polarity,
        opinion_spans: vec![Span { from: o, to: o + 1 }],
    }
}

fn implicit_example(rng: &mut ChaCha8Rng, polarity: Polarity, set_b: bool) -> AspectExample {
    let aspect = ASPECTS.choose(rng).unwrap();
    let pool: &[&str] = match (polarity, set_b) {
        (Polarity::Positive, false) => &IMPLICIT_POS_A,
        (Polarity::Positive, true) => &IMPLICIT_POS_B,
        (Polarity::Negative, false) => &IMPLICIT_NEG_A,
        (Polarity::Negative, true) => &IMPLICIT_NEG_B,
        (Polarity::Neutral, _) => &NEUTRAL_TEMPLATES,
    };
    let (tokens, aspect_idx, _) = fill(pool.choose(rng).unwrap(), aspect, None);
    AspectExample {
        tokens,
        aspect_span: Span {
            from: aspect_idx,
            to: aspect_idx + 1,
        },
        polarity,
        opinion_spans: vec![],
    }
}

pub fn generate(seed: u64) -> SynthDomain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pretrain: Vec<LabeledSentence> =
        (0..2000).map(|_| pretrain_sentence(&mut rng, 0.1)).collect();

    let mut finetune_train = Vec::new();
    for _ in 0..100 {
        finetune_train.push(explicit_example(&mut rng, Polarity::Positive));
        finetune_train.push(explicit_example(&mut rng, Polarity::Negative));
    }
    for _ in 0..20 {
        finetune_train.push(implicit_example(&mut rng, Polarity::Positive, false));
        finetune_train.push(implicit_example(&mut rng, Polarity::Negative, false));
    }
    for _ in 0..60 {
        finetune_train.push(implicit_example(&mut rng, Polarity::Neutral, false));
    }
    finetune_train.shuffle(&mut rng);

    let mut test = Vec::new();
    for _ in 0..30 {
        test.push(implicit_example(&mut rng, Polarity::Positive, true));
        test.push(implicit_example(&mut rng, Polarity::Negative, true));
    }
    for _ in 0..10 {
        test.push(explicit_example(&mut rng, Polarity::Positive));
        test.push(explicit_example(&mut rng, Polarity::Negative));
        test.push(implicit_example(&mut rng, Polarity::Neutral, true));
    }
    test.shuffle(&mut rng);

    SynthDomain {
        pretrain,
        finetune_train,
        test,
    }
}
