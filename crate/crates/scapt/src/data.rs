//! Dataset records and the JSONL file formats they travel in.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScaptError};
use crate::vocab::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Negative,
}

/// Three-way aspect polarity; ordering is the deterministic tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Neutral => 1,
            Polarity::Negative => 2,
        }
    }

    pub fn from_index(i: usize) -> Polarity {
        Polarity::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceTag {
    #[serde(rename = "ESE")]
    Ese,
    #[serde(rename = "ISE")]
    Ise,
}

/// Half-open token-index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub from: usize,
    pub to: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.to.saturating_sub(self.from)
    }

    pub fn is_empty(&self) -> bool {
        self.to <= self.from
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> {
        self.from..self.to
    }
}

/// Pre-training unit: tokens, a review-derived binary label, aspect spans.
#[derive(Debug, Clone)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub label: SentimentLabel,
    pub aspect_spans: Vec<Span>,
}

impl LabeledSentence {
    pub fn validate(&self) -> Result<()> {
        if self.aspect_spans.is_empty() {
            return Err(ScaptError::Contract(
                "labeled sentence must contain at least one aspect span".into(),
            ));
        }
        let mut sorted = self.aspect_spans.clone();
        sorted.sort_by_key(|s| s.from);
        for w in sorted.windows(2) {
            if w[1].from < w[0].to {
                return Err(ScaptError::Contract("aspect spans overlap".into()));
            }
        }
        for span in &self.aspect_spans {
            if span.is_empty() || span.to > self.tokens.len() {
                return Err(ScaptError::Contract(format!(
                    "aspect span [{}, {}) out of bounds for {} tokens",
                    span.from,
                    span.to,
                    self.tokens.len()
                )));
            }
        }
        Ok(())
    }
}

/// One record of the pre-training corpus JSONL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub text: String,
    pub label: SentimentLabel,
    pub aspects: Vec<Span>,
}

impl PretrainRecord {
    pub fn into_sentence(self) -> Result<LabeledSentence> {
        let s = LabeledSentence {
            tokens: tokenize(&self.text),
            label: self.label,
            aspect_spans: self.aspects,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Fine-tuning/eval unit: one sentence, one target aspect, gold polarity.
/// Opinion spans drive ESE/ISE slicing only and are never shown to the model.
#[derive(Debug, Clone)]
pub struct AspectExample {
    pub tokens: Vec<String>,
    pub aspect_span: Span,
    pub polarity: Polarity,
    pub opinion_spans: Vec<Span>,
}

impl AspectExample {
    pub fn validate(&self) -> Result<()> {
        if self.aspect_span.is_empty() || self.aspect_span.to > self.tokens.len() {
            return Err(ScaptError::Contract(format!(
                "aspect span [{}, {}) out of bounds for {} tokens",
                self.aspect_span.from,
                self.aspect_span.to,
                self.tokens.len()
            )));
        }
        Ok(())
    }

    pub fn slice_tag(&self) -> SliceTag {
        if self.opinion_spans.is_empty() {
            SliceTag::Ise
        } else {
            SliceTag::Ese
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbsaAspectRecord {
    pub term: String,
    pub from: usize,
    pub to: usize,
    pub polarity: Polarity,
    #[serde(default)]
    pub opinion_terms: Vec<Span>,
}

/// One record of an ABSA dataset JSONL: a sentence with its aspects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbsaRecord {
    pub text: String,
    pub aspects: Vec<AbsaAspectRecord>,
}

impl AbsaRecord {
    pub fn into_examples(self) -> Result<Vec<AspectExample>> {
        let tokens = tokenize(&self.text);
        let mut out = Vec::with_capacity(self.aspects.len());
        for a in self.aspects {
            let ex = AspectExample {
                tokens: tokens.clone(),
                aspect_span: Span {
                    from: a.from,
                    to: a.to,
                },
                polarity: a.polarity,
                opinion_spans: a.opinion_terms,
            };
            ex.validate()?;
            out.push(ex);
        }
        Ok(out)
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| ScaptError::Data {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| ScaptError::Data {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_pretrain_corpus(path: &Path) -> Result<Vec<LabeledSentence>> {
    read_jsonl::<PretrainRecord>(path)?
        .into_iter()
        .map(PretrainRecord::into_sentence)
        .collect()
}

pub fn load_absa_dataset(path: &Path) -> Result<Vec<AspectExample>> {
    let mut out = Vec::new();
    for record in read_jsonl::<AbsaRecord>(path)? {
        out.extend(record.into_examples()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn pretrain_record_parses_and_validates() {
        let json = r#"{"text":"the battery life is short","label":"negative","aspects":[{"from":1,"to":3}]}"#;
        let rec: PretrainRecord = serde_json::from_str(json).unwrap();
        let s = rec.into_sentence().unwrap();
        assert_eq!(s.tokens.len(), 5);
        assert_eq!(s.label, SentimentLabel::Negative);
    }

    #[test]
    fn sentence_without_aspect_is_rejected() {
        let s = LabeledSentence {
            tokens: vec!["ok".into()],
            label: SentimentLabel::Positive,
            aspect_spans: vec![],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn overlapping_aspect_spans_rejected() {
        let s = LabeledSentence {
            tokens: (0..5).map(|i| format!("t{i}")).collect(),
            label: SentimentLabel::Positive,
            aspect_spans: vec![Span { from: 0, to: 3 }, Span { from: 2, to: 4 }],
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn absa_record_expands_to_examples() {
        let json = r#"{"text":"great food but bad service","aspects":[
            {"term":"food","from":1,"to":2,"polarity":"positive","opinion_terms":[{"from":0,"to":1}]},
            {"term":"service","from":4,"to":5,"polarity":"negative"}]}"#;
        let rec: AbsaRecord = serde_json::from_str(json).unwrap();
        let examples = rec.into_examples().unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].slice_tag(), SliceTag::Ese);
        assert_eq!(examples[1].slice_tag(), SliceTag::Ise);
    }

    #[test]
    fn jsonl_parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"text":"x","label":"positive","aspects":[{{"from":0,"to":1}}]}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        match load_pretrain_corpus(&path) {
            Err(ScaptError::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected data error, got {other:?}"),
        }
    }
}
