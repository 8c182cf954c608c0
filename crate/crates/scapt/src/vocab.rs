//! Whitespace + punctuation tokenizer and the vocabulary with reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, ScaptError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const BOS: usize = 5;
pub const NUM_RESERVED: usize = 6;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[BOS]"];

/// Lowercase, split on whitespace, split punctuation into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() || ch == '\'' {
            current.push(ch);
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds from training-split token streams. Tokens below `min_count` are
    /// dropped; kept tokens get ids after the reserved block in first-seen order.
    pub fn build<'a>(token_streams: impl Iterator<Item = &'a [String]>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for tokens in token_streams {
            for tok in tokens {
                let c = counts.entry(tok.clone()).or_insert(0);
                if *c == 0 {
                    order.push(tok.clone());
                }
                *c += 1;
            }
        }
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for tok in order {
            if counts[&tok] >= min_count && !RESERVED_TOKENS.contains(&tok.as_str()) {
                id_to_token.push(tok);
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.id_to_token.get(id).map_or("[UNK]", |s| s.as_str())
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One non-reserved token per line, line number = id − reserved block size.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self.id_to_token[NUM_RESERVED..]
            .iter()
            .map(|t| format!("{t}\n"))
            .collect();
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            id_to_token.push(line.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// [CLS] + tokens + [SEP], truncating the tail to fit `max_len`. Aspect spans
/// over the raw tokens shift by +1 to index into the result.
pub fn format_input(vocab: &Vocab, tokens: &[String], max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(ScaptError::Config(
            "max_len must be at least 2 to fit [CLS] and [SEP]".into(),
        ));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    for tok in &tokens[..keep] {
        ids.push(vocab.id(tok));
    }
    ids.push(SEP);
    Ok(ids)
}
