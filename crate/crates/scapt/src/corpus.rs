//! Retrieval pipeline: document-level rated reviews → noisy sentence-level
//! pre-training corpus, plus ESE/ISE slicing of evaluation data.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AspectExample, PretrainRecord, SentimentLabel, SliceTag, Span};
use crate::error::{Result, ScaptError};
use crate::vocab::tokenize;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawReview {
    pub review_id: String,
    pub text: String,
    pub stars: u8,
    #[serde(default)]
    pub topics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RetrievedSentence {
    pub text: String,
    pub label: SentimentLabel,
    pub aspect_spans: Vec<Span>,
    pub source_review_id: String,
}

/// 5 stars → positive, 1 star → negative, everything else dropped.
pub fn rating_label(stars: u8) -> Option<SentimentLabel> {
    match stars {
        5 => Some(SentimentLabel::Positive),
        1 => Some(SentimentLabel::Negative),
        _ => None,
    }
}

pub fn filter_by_rating(reviews: Vec<RawReview>) -> Vec<(RawReview, SentimentLabel)> {
    reviews
        .into_iter()
        .filter_map(|r| rating_label(r.stars).map(|l| (r, l)))
        .collect()
}

/// Case-insensitive topic membership. Reviews without topic tags are skipped
/// and counted.
pub fn filter_by_domain(
    reviews: Vec<(RawReview, SentimentLabel)>,
    allowed_topics: &[String],
    missing_topic_counter: &mut u64,
) -> Vec<(RawReview, SentimentLabel)> {
    let allowed: HashSet<String> = allowed_topics.iter().map(|t| t.to_lowercase()).collect();
    reviews
        .into_iter()
        .filter(|(r, _)| {
            if r.topics.is_empty() {
                *missing_topic_counter += 1;
                return false;
            }
            r.topics.iter().any(|t| allowed.contains(&t.to_lowercase()))
        })
        .collect()
}

/// Splits on `.`, `!`, `?` runs followed by whitespace or end of text.
/// Abbreviations are not special-cased; that noise is accepted.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if matches!(chars[i], '.' | '!' | '?') {
            let mut j = i;
            while j + 1 < chars.len() && matches!(chars[j + 1], '.' | '!' | '?') {
                j += 1;
            }
            let at_end = j + 1 >= chars.len();
            if at_end || chars[j + 1].is_whitespace() {
                let sentence: String = chars[start..=j].iter().collect();
                let trimmed = sentence.trim();
                if !trimmed.is_empty() {
                    sentences.push(trimmed.to_string());
                }
                i = j + 1;
                start = i;
                continue;
            }
            i = j + 1;
            continue;
        }
        i += 1;
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let trimmed = tail.trim();
        if !trimmed.is_empty() {
            sentences.push(trimmed.to_string());
        }
    }
    sentences
}

/// Aspect lexicon: tokenized aspect terms from the ABSA *training* split only.
#[derive(Debug, Clone, Default)]
pub struct AspectLexicon {
    terms: Vec<Vec<String>>,
}

impl AspectLexicon {
    pub fn from_terms<'a>(terms: impl Iterator<Item = &'a str>) -> Self {
        let mut seen = HashSet::new();
        let mut toks: Vec<Vec<String>> = Vec::new();
        for term in terms {
            let t = tokenize(term);
            if t.is_empty() || !seen.insert(t.clone()) {
                continue;
            }
            toks.push(t);
        }
        // longest first so longer terms win ties at the same start position
        toks.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        AspectLexicon { terms: toks }
    }

    pub fn from_absa_training(examples: &[AspectExample]) -> Self {
        let terms: Vec<String> = examples
            .iter()
            .map(|ex| {
                ex.tokens[ex.aspect_span.from..ex.aspect_span.to]
                    .join(" ")
            })
            .collect();
        Self::from_terms(terms.iter().map(|s| s.as_str()))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Exact token-subsequence matches: longest-match-first, non-overlapping,
/// left-to-right. Empty result means the sentence is dropped upstream.
pub fn match_aspects(tokens: &[String], lexicon: &AspectLexicon) -> Vec<Span> {
    let mut taken = vec![false; tokens.len()];
    let mut spans = Vec::new();
    for term in &lexicon.terms {
        if term.len() > tokens.len() {
            continue;
        }
        let mut start = 0;
        while start + term.len() <= tokens.len() {
            let window = &tokens[start..start + term.len()];
            let matches = window.iter().zip(term).all(|(a, b)| a == b)
                && !taken[start..start + term.len()].iter().any(|&t| t);
            if matches {
                for slot in &mut taken[start..start + term.len()] {
                    *slot = true;
                }
                spans.push(Span {
                    from: start,
                    to: start + term.len(),
                });
                start += term.len();
            } else {
                start += 1;
            }
        }
    }
    spans.sort_by_key(|s| s.from);
    spans
}

/// Per-stage counters of one corpus build.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusStats {
    pub reviews_ingested: u64,
    pub reviews_rating_kept: u64,
    pub reviews_domain_kept: u64,
    pub reviews_missing_topic: u64,
    pub sentences_split: u64,
    pub sentences_matched: u64,
    pub positive: u64,
    pub negative: u64,
}

pub fn read_reviews(path: &Path) -> Result<Vec<RawReview>> {
    let file = File::open(path).map_err(|e| ScaptError::Data {
        path: path.display().to_string(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let review: RawReview = serde_json::from_str(&line).map_err(|e| ScaptError::Data {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if review.stars < 1 || review.stars > 5 {
            return Err(ScaptError::Data {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("stars must be 1..=5, got {}", review.stars),
            });
        }
        out.push(review);
    }
    Ok(out)
}

/// Full retrieval procedure over in-memory reviews; deterministic, output
/// preserved in input order.
pub fn retrieve_sentences(
    reviews: Vec<RawReview>,
    lexicon: &AspectLexicon,
    allowed_topics: &[String],
) -> (Vec<RetrievedSentence>, CorpusStats) {
    let mut stats = CorpusStats {
        reviews_ingested: reviews.len() as u64,
        ..CorpusStats::default()
    };
    let rated = filter_by_rating(reviews);
    stats.reviews_rating_kept = rated.len() as u64;
    let in_domain = filter_by_domain(rated, allowed_topics, &mut stats.reviews_missing_topic);
    stats.reviews_domain_kept = in_domain.len() as u64;
    let mut out = Vec::new();
    for (review, label) in in_domain {
        for sentence in split_sentences(&review.text) {
            stats.sentences_split += 1;
            let tokens = tokenize(&sentence);
            let spans = match_aspects(&tokens, lexicon);
            if spans.is_empty() {
                continue;
            }
            stats.sentences_matched += 1;
            match label {
                SentimentLabel::Positive => stats.positive += 1,
                SentimentLabel::Negative => stats.negative += 1,
            }
            out.push(RetrievedSentence {
                text: sentence,
                label,
                aspect_spans: spans,
                source_review_id: review.review_id.clone(),
            });
        }
    }
    (out, stats)
}

/// Composes the whole pipeline and writes the JSONL corpus plus a sidecar
/// `.stats.json`. Returns the stage counters.
pub fn build_pretrain_corpus(
    reviews_path: &Path,
    lexicon: &AspectLexicon,
    allowed_topics: &[String],
    out_path: &Path,
) -> Result<CorpusStats> {
    let reviews = read_reviews(reviews_path)?;
    let (sentences, stats) = retrieve_sentences(reviews, lexicon, allowed_topics);
    let mut writer = BufWriter::new(File::create(out_path)?);
    for s in &sentences {
        let record = PretrainRecord {
            text: s.text.clone(),
            label: s.label,
            aspects: s.aspect_spans.clone(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    let stats_path = stats_sidecar_path(out_path);
    std::fs::write(&stats_path, serde_json::to_vec_pretty(&stats)?)?;
    Ok(stats)
}

pub fn stats_sidecar_path(out_path: &Path) -> std::path::PathBuf {
    let mut os = out_path.as_os_str().to_owned();
    os.push(".stats.json");
    std::path::PathBuf::from(os)
}

/// ISE iff no opinion span is annotated for the aspect; ESE otherwise.
pub fn slice_ese_ise(examples: &[AspectExample]) -> Vec<(SliceTag, &AspectExample)> {
    examples.iter().map(|ex| (ex.slice_tag(), ex)).collect()
}

/// Fraction of examples in the ISE slice.
pub fn ise_fraction(examples: &[AspectExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let ise = examples
        .iter()
        .filter(|ex| ex.slice_tag() == SliceTag::Ise)
        .count();
    ise as f64 / examples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Polarity;

    fn review(id: &str, text: &str, stars: u8, topic: &str) -> RawReview {
        RawReview {
            review_id: id.to_string(),
            text: text.to_string(),
            stars,
            topics: vec![topic.to_string()],
        }
    }

    #[test]
    fn rating_rule() {
        assert_eq!(rating_label(5), Some(SentimentLabel::Positive));
        assert_eq!(rating_label(1), Some(SentimentLabel::Negative));
        assert_eq!(rating_label(3), None);
        assert_eq!(rating_label(2), None);
        assert_eq!(rating_label(4), None);
    }

    #[test]
    fn rating_filter_counts() {
        let reviews: Vec<RawReview> = [5, 5, 5, 1, 1, 2, 3, 3, 4, 4]
            .iter()
            .enumerate()
            .map(|(i, &s)| review(&format!("r{i}"), "x", s, "restaurant"))
            .collect();
        let kept = filter_by_rating(reviews);
        assert_eq!(kept.len(), 5);
        assert_eq!(
            kept.iter()
                .filter(|(_, l)| *l == SentimentLabel::Positive)
                .count(),
            3
        );
    }

    #[test]
    fn domain_filter_case_insensitive() {
        let reviews = vec![
            (review("a", "x", 5, "Restaurant"), SentimentLabel::Positive),
            (review("b", "x", 5, "spa"), SentimentLabel::Positive),
        ];
        let mut missing = 0;
        let kept = filter_by_domain(reviews, &["restaurant".to_string()], &mut missing);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].0.review_id, "a");
        assert_eq!(missing, 0);
    }

    #[test]
    fn missing_topic_is_counted_and_skipped() {
        let mut r = review("a", "x", 5, "restaurant");
        r.topics.clear();
        let mut missing = 0;
        let kept = filter_by_domain(
            vec![(r, SentimentLabel::Positive)],
            &["restaurant".to_string()],
            &mut missing,
        );
        assert!(kept.is_empty());
        assert_eq!(missing, 1);
    }

    #[test]
    fn sentence_split_basic() {
        assert_eq!(
            split_sentences("Great food. Bad service."),
            vec!["Great food.", "Bad service."]
        );
    }

    #[test]
    fn consecutive_terminators_collapse() {
        assert_eq!(split_sentences("Wow!!!"), vec!["Wow!!!"]);
    }

    #[test]
    fn three_sentence_paragraph() {
        let text = "The soup was cold! Who serves that? We left early.";
        assert_eq!(
            split_sentences(text),
            vec!["The soup was cold!", "Who serves that?", "We left early."]
        );
    }

    #[test]
    fn decimal_point_does_not_split() {
        assert_eq!(split_sentences("I paid 3.50 dollars"), vec!["I paid 3.50 dollars"]);
    }

    fn lexicon(terms: &[&str]) -> AspectLexicon {
        AspectLexicon::from_terms(terms.iter().copied())
    }

    #[test]
    fn match_single_multiword_term() {
        let tokens = tokenize("the battery life is short");
        let spans = match_aspects(&tokens, &lexicon(&["battery life"]));
        assert_eq!(spans, vec![Span { from: 1, to: 3 }]);
    }

    #[test]
    fn longest_match_wins() {
        let tokens = tokenize("the battery life is short");
        let spans = match_aspects(&tokens, &lexicon(&["battery", "battery life"]));
        assert_eq!(spans, vec![Span { from: 1, to: 3 }]);
    }

    #[test]
    fn hand_matched_fixture() {
        let lex = lexicon(&["food", "service", "battery life"]);
        let cases = [
            ("Great food", vec![Span { from: 1, to: 2 }]),
            ("The service was slow", vec![Span { from: 1, to: 2 }]),
            ("Nothing matches here", vec![]),
            ("food and more food", vec![Span { from: 0, to: 1 }, Span { from: 3, to: 4 }]),
            ("My battery life beats your battery", vec![Span { from: 1, to: 3 }]),
        ];
        for (text, want) in cases {
            assert_eq!(match_aspects(&tokenize(text), &lex), want, "{text}");
        }
    }

    #[test]
    fn lexicon_from_training_examples() {
        let ex = AspectExample {
            tokens: tokenize("great battery life"),
            aspect_span: Span { from: 1, to: 3 },
            polarity: Polarity::Positive,
            opinion_spans: vec![],
        };
        let lex = AspectLexicon::from_absa_training(&[ex]);
        assert_eq!(lex.len(), 1);
        let spans = match_aspects(&tokenize("battery life rocks"), &lex);
        assert_eq!(spans, vec![Span { from: 0, to: 2 }]);
    }

    #[test]
    fn ise_fraction_counts() {
        let mk = |opinions: usize| AspectExample {
            tokens: tokenize("the food arrived"),
            aspect_span: Span { from: 1, to: 2 },
            polarity: Polarity::Neutral,
            opinion_spans: (0..opinions).map(|_| Span { from: 0, to: 1 }).collect(),
        };
        let examples: Vec<AspectExample> = (0..8).map(|i| mk(usize::from(i >= 3))).collect();
        assert!((ise_fraction(&examples) - 0.375).abs() < 1e-12);
        let tags = slice_ese_ise(&examples);
        assert_eq!(tags[0].0, SliceTag::Ise);
        assert_eq!(tags[7].0, SliceTag::Ese);
    }

    #[test]
    fn empty_pipeline_yields_zero_counters() {
        let (sentences, stats) = retrieve_sentences(vec![], &lexicon(&["food"]), &["r".into()]);
        assert!(sentences.is_empty());
        assert_eq!(stats, CorpusStats::default());
    }

    #[test]
    fn labels_follow_source_review() {
        let reviews = vec![
            review("p", "The food was something. More food!", 5, "restaurant"),
            review("n", "Dreadful food.", 1, "restaurant"),
        ];
        let (sentences, stats) =
            retrieve_sentences(reviews, &lexicon(&["food"]), &["restaurant".to_string()]);
        assert_eq!(stats.sentences_matched, 3);
        for s in &sentences {
            let want = if s.source_review_id == "p" {
                SentimentLabel::Positive
            } else {
                SentimentLabel::Negative
            };
            assert_eq!(s.label, want);
            assert!(!s.aspect_spans.is_empty());
        }
    }
}
