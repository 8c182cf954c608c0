//! Accuracy, macro-F1, per-slice accuracy, and embedding export with a
//! clustering score.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AspectExample, Polarity, SliceTag};
use crate::error::{Result, ScaptError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_support: u64,
    pub predicted: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Unweighted mean of per-class F1 over classes present in the gold
    /// labels; classes absent from the gold set are excluded.
    pub macro_f1: f64,
    pub per_class: Vec<(String, ClassMetrics)>,
    pub ese_accuracy: Option<f64>,
    pub ise_accuracy: Option<f64>,
    pub total: u64,
    pub correct: u64,
    pub ese_count: u64,
    pub ise_count: u64,
}

/// 3×3 confusion matrix indexed [gold][pred].
pub fn confusion_matrix(golds: &[Polarity], preds: &[Polarity]) -> [[u64; 3]; 3] {
    let mut m = [[0u64; 3]; 3];
    for (g, p) in golds.iter().zip(preds) {
        m[g.index()][p.index()] += 1;
    }
    m
}

pub fn evaluate(
    examples: &[AspectExample],
    predictions: &[Polarity],
) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(ScaptError::Contract("evaluate: empty dataset".into()));
    }
    if examples.len() != predictions.len() {
        return Err(ScaptError::ShapeMismatch(
            "evaluate: examples vs predictions length".into(),
        ));
    }
    let golds: Vec<Polarity> = examples.iter().map(|e| e.polarity).collect();
    let m = confusion_matrix(&golds, predictions);
    let total = golds.len() as u64;
    let correct: u64 = (0..3).map(|i| m[i][i]).sum();
    let mut per_class = Vec::new();
    let mut f1_sum = 0.0;
    let mut f1_classes = 0;
    for class in Polarity::ALL {
        let i = class.index();
        let gold_support: u64 = m[i].iter().sum();
        let predicted: u64 = (0..3).map(|g| m[g][i]).sum();
        let tp = m[i][i] as f64;
        let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let recall = if gold_support > 0 { tp / gold_support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if gold_support > 0 {
            f1_sum += f1;
            f1_classes += 1;
        }
        per_class.push((
            class.name().to_string(),
            ClassMetrics {
                precision,
                recall,
                f1,
                gold_support,
                predicted,
            },
        ));
    }
    let mut slice_totals = [0u64; 2];
    let mut slice_correct = [0u64; 2];
    for ((ex, g), p) in examples.iter().zip(&golds).zip(predictions) {
        let s = match ex.slice_tag() {
            SliceTag::Ese => 0,
            SliceTag::Ise => 1,
        };
        slice_totals[s] += 1;
        if g == p {
            slice_correct[s] += 1;
        }
    }
    let slice_acc = |s: usize| {
        if slice_totals[s] > 0 {
            Some(slice_correct[s] as f64 / slice_totals[s] as f64)
        } else {
            None
        }
    };
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        macro_f1: if f1_classes > 0 {
            f1_sum / f1_classes as f64
        } else {
            0.0
        },
        per_class,
        ese_accuracy: slice_acc(0),
        ise_accuracy: slice_acc(1),
        total,
        correct,
        ese_count: slice_totals[0],
        ise_count: slice_totals[1],
    })
}

/// One exported sentiment representation.
pub struct EmbeddingRow {
    pub id: usize,
    pub polarity: Polarity,
    pub slice: SliceTag,
    pub values: Vec<f64>,
}

/// (mean intra-class dot similarity) − (mean inter-class dot similarity)
/// over ordered pairs i ≠ j; 0 when either pair set is empty.
pub fn clustering_score<L: PartialEq>(labels: &[L], vectors: &[Vec<f64>]) -> f64 {
    let n = labels.len();
    let (mut intra, mut inter) = ((0.0, 0u64), (0.0, 0u64));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dot: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| a * b)
                .sum();
            if labels[i] == labels[j] {
                intra.0 += dot;
                intra.1 += 1;
            } else {
                inter.0 += dot;
                inter.1 += 1;
            }
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return 0.0;
    }
    intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64
}

/// CSV: id, polarity, slice, then the representation components.
pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<f64> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id,polarity,slice")?;
    for i in 0..dim {
        write!(w, ",s{i}")?;
    }
    writeln!(w)?;
    for row in rows {
        let slice = match row.slice {
            SliceTag::Ese => "ESE",
            SliceTag::Ise => "ISE",
        };
        write!(w, "{},{},{}", row.id, row.polarity.name(), slice)?;
        for v in &row.values {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    let labels: Vec<Polarity> = rows.iter().map(|r| r.polarity).collect();
    let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.values.clone()).collect();
    Ok(clustering_score(&labels, &vectors))
}
