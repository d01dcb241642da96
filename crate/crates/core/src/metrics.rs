//! Unweighted accuracy, confusion matrices, corpus BLEU-4 and report shape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SentimentLabel;
use crate::generator::ParsedPrediction;
use crate::prompt::{Gold, TaskOrdering};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("confusion matrix has no gold support")]
    NoSupport,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("length mismatch: {0} predictions vs {1} references")]
    Misaligned(usize, usize),
}

/// Rows are gold labels, columns predictions, both indexed by label code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[usize; 3]; 3]);

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (SentimentLabel, SentimentLabel)>) -> Self {
        let mut cm = Self::default();
        for (g, p) in pairs {
            cm.add(g, p);
        }
        cm
    }

    pub fn add(&mut self, gold: SentimentLabel, pred: SentimentLabel) {
        self.0[gold.code()][pred.code()] += 1;
    }

    pub fn total(&self) -> usize {
        self.0.iter().flatten().sum()
    }

    /// Recall of `class`, or None when it has no gold support.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let support: usize = self.0[class].iter().sum();
        (support > 0).then(|| self.0[class][class] as f64 / support as f64)
    }
}

/// Mean of per-class recalls over classes with gold support.
pub fn unweighted_accuracy(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let recalls: Vec<f64> = (0..3).filter_map(|c| cm.recall(c)).collect();
    if recalls.is_empty() {
        return Err(MetricsError::NoSupport);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuDetail {
    pub score: f64,
    /// Clipped n-gram matches and hypothesis n-gram totals for n = 1..4.
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
    pub brevity_penalty: f64,
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    for i in 0..words.len().saturating_sub(n - 1) {
        *m.entry(&words[i..i + n]).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU-4 with one reference per hypothesis, clipped counts,
/// uniform weights, no smoothing.
pub fn bleu4_detail<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuDetail, MetricsError> {
    if hypotheses.len() != references.len() {
        return Err(MetricsError::Misaligned(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            for (g, &c) in &hc {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    let score = if matches.iter().any(|&m| m == 0) {
        0.0
    } else {
        let log_p: f64 = (0..4)
            .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
            .sum::<f64>()
            / 4.0;
        brevity_penalty * log_p.exp()
    };
    Ok(BleuDetail {
        score,
        matches,
        totals,
        hyp_len,
        ref_len,
        brevity_penalty,
    })
}

pub fn bleu4<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64, MetricsError> {
    bleu4_detail(hypotheses, references).map(|d| d.score)
}

/// Which report columns a system produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scope {
    pub current: bool,
    pub response: bool,
    pub text: bool,
}

impl Scope {
    pub fn for_ordering(o: TaskOrdering) -> Self {
        Self {
            current: o.predicts_current(),
            response: o.predicts_response(),
            text: true,
        }
    }

    pub const LABELS_ONLY: Scope = Scope {
        current: true,
        response: true,
        text: false,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub curr_ua: Option<f64>,
    pub resp_ua: Option<f64>,
    pub bleu4: Option<f64>,
    pub bleu4_x100: Option<f64>,
    pub malformed_rate: f64,
    pub curr_confusion: Option<ConfusionMatrix>,
    pub resp_confusion: Option<ConfusionMatrix>,
    pub example_count: usize,
    pub config_fingerprint: String,
}

pub fn evaluate(
    predictions: &[ParsedPrediction],
    golds: &[Gold],
    ordering: TaskOrdering,
) -> Result<EvalReport, MetricsError> {
    evaluate_scoped(predictions, golds, Scope::for_ordering(ordering))
}

pub fn evaluate_scoped(
    predictions: &[ParsedPrediction],
    golds: &[Gold],
    scope: Scope,
) -> Result<EvalReport, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::Misaligned(predictions.len(), golds.len()));
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let fallback = SentimentLabel::Neutral;
    let curr_confusion = scope.current.then(|| {
        ConfusionMatrix::from_pairs(
            golds
                .iter()
                .zip(predictions)
                .map(|(g, p)| (g.current, p.current_label.unwrap_or(fallback))),
        )
    });
    let resp_confusion = scope.response.then(|| {
        ConfusionMatrix::from_pairs(
            golds
                .iter()
                .zip(predictions)
                .map(|(g, p)| (g.response, p.response_label.unwrap_or(fallback))),
        )
    });
    let bleu4 = if scope.text {
        let hyps: Vec<&str> = predictions.iter().map(|p| p.response_text.as_str()).collect();
        let refs: Vec<&str> = golds.iter().map(|g| g.response_text.as_str()).collect();
        Some(self::bleu4(&hyps, &refs)?)
    } else {
        None
    };
    let malformed = predictions.iter().filter(|p| p.malformed).count();
    Ok(EvalReport {
        curr_ua: curr_confusion.as_ref().map(unweighted_accuracy).transpose()?,
        resp_ua: resp_confusion.as_ref().map(unweighted_accuracy).transpose()?,
        bleu4,
        bleu4_x100: bleu4.map(|b| b * 100.0),
        malformed_rate: malformed as f64 / predictions.len() as f64,
        curr_confusion,
        resp_confusion,
        example_count: predictions.len(),
        config_fingerprint: String::new(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", x * 100.0))
}

/// Renders rows as a fixed-width grid: name, Curr UA, Resp UA, BLEU, malformed.
pub fn render_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$} | {:>7} | {:>7} | {:>6} | {:>9}\n",
        "system", "Curr UA", "Resp UA", "BLEU", "malformed"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 43)));
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$} | {:>7} | {:>7} | {:>6} | {:>8.1}%\n",
            name,
            cell(r.curr_ua),
            cell(r.resp_ua),
            cell(r.bleu4),
            r.malformed_rate * 100.0
        ));
    }
    out
}
