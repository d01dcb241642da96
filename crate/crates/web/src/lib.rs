//! Browser bindings. Each export returns a JSON string; the `*_json`
//! functions hold the logic and run natively as well.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use spokenlm::corpus::generate_synthetic_corpus;
use spokenlm::metrics::{bleu4_detail, unweighted_accuracy, ConfusionMatrix};
use spokenlm::prompt::dataset;
use spokenlm::speech::mean_pool;
use spokenlm::tokenizer::build_vocabulary;
use spokenlm::{AssemblyConfig, GeneratorSpec, PromptElement, SentimentLabel, Split, TaskOrdering};

fn js(r: Result<Value, String>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

fn ua_of(pairs: impl IntoIterator<Item = (SentimentLabel, SentimentLabel)>) -> Result<(f64, ConfusionMatrix), String> {
    let cm = ConfusionMatrix::from_pairs(pairs);
    Ok((unweighted_accuracy(&cm).map_err(|e| e.to_string())?, cm))
}

/// Pooled speech features of every turn projected onto the plane through the
/// three label centroids, with how well each modality alone recovers labels.
pub fn feature_scatter_json(n_dialogues: usize, sarcasm_rate: f64, separation: f64, seed: u64) -> Result<Value, String> {
    let spec = GeneratorSpec {
        n_dialogues,
        sarcasm_rate,
        feature_cluster_separation: separation,
        feature_dim: 3,
        seed,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec).map_err(|e| e.to_string())?;
    let text_label = |text: &str| {
        SentimentLabel::ALL
            .into_iter()
            .find(|l| spec.template_bank[l.code()].iter().any(|t| t == text))
    };
    let (s2, s6) = (2f64.sqrt(), 6f64.sqrt());
    let mut points = Vec::new();
    let mut by_text = Vec::new();
    let mut by_speech = Vec::new();
    let cents: Vec<Vec<f64>> = SentimentLabel::ALL.iter().map(|&l| spec.centroid(l)).collect();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        let v = mean_pool(&corpus.features[&t.features_ref]);
        let x = (v[0] - v[1]) / s2;
        let y = (v[0] + v[1] - 2.0 * v[2]) / s6;
        let tl = text_label(&t.text).ok_or("text outside the template bank")?;
        let dist = |c: &Vec<f64>| c.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let sl = SentimentLabel::ALL
            .into_iter()
            .min_by(|a, b| dist(&cents[a.code()]).total_cmp(&dist(&cents[b.code()])))
            .unwrap();
        points.push(json!([x, y, t.label.code(), tl.code()]));
        by_text.push((t.label, tl));
        by_speech.push((t.label, sl));
    }
    let (text_ua, _) = ua_of(by_text)?;
    let (speech_ua, _) = ua_of(by_speech)?;
    Ok(json!({"points": points, "text_ua": text_ua, "speech_ua": speech_ua}))
}

#[wasm_bindgen]
pub fn feature_scatter(n_dialogues: u32, sarcasm_rate: f64, separation: f64, seed: u32) -> Result<String, JsError> {
    js(feature_scatter_json(n_dialogues as usize, sarcasm_rate, separation, seed as u64))
}

/// Assembles one training example of a small generated corpus and renders
/// every prompt and target position.
#[allow(clippy::too_many_arguments)]
pub fn assemble_json(
    window: usize,
    context_text: bool,
    context_speech: bool,
    context_sentiment: bool,
    current_speech: bool,
    ordering: &str,
    max_positions: usize,
    seed: u64,
    example: usize,
) -> Result<Value, String> {
    let ordering: TaskOrdering =
        serde_json::from_value(json!(ordering)).map_err(|_| format!("unknown ordering {ordering:?}"))?;
    let cfg = AssemblyConfig {
        window,
        max_positions,
        use_context_text: context_text,
        use_context_speech: context_speech,
        use_context_sentiment: context_sentiment,
        use_current_speech: current_speech,
        ordering,
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let corpus = generate_synthetic_corpus(&GeneratorSpec {
        n_dialogues: 10,
        feature_dim: 3,
        seed,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = build_vocabulary(&corpus, 1);
    let exs = dataset(&corpus, Split::Train, &cfg, &vocab).map_err(|e| e.to_string())?;
    let ex = exs.get(example % exs.len().max(1)).ok_or("no training examples")?;
    let tok = |id| vocab.token(id).unwrap_or("?").to_string();
    let prompt: Vec<Value> = ex
        .prompt
        .iter()
        .map(|p| match p {
            PromptElement::Token(id) => json!({"kind": "token", "text": tok(*id)}),
            PromptElement::Speech(r) => json!({"kind": "speech", "text": r}),
        })
        .collect();
    let target: Vec<String> = ex.target.iter().map(|&id| tok(id)).collect();
    Ok(json!({
        "dialogue_id": ex.dialogue_id,
        "n": ex.n,
        "examples": exs.len(),
        "prompt": prompt,
        "target": target,
        "context_units": ex.context_units,
        "total": ex.total_len(),
    }))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn assemble(
    window: u32,
    context_text: bool,
    context_speech: bool,
    context_sentiment: bool,
    current_speech: bool,
    ordering: &str,
    max_positions: u32,
    seed: u32,
    example: u32,
) -> Result<String, JsError> {
    js(assemble_json(
        window as usize,
        context_text,
        context_speech,
        context_sentiment,
        current_speech,
        ordering,
        max_positions as usize,
        seed as u64,
        example as usize,
    ))
}

/// Corpus BLEU-4 over line-aligned hypotheses and references, plus UA when
/// gold and predicted label lists (whitespace separated) are given.
pub fn score_json(hypotheses: &str, references: &str, gold: &str, predicted: &str) -> Result<Value, String> {
    let h: Vec<&str> = hypotheses.lines().collect();
    let r: Vec<&str> = references.lines().collect();
    let bleu = bleu4_detail(&h, &r).map_err(|e| e.to_string())?;
    let parse = |s: &str| -> Result<Vec<SentimentLabel>, String> {
        s.split_whitespace().map(|w| w.parse::<SentimentLabel>().map_err(|e| e.to_string())).collect()
    };
    let (g, p) = (parse(gold)?, parse(predicted)?);
    let ua = if g.is_empty() && p.is_empty() {
        Value::Null
    } else if g.len() != p.len() {
        return Err(format!("{} gold labels but {} predictions", g.len(), p.len()));
    } else {
        let (ua, cm) = ua_of(g.into_iter().zip(p))?;
        json!({"ua": ua, "confusion": cm})
    };
    Ok(json!({"bleu": bleu, "labels": ua}))
}

#[wasm_bindgen]
pub fn score(hypotheses: &str, references: &str, gold: &str, predicted: &str) -> Result<String, JsError> {
    js(score_json(hypotheses, references, gold, predicted))
}
