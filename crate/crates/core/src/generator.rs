//! Autoregressive decoding of the serialized target and marker parsing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, SentimentLabel};
use crate::model::{softmax, FeatureBank, Input, ModelError, ModelParameters};
use crate::prompt::{self, AssemblyConfig, PromptError, SerializedExample, TaskOrdering};
use crate::tokenizer::{self, TokenId, Vocabulary, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        match self.mode {
            DecodeMode::Sample { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(format!("sampling temperature must be positive, got {temperature}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid generation config: {0}")]
    Config(String),
}

/// Lowest index among the maxima.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes until `<eos>`, `max_new_tokens`, or the position budget runs out.
/// The returned tokens include the `<eos>` when one was produced.
pub fn generate(
    params: &ModelParameters,
    prompt: &[Input],
    cfg: &GenerationConfig,
) -> Result<Vec<TokenId>, GenerateError> {
    cfg.validate().map_err(GenerateError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec = params.decoder();
    let mut logits = Vec::new();
    for inp in prompt {
        logits = dec.push(inp)?;
    }
    let max_pos = params.config.max_positions;
    let mut out = Vec::new();
    while out.len() < cfg.max_new_tokens && !logits.is_empty() {
        let next = match cfg.mode {
            DecodeMode::Greedy => argmax(&logits),
            DecodeMode::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
                let p = softmax(&scaled);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = argmax(&p);
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            }
        } as TokenId;
        out.push(next);
        if next == EOS || dec.position() >= max_pos {
            break;
        }
        logits = dec.push(&Input::Token(next))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub current_label: Option<SentimentLabel>,
    pub response_label: Option<SentimentLabel>,
    pub response_text: String,
    pub malformed: bool,
}

/// Reads labels and text back out of a generated target. Any deviation from
/// the ordering's grammar sets `malformed`; labels the ordering requires but
/// that cannot be found fall back to neutral.
pub fn parse_output(tokens: &[TokenId], ordering: TaskOrdering, vocab: &Vocabulary) -> ParsedPrediction {
    let eos = tokens.iter().position(|&t| t == EOS);
    let body = &tokens[..eos.unwrap_or(tokens.len())];
    let marker_at = |i: Option<usize>| i.and_then(|i| body.get(i)).and_then(|&t| tokenizer::marker_label(t));

    let (cur_pos, resp_pos) = match ordering {
        TaskOrdering::CurrRespText => (Some(0), Some(1)),
        TaskOrdering::CurrTextResp => (Some(0), body.len().checked_sub(1).filter(|&i| i > 0)),
        TaskOrdering::RespText => (None, Some(0)),
        TaskOrdering::TextOnly => (None, None),
    };
    let current = marker_at(cur_pos);
    let response = marker_at(resp_pos);

    let mut well_formed = eos.is_some();
    if ordering.predicts_current() && current.is_none() {
        well_formed = false;
    }
    if ordering.predicts_response() && response.is_none() {
        well_formed = false;
    }
    let mut text = Vec::new();
    for (i, &t) in body.iter().enumerate() {
        let used = (current.is_some() && cur_pos == Some(i)) || (response.is_some() && resp_pos == Some(i));
        if used {
            continue;
        }
        if tokenizer::is_word(t) {
            text.push(t);
        } else {
            well_formed = false;
        }
    }
    let fallback = SentimentLabel::Neutral;
    ParsedPrediction {
        current_label: ordering.predicts_current().then(|| current.unwrap_or(fallback)),
        response_label: ordering.predicts_response().then(|| response.unwrap_or(fallback)),
        response_text: vocab.decode(&text).unwrap_or_default(),
        malformed: !well_formed,
    }
}

/// Greedy (or sampled) prediction for one already assembled example.
pub fn predict_example(
    params: &ModelParameters,
    bank: &FeatureBank,
    vocab: &Vocabulary,
    ex: &SerializedExample,
    ordering: TaskOrdering,
    gen_cfg: &GenerationConfig,
) -> Result<ParsedPrediction, GenerateError> {
    let inputs = bank.resolve(&ex.prompt)?;
    let tokens = generate(params, &inputs, gen_cfg)?;
    Ok(parse_output(&tokens, ordering, vocab))
}

/// Assembles the prompt for turn `n` from gold history and current turn,
/// generates, and parses.
pub fn predict_turn(
    params: &ModelParameters,
    bank: &FeatureBank,
    vocab: &Vocabulary,
    dialogue: &Dialogue,
    n: usize,
    assembly: &AssemblyConfig,
    gen_cfg: &GenerationConfig,
) -> Result<ParsedPrediction, GenerateError> {
    let ex = prompt::truncate(
        prompt::assemble_example(dialogue, n, assembly, vocab)?,
        assembly.max_positions,
    )?;
    predict_example(params, bank, vocab, &ex, assembly.ordering, gen_cfg)
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub n: usize,
    pub current_label: Option<SentimentLabel>,
    pub response_label: Option<SentimentLabel>,
    pub response_text: String,
    pub malformed: bool,
}

impl PredictionRecord {
    pub fn new(dialogue_id: &str, n: usize, p: &ParsedPrediction) -> Self {
        Self {
            dialogue_id: dialogue_id.to_string(),
            n,
            current_label: p.current_label,
            response_label: p.response_label,
            response_text: p.response_text.clone(),
            malformed: p.malformed,
        }
    }
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
