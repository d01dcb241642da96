//! Builds the mixed token/embedding prompt and the serialized target.
//!
//! Layout of one example:
//!
//! ```text
//! [ctx turn n-w] ... [ctx turn n-1] [T_n words] <eot> [slot S_n]  ||  target ... <eos>
//! ctx turn k = [T_k words] <eot> [<L_k>] [slot S_k]
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, SentimentLabel, Split};
use crate::tokenizer::{self, TokenId, Vocabulary, EOS, EOT};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("turn index {n} out of range for dialogue {dialogue} with {turns} turns")]
    TurnOutOfRange { dialogue: String, n: usize, turns: usize },
    #[error("target of {target} positions exceeds max_positions {max}")]
    TargetTooLong { target: usize, max: usize },
    #[error("current turn cannot fit: {needed} positions needed with empty text, max_positions {max}")]
    CurrentTooLong { needed: usize, max: usize },
    #[error("invalid assembly config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PromptElement {
    Token(TokenId),
    /// Embedding slot resolved to a projected pooled feature vector at forward time.
    Speech(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrdering {
    /// current label, response label, response text
    CurrRespText,
    /// current label, response text, response label
    CurrTextResp,
    /// response label, response text
    RespText,
    /// response text only
    TextOnly,
}

impl TaskOrdering {
    pub const ALL: [TaskOrdering; 4] = [
        Self::CurrRespText,
        Self::CurrTextResp,
        Self::RespText,
        Self::TextOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CurrRespText => "curr_resp_text",
            Self::CurrTextResp => "curr_text_resp",
            Self::RespText => "resp_text",
            Self::TextOnly => "text_only",
        }
    }

    /// Row label in arrow notation.
    pub fn arrow(self) -> &'static str {
        match self {
            Self::CurrRespText => "L_n -> L_n+1 -> T_n+1",
            Self::CurrTextResp => "L_n -> T_n+1 -> L_n+1",
            Self::RespText => "L_n+1 -> T_n+1",
            Self::TextOnly => "T_n+1",
        }
    }

    pub fn predicts_current(self) -> bool {
        matches!(self, Self::CurrRespText | Self::CurrTextResp)
    }

    pub fn predicts_response(self) -> bool {
        !matches!(self, Self::TextOnly)
    }

    pub fn marker_count(self) -> usize {
        self.predicts_current() as usize + self.predicts_response() as usize
    }
}

impl fmt::Display for TaskOrdering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskOrdering {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown task ordering {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub window: usize,
    pub max_positions: usize,
    pub use_context_text: bool,
    pub use_context_speech: bool,
    pub use_context_sentiment: bool,
    pub use_current_speech: bool,
    pub ordering: TaskOrdering,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            window: 4,
            max_positions: 320,
            use_context_text: true,
            use_context_speech: true,
            use_context_sentiment: true,
            use_current_speech: true,
            ordering: TaskOrdering::CurrRespText,
        }
    }
}

impl AssemblyConfig {
    /// Positions taken by a one-word current turn with a one-word response.
    pub fn minimal_length(&self) -> usize {
        2 + self.use_current_speech as usize + self.ordering.marker_count() + 2
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.max_positions < self.minimal_length() {
            return Err(PromptError::InvalidConfig(format!(
                "max_positions {} below minimal current-turn length {}",
                self.max_positions,
                self.minimal_length()
            )));
        }
        Ok(())
    }
}

/// Ground truth for one (dialogue, n) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gold {
    pub current: SentimentLabel,
    pub response: SentimentLabel,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerializedExample {
    pub dialogue_id: String,
    pub n: usize,
    pub prompt: Vec<PromptElement>,
    pub target: Vec<TokenId>,
    /// One flag per prompt+target position; true exactly over the target.
    pub loss_mask: Vec<bool>,
    pub gold: Gold,
    /// Widths of the context-turn units at the head of the prompt, oldest first.
    pub context_units: Vec<usize>,
    pub current_text_len: usize,
}

impl SerializedExample {
    pub fn total_len(&self) -> usize {
        self.prompt.len() + self.target.len()
    }

    fn rebuild_mask(&mut self) {
        self.loss_mask = std::iter::repeat_n(false, self.prompt.len())
            .chain(std::iter::repeat_n(true, self.target.len()))
            .collect();
    }
}

/// Serialized target for the given ordering, terminated by `<eos>`.
pub fn serialize_target(
    ordering: TaskOrdering,
    current: SentimentLabel,
    response: SentimentLabel,
    response_text: &[TokenId],
) -> Vec<TokenId> {
    let cur = tokenizer::marker(current);
    let resp = tokenizer::marker(response);
    let mut t = Vec::with_capacity(response_text.len() + 3);
    match ordering {
        TaskOrdering::CurrRespText => {
            t.extend([cur, resp]);
            t.extend_from_slice(response_text);
        }
        TaskOrdering::CurrTextResp => {
            t.push(cur);
            t.extend_from_slice(response_text);
            t.push(resp);
        }
        TaskOrdering::RespText => {
            t.push(resp);
            t.extend_from_slice(response_text);
        }
        TaskOrdering::TextOnly => t.extend_from_slice(response_text),
    }
    t.push(EOS);
    t
}

pub fn assemble_example(
    dialogue: &Dialogue,
    n: usize,
    cfg: &AssemblyConfig,
    vocab: &Vocabulary,
) -> Result<SerializedExample, PromptError> {
    if n + 1 >= dialogue.turns.len() {
        return Err(PromptError::TurnOutOfRange {
            dialogue: dialogue.id.clone(),
            n,
            turns: dialogue.turns.len(),
        });
    }
    let mut prompt = Vec::new();
    let mut context_units = Vec::new();
    if cfg.use_context_text {
        for turn in &dialogue.turns[n.saturating_sub(cfg.window)..n] {
            let start = prompt.len();
            prompt.extend(vocab.encode(&turn.text).into_iter().map(PromptElement::Token));
            prompt.push(PromptElement::Token(EOT));
            if cfg.use_context_sentiment {
                prompt.push(PromptElement::Token(tokenizer::marker(turn.label)));
            }
            if cfg.use_context_speech {
                prompt.push(PromptElement::Speech(turn.features_ref.clone()));
            }
            context_units.push(prompt.len() - start);
        }
    }
    let current = &dialogue.turns[n];
    let current_ids = vocab.encode(&current.text);
    let current_text_len = current_ids.len();
    prompt.extend(current_ids.into_iter().map(PromptElement::Token));
    prompt.push(PromptElement::Token(EOT));
    if cfg.use_current_speech {
        prompt.push(PromptElement::Speech(current.features_ref.clone()));
    }

    let response = &dialogue.turns[n + 1];
    let response_ids = vocab.encode(&response.text);
    let target = serialize_target(cfg.ordering, current.label, response.label, &response_ids);
    let gold = Gold {
        current: current.label,
        response: response.label,
        response_text: vocab.decode(&response_ids).expect("encoded ids decode"),
    };
    let mut ex = SerializedExample {
        dialogue_id: dialogue.id.clone(),
        n,
        prompt,
        target,
        loss_mask: Vec::new(),
        gold,
        context_units,
        current_text_len,
    };
    ex.rebuild_mask();
    Ok(ex)
}

/// Drops whole context turns oldest-first, then left-truncates the current
/// text, until prompt+target fits in `max_positions`. The target is kept whole.
pub fn truncate(
    mut ex: SerializedExample,
    max_positions: usize,
) -> Result<SerializedExample, PromptError> {
    if ex.target.len() > max_positions {
        return Err(PromptError::TargetTooLong {
            target: ex.target.len(),
            max: max_positions,
        });
    }
    let context_len: usize = ex.context_units.iter().sum();
    let current_tail = ex.prompt.len() - context_len - ex.current_text_len;
    if current_tail + ex.target.len() > max_positions {
        return Err(PromptError::CurrentTooLong {
            needed: current_tail + ex.target.len(),
            max: max_positions,
        });
    }
    if ex.total_len() <= max_positions {
        return Ok(ex);
    }
    let mut drop = 0;
    let mut units = 0;
    while units < ex.context_units.len() && ex.total_len() - drop > max_positions {
        drop += ex.context_units[units];
        units += 1;
    }
    let excess = (ex.total_len() - drop).saturating_sub(max_positions);
    ex.context_units.drain(..units);
    ex.prompt.drain(..drop + excess);
    ex.current_text_len -= excess;
    ex.rebuild_mask();
    Ok(ex)
}

/// One truncated example per (dialogue, n) in `split`, in corpus order.
pub fn dataset(
    corpus: &Corpus,
    split: Split,
    cfg: &AssemblyConfig,
    vocab: &Vocabulary,
) -> Result<Vec<SerializedExample>, PromptError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for d in corpus.split(split) {
        for n in 0..d.turns.len() - 1 {
            out.push(truncate(assemble_example(d, n, cfg, vocab)?, cfg.max_positions)?);
        }
    }
    Ok(out)
}
