//! Word-level vocabulary with reserved structural tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{Corpus, SentimentLabel};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const EOT: TokenId = 2;
pub const EOS: TokenId = 3;
pub const POSITIVE: TokenId = 4;
pub const NEUTRAL: TokenId = 5;
pub const NEGATIVE: TokenId = 6;
pub const SPEECH: TokenId = 7;

pub const RESERVED: [&str; 8] = [
    "<pad>",
    "<unk>",
    "<eot>",
    "<eos>",
    "<positive>",
    "<neutral>",
    "<negative>",
    "<speech>",
];

pub fn marker(label: SentimentLabel) -> TokenId {
    POSITIVE + label.code() as TokenId
}

pub fn marker_label(id: TokenId) -> Option<SentimentLabel> {
    if (POSITIVE..=NEGATIVE).contains(&id) {
        SentimentLabel::from_code((id - POSITIVE) as usize)
    } else {
        None
    }
}

/// True for ids that stand for ordinary words, including `<unk>`.
pub fn is_word(id: TokenId) -> bool {
    id == UNK || id as usize >= RESERVED.len()
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in the given order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Looks up a plain word. Reserved spellings are never matched, so the
    /// text "<positive>" maps to `<unk>` rather than to the marker.
    pub fn word_id(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) if is_word(id) => id,
            _ => UNK,
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let words = ids
            .iter()
            .map(|&id| self.token(id).ok_or(VocabError::UnknownId(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(words.join(" "))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("string list serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let tokens: Vec<String> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens in order".into());
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(format!("duplicate token {dup:?}"));
        }
        Ok(Self::from_words(tokens.into_iter().skip(RESERVED.len())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| VocabError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let file_err = |message: String| VocabError::File {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        Self::from_json(&text).map_err(file_err)
    }
}

/// Reserved tokens, then every word seen at least `min_count` times ordered
/// by descending count with lexicographic tie-breaking.
pub fn build_vocabulary(corpus: &Corpus, min_count: usize) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
        for w in t.words() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocabulary::from_words(words.into_iter().map(|(w, _)| w))
}
