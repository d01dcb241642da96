//! Dialogue data model, synthetic corpus generation and the on-disk corpus
//! format (`corpus.jsonl` plus one `PLFF` feature file per utterance).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::speech::{self, FeatureError, FrameMatrix};

pub const CORPUS_FILE: &str = "corpus.jsonl";

/// Per-dimension standard deviation of synthetic frame noise.
pub const FEATURE_NOISE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("features_ref {features_ref}: {source}")]
    Features {
        features_ref: String,
        #[source]
        source: FeatureError,
    },
    #[error("invalid corpus: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Neutral,
    Negative,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [Self::Positive, Self::Neutral, Self::Negative];

    pub fn code(self) -> usize {
        match self {
            Self::Positive => 0,
            Self::Neutral => 1,
            Self::Negative => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Neutral => "neutral",
            Self::Negative => "negative",
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SentimentLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown sentiment label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Self::A => Self::B,
            Self::B => Self::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Dev, Self::Test];
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    /// Lowercase words separated by single spaces.
    pub text: String,
    pub label: SentimentLabel,
    pub features_ref: String,
    pub frame_count: usize,
}

impl Turn {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    fn validate(&self) -> Result<(), String> {
        if self.turns.len() < 2 {
            return Err(format!("dialogue {} has {} turns, need at least 2", self.id, self.turns.len()));
        }
        for (k, t) in self.turns.iter().enumerate() {
            if t.words().next().is_none() {
                return Err(format!("dialogue {} turn {k}: empty text", self.id));
            }
            if t.text.chars().any(|c| c.is_uppercase()) {
                return Err(format!("dialogue {} turn {k}: text is not lowercase", self.id));
            }
            if t.frame_count == 0 {
                return Err(format!("dialogue {} turn {k}: frame_count must be positive", self.id));
            }
            if k > 0 && t.speaker == self.turns[k - 1].speaker {
                return Err(format!("dialogue {} turn {k}: speakers must alternate", self.id));
            }
        }
        Ok(())
    }
}

/// Dialogues with their split assignment and the frame features every turn
/// points at, keyed by `features_ref`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub features: BTreeMap<String, FrameMatrix>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.features.values().next().map(FrameMatrix::dim)
    }

    pub fn turn_count(&self, split: Split) -> usize {
        self.split(split).map(|d| d.turns.len()).sum()
    }

    /// Checks dialogue and split invariants and that every turn's features
    /// are present with the declared frame count.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = BTreeSet::new();
        let dim = self.feature_dim();
        for d in &self.dialogues {
            d.validate().map_err(CorpusError::Invalid)?;
            if !ids.insert(d.id.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate dialogue id {}", d.id)));
            }
            for t in &d.turns {
                let m = self.features.get(&t.features_ref).ok_or_else(|| {
                    CorpusError::Invalid(format!("unresolved features_ref {}", t.features_ref))
                })?;
                if m.frames() != t.frame_count {
                    return Err(CorpusError::Invalid(format!(
                        "features_ref {}: {} frames on disk, {} declared",
                        t.features_ref,
                        m.frames(),
                        t.frame_count
                    )));
                }
                if Some(m.dim()) != dim {
                    return Err(CorpusError::Invalid(format!(
                        "features_ref {}: inconsistent feature dimension",
                        t.features_ref
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic corpus. Sentiment is planted in the speech
/// features (one Gaussian cluster per true label) and only partially in the
/// text: with probability `sarcasm_rate` a turn's words come from a template
/// of a different label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_dialogues: usize,
    pub turns_per_dialogue: (usize, usize),
    /// Distribution of the first label, indexed by label code.
    pub class_prior: [f64; 3],
    /// Row-stochastic label transition matrix, indexed by label code.
    pub markov_transition: [[f64; 3]; 3],
    pub sarcasm_rate: f64,
    pub feature_dim: usize,
    /// Euclidean distance between any two label centroids.
    pub feature_cluster_separation: f64,
    pub frame_count: (usize, usize),
    /// Word templates indexed by label code.
    pub template_bank: [Vec<String>; 3],
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

fn templates(lines: &[&str]) -> Vec<String> {
    lines.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_dialogues: 200,
            turns_per_dialogue: (4, 8),
            // positive / neutral / negative shares of the reference training split
            class_prior: [0.30, 0.53, 0.17],
            markov_transition: [[0.6, 0.2, 0.2], [0.2, 0.6, 0.2], [0.2, 0.2, 0.6]],
            sarcasm_rate: 0.3,
            feature_dim: 16,
            feature_cluster_separation: 6.0,
            frame_count: (3, 8),
            template_bank: [
                templates(&[
                    "that sounds great",
                    "i really love that",
                    "oh that is wonderful",
                    "yeah it was a lot of fun",
                    "i think that is really nice",
                    "we had a great time",
                    "that is pretty good",
                    "i enjoy it a lot",
                ]),
                templates(&[
                    "i see",
                    "we went there last year",
                    "it depends on the weather",
                    "i guess so",
                    "the kids are in school now",
                    "we usually watch the news",
                    "okay",
                    "i think it was in texas",
                ]),
                templates(&[
                    "that is terrible",
                    "i hate it",
                    "it was a bad game",
                    "that is really awful",
                    "i do not like that at all",
                    "it makes me so angry",
                    "that was a waste of time",
                    "we had a horrible week",
                ]),
            ],
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

fn check_simplex(name: &str, p: &[f64; 3]) -> Result<(), CorpusError> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CorpusError::InvalidSpec(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidSpec(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.n_dialogues == 0 {
            return bad("n_dialogues must be positive".into());
        }
        let (tmin, tmax) = self.turns_per_dialogue;
        if tmin < 2 || tmin > tmax {
            return bad(format!("turns_per_dialogue ({tmin}, {tmax}) must satisfy 2 <= min <= max"));
        }
        check_simplex("class_prior", &self.class_prior)?;
        for (i, row) in self.markov_transition.iter().enumerate() {
            check_simplex(&format!("markov_transition row {i}"), row)?;
        }
        if !(0.0..=1.0).contains(&self.sarcasm_rate) {
            return bad(format!("sarcasm_rate {} outside [0, 1]", self.sarcasm_rate));
        }
        if self.feature_dim < 3 {
            return bad(format!("feature_dim {} must be at least 3", self.feature_dim));
        }
        let sep = self.feature_cluster_separation;
        if !sep.is_finite() || sep < 0.0 {
            return bad(format!("feature_cluster_separation {sep} must be finite and >= 0"));
        }
        let (fmin, fmax) = self.frame_count;
        if fmin < 1 || fmin > fmax {
            return bad(format!("frame_count ({fmin}, {fmax}) must satisfy 1 <= min <= max"));
        }
        for (code, bank) in self.template_bank.iter().enumerate() {
            let label = SentimentLabel::ALL[code];
            if bank.is_empty() {
                return bad(format!("template_bank for {label} is empty"));
            }
            for t in bank {
                if t.split_whitespace().next().is_none() || t.chars().any(|c| c.is_uppercase()) {
                    return bad(format!("template {t:?} for {label} must be nonempty lowercase text"));
                }
            }
        }
        let fr = [self.dev_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..1.0).contains(f)) || fr[0] + fr[1] >= 1.0 {
            return bad("dev_fraction and test_fraction must be in [0, 1) with sum < 1".into());
        }
        Ok(())
    }

    /// Transition matrix `stay * I + (1 - stay) * 1 prior^T`, whose
    /// stationary distribution is `class_prior`.
    pub fn prior_preserving_transition(&self, stay: f64) -> [[f64; 3]; 3] {
        let mut t = [[0.0; 3]; 3];
        for (i, row) in t.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (1.0 - stay) * self.class_prior[j] + if i == j { stay } else { 0.0 };
            }
        }
        t
    }

    /// Label centroid for `label`; centroids sit on scaled basis vectors so
    /// that every pair is `feature_cluster_separation` apart.
    pub fn centroid(&self, label: SentimentLabel) -> Vec<f64> {
        let mut c = vec![0.0; self.feature_dim];
        c[label.code()] = self.feature_cluster_separation / 2f64.sqrt();
        c
    }
}

fn draw_label(rng: &mut ChaCha8Rng, p: &[f64; 3]) -> SentimentLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (code, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return SentimentLabel::ALL[code];
        }
    }
    // u landed in rounding slack past the last nonzero entry
    let last = p.iter().rposition(|&v| v > 0.0).unwrap_or(2);
    SentimentLabel::ALL[last]
}

pub fn features_ref_for(dialogue_id: &str, turn: usize) -> String {
    format!("features/{dialogue_id}/t{turn:03}.plff")
}

pub fn generate_synthetic_corpus(spec: &GeneratorSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid normal");
    let centroids: Vec<Vec<f64>> = SentimentLabel::ALL.iter().map(|&l| spec.centroid(l)).collect();

    let n = spec.n_dialogues;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_dev = (n as f64 * spec.dev_fraction).round() as usize;
    let n_train = n.saturating_sub(n_test + n_dev);

    let mut corpus = Corpus::default();
    for i in 0..n {
        let id = format!("d{i:05}");
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let n_turns = rng.random_range(spec.turns_per_dialogue.0..=spec.turns_per_dialogue.1);
        let mut turns = Vec::with_capacity(n_turns);
        let mut label = draw_label(&mut rng, &spec.class_prior);
        let mut speaker = Speaker::A;
        for k in 0..n_turns {
            if k > 0 {
                label = draw_label(&mut rng, &spec.markov_transition[label.code()]);
                speaker = speaker.other();
            }
            let surface = if rng.random::<f64>() < spec.sarcasm_rate {
                let others: Vec<_> = SentimentLabel::ALL.into_iter().filter(|&l| l != label).collect();
                others[rng.random_range(0..others.len())]
            } else {
                label
            };
            let bank = &spec.template_bank[surface.code()];
            let text = bank[rng.random_range(0..bank.len())]
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ");

            let frames = rng.random_range(spec.frame_count.0..=spec.frame_count.1);
            let centroid = &centroids[label.code()];
            let data: Vec<f32> = (0..frames * spec.feature_dim)
                .map(|j| (centroid[j % spec.feature_dim] + noise.sample(&mut rng)) as f32)
                .collect();
            let features_ref = features_ref_for(&id, k);
            let m = FrameMatrix::new(frames, spec.feature_dim, data)
                .map_err(|source| CorpusError::Features {
                    features_ref: features_ref.clone(),
                    source,
                })?;
            corpus.features.insert(features_ref.clone(), m);
            turns.push(Turn {
                speaker,
                text,
                label,
                features_ref,
                frame_count: frames,
            });
        }
        corpus.dialogues.push(Dialogue { id, split, turns });
    }
    Ok(corpus)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CORPUS_FILE);
    let mut out = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for d in &corpus.dialogues {
        let line = serde_json::to_string(d).expect("dialogue serializes");
        writeln!(out, "{line}").map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;
    for (features_ref, m) in &corpus.features {
        let p = dir.join(features_ref);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        speech::save_frame_features(&p, m).map_err(|source| CorpusError::Features {
            features_ref: features_ref.clone(),
            source,
        })?;
    }
    Ok(())
}

/// Parses `corpus.jsonl` without touching feature files.
pub fn parse_corpus_jsonl(text: &str, file: &str) -> Result<Vec<Dialogue>, CorpusError> {
    let mut dialogues = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            file: file.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        d.validate().map_err(|message| CorpusError::Parse {
            file: file.to_string(),
            line: i + 1,
            message,
        })?;
        dialogues.push(d);
    }
    Ok(dialogues)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let dir = dir.as_ref();
    let path = dir.join(CORPUS_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err(&path))?);
        text.push('\n');
    }
    let dialogues = parse_corpus_jsonl(&text, &path.display().to_string())?;
    let mut features = BTreeMap::new();
    for t in dialogues.iter().flat_map(|d| &d.turns) {
        if features.contains_key(&t.features_ref) {
            continue;
        }
        let m = speech::load_frame_features(dir.join(&t.features_ref)).map_err(|source| {
            CorpusError::Features {
                features_ref: t.features_ref.clone(),
                source,
            }
        })?;
        features.insert(t.features_ref.clone(), m);
    }
    let corpus = Corpus { dialogues, features };
    corpus.validate()?;
    Ok(corpus)
}

/// Label counts per code for one split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts(pub [usize; 3]);

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, label: SentimentLabel) -> usize {
        self.0[label.code()]
    }
}

pub fn class_distribution(corpus: &Corpus, split: Split) -> ClassCounts {
    let mut counts = ClassCounts::default();
    for t in corpus.split(split).flat_map(|d| &d.turns) {
        counts.0[t.label.code()] += 1;
    }
    counts
}

/// Label transition counts over consecutive turns, indexed [from][to].
pub fn transition_counts(corpus: &Corpus) -> [[usize; 3]; 3] {
    let mut c = [[0; 3]; 3];
    for d in &corpus.dialogues {
        for w in d.turns.windows(2) {
            c[w[0].label.code()][w[1].label.code()] += 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            n_dialogues: 30,
            feature_dim: 4,
            frame_count: (1, 3),
            seed,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn label_codes_are_fixed() {
        assert_eq!(SentimentLabel::Positive.code(), 0);
        assert_eq!(SentimentLabel::Neutral.code(), 1);
        assert_eq!(SentimentLabel::Negative.code(), 2);
        for l in SentimentLabel::ALL {
            assert_eq!(SentimentLabel::from_code(l.code()), Some(l));
            assert_eq!(l.name().parse::<SentimentLabel>().unwrap(), l);
        }
        assert_eq!(SentimentLabel::from_code(3), None);
    }

    #[test]
    fn invalid_specs_name_the_invariant() {
        let cases: Vec<(GeneratorSpec, &str)> = vec![
            (GeneratorSpec { class_prior: [0.5, 0.5, 0.5], ..small_spec(0) }, "class_prior"),
            (
                GeneratorSpec {
                    markov_transition: [[1.0, 0.0, 0.0], [0.5, 0.4, 0.0], [0.0, 0.0, 1.0]],
                    ..small_spec(0)
                },
                "markov_transition row 1",
            ),
            (GeneratorSpec { sarcasm_rate: 1.5, ..small_spec(0) }, "sarcasm_rate"),
            (GeneratorSpec { turns_per_dialogue: (1, 3), ..small_spec(0) }, "turns_per_dialogue"),
            (GeneratorSpec { feature_dim: 2, ..small_spec(0) }, "feature_dim"),
        ];
        for (spec, needle) in cases {
            let err = generate_synthetic_corpus(&spec).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_corpus(&small_spec(3)).unwrap();
        let b = generate_synthetic_corpus(&small_spec(3)).unwrap();
        let c = generate_synthetic_corpus(&small_spec(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn zero_sarcasm_keeps_text_on_label() {
        let spec = GeneratorSpec { sarcasm_rate: 0.0, ..small_spec(9) };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        for t in corpus.dialogues.iter().flat_map(|d| &d.turns) {
            assert!(spec.template_bank[t.label.code()].contains(&t.text));
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_everything() {
        let corpus = generate_synthetic_corpus(&small_spec(1)).unwrap();
        let counts: Vec<usize> = Split::ALL.iter().map(|&s| corpus.split(s).count()).collect();
        assert_eq!(counts.iter().sum::<usize>(), corpus.dialogues.len());
        assert_eq!(counts, vec![24, 3, 3]);
    }

    #[test]
    fn all_neutral_distribution() {
        let spec = GeneratorSpec {
            class_prior: [0.0, 1.0, 0.0],
            markov_transition: [[0.0, 1.0, 0.0]; 3],
            ..small_spec(2)
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let n = corpus.turn_count(Split::Train);
        assert_eq!(class_distribution(&corpus, Split::Train), ClassCounts([0, n, 0]));
    }

    #[test]
    fn distribution_conserves_turns() {
        let corpus = generate_synthetic_corpus(&small_spec(5)).unwrap();
        for s in Split::ALL {
            assert_eq!(class_distribution(&corpus, s).total(), corpus.turn_count(s));
        }
        let empty = Corpus::default();
        assert_eq!(class_distribution(&empty, Split::Dev), ClassCounts([0, 0, 0]));
    }

    #[test]
    fn jsonl_line_errors_carry_line_number() {
        let good = r#"{"id":"x","split":"train","turns":[{"speaker":"A","text":"hi","label":"neutral","features_ref":"a","frame_count":1},{"speaker":"B","text":"yo","label":"positive","features_ref":"b","frame_count":1}]}"#;
        let text = format!("{good}\n{{\"id\": 3}}\n");
        match parse_corpus_jsonl(&text, "corpus.jsonl") {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let same_speaker = good.replace("\"B\"", "\"A\"");
        let err = parse_corpus_jsonl(&same_speaker, "c").unwrap_err().to_string();
        assert!(err.contains("alternate"), "{err}");
    }
}
