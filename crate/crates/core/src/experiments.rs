//! Declarative experiment configs, the row presets, single runs with
//! on-disk artifacts, and one-axis ablations averaged over seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{self, BaselineError, ClassTarget, Classifier, ClassifierSpec, Modality};
use crate::corpus::{self, Corpus, CorpusError, GeneratorSpec, Split};
use crate::generator::{self, GenerateError, GenerationConfig, ParsedPrediction, PredictionRecord};
use crate::metrics::{self, EvalReport, MetricsError, Scope};
use crate::model::{Checkpoint, FeatureBank, ModelConfig, ModelError, ModelParameters};
use crate::prompt::{self, AssemblyConfig, Gold, PromptError, TaskOrdering};
use crate::tokenizer::{build_vocabulary, VocabError, Vocabulary};
use crate::trainer::{self, LogRecord, TrainConfig, TrainError};

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "SPOKENLM_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Generator(GeneratorSpec),
    /// Directory holding `corpus.jsonl` and the feature files it references.
    Path(String),
}

/// Model shape; vocabulary size, feature dimension and position budget are
/// taken from the corpus and the assembly config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            model_dim: m.model_dim,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            mlp_ratio: m.mlp_ratio,
            tie_embeddings: m.tie_embeddings,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Serialized,
    Classifier { modality: Modality },
    LmOnly,
    Random,
}

impl System {
    pub fn name(self) -> String {
        match self {
            System::Serialized => "serialized".into(),
            System::Classifier { modality } => format!("classifier({})", modality.name()),
            System::LmOnly => "lm_only".into(),
            System::Random => "random".into(),
        }
    }
}

/// Corpus, parameter-init and data-order seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub corpus: u64,
    pub init: u64,
    pub order: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            corpus: 0,
            init: 1,
            order: 2,
        }
    }
}

impl Seeds {
    pub fn offset(self, k: u64) -> Self {
        Self {
            corpus: self.corpus + k,
            init: self.init + k,
            order: self.order + k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub min_count: usize,
    pub output_dir: Option<String>,
    pub system: System,
    pub seeds: Seeds,
    pub corpus: CorpusSource,
    pub assembly: AssemblyConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "row15".into(),
            min_count: 1,
            output_dir: None,
            system: System::Serialized,
            seeds: Seeds::default(),
            corpus: CorpusSource::Generator(GeneratorSpec::default()),
            assembly: AssemblyConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Resolves the LM-only system into the serialized pipeline and pushes
    /// the seed triple into the sections that consume it.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        if c.system == System::LmOnly {
            c.system = System::Serialized;
            c.assembly.ordering = TaskOrdering::TextOnly;
            c.assembly.use_context_sentiment = false;
        }
        if let CorpusSource::Generator(g) = &mut c.corpus {
            g.seed = c.seeds.corpus;
        }
        c.train.seed = c.seeds.order;
        c.generation.seed = c.seeds.order;
        c
    }

    /// SHA-256 of the canonical JSON of the normalized config, excluding the
    /// run name and output location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.normalized();
        c.name.clear();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            model_dim: self.model.model_dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            mlp_ratio: self.model.mlp_ratio,
            max_positions: self.assembly.max_positions,
            feature_dim,
            tie_embeddings: self.model.tie_embeddings,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let c = self.normalized();
        let cfg = |m: String| ExperimentError::Config(m);
        c.assembly.validate().map_err(|e| cfg(format!("assembly: {e}")))?;
        c.train.validate().map_err(|e| cfg(format!("train: {e}")))?;
        c.generation.validate().map_err(|e| cfg(format!("generation: {e}")))?;
        let feature_dim = match &c.corpus {
            CorpusSource::Generator(g) => {
                g.validate().map_err(|e| cfg(format!("corpus.generator: {e}")))?;
                g.feature_dim
            }
            CorpusSource::Path(p) if p.is_empty() => return Err(cfg("corpus.path is empty".into())),
            CorpusSource::Path(_) => 1,
        };
        c.model_config(crate::tokenizer::RESERVED.len(), feature_dim)
            .validate()
            .map_err(|e| cfg(format!("model: {e}")))?;
        if c.min_count == 0 {
            return Err(cfg("min_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Output directory: `output_dir` (or the run name) under the root given
    /// by the environment, unless it is already absolute.
    pub fn resolve_output_dir(&self) -> PathBuf {
        let rel = self.output_dir.clone().unwrap_or_else(|| self.name.clone());
        let rel = PathBuf::from(rel);
        if rel.is_absolute() {
            rel
        } else {
            output_root().join(rel)
        }
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

// ---------------------------------------------------------------------------
// presets

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextModality {
    None,
    T,
    TS,
}

/// One row of the comparison grid: method, current-turn modality, context
/// modality and context sentiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSpec {
    pub row: usize,
    pub system: System,
    pub current_speech: bool,
    pub context: ContextModality,
    pub sentiment: bool,
}

pub const ROWS: [RowSpec; 12] = {
    use ContextModality as C;
    const fn r(row: usize, system: System, current_speech: bool, context: C, sentiment: bool) -> RowSpec {
        RowSpec {
            row,
            system,
            current_speech,
            context,
            sentiment,
        }
    }
    [
        r(4, System::Random, false, C::None, false),
        r(5, System::LmOnly, false, C::None, false),
        r(6, System::LmOnly, false, C::T, false),
        r(7, System::Classifier { modality: Modality::T }, false, C::None, false),
        r(8, System::Classifier { modality: Modality::S }, true, C::None, false),
        r(9, System::Classifier { modality: Modality::TS }, true, C::None, false),
        r(10, System::Serialized, false, C::None, false),
        r(11, System::Serialized, false, C::T, false),
        r(12, System::Serialized, false, C::T, true),
        r(13, System::Serialized, true, C::None, false),
        r(14, System::Serialized, true, C::TS, false),
        r(15, System::Serialized, true, C::TS, true),
    ]
};

pub fn preset_names() -> Vec<String> {
    ROWS.iter().map(|r| format!("row{}", r.row)).collect()
}

pub fn apply_row(base: &ExperimentConfig, row: &RowSpec) -> ExperimentConfig {
    let mut c = base.clone();
    c.name = format!("row{}", row.row);
    c.system = row.system;
    c.assembly.use_current_speech = row.current_speech;
    match row.context {
        ContextModality::None => {
            c.assembly.window = 0;
            c.assembly.use_context_text = false;
            c.assembly.use_context_speech = false;
        }
        ContextModality::T => {
            c.assembly.use_context_text = true;
            c.assembly.use_context_speech = false;
        }
        ContextModality::TS => {
            c.assembly.use_context_text = true;
            c.assembly.use_context_speech = true;
        }
    }
    c.assembly.use_context_sentiment = row.sentiment;
    c
}

/// Preset for a comparison row (`row4` ... `row15`) on the default toy setup.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let base = ExperimentConfig::default();
    ROWS.iter()
        .find(|r| format!("row{}", r.row) == name)
        .map(|r| apply_row(&base, r))
}

// ---------------------------------------------------------------------------
// runs

pub fn load_or_generate_corpus(cfg: &ExperimentConfig) -> Result<Corpus, ExperimentError> {
    match &cfg.normalized().corpus {
        CorpusSource::Generator(g) => Ok(corpus::generate_synthetic_corpus(g)?),
        CorpusSource::Path(p) => Ok(corpus::load_corpus(p)?),
    }
}

/// Gold labels and response text for every turn with a successor in `split`.
pub fn golds(corpus: &Corpus, split: Split) -> Vec<(String, usize, Gold)> {
    let mut out = Vec::new();
    for d in corpus.split(split) {
        for n in 0..d.turns.len() - 1 {
            out.push((
                d.id.clone(),
                n,
                Gold {
                    current: d.turns[n].label,
                    response: d.turns[n + 1].label,
                    response_text: d.turns[n + 1].text.clone(),
                },
            ));
        }
    }
    out
}

/// Trained state of a system, enough to predict on any split.
pub enum Trained {
    Serialized {
        params: ModelParameters,
        log: Vec<LogRecord>,
        best_step: usize,
    },
    Classifier {
        current: Classifier,
        response: Classifier,
        logs: [Vec<LogRecord>; 2],
    },
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

struct Prepared {
    cfg: ExperimentConfig,
    corpus: Corpus,
    vocab: Vocabulary,
    bank: FeatureBank,
    model: ModelConfig,
}

fn prepare(config: &ExperimentConfig, vocab: Option<Vocabulary>) -> Result<Prepared, ExperimentError> {
    config.validate()?;
    let cfg = config.normalized();
    let corpus = load_or_generate_corpus(&cfg)?;
    let vocab = vocab.unwrap_or_else(|| build_vocabulary(&corpus, cfg.min_count));
    let bank = FeatureBank::from_corpus(&corpus);
    let feature_dim = corpus
        .feature_dim()
        .ok_or_else(|| ExperimentError::Config("corpus has no feature files".into()))?;
    let model = cfg.model_config(vocab.len(), feature_dim);
    Ok(Prepared {
        cfg,
        corpus,
        vocab,
        bank,
        model,
    })
}

fn train_system(p: &Prepared) -> Result<Trained, ExperimentError> {
    let cfg = &p.cfg;
    match cfg.system {
        System::Serialized | System::LmOnly => {
            let train = prompt::dataset(&p.corpus, Split::Train, &cfg.assembly, &p.vocab)?;
            let dev = prompt::dataset(&p.corpus, Split::Dev, &cfg.assembly, &p.vocab)?;
            let init = ModelParameters::init(p.model.clone(), cfg.seeds.init)?;
            let (params, out) = trainer::train_lm(&cfg.train, init, &train, &dev, &p.bank)?;
            Ok(Trained::Serialized {
                params,
                log: out.log,
                best_step: out.best_step,
            })
        }
        System::Classifier { modality } => {
            let fit = |target: ClassTarget| {
                let spec = ClassifierSpec {
                    modality,
                    target,
                    backbone: p.model.clone(),
                };
                baselines::train_classifier(spec, &p.corpus, &p.vocab, &p.bank, &cfg.train, cfg.seeds.init)
            };
            let (current, lc) = fit(ClassTarget::Current)?;
            let (response, lr) = fit(ClassTarget::Response)?;
            Ok(Trained::Classifier {
                current,
                response,
                logs: [lc.log, lr.log],
            })
        }
        System::Random => Ok(Trained::Random),
    }
}

fn predict_split(p: &Prepared, trained: &Trained, split: Split) -> Result<(Vec<ParsedPrediction>, Vec<Gold>, Vec<(String, usize)>), ExperimentError> {
    let cfg = &p.cfg;
    let mut preds = Vec::new();
    let mut gs = Vec::new();
    let mut keys = Vec::new();
    match trained {
        Trained::Serialized { params, .. } => {
            for ex in prompt::dataset(&p.corpus, split, &cfg.assembly, &p.vocab)? {
                preds.push(generator::predict_example(
                    params,
                    &p.bank,
                    &p.vocab,
                    &ex,
                    cfg.assembly.ordering,
                    &cfg.generation,
                )?);
                keys.push((ex.dialogue_id.clone(), ex.n));
                gs.push(ex.gold);
            }
        }
        Trained::Classifier { current, response, .. } => {
            for d in p.corpus.split(split) {
                for n in 0..d.turns.len() - 1 {
                    preds.push(ParsedPrediction {
                        current_label: Some(baselines::classify(current, &p.bank, &p.vocab, d, n)?),
                        response_label: Some(baselines::classify(response, &p.bank, &p.vocab, d, n)?),
                        response_text: String::new(),
                        malformed: false,
                    });
                }
            }
            for (id, n, g) in golds(&p.corpus, split) {
                keys.push((id, n));
                gs.push(g);
            }
        }
        Trained::Random => {
            let all = golds(&p.corpus, split);
            let cur = baselines::random_baseline(cfg.seeds.init, all.len());
            let resp = baselines::random_baseline(cfg.seeds.init.wrapping_add(1 << 32), all.len());
            for (i, (id, n, g)) in all.into_iter().enumerate() {
                preds.push(ParsedPrediction {
                    current_label: Some(cur[i]),
                    response_label: Some(resp[i]),
                    response_text: String::new(),
                    malformed: false,
                });
                keys.push((id, n));
                gs.push(g);
            }
        }
    }
    Ok((preds, gs, keys))
}

fn scope(cfg: &ExperimentConfig) -> Scope {
    match cfg.system {
        System::Serialized | System::LmOnly => Scope::for_ordering(cfg.assembly.ordering),
        System::Classifier { .. } | System::Random => Scope::LABELS_ONLY,
    }
}

fn evaluate_trained(p: &Prepared, trained: &Trained) -> Result<RunOutcome, ExperimentError> {
    let (preds, gs, keys) = predict_split(p, trained, Split::Test)?;
    let mut report = metrics::evaluate_scoped(&preds, &gs, scope(&p.cfg))?;
    report.config_fingerprint = p.cfg.fingerprint();
    let predictions = keys
        .iter()
        .zip(&preds)
        .map(|((id, n), pr)| PredictionRecord::new(id, *n, pr))
        .collect();
    Ok(RunOutcome { report, predictions })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn log_jsonl(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
        .collect()
}

fn write_outcome(dir: &Path, outcome: &RunOutcome) -> Result<(), ExperimentError> {
    write(
        &dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&outcome.report).expect("report serializes") + "\n",
    )?;
    write(&dir.join(PREDICTIONS_FILE), generator::predictions_jsonl(&outcome.predictions))
}

fn write_artifacts(dir: &Path, p: &Prepared, trained: &Trained, outcome: &RunOutcome) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(CONFIG_FILE), p.cfg.to_toml_string())?;
    p.vocab.save(dir.join(VOCAB_FILE))?;
    let meta = |extra: serde_json::Value| {
        serde_json::json!({
            "name": p.cfg.name,
            "system": p.cfg.system.name(),
            "config_fingerprint": p.cfg.fingerprint(),
            "detail": extra,
        })
    };
    match trained {
        Trained::Serialized { params, log, best_step } => {
            Checkpoint::from_params(params, meta(serde_json::json!({ "best_step": best_step })))
                .save(dir.join(CHECKPOINT_FILE))?;
            write(&dir.join(TRAIN_LOG_FILE), log_jsonl(log))?;
        }
        Trained::Classifier { current, response, logs } => {
            for (clf, log, tag) in [(current, &logs[0], "current"), (response, &logs[1], "response")] {
                clf.to_checkpoint(meta(serde_json::json!({ "target": tag })))
                    .save(dir.join(format!("checkpoint_{tag}.bin")))?;
                write(&dir.join(format!("train_log_{tag}.jsonl")), log_jsonl(log))?;
            }
        }
        Trained::Random => {}
    }
    write_outcome(dir, outcome)
}

/// Trains (or instantiates) the configured system, evaluates it on the test
/// split with the configured decoding, and writes artifacts when `out` is set.
pub fn run(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome, ExperimentError> {
    let p = prepare(config, None)?;
    let trained = train_system(&p)?;
    let outcome = evaluate_trained(&p, &trained)?;
    if let Some(dir) = out {
        write_artifacts(dir, &p, &trained, &outcome)?;
    }
    Ok(outcome)
}

/// Re-evaluates a finished run directory from its saved config, vocabulary
/// and checkpoints, rewriting its report and predictions.
pub fn evaluate_run_dir(dir: &Path) -> Result<RunOutcome, ExperimentError> {
    let cfg = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let p = prepare(&cfg, Some(vocab))?;
    let trained = match p.cfg.system {
        System::Serialized | System::LmOnly => {
            let ck = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
            let params = ck.params()?;
            if params.config != p.model {
                return Err(ExperimentError::Config(format!(
                    "checkpoint model config {:?} does not match run config {:?}",
                    params.config, p.model
                )));
            }
            Trained::Serialized {
                params,
                log: Vec::new(),
                best_step: 0,
            }
        }
        System::Classifier { modality } => {
            let load = |tag: &str, target| -> Result<Classifier, ExperimentError> {
                let ck = Checkpoint::load(dir.join(format!("checkpoint_{tag}.bin")))?;
                Ok(Classifier::from_checkpoint(&ck, modality, target)?)
            };
            Trained::Classifier {
                current: load("current", ClassTarget::Current)?,
                response: load("response", ClassTarget::Response)?,
                logs: [Vec::new(), Vec::new()],
            }
        }
        System::Random => Trained::Random,
    };
    let outcome = evaluate_trained(&p, &trained)?;
    write_outcome(dir, &outcome)?;
    Ok(outcome)
}

/// Writes the configured corpus (generated or copied) to `dir`.
pub fn gen_corpus(cfg: &ExperimentConfig, dir: &Path) -> Result<Corpus, ExperimentError> {
    let corpus = load_or_generate_corpus(cfg)?;
    corpus::save_corpus(&corpus, dir)?;
    Ok(corpus)
}

pub fn load_report(dir: &Path) -> Result<EvalReport, ExperimentError> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Ordering,
    Window,
    Modality,
    Sentiment,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Ordering => "ordering",
            Axis::Window => "window",
            Axis::Modality => "modality",
            Axis::Sentiment => "sentiment",
        }
    }

    /// the three marker orderings, the w sweep, both modalities, sentiment on/off.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Ordering => &["curr_resp_text", "curr_text_resp", "resp_text"],
            Axis::Window => &["0", "2", "4"],
            Axis::Modality => &["T", "T+S"],
            Axis::Sentiment => &["off", "on"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ordering" => Ok(Axis::Ordering),
            "window" => Ok(Axis::Window),
            "modality" => Ok(Axis::Modality),
            "sentiment" | "sentiment-context" | "sentiment_context" => Ok(Axis::Sentiment),
            _ => Err(format!("unknown ablation axis {s:?}")),
        }
    }
}

pub fn apply_axis(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig, ExperimentError> {
    let bad = || ExperimentError::Config(format!("bad value {value:?} for axis {}", axis.name()));
    let mut c = base.clone();
    match axis {
        Axis::Ordering => c.assembly.ordering = value.parse().map_err(|_| bad())?,
        Axis::Window => c.assembly.window = value.parse().map_err(|_| bad())?,
        Axis::Modality => {
            let m: Modality = value.parse().map_err(|_| bad())?;
            match &mut c.system {
                System::Classifier { modality } => *modality = m,
                _ if m == Modality::S => return Err(bad()),
                _ => {
                    c.assembly.use_current_speech = m.has_speech();
                    c.assembly.use_context_speech = m.has_speech();
                }
            }
        }
        Axis::Sentiment => {
            c.assembly.use_context_sentiment = match value {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                _ => return Err(bad()),
            }
        }
    }
    c.name = format!("{}-{}={}", base.name, axis.name(), value);
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub label: String,
    pub runs: Vec<EvalReport>,
    pub mean: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let rows: Vec<(String, EvalReport)> = self.rows.iter().map(|r| (r.label.clone(), r.mean.clone())).collect();
        metrics::render_table(&rows)
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Seed-averaged report; confusion matrices are not averaged.
pub fn mean_report(runs: &[EvalReport]) -> EvalReport {
    let bleu4 = mean_opt(runs.iter().map(|r| r.bleu4));
    EvalReport {
        curr_ua: mean_opt(runs.iter().map(|r| r.curr_ua)),
        resp_ua: mean_opt(runs.iter().map(|r| r.resp_ua)),
        bleu4,
        bleu4_x100: bleu4.map(|b| b * 100.0),
        malformed_rate: runs.iter().map(|r| r.malformed_rate).sum::<f64>() / runs.len().max(1) as f64,
        curr_confusion: None,
        resp_confusion: None,
        example_count: runs.iter().map(|r| r.example_count).sum(),
        config_fingerprint: String::new(),
    }
}

fn axis_label(axis: Axis, value: &str) -> String {
    match axis {
        Axis::Ordering => value
            .parse::<TaskOrdering>()
            .map(|o| o.arrow().to_string())
            .unwrap_or_else(|_| value.to_string()),
        _ => format!("{}={value}", axis.name()),
    }
}

/// One run per (value, seed offset); seed offsets are shared across values.
pub fn ablate(
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    n_seeds: usize,
    out: Option<&Path>,
) -> Result<AblationTable, ExperimentError> {
    if values.is_empty() || n_seeds == 0 {
        return Err(ExperimentError::Config("ablation needs at least one value and one seed".into()));
    }
    let mut rows = Vec::new();
    for value in values {
        let cfg = apply_axis(base, axis, value)?;
        let mut runs = Vec::new();
        for k in 0..n_seeds {
            let mut c = cfg.clone();
            c.seeds = base.seeds.offset(k as u64);
            let dir = out.map(|o| o.join(format!("{}={value}", axis.name())).join(format!("seed{k}")));
            runs.push(run(&c, dir.as_deref())?.report);
        }
        rows.push(AblationRow {
            value: value.clone(),
            label: axis_label(axis, value),
            mean: mean_report(&runs),
            runs,
        });
    }
    let table = AblationTable { axis, rows };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(io_err(o))?;
        write(&o.join("ablation.json"), serde_json::to_string_pretty(&table).expect("table serializes") + "\n")?;
        write(&o.join("ablation.txt"), table.render())?;
    }
    Ok(table)
}

/// Flattens a JSON value into dotted leaf paths.
pub fn flatten_json(v: &serde_json::Value) -> BTreeMap<String, serde_json::Value> {
    fn go(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(&p, x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go("", v, &mut out);
    out
}

/// Dotted paths whose values differ between two configs.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let fa = flatten_json(&serde_json::to_value(a).expect("config serializes"));
    let fb = flatten_json(&serde_json::to_value(b).expect("config serializes"));
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect()
}
