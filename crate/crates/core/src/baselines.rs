//! Comparison systems: a uniform random predictor and current-turn sequence
//! classifiers over text, speech or both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Dialogue, SentimentLabel, Split};
use crate::model::{
    self, log_softmax, Checkpoint, FeatureBank, Input, Layout, ModelConfig, ModelError, ModelParameters, TensorKind,
    TensorSpec,
};
use crate::prompt::PromptElement;
use crate::tokenizer::Vocabulary;
use crate::trainer::{self, Objective, TrainConfig, TrainError, TrainOutcome};

/// I.i.d. uniform labels.
pub fn random_baseline(seed: u64, n: usize) -> Vec<SentimentLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| SentimentLabel::ALL[rng.random_range(0..3)]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T,
    S,
    #[serde(rename = "T+S")]
    TS,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T, Modality::S, Modality::TS];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T => "T",
            Modality::S => "S",
            Modality::TS => "T+S",
        }
    }

    pub fn has_text(self) -> bool {
        self != Modality::S
    }

    pub fn has_speech(self) -> bool {
        self != Modality::T
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T" | "t" | "text" => Ok(Modality::T),
            "S" | "s" | "speech" => Ok(Modality::S),
            "T+S" | "TS" | "ts" | "t+s" => Ok(Modality::TS),
            _ => Err(format!("unknown modality {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    Current,
    Response,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub modality: Modality,
    pub target: ClassTarget,
    pub backbone: ModelConfig,
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("turn {n} has no following turn in dialogue {dialogue} ({len} turns)")]
    TurnOutOfRange { dialogue: String, n: usize, len: usize },
}

/// Backbone followed by a 3 x model_dim head and a 3-way bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierExample {
    pub dialogue_id: String,
    pub n: usize,
    pub inputs: Vec<PromptElement>,
    pub label: SentimentLabel,
}

/// Current-turn inputs: text tokens, then the speech slot.
pub fn classifier_inputs(
    modality: Modality,
    dialogue: &Dialogue,
    n: usize,
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<Vec<PromptElement>, BaselineError> {
    let turn = dialogue.turns.get(n).ok_or_else(|| BaselineError::TurnOutOfRange {
        dialogue: dialogue.id.clone(),
        n,
        len: dialogue.turns.len(),
    })?;
    let mut out = Vec::new();
    if modality.has_text() {
        let ids = vocab.encode(&turn.text);
        let room = max_positions - modality.has_speech() as usize;
        let skip = ids.len().saturating_sub(room);
        out.extend(ids[skip..].iter().map(|&t| PromptElement::Token(t)));
    }
    if modality.has_speech() {
        out.push(PromptElement::Speech(turn.features_ref.clone()));
    }
    Ok(out)
}

pub fn classifier_example(
    spec: &ClassifierSpec,
    dialogue: &Dialogue,
    n: usize,
    vocab: &Vocabulary,
) -> Result<ClassifierExample, BaselineError> {
    if n + 1 >= dialogue.turns.len() {
        return Err(BaselineError::TurnOutOfRange {
            dialogue: dialogue.id.clone(),
            n,
            len: dialogue.turns.len(),
        });
    }
    let label = match spec.target {
        ClassTarget::Current => dialogue.turns[n].label,
        ClassTarget::Response => dialogue.turns[n + 1].label,
    };
    Ok(ClassifierExample {
        dialogue_id: dialogue.id.clone(),
        n,
        inputs: classifier_inputs(spec.modality, dialogue, n, vocab, spec.backbone.max_positions)?,
        label,
    })
}

/// One example per turn that has a successor, matching the serialized dataset.
pub fn classifier_dataset(
    spec: &ClassifierSpec,
    corpus: &Corpus,
    split: Split,
    vocab: &Vocabulary,
) -> Result<Vec<ClassifierExample>, BaselineError> {
    let mut out = Vec::new();
    for d in corpus.split(split) {
        for n in 0..d.turns.len() - 1 {
            out.push(classifier_example(spec, d, n, vocab)?);
        }
    }
    Ok(out)
}

fn head_offset(cfg: &ModelConfig) -> usize {
    Layout::new(cfg).total
}

pub fn classifier_param_count(cfg: &ModelConfig) -> usize {
    head_offset(cfg) + 3 * cfg.model_dim + 3
}

/// Head logits and, when `grad` is given, the gradient of
/// -log softmax(logits)[label] accumulated into it.
fn classifier_forward(
    cfg: &ModelConfig,
    layout: &Layout,
    w: &[f64],
    inputs: &[Input],
    label: Option<SentimentLabel>,
    grad: Option<&mut [f64]>,
) -> Result<([f64; 3], f64), ModelError> {
    let trace = model::forward_trace(cfg, layout, w, inputs)?;
    let c = cfg.model_dim;
    let t_len = trace.len;
    let mut pooled = vec![0.0; c];
    for t in 0..t_len {
        for (p, h) in pooled.iter_mut().zip(trace.hidden_row(t)) {
            *p += h;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= t_len as f64);
    let hw = layout.total;
    let hb = hw + 3 * c;
    let mut logits = [0.0; 3];
    for (k, l) in logits.iter_mut().enumerate() {
        *l = w[hb + k] + pooled.iter().zip(&w[hw + k * c..hw + (k + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
    }
    let Some(label) = label else {
        return Ok((logits, 0.0));
    };
    let logp = log_softmax(&logits);
    let loss = -logp[label.code()];
    if let Some(grad) = grad {
        let mut d = [0.0; 3];
        for k in 0..3 {
            d[k] = logp[k].exp() - (k == label.code()) as usize as f64;
        }
        let mut d_pooled = vec![0.0; c];
        for k in 0..3 {
            grad[hb + k] += d[k];
            for j in 0..c {
                grad[hw + k * c + j] += d[k] * pooled[j];
                d_pooled[j] += d[k] * w[hw + k * c + j];
            }
        }
        let scale = 1.0 / t_len as f64;
        let mut d_hidden = vec![0.0; t_len * c];
        for row in d_hidden.chunks_exact_mut(c) {
            for (x, g) in row.iter_mut().zip(&d_pooled) {
                *x = g * scale;
            }
        }
        model::backward(cfg, layout, w, &trace, &d_hidden, &mut grad[..hw]);
    }
    Ok((logits, loss))
}

pub struct ClassifierObjective<'a> {
    pub config: &'a ModelConfig,
    layout: Layout,
    pub examples: &'a [ClassifierExample],
    pub bank: &'a FeatureBank,
}

impl<'a> ClassifierObjective<'a> {
    pub fn new(config: &'a ModelConfig, examples: &'a [ClassifierExample], bank: &'a FeatureBank) -> Self {
        Self {
            config,
            layout: Layout::new(config),
            examples,
            bank,
        }
    }
}

impl Objective for ClassifierObjective<'_> {
    fn num_params(&self) -> usize {
        self.layout.total + 3 * self.config.model_dim + 3
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn example_loss(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<(f64, usize), TrainError> {
        let ex = &self.examples[i];
        let inputs = self.bank.resolve(&ex.inputs)?;
        let (_, loss) = classifier_forward(self.config, &self.layout, params, &inputs, Some(ex.label), grad)?;
        Ok((loss, 1))
    }
}

impl Classifier {
    /// Backbone initialized as the language model, head weights drawn from
    /// the same seeded stream, head bias zero.
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self, ModelError> {
        let mut data = ModelParameters::init(spec.backbone.clone(), seed)?.data;
        let c = spec.backbone.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
        use rand_distr::Distribution;
        data.extend((0..3 * c).map(|_| normal.sample(&mut rng)));
        data.extend([0.0; 3]);
        Ok(Self { spec, data })
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut tensors = Layout::new(&self.spec.backbone).tensors;
        let c = self.spec.backbone.model_dim;
        let off = head_offset(&self.spec.backbone);
        tensors.push(TensorSpec {
            name: "cls_head.w".into(),
            shape: vec![3, c],
            offset: off,
            kind: TensorKind::Weight,
        });
        tensors.push(TensorSpec {
            name: "cls_head.b".into(),
            shape: vec![3],
            offset: off + 3 * c,
            kind: TensorKind::Bias,
        });
        Checkpoint {
            config: self.spec.backbone.clone(),
            tensors,
            data: self.data.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, modality: Modality, target: ClassTarget) -> Result<Self, ModelError> {
        let n = classifier_param_count(&ck.config);
        if ck.data.len() != n {
            return Err(ModelError::Checkpoint {
                path: String::new(),
                message: format!("{} values, classifier needs {n}", ck.data.len()),
            });
        }
        Ok(Self {
            spec: ClassifierSpec {
                modality,
                target,
                backbone: ck.config.clone(),
            },
            data: ck.data.clone(),
        })
    }

    pub fn head_mut(&mut self) -> &mut [f64] {
        let off = head_offset(&self.spec.backbone);
        &mut self.data[off..]
    }

    pub fn logits(&self, inputs: &[Input]) -> Result<[f64; 3], ModelError> {
        let layout = Layout::new(&self.spec.backbone);
        Ok(classifier_forward(&self.spec.backbone, &layout, &self.data, inputs, None, None)?.0)
    }

    pub fn predict(&self, bank: &FeatureBank, inputs: &[PromptElement]) -> Result<SentimentLabel, ModelError> {
        let logits = self.logits(&bank.resolve(inputs)?)?;
        let best = crate::generator::argmax(&logits);
        Ok(SentimentLabel::ALL[best])
    }
}

pub fn train_classifier(
    spec: ClassifierSpec,
    corpus: &Corpus,
    vocab: &Vocabulary,
    bank: &FeatureBank,
    train_cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(Classifier, TrainOutcome), BaselineError> {
    let train_set = classifier_dataset(&spec, corpus, Split::Train, vocab)?;
    let dev_set = classifier_dataset(&spec, corpus, Split::Dev, vocab)?;
    let init = Classifier::init(spec.clone(), init_seed)?;
    let train_obj = ClassifierObjective::new(&spec.backbone, &train_set, bank);
    let dev_obj = ClassifierObjective::new(&spec.backbone, &dev_set, bank);
    let outcome = trainer::train(train_cfg, &train_obj, &dev_obj, init.data)?;
    Ok((
        Classifier {
            spec,
            data: outcome.best.clone(),
        },
        outcome,
    ))
}

/// Argmax of the head for the current turn `n` (ties to the lowest code).
pub fn classify(
    classifier: &Classifier,
    bank: &FeatureBank,
    vocab: &Vocabulary,
    dialogue: &Dialogue,
    n: usize,
) -> Result<SentimentLabel, BaselineError> {
    let inputs = classifier_inputs(
        classifier.spec.modality,
        dialogue,
        n,
        vocab,
        classifier.spec.backbone.max_positions,
    )?;
    Ok(classifier.predict(bank, &inputs)?)
}
