//! Teacher-forced training: masked cross-entropy, Adam, dev-loss model
//! selection and a finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, log_softmax, FeatureBank, Layout, ModelConfig, ModelError, ModelParameters};
use crate::prompt::SerializedExample;
use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("no {0} examples")]
    NoExamples(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 5000,
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eval_every > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{self:?}")))
        }
    }
}

/// Mean of -log softmax(logits[t])[targets[t]] over positions with mask set.
pub fn masked_cross_entropy(logits: &[Vec<f64>], targets: &[TokenId], mask: &[bool]) -> Result<f64, TrainError> {
    if logits.len() != targets.len() || targets.len() != mask.len() {
        return Err(TrainError::Shape(format!(
            "{} logit rows, {} targets, {} mask flags",
            logits.len(),
            targets.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((row, &t), &m) in logits.iter().zip(targets).zip(mask) {
        if m {
            sum -= log_softmax(row)[t as usize];
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

/// A differentiable loss over a fixed list of examples and a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn num_examples(&self) -> usize;
    /// Summed loss and number of scored positions for example `i`;
    /// adds the gradient of the summed loss into `grad` when given.
    fn example_loss(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<(f64, usize), TrainError>;

    /// Mean per-position loss over all examples.
    fn mean_loss(&self, params: &[f64]) -> Result<f64, TrainError> {
        let (mut s, mut n) = (0.0, 0);
        for i in 0..self.num_examples() {
            let (l, c) = self.example_loss(params, i, None)?;
            s += l;
            n += c;
        }
        Ok(if n == 0 { 0.0 } else { s / n as f64 })
    }
}

/// Next-token loss over the target region of serialized examples.
pub struct LmObjective<'a> {
    pub config: &'a ModelConfig,
    layout: Layout,
    pub examples: &'a [SerializedExample],
    pub bank: &'a FeatureBank,
}

impl<'a> LmObjective<'a> {
    pub fn new(config: &'a ModelConfig, examples: &'a [SerializedExample], bank: &'a FeatureBank) -> Self {
        Self {
            config,
            layout: Layout::new(config),
            examples,
            bank,
        }
    }
}

impl Objective for LmObjective<'_> {
    fn num_params(&self) -> usize {
        self.layout.total
    }

    fn num_examples(&self) -> usize {
        self.examples.len()
    }

    fn example_loss(&self, params: &[f64], i: usize, grad: Option<&mut [f64]>) -> Result<(f64, usize), TrainError> {
        Ok(model::lm_loss_and_grad(
            self.config,
            &self.layout,
            params,
            &self.examples[i],
            self.bank,
            grad,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut OptimizerState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Computes the mean per-position loss over `batch` and applies one Adam
/// step. Returns the pre-update loss.
pub fn train_step(
    objective: &dyn Objective,
    params: &mut [f64],
    state: &mut OptimizerState,
    batch: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut grad = vec![0.0; params.len()];
    let (mut sum, mut count) = (0.0, 0usize);
    for &i in batch {
        let (l, c) = objective.example_loss(params, i, Some(&mut grad))?;
        sum += l;
        count += c;
    }
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step: state.step as usize,
            loss,
        });
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    adam_update(params, &grad, state, cfg);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest dev loss seen at an evaluation point.
    pub best: Vec<f64>,
    pub best_step: usize,
    pub best_dev_loss: f64,
    pub final_train_loss: Option<f64>,
    pub log: Vec<LogRecord>,
}

/// Seeded mini-batch loop with a fresh permutation per epoch. Evaluates dev
/// loss at step 0, every `eval_every` steps and at the end.
pub fn train(
    cfg: &TrainConfig,
    train_obj: &dyn Objective,
    dev_obj: &dyn Objective,
    init: Vec<f64>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_obj.num_examples() == 0 {
        return Err(TrainError::NoExamples("train"));
    }
    if dev_obj.num_examples() == 0 {
        return Err(TrainError::NoExamples("dev"));
    }
    let mut params = init;
    let mut state = OptimizerState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_obj.num_examples()).collect();
    let mut cursor = order.len();

    let dev0 = dev_obj.mean_loss(&params)?;
    let mut log = vec![LogRecord {
        step: 0,
        train_loss: None,
        dev_loss: dev0,
    }];
    let mut best = params.clone();
    let (mut best_step, mut best_dev) = (0, dev0);
    let (mut window_sum, mut window_n) = (0.0, 0usize);
    let mut final_train_loss = None;

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let loss = train_step(train_obj, &mut params, &mut state, &batch, cfg)
            .map_err(|e| match e {
                TrainError::NonFinite { loss, .. } => TrainError::NonFinite { step, loss },
                other => other,
            })?;
        window_sum += loss;
        window_n += 1;
        final_train_loss = Some(loss);
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let dev = dev_obj.mean_loss(&params)?;
            if !dev.is_finite() {
                return Err(TrainError::NonFinite { step, loss: dev });
            }
            log.push(LogRecord {
                step,
                train_loss: Some(window_sum / window_n as f64),
                dev_loss: dev,
            });
            window_sum = 0.0;
            window_n = 0;
            if dev < best_dev {
                best_dev = dev;
                best_step = step;
                best.clone_from(&params);
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_dev_loss: best_dev,
        final_train_loss,
        log,
    })
}

/// Trains serialized-target LM parameters starting from `init`.
pub fn train_lm(
    cfg: &TrainConfig,
    init: ModelParameters,
    train_examples: &[SerializedExample],
    dev_examples: &[SerializedExample],
    bank: &FeatureBank,
) -> Result<(ModelParameters, TrainOutcome), TrainError> {
    let config = init.config.clone();
    let train_obj = LmObjective::new(&config, train_examples, bank);
    let dev_obj = LmObjective::new(&config, dev_examples, bank);
    let outcome = train(cfg, &train_obj, &dev_obj, init.data)?;
    let params = ModelParameters {
        config,
        data: outcome.best.clone(),
    };
    Ok((params, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn group(&self, prefix: &str) -> Option<f64> {
        self.groups
            .iter()
            .filter(|g| g.name.starts_with(prefix))
            .map(|g| g.max_rel_error)
            .reduce(f64::max)
    }
}

/// The denominator is floored at 1e-6: below that, central differences at
/// eps = 1e-5 are dominated by roundoff (about 1e-10 on an O(1) loss), as
/// happens for attention key biases, whose true gradient is exactly zero.
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-6)
}

/// Central differences on a random subsample of coordinates (at least
/// `min_coords`, spread across every named tensor) against the analytic
/// gradient of `objective` on example `example`.
pub fn gradient_check(
    objective: &dyn Objective,
    params: &[f64],
    example: usize,
    groups: &[(String, std::ops::Range<usize>)],
    epsilon: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let mut analytic = vec![0.0; params.len()];
    objective.example_loss(params, example, Some(&mut analytic))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_group = min_coords.div_ceil(groups.len().max(1)).max(1);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        groups: Vec::new(),
    };
    for (name, range) in groups {
        let len = range.len();
        let picks: Vec<usize> = if len <= per_group {
            range.clone().collect()
        } else {
            (0..per_group).map(|_| range.start + rng.random_range(0..len)).collect()
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = work[i];
            work[i] = orig + epsilon;
            let (lp, _) = objective.example_loss(&work, example, None)?;
            work[i] = orig - epsilon;
            let (lm, _) = objective.example_loss(&work, example, None)?;
            work[i] = orig;
            let fd = (lp - lm) / (2.0 * epsilon);
            worst = worst.max(relative_error(analytic[i], fd));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.groups.push(GroupError {
            name: name.clone(),
            coords: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Named parameter groups of a transformer layout, for [`gradient_check`].
pub fn layout_groups(layout: &Layout) -> Vec<(String, std::ops::Range<usize>)> {
    layout.tensors.iter().map(|t| (t.name.clone(), t.range())).collect()
}
