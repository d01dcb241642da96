//! Decoder-only transformer over mixed token / continuous inputs.
//!
//! Parameters live in one flat `Vec<f64>`; [`Layout`] maps named tensors onto
//! it so the optimizer, gradient checker and checkpoint code can treat the
//! model as a single vector. The forward pass keeps every activation needed
//! by the hand-written backward pass. Architecture is pre-LayerNorm GPT-2:
//! learned positions, causal multi-head attention, tanh-GELU MLP, optional
//! weight tying between the token table and the LM head.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::prompt::{PromptElement, SerializedExample};
use crate::speech;
use crate::tokenizer::TokenId;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SLMC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} positions exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: TokenId, vocab: usize },
    #[error("embedding slot {0} has no features")]
    UnresolvedSlot(String),
    #[error("feature vector of dimension {found}, model expects {expected}")]
    FeatureDim { expected: usize, found: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub feature_dim: usize,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            model_dim: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            max_positions: 320,
            feature_dim: 16,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.model_dim == 0 || self.max_positions == 0 {
            return bad("vocab_size, model_dim and max_positions must be positive".into());
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 || self.feature_dim == 0 {
            return bad("mlp_ratio and feature_dim must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.model_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    attn_w: usize,
    attn_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Named tensors and their offsets into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    wte: usize,
    wpe: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
    proj_w: usize,
    proj_b: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], kind: TensorKind) -> usize {
        let offset = self.total;
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset,
            kind,
        };
        self.total += spec.len();
        self.tensors.push(spec);
        offset
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use TensorKind::*;
        let (v, c, p, f, d) = (
            cfg.vocab_size,
            cfg.model_dim,
            cfg.max_positions,
            cfg.mlp_dim(),
            cfg.feature_dim,
        );
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let wte = b.add("wte".into(), &[v, c], Weight);
        let wpe = b.add("wpe".into(), &[p, c], Weight);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerOffsets {
                ln1_g: b.add(format!("h{l}.ln1.g"), &[c], Gain),
                ln1_b: b.add(format!("h{l}.ln1.b"), &[c], Bias),
                qkv_w: b.add(format!("h{l}.attn.qkv.w"), &[3 * c, c], Weight),
                qkv_b: b.add(format!("h{l}.attn.qkv.b"), &[3 * c], Bias),
                attn_w: b.add(format!("h{l}.attn.proj.w"), &[c, c], Weight),
                attn_b: b.add(format!("h{l}.attn.proj.b"), &[c], Bias),
                ln2_g: b.add(format!("h{l}.ln2.g"), &[c], Gain),
                ln2_b: b.add(format!("h{l}.ln2.b"), &[c], Bias),
                fc_w: b.add(format!("h{l}.mlp.fc.w"), &[f, c], Weight),
                fc_b: b.add(format!("h{l}.mlp.fc.b"), &[f], Bias),
                out_w: b.add(format!("h{l}.mlp.proj.w"), &[c, f], Weight),
                out_b: b.add(format!("h{l}.mlp.proj.b"), &[c], Bias),
            })
            .collect();
        let lnf_g = b.add("lnf.g".into(), &[c], Gain);
        let lnf_b = b.add("lnf.b".into(), &[c], Bias);
        let head = if cfg.tie_embeddings {
            wte
        } else {
            b.add("lm_head".into(), &[v, c], Weight)
        };
        let proj_w = b.add("speech_proj.w".into(), &[c, d], Weight);
        let proj_b = b.add("speech_proj.b".into(), &[c], Bias);
        Self {
            tensors: b.tensors,
            total: b.total,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            head,
            proj_w,
            proj_b,
        }
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

/// One model position: a vocabulary token or a pooled feature vector that
/// goes through the speech projector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Input<'a> {
    Token(TokenId),
    Features(&'a [f64]),
}

/// Pooled utterance features keyed by `features_ref`.
#[derive(Debug, Clone, Default)]
pub struct FeatureBank {
    pooled: HashMap<String, Vec<f64>>,
}

impl FeatureBank {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        Self {
            pooled: corpus
                .features
                .iter()
                .map(|(k, m)| (k.clone(), speech::mean_pool(m)))
                .collect(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) {
        self.pooled.insert(key.into(), v);
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.pooled.get(key).map(Vec::as_slice)
    }

    pub fn resolve<'a>(&'a self, elements: &[PromptElement]) -> Result<Vec<Input<'a>>, ModelError> {
        elements
            .iter()
            .map(|e| match e {
                PromptElement::Token(id) => Ok(Input::Token(*id)),
                PromptElement::Speech(r) => self
                    .get(r)
                    .map(Input::Features)
                    .ok_or_else(|| ModelError::UnresolvedSlot(r.clone())),
            })
            .collect()
    }

    /// Prompt followed by the target minus its final token: the teacher-forced
    /// model input for `ex`.
    pub fn teacher_forced<'a>(&'a self, ex: &SerializedExample) -> Result<Vec<Input<'a>>, ModelError> {
        let mut inputs = self.resolve(&ex.prompt)?;
        inputs.extend(ex.target[..ex.target.len() - 1].iter().map(|&t| Input::Token(t)));
        Ok(inputs)
    }
}

impl ModelParameters {
    /// Weights ~ N(0, 0.02^2), biases 0, LayerNorm gains 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        for t in &layout.tensors {
            let slice = &mut data[t.range()];
            match t.kind {
                TensorKind::Weight => slice.iter_mut().for_each(|w| *w = normal.sample(&mut rng)),
                TensorKind::Bias => {}
                TensorKind::Gain => slice.fill(1.0),
            }
        }
        Ok(Self { config, data })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let n = Layout::new(&config).total;
        Ok(Self {
            config,
            data: vec![0.0; n],
        })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout().get(name).map(|t| &self.data[t.range()])
    }

    pub fn projector(&self) -> speech::Projector {
        let l = self.layout();
        let (c, d) = (self.config.model_dim, self.config.feature_dim);
        speech::Projector {
            model_dim: c,
            feature_dim: d,
            weight: self.data[l.proj_w..l.proj_w + c * d].to_vec(),
            bias: self.data[l.proj_b..l.proj_b + c].to_vec(),
        }
    }

    /// Logits for every position.
    pub fn forward(&self, inputs: &[Input]) -> Result<ForwardOutput, ModelError> {
        let layout = self.layout();
        let trace = forward_trace(&self.config, &layout, &self.data, inputs)?;
        let logits = (0..trace.len)
            .map(|t| head_logits(&self.config, &layout, &self.data, trace.hidden_row(t)))
            .collect();
        Ok(ForwardOutput { logits })
    }

    /// Log-probability of the target given the prompt, with one term per
    /// target token. `total` is the sum of the three segment sums
    /// (current marker, response marker, text span), each summed in order.
    pub fn sequence_log_prob(
        &self,
        ex: &SerializedExample,
        bank: &FeatureBank,
    ) -> Result<SequenceLogProb, ModelError> {
        let inputs = bank.teacher_forced(ex)?;
        let layout = self.layout();
        let trace = forward_trace(&self.config, &layout, &self.data, &inputs)?;
        let first = ex.prompt.len() - 1;
        let per_step: Vec<f64> = ex
            .target
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                let logits = head_logits(&self.config, &layout, &self.data, trace.hidden_row(first + i));
                log_softmax(&logits)[tok as usize]
            })
            .collect();
        let segments = segment_sums(&ex.target, &per_step);
        let total = segments[0] + segments[1] + segments[2];
        Ok(SequenceLogProb {
            total,
            per_step,
            segments,
        })
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder::new(&self.config, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_step: Vec<f64>,
    /// [current marker, response marker, text span including `<eos>`].
    pub segments: [f64; 3],
}

/// Segment of each target position: 0 for the current-label marker, 1 for
/// the response-label marker, 2 for text and `<eos>`. With two markers the
/// first is the current label; a lone marker is the response label.
pub fn target_segments(target: &[TokenId]) -> Vec<usize> {
    let markers: Vec<usize> = (0..target.len())
        .filter(|&i| crate::tokenizer::marker_label(target[i]).is_some())
        .collect();
    let mut seg = vec![2; target.len()];
    match markers.as_slice() {
        [r] => seg[*r] = 1,
        [c, r, ..] => {
            seg[*c] = 0;
            seg[*r] = 1;
        }
        [] => {}
    }
    seg
}

fn segment_sums(target: &[TokenId], per_step: &[f64]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (k, lp) in target_segments(target).into_iter().zip(per_step) {
        s[k] += lp;
    }
    s
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

// ---------------------------------------------------------------------------
// kernels

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out[t] = W x[t] + b, with W stored out_dim x in_dim.
fn linear(x: &[f64], w: &[f64], b: &[f64], in_dim: usize, out_dim: usize, out: &mut [f64]) {
    for (xt, ot) in x.chunks_exact(in_dim).zip(out.chunks_exact_mut(out_dim)) {
        for (o, (row, bias)) in ot.iter_mut().zip(w.chunks_exact(in_dim).zip(b)) {
            *o = bias + dot(row, xt);
        }
    }
}

/// Accumulates dW, db and dx for `linear`.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for ((xt, dyt), dxt) in x
        .chunks_exact(in_dim)
        .zip(dy.chunks_exact(out_dim))
        .zip(dx.chunks_exact_mut(in_dim))
    {
        for (o, &g) in dyt.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            axpy(g, xt, &mut dw[o * in_dim..(o + 1) * in_dim]);
            axpy(g, &w[o * in_dim..(o + 1) * in_dim], dxt);
        }
    }
}

/// Row-wise LayerNorm; stores xhat and 1/std for the backward pass.
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], c: usize, out: &mut [f64], xhat: &mut [f64], rstd: &mut [f64]) {
    for (t, xt) in x.chunks_exact(c).enumerate() {
        let mean = xt.iter().sum::<f64>() / c as f64;
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        let (ht, ot) = (&mut xhat[t * c..(t + 1) * c], &mut out[t * c..(t + 1) * c]);
        for i in 0..c {
            ht[i] = (xt[i] - mean) * r;
            ot[i] = g[i] * ht[i] + b[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    c: usize,
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; c];
    for t in 0..rstd.len() {
        let (dyt, ht) = (&dy[t * c..(t + 1) * c], &xhat[t * c..(t + 1) * c]);
        let mut mean_d = 0.0;
        let mut mean_dh = 0.0;
        for i in 0..c {
            dg[i] += dyt[i] * ht[i];
            db[i] += dyt[i];
            dxhat[i] = dyt[i] * g[i];
            mean_d += dxhat[i];
            mean_dh += dxhat[i] * ht[i];
        }
        mean_d /= c as f64;
        mean_dh /= c as f64;
        let dxt = &mut dx[t * c..(t + 1) * c];
        for i in 0..c {
            dxt[i] += rstd[t] * (dxhat[i] - mean_d - ht[i] * mean_dh);
        }
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_S * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

// ---------------------------------------------------------------------------
// forward / backward

struct LayerTrace {
    ln1: Vec<f64>,
    ln1_hat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    /// heads x T x T, row t holds softmax weights over 0..=t
    att: Vec<f64>,
    y: Vec<f64>,
    ln2: Vec<f64>,
    ln2_hat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc: Vec<f64>,
    act: Vec<f64>,
}

/// Activations of one full-sequence forward pass.
pub(crate) struct Trace<'a> {
    pub len: usize,
    inputs: Vec<Input<'a>>,
    layers: Vec<LayerTrace>,
    lnf_hat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Final normalized hidden states, T x C.
    pub hidden: Vec<f64>,
    c: usize,
}

impl Trace<'_> {
    pub fn hidden_row(&self, t: usize) -> &[f64] {
        &self.hidden[t * self.c..(t + 1) * self.c]
    }
}

fn embed(cfg: &ModelConfig, layout: &Layout, w: &[f64], input: &Input, pos: usize, out: &mut [f64]) -> Result<(), ModelError> {
    let c = cfg.model_dim;
    match *input {
        Input::Token(id) => {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::BadToken {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
            let row = layout.wte + id as usize * c;
            out.copy_from_slice(&w[row..row + c]);
        }
        Input::Features(v) => {
            if v.len() != cfg.feature_dim {
                return Err(ModelError::FeatureDim {
                    expected: cfg.feature_dim,
                    found: v.len(),
                });
            }
            let pw = &w[layout.proj_w..layout.proj_w + c * cfg.feature_dim];
            let pb = &w[layout.proj_b..layout.proj_b + c];
            speech::project_into(pw, pb, v, out);
        }
    }
    let p = layout.wpe + pos * c;
    axpy(1.0, &w[p..p + c], out);
    Ok(())
}

pub(crate) fn forward_trace<'a>(
    cfg: &ModelConfig,
    layout: &Layout,
    w: &[f64],
    inputs: &[Input<'a>],
) -> Result<Trace<'a>, ModelError> {
    let t_len = inputs.len();
    if t_len > cfg.max_positions {
        return Err(ModelError::TooLong {
            len: t_len,
            max: cfg.max_positions,
        });
    }
    let (c, nh, hs, f) = (cfg.model_dim, cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
    let scale = 1.0 / (hs as f64).sqrt();

    let mut x = vec![0.0; t_len * c];
    for (t, inp) in inputs.iter().enumerate() {
        embed(cfg, layout, w, inp, t, &mut x[t * c..(t + 1) * c])?;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &layout.layers {
        let mut lt = LayerTrace {
            ln1: vec![0.0; t_len * c],
            ln1_hat: vec![0.0; t_len * c],
            ln1_rstd: vec![0.0; t_len],
            qkv: vec![0.0; t_len * 3 * c],
            att: vec![0.0; nh * t_len * t_len],
            y: vec![0.0; t_len * c],
            ln2: vec![0.0; t_len * c],
            ln2_hat: vec![0.0; t_len * c],
            ln2_rstd: vec![0.0; t_len],
            fc: vec![0.0; t_len * f],
            act: vec![0.0; t_len * f],
        };
        layer_norm(&x, &w[lo.ln1_g..lo.ln1_g + c], &w[lo.ln1_b..lo.ln1_b + c], c, &mut lt.ln1, &mut lt.ln1_hat, &mut lt.ln1_rstd);
        linear(&lt.ln1, &w[lo.qkv_w..lo.qkv_w + 3 * c * c], &w[lo.qkv_b..lo.qkv_b + 3 * c], c, 3 * c, &mut lt.qkv);
        for h in 0..nh {
            for t in 0..t_len {
                let q = &lt.qkv[t * 3 * c + h * hs..t * 3 * c + (h + 1) * hs];
                let row = &mut lt.att[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let mut max = f64::NEG_INFINITY;
                for (u, r) in row.iter_mut().enumerate().take(t + 1) {
                    let k = &lt.qkv[u * 3 * c + c + h * hs..u * 3 * c + c + (h + 1) * hs];
                    *r = dot(q, k) * scale;
                    max = max.max(*r);
                }
                let mut s = 0.0;
                for r in row.iter_mut().take(t + 1) {
                    *r = (*r - max).exp();
                    s += *r;
                }
                for r in row.iter_mut().take(t + 1) {
                    *r /= s;
                }
                let yt = &mut lt.y[t * c + h * hs..t * c + (h + 1) * hs];
                for (u, &p) in row.iter().enumerate().take(t + 1) {
                    let v = &lt.qkv[u * 3 * c + 2 * c + h * hs..u * 3 * c + 2 * c + (h + 1) * hs];
                    axpy(p, v, yt);
                }
            }
        }
        let mut proj = vec![0.0; t_len * c];
        linear(&lt.y, &w[lo.attn_w..lo.attn_w + c * c], &w[lo.attn_b..lo.attn_b + c], c, c, &mut proj);
        axpy(1.0, &proj, &mut x);
        layer_norm(&x, &w[lo.ln2_g..lo.ln2_g + c], &w[lo.ln2_b..lo.ln2_b + c], c, &mut lt.ln2, &mut lt.ln2_hat, &mut lt.ln2_rstd);
        linear(&lt.ln2, &w[lo.fc_w..lo.fc_w + f * c], &w[lo.fc_b..lo.fc_b + f], c, f, &mut lt.fc);
        for (a, &z) in lt.act.iter_mut().zip(&lt.fc) {
            *a = gelu(z);
        }
        linear(&lt.act, &w[lo.out_w..lo.out_w + c * f], &w[lo.out_b..lo.out_b + c], f, c, &mut proj);
        axpy(1.0, &proj, &mut x);
        layers.push(lt);
    }

    let mut hidden = vec![0.0; t_len * c];
    let mut lnf_hat = vec![0.0; t_len * c];
    let mut lnf_rstd = vec![0.0; t_len];
    layer_norm(&x, &w[layout.lnf_g..layout.lnf_g + c], &w[layout.lnf_b..layout.lnf_b + c], c, &mut hidden, &mut lnf_hat, &mut lnf_rstd);
    Ok(Trace {
        len: t_len,
        inputs: inputs.to_vec(),
        layers,
        lnf_hat,
        lnf_rstd,
        hidden,
        c,
    })
}

pub(crate) fn head_logits(cfg: &ModelConfig, layout: &Layout, w: &[f64], hidden: &[f64]) -> Vec<f64> {
    let c = cfg.model_dim;
    w[layout.head..layout.head + cfg.vocab_size * c]
        .chunks_exact(c)
        .map(|row| dot(row, hidden))
        .collect()
}

/// Backpropagates `d_logits` at hidden row `hidden` into the head weights
/// and returns the gradient with respect to that hidden row.
pub(crate) fn head_backward(
    cfg: &ModelConfig,
    layout: &Layout,
    w: &[f64],
    hidden: &[f64],
    d_logits: &[f64],
    grad: &mut [f64],
    d_hidden: &mut [f64],
) {
    let c = cfg.model_dim;
    for (v, &g) in d_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = layout.head + v * c;
        axpy(g, hidden, &mut grad[row..row + c]);
        axpy(g, &w[row..row + c], d_hidden);
    }
}

/// Accumulates parameter gradients given dL/d(hidden), the gradient with
/// respect to the final normalized hidden states (T x C).
pub(crate) fn backward(
    cfg: &ModelConfig,
    layout: &Layout,
    w: &[f64],
    trace: &Trace,
    d_hidden: &[f64],
    grad: &mut [f64],
) {
    let t_len = trace.len;
    let (c, nh, hs, f) = (cfg.model_dim, cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
    let scale = 1.0 / (hs as f64).sqrt();

    let mut dx = vec![0.0; t_len * c];
    {
        let (gl, bl) = grad.split_at_mut(layout.lnf_b);
        layer_norm_backward(
            d_hidden,
            &trace.lnf_hat,
            &trace.lnf_rstd,
            &w[layout.lnf_g..layout.lnf_g + c],
            c,
            &mut gl[layout.lnf_g..layout.lnf_g + c],
            &mut bl[..c],
            &mut dx,
        );
    }

    for (lo, lt) in layout.layers.iter().zip(&trace.layers).rev() {
        // MLP branch: x_out = x_mid + W_out gelu(W_fc ln2(x_mid))
        let mut d_act = vec![0.0; t_len * f];
        {
            let (gw, gb) = grad.split_at_mut(lo.out_b);
            linear_backward(&lt.act, &w[lo.out_w..lo.out_w + c * f], &dx, f, c, &mut gw[lo.out_w..lo.out_w + c * f], &mut gb[..c], &mut d_act);
        }
        for (d, &z) in d_act.iter_mut().zip(&lt.fc) {
            *d *= gelu_grad(z);
        }
        let mut d_ln2 = vec![0.0; t_len * c];
        {
            let (gw, gb) = grad.split_at_mut(lo.fc_b);
            linear_backward(&lt.ln2, &w[lo.fc_w..lo.fc_w + f * c], &d_act, c, f, &mut gw[lo.fc_w..lo.fc_w + f * c], &mut gb[..f], &mut d_ln2);
        }
        {
            let (gg, gb) = grad.split_at_mut(lo.ln2_b);
            layer_norm_backward(&d_ln2, &lt.ln2_hat, &lt.ln2_rstd, &w[lo.ln2_g..lo.ln2_g + c], c, &mut gg[lo.ln2_g..lo.ln2_g + c], &mut gb[..c], &mut dx);
        }
        // attention branch: x_mid = x_in + W_o attn(W_qkv ln1(x_in))
        let mut dy = vec![0.0; t_len * c];
        {
            let (gw, gb) = grad.split_at_mut(lo.attn_b);
            linear_backward(&lt.y, &w[lo.attn_w..lo.attn_w + c * c], &dx, c, c, &mut gw[lo.attn_w..lo.attn_w + c * c], &mut gb[..c], &mut dy);
        }
        let mut dqkv = vec![0.0; t_len * 3 * c];
        let mut dp = vec![0.0; t_len];
        for h in 0..nh {
            for t in 0..t_len {
                let row = &lt.att[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let dyt = &dy[t * c + h * hs..t * c + (h + 1) * hs];
                let mut weighted = 0.0;
                for (u, &p) in row.iter().enumerate() {
                    let vo = u * 3 * c + 2 * c + h * hs;
                    dp[u] = dot(dyt, &lt.qkv[vo..vo + hs]);
                    axpy(p, dyt, &mut dqkv[vo..vo + hs]);
                    weighted += p * dp[u];
                }
                let qo = t * 3 * c + h * hs;
                for (u, &p) in row.iter().enumerate() {
                    let ds = p * (dp[u] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ko = u * 3 * c + c + h * hs;
                    let (lo_part, hi_part) = dqkv.split_at_mut(ko.max(qo));
                    if ko > qo {
                        axpy(ds, &lt.qkv[ko..ko + hs], &mut lo_part[qo..qo + hs]);
                        axpy(ds, &lt.qkv[qo..qo + hs], &mut hi_part[..hs]);
                    } else {
                        axpy(ds, &lt.qkv[ko..ko + hs], &mut hi_part[..hs]);
                        axpy(ds, &lt.qkv[qo..qo + hs], &mut lo_part[ko..ko + hs]);
                    }
                }
            }
        }
        let mut d_ln1 = vec![0.0; t_len * c];
        {
            let (gw, gb) = grad.split_at_mut(lo.qkv_b);
            linear_backward(&lt.ln1, &w[lo.qkv_w..lo.qkv_w + 3 * c * c], &dqkv, c, 3 * c, &mut gw[lo.qkv_w..lo.qkv_w + 3 * c * c], &mut gb[..3 * c], &mut d_ln1);
        }
        {
            let (gg, gb) = grad.split_at_mut(lo.ln1_b);
            layer_norm_backward(&d_ln1, &lt.ln1_hat, &lt.ln1_rstd, &w[lo.ln1_g..lo.ln1_g + c], c, &mut gg[lo.ln1_g..lo.ln1_g + c], &mut gb[..c], &mut dx);
        }
    }

    // embeddings
    let d = cfg.feature_dim;
    for (t, inp) in trace.inputs.iter().enumerate() {
        let dxt = &dx[t * c..(t + 1) * c];
        let p = layout.wpe + t * c;
        axpy(1.0, dxt, &mut grad[p..p + c]);
        match *inp {
            Input::Token(id) => {
                let row = layout.wte + id as usize * c;
                axpy(1.0, dxt, &mut grad[row..row + c]);
            }
            Input::Features(v) => {
                for (o, &g) in dxt.iter().enumerate() {
                    grad[layout.proj_b + o] += g;
                    let row = layout.proj_w + o * d;
                    axpy(g, v, &mut grad[row..row + d]);
                }
            }
        }
    }
}

/// Summed next-token cross-entropy over the target of `ex`, and its gradient
/// accumulated into `grad`. Returns (loss sum, number of target tokens).
pub(crate) fn lm_loss_and_grad(
    cfg: &ModelConfig,
    layout: &Layout,
    w: &[f64],
    ex: &SerializedExample,
    bank: &FeatureBank,
    grad: Option<&mut [f64]>,
) -> Result<(f64, usize), ModelError> {
    let inputs = bank.teacher_forced(ex)?;
    let trace = forward_trace(cfg, layout, w, &inputs)?;
    let first = ex.prompt.len() - 1;
    let c = cfg.model_dim;
    let mut loss = 0.0;
    match grad {
        None => {
            for (i, &tok) in ex.target.iter().enumerate() {
                let logits = head_logits(cfg, layout, w, trace.hidden_row(first + i));
                loss -= log_softmax(&logits)[tok as usize];
            }
        }
        Some(grad) => {
            let mut d_hidden = vec![0.0; trace.len * c];
            for (i, &tok) in ex.target.iter().enumerate() {
                let pos = first + i;
                let logits = head_logits(cfg, layout, w, trace.hidden_row(pos));
                let logp = log_softmax(&logits);
                loss -= logp[tok as usize];
                let mut p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                p[tok as usize] -= 1.0;
                head_backward(cfg, layout, w, trace.hidden_row(pos), &p, grad, &mut d_hidden[pos * c..(pos + 1) * c]);
            }
            backward(cfg, layout, w, &trace, &d_hidden, grad);
        }
    }
    Ok((loss, ex.target.len()))
}

// ---------------------------------------------------------------------------
// incremental decoding

/// Key/value cache for position-by-position decoding.
pub struct Decoder<'p> {
    cfg: &'p ModelConfig,
    w: &'p [f64],
    layout: Layout,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'p> Decoder<'p> {
    pub fn new(cfg: &'p ModelConfig, w: &'p [f64]) -> Self {
        Self {
            cfg,
            w,
            layout: Layout::new(cfg),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            pos: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Feeds one input and returns the logits at its position.
    pub fn push(&mut self, input: &Input) -> Result<Vec<f64>, ModelError> {
        if self.pos >= self.cfg.max_positions {
            return Err(ModelError::TooLong {
                len: self.pos + 1,
                max: self.cfg.max_positions,
            });
        }
        let (cfg, w, layout) = (self.cfg, self.w, &self.layout);
        let (c, nh, hs, f) = (cfg.model_dim, cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
        let scale = 1.0 / (hs as f64).sqrt();
        let mut x = vec![0.0; c];
        embed(cfg, layout, w, input, self.pos, &mut x)?;
        let mut a = vec![0.0; c];
        let mut hat = vec![0.0; c];
        let mut rstd = [0.0];
        let mut qkv = vec![0.0; 3 * c];
        let mut proj = vec![0.0; c];
        let mut fc = vec![0.0; f];
        let n = self.pos + 1;
        let mut scores = vec![0.0; n];
        for (l, lo) in layout.layers.iter().enumerate() {
            layer_norm(&x, &w[lo.ln1_g..lo.ln1_g + c], &w[lo.ln1_b..lo.ln1_b + c], c, &mut a, &mut hat, &mut rstd);
            linear(&a, &w[lo.qkv_w..lo.qkv_w + 3 * c * c], &w[lo.qkv_b..lo.qkv_b + 3 * c], c, 3 * c, &mut qkv);
            self.keys[l].extend_from_slice(&qkv[c..2 * c]);
            self.values[l].extend_from_slice(&qkv[2 * c..]);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let mut y = vec![0.0; c];
            for h in 0..nh {
                let q = &qkv[h * hs..(h + 1) * hs];
                let mut max = f64::NEG_INFINITY;
                for (u, s) in scores.iter_mut().enumerate() {
                    *s = dot(q, &keys[u * c + h * hs..u * c + (h + 1) * hs]) * scale;
                    max = max.max(*s);
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let yh = &mut y[h * hs..(h + 1) * hs];
                for (u, s) in scores.iter().enumerate() {
                    axpy(s / sum, &values[u * c + h * hs..u * c + (h + 1) * hs], yh);
                }
            }
            linear(&y, &w[lo.attn_w..lo.attn_w + c * c], &w[lo.attn_b..lo.attn_b + c], c, c, &mut proj);
            axpy(1.0, &proj, &mut x);
            layer_norm(&x, &w[lo.ln2_g..lo.ln2_g + c], &w[lo.ln2_b..lo.ln2_b + c], c, &mut a, &mut hat, &mut rstd);
            linear(&a, &w[lo.fc_w..lo.fc_w + f * c], &w[lo.fc_b..lo.fc_b + f], c, f, &mut fc);
            fc.iter_mut().for_each(|z| *z = gelu(*z));
            linear(&fc, &w[lo.out_w..lo.out_w + c * f], &w[lo.out_b..lo.out_b + c], f, c, &mut proj);
            axpy(1.0, &proj, &mut x);
        }
        layer_norm(&x, &w[layout.lnf_g..layout.lnf_g + c], &w[layout.lnf_b..layout.lnf_b + c], c, &mut a, &mut hat, &mut rstd);
        self.pos += 1;
        Ok(head_logits(cfg, layout, w, &a))
    }
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorSpec>,
    meta: serde_json::Value,
}

/// A flat parameter vector with its shape manifest. `tensors` may extend the
/// model layout with extra named tensors (e.g. a classifier head).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<TensorSpec>,
    pub data: Vec<f64>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParameters, meta: serde_json::Value) -> Self {
        Self {
            config: params.config.clone(),
            tensors: params.layout().tensors,
            data: params.data.clone(),
            meta,
        }
    }

    pub fn params(&self) -> Result<ModelParameters, ModelError> {
        let n = Layout::new(&self.config).total;
        if self.data.len() < n {
            return Err(ModelError::Checkpoint {
                path: String::new(),
                message: format!("{} values, model needs {n}", self.data.len()),
            });
        }
        Ok(ModelParameters {
            config: self.config.clone(),
            data: self.data[..n].to_vec(),
        })
    }

    /// Layout: magic `SLMC`, u32 version, u64 header length, JSON header
    /// (config, tensor manifest, metadata), then f64 little-endian payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            tensors: self.tensors.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| e.to_string())?;
        let payload = &body[hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.offset + t.len()).max().unwrap_or(0);
        if payload.len() != expected * 8 {
            return Err(format!("payload has {} bytes, manifest needs {}", payload.len(), expected * 8));
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            config: header.config,
            tensors: header.tensors,
            data,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let err = |e: std::io::Error| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = fs::File::create(path).map_err(err)?;
        f.write_all(&self.to_bytes()).map_err(err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ModelError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|message| ModelError::Checkpoint {
            path: path.display().to_string(),
            message,
        })
    }
}
