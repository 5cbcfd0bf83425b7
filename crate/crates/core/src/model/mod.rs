//! Tiny autoregressive categorical sequence model.
//!
//! Each position mixes its own token/position embedding with the causal mean
//! of all embeddings up to and including it, passes both through one tanh
//! layer and projects to vocabulary logits:
//!
//! ```text
//! u_t = E[x_t] + P[t]
//! m_t = (1 / (t + 1)) Σ_{s ≤ t} u_s
//! h_t = tanh(u_t W_tok + m_t W_mix + b_hid)
//! logits_t = h_t W_out + b_out
//! ```
//!
//! Low-rank adapters may be attached to `W_tok`, `W_mix` and `W_out`; once
//! attached, only the adapter factors are trainable.

mod adapter;
pub mod checkpoint;
mod grad;
mod matrix;

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adapter::{AdapterConfig, AdapterSet, LowRankAdapter};
pub use grad::{GradAccumulator, ModelGrads};
pub use matrix::Matrix;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

/// Bijection between token symbols and ids `0..V`. Ids 0, 1, 2 are always
/// BOS, EOS and PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub const SPECIALS: [&'static str; 3] = ["<bos>", "<eos>", "<pad>"];

    /// Builds a vocabulary from the non-special symbols, which are assigned
    /// ids starting at 3.
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(symbols.into_iter().map(Into::into))
            .collect();
        Self::try_from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "vocabulary needs at least the 3 special symbols, got {}",
                tokens.len()
            )));
        }
        for (i, s) in Self::SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::InvalidInput(format!(
                    "token {i} must be {s}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub max_len: usize,
    /// Half-width of the uniform initialization interval.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            max_len: 64,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 2 {
            return Err(Error::Config(format!("model.hidden must be >= 2, got {}", self.hidden)));
        }
        if self.max_len < 2 {
            return Err(Error::Config(format!("model.max_len must be >= 2, got {}", self.max_len)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("model.init_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Names every parameter block of a model, base or adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockId {
    Embedding,
    Position,
    HiddenTok,
    HiddenMix,
    HiddenBias,
    Output,
    OutputBias,
    AdapterDown(AdaptedWeight),
    AdapterUp(AdaptedWeight),
}

/// Weight matrices that can carry a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdaptedWeight {
    HiddenTok,
    HiddenMix,
    Output,
}

impl AdaptedWeight {
    pub const ALL: [AdaptedWeight; 3] = [
        AdaptedWeight::HiddenTok,
        AdaptedWeight::HiddenMix,
        AdaptedWeight::Output,
    ];
}

impl BlockId {
    pub const BASE: [BlockId; 7] = [
        BlockId::Embedding,
        BlockId::Position,
        BlockId::HiddenTok,
        BlockId::HiddenMix,
        BlockId::HiddenBias,
        BlockId::Output,
        BlockId::OutputBias,
    ];
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let w = |w: &AdaptedWeight| match w {
            AdaptedWeight::HiddenTok => "hidden_tok",
            AdaptedWeight::HiddenMix => "hidden_mix",
            AdaptedWeight::Output => "output",
        };
        match self {
            BlockId::Embedding => f.write_str("embedding"),
            BlockId::Position => f.write_str("position"),
            BlockId::HiddenTok => f.write_str("hidden_tok"),
            BlockId::HiddenMix => f.write_str("hidden_mix"),
            BlockId::HiddenBias => f.write_str("hidden_bias"),
            BlockId::Output => f.write_str("output"),
            BlockId::OutputBias => f.write_str("output_bias"),
            BlockId::AdapterDown(x) => write!(f, "adapter_down.{}", w(x)),
            BlockId::AdapterUp(x) => write!(f, "adapter_up.{}", w(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// V × h
    pub embedding: Matrix,
    /// T_max × h
    pub position: Matrix,
    /// h × h
    pub hidden_tok: Matrix,
    /// h × h
    pub hidden_mix: Matrix,
    /// 1 × h
    pub hidden_bias: Matrix,
    /// h × V
    pub output: Matrix,
    /// 1 × V
    pub output_bias: Matrix,
}

impl ModelParams {
    fn init(vocab: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden;
        let s = cfg.init_scale;
        let mut uniform = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-s..s));
        let embedding = uniform(vocab, h);
        let position = uniform(cfg.max_len, h);
        let hidden_tok = uniform(h, h);
        let hidden_mix = uniform(h, h);
        let output = uniform(h, vocab);
        Self {
            embedding,
            position,
            hidden_tok,
            hidden_mix,
            hidden_bias: Matrix::zeros(1, h),
            output,
            output_bias: Matrix::zeros(1, vocab),
        }
    }

    pub fn block(&self, id: BlockId) -> Option<&Matrix> {
        Some(match id {
            BlockId::Embedding => &self.embedding,
            BlockId::Position => &self.position,
            BlockId::HiddenTok => &self.hidden_tok,
            BlockId::HiddenMix => &self.hidden_mix,
            BlockId::HiddenBias => &self.hidden_bias,
            BlockId::Output => &self.output,
            BlockId::OutputBias => &self.output_bias,
            _ => return None,
        })
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut Matrix> {
        Some(match id {
            BlockId::Embedding => &mut self.embedding,
            BlockId::Position => &mut self.position,
            BlockId::HiddenTok => &mut self.hidden_tok,
            BlockId::HiddenMix => &mut self.hidden_mix,
            BlockId::HiddenBias => &mut self.hidden_bias,
            BlockId::Output => &mut self.output,
            BlockId::OutputBias => &mut self.output_bias,
            _ => return None,
        })
    }

    fn weight(&self, w: AdaptedWeight) -> &Matrix {
        match w {
            AdaptedWeight::HiddenTok => &self.hidden_tok,
            AdaptedWeight::HiddenMix => &self.hidden_mix,
            AdaptedWeight::Output => &self.output,
        }
    }

    fn check_shapes(&self, vocab: usize, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden;
        let expected = [
            (BlockId::Embedding, vocab, h),
            (BlockId::Position, cfg.max_len, h),
            (BlockId::HiddenTok, h, h),
            (BlockId::HiddenMix, h, h),
            (BlockId::HiddenBias, 1, h),
            (BlockId::Output, h, vocab),
            (BlockId::OutputBias, 1, vocab),
        ];
        for (id, rows, cols) in expected {
            let m = self.block(id).expect("base block");
            if m.rows != rows || m.cols != cols || m.data.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "block {id} has shape {}x{} ({} values), expected {rows}x{cols}",
                    m.rows,
                    m.cols,
                    m.data.len()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Checkpoint(format!("block {id} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Log-probability of a response given a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub seed: u64,
    pub params: ModelParams,
    pub adapters: Option<AdapterSet>,
}

impl SeqModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(vocab.len(), &config, &mut rng);
        Ok(Self {
            config,
            vocab,
            seed,
            params,
            adapters: None,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Attaches fresh adapters to every adaptable weight: down factors drawn
    /// uniformly, up factors zero, so outputs are unchanged.
    pub fn attach_adapters(&mut self, cfg: AdapterConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if self.adapters.is_some() {
            return Err(Error::InvalidInput("adapters already attached".into()));
        }
        self.adapters = Some(AdapterSet::init(&self.params, cfg, self.config.init_scale, seed));
        Ok(())
    }

    /// Folds adapter deltas into the base weights and removes the adapters.
    pub fn merge_adapters(&mut self) {
        if let Some(set) = self.adapters.take() {
            for w in AdaptedWeight::ALL {
                let merged = set.effective(w, self.params.weight(w)).into_owned();
                let id = match w {
                    AdaptedWeight::HiddenTok => BlockId::HiddenTok,
                    AdaptedWeight::HiddenMix => BlockId::HiddenMix,
                    AdaptedWeight::Output => BlockId::Output,
                };
                *self.params.block_mut(id).expect("base block") = merged;
            }
        }
    }

    /// Blocks that receive gradient, in the order used by [`ModelGrads`].
    pub fn trainable_blocks(&self) -> Vec<BlockId> {
        match &self.adapters {
            Some(_) => AdaptedWeight::ALL
                .iter()
                .flat_map(|&w| [BlockId::AdapterDown(w), BlockId::AdapterUp(w)])
                .collect(),
            None => BlockId::BASE.to_vec(),
        }
    }

    pub fn block(&self, id: BlockId) -> Option<&Matrix> {
        match id {
            BlockId::AdapterDown(w) => self.adapters.as_ref().map(|a| &a.get(w).down),
            BlockId::AdapterUp(w) => self.adapters.as_ref().map(|a| &a.get(w).up),
            base => self.params.block(base),
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut Matrix> {
        match id {
            BlockId::AdapterDown(w) => self.adapters.as_mut().map(|a| &mut a.get_mut(w).down),
            BlockId::AdapterUp(w) => self.adapters.as_mut().map(|a| &mut a.get_mut(w).up),
            base => self.params.block_mut(base),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.trainable_blocks()
            .into_iter()
            .chain(BlockId::BASE)
            .all(|id| self.block(id).is_some_and(Matrix::is_finite))
    }

    pub(crate) fn check_integrity(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_shapes(self.vocab.len(), &self.config)?;
        if let Some(a) = &self.adapters {
            a.check_shapes(&self.params)?;
        }
        Ok(())
    }

    /// Materializes the effective weights for repeated evaluation.
    pub fn net(&self) -> Net<'_> {
        let eff = |w: AdaptedWeight| match &self.adapters {
            Some(set) => set.effective(w, self.params.weight(w)),
            None => Cow::Borrowed(self.params.weight(w)),
        };
        Net {
            model: self,
            hidden_tok: eff(AdaptedWeight::HiddenTok),
            hidden_mix: eff(AdaptedWeight::HiddenMix),
            output: eff(AdaptedWeight::Output),
        }
    }

    pub fn next_token_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.net().next_token_distribution(prefix)
    }

    pub fn sequence_log_prob(&self, prompt: &[usize], response: &[usize]) -> Result<SequenceLogProb> {
        self.net().sequence_log_prob(prompt, response)
    }

    pub fn grad_log_prob(&self, prompt: &[usize], response: &[usize]) -> Result<ModelGrads> {
        let net = self.net();
        let mut acc = GradAccumulator::new(&net);
        acc.add(prompt, response, 1.0)?;
        Ok(acc.finish())
    }

    pub fn decode_greedy(&self, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        self.net().decode_greedy(prompt, max_len)
    }

    /// Deep immutable snapshot used as the reference policy.
    pub fn freeze(&self) -> Reference {
        Reference(Arc::new(self.clone()))
    }
}

/// Frozen snapshot of a model. Cloning shares the snapshot.
#[derive(Debug, Clone)]
pub struct Reference(Arc<SeqModel>);

impl Reference {
    pub fn model(&self) -> &SeqModel {
        &self.0
    }

    /// A trainable copy of the snapshot.
    pub fn thaw(&self) -> SeqModel {
        (*self.0).clone()
    }
}

impl std::ops::Deref for Reference {
    type Target = SeqModel;

    fn deref(&self) -> &SeqModel {
        &self.0
    }
}

pub fn freeze_reference(model: &SeqModel) -> Reference {
    model.freeze()
}

/// Model with adapter deltas folded into its weights, ready for evaluation.
pub struct Net<'a> {
    model: &'a SeqModel,
    hidden_tok: Cow<'a, Matrix>,
    hidden_mix: Cow<'a, Matrix>,
    output: Cow<'a, Matrix>,
}

/// Activations of one forward pass.
pub(crate) struct Trace {
    pub u: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl<'a> Net<'a> {
    pub fn model(&self) -> &'a SeqModel {
        self.model
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.model.vocab_size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary of size {v}")));
        }
        Ok(())
    }

    /// Activations for positions `0..upto`.
    pub(crate) fn forward(&self, tokens: &[usize], upto: usize) -> Trace {
        let p = &self.model.params;
        let h_dim = self.model.config.hidden;
        let mut trace = Trace {
            u: Vec::with_capacity(upto),
            m: Vec::with_capacity(upto),
            h: Vec::with_capacity(upto),
        };
        let mut running = vec![0.0; h_dim];
        for (t, &tok) in tokens.iter().take(upto).enumerate() {
            let u: Vec<f64> = p
                .embedding
                .row(tok)
                .iter()
                .zip(p.position.row(t))
                .map(|(e, q)| e + q)
                .collect();
            for (r, x) in running.iter_mut().zip(&u) {
                *r += x;
            }
            let inv = 1.0 / (t + 1) as f64;
            let m: Vec<f64> = running.iter().map(|r| r * inv).collect();
            let mut a = p.hidden_bias.row(0).to_vec();
            self.hidden_tok.vec_mul_acc(&u, &mut a);
            self.hidden_mix.vec_mul_acc(&m, &mut a);
            let h: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
            trace.u.push(u);
            trace.m.push(m);
            trace.h.push(h);
        }
        trace
    }

    pub(crate) fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.model.params.output_bias.row(0).to_vec();
        self.output.vec_mul_acc(h, &mut out);
        out
    }

    pub(crate) fn output_weight(&self) -> &Matrix {
        &self.output
    }

    pub(crate) fn hidden_tok_weight(&self) -> &Matrix {
        &self.hidden_tok
    }

    pub(crate) fn hidden_mix_weight(&self) -> &Matrix {
        &self.hidden_mix
    }

    pub fn next_token_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidInput("prefix must contain at least BOS".into()));
        }
        if prefix.len() >= self.model.config.max_len {
            return Err(Error::Capacity(format!(
                "prefix length {} must be < max_len {}",
                prefix.len(),
                self.model.config.max_len
            )));
        }
        self.check_tokens(prefix)?;
        let trace = self.forward(prefix, prefix.len());
        let logits = self.logits(trace.h.last().expect("non-empty prefix"));
        Ok(softmax(&logits))
    }

    pub(crate) fn check_pair(&self, prompt: &[usize], response: &[usize]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must contain at least BOS".into()));
        }
        if response.last() != Some(&EOS) {
            return Err(Error::InvalidInput("response must be non-empty and end with EOS".into()));
        }
        let n = prompt.len() + response.len();
        if n > self.model.config.max_len {
            return Err(Error::Capacity(format!(
                "prompt + response length {n} exceeds max_len {}",
                self.model.config.max_len
            )));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(response)
    }

    pub fn sequence_log_prob(&self, prompt: &[usize], response: &[usize]) -> Result<SequenceLogProb> {
        self.check_pair(prompt, response)?;
        let tokens: Vec<usize> = prompt.iter().chain(response).copied().collect();
        let trace = self.forward(&tokens, tokens.len() - 1);
        let per_token: Vec<f64> = (prompt.len() - 1..tokens.len() - 1)
            .map(|t| log_softmax_at(&self.logits(&trace.h[t]), tokens[t + 1]))
            .collect();
        Ok(SequenceLogProb {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    /// Argmax decoding (lowest id wins ties); stops after EOS or `max_len`
    /// generated tokens.
    pub fn decode_greedy(&self, prompt: &[usize], max_len: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must contain at least BOS".into()));
        }
        if prompt.len() + max_len > self.model.config.max_len {
            return Err(Error::Capacity(format!(
                "prompt length {} + max_len {max_len} exceeds model max_len {}",
                prompt.len(),
                self.model.config.max_len
            )));
        }
        self.check_tokens(prompt)?;
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let trace = self.forward(&seq, seq.len());
            let logits = self.logits(trace.h.last().expect("non-empty"));
            let next = argmax(&logits);
            out.push(next);
            seq.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (logits[target] - lse).min(0.0)
}
