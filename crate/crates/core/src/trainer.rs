//! Base-model pretraining and preference optimization.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{KnowledgeProbe, PreferenceExample, Statement};
use crate::error::{Error, Result};
use crate::eval;
use crate::loss::{self, LogProbBundle, LossConfig, Method};
use crate::model::{GradAccumulator, ModelGrads, Reference, SeqModel};
use crate::provenance;

/// `peak · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, peak: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} is outside the schedule of {total_steps} steps"
        )));
    }
    if total_steps == 0 {
        return Ok(peak);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(peak * (1.0 + phase.cos()) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Gradient descent, with heavy-ball momentum when `momentum > 0`.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OptimizerConfig::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("optimizer momentum must be in [0, 1), got {momentum}")))
            }
            OptimizerConfig::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                Err(Error::Config("adam requires beta1, beta2 in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer moments, one vector per trainable block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub t: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, model: &SeqModel) -> Self {
        let sizes: Vec<usize> = model
            .trainable_blocks()
            .iter()
            .map(|&id| model.block(id).expect("trainable block").data.len())
            .collect();
        let zeros = |used: bool| {
            if used {
                sizes.iter().map(|&n| vec![0.0; n]).collect()
            } else {
                Vec::new()
            }
        };
        let (first, second) = match config {
            OptimizerConfig::Sgd { momentum } => (zeros(momentum > 0.0), Vec::new()),
            OptimizerConfig::Adam { .. } => (zeros(true), zeros(true)),
        };
        Self {
            config,
            t: 0,
            first,
            second,
        }
    }

    pub fn apply(&mut self, model: &mut SeqModel, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        for (i, (id, g)) in grads.blocks.iter().enumerate() {
            let w = model.block_mut(*id).expect("trainable block");
            match self.config {
                OptimizerConfig::Sgd { momentum } if momentum > 0.0 => {
                    let v = &mut self.first[i];
                    for ((w, g), v) in w.data.iter_mut().zip(&g.data).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerConfig::Sgd { .. } => {
                    for (w, g) in w.data.iter_mut().zip(&g.data) {
                        *w -= lr * g;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, g), m), v) in w.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn clip(grads: &mut ModelGrads, max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let n = grads.norm();
        if n > max {
            grads.scale(max / n);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Epoch budget.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub grad_clip: Option<f64>,
    /// Stop once held-out probe accuracy reaches this value.
    pub target_accuracy: f64,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
            optimizer: OptimizerConfig::adam(),
            grad_clip: Some(5.0),
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretrain.lr must be > 0".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean per-sequence negative log-likelihood over the epoch.
    pub loss: f64,
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: SeqModel,
    pub curve: Vec<PretrainEpoch>,
}

/// Next-token maximum likelihood on `corpus`, with a constant learning rate,
/// until `held_out` probe accuracy reaches the target or the epoch budget is
/// spent.
pub fn pretrain_base(
    mut model: SeqModel,
    corpus: &[Statement],
    held_out: &[KnowledgeProbe],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("pretraining corpus is empty".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &model);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let weight = -1.0 / batch.len() as f64;
            let mut grads = {
                let net = model.net();
                let mut acc = GradAccumulator::new(&net);
                for &i in batch {
                    let s = &corpus[i];
                    epoch_loss -= acc.add(&s.prompt, &s.response, weight)?;
                }
                acc.finish()
            };
            if !grads.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient in pretraining epoch {epoch}")));
            }
            clip(&mut grads, cfg.grad_clip);
            opt.apply(&mut model, &grads, cfg.lr);
        }
        let loss = epoch_loss / corpus.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss became {loss} in epoch {epoch}")));
        }
        let probe_accuracy = if held_out.is_empty() {
            f64::NAN
        } else {
            eval::probe_accuracy(&model, held_out)?
        };
        curve.push(PretrainEpoch {
            epoch,
            loss,
            probe_accuracy,
        });
        if probe_accuracy >= cfg.target_accuracy {
            break;
        }
    }
    Ok(PretrainOutcome { model, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Set from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
    /// Examples in the rolling reward-accuracy window.
    pub accuracy_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            lr: 5e-5,
            optimizer: OptimizerConfig::Sgd { momentum: 0.9 },
            grad_clip: Some(1.0),
            seed: 0,
            accuracy_window: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.accuracy_window == 0 {
            return Err(Error::Config("train.accuracy_window must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("train.grad_clip must be > 0 when set".into()));
            }
        }
        self.optimizer.validate()
    }
}

/// Batch means recorded before each update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub d_w: f64,
    pub d_l: f64,
    pub d_b: f64,
    pub lr: f64,
    pub rwd_acc_window: f64,
    /// Largest deviation between freshly recomputed reference
    /// log-probabilities and the values fixed at the start of training.
    #[serde(skip)]
    pub ref_drift: f64,
}

pub const METRICS_HEADER: &str = "step\tloss\td_w\td_l\td_b\tlr\trwd_acc_window";

impl StepMetrics {
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
            self.step, self.loss, self.d_w, self.d_l, self.d_b, self.lr, self.rwd_acc_window
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(Error::InvalidInput(format!("metrics row needs 7 columns: {line:?}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("bad number {s:?}: {e}")))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad step {:?}: {e}", f[0])))?,
            loss: num(f[1])?,
            d_w: num(f[2])?,
            d_l: num(f[3])?,
            d_b: num(f[4])?,
            lr: num(f[5])?,
            rwd_acc_window: num(f[6])?,
            ref_drift: 0.0,
        })
    }
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<String> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for m in metrics {
        text.push_str(&m.to_row());
        text.push('\n');
    }
    provenance::write_atomic(path, text.as_bytes())?;
    Ok(provenance::sha256_hex(text.as_bytes()))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::parse(path, "unexpected metrics header"));
    }
    lines
        .map(|l| StepMetrics::parse_row(l).map_err(|e| Error::parse(path, e)))
        .collect()
}

/// Reference log-probabilities of one example; fixed for the whole run.
#[derive(Debug, Clone, Copy)]
struct RefLogProbs {
    chosen: f64,
    rejected: f64,
    base: f64,
}

/// Serializable state of an interrupted preference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: SeqModel,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub metrics: Vec<StepMetrics>,
    pub window: Vec<bool>,
    pub config_hash: String,
}

impl TrainState {
    pub fn save(&self, path: &Path) -> Result<String> {
        provenance::write_json(path, self)
    }

    pub fn load(path: &Path, config_hash: &str) -> Result<Self> {
        let state: TrainState = provenance::read_json(path)?;
        if state.config_hash != config_hash {
            return Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                reason: format!(
                    "training state belongs to config {} not {config_hash}",
                    state.config_hash
                ),
            });
        }
        Ok(state)
    }
}

/// Minibatch preference optimization of a policy against a frozen
/// reference. Owns the policy exclusively for the duration of the run.
pub struct PreferenceTrainer<'a> {
    reference: &'a Reference,
    examples: &'a [PreferenceExample],
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    refs: Vec<RefLogProbs>,
    has_base: bool,
    state: TrainState,
    steps_per_epoch: usize,
}

impl<'a> PreferenceTrainer<'a> {
    pub fn new(
        policy: SeqModel,
        reference: &'a Reference,
        examples: &'a [PreferenceExample],
        loss_cfg: LossConfig,
        cfg: TrainConfig,
        config_hash: impl Into<String>,
    ) -> Result<Self> {
        loss_cfg.validate()?;
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::InvalidInput("preference corpus is empty".into()));
        }
        let has_base = examples.iter().all(PreferenceExample::is_cached);
        if loss_cfg.method == Method::Bapo && !has_base {
            return Err(Error::Config(
                "BAPO requires cached base responses (base, lp_ref_base) for every example; run the base-cache stage first"
                    .into(),
            ));
        }
        let net = reference.net();
        let refs = examples
            .iter()
            .map(|ex| {
                Ok(RefLogProbs {
                    chosen: net.sequence_log_prob(&ex.prompt, &ex.chosen)?.total,
                    rejected: net.sequence_log_prob(&ex.prompt, &ex.rejected)?.total,
                    base: ex.lp_ref_base.unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = OptimizerState::new(cfg.optimizer, &policy);
        let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
        Ok(Self {
            reference,
            examples,
            loss_cfg,
            cfg,
            refs,
            has_base,
            state: TrainState {
                policy,
                optimizer,
                step: 0,
                metrics: Vec::new(),
                window: Vec::new(),
                config_hash: config_hash.into(),
            },
            steps_per_epoch,
        })
    }

    /// Continues from a saved state. The state must match this trainer's
    /// configuration hash.
    pub fn resume(mut self, state: TrainState) -> Result<Self> {
        if state.config_hash != self.state.config_hash {
            return Err(Error::Config(format!(
                "cannot resume: state config {} differs from {}",
                state.config_hash, self.state.config_hash
            )));
        }
        if state.step > self.total_steps() {
            return Err(Error::Config("cannot resume: state is past the end of the schedule".into()));
        }
        self.state = state;
        Ok(self)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let within = step % self.steps_per_epoch;
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let start = within * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(order.len());
        order[start..end].to_vec()
    }

    fn bundle(&self, policy: &crate::model::Net<'_>, i: usize) -> Result<(LogProbBundle, [f64; 3])> {
        let ex = &self.examples[i];
        let r = self.refs[i];
        let chosen = policy.sequence_log_prob(&ex.prompt, &ex.chosen)?.total;
        let rejected = policy.sequence_log_prob(&ex.prompt, &ex.rejected)?.total;
        let base = match &ex.base {
            Some(b) if self.has_base => policy.sequence_log_prob(&ex.prompt, b)?.total,
            _ => f64::NAN,
        };
        let lens = [
            ex.chosen.len() as f64,
            ex.rejected.len() as f64,
            ex.base.as_ref().map_or(1.0, |b| b.len() as f64),
        ];
        let norm = if self.loss_cfg.length_normalize { lens } else { [1.0; 3] };
        // Bundles must be finite; a missing base contributes a zero gap to
        // losses that ignore it.
        let (base_pol, base_ref) = if base.is_nan() { (0.0, 0.0) } else { (base, r.base) };
        Ok((
            LogProbBundle {
                lp_policy_chosen: chosen / norm[0],
                lp_policy_rejected: rejected / norm[1],
                lp_policy_base: base_pol / norm[2],
                lp_ref_chosen: r.chosen / norm[0],
                lp_ref_rejected: r.rejected / norm[1],
                lp_ref_base: base_ref / norm[2],
            },
            norm,
        ))
    }

    fn reference_drift(&self, batch: &[usize]) -> Result<f64> {
        let net = self.reference.net();
        let mut drift: f64 = 0.0;
        for &i in batch {
            let ex = &self.examples[i];
            drift = drift.max((net.sequence_log_prob(&ex.prompt, &ex.chosen)?.total - self.refs[i].chosen).abs());
            drift = drift.max((net.sequence_log_prob(&ex.prompt, &ex.rejected)?.total - self.refs[i].rejected).abs());
            if let (Some(b), true) = (&ex.base, self.has_base) {
                drift = drift.max((net.sequence_log_prob(&ex.prompt, b)?.total - self.refs[i].base).abs());
            }
        }
        Ok(drift)
    }

    /// One optimization step. Metrics describe the policy before the update.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_done() {
            return Err(Error::InvalidInput("training schedule already complete".into()));
        }
        let step = self.state.step;
        let batch = self.batch_indices(step);
        let lr = cosine_lr(step, self.total_steps(), self.cfg.lr)?;

        let mut bundles = Vec::with_capacity(batch.len());
        let mut norms = Vec::with_capacity(batch.len());
        {
            let net = self.state.policy.net();
            for &i in &batch {
                let (b, n) = self.bundle(&net, i)?;
                bundles.push(b);
                norms.push(n);
            }
        }
        let batch_loss = loss::batch_loss(&bundles, &self.loss_cfg);
        let value = batch_loss.as_ref().map(|b| b.value).unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("loss is {value}"),
                last_good: Box::new(self.state.policy.clone()),
            });
        }
        let batch_loss = batch_loss?;

        let n = bundles.len() as f64;
        let mean = |f: &dyn Fn(&LogProbBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        for b in &bundles {
            self.state.window.push(b.lp_policy_chosen > b.lp_policy_rejected);
        }
        let excess = self.state.window.len().saturating_sub(self.cfg.accuracy_window);
        self.state.window.drain(..excess);
        let window_acc =
            self.state.window.iter().filter(|&&c| c).count() as f64 / self.state.window.len() as f64;
        let metrics = StepMetrics {
            step,
            loss: value,
            d_w: mean(&|b| b.gap_chosen()),
            d_l: mean(&|b| b.gap_rejected()),
            d_b: if self.has_base { mean(&|b| b.gap_base()) } else { f64::NAN },
            lr,
            rwd_acc_window: window_acc,
            ref_drift: self.reference_drift(&batch)?,
        };

        let mut grads = {
            let net = self.state.policy.net();
            let mut acc = GradAccumulator::new(&net);
            for ((&i, g), norm) in batch.iter().zip(&batch_loss.grads).zip(&norms) {
                let ex = &self.examples[i];
                acc.add(&ex.prompt, &ex.chosen, g.d_lp_chosen / norm[0])?;
                acc.add(&ex.prompt, &ex.rejected, g.d_lp_rejected / norm[1])?;
                if g.d_lp_base != 0.0 {
                    if let Some(b) = &ex.base {
                        acc.add(&ex.prompt, b, g.d_lp_base / norm[2])?;
                    }
                }
            }
            acc.finish()
        };
        if !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient".into(),
                last_good: Box::new(self.state.policy.clone()),
            });
        }
        clip(&mut grads, self.cfg.grad_clip);
        self.state.optimizer.apply(&mut self.state.policy, &grads, lr);
        self.state.step += 1;
        self.state.metrics.push(metrics);
        Ok(metrics)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            policy: self.state.policy,
            metrics: self.state.metrics,
        }
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: SeqModel,
    pub metrics: Vec<StepMetrics>,
}

/// Runs a full preference-optimization schedule.
pub fn train_preference(
    policy: SeqModel,
    reference: &Reference,
    examples: &[PreferenceExample],
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    PreferenceTrainer::new(policy, reference, examples, *loss_cfg, *train_cfg, "")?.run()
}

/// Mean policy-minus-reference gaps over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub d_w: f64,
    pub d_l: f64,
    pub d_b: f64,
}

pub fn mean_gaps(policy: &SeqModel, reference: &Reference, examples: &[PreferenceExample]) -> Result<GapSummary> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("mean_gaps on an empty set".into()));
    }
    let p = policy.net();
    let r = reference.net();
    let mut sums = [0.0; 3];
    let mut n_base = 0usize;
    for ex in examples {
        sums[0] += p.sequence_log_prob(&ex.prompt, &ex.chosen)?.total - r.sequence_log_prob(&ex.prompt, &ex.chosen)?.total;
        sums[1] += p.sequence_log_prob(&ex.prompt, &ex.rejected)?.total
            - r.sequence_log_prob(&ex.prompt, &ex.rejected)?.total;
        if let (Some(b), Some(lp)) = (&ex.base, ex.lp_ref_base) {
            sums[2] += p.sequence_log_prob(&ex.prompt, b)?.total - lp;
            n_base += 1;
        }
    }
    let n = examples.len() as f64;
    Ok(GapSummary {
        d_w: sums[0] / n,
        d_l: sums[1] / n,
        d_b: if n_base > 0 { sums[2] / n_base as f64 } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_world, gen_preference_corpus, neutral_corpus, tok, PreferenceType, WorldConfig};
    use crate::model::{AdapterConfig, ModelConfig, EOS};

    fn setup(n_prompts: usize) -> (Reference, Vec<PreferenceExample>) {
        let w = build_world(3, WorldConfig::default()).unwrap();
        let base = SeqModel::new(ModelConfig::default(), w.vocab.clone(), 5).unwrap();
        let reference = base.freeze();
        let corpus = gen_preference_corpus(&w, &[PreferenceType::P2A, PreferenceType::P2B], n_prompts, 0.0, 1).unwrap();
        let net = reference.net();
        let examples = corpus
            .into_iter()
            .filter(|e| e.type_id == "P2A")
            .map(|e| {
                let b = vec![tok::ANS, e.chosen[0], EOS];
                let lp = net.sequence_log_prob(&e.prompt, &b).unwrap().total;
                PreferenceExample {
                    base: Some(b),
                    lp_ref_base: Some(lp),
                    ..e
                }
            })
            .collect();
        (reference, examples)
    }

    fn policy(reference: &Reference) -> SeqModel {
        let mut p = reference.thaw();
        p.attach_adapters(AdapterConfig::default(), 11).unwrap();
        p
    }

    fn fast() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            optimizer: OptimizerConfig::adam(),
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.3).unwrap(), 0.3);
        assert_eq!(cosine_lr(10, 10, 0.3).unwrap(), 0.0);
        assert!((cosine_lr(5, 10, 0.3).unwrap() - 0.15).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.3).is_err());
        let xs: Vec<f64> = (0..=20).map(|s| cosine_lr(s, 20, 1.0).unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn step_zero_is_identity() {
        let (reference, ex) = setup(24);
        for method_cfg in [LossConfig::dpo(0.1), LossConfig::bapo(0.1, 5.0)] {
            let mut t = PreferenceTrainer::new(policy(&reference), &reference, &ex, method_cfg, fast(), "h").unwrap();
            let m = t.step().unwrap();
            assert_eq!(m.step, 0);
            assert!((m.loss - std::f64::consts::LN_2).abs() < 1e-6);
            for g in [m.d_w, m.d_l, m.d_b] {
                assert!(g.abs() < 1e-9, "gap {g}");
            }
        }
    }

    #[test]
    fn bapo_needs_base_cache() {
        let (reference, mut ex) = setup(24);
        ex[3].base = None;
        ex[3].lp_ref_base = None;
        let err = PreferenceTrainer::new(policy(&reference), &reference, &ex, LossConfig::bapo(0.1, 5.0), fast(), "h")
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config(ref m) if m.contains("base-cache")));
        // DPO does not need it, and still charts d_b as unavailable.
        let mut t = PreferenceTrainer::new(policy(&reference), &reference, &ex, LossConfig::dpo(0.1), fast(), "h").unwrap();
        assert!(t.step().unwrap().d_b.is_nan());
    }

    #[test]
    fn zero_lambda_matches_dpo_trajectory() {
        let (reference, ex) = setup(40);
        let dpo = train_preference(policy(&reference), &reference, &ex, &LossConfig::dpo(0.1), &fast()).unwrap();
        let bapo = train_preference(policy(&reference), &reference, &ex, &LossConfig::bapo(0.1, 0.0), &fast()).unwrap();
        assert_eq!(dpo.policy, bapo.policy);
        assert_eq!(dpo.metrics, bapo.metrics);
    }

    #[test]
    fn runs_are_deterministic_and_reference_is_frozen() {
        let (reference, ex) = setup(40);
        let cfg = LossConfig::bapo(0.1, 5.0);
        let a = train_preference(policy(&reference), &reference, &ex, &cfg, &fast()).unwrap();
        let b = train_preference(policy(&reference), &reference, &ex, &cfg, &fast()).unwrap();
        assert_eq!(a.metrics.len(), ex.len().div_ceil(8));
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.metrics, b.metrics);
        assert!(a.metrics.iter().all(|m| m.ref_drift <= 1e-12));
        assert!(a.metrics.iter().all(|m| m.rwd_acc_window >= 0.0 && m.rwd_acc_window <= 1.0));
        assert_ne!(a.policy, reference.thaw());
    }

    #[test]
    fn resumed_run_is_bit_identical() {
        let (reference, ex) = setup(60);
        let cfg = LossConfig::bapo(0.1, 5.0);
        let tc = TrainConfig { epochs: 2, ..fast() };
        let whole = PreferenceTrainer::new(policy(&reference), &reference, &ex, cfg, tc, "cfg").unwrap().run().unwrap();

        let mut first = PreferenceTrainer::new(policy(&reference), &reference, &ex, cfg, tc, "cfg").unwrap();
        for _ in 0..5 {
            first.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        first.into_state().save(&path).unwrap();
        assert!(matches!(TrainState::load(&path, "other"), Err(Error::StaleArtifact { .. })));
        let state = TrainState::load(&path, "cfg").unwrap();
        let resumed = PreferenceTrainer::new(policy(&reference), &reference, &ex, cfg, tc, "cfg")
            .unwrap()
            .resume(state)
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(whole.policy, resumed.policy);
        let strip = |ms: &[StepMetrics]| ms.iter().map(StepMetrics::to_row).collect::<Vec<_>>();
        assert_eq!(strip(&whole.metrics), strip(&resumed.metrics));
    }

    #[test]
    fn tiny_learning_rate_barely_moves() {
        let (reference, ex) = setup(24);
        let tc = TrainConfig {
            lr: 1e-12,
            grad_clip: None,
            optimizer: OptimizerConfig::Sgd { momentum: 0.0 },
            ..fast()
        };
        let start = policy(&reference);
        let out = train_preference(start.clone(), &reference, &ex, &LossConfig::dpo(0.1), &tc).unwrap();
        for id in start.trainable_blocks() {
            let (a, b) = (start.block(id).unwrap(), out.policy.block(id).unwrap());
            let moved = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(moved < 1e-9, "{id} moved {moved}");
        }
    }

    #[test]
    fn nan_loss_reports_divergence() {
        let (reference, ex) = setup(24);
        let mut p = policy(&reference);
        p.params.output_bias.row_mut(0)[EOS] = f64::NAN;
        let mut t = PreferenceTrainer::new(p.clone(), &reference, &ex, LossConfig::dpo(0.1), fast(), "h").unwrap();
        match t.step() {
            Err(Error::Diverged { step, last_good, .. }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good.params.output_bias.data.len(), p.params.output_bias.data.len());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn dpo_raises_chosen_and_lowers_rejected() {
        let (reference, ex) = setup(120);
        let out = train_preference(policy(&reference), &reference, &ex, &LossConfig::dpo(0.1), &fast()).unwrap();
        let g = mean_gaps(&out.policy, &reference, &ex).unwrap();
        assert!(g.d_w > 0.0 && g.d_l < 0.0, "{g:?}");
        assert!(eval::reward_accuracy(&out.policy, &ex).unwrap() > 0.9);
    }

    #[test]
    fn metrics_file_round_trip() {
        let (reference, ex) = setup(24);
        let out = train_preference(policy(&reference), &reference, &ex, &LossConfig::bapo(0.1, 5.0), &fast()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        write_metrics(&path, &out.metrics).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), out.metrics.len());
        for (a, b) in back.iter().zip(&out.metrics) {
            assert_eq!(a.to_row(), b.to_row());
            assert_eq!((a.loss, a.d_b, a.lr), (b.loss, b.d_b, b.lr));
        }
    }

    #[test]
    fn pretraining_behaviour() {
        let w = build_world(2, WorldConfig::default()).unwrap();
        let model = SeqModel::new(ModelConfig::default(), w.vocab.clone(), 1).unwrap();
        let corpus = neutral_corpus(&w);
        let none = pretrain_base(model.clone(), &corpus, &[], &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(none.model, model);
        assert!(none.curve.is_empty());

        let probes = crate::data::probe_pool(&w);
        let cfg = PretrainConfig { epochs: 3, target_accuracy: 2.0, ..Default::default() };
        let out = pretrain_base(model, &corpus, &probes, &cfg).unwrap();
        assert_eq!(out.curve.len(), 3);
        assert!(out.curve[2].loss < out.curve[0].loss);
        assert!(pretrain_base(out.model, &[], &probes, &cfg).is_err());
    }
}
