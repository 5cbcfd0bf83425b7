use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdaptedWeight, Matrix, ModelParams};
use crate::error::{Error, Result};

/// Rank and scale of the low-rank deltas. The effective weight is
/// `W + (alpha / rank) · A · B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl AdapterConfig {
    /// Rank `r` with `alpha = 2r`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter.rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("adapter.alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    /// rows(W) × r
    pub down: Matrix,
    /// r × cols(W)
    pub up: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub seed: u64,
    pub hidden_tok: LowRankAdapter,
    pub hidden_mix: LowRankAdapter,
    pub output: LowRankAdapter,
}

impl AdapterSet {
    pub(super) fn init(base: &ModelParams, config: AdapterConfig, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |w: &Matrix| LowRankAdapter {
            down: Matrix::from_fn(w.rows, config.rank, |_, _| rng.random_range(-init_scale..init_scale)),
            up: Matrix::zeros(config.rank, w.cols),
        };
        let hidden_tok = make(&base.hidden_tok);
        let hidden_mix = make(&base.hidden_mix);
        let output = make(&base.output);
        Self {
            config,
            seed,
            hidden_tok,
            hidden_mix,
            output,
        }
    }

    pub fn get(&self, w: AdaptedWeight) -> &LowRankAdapter {
        match w {
            AdaptedWeight::HiddenTok => &self.hidden_tok,
            AdaptedWeight::HiddenMix => &self.hidden_mix,
            AdaptedWeight::Output => &self.output,
        }
    }

    pub fn get_mut(&mut self, w: AdaptedWeight) -> &mut LowRankAdapter {
        match w {
            AdaptedWeight::HiddenTok => &mut self.hidden_tok,
            AdaptedWeight::HiddenMix => &mut self.hidden_mix,
            AdaptedWeight::Output => &mut self.output,
        }
    }

    pub(super) fn effective<'a>(&self, w: AdaptedWeight, base: &'a Matrix) -> Cow<'a, Matrix> {
        let adapter = self.get(w);
        let delta = adapter.down.matmul(&adapter.up);
        let scale = self.config.scale();
        let mut out = base.clone();
        for (o, d) in out.data.iter_mut().zip(&delta.data) {
            *o += scale * d;
        }
        Cow::Owned(out)
    }

    pub(super) fn check_shapes(&self, base: &ModelParams) -> Result<()> {
        self.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        for w in AdaptedWeight::ALL {
            let a = self.get(w);
            let bw = base.weight(w);
            let r = self.config.rank;
            if (a.down.rows, a.down.cols, a.up.rows, a.up.cols) != (bw.rows, r, r, bw.cols)
                || a.down.data.len() != bw.rows * r
                || a.up.data.len() != r * bw.cols
            {
                return Err(Error::Checkpoint(format!("adapter on {w:?} has inconsistent shape")));
            }
            if !a.down.is_finite() || !a.up.is_finite() {
                return Err(Error::Checkpoint(format!("adapter on {w:?} has non-finite values")));
            }
        }
        Ok(())
    }
}
