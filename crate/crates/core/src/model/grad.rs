//! Reverse-mode gradients of weighted sums of sequence log-probabilities.

use super::{softmax, AdaptedWeight, BlockId, Matrix, Net};
use crate::error::Result;

/// Gradient blocks in the order of [`super::SeqModel::trainable_blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub blocks: Vec<(BlockId, Matrix)>,
}

impl ModelGrads {
    pub fn get(&self, id: BlockId) -> Option<&Matrix> {
        self.blocks.iter().find(|(b, _)| *b == id).map(|(_, m)| m)
    }

    pub fn norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|(_, m)| &m.data)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for (_, m) in &mut self.blocks {
            for x in &mut m.data {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|(_, m)| m.is_finite())
    }
}

/// Gradients with respect to the effective (adapter-folded) weights.
struct DenseGrads {
    embedding: Matrix,
    position: Matrix,
    hidden_tok: Matrix,
    hidden_mix: Matrix,
    hidden_bias: Matrix,
    output: Matrix,
    output_bias: Matrix,
}

/// Accumulates `Σ_i w_i · ∇ log π(response_i | prompt_i)` over a batch and
/// maps the result onto the model's trainable blocks.
pub struct GradAccumulator<'n, 'a> {
    net: &'n Net<'a>,
    dense: DenseGrads,
}

impl<'n, 'a> GradAccumulator<'n, 'a> {
    pub fn new(net: &'n Net<'a>) -> Self {
        let p = &net.model().params;
        let like = |m: &Matrix| Matrix::zeros(m.rows, m.cols);
        Self {
            net,
            dense: DenseGrads {
                embedding: like(&p.embedding),
                position: like(&p.position),
                hidden_tok: like(&p.hidden_tok),
                hidden_mix: like(&p.hidden_mix),
                hidden_bias: like(&p.hidden_bias),
                output: like(&p.output),
                output_bias: like(&p.output_bias),
            },
        }
    }

    /// Adds `weight · ∇ log π(response | prompt)`. Returns the sequence
    /// log-probability computed on the way.
    pub fn add(&mut self, prompt: &[usize], response: &[usize], weight: f64) -> Result<f64> {
        let net = self.net;
        net.check_pair(prompt, response)?;
        let tokens: Vec<usize> = prompt.iter().chain(response).copied().collect();
        let n = tokens.len() - 1;
        let trace = net.forward(&tokens, n);
        let h_dim = net.model().config.hidden;
        let g = &mut self.dense;

        let mut du = vec![vec![0.0; h_dim]; n];
        // Σ_{t' ≥ t} dm_{t'} / (t' + 1), filled from the end.
        let mut dm_scaled = vec![vec![0.0; h_dim]; n];
        let mut total = 0.0;

        for t in (0..n).rev() {
            if t + 1 < prompt.len() {
                continue;
            }
            let logits = net.logits(&trace.h[t]);
            let p = softmax(&logits);
            let target = tokens[t + 1];
            total += (p[target].ln()).min(0.0);
            if weight == 0.0 {
                continue;
            }
            let mut dlogit: Vec<f64> = p.iter().map(|&x| -weight * x).collect();
            dlogit[target] += weight;

            g.output.add_outer(&trace.h[t], &dlogit, 1.0);
            for (b, d) in g.output_bias.data.iter_mut().zip(&dlogit) {
                *b += d;
            }
            let mut dh = vec![0.0; h_dim];
            net.output_weight().mul_vec_acc(&dlogit, &mut dh);
            let da: Vec<f64> = dh
                .iter()
                .zip(&trace.h[t])
                .map(|(d, h)| d * (1.0 - h * h))
                .collect();
            for (b, d) in g.hidden_bias.data.iter_mut().zip(&da) {
                *b += d;
            }
            g.hidden_tok.add_outer(&trace.u[t], &da, 1.0);
            g.hidden_mix.add_outer(&trace.m[t], &da, 1.0);
            net.hidden_tok_weight().mul_vec_acc(&da, &mut du[t]);
            let inv = 1.0 / (t + 1) as f64;
            let mut dm = vec![0.0; h_dim];
            net.hidden_mix_weight().mul_vec_acc(&da, &mut dm);
            for (s, d) in dm_scaled[t].iter_mut().zip(&dm) {
                *s += d * inv;
            }
        }

        if weight != 0.0 {
            let mut carry = vec![0.0; h_dim];
            for t in (0..n).rev() {
                for (c, s) in carry.iter_mut().zip(&dm_scaled[t]) {
                    *c += s;
                }
                for (d, c) in du[t].iter_mut().zip(&carry) {
                    *d += c;
                }
                for (e, d) in g.embedding.row_mut(tokens[t]).iter_mut().zip(&du[t]) {
                    *e += d;
                }
                for (q, d) in g.position.row_mut(t).iter_mut().zip(&du[t]) {
                    *q += d;
                }
            }
        }
        Ok(total)
    }

    /// Projects onto trainable blocks. With adapters attached, only the
    /// adapter factors receive gradient: `dA = s·dW·Bᵀ`, `dB = s·Aᵀ·dW`.
    pub fn finish(self) -> ModelGrads {
        let model = self.net.model();
        let d = self.dense;
        let blocks = match &model.adapters {
            None => vec![
                (BlockId::Embedding, d.embedding),
                (BlockId::Position, d.position),
                (BlockId::HiddenTok, d.hidden_tok),
                (BlockId::HiddenMix, d.hidden_mix),
                (BlockId::HiddenBias, d.hidden_bias),
                (BlockId::Output, d.output),
                (BlockId::OutputBias, d.output_bias),
            ],
            Some(set) => {
                let scale = set.config.scale();
                let mut out = Vec::with_capacity(6);
                for w in AdaptedWeight::ALL {
                    let dw = match w {
                        AdaptedWeight::HiddenTok => &d.hidden_tok,
                        AdaptedWeight::HiddenMix => &d.hidden_mix,
                        AdaptedWeight::Output => &d.output,
                    };
                    let a = set.get(w);
                    let mut d_down = dw.matmul_t(&a.up);
                    let mut d_up = a.down.t_matmul(dw);
                    for x in d_down.data.iter_mut().chain(d_up.data.iter_mut()) {
                        *x *= scale;
                    }
                    out.push((BlockId::AdapterDown(w), d_down));
                    out.push((BlockId::AdapterUp(w), d_up));
                }
                out
            }
        };
        ModelGrads { blocks }
    }
}
