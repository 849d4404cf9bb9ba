use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{BlockIdx, LinearIdx, NormIdx};
use super::ModelParams;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, NodeId, Tape};

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with this value.
    Train { seed: u64 },
}

/// Node handles produced by one decoder iteration.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    /// Encoder output stacked over the embedded condition, 2D×T.
    pub stacked: NodeId,
    pub hidden: NodeId,
    pub cell: NodeId,
    /// Posteriors, 1×T.
    pub posterior: NodeId,
}

/// A forward computation of the network recorded on a [`Tape`].
///
/// Parameters are put on the tape the first time they are used, so
/// parameters a computation never touches get zero gradients.
pub struct Graph<'p> {
    tape: Tape,
    params: &'p ModelParams,
    bound: Vec<Option<NodeId>>,
    dropout: Option<(f64, ChaCha8Rng)>,
    record_attention: bool,
    attention: Vec<NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams, mode: Mode) -> Self {
        let dropout = match mode {
            Mode::Train { seed } if params.config().dropout > 0.0 => {
                Some((params.config().dropout, ChaCha8Rng::seed_from_u64(seed)))
            }
            _ => None,
        };
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.tensors().len()],
            dropout,
            record_attention: false,
            attention: Vec::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        self.tape.value(id)
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub(crate) fn record_attention(&mut self) {
        self.record_attention = true;
    }

    pub(crate) fn attention_nodes(&self) -> &[NodeId] {
        &self.attention
    }

    pub fn param(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.bound[idx] {
            return id;
        }
        let id = self.tape.param(idx, self.params.get(idx).clone());
        self.bound[idx] = Some(id);
        id
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        self.tape.constant(m)
    }

    /// Gradients of a scalar node with respect to every parameter.
    pub fn param_grads(&self, loss: NodeId) -> Result<Vec<Matrix>> {
        Ok(self.tape.backward(loss)?.params(self.params.tensors()))
    }

    fn linear(&mut self, idx: LinearIdx, x: NodeId) -> Result<NodeId> {
        let w = self.param(idx.weight);
        let b = self.param(idx.bias);
        let wx = self.tape.matmul(w, x)?;
        self.tape.add_col(wx, b)
    }

    fn norm(&mut self, idx: NormIdx, x: NodeId) -> Result<NodeId> {
        let g = self.param(idx.gain);
        let b = self.param(idx.bias);
        self.tape.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let (rows, cols) = self.tape.value(x).shape();
        let keep = 1.0 - *rate;
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.mul_const(x, Matrix::from_vec(rows, cols, mask)?)
    }

    /// Input projection followed by the encoder blocks and a final norm.
    pub fn encode(&mut self, features: &Matrix) -> Result<NodeId> {
        let cfg = self.params.config();
        if features.rows() != cfg.feat_dim {
            return Err(Error::shape(
                "encode",
                format!("{} feature rows, model expects {}", features.rows(), cfg.feat_dim),
            ));
        }
        let layout = self.params.layout();
        let x = self.tape.constant(features.clone());
        let mut e = self.linear(layout.input_proj, x)?;
        for block in &layout.blocks {
            e = self.encoder_block(block, e)?;
        }
        self.norm(layout.final_norm, e)
    }

    /// Pre-norm Transformer block: `e + Attn(LN(e))`, then `+ FFN(LN(.))`.
    pub fn encoder_block(&mut self, block: &BlockIdx, e: NodeId) -> Result<NodeId> {
        let cfg = self.params.config();
        let (heads, dk) = (cfg.num_heads, cfg.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();

        let a = self.norm(block.attn_norm, e)?;
        let q = self.linear(block.query, a)?;
        let k = self.linear(block.key, a)?;
        let v = self.linear(block.value, a)?;
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_rows(q, h * dk, dk)?;
            let kh = self.tape.slice_rows(k, h * dk, dk)?;
            let vh = self.tape.slice_rows(v, h * dk, dk)?;
            // scores[key, query]; columns are normalized over keys
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(kt, qh)?;
            let scores = self.tape.scale(scores, scale);
            let weights = self.tape.softmax_cols(scores);
            if self.record_attention {
                self.attention.push(weights);
            }
            head_out.push(self.tape.matmul(vh, weights)?);
        }
        let cat = self.tape.concat_rows(&head_out)?;
        let attn = self.linear(block.output, cat)?;
        let attn = self.dropout(attn)?;
        let e = self.tape.add(e, attn)?;

        let f = self.norm(block.ffn_norm, e)?;
        let f = self.linear(block.ffn_in, f)?;
        let f = self.tape.relu(f);
        let f = self.linear(block.ffn_out, f)?;
        let f = self.dropout(f)?;
        self.tape.add(e, f)
    }

    /// One speaker iteration: stack the encoder output over the embedded
    /// previous-speaker condition, advance the per-frame LSTM by one step
    /// along the speaker axis, and project to posteriors.
    pub fn decode_step(
        &mut self,
        encoded: NodeId,
        condition: &[u8],
        hidden: NodeId,
        cell: NodeId,
    ) -> Result<StepNodes> {
        let d = self.params.config().hidden_dim;
        let (rows, frames) = self.tape.value(encoded).shape();
        if rows != d {
            return Err(Error::shape("decode_step", format!("encoder rows {rows}, expected {d}")));
        }
        if condition.len() != frames {
            return Err(Error::shape(
                "decode_step",
                format!("condition of {} frames for {frames} frames", condition.len()),
            ));
        }
        if condition.iter().any(|&v| v > 1) {
            return Err(Error::Contract("condition is not binary".into()));
        }
        for s in [hidden, cell] {
            if self.tape.value(s).shape() != (d, frames) {
                return Err(Error::shape(
                    "decode_step",
                    format!("state {:?}, expected ({d}, {frames})", self.tape.value(s).shape()),
                ));
            }
        }
        let layout = self.params.layout();
        let cond = self
            .tape
            .constant(Matrix::row_vector(&condition.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()));
        let cond = self.linear(layout.condition_proj, cond)?;
        let stacked = self.tape.concat_vertical(encoded, cond)?;

        let w_in = self.param(layout.lstm.input);
        let w_rec = self.param(layout.lstm.recurrent);
        let bias = self.param(layout.lstm.bias);
        let gx = self.tape.matmul(w_in, stacked)?;
        let gh = self.tape.matmul(w_rec, hidden)?;
        let gates = self.tape.add(gx, gh)?;
        let gates = self.tape.add_col(gates, bias)?;
        let i = self.tape.slice_rows(gates, 0, d)?;
        let f = self.tape.slice_rows(gates, d, d)?;
        let g = self.tape.slice_rows(gates, 2 * d, d)?;
        let o = self.tape.slice_rows(gates, 3 * d, d)?;
        let i = self.tape.sigmoid(i);
        let f = self.tape.sigmoid(f);
        let g = self.tape.tanh(g);
        let o = self.tape.sigmoid(o);
        let keep = self.tape.mul(f, cell)?;
        let write = self.tape.mul(i, g)?;
        let new_cell = self.tape.add(keep, write)?;
        let squashed = self.tape.tanh(new_cell);
        let new_hidden = self.tape.mul(o, squashed)?;

        let logits = self.linear(layout.output_proj, new_hidden)?;
        let posterior = self.tape.sigmoid(logits);
        Ok(StepNodes {
            stacked,
            hidden: new_hidden,
            cell: new_cell,
            posterior,
        })
    }

    /// Zero hidden and cell nodes for the first speaker iteration.
    pub fn zero_state(&mut self, frames: usize) -> (NodeId, NodeId) {
        let d = self.params.config().hidden_dim;
        let h = self.tape.constant(Matrix::zeros(d, frames));
        let c = self.tape.constant(Matrix::zeros(d, frames));
        (h, c)
    }

    /// Fixed-speaker baseline: sigmoid of a linear head on the encoder output.
    pub fn baseline_head(&mut self, encoded: NodeId) -> Result<NodeId> {
        let head = self.params.layout().baseline_head.ok_or_else(|| {
            Error::Config("model has no baseline head (baseline_speakers = 0)".into())
        })?;
        let logits = self.linear(head, encoded)?;
        Ok(self.tape.sigmoid(logits))
    }
}
