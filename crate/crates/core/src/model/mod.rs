//! The speaker-wise conditional network.
//!
//! A Transformer encoder turns features `X` (F×T) into `E` (D×T). The
//! decoder is called once per speaker: it stacks `E` over an embedding of
//! the previous speaker's activity, runs one LSTM step per frame along the
//! speaker axis, and emits that speaker's posteriors (1×T). A linear
//! fixed-speaker head on `E` gives the conventional baseline.

mod config;
mod graph;
mod params;

pub use config::ModelConfig;
pub use graph::{Graph, Mode, StepNodes};
pub use params::{init_model, BlockIdx, LinearIdx, LstmIdx, ModelParams, NormIdx, ParamLayout};

use crate::activity::PosteriorMatrix;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Acoustic feature frames, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Matrix,
    frame_shift: f64,
}

impl FeatureSequence {
    pub fn new(frames: Matrix, frame_shift: f64) -> Result<Self> {
        if frames.cols() == 0 || frames.rows() == 0 {
            return Err(Error::shape("features", "need at least one frame and one dimension"));
        }
        if !frames.all_finite() {
            return Err(Error::Contract("non-finite feature value".into()));
        }
        if frame_shift.is_nan() || frame_shift <= 0.0 {
            return Err(Error::Contract(format!("frame shift {frame_shift} must be positive")));
        }
        Ok(FeatureSequence {
            frames,
            frame_shift,
        })
    }

    pub fn feat_dim(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.cols()
    }

    pub fn frames(&self) -> &Matrix {
        &self.frames
    }

    pub fn frame_shift(&self) -> f64 {
        self.frame_shift
    }
}

/// Per-frame LSTM hidden and cell values carried between speaker iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Matrix,
    pub cell: Matrix,
}

impl DecoderState {
    pub fn zeros(hidden_dim: usize, frames: usize) -> Self {
        DecoderState {
            hidden: Matrix::zeros(hidden_dim, frames),
            cell: Matrix::zeros(hidden_dim, frames),
        }
    }

    /// Little-endian encoding: rows and cols as u32, then hidden and cell values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.hidden.len());
        out.extend_from_slice(&(self.hidden.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.hidden.cols() as u32).to_le_bytes());
        for v in self.hidden.data().iter().chain(self.cell.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Contract("malformed decoder state bytes".into());
        let word = |i: usize| -> Result<usize> {
            let b = bytes.get(i..i + 4).ok_or_else(bad)?;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        };
        let (rows, cols) = (word(0)?, word(4)?);
        let n = rows * cols;
        if bytes.len() != 8 + 16 * n {
            return Err(bad());
        }
        let mut vals = bytes[8..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let hidden: Vec<f64> = vals.by_ref().take(n).collect();
        let cell: Vec<f64> = vals.collect();
        Ok(DecoderState {
            hidden: Matrix::from_vec(rows, cols, hidden)?,
            cell: Matrix::from_vec(rows, cols, cell)?,
        })
    }
}

/// Encoder output `E_P` (D×T), computed without dropout.
pub fn encode(params: &ModelParams, x: &FeatureSequence) -> Result<Matrix> {
    let mut g = Graph::new(params, Mode::Eval);
    let e = g.encode(x.frames())?;
    Ok(g.value(e).clone())
}

/// One encoder block applied to a D×T input, without dropout.
pub fn encoder_block(params: &ModelParams, block: usize, e: &Matrix) -> Result<Matrix> {
    let idx = *params
        .layout()
        .blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("no encoder block {block}")))?;
    let mut g = Graph::new(params, Mode::Eval);
    let input = g.constant(e.clone());
    let out = g.encoder_block(&idx, input)?;
    Ok(g.value(out).clone())
}

/// Attention weights (keys × queries, one matrix per head) of one block.
pub fn attention_weights(params: &ModelParams, block: usize, e: &Matrix) -> Result<Vec<Matrix>> {
    let idx = *params
        .layout()
        .blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("no encoder block {block}")))?;
    let mut g = Graph::new(params, Mode::Eval);
    g.record_attention();
    let input = g.constant(e.clone());
    g.encoder_block(&idx, input)?;
    Ok(g.attention_nodes().iter().map(|&n| g.value(n).clone()).collect())
}

/// Output of [`decode_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub posterior: Vec<f64>,
    pub state: DecoderState,
    /// The stacked decoder input, 2D×T.
    pub stacked: Matrix,
}

/// Decodes one speaker given the encoder output, the previous speaker's
/// binary activity, and the carried decoder state. Inputs are not modified.
pub fn decode_step(
    params: &ModelParams,
    encoded: &Matrix,
    prev_activity: &[u8],
    state: &DecoderState,
) -> Result<StepOutput> {
    if state.hidden.shape() != state.cell.shape() {
        return Err(Error::shape("decode_step", "hidden and cell shapes differ"));
    }
    let mut g = Graph::new(params, Mode::Eval);
    let e = g.constant(encoded.clone());
    let h = g.constant(state.hidden.clone());
    let c = g.constant(state.cell.clone());
    let step = g.decode_step(e, prev_activity, h, c)?;
    Ok(StepOutput {
        posterior: g.value(step.posterior).data().to_vec(),
        state: DecoderState {
            hidden: g.value(step.hidden).clone(),
            cell: g.value(step.cell).clone(),
        },
        stacked: g.value(step.stacked).clone(),
    })
}

/// Baseline posteriors from the fixed-speaker head, `s_fixed` × T.
pub fn eend_forward(
    params: &ModelParams,
    x: &FeatureSequence,
    s_fixed: usize,
) -> Result<PosteriorMatrix> {
    let configured = params.config().baseline_speakers;
    if configured == 0 || configured != s_fixed {
        return Err(Error::Config(format!(
            "baseline head has {configured} outputs, requested {s_fixed}"
        )));
    }
    let mut g = Graph::new(params, Mode::Eval);
    let e = g.encode(x.frames())?;
    let z = g.baseline_head(e)?;
    PosteriorMatrix::new(g.value(z).clone())
}
