use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Indices of a weight matrix (out×in) and its bias column (out×1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIdx {
    pub attn_norm: NormIdx,
    pub query: LinearIdx,
    pub key: LinearIdx,
    pub value: LinearIdx,
    pub output: LinearIdx,
    pub ffn_norm: NormIdx,
    pub ffn_in: LinearIdx,
    pub ffn_out: LinearIdx,
}

/// LSTM gates are stacked input, forget, cell, output along the rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmIdx {
    /// 4D × 2D
    pub input: usize,
    /// 4D × D
    pub recurrent: usize,
    /// 4D × 1
    pub bias: usize,
}

/// Where each weight lives in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub input_proj: LinearIdx,
    pub blocks: Vec<BlockIdx>,
    pub final_norm: NormIdx,
    pub condition_proj: LinearIdx,
    pub lstm: LstmIdx,
    pub output_proj: LinearIdx,
    pub baseline_head: Option<LinearIdx>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols, init));
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> LinearIdx {
        LinearIdx {
            weight: self.add(format!("{name}.weight"), out, inp, Init::Glorot),
            bias: self.add(format!("{name}.bias"), out, 1, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{name}.gain"), dim, 1, Init::Ones),
            bias: self.add(format!("{name}.bias"), dim, 1, Init::Zeros),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, Builder) {
    let d = cfg.hidden_dim;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let input_proj = b.linear("encoder.input", d, cfg.feat_dim);
    let blocks = (0..cfg.num_blocks)
        .map(|p| {
            let n = format!("encoder.block{p}");
            BlockIdx {
                attn_norm: b.norm(&format!("{n}.attn_norm"), d),
                query: b.linear(&format!("{n}.query"), d, d),
                key: b.linear(&format!("{n}.key"), d, d),
                value: b.linear(&format!("{n}.value"), d, d),
                output: b.linear(&format!("{n}.attn_out"), d, d),
                ffn_norm: b.norm(&format!("{n}.ffn_norm"), d),
                ffn_in: b.linear(&format!("{n}.ffn_in"), cfg.ffn_dim, d),
                ffn_out: b.linear(&format!("{n}.ffn_out"), d, cfg.ffn_dim),
            }
        })
        .collect();
    let final_norm = b.norm("encoder.final_norm", d);
    let condition_proj = b.linear("decoder.condition", d, 1);
    let lstm = LstmIdx {
        input: b.add("decoder.lstm.input".into(), 4 * d, 2 * d, Init::Glorot),
        recurrent: b.add("decoder.lstm.recurrent".into(), 4 * d, d, Init::Glorot),
        bias: b.add("decoder.lstm.bias".into(), 4 * d, 1, Init::Zeros),
    };
    let output_proj = b.linear("decoder.output", 1, d);
    let baseline_head =
        (cfg.baseline_speakers > 0).then(|| b.linear("baseline.head", cfg.baseline_speakers, d));
    (
        ParamLayout {
            input_proj,
            blocks,
            final_norm,
            condition_proj,
            lstm,
            output_proj,
            baseline_head,
        },
        b,
    )
}

/// All trainable weights, stored flat in a fixed order with names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: ParamLayout,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

/// Draws initial weights; the same seed always gives the same bits.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let (layout, builder) = build_layout(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = builder
        .shapes
        .iter()
        .map(|&(rows, cols, init)| match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Glorot => {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Matrix::from_vec(rows, cols, data).expect("shape")
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        layout,
        names: builder.names,
        tensors,
    })
}

impl ModelParams {
    /// Reassembles parameters from named tensors, e.g. from a checkpoint.
    /// Every expected name must appear exactly once with the right shape.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Matrix)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(config);
        let mut slots: Vec<Option<Matrix>> = vec![None; builder.names.len()];
        for (name, m) in named {
            let i = builder
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name:?}")))?;
            let (rows, cols, _) = builder.shapes[i];
            if m.shape() != (rows, cols) {
                return Err(Error::shape(
                    "from_named",
                    format!("{name}: expected {rows}x{cols}, got {:?}", m.shape()),
                ));
            }
            if slots[i].replace(m).is_some() {
                return Err(Error::Config(format!("parameter {name:?} appears twice")));
            }
        }
        let tensors = slots
            .into_iter()
            .zip(&builder.names)
            .map(|(m, n)| m.ok_or_else(|| Error::Config(format!("missing parameter {n:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams {
            config: config.clone(),
            layout,
            names: builder.names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    /// Copy with replaced tensors (same layout); used by gradient checks.
    pub fn with_tensors(&self, tensors: Vec<Matrix>) -> Result<Self> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("with_tensors", "layout mismatch"));
        }
        Ok(ModelParams {
            tensors,
            ..self.clone()
        })
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.tensors[idx]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }
}
