//! Training objectives.
//!
//! Speaker order is arbitrary, so every objective first decides which label
//! row each output row is scored against:
//!
//! * `pit-baseline`: the fixed-speaker head, scored under the best
//!   permutation of zero-padded labels.
//! * `sc-pit`: the conditional decoder fed its own thresholded outputs,
//!   scored under the best permutation of its first `S` outputs.
//! * `sc-greedy-tf`: each iteration takes the unused label row closest to
//!   its output and feeds that row to the next iteration.
//! * `sc-two-stage-pit`: a free-running pass fixes the permutation, then a
//!   teacher-forced pass in that order is scored.
//!
//! Iterations past the number of labelled speakers are scored against the
//! all-zero row. All objectives are raw sums of clamped binary
//! cross-entropy; [`LossEval::normalized`] divides by `rows · T` for reporting.

mod assignment;
mod train;

use std::fmt;
use std::str::FromStr;

pub use assignment::{
    exhaustive_assignment, hungarian, optimal_permutation, PermutationResult, EXHAUSTIVE_MAX,
};
pub use train::{mix_seed, train_epoch, EpochStats, Example, TrainHyper};

use crate::activity::{ActivityMatrix, PosteriorMatrix};
use crate::decode::binarize;
use crate::error::{Error, Result};
use crate::model::{FeatureSequence, Graph, Mode, ModelParams};
use crate::numcore::{bce_sum, Matrix, NodeId};

/// Summed clamped binary cross-entropy of one posterior row against labels.
pub fn bce(z: &[f64], y: &[u8]) -> Result<f64> {
    if z.len() != y.len() {
        return Err(Error::shape("bce", format!("{} posteriors vs {} labels", z.len(), y.len())));
    }
    let y: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    Ok(bce_sum(z, &y))
}

/// Entry `(i, j)` is the BCE of posterior row `i` against label row `j`.
pub fn pairwise_bce_costs(z: &Matrix, y: &ActivityMatrix) -> Result<Matrix> {
    if z.rows() != y.num_speakers() || z.cols() != y.num_frames() {
        return Err(Error::shape(
            "pairwise_bce_costs",
            format!(
                "posteriors {:?} vs labels ({}, {})",
                z.shape(),
                y.num_speakers(),
                y.num_frames()
            ),
        ));
    }
    let s = z.rows();
    let mut cost = Matrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            cost[(i, j)] = bce(z.row(i), y.row(j))?;
        }
    }
    Ok(cost)
}

/// Permutation-invariant BCE: the minimum over label-row permutations.
pub fn pit_loss(z: &PosteriorMatrix, y: &ActivityMatrix) -> Result<(f64, PermutationResult)> {
    if z.num_rows() != y.num_speakers() {
        return Err(Error::shape(
            "pit_loss",
            format!("{} posterior rows vs {} label rows", z.num_rows(), y.num_speakers()),
        ));
    }
    let cost = pairwise_bce_costs(z.as_matrix(), y)?;
    let best = optimal_permutation(&cost)?;
    Ok((best.cost, best))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    PitBaseline,
    ScPit,
    ScGreedyTf,
    ScTwoStagePit,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::PitBaseline,
        LossKind::ScPit,
        LossKind::ScGreedyTf,
        LossKind::ScTwoStagePit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::PitBaseline => "pit-baseline",
            LossKind::ScPit => "sc-pit",
            LossKind::ScGreedyTf => "sc-greedy-tf",
            LossKind::ScTwoStagePit => "sc-two-stage-pit",
        }
    }

    pub fn is_conditional(self) -> bool {
        self != LossKind::PitBaseline
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pit-baseline" | "pit" | "eend" => Ok(LossKind::PitBaseline),
            "sc-pit" => Ok(LossKind::ScPit),
            "sc-greedy-tf" | "greedy-tf" => Ok(LossKind::ScGreedyTf),
            "sc-two-stage-pit" | "two-stage-pit" => Ok(LossKind::ScTwoStagePit),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected pit-baseline, sc-pit, greedy-tf or two-stage-pit)"
            ))),
        }
    }
}

/// What a loss evaluation recorded beyond its value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    /// Posteriors of the scored pass, one row per output.
    pub posteriors: Matrix,
    /// Condition fed into each scored iteration (empty for the baseline).
    pub conditions: Vec<Vec<u8>>,
    /// Label row scored against each output; `None` means the zero row.
    pub targets: Vec<Option<usize>>,
    /// Free-running pass of the two-stage loss.
    pub stage1: Option<Stage1Trace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Trace {
    pub posteriors: Matrix,
    pub conditions: Vec<Vec<u8>>,
    /// Best permutation of the first `S` outputs against the labels.
    pub perm: PermutationResult,
}

/// A loss value with optional parameter gradients.
#[derive(Debug, Clone)]
pub struct LossEval {
    /// Raw summed BCE, the optimization objective.
    pub loss: f64,
    pub rows: usize,
    pub frames: usize,
    pub grads: Option<Vec<Matrix>>,
    pub trace: LossTrace,
}

impl LossEval {
    /// Loss per scored entry.
    pub fn normalized(&self) -> f64 {
        self.loss / (self.rows * self.frames).max(1) as f64
    }
}

/// Evaluates `kind` on one recording, optionally with gradients.
///
/// `s_max` bounds the conditional iterations; the baseline scores the
/// configured number of head outputs instead.
pub fn evaluate(
    params: &ModelParams,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    kind: LossKind,
    s_max: usize,
    mode: Mode,
    with_grads: bool,
) -> Result<LossEval> {
    if y.num_frames() != x.num_frames() {
        return Err(Error::shape(
            "loss",
            format!("{} label frames vs {} feature frames", y.num_frames(), x.num_frames()),
        ));
    }
    let mut g = Graph::new(params, mode);
    let (loss, trace, rows) = match kind {
        LossKind::PitBaseline => baseline_pit_on(&mut g, x, y)?,
        LossKind::ScPit => {
            check_speakers(y, s_max)?;
            free_running_pit_on(&mut g, x, y, s_max)?
        }
        LossKind::ScGreedyTf => {
            check_speakers(y, s_max)?;
            greedy_tf_on(&mut g, x, y, s_max)?
        }
        LossKind::ScTwoStagePit => {
            check_speakers(y, s_max)?;
            two_stage_pit_on(&mut g, x, y, s_max)?
        }
    };
    let grads = if with_grads {
        Some(g.param_grads(loss)?)
    } else {
        None
    };
    Ok(LossEval {
        loss: g.value(loss).item(),
        rows,
        frames: x.num_frames(),
        grads,
        trace,
    })
}

/// Speaker-wise greedy teacher-forcing loss.
pub fn greedy_tf_loss(
    params: &ModelParams,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    s_max: usize,
) -> Result<f64> {
    Ok(evaluate(params, x, y, LossKind::ScGreedyTf, s_max, Mode::Eval, false)?.loss)
}

/// Two-stage permutation-invariant teacher-forcing loss.
pub fn two_stage_pit_loss(
    params: &ModelParams,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    s_max: usize,
) -> Result<f64> {
    Ok(evaluate(params, x, y, LossKind::ScTwoStagePit, s_max, Mode::Eval, false)?.loss)
}

/// Teacher-forced loss for a given label order: iteration `s` is fed
/// `order[s-1]` and scored against `order[s]`, with zero rows past the end.
/// The second stage of the two-stage loss is this with the stage-one order.
pub fn teacher_forced_loss(
    params: &ModelParams,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    order: &[usize],
    s_max: usize,
    with_grads: bool,
) -> Result<LossEval> {
    check_speakers(y, s_max)?;
    let mut g = Graph::new(params, Mode::Eval);
    let encoded = g.encode(x.frames())?;
    let (loss, trace) = teacher_forced_pass(&mut g, encoded, y, order, s_max)?;
    let grads = if with_grads {
        Some(g.param_grads(loss)?)
    } else {
        None
    };
    Ok(LossEval {
        loss: g.value(loss).item(),
        rows: s_max,
        frames: x.num_frames(),
        grads,
        trace,
    })
}

fn check_speakers(y: &ActivityMatrix, s_max: usize) -> Result<()> {
    if y.num_speakers() > s_max {
        return Err(Error::Config(format!(
            "{} labelled speakers exceed s_max = {s_max}",
            y.num_speakers()
        )));
    }
    Ok(())
}

fn zero_target(frames: usize) -> Matrix {
    Matrix::zeros(1, frames)
}

fn label_target(y: &ActivityMatrix, row: usize) -> Matrix {
    Matrix::row_vector(&y.row_f64(row))
}

fn stack_rows(rows: &[Vec<f64>], frames: usize) -> Matrix {
    let data = rows.iter().flatten().copied().collect();
    Matrix::from_vec(rows.len(), frames, data).expect("rows of equal length")
}

fn baseline_pit_on(
    g: &mut Graph<'_>,
    x: &FeatureSequence,
    y: &ActivityMatrix,
) -> Result<(NodeId, LossTrace, usize)> {
    let encoded = g.encode(x.frames())?;
    let z = g.baseline_head(encoded)?;
    let rows = g.value(z).rows();
    let padded = y.zero_padded(rows)?;
    let best = optimal_permutation(&pairwise_bce_costs(g.value(z), &padded)?)?;
    let ordered = padded.select_rows(&best.perm)?;
    let loss = g.tape_mut().bce(z, ordered.to_matrix())?;
    let targets = best
        .perm
        .iter()
        .map(|&j| (j < y.num_speakers()).then_some(j))
        .collect();
    let trace = LossTrace {
        posteriors: g.value(z).clone(),
        conditions: Vec::new(),
        targets,
        stage1: None,
    };
    Ok((loss, trace, rows))
}

/// Runs `s_max` iterations feeding thresholded outputs back, without
/// recording anything differentiable beyond the returned posterior nodes.
fn free_running(
    g: &mut Graph<'_>,
    encoded: NodeId,
    s_max: usize,
) -> Result<(Vec<NodeId>, Vec<Vec<u8>>)> {
    let frames = g.value(encoded).cols();
    let threshold = g.params().config().threshold;
    let (mut h, mut c) = g.zero_state(frames);
    let mut condition = vec![0u8; frames];
    let mut posteriors = Vec::with_capacity(s_max);
    let mut conditions = Vec::with_capacity(s_max);
    for _ in 0..s_max {
        let step = g.decode_step(encoded, &condition, h, c)?;
        conditions.push(std::mem::take(&mut condition));
        condition = binarize(g.value(step.posterior).data(), threshold);
        posteriors.push(step.posterior);
        (h, c) = (step.hidden, step.cell);
    }
    Ok((posteriors, conditions))
}

/// Best permutation of the first `S` free-running outputs against the labels.
fn first_outputs_permutation(
    g: &Graph<'_>,
    posteriors: &[NodeId],
    y: &ActivityMatrix,
) -> Result<PermutationResult> {
    let s = y.num_speakers();
    let frames = y.num_frames();
    let rows: Vec<Vec<f64>> = posteriors[..s]
        .iter()
        .map(|&n| g.value(n).data().to_vec())
        .collect();
    optimal_permutation(&pairwise_bce_costs(&stack_rows(&rows, frames), y)?)
}

fn free_running_pit_on(
    g: &mut Graph<'_>,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    s_max: usize,
) -> Result<(NodeId, LossTrace, usize)> {
    let encoded = g.encode(x.frames())?;
    let frames = x.num_frames();
    let (posteriors, conditions) = free_running(g, encoded, s_max)?;
    let best = first_outputs_permutation(g, &posteriors, y)?;
    let mut terms = Vec::with_capacity(s_max);
    let mut targets = Vec::with_capacity(s_max);
    for (s, &z) in posteriors.iter().enumerate() {
        let (target, row) = match best.perm.get(s) {
            Some(&j) => (label_target(y, j), Some(j)),
            None => (zero_target(frames), None),
        };
        terms.push(g.tape_mut().bce(z, target)?);
        targets.push(row);
    }
    let loss = g.tape_mut().add_all(&terms)?;
    let rows: Vec<Vec<f64>> = posteriors.iter().map(|&n| g.value(n).data().to_vec()).collect();
    let trace = LossTrace {
        posteriors: stack_rows(&rows, frames),
        conditions,
        targets,
        stage1: None,
    };
    Ok((loss, trace, s_max))
}

fn greedy_tf_on(
    g: &mut Graph<'_>,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    s_max: usize,
) -> Result<(NodeId, LossTrace, usize)> {
    let encoded = g.encode(x.frames())?;
    let frames = x.num_frames();
    let (mut h, mut c) = g.zero_state(frames);
    let mut used = vec![false; y.num_speakers()];
    let mut condition = vec![0u8; frames];
    let mut terms = Vec::with_capacity(s_max);
    let mut trace = LossTrace {
        posteriors: Matrix::zeros(0, frames),
        conditions: Vec::with_capacity(s_max),
        targets: Vec::with_capacity(s_max),
        stage1: None,
    };
    let mut rows = Vec::with_capacity(s_max);
    for _ in 0..s_max {
        let step = g.decode_step(encoded, &condition, h, c)?;
        let z = g.value(step.posterior).data().to_vec();
        let mut pick: Option<(usize, f64)> = None;
        for (j, _) in used.iter().enumerate().filter(|(_, &u)| !u) {
            let cost = bce(&z, y.row(j))?;
            if pick.is_none_or(|(_, best)| cost < best) {
                pick = Some((j, cost));
            }
        }
        let target = match pick {
            Some((j, _)) => {
                used[j] = true;
                label_target(y, j)
            }
            None => zero_target(frames),
        };
        terms.push(g.tape_mut().bce(step.posterior, target)?);
        trace.conditions.push(condition);
        trace.targets.push(pick.map(|(j, _)| j));
        condition = match pick {
            Some((j, _)) => y.row(j).to_vec(),
            None => vec![0u8; frames],
        };
        rows.push(z);
        (h, c) = (step.hidden, step.cell);
    }
    trace.posteriors = stack_rows(&rows, frames);
    let loss = g.tape_mut().add_all(&terms)?;
    Ok((loss, trace, s_max))
}

/// Teacher-forced decoding in a fixed label order; returns the summed BCE node.
fn teacher_forced_pass(
    g: &mut Graph<'_>,
    encoded: NodeId,
    y: &ActivityMatrix,
    order: &[usize],
    s_max: usize,
) -> Result<(NodeId, LossTrace)> {
    let frames = y.num_frames();
    if order.len() > s_max || order.iter().any(|&j| j >= y.num_speakers()) {
        return Err(Error::Contract(format!("invalid label order {order:?}")));
    }
    let (mut h, mut c) = g.zero_state(frames);
    let mut condition = vec![0u8; frames];
    let mut terms = Vec::with_capacity(s_max);
    let mut conditions = Vec::with_capacity(s_max);
    let mut rows = Vec::with_capacity(s_max);
    for s in 0..s_max {
        let step = g.decode_step(encoded, &condition, h, c)?;
        let target = match order.get(s) {
            Some(&j) => label_target(y, j),
            None => zero_target(frames),
        };
        terms.push(g.tape_mut().bce(step.posterior, target)?);
        rows.push(g.value(step.posterior).data().to_vec());
        conditions.push(condition);
        condition = match order.get(s) {
            Some(&j) => y.row(j).to_vec(),
            None => vec![0u8; frames],
        };
        (h, c) = (step.hidden, step.cell);
    }
    let loss = g.tape_mut().add_all(&terms)?;
    let trace = LossTrace {
        posteriors: stack_rows(&rows, frames),
        conditions,
        targets: (0..s_max).map(|s| order.get(s).copied()).collect(),
        stage1: None,
    };
    Ok((loss, trace))
}

fn two_stage_pit_on(
    g: &mut Graph<'_>,
    x: &FeatureSequence,
    y: &ActivityMatrix,
    s_max: usize,
) -> Result<(NodeId, LossTrace, usize)> {
    let encoded = g.encode(x.frames())?;
    let frames = x.num_frames();

    // Stage 1 runs on its own graph from a copy of the encoder output, so
    // nothing it computes can reach the gradient.
    let mut free = Graph::new(g.params(), Mode::Eval);
    let detached = free.constant(g.value(encoded).clone());
    let (posteriors, conditions) = free_running(&mut free, detached, s_max)?;
    let perm = first_outputs_permutation(&free, &posteriors, y)?;
    let rows: Vec<Vec<f64>> = posteriors
        .iter()
        .map(|&n| free.value(n).data().to_vec())
        .collect();
    let stage1 = Stage1Trace {
        posteriors: stack_rows(&rows, frames),
        conditions,
        perm,
    };

    let (loss, mut trace) = teacher_forced_pass(g, encoded, y, &stage1.perm.perm, s_max)?;
    trace.stage1 = Some(stage1);
    Ok((loss, trace, s_max))
}
