//! Variable-speaker inference.
//!
//! Decoding starts from an all-zero condition and state. Each iteration's
//! posteriors are thresholded and fed back as the next condition; the first
//! iteration whose thresholded output is all zero ends decoding and is not
//! emitted.

use crate::activity::{ActivityMatrix, PosteriorMatrix};
use crate::error::{Error, Result};
use crate::metrics::{Segment, SegmentList};
use crate::model::{FeatureSequence, Graph, Mode, ModelParams};
use crate::numcore::Matrix;

/// `1` where `z > threshold` (strictly), else `0`.
pub fn binarize(z: &[f64], threshold: f64) -> Vec<u8> {
    z.iter().map(|&v| u8::from(v > threshold)).collect()
}

/// Running median over `window` frames (odd; 1 is a no-op), with the
/// window truncated at the edges.
pub fn median_filter(z: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || z.is_empty() {
        return z.to_vec();
    }
    let half = window / 2;
    let mut buf = Vec::with_capacity(window);
    (0..z.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(z.len());
            buf.clear();
            buf.extend_from_slice(&z[lo..hi]);
            buf.sort_by(f64::total_cmp);
            let n = buf.len();
            if n % 2 == 1 {
                buf[n / 2]
            } else {
                0.5 * (buf[n / 2 - 1] + buf[n / 2])
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiarizationResult {
    /// One row per emitted speaker; no row is all zero.
    pub activity: ActivityMatrix,
    /// One row per executed iteration, including a final stopping one.
    pub posteriors: PosteriorMatrix,
    pub frame_shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub s_max: usize,
    pub threshold: f64,
    /// Median filter length applied to posteriors before thresholding.
    pub median_window: usize,
}

impl InferOptions {
    pub fn new(s_max: usize, threshold: f64) -> Self {
        InferOptions {
            s_max,
            threshold,
            median_window: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.median_window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "median window {} must be odd",
                self.median_window
            )));
        }
        Ok(())
    }
}

/// Decodes speakers one at a time until an all-zero output or `s_max`.
pub fn infer(
    params: &ModelParams,
    x: &FeatureSequence,
    s_max: usize,
    threshold: f64,
) -> Result<DiarizationResult> {
    infer_with(params, x, &InferOptions::new(s_max, threshold))
}

pub fn infer_with(
    params: &ModelParams,
    x: &FeatureSequence,
    opts: &InferOptions,
) -> Result<DiarizationResult> {
    opts.validate()?;
    let frames = x.num_frames();
    let mut g = Graph::new(params, Mode::Eval);
    let encoded = g.encode(x.frames())?;
    let (mut h, mut c) = g.zero_state(frames);
    let mut condition = vec![0u8; frames];
    let mut activity = ActivityMatrix::empty(frames);
    let mut rows = Vec::new();
    for _ in 0..opts.s_max {
        let step = g.decode_step(encoded, &condition, h, c)?;
        let z = median_filter(g.value(step.posterior).data(), opts.median_window);
        let estimate = binarize(&z, opts.threshold);
        rows.push(z);
        if estimate.iter().all(|&v| v == 0) {
            break;
        }
        activity.push_row(&estimate)?;
        condition = estimate;
        (h, c) = (step.hidden, step.cell);
    }
    Ok(DiarizationResult {
        activity,
        posteriors: PosteriorMatrix::from_rows(&rows, frames)?,
        frame_shift: x.frame_shift(),
    })
}

/// Baseline decoding: threshold every head output and keep the rows with
/// any activity.
pub fn infer_baseline(
    params: &ModelParams,
    x: &FeatureSequence,
    opts: &InferOptions,
) -> Result<DiarizationResult> {
    opts.validate()?;
    let mut g = Graph::new(params, Mode::Eval);
    let encoded = g.encode(x.frames())?;
    let z = g.baseline_head(encoded)?;
    let z = g.value(z);
    let mut activity = ActivityMatrix::empty(x.num_frames());
    let mut filtered = Vec::with_capacity(z.rows());
    for s in 0..z.rows() {
        let row = median_filter(z.row(s), opts.median_window);
        let estimate = binarize(&row, opts.threshold);
        if estimate.contains(&1) {
            activity.push_row(&estimate)?;
        }
        filtered.push(row);
    }
    Ok(DiarizationResult {
        activity,
        posteriors: PosteriorMatrix::from_rows(&filtered, x.num_frames())?,
        frame_shift: x.frame_shift(),
    })
}

/// Number of emitted speakers.
pub fn count_speakers(result: &DiarizationResult) -> usize {
    result.activity.num_speakers()
}

/// Converts each row's maximal runs of active frames into segments named
/// `spk1`, `spk2`, ... Runs shorter than `min_dur` seconds are dropped.
pub fn activity_to_segments(
    activity: &ActivityMatrix,
    frame_shift: f64,
    min_dur: f64,
    recording: &str,
) -> Result<SegmentList> {
    if frame_shift.is_nan() || frame_shift <= 0.0 {
        return Err(Error::Config(format!("frame shift {frame_shift} must be positive")));
    }
    let mut segments = Vec::new();
    for (s, row) in activity.rows().enumerate() {
        let speaker = format!("spk{}", s + 1);
        let mut t = 0;
        while t < row.len() {
            if row[t] == 0 {
                t += 1;
                continue;
            }
            let start = t;
            while t < row.len() && row[t] == 1 {
                t += 1;
            }
            let duration = (t - start) as f64 * frame_shift;
            if duration >= min_dur {
                segments.push(Segment {
                    speaker: speaker.clone(),
                    start: start as f64 * frame_shift,
                    duration,
                });
            }
        }
    }
    SegmentList::new(recording, segments)
}

/// Rasterizes segments onto a frame grid: frame `t` of a speaker is active
/// when its centre lies inside one of that speaker's segments. Speakers are
/// ordered by first appearance.
pub fn segments_to_activity(
    segments: &SegmentList,
    frame_shift: f64,
    frames: usize,
) -> Result<(Vec<String>, ActivityMatrix)> {
    if frame_shift.is_nan() || frame_shift <= 0.0 {
        return Err(Error::Config(format!("frame shift {frame_shift} must be positive")));
    }
    let speakers = segments.speakers();
    let mut activity = ActivityMatrix::zeros(speakers.len(), frames);
    for seg in segments.segments() {
        let s = speakers.iter().position(|n| *n == seg.speaker).expect("listed speaker");
        let end = seg.start + seg.duration;
        for t in 0..frames {
            let centre = (t as f64 + 0.5) * frame_shift;
            if centre >= seg.start && centre < end {
                activity.set(s, t, true);
            }
        }
    }
    Ok((speakers, activity))
}

/// Posteriors as a matrix, for dumping.
pub fn posterior_matrix(result: &DiarizationResult) -> &Matrix {
    result.posteriors.as_matrix()
}
