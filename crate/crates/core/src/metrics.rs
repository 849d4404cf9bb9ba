//! Diarization error rate and speaker-counting evaluation.
//!
//! Times are snapped to whole nanoseconds before scoring. That merges
//! boundaries closer than 1e-9 s and makes every region length an exact
//! integer, so splitting a segment or renaming a speaker cannot change the
//! result by rounding.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::optimal_permutation;
use crate::numcore::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub speaker: String,
    pub start: f64,
    pub duration: f64,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Speaker segments of one recording. Segments of one speaker may overlap
/// or touch; they are merged before scoring.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentList {
    recording: String,
    segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(recording: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if !s.start.is_finite() || !s.duration.is_finite() || s.duration <= 0.0 {
                return Err(Error::Contract(format!(
                    "segment of {} at {} with duration {} is invalid",
                    s.speaker, s.start, s.duration
                )));
            }
        }
        Ok(SegmentList {
            recording: recording.into(),
            segments,
        })
    }

    pub fn empty(recording: impl Into<String>) -> Self {
        SegmentList {
            recording: recording.into(),
            segments: Vec::new(),
        }
    }

    pub fn recording(&self) -> &str {
        &self.recording
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Speaker labels in order of first appearance.
    pub fn speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.segments {
            if !out.contains(&s.speaker) {
                out.push(s.speaker.clone());
            }
        }
        out
    }

    /// Total speech time, counting overlapping speakers separately.
    pub fn total_speech(&self) -> f64 {
        merged(self).iter().map(|(_, iv)| ns_len(iv)).sum::<i64>() as f64 * 1e-9
    }
}

type Interval = (i64, i64);

fn to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

fn ns_len(intervals: &[Interval]) -> i64 {
    intervals.iter().map(|(a, b)| b - a).sum()
}

fn merge_intervals(mut iv: Vec<Interval>) -> Vec<Interval> {
    iv.retain(|(a, b)| b > a);
    iv.sort_unstable();
    let mut out: Vec<Interval> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Per-speaker merged intervals, speakers in first-appearance order.
fn merged(list: &SegmentList) -> Vec<(String, Vec<Interval>)> {
    list.speakers()
        .into_iter()
        .map(|spk| {
            let iv = list
                .segments
                .iter()
                .filter(|s| s.speaker == spk)
                .map(|s| (to_ns(s.start), to_ns(s.end())))
                .collect();
            (spk, merge_intervals(iv))
        })
        .collect()
}

fn overlap_ns(a: &[Interval], b: &[Interval]) -> i64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn contains(intervals: &[Interval], t: i64) -> bool {
    // first interval whose end is beyond t
    let k = intervals.partition_point(|&(_, b)| b <= t);
    k < intervals.len() && intervals[k].0 <= t
}

/// One-to-one reference → hypothesis label pairing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeakerMapping {
    pairs: HashMap<String, String>,
    /// Total overlap in seconds of the mapped pairs.
    pub total_overlap: f64,
}

impl SpeakerMapping {
    pub fn get(&self, reference: &str) -> Option<&str> {
        self.pairs.get(reference).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(r, h)| (r.as_str(), h.as_str()))
    }
}

fn mapping_from(
    reference: &[(String, Vec<Interval>)],
    hypothesis: &[(String, Vec<Interval>)],
) -> Result<(SpeakerMapping, Vec<Option<usize>>)> {
    let n = reference.len().max(hypothesis.len());
    let mut overlap = vec![vec![0i64; n]; n];
    let mut cost = Matrix::zeros(n, n);
    for (i, (_, r)) in reference.iter().enumerate() {
        for (j, (_, h)) in hypothesis.iter().enumerate() {
            overlap[i][j] = overlap_ns(r, h);
            cost[(i, j)] = -(overlap[i][j] as f64);
        }
    }
    let best = optimal_permutation(&cost)?;
    let mut pairs = HashMap::new();
    let mut index = vec![None; reference.len()];
    let mut total = 0i64;
    for (i, slot) in index.iter_mut().enumerate() {
        let j = best.perm[i];
        if j < hypothesis.len() && overlap[i][j] > 0 {
            pairs.insert(reference[i].0.clone(), hypothesis[j].0.clone());
            *slot = Some(j);
            total += overlap[i][j];
        }
    }
    Ok((
        SpeakerMapping {
            pairs,
            total_overlap: total as f64 * 1e-9,
        },
        index,
    ))
}

/// Maximum-total-overlap one-to-one pairing of reference and hypothesis
/// labels. Pairs that would not overlap at all are left unmapped.
pub fn map_speakers(reference: &SegmentList, hypothesis: &SegmentList) -> Result<SpeakerMapping> {
    Ok(mapping_from(&merged(reference), &merged(hypothesis))?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerBreakdown {
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech: f64,
    /// `(miss + false_alarm + confusion) / scored_speech`; 0 when nothing
    /// was scored.
    pub der: f64,
    /// Set when there was no scored reference speech.
    pub degenerate: bool,
}

impl DerBreakdown {
    pub fn total_error(&self) -> f64 {
        self.miss + self.false_alarm + self.confusion
    }

    /// Pools several recordings: summed errors over summed scored speech.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = &'a DerBreakdown>) -> DerBreakdown {
        let mut out = DerBreakdown::default();
        for d in items {
            out.miss += d.miss;
            out.false_alarm += d.false_alarm;
            out.confusion += d.confusion;
            out.scored_speech += d.scored_speech;
        }
        out.finish();
        out
    }

    fn finish(&mut self) {
        if self.scored_speech > 0.0 {
            self.der = self.total_error() / self.scored_speech;
            self.degenerate = false;
        } else {
            self.der = 0.0;
            self.degenerate = true;
        }
    }
}

/// Diarization error rate.
///
/// Regions within `collar` seconds of any reference speaker-turn boundary
/// are not scored. With `score_overlap` false, regions with two or more
/// reference speakers are skipped as well.
pub fn der(
    reference: &SegmentList,
    hypothesis: &SegmentList,
    collar: f64,
    score_overlap: bool,
) -> Result<DerBreakdown> {
    if collar.is_nan() || collar < 0.0 {
        return Err(Error::Config(format!("collar {collar} must be non-negative")));
    }
    let refs = merged(reference);
    let hyps = merged(hypothesis);
    let (_, mapped) = mapping_from(&refs, &hyps)?;

    let c = to_ns(collar);
    let excluded = if c > 0 {
        merge_intervals(
            refs.iter()
                .flat_map(|(_, iv)| iv.iter())
                .flat_map(|&(a, b)| [(a - c, a + c), (b - c, b + c)])
                .collect(),
        )
    } else {
        Vec::new()
    };

    let mut points: Vec<i64> = refs
        .iter()
        .chain(&hyps)
        .flat_map(|(_, iv)| iv.iter())
        .chain(&excluded)
        .flat_map(|&(a, b)| [a, b])
        .collect();
    points.sort_unstable();
    points.dedup();

    let (mut miss, mut fa, mut conf, mut scored) = (0i64, 0i64, 0i64, 0i64);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = b - a;
        // a region [a, b) lies entirely inside or outside each interval set,
        // so its start decides membership
        if contains(&excluded, a) {
            continue;
        }
        let active_ref: Vec<usize> = (0..refs.len()).filter(|&i| contains(&refs[i].1, a)).collect();
        let n_ref = active_ref.len() as i64;
        if !score_overlap && n_ref >= 2 {
            continue;
        }
        let n_hyp = hyps.iter().filter(|(_, iv)| contains(iv, a)).count() as i64;
        let n_correct = active_ref
            .iter()
            .filter(|&&i| mapped[i].is_some_and(|j| contains(&hyps[j].1, a)))
            .count() as i64;
        miss += (n_ref - n_hyp).max(0) * len;
        fa += (n_hyp - n_ref).max(0) * len;
        conf += (n_ref.min(n_hyp) - n_correct) * len;
        scored += n_ref * len;
    }
    let mut out = DerBreakdown {
        miss: miss as f64 * 1e-9,
        false_alarm: fa as f64 * 1e-9,
        confusion: conf as f64 * 1e-9,
        scored_speech: scored as f64 * 1e-9,
        der: 0.0,
        degenerate: false,
    };
    if scored > 0 {
        out.der = (miss + fa + conf) as f64 / scored as f64;
    } else {
        out.degenerate = true;
    }
    Ok(out)
}

/// Reference-versus-estimated speaker count table.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingConfusion {
    /// Smallest count on either axis.
    pub min_count: usize,
    /// `matrix[r][e]` counts recordings with reference `min_count + r`
    /// and estimate `min_count + e`.
    pub matrix: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub total: usize,
}

/// Tabulates `(reference count, estimated count)` pairs.
pub fn counting_confusion(pairs: &[(usize, usize)]) -> CountingConfusion {
    let Some(lo) = pairs.iter().map(|&(r, e)| r.min(e)).min() else {
        return CountingConfusion {
            min_count: 0,
            matrix: Vec::new(),
            accuracy: 0.0,
            total: 0,
        };
    };
    let hi = pairs.iter().map(|&(r, e)| r.max(e)).max().expect("non-empty");
    let n = hi - lo + 1;
    let mut matrix = vec![vec![0; n]; n];
    for &(r, e) in pairs {
        matrix[r - lo][e - lo] += 1;
    }
    let correct: usize = (0..n).map(|i| matrix[i][i]).sum();
    CountingConfusion {
        min_count: lo,
        matrix,
        accuracy: correct as f64 / pairs.len() as f64,
        total: pairs.len(),
    }
}

impl CountingConfusion {
    /// Text table with reference counts as rows and estimates as columns.
    pub fn render(&self) -> String {
        let n = self.matrix.len();
        let mut out = String::new();
        let _ = writeln!(out, "Reference \\ Estimated");
        let _ = write!(out, "{:>9}", "");
        for e in 0..n {
            let _ = write!(out, "{:>6}", self.min_count + e);
        }
        out.push('\n');
        for (r, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{:>9}", self.min_count + r);
            for v in row {
                let _ = write!(out, "{v:>6}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "Accuracy: {:.1}% ({} recordings)", 100.0 * self.accuracy, self.total);
        out
    }
}
