//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceend::losses::Example;
use sceend::metrics::{Segment, SegmentList};
use sceend::sim::{simulate_mixture, SimSpec};

/// Binary cross-entropy written out directly, clamped at 1e-7.
pub fn naive_bce(z: &[f64], y: &[u8]) -> f64 {
    let eps = 1e-7;
    z.iter()
        .zip(y)
        .map(|(&p, &t)| {
            if t == 1 {
                -(p.max(eps)).ln()
            } else {
                -((1.0 - p).max(eps)).ln()
            }
        })
        .sum()
}

/// Every permutation of `0..n`, by recursion.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for k in 0..=p.len() {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum assignment cost by trying every permutation.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    all_permutations(cost.len())
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Random segment list whose times are whole milliseconds.
pub fn random_segments(rng: &mut ChaCha8Rng, rec: &str, speakers: usize, count: usize, span_ms: u32) -> SegmentList {
    let segments = (0..count)
        .map(|_| {
            let start = rng.random_range(0..span_ms);
            let dur = rng.random_range(1..=span_ms / 4);
            Segment {
                speaker: format!("S{}", rng.random_range(0..speakers)),
                start: f64::from(start) / 1000.0,
                duration: f64::from(dur) / 1000.0,
            }
        })
        .collect();
    SegmentList::new(rec, segments).unwrap()
}

fn ms_activity(list: &SegmentList, span: usize) -> Vec<(String, Vec<bool>)> {
    let mut out: Vec<(String, Vec<bool>)> = Vec::new();
    for s in list.segments() {
        let idx = match out.iter().position(|(n, _)| *n == s.speaker) {
            Some(i) => i,
            None => {
                out.push((s.speaker.clone(), vec![false; span]));
                out.len() - 1
            }
        };
        let a = (s.start * 1000.0).round() as usize;
        let b = ((s.start + s.duration) * 1000.0).round() as usize;
        for v in &mut out[idx].1[a..b.min(span)] {
            *v = true;
        }
    }
    out
}

/// DER without collar from a 1 ms frame grid, trying every one-to-one
/// speaker mapping. Returns `(error_ms, scored_ms)`.
pub fn brute_force_der_ms(reference: &SegmentList, hypothesis: &SegmentList, span: usize) -> (u64, u64) {
    let (err, scored, _) = brute_force_scoring(reference, hypothesis, span);
    (err, scored)
}

/// Largest total overlap, in ms, of any one-to-one speaker mapping.
pub fn brute_force_best_overlap_ms(reference: &SegmentList, hypothesis: &SegmentList, span: usize) -> u64 {
    brute_force_scoring(reference, hypothesis, span).2
}

fn brute_force_scoring(reference: &SegmentList, hypothesis: &SegmentList, span: usize) -> (u64, u64, u64) {
    let r = ms_activity(reference, span);
    let h = ms_activity(hypothesis, span);
    let n = r.len().max(h.len());
    let mut best = 0u64;
    for p in all_permutations(n) {
        let mut correct = 0u64;
        for (i, (_, ra)) in r.iter().enumerate() {
            if let Some((_, ha)) = h.get(p[i]) {
                correct += ra.iter().zip(ha).filter(|(a, b)| **a && **b).count() as u64;
            }
        }
        best = best.max(correct);
    }
    let mut err = 0u64;
    let mut scored = 0u64;
    for t in 0..span {
        let nr = r.iter().filter(|(_, a)| a[t]).count() as u64;
        let nh = h.iter().filter(|(_, a)| a[t]).count() as u64;
        err += nr.max(nh);
        scored += nr;
    }
    (err - best, scored, best)
}

/// A small labelled recording with exactly `speakers` speakers.
pub fn example(spec: &SimSpec, speakers: usize, seed: u64) -> Example {
    let m = simulate_mixture(spec, speakers, seed).unwrap();
    Example {
        id: format!("ex{seed}"),
        features: m.features,
        labels: m.labels,
    }
}

pub fn short_spec(frames: usize) -> SimSpec {
    SimSpec {
        frames,
        ..SimSpec::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
