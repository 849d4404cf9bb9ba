//! Synthetic multi-speaker recordings with controlled overlap.
//!
//! This is an analytic stand-in for mixing real utterances. Each speaker
//! gets a two-state (speaking/silent) Markov chain over frames and a random
//! signature vector. A frame's features are the sum of the active speakers'
//! signatures plus a background vector and Gaussian noise. Signatures are
//! drawn per recording, so a model has to tell speakers apart from the
//! recording itself rather than memorize identities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};
use crate::io;
use crate::losses::{mix_seed, Example};
use crate::model::FeatureSequence;
use crate::numcore::Matrix;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub frames: usize,
    pub feat_dim: usize,
    /// Target fraction of speech frames with two or more speakers.
    pub overlap_target: f64,
    /// Absolute tolerance around the target before resampling stops.
    pub overlap_tolerance: f64,
    pub max_attempts: usize,
    /// Mean length of a speaking turn, in frames.
    pub on_mean: f64,
    /// Mean pause length, in frames.
    pub off_mean: f64,
    /// Rescale each speaker count's pause length so the expected overlap
    /// matches the target; `off_mean` then only applies to one speaker.
    pub calibrate_pauses: bool,
    pub signature_scale: f64,
    pub background_scale: f64,
    pub noise_scale: f64,
    pub frame_shift: f64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            min_speakers: 1,
            max_speakers: 4,
            frames: 500,
            feat_dim: 16,
            overlap_target: 0.3,
            overlap_tolerance: 0.1,
            max_attempts: 50,
            on_mean: 30.0,
            off_mean: 60.0,
            calibrate_pauses: true,
            signature_scale: 1.0,
            background_scale: 0.5,
            noise_scale: 0.1,
            frame_shift: 0.1,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.min_speakers > self.max_speakers {
            return fail(format!(
                "speaker range {}-{} is empty",
                self.min_speakers, self.max_speakers
            ));
        }
        if self.frames == 0 || self.feat_dim == 0 {
            return fail("frames and feat_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.overlap_target) {
            return fail(format!("overlap target {} outside [0, 1)", self.overlap_target));
        }
        if !(self.on_mean >= 1.0 && self.off_mean >= 1.0) {
            return fail("mean dwell times must be at least one frame".into());
        }
        if self.frame_shift.is_nan() || self.frame_shift <= 0.0 {
            return fail("frame shift must be positive".into());
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Mean pause length used for recordings with `speakers` speakers.
    pub fn pause_mean(&self, speakers: usize) -> f64 {
        if !self.calibrate_pauses || speakers < 2 || self.overlap_target <= 0.0 {
            return self.off_mean;
        }
        let p = speaking_probability_for(speakers, self.overlap_target);
        (self.on_mean * (1.0 - p) / p).max(1.0)
    }
}

/// Expected overlap ratio when `n` independent speakers each talk with
/// probability `p` in any frame.
pub fn expected_overlap(n: usize, p: f64) -> f64 {
    let q = 1.0 - p;
    let any = 1.0 - q.powi(n as i32);
    if any <= 0.0 {
        return 0.0;
    }
    let one = n as f64 * p * q.powi(n as i32 - 1);
    (any - one) / any
}

/// Per-frame speaking probability giving the target expected overlap.
pub fn speaking_probability_for(n: usize, target: f64) -> f64 {
    let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_overlap(n, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Frames with ≥ 2 active speakers over frames with ≥ 1.
/// Returns `(ratio, degenerate)`; an all-silent input gives `(0, true)`.
pub fn overlap_ratio(labels: &ActivityMatrix) -> (f64, bool) {
    let (speech, overlap) = overlap_counts(labels);
    if speech == 0 {
        (0.0, true)
    } else {
        (overlap as f64 / speech as f64, false)
    }
}

fn overlap_counts(labels: &ActivityMatrix) -> (usize, usize) {
    let mut speech = 0;
    let mut overlap = 0;
    for t in 0..labels.num_frames() {
        match labels.active_at(t) {
            0 => {}
            1 => speech += 1,
            _ => {
                speech += 1;
                overlap += 1;
            }
        }
    }
    (speech, overlap)
}

fn markov_activity(
    frames: usize,
    on_mean: f64,
    off_mean: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let p_on = on_mean / (on_mean + off_mean);
    let mut speaking = rng.random::<f64>() < p_on;
    (0..frames)
        .map(|_| {
            let v = u8::from(speaking);
            let leave = if speaking { 1.0 / on_mean } else { 1.0 / off_mean };
            if rng.random::<f64>() < leave {
                speaking = !speaking;
            }
            v
        })
        .collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Features `sum_s y[s,t] * signature_s + background + noise`, rounded to
/// single precision so they survive the on-disk format unchanged.
///
/// `signatures` is F × S, one column per speaker.
pub fn mix_features(
    labels: &ActivityMatrix,
    signatures: &Matrix,
    background: &[f64],
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    let (f, s) = signatures.shape();
    if s != labels.num_speakers() || background.len() != f {
        return Err(Error::shape(
            "mix_features",
            format!(
                "signatures {f}x{s}, background {}, labels with {} speakers",
                background.len(),
                labels.num_speakers()
            ),
        ));
    }
    let frames = labels.num_frames();
    let mut out = Matrix::zeros(f, frames);
    for t in 0..frames {
        for d in 0..f {
            let mut v = background[d];
            for spk in 0..s {
                if labels.get(spk, t) {
                    v += signatures[(d, spk)];
                }
            }
            if noise_scale > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                v += noise_scale * n;
            }
            out[(d, t)] = v as f32 as f64;
        }
    }
    Ok(out)
}

/// One generated recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub features: FeatureSequence,
    pub labels: ActivityMatrix,
    pub overlap_ratio: f64,
    /// Whether the overlap landed within tolerance of the target.
    pub on_target: bool,
}

/// Generates one recording with `num_speakers` speakers.
pub fn simulate_mixture(spec: &SimSpec, num_speakers: usize, seed: u64) -> Result<Mixture> {
    spec.validate()?;
    if !(spec.min_speakers..=spec.max_speakers).contains(&num_speakers) {
        return Err(Error::Config(format!(
            "{num_speakers} speakers outside {}-{}",
            spec.min_speakers, spec.max_speakers
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pause = spec.pause_mean(num_speakers);

    let mut best: Option<(f64, ActivityMatrix)> = None;
    let mut on_target = false;
    // Rows that never speak are always rejected; the extra attempts only
    // matter for pathological settings.
    for attempt in 0..spec.max_attempts.max(1) * 20 {
        if attempt >= spec.max_attempts && best.is_some() {
            break;
        }
        let mut labels = ActivityMatrix::zeros(0, spec.frames);
        for _ in 0..num_speakers {
            labels.push_row(&markov_activity(spec.frames, spec.on_mean, pause, &mut rng))?;
        }
        if labels.rows().any(|r| r.iter().all(|&v| v == 0)) {
            continue;
        }
        let (ratio, _) = overlap_ratio(&labels);
        if num_speakers < 2 {
            best = Some((ratio, labels));
            on_target = true;
            break;
        }
        let err = (ratio - spec.overlap_target).abs();
        if best.as_ref().is_none_or(|(r, _)| err < (r - spec.overlap_target).abs()) {
            best = Some((ratio, labels));
        }
        if err <= spec.overlap_tolerance {
            on_target = true;
            break;
        }
    }
    let (ratio, labels) = best.ok_or_else(|| {
        Error::Config("could not draw a recording where every speaker talks".into())
    })?;
    if !on_target {
        log::warn!(
            "overlap {ratio:.3} missed target {:.3} after {} attempts",
            spec.overlap_target,
            spec.max_attempts
        );
    }

    let mut signatures = Matrix::zeros(spec.feat_dim, num_speakers);
    for s in 0..num_speakers {
        for (d, v) in random_unit(spec.feat_dim, &mut rng).into_iter().enumerate() {
            signatures[(d, s)] = v * spec.signature_scale;
        }
    }
    let background: Vec<f64> = random_unit(spec.feat_dim, &mut rng)
        .into_iter()
        .map(|v| v * spec.background_scale)
        .collect();
    let frames = mix_features(&labels, &signatures, &background, spec.noise_scale, &mut rng)?;
    Ok(Mixture {
        features: FeatureSequence::new(frames, spec.frame_shift)?,
        labels,
        overlap_ratio: ratio,
        on_target,
    })
}

/// Seed of recording `index` in a corpus generated with `seed`.
pub fn recording_seed(seed: u64, index: u64) -> u64 {
    seed ^ index
}

pub fn recording_id(index: usize) -> String {
    format!("rec{index:05}")
}

/// Generates recording `index` of a corpus: the speaker count is drawn
/// uniformly from the spec's range, then the mixture itself.
pub fn corpus_recording(spec: &SimSpec, seed: u64, index: usize) -> Result<(String, Mixture)> {
    let rec_seed = recording_seed(seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rec_seed, 0x5eed));
    let n = rng.random_range(spec.min_speakers..=spec.max_speakers);
    Ok((recording_id(index), simulate_mixture(spec, n, rec_seed)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub features: PathBuf,
    pub labels: PathBuf,
    pub num_speakers: usize,
    pub frames: usize,
}

/// Index of a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: SimSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const REFERENCE_RTTM: &str = "ref.rttm";

/// Writes `count` recordings, their reference RTTM, and the manifest under
/// `out_dir`. Output depends only on `(spec, count, seed)`.
pub fn build_corpus(spec: &SimSpec, count: usize, seed: u64, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    for sub in ["feats", "labels"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut entries = Vec::with_capacity(count);
    let mut references = Vec::with_capacity(count);
    for i in 0..count {
        let (id, mix) = corpus_recording(spec, seed, i)?;
        let features = PathBuf::from("feats").join(format!("{id}.scef"));
        let labels = PathBuf::from("labels").join(format!("{id}.scel"));
        io::write_features(&out_dir.join(&features), mix.features.frames())?;
        io::write_labels(&out_dir.join(&labels), &mix.labels)?;
        references.push(crate::decode::activity_to_segments(
            &mix.labels,
            spec.frame_shift,
            0.0,
            &id,
        )?);
        entries.push(ManifestEntry {
            id,
            features,
            labels,
            num_speakers: mix.labels.num_speakers(),
            frames: mix.labels.num_frames(),
        });
    }
    io::write_rttm(&out_dir.join(REFERENCE_RTTM), &references)?;
    let manifest = CorpusManifest {
        seed,
        spec: spec.clone(),
        entries,
    };
    io::write_manifest(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads every recording listed in a manifest.
pub fn load_examples(manifest: &CorpusManifest, base_dir: &Path) -> Result<Vec<Example>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let frames = io::read_features(&base_dir.join(&e.features))?;
            let labels = io::read_labels(&base_dir.join(&e.labels))?;
            if frames.cols() != labels.num_frames() {
                return Err(Error::Format {
                    path: base_dir.join(&e.labels),
                    msg: format!(
                        "{} label frames vs {} feature frames",
                        labels.num_frames(),
                        frames.cols()
                    ),
                });
            }
            Ok(Example {
                id: e.id.clone(),
                features: FeatureSequence::new(frames, manifest.spec.frame_shift)?,
                labels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    /// Recordings per speaker count.
    pub per_speaker_count: BTreeMap<usize, usize>,
    pub recordings: usize,
    /// Mean recording length in seconds.
    pub mean_duration: f64,
    /// Pooled over the corpus.
    pub overlap_ratio: f64,
    /// Set when the corpus has no speech at all.
    pub degenerate: bool,
}

/// Statistics over in-memory labels.
pub fn stats_from_labels<'a>(
    labels: impl IntoIterator<Item = &'a ActivityMatrix>,
    frame_shift: f64,
) -> CorpusStats {
    let mut per = BTreeMap::new();
    let (mut n, mut frames, mut speech, mut overlap) = (0, 0, 0, 0);
    for l in labels {
        *per.entry(l.num_speakers()).or_insert(0) += 1;
        n += 1;
        frames += l.num_frames();
        let (s, o) = overlap_counts(l);
        speech += s;
        overlap += o;
    }
    CorpusStats {
        per_speaker_count: per,
        recordings: n,
        mean_duration: if n == 0 {
            0.0
        } else {
            frames as f64 * frame_shift / n as f64
        },
        overlap_ratio: if speech == 0 {
            0.0
        } else {
            overlap as f64 / speech as f64
        },
        degenerate: speech == 0,
    }
}

/// Reads every label file of a manifest and summarizes it.
pub fn corpus_stats(manifest: &CorpusManifest, base_dir: &Path) -> Result<CorpusStats> {
    let labels = manifest
        .entries
        .iter()
        .map(|e| io::read_labels(&base_dir.join(&e.labels)))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_from_labels(&labels, manifest.spec.frame_shift))
}

impl CorpusStats {
    /// One summary row: speakers, recordings, mean duration, overlap %.
    pub fn render(&self, name: &str) -> String {
        let spk = match (
            self.per_speaker_count.keys().next(),
            self.per_speaker_count.keys().next_back(),
        ) {
            (Some(a), Some(b)) if a == b => a.to_string(),
            (Some(a), Some(b)) => format!("{a}-{b}"),
            _ => "-".into(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16}{:>6}{:>8}{:>10}{:>10}",
            "", "spk", "rec", "avg dur", "overlap"
        );
        let _ = writeln!(
            out,
            "{:<16}{:>6}{:>8}{:>10.1}{:>10.1}",
            name,
            spk,
            self.recordings,
            self.mean_duration,
            100.0 * self.overlap_ratio
        );
        for (k, v) in &self.per_speaker_count {
            let _ = writeln!(out, "  {k} speaker(s): {v} recordings");
        }
        out
    }
}
