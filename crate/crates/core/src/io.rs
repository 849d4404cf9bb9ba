//! On-disk formats: feature and label binaries, RTTM, corpus manifests and
//! checkpoints.
//!
//! Feature files (`.scef`) hold the magic `SCEF`, a little-endian `u32`
//! version, `u32` feature dimension and `u32` frame count, then the frames
//! one after another as `f32`. Label files (`.scel`) hold `SCEL`, version,
//! speaker count and frame count, then one byte per speaker and frame,
//! speaker-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};
use crate::metrics::{Segment, SegmentList};
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::{AdamConfig, Matrix, OptimState};
use crate::sim::{CorpusManifest, ManifestEntry, SimSpec};

pub const FEATURE_MAGIC: &[u8; 4] = b"SCEF";
pub const LABEL_MAGIC: &[u8; 4] = b"SCEL";
pub const BINARY_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &str = "sceend-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn binary_header(magic: &[u8; 4], a: usize, b: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(a as u32).to_le_bytes());
    out.extend_from_slice(&(b as u32).to_le_bytes());
    out
}

fn parse_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 16 {
        return Err(format_err(path, "file shorter than its header"));
    }
    if &bytes[..4] != magic {
        return Err(format_err(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BINARY_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    Ok((word(8) as usize, word(12) as usize, &bytes[16..]))
}

/// Serializes an F × T feature matrix.
pub fn encode_features(frames: &Matrix) -> Vec<u8> {
    let (f, t) = frames.shape();
    let mut out = binary_header(FEATURE_MAGIC, f, t);
    out.reserve(f * t * 4);
    for col in 0..t {
        for row in 0..f {
            out.extend_from_slice(&(frames[(row, col)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let (f, t, body) = parse_header(path, bytes, FEATURE_MAGIC)?;
    if body.len() != f * t * 4 {
        return Err(format_err(
            path,
            format!("expected {} payload bytes for {f}x{t}, found {}", f * t * 4, body.len()),
        ));
    }
    let mut m = Matrix::zeros(f, t);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        m[(i % f, i / f)] = f64::from(v);
    }
    Ok(m)
}

/// Writes features (or posteriors) as an `.scef` file.
pub fn write_features(path: &Path, frames: &Matrix) -> Result<()> {
    write_bytes(path, &encode_features(frames))
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(path, &read_bytes(path)?)
}

pub fn encode_labels(labels: &ActivityMatrix) -> Vec<u8> {
    let mut out = binary_header(LABEL_MAGIC, labels.num_speakers(), labels.num_frames());
    out.extend_from_slice(labels.data());
    out
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<ActivityMatrix> {
    let (s, t, body) = parse_header(path, bytes, LABEL_MAGIC)?;
    if body.len() != s * t {
        return Err(format_err(
            path,
            format!("expected {} label bytes for {s}x{t}, found {}", s * t, body.len()),
        ));
    }
    ActivityMatrix::from_vec(s, t, body.to_vec()).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &ActivityMatrix) -> Result<()> {
    write_bytes(path, &encode_labels(labels))
}

pub fn read_labels(path: &Path) -> Result<ActivityMatrix> {
    decode_labels(path, &read_bytes(path)?)
}

/// One `SPEAKER` line per segment, times in seconds to three decimals.
pub fn format_rttm(list: &SegmentList) -> String {
    let mut out = String::new();
    for s in list.segments() {
        let _ = writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            list.recording(),
            s.start,
            s.duration,
            s.speaker
        );
    }
    out
}

pub fn write_rttm(path: &Path, lists: &[SegmentList]) -> Result<()> {
    let text: String = lists.iter().map(format_rttm).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses RTTM text into one list per recording, in order of first
/// appearance. Blank lines, `;;` comments and non-`SPEAKER` records are
/// skipped.
pub fn parse_rttm(path: &Path, text: &str) -> Result<Vec<SegmentList>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_rec: BTreeMap<String, Vec<Segment>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with(";;") || fields[0] != "SPEAKER" {
            continue;
        }
        let fail = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if fields.len() < 8 {
            return Err(fail(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| fail(format!("invalid {what} {s:?}")))
        };
        let start = num(fields[3], "onset")?;
        let duration = num(fields[4], "duration")?;
        if start < 0.0 || duration < 0.0 {
            return Err(fail("negative onset or duration".into()));
        }
        let rec = fields[1].to_string();
        if !by_rec.contains_key(&rec) {
            order.push(rec.clone());
        }
        by_rec.entry(rec).or_default().push(Segment {
            speaker: fields[7].to_string(),
            start,
            duration,
        });
    }
    order
        .into_iter()
        .map(|rec| {
            let segs = by_rec.remove(&rec).unwrap_or_default();
            SegmentList::new(rec, segs)
        })
        .collect()
}

pub fn read_rttm(path: &Path) -> Result<Vec<SegmentList>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(path, &text)
}

/// Reads an RTTM file, or every `*.rttm` file in a directory. A file
/// `<id>.rttm` with no lines stands for recording `<id>` with no speech.
pub fn read_rttm_path(path: &Path) -> Result<Vec<SegmentList>> {
    if !path.is_dir() {
        return read_rttm(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rttm"))
        .collect();
    files.sort();
    let mut out: Vec<SegmentList> = Vec::new();
    for f in files {
        let lists = read_rttm(&f)?;
        if lists.is_empty() {
            if let Some(stem) = f.file_stem().and_then(|s| s.to_str()) {
                out.push(SegmentList::empty(stem));
            }
        }
        for list in lists {
            match out.iter_mut().find(|l| l.recording() == list.recording()) {
                Some(existing) => {
                    let mut segs = existing.segments().to_vec();
                    segs.extend_from_slice(list.segments());
                    *existing = SegmentList::new(list.recording(), segs)?;
                }
                None => out.push(list),
            }
        }
    }
    Ok(out)
}

const MANIFEST_HEADER: &str = "#sceend-corpus\t1";
const MANIFEST_COLUMNS: &str = "id\tfeatures\tlabels\tspeakers\tframes";

pub fn format_manifest(manifest: &CorpusManifest) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "{MANIFEST_HEADER}");
    let _ = writeln!(out, "#seed\t{}", manifest.seed);
    let spec = toml::Table::try_from(&manifest.spec)
        .map_err(|e| Error::Config(format!("cannot serialize simulation spec: {e}")))?;
    for (k, v) in &spec {
        let _ = writeln!(out, "#spec.{k}\t{v}");
    }
    let _ = writeln!(out, "{MANIFEST_COLUMNS}");
    for e in &manifest.entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.features.display(),
            e.labels.display(),
            e.num_speakers,
            e.frames
        );
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    fs::write(path, format_manifest(manifest)?).map_err(|e| Error::io(path, e))
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<CorpusManifest> {
    let fail = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MANIFEST_HEADER => {}
        _ => return Err(fail(1, "missing manifest header".into())),
    }
    let mut seed = None;
    let mut spec = toml::Table::new();
    let mut entries = Vec::new();
    let mut seen_columns = false;
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let (key, value) = meta
                .split_once('\t')
                .ok_or_else(|| fail(n, "metadata line without a tab".into()))?;
            if key == "seed" {
                seed = Some(value.parse::<u64>().map_err(|e| fail(n, e.to_string()))?);
            } else if let Some(field) = key.strip_prefix("spec.") {
                let parsed: toml::Table = toml::from_str(&format!("v = {value}"))
                    .map_err(|e| fail(n, format!("bad value for {field}: {e}")))?;
                spec.insert(field.to_string(), parsed["v"].clone());
            } else {
                return Err(fail(n, format!("unknown metadata key {key:?}")));
            }
            continue;
        }
        if !seen_columns {
            if line != MANIFEST_COLUMNS {
                return Err(fail(n, "missing column header".into()));
            }
            seen_columns = true;
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(fail(n, format!("expected 5 columns, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| fail(n, format!("{s:?}: {e}")));
        entries.push(ManifestEntry {
            id: f[0].to_string(),
            features: PathBuf::from(f[1]),
            labels: PathBuf::from(f[2]),
            num_speakers: int(f[3])?,
            frames: int(f[4])?,
        });
    }
    let spec: SimSpec = toml::Value::Table(spec)
        .try_into()
        .map_err(|e| format_err(path, format!("bad simulation spec: {e}")))?;
    Ok(CorpusManifest {
        seed: seed.ok_or_else(|| format_err(path, "missing seed"))?,
        spec,
        entries,
    })
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(path, &text)
}

/// Training settings and progress. Every field has a default, so a run
/// configuration file may set only some of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingInfo {
    pub loss: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub batch_size: usize,
    pub s_max: usize,
    pub adam: AdamConfig,
    pub last_loss: Option<f64>,
}

impl Default for TrainingInfo {
    fn default() -> Self {
        TrainingInfo {
            loss: "sc-two-stage-pit".into(),
            seed: 0,
            epoch: 0,
            step: 0,
            batch_size: 8,
            s_max: 4,
            adam: AdamConfig::default(),
            last_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Position of the first value, counted in `f64`s from the blob start.
    pub offset: usize,
}

/// The TOML document at the head of a checkpoint. Run configuration files
/// use the same document without arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingInfo,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arrays: Vec<ArrayEntry>,
}

/// Reads a run configuration: a manifest document that lists no arrays.
pub fn read_config(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if !m.arrays.is_empty() {
        return Err(format_err(path, "a configuration file cannot hold arrays"));
    }
    m.model.validate()?;
    Ok(m)
}

pub fn write_config(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub training: TrainingInfo,
    /// Adam moments, present for checkpoints written during training.
    pub optim: Option<OptimState>,
}

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, m: &Matrix| {
        arrays.push(ArrayEntry {
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let names = ckpt.params.names();
    for (n, m) in names.iter().zip(ckpt.params.tensors()) {
        push(n.clone(), m);
    }
    let mut training = ckpt.training.clone();
    if let Some(o) = &ckpt.optim {
        if o.first_moment.len() != names.len() || o.second_moment.len() != names.len() {
            return Err(Error::Contract(
                "optimizer state does not match the parameters".into(),
            ));
        }
        for (n, m) in names.iter().zip(&o.first_moment) {
            push(format!("{FIRST_MOMENT}{n}"), m);
        }
        for (n, m) in names.iter().zip(&o.second_moment) {
            push(format!("{SECOND_MOMENT}{n}"), m);
        }
        training.step = o.step;
    }
    let manifest = Manifest {
        model: ckpt.params.config().clone(),
        training,
        arrays,
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Config(format!("cannot serialize checkpoint manifest: {e}")))?;
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\n{text}", text.len()).into_bytes();
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut cursor = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[cursor..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "truncated checkpoint header"))?;
        cursor += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| format_err(path, "header is not UTF-8"))
    };
    let magic = next_line()?;
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| format_err(path, "not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let len: usize = next_line()?
        .trim()
        .parse()
        .map_err(|_| format_err(path, "bad manifest length"))?;
    if bytes.len() < cursor + len {
        return Err(format_err(path, "truncated manifest"));
    }
    let text = std::str::from_utf8(&bytes[cursor..cursor + len])
        .map_err(|_| format_err(path, "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| format_err(path, e.to_string()))?;
    let blob = &bytes[cursor + len..];
    manifest.model.validate()?;

    let expected: usize = manifest.arrays.iter().map(|a| a.rows * a.cols).sum();
    if blob.len() != expected * 8 {
        return Err(format_err(
            path,
            format!(
                "array data is {} bytes, manifest describes {}",
                blob.len(),
                expected * 8
            ),
        ));
    }
    let mut tensors: BTreeMap<&str, Matrix> = BTreeMap::new();
    for a in &manifest.arrays {
        let n = a.rows * a.cols;
        let raw = blob
            .get(a.offset * 8..(a.offset + n) * 8)
            .ok_or_else(|| format_err(path, format!("array {} runs past the data", a.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if tensors.insert(&a.name, Matrix::from_vec(a.rows, a.cols, data)?).is_some() {
            return Err(format_err(path, format!("duplicate array {}", a.name)));
        }
    }

    let mut named = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, m) in &tensors {
        if name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT) {
            continue;
        }
        named.push((name.to_string(), m.clone()));
    }
    let params = ModelParams::from_named(&manifest.model, named)
        .map_err(|e| format_err(path, e.to_string()))?;
    for n in params.names() {
        if let Some(m) = tensors.get(format!("{FIRST_MOMENT}{n}").as_str()) {
            first.push(m.clone());
        }
        if let Some(m) = tensors.get(format!("{SECOND_MOMENT}{n}").as_str()) {
            second.push(m.clone());
        }
    }
    let optim = match (first.len(), second.len()) {
        (0, 0) => None,
        (a, b) if a == params.names().len() && b == a => Some(OptimState {
            first_moment: first,
            second_moment: second,
            step: manifest.training.step,
        }),
        _ => return Err(format_err(path, "incomplete optimizer state")),
    };
    if optim.is_none() && tensors.len() != params.names().len() {
        return Err(format_err(path, "unexpected arrays in checkpoint"));
    }
    Ok(Checkpoint {
        params,
        training: manifest.training,
        optim,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(path, &read_bytes(path)?)
}
