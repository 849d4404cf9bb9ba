use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sceend::decode::{activity_to_segments, infer_baseline, infer_with, InferOptions};
use sceend::io::{self, Checkpoint, Manifest, TrainingInfo};
use sceend::losses::{train_epoch, LossKind, TrainHyper};
use sceend::metrics::{counting_confusion, der, DerBreakdown, SegmentList};
use sceend::model::init_model;
use sceend::numcore::OptimState;
use sceend::sim::{build_corpus, corpus_stats, load_examples, CorpusManifest, SimSpec, MANIFEST_FILE};
use sceend::ModelConfig;

#[derive(Parser)]
#[command(name = "sceend", version, about = "Speaker-wise conditional end-to-end diarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with labels, reference RTTM and manifest.
    Simulate(SimulateArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Decode every recording of a corpus into RTTM files.
    Infer(InferArgs),
    /// Score hypothesis RTTM against a reference.
    Score(ScoreArgs),
    /// Speaker-count confusion between reference and hypothesis RTTM.
    Count(CountArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of recordings.
    #[arg(long)]
    n: usize,
    /// Speaker count or inclusive range such as `1-4`.
    #[arg(long, default_value = "1-4")]
    speakers: String,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Target overlap ratio.
    #[arg(long, default_value_t = 0.3)]
    overlap: f64,
    #[arg(long, default_value_t = 500)]
    frames: usize,
    /// Profile whose feature dimension the corpus uses.
    #[arg(long, default_value = "desk")]
    profile: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus manifest, or the directory holding it.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Run configuration (same document as a checkpoint manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    /// Total epochs, counting those already done when resuming.
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "s-max")]
    s_max: Option<usize>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Also keep `epochNNNN.ckpt` every this many epochs; 0 keeps only the last.
    #[arg(long, default_value_t = 0)]
    save_every: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest, or the directory holding it.
    #[arg(long)]
    data: PathBuf,
    /// Directory receiving one `<id>.rttm` per recording.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "s-max")]
    s_max: Option<usize>,
    /// Median filter length over posteriors (odd).
    #[arg(long, default_value_t = 1)]
    median: usize,
    /// Drop segments shorter than this many seconds.
    #[arg(long, default_value_t = 0.0)]
    min_dur: f64,
    /// Also write posteriors as `<id>.post.scef`.
    #[arg(long)]
    posteriors: bool,
    /// Decode with the fixed-output baseline head.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis RTTM file or directory of RTTM files.
    #[arg(long)]
    hyp: PathBuf,
    /// Seconds forgiven on each side of reference boundaries.
    #[arg(long, default_value_t = 0.25)]
    collar: f64,
    /// Exclude overlapped reference regions from scoring.
    #[arg(long)]
    skip_overlap: bool,
    /// Score recordings present on both sides even if some are unmatched.
    #[arg(long)]
    allow_partial: bool,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    hyp: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => run_infer(a),
        Command::Score(a) => score(a),
        Command::Count(a) => count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Bad flag values found after parsing; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_speakers(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let (a, b) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
    (1 <= a && a <= b).then_some((a, b))
}

fn profile(name: &str) -> Result<ModelConfig> {
    ModelConfig::profile(name).map_err(|e| UsageError(e.to_string()).into())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.to_path_buf()
    }
}

fn load_corpus(data: &Path) -> Result<(CorpusManifest, PathBuf)> {
    let path = manifest_path(data);
    let manifest = io::read_manifest(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let Some((lo, hi)) = parse_speakers(&a.speakers) else {
        return Err(UsageError(format!("invalid --speakers {:?}", a.speakers)).into());
    };
    let model = profile(&a.profile)?;
    let spec = SimSpec {
        min_speakers: lo,
        max_speakers: hi,
        frames: a.frames,
        feat_dim: model.feat_dim,
        overlap_target: a.overlap,
        ..SimSpec::default()
    };
    let manifest = build_corpus(&spec, a.n, a.seed, &a.out)?;
    let stats = corpus_stats(&manifest, &a.out)?;
    print!("{}", stats.render("simulated"));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (corpus, base) = load_corpus(&a.data)?;
    let data = load_examples(&corpus, &base)?;
    if data.is_empty() {
        bail!("corpus {} has no recordings", a.data.display());
    }

    let (mut params, mut training, mut optim) = match &a.resume {
        Some(path) => {
            let ck = io::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let optim = ck
                .optim
                .ok_or_else(|| anyhow!("checkpoint {} has no optimizer state", path.display()))?;
            (ck.params, ck.training, optim)
        }
        None => {
            let (mut model, training) = match &a.config {
                Some(path) => {
                    let m: Manifest = io::read_config(path)?;
                    (m.model, m.training)
                }
                None => (profile(&a.profile)?, TrainingInfo::default()),
            };
            model.feat_dim = corpus.spec.feat_dim;
            if let Some(d) = a.dropout {
                model.dropout = d;
            }
            model.validate()?;
            let params = init_model(&model, a.seed)?;
            let optim = OptimState::new(params.tensors());
            (params, training, optim)
        }
    };

    training.seed = a.seed;
    if let Some(l) = &a.loss {
        training.loss = l.clone();
    }
    if let Some(lr) = a.lr {
        training.adam.lr = lr;
    }
    if let Some(w) = a.warmup {
        training.adam.warmup_steps = w;
    }
    if let Some(b) = a.batch {
        training.batch_size = b;
    }
    if let Some(s) = a.s_max {
        training.s_max = s;
    } else if a.resume.is_none() && a.config.is_none() {
        training.s_max = params.config().max_speakers;
    }
    let epochs = a.epochs.unwrap_or(training.epoch.max(1));
    let kind: LossKind = training
        .loss
        .parse()
        .map_err(|e: sceend::Error| UsageError(e.to_string()))?;
    training.loss = kind.name().to_string();
    if kind == LossKind::PitBaseline && params.config().baseline_speakers == 0 {
        bail!("the baseline loss needs a model with baseline_speakers > 0");
    }

    let hyper = TrainHyper {
        batch_size: training.batch_size,
        s_max: training.s_max,
        adam: training.adam,
        seed: training.seed,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    info!(
        "training {} on {} recordings, {} parameters",
        kind,
        data.len(),
        params.num_scalars()
    );
    let stdout = std::io::stdout();
    for epoch in training.epoch..epochs {
        let stats = train_epoch(&mut params, &data, kind, &mut optim, &hyper, epoch)?;
        training.epoch = epoch + 1;
        training.step = optim.step;
        training.last_loss = Some(stats.mean_loss);
        writeln!(stdout.lock(), "{}\t{:.6}", epoch + 1, stats.mean_loss)?;
        let ck = Checkpoint {
            params: params.clone(),
            training: training.clone(),
            optim: Some(optim.clone()),
        };
        io::save_checkpoint(&a.out.join("last.ckpt"), &ck)?;
        if a.save_every > 0 && (epoch + 1) % a.save_every == 0 {
            io::save_checkpoint(&a.out.join(format!("epoch{:04}.ckpt", epoch + 1)), &ck)?;
        }
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let ck = io::load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let (corpus, base) = load_corpus(&a.data)?;
    let config = ck.params.config();
    if corpus.spec.feat_dim != config.feat_dim {
        bail!(
            "corpus features have dimension {} but the model expects {}",
            corpus.spec.feat_dim,
            config.feat_dim
        );
    }
    let opts = InferOptions {
        s_max: a.s_max.unwrap_or(config.max_speakers),
        threshold: a.threshold.unwrap_or(config.threshold),
        median_window: a.median,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for ex in load_examples(&corpus, &base)? {
        let result = if a.baseline {
            infer_baseline(&ck.params, &ex.features, &opts)?
        } else {
            infer_with(&ck.params, &ex.features, &opts)?
        };
        let segments = activity_to_segments(&result.activity, result.frame_shift, a.min_dur, &ex.id)?;
        io::write_rttm(&a.out.join(format!("{}.rttm", ex.id)), &[segments])?;
        if a.posteriors {
            io::write_features(
                &a.out.join(format!("{}.post.scef", ex.id)),
                result.posteriors.as_matrix(),
            )?;
        }
        info!("{}: {} speakers", ex.id, result.activity.num_speakers());
    }
    Ok(())
}

fn by_recording(lists: Vec<SegmentList>) -> BTreeMap<String, SegmentList> {
    lists.into_iter().map(|l| (l.recording().to_string(), l)).collect()
}

/// Recordings present on both sides, or an error listing the unmatched.
fn pair_up(
    reference: &Path,
    hypothesis: &Path,
    allow_partial: bool,
) -> Result<Vec<(SegmentList, SegmentList)>> {
    let mut refs = by_recording(io::read_rttm_path(reference)?);
    let mut hyps = by_recording(io::read_rttm_path(hypothesis)?);
    let missing: Vec<&String> = refs.keys().filter(|k| !hyps.contains_key(*k)).collect();
    let extra: Vec<&String> = hyps.keys().filter(|k| !refs.contains_key(*k)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        for id in &missing {
            eprintln!("unmatched reference recording: {id}");
        }
        for id in &extra {
            eprintln!("unmatched hypothesis recording: {id}");
        }
        if !allow_partial {
            bail!(
                "{} reference and {} hypothesis recordings unmatched",
                missing.len(),
                extra.len()
            );
        }
    }
    let ids: Vec<String> = refs.keys().filter(|k| hyps.contains_key(*k)).cloned().collect();
    Ok(ids
        .into_iter()
        .map(|id| (refs.remove(&id).unwrap(), hyps.remove(&id).unwrap()))
        .collect())
}

fn score(a: ScoreArgs) -> Result<()> {
    if a.collar.is_nan() || a.collar < 0.0 {
        return Err(UsageError(format!("invalid --collar {}", a.collar)).into());
    }
    let pairs = pair_up(&a.reference, &a.hyp, a.allow_partial)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "recording\tmiss\tfalse_alarm\tconfusion\tscored\tder")?;
    let mut all = Vec::with_capacity(pairs.len());
    for (r, h) in &pairs {
        let b = der(r, h, a.collar, !a.skip_overlap)?;
        writeln!(
            out,
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}",
            r.recording(),
            b.miss,
            b.false_alarm,
            b.confusion,
            b.scored_speech,
            100.0 * b.der
        )?;
        all.push(b);
    }
    let total = DerBreakdown::aggregate(&all);
    writeln!(
        out,
        "TOTAL\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.2}",
        total.miss,
        total.false_alarm,
        total.confusion,
        total.scored_speech,
        100.0 * total.der
    )?;
    eprintln!("DER {:.2}% over {} recordings", 100.0 * total.der, all.len());
    Ok(())
}

fn count(a: CountArgs) -> Result<()> {
    let pairs = pair_up(&a.reference, &a.hyp, false)?;
    let counts: Vec<(usize, usize)> = pairs
        .iter()
        .map(|(r, h)| (r.speakers().len(), h.speakers().len()))
        .collect();
    print!("{}", counting_confusion(&counts).render());
    Ok(())
}
