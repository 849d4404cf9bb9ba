//! End-to-end acceptance checks. Run with
//! `cargo test -p sceend --test acceptance`; prints one line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use sceend::decode::{activity_to_segments, infer};
use sceend::io;
use sceend::losses::{
    evaluate, exhaustive_assignment, hungarian, pit_loss, teacher_forced_loss, train_epoch, Example, LossKind,
    TrainHyper,
};
use sceend::metrics::{der, DerBreakdown, Segment, SegmentList};
use sceend::model::{init_model, Mode};
use sceend::numcore::{grad_check, AdamConfig, OptimState};
use sceend::sim::{build_corpus, corpus_recording, overlap_ratio, SimSpec};
use sceend::{ActivityMatrix, Matrix, ModelConfig, ModelParams, PosteriorMatrix};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn corpus(spec: &SimSpec, seed: u64, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let (id, m) = corpus_recording(spec, seed, i).unwrap();
            Example {
                id,
                features: m.features,
                labels: m.labels,
            }
        })
        .collect()
}

fn gradient_fidelity() -> Outcome {
    let params = init_model(&ModelConfig::desk(), 1).unwrap();
    let ex = common::example(&common::short_spec(50), 3, 5);
    let mut worst = 0.0f64;
    let mut report = Vec::new();
    for kind in LossKind::ALL {
        let f = |ts: &[Matrix]| {
            let p = params.with_tensors(ts.to_vec())?;
            let e = evaluate(&p, &ex.features, &ex.labels, kind, 4, Mode::Eval, true)?;
            Ok((e.loss, e.grads.expect("requested")))
        };
        let r = grad_check(f, params.tensors(), 1e-5, 100, 17).map_err(|e| e.to_string())?;
        ensure(r.checked == 100, format!("{kind}: checked {} coordinates", r.checked))?;
        ensure(r.max_rel_err < 1e-4, format!("{kind}: max relative error {:.2e}", r.max_rel_err))?;
        worst = worst.max(r.max_rel_err);
        report.push(format!("{kind} {:.1e}", r.max_rel_err));
    }
    Ok(format!("max relative error {worst:.2e} ({})", report.join(", ")))
}

fn random_bce_costs(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> Matrix {
    let z: Vec<Vec<f64>> = (0..n).map(|_| (0..25).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let y: Vec<Vec<u8>> = (0..n).map(|_| (0..25).map(|_| u8::from(r.random_bool(0.5))).collect()).collect();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            c[(i, j)] = common::naive_bce(&z[i], &y[j]);
        }
    }
    c
}

fn permutation_machinery() -> Outcome {
    let mut r = common::rng(2024);
    for n in 2..=5 {
        for k in 0..200 {
            let c = random_bce_costs(n, &mut r);
            let (h, e) = (hungarian(&c).unwrap(), exhaustive_assignment(&c).unwrap());
            ensure(h.cost == e.cost, format!("S={n} matrix {k}: {} vs {}", h.cost, e.cost))?;
        }
    }
    for trial in 0..500 {
        let s = 2 + trial % 4;
        let z: Vec<Vec<f64>> = (0..s).map(|_| (0..40).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let y: Vec<Vec<u8>> = (0..s).map(|_| (0..40).map(|_| u8::from(r.random_bool(0.5))).collect()).collect();
        let z = PosteriorMatrix::from_rows(&z, 40).unwrap();
        let y = ActivityMatrix::from_rows(&y).unwrap();
        let mut order: Vec<usize> = (0..s).collect();
        order.shuffle(&mut r);
        let a = pit_loss(&z, &y).unwrap().0;
        let b = pit_loss(&z, &y.select_rows(&order).unwrap()).unwrap().0;
        ensure(a == b, format!("trial {trial}: {a} vs {b}"))?;
    }
    Ok("800 assignments exact, 500 PIT permutations exact".into())
}

fn two_stage_contract() -> Outcome {
    let params = init_model(&ModelConfig::desk(), 3).unwrap();
    let spec = common::short_spec(40);
    for speakers in 1..=3 {
        let ex = common::example(&spec, speakers, 60 + speakers as u64);
        let frames = ex.labels.num_frames();
        let e = evaluate(&params, &ex.features, &ex.labels, LossKind::ScTwoStagePit, 4, Mode::Eval, true)
            .map_err(|e| e.to_string())?;
        let st = e.trace.stage1.as_ref().ok_or("no stage-one trace")?;
        // (a) stage-one conditions are the strictly thresholded previous output
        for s in 1..4 {
            let want: Vec<u8> = st.posteriors.row(s - 1).iter().map(|&z| u8::from(z > 0.5)).collect();
            ensure(st.conditions[s] == want, format!("(a) S={speakers} iteration {s}"))?;
        }
        // (b) stage-two conditions follow the stage-one order, zeros after S
        let perm = &st.perm.perm;
        for s in 1..4 {
            let want = match perm.get(s - 1) {
                Some(&j) => ex.labels.row(j).to_vec(),
                None => vec![0u8; frames],
            };
            ensure(e.trace.conditions[s] == want, format!("(b) S={speakers} iteration {s}"))?;
        }
        ensure(e.trace.conditions[0].iter().all(|&v| v == 0), "(b) first condition not zero")?;
        // (c) padding term recomputed by hand
        let z = &e.trace.posteriors;
        let speech: f64 = (0..speakers).map(|s| common::naive_bce(z.row(s), ex.labels.row(perm[s]))).sum();
        let padding: f64 = (speakers..4)
            .flat_map(|s| z.row(s).iter().map(|&p| -(1.0 - p).max(1e-7).ln()))
            .sum();
        ensure(
            (e.loss - speech - padding).abs() <= 1e-9 * e.loss,
            format!("(c) S={speakers}: {} vs {}", e.loss, speech + padding),
        )?;
        // (d) gradients equal those of the teacher-forced pass alone
        let tf = teacher_forced_loss(&params, &ex.features, &ex.labels, perm, 4, true).map_err(|e| e.to_string())?;
        ensure(e.grads == tf.grads, format!("(d) S={speakers}: gradients differ"))?;
    }
    Ok("(a)-(d) hold for 1, 2 and 3 speakers".into())
}

fn frame_error(params: &ModelParams, data: &[Example]) -> (f64, f64) {
    let mut parts = Vec::new();
    let mut correct = 0;
    for ex in data {
        let r = infer(params, &ex.features, 4, 0.5).unwrap();
        if r.activity.num_speakers() == ex.labels.num_speakers() {
            correct += 1;
        }
        let h = activity_to_segments(&r.activity, 0.1, 0.0, &ex.id).unwrap();
        let rf = activity_to_segments(&ex.labels, 0.1, 0.0, &ex.id).unwrap();
        parts.push(der(&rf, &h, 0.0, true).unwrap());
    }
    (DerBreakdown::aggregate(&parts).der, correct as f64 / data.len() as f64)
}

fn overfit_and_recover() -> Outcome {
    let spec = SimSpec {
        min_speakers: 1,
        max_speakers: 3,
        frames: 500,
        ..SimSpec::default()
    };
    let data = corpus(&spec, 11, 20);
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut params = init_model(&cfg, 1).unwrap();
    let mut optim = OptimState::new(params.tensors());
    let hyper = TrainHyper {
        batch_size: 1,
        s_max: 4,
        adam: AdamConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..AdamConfig::default()
        },
        seed: 1,
    };
    let mut epoch = 0;
    while optim.step < 2000 {
        train_epoch(&mut params, &data, LossKind::ScTwoStagePit, &mut optim, &hyper, epoch)
            .map_err(|e| e.to_string())?;
        epoch += 1;
    }
    let (err, acc) = frame_error(&params, &data);
    let msg = format!("{} steps: frame error {:.2}%, count accuracy {:.0}%", optim.step, 100.0 * err, 100.0 * acc);
    ensure(optim.step <= 2000 && err < 0.10 && acc >= 0.90, msg.clone())?;
    Ok(msg)
}

const TREND_FRAMES: usize = 150;
const TREND_TRAIN: usize = 400;
const TREND_EPOCHS: u64 = 10;

fn held_out_der(params: &ModelParams, data: &[Example]) -> f64 {
    let parts: Vec<DerBreakdown> = data
        .iter()
        .map(|ex| {
            let r = infer(params, &ex.features, 4, 0.5).unwrap();
            let h = activity_to_segments(&r.activity, 0.1, 0.0, &ex.id).unwrap();
            let rf = activity_to_segments(&ex.labels, 0.1, 0.0, &ex.id).unwrap();
            der(&rf, &h, 0.25, true).unwrap()
        })
        .collect();
    DerBreakdown::aggregate(&parts).der
}

fn train_for_trend(kind: LossKind, seed: u64, data: &[Example]) -> Result<ModelParams, String> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let mut params = init_model(&cfg, seed).unwrap();
    let mut optim = OptimState::new(params.tensors());
    let hyper = TrainHyper {
        batch_size: 4,
        s_max: 4,
        adam: AdamConfig {
            lr: 1e-3,
            warmup_steps: 100,
            ..AdamConfig::default()
        },
        seed,
    };
    for epoch in 0..TREND_EPOCHS {
        train_epoch(&mut params, data, kind, &mut optim, &hyper, epoch).map_err(|e| e.to_string())?;
    }
    Ok(params)
}

fn teacher_forcing_trend() -> Outcome {
    let train_spec = SimSpec {
        min_speakers: 1,
        max_speakers: 3,
        frames: TREND_FRAMES,
        ..SimSpec::default()
    };
    let test_spec = SimSpec {
        min_speakers: 3,
        max_speakers: 3,
        ..train_spec.clone()
    };
    let held_out = corpus(&test_spec, 99, 100);
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=3u64 {
        let data = corpus(&train_spec, 1000 + seed, TREND_TRAIN);
        let two_stage = held_out_der(&train_for_trend(LossKind::ScTwoStagePit, seed, &data)?, &held_out);
        let plain = held_out_der(&train_for_trend(LossKind::ScPit, seed, &data)?, &held_out);
        if two_stage <= plain {
            wins += 1;
        }
        rows.push(format!("seed {seed}: {:.2}% vs {:.2}%", 100.0 * two_stage, 100.0 * plain));
    }
    let msg = format!("two-stage vs sc-pit DER, {}; ordering holds on {wins}/3", rows.join(", "));
    ensure(wins >= 2, msg.clone())?;
    Ok(msg)
}

fn scorer_oracle() -> Outcome {
    let seg = |s: &str, a: f64, d: f64| Segment {
        speaker: s.into(),
        start: a,
        duration: d,
    };
    let r = SegmentList::new("r", vec![seg("A", 0.0, 10.0)]).unwrap();
    let h = SegmentList::new("r", vec![seg("B", 0.0, 5.0)]).unwrap();
    let d = der(&r, &h, 0.25, true).unwrap();
    ensure((d.der - 0.5).abs() < 1e-9, format!("hand case gives {}", d.der))?;

    let mut rng = common::rng(9);
    for i in 0..100 {
        let l = common::random_segments(&mut rng, "r", 1 + i % 4, 1 + i % 8, 30_000);
        ensure(der(&l, &l, 0.25, true).unwrap().der == 0.0, format!("der(x, x) nonzero at {i}"))?;
    }
    for i in 0..50 {
        let reference = common::random_segments(&mut rng, "r", 3, 5, 8_000);
        let hypothesis = common::random_segments(&mut rng, "r", 1 + i % 4, 5, 8_000);
        let base = der(&reference, &hypothesis, 0.25, true).unwrap();
        let renamed = SegmentList::new(
            "r",
            hypothesis.segments().iter().map(|s| seg(&format!("z{}", s.speaker), s.start, s.duration)).collect(),
        )
        .unwrap();
        ensure(der(&reference, &renamed, 0.25, true).unwrap() == base, format!("renaming changed case {i}"))?;
        let mut pieces = Vec::new();
        for s in hypothesis.segments() {
            let half = ((s.duration * 1000.0).round() / 2.0).floor() / 1000.0;
            pieces.push(seg(&s.speaker, s.start, half));
            pieces.push(seg(&s.speaker, s.start + half, s.duration - half));
        }
        let split = SegmentList::new("r", pieces).unwrap();
        ensure(der(&reference, &split, 0.25, true).unwrap() == base, format!("splitting changed case {i}"))?;
    }
    for i in 0..50 {
        let reference = common::random_segments(&mut rng, "r", 1 + i % 3, 1 + i % 5, 2_000);
        let hypothesis = common::random_segments(&mut rng, "r", 1 + (i / 2) % 4, 1 + i % 6, 2_000);
        let d = der(&reference, &hypothesis, 0.0, true).unwrap();
        let (err, scored) = common::brute_force_der_ms(&reference, &hypothesis, 2_600);
        ensure(
            (d.total_error() - err as f64 / 1000.0).abs() < 1e-9 && (d.scored_speech - scored as f64 / 1000.0).abs() < 1e-9,
            format!("brute-force mismatch at case {i}"),
        )?;
    }
    Ok("hand case 0.500000, identity, renaming, splitting and 1 ms brute force agree".into())
}

fn determinism_and_round_trips() -> Outcome {
    let spec = SimSpec {
        frames: 60,
        ..SimSpec::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for d in &dirs {
        let m = build_corpus(&spec, 4, 21, d.path()).map_err(|e| e.to_string())?;
        let data = sceend::sim::load_examples(&m, d.path()).map_err(|e| e.to_string())?;
        let mut params = init_model(&ModelConfig::desk(), 2).unwrap();
        let mut optim = OptimState::new(params.tensors());
        let hyper = TrainHyper {
            batch_size: 2,
            s_max: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 5,
        };
        for epoch in 0..2 {
            train_epoch(&mut params, &data, LossKind::ScTwoStagePit, &mut optim, &hyper, epoch)
                .map_err(|e| e.to_string())?;
        }
        let results: Vec<_> = data.iter().map(|ex| infer(&params, &ex.features, 4, 0.5).unwrap()).collect();
        let ckpt = io::Checkpoint {
            params,
            training: io::TrainingInfo::default(),
            optim: Some(optim),
        };
        let bytes = io::encode_checkpoint(&ckpt).map_err(|e| e.to_string())?;
        outputs.push((std::fs::read(d.path().join("manifest.tsv")).unwrap(), bytes, results, data));
    }
    ensure(outputs[0].0 == outputs[1].0, "corpus manifests differ")?;
    ensure(outputs[0].1 == outputs[1].1, "trained checkpoints differ")?;
    ensure(outputs[0].2 == outputs[1].2, "inference differs")?;

    let path = std::path::Path::new("memory");
    let bytes = &outputs[0].1;
    let back = io::decode_checkpoint(path, bytes).map_err(|e| e.to_string())?;
    ensure(&io::encode_checkpoint(&back).unwrap() == bytes, "checkpoint save/load/save differs")?;
    ensure(io::decode_checkpoint(path, &bytes[..bytes.len() - 3]).is_err(), "truncated checkpoint loaded")?;
    let after: Vec<_> = outputs[0].3.iter().map(|ex| infer(&back.params, &ex.features, 4, 0.5).unwrap()).collect();
    ensure(after == outputs[0].2, "loaded model infers differently")?;

    for ex in &outputs[0].3 {
        let f = io::decode_features(path, &io::encode_features(ex.features.frames())).unwrap();
        ensure(&f == ex.features.frames(), "features round trip")?;
        let l = io::decode_labels(path, &io::encode_labels(&ex.labels)).unwrap();
        ensure(l == ex.labels, "labels round trip")?;
        let segs = activity_to_segments(&ex.labels, 0.1, 0.0, &ex.id).unwrap();
        let text = io::format_rttm(&segs);
        let parsed = io::parse_rttm(path, &text).unwrap();
        ensure(io::format_rttm(&parsed[0]) == text, "RTTM rewrite differs")?;
        for (a, b) in segs.segments().iter().zip(parsed[0].segments()) {
            ensure((a.start - b.start).abs() < 5e-4 + 1e-12 && (a.duration - b.duration).abs() < 5e-4 + 1e-12, "RTTM time drift")?;
        }
    }
    Ok("simulate/train/infer bitwise repeatable; RTTM, SCEF/SCEL and checkpoint round trips pass".into())
}

fn simulator_statistics() -> Outcome {
    let spec = SimSpec {
        min_speakers: 2,
        max_speakers: 4,
        ..SimSpec::default()
    };
    let mut ratios = Vec::with_capacity(500);
    for i in 0..500 {
        let (_, m) = corpus_recording(&spec, 8, i).map_err(|e| e.to_string())?;
        ratios.push(overlap_ratio(&m.labels).0);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let msg = format!("mean overlap ratio {mean:.4} over 500 recordings (target 0.30 +/- 0.05)");
    ensure((mean - 0.30).abs() <= 0.05, msg.clone())?;
    Ok(msg)
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("1 gradient fidelity", gradient_fidelity),
        ("2 permutation machinery", permutation_machinery),
        ("3 two-stage loss contract", two_stage_contract),
        ("4 overfit and recover", overfit_and_recover),
        ("5 teacher-forcing trend", teacher_forcing_trend),
        ("6 scorer oracle", scorer_oracle),
        ("7 determinism and round trips", determinism_and_round_trips),
        ("8 simulator statistics", simulator_statistics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}; {secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
