use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sceend(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sceend"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, n: &str, speakers: &str, frames: &str, seed: &str) {
    let o = sceend(&[
        "simulate", "--n", n, "--speakers", speakers, "--seed", seed, "--frames", frames, "--out", s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_is_reproducible_and_reports_stats() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate(a.path(), "10", "1-4", "200", "7");
    simulate(b.path(), "10", "1-4", "200", "7");
    for f in ["manifest.tsv", "ref.rttm", "feats/rec00003.scef", "labels/rec00009.scel"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let o = sceend(&["simulate", "--n", "4", "--speakers", "2-3", "--seed", "1", "--out", s(&a.path().join("c"))]);
    assert!(stdout(&o).contains("overlap"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&sceend(&["simulate", "--n", "3", "--seed", "1"])), 2);
    assert_eq!(code(&sceend(&["simulate", "--n", "3", "--seed", "1", "--speakers", "4-2", "--out", "x"])), 2);
    assert_eq!(code(&sceend(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "2", "1-2", "30", "1");
    let o = sceend(&[
        "train", "--data", s(dir.path()), "--out", s(&dir.path().join("m")), "--seed", "1", "--loss", "bogus",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = sceend(&["train", "--data", s(&dir.path().join("missing")), "--out", s(dir.path()), "--seed", "1"]);
    assert_eq!(code(&o), 1);
    let o = sceend(&["score", "--ref", s(&dir.path().join("none.rttm")), "--hyp", s(dir.path())]);
    assert_eq!(code(&o), 1);
}

fn train(data: &Path, out: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--seed", "3", "--epochs", epochs, "--lr", "1e-3", "--batch", "2",
    ];
    args.extend_from_slice(extra);
    let o = sceend(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn train_logs_epochs_and_resume_replays_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "4", "1-3", "40", "5");

    let full = dir.path().join("full");
    let o = train(&data, &full, "3", &["--loss", "greedy-tf"]);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let (epoch, loss) = l.split_once('\t').unwrap();
        assert_eq!(epoch, (i + 1).to_string());
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }

    let part = dir.path().join("part");
    train(&data, &part, "1", &["--loss", "greedy-tf"]);
    let resumed = dir.path().join("resumed");
    let ck = part.join("last.ckpt");
    let o = train(&data, &resumed, "3", &["--resume", s(&ck)]);
    assert_eq!(stdout(&o).lines().collect::<Vec<_>>(), lines[1..].to_vec());
    assert_eq!(
        fs::read(full.join("last.ckpt")).unwrap(),
        fs::read(resumed.join("last.ckpt")).unwrap()
    );
}

#[test]
fn infer_then_score_and_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    simulate(&data, "3", "1-2", "40", "9");
    let model = dir.path().join("model");
    train(&data, &model, "1", &["--loss", "two-stage-pit"]);

    let hyp = dir.path().join("hyp");
    let o = sceend(&[
        "infer", "--checkpoint", s(&model.join("last.ckpt")), "--data", s(&data), "--out", s(&hyp), "--posteriors",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["rec00000", "rec00001", "rec00002"] {
        assert!(hyp.join(format!("{id}.rttm")).exists());
        assert!(hyp.join(format!("{id}.post.scef")).exists());
    }
    let reference = data.join("ref.rttm");
    let o = sceend(&["score", "--ref", s(&reference), "--hyp", s(&hyp)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().last().unwrap().starts_with("TOTAL\t"));

    let o = sceend(&["score", "--ref", s(&reference), "--hyp", s(&reference)]);
    assert!(stdout(&o).lines().last().unwrap().ends_with("\t0.00"));

    let o = sceend(&["count", "--ref", s(&reference), "--hyp", s(&reference)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("Accuracy: 100"));
}

#[test]
fn silent_recording_gives_empty_rttm() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.rttm");
    fs::write(&reference, "SPEAKER r1 1 0.000 10.000 <NA> <NA> A <NA> <NA>\n").unwrap();
    let hyp = dir.path().join("hyp");
    fs::create_dir(&hyp).unwrap();
    fs::write(hyp.join("r1.rttm"), "SPEAKER r1 1 0.000 5.000 <NA> <NA> x <NA> <NA>\n").unwrap();
    let o = sceend(&["score", "--ref", s(&reference), "--hyp", s(&hyp)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().last().unwrap().ends_with("\t50.00"), "{}", stdout(&o));

    fs::write(hyp.join("r2.rttm"), "").unwrap();
    let o = sceend(&["score", "--ref", s(&reference), "--hyp", s(&hyp)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("r2"));
    let o = sceend(&["score", "--ref", s(&reference), "--hyp", s(&hyp), "--allow-partial"]);
    assert_eq!(code(&o), 0);
}
