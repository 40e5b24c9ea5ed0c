use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

// desk-scale end-to-end corpus
const DESK_SPEAKERS: &str = "1000";
const DESK_UTTS: &str = "10";
const DESK_DIM: &str = "128";
const DESK_TARGETS: &str = "10000";
const DESK_NONTARGETS: &str = "100000";
const DESK_LIMIT_S: f64 = 60.0;
const MIN_TRIALS_PER_S: f64 = 100_000.0;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbackend")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

/// Small corpus with PLDA scores: eval.emb, key.tsv, dur.tsv, s.tsv.
fn small_setup(dir: &Path) {
    ok(dir, &["--seed", "3", "synth", "--out", "train.emb", "--speakers", "100", "--utts", "6", "--dim", "16"]);
    ok(
        dir,
        &[
            "--seed", "4", "synth", "--out", "eval.emb", "--key", "key.tsv", "--durations", "dur.tsv", "--speakers",
            "60", "--utts", "5", "--dim", "16", "--targets", "300", "--nontargets", "3000",
        ],
    );
    ok(dir, &["plda-train", "--train", "train.emb", "--iterations", "4", "--out", "p.bin"]);
    ok(dir, &["score", "--backend", "plda", "--model", "p.bin", "--enroll", "eval.emb", "--key", "key.tsv", "--out", "s.tsv"]);
}

#[test]
fn evaluate_prints_metric_rows() {
    let d = tempfile::tempdir().unwrap();
    small_setup(d.path());
    let out = ok(d.path(), &["evaluate", "--scores", "s.tsv", "--key", "key.tsv"]);
    let names: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["metric", "eer", "min_cprimary", "act_cprimary", "cllr"]);
    for line in out.lines().skip(1) {
        let v: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(v.is_finite() && v >= 0.0, "{line}");
    }
}

#[test]
fn single_system_fuse_matches_calibrate() {
    let d = tempfile::tempdir().unwrap();
    small_setup(d.path());
    ok(d.path(), &["calibrate", "--scores", "s.tsv", "--key", "key.tsv", "--model-out", "c.txt", "--out", "c.tsv"]);
    ok(d.path(), &["fuse", "--scores", "s.tsv", "--key", "key.tsv", "--model-out", "f.txt", "--out", "f.tsv"]);
    assert_eq!(read(d.path(), "c.tsv"), read(d.path(), "f.tsv"));
    assert_eq!(read(d.path(), "c.txt"), read(d.path(), "f.txt"));
    // applying the saved model reproduces the training-time output
    ok(d.path(), &["calibrate", "--scores", "s.tsv", "--model", "c.txt", "--out", "a.tsv"]);
    assert_eq!(read(d.path(), "c.tsv"), read(d.path(), "a.tsv"));
}

#[test]
fn missing_key_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    small_setup(d.path());
    let out = run(d.path(), &["calibrate", "--scores", "s.tsv", "--out", "c.tsv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--key") && err.contains("Usage:"), "{err}");
    assert!(!d.path().join("c.tsv").exists());
}

#[test]
fn bad_data_exits_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("s.tsv"), "modelid\tsegmentid\tLLR\nm\ts\tabc\n").unwrap();
    std::fs::write(d.path().join("k.tsv"), "modelid\tsegmentid\ttargettype\nm\ts\ttarget\n").unwrap();
    let out = run(d.path(), &["evaluate", "--scores", "s.tsv", "--key", "k.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s.tsv:2"));
}

#[test]
fn config_file_rules() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.cfg"), "speakers = 10\nflavour = 3\n").unwrap();
    let out = run(d.path(), &["--config", "bad.cfg", "synth", "--out", "x.emb"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("flavour") && err.contains("bad.cfg:2"), "{err}");

    // config value used unless the flag is given
    std::fs::write(d.path().join("ok.cfg"), "# corpus\nspeakers = 10\nutts = 3\ndim = 4\nseed = 9\n").unwrap();
    ok(d.path(), &["--config", "ok.cfg", "synth", "--out", "a.emb", "--key", "a.tsv", "--targets", "5", "--nontargets", "5"]);
    ok(d.path(), &["--seed", "9", "synth", "--out", "b.emb", "--speakers", "10", "--utts", "3", "--dim", "4"]);
    assert_eq!(read(d.path(), "a.emb"), read(d.path(), "b.emb"));
    ok(d.path(), &["--config", "ok.cfg", "synth", "--out", "c.emb", "--dim", "6"]);
    ok(d.path(), &["--seed", "9", "synth", "--out", "e.emb", "--speakers", "10", "--utts", "3", "--dim", "6"]);
    assert_eq!(read(d.path(), "c.emb"), read(d.path(), "e.emb"));
}

#[test]
fn runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        small_setup(d);
        ok(d, &["psvm-init", "--plda", "p.bin", "--out", "q0.bin"]);
        ok(d, &["--seed", "5", "psvm-train", "--init", "q0.bin", "--train", "train.emb", "--epochs", "2", "--out", "q.bin"]);
        ok(d, &["score", "--backend", "psvm", "--model", "q.bin", "--enroll", "eval.emb", "--key", "key.tsv", "--out", "q.tsv"]);
        ok(
            d,
            &[
                "fuse", "--scores", "s.tsv", "--scores", "q.tsv", "--key", "key.tsv", "--durations", "dur.tsv",
                "--use-durations", "--model-out", "f.txt", "--out", "f.tsv",
            ],
        );
    }
    for f in ["train.emb", "eval.emb", "key.tsv", "p.bin", "s.tsv", "q.bin", "q.tsv", "f.txt", "f.tsv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn thread_count_does_not_change_scores() {
    let d = tempfile::tempdir().unwrap();
    small_setup(d.path());
    let base = ["score", "--backend", "plda", "--model", "p.bin", "--enroll", "eval.emb", "--key", "key.tsv", "--out"];
    let mut one = vec!["--threads", "1"];
    one.extend(base);
    one.push("t1.tsv");
    let mut four = vec!["--threads", "4"];
    four.extend(base);
    four.push("t4.tsv");
    ok(d.path(), &one);
    ok(d.path(), &four);
    assert_eq!(read(d.path(), "t1.tsv"), read(d.path(), "t4.tsv"));
    assert_eq!(run(d.path(), &["--threads", "0", "evaluate", "--scores", "s.tsv", "--key", "key.tsv"]).status.code(), Some(1));
}

#[test]
fn desk_scale_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let corpus = ["--speakers", DESK_SPEAKERS, "--utts", DESK_UTTS, "--dim", DESK_DIM];
    let start = Instant::now();
    let mut args = vec!["--seed", "1", "synth", "--out", "train.emb"];
    args.extend(corpus);
    ok(p, &args);
    let mut args = vec!["--seed", "2", "synth", "--out", "eval.emb", "--key", "key.tsv"];
    args.extend(corpus);
    args.extend(["--targets", DESK_TARGETS, "--nontargets", DESK_NONTARGETS]);
    ok(p, &args);
    ok(p, &["plda-train", "--train", "train.emb", "--iterations", "10", "--out", "p.bin"]);
    let t = Instant::now();
    ok(p, &["score", "--backend", "plda", "--model", "p.bin", "--enroll", "eval.emb", "--key", "key.tsv", "--out", "s.tsv"]);
    let score_s = t.elapsed().as_secs_f64();
    ok(p, &["calibrate", "--scores", "s.tsv", "--key", "key.tsv", "--out", "c.tsv"]);
    let report = ok(p, &["evaluate", "--scores", "c.tsv", "--key", "key.tsv"]);
    let total = start.elapsed().as_secs_f64();

    let n_trials: f64 = DESK_TARGETS.parse::<f64>().unwrap() + DESK_NONTARGETS.parse::<f64>().unwrap();
    let rate = n_trials / score_s;
    eprintln!("desk scale: total {total:.2} s, scoring {rate:.0} trials/s");
    assert!(total < DESK_LIMIT_S, "{total}");
    assert!(rate >= MIN_TRIALS_PER_S, "{rate}");
    let metric = |name: &str| -> f64 {
        report.lines().find(|l| l.starts_with(&format!("{name}\t"))).unwrap().split('\t').nth(1).unwrap().parse().unwrap()
    };
    // well-separated corpus; calibrated output is close to its own minimum
    assert!(metric("eer") < 0.05);
    assert!(metric("act_cprimary") - metric("min_cprimary") < 0.02);
}
