use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn anmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anmt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn evaluate_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    fs::write(&h, "the cat sat on the mat\na quick brown fox jumps\n").unwrap();
    let out = anmt(&["evaluate", "--hyp", path(&h), "--ref", path(&h)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "BLEU 100.00 / TER 0.00\n");
}

#[test]
fn evaluate_with_rival_reports_winner() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r, rival) = (dir.path().join("h"), dir.path().join("r"), dir.path().join("x"));
    fs::write(&r, "the cat sat on the mat\na quick brown fox jumps\n").unwrap();
    fs::write(&h, "the cat sat on the mat\na quick brown fox jumps\n").unwrap();
    fs::write(&rival, "dogs bark\nnothing here\n").unwrap();
    let out = anmt(&[
        "evaluate",
        "--hyp",
        path(&h),
        "--ref",
        path(&r),
        "--rival",
        path(&rival),
        "--bootstrap",
        "200",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("winner hypothesis, p = 0.0000 (200 resamples, seed 1)"),
        "{text}"
    );
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = anmt(&[
        "train",
        "--train-src",
        "a",
        "--train-tgt",
        "b",
        "--dev-src",
        "c",
        "--dev-tgt",
        "d",
        "--vocab-tgt",
        "e",
        "--score",
        "dot",
        "--out",
        "m",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--vocab-src"));
}

#[test]
fn bad_score_kind_is_a_usage_error() {
    let out = anmt(&["train", "--score", "cosine"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = anmt(&["evaluate", "--hyp", path(&missing), "--ref", path(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
    assert!(err.contains("nope.txt"), "{err}");
}

#[test]
fn mismatched_line_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (h, r) = (dir.path().join("h"), dir.path().join("r"));
    fs::write(&h, "a b\n").unwrap();
    fs::write(&r, "a b\nc d\n").unwrap();
    assert_eq!(
        anmt(&["evaluate", "--hyp", path(&h), "--ref", path(&r)]).status.code(),
        Some(2)
    );
}

#[test]
fn help_exits_zero() {
    let out = anmt(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "build-vocab",
        "split-idioms",
        "train",
        "translate",
        "evaluate",
        "analyze",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    fs::write(&h, "v w x y z\n").unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, format!("hyp = {}\nref = {}\n", path(&h), path(&h))).unwrap();
    let out = anmt(&["evaluate", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "BLEU 100.00 / TER 0.00\n");

    fs::write(&cfg, "colour = blue\n").unwrap();
    let out = anmt(&["evaluate", "--config", path(&cfg)]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn split_and_vocabulary_files() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = (dir.path().join("c.src"), dir.path().join("c.tgt"));
    let lines: String = (0..10).map(|i| format!("w{i} common\n")).collect();
    fs::write(&src, &lines).unwrap();
    fs::write(&tgt, &lines).unwrap();
    let out_dir = dir.path().join("split");
    let out = anmt(&[
        "split-idioms",
        "--src",
        path(&src),
        "--tgt",
        path(&tgt),
        "--test-n",
        "3",
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let test = fs::read_to_string(out_dir.join("test.src")).unwrap();
    let train = fs::read_to_string(out_dir.join("train.src")).unwrap();
    assert_eq!(test.lines().count(), 3);
    assert_eq!(train.lines().count(), 7);
    assert_eq!(test, fs::read_to_string(out_dir.join("test.tgt")).unwrap());

    let vocab = dir.path().join("v.txt");
    let out = anmt(&[
        "build-vocab",
        "--corpus",
        path(&src),
        "--out",
        path(&vocab),
        "--cap",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let entries = fs::read_to_string(&vocab).unwrap();
    assert_eq!(entries.lines().count(), 3);
    assert!(entries.contains("common"));

    let too_many = anmt(&[
        "split-idioms",
        "--src",
        path(&src),
        "--tgt",
        path(&tgt),
        "--test-n",
        "11",
        "--out-dir",
        path(&out_dir),
    ]);
    assert_eq!(too_many.status.code(), Some(2));
}
