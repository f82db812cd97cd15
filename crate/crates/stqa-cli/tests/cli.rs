//! End-to-end runs of the installed binary: every subcommand, the exit
//! code contract, and the text-only pipeline with no visual files on
//! disk.

use std::path::Path;
use std::process::{Command, Output};

fn stqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stqa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn visual_file_count(root: &Path) -> usize {
    let mut stack = vec![root.to_path_buf()];
    let mut n = 0;
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "bin") {
                n += 1;
            }
        }
    }
    n
}

#[test]
fn text_pipeline_runs_without_any_visual_files() {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("text.ckpt");
    let data_s = data.to_str().expect("utf8 path");
    let ckpt_s = ckpt.to_str().expect("utf8 path");

    let out = stqa(&[
        "synth", "--profile", "text", "--out", data_s, "--questions", "40", "--seed", "11",
    ]);
    assert_exit(&out, 0);
    assert_eq!(visual_file_count(&data), 0, "text profile wrote clips");

    let out = stqa(&[
        "train", "--channel", "text", "--data", data_s, "--out", ckpt_s, "--seed", "2",
        "--epochs", "2",
    ]);
    assert_exit(&out, 0);
    let log = stdout(&out);
    assert!(log.contains("train_loss"), "missing tsv header:\n{log}");
    assert!(log.contains("checkpoint\t"), "missing checkpoint line:\n{log}");

    let out = stqa(&["eval", "--checkpoint", ckpt_s, "--data", data_s, "--split", "test"]);
    assert_exit(&out, 0);
    let report = stdout(&out);
    assert!(report.contains("accuracy\t"), "missing accuracy:\n{report}");
    assert!(report.contains("text_only\t"), "missing per-type line:\n{report}");
}

#[test]
fn eval_rejects_candidate_count_mismatch() {
    let dir = tempfile::tempdir().expect("tempdir");
    let five = dir.path().join("five");
    let four = dir.path().join("four");
    let ckpt = dir.path().join("text.ckpt");
    let five_s = five.to_str().expect("utf8 path");
    let four_s = four.to_str().expect("utf8 path");
    let ckpt_s = ckpt.to_str().expect("utf8 path");

    let out = stqa(&[
        "synth", "--profile", "text", "--out", five_s, "--questions", "20", "--seed", "4",
    ]);
    assert_exit(&out, 0);
    let out = stqa(&[
        "synth", "--profile", "text", "--out", four_s, "--questions", "20", "--candidates",
        "4", "--seed", "4",
    ]);
    assert_exit(&out, 0);
    let out = stqa(&[
        "train", "--channel", "text", "--data", five_s, "--out", ckpt_s, "--epochs", "1",
    ]);
    assert_exit(&out, 0);

    let out = stqa(&["eval", "--checkpoint", ckpt_s, "--data", four_s]);
    assert_exit(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("candidates"), "unexpected stderr:\n{err}");
}

#[test]
fn gradcheck_prints_error_magnitude_and_passes() {
    let out = stqa(&["gradcheck", "--target", "se_block", "--seed", "7"]);
    assert_exit(&out, 0);
    let line = stdout(&out);
    assert!(line.starts_with("se_block\t"), "unexpected output:\n{line}");
    assert!(line.contains("e-"), "no scientific error value:\n{line}");
    assert!(line.trim_end().ends_with("pass"), "unexpected verdict:\n{line}");
}

#[test]
fn gradcheck_rejects_unknown_target() {
    let out = stqa(&["gradcheck", "--target", "qkv_attention"]);
    assert_exit(&out, 1);
    let err = stderr(&out);
    assert!(err.contains("unknown gradcheck target"), "stderr:\n{err}");
    assert!(err.contains("se_block"), "known targets not listed:\n{err}");
}

#[test]
fn usage_errors_exit_two() {
    assert_exit(&stqa(&[]), 2);
    assert_exit(&stqa(&["--frobnicate"]), 2);
    assert_exit(&stqa(&["train", "--channel", "text"]), 2);
    assert_exit(&stqa(&["synth", "--profile", "hologram", "--out", "/tmp/x"]), 2);
}

#[test]
fn inspect_lists_parameters_with_groups() {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("spt.ckpt");
    let data_s = data.to_str().expect("utf8 path");
    let ckpt_s = ckpt.to_str().expect("utf8 path");

    let out = stqa(&[
        "synth", "--profile", "visual", "--out", data_s, "--questions", "20", "--seed", "9",
    ]);
    assert_exit(&out, 0);
    let out = stqa(&[
        "train", "--channel", "spt", "--data", data_s, "--out", ckpt_s, "--epochs", "1",
    ]);
    assert_exit(&out, 0);

    let out = stqa(&["inspect", "--checkpoint", ckpt_s]);
    assert_exit(&out, 0);
    let table = stdout(&out);
    assert!(table.contains("channel\tspt"), "missing channel line:\n{table}");
    assert!(table.contains("vext.stem.w\textractor"), "stem row:\n{table}");
    assert!(table.contains("score.w\thead"), "score row:\n{table}");
}

#[test]
fn eval_dump_is_replayable_json() {
    let dir = tempfile::tempdir().expect("tempdir");
    let data = dir.path().join("data");
    let ckpt = dir.path().join("text.ckpt");
    let dump = dir.path().join("scores.json");
    let data_s = data.to_str().expect("utf8 path");
    let ckpt_s = ckpt.to_str().expect("utf8 path");
    let dump_s = dump.to_str().expect("utf8 path");

    let out = stqa(&[
        "synth", "--profile", "text", "--out", data_s, "--questions", "25", "--seed", "6",
    ]);
    assert_exit(&out, 0);
    let out = stqa(&[
        "train", "--channel", "text", "--data", data_s, "--out", ckpt_s, "--epochs", "1",
    ]);
    assert_exit(&out, 0);
    let out = stqa(&[
        "eval", "--checkpoint", ckpt_s, "--data", data_s, "--split", "val", "--dump", dump_s,
    ]);
    assert_exit(&out, 0);

    let raw = std::fs::read_to_string(&dump).expect("dump written");
    let dumps: Vec<stqa_core::train::ScoreDump> =
        serde_json::from_str(&raw).expect("dump parses");
    assert!(!dumps.is_empty());
    for d in &dumps {
        assert_eq!(d.channels.len(), 1);
        assert_eq!(d.channels[0].0, stqa_core::Channel::Text);
    }
}
