//! End-to-end checks of the binary: the data-prep chain, exit codes, and
//! stdout formats.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn obfuscan(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_obfuscan"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn data_prep_chain_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = obfuscan(
        &["synth-corpus", "--seed", "7", "--n", "80", "-o", "corpus.jsonl"],
        d,
    );
    assert_code(&out, 0);
    let corpus = fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 80);

    let out = obfuscan(
        &[
            "train-tokenizer",
            "--input",
            "corpus.jsonl",
            "--vocab-size",
            "260",
            "-o",
            "tok.json",
        ],
        d,
    );
    assert_code(&out, 0);

    let out = obfuscan(
        &["encode", "--tokenizer", "tok.json", "cmd.exe /c whoami"],
        d,
    );
    assert_code(&out, 0);
    let ids: Vec<u32> =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().next().unwrap())
            .unwrap();
    assert!(ids.len() > 2);

    let out = obfuscan(
        &[
            "gen-obfuscate",
            "--input",
            "corpus.jsonl",
            "--count",
            "20",
            "--seed",
            "3",
            "-o",
            "obf.jsonl",
        ],
        d,
    );
    assert_code(&out, 0);

    let out = obfuscan(
        &[
            "build-dataset",
            "--benign",
            "corpus.jsonl",
            "--artificial",
            "obf.jsonl",
            "--seed",
            "3",
            "-o",
            "ds.json",
        ],
        d,
    );
    assert_code(&out, 0);

    // Usage errors exit 1.
    let out = obfuscan(
        &[
            "gen-obfuscate",
            "--input",
            "corpus.jsonl",
            "--technique",
            "no_such_technique",
        ],
        d,
    );
    assert_code(&out, 1);
    let out = obfuscan(&["no-such-subcommand"], d);
    assert_code(&out, 1);

    // Data errors exit 2.
    let out = obfuscan(
        &["train-tokenizer", "--input", "missing.jsonl", "-o", "x.json"],
        d,
    );
    assert_code(&out, 2);

    // A ratio over the 30:1 cap without the override is a data error.
    let out = obfuscan(
        &[
            "build-dataset",
            "--benign",
            "corpus.jsonl",
            "--artificial",
            "obf.jsonl",
            "--ratio",
            "35",
            "-o",
            "bad.json",
        ],
        d,
    );
    assert_code(&out, 2);
}

#[test]
fn training_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (args, name) in [
        (
            vec!["synth-corpus", "--seed", "5", "--n", "60", "-o", "corpus.jsonl"],
            "corpus",
        ),
        (
            vec![
                "train-tokenizer",
                "--input",
                "corpus.jsonl",
                "--vocab-size",
                "260",
                "-o",
                "tok.json",
            ],
            "tokenizer",
        ),
        (
            vec![
                "gen-obfuscate",
                "--input",
                "corpus.jsonl",
                "--count",
                "12",
                "--seed",
                "5",
                "-o",
                "obf.jsonl",
            ],
            "obf",
        ),
        (
            vec![
                "build-dataset",
                "--benign",
                "corpus.jsonl",
                "--artificial",
                "obf.jsonl",
                "--seed",
                "5",
                "-o",
                "ds.json",
            ],
            "dataset",
        ),
        (
            vec![
                "pretrain",
                "--corpus",
                "corpus.jsonl",
                "--tokenizer",
                "tok.json",
                "--preset",
                "miniature",
                "--steps",
                "1",
                "--batch-size",
                "2",
                "--max-len",
                "24",
                "--out-dir",
                "pre",
            ],
            "pretrain",
        ),
    ] {
        let out = obfuscan(&args, d);
        assert_code(&out, 0);
        let _ = name;
    }

    let out = obfuscan(
        &[
            "finetune",
            "--checkpoint",
            "pre/pretrained.ckpt",
            "--tokenizer",
            "tok.json",
            "--max-len",
            "24",
            "--dataset",
            "ds.json",
            "--epochs",
            "2",
            "--learning-rate",
            "1e18",
            "--out-dir",
            "ft",
        ],
        d,
    );
    assert_code(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}
