//! Drives the built binary against scratch directories.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use regimelab::igtools::EmbeddingSet;

pub const BIN: &str = env!("CARGO_BIN_EXE_regimelab");

/// Every pipeline step in dependency order, without `--out`.
pub const PIPELINE: &[&[&str]] = &[
    &["simulate"],
    &["build-dataset"],
    &["train", "--stage", "sft"],
    &["train", "--stage", "rm"],
    &["train", "--stage", "rlmf"],
    &["deploy"],
    &["eval"],
    &["eval", "--split", "eval", "--checkpoint", "sft"],
];

pub fn regimelab(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).arg("--out").arg(out).output().expect("binary runs")
}

pub fn ok(out: &Path, args: &[&str]) -> Output {
    let o = regimelab(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

/// Runs the whole pipeline plus `ig` on `embeddings`, returning each step's stdout.
pub fn run_all(out: &Path, embeddings: &Path) -> Vec<Vec<u8>> {
    let mut logs: Vec<Vec<u8>> = PIPELINE.iter().map(|a| ok(out, a).stdout).collect();
    let emb = embeddings.to_str().unwrap();
    logs.push(ok(out, &["ig", "--input", emb, "--task", "categorical", "--task", "movement"]).stdout);
    logs
}

/// File name to contents for every file directly under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Three tagged Gaussian blobs, written as an embedding CSV.
pub fn write_blob_embeddings(path: &Path) {
    let (rows, ids) = crate::common::blobs(3, 40, 6, 10.0, 21);
    let tags = ids.iter().map(|b| format!("c{b}")).collect();
    let targets = ids.iter().map(|&b| b as f64 - 1.0).collect();
    let set = EmbeddingSet::new("blobs", rows, Some(tags), Some(targets)).unwrap();
    let mut f = std::fs::File::create(path).unwrap();
    set.write_csv(&mut f).unwrap();
}
