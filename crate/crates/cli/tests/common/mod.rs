#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rerank_lab::synthetic::{separable, SeparableSpec};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_rerank-lab"));
    cmd.env_remove("RERANK_LAB_THREADS");
    cmd
}

/// Writes a synthetic separable collection and a config that points at it.
pub fn workspace(dir: &Path, spec: &SeparableSpec, extra: &str) -> PathBuf {
    let data = separable(spec).unwrap();
    data.write_files(&dir.join("data")).unwrap();
    let config = dir.join("run.toml");
    let body = format!(
        r#"seed = 7

[paths]
collection = "data/collection.tsv"
queries = "data/queries.tsv"
qrels = "data/qrels.txt"
triples = "data/triples.tsv"
candidates = "data/candidates.tsv"
output_dir = "out"

[embeddings]
dim = 16

[model]
kind = "knrm"

[train]
batch_size = 16
eval_every = 10
max_steps = 30
epochs = 5
patience = 10

[eval]
threshold_max = 20
frequency_max = 20

[retrieval]
depth = 20
{extra}
"#
    );
    std::fs::write(&config, body).unwrap();
    config
}

pub fn run(config: &Path, args: &[&str]) -> Output {
    let out = bin().arg("--config").arg(config).args(args).output().unwrap();
    out
}

pub fn run_ok(config: &Path, args: &[&str]) -> String {
    let out = run(config, args);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{stdout}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

/// The tab-separated `key=value` field of the first stdout line starting
/// with `prefix`.
pub fn field(stdout: &str, prefix: &str, key: &str) -> String {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no `{prefix}` line in {stdout}"));
    line.split('\t')
        .find_map(|f| f.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .to_string()
}

/// build-index → build-vocab → retrieve → train → sweep.
pub fn pipeline(config: &Path) -> String {
    let mut all = String::new();
    for args in [
        &["build-index"][..],
        &["build-vocab"],
        &["retrieve"],
        &["train"],
        &["sweep"],
    ] {
        all.push_str(&run_ok(config, args));
    }
    all
}
