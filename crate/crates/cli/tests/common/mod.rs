//! Helpers shared by the command-line tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_mitodet");

/// Small enough that a full train → mine → infer chain takes seconds.
pub const TINY_CONFIG: &str = r#"
seed = 3

[synth]
n_images = 6

[synth.spec]
size = 128
mitoses = [1, 3]
distractors = [1, 2]
min_separation = 30.0
test_fraction = 0.34

[crops]
crop = 64
negatives_per_image = 1

[detector.backbone]
blocks = [1, 1, 1, 1]
width = 0.0625
gn_groups = 2
fpn_channels = 8

[detector.head]
channels = 8
num_convs = 1
gn_groups = 2

[train_det]
steps = 4
batch_size = 2

[classifier]
blocks = [1, 1, 1, 1]
width = 0.125
input_size = 64
train_crop = 80
test_crop = 64

[train_cls]
steps = 4
batch_size = 8

[cascade]
tile = 64
tile_stride = 32

[run]
checkpoint_every = 2
log_every = 1
"#;

pub fn mitodet(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn mitodet")
}

/// Runs and asserts success, returning stderr (where logs go).
pub fn ok(args: &[&str], cwd: &Path) -> String {
    let out = mitodet(args, cwd);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "mitodet {args:?} failed:\n{err}");
    err
}

/// A workspace holding `tiny.toml` and a synthesized dataset in `data/`.
pub fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    std::fs::write(root.join("tiny.toml"), TINY_CONFIG).unwrap();
    ok(&["synth", "--config", "tiny.toml", "--out", "data"], &root);
    (dir, root)
}

pub fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// `key: value` lookup in a metrics report.
pub fn report_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no {key} in report:\n{report}"))
        .trim()
        .parse()
        .unwrap()
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Data rows of a CSV file (header dropped).
pub fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path.as_ref()).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}
