#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn fcrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcrn"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = fcrn(args);
    assert!(
        out.status.success(),
        "fcrn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    fcrn(args).status.code().expect("exit code")
}

pub const SMALL_SIM: [&str; 8] = [
    "--set",
    "simulate.n=150",
    "--set",
    "simulate.n_train=120",
    "--set",
    "simulate.n_test=30",
    "--set",
    "simulate.functional.points=21",
];

pub const SMALL_TRAIN: [&str; 8] = [
    "--set",
    "train.max_epochs=4",
    "--set",
    "train.basis_counts=[2,3]",
    "--set",
    "train.hidden=[8,8,8]",
    "--set",
    "train.imputation.burn_in=1",
];

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// simulate → train → predict → evaluate under `root`.
pub fn pipeline(root: &Path, seed: u64, missing_rate: f64, head: &str) {
    let data = root.join("data");
    let run = root.join("run");
    let seed = seed.to_string();
    let mut args = vec!["simulate", "--seed", &seed, "--out"];
    let data_s = s(&data);
    args.push(&data_s);
    args.extend(SMALL_SIM);
    let rate = format!("simulate.missing_rate={missing_rate}");
    args.extend(["--set", &rate]);
    ok(&args);

    let run_s = s(&run);
    let train_subjects = format!(
        "data.train_subjects={}",
        s(&data.join("train_subjects.csv"))
    );
    let train_curves = format!("data.train_curves={}", s(&data.join("train_curves.csv")));
    let head = format!("head.kind={head}");
    let mut args = vec!["train", "--seed", &seed, "--out", &run_s];
    args.extend([
        "--set",
        &train_subjects,
        "--set",
        &train_curves,
        "--set",
        &head,
    ]);
    args.extend(SMALL_TRAIN);
    ok(&args);

    let preds = s(&run.join("predictions.csv"));
    ok(&[
        "predict",
        "--model",
        &s(&run.join("model.json")),
        "--subjects",
        &s(&data.join("test_subjects.csv")),
        "--curves",
        &s(&data.join("test_curves.csv")),
        "-o",
        &preds,
    ]);
    ok(&[
        "evaluate",
        "--predictions",
        &preds,
        "--subjects",
        &s(&data.join("test_subjects.csv")),
        "--curves",
        &s(&data.join("test_curves.csv")),
        "--horizons",
        "50,100",
        "-o",
        &s(&run.join("eval")),
    ]);
}

/// Relative path → contents for every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Config files embed their own output paths; blank them before comparing
/// runs made in different directories.
pub fn normalized(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let prefix = root.to_str().unwrap().as_bytes().to_vec();
    snapshot(root)
        .into_iter()
        .map(|(k, v)| (k, replace(&v, &prefix, b"<root>")))
        .collect()
}

fn replace(hay: &[u8], needle: &[u8], with: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(hay.len());
    let mut i = 0;
    while i < hay.len() {
        if hay[i..].starts_with(needle) {
            out.extend_from_slice(with);
            i += needle.len();
        } else {
            out.push(hay[i]);
            i += 1;
        }
    }
    out
}
