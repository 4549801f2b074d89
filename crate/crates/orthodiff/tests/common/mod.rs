#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orthodiff::config::RunConfig;

pub fn tiny_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

pub fn tiny() -> RunConfig {
    RunConfig::from_file(&tiny_path()).unwrap()
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthodiff"))
        .args(args)
        .env("ORTHODIFF_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Every file under `root`, relative path → bytes, sorted.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
