#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use streamdiff::formats::write_jaaf;
use streamdiff_core::{Rng, Tensor};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamdiff"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn streamdiff")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn write_audio(dir: &Path, name: &str, frames: usize, dim: usize, seed: u64) -> PathBuf {
    let rows = Tensor::randn(&mut Rng::new(seed), &[frames, dim]).into_data();
    let mut buf = Vec::new();
    write_jaaf(&mut buf, dim, &rows).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, buf).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
