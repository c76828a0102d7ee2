#![allow(dead_code)]

pub mod oracle;

use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::{Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor};
use dpidm::network::ParamStore;
use dpidm::synthdata::{generate_sample, SceneSpec, TryOnSample};
use dpidm::util;

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes tests that train models, so timings are not distorted by
/// concurrent tests.
pub fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the one-line verdict and fails the test when `pass` is false.
/// Writes to the stdout handle directly so the line survives output capture.
pub fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] acceptance {id:02} {name}: {detail}");
    let _ = out.flush();
    drop(out);
    assert!(pass, "acceptance {id:02} {name} failed: {detail}");
}

pub fn randn(seed: u64, shape: &[usize]) -> Tensor {
    util::randn(&mut util::rng(seed), shape, DType::F64, &Device::Cpu).unwrap()
}

/// Replaces every parameter with N(0, scale^2) draws.
pub fn randomize(store: &ParamStore, seed: u64, scale: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for (i, name) in names.iter().enumerate() {
        let dims = store.get(name).unwrap().dims().to_vec();
        let v = (randn(util::derive_seed(seed, i as u64), &dims) * scale).unwrap();
        store.assign(name, &v).unwrap();
    }
}

pub fn samples(seeds: std::ops::Range<u64>, frames: usize) -> Vec<TryOnSample> {
    seeds
        .map(|s| generate_sample(&SceneSpec::random(s, frames, (64, 48))).unwrap())
        .collect()
}

pub fn dpidm(args: &[&str], deterministic: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpidm"));
    cmd.args(args).env("RUST_LOG", "warn");
    if deterministic {
        cmd.env("DPIDM_DETERMINISTIC", "1");
    }
    cmd.output().expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
