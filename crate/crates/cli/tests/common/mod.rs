//! Fixture builders shared by the CLI integration tests and the acceptance suite.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weightlab_core::diagnostics::NamePatterns;
use weightlab_core::tensor::write_archive;
use weightlab_core::{Checkpoint, DType, Tensor};

pub fn weightlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightlab"))
        .args(args)
        .env_remove("WEIGHTLAB_THREADS")
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn weightlab")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// `(kind, message)` of the structured error line on stderr.
pub fn error_of(out: &Output) -> (String, String) {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr `{text}` is not JSON: {e}"));
    (
        v["error"]["kind"].as_str().unwrap_or_default().to_string(),
        v["error"]["message"].as_str().unwrap_or_default().to_string(),
    )
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Decoder-shaped checkpoint with every default weight kind for `layers`
/// layers plus an embedding, all `dtype`, values on a 2^-12 grid in (-1, 1).
pub fn decoder(layers: usize, side: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut c = Checkpoint::new();
    let patterns = NamePatterns::default();
    for layer in 0..layers {
        for kind in &patterns.kinds {
            c.insert(kind.resolve(layer), random_tensor(dtype, vec![side, side], rng))
                .unwrap();
        }
    }
    c.insert("model.embed_tokens.weight", random_tensor(dtype, vec![2 * side, side], rng))
        .unwrap();
    c
}

fn random_tensor(dtype: DType, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| grid(rng.random_range(-0.95..0.95))).collect();
    Tensor::from_f32(dtype, shape, &v).unwrap()
}

fn grid(x: f64) -> f32 {
    ((x * 4096.0).round() / 4096.0) as f32
}

/// Copy of `base` where a fraction `frac` of the entries moves by up to
/// `scale` (on the same grid).
pub fn perturb(base: &Checkpoint, frac: f64, scale: f64, rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut out = Checkpoint::new();
    for (name, t) in base.iter() {
        let v: Vec<f32> = t
            .to_f32()
            .unwrap()
            .into_iter()
            .map(|x| {
                if rng.random_bool(frac) {
                    let step = grid(rng.random_range(-scale..scale));
                    let step = if step == 0.0 { grid(scale / 2.0) } else { step };
                    x + step
                } else {
                    x
                }
            })
            .collect();
        out.insert(name, Tensor::from_f32(t.dtype(), t.shape().to_vec(), &v).unwrap())
            .unwrap();
    }
    out
}

pub fn save(dir: &Path, name: &str, c: &Checkpoint) -> PathBuf {
    let path = dir.join(name);
    write_archive(c, &path).unwrap();
    path
}

/// One JSONL trace line.
pub fn trace(prompt: &str, domain: &str, expert: &str, sampler: &[f64], other: &[f64]) -> String {
    serde_json::json!({
        "prompt_id": prompt,
        "domain": domain,
        "expert": expert,
        "sampler_logprobs": sampler,
        "other_logprobs": other,
    })
    .to_string()
}

/// One JSONL evaluation record with an aggregated accuracy.
pub fn eval_acc(model: &str, task: &str, sample: usize, acc: f64) -> String {
    serde_json::json!({ "model_id": model, "task": task, "sample_id": sample, "acc": acc }).to_string()
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}
