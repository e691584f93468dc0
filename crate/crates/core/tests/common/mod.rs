#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hallu_core::trace::{summarize_distribution, Decoding, GenerationTrace, TokenRecord};

/// One token per word joined by single spaces; step distributions and
/// attention rows cycle through the given lists.
pub fn trace_from_words(
    id: &str,
    words: &[&str],
    dists: &[(Vec<f64>, usize)],
    attn: &[Vec<f64>],
) -> GenerationTrace {
    let caption = words.join(" ");
    let mut pos = 0;
    let tokens = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let span = (pos, pos + w.len());
            pos += w.len() + 1;
            let (d, c) = &dists[i % dists.len()];
            TokenRecord {
                surface: w.to_string(),
                char_span: span,
                stats: summarize_distribution(d, *c).unwrap(),
                attn_img_mean_abs: attn[i % attn.len()].clone(),
            }
        })
        .collect();
    GenerationTrace {
        trace_id: id.into(),
        caption,
        tokens,
        num_heads: attn[0].len(),
        length_penalty: 1.0,
        decoding: Decoding::Sampling,
        gt_objects: Some(BTreeSet::new()),
        clip_scores: None,
    }
}

/// A caption with fixed step statistics and the given ground truth.
pub fn caption(id: &str, text: &str, gt: &[&str]) -> GenerationTrace {
    let words: Vec<&str> = text.split(' ').collect();
    let mut t = trace_from_words(id, &words, &[(vec![0.7, 0.2, 0.1], 0)], &[vec![0.1, 0.3]]);
    t.gt_objects = Some(gt.iter().map(|s| s.to_string()).collect());
    t
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    x
}

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn benchmark_config() -> PathBuf {
    manifest_dir().join("configs/benchmark.toml")
}

/// Runs the `hallu` binary in `dir`.
pub fn hallu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallu"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("hallu binary runs")
}

pub fn hallu_ok(dir: &Path, args: &[&str]) -> String {
    let out = hallu(dir, args);
    assert!(
        out.status.success(),
        "hallu {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The benchmark config with a smaller corpus, written into `dir`.
pub fn small_benchmark_config(dir: &Path, num_traces: usize) -> PathBuf {
    let text = std::fs::read_to_string(benchmark_config()).unwrap();
    let text = text.replace("num_traces = 5000", &format!("num_traces = {num_traces}"));
    assert!(text.contains(&format!("num_traces = {num_traces}")));
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}
