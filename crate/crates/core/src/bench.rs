//! Forward-pass latency measurement.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig};
use crate::tensor::Tensor;

pub const WARMUP_RUNS: usize = 2;
pub const MIN_RUNS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub image_size: usize,
    pub runs: usize,
    pub warmup: usize,
    pub params: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// `p50 / p95`, in `(0, 1]`.
    pub stability: f64,
    pub unix_time: u64,
}

/// Nearest-rank percentile of ascending samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Fixed input: a smooth ramp with a bright square.
pub fn bench_input(size: usize) -> Tensor {
    Tensor::from_fn(&[1, size, size], |i| {
        let (y, x) = (i / size, i % size);
        let spot = (size / 3..size / 3 + size / 8).contains(&y) && (size / 2..size / 2 + size / 8).contains(&x);
        0.2 + 0.3 * (x + y) as f32 / (2 * size) as f32 + if spot { 0.3 } else { 0.0 }
    })
}

/// Times `n_runs` forward passes at `image_size` after [`WARMUP_RUNS`]
/// untimed ones.
pub fn bench_forward(cfg: &ModelConfig, n_runs: usize, image_size: usize) -> Result<BenchReport> {
    if n_runs < MIN_RUNS {
        return Err(Error::invalid(format!("need at least {MIN_RUNS} runs, got {n_runs}")));
    }
    if image_size == 0 || !image_size.is_multiple_of(32) {
        return Err(Error::invalid(format!(
            "image size {image_size} is not a multiple of 32"
        )));
    }
    let model = build_model(cfg)?;
    let image = bench_input(image_size);
    let conf = cfg.head.conf_threshold;
    for _ in 0..WARMUP_RUNS {
        model.detect(&image, conf)?;
    }
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        std::hint::black_box(model.detect(&image, conf)?);
        samples.push((t.elapsed().as_secs_f64() * 1e3).max(1e-6));
    }
    let mean_ms = samples.iter().sum::<f64>() / n_runs as f64;
    samples.sort_by(f64::total_cmp);
    let p50_ms = percentile(&samples, 0.5);
    let p95_ms = percentile(&samples, 0.95);
    Ok(BenchReport {
        image_size,
        runs: n_runs,
        warmup: WARMUP_RUNS,
        params: model.allocated_params().total,
        mean_ms,
        p50_ms,
        p95_ms,
        stability: p50_ms / p95_ms,
        unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    })
}

/// Appends the report as one JSON line.
pub fn archive(report: &BenchReport, path: &Path) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(report).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}
