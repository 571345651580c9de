//! Latency, throughput and FLOPs accounting.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enhance::{enhance_image, EnhanceConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::net::{NetTopology, Weights};
use crate::parallel;

/// Elementwise FLOPs per value for one enhancement step.
pub const ENHANCE_STEP_FLOPS: u64 = 6;
/// Elementwise FLOPs per value for one restoration step.
pub const RESTORE_STEP_FLOPS: u64 = 15;

/// `2·MACs` for three operator applications plus per-iteration elementwise work.
pub fn flops_estimate(topology: &NetTopology, height: usize, width: usize, iterations: usize, irm: bool) -> u64 {
    let px = (height * width) as u64;
    let conv = 2 * px * topology.macs_per_pixel() as u64 * 3;
    let per_iter = ENHANCE_STEP_FLOPS + if irm { RESTORE_STEP_FLOPS } else { 0 };
    conv + per_iter * px * 3 * iterations as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub topology: NetTopology,
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub flops: u64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub runs: usize,
    pub threads: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "topology, HxW, T, flops, median_ms, p95_ms, fps, threads";

    pub fn csv_row(&self) -> String {
        format!(
            "{}, {}x{}, {}, {}, {:.3}, {:.3}, {:.2}, {}",
            self.topology,
            self.width,
            self.height,
            self.iterations,
            self.flops,
            self.median_ms,
            self.p95_ms,
            self.fps,
            self.threads
        )
    }
}

pub fn bench_csv(reports: &[BenchReport]) -> String {
    let mut s = format!("{}\n", BenchReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Median and nearest-rank 95th percentile of the samples.
pub fn summarize(samples_ms: &[f64]) -> (f64, f64) {
    let mut v = samples_ms.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (median, v[rank - 1])
}

/// Deterministic synthetic low-light frame.
pub fn synthetic_frame(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(height, width, 3, |_, _, _| rng.random_range(0.0..0.3))
}

/// Times `runs` full [`enhance_image`] calls after `warmup` untimed ones.
///
/// `threads == 0` uses the global pool; `1` gives the single-threaded figure.
pub fn time_pipeline(
    weights: &Weights,
    height: usize,
    width: usize,
    cfg: &EnhanceConfig,
    runs: usize,
    warmup: usize,
    threads: usize,
) -> Result<BenchReport> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be >= 1".into()));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("resolution must be non-zero".into()));
    }
    cfg.validate()?;
    let frame = synthetic_frame(height, width, 0);
    let (samples, used_threads) = parallel::with_threads(threads, || -> Result<(Vec<f64>, usize)> {
        for _ in 0..warmup {
            black_box(enhance_image(weights, &frame, cfg)?);
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            let out = enhance_image(weights, black_box(&frame), cfg)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
            black_box(out);
        }
        Ok((samples, parallel::current_threads()))
    })?;
    let (median_ms, p95_ms) = summarize(&samples);
    Ok(BenchReport {
        topology: weights.topology().clone(),
        height,
        width,
        iterations: cfg.iterations,
        flops: flops_estimate(weights.topology(), height, width, cfg.iterations, cfg.irm_enabled),
        median_ms,
        p95_ms,
        fps: 1000.0 / median_ms,
        runs,
        threads: used_threads,
    })
}
