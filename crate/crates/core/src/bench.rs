//! Latency and throughput harness for the offline (re-parameterized) and
//! online (adaptor every frame) head paths.

use std::fmt::Write as _;
use std::sync::Barrier;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptor::{forward_calls_on_this_thread, AdaptorParams};
use crate::boxes::{NmsConfig, REG_MAX};
use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::featblob::FeatureBlob;
use crate::head::{reparameterize, Classifier, FeatureMap, VocabularyPack};
use crate::pipeline::detect;
use crate::quant::{QuantMode, QuantizedPack};

pub const MIN_ITERATIONS: usize = 30;
pub const MIN_WARMUP: usize = 5;
pub const MAX_THREADS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchPath {
    Offline,
    Online,
}

impl BenchPath {
    pub fn name(self) -> &'static str {
        match self {
            BenchPath::Offline => "offline",
            BenchPath::Online => "online",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Float,
    Int8,
    Int16,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Float => "float",
            BenchMode::Int8 => "int8",
            BenchMode::Int16 => "int16",
        }
    }

    fn quant(self) -> Option<QuantMode> {
        match self {
            BenchMode::Float => None,
            BenchMode::Int8 => Some(QuantMode::Int8),
            BenchMode::Int16 => Some(QuantMode::Int16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub path: BenchPath,
    pub threads: usize,
    pub mode: BenchMode,
    /// `(stride, H, W)` per level.
    pub levels: Vec<(u32, usize, usize)>,
    pub image_size: u32,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// One 20×20 stride-32 level, the coarsest level of a 640-pixel input.
    pub fn single_level(path: BenchPath, threads: usize, mode: BenchMode, seed: u64) -> Self {
        Self {
            path,
            threads,
            mode,
            levels: vec![(32, 20, 20)],
            image_size: 640,
            iterations: MIN_ITERATIONS,
            warmup: MIN_WARMUP,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < MIN_ITERATIONS {
            return Err(Error::Config(format!(
                "iterations must be >= {MIN_ITERATIONS}, got {}",
                self.iterations
            )));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::Config(format!(
                "warmup must be >= {MIN_WARMUP}, got {}",
                self.warmup
            )));
        }
        if !(1..=MAX_THREADS).contains(&self.threads) {
            return Err(Error::Config(format!(
                "threads must be in 1..={MAX_THREADS}, got {}",
                self.threads
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::Config("at least one feature level is required".into()));
        }
        Ok(())
    }
}

/// What the online path needs to rebuild the pack every frame.
#[derive(Debug, Clone, Copy)]
pub struct OnlineInputs<'a> {
    pub embeddings: &'a EmbeddingMatrix,
    pub adaptor: &'a AdaptorParams<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub samples_us: Vec<f64>,
    /// Adaptor forward calls observed on the worker thread inside timed regions.
    pub adaptor_calls: u64,
    #[serde(skip)]
    timed_span: Option<(Instant, Instant)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub path: BenchPath,
    pub k: usize,
    pub threads: usize,
    pub mode: BenchMode,
    pub iterations: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub median_of_means_us: f64,
    pub fps: f64,
    /// Timed frames of all workers over the wall-clock span from the common
    /// start of the timed region to the last worker finishing.
    pub aggregate_fps: f64,
    pub adaptor_calls_timed: u64,
    pub fingerprint: String,
    pub workers: Vec<WorkerStats>,
}

enum Head {
    Float(VocabularyPack),
    Quant(QuantizedPack),
}

impl Head {
    fn build(pack: VocabularyPack, mode: BenchMode) -> Self {
        match mode.quant() {
            None => Head::Float(pack),
            Some(m) => Head::Quant(QuantizedPack::from_pack(&pack, m)),
        }
    }

    fn classifier(&self) -> &dyn Classifier {
        match self {
            Head::Float(p) => p,
            Head::Quant(q) => q,
        }
    }
}

fn random_blob(cfg: &BenchConfig, dim: usize, seed: u64) -> Result<FeatureBlob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(cfg.levels.len());
    let mut boxes = Vec::with_capacity(cfg.levels.len());
    for (level, &(stride, h, w)) in cfg.levels.iter().enumerate() {
        let f: Vec<f32> = (0..dim * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f32> = (0..4 * REG_MAX * h * w)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        features.push(FeatureMap::new(level, stride, [1, dim, h, w], f)?);
        boxes.push(FeatureMap::new(level, stride, [1, 4 * REG_MAX, h, w], b)?);
    }
    FeatureBlob::new(cfg.image_size, features, boxes)
}

fn worker(
    cfg: &BenchConfig,
    offline: Option<&Head>,
    online: Option<(OnlineInputs<'_>, f32, f32)>,
    blob: &FeatureBlob,
    nms_cfg: &NmsConfig,
    ready: &Barrier,
) -> Result<WorkerStats> {
    let mut samples = Vec::with_capacity(cfg.iterations);
    let mut adaptor_calls = 0;
    let mut timed_start = None;
    for i in 0..cfg.warmup + cfg.iterations {
        if i == cfg.warmup {
            // Released together, so the aggregate span covers concurrent work only.
            ready.wait();
            timed_start = Some(Instant::now());
        }
        let calls_before = forward_calls_on_this_thread();
        let start = Instant::now();
        let dets = match (offline, online) {
            (Some(head), _) => detect(head.classifier(), blob, nms_cfg)?,
            (None, Some((inputs, scale, bias))) => {
                let adapted = inputs.adaptor.adapt(inputs.embeddings)?;
                let head = Head::build(reparameterize(&adapted, scale, bias)?, cfg.mode);
                detect(head.classifier(), blob, nms_cfg)?
            }
            (None, None) => unreachable!("run_bench selects a path"),
        };
        let elapsed = start.elapsed();
        std::hint::black_box(&dets);
        if i >= cfg.warmup {
            samples.push(elapsed.as_secs_f64() * 1e6);
            adaptor_calls += forward_calls_on_this_thread() - calls_before;
        }
    }
    Ok(WorkerStats {
        samples_us: samples,
        adaptor_calls,
        timed_span: timed_start.map(|t| (t, Instant::now())),
    })
}

/// Times the configured path with `cfg.threads` workers sharing the pack read-only.
///
/// The offline path uses `pack` as built; the online path ignores its kernel and
/// rebuilds it from `online` every iteration, keeping `pack`'s α and β.
pub fn run_bench(
    cfg: &BenchConfig,
    pack: &VocabularyPack,
    online: Option<OnlineInputs<'_>>,
) -> Result<BenchResult> {
    cfg.validate()?;
    let dim = pack.dim();
    let k = pack.num_classes();
    let head = Head::build(pack.clone(), cfg.mode);
    let online = match cfg.path {
        BenchPath::Offline => None,
        BenchPath::Online => {
            let inputs = online.ok_or_else(|| {
                Error::Config("online path needs raw embeddings and an adaptor".into())
            })?;
            if inputs.embeddings.dims() != dim || inputs.embeddings.rows() != k {
                return Err(Error::Shape(format!(
                    "online embeddings are {}×{}, pack is {k}×{dim}",
                    inputs.embeddings.rows(),
                    inputs.embeddings.dims()
                )));
            }
            Some((inputs, pack.logit_scale(), pack.logit_bias()))
        }
    };
    let offline = online.is_none().then_some(&head);
    // Scoring every anchor is the measured work; a zero threshold would make NMS dominate.
    let nms_cfg = NmsConfig::default();
    let blobs = (0..cfg.threads)
        .map(|t| random_blob(cfg, dim, cfg.seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;

    let ready = Barrier::new(cfg.threads);
    let workers = std::thread::scope(|scope| {
        let handles = blobs
            .iter()
            .enumerate()
            .map(|(t, blob)| {
                std::thread::Builder::new()
                    .name(format!("bench-{t}"))
                    .spawn_scoped(scope, || worker(cfg, offline, online, blob, &nms_cfg, &ready))
                    .map_err(|e| Error::Resource(format!("cannot spawn bench worker: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Resource("bench worker panicked".into()))?
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let all: Vec<f64> = workers.iter().flat_map(|w| w.samples_us.iter().copied()).collect();
    let mean = mean_of(&all);
    let spans: Vec<(Instant, Instant)> = workers.iter().filter_map(|w| w.timed_span).collect();
    let aggregate_fps = match (spans.iter().map(|s| s.0).min(), spans.iter().map(|s| s.1).max()) {
        (Some(a), Some(b)) if b > a => all.len() as f64 / (b - a).as_secs_f64(),
        _ => 1e6 / mean,
    };
    Ok(BenchResult {
        path: cfg.path,
        k,
        threads: cfg.threads,
        mode: cfg.mode,
        iterations: cfg.iterations,
        mean_us: mean,
        p50_us: percentile(&all, 0.5),
        p90_us: percentile(&all, 0.9),
        median_of_means_us: median_of_means(&all, 5),
        fps: 1e6 / mean,
        aggregate_fps,
        adaptor_calls_timed: workers.iter().map(|w| w.adaptor_calls).sum(),
        fingerprint: machine_fingerprint(),
        workers,
    })
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Nearest-rank percentile.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

/// Median of the means of `groups` contiguous chunks.
pub fn median_of_means(samples: &[f64], groups: usize) -> f64 {
    let groups = groups.clamp(1, samples.len());
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { samples.len() } else { (g + 1) * size };
            mean_of(&samples[g * size..end])
        })
        .collect();
    means.sort_by(f64::total_cmp);
    if groups % 2 == 1 {
        means[groups / 2]
    } else {
        (means[groups / 2 - 1] + means[groups / 2]) / 2.0
    }
}

pub fn machine_fingerprint() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".into());
    let cores = std::thread::available_parallelism().map_or(0, |n| n.get());
    format!(
        "{}-{} {} ({} hw threads)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpu,
        cores
    )
}

pub const REPORT_HEADER: &str =
    "path,k,threads,mode,iterations,mean_us,p50_us,p90_us,median_of_means_us,fps,aggregate_fps";

pub fn report_csv(results: &[BenchResult]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            r.path.name(),
            r.k,
            r.threads,
            r.mode.name(),
            r.iterations,
            r.mean_us,
            r.p50_us,
            r.p90_us,
            r.median_of_means_us,
            r.fps,
            r.aggregate_fps
        );
    }
    s
}

pub fn report_table(results: &[BenchResult]) -> String {
    let header = [
        "path", "K", "threads", "mode", "mean µs", "p50 µs", "p90 µs", "FPS", "agg FPS",
    ];
    let rows: Vec<[String; 9]> = results
        .iter()
        .map(|r| {
            [
                r.path.name().to_string(),
                r.k.to_string(),
                r.threads.to_string(),
                r.mode.name().to_string(),
                format!("{:.1}", r.mean_us),
                format!("{:.1}", r.p50_us),
                format!("{:.1}", r.p90_us),
                format!("{:.1}", r.fps),
                format!("{:.1}", r.aggregate_fps),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    if let Some(r) = results.first() {
        let _ = writeln!(out, "machine: {}", r.fingerprint);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&[3.0], 0.9), 3.0);
    }

    #[test]
    fn median_of_means_groups() {
        let v = [1.0, 1.0, 2.0, 2.0, 9.0, 9.0];
        assert_eq!(median_of_means(&v, 3), 2.0);
    }

    #[test]
    fn rejects_short_runs() {
        let mut cfg = BenchConfig::single_level(BenchPath::Offline, 1, BenchMode::Float, 0);
        cfg.iterations = 29;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.iterations = 30;
        cfg.warmup = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
