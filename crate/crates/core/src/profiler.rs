//! Per-stage latency measurement and analytic memory accounting.
//!
//! Every forward pass timestamps stage boundaries with one shared monotonic
//! clock, so stage times add up to layer times and layer times add up to the
//! end-to-end time exactly. Several configurations measured together are run
//! interleaved (one pass of each per round) so slow drift on the host affects
//! them equally.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::PointCloud;
use crate::knn::{knn_bytes, knn_workspace_bytes, KNN_ALGORITHM};
use crate::model::{head_hidden_bytes, index_bytes, ModelConfig, Network, Stage, WeightStore};
use crate::rng;
use crate::tensor::ThreadMode;

pub const CLOCK: &str = "std::time::Instant (monotonic)";
pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;
/// k grid of the latency/accuracy sweep.
pub const DEFAULT_K_GRID: [usize; 6] = [5, 10, 15, 20, 25, 30];
/// Baseline, last layer static, last two layers static.
pub const DEFAULT_TAILS: [usize; 3] = [0, 1, 2];
/// Inference count the cumulative memory columns are scaled to.
pub const DEFAULT_INFERENCES: usize = 100;

const F32: usize = std::mem::size_of::<f32>();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
    pub thread_mode: ThreadMode,
    pub clock: String,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
            seed: 42,
            thread_mode: ThreadMode::Single,
            clock: CLOCK.to_string(),
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            return Err(Error::config("runs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    pub p25_ms: f64,
    pub p75_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Stats {
    /// Sample statistics; stddev uses `n − 1` and is 0 for a single sample.
    pub fn from_samples(samples: &[f64]) -> Stats {
        assert!(!samples.is_empty(), "no samples");
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = if sorted.len() > 1 {
            sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Stats {
            mean_ms: mean,
            median_ms: quantile(&sorted, 0.5),
            stddev_ms: var.sqrt(),
            p25_ms: quantile(&sorted, 0.25),
            p75_ms: quantile(&sorted, 0.75),
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
        }
    }
}

/// Linear interpolation between closest ranks over sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One `(layer, stage)` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub stage: Stage,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    pub bytes_persistent: usize,
    pub bytes_transient: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTotal {
    pub name: String,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Host {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
}

impl Host {
    pub fn current() -> Host {
        Host {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Published kNN shares of end-to-end latency on a framework GPU/CPU stack,
/// carried next to the measured share for comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceShare {
    pub gpu: f64,
    pub cpu: f64,
}

impl Default for ReferenceShare {
    fn default() -> Self {
        ReferenceShare { gpu: 0.95, cpu: 0.90 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub engine: String,
    pub engine_version: String,
    pub host: Host,
    pub thread_mode: ThreadMode,
    pub knn_algorithm: String,
    pub rng_algorithm: String,
    pub clock: String,
    pub timer_resolution_ns: u64,
    pub plan: BenchPlan,
    pub batch_size: usize,
    pub schedule: String,
    pub headline_statistic: String,
    pub input: String,
    pub config: ModelConfig,
    pub knn_invocations: usize,
    pub update_share: f64,
    pub other_share: f64,
    pub reference_knn_share: ReferenceShare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub metadata: Metadata,
    pub layers: Vec<StageStats>,
    pub layer_totals: Vec<LayerTotal>,
    pub end_to_end: Stats,
    pub knn_share: f64,
}

impl ProfileReport {
    pub fn stage_rows(&self, stage: Stage) -> impl Iterator<Item = &StageStats> {
        self.layers.iter().filter(move |r| r.stage == stage)
    }

    pub fn knn_invocations(&self) -> usize {
        self.stage_rows(Stage::GraphConstruction).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Smallest observable positive step of the monotonic clock.
pub fn timer_resolution() -> Result<Duration> {
    const SAMPLES: usize = 64;
    const SPIN_LIMIT: usize = 10_000_000;
    let mut best = Duration::MAX;
    for _ in 0..SAMPLES {
        let start = Instant::now();
        let mut spins = 0;
        let step = loop {
            let d = Instant::now().duration_since(start);
            if !d.is_zero() {
                break d;
            }
            spins += 1;
            if spins > SPIN_LIMIT {
                return Err(Error::Timer(
                    "the clock did not advance; run on a host with a working CLOCK_MONOTONIC (or QueryPerformanceCounter)"
                        .into(),
                ));
            }
        };
        best = best.min(step);
    }
    Ok(best)
}

/// Describes where the input cloud came from, recorded in the report.
#[derive(Debug, Clone)]
pub struct BenchInput<'a> {
    pub cloud: &'a PointCloud,
    pub description: String,
}

/// Times `network` on `cloud` according to `plan`.
pub fn bench(cfg: &ModelConfig, weights: &WeightStore, cloud: &PointCloud, plan: &BenchPlan) -> Result<ProfileReport> {
    let net = Network::new(cfg, weights)?;
    let input = BenchInput {
        cloud,
        description: describe_cloud(cloud),
    };
    Ok(bench_networks(&[net], &input, plan)?.remove(0))
}

/// One report per k; `weights_for(k)` supplies the weights used at that k.
pub fn sweep_k<'w>(
    cfg: &ModelConfig,
    weights_for: impl Fn(usize) -> &'w WeightStore,
    cloud: &PointCloud,
    plan: &BenchPlan,
    ks: &[usize],
) -> Result<Vec<ProfileReport>> {
    let nets = ks
        .iter()
        .map(|&k| Network::new(&ModelConfig { k, ..cfg.clone() }, weights_for(k)))
        .collect::<Result<Vec<_>>>()?;
    let input = BenchInput {
        cloud,
        description: describe_cloud(cloud),
    };
    bench_networks(&nets, &input, plan)
}

/// One report per static-tail value, all sharing `weights`.
pub fn compare_variants(
    cfg: &ModelConfig,
    weights: &WeightStore,
    cloud: &PointCloud,
    plan: &BenchPlan,
    tails: &[usize],
) -> Result<Vec<ProfileReport>> {
    let base = Network::new(cfg, weights)?;
    let nets = tails
        .iter()
        .map(|&t| base.with_schedule(cfg.k, t))
        .collect::<Result<Vec<_>>>()?;
    let input = BenchInput {
        cloud,
        description: describe_cloud(cloud),
    };
    bench_networks(&nets, &input, plan)
}

fn describe_cloud(cloud: &PointCloud) -> String {
    format!("point cloud {}x{}", cloud.num_points(), cloud.dim())
}

/// Interleaved measurement of several networks on the same cloud.
pub fn bench_networks(nets: &[Network], input: &BenchInput<'_>, plan: &BenchPlan) -> Result<Vec<ProfileReport>> {
    plan.validate()?;
    let resolution = timer_resolution()?;
    let mode = plan.thread_mode;

    for _ in 0..plan.warmup {
        for net in nets {
            net.forward(input.cloud, mode)?;
        }
    }

    // samples[net][record][run] in nanoseconds
    let mut samples: Vec<Vec<Vec<u64>>> = vec![Vec::new(); nets.len()];
    let mut structure = Vec::with_capacity(nets.len());
    for run in 0..plan.runs {
        for (v, net) in nets.iter().enumerate() {
            let (_, trace) = net.forward(input.cloud, mode)?;
            if run == 0 {
                samples[v] = vec![Vec::with_capacity(plan.runs); trace.records.len()];
                structure.push(trace.records.clone());
            }
            for (slot, rec) in samples[v].iter_mut().zip(&trace.records) {
                slot.push(rec.nanos);
            }
        }
    }

    let schedule = if nets.len() > 1 { "interleaved" } else { "sequential" };
    Ok(nets
        .iter()
        .zip(samples)
        .zip(structure)
        .map(|((net, samples), records)| {
            build_report(net.config(), &records, &samples, plan, resolution, schedule, &input.description)
        })
        .collect())
}

fn to_ms(nanos: u64) -> f64 {
    nanos as f64 / 1e6
}

fn build_report(
    cfg: &ModelConfig,
    records: &[crate::model::StageRecord],
    samples: &[Vec<u64>],
    plan: &BenchPlan,
    resolution: Duration,
    schedule: &str,
    input: &str,
) -> ProfileReport {
    let runs = plan.runs;
    let layers = records
        .iter()
        .zip(samples)
        .map(|(rec, s)| {
            let ms: Vec<f64> = s.iter().map(|&v| to_ms(v)).collect();
            let st = Stats::from_samples(&ms);
            StageStats {
                name: rec.layer.clone(),
                stage: rec.stage,
                mean_ms: st.mean_ms,
                median_ms: st.median_ms,
                stddev_ms: st.stddev_ms,
                bytes_persistent: rec.bytes_persistent,
                bytes_transient: rec.bytes_transient,
            }
        })
        .collect();

    let mut names: Vec<&str> = Vec::new();
    for rec in records {
        if !names.contains(&rec.layer.as_str()) {
            names.push(&rec.layer);
        }
    }
    let layer_totals = names
        .iter()
        .map(|&name| {
            let per_run: Vec<f64> = (0..runs)
                .map(|r| {
                    to_ms(
                        records
                            .iter()
                            .zip(samples)
                            .filter(|(rec, _)| rec.layer == name)
                            .map(|(_, s)| s[r])
                            .sum(),
                    )
                })
                .collect();
            let st = Stats::from_samples(&per_run);
            LayerTotal {
                name: name.to_string(),
                mean_ms: st.mean_ms,
                median_ms: st.median_ms,
                stddev_ms: st.stddev_ms,
            }
        })
        .collect();

    let e2e: Vec<f64> = (0..runs).map(|r| to_ms(samples.iter().map(|s| s[r]).sum())).collect();

    let stage_total = |pred: &dyn Fn(Stage) -> bool| -> u128 {
        records
            .iter()
            .zip(samples)
            .filter(|(rec, _)| pred(rec.stage))
            .map(|(_, s)| s.iter().map(|&v| v as u128).sum::<u128>())
            .sum()
    };
    let total = stage_total(&|_| true);
    let knn = stage_total(&|s| s == Stage::GraphConstruction);
    let update = stage_total(&|s| s == Stage::FeatureUpdate);
    let share = |part: u128| if total == 0 { 0.0 } else { part as f64 / total as f64 };
    let (knn_share, update_share) = (share(knn), share(update));
    let other_share = share(total - knn - update);

    ProfileReport {
        metadata: Metadata {
            engine: "edgeprof".into(),
            engine_version: env!("CARGO_PKG_VERSION").into(),
            host: Host::current(),
            thread_mode: plan.thread_mode,
            knn_algorithm: KNN_ALGORITHM.into(),
            rng_algorithm: rng::ALGORITHM.into(),
            clock: plan.clock.clone(),
            timer_resolution_ns: resolution.as_nanos() as u64,
            plan: plan.clone(),
            batch_size: 1,
            schedule: schedule.into(),
            headline_statistic: "median".into(),
            input: input.into(),
            config: cfg.clone(),
            knn_invocations: records.iter().filter(|r| r.stage == Stage::GraphConstruction).count(),
            update_share,
            other_share,
            reference_knn_share: ReferenceShare::default(),
        },
        layers,
        layer_totals,
        end_to_end: Stats::from_samples(&e2e),
        knn_share,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub name: String,
    pub stage: Stage,
    /// Outputs that outlive the stage.
    pub bytes_persistent: usize,
    /// Scratch buffers released when the stage ends.
    pub bytes_transient: usize,
    /// Bytes live while the stage runs: kept inputs and earlier layer outputs, plus this stage's buffers.
    pub bytes_peak: usize,
    /// k-dependent kNN outputs (index matrix + gathered neighbours); zero outside graph construction.
    pub knn_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTable {
    pub config: ModelConfig,
    pub num_points: usize,
    pub inferences: usize,
    pub rows: Vec<MemoryRow>,
    pub knn_bytes_per_inference: usize,
    pub knn_bytes_cumulative: usize,
    pub knn_workspace_bytes_per_inference: usize,
    pub peak_bytes: usize,
}

/// Analytic byte counts for one forward pass over `num_points` points, derived
/// from tensor shapes alone. Cumulative kNN columns are scaled to `inferences`.
pub fn memory_report(cfg: &ModelConfig, num_points: usize, inferences: usize) -> Result<MemoryTable> {
    cfg.validate()?;
    let (n, k) = (num_points, cfg.k);
    if n <= k {
        return Err(Error::config(format!("{n} points cannot have {k} neighbours each")));
    }
    let cloud = n * cfg.in_channels * F32;
    let mut rows = Vec::new();
    let mut held = cloud;
    for l in 0..cfg.num_edge_layers() {
        let c = cfg.edge_input_dim(l);
        let a = cfg.dec_channels[l];
        let gathered = n * k * c * F32;
        let work = n * k * (2 * c + a) * F32;
        let out = n * a * F32;
        if cfg.is_dynamic(l) {
            let persistent = knn_bytes(n, k, c);
            let transient = knn_workspace_bytes(n);
            rows.push(MemoryRow {
                name: cfg.edge_layer_name(l),
                stage: Stage::GraphConstruction,
                bytes_persistent: persistent,
                bytes_transient: transient,
                bytes_peak: held + persistent + transient,
                knn_bytes: persistent,
            });
            rows.push(MemoryRow {
                name: cfg.edge_layer_name(l),
                stage: Stage::FeatureUpdate,
                bytes_persistent: out,
                bytes_transient: work,
                bytes_peak: held + persistent + work + out,
                knn_bytes: 0,
            });
        } else {
            let graph = index_bytes(n, k);
            rows.push(MemoryRow {
                name: cfg.edge_layer_name(l),
                stage: Stage::FeatureUpdate,
                bytes_persistent: out,
                bytes_transient: gathered + work,
                bytes_peak: held + graph + gathered + work + out,
                knn_bytes: 0,
            });
        }
        held += out;
    }
    let concat = n * cfg.concat_dim * F32;
    rows.push(MemoryRow {
        name: "concat".into(),
        stage: Stage::Concat,
        bytes_persistent: concat,
        bytes_transient: 0,
        bytes_peak: held + concat,
        knn_bytes: 0,
    });
    let embed = n * cfg.embed_dim * F32;
    rows.push(MemoryRow {
        name: "embed".into(),
        stage: Stage::Linear,
        bytes_persistent: embed,
        bytes_transient: 0,
        bytes_peak: cloud + concat + embed,
        knn_bytes: 0,
    });
    let pooled = cfg.embed_dim * F32;
    rows.push(MemoryRow {
        name: "pool".into(),
        stage: Stage::Pool,
        bytes_persistent: pooled,
        bytes_transient: 0,
        bytes_peak: cloud + embed + pooled,
        knn_bytes: 0,
    });
    let logp = cfg.num_classes * F32;
    let hidden = head_hidden_bytes(cfg);
    rows.push(MemoryRow {
        name: "head".into(),
        stage: Stage::Head,
        bytes_persistent: logp,
        bytes_transient: hidden,
        bytes_peak: cloud + pooled + hidden + logp,
        knn_bytes: 0,
    });

    let knn_total: usize = rows.iter().map(|r| r.knn_bytes).sum();
    let workspace = cfg.num_dynamic() * knn_workspace_bytes(n);
    let peak = rows.iter().map(|r| r.bytes_peak).max().unwrap_or(0);
    Ok(MemoryTable {
        config: cfg.clone(),
        num_points: n,
        inferences,
        rows,
        knn_bytes_per_inference: knn_total,
        knn_bytes_cumulative: knn_total * inferences,
        knn_workspace_bytes_per_inference: workspace,
        peak_bytes: peak,
    })
}

#[derive(Serialize)]
struct CsvStageRow<'a> {
    k: usize,
    static_tail: usize,
    layer: &'a str,
    stage: Stage,
    mean_ms: f64,
    median_ms: f64,
    stddev_ms: f64,
    bytes_persistent: usize,
    bytes_transient: usize,
}

/// One CSV row per `(layer, stage)`; `k` and `static_tail` columns let several
/// reports share a table.
pub fn reports_to_csv(reports: &[ProfileReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rep in reports {
        let cfg = &rep.metadata.config;
        for row in &rep.layers {
            w.serialize(CsvStageRow {
                k: cfg.k,
                static_tail: cfg.static_tail,
                layer: &row.name,
                stage: row.stage,
                mean_ms: row.mean_ms,
                median_ms: row.median_ms,
                stddev_ms: row.stddev_ms,
                bytes_persistent: row.bytes_persistent,
                bytes_transient: row.bytes_transient,
            })
            .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

#[derive(Serialize)]
struct CsvMemoryRow<'a> {
    k: usize,
    static_tail: usize,
    layer: &'a str,
    stage: Stage,
    bytes_persistent: usize,
    bytes_transient: usize,
    bytes_peak: usize,
    knn_bytes: usize,
    knn_bytes_cumulative: usize,
}

pub fn memory_to_csv(tables: &[MemoryTable]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in tables {
        for row in &t.rows {
            w.serialize(CsvMemoryRow {
                k: t.config.k,
                static_tail: t.config.static_tail,
                layer: &row.name,
                stage: row.stage,
                bytes_persistent: row.bytes_persistent,
                bytes_transient: row.bytes_transient,
                bytes_peak: row.bytes_peak,
                knn_bytes: row.knn_bytes,
                knn_bytes_cumulative: row.knn_bytes * t.inferences,
            })
            .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
