use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use edgeprof_core::formats::{read_ecw, read_pcf, synth_cloud, write_ecw, write_pcf, PointCloud};
use edgeprof_core::model::{predicted_class, random_weights, ModelConfig, Network, WeightStore};
use edgeprof_core::profiler::{
    bench_networks, memory_report, memory_to_csv, reports_to_csv, BenchInput, BenchPlan, MemoryTable,
    ProfileReport, CLOCK, DEFAULT_INFERENCES, DEFAULT_K_GRID, DEFAULT_TAILS,
};
use edgeprof_core::{Error, Rng, ThreadMode};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "edgeprof", version, about = "EdgeConv point-cloud network inference and latency profiler")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// Points in the synthetic cloud (ignored with --input).
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(2..))]
    points: Option<u32>,

    /// Neighbours per node.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    k: Option<u32>,

    /// Trailing EdgeConv layers that reuse the last graph.
    #[arg(long = "static-tail", global = true, value_parser = clap::value_parser!(u32).range(0..=3))]
    static_tail: Option<u32>,

    /// Timed forward passes.
    #[arg(long, global = true, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    runs: u32,

    /// Untimed passes before measuring.
    #[arg(long, global = true, default_value_t = 10)]
    warmup: u32,

    /// Seed for random weights (S) and the synthetic cloud (S + 1).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// ECW weight file; `{k}` in the path is replaced by k. Random weights if absent.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,

    /// PCF point cloud; synthetic if absent.
    #[arg(long, global = true)]
    input: Option<PathBuf>,

    /// Model configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Output path; stdout if absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// `1` for single-threaded kernels, `auto` to use all cores.
    #[arg(long, global = true, default_value = "1", value_parser = parse_threads)]
    threads: ThreadMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Profile one configuration.
    Bench,
    /// Profile each k of a list.
    SweepK {
        #[arg(long = "k-list", value_delimiter = ',', default_values_t = DEFAULT_K_GRID)]
        k_list: Vec<usize>,
    },
    /// Profile the baseline against quasi-dynamic variants.
    Compare {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAILS)]
        tails: Vec<usize>,
    },
    /// Analytic per-stage memory table.
    MemReport {
        /// Inferences the cumulative columns are scaled to.
        #[arg(long, default_value_t = DEFAULT_INFERENCES)]
        inferences: usize,
        /// Emit one table per k instead of just --k.
        #[arg(long = "k-list", value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        /// Emit one table per static tail instead of just --static-tail.
        #[arg(long, value_delimiter = ',')]
        tails: Option<Vec<usize>>,
    },
    /// Classify a point cloud.
    Infer,
    /// Write seeded random weights to an ECW file.
    GenWeights,
    /// Write a seeded synthetic cloud to a PCF file.
    GenCloud,
}

fn parse_threads(s: &str) -> Result<ThreadMode, String> {
    match s {
        "1" => Ok(ThreadMode::Single),
        "auto" => Ok(ThreadMode::Parallel),
        other => Err(format!("expected `1` or `auto`, got `{other}`")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Engine(Error::Io(e))
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("error: {e}");
            let code = if e.is_io_or_format() || matches!(e, Error::Timer(_)) { EXIT_IO } else { EXIT_CONFIG };
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Outcome<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Bench => {
            let cfg = model_config(c, None)?;
            let cloud = load_cloud(c, &cfg)?;
            let reports = profile(c, &cloud, vec![cfg])?;
            emit_reports(c, &reports, false)
        }
        Command::SweepK { k_list } => {
            if k_list.is_empty() {
                return Err(Failure::Usage("--k-list is empty".into()));
            }
            let base = model_config(c, None)?;
            let cloud = load_cloud(c, &base)?;
            let cfgs = k_list
                .iter()
                .map(|&k| with_k(&base, k))
                .collect::<Outcome<Vec<_>>>()?;
            let reports = profile(c, &cloud, cfgs)?;
            emit_reports(c, &reports, true)
        }
        Command::Compare { tails } => {
            if tails.is_empty() {
                return Err(Failure::Usage("--tails is empty".into()));
            }
            let base = model_config(c, None)?;
            let cloud = load_cloud(c, &base)?;
            let cfgs = tails
                .iter()
                .map(|&t| {
                    let cfg = ModelConfig {
                        static_tail: t,
                        ..base.clone()
                    };
                    cfg.validate()?;
                    Ok(cfg)
                })
                .collect::<Outcome<Vec<_>>>()?;
            let reports = profile(c, &cloud, cfgs)?;
            emit_reports(c, &reports, true)
        }
        Command::MemReport {
            inferences,
            k_list,
            tails,
        } => {
            let base = model_config(c, None)?;
            let n = match &c.input {
                Some(path) => read_pcf(path)?.num_points(),
                None => base.num_points,
            };
            let ks = k_list.clone().unwrap_or_else(|| vec![base.k]);
            let ts = tails.clone().unwrap_or_else(|| vec![base.static_tail]);
            let mut tables = Vec::new();
            for &k in &ks {
                for &t in &ts {
                    let cfg = ModelConfig {
                        k,
                        static_tail: t,
                        num_points: n,
                        ..base.clone()
                    };
                    tables.push(memory_report(&cfg, n, *inferences)?);
                }
            }
            emit_memory(c, &tables, k_list.is_some() || tails.is_some())
        }
        Command::Infer => {
            let path = c
                .input
                .as_ref()
                .ok_or_else(|| Failure::Usage("infer needs --input".into()))?;
            let cloud = read_pcf(path)?;
            let cfg = model_config(c, Some(cloud.num_points()))?;
            let weights = load_weights(c, &cfg)?;
            let net = Network::new(&cfg, &weights)?;
            let (log_probs, _) = net.forward(&cloud, c.threads)?;
            let class = predicted_class(&log_probs);
            let text = match c.format {
                Format::Json => {
                    let doc = serde_json::json!({
                        "input": path.display().to_string(),
                        "label": cloud.label,
                        "predicted_class": class,
                        "log_probs": log_probs.data(),
                        "config": cfg,
                    });
                    serde_json::to_string_pretty(&doc).map_err(Error::from)? + "\n"
                }
                Format::Csv => {
                    let mut s = String::from("class,log_prob\n");
                    for (i, v) in log_probs.data().iter().enumerate() {
                        s.push_str(&format!("{i},{v:e}\n"));
                    }
                    s
                }
            };
            emit(c, &text)
        }
        Command::GenWeights => {
            let out = c
                .out
                .as_ref()
                .ok_or_else(|| Failure::Usage("gen-weights needs --out".into()))?;
            let cfg = model_config(c, None)?;
            write_ecw(out, &random_weights(&cfg, &mut Rng::new(c.seed))?)?;
            Ok(())
        }
        Command::GenCloud => {
            let out = c
                .out
                .as_ref()
                .ok_or_else(|| Failure::Usage("gen-cloud needs --out".into()))?;
            let cfg = model_config(c, None)?;
            write_pcf(out, &synthetic(&cfg, c.seed))?;
            Ok(())
        }
    }
}

/// Config file (if any) overlaid with the command-line flags.
fn model_config(c: &Common, points_override: Option<usize>) -> Outcome<ModelConfig> {
    let mut cfg = match &c.config {
        Some(path) => ModelConfig::from_text(&fs::read_to_string(path)?)?,
        None => ModelConfig::default(),
    };
    if let Some(k) = c.k {
        cfg.k = k as usize;
    }
    if let Some(t) = c.static_tail {
        cfg.static_tail = t as usize;
    }
    if let Some(n) = c.points {
        cfg.num_points = n as usize;
    }
    if let Some(n) = points_override {
        cfg.num_points = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_k(base: &ModelConfig, k: usize) -> Outcome<ModelConfig> {
    let cfg = ModelConfig { k, ..base.clone() };
    cfg.validate()?;
    Ok(cfg)
}

fn synthetic(cfg: &ModelConfig, seed: u64) -> PointCloud {
    synth_cloud(cfg.num_points, &mut Rng::new(seed.wrapping_add(1)))
}

struct LoadedCloud {
    cloud: PointCloud,
    description: String,
}

fn load_cloud(c: &Common, cfg: &ModelConfig) -> Outcome<LoadedCloud> {
    Ok(match &c.input {
        Some(path) => {
            let cloud = read_pcf(path)?;
            LoadedCloud {
                description: format!("file {} ({}x{})", path.display(), cloud.num_points(), cloud.dim()),
                cloud,
            }
        }
        None => LoadedCloud {
            cloud: synthetic(cfg, c.seed),
            description: format!(
                "synthetic uniform cloud in [-1,1)^3, n={}, seed {}",
                cfg.num_points,
                c.seed.wrapping_add(1)
            ),
        },
    })
}

fn weights_path(template: &Path, k: usize) -> PathBuf {
    PathBuf::from(template.to_string_lossy().replace("{k}", &k.to_string()))
}

fn load_weights(c: &Common, cfg: &ModelConfig) -> Outcome<WeightStore> {
    Ok(match &c.weights {
        Some(template) => read_ecw(weights_path(template, cfg.k))?,
        None => random_weights(cfg, &mut Rng::new(c.seed))?,
    })
}

fn profile(c: &Common, input: &LoadedCloud, cfgs: Vec<ModelConfig>) -> Outcome<Vec<ProfileReport>> {
    let nets = cfgs
        .into_iter()
        .map(|mut cfg| {
            cfg.num_points = input.cloud.num_points();
            let weights = load_weights(c, &cfg)?;
            Ok(Network::new(&cfg, &weights)?)
        })
        .collect::<Outcome<Vec<_>>>()?;
    let plan = BenchPlan {
        runs: c.runs as usize,
        warmup: c.warmup as usize,
        seed: c.seed,
        thread_mode: c.threads,
        clock: CLOCK.to_string(),
    };
    let bench_input = BenchInput {
        cloud: &input.cloud,
        description: input.description.clone(),
    };
    Ok(bench_networks(&nets, &bench_input, &plan)?)
}

fn emit_reports(c: &Common, reports: &[ProfileReport], many: bool) -> Outcome<()> {
    let text = match c.format {
        Format::Json if many => serde_json::to_string_pretty(reports).map_err(Error::from)? + "\n",
        Format::Json => reports[0].to_json()? + "\n",
        Format::Csv => reports_to_csv(reports)?,
    };
    emit(c, &text)
}

fn emit_memory(c: &Common, tables: &[MemoryTable], many: bool) -> Outcome<()> {
    let text = match c.format {
        Format::Json if many => serde_json::to_string_pretty(tables).map_err(Error::from)? + "\n",
        Format::Json => serde_json::to_string_pretty(&tables[0]).map_err(Error::from)? + "\n",
        Format::Csv => memory_to_csv(tables)?,
    };
    emit(c, &text)
}

fn emit(c: &Common, text: &str) -> Outcome<()> {
    match &c.out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
