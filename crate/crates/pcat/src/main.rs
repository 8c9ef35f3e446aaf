//! `pcat` command line: dataset generation, training, evaluation,
//! segmentation, tokenization dumps, and the scaling benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pcat::config::{self, KvReader};
use pcat::data::{
    gen_synthetic, load_cloud, load_dataset, save_cloud, save_dataset, CloudFormat, SyntheticKind,
};
use pcat::error::{Error, Result};
use pcat::float::Float;
use pcat::harness::{
    bench_lau_scaling, bench_scaling, evaluate, train, OptimizerKind, Schedule, TrainConfig,
};
use pcat::network::{Model, ModelConfig, Task};
use pcat::spatial::PointCloud;
use pcat::tokenizer::{tokenize_with_detail, DeltaParams};

#[derive(Parser)]
#[command(
    name = "pcat",
    version,
    about = "Hierarchical point-cloud attention: train, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct Common {
    /// Worker threads (0 = all hardware cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Numeric precision for model math
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory
    Gen {
        /// Dataset kind: cls3 (sphere/cube/torus) or seg2 (cube with pole)
        #[arg(long)]
        kind: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Number of samples
        #[arg(long, default_value_t = 300)]
        n: usize,
        /// Points per cloud
        #[arg(long, default_value_t = 1024)]
        points: usize,
        /// RNG seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory
    Train {
        /// Dataset directory (from `pcat gen` or compatible)
        #[arg(long)]
        data: PathBuf,
        /// Task: classification or segmentation
        #[arg(long)]
        task: String,
        /// key=value config file (flags override file values)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Seed for init and shuffling (overrides config)
        #[arg(long)]
        seed: Option<u64>,
        /// Epochs (overrides config)
        #[arg(long)]
        epochs: Option<usize>,
        /// Batch size (overrides config)
        #[arg(long)]
        batch_size: Option<usize>,
        /// Base learning rate (overrides config)
        #[arg(long)]
        lr: Option<f64>,
        /// Optimizer: adam or lamb (overrides config)
        #[arg(long)]
        optimizer: Option<String>,
        /// Schedule: cosine or constant (overrides config)
        #[arg(long)]
        schedule: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report file (default: metrics_report.txt next to the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Label one cloud file with a segmentation checkpoint
    Segment {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output cloud (text format with a label column)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Dump centroids, per-scale neighbor sets, and token features
    Tokenize {
        #[arg(long)]
        cloud: PathBuf,
        /// key=value config file (stage 0 settings are used)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Seed for centroid sampling and δ init
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Encoder forward latency vs point count, with log-log slope
    Bench {
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated raw point counts
        #[arg(long, default_value = "1024,2048,4096,8192")]
        points: String,
        /// Comma-separated token counts for a local-attention sweep
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered help/version output goes to stdout with code 0
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn effective_threads(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn read_config_map(path: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    match path {
        None => Ok(BTreeMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            config::parse_kv(&text, &p.display().to_string())
        }
    }
}

fn parse_count_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad count `{t}`")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Gen {
            kind,
            out,
            n,
            points,
            seed,
        } => {
            let kind: SyntheticKind = kind.parse()?;
            let ds = gen_synthetic::<f32>(kind, n, points, seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} samples ({} train / {} test) to {}",
                ds.len(),
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            data,
            task,
            config,
            out,
            seed,
            epochs,
            batch_size,
            lr,
            optimizer,
            schedule,
            common,
        } => match common.precision {
            Precision::F32 => run_train::<f32>(
                &data, &task, config.as_ref(), &out, seed, epochs, batch_size, lr,
                optimizer.as_deref(), schedule.as_deref(), common.threads,
            ),
            Precision::F64 => run_train::<f64>(
                &data, &task, config.as_ref(), &out, seed, epochs, batch_size, lr,
                optimizer.as_deref(), schedule.as_deref(), common.threads,
            ),
        },
        Cmd::Eval {
            data,
            ckpt,
            out,
            common,
        } => match common.precision {
            Precision::F32 => run_eval::<f32>(&data, &ckpt, out.as_ref(), common.threads),
            Precision::F64 => run_eval::<f64>(&data, &ckpt, out.as_ref(), common.threads),
        },
        Cmd::Segment {
            cloud,
            ckpt,
            out,
            common,
        } => match common.precision {
            Precision::F32 => run_segment::<f32>(&cloud, &ckpt, &out),
            Precision::F64 => run_segment::<f64>(&cloud, &ckpt, &out),
        },
        Cmd::Tokenize {
            cloud,
            config,
            out,
            seed,
            common,
        } => match common.precision {
            Precision::F32 => run_tokenize::<f32>(&cloud, config.as_ref(), &out, seed),
            Precision::F64 => run_tokenize::<f64>(&cloud, config.as_ref(), &out, seed),
        },
        Cmd::Bench {
            config,
            points,
            tokens,
            repeats,
            seed,
            common,
        } => match common.precision {
            Precision::F32 => {
                run_bench::<f32>(config.as_ref(), &points, tokens.as_deref(), repeats, seed)
            }
            Precision::F64 => {
                run_bench::<f64>(config.as_ref(), &points, tokens.as_deref(), repeats, seed)
            }
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn run_train<T: Float>(
    data: &Path,
    task: &str,
    config_path: Option<&PathBuf>,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    optimizer: Option<&str>,
    schedule: Option<&str>,
    threads: usize,
) -> Result<()> {
    let task: Task = task.parse()?;
    let dataset = load_dataset::<T>(data)?;
    let map = read_config_map(config_path)?;
    let path_str = config_path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());

    let mut model_cfg: ModelConfig<T> = config::model_from_map(&map, &path_str)?;
    model_cfg.task = task;
    if !map.contains_key("classes") {
        model_cfg.num_classes = dataset.num_classes;
    }
    if let Some(s) = seed {
        model_cfg.seed = s;
    }

    let r = KvReader::new(&map, &path_str);
    let mut tcfg: TrainConfig<T> = TrainConfig::new(
        epochs.map_or_else(|| r.usize("epochs", 200), Ok)?,
        batch_size.map_or_else(|| r.usize("batch_size", 16), Ok)?,
        T::of(lr.map_or_else(|| r.f64("base_lr", 1e-3), Ok)?),
    );
    tcfg.optimizer = match optimizer {
        Some(s) => s.parse()?,
        None => r.raw("optimizer").map_or(Ok(OptimizerKind::Lamb), str::parse)?,
    };
    tcfg.schedule = match schedule {
        Some(s) => s.parse()?,
        None => r.raw("schedule").map_or(Ok(Schedule::Cosine), str::parse)?,
    };
    tcfg.seed = seed.map_or_else(|| r.u64("seed", 0), Ok)?;
    let stop = r.f64("stop_at_train_acc", 0.0)?;
    tcfg.stop_at_train_acc = (stop > 0.0).then_some(stop);
    tcfg.threads = effective_threads(threads);
    tcfg.checkpoint = Some(out.to_path_buf());

    let (_, log) = train(&dataset, &model_cfg, &tcfg)?;
    let mut log_text = String::new();
    for rec in &log {
        let line = rec.to_kv_line();
        println!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    }
    let log_path = out.with_extension("log");
    std::fs::write(&log_path, log_text).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!("checkpoint={}", out.display());
    Ok(())
}

fn run_eval<T: Float>(
    data: &Path,
    ckpt: &Path,
    out: Option<&PathBuf>,
    threads: usize,
) -> Result<()> {
    let dataset = load_dataset::<T>(data)?;
    let model = Model::<T>::load(ckpt)?;
    let indices = if dataset.test.is_empty() {
        (0..dataset.len()).collect()
    } else {
        dataset.test.clone()
    };
    let report = evaluate(&model, &dataset, &indices, effective_threads(threads))?;
    let text = report.to_kv_lines();
    print!("{text}");
    let out_path = out.cloned().unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or_else(|| Path::new("."))
            .join("metrics_report.txt")
    });
    std::fs::write(&out_path, text).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    println!("report={}", out_path.display());
    Ok(())
}

fn run_segment<T: Float>(cloud_path: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let cloud = load_cloud::<T>(cloud_path, CloudFormat::from_path(cloud_path))?;
    let model = Model::<T>::load(ckpt)?;
    let probs = model.segment(&cloud)?;
    let labels: Vec<u32> = (0..probs.shape()[0])
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();
    let labeled = PointCloud::new(
        cloud.coords().to_vec(),
        cloud.feats().cloned(),
        Some(labels),
    )?;
    save_cloud(&labeled, out, CloudFormat::Text)?;
    println!("labeled cloud written to {}", out.display());
    Ok(())
}

fn run_tokenize<T: Float>(
    cloud_path: &Path,
    config_path: Option<&PathBuf>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let cloud = load_cloud::<T>(cloud_path, CloudFormat::from_path(cloud_path))?;
    let map = read_config_map(config_path)?;
    let path_str = config_path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let model_cfg: ModelConfig<T> = config::model_from_map(&map, &path_str)?;
    let mut scale = model_cfg.stages[0].scale.clone();
    scale.centroid_count = scale.centroid_count.min(cloud.len());

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let delta = DeltaParams::<T>::init(3 + cloud.feat_dim(), scale.out_dim_per_scale, &mut rng);
    let (tokens, detail, order) = tokenize_with_detail(&cloud, &scale, &delta, seed)?;

    let mut text = String::new();
    text.push_str(&format!(
        "# tokenize dump: {} points -> {} tokens, scales {:?}, radius {}\n",
        cloud.len(),
        tokens.len(),
        detail.ks,
        scale.radius
    ));
    text.push_str("# point indices refer to the canonical (sorted) order; original_index maps back\n");
    text.push_str("canonical_to_original=");
    text.push_str(&order.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    text.push('\n');
    for (c, &cid) in detail.centroid_ids.iter().enumerate() {
        let a = tokens.anchors[c];
        text.push_str(&format!(
            "centroid {c} point={cid} original={} xyz=({},{},{})\n",
            order[cid], a[0], a[1], a[2]
        ));
        for s in 0..detail.ks.len() {
            let ids = detail.scale_neighbors(s, c);
            text.push_str(&format!(
                "  scale {s} k={} neighbors={}\n",
                detail.ks[s],
                ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            ));
        }
        let row = tokens.feats.row(c);
        text.push_str("  token=");
        text.push_str(&row.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| Error::io(out.display().to_string(), e))?;
    println!("token dump written to {}", out.display());
    Ok(())
}

fn run_bench<T: Float>(
    config_path: Option<&PathBuf>,
    points: &str,
    tokens: Option<&str>,
    repeats: usize,
    seed: u64,
) -> Result<()> {
    let map = read_config_map(config_path)?;
    let path_str = config_path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    let model_cfg: ModelConfig<T> = config::model_from_map(&map, &path_str)?;

    let counts = parse_count_list(points)?;
    let report = bench_scaling(&model_cfg, &counts, repeats, seed)?;
    println!("# encoder forward vs point count (fixed token counts)");
    print!("{}", report.to_table());

    if let Some(tokens) = tokens {
        let token_counts = parse_count_list(tokens)?;
        let attn = model_cfg.stages[0].attn;
        let lau = bench_lau_scaling::<T>(&token_counts, &attn, repeats, seed)?;
        println!("# local attention vs token count (fixed K = {})", attn.k_neighbors);
        print!("{}", lau.to_table());
    }
    Ok(())
}
