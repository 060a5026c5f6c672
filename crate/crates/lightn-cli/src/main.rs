//! Command-line harness: sampling, training, evaluation, cost analysis,
//! and benchmark sweeps over the synthetic dataset.
//!
//! Every run is reproducible from its effective configuration (written to
//! the output directory as `run_config.txt`) plus the seed; reports carry
//! no timestamps or machine state.

mod config;
mod reports;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lightn::cost::{pipeline_csv_header, pipeline_csv_row, pipeline_report, pointnet_cost, sampler_cost};
use lightn::data::{gen_synthetic, Dataset, ALL_CLASSES};
use lightn::error::Error;
use lightn::io::{load_pointcloud, save_pointcloud, CloudFormat};
use lightn::checkpoint::Checkpoint;
use lightn::model::{forward, SamplerParams};
use lightn::projection::ProjectionConfig;
use lightn::samplers::{fps, random_sample, voxel_sample_indices};
use lightn::task::{
    evaluate, pretrain_metrics_csv, pretrain_task, sampler_metrics_csv, soft_project_value,
    train_sampler, EvalMode, EvalSampler, TaskParams,
};

use config::RunConfig;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LIGHTN_OUT_DIR";

#[derive(Parser)]
#[command(name = "lightn", version, about = "Task-oriented point-cloud downsampling toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Overrides {
    /// Key=value configuration file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $LIGHTN_OUT_DIR or the working directory).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampled point count.
    #[arg(long)]
    m: Option<usize>,
    /// fps | random | voxel | lightn
    #[arg(long)]
    sampler: Option<String>,
    /// self_correlation | qkv_full | q_removed | kv_removed
    #[arg(long)]
    variant: Option<String>,
    /// Repulsion-loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Projection-loss weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Task-loss weight.
    #[arg(long)]
    delta: Option<f64>,
    /// Sampler training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Classifier pre-training epochs.
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    /// Point-file format: xyz | csv.
    #[arg(long)]
    format: Option<String>,
    /// Synthetic cloud size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Training clouds per class for the sampler stage.
    #[arg(long)]
    sampler_train_per_class: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated m values for bench sweeps.
    #[arg(long)]
    m_list: Option<String>,
    /// Input size for cost reports.
    #[arg(long)]
    flops_n: Option<usize>,
    /// Sampled size for cost reports.
    #[arg(long)]
    flops_m: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Downsample a point-cloud file with a chosen sampler.
    Sample {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        input: PathBuf,
        /// Sampler checkpoint, required when --sampler lightn.
        #[arg(long)]
        sampler_checkpoint: Option<PathBuf>,
    },
    /// Pre-train the classifier on the synthetic dataset.
    TrainTask {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the sampler against a frozen classifier checkpoint.
    TrainSampler {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        task_checkpoint: PathBuf,
    },
    /// Evaluate a sampler under a frozen classifier, soft and matched.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        task_checkpoint: PathBuf,
        #[arg(long)]
        sampler_checkpoint: Option<PathBuf>,
    },
    /// Analytic cost report for the sampler + task pipeline.
    Flops {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Full sweep: pre-train, then train and evaluate every sampler at each m.
    Bench {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn out_dir(cfg_output: &Option<PathBuf>) -> PathBuf {
    cfg_output
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
        }
    }
    std::fs::write(path, text)
        .map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

/// Train/test splits are derived from the run seed so that every command
/// sees the same data for the same seed.
fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), Error> {
    let train = gen_synthetic(&ALL_CLASSES, cfg.n, cfg.train_per_class, cfg.seed.wrapping_add(1))?;
    let test = gen_synthetic(&ALL_CLASSES, cfg.n, cfg.test_per_class, cfg.seed.wrapping_add(2))?;
    Ok((train, test))
}

fn load_task(path: &Path) -> Result<TaskParams, Error> {
    TaskParams::from_checkpoint(&Checkpoint::load(path)?)
}

fn cmd_sample(
    cfg: &RunConfig,
    input: &Path,
    sampler_checkpoint: Option<&Path>,
) -> Result<(), Error> {
    let format = CloudFormat::parse(&cfg.format)?;
    let cloud = load_pointcloud(input, CloudFormat::from_path(input))?;
    let dir = out_dir(&cfg.output);
    let m = cfg.m;

    let sampled = match cfg.sampler.as_str() {
        "fps" => cloud.select(&fps(&cloud, m, 0)?),
        "random" => cloud.select(&random_sample(&cloud, m, cfg.seed)?),
        "voxel" => cloud.select(&voxel_sample_indices(&cloud, m)?),
        "lightn" => {
            let path = sampler_checkpoint.ok_or_else(|| {
                Error::Config("--sampler lightn requires --sampler-checkpoint".into())
            })?;
            let (params, model_cfg) = SamplerParams::from_checkpoint(&Checkpoint::load(path)?)?;
            if model_cfg.m != m {
                return Err(Error::Config(format!(
                    "checkpoint generates {} points but --m is {m}",
                    model_cfg.m
                )));
            }
            let generated = forward(&cloud, &params, &model_cfg)?;
            soft_project_value(
                &generated,
                &cloud,
                &ProjectionConfig::default(),
                params.temperature.max(lightn::model::MIN_TEMPERATURE),
            )?
        }
        other => return Err(Error::Config(format!("unknown sampler: {other}"))),
    };

    let stem = format!("sampled_{}_m{}", cfg.sampler, m);
    let cloud_path = dir.join(format!("{stem}.{}", format.name()));
    if let Some(parent) = cloud_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Io { path: parent.display().to_string(), source: e })?;
    }
    save_pointcloud(&sampled, &cloud_path, format)?;
    write_text(
        &dir.join(format!("{stem}.metrics.json")),
        &reports::sample_metrics_json(cfg, &cloud, &sampled),
    )?;
    write_text(&dir.join("run_config.txt"), &cfg.to_key_values())?;
    println!("wrote {}", cloud_path.display());
    Ok(())
}

fn cmd_train_task(cfg: &RunConfig) -> Result<(), Error> {
    let dir = out_dir(&cfg.output);
    let (train, test) = datasets(cfg)?;
    let (theta, log) = pretrain_task(&train, &test, &cfg.train_config(cfg.pretrain_epochs))?;
    theta
        .to_checkpoint()
        .save(&ensure_dir(&dir)?.join("task_checkpoint.txt"))?;
    write_text(&dir.join("pretrain_metrics.csv"), &pretrain_metrics_csv(&log))?;
    write_text(&dir.join("run_config.txt"), &cfg.to_key_values())?;
    let last = log.last().expect("at least one epoch");
    println!(
        "task head trained: train accuracy {:.4}, test accuracy {:.4}",
        last.train_accuracy, last.test_accuracy
    );
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<&Path, Error> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    Ok(dir)
}

fn cmd_train_sampler(cfg: &RunConfig, task_checkpoint: &Path) -> Result<(), Error> {
    let dir = out_dir(&cfg.output);
    let theta = load_task(task_checkpoint)?;
    let (train, _) = datasets(cfg)?;
    let subset = train.subset_per_class(cfg.sampler_train_per_class);
    let (params, log) = train_sampler(
        &subset,
        &theta,
        &cfg.sampler_config()?,
        &cfg.train_config(cfg.epochs),
        &cfg.loss_config()?,
        &ProjectionConfig::default(),
    )?;
    params
        .to_checkpoint(&cfg.sampler_config()?)
        .save(&ensure_dir(&dir)?.join("sampler_checkpoint.txt"))?;
    write_text(&dir.join("sampler_metrics.csv"), &sampler_metrics_csv(&log))?;
    write_text(&dir.join("run_config.txt"), &cfg.to_key_values())?;
    let last = log.last().expect("at least one epoch");
    println!(
        "sampler trained: final loss {:.6}, temperature {:.6}",
        last.total, params.temperature
    );
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    task_checkpoint: &Path,
    sampler_checkpoint: Option<&Path>,
) -> Result<(), Error> {
    let theta = load_task(task_checkpoint)?;
    let (_, test) = datasets(cfg)?;
    let proj = ProjectionConfig::default();

    let loaded;
    let sampler = match cfg.sampler.as_str() {
        "fps" => EvalSampler::Fps,
        "random" => EvalSampler::Random { seed: cfg.seed },
        "voxel" => EvalSampler::Voxel,
        "lightn" => {
            let path = sampler_checkpoint.ok_or_else(|| {
                Error::Config("--sampler lightn requires --sampler-checkpoint".into())
            })?;
            loaded = SamplerParams::from_checkpoint(&Checkpoint::load(path)?)?;
            EvalSampler::Lightn { params: &loaded.0, cfg: &loaded.1 }
        }
        other => return Err(Error::Config(format!("unknown sampler: {other}"))),
    };
    let soft = evaluate(&test, &sampler, &theta, cfg.m, EvalMode::Soft, &proj)?;
    let matched = evaluate(&test, &sampler, &theta, cfg.m, EvalMode::Matched, &proj)?;
    let json = reports::eval_json(cfg, soft, matched);
    if let Some(out) = &cfg.output {
        write_text(&out.join("eval.json"), &json)?;
        write_text(&out.join("run_config.txt"), &cfg.to_key_values())?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_flops(cfg: &RunConfig) -> Result<(), Error> {
    let report = pipeline_report(
        cfg.flops_n as u64,
        cfg.flops_m as u64,
        &cfg.attention_config()?,
        &cfg.ffn_hidden_u64(),
    );
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &cfg.output {
        write_text(&out.join("flops.json"), &json)?;
        let csv = format!(
            "{}\n{}\n",
            pipeline_csv_header(),
            pipeline_csv_row(&cfg.variant, &report)
        );
        write_text(&out.join("flops.csv"), &csv)?;
        write_text(&out.join("run_config.txt"), &cfg.to_key_values())?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<(), Error> {
    let dir = out_dir(&cfg.output);
    let (train, test) = datasets(cfg)?;
    let (theta, _) = pretrain_task(&train, &test, &cfg.train_config(cfg.pretrain_epochs))?;
    let subset = train.subset_per_class(cfg.sampler_train_per_class);
    let proj = ProjectionConfig::default();

    let mut rows = Vec::new();
    for &m in &cfg.m_list {
        let mut mcfg = cfg.clone();
        mcfg.m = m;
        let sampler_cfg = mcfg.sampler_config()?;
        let (params, _) = train_sampler(
            &subset,
            &theta,
            &sampler_cfg,
            &mcfg.train_config(mcfg.epochs),
            &mcfg.loss_config()?,
            &proj,
        )?;
        let lightn_sampler = EvalSampler::Lightn { params: &params, cfg: &sampler_cfg };
        let task_at_m = pointnet_cost(m as u64);
        let net_cost = sampler_cost(cfg.n as u64, m as u64, &mcfg.attention_config()?, &mcfg.ffn_hidden_u64());
        let named: [(&str, EvalSampler); 4] = [
            ("lightn", lightn_sampler),
            ("fps", EvalSampler::Fps),
            ("random", EvalSampler::Random { seed: cfg.seed }),
            ("voxel", EvalSampler::Voxel),
        ];
        for (name, sampler) in named {
            let soft = evaluate(&test, &sampler, &theta, m, EvalMode::Soft, &proj)?;
            let matched = evaluate(&test, &sampler, &theta, m, EvalMode::Matched, &proj)?;
            // classic samplers carry no learned weights; their reported
            // pipeline cost is the task network at m
            let (flops, params_count) = if name == "lightn" {
                (net_cost.flops + task_at_m.flops, net_cost.params + task_at_m.params)
            } else {
                (task_at_m.flops, task_at_m.params)
            };
            rows.push(format!("{name},{m},{soft},{matched},{flops},{params_count}"));
        }
    }
    let mut csv = String::from("sampler,m,accuracy_soft,accuracy_matched,flops,params\n");
    for row in &rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_text(&ensure_dir(&dir)?.join("bench.csv"), &csv)?;
    write_text(&dir.join("run_config.txt"), &cfg.to_key_values())?;
    println!("wrote {}", dir.join("bench.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Sample { overrides, input, sampler_checkpoint } => {
            let cfg = RunConfig::resolve(overrides)?;
            cmd_sample(&cfg, input, sampler_checkpoint.as_deref())
        }
        Cmd::TrainTask { overrides } => cmd_train_task(&RunConfig::resolve(overrides)?),
        Cmd::TrainSampler { overrides, task_checkpoint } => {
            cmd_train_sampler(&RunConfig::resolve(overrides)?, task_checkpoint)
        }
        Cmd::Eval { overrides, task_checkpoint, sampler_checkpoint } => cmd_eval(
            &RunConfig::resolve(overrides)?,
            task_checkpoint,
            sampler_checkpoint.as_deref(),
        ),
        Cmd::Flops { overrides } => cmd_flops(&RunConfig::resolve(overrides)?),
        Cmd::Bench { overrides } => cmd_bench(&RunConfig::resolve(overrides)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", reports::error_json(&e));
            ExitCode::FAILURE
        }
    }
}
