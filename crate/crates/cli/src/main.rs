//! Command-line driver: synthetic data generation, staged training,
//! evaluation, and the memory-attention benchmark.
//!
//! Exit codes: 0 success, 2 argument/config error, 3 precondition error,
//! 4 runtime numerical error.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segdistill_core::error::Error;
use segdistill_core::eval::{eval_prompted_miou, eval_vos, MemoryMode};
use segdistill_core::memory::bench_readout;
use segdistill_core::runner::run_stage;
use segdistill_core::schedule::StageConfig;
use segdistill_core::sim::{gen_dataset, load_dataset, save_dataset, GenConfig};
use segdistill_core::Result;

use manifest::RunManifest;

const CACHE_ENV: &str = "ESAM3_CACHE_DIR";

#[derive(Parser)]
#[command(name = "segdistill", version, about = "Desk-scale promptable-segmentation distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene/clip dataset directory.
    GenData {
        /// Generator config (JSON); defaults ship in-binary.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one distillation stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Stage config (JSON); defaults to the desk preset for the stage.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Previous-stage checkpoint (required for stages 2 and 3).
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Metric: "miou" (scenes, prompted) or "jf" (clips, propagation).
        #[arg(long)]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        /// Memory mode for jf: perceiver | dense | none.
        #[arg(long, default_value = "perceiver")]
        memory: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Evaluate the EMA weights instead of the raw ones.
        #[arg(long, default_value_t = false)]
        use_ema: bool,
    },
    /// Analytic and wall-clock memory-attention cost benchmark (CSV).
    BenchMemory {
        /// Comma-separated dense token counts, e.g. "1024,4096".
        #[arg(long, default_value = "4096")]
        tokens: String,
        #[arg(long, default_value_t = 128)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, default_value_t = 64)]
        dk: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a built-in stage or generator config as JSON.
    DumpConfig {
        /// 1, 2, 3 for a training stage, or "gen" for the data generator.
        #[arg(long)]
        stage: String,
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Precondition(_) | Error::Io { .. } => 3,
        Error::NonFinite { .. }
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::Record(_) => 4,
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
}

fn cache_root(data: &Path) -> PathBuf {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => data.join("teacher_cache"),
    }
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: u64) -> Result<Vec<String>> {
    let cfg: GenConfig = match config {
        Some(p) => read_json_config(p)?,
        None => GenConfig::default(),
    };
    cfg.validate()?;
    let ds = gen_dataset(&cfg, seed)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} scenes and {} clips to {}",
        ds.scenes.len(),
        ds.clips.len(),
        out.display()
    );
    Ok(vec![out.display().to_string()])
}

fn cmd_train(
    stage: u8,
    config: Option<&Path>,
    data_dir: &Path,
    from_checkpoint: Option<&Path>,
    out: &Path,
) -> Result<Vec<String>> {
    let cfg: StageConfig = match config {
        Some(p) => read_json_config(p)?,
        None => StageConfig::desk_preset(stage)?,
    };
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "--stage {stage} does not match config stage {}",
            cfg.stage
        )));
    }
    let data = load_dataset(data_dir)?;
    let cache = cache_root(data_dir);
    let summary = run_stage(&cfg, &data, from_checkpoint, out, Some(&cache))?;
    println!(
        "stage {stage} done: {} steps, loss {} -> {}, checkpoint {}",
        summary.steps,
        summary.first_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
        summary.last_loss.map_or("-".to_string(), |v| format!("{v:.4}")),
        summary.final_checkpoint.display()
    );
    Ok(vec![
        summary.final_checkpoint.display().to_string(),
        summary.metrics_path.display().to_string(),
    ])
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    metrics: &str,
    out: &Path,
    memory: &str,
    seed: u64,
    use_ema: bool,
) -> Result<Vec<String>> {
    let loaded = segdistill_core::checkpoint::load_checkpoint(checkpoint)?;
    let mut student = loaded.student;
    if use_ema {
        let ema = loaded
            .ema
            .ok_or_else(|| Error::Precondition("checkpoint has no EMA weights".to_string()))?;
        student.params = ema;
    }
    let data = load_dataset(data_dir)?;
    let report_json = match metrics {
        "miou" => {
            if data.scenes.is_empty() {
                return Err(Error::Precondition(
                    "miou metric needs scenes in the dataset".to_string(),
                ));
            }
            let report = eval_prompted_miou(&student, &data.scenes, seed)?;
            println!(
                "mIoU = {:.4} over {} scenes",
                report.aggregate,
                report.per_scene.len()
            );
            serde_json::to_string_pretty(&report)?
        }
        "jf" => {
            if data.clips.is_empty() {
                return Err(Error::Precondition(
                    "jf metric needs clips in the dataset".to_string(),
                ));
            }
            let mode = match memory {
                "perceiver" => MemoryMode::Perceiver,
                "dense" => MemoryMode::Dense,
                "none" => MemoryMode::NoMemory,
                other => {
                    return Err(Error::Config(format!(
                        "unknown memory mode {other} (expected perceiver|dense|none)"
                    )))
                }
            };
            let report = eval_vos(&student, &data.clips, mode)?;
            println!(
                "J = {:.4}, F = {:.4}, J&F = {:.4} over {} clips",
                report.j,
                report.f,
                report.jf,
                report.per_clip.len()
            );
            serde_json::to_string_pretty(&report)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown metric {other} (expected miou or jf)"
            )))
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(out, report_json).map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(vec![out.display().to_string()])
}

fn cmd_bench_memory(
    tokens: &str,
    k: usize,
    c: usize,
    dk: usize,
    repeats: usize,
    out: &Path,
) -> Result<Vec<String>> {
    let token_counts: Vec<usize> = tokens
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad token count {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if token_counts.is_empty() {
        return Err(Error::Config("no token counts given".to_string()));
    }
    let mut csv = String::from(
        "n_tokens,k,c,d_k,flops_dense,flops_compressed,wall_us_dense,wall_us_compressed\n",
    );
    for &n in &token_counts {
        let row = bench_readout(n, k, c, dk, repeats, 42)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.3},{:.3}\n",
            row.n_tokens,
            row.k,
            row.c,
            row.dk,
            row.flops_dense,
            row.flops_compressed,
            row.wall_us_dense,
            row.wall_us_compressed
        ));
        println!(
            "tokens={} k={} flop_ratio={:.2} wall dense/compressed = {:.1}us/{:.1}us",
            row.n_tokens,
            row.k,
            row.flops_dense / row.flops_compressed,
            row.wall_us_dense,
            row.wall_us_compressed
        );
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(out, csv).map_err(|e| Error::io(out.display().to_string(), e))?;
    Ok(vec![out.display().to_string()])
}

fn cmd_dump_config(stage: &str, preset: &str) -> Result<Vec<String>> {
    let json = match stage {
        "gen" => serde_json::to_string_pretty(&GenConfig::default())?,
        "1" | "2" | "3" => {
            let s: u8 = stage.parse().expect("matched digits");
            let cfg = match preset {
                "desk" => StageConfig::desk_preset(s)?,
                "paper" => StageConfig::paper_preset(s)?,
                other => return Err(Error::Config(format!("unknown preset {other}"))),
            };
            serde_json::to_string_pretty(&cfg)?
        }
        other => return Err(Error::Config(format!("unknown stage {other}"))),
    };
    println!("{json}");
    Ok(vec![])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, seed, config_path, out_path): (String, u64, Option<String>, Option<PathBuf>) =
        match &cli.cmd {
            Cmd::GenData { config, out, seed } => (
                "gen-data".into(),
                *seed,
                config.as_ref().map(|p| p.display().to_string()),
                Some(out.clone()),
            ),
            Cmd::Train {
                stage, config, out, ..
            } => (
                format!("train --stage {stage}"),
                0,
                config.as_ref().map(|p| p.display().to_string()),
                Some(out.clone()),
            ),
            Cmd::Eval { seed, out, .. } => ("eval".into(), *seed, None, Some(out.clone())),
            Cmd::BenchMemory { out, .. } => ("bench-memory".into(), 0, None, Some(out.clone())),
            Cmd::DumpConfig { .. } => ("dump-config".into(), 0, None, None),
        };
    let mut manifest = RunManifest::begin(&command, seed, config_path);
    if let Some(out) = &out_path {
        manifest.set_manifest_location(out);
    }
    let result = match &cli.cmd {
        Cmd::GenData { config, out, seed } => cmd_gen_data(config.as_deref(), out, *seed),
        Cmd::Train {
            stage,
            config,
            data,
            from_checkpoint,
            out,
        } => cmd_train(*stage, config.as_deref(), data, from_checkpoint.as_deref(), out),
        Cmd::Eval {
            checkpoint,
            data,
            metrics,
            out,
            memory,
            seed,
            use_ema,
        } => cmd_eval(checkpoint, data, metrics, out, memory, *seed, *use_ema),
        Cmd::BenchMemory {
            tokens,
            k,
            c,
            dk,
            repeats,
            out,
        } => cmd_bench_memory(tokens, *k, *c, *dk, *repeats, out),
        Cmd::DumpConfig { stage, preset } => cmd_dump_config(stage, preset),
    };
    match result {
        Ok(outputs) => {
            manifest.finish_ok(outputs);
            if let Err(e) = manifest.write() {
                eprintln!("warning: could not write run manifest: {e}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            manifest.finish_err(&e.to_string());
            if let Err(werr) = manifest.write() {
                eprintln!("warning: could not write run manifest: {werr}");
            }
            ExitCode::from(exit_code_for(&e))
        }
    }
}
