//! `ito` — the laboratory entry point: data generation, training, ablation
//! sweeps, evaluation, gradient checking, and step-time benchmarking.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ito_core::data::{generate_dataset, write_manifest, write_raw_dump};
use ito_core::error::{Error, Result};
use ito_core::eval;
use ito_core::model::ModelConfig;
use ito_core::trainer::{self, TrainConfig};
use ito_core::verify;

#[derive(Parser)]
#[command(name = "ito", version, about = "Dual-encoder contrastive training with multimodal multiple alignment and training-time fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset and write its manifest.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Output directory for manifest.txt (and data.bin with --dump).
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw binary dump.
        #[arg(long)]
        dump: bool,
    },
    /// Train a model, writing metrics, checkpoints, and reports.
    Train {
        /// Flat key=value config file; defaults apply for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single config keys, e.g. --set lambda=4 (repeatable;
        /// applied after the file).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate an exported dual-encoder checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Seed of the evaluation dataset to regenerate.
        #[arg(long)]
        data_seed: u64,
        #[arg(long)]
        n: usize,
        /// Where to write report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid over lambda or fusion blocks.
    Sweep {
        /// "lambda" or "blocks".
        #[arg(long)]
        param: String,
        /// Comma-separated values, e.g. 0,2,4,6,8.
        #[arg(long)]
        values: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Concurrent runs (capped by ITO_THREADS).
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Verify every gradient against central finite differences.
    Gradcheck,
    /// Measure per-step overhead of the fusion objective.
    Bench {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Embed a dataset with a dual-encoder checkpoint and export Y/Z/labels.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_seed: u64,
        #[arg(long)]
        n: usize,
        /// Output file in the checkpoint binary layout.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>, sets: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_key_values(&std::fs::read_to_string(p).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", p.display()))
        })?)?,
        None => TrainConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn thread_cap() -> usize {
    std::env::var("ITO_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(usize::MAX)
}

fn run_sweep(
    param: &str,
    values: &str,
    base: TrainConfig,
    out_dir: &PathBuf,
    parallel: usize,
) -> Result<()> {
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value {v:?}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut jobs = Vec::new();
    for &v in &values {
        let mut cfg = base.clone();
        let dir_name = match param {
            "lambda" => {
                cfg.lambda = v;
                if cfg.lambda == 0.0 {
                    // keep view grid; fusion is simply gated off
                }
                format!("lambda_{v}")
            }
            "blocks" => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::Config(format!("blocks must be a positive integer, got {v}")));
                }
                cfg.fusion_blocks = v as usize;
                format!("blocks_{}", v as usize)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown sweep parameter {other:?}; expected lambda or blocks"
                )))
            }
        };
        cfg.validate()?;
        jobs.push((dir_name, cfg));
    }

    let workers = parallel.clamp(1, thread_cap()).min(jobs.len());
    let jobs = std::sync::Mutex::new(jobs.into_iter().map(Some).collect::<Vec<_>>());
    let results: std::sync::Mutex<Vec<(String, trainer::TrainSummary)>> =
        std::sync::Mutex::new(Vec::new());
    let failure: std::sync::Mutex<Option<Error>> = std::sync::Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = {
                    let mut js = jobs.lock().unwrap();
                    match js.iter_mut().find_map(Option::take) {
                        Some(j) => j,
                        None => break,
                    }
                };
                let (name, cfg) = job;
                match trainer::train(&cfg, &out_dir.join(&name)) {
                    Ok(art) => results.lock().unwrap().push((name, art.summary)),
                    Err(e) => {
                        *failure.lock().unwrap() = Some(e);
                        break;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }

    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut table = String::from(
        "run\tzero_shot\tr1_i2t\tr1_t2i\tlinear_probe\tcentroid_gap\tmodality_probe\tknn_mix\n",
    );
    for (name, s) in &results {
        let r = &s.report;
        table.push_str(&format!(
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            r.zero_shot_acc,
            r.retrieval.i2t[0].1,
            r.retrieval.t2i[0].1,
            r.linear_probe_acc,
            r.geometry.centroid_gap,
            r.geometry.modality_probe_acc,
            r.geometry.knn_mix,
        ));
    }
    std::fs::write(out_dir.join("summary.txt"), &table)?;
    let json: Vec<serde_json::Value> = results
        .iter()
        .map(|(name, s)| {
            serde_json::json!({ "run": name, "report": s.report, "epoch_evals": s.epoch_evals })
        })
        .collect();
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&json).expect("summary serializes"),
    )?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, n, out, dump } => {
            let ds = generate_dataset(seed, n)?;
            std::fs::create_dir_all(&out)?;
            write_manifest(&ds, &out.join("manifest.txt"))?;
            if dump {
                write_raw_dump(&ds, 16, &out.join("data.bin"))?;
            }
            println!("wrote {} samples to {}", n, out.display());
        }
        Command::Train { config, sets, out_dir } => {
            let cfg = load_config(config.as_ref(), &sets)?;
            let art = trainer::train(&cfg, &out_dir)?;
            println!(
                "trained {} steps; final loss {:.4}; zero-shot {:.4}; artifacts in {}",
                art.summary.steps,
                art.summary.final_loss,
                art.summary.report.zero_shot_acc,
                out_dir.display()
            );
        }
        Command::Eval { ckpt, data_seed, n, out } => {
            if !ckpt.exists() {
                return Err(Error::Usage(format!("checkpoint not found: {}", ckpt.display())));
            }
            let ds = generate_dataset(data_seed, n)?;
            let model = eval::load_dual_encoder(&ckpt, ModelConfig::desk(ds.vocab.len()))?;
            let report = eval::evaluate(&model, &ds, data_seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("report.json");
            std::fs::write(
                &path,
                serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            println!(
                "zero-shot {:.4}, R@1 i2t {:.4}, report at {}",
                report.zero_shot_acc,
                report.retrieval.i2t[0].1,
                path.display()
            );
        }
        Command::Sweep { param, values, config, sets, out_dir, parallel } => {
            let base = load_config(config.as_ref(), &sets)?;
            std::fs::create_dir_all(&out_dir)?;
            run_sweep(&param, &values, base, &out_dir, parallel)?;
        }
        Command::Gradcheck => {
            let report = verify::run_full_suite()?;
            for c in &report.checks {
                println!(
                    "{:<22} max_rel_err {:>12.3e}  tol {:.0e}  {}",
                    c.name,
                    c.max_rel_err,
                    c.tolerance,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            println!(
                "worst {:.3e} over {} checks in {:.1}s",
                report.worst(),
                report.checks.len(),
                report.wall_seconds
            );
            if !report.all_passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: worst relative error {:.3e}",
                    report.worst()
                )));
            }
        }
        Command::Bench { steps, batch_size } => {
            let report = trainer::overhead_benchmark(steps, batch_size, 0x62656e6368)?;
            for arm in &report.arms {
                println!(
                    "{:<10} V_I={} V_T={} lambda={}  median step {:.1} ms",
                    arm.name, arm.v_i, arm.v_t, arm.lambda, arm.median_step_ms
                );
            }
            println!(
                "overhead: ito/clip = {:.2}x, sub2/clip = {:.2}x (reference full-scale figure: {:.1}x)",
                report.ito_over_clip, report.sub2_over_clip, report.reference_ratio
            );
        }
        Command::ExportEmbeddings { ckpt, data_seed, n, out } => {
            if !ckpt.exists() {
                return Err(Error::Usage(format!("checkpoint not found: {}", ckpt.display())));
            }
            let ds = generate_dataset(data_seed, n)?;
            let model = eval::load_dual_encoder(&ckpt, ModelConfig::desk(ds.vocab.len()))?;
            let (y, z, labels) = eval::embed_dataset(&model, &ds, 64)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            eval::export_embeddings(&y, &z, &labels, &out)?;
            println!("exported {} embedding pairs to {}", n, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
