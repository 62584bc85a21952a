//! `tsrom`: generate datasets, train models, predict, evaluate and export
//! plot tables. Every command writes into one run directory and finishes
//! with a `run.json` manifest listing its inputs and outputs.

mod run;
mod spec;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tsrom::model::write_atomic;
use tsrom::optimize::Trainer;
use tsrom::rollout::{
    metrics, phase_cloud, phase_overlap, rollout_deterministic, rollout_probabilistic, PhaseGrid, DEFAULT_SAMPLES,
};
use tsrom::{Checkpoint, Dataset, Error, Model, Result, Rollout, RunConfig, TimeSeries, TrainLog, Variant};

use run::{default_root, Run};
use spec::{parse_times, Anchor};

#[derive(Parser)]
#[command(name = "tsrom", version, about = "Interpretable reduced-order models with complex linear latent dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training dataset described by a run config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: $TSROM_RUN_ROOT/<experiment>/data].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory [default: $TSROM_RUN_ROOT/<experiment>/train].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training seed, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log_every: Option<usize>,
        /// Continue from `checkpoint.json` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Roll a trained model forward from an anchor state.
    Predict {
        /// Checkpoint file (`model.json` of a training run).
        #[arg(long)]
        model: PathBuf,
        /// `series:I[:J]` (needs --dataset) or a file of state values.
        #[arg(long)]
        anchor: String,
        /// `start:stop:step` or a comma list of absolute times.
        #[arg(long)]
        times: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Time of the anchor state [default: its dataset time, or 0].
        #[arg(long)]
        anchor_time: Option<f64>,
        /// Latent draws per time for probabilistic models.
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory [default: $TSROM_RUN_ROOT/predict].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a prediction table with a reference.
    Evaluate {
        /// Rollout table written by `predict`.
        #[arg(long)]
        pred: PathBuf,
        /// Rollout table, or a dataset directory (see --series).
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Rollout)]
        mode: Mode,
        /// Series of a dataset reference.
        #[arg(long, default_value_t = 0)]
        series: usize,
        /// Histogram bins per axis in phase mode.
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Output directory [default: $TSROM_RUN_ROOT/evaluate].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write plot-ready tables for a training or prediction run.
    ExportPlots {
        run: PathBuf,
        /// Output directory [default: <run>/plots].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Relative L2 error per time and ±2σ coverage.
    Rollout,
    /// Overlap of (u, du/dt) phase clouds.
    Phase,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) | Error::Parameter(_) | Error::Dimension(_) | Error::Stationarity(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Divergence { .. } | Error::Numeric(_) => 4,
        Error::DigestMismatch { .. } => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out, seed } => generate(&config, out, seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            log_every,
            resume,
        } => train(&config, &dataset, out, seed, log_every, resume),
        Command::Predict {
            model,
            anchor,
            times,
            dataset,
            anchor_time,
            samples,
            seed,
            out,
        } => predict(&model, &anchor, &times, dataset.as_deref(), anchor_time, samples, seed, out),
        Command::Evaluate {
            pred,
            reference,
            mode,
            series,
            bins,
            out,
        } => evaluate(&pred, &reference, mode, series, bins, out),
        Command::ExportPlots { run, out } => export_plots(&run, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

fn generate(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if seed.is_some() {
        cfg.data_seed = seed;
    }
    let ds = cfg.generate()?;
    let mut run = Run::create(out.unwrap_or_else(|| default_root().join(cfg.experiment.name()).join("data")), "generate")?;
    run.digest(cfg.generator_digest());
    run.seed("data_seed", cfg.data_seed());
    run.input(config);
    ds.write(&run.dir)?;
    for f in ["manifest.json", "series.bin", "series.txt"] {
        run.produced(f);
    }
    println!(
        "wrote {} series of {} points ({}-dimensional) to {}",
        ds.series.len(),
        ds.series[0].len(),
        ds.manifest.dim,
        run.dir.display()
    );
    run.finish()
}

fn train(
    config: &Path,
    dataset: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    log_every: Option<usize>,
    resume: bool,
) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        // the dataset was generated with the config's seed
        cfg.data_seed = Some(cfg.data_seed());
        cfg.seed = s;
    }
    if let Some(n) = log_every {
        cfg.train.log_every = n;
    }
    cfg.validate()?;
    let ds = Dataset::load(dataset)?;
    cfg.check_dataset(&ds)?;
    let arch = cfg.arch(ds.manifest.dim)?;
    let digest = cfg.digest();

    let mut run = Run::create(out.unwrap_or_else(|| default_root().join(cfg.experiment.name()).join("train")), "train")?;
    run.digest(digest.clone());
    run.seed("seed", cfg.seed);
    run.seed("data_seed", cfg.data_seed());
    run.input(config);
    run.input(dataset);

    let ckpt_path = run.path("checkpoint.json");
    let log_path = run.path("trainlog.jsonl");
    let mut trainer = if resume && ckpt_path.exists() {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.config_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: ck.config_digest,
            });
        }
        let mut entries = TrainLog::from_jsonl(&read(&log_path)?)
            .map_err(|e| Error::Format {
                path: log_path.clone(),
                detail: e,
            })?
            .entries;
        entries.retain(|e| e.iter <= ck.iteration);
        eprintln!("resuming from iteration {}", ck.iteration);
        Trainer::resume(ck, &ds.series, cfg.train.clone(), cfg.seed, entries)?
    } else {
        Trainer::new(Model::init(&arch, cfg.variant, cfg.seed)?, &ds.series, cfg.train.clone(), cfg.seed, &digest)?
    };

    let outcome = trainer.run(|ck, log| {
        ck.save(&ckpt_path)?;
        write_atomic(&log_path, log.to_jsonl().as_bytes())
    });
    if let Err(e) = outcome {
        // keep the last good state for inspection or a later --resume
        trainer.checkpoint().save(&ckpt_path)?;
        write_atomic(&log_path, trainer.log.to_jsonl().as_bytes())?;
        return Err(e);
    }

    let final_ck = trainer.checkpoint();
    run.write("model.json", final_ck.to_json().as_bytes())?;
    run.write("trainlog.jsonl", trainer.log.to_jsonl().as_bytes())?;
    if ckpt_path.exists() {
        run.produced("checkpoint.json");
    }
    let lambda: Vec<[f64; 2]> = trainer.model.lambda().iter().map(|l| [l.re, l.im]).collect();
    let last = trainer.log.entries.last();
    let report = json!({
        "iteration": trainer.iteration,
        "lambda": lambda,
        "loss": last.map(|e| e.total),
        "parts": last.map(|e| e.parts.clone()),
    });
    run.write("lambda.json", &to_json(&report))?;
    for (k, l) in lambda.iter().enumerate() {
        println!("lambda[{k}] = {:+.6} {:+.6}i", l[0], l[1]);
    }
    run.finish()
}

#[allow(clippy::too_many_arguments)]
fn predict(
    model: &Path,
    anchor: &str,
    times: &str,
    dataset: Option<&Path>,
    anchor_time: Option<f64>,
    samples: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(model)?;
    let ds = dataset.map(Dataset::load).transpose()?;
    let (x, t0) = Anchor::parse(anchor)?.resolve(ds.as_ref(), anchor_time)?;
    if x.len() != ck.model.arch.input_dim {
        return Err(Error::Dimension(format!(
            "anchor has {} values, the model expects {}",
            x.len(),
            ck.model.arch.input_dim
        )));
    }
    let times = parse_times(times)?;
    let rollout = match ck.model.variant {
        Variant::Deterministic => rollout_deterministic(&ck.model, &x, t0, &times)?,
        Variant::Probabilistic => {
            rollout_probabilistic(&ck.model, &x, t0, &times, samples, &mut ChaCha8Rng::seed_from_u64(seed))?
        }
    };
    let mut run = Run::create(out.unwrap_or_else(|| default_root().join("predict")), "predict")?;
    run.digest(ck.config_digest.clone());
    run.seed("seed", seed);
    run.input(model);
    if let Some(d) = dataset {
        run.input(d);
    }
    run.write("rollout.csv", rollout.to_csv()?.as_bytes())?;
    println!("wrote {} predicted states to {}", rollout.times.len(), run.path("rollout.csv").display());
    run.finish()
}

fn load_reference(path: &Path, series: usize) -> Result<TimeSeries> {
    if path.is_dir() {
        let ds = Dataset::load(path)?;
        return ds
            .series
            .into_iter()
            .nth(series)
            .ok_or_else(|| Error::Parameter(format!("dataset has no series {series}")));
    }
    let r = Rollout::from_csv(&read(path)?)?;
    TimeSeries::new(r.times, r.states)
}

fn evaluate(pred: &Path, reference: &Path, mode: Mode, series: usize, bins: usize, out: Option<PathBuf>) -> Result<()> {
    let p = Rollout::from_csv(&read(pred)?)?;
    let r = load_reference(reference, series)?;
    let report = match mode {
        Mode::Rollout => serde_json::to_value(metrics(&p, &r)?).expect("report serializes"),
        Mode::Phase => {
            let a = phase_cloud(&p.times, &p.states)?;
            let b = phase_cloud(&r.times, &r.states)?;
            let grid = PhaseGrid::covering(&[&a, &b], (bins, bins))?;
            json!({
                "phase_axes": "u, du/dt by central differences, pooled over channels",
                "overlap": phase_overlap(&a, &b, &grid)?,
                "grid": grid,
                "pred_points": a.len(),
                "reference_points": b.len(),
            })
        }
    };
    let mut run = Run::create(out.unwrap_or_else(|| default_root().join("evaluate")), "evaluate")?;
    run.input(pred);
    run.input(reference);
    let bytes = to_json(&report);
    run.write("metrics.json", &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    run.finish()
}

fn csv_table(header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn export_plots(run_dir: &Path, out: Option<PathBuf>) -> Result<()> {
    let log_path = run_dir.join("trainlog.jsonl");
    let rollout_path = run_dir.join("rollout.csv");
    if !log_path.exists() && !rollout_path.exists() {
        return Err(Error::Parameter(format!(
            "{} holds neither trainlog.jsonl nor rollout.csv",
            run_dir.display()
        )));
    }
    let mut run = Run::create(out.unwrap_or_else(|| run_dir.join("plots")), "export-plots")?;

    if log_path.exists() {
        run.input(&log_path);
        let log = TrainLog::from_jsonl(&read(&log_path)?).map_err(|e| Error::Format {
            path: log_path.clone(),
            detail: e,
        })?;
        let parts: Vec<String> = log.entries.first().map(|e| e.parts.iter().map(|p| p.0.clone()).collect()).unwrap_or_default();
        let c = log.entries.first().map_or(0, |e| e.lambda.len());
        let mut header = vec!["iter".to_string(), "total".to_string()];
        header.extend(parts.iter().cloned());
        for k in 0..c {
            header.push(format!("lambda{k}_re"));
            header.push(format!("lambda{k}_im"));
        }
        let rows = log.entries.iter().map(|e| {
            let mut row = vec![e.iter as f64, e.total];
            row.extend(e.parts.iter().map(|p| p.1));
            row.extend(e.lambda.iter().flatten());
            row
        });
        run.write("lambda_convergence.csv", csv_table(&header, rows).as_bytes())?;
    }

    if rollout_path.exists() {
        run.input(&rollout_path);
        let r = Rollout::from_csv(&read(&rollout_path)?)?;
        run.write("trajectory.csv", r.to_csv()?.as_bytes())?;
        let f = r.dim();
        if let Some(var) = r.variance() {
            let mut header = vec!["t".to_string()];
            for i in 0..f {
                header.extend([format!("mean{i}"), format!("lower{i}"), format!("upper{i}")]);
            }
            let rows = r.times.iter().zip(&r.states).zip(var).map(|((t, m), v)| {
                let mut row = vec![*t];
                for (m, v) in m.iter().zip(v) {
                    let s = 2.0 * v.sqrt();
                    row.extend([*m, m - s, m + s]);
                }
                row
            });
            run.write("bands.csv", csv_table(&header, rows).as_bytes())?;
        }
        // phase clouds need uniformly spaced times; other tables are skipped
        if let Ok(cloud) = phase_cloud(&r.times, &r.states) {
            run.write("phase.csv", cloud.to_csv()?.as_bytes())?;
        }
    }
    println!("wrote plot tables to {}", run.dir.display());
    run.finish()
}
