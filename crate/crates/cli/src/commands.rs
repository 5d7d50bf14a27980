use std::fs;
use std::path::{Path, PathBuf};

use simts::checkpoint::{load_checkpoint, save_checkpoint};
use simts::data::{load_csv, read_header, synth_series, write_csv, CsvSchema, SplitSpec};
use simts::diagnostics::gradcheck_suite;
use simts::eval::{default_horizons, write_results_csv, RawWindowMean, ResultRow, DEFAULT_ALPHA_GRID};
use simts::experiment::{ablate, evaluate, prepare, to_rows, training_windows, Prepared, RunLabel};
use simts::{Checkpoint, SimTs, TimeSeries, Trainer};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;

pub const CHECKPOINT_FILE: &str = "checkpoint.stsc";
pub const LOSS_FILE: &str = "loss_history.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SYNTH_FILE: &str = "synth.csv";
pub const BASELINE_VARIANT: &str = "raw_window_mean";

/// Explicit setting first, then `SIMTS_OUT_DIR`, then `runs`.
fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg
        .out
        .clone()
        .or_else(|| std::env::var_os("SIMTS_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn dataset_path(cfg: &RunConfig) -> Result<&Path, CliError> {
    let path = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset given (use --dataset or the `dataset` key)".into()))?;
    if !path.is_file() {
        return Err(CliError::Io(format!("dataset {} not found", path.display())));
    }
    Ok(path)
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Loads the configured dataset. A `date` column is used as timestamps
/// unless another is named; univariate mode keeps `target`, or `OT` when
/// present, or else the last column.
fn load_dataset(cfg: &RunConfig) -> Result<TimeSeries, CliError> {
    let path = dataset_path(cfg)?;
    let header = read_header(path)?;
    let datetime_column = cfg
        .datetime_column
        .clone()
        .or_else(|| header.iter().find(|h| *h == "date").cloned());
    let target_column = match cfg.mode {
        simts::eval::Mode::Multivariate => None,
        simts::eval::Mode::Univariate => cfg.target.clone().or_else(|| {
            let values: Vec<&String> = header
                .iter()
                .filter(|h| Some(*h) != datetime_column.as_ref())
                .collect();
            values
                .iter()
                .find(|h| h.as_str() == "OT")
                .or(values.last())
                .map(|h| h.to_string())
        }),
    };
    let schema = CsvSchema {
        datetime_column,
        target_column,
    };
    Ok(load_csv(path, &schema)?)
}

fn horizons(cfg: &RunConfig, dataset: &Path) -> Vec<usize> {
    cfg.horizons
        .clone()
        .unwrap_or_else(|| default_horizons(&dataset.to_string_lossy()))
}

fn prepared(cfg: &RunConfig) -> Result<(Prepared<f64>, usize), CliError> {
    let ts = load_dataset(cfg)?;
    let channels = ts.n_features();
    Ok((prepare(&ts, &SplitSpec::default())?, channels))
}

pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, v) in history.iter().enumerate() {
        out.push_str(&format!("{},{v:?}\n", i + 1));
    }
    out
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let (prep, channels) = prepared(cfg)?;
    let windows = training_windows(&prep.splits.train, &cfg.train)?;
    let model = SimTs::init(cfg.encoder(channels), cfg.train.future_len(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    eprintln!(
        "training {} on {} windows, {} parameters",
        cfg.train.variant,
        windows.len(),
        trainer.model.num_parameters()
    );
    for _ in 0..cfg.train.epochs {
        let loss = trainer.run_epoch(&windows)?;
        eprintln!("epoch {}/{} loss {loss:.6}", trainer.epoch, cfg.train.epochs);
    }

    let dir = out_dir(cfg)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &Checkpoint::from_trainer(&trainer))?;
    write_file(&dir.join(LOSS_FILE), &loss_csv(&trainer.loss_history))?;
    if cfg.plot {
        plot::loss_curve(&dir.join("loss.svg"), &trainer.loss_history)?;
    }
    println!("checkpoint {}", ckpt_path.display());
    println!("loss history {}", dir.join(LOSS_FILE).display());
    Ok(())
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{} {} h={} mse={:.6} mae={:.6} alpha={}",
            r.variant, r.mode, r.horizon, r.mse, r.mae, r.alpha
        );
    }
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, baseline: bool) -> Result<(), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Io(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ckpt = load_checkpoint::<f64>(checkpoint)?;
    let path = dataset_path(cfg)?;
    let (prep, channels) = prepared(cfg)?;
    if channels != ckpt.encoder.in_channels {
        return Err(CliError::Incompatible(format!(
            "dataset has {channels} feature(s) in {} mode but the checkpoint expects {}",
            cfg.mode, ckpt.encoder.in_channels
        )));
    }
    let model = ckpt.model()?;
    let hs = horizons(cfg, path);
    let name = dataset_name(path);
    let results = evaluate(&model, &prep.splits, &hs, &DEFAULT_ALPHA_GRID)?;
    let variant = ckpt.train.variant.to_string();
    let label = RunLabel {
        dataset: &name,
        mode: cfg.mode,
        variant: &variant,
        seed: ckpt.train.seed,
    };
    let mut rows = to_rows(&label, &results);
    if baseline {
        let raw = RawWindowMean {
            n_features: channels,
            history_len: ckpt.encoder.history_len,
        };
        let results = evaluate(&raw, &prep.splits, &hs, &DEFAULT_ALPHA_GRID)?;
        rows.extend(to_rows(
            &RunLabel {
                variant: BASELINE_VARIANT,
                ..label
            },
            &results,
        ));
    }

    let dir = out_dir(cfg)?;
    write_results_csv(dir.join(RESULTS_FILE), &rows)?;
    if cfg.plot {
        plot::mse_bars(&dir.join("mse.svg"), &rows)?;
    }
    print_rows(&rows);
    println!("results {}", dir.join(RESULTS_FILE).display());
    Ok(())
}

pub fn ablation(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.variants.len() < 2 {
        return Err(CliError::Usage(format!(
            "ablate needs at least two variants, got {}",
            cfg.variants.len()
        )));
    }
    let path = dataset_path(cfg)?;
    let (prep, channels) = prepared(cfg)?;
    let hs = horizons(cfg, path);
    let (rows, summaries) = ablate(
        &prep,
        &dataset_name(path),
        cfg.mode,
        &cfg.variants,
        &cfg.encoder(channels),
        &cfg.train,
        &cfg.seeds(),
        &hs,
        &DEFAULT_ALPHA_GRID,
    )?;

    let dir = out_dir(cfg)?;
    write_results_csv(dir.join(ABLATION_FILE), &rows)?;
    if cfg.plot {
        plot::mse_bars(&dir.join("ablation.svg"), &rows)?;
    }
    for s in &summaries {
        println!(
            "variant={} mean_mse={:.6} mean_mae={:.6} runs={}",
            s.variant, s.mean_mse, s.mean_mae, s.runs
        );
    }
    println!("results {}", dir.join(ABLATION_FILE).display());
    Ok(())
}

pub fn gradcheck(seed: u64, inject_fault: bool) -> Result<(), CliError> {
    let reports = gradcheck_suite(seed, inject_fault)?;
    let mut failed = Vec::new();
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} max_rel_error={:.3e} entries={} {status}",
            r.op, r.max_rel_error, r.entries_checked
        );
        if !r.passed() {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let ts: TimeSeries = synth_series(&cfg.synth)?;
    let dir = out_dir(cfg)?;
    let path = dir.join(SYNTH_FILE);
    write_csv(&ts, &path)?;
    println!("series {}", path.display());
    Ok(())
}
