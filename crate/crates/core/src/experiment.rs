//! End-to-end glue: prepare splits, train, evaluate, compare variants.

use crate::data::{fit_norm, make_windows, split, NormStats, SplitSpec, TimeSeries, WindowSample};
use crate::error::Result;
use crate::eval::{run_protocol, Featurizer, HorizonResult, Mode, ResultRow, Splits};
use crate::model::{EncoderConfig, LossVariant, SimTs};
use crate::scalar::Scalar;
use crate::train::{TrainConfig, Trainer};

/// Normalised chronological splits plus the training-split statistics.
pub struct Prepared<T> {
    pub splits: Splits<T>,
    pub stats: NormStats<T>,
}

/// Splits `ts`, fits z-score statistics on the training part only and
/// applies them to all three parts.
pub fn prepare<T: Scalar>(ts: &TimeSeries<T>, spec: &SplitSpec) -> Result<Prepared<T>> {
    let (train, val, test) = split(ts, spec)?;
    let stats = fit_norm(&train);
    Ok(Prepared {
        splits: Splits {
            train: stats.apply(&train),
            val: stats.apply(&val),
            test: stats.apply(&test),
        },
        stats,
    })
}

/// Training windows drawn from the training split only.
pub fn training_windows<T: Scalar>(train: &TimeSeries<T>, cfg: &TrainConfig) -> Result<Vec<WindowSample<T>>> {
    make_windows(train, cfg.window_len, cfg.history_len, cfg.stride)
}

/// Fresh model seeded from `cfg.seed`, trained for `cfg.epochs` epochs.
pub fn fit<T: Scalar>(
    train: &TimeSeries<T>,
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<Trainer<T>> {
    let windows = training_windows(train, cfg)?;
    let model = SimTs::init(encoder.clone(), cfg.future_len(), cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(&windows, cfg.epochs)?;
    Ok(trainer)
}

/// Everything needed to describe one evaluation in the results table.
#[derive(Clone, Debug)]
pub struct RunLabel<'a> {
    pub dataset: &'a str,
    pub mode: Mode,
    pub variant: &'a str,
    pub seed: u64,
}

pub fn to_rows(label: &RunLabel<'_>, results: &[HorizonResult]) -> Vec<ResultRow> {
    results
        .iter()
        .map(|r| ResultRow {
            dataset: label.dataset.to_string(),
            mode: label.mode,
            variant: label.variant.to_string(),
            horizon: r.metrics.horizon,
            mse: r.metrics.mse,
            mae: r.metrics.mae,
            n_windows: r.metrics.n_windows,
            alpha: r.alpha,
            seed: label.seed,
        })
        .collect()
}

pub fn evaluate<T: Scalar, F: Featurizer<T>>(
    featurizer: &F,
    splits: &Splits<T>,
    horizons: &[usize],
    alpha_grid: &[f64],
) -> Result<Vec<HorizonResult>> {
    run_protocol(featurizer, splits, horizons, alpha_grid)
}

/// Average test MSE per variant, in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: LossVariant,
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub runs: usize,
}

/// Trains and evaluates each variant under every seed with otherwise
/// identical settings.
pub fn ablate<T: Scalar>(
    prepared: &Prepared<T>,
    label_dataset: &str,
    mode: Mode,
    variants: &[LossVariant],
    encoder: &EncoderConfig,
    base: &TrainConfig,
    seeds: &[u64],
    horizons: &[usize],
    alpha_grid: &[f64],
) -> Result<(Vec<ResultRow>, Vec<VariantSummary>)> {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &variant in variants {
        let (mut mse, mut mae, mut n) = (0.0, 0.0, 0usize);
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let trainer = fit(&prepared.splits.train, encoder, &cfg)?;
            let results = evaluate(&trainer.model, &prepared.splits, horizons, alpha_grid)?;
            for r in &results {
                mse += r.metrics.mse;
                mae += r.metrics.mae;
                n += 1;
            }
            let label = RunLabel {
                dataset: label_dataset,
                mode,
                variant: variant.as_str(),
                seed,
            };
            rows.extend(to_rows(&label, &results));
        }
        summaries.push(VariantSummary {
            variant,
            mean_mse: mse / n as f64,
            mean_mae: mae / n as f64,
            runs: seeds.len(),
        });
    }
    Ok((rows, summaries))
}
