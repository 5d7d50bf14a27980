use simts::checkpoint::{load_checkpoint, save_checkpoint};
use simts::data::{make_windows, synth_series, SynthConfig};
use simts::model::Padding;
use simts::train::train;
use simts::{Checkpoint, EncoderConfig, LossVariant, SimTs, SimTs32, TimeSeries, TrainConfig, Trainer};

fn encoder() -> EncoderConfig {
    EncoderConfig {
        in_channels: 2,
        projection_dim: 4,
        latent_dim: 8,
        history_len: 8,
        padding: Padding::Causal,
    }
}

fn config(variant: LossVariant) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        variant,
        seed: 11,
        window_len: 16,
        history_len: 8,
        stride: 3,
        ..TrainConfig::default()
    }
}

fn series() -> TimeSeries {
    synth_series(&SynthConfig {
        n_features: 2,
        length: 120,
        periods: vec![vec![6, 10], vec![9]],
        noise_std: 0.1,
        seed: 5,
    })
    .unwrap()
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let windows = make_windows(&series(), 16, 8, 3).unwrap();
    for variant in LossVariant::ALL {
        let model = SimTs::init(encoder(), 8, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..config(variant)
        };
        let (after, history) = train(&windows, model.clone(), &cfg).unwrap();
        assert_eq!(after, model, "{variant}");
        assert_eq!(history.len(), 3);
        // per-sample objectives give the same epoch loss up to summation
        // order; infonce depends on which samples share a batch
        if variant != LossVariant::InfoNce {
            assert!(history.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{variant}: {history:?}");
        }
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let windows = make_windows(&series(), 16, 8, 3).unwrap();
    let cfg = config(LossVariant::SimTs);
    let model = SimTs::init(encoder(), 8, 3).unwrap();

    let mut straight = Trainer::new(model.clone(), cfg.clone()).unwrap();
    straight.run(&windows, 4).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.stsc");
    let mut first = Trainer::new(model, cfg).unwrap();
    first.run(&windows, 2).unwrap();
    save_checkpoint(&path, &Checkpoint::from_trainer(&first)).unwrap();
    let mut resumed = load_checkpoint::<f64>(&path).unwrap().into_trainer().unwrap();
    resumed.run(&windows, 2).unwrap();

    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.loss_history, straight.loss_history);
    assert_eq!(
        Checkpoint::from_trainer(&resumed).to_bytes(),
        Checkpoint::from_trainer(&straight).to_bytes()
    );
}

#[test]
fn same_seed_same_result_different_seed_different_result() {
    let windows = make_windows(&series(), 16, 8, 3).unwrap();
    let run = |seed: u64| {
        let cfg = TrainConfig { seed, ..config(LossVariant::InfoNce) };
        let model = SimTs::init(encoder(), 8, seed).unwrap();
        train(&windows, model, &cfg).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1).1, run(2).1);
}

#[test]
fn single_precision_model_trains() {
    let ts: simts::data::TimeSeries<f32> = synth_series(&SynthConfig {
        n_features: 2,
        length: 120,
        periods: vec![vec![6, 10], vec![9]],
        noise_std: 0.0,
        seed: 5,
    })
    .unwrap();
    let windows = make_windows(&ts, 16, 8, 2).unwrap();
    let model = SimTs32::init(encoder(), 8, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 0.01,
        ..config(LossVariant::SimTs)
    };
    let (_, history) = train(&windows, model, &cfg).unwrap();
    assert!(history.iter().all(|v| v.is_finite()));
    assert!(history[9] < history[0], "{history:?}");
}
