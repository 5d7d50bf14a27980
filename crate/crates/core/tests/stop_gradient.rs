use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simts::data::WindowSample;
use simts::diagnostics::tiny_model;
use simts::train::batch_gradients;
use simts::{LossVariant, SimTs, Tensor};

fn random_batch(seed: u64, n: usize) -> Vec<WindowSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = || Tensor::matrix(2, 8, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    (0..n)
        .map(|i| WindowSample {
            history: t(),
            future: t(),
            origin: i,
        })
        .collect()
}

/// Predictor forward written out by hand: `W₂ relu(W₁ z + b₁) + b₂`,
/// reshaped row-major to `C′ × H`.
fn predict(model: &SimTs, z: &[f64]) -> Vec<Vec<f64>> {
    let affine = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
        let cols = x.len();
        w.data()
            .chunks(cols)
            .zip(b.data())
            .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
            .collect()
    };
    let p = &model.predictor;
    let h: Vec<f64> = affine(&p.hidden.weight, &p.hidden.bias, z)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let out = affine(&p.output.weight, &p.output.bias, &h);
    let horizon = model.future_len();
    out.chunks(horizon).map(<[f64]>::to_vec).collect()
}

/// Mean over samples of the negative mean column cosine, with the targets
/// supplied as fixed numbers.
fn frozen_loss(model: &SimTs, batch: &[WindowSample<f64>], targets: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (s, target) in batch.iter().zip(targets) {
        let pred = predict(model, &model.encode_summary(&s.history).unwrap());
        let (rows, cols) = target.dims2().unwrap();
        let mut cos = 0.0;
        for t in 0..cols {
            let (mut dot, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for r in 0..rows {
                let (a, b) = (pred[r][t], target.at2(r, t));
                dot += a * b;
                pp += a * a;
                tt += b * b;
            }
            cos += dot / (pp.sqrt().max(1e-8) * tt.sqrt().max(1e-8));
        }
        total += -cos / cols as f64;
    }
    total / batch.len() as f64
}

fn central_differences(model: &SimTs, batch: &[WindowSample<f64>]) -> BTreeMap<String, Vec<f64>> {
    let targets: Vec<Tensor> = batch.iter().map(|s| model.encode(&s.future).unwrap()).collect();
    let h = 1e-6;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let len = model.parameters().into_iter().find(|(n, _)| *n == name).unwrap().1.len();
        let mut grads = Vec::with_capacity(len);
        for j in 0..len {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                for (n, p) in m.parameters_mut() {
                    if n == name {
                        p.data_mut()[j] += delta;
                    }
                }
                frozen_loss(&m, batch, &targets)
            };
            grads.push((shifted(h) - shifted(-h)) / (2.0 * h));
        }
        out.insert(name, grads);
    }
    out
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn simts_gradient_equals_frozen_future_derivative() {
    for seed in 0..3 {
        let model = tiny_model(seed).unwrap();
        let batch = random_batch(100 + seed, 3);
        let (_, analytic) = batch_gradients(&model, &batch, LossVariant::SimTs).unwrap();
        let numeric = central_differences(&model, &batch);
        for (name, fd) in &numeric {
            let err = max_rel_diff(analytic[name].data(), fd);
            assert!(err < 1e-5, "{name}: relative error {err:e} (seed {seed})");
        }
    }
}

#[test]
fn future_path_reaches_encoder_only_without_stop_gradient() {
    let model = tiny_model(4).unwrap();
    let batch = random_batch(7, 3);
    let (_, sg) = batch_gradients(&model, &batch, LossVariant::SimTs).unwrap();
    let (_, full) = batch_gradients(&model, &batch, LossVariant::NoStopGradient).unwrap();
    let (_, rev) = batch_gradients(&model, &batch, LossVariant::RevStopGradient).unwrap();

    let mut encoder_gap: f64 = 0.0;
    for (name, g_full) in &full {
        let g_sg = &sg[name];
        let g_rev = rev.get(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g_full.len()]);
        if name.starts_with("predictor.") {
            // the predictor sits on the history path only
            assert!(max_rel_diff(g_full.data(), g_sg.data()) < 1e-12, "{name}");
            assert!(max_rel_diff(&g_rev, g_sg.data()) < 1e-12, "{name}");
        } else {
            encoder_gap = encoder_gap.max(max_rel_diff(g_full.data(), g_sg.data()));
            // total derivative = history-path part + future-path part
            let sum: Vec<f64> = g_sg.data().iter().zip(&g_rev).map(|(a, b)| a + b).collect();
            assert!(max_rel_diff(g_full.data(), &sum) < 1e-10, "{name}");
        }
    }
    assert!(encoder_gap > 1e-4, "future path contributed nothing: {encoder_gap:e}");
}
