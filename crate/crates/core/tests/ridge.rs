use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simts::eval::{fit_ridge, fit_ridge_alpha, RidgeProblem, DEFAULT_ALPHA_GRID};
use simts::Tensor;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Minimises `‖X W + 1 bᵀ − Y‖² + α‖W‖²` by gradient descent with step
/// `1 / L`, where `L` bounds the Hessian's largest eigenvalue.
fn gradient_descent(x: &Tensor, y: &Tensor, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.dims2().unwrap();
    let d = y.dims2().unwrap().1;
    // Frobenius norm of the augmented design bounds its spectral norm
    let fro: f64 = x.data().iter().map(|v| v * v).sum::<f64>() + n as f64;
    let step = 1.0 / (2.0 * (fro + alpha));
    let mut w = vec![0.0; p * d];
    let mut b = vec![0.0; d];
    for _ in 0..200_000 {
        let mut gw = vec![0.0; p * d];
        let mut gb = vec![0.0; d];
        for i in 0..n {
            let row = &x.data()[i * p..(i + 1) * p];
            for j in 0..d {
                let pred: f64 = (0..p).map(|k| row[k] * w[k * d + j]).sum::<f64>() + b[j];
                let r = pred - y.at2(i, j);
                for k in 0..p {
                    gw[k * d + j] += 2.0 * r * row[k];
                }
                gb[j] += 2.0 * r;
            }
        }
        let mut change: f64 = 0.0;
        for k in 0..p * d {
            let g = gw[k] + 2.0 * alpha * w[k];
            w[k] -= step * g;
            change = change.max((step * g).abs());
        }
        for j in 0..d {
            b[j] -= step * gb[j];
            change = change.max((step * gb[j]).abs());
        }
        if change < 1e-15 {
            break;
        }
    }
    (w, b)
}

#[test]
fn closed_form_matches_iterative_minimiser() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, 50, 8);
        let y = random(&mut rng, 50, 2);
        for alpha in [0.1, 1.0, 10.0] {
            let model = fit_ridge_alpha(&x, &y, alpha).unwrap();
            let (w, b) = gradient_descent(&x, &y, alpha);
            for k in 0..8 {
                for j in 0..2 {
                    let diff = (model.weights.at2(j, k) - w[k * 2 + j]).abs();
                    assert!(diff < 1e-6, "seed {seed} alpha {alpha}: weight ({j},{k}) off by {diff:e}");
                }
            }
            for j in 0..2 {
                assert!((model.intercept[j] - b[j]).abs() < 1e-6);
            }
            let problem = RidgeProblem::new(&x, &y).unwrap();
            assert!(problem.residual(&model) < 1e-8);
        }
    }
}

#[test]
fn recovers_planted_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, 200, 6);
    let w = random(&mut rng, 3, 6);
    let b = [0.5, -1.0, 2.0];
    let y_data: Vec<f64> = (0..200)
        .flat_map(|i| {
            let row = &x.data()[i * 6..(i + 1) * 6];
            (0..3)
                .map(|j| (0..6).map(|k| w.at2(j, k) * row[k]).sum::<f64>() + b[j])
                .collect::<Vec<_>>()
        })
        .collect();
    let y = Tensor::matrix(200, 3, y_data).unwrap();
    // the bias toward zero shrinks like alpha, so a tiny alpha recovers the map
    let model = fit_ridge_alpha(&x, &y, 1e-9).unwrap();
    for j in 0..3 {
        for k in 0..6 {
            assert!((model.weights.at2(j, k) - w.at2(j, k)).abs() < 1e-6);
        }
        assert!((model.intercept[j] - b[j]).abs() < 1e-6);
    }
    assert!(RidgeProblem::new(&x, &y).unwrap().residual(&model) < 1e-8);
}

#[test]
fn grid_selection_reports_every_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (tx, ty) = (random(&mut rng, 60, 5), random(&mut rng, 60, 2));
    let (vx, vy) = (random(&mut rng, 30, 5), random(&mut rng, 30, 2));
    let sel = fit_ridge(&tx, &ty, &vx, &vy, &DEFAULT_ALPHA_GRID).unwrap();
    assert_eq!(sel.scores.len(), DEFAULT_ALPHA_GRID.len());
    let best = sel.scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let chosen = sel.scores.iter().find(|s| s.0 == sel.model.alpha).unwrap().1;
    assert_eq!(chosen, best);
    assert!(sel.residual < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn residual_small_on_random_systems(
        seed in any::<u64>(),
        (n, p, d) in (10usize..60, 1usize..10, 1usize..4),
        alpha in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, n, p);
        let y = random(&mut rng, n, d);
        let problem = RidgeProblem::new(&x, &y).unwrap();
        let model = problem.solve(alpha).unwrap();
        prop_assert!(problem.residual(&model) < 1e-8);
    }
}
