//! Finite-difference checks for every differentiable graph op and for the
//! full training objectives on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::Result;
use crate::model::{batch_loss_split, cosine_loss, EncoderConfig, LossVariant, Padding, SimTs};
use crate::tensor::{grad_check, Graph, Tensor, Var};

/// Pass threshold for the maximum relative error of any case.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).expect("positive extents")
    }

    /// Entries with magnitude in `[0.1, 1)` so ReLU kinks are never probed.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.tensor(shape).map(|v| {
            let mag = 0.1 + 0.9 * v.abs();
            if v < 0.0 {
                -mag
            } else {
                mag
            }
        })
    }
}

/// Reduces a node of any shape to a scalar through fixed random weights, so
/// every output entry gets a distinct upstream gradient.
fn project(g: &Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    Ok(g.sum(g.mul(x, w)?))
}

type CaseFn = Box<dyn Fn(&Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    op: &'static str,
    f: CaseFn,
    inputs: Vec<Tensor<f64>>,
}

fn op_cases(gen: &mut Gen, inject_fault: bool) -> Vec<Case> {
    let mut cases = Vec::new();

    let (ci, co, l, k) = (gen.dim(1, 3), gen.dim(1, 3), gen.dim(3, 8), gen.dim(1, 4));
    let r = gen.tensor(&[co, l]);
    cases.push(Case {
        op: "conv1d",
        f: Box::new(move |g, v| project(g, g.conv1d(v[0], v[1], v[2])?, &r)),
        inputs: vec![gen.tensor(&[ci, l]), gen.tensor(&[co, ci, k]), gen.tensor(&[co])],
    });

    let (ci, co, l, k) = (gen.dim(1, 3), gen.dim(1, 3), gen.dim(3, 8), gen.dim(1, 8));
    let r = gen.tensor(&[co]);
    cases.push(Case {
        op: "conv1d_last",
        f: Box::new(move |g, v| project(g, g.conv1d_last(v[0], v[1], v[2])?, &r)),
        inputs: vec![gen.tensor(&[ci, l]), gen.tensor(&[co, ci, k]), gen.tensor(&[co])],
    });

    let (i, o) = (gen.dim(1, 5), gen.dim(1, 5));
    let r = gen.tensor(&[o]);
    cases.push(Case {
        op: "linear",
        f: Box::new(move |g, v| project(g, g.linear(v[0], v[1], v[2])?, &r)),
        inputs: vec![gen.tensor(&[i]), gen.tensor(&[o, i]), gen.tensor(&[o])],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "relu",
        f: Box::new(move |g, v| project(g, g.relu(v[0]), &r)),
        inputs: vec![gen.away_from_zero(&shape)],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let n = gen.dim(1, 4);
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "mean_over",
        f: Box::new(move |g, v| project(g, g.mean_over(v)?, &r)),
        inputs: (0..n).map(|_| gen.tensor(&shape)).collect(),
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "l2_normalize_columns",
        f: Box::new(move |g, v| project(g, g.l2_normalize_columns(v[0], 1e-8)?, &r)),
        inputs: vec![gen.away_from_zero(&shape)],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "add",
        f: Box::new(move |g, v| project(g, g.add(v[0], v[1])?, &r)),
        inputs: vec![gen.tensor(&shape), gen.tensor(&shape)],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let r = gen.tensor(&shape);
    let mul: CaseFn = if inject_fault {
        // drops the gradient with respect to the second factor
        Box::new(move |g, v| project(g, g.mul(v[0], g.detach(v[1]))?, &r))
    } else {
        Box::new(move |g, v| project(g, g.mul(v[0], v[1])?, &r))
    };
    cases.push(Case {
        op: "mul",
        f: mul,
        inputs: vec![gen.tensor(&shape), gen.tensor(&shape)],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let factor: f64 = gen.0.random_range(-2.0..2.0);
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "scale",
        f: Box::new(move |g, v| project(g, g.scale(v[0], factor), &r)),
        inputs: vec![gen.tensor(&shape)],
    });

    // sum and mean are checked on a squared input so the gradient is not constant
    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    cases.push(Case {
        op: "sum",
        f: Box::new(|g, v| Ok(g.sum(g.mul(v[0], v[0])?))),
        inputs: vec![gen.tensor(&shape)],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    cases.push(Case {
        op: "mean",
        f: Box::new(|g, v| Ok(g.mean(g.mul(v[0], v[0])?))),
        inputs: vec![gen.tensor(&shape)],
    });

    let (rows, cols) = (gen.dim(1, 4), gen.dim(1, 5));
    let r = gen.tensor(&[cols]);
    cases.push(Case {
        op: "sum_rows",
        f: Box::new(move |g, v| project(g, g.sum_rows(v[0])?, &r)),
        inputs: vec![gen.tensor(&[rows, cols])],
    });

    let (n, len) = (gen.dim(1, 4), gen.dim(1, 5));
    let r = gen.tensor(&[n, len]);
    cases.push(Case {
        op: "stack",
        f: Box::new(move |g, v| project(g, g.stack(v)?, &r)),
        inputs: (0..n).map(|_| gen.tensor(&[len])).collect(),
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    let r = gen.tensor(&shape);
    cases.push(Case {
        op: "log_softmax_columns",
        f: Box::new(move |g, v| project(g, g.log_softmax_columns(v[0])?, &r)),
        inputs: vec![gen.tensor(&shape)],
    });

    let (rows, cols) = (gen.dim(1, 4), gen.dim(1, 5));
    let row = gen.dim(0, rows - 1);
    let r = gen.tensor(&[cols]);
    cases.push(Case {
        op: "select",
        f: Box::new(move |g, v| project(g, g.select(v[0], row)?, &r)),
        inputs: vec![gen.tensor(&[rows, cols])],
    });

    let (rows, cols) = (gen.dim(1, 4), gen.dim(1, 5));
    let col = gen.dim(0, cols - 1);
    let r = gen.tensor(&[rows]);
    cases.push(Case {
        op: "column",
        f: Box::new(move |g, v| project(g, g.column(v[0], col)?, &r)),
        inputs: vec![gen.tensor(&[rows, cols])],
    });

    let (a, b) = (gen.dim(1, 4), gen.dim(1, 4));
    let r = gen.tensor(&[b, a]);
    cases.push(Case {
        op: "reshape",
        f: Box::new(move |g, v| project(g, g.reshape(v[0], &[b, a])?, &r)),
        inputs: vec![gen.tensor(&[a * b])],
    });

    let shape = [gen.dim(1, 4), gen.dim(1, 5)];
    cases.push(Case {
        op: "cosine_loss",
        f: Box::new(|g, v| cosine_loss(g, v[0], v[1])),
        inputs: vec![gen.away_from_zero(&shape), gen.away_from_zero(&shape)],
    });

    cases
}

/// The tiny model used for the full-objective checks: `C = 2`, `K = 8`,
/// `T = 16`, `C′ = 8`.
pub fn tiny_model(seed: u64) -> Result<SimTs<f64>> {
    let cfg = EncoderConfig {
        in_channels: 2,
        projection_dim: 4,
        latent_dim: 8,
        history_len: 8,
        padding: Padding::Causal,
    };
    SimTs::init(cfg, 8, seed)
}

fn tiny_batch(gen: &mut Gen, n: usize) -> Vec<WindowSample<f64>> {
    (0..n)
        .map(|i| WindowSample {
            history: gen.tensor(&[2, 8]),
            future: gen.tensor(&[2, 8]),
            origin: i,
        })
        .collect()
}

/// Full objectives with every parameter as a checked input. Where the
/// variant stops a gradient, the stopped branch is evaluated with a frozen
/// copy of the parameters, so the analytic gradient is the true
/// derivative of the function being differenced.
fn loss_cases(gen: &mut Gen, seed: u64) -> Result<Vec<Case>> {
    let mut model = tiny_model(seed)?;
    // zero biases can leave an encoded column exactly zero, where the
    // normalisation has no derivative
    for (name, p) in model.parameters_mut() {
        if name.ends_with(".bias") {
            *p = gen.tensor(p.shape());
        }
    }
    let params: Vec<Tensor<f64>> = model.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    let n_encoder = 2 + 2 * model.config().num_scales();
    let mut cases = Vec::new();

    let cosine_variants = [
        ("simts_loss", LossVariant::SimTs),
        ("no_stop_gradient_loss", LossVariant::NoStopGradient),
        ("rev_stop_gradient_loss", LossVariant::RevStopGradient),
        ("infonce_loss", LossVariant::InfoNce),
    ];
    for (op, variant) in cosine_variants {
        let batch = tiny_batch(gen, 3);
        let m = model.clone();
        let f: CaseFn = Box::new(move |g, v| {
            let live = m.bind_vars(v)?;
            match variant {
                LossVariant::SimTs | LossVariant::InfoNce => {
                    let frozen = m.bind(g, false);
                    batch_loss_split(g, &live, &frozen, &batch, variant)
                }
                LossVariant::NoStopGradient => batch_loss_split(g, &live, &live, &batch, variant),
                LossVariant::RevStopGradient => {
                    let frozen_encoder: Vec<Var> = m
                        .parameters()
                        .into_iter()
                        .zip(v)
                        .enumerate()
                        .map(|(i, ((_, t), &var))| if i < n_encoder { g.constant(t.clone()) } else { var })
                        .collect();
                    let history = m.bind_vars(&frozen_encoder)?;
                    batch_loss_split(g, &history, &live, &batch, variant)
                }
            }
        });
        cases.push(Case {
            op,
            f,
            inputs: params.clone(),
        });
    }
    Ok(cases)
}

/// Runs every case with inputs drawn from `seed`. With `inject_fault` the
/// `mul` case uses a deliberately wrong backward rule and must fail.
pub fn gradcheck_suite(seed: u64, inject_fault: bool) -> Result<Vec<CaseReport>> {
    let mut gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = op_cases(&mut gen, inject_fault);
    cases.extend(loss_cases(&mut gen, seed)?);
    cases
        .into_iter()
        .map(|case| {
            let report = grad_check(case.f, &case.inputs, EPS)?;
            Ok(CaseReport {
                op: case.op,
                max_rel_error: report.max_rel_error,
                entries_checked: report.entries_checked,
            })
        })
        .collect()
}
