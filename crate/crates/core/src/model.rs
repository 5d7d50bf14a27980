//! The SimTS network: multi-scale causal encoder, last-column predictor, and
//! the training objectives built from them.
//!
//! The encoder projects the raw `C × L` input to `D_p` channels with a
//! kernel-1 convolution followed by ReLU, runs `m = ⌊log₂ K⌋ + 1` parallel
//! causal convolutions with kernel sizes `1, 2, 4, …, 2^(m−1)`, and averages
//! them into a `C′ × L` representation. The predictor is a two-layer MLP that
//! maps the last history column `z_K` to `C′ × (T − K)` predicted future
//! latents.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::{Result, SimtsError};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, view};
use crate::tensor::{Graph, Tensor, Var};

/// Column-norm floor used by every cosine/InfoNCE normalisation.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Left zero padding of `k − 1`; output `t` only sees inputs `..=t`.
    #[default]
    Causal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub projection_dim: usize,
    pub latent_dim: usize,
    pub history_len: usize,
    pub padding: Padding,
}

impl EncoderConfig {
    /// Full-size defaults: `D_p = 64`, `C′ = 320`, `K = 201`.
    pub fn new(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            projection_dim: 64,
            latent_dim: 320,
            history_len: 201,
            padding: Padding::Causal,
        }
    }

    /// `⌊log₂ K⌋ + 1`.
    pub fn num_scales(&self) -> usize {
        (usize::BITS - self.history_len.leading_zeros()) as usize
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        (0..self.num_scales()).map(|i| 1usize << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.projection_dim == 0
            || self.latent_dim == 0
            || self.history_len == 0
        {
            return Err(SimtsError::InvalidArgument(format!(
                "encoder dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Training objective variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum LossVariant {
    /// Stop-gradient on the encoded future.
    #[default]
    SimTs,
    /// Gradients flow through both branches.
    NoStopGradient,
    /// Stop-gradient on the history summary instead of the future.
    RevStopGradient,
    /// Batch-negative InfoNCE over per-timestep scores.
    InfoNce,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::SimTs,
        LossVariant::NoStopGradient,
        LossVariant::RevStopGradient,
        LossVariant::InfoNce,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::SimTs => "simts",
            LossVariant::NoStopGradient => "no_stop_gradient",
            LossVariant::RevStopGradient => "rev_stop_gradient",
            LossVariant::InfoNce => "infonce",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = SimtsError;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                SimtsError::InvalidArgument(format!(
                    "unknown loss variant `{s}` (expected simts, no_stop_gradient, rev_stop_gradient or infonce)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `C_out × C_in × k`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    /// `out × in`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub projection: ConvParams<T>,
    /// Scale `i` has kernel size `2^i`.
    pub scales: Vec<ConvParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams<T> {
    pub hidden: LinearParams<T>,
    /// Output rows are `C′ · (T − K)`, reshaped row-major to `C′ × (T − K)`.
    pub output: LinearParams<T>,
}

fn xavier<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = xavier_bound(fan_in, fan_out);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-a..=a))).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

/// Glorot-uniform half-width `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn conv_init<T: Scalar>(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvParams<T> {
    ConvParams {
        weight: xavier(rng, &[c_out, c_in, k], c_in * k, c_out * k),
        bias: Tensor::zeros(&[c_out]),
    }
}

fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LinearParams<T> {
    LinearParams {
        weight: xavier(rng, &[out, inp], inp, out),
        bias: Tensor::zeros(&[out]),
    }
}

/// Encoder plus predictor, with the configuration needed to rebuild them.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTs<T> {
    config: EncoderConfig,
    future_len: usize,
    pub encoder: EncoderParams<T>,
    pub predictor: PredictorParams<T>,
}

/// Graph handles for a model's parameters.
pub struct BoundModel {
    projection: (Var, Var),
    scales: Vec<(Var, Var)>,
    hidden: (Var, Var),
    output: (Var, Var),
    latent_dim: usize,
    future_len: usize,
}

impl<T: Scalar> SimTs<T> {
    /// Glorot-uniform weights and zero biases, deterministic in `seed`.
    pub fn init(config: EncoderConfig, future_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if future_len == 0 {
            return Err(SimtsError::InvalidArgument("future length must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, dp, cl) = (config.in_channels, config.projection_dim, config.latent_dim);
        let projection = conv_init(&mut rng, dp, c, 1);
        let scales = config
            .kernel_sizes()
            .into_iter()
            .map(|k| conv_init(&mut rng, cl, dp, k))
            .collect();
        let hidden = linear_init(&mut rng, cl, cl);
        let output = linear_init(&mut rng, cl * future_len, cl);
        Ok(SimTs {
            config,
            future_len,
            encoder: EncoderParams { projection, scales },
            predictor: PredictorParams { hidden, output },
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `T − K`, the number of predicted future columns.
    pub fn future_len(&self) -> usize {
        self.future_len
    }

    /// Parameters in a fixed order with stable names.
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("encoder.projection.weight".to_string(), &self.encoder.projection.weight),
            ("encoder.projection.bias".to_string(), &self.encoder.projection.bias),
        ];
        for (i, s) in self.encoder.scales.iter().enumerate() {
            out.push((format!("encoder.scale{i}.weight"), &s.weight));
            out.push((format!("encoder.scale{i}.bias"), &s.bias));
        }
        out.push(("predictor.hidden.weight".into(), &self.predictor.hidden.weight));
        out.push(("predictor.hidden.bias".into(), &self.predictor.hidden.bias));
        out.push(("predictor.output.weight".into(), &self.predictor.output.weight));
        out.push(("predictor.output.bias".into(), &self.predictor.output.bias));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("encoder.projection.weight".to_string(), &mut self.encoder.projection.weight),
            ("encoder.projection.bias".to_string(), &mut self.encoder.projection.bias),
        ];
        for (i, s) in self.encoder.scales.iter_mut().enumerate() {
            out.push((format!("encoder.scale{i}.weight"), &mut s.weight));
            out.push((format!("encoder.scale{i}.bias"), &mut s.bias));
        }
        out.push(("predictor.hidden.weight".into(), &mut self.predictor.hidden.weight));
        out.push(("predictor.hidden.bias".into(), &mut self.predictor.hidden.bias));
        out.push(("predictor.output.weight".into(), &mut self.predictor.output.weight));
        out.push(("predictor.output.bias".into(), &mut self.predictor.output.bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds a model from named tensors, checking every shape against a
    /// freshly initialised reference.
    pub fn from_parameters(
        config: EncoderConfig,
        future_len: usize,
        mut named: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self> {
        let mut model = SimTs::init(config, future_len, 0)?;
        for (name, slot) in model.parameters_mut() {
            let t = named.remove(&name).ok_or_else(|| {
                SimtsError::InvalidArgument(format!("missing parameter `{name}`"))
            })?;
            if t.shape() != slot.shape() {
                return Err(SimtsError::shape(
                    "from_parameters",
                    format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(SimtsError::InvalidArgument(format!("unexpected parameter `{extra}`")));
        }
        Ok(model)
    }

    /// Registers all parameters on `g`. With `trainable = false` they are
    /// constants and receive no gradient.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundModel {
        let leaf = |name: String, t: &Tensor<T>| {
            if trainable {
                g.param(name, t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut params = self.parameters().into_iter().map(|(n, t)| leaf(n, t));
        let mut pair = || (params.next().unwrap(), params.next().unwrap());
        let projection = pair();
        let scales = (0..self.encoder.scales.len()).map(|_| pair()).collect();
        let hidden = pair();
        let output = pair();
        BoundModel {
            projection,
            scales,
            hidden,
            output,
            latent_dim: self.config.latent_dim,
            future_len: self.future_len,
        }
    }

    /// Builds handles from caller-created nodes, one per entry of
    /// [`SimTs::parameters`] in the same order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.parameters().len();
        if vars.len() != expected {
            return Err(SimtsError::InvalidArgument(format!(
                "expected {expected} parameter nodes, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().unwrap(), it.next().unwrap());
        let projection = pair();
        let scales = (0..self.encoder.scales.len()).map(|_| pair()).collect();
        let hidden = pair();
        let output = pair();
        Ok(BoundModel {
            projection,
            scales,
            hidden,
            output,
            latent_dim: self.config.latent_dim,
            future_len: self.future_len,
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            [c, l] if *c == self.config.in_channels => Ok(*l),
            s => Err(SimtsError::shape(
                "encode",
                format!(
                    "input has shape {s:?}, encoder expects {} channels",
                    self.config.in_channels
                ),
            )),
        }
    }

    /// Full `C′ × L` representation of a frozen model.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let g = Graph::new();
        let m = self.bind(&g, false);
        let xv = g.constant(x.clone());
        let z = encode(&g, &m, xv)?;
        Ok(g.value(z))
    }

    /// Last column `z_L` of [`SimTs::encode`], computed directly without a
    /// graph. This is the feature vector used for forecasting.
    pub fn encode_summary(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let len = self.check_input(x)?;
        let (c, dp, cl) = (
            self.config.in_channels,
            self.config.projection_dim,
            self.config.latent_dim,
        );
        let max_k = *self.config.kernel_sizes().last().unwrap_or(&1);
        // only the last max_k projected columns can reach the final output
        let span = max_k.min(len);
        let x_tail = kernels::causal_tail(x.data(), c, len, span);
        let mut proj = vec![T::zero(); dp * span];
        for (o, row) in proj.chunks_mut(span).enumerate() {
            row.fill(self.encoder.projection.bias.data()[o]);
        }
        kernels::matmul_into(
            &mut proj,
            view(self.encoder.projection.weight.data(), dp, c),
            view(&x_tail, c, span),
            true,
        );
        proj.iter_mut().for_each(|v| *v = v.max(T::zero()));

        let mut acc = vec![T::zero(); cl];
        for scale in &self.encoder.scales {
            let k = scale.weight.shape()[2];
            let tail = kernels::causal_tail(&proj, dp, span, k);
            let mut out = scale.bias.data().to_vec();
            kernels::matmul_into(
                &mut out,
                view(scale.weight.data(), cl, dp * k),
                view(&tail, dp * k, 1),
                true,
            );
            kernels::add_into(&mut acc, &out);
        }
        let inv = T::one() / T::of(self.encoder.scales.len() as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
        Ok(acc)
    }

    /// `Ẑ^f` for a given summary vector, frozen.
    pub fn predict_future(&self, z_k: &[T]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let m = self.bind(&g, false);
        let z = g.constant(Tensor::vector(z_k.to_vec()));
        let out = predict_future(&g, &m, z)?;
        Ok(g.value(out))
    }
}

/// `mean_i conv_i(relu(projection(x)))`, a `C′ × L` node.
pub fn encode<T: Scalar>(g: &Graph<T>, m: &BoundModel, x: Var) -> Result<Var> {
    let proj = g.relu(g.conv1d(x, m.projection.0, m.projection.1)?);
    let scales = m
        .scales
        .iter()
        .map(|&(w, b)| g.conv1d(proj, w, b))
        .collect::<Result<Vec<_>>>()?;
    g.mean_over(&scales)
}

/// Last column of [`encode`] without computing the others; a `C′` vector node.
pub fn encode_last<T: Scalar>(g: &Graph<T>, m: &BoundModel, x: Var) -> Result<Var> {
    let proj = g.relu(g.conv1d(x, m.projection.0, m.projection.1)?);
    let scales = m
        .scales
        .iter()
        .map(|&(w, b)| g.conv1d_last(proj, w, b))
        .collect::<Result<Vec<_>>>()?;
    g.mean_over(&scales)
}

/// Two-layer MLP on the summary vector, reshaped to `C′ × (T − K)`.
pub fn predict_future<T: Scalar>(g: &Graph<T>, m: &BoundModel, z_k: Var) -> Result<Var> {
    let h = g.relu(g.linear(z_k, m.hidden.0, m.hidden.1)?);
    let out = g.linear(h, m.output.0, m.output.1)?;
    g.reshape(out, &[m.latent_dim, m.future_len])
}

/// Negative mean cosine similarity between matching columns; in `[−1, 1]`.
pub fn cosine_loss<T: Scalar>(g: &Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps != ts || ps.len() != 2 {
        return Err(SimtsError::shape(
            "cosine_loss",
            format!("prediction {ps:?} vs target {ts:?}"),
        ));
    }
    let eps = T::of(NORM_EPS);
    let p = g.l2_normalize_columns(pred, eps)?;
    let t = g.l2_normalize_columns(target, eps)?;
    let total = g.sum(g.mul(p, t)?);
    Ok(g.scale(total, -T::one() / T::of(ps[1] as f64)))
}

fn check_sample<T: Scalar>(m: &BoundModel, sample: &WindowSample<T>) -> Result<()> {
    if sample.future.shape().get(1) != Some(&m.future_len) {
        return Err(SimtsError::shape(
            "simts_step_loss",
            format!(
                "future segment {:?} does not match predictor horizon {}",
                sample.future.shape(),
                m.future_len
            ),
        ));
    }
    Ok(())
}

/// Per-sample objective for the three cosine variants.
///
/// `InfoNce` needs the rest of the batch and is rejected here; use
/// [`batch_loss`].
pub fn simts_step_loss<T: Scalar>(
    g: &Graph<T>,
    m: &BoundModel,
    sample: &WindowSample<T>,
    variant: LossVariant,
) -> Result<Var> {
    step_loss_split(g, m, m, sample, variant)
}

/// [`simts_step_loss`] with the future segment encoded by `future`, which
/// may be a frozen copy of `history`'s parameters.
pub fn step_loss_split<T: Scalar>(
    g: &Graph<T>,
    history: &BoundModel,
    future: &BoundModel,
    sample: &WindowSample<T>,
    variant: LossVariant,
) -> Result<Var> {
    check_sample(history, sample)?;
    if variant == LossVariant::InfoNce {
        return Err(SimtsError::InvalidArgument(
            "infonce is a batch objective; use batch_loss".into(),
        ));
    }
    let xh = g.constant(sample.history.clone());
    let xf = g.constant(sample.future.clone());
    let mut z_k = encode_last(g, history, xh)?;
    if variant == LossVariant::RevStopGradient {
        z_k = g.detach(z_k);
    }
    let pred = predict_future(g, history, z_k)?;
    let mut z_f = encode(g, future, xf)?;
    if variant == LossVariant::SimTs {
        z_f = g.detach(z_f);
    }
    cosine_loss(g, pred, z_f)
}

/// InfoNCE with in-batch negatives: for sample `j` and future step `t`, the
/// positive is `z^f_{j,t}` and the candidates are `z^f_{i,t}` for all `i`.
/// Columns are unit-normalised, there is no temperature, and the encoded
/// futures are detached.
pub fn infonce_batch_loss<T: Scalar>(
    g: &Graph<T>,
    m: &BoundModel,
    batch: &[WindowSample<T>],
) -> Result<Var> {
    infonce_loss_split(g, m, m, batch)
}

pub fn infonce_loss_split<T: Scalar>(
    g: &Graph<T>,
    history: &BoundModel,
    future: &BoundModel,
    batch: &[WindowSample<T>],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(SimtsError::InvalidArgument("empty batch".into()));
    }
    let eps = T::of(NORM_EPS);
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for sample in batch {
        check_sample(history, sample)?;
        let xh = g.constant(sample.history.clone());
        let xf = g.constant(sample.future.clone());
        let pred = predict_future(g, history, encode_last(g, history, xh)?)?;
        preds.push(g.l2_normalize_columns(pred, eps)?);
        let z_f = g.l2_normalize_columns(encode(g, future, xf)?, eps)?;
        targets.push(g.detach(z_f));
    }
    let mut positives = Vec::with_capacity(batch.len());
    for (j, &p) in preds.iter().enumerate() {
        let scores = targets
            .iter()
            .map(|&t| g.sum_rows(g.mul(p, t)?))
            .collect::<Result<Vec<_>>>()?;
        let log_probs = g.log_softmax_columns(g.stack(&scores)?)?;
        positives.push(g.sum(g.select(log_probs, j)?));
    }
    let total = g.sum(g.stack(&positives)?);
    let count = batch.len() * history.future_len;
    Ok(g.scale(total, -T::one() / T::of(count as f64)))
}

/// Mean objective over a mini-batch.
pub fn batch_loss<T: Scalar>(
    g: &Graph<T>,
    m: &BoundModel,
    batch: &[WindowSample<T>],
    variant: LossVariant,
) -> Result<Var> {
    batch_loss_split(g, m, m, batch, variant)
}

/// [`batch_loss`] with separate parameter handles for the future branch.
pub fn batch_loss_split<T: Scalar>(
    g: &Graph<T>,
    history: &BoundModel,
    future: &BoundModel,
    batch: &[WindowSample<T>],
    variant: LossVariant,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(SimtsError::InvalidArgument("empty batch".into()));
    }
    if variant == LossVariant::InfoNce {
        return infonce_loss_split(g, history, future, batch);
    }
    let losses = batch
        .iter()
        .map(|s| step_loss_split(g, history, future, s, variant))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.mean(g.stack(&losses)?))
}
