//! SGD with momentum and L2 weight decay, and the mini-batch training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::{Result, SimtsError};
use crate::model::{batch_loss, LossVariant, SimTs};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variant: LossVariant,
    pub seed: u64,
    /// `T`, history plus future.
    pub window_len: usize,
    /// `K`.
    pub history_len: usize,
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 500,
            batch_size: 8,
            variant: LossVariant::SimTs,
            seed: 0,
            window_len: 402,
            history_len: 201,
            stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn future_len(&self) -> usize {
        self.window_len.saturating_sub(self.history_len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SimtsError::InvalidArgument(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be ≥ 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return bad("batch_size and stride must be ≥ 1".into());
        }
        if self.history_len == 0 || self.history_len >= self.window_len {
            return bad(format!(
                "need 0 < K < T, got K={} T={}",
                self.history_len, self.window_len
            ));
        }
        Ok(())
    }
}

/// Classic momentum SGD with the L2 term folded into the gradient:
/// `g′ = g + wd·θ`, `v ← μ·v + g′`, `θ ← θ − lr·v`. Velocity starts at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor<T>>) {
        self.velocity = velocity;
    }

    /// Updates every parameter in place. A parameter without an entry in
    /// `grads` is treated as having zero gradient (decay still applies).
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: Vec<(String, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(SimtsError::shape(
                        "sgd_step",
                        format!("gradient for `{name}` is {:?}, parameter is {:?}", g.shape(), p.shape()),
                    ));
                }
                if !g.is_finite() {
                    return Err(SimtsError::NonFiniteGradient(name.clone()));
                }
            }
        }
        let (lr, mu, wd) = (
            T::of(self.learning_rate),
            T::of(self.momentum),
            T::of(self.weight_decay),
        );
        for (name, p) in params {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads.get(&name).map(Tensor::data);
            for (i, (theta, vel)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]) + wd * *theta;
                *vel = mu * *vel + gi;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// Loss and named parameter gradients for one mini-batch.
pub fn batch_gradients<T: Scalar>(
    model: &SimTs<T>,
    batch: &[WindowSample<T>],
    variant: LossVariant,
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let g = Graph::new();
    let bound = model.bind(&g, true);
    let loss = batch_loss(&g, &bound, batch, variant)?;
    let grads = g.backward(loss)?;
    Ok((g.item(loss), grads.named()))
}

/// Resumable training state: model, optimiser velocity, epoch counter and
/// per-epoch mean losses.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: SimTs<T>,
    pub optimizer: Sgd<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: SimTs<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if model.config().history_len != config.history_len
            || model.future_len() != config.future_len()
        {
            return Err(SimtsError::InvalidArgument(format!(
                "model is built for K={} and T−K={}, training config has K={} and T−K={}",
                model.config().history_len,
                model.future_len(),
                config.history_len,
                config.future_len()
            )));
        }
        Ok(Trainer {
            optimizer: Sgd::from_config(&config),
            model,
            config,
            epoch: 0,
            loss_history: Vec::new(),
        })
    }

    /// Order in which samples are visited during `epoch`: a fresh
    /// permutation from stream `epoch` of the configured seed, so resuming
    /// at any epoch reproduces the uninterrupted order.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// One pass over `data` in shuffled mini-batches (last partial batch
    /// kept). Returns the sample-weighted mean batch loss.
    pub fn run_epoch(&mut self, data: &[WindowSample<T>]) -> Result<f64> {
        if data.is_empty() {
            return Err(SimtsError::InvalidArgument("no training samples".into()));
        }
        let order = self.epoch_order(self.epoch, data.len());
        let mut weighted = 0.0;
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for chunk in order.chunks(self.config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let (loss, grads) = batch_gradients(&self.model, &batch, self.config.variant)?;
            self.optimizer.step(self.model.parameters_mut(), &grads)?;
            weighted += loss.to_f64_lossy() * chunk.len() as f64;
        }
        let mean = weighted / data.len() as f64;
        self.epoch += 1;
        self.loss_history.push(mean);
        Ok(mean)
    }

    pub fn run(&mut self, data: &[WindowSample<T>], epochs: usize) -> Result<()> {
        for _ in 0..epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

/// Trains for `cfg.epochs` epochs and returns the model with its per-epoch loss.
pub fn train<T: Scalar>(
    data: &[WindowSample<T>],
    model: SimTs<T>,
    cfg: &TrainConfig,
) -> Result<(SimTs<T>, Vec<f64>)> {
    if data.is_empty() {
        return Err(SimtsError::InvalidArgument("no training samples".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.run(data, cfg.epochs)?;
    Ok((trainer.model, trainer.loss_history))
}

/// Mean over sliding windows of `width` consecutive entries.
pub fn smoothed(history: &[f64], width: usize) -> Vec<f64> {
    if width == 0 || history.len() < width {
        return Vec::new();
    }
    history
        .windows(width)
        .map(|w| w.iter().sum::<f64>() / width as f64)
        .collect()
}
