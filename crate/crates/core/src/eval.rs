//! Frozen-encoder forecasting: feature extraction, ridge head, metrics and
//! the multi-horizon protocol.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::data::TimeSeries;
use crate::error::{Result, SimtsError};
use crate::model::SimTs;
use crate::scalar::Scalar;
use crate::tensor::kernels::{matmul_into, view};
use crate::tensor::Tensor;

/// Regularisation strengths tried during validation selection.
pub const DEFAULT_ALPHA_GRID: [f64; 13] = [
    0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
];

/// Horizons for hourly and daily data sets.
pub const HOURLY_HORIZONS: [usize; 5] = [24, 48, 168, 336, 720];
/// Horizons for the 15-minute ETTm sets.
pub const MINUTE_HORIZONS: [usize; 5] = [24, 48, 96, 288, 672];

/// Default forecast horizons for a named benchmark.
pub fn default_horizons(dataset: &str) -> Vec<usize> {
    let stem = dataset
        .rsplit(['/', '\\'])
        .next()
        .unwrap_or(dataset)
        .trim_end_matches(".csv")
        .to_ascii_lowercase();
    if stem.starts_with("ettm") {
        MINUTE_HORIZONS.to_vec()
    } else {
        HOURLY_HORIZONS.to_vec()
    }
}

/// Maps a `C × K` history window to a feature vector.
pub trait Featurizer<T> {
    fn dim(&self) -> usize;
    fn history_len(&self) -> usize;
    fn features(&self, history: &Tensor<T>) -> Result<Vec<T>>;
}

impl<T: Scalar> Featurizer<T> for SimTs<T> {
    fn dim(&self) -> usize {
        self.config().latent_dim
    }

    fn history_len(&self) -> usize {
        self.config().history_len
    }

    /// The last-column representation `z_K`.
    fn features(&self, history: &Tensor<T>) -> Result<Vec<T>> {
        self.encode_summary(history)
    }
}

/// Unencoded baseline: the per-feature mean of the history window.
#[derive(Clone, Copy, Debug)]
pub struct RawWindowMean {
    pub n_features: usize,
    pub history_len: usize,
}

impl<T: Scalar> Featurizer<T> for RawWindowMean {
    fn dim(&self) -> usize {
        self.n_features
    }

    fn history_len(&self) -> usize {
        self.history_len
    }

    fn features(&self, history: &Tensor<T>) -> Result<Vec<T>> {
        let (c, k) = history.dims2()?;
        let inv = T::one() / T::of(k as f64);
        Ok((0..c)
            .map(|i| history.data()[i * k..(i + 1) * k].iter().copied().sum::<T>() * inv)
            .collect())
    }
}

/// Features for every step `t ≥ K − 1` of a split, computed once and
/// shared across horizons.
pub struct EncodedSplit<'a, T> {
    split: &'a TimeSeries<T>,
    history_len: usize,
    /// Row `i` is the feature vector for the history ending at `t = K − 1 + i`.
    features: Vec<Vec<T>>,
    dim: usize,
}

impl<'a, T: Scalar> EncodedSplit<'a, T> {
    /// Encodes histories ending at `K − 1 ..= len − 1 − min_horizon`.
    pub fn new<F: Featurizer<T>>(featurizer: &F, split: &'a TimeSeries<T>, min_horizon: usize) -> Result<Self> {
        let k = featurizer.history_len();
        let required = k + min_horizon.max(1);
        if split.len() < required {
            return Err(SimtsError::TooShort {
                required,
                actual: split.len(),
            });
        }
        let last = split.len() - min_horizon.max(1);
        let features = (k..=last)
            .map(|end| featurizer.features(&split.window(end - k, end)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedSplit {
            split,
            history_len: k,
            features,
            dim: featurizer.dim(),
        })
    }

    /// `(features n × dim, targets n × (L·C))` for horizon `L`, with
    /// `n = len − K − L + 1` and targets flattened timestamp-major.
    pub fn design(&self, horizon: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let (k, len, c) = (self.history_len, self.split.len(), self.split.n_features());
        if horizon == 0 || len < k + horizon {
            return Err(SimtsError::TooShort {
                required: k + horizon.max(1),
                actual: len,
            });
        }
        let n = len - k - horizon + 1;
        if n > self.features.len() {
            return Err(SimtsError::InvalidArgument(format!(
                "horizon {horizon} is shorter than the one the split was encoded for"
            )));
        }
        let mut x = Vec::with_capacity(n * self.dim);
        let mut y = Vec::with_capacity(n * horizon * c);
        for i in 0..n {
            x.extend_from_slice(&self.features[i]);
            let t = k - 1 + i;
            for s in 1..=horizon {
                y.extend((0..c).map(|ch| self.split.value(ch, t + s)));
            }
        }
        Ok((
            Tensor::matrix(n, self.dim, x)?,
            Tensor::matrix(n, horizon * c, y)?,
        ))
    }
}

/// Features and targets for one horizon. See [`EncodedSplit::design`].
pub fn extract_features<T: Scalar, F: Featurizer<T>>(
    featurizer: &F,
    split: &TimeSeries<T>,
    horizon: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    EncodedSplit::new(featurizer, split, horizon)?.design(horizon)
}

/// Linear forecasting head `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel<T> {
    /// `d_out × d_in`.
    pub weights: Tensor<T>,
    pub intercept: Vec<T>,
    pub alpha: f64,
}

impl<T: Scalar> RidgeModel<T> {
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, p) = x.dims2()?;
        let (d, wp) = self.weights.dims2()?;
        if p != wp {
            return Err(SimtsError::shape(
                "ridge_predict",
                format!("features {:?} vs weights {:?}", x.shape(), self.weights.shape()),
            ));
        }
        let mut out: Vec<T> = (0..n).flat_map(|_| self.intercept.iter().copied()).collect();
        matmul_into(&mut out, view(x.data(), n, p), view(self.weights.data(), d, p).t(), true);
        Tensor::matrix(n, d, out)
    }
}

/// Column means and the centred copy of an `n × p` matrix.
fn center<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, p) = x.dims2()?;
    let mut mean = vec![T::zero(); p];
    for row in x.data().chunks(p) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut c = x.data().to_vec();
    for row in c.chunks_mut(p) {
        for (v, &m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok((mean, c))
}

/// Centred Gram matrix `XcᵀXc` and cross term `XcᵀYc`, shared across alphas.
pub struct RidgeProblem<T> {
    p: usize,
    d: usize,
    gram: Vec<T>,
    cross: Vec<T>,
    x_mean: Vec<T>,
    y_mean: Vec<T>,
}

impl<T: Scalar> RidgeProblem<T> {
    pub fn new(x: &Tensor<T>, y: &Tensor<T>) -> Result<Self> {
        let (n, p) = x.dims2()?;
        let (ny, d) = y.dims2()?;
        if n != ny {
            return Err(SimtsError::shape(
                "fit_ridge",
                format!("features {:?} vs targets {:?}", x.shape(), y.shape()),
            ));
        }
        let (x_mean, xc) = center(x)?;
        let (y_mean, yc) = center(y)?;
        let mut gram = vec![T::zero(); p * p];
        matmul_into(&mut gram, view(&xc, n, p).t(), view(&xc, n, p), false);
        let mut cross = vec![T::zero(); p * d];
        matmul_into(&mut cross, view(&xc, n, p).t(), view(&yc, n, d), false);
        Ok(RidgeProblem {
            p,
            d,
            gram,
            cross,
            x_mean,
            y_mean,
        })
    }

    /// Solves `(XcᵀXc + αI) W = XcᵀYc` by Cholesky factorisation.
    pub fn solve(&self, alpha: f64) -> Result<RidgeModel<T>> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SimtsError::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
        }
        let (p, d) = (self.p, self.d);
        let mut a = self.gram.clone();
        for i in 0..p {
            a[i * p + i] += T::of(alpha);
        }
        let l = cholesky(&a, p)?;
        let w = cholesky_solve(&l, p, &self.cross, d);
        // weights are stored d × p
        let mut weights = vec![T::zero(); d * p];
        for i in 0..p {
            for j in 0..d {
                weights[j * p + i] = w[i * d + j];
            }
        }
        let intercept = (0..d)
            .map(|j| {
                let dot: T = (0..p).map(|i| weights[j * p + i] * self.x_mean[i]).sum();
                self.y_mean[j] - dot
            })
            .collect();
        Ok(RidgeModel {
            weights: Tensor::matrix(d, p, weights)?,
            intercept,
            alpha,
        })
    }

    /// `‖(XcᵀXc + αI)W − XcᵀYc‖_F / ‖XcᵀYc‖_F` (absolute when the right-hand side is zero).
    pub fn residual(&self, model: &RidgeModel<T>) -> f64 {
        let (p, d) = (self.p, self.d);
        let w = model.weights.data();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p {
            for j in 0..d {
                let mut s = T::of(model.alpha) * w[j * p + i];
                for k in 0..p {
                    s += self.gram[i * p + k] * w[j * p + k];
                }
                let r = (s - self.cross[i * d + j]).to_f64_lossy();
                num += r * r;
                den += self.cross[i * d + j].to_f64_lossy().powi(2);
            }
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    }
}

/// Lower-triangular `L` with `A = L Lᵀ` for a symmetric positive-definite `p × p` matrix.
fn cholesky<T: Scalar>(a: &[T], p: usize) -> Result<Vec<T>> {
    let mut l = vec![T::zero(); p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > T::zero()) {
                    return Err(SimtsError::Numerical(format!(
                        "ridge system not positive definite at pivot {i}"
                    )));
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` for `B` of shape `p × d`.
fn cholesky_solve<T: Scalar>(l: &[T], p: usize, b: &[T], d: usize) -> Vec<T> {
    let mut x = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            let lik = l[i * p + k];
            if lik != T::zero() {
                let (head, tail) = x.split_at_mut(i * d);
                for (xi, &xk) in tail[..d].iter_mut().zip(&head[k * d..(k + 1) * d]) {
                    *xi -= lik * xk;
                }
            }
        }
        let inv = T::one() / l[i * p + i];
        x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= inv);
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            let lki = l[k * p + i];
            if lki != T::zero() {
                let (head, tail) = x.split_at_mut(k * d);
                for (xi, &xk) in head[i * d..(i + 1) * d].iter_mut().zip(&tail[..d]) {
                    *xi -= lki * xk;
                }
            }
        }
        let inv = T::one() / l[i * p + i];
        x[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= inv);
    }
    x
}

/// Ridge fit for a single `alpha`.
pub fn fit_ridge_alpha<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, alpha: f64) -> Result<RidgeModel<T>> {
    RidgeProblem::new(x, y)?.solve(alpha)
}

/// Outcome of validation-based alpha selection.
#[derive(Clone, Debug)]
pub struct RidgeSelection<T> {
    pub model: RidgeModel<T>,
    /// `(alpha, validation mse)` for every grid entry, in grid order.
    pub scores: Vec<(f64, f64)>,
    /// Normal-equation residual of the selected fit.
    pub residual: f64,
}

/// Fits one model per `alpha` on the training rows and keeps the one with
/// the smallest validation MSE; ties go to the larger alpha.
pub fn fit_ridge<T: Scalar>(
    train_x: &Tensor<T>,
    train_y: &Tensor<T>,
    val_x: &Tensor<T>,
    val_y: &Tensor<T>,
    alpha_grid: &[f64],
) -> Result<RidgeSelection<T>> {
    if alpha_grid.is_empty() {
        return Err(SimtsError::InvalidArgument("empty alpha grid".into()));
    }
    let problem = RidgeProblem::new(train_x, train_y)?;
    let mut best: Option<(RidgeModel<T>, f64)> = None;
    let mut scores = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let model = problem.solve(alpha)?;
        let mse = metrics(&model.predict(val_x)?, val_y, 0)?.mse;
        scores.push((alpha, mse));
        let better = match &best {
            None => true,
            Some((b, b_mse)) => mse < *b_mse || (mse == *b_mse && alpha > b.alpha),
        };
        if better {
            best = Some((model, mse));
        }
    }
    let (model, _) = best.expect("grid is non-empty");
    let residual = problem.residual(&model);
    Ok(RidgeSelection {
        model,
        scores,
        residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForecastMetrics {
    pub mse: f64,
    pub mae: f64,
    pub horizon: usize,
    pub n_windows: usize,
}

/// Mean squared and mean absolute error over all entries; `n_windows` is the row count.
pub fn metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, horizon: usize) -> Result<ForecastMetrics> {
    if pred.shape() != truth.shape() {
        return Err(SimtsError::shape(
            "metrics",
            format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let e = (p - t).to_f64_lossy();
        se += e * e;
        ae += e.abs();
    }
    Ok(ForecastMetrics {
        mse: se / n,
        mae: ae / n,
        horizon,
        n_windows: pred.shape()[0],
    })
}

/// Normalised train/validation/test splits of one dataset.
pub struct Splits<T> {
    pub train: TimeSeries<T>,
    pub val: TimeSeries<T>,
    pub test: TimeSeries<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonResult {
    pub metrics: ForecastMetrics,
    pub alpha: f64,
    pub residual: f64,
}

/// For each horizon: features/targets on all three splits, ridge with
/// validation-selected alpha, test metrics. Each split is encoded once.
pub fn run_protocol<T: Scalar, F: Featurizer<T>>(
    featurizer: &F,
    splits: &Splits<T>,
    horizons: &[usize],
    alpha_grid: &[f64],
) -> Result<Vec<HorizonResult>> {
    let min_h = *horizons
        .iter()
        .min()
        .ok_or_else(|| SimtsError::InvalidArgument("no horizons given".into()))?;
    let train = EncodedSplit::new(featurizer, &splits.train, min_h)?;
    let val = EncodedSplit::new(featurizer, &splits.val, min_h)?;
    let test = EncodedSplit::new(featurizer, &splits.test, min_h)?;
    horizons
        .iter()
        .map(|&h| {
            let (tx, ty) = train.design(h)?;
            let (vx, vy) = val.design(h)?;
            let (sx, sy) = test.design(h)?;
            let sel = fit_ridge(&tx, &ty, &vx, &vy, alpha_grid)?;
            let m = metrics(&sel.model.predict(&sx)?, &sy, h)?;
            Ok(HorizonResult {
                metrics: m,
                alpha: sel.model.alpha,
                residual: sel.residual,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Univariate,
    Multivariate,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Univariate => "univariate",
            Mode::Multivariate => "multivariate",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = SimtsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "univariate" | "S" => Ok(Mode::Univariate),
            "multivariate" | "M" => Ok(Mode::Multivariate),
            _ => Err(SimtsError::InvalidArgument(format!(
                "mode must be univariate or multivariate, got `{s}`"
            ))),
        }
    }
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub dataset: String,
    pub mode: Mode,
    pub variant: String,
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
    pub alpha: f64,
    pub seed: u64,
}

pub const RESULTS_HEADER: &str = "dataset,mode,variant,horizon,mse,mae,n_windows,alpha,seed";

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:?},{:?},{},{:?},{}",
            self.dataset,
            self.mode,
            self.variant,
            self.horizon,
            self.mse,
            self.mae,
            self.n_windows,
            self.alpha,
            self.seed
        )
    }
}

pub fn write_results_csv(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| SimtsError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| SimtsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_reference_values() {
        let t = Tensor::<f64>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = metrics(&t, &t, 1).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        let off = t.map(|v| v + 2.0);
        let m = metrics(&off, &t, 1).unwrap();
        assert_eq!((m.mse, m.mae, m.n_windows), (4.0, 2.0, 2));
        let p = Tensor::<f64>::matrix(1, 2, vec![1.0, -3.0]).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 2]);
        let m = metrics(&p, &z, 1).unwrap();
        assert_eq!((m.mse, m.mae), (5.0, 2.0));
        assert!(metrics(&p, &t, 1).is_err());
    }

    #[test]
    fn horizon_grids() {
        assert_eq!(default_horizons("ETTh1"), vec![24, 48, 168, 336, 720]);
        assert_eq!(default_horizons("data/ETTm1.csv"), vec![24, 48, 96, 288, 672]);
        assert_eq!(default_horizons("ETTm2"), vec![24, 48, 96, 288, 672]);
        assert_eq!(default_horizons("exchange_rate"), vec![24, 48, 168, 336, 720]);
    }

    #[test]
    fn single_row_shrinks_to_intercept() {
        let x = Tensor::<f64>::matrix(1, 2, vec![0.5, -1.0]).unwrap();
        let y = Tensor::<f64>::matrix(1, 1, vec![3.0]).unwrap();
        for alpha in [1e-3, 1.0, 1e6] {
            let m = fit_ridge_alpha(&x, &y, alpha).unwrap();
            // one centred row is all zeros: weights vanish, intercept is the target
            assert!(m.weights.max_abs() < 1e-12);
            assert!((m.predict(&x).unwrap().data()[0] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_window_mean() {
        let f = RawWindowMean {
            n_features: 2,
            history_len: 3,
        };
        let h = Tensor::<f64>::matrix(2, 3, vec![1.0, 2.0, 3.0, -3.0, 0.0, 0.0]).unwrap();
        assert_eq!(Featurizer::<f64>::features(&f, &h).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn tie_breaks_to_larger_alpha() {
        // targets constant: every alpha predicts the mean exactly
        let x = Tensor::<f64>::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = Tensor::<f64>::matrix(4, 1, vec![2.0; 4]).unwrap();
        let sel = fit_ridge(&x, &y, &x, &y, &[0.1, 10.0, 1.0]).unwrap();
        assert_eq!(sel.model.alpha, 10.0);
        assert!(fit_ridge(&x, &y, &x, &y, &[]).is_err());
    }
}
