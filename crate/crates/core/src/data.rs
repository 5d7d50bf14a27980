//! Loading, splitting, normalising and windowing multivariate series.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SimtsError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `C × T_total` multivariate series stored feature-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries<T> {
    values: Vec<T>,
    n_features: usize,
    feature_names: Vec<String>,
    timestamps: Option<Vec<String>>,
}

impl<T: Scalar> TimeSeries<T> {
    /// `values[c]` is the full trajectory of feature `c`.
    pub fn from_features(
        feature_names: Vec<String>,
        values: Vec<Vec<T>>,
        timestamps: Option<Vec<String>>,
    ) -> Result<Self> {
        let n_features = values.len();
        if n_features == 0 || n_features != feature_names.len() {
            return Err(SimtsError::InvalidArgument(format!(
                "need ≥1 feature with matching names, got {} rows and {} names",
                n_features,
                feature_names.len()
            )));
        }
        let len = values[0].len();
        if len == 0 || values.iter().any(|v| v.len() != len) {
            return Err(SimtsError::InvalidArgument(
                "features must be non-empty and equally long".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SimtsError::InvalidArgument("series contains non-finite values".into()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != len {
                return Err(SimtsError::InvalidArgument(format!(
                    "{} timestamps for {len} steps",
                    ts.len()
                )));
            }
        }
        Ok(TimeSeries {
            values: values.into_iter().flatten().collect(),
            n_features,
            feature_names,
            timestamps,
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_features
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn feature(&self, c: usize) -> &[T] {
        let len = self.len();
        &self.values[c * len..(c + 1) * len]
    }

    pub fn value(&self, c: usize, t: usize) -> T {
        self.values[c * self.len() + t]
    }

    /// Copies steps `start..end` of every feature into a `C × (end − start)` tensor.
    pub fn window(&self, start: usize, end: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.n_features * (end - start));
        for c in 0..self.n_features {
            data.extend_from_slice(&self.feature(c)[start..end]);
        }
        Tensor::new(&[self.n_features, end - start], data).expect("window bounds checked by caller")
    }

    /// Contiguous time slice `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeries<T> {
        let values = (0..self.n_features)
            .flat_map(|c| self.feature(c)[start..end].iter().copied())
            .collect();
        TimeSeries {
            values,
            n_features: self.n_features,
            feature_names: self.feature_names.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
        }
    }

    /// Keeps only the named feature.
    pub fn select_feature(&self, name: &str) -> Option<TimeSeries<T>> {
        let c = self.feature_names.iter().position(|n| n == name)?;
        Some(TimeSeries {
            values: self.feature(c).to_vec(),
            n_features: 1,
            feature_names: vec![name.to_string()],
            timestamps: self.timestamps.clone(),
        })
    }

    /// Appends `other` in time. Feature sets must agree.
    pub fn concat(&self, other: &TimeSeries<T>) -> Result<TimeSeries<T>> {
        if self.feature_names != other.feature_names {
            return Err(SimtsError::InvalidArgument("concat of differing feature sets".into()));
        }
        let features = (0..self.n_features)
            .map(|c| {
                let mut v = self.feature(c).to_vec();
                v.extend_from_slice(other.feature(c));
                v
            })
            .collect();
        let timestamps = match (&self.timestamps, &other.timestamps) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).cloned().collect()),
            _ => None,
        };
        TimeSeries::from_features(self.feature_names.clone(), features, timestamps)
    }
}

/// Column roles when reading a CSV.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CsvSchema {
    /// Excluded from the values and kept as timestamps.
    pub datetime_column: Option<String>,
    /// Univariate mode: keep only this column.
    pub target_column: Option<String>,
}

/// Column names of a CSV file, trimmed.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SimtsError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| SimtsError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(header.iter().map(|h| h.trim().to_string()).collect())
}

/// Reads a header-row CSV; every non-datetime column becomes a feature in header order.
///
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeries<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SimtsError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let csv_err = |e: csv::Error| SimtsError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SimtsError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let date_idx = schema.datetime_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = match schema.target_column.as_deref() {
        Some(target) => vec![find(target)?],
        None => (0..header.len()).filter(|&i| Some(i) != date_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(SimtsError::Csv {
            path: path.to_path_buf(),
            message: "no feature columns".into(),
        });
    }

    let mut features: Vec<Vec<T>> = vec![Vec::new(); feature_idx.len()];
    let mut stamps = date_idx.map(|_| Vec::new());
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let line = r + 2;
        for (slot, &col) in features.iter_mut().zip(&feature_idx) {
            let cell = record.get(col).unwrap_or("").trim();
            let parsed = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            let value = parsed.ok_or_else(|| SimtsError::BadCell {
                path: path.to_path_buf(),
                row: line,
                column: header[col].clone(),
                value: cell.to_string(),
            })?;
            slot.push(T::of(value));
        }
        if let (Some(stamps), Some(d)) = (stamps.as_mut(), date_idx) {
            stamps.push(record.get(d).unwrap_or("").to_string());
        }
    }
    if features[0].is_empty() {
        return Err(SimtsError::Csv {
            path: path.to_path_buf(),
            message: "no data rows".into(),
        });
    }
    let names = feature_idx.iter().map(|&i| header[i].clone()).collect();
    TimeSeries::from_features(names, features, stamps)
}

/// Writes a series in the format [`load_csv`] reads: optional `date` column
/// first, then one column per feature. Values use the shortest exact decimal form.
pub fn write_csv<T: Scalar>(ts: &TimeSeries<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let mut header: Vec<&str> = Vec::new();
    if ts.timestamps.is_some() {
        header.push("date");
    }
    header.extend(ts.feature_names.iter().map(String::as_str));
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..ts.len() {
        let mut cells: Vec<String> = Vec::with_capacity(ts.n_features + 1);
        if let Some(stamps) = &ts.timestamps {
            cells.push(stamps[t].clone());
        }
        cells.extend((0..ts.n_features).map(|c| format!("{}", ts.value(c, t).to_f64_lossy())));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut file = File::create(path).map_err(|e| SimtsError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| SimtsError::io(path, e))
}

/// Chronological train/validation/test proportions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_ratio: 0.6,
            val_ratio: 0.2,
            test_ratio: 0.2,
        }
    }
}

impl SplitSpec {
    /// `(train, val, test)` lengths: floors for the first two, remainder to test.
    pub fn lengths(&self, total: usize) -> Result<(usize, usize, usize)> {
        let ratios = [self.train_ratio, self.val_ratio, self.test_ratio];
        if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SimtsError::InvalidArgument(format!(
                "split ratios must be positive and sum to 1, got {ratios:?}"
            )));
        }
        // the nudge keeps e.g. 0.6 · 17420 from flooring to 10451
        let floor = |r: f64| (r * total as f64 + 1e-9).floor() as usize;
        let train = floor(self.train_ratio);
        let val = floor(self.val_ratio);
        Ok((train, val, total - train - val))
    }
}

/// Contiguous chronological partition; no shuffling.
pub fn split<T: Scalar>(
    ts: &TimeSeries<T>,
    spec: &SplitSpec,
) -> Result<(TimeSeries<T>, TimeSeries<T>, TimeSeries<T>)> {
    let total = ts.len();
    if total < 10 {
        return Err(SimtsError::TooShort {
            required: 10,
            actual: total,
        });
    }
    let (train, val, _) = spec.lengths(total)?;
    Ok((
        ts.slice(0, train),
        ts.slice(train, train + val),
        ts.slice(train + val, total),
    ))
}

/// Per-feature z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Population mean and standard deviation per feature; a constant feature
/// gets its value as mean and `std = 1`.
pub fn fit_norm<T: Scalar>(train: &TimeSeries<T>) -> NormStats<T> {
    let n = T::of(train.len() as f64);
    let mut mean = Vec::with_capacity(train.n_features);
    let mut std = Vec::with_capacity(train.n_features);
    for c in 0..train.n_features {
        let xs = train.feature(c);
        let first = xs[0];
        if xs.iter().all(|&x| x == first) {
            mean.push(first);
            std.push(T::one());
            continue;
        }
        let m = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / n;
        let s = var.sqrt();
        mean.push(m);
        std.push(if s > T::zero() { s } else { T::one() });
    }
    NormStats { mean, std }
}

impl<T: Scalar> NormStats<T> {
    pub fn apply(&self, ts: &TimeSeries<T>) -> TimeSeries<T> {
        self.transform(ts, |x, m, s| (x - m) / s)
    }

    pub fn invert(&self, ts: &TimeSeries<T>) -> TimeSeries<T> {
        self.transform(ts, |x, m, s| x * s + m)
    }

    fn transform(&self, ts: &TimeSeries<T>, f: impl Fn(T, T, T) -> T) -> TimeSeries<T> {
        let len = ts.len();
        let values = ts
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = i / len;
                f(x, self.mean[c], self.std[c])
            })
            .collect();
        TimeSeries {
            values,
            ..ts.clone()
        }
    }
}

pub fn apply_norm<T: Scalar>(ts: &TimeSeries<T>, stats: &NormStats<T>) -> TimeSeries<T> {
    stats.apply(ts)
}

/// One training sample: history `C × K` followed by future `C × (T − K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample<T> {
    pub history: Tensor<T>,
    pub future: Tensor<T>,
    /// Start of the history segment within the parent series.
    pub origin: usize,
}

/// Number of windows [`make_windows`] produces.
pub fn window_count(total: usize, window_len: usize, stride: usize) -> usize {
    if total < window_len || stride == 0 {
        0
    } else {
        (total - window_len) / stride + 1
    }
}

/// Slides a window of `window_len` steps with the given stride and splits
/// each at `history_len`.
pub fn make_windows<T: Scalar>(
    ts: &TimeSeries<T>,
    window_len: usize,
    history_len: usize,
    stride: usize,
) -> Result<Vec<WindowSample<T>>> {
    if history_len == 0 || history_len >= window_len || stride == 0 {
        return Err(SimtsError::InvalidArgument(format!(
            "need 0 < K < T and stride ≥ 1, got K={history_len}, T={window_len}, stride={stride}"
        )));
    }
    if ts.len() < window_len {
        return Err(SimtsError::TooShort {
            required: window_len,
            actual: ts.len(),
        });
    }
    Ok((0..window_count(ts.len(), window_len, stride))
        .map(|i| {
            let origin = i * stride;
            WindowSample {
                history: ts.window(origin, origin + history_len),
                future: ts.window(origin + history_len, origin + window_len),
                origin,
            }
        })
        .collect())
}

/// Sum-of-sinusoids generator used for tests and ablations.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_features: usize,
    pub length: usize,
    /// Integer periods for each feature; cycled if shorter than `n_features`.
    pub periods: Vec<Vec<usize>>,
    pub noise_std: f64,
    pub seed: u64,
}

/// `x_c[t] = Σ_p a_{c,p} sin(2π (t mod p)/p + φ_{c,p}) + ε`, with amplitudes in
/// `[0.5, 1.5]`, phases in `[0, 2π)` and `ε ~ N(0, noise_std²)`.
///
/// Amplitudes/phases and noise come from separate streams of the same seed, so
/// changing `noise_std` leaves the clean signal untouched.
pub fn synth_series<T: Scalar>(cfg: &SynthConfig) -> Result<TimeSeries<T>> {
    if cfg.n_features == 0 || cfg.periods.is_empty() || cfg.periods.iter().any(|p| p.is_empty()) {
        return Err(SimtsError::InvalidArgument("synth needs features and periods".into()));
    }
    let max_period = cfg.periods.iter().flatten().copied().max().unwrap_or(0);
    if max_period == 0 || cfg.length < 2 * max_period {
        return Err(SimtsError::InvalidArgument(format!(
            "length {} must be at least twice the longest period {max_period}",
            cfg.length
        )));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(SimtsError::InvalidArgument("noise_std must be ≥ 0".into()));
    }

    let mut shape_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| SimtsError::InvalidArgument(e.to_string()))?;
    let tau = std::f64::consts::TAU;

    let mut features = Vec::with_capacity(cfg.n_features);
    for c in 0..cfg.n_features {
        let periods = &cfg.periods[c % cfg.periods.len()];
        let comps: Vec<(usize, f64, f64)> = periods
            .iter()
            .map(|&p| (p, shape_rng.random_range(0.5..1.5), shape_rng.random_range(0.0..tau)))
            .collect();
        let xs = (0..cfg.length)
            .map(|t| {
                let clean: f64 = comps
                    .iter()
                    .map(|&(p, a, phi)| a * (tau * (t % p) as f64 / p as f64 + phi).sin())
                    .sum();
                let eps = if cfg.noise_std > 0.0 {
                    noise.sample(&mut noise_rng)
                } else {
                    0.0
                };
                T::of(clean + eps)
            })
            .collect();
        features.push(xs);
    }
    let names = (0..cfg.n_features).map(|c| format!("x{c}")).collect();
    TimeSeries::from_features(names, features, None)
}
