//! Series generation, CSV ingestion, returns and sliding-window datasets.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    GaussianNoise,
    NoisySine,
    Csv,
}

/// A univariate series. Always at least two finite values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    name: String,
    origin: Origin,
    values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, origin: Origin, values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::TooShort {
                needed: 2,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("series values"));
        }
        Ok(Self {
            name: name.into(),
            origin,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `count` i.i.d. standard-normal draws.
pub fn gen_gaussian_noise(count: usize, seed: u64) -> Result<Series> {
    if count < 2 {
        return Err(Error::invalid(format!("count must be >= 2, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..count).map(|_| StandardNormal.sample(&mut rng)).collect();
    Series::new(format!("gaussian-noise-{seed}"), Origin::GaussianNoise, values)
}

/// `y_i = sin(0.1 i) + c ε_i` for `i = 0..count`.
pub fn gen_noisy_sine(count: usize, c: f64, seed: u64) -> Result<Series> {
    if count < 2 {
        return Err(Error::invalid(format!("count must be >= 2, got {count}")));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::invalid(format!("noise level must be >= 0, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..count)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let base = (0.1 * i as f64).sin();
            if c == 0.0 {
                base
            } else {
                base + c * eps
            }
        })
        .collect();
    Series::new(format!("noisy-sine-c{c}-{seed}"), Origin::NoisySine, values)
}

/// Which CSV column to read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Index(i) => write!(f, "#{i}"),
            Column::Name(n) => f.write_str(n),
        }
    }
}

impl From<&str> for Column {
    /// Purely numeric strings select by index, anything else by header name.
    fn from(s: &str) -> Self {
        match s.parse::<usize>() {
            Ok(i) => Column::Index(i),
            Err(_) => Column::Name(s.to_string()),
        }
    }
}

/// Read one numeric column of a headed, comma-separated file.
///
/// Row numbers in errors are file line numbers (the header is row 1).
pub fn load_csv(path: impl AsRef<Path>, column: &Column) -> Result<Series> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let idx = match column {
        Column::Index(i) if *i < headers.len() => *i,
        Column::Name(name) => match headers.iter().position(|h| h == name) {
            Some(i) => i,
            None => {
                return Err(Error::ColumnNotFound {
                    path: path.to_path_buf(),
                    column: name.clone(),
                })
            }
        },
        Column::Index(i) => {
            return Err(Error::ColumnNotFound {
                path: path.to_path_buf(),
                column: format!("#{i}"),
            })
        }
    };
    let column_name = headers.get(idx).unwrap_or_default().to_string();

    let mut values = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let cell = record.get(idx).unwrap_or("");
        if cell.is_empty() && record.iter().all(str::is_empty) {
            continue;
        }
        let value: f64 = cell.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row,
            column: column_name.clone(),
            value: cell.to_string(),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row,
                column: column_name.clone(),
                value: cell.to_string(),
            });
        }
        values.push(value);
    }
    if values.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: values.len(),
        });
    }
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Series::new(format!("{stem}:{column_name}"), Origin::Csv, values)
}

/// First differences `r_t = S_t - S_{t-1}`; output is one shorter.
pub fn to_returns(series: &Series) -> Result<Series> {
    let values: Vec<f64> = series.values().windows(2).map(|w| w[1] - w[0]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("returns"));
    }
    // A two-value series yields a single return; that is the one place a
    // Series shorter than two is allowed, and `window` rejects it downstream.
    Ok(Series {
        name: format!("{}:returns", series.name),
        origin: series.origin,
        values,
    })
}

/// Mean and (population) standard deviation of a training slice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn from_values(name: &str, values: &[f64]) -> Result<Self> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::Degenerate(name.to_string()));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// One supervised pair: history window `x`, next value `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowOptions {
    /// History length per series.
    pub window: usize,
    /// Fraction of pairs used for training, in (0, 1).
    pub split: f64,
    pub normalize: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            window: 5,
            split: 0.7,
            normalize: false,
        }
    }
}

/// Chronologically ordered supervised pairs with a train/test split.
///
/// The target is always the next value of the first series; inputs are the
/// per-series windows concatenated in the order the series were given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    samples: Vec<Sample>,
    split_index: usize,
    window: usize,
    series_count: usize,
    /// Per-series statistics (first entry is the target series) when normalized.
    norms: Option<Vec<NormStats>>,
}

impl WindowedDataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.split_index]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.split_index..]
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// History length per series.
    pub fn window(&self) -> usize {
        self.window
    }

    /// Network input width `n₀ = window × series count`.
    pub fn input_width(&self) -> usize {
        self.window * self.series_count
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.iter().map(|s| s.x.as_slice())
    }

    pub fn targets(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.y)
    }

    pub fn norms(&self) -> Option<&[NormStats]> {
        self.norms.as_deref()
    }

    /// Statistics applied to the target series, if normalized.
    pub fn target_norm(&self) -> Option<&NormStats> {
        self.norms.as_ref().and_then(|n| n.first())
    }

    /// Population standard deviation of all training input coordinates.
    pub fn train_input_std(&self) -> f64 {
        let vals: Vec<f64> = self.train().iter().flat_map(|s| s.x.iter().copied()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    }
}

/// Slide a window of `opts.window` values over each series.
pub fn window(series: &[Series], opts: WindowOptions) -> Result<WindowedDataset> {
    let first = series
        .first()
        .ok_or_else(|| Error::invalid("at least one series is required"))?;
    let n = opts.window;
    if n == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    if !(opts.split > 0.0 && opts.split < 1.0) {
        return Err(Error::invalid(format!(
            "split must lie in (0, 1), got {}",
            opts.split
        )));
    }
    let len = first.len();
    for s in &series[1..] {
        if s.len() != len {
            return Err(Error::LengthMismatch {
                expected: len,
                got: s.len(),
            });
        }
    }
    if len < n + 2 {
        return Err(Error::TooShort {
            needed: n + 2,
            got: len,
        });
    }
    let pairs = len - n;
    let split_index = ((opts.split * pairs as f64).floor() as usize).clamp(1, pairs - 1);

    // Statistics only see values that belong to training pairs.
    let train_end = split_index + n;
    let (columns, norms) = if opts.normalize {
        let mut norms = Vec::with_capacity(series.len());
        let mut cols = Vec::with_capacity(series.len());
        for s in series {
            let stats = NormStats::from_values(s.name(), &s.values()[..train_end])?;
            cols.push(s.values().iter().map(|&v| stats.normalize(v)).collect::<Vec<_>>());
            norms.push(stats);
        }
        (cols, Some(norms))
    } else {
        (series.iter().map(|s| s.values().to_vec()).collect(), None)
    };

    let samples = (n..len)
        .map(|t| {
            let mut x = Vec::with_capacity(n * columns.len());
            for col in &columns {
                x.extend_from_slice(&col[t - n..t]);
            }
            Sample::new(x, columns[0][t])
        })
        .collect();

    Ok(WindowedDataset {
        samples,
        split_index,
        window: n,
        series_count: series.len(),
        norms,
    })
}
