//! Multi-seed experiment grids over learning rate, batch size and iteration
//! count, with per-run metrics, aggregates, correlations and plots.

mod plot;
mod report;
pub mod stats;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Column, Series, WindowOptions, WindowedDataset};
use crate::diff::LossKind;
use crate::metrics::{evaluate, MetricToggles, MetricsReport};
use crate::net::{Activation, Architecture, InitScheme, Network};
use crate::train::{sgd_train, BatchSize, Sampling, TrainConfig};
use crate::{Error, Result};

pub use plot::emit_scatter;
pub use report::{
    emit_aggregate_csv, emit_csv, emit_json, emit_summary_json, rank_correlation, read_csv, read_json,
    Aggregate, ColumnSummary, Correlation, RunOutcome, RunRow, SweepReport,
};

/// Mixed into the run seed to derive the mini-batch sampling seed, so that
/// initialization and sampling streams differ.
pub const TRAIN_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSource {
    pub path: PathBuf,
    pub column: Column,
}

/// Where the series come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Source {
    GaussianNoise {
        count: usize,
        #[serde(default)]
        seed: u64,
    },
    NoisySine {
        count: usize,
        c: f64,
        #[serde(default)]
        seed: u64,
    },
    /// One or more aligned series; the first is the forecast target.
    Csv {
        files: Vec<CsvSource>,
        /// Difference every series before windowing.
        #[serde(default)]
        returns: bool,
    },
}

fn default_window() -> usize {
    5
}

fn default_split() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: Source,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default)]
    pub normalize: bool,
}

impl DatasetSpec {
    pub fn is_returns(&self) -> bool {
        matches!(self.source, Source::Csv { returns: true, .. })
    }

    pub fn series(&self) -> Result<Vec<Series>> {
        match &self.source {
            Source::GaussianNoise { count, seed } => Ok(vec![data::gen_gaussian_noise(*count, *seed)?]),
            Source::NoisySine { count, c, seed } => Ok(vec![data::gen_noisy_sine(*count, *c, *seed)?]),
            Source::Csv { files, returns } => {
                if files.is_empty() {
                    return Err(Error::invalid("csv dataset needs at least one file"));
                }
                files
                    .iter()
                    .map(|f| {
                        let s = data::load_csv(&f.path, &f.column)?;
                        if *returns {
                            data::to_returns(&s)
                        } else {
                            Ok(s)
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn build(&self) -> Result<WindowedDataset> {
        data::window(
            &self.series()?,
            WindowOptions {
                window: self.window,
                split: self.split,
                normalize: self.normalize,
            },
        )
    }
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub init: InitScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<BatchSize>,
    pub iterations: Vec<usize>,
}

/// One combination of the three training controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eta: f64,
    pub batch: BatchSize,
    pub iters: usize,
}

impl Grid {
    /// Learning rate outermost, then batch size, then iterations.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &eta in &self.learning_rate {
            for &batch in &self.batch_size {
                for &iters in &self.iterations {
                    out.push(GridPoint { eta, batch, iters });
                }
            }
        }
        out
    }
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("sweep-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub architecture: ArchitectureSpec,
    #[serde(default)]
    pub loss: LossKind,
    pub grid: Grid,
    #[serde(default)]
    pub normalize_gradient: bool,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub convergence_delta: Option<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub metrics: MetricToggles,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Parse a config file. Relative data paths and the output directory are
    /// taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Source::Csv { files, .. } = &mut config.dataset.source {
            for f in files {
                if f.path.is_relative() {
                    f.path = base.join(&f.path);
                }
            }
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.learning_rate.is_empty() || g.batch_size.is_empty() || g.iterations.is_empty() {
            return Err(Error::invalid("every grid axis needs at least one value"));
        }
        if let Some(eta) = g.learning_rate.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {eta}")));
        }
        if g.iterations.contains(&0) {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        if let Source::Csv { files, .. } = &self.dataset.source {
            if files.is_empty() {
                return Err(Error::invalid("csv dataset needs at least one file"));
            }
            for f in files {
                if !f.path.is_file() {
                    return Err(Error::io(
                        &f.path,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "data file not found"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.grid.points().len()
    }
}

/// Train and evaluate every grid point for every seed on a pool of
/// `parallel` threads. Rows come back in grid × seed order regardless of
/// scheduling.
pub fn run_sweep(config: &ExperimentConfig, parallel: usize) -> Result<SweepReport> {
    config.validate()?;
    if parallel == 0 {
        return Err(Error::invalid("parallelism must be at least 1"));
    }
    let data = config.dataset.build()?;
    let arch = Architecture::new(
        data.input_width(),
        config.architecture.hidden.clone(),
        config.architecture.activation,
    )?;
    let returns = config.dataset.is_returns();
    let tasks: Vec<(GridPoint, u64)> = config
        .grid
        .points()
        .into_iter()
        .flat_map(|p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let rows: Vec<RunRow> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(point, seed)| RunRow {
                seed,
                point,
                outcome: match run_one(config, &arch, &data, returns, point, seed) {
                    Ok(m) => RunOutcome::Ok(m),
                    Err(e) => RunOutcome::Failed(e.to_string()),
                },
            })
            .collect()
    });

    if rows.iter().all(|r| r.metrics().is_none()) {
        return Err(Error::AllRunsFailed(rows.len()));
    }
    Ok(SweepReport::new(arch.layer_count(), rows))
}

/// A single run: initialize from `seed`, train, evaluate.
pub fn run_one(
    config: &ExperimentConfig,
    arch: &Architecture,
    data: &WindowedDataset,
    returns: bool,
    point: GridPoint,
    seed: u64,
) -> Result<MetricsReport> {
    let net = Network::init_with(arch.clone(), config.architecture.init, seed)?;
    let train = TrainConfig {
        learning_rate: point.eta,
        batch_size: point.batch,
        iterations: point.iters,
        loss: config.loss,
        normalize_gradient: config.normalize_gradient,
        seed: seed ^ TRAIN_SEED_SALT,
        snapshot_every: None,
        convergence_delta: config.convergence_delta,
        sampling: config.sampling,
    };
    let trace = sgd_train(&net, data, &train)?;
    evaluate(&trace.network, data, config.loss, config.metrics, returns)
}

/// Write `report.csv`, `report.json`, `aggregate.csv`, `summary.json` and a
/// trace-vs-test-loss scatter into `dir`. Returns the files written.
pub fn write_outputs(report: &SweepReport, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv = dir.join("report.csv");
    emit_csv(report, &csv)?;
    written.push(csv);
    let json = dir.join("report.json");
    emit_json(report, &json)?;
    written.push(json);
    let agg = dir.join("aggregate.csv");
    emit_aggregate_csv(report, &agg)?;
    written.push(agg);
    let summary = dir.join("summary.json");
    emit_summary_json(report, &summary)?;
    written.push(summary);
    if report.column_values("tr_hx")?.iter().any(Option::is_some) {
        let svg = dir.join("tr_hx_vs_test_loss.svg");
        emit_scatter(report, "tr_hx", "test_loss", &svg)?;
        written.push(svg);
    }
    Ok(written)
}
