//! Plain SGD with learning-rate, batch-size and iteration controls.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{Sample, WindowedDataset};
use crate::diff::{batch_loss, batch_loss_and_gradient, check_inputs, weight_hessian_diag, LayerFilter, LossKind, Tape};
use crate::matrix::norm2;
use crate::metrics::{mean_input_hessian_trace, mean_jacobian_frobenius};
use crate::net::Network;
use crate::{Error, Result, EPS_FLOOR};

/// Gradients below this norm are applied unnormalized.
pub const NORMALIZE_FLOOR: f64 = 1e-12;
/// Training stops with an error once the loss exceeds this multiple of its
/// initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Iterations between the two losses compared by the convergence test.
pub const CONVERGENCE_WINDOW: usize = 100;

/// Mini-batch size: a count, or the whole training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

impl BatchSize {
    /// Concrete batch size for a training set of `n` pairs.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Full => n,
            BatchSize::Size(m) => m,
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Size(m) => write!(f, "{m}"),
        }
    }
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(Error::invalid(format!(
                "batch size must be a positive integer or `full`, got `{s}`"
            ))),
            Ok(m) => Ok(BatchSize::Size(m)),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(m) => s.serialize_u64(*m as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(usize),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("batch size must be positive")),
            Raw::Count(m) => Ok(BatchSize::Size(m)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// How mini-batch indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Consecutive slices of a stream of shuffled epochs.
    #[default]
    WithoutReplacement,
    /// Independent uniform draws.
    WithReplacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: BatchSize,
    pub iterations: usize,
    pub loss: LossKind,
    pub normalize_gradient: bool,
    pub seed: u64,
    /// Record curvature metrics every this many iterations (plus the first and last).
    pub snapshot_every: Option<usize>,
    /// Stop once `|L_t − L_{t−100}| < δ`.
    pub convergence_delta: Option<f64>,
    pub sampling: Sampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: BatchSize::Full,
            iterations: 1000,
            loss: LossKind::Mse,
            normalize_gradient: false,
            seed: 0,
            snapshot_every: None,
            convergence_delta: None,
            sampling: Sampling::WithoutReplacement,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if let BatchSize::Size(m) = self.batch_size {
            if m == 0 || m > train_size {
                return Err(Error::invalid(format!(
                    "batch size {m} must lie in 1..={train_size} (training pairs)"
                )));
            }
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::invalid("snapshot interval must be positive"));
        }
        if let Some(d) = self.convergence_delta {
            if !(d > 0.0) {
                return Err(Error::invalid("convergence delta must be positive"));
            }
        }
        Ok(())
    }
}

/// Curvature metrics over the training slice at one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tr_input_hessian: f64,
    pub jacobian_frobenius: f64,
    pub tr_weight_hessian_total: f64,
}

impl Snapshot {
    pub fn measure(net: &Network, train: &[Sample], loss: LossKind) -> Result<Self> {
        Ok(Self {
            tr_input_hessian: mean_input_hessian_trace(net, train, loss)?,
            jacobian_frobenius: mean_jacobian_frobenius(net, train)?,
            tr_weight_hessian_total: weight_hessian_diag(net, train, loss, &LayerFilter::All)?.total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Mean loss over the full training slice after this iteration's update.
    pub train_loss: f64,
    pub snapshot: Option<Snapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Iteration 0 (the initial network) first, then one record per update.
    pub records: Vec<TraceRecord>,
    pub network: Network,
    pub converged: bool,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }

    pub fn initial_loss(&self) -> f64 {
        self.records.first().map(|r| r.train_loss).unwrap_or(f64::NAN)
    }

    pub fn record(&self, iteration: usize) -> Option<&TraceRecord> {
        self.records
            .binary_search_by_key(&iteration, |r| r.iteration)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn snapshots(&self) -> impl Iterator<Item = (usize, &Snapshot)> {
        self.records
            .iter()
            .filter_map(|r| r.snapshot.as_ref().map(|s| (r.iteration, s)))
    }

    /// `iteration,train_loss,tr_hx,jac_fro,tr_hw_total`; snapshot columns are
    /// empty between checkpoints.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "train_loss", "tr_hx", "jac_fro", "tr_hw_total"])?;
        for r in &self.records {
            let (a, b, c) = match &r.snapshot {
                Some(s) => (
                    fmt_f64(s.tr_input_hessian),
                    fmt_f64(s.jacobian_frobenius),
                    fmt_f64(s.tr_weight_hessian_total),
                ),
                None => Default::default(),
            };
            w.write_record([r.iteration.to_string(), fmt_f64(r.train_loss), a, b, c])?;
        }
        w.flush().map_err(|e| Error::io("trace csv", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// 17 significant digits: enough to parse back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Infinite stream of batch indices.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    sampling: Sampling,
    rng: ChaCha8Rng,
    full: bool,
}

impl BatchStream {
    fn new(n: usize, size: BatchSize, sampling: Sampling, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let full = size.resolve(n) == n && sampling == Sampling::WithoutReplacement;
        let mut order: Vec<usize> = (0..n).collect();
        if !full && sampling == Sampling::WithoutReplacement {
            order.shuffle(&mut rng);
        }
        Self {
            order,
            pos: 0,
            sampling,
            rng,
            full,
        }
    }

    fn next_batch(&mut self, m: usize, out: &mut Vec<usize>) {
        out.clear();
        let n = self.order.len();
        if self.full {
            out.extend(0..n);
            return;
        }
        match self.sampling {
            Sampling::WithReplacement => out.extend((0..m).map(|_| self.rng.random_range(0..n))),
            Sampling::WithoutReplacement => {
                while out.len() < m {
                    if self.pos == n {
                        self.order.shuffle(&mut self.rng);
                        self.pos = 0;
                    }
                    let take = (m - out.len()).min(n - self.pos);
                    out.extend_from_slice(&self.order[self.pos..self.pos + take]);
                    self.pos += take;
                }
            }
        }
    }
}

/// Train a copy of `net` on the training slice of `data`.
pub fn sgd_train(net: &Network, data: &WindowedDataset, config: &TrainConfig) -> Result<TrainTrace> {
    sgd_train_on(net, data.train(), config)
}

/// [`sgd_train`] on an explicit set of training pairs.
pub fn sgd_train_on(net: &Network, train: &[Sample], config: &TrainConfig) -> Result<TrainTrace> {
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_inputs(net, train)?;
    config.validate(train.len())?;

    let n = train.len();
    let m = config.batch_size.resolve(n);
    let loss = config.loss;
    let mut net = net.clone();
    let mut tape = Tape::new(&net);
    let mut grad = vec![0.0; net.parameter_count()];
    let mut stream = BatchStream::new(n, config.batch_size, config.sampling, config.seed);
    let mut idx = Vec::with_capacity(m);

    let full_loss = |net: &Network| batch_loss(net, train.iter(), n, loss);
    let snapshot_due = |t: usize| match config.snapshot_every {
        Some(every) => t == 0 || t % every == 0 || t == config.iterations,
        None => false,
    };

    let initial = full_loss(&net);
    if !initial.is_finite() {
        return Err(Error::NonFinite("initial loss"));
    }
    let limit = DIVERGENCE_FACTOR * initial.max(EPS_FLOOR);
    let mut records = Vec::with_capacity(config.iterations + 1);
    records.push(TraceRecord {
        iteration: 0,
        train_loss: initial,
        snapshot: snapshot_due(0).then(|| Snapshot::measure(&net, train, loss)).transpose()?,
    });

    let mut converged = false;
    // With a full ordered batch the post-step loss pass doubles as the next
    // gradient pass.
    let mut grad_ready = false;
    for t in 1..=config.iterations {
        if !grad_ready {
            stream.next_batch(m, &mut idx);
            batch_loss_and_gradient(&net, idx.iter().map(|&i| &train[i]), m, loss, &mut tape, &mut grad);
        }
        let mut step = config.learning_rate;
        if config.normalize_gradient {
            let g = norm2(&grad);
            if g >= NORMALIZE_FLOOR {
                step /= g;
            }
        }
        net.axpy(-step, &grad);

        let current = if stream.full {
            grad_ready = true;
            batch_loss_and_gradient(&net, train.iter(), n, loss, &mut tape, &mut grad)
        } else {
            full_loss(&net)
        };
        if !current.is_finite() || current > limit {
            return Err(Error::Divergence {
                iteration: t,
                loss: current,
            });
        }
        if let Some(delta) = config.convergence_delta {
            if t >= CONVERGENCE_WINDOW && (current - records[t - CONVERGENCE_WINDOW].train_loss).abs() < delta {
                converged = true;
            }
        }
        let snapshot = (snapshot_due(t) || (converged && config.snapshot_every.is_some()))
            .then(|| Snapshot::measure(&net, train, loss))
            .transpose()?;
        records.push(TraceRecord {
            iteration: t,
            train_loss: current,
            snapshot,
        });
        if converged {
            break;
        }
    }
    Ok(TrainTrace {
        records,
        network: net,
        converged,
    })
}

/// Trace of the per-sample gradient covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNoise {
    /// `Tr K = (1/(N−1)) Σ ‖gᵢ − ḡ‖²`.
    pub trace_k: f64,
    /// `Tr K / M`, the variance of a size-`M` batch-mean gradient.
    pub per_m_scaled: f64,
}

pub fn grad_noise_trace(
    net: &Network,
    train: &[Sample],
    loss: LossKind,
    batch_size: BatchSize,
) -> Result<GradNoise> {
    let n = train.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    check_inputs(net, train)?;
    let m = batch_size.resolve(n);
    if m == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let d = net.parameter_count();
    let mut tape = Tape::new(net);
    let mut per_sample = vec![vec![0.0; d]; n];
    for (s, g) in train.iter().zip(per_sample.iter_mut()) {
        batch_loss_and_gradient(net, std::iter::once(s), 1, loss, &mut tape, g);
    }
    let mut mean = vec![0.0; d];
    for g in &per_sample {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let sum: f64 = per_sample
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    let trace_k = sum / (n - 1) as f64;
    Ok(GradNoise {
        trace_k,
        per_m_scaled: trace_k / m as f64,
    })
}
