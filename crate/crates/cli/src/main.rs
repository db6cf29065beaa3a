//! `flatmin`: generate series, train forecasters, run sweeps and inspect
//! curvature from the command line.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use flatmin::data::{self, Column, WindowOptions, WindowedDataset};
use flatmin::diff::{full_weight_hessian, spectrum, LossKind};
use flatmin::metrics::{evaluate, noise_robustness_probe, MetricToggles};
use flatmin::net::{Activation, Architecture, InitScheme, Network};
use flatmin::sweep::{run_sweep, write_outputs, ExperimentConfig, TRAIN_SEED_SALT};
use flatmin::theory::{expected_entropy, lambda_from_arch, EntropyParams};
use flatmin::train::{fmt_f64, sgd_train, BatchSize, Sampling, TrainConfig};

#[derive(Parser)]
#[command(name = "flatmin", version, about = "Curvature metrics for small forecasting networks")]
struct Cli {
    /// Seed for generators, initialization and noise draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a series and write it as `t,value` CSV.
    Gen(GenArgs),
    /// Train one network and write its trace, metrics and weights.
    Train(TrainArgs),
    /// Run an experiment grid described by a JSON config.
    Sweep(SweepArgs),
    /// Compare the loss increase under input noise with its Hessian-trace prediction.
    Probe(ProbeArgs),
    /// Expected entropy of a minimum at a given loss level.
    Entropy(EntropyArgs),
    /// Eigenvalues and index of the full weight Hessian of a saved network.
    Spectrum(SpectrumArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    GaussianNoise,
    NoisySine,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: GenKind,
    #[arg(long)]
    count: usize,
    /// Noise amplitude for `noisy-sine`.
    #[arg(long, default_value_t = 0.1)]
    c: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Series input shared by commands that need a dataset.
#[derive(Args)]
struct DataArgs {
    /// CSV file; repeat for extra input series (the first is the target).
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Column name or zero-based index; one for all files or one per file.
    #[arg(long = "column", default_value = "value")]
    column: Vec<String>,
    /// Difference every series before windowing.
    #[arg(long)]
    returns: bool,
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Fraction of pairs used for training.
    #[arg(long, default_value_t = 0.7)]
    split: f64,
    /// Standardize each series with training-slice statistics.
    #[arg(long)]
    normalize: bool,
}

impl DataArgs {
    fn load(&self) -> Result<WindowedDataset> {
        if self.column.len() != 1 && self.column.len() != self.data.len() {
            bail!(
                "got {} --column values for {} --data files; give one or one per file",
                self.column.len(),
                self.data.len()
            );
        }
        let series = self
            .data
            .iter()
            .enumerate()
            .map(|(i, path)| {
                let col = Column::from(self.column[i.min(self.column.len() - 1)].as_str());
                let s = data::load_csv(path, &col)?;
                if self.returns {
                    data::to_returns(&s)
                } else {
                    Ok(s)
                }
            })
            .collect::<flatmin::Result<Vec<_>>>()?;
        Ok(data::window(
            &series,
            WindowOptions {
                window: self.window,
                split: self.split,
                normalize: self.normalize,
            },
        )?)
    }
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| w.trim().parse::<usize>().with_context(|| format!("bad width `{w}`")))
        .collect()
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Hidden widths, comma separated (empty for a linear model).
    #[arg(long, default_value = "100")]
    hidden: String,
    #[arg(long, default_value = "tanh")]
    activation: Activation,
    /// Initial weight variance: `fan-in` (1/n_in) or `width` (1/max(n_in, n_out)).
    #[arg(long, default_value = "fan-in")]
    init: InitScheme,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Mini-batch size or `full`.
    #[arg(long, default_value = "full")]
    batch: BatchSize,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// Step along g/‖g‖₂ instead of g.
    #[arg(long)]
    normalize_gradient: bool,
    #[arg(long, default_value = "mse")]
    loss: LossKind,
    /// Record curvature metrics every this many iterations.
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Draw batch indices with replacement.
    #[arg(long)]
    with_replacement: bool,
    /// Directory for trace.csv, network.json and metrics.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    parallel: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Noise scale.
    #[arg(long)]
    alpha: f64,
    /// Interpret --alpha as a multiple of the training inputs' standard deviation.
    #[arg(long)]
    relative: bool,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value = "mse")]
    loss: LossKind,
}

#[derive(Args)]
struct EntropyArgs {
    #[arg(long, conflicts_with = "arch", required_unless_present = "arch")]
    lambda: Option<f64>,
    /// Input width then hidden widths, e.g. `5,500`; derives lambda and layers.
    #[arg(long)]
    arch: Option<String>,
    /// Number of weight layers (taken from --arch when omitted).
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, allow_hyphen_values = true)]
    loss_level: f64,
}

#[derive(Args)]
struct SpectrumArgs {
    #[arg(long)]
    network: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Eigenvalues below `-tol` count towards the index.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = "mse")]
    loss: LossKind,
}

/// `println!` that reports a closed stdout as an error instead of panicking.
macro_rules! outln {
    ($($arg:tt)*) => {
        writeln!(std::io::stdout(), $($arg)*)?
    };
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<std::io::Error>())
        .any(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

/// The error chain joined with `: `, skipping causes already quoted by
/// the message above them.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => gen(a, seed.unwrap_or(0)),
        Command::Train(a) => train(a, seed.unwrap_or(0)),
        Command::Sweep(a) => sweep(a, seed),
        Command::Probe(a) => probe(a, seed.unwrap_or(0)),
        Command::Entropy(a) => entropy(a),
        Command::Spectrum(a) => spectrum_cmd(a),
    }
}

fn gen(a: GenArgs, seed: u64) -> Result<()> {
    let series = match a.kind {
        GenKind::GaussianNoise => data::gen_gaussian_noise(a.count, seed)?,
        GenKind::NoisySine => data::gen_noisy_sine(a.count, a.c, seed)?,
    };
    let mut w = csv::Writer::from_path(&a.out).with_context(|| a.out.display().to_string())?;
    w.write_record(["t", "value"])?;
    for (t, v) in series.values().iter().enumerate() {
        w.write_record([t.to_string(), fmt_f64(*v)])?;
    }
    w.flush().with_context(|| a.out.display().to_string())?;
    outln!("wrote {} values to {}", series.len(), a.out.display());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("{}: cannot create directory", dir.display()))
}

fn train(a: TrainArgs, seed: u64) -> Result<()> {
    let data = a.data.load()?;
    let arch = Architecture::new(data.input_width(), parse_widths(&a.hidden)?, a.activation)?;
    let net = Network::init_with(arch, a.init, seed)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        iterations: a.iterations,
        loss: a.loss,
        normalize_gradient: a.normalize_gradient,
        seed: seed ^ TRAIN_SEED_SALT,
        snapshot_every: a.snapshot_every,
        convergence_delta: None,
        sampling: if a.with_replacement {
            Sampling::WithReplacement
        } else {
            Sampling::WithoutReplacement
        },
    };
    let trace = sgd_train(&net, &data, &config)?;
    let report = evaluate(&trace.network, &data, a.loss, MetricToggles::default(), a.data.returns)?;

    create_dir(&a.out)?;
    trace.save_csv(a.out.join("trace.csv"))?;
    trace.network.save(a.out.join("network.json"))?;
    let doc = json!({
        "seed": seed,
        "eta": a.lr,
        "batch": a.batch,
        "iters": a.iterations,
        "metrics": report,
    });
    let path = a.out.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| path.display().to_string())?;
    outln!(
        "train_loss {} test_loss {} tr_hx {}",
        report.train_loss,
        report.test_loss,
        report.tr_input_hessian.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sweep(a: SweepArgs, seed: Option<u64>) -> Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(s) = seed {
        config.seeds = vec![s];
    }
    if let Some(out) = a.out {
        config.output_dir = out;
    }
    let parallel = match a.parallel {
        Some(p) => p,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let report = run_sweep(&config, parallel)?;
    let files = write_outputs(&report, &config.output_dir)?;
    outln!(
        "{} runs, {} failed",
        report.rows.len(),
        report.failures().count()
    );
    for c in &report.correlations {
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        outln!(
            "{} vs {}: spearman {} pearson {}",
            c.metric,
            c.target,
            show(c.spearman),
            show(c.pearson)
        );
    }
    for f in files {
        outln!("wrote {}", f.display());
    }
    Ok(())
}

fn load_checked(path: &Path, data: &WindowedDataset) -> Result<Network> {
    let net = Network::load(path)?;
    if net.input_width() != data.input_width() {
        bail!(
            "{}: network expects {} inputs but the data windows have {}",
            path.display(),
            net.input_width(),
            data.input_width()
        );
    }
    Ok(net)
}

fn probe(a: ProbeArgs, seed: u64) -> Result<()> {
    let data = a.data.load()?;
    let net = load_checked(&a.network, &data)?;
    let alpha = if a.relative {
        a.alpha * data.train_input_std()
    } else {
        a.alpha
    };
    let rec = noise_robustness_probe(&net, data.train(), a.loss, alpha, a.draws, seed)?;
    outln!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "alpha": alpha,
            "draws": a.draws,
            "delta_hat": rec.delta_hat,
            "trace_prediction": rec.trace_prediction,
            "relative_gap": rec.relative_gap,
        }))?
    );
    Ok(())
}

fn entropy(a: EntropyArgs) -> Result<()> {
    let (lambda, layers) = match (&a.arch, a.lambda) {
        (Some(spec), _) => {
            let widths = parse_widths(spec)?;
            let (&n0, hidden) = widths.split_first().context("--arch needs at least the input width")?;
            let arch = Architecture::new(n0, hidden.to_vec(), Activation::Linear)?;
            (lambda_from_arch(&arch), a.layers.unwrap_or(arch.layer_count()))
        }
        (None, Some(l)) => (l, a.layers.context("--layers is required with --lambda")?),
        (None, None) => bail!("give --lambda or --arch"),
    };
    let params = EntropyParams {
        lambda,
        layers,
        rho: a.rho,
        sigma: a.sigma,
        loss_level: a.loss_level,
    };
    let b = expected_entropy(&params)?;
    outln!("lambda          {lambda}");
    outln!("layers          {layers}");
    outln!("t_star          {}", b.t_star);
    outln!("activity_term   {}", b.activity_term);
    outln!("depth_term      {}", b.depth_term);
    outln!("potential_term  {}", b.potential_term);
    outln!("total           {}", b.total);
    outln!("error_estimate  {:e}", b.error_estimate);
    Ok(())
}

fn spectrum_cmd(a: SpectrumArgs) -> Result<()> {
    let data = a.data.load()?;
    let net = load_checked(&a.network, &data)?;
    let h = full_weight_hessian(&net, data.train(), a.loss)?;
    let report = spectrum(&h.matrix, a.tol)?;
    outln!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "parameters": net.parameter_count(),
            "relative_asymmetry": h.relative_asymmetry,
            "tolerance": report.tolerance,
            "index": report.index,
            "eigenvalues": report.eigenvalues,
        }))?
    );
    Ok(())
}
