//! Command-line front end. Every command resolves a [`RunConfig`] from an
//! optional JSON file plus flags and embeds it, with the tool version, in
//! each file it writes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, derived_rng, generate_dataset, AdaptiveConfig, Dataset, Strategy};
use crate::error::{Error, Result};
use crate::eval::{
    self, adaptation_loop, default_theta_grid, evaluate, region_analysis, select_threshold_min_fn, sprt_certify,
    threshold_sweep, timebound_analysis, AdaptationConfig, CertificationStream, Decision, Metric, MetricsReport, Oracle,
    RegionConfig, SprtConfig, TimeboundConfig,
};
use crate::models::{Benchmark, HybridModel};
use crate::nn::{load_classifier, save_ensemble, save_model, Arch, Classifier, Model, TrainConfig, TrainLog};
use crate::sim::{fmt_f64, IntegratorConfig};

pub const TOOL: &str = "reachnet";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNDETERMINED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSettings {
    pub iterations: usize,
    pub per_iter_samples: usize,
    /// `None` picks the per-model rate.
    pub learning_rate: Option<f64>,
    pub freeze_biases: bool,
}

impl Default for AdaptSettings {
    fn default() -> Self {
        AdaptSettings { iterations: 10, per_iter_samples: 10_000, learning_rate: None, freeze_biases: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionSettings {
    /// Variable names or indices; `None` picks a per-model pair.
    pub axes: Option<(String, String)>,
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
}

impl Default for RegionSettings {
    fn default() -> Self {
        RegionSettings { axes: None, rows: 20, cols: 20, per_cell: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeboundSettings {
    pub t_grid: Option<Vec<f64>>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for TimeboundSettings {
    fn default() -> Self {
        TimeboundSettings { t_grid: None, train_size: 10_000, test_size: 5_000 }
    }
}

/// Everything a run depends on. Optional fields are filled from the model
/// by [`RunConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    pub params: BTreeMap<String, f64>,
    #[serde(rename = "T")]
    pub t_bound: Option<f64>,
    pub h: Option<f64>,
    pub integrator: IntegratorConfig,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub strategy: Option<Strategy>,
    pub arch: Arch,
    pub train: TrainConfig,
    pub alpha: f64,
    pub sprt: SprtConfig,
    pub theta_grid: Option<Vec<f64>>,
    pub max_acc_loss: f64,
    pub adaptation: AdaptSettings,
    pub region: RegionSettings,
    pub timebound: TimeboundSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "pendulum".into(),
            params: BTreeMap::new(),
            t_bound: None,
            h: None,
            integrator: IntegratorConfig::default(),
            seed: 1,
            train_size: 20_000,
            test_size: 10_000,
            strategy: None,
            arch: Arch::DnnS,
            train: TrainConfig::default(),
            alpha: eval::DEFAULT_ALPHA,
            sprt: SprtConfig::default(),
            theta_grid: None,
            max_acc_loss: 0.005,
            adaptation: AdaptSettings::default(),
            region: RegionSettings::default(),
            timebound: TimeboundSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })
    }

    pub fn benchmark(&self) -> Result<Benchmark> {
        Benchmark::with_params(&self.model, &self.params)
    }

    /// Fills model-dependent defaults and checks every setting.
    pub fn resolve(mut self) -> Result<Self> {
        let model = self.benchmark()?;
        let spec = model.spec();
        self.t_bound.get_or_insert(spec.default_t);
        self.h.get_or_insert(spec.default_h);
        self.strategy.get_or_insert_with(|| AdaptiveConfig::training_strategy(&self.model));
        self.theta_grid.get_or_insert_with(default_theta_grid);
        self.adaptation
            .learning_rate
            .get_or_insert_with(|| AdaptationConfig::learning_rate_for(&self.model));
        self.region.axes.get_or_insert_with(|| {
            let (a, b) = if spec.dim >= 7 { (5, 6) } else { (0, 1) };
            (spec.var_names[a].clone(), spec.var_names[b.min(spec.dim - 1)].clone())
        });
        self.timebound.t_grid.get_or_insert_with(|| (1..=20).map(f64::from).collect());
        self.integrator.validate()?;
        self.train.validate()?;
        data::check_settings(self.t(), self.h(), &self.integrator)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(Strategy::Adaptive(a)) = &self.strategy {
            a.validate(spec.dim)?;
        }
        if self.theta_grid.as_ref().is_some_and(|g| g.is_empty()) {
            return Err(Error::InvalidArgument("theta grid is empty".into()));
        }
        self.sprt.hypotheses()?;
        self.region_axes(spec)?;
        Ok(self)
    }

    pub fn t(&self) -> f64 {
        self.t_bound.expect("resolved")
    }

    pub fn h(&self) -> f64 {
        self.h.expect("resolved")
    }

    fn strategy(&self) -> Strategy {
        self.strategy.clone().expect("resolved")
    }

    fn region_axes(&self, spec: &crate::models::ModelSpec) -> Result<(usize, usize)> {
        let (a, b) = self.region.axes.clone().expect("resolved");
        let find = |name: &str| {
            spec.var_names
                .iter()
                .position(|v| v == name)
                .or_else(|| name.parse::<usize>().ok().filter(|i| *i < spec.dim))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown axis '{name}' for {} (variables: {})",
                        spec.name,
                        spec.var_names.join(", ")
                    ))
                })
        };
        Ok((find(&a)?, find(&b)?))
    }

    /// Seed for one named use of the master seed.
    fn stream(&self, tag: u64) -> u64 {
        derived_rng(self.seed, tag, 0).next_u64()
    }
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_CERTIFY: u64 = 3;
const STREAM_REGION: u64 = 4;
const STREAM_ADAPT: u64 = 5;
const STREAM_TIMEBOUND: u64 = 6;

#[derive(Parser, Debug)]
#[command(name = "reachnet", version, about = "Neural reachability classifiers for hybrid systems")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Time bound.
    #[arg(long = "T", global = true)]
    pub t_bound: Option<f64>,
    /// Trace step.
    #[arg(long, global = true)]
    pub h: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Confidence parameter of reported intervals.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample and label a dataset.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        /// uniform or adaptive
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        adaptive_n: Option<usize>,
        #[arg(long)]
        adaptive_radius: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Model file (network JSON or ensemble manifest).
        #[arg(long)]
        out: PathBuf,
        /// Training-log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Accuracy, FN and FP rates with confidence intervals.
    Eval {
        #[arg(long)]
        net: PathBuf,
        /// Test set; a fresh uniform one is drawn when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequential certification of a metric on fresh samples.
    Certify {
        #[arg(long, required_unless_present = "oracle")]
        net: Option<PathBuf>,
        /// Certify the simulator itself as a perfect classifier.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        sprt_alpha: Option<f64>,
        #[arg(long)]
        sprt_beta: Option<f64>,
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-cell metrics on a grid over two variables.
    Region {
        #[arg(long)]
        net: PathBuf,
        /// Two variable names or indices, comma separated.
        #[arg(long)]
        axes: Option<String>,
        /// ROWSxCOLS
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        per_cell: Option<usize>,
        /// Heatmap CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Incremental adaptation on false negatives.
    Adapt {
        #[arg(long)]
        net: PathBuf,
        /// Fixed test set; a fresh uniform one is drawn when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        per_iter: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Also update biases.
        #[arg(long)]
        update_biases: bool,
        /// Adapted network.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Threshold sweep and FN-minimizing threshold selection.
    Threshold {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        max_acc_loss: Option<f64>,
        /// Sweep CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the network with the selected threshold here.
        #[arg(long)]
        apply: Option<PathBuf>,
    },
    /// Retrain and test across time bounds.
    Timebound {
        /// Comma-separated increasing time bounds.
        #[arg(long)]
        t_grid: Option<String>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        arch: Option<Arch>,
        /// Sweep CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// generate, train and eval in one go.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Singularity { .. } => "singularity",
            Error::Contract(_) => "contract",
            Error::Divergence { .. } => "divergence",
            Error::BlowUp { .. } => "blow-up",
            Error::UnknownModel { .. } => "unknown-model",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Parse { .. } => "parse",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Schema(_) => "schema",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::Infeasible(_) => "infeasible",
            Error::Io { .. } => "io",
        };
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_USAGE };
        Failure { code, kind, message: e.to_string() }
    }
}

impl Failure {
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "message": self.message, "exit_code": self.code }).to_string()
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return EXIT_OK;
            }
            let f = Failure { code: EXIT_USAGE, kind: "usage", message: e.to_string().trim_end().to_string() };
            eprintln!("{}", f.to_json());
            return f.code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}

pub fn run<W: Write>(cli: Cli, out: &mut W) -> std::result::Result<i32, Failure> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()).into());
        }
        // fails only if a pool already exists, in which case it is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_common(&mut cfg, &cli.common);
    let code = match cli.command {
        Command::Generate { count, strategy, adaptive_n, adaptive_radius, out: path } => {
            cmd_generate(cfg, count, strategy, adaptive_n, adaptive_radius, &path, out)?
        }
        Command::Train { data, arch, epochs, out: path, log } => {
            cmd_train(cfg, &data, arch, epochs, &path, log.as_deref(), out)?
        }
        Command::Eval { net, data, out: path } => cmd_eval(cfg, &net, data.as_deref(), path.as_deref(), out)?,
        Command::Certify { net, oracle, metric, theta, delta, sprt_alpha, sprt_beta, max_samples, out: path } => {
            set(&mut cfg.sprt.metric, metric);
            set(&mut cfg.sprt.theta, theta);
            set(&mut cfg.sprt.delta, delta);
            set(&mut cfg.sprt.alpha, sprt_alpha);
            set(&mut cfg.sprt.beta, sprt_beta);
            set(&mut cfg.sprt.max_samples, max_samples);
            let net = if oracle { None } else { net };
            cmd_certify(cfg, net.as_deref(), path.as_deref(), out)?
        }
        Command::Region { net, axes, grid, per_cell, out: path, report } => {
            if let Some(a) = axes {
                let (x, y) = a
                    .split_once(',')
                    .ok_or_else(|| Error::InvalidArgument(format!("--axes expects two comma-separated variables, got '{a}'")))?;
                cfg.region.axes = Some((x.trim().to_string(), y.trim().to_string()));
            }
            if let Some(g) = grid {
                let (r, c) = parse_grid(&g)?;
                cfg.region.rows = r;
                cfg.region.cols = c;
            }
            set(&mut cfg.region.per_cell, per_cell);
            cmd_region(cfg, &net, &path, report.as_deref(), out)?
        }
        Command::Adapt { net, data, iterations, per_iter, lr, update_biases, out: path, report } => {
            set(&mut cfg.adaptation.iterations, iterations);
            set(&mut cfg.adaptation.per_iter_samples, per_iter);
            if lr.is_some() {
                cfg.adaptation.learning_rate = lr;
            }
            if update_biases {
                cfg.adaptation.freeze_biases = false;
            }
            cmd_adapt(cfg, &net, data.as_deref(), &path, report.as_deref(), out)?
        }
        Command::Threshold { net, data, max_acc_loss, out: path, apply } => {
            set(&mut cfg.max_acc_loss, max_acc_loss);
            cmd_threshold(cfg, &net, data.as_deref(), path.as_deref(), apply.as_deref(), out)?
        }
        Command::Timebound { t_grid, train_size, test_size, arch, out: path } => {
            if let Some(g) = t_grid {
                cfg.timebound.t_grid = Some(parse_list(&g)?);
            }
            set(&mut cfg.timebound.train_size, train_size);
            set(&mut cfg.timebound.test_size, test_size);
            set(&mut cfg.arch, arch);
            cmd_timebound(cfg, &path, out)?
        }
        Command::Pipeline { out_dir, train_size, test_size, arch, epochs } => {
            set(&mut cfg.train_size, train_size);
            set(&mut cfg.test_size, test_size);
            set(&mut cfg.arch, arch);
            set(&mut cfg.train.max_epochs, epochs);
            cmd_pipeline(cfg, &out_dir, out)?
        }
    };
    Ok(code)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if let Some(m) = &c.model {
        if *m != cfg.model {
            // model-specific defaults must not leak across models
            cfg.params.clear();
        }
        cfg.model = m.clone();
    }
    if c.t_bound.is_some() {
        cfg.t_bound = c.t_bound;
    }
    if c.h.is_some() {
        cfg.h = c.h;
    }
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.alpha, c.alpha);
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("--grid expects ROWSxCOLS, got '{s}'"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number '{v}' in list"))))
        .collect()
}

/// Provenance block written into every output.
fn provenance(cfg: &RunConfig, command: &str) -> Value {
    json!({ "tool": TOOL, "version": VERSION, "command": command, "config": cfg })
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes a CSV whose first lines carry the provenance as comments.
fn write_csv_with<F>(path: &Path, prov: &Value, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| {
        writeln!(w, "# tool={TOOL} {VERSION}")?;
        writeln!(w, "# config={}", prov["config"])?;
        body(&mut w)?;
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

fn print_line<W: Write>(out: &mut W, value: &Value) -> Result<()> {
    writeln!(out, "{value}").map_err(|e| Error::io("<stdout>", e))
}

fn load_dataset_into(cfg: &mut RunConfig, path: &Path) -> Result<Dataset> {
    let data = data::load_csv(path)?;
    if data.model != cfg.model {
        cfg.params.clear();
    }
    cfg.model = data.model.clone();
    cfg.t_bound = Some(data.t_bound);
    cfg.h = Some(data.h);
    Ok(data)
}

fn test_set(cfg: &RunConfig, model: &Benchmark, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => data::load_csv(p),
        None => generate_dataset(model, cfg.test_size, &Strategy::Uniform, cfg.t(), cfg.h(), cfg.stream(STREAM_TEST), &cfg.integrator),
    }
}

/// Loads a dataset if given and makes the config agree with it.
fn resolve_with_data(mut cfg: RunConfig, data: Option<&Path>) -> Result<(RunConfig, Option<Dataset>)> {
    let d = match data {
        Some(p) => Some(load_dataset_into(&mut cfg, p)?),
        None => None,
    };
    Ok((cfg.resolve()?, d))
}

fn load_checked(path: &Path, dim: usize) -> Result<Model> {
    let clf = load_classifier(path)?;
    if clf.input_dim() != dim {
        return Err(Error::InvalidArgument(format!(
            "{} expects {} inputs but the model has {dim} variables",
            path.display(),
            clf.input_dim()
        )));
    }
    Ok(clf)
}

fn dataset_summary(d: &Dataset, path: &Path) -> Value {
    json!({
        "path": path.display().to_string(),
        "model": d.model,
        "count": d.len(),
        "positives": d.positives(),
        "positive_fraction": d.positive_fraction(),
        "discarded": d.discarded,
        "strategy": d.strategy.name(),
        "seed": d.seed,
    })
}

fn save_dataset(d: &Dataset, path: &Path, prov: &Value) -> Result<()> {
    write_csv_with(path, prov, |w| data::write_csv(d, w))
}

fn cmd_generate<W: Write>(
    mut cfg: RunConfig,
    count: Option<usize>,
    strategy: Option<String>,
    adaptive_n: Option<usize>,
    adaptive_radius: Option<f64>,
    path: &Path,
    out: &mut W,
) -> Result<i32> {
    set(&mut cfg.train_size, count);
    match strategy.as_deref() {
        None => {}
        Some("uniform") => cfg.strategy = Some(Strategy::Uniform),
        Some("adaptive") => cfg.strategy = Some(Strategy::Adaptive(AdaptiveConfig::for_model(&cfg.model))),
        Some(other) => {
            return Err(Error::InvalidArgument(format!("unknown strategy '{other}' (expected uniform or adaptive)")))
        }
    }
    if adaptive_n.is_some() || adaptive_radius.is_some() {
        let mut a = match cfg.strategy.take() {
            Some(Strategy::Adaptive(a)) => a,
            _ => AdaptiveConfig::for_model(&cfg.model),
        };
        set(&mut a.extra_per_positive, adaptive_n);
        if let Some(r) = adaptive_radius {
            a.radius = vec![r];
        }
        cfg.strategy = Some(Strategy::Adaptive(a));
    }
    let cfg = cfg.resolve()?;
    let model = cfg.benchmark()?;
    // the master seed is the dataset seed, so files name their own stream
    let d = generate_dataset(&model, cfg.train_size, &cfg.strategy(), cfg.t(), cfg.h(), cfg.seed, &cfg.integrator)?;
    save_dataset(&d, path, &provenance(&cfg, "generate"))?;
    print_line(out, &dataset_summary(&d, path))?;
    Ok(EXIT_OK)
}

fn log_csv(prov: &Value, path: &Path, logs: &[TrainLog]) -> Result<()> {
    write_csv_with(path, prov, |w| {
        writeln!(w, "member,epoch,loss,val_loss,mu")?;
        for (m, log) in logs.iter().enumerate() {
            writeln!(w, "{m},0,{},,", fmt_f64(log.initial_loss))?;
            for e in &log.epochs {
                let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
                writeln!(w, "{m},{},{},{},{}", e.epoch, fmt_f64(e.loss), opt(e.val_loss), opt(e.mu))?;
            }
        }
        Ok(())
    })
}

fn default_log_path(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    model_path.with_file_name(format!("{stem}.log.csv"))
}

/// Trains, writes the model (and members) and the log; returns the model.
fn train_and_save(
    cfg: &RunConfig,
    model: &Benchmark,
    data: &Dataset,
    data_path: &Path,
    path: &Path,
    log: &Path,
    command: &str,
) -> Result<(Model, Vec<PathBuf>, Vec<TrainLog>)> {
    let prov = provenance(cfg, command);
    let (clf, logs) = eval::train_classifier(cfg.arch, model, data, &cfg.train, &cfg.integrator)?;
    let trained_on = json!({
        "tool": TOOL,
        "version": VERSION,
        "config": cfg,
        "data": dataset_summary(data, data_path),
    });
    let written = match &clf {
        Model::Network(net) => {
            let mut net = net.clone();
            net.trained_on = Some(trained_on);
            save_model(&net, path)?;
            vec![path.to_path_buf()]
        }
        Model::Ensemble(ens) => save_ensemble(ens, cfg.arch, path, Some(trained_on))?,
    };
    log_csv(&prov, log, &logs)?;
    Ok((clf, written, logs))
}

fn cmd_train<W: Write>(
    mut cfg: RunConfig,
    data_path: &Path,
    arch: Option<Arch>,
    epochs: Option<usize>,
    path: &Path,
    log: Option<&Path>,
    out: &mut W,
) -> Result<i32> {
    set(&mut cfg.arch, arch);
    set(&mut cfg.train.max_epochs, epochs);
    let (cfg, data) = resolve_with_data(cfg, Some(data_path))?;
    let data = data.expect("loaded");
    let model = cfg.benchmark()?;
    let log = log.map(Path::to_path_buf).unwrap_or_else(|| default_log_path(path));
    let (clf, written, logs) = train_and_save(&cfg, &model, &data, data_path, path, &log, "train")?;
    let train_metrics = evaluate(&clf, &data, cfg.alpha)?;
    print_line(
        out,
        &json!({
            "arch": cfg.arch.tag(),
            "files": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "log": log.display().to_string(),
            "epochs": logs.iter().map(|l| l.epochs.len()).collect::<Vec<_>>(),
            "stop": logs.iter().map(|l| l.stop).collect::<Vec<_>>(),
            "train_metrics": train_metrics,
        }),
    )?;
    Ok(EXIT_OK)
}

fn metrics_json(m: &MetricsReport) -> Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn cmd_eval<W: Write>(cfg: RunConfig, net: &Path, data: Option<&Path>, path: Option<&Path>, out: &mut W) -> Result<i32> {
    let (cfg, loaded) = resolve_with_data(cfg, data)?;
    let model = cfg.benchmark()?;
    let clf = load_checked(net, model.spec().dim)?;
    let test = match loaded {
        Some(d) => d,
        None => test_set(&cfg, &model, None)?,
    };
    let m = evaluate(&clf, &test, cfg.alpha)?;
    let mut report = provenance(&cfg, "eval");
    report["metrics"] = metrics_json(&m);
    report["test_positive_fraction"] = json!(test.positive_fraction());
    if let Some(p) = path {
        write_json(p, &report)?;
    }
    print_line(out, &json!({ "metrics": m }))?;
    Ok(EXIT_OK)
}

fn cmd_certify<W: Write>(cfg: RunConfig, net: Option<&Path>, path: Option<&Path>, out: &mut W) -> Result<i32> {
    let cfg = cfg.resolve()?;
    let model = cfg.benchmark()?;
    let seed = cfg.stream(STREAM_CERTIFY);
    let oracle;
    let loaded;
    let clf: &dyn Classifier = match net {
        Some(p) => {
            loaded = load_checked(p, model.spec().dim)?;
            &loaded
        }
        None => {
            oracle = Oracle { model: &model, t_bound: cfg.t(), h: cfg.h(), cfg: cfg.integrator.clone() };
            &oracle
        }
    };
    let mut stream = CertificationStream::new(&model, clf, cfg.sprt.metric, cfg.t(), cfg.h(), &cfg.integrator, seed);
    let verdict = sprt_certify(&mut stream, &cfg.sprt)?;
    if let Some(e) = stream.error.take() {
        if verdict.decision == Decision::Undetermined {
            return Err(e);
        }
    }
    let mut report = provenance(&cfg, "certify");
    report["classifier"] = json!(net.map_or("oracle".to_string(), |p| p.display().to_string()));
    report["verdict"] = serde_json::to_value(&verdict).expect("verdict serializes");
    if let Some(p) = path {
        write_json(p, &report)?;
    }
    print_line(out, &json!({ "verdict": verdict }))?;
    Ok(match verdict.decision {
        Decision::Satisfied => EXIT_OK,
        Decision::Violated => EXIT_VIOLATED,
        Decision::Undetermined => EXIT_UNDETERMINED,
    })
}

fn cmd_region<W: Write>(cfg: RunConfig, net: &Path, path: &Path, report_path: Option<&Path>, out: &mut W) -> Result<i32> {
    let cfg = cfg.resolve()?;
    let model = cfg.benchmark()?;
    let clf = load_checked(net, model.spec().dim)?;
    let rc = RegionConfig {
        axes: cfg.region_axes(model.spec())?,
        rows: cfg.region.rows,
        cols: cfg.region.cols,
        per_cell: cfg.region.per_cell,
        t_bound: cfg.t(),
        h: cfg.h(),
        seed: cfg.stream(STREAM_REGION),
        alpha: cfg.alpha,
    };
    let report = region_analysis(&clf, &model, &rc, &cfg.integrator)?;
    let prov = provenance(&cfg, "region");
    write_csv_with(path, &prov, |w| report.write_csv(w))?;
    if let Some(p) = report_path {
        let mut full = prov.clone();
        full["region"] = serde_json::to_value(&report).expect("region report serializes");
        write_json(p, &full)?;
    }
    let worst = report
        .cells
        .iter()
        .map(|c| c.metrics.ci_acc.lo)
        .fold(f64::INFINITY, f64::min);
    print_line(
        out,
        &json!({ "cells": report.cells.len(), "axes": report.axis_names, "min_acc_lo": worst, "out": path.display().to_string() }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_adapt<W: Write>(
    cfg: RunConfig,
    net: &Path,
    data: Option<&Path>,
    path: &Path,
    report_path: Option<&Path>,
    out: &mut W,
) -> Result<i32> {
    let (cfg, loaded) = resolve_with_data(cfg, data)?;
    let model = cfg.benchmark()?;
    let Model::Network(network) = load_checked(net, model.spec().dim)? else {
        return Err(Error::InvalidArgument("adaptation needs a single network, not an ensemble".into()));
    };
    let fixed = match loaded {
        Some(d) => d,
        None => test_set(&cfg, &model, None)?,
    };
    let ac = AdaptationConfig {
        iterations: cfg.adaptation.iterations,
        per_iter_samples: cfg.adaptation.per_iter_samples,
        learning_rate: cfg.adaptation.learning_rate.expect("resolved"),
        freeze_biases: cfg.adaptation.freeze_biases,
        seed: cfg.stream(STREAM_ADAPT),
    };
    let (mut adapted, report) = adaptation_loop(&network, &model, &ac, &fixed, &cfg.integrator, cfg.alpha)?;
    let prov = provenance(&cfg, "adapt");
    adapted.trained_on = Some(json!({ "adapted_from": net.display().to_string(), "provenance": prov.clone() }));
    save_model(&adapted, path)?;
    if let Some(p) = report_path {
        let mut full = prov;
        full["adaptation"] = serde_json::to_value(&report).expect("adaptation report serializes");
        write_json(p, &full)?;
    }
    let last = report.steps.last().map_or(&report.initial, |s| &s.metrics);
    print_line(
        out,
        &json!({
            "initial": { "acc": report.initial.acc, "fn": report.initial.fn_rate, "fp": report.initial.fp_rate },
            "final": { "acc": last.acc, "fn": last.fn_rate, "fp": last.fp_rate },
            "false_negatives_used": report.accumulated.len(),
            "reclassified": report.reclassified,
        }),
    )?;
    Ok(EXIT_OK)
}

fn cmd_threshold<W: Write>(
    cfg: RunConfig,
    net: &Path,
    data: Option<&Path>,
    path: Option<&Path>,
    apply: Option<&Path>,
    out: &mut W,
) -> Result<i32> {
    let (cfg, loaded) = resolve_with_data(cfg, data)?;
    let model = cfg.benchmark()?;
    let clf = load_checked(net, model.spec().dim)?;
    let test = match loaded {
        Some(d) => d,
        None => test_set(&cfg, &model, None)?,
    };
    let baseline = evaluate(&clf, &test, cfg.alpha)?;
    let sweep = threshold_sweep(&clf, &test, cfg.theta_grid.as_deref().expect("resolved"), cfg.alpha)?;
    let best = select_threshold_min_fn(&sweep, cfg.max_acc_loss, baseline.acc)?;
    let prov = provenance(&cfg, "threshold");
    if let Some(p) = path {
        write_csv_with(p, &prov, |w| sweep.write_csv(w))?;
    }
    if let Some(p) = apply {
        let Model::Network(mut n) = clf else {
            return Err(Error::InvalidArgument("--apply needs a single network, not an ensemble".into()));
        };
        n.set_threshold(best.value)?;
        save_model(&n, p)?;
    }
    print_line(out, &json!({ "theta": best.value, "metrics": best.metrics, "baseline": baseline }))?;
    Ok(EXIT_OK)
}

fn cmd_timebound<W: Write>(cfg: RunConfig, path: &Path, out: &mut W) -> Result<i32> {
    let cfg = cfg.resolve()?;
    let model = cfg.benchmark()?;
    let tb = TimeboundConfig {
        t_grid: cfg.timebound.t_grid.clone().expect("resolved"),
        train_size: cfg.timebound.train_size,
        test_size: cfg.timebound.test_size,
        arch: cfg.arch,
        h: cfg.h(),
        seed: cfg.stream(STREAM_TIMEBOUND),
        alpha: cfg.alpha,
    };
    let sweep = timebound_analysis(&model, &tb, &cfg.train, &cfg.integrator)?;
    write_csv_with(path, &provenance(&cfg, "timebound"), |w| sweep.write_csv(w))?;
    let accs: Vec<(f64, f64)> = sweep.points.iter().map(|p| (p.value, p.metrics.acc)).collect();
    print_line(out, &json!({ "accuracy_by_T": accs, "out": path.display().to_string() }))?;
    Ok(EXIT_OK)
}

fn cmd_pipeline<W: Write>(cfg: RunConfig, dir: &Path, out: &mut W) -> Result<i32> {
    let cfg = cfg.resolve()?;
    let model = cfg.benchmark()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let prov = provenance(&cfg, "pipeline");
    let train_path = dir.join("train.csv");
    let test_path = dir.join("test.csv");
    let model_path = dir.join("model.json");
    let log_path = dir.join("train.log.csv");
    let train = generate_dataset(&model, cfg.train_size, &cfg.strategy(), cfg.t(), cfg.h(), cfg.stream(STREAM_TRAIN), &cfg.integrator)?;
    save_dataset(&train, &train_path, &prov)?;
    let test = test_set(&cfg, &model, None)?;
    save_dataset(&test, &test_path, &prov)?;
    let (clf, _, _) = train_and_save(&cfg, &model, &train, &train_path, &model_path, &log_path, "pipeline")?;
    let train_m = evaluate(&clf, &train, cfg.alpha)?;
    let test_m = evaluate(&clf, &test, cfg.alpha)?;
    let mut report = prov;
    report["train"] = dataset_summary(&train, &train_path);
    report["test"] = dataset_summary(&test, &test_path);
    report["train_metrics"] = metrics_json(&train_m);
    report["test_metrics"] = metrics_json(&test_m);
    write_json(&dir.join("eval.json"), &report)?;
    print_line(out, &json!({ "train_metrics": train_m, "test_metrics": test_m, "out_dir": dir.display().to_string() }))?;
    Ok(EXIT_OK)
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse { line: e.line(), message: e.to_string() })
    }
}
