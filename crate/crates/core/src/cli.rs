//! Command-line front end: one binary with `dataset`, `gan`, `clf`, `exp` and
//! `plot` subcommands. An optional `key=value` file supplies defaults for
//! long flags; flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, LevelFilter};

use crate::dataset::{self, BuildConfig, SampleSet};
use crate::error::{Error, Result};
use crate::experiments::{self, ExperimentConfig};
use crate::models::{Baseline, ClassifierConfig};
use crate::trace_store::{self, ToyCorpusConfig};
use crate::training::{
    self, AdamConfig, Checkpoint, ClassifierTrainConfig, GanModels, LabelChoice, ModelSpec, TrainConfig,
};

pub const LOG_ENV: &str = "SEISMOFORGE_LOG";

#[derive(Debug, Parser)]
#[command(name = "seismoforge", version, about = "Conditional GAN synthesis of 3-component seismic waveforms")]
pub struct Cli {
    /// Plain-text file of `key=value` lines used as defaults for long flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace stores and labeled sample sets.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// GAN training and sampling.
    #[command(subcommand)]
    Gan(GanCmd),
    /// Event/noise classifier.
    #[command(subcommand)]
    Clf(ClfCmd),
    /// Evaluation protocols.
    #[command(subcommand)]
    Exp(ExpCmd),
    /// Waveform figure (SVG plus CSV of the plotted series).
    Plot(PlotArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    /// Writes a synthetic toy trace store with a known event catalog.
    Toy {
        #[arg(long, default_value_t = 200)]
        events: usize,
        /// Number of event-free stretches of at least one window.
        #[arg(long, default_value_t = 600)]
        noise: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cuts labeled, standardized windows from a trace store.
    Build {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        per_event: usize,
        #[arg(long, default_value_t = 600)]
        offset_bound: u64,
        /// Draw exactly `--negatives` noise windows instead of balancing.
        #[arg(long)]
        no_balance: bool,
        #[arg(long, default_value_t = 0)]
        negatives: usize,
    },
    /// Re-checks windowing rules and standardization of a sample set.
    Verify {
        #[arg(long)]
        data: PathBuf,
        /// Trace store whose catalog the rules are checked against.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Balanced train/test split.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train_count: usize,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct GanOpts {
    #[arg(long, default_value_t = 10.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta2: f64,
    #[arg(long, default_value_t = 5)]
    pub n_critic: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value = "none")]
    pub baseline: Baseline,
}

impl GanOpts {
    fn train_config(&self, iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            adam: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::gan() },
            n_critic: self.n_critic,
            batch_size: self.batch,
            iterations,
            seed,
            baseline: self.baseline,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum GanCmd {
    /// Trains generator and critic; writes both checkpoints and a loss CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iters: usize,
        #[command(flatten)]
        opts: GanOpts,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
        /// Generator and critic checkpoint paths.
        #[arg(long, num_args = 2, required = true, value_names = ["G", "D"])]
        out: Vec<PathBuf>,
        /// Loss CSV path (default: next to the generator checkpoint).
        #[arg(long)]
        loss_out: Option<PathBuf>,
    },
    /// Samples labeled synthetic windows from a generator checkpoint.
    Generate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "both")]
        label: LabelChoice,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClfCmd {
    /// Trains the event/noise classifier on a sample set
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1500)]
        iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints confusion counts and metrics; optionally writes a report CSV.
    Eval {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, clap::Args)]
pub struct ExpOpts {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub gan_iters: usize,
    #[command(flatten)]
    pub gan: GanOpts,
    #[arg(long, default_value_t = 1500)]
    pub clf_iters: usize,
    #[arg(long, default_value_t = 32)]
    pub clf_batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub clf_lr: f64,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// Grid cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl ExpOpts {
    fn config(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            gan: TrainConfig { log_every: 500, ..self.gan.train_config(self.gan_iters, seed) },
            classifier: ClassifierTrainConfig {
                adam: AdamConfig { lr: self.clf_lr, ..AdamConfig::classifier() },
                iterations: self.clf_iters,
                batch_size: self.clf_batch,
                seed,
                log_every: 500,
            },
            classifier_model: ClassifierConfig::default(),
            baseline: self.gan.baseline,
            seeds: self.seeds,
            master_seed: seed,
            jobs: self.jobs,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum ExpCmd {
    /// Classifiers trained on real vs synthetic data.
    Test2 {
        #[arg(long)]
        train: PathBuf,
        #[command(flatten)]
        opts: ExpOpts,
    },
    /// Synthetic-only classifiers from GANs trained on small real subsets.
    Test3 {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 4000)]
        synth_count: usize,
        #[command(flatten)]
        opts: ExpOpts,
    },
    /// Real subsets augmented with synthetic data at several ratios.
    Test4 {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,10,50,100,200,300")]
        ratios: Vec<usize>,
        #[command(flatten)]
        opts: ExpOpts,
    },
}

#[derive(Debug, clap::Args)]
pub struct PlotArgs {
    /// Sample set holding the window to draw.
    #[arg(long, conflicts_with = "generator")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Draw a fresh sample from this generator instead.
    #[arg(long)]
    pub generator: Option<PathBuf>,
    #[arg(long, default_value = "pos")]
    pub label: LabelChoice,
    /// Apply the display high-pass.
    #[arg(long)]
    pub filtered: bool,
    #[arg(long, default_value_t = experiments::DEFAULT_DISPLAY_CUTOFF_HZ)]
    pub cutoff: f64,
    #[arg(long, default_value_t = 40.0)]
    pub sample_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn init_logging() {
    let level = match std::env::var(LOG_ENV).as_deref() {
        Ok("error") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn walk<'a>(cmd: &'a clap::Command, path: &[String]) -> &'a clap::Command {
    match path.split_first() {
        Some((head, rest)) => match cmd.find_subcommand(head) {
            Some(sub) => walk(sub, rest),
            None => cmd,
        },
        None => cmd,
    }
}

fn all_long_flags(cmd: &clap::Command, out: &mut Vec<String>) {
    out.extend(cmd.get_arguments().filter_map(|a| a.get_long().map(str::to_string)));
    for s in cmd.get_subcommands() {
        all_long_flags(s, out);
    }
}

fn parse_config_file(path: &Path) -> std::result::Result<Vec<(String, String)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config file {}: {e}", path.display()))?;
    let mut kv = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        kv.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(kv)
}

/// Inserts config-file values for long flags the command line does not set,
/// right after the subcommand tokens.
fn merge_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut config = None;
    for (i, a) in strs.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = strs.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = config else { return Ok(args) };
    let kv = parse_config_file(&path)?;

    let root = Cli::command();
    let mut sub_path = Vec::new();
    let mut insert_at = strs.len();
    let mut cur = &root;
    for (i, a) in strs.iter().enumerate().skip(1) {
        if let Some(sub) = cur.find_subcommand(a) {
            sub_path.push(a.clone());
            cur = sub;
            insert_at = i + 1;
            if cur.get_subcommands().next().is_none() {
                break;
            }
        }
    }
    let leaf = walk(&root, &sub_path);
    let given: Vec<String> = strs
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut known = Vec::new();
    all_long_flags(&root, &mut known);

    let mut extra: Vec<OsString> = Vec::new();
    for (k, v) in kv {
        if k == "config" || given.contains(&k) {
            continue;
        }
        if !known.contains(&k) {
            return Err(format!("unknown key {k:?} in config file {}", path.display()));
        }
        let arg = leaf
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(k.as_str()));
        let Some(arg) = arg else { continue };
        let flag = OsString::from(format!("--{k}"));
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match v.as_str() {
                "true" | "1" | "yes" => extra.push(flag),
                "false" | "0" | "no" => {}
                _ => return Err(format!("config key {k:?} expects true or false, got {v:?}")),
            }
        } else if arg.get_num_args().map(|r| r.max_values() > 1).unwrap_or(false) {
            extra.push(flag);
            extra.extend(v.split_whitespace().map(OsString::from));
        } else {
            extra.push(flag);
            extra.push(OsString::from(v));
        }
    }
    let mut out = args;
    let tail = out.split_off(insert_at.min(out.len()));
    out.extend(extra);
    out.extend(tail);
    Ok(out)
}

/// Parses and runs; returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString>,
{
    init_logging();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let merged = match merge_config(args) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            return 2;
        }
    };
    let cli = match Cli::command().try_get_matches_from(merged).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return 2;
        }
    };
    info!("resolved configuration: {cli:?}");
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("seismoforge: error kind={} message={:?}", e.kind(), e.to_string());
            1
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    match &cli.command {
        Command::Dataset(cmd) => dataset_cmd(cmd, seed),
        Command::Gan(cmd) => gan_cmd(cmd, seed),
        Command::Clf(cmd) => clf_cmd(cmd, seed),
        Command::Exp(cmd) => exp_cmd(cmd, seed),
        Command::Plot(args) => plot_cmd(args, seed),
    }
}

fn dataset_cmd(cmd: &DatasetCmd, seed: u64) -> Result<()> {
    match cmd {
        DatasetCmd::Toy { events, noise, out } => {
            let cfg = ToyCorpusConfig { n_events: *events, n_noise_windows: *noise, seed, ..Default::default() };
            let (trace, catalog) = trace_store::make_toy_corpus(&cfg)?;
            trace_store::write_trace(&trace, &catalog, out)?;
            info!("wrote {} ({} samples, {} events)", out.display(), trace.n_samples(), catalog.len());
            Ok(())
        }
        DatasetCmd::Build { trace, out, per_event, offset_bound, no_balance, negatives } => {
            let (tr, catalog) = trace_store::read_trace(trace)?;
            let cfg = BuildConfig {
                per_event: *per_event,
                offset_bound: *offset_bound,
                balance: !no_balance,
                negatives: *negatives,
                seed,
            };
            let set = dataset::build_sample_set(&tr, &catalog, &cfg)?;
            dataset::write_sample_set(&set, out)?;
            info!("wrote {} ({} positives, {} negatives)", out.display(), set.positive_count(), set.negative_count());
            Ok(())
        }
        DatasetCmd::Verify { data, trace } => {
            let set = dataset::read_sample_set(data)?;
            let catalog = match trace {
                Some(p) => Some(trace_store::read_trace(p)?.1),
                None => None,
            };
            let report = dataset::verify_sample_set(&set, catalog.as_ref());
            println!("{report:?}");
            if report.is_ok() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{} failed verification: {report:?}", data.display())))
            }
        }
        DatasetCmd::Split { data, train_count, train_out, test_out } => {
            let set = dataset::read_sample_set(data)?;
            let (train, test) = dataset::split(&set, *train_count, seed)?;
            dataset::write_sample_set(&train, train_out)?;
            dataset::write_sample_set(&test, test_out)?;
            info!("split {} into {} train and {} test samples", data.display(), train.len(), test.len());
            Ok(())
        }
    }
}

fn train_and_save<T: crate::tensor::Real>(data: &SampleSet, cfg: &TrainConfig, g_out: &Path, d_out: &Path, loss_out: &Path) -> Result<()> {
    let models = GanModels::<T>::for_baseline(cfg.baseline, cfg.seed)?;
    let out = training::train_gan(data, models, cfg)?;
    let echo = vec![
        ("lambda".to_string(), cfg.lambda.to_string()),
        ("lr".to_string(), cfg.adam.lr.to_string()),
        ("beta1".to_string(), cfg.adam.beta1.to_string()),
        ("beta2".to_string(), cfg.adam.beta2.to_string()),
        ("n_critic".to_string(), cfg.n_critic.to_string()),
        ("batch_size".to_string(), cfg.batch_size.to_string()),
        ("baseline".to_string(), cfg.baseline.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("precision".to_string(), T::NAME.to_string()),
    ];
    let iteration = cfg.iterations as u64;
    let mut g = Checkpoint::new(ModelSpec::Generator(out.models.generator.cfg.clone()), &out.models.g_params).with_rng(&out.rng);
    g.iteration = iteration;
    g.extra = echo.clone();
    let mut d = Checkpoint::new(ModelSpec::Discriminator(out.models.discriminator.cfg.clone()), &out.models.d_params)
        .with_rng(&out.rng);
    d.iteration = iteration;
    d.extra = echo;
    g.save(g_out)?;
    d.save(d_out)?;
    write_text(loss_out, &training::loss_csv(&out.curve))
}

fn gan_cmd(cmd: &GanCmd, seed: u64) -> Result<()> {
    match cmd {
        GanCmd::Train { data, iters, opts, precision, out, loss_out } => {
            let [g_out, d_out] = out.as_slice() else {
                return Err(Error::InvalidConfig("--out needs a generator and a critic path".into()));
            };
            let set = dataset::read_sample_set(data)?;
            let cfg = opts.train_config(*iters, seed);
            cfg.validate()?;
            let loss_out = loss_out.clone().unwrap_or_else(|| sibling(g_out, ".loss.csv"));
            match precision {
                Precision::F32 => train_and_save::<f32>(&set, &cfg, g_out, d_out, &loss_out),
                Precision::F64 => train_and_save::<f64>(&set, &cfg, g_out, d_out, &loss_out),
            }
        }
        GanCmd::Generate { generator, count, label, out } => {
            let ck = Checkpoint::load(generator)?;
            let gen = ck.generator()?;
            let set = training::generate(&gen, &ck.params, *count, *label, seed)?;
            dataset::write_sample_set(&set, out)?;
            info!("wrote {} synthetic samples to {}", set.len(), out.display());
            Ok(())
        }
    }
}

fn clf_cmd(cmd: &ClfCmd, seed: u64) -> Result<()> {
    match cmd {
        ClfCmd::Train { data, iters, lr, batch, out } => {
            let set = dataset::read_sample_set(data)?;
            let cfg = ClassifierTrainConfig {
                adam: AdamConfig { lr: *lr, ..AdamConfig::classifier() },
                iterations: *iters,
                batch_size: *batch,
                seed,
                ..Default::default()
            };
            let res = training::train_classifier::<f32>(&set, ClassifierConfig::default(), &cfg)?;
            let mut ck = Checkpoint::new(ModelSpec::Classifier(res.classifier.cfg.clone()), &res.params);
            ck.iteration = *iters as u64;
            ck.extra = vec![("lr".into(), lr.to_string()), ("batch_size".into(), batch.to_string()), ("seed".into(), seed.to_string())];
            ck.save(out)
        }
        ClfCmd::Eval { classifier, data, out } => {
            let ck = Checkpoint::load(classifier)?;
            let clf = ck.classifier()?;
            let set = dataset::read_sample_set(data)?;
            let report = experiments::evaluate(&clf, &ck.params, &set, "eval")?;
            let c = &report.counts;
            println!(
                "tp={} tn={} fp={} fn={} accuracy={} precision={} recall={}",
                c.tp, c.tn, c.fp, c.fn_, report.accuracy, report.precision, report.recall
            );
            if let Some(p) = out {
                let row = experiments::ReportRow { experiment: "eval".into(), size: set.len(), ratio: None, seed: 0, report, improved: None };
                write_text(p, &experiments::report_csv(&[row]))?;
            }
            Ok(())
        }
    }
}

fn write_reports(out: &Path, rows: &[experiments::ReportRow]) -> Result<()> {
    write_text(out, &experiments::report_csv(rows))?;
    write_text(&sibling(out, ".mean.csv"), &experiments::mean_csv(rows))
}

fn exp_cmd(cmd: &ExpCmd, seed: u64) -> Result<()> {
    match cmd {
        ExpCmd::Test2 { train, opts } => {
            let train = dataset::read_sample_set(train)?;
            let test = dataset::read_sample_set(&opts.test)?;
            let rows = experiments::test2_synthetic_quality(&train, &test, &opts.config(seed))?;
            write_reports(&opts.out, &rows)
        }
        ExpCmd::Test3 { pool, sizes, synth_count, opts } => {
            let pool = dataset::read_sample_set(pool)?;
            let test = dataset::read_sample_set(&opts.test)?;
            let rows = experiments::test3_robustness(&pool, sizes, *synth_count, &test, &opts.config(seed))?;
            write_reports(&opts.out, &rows)
        }
        ExpCmd::Test4 { pool, sizes, ratios, opts } => {
            let pool = dataset::read_sample_set(pool)?;
            let test = dataset::read_sample_set(&opts.test)?;
            let rows = experiments::test4_augmentation(&pool, sizes, ratios, &test, &opts.config(seed))?;
            write_reports(&opts.out, &rows)
        }
    }
}

fn plot_cmd(args: &PlotArgs, seed: u64) -> Result<()> {
    let sample = match (&args.data, &args.generator) {
        (Some(p), _) => {
            let set = dataset::read_sample_set(p)?;
            set.samples()
                .get(args.index)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("index {} out of range for {} samples", args.index, set.len())))?
        }
        (None, Some(p)) => {
            let ck = Checkpoint::load(p)?;
            let label = match args.label {
                LabelChoice::Both => LabelChoice::Positive,
                l => l,
            };
            let set = training::generate(&ck.generator()?, &ck.params, 1, label, seed)?;
            set.into_samples().remove(0)
        }
        (None, None) => return Err(Error::InvalidConfig("plot needs --data or --generator".into())),
    };
    let high_pass = args.filtered.then_some((args.sample_rate, args.cutoff));
    experiments::emit_waveform_figure(&sample, high_pass, &args.out)?;
    info!("wrote {} and {}", args.out.display(), args.out.with_extension("csv").display());
    Ok(())
}
