//! `mindctl`: command-line front end for the intent-recognition pipeline.
//!
//! Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure, 5 protocol.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Failure, RunConfig};
use mindctl::actuation::{
    self, Cadence, CommandProfile, DeviceSimulator, Loopback, ProfileName, ReplayConfig, TcpTransport, Transport,
};
use mindctl::dataset::{self, DatasetSplit, LabelMapping, LabeledSample, CLASSES};
use mindctl::edf;
use mindctl::eval::{self, Confusion, EvalError, Knn};
use mindctl::model::{self, HyperParams, ModelParams, TrainingSchedule};
use mindctl::oa::{self, Execution, OaPlan, RunResults};

#[derive(Parser)]
#[command(name = "mindctl", version, about = "EEG intent recognition with an LSTM classifier")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "MINDCTL_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert EDF runs of one subject into a labelled sample table.
    Ingest(IngestArgs),
    /// Split a sample table into contiguous train and test tables.
    Split(SplitArgs),
    /// Train a classifier on one table per subject.
    Train(TrainArgs),
    /// Run the orthogonal-array experiment and its range analysis.
    Tune(TuneArgs),
    /// Confusion matrix, per-class metrics and ROC curves.
    Eval(EvalArgs),
    /// Per-sample predictions with class probabilities.
    Predict(PredictArgs),
    /// Dump one layer's activations for every sample.
    ExportActivations(ExportArgs),
    /// Drive a device with predictions from recorded EEG.
    Replay(ReplayArgs),
    /// Run a simulated device that speaks the command protocol over TCP.
    ServeDevice(ServeArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// EDF files of one subject; the run number is read from an `R<nn>`
    /// suffix of the file name.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Label mapping TOML; defaults to the motor imagery mapping.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Keep at most this many samples; 0 keeps all.
    #[arg(long, default_value_t = dataset::SAMPLES_PER_SUBJECT)]
    limit: usize,
    /// Standardise each channel.
    #[arg(long)]
    zscore: bool,
    #[arg(long, default_value = "dataset.csv")]
    name: String,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "n-b")]
    n_b: usize,
    /// Shuffle before splitting (breaks temporal order).
    #[arg(long)]
    shuffle_seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long, default_value_t = 100)]
    bptt: usize,
}

impl ScheduleArgs {
    fn schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            max_epochs: self.epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            bptt_window: self.bptt,
            shuffle_seed: None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Sample tables, one per subject.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Re-run from a saved run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = HyperParams::TUNED.lambda)]
    lambda: f64,
    #[arg(long, default_value_t = HyperParams::TUNED.lr)]
    lr: f64,
    #[arg(long, default_value_t = HyperParams::TUNED.width)]
    width: usize,
    #[arg(long, default_value_t = HyperParams::TUNED.layers)]
    layers: usize,
    #[arg(long = "n-b", default_value_t = HyperParams::TUNED.n_b)]
    n_b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct TuneArgs {
    /// Sample tables, one per subject.
    #[arg(long)]
    data: Vec<PathBuf>,
    /// Plan TOML; defaults to the 16-run, five-factor plan.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Take run scores from a `run,accuracy` CSV instead of training.
    #[arg(long)]
    stub_accuracies: Option<PathBuf>,
    /// Train runs on all cores.
    #[arg(long)]
    parallel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip training the best levels afterwards.
    #[arg(long)]
    no_confirm: bool,
    #[command(flatten)]
    schedule: ScheduleArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample tables, one per subject.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Split each table and evaluate only its test part.
    #[arg(long = "n-b")]
    n_b: Option<usize>,
    /// Also run a k-nearest-neighbour baseline trained on the train parts
    /// (requires --n-b).
    #[arg(long)]
    knn: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Layer number; 1 is the input, the last is the output.
    #[arg(long)]
    layer: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Robot,
    Appliance,
}

impl From<ProfileArg> for ProfileName {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Robot => ProfileName::Robot,
            ProfileArg::Appliance => ProfileName::Appliance,
        }
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "appliance")]
    profile: ProfileArg,
    /// Majority-vote window; one command per sample when absent.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 2500)]
    interval_ms: u64,
    /// Replay only the first N samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Send to a device at this address instead of an in-process one.
    #[arg(long)]
    connect: Option<String>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_enum, default_value = "appliance")]
    profile: ProfileArg,
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    /// Exit after this many sessions and write the device log.
    #[arg(long)]
    sessions: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = config::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Cmd::Ingest(a) => ingest(&out, a),
        Cmd::Split(a) => split(&out, a),
        Cmd::Train(a) => train(&out, a),
        Cmd::Tune(a) => tune(&out, a),
        Cmd::Eval(a) => evaluate(&out, a),
        Cmd::Predict(a) => predict(&out, a),
        Cmd::ExportActivations(a) => export(&out, a),
        Cmd::Replay(a) => replay(&out, a),
        Cmd::ServeDevice(a) => serve(&out, a),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_table(path: &Path) -> Result<Vec<LabeledSample>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    dataset::read_table(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    model::load(BufReader::new(file)).with_context(|| format!("loading {}", path.display()))
}

fn run_number(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let pos = stem.rfind(['R', 'r'])?;
    stem[pos + 1..].parse().ok()
}

fn ingest(out: &Path, a: IngestArgs) -> Result<()> {
    let mapping = match &a.mapping {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            LabelMapping::from_toml(&text)?
        }
        None => LabelMapping::default(),
    };
    let mut runs = Vec::new();
    for f in &a.files {
        let run = run_number(f).ok_or_else(|| {
            Failure::Usage.wrap(anyhow!("cannot read a run number from {}", f.display()))
        })?;
        let bytes = fs::read(f).with_context(|| format!("reading {}", f.display()))?;
        let rec = edf::parse_edf(&bytes).with_context(|| format!("parsing {}", f.display()))?;
        runs.push((run, rec));
    }
    runs.sort_by_key(|r| r.0);
    let mut samples = dataset::assemble_subject(&runs, &mapping, (a.limit > 0).then_some(a.limit))?;
    if a.zscore {
        dataset::zscore_per_channel(&mut samples);
    }
    dataset::write_table(&samples, create(out, &a.name)?)?;
    log::info!("{} samples from {} runs", samples.len(), runs.len());
    RunConfig::new("ingest", out)
        .data(a.files)
        .mapping(a.mapping)
        .extra("limit", a.limit)
        .extra("zscore", a.zscore)
        .write()
}

fn split(out: &Path, a: SplitArgs) -> Result<()> {
    let samples = read_table(&a.data)?;
    let s = match a.shuffle_seed {
        Some(seed) => dataset::split_shuffled(&samples, a.n_b, seed)?,
        None => dataset::split(&samples, a.n_b)?,
    };
    dataset::write_table(&s.train, create(out, "train.csv")?)?;
    dataset::write_table(&s.test, create(out, "test.csv")?)?;
    log::info!("{} train, {} test, batch size {}", s.train.len(), s.test.len(), s.batch_size);
    let mut cfg = RunConfig::new("split", out).data(vec![a.data]).extra("n_b", a.n_b);
    if let Some(seed) = a.shuffle_seed {
        cfg = cfg.seed(seed);
    }
    cfg.write()
}

fn subject_splits(tables: &[Vec<LabeledSample>], n_b: usize) -> Result<Vec<DatasetSplit>> {
    tables.iter().map(|t| Ok(dataset::split(t, n_b)?)).collect()
}

fn fit(
    tables: &[Vec<LabeledSample>],
    hp: &HyperParams,
    seed: u64,
    schedule: &TrainingSchedule,
) -> Result<model::TrainOutcome> {
    let splits = subject_splits(tables, hp.n_b)?;
    let initial = model::build(hp, seed).map_err(|e| Failure::Usage.wrap(e.into()))?;
    Ok(model::train(initial, &splits, hp.lambda, hp.lr, schedule)?)
}

fn write_history(out: &Path, name: &str, history: &[model::EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn save_model(out: &Path, name: &str, m: &ModelParams) -> Result<()> {
    let mut w = create(out, name)?;
    model::save(m, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train(out: &Path, a: TrainArgs) -> Result<()> {
    let (data, hp, seed, schedule) = match &a.config {
        Some(p) => {
            let cfg = RunConfig::read(p)?;
            let hp = cfg.hyper.ok_or_else(|| Failure::Usage.wrap(anyhow!("config has no hyperparameters")))?;
            (cfg.paths.data, hp, cfg.seed.unwrap_or(0), cfg.schedule.unwrap_or_default())
        }
        None => {
            let hp = HyperParams { lambda: a.lambda, lr: a.lr, width: a.width, layers: a.layers, n_b: a.n_b };
            (a.data.clone(), hp, a.seed, a.schedule.schedule())
        }
    };
    hp.validate().map_err(|e| Failure::Usage.wrap(e.into()))?;
    if data.is_empty() {
        return Err(Failure::Usage.wrap(anyhow!("no --data tables given")));
    }
    let tables = data.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let outcome = fit(&tables, &hp, seed, &schedule)?;
    save_model(out, "model.mctl", &outcome.model)?;
    write_history(out, "history.csv", &outcome.history)?;
    log::info!(
        "best test accuracy {:.4} at epoch {} of {}",
        outcome.model.meta.test_accuracy.unwrap_or(f64::NAN),
        outcome.best_epoch,
        outcome.epochs
    );
    RunConfig::new("train", out)
        .data(data)
        .checkpoint(out.join("model.mctl"))
        .hyper(hp)
        .schedule(schedule)
        .seed(seed)
        .write()
}

fn write_analysis(out: &Path, analysis: &oa::RangeAnalysis) -> Result<()> {
    let levels = analysis.factors.iter().map(|f| f.sums.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(create(out, "analysis.csv")?);
    let mut header = vec!["factor".to_string()];
    header.extend((1..=levels).map(|l| format!("R{l}")));
    header.extend(["range", "best_level", "best_value"].map(String::from));
    w.write_record(&header)?;
    for f in &analysis.factors {
        let mut row = vec![f.name.clone()];
        row.extend((0..levels).map(|l| f.sums.get(l).map(|s| format!("{s:.6}")).unwrap_or_default()));
        row.push(format!("{:.6}", f.range));
        row.push((f.best_level + 1).to_string());
        row.push(f.best_value.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn tune(out: &Path, a: TuneArgs) -> Result<()> {
    let plan = match &a.plan {
        Some(p) => OaPlan::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| Failure::Usage.wrap(e.into()))?,
        None => OaPlan::l16(),
    };
    let results_path = out.join("tune_results.csv");
    let mut results = if let Some(stub) = &a.stub_accuracies {
        RunResults::read_csv(&plan, File::open(stub).with_context(|| format!("opening {}", stub.display()))?)?
    } else if results_path.exists() {
        log::info!("resuming from {}", results_path.display());
        RunResults::read_csv(&plan, File::open(&results_path)?)?
    } else {
        RunResults::new(plan.runs())
    };

    let schedule = a.schedule.schedule();
    let tables = a.data.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    if a.stub_accuracies.is_none() {
        if tables.is_empty() {
            return Err(Failure::Usage.wrap(anyhow!("no --data tables given")));
        }
        let objective = |run: usize, values: &[f64]| -> Result<f64, String> {
            let hp = HyperParams::from_factor_values(values).map_err(|e| e.to_string())?;
            log::info!("run {run}: {hp:?}");
            let outcome = fit(&tables, &hp, a.seed, &schedule).map_err(|e| format!("{e:#}"))?;
            outcome.model.meta.test_accuracy.ok_or_else(|| "no evaluation".to_string())
        };
        let mode = if a.parallel { Execution::Parallel } else { Execution::Sequential };
        let failures = oa::execute(&plan, &mut results, mode, objective);
        results.write_csv(&plan, create(out, "tune_results.csv")?)?;
        for (run, msg) in &failures {
            log::error!("run {run}: {msg}");
        }
    } else {
        results.write_csv(&plan, create(out, "tune_results.csv")?)?;
    }

    let analysis = oa::range_analysis(&plan, &results)?;
    write_analysis(out, &analysis)?;
    log::info!("best levels {:?}; influence {:?}", analysis.best_values(), analysis.ranking());
    log::info!("savings over full factorial: {:.4}", plan.savings());

    let mut cfg = RunConfig::new("tune", out)
        .data(a.data.clone())
        .schedule(schedule.clone())
        .seed(a.seed)
        .extra("runs", plan.runs());
    if let Some(stub) = &a.stub_accuracies {
        cfg = cfg.extra("stub_accuracies", stub.display());
    }
    if let Some(p) = &a.plan {
        cfg = cfg.extra("plan", p.display());
    }
    if a.stub_accuracies.is_none() && !a.no_confirm {
        let hp = HyperParams::from_factor_values(&analysis.best_values())
            .map_err(|e| Failure::Usage.wrap(e.into()))?;
        let outcome = fit(&tables, &hp, a.seed, &schedule)?;
        save_model(out, "model.mctl", &outcome.model)?;
        write_history(out, "confirm_history.csv", &outcome.history)?;
        log::info!(
            "confirmation run: test accuracy {:.4}",
            outcome.model.meta.test_accuracy.unwrap_or(f64::NAN)
        );
        cfg = cfg.hyper(hp).checkpoint(out.join("model.mctl"));
    }
    cfg.write()
}

fn evaluate(out: &Path, a: EvalArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let tables = a.data.iter().map(|p| read_table(p)).collect::<Result<Vec<_>>>()?;
    let (train_parts, test_parts): (Vec<Vec<LabeledSample>>, Vec<Vec<LabeledSample>>) = match a.n_b {
        Some(n_b) => subject_splits(&tables, n_b)?.into_iter().map(|s| (s.train, s.test)).unzip(),
        None => (Vec::new(), tables),
    };

    let (mut predicted, mut truth, mut scores) = (Vec::new(), Vec::new(), Vec::new());
    for part in &test_parts {
        for (p, s) in m.predict(part)?.iter().zip(part) {
            predicted.push(p.label.index());
            truth.push(s.label.index());
            scores.push(p.scores);
        }
    }
    let confusion = Confusion::from_labels(&predicted, &truth, CLASSES)?;
    let metrics = confusion.metrics();
    let mut auc = Vec::with_capacity(CLASSES);
    for c in 0..CLASSES {
        match eval::one_vs_rest(&scores, &truth, c) {
            Ok(curve) => {
                eval::write_roc_csv(&curve, create(out, &format!("roc_{}.csv", c + 1))?)?;
                auc.push(Some(curve.auc));
            }
            Err(e @ EvalError::UndefinedAuc { .. }) => {
                log::warn!("class {}: {e}", c + 1);
                auc.push(None);
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_confusion(out, "confusion.csv", &confusion)?;
    eval::write_report(&metrics, &auc, create(out, "report.csv")?)?;
    for flag in metrics.flags() {
        log::warn!("{flag}");
    }
    log::info!("accuracy {:.4} on {} samples", metrics.accuracy, truth.len());

    let mut cfg = RunConfig::new("eval", out).data(a.data).checkpoint(a.checkpoint);
    if let Some(n_b) = a.n_b {
        cfg = cfg.extra("n_b", n_b);
    }
    if let Some(k) = a.knn {
        if train_parts.is_empty() {
            return Err(Failure::Usage.wrap(anyhow!("--knn needs --n-b to define the training part")));
        }
        let (mut kp, mut kt) = (Vec::new(), Vec::new());
        for (train, test) in train_parts.into_iter().zip(&test_parts) {
            let knn = Knn::new(train, k).map_err(|e| Failure::Usage.wrap(e.into()))?;
            kp.extend(knn.predict(test));
            kt.extend(test.iter().map(|s| s.label.index()));
        }
        let kc = Confusion::from_labels(&kp, &kt, CLASSES)?;
        write_confusion(out, "knn_confusion.csv", &kc)?;
        eval::write_report(&kc.metrics(), &[], create(out, "knn_report.csv")?)?;
        log::info!("knn(k={k}) accuracy {:.4}", kc.metrics().accuracy);
        cfg = cfg.extra("knn", k);
    }
    cfg.write()
}

fn write_confusion(out: &Path, name: &str, c: &Confusion) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out, name)?);
    let mut header = vec!["predicted\\truth".to_string()];
    header.extend((1..=c.classes()).map(|l| l.to_string()));
    w.write_record(&header)?;
    for (p, row) in c.counts().iter().enumerate() {
        let mut r = vec![(p + 1).to_string()];
        r.extend(row.iter().map(|n| n.to_string()));
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn predict(out: &Path, a: PredictArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let samples = read_table(&a.data)?;
    let preds = m.predict(&samples)?;
    let mut w = csv::Writer::from_writer(create(out, "predictions.csv")?);
    let mut header = vec!["index".to_string(), "label".into(), "predicted".into()];
    header.extend((1..=CLASSES).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (i, (p, s)) in preds.iter().zip(&samples).enumerate() {
        let mut row = vec![i.to_string(), s.label.to_string(), p.label.to_string()];
        row.extend(p.scores.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    RunConfig::new("predict", out).data(vec![a.data]).checkpoint(a.checkpoint).write()
}

fn export(out: &Path, a: ExportArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let samples = read_table(&a.data)?;
    let layers = m.layer_count();
    if a.layer == 0 || a.layer > layers {
        return Err(Failure::Usage.wrap(anyhow!("--layer must be in 1..={layers}")));
    }
    let mut w = create(out, &format!("activations_layer{}.csv", a.layer))?;
    m.export_activations(&samples, a.layer, &mut w)?;
    w.flush()?;
    RunConfig::new("export-activations", out)
        .data(vec![a.data])
        .checkpoint(a.checkpoint)
        .extra("layer", a.layer)
        .write()
}

fn replay(out: &Path, a: ReplayArgs) -> Result<()> {
    let m = load_model(&a.checkpoint)?;
    let mut samples = read_table(&a.data)?;
    if let Some(n) = a.samples {
        samples.truncate(n);
    }
    let profile = CommandProfile::named(a.profile.into());
    let config = ReplayConfig {
        cadence: match a.window {
            Some(window) => Cadence::Majority { window },
            None => Cadence::PerSample,
        },
        start_ms: 0,
        interval_ms: a.interval_ms,
    };
    let device = Arc::new(Mutex::new(DeviceSimulator::new(profile.clone())));
    let mut transport: Box<dyn Transport> = match &a.connect {
        Some(addr) => Box::new(TcpTransport::connect(addr.as_str())?),
        None => Box::new(Loopback::new(Arc::clone(&device))),
    };
    let log = actuation::replay(&m, &samples, &profile, transport.as_mut(), &config)?;
    log.write_transcript(create(out, "transcript.csv")?)?;
    log::info!(
        "{} commands, match rate {:.4}",
        log.entries.len(),
        log.match_rate().unwrap_or(f64::NAN)
    );
    let mut cfg = RunConfig::new("replay", out)
        .data(vec![a.data])
        .checkpoint(a.checkpoint)
        .profile(a.profile.into())
        .extra("interval_ms", a.interval_ms);
    if let Some(w) = a.window {
        cfg = cfg.extra("window", w);
    }
    if let Some(addr) = a.connect {
        cfg = cfg.extra("connect", addr);
    }
    cfg.write()
}

fn serve(out: &Path, a: ServeArgs) -> Result<()> {
    let profile = CommandProfile::named(a.profile.into());
    let device = Arc::new(Mutex::new(DeviceSimulator::new(profile)));
    let listener = TcpListener::bind(&a.bind).with_context(|| format!("binding {}", a.bind))?;
    // Announced on stderr so callers can bind port 0.
    eprintln!("listening on {}", listener.local_addr()?);
    let sessions = actuation::serve(listener, Arc::clone(&device), a.sessions)
        .join()
        .map_err(|_| anyhow!("server thread panicked"))?;
    for (i, s) in sessions.iter().enumerate() {
        match s {
            Ok(n) => log::info!("session {}: {n} commands acknowledged", i + 1),
            Err(e) => log::warn!("session {}: {e}", i + 1),
        }
    }
    let dev = device.lock().map_err(|_| anyhow!("device lock poisoned"))?;
    let mut w = csv::Writer::from_writer(create(out, "device_log.csv")?);
    w.write_record(["t_ms", "action"])?;
    for (t, action) in dev.action_log() {
        w.write_record([t.to_string(), action.text().to_string()])?;
    }
    w.flush()?;
    if let Some(Err(e)) = sessions.into_iter().find(|s| s.is_err()) {
        return Err(Failure::Protocol.wrap(anyhow!(e)));
    }
    RunConfig::new("serve-device", out)
        .profile(a.profile.into())
        .extra("bind", a.bind)
        .write()
}
