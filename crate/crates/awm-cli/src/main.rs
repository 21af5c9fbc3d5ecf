//! Command-line harness: training, evaluation, trace extraction, PCA+LDA
//! analysis, parameter counts, the t-sweep experiment, and plot-ready CSV
//! emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use awm::analytics;
use awm::checkpoint::Checkpoint;
use awm::config::ExperimentConfig;
use awm::data::{self, CifarVariant, Dataset, NormStats};
use awm::error::Error;
use awm::net::{Network, NetworkKind};
use awm::train::{evaluate, DataBundle, EpochRecord, Phase, TrainObserver, Trainer};

#[derive(Parser)]
#[command(name = "awm", version, about = "Active weighted mapping experiments on CIFAR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network, writing checkpoints and history records.
    Train(TrainArgs),
    /// Print top-1 test error of a checkpoint.
    Eval(EvalArgs),
    /// Emit the per-image mapping-weight trace CSV for a checkpoint.
    Trace(TraceArgs),
    /// Fit PCA+LDA on traces (or raw pixels) and emit a rank-k curve.
    AnalyzeLda(AnalyzeArgs),
    /// Print the backbone/mapping/total parameter census.
    CountParams(CountParamsArgs),
    /// Train once per alternation period t and report final test errors.
    SweepT(SweepArgs),
    /// Convert run outputs into tidy CSVs for plotting.
    PlotData(PlotArgs),
}

/// Options shared by every run that builds an experiment configuration.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key-value config file; command-line flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (network init, shuffling, augmentation).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    /// cifar10 or cifar100.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory with the CIFAR binary files; omitted means a built-in
    /// deterministic synthetic dataset in the same format.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Alternation period t (0 trains jointly).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated epochs at which the learning rate drops.
    #[arg(long)]
    lr_milestones: Option<String>,
    /// Class-balanced training-subset size per class (0 = full split).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
    /// Cap on test images evaluated per epoch (0 = all).
    #[arg(long)]
    eval_limit: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::parse(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(arch) = &self.arch {
            cfg.network.kind = NetworkKind::parse(arch)?;
        }
        if let Some(depth) = self.depth {
            cfg.network.depth = depth;
        }
        if let Some(ds) = &self.dataset {
            cfg.dataset = CifarVariant::parse(ds)?;
            cfg.network.num_classes = cfg.dataset.num_classes();
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = Some(dir.clone());
        }
        if let Some(t) = self.t {
            cfg.train.alternation = t;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(ms) = &self.lr_milestones {
            cfg.train.lr_milestones = parse_usize_list(ms)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = self.subset {
            cfg.subset_per_class = n;
        }
        if let Some(s) = self.subset_seed {
            cfg.subset_seed = s;
        }
        if let Some(l) = self.eval_limit {
            cfg.train.eval_limit = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output directory for config, history, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Resume from an existing checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the data directory recorded in the checkpoint config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace CSV used to fit the model (and evaluated when --eval-traces
    /// is absent).
    #[arg(long, required_unless_present = "pixels")]
    traces: Option<PathBuf>,
    /// Held-out trace CSV to evaluate instead of the fitting set.
    #[arg(long)]
    eval_traces: Option<PathBuf>,
    /// Final LDA dimensionality.
    #[arg(long, default_value_t = 30)]
    dim: usize,
    /// Run the raw-pixel baseline instead of mapping-weight traces.
    #[arg(long)]
    pixels: bool,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CountParamsArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated alternation periods to sweep.
    #[arg(long, default_value = "0,1,3,5,7,9")]
    values: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory containing history.csv (and optionally traces.csv).
    #[arg(long)]
    history: PathBuf,
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad integer '{v}' in list")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// data loading
// ---------------------------------------------------------------------------

const SYNTH_TRAIN_PER_CLASS: usize = 500;
const SYNTH_TEST_PER_CLASS: usize = 100;
const SYNTH_SEED: u64 = 1_000_001;

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), Error> {
    let (train, test) = match &cfg.data_dir {
        Some(dir) => (
            data::load_split(dir, cfg.dataset, true)?,
            data::load_split(dir, cfg.dataset, false)?,
        ),
        None => {
            if cfg.dataset != CifarVariant::C10 {
                return Err(Error::invalid(
                    "the built-in synthetic dataset only covers the cifar10 format; pass --data-dir",
                ));
            }
            eprintln!("note: no --data-dir given, using the built-in synthetic dataset");
            data::generate_synthetic_split(10, SYNTH_TRAIN_PER_CLASS, SYNTH_TEST_PER_CLASS, SYNTH_SEED)
        }
    };
    let train = if cfg.subset_per_class > 0 {
        data::subset(&train, cfg.subset_per_class, cfg.subset_seed)?
    } else {
        train
    };
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

struct RunLogger {
    out_dir: PathBuf,
    cfg: ExperimentConfig,
    norm: NormStats,
}

impl TrainObserver for RunLogger {
    fn on_epoch_end(&mut self, _net: &Network, record: &EpochRecord) {
        println!("{}", record.to_csv_line());
        // best-effort persistence each epoch; a failed write surfaces on
        // the next explicit save
        let line = format!("{}\n", record.to_csv_line());
        let _ = append_line(&self.out_dir.join("history.csv"), &line);
    }

    fn on_epoch_start(&mut self, _net: &Network, epoch: usize, phase: Phase) {
        eprintln!("epoch {epoch} starting (phase {})", phase.as_str());
        let _ = (epoch, &self.cfg, &self.norm);
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let cfg = args.common.resolve()?;
    std::fs::create_dir_all(&args.out)?;
    let (train_set, test_set) = load_data(&cfg)?;
    let norm = NormStats::compute(&train_set);

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = ck.into_trainer()?;
            // resumed runs continue under the current epoch budget
            t.cfg.epochs = cfg.train.epochs;
            t
        }
        None => {
            let net = Network::build(&cfg.network, cfg.train.seed)?;
            Trainer::new(net, cfg.train.clone())?
        }
    };

    std::fs::write(args.out.join("config.txt"), cfg.serialize())?;
    let mut logger = RunLogger { out_dir: args.out.clone(), cfg: cfg.clone(), norm };
    let bundle = DataBundle { train: &train_set, test: &test_set, norm };

    let result = (|| -> Result<(), Error> {
        while trainer.epoch < trainer.cfg.epochs {
            let phase = awm::train::phase_at_epoch(trainer.cfg.alternation, trainer.epoch);
            logger.on_epoch_start(&trainer.net, trainer.epoch, phase);
            let rec = trainer.run_epoch(&bundle)?;
            logger.on_epoch_end(&trainer.net, &rec);
            Checkpoint::from_trainer(&trainer, &cfg, &norm).save(&args.out.join("last.ckpt"))?;
        }
        Ok(())
    })();
    if let Err(e) = &result {
        // keep a diagnostic snapshot of the failing state
        let _ = Checkpoint::from_trainer(&trainer, &cfg, &norm).save(&args.out.join("failed.ckpt"));
        eprintln!("training aborted: {e}");
    }
    result
}

fn checkpoint_test_set(ck: &Checkpoint, data_dir: &Option<PathBuf>) -> Result<Dataset, Error> {
    let mut cfg = ck.config.clone();
    if let Some(dir) = data_dir {
        cfg.data_dir = Some(dir.clone());
    }
    let (_, test) = load_data(&cfg)?;
    Ok(test)
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let test = checkpoint_test_set(&ck, &args.data_dir)?;
    let trainer = ck.into_trainer()?;
    let err = evaluate(&trainer.net, &test, &ck.norm, 0)?;
    println!("top1_error = {err:.4}");
    Ok(())
}

fn cmd_trace(args: &TraceArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let test = checkpoint_test_set(&ck, &args.data_dir)?;
    let trainer = ck.into_trainer()?;
    let records = analytics::extract_traces(&trainer.net, &test, &ck.norm)?;
    let csv = analytics::traces_to_csv(
        ck.config.network.kind.as_str(),
        ck.config.network.depth,
        &records,
    )?;
    std::fs::write(&args.out, csv)?;
    println!("wrote {} traces to {}", records.len(), args.out.display());
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Error> {
    let curve = if args.pixels {
        let cfg = args.common.resolve()?;
        let (train_set, test_set) = load_data(&cfg)?;
        let norm = NormStats::compute(&train_set);
        let (x_fit, y_fit) = pixel_matrix(&train_set, &norm);
        let (x_eval, y_eval) = pixel_matrix(&test_set, &norm);
        let p = (x_fit.shape()[0] - 1).min(200);
        let d = args.dim.min(cfg.dataset.num_classes() - 1).min(p);
        let model = analytics::fit_pipeline(&x_fit, &y_fit, p, d)?;
        analytics::cmc_curve(&model, &x_eval, &y_eval)?
    } else {
        let path = args.traces.as_ref().expect("clap enforces --traces without --pixels");
        let (_, _, records) = analytics::traces_from_csv(&std::fs::read_to_string(path)?)?;
        let (x_fit, y_fit) = analytics::trace_matrix(&records)?;
        let p = x_fit.shape()[1];
        let classes = {
            let mut c = y_fit.clone();
            c.sort_unstable();
            c.dedup();
            c.len()
        };
        let d = args.dim.min(classes - 1).min(p);
        let model = analytics::fit_pipeline(&x_fit, &y_fit, p, d)?;
        match &args.eval_traces {
            Some(ev) => {
                let (_, _, eval_records) = analytics::traces_from_csv(&std::fs::read_to_string(ev)?)?;
                let (x_eval, y_eval) = analytics::trace_matrix(&eval_records)?;
                analytics::cmc_curve(&model, &x_eval, &y_eval)?
            }
            None => analytics::cmc_curve(&model, &x_fit, &y_fit)?,
        }
    };
    std::fs::write(&args.out, analytics::curve_to_csv(&curve))?;
    println!("rank1_accuracy = {:.4}", curve[0]);
    Ok(())
}

fn pixel_matrix(ds: &Dataset, norm: &NormStats) -> (awm::Tensor, Vec<usize>) {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let (batch, labels) = data::make_batch(ds, &indices, norm, None);
    let flat = batch.reshape(&[ds.len(), data::IMAGE_BYTES]).expect("image size");
    (flat, labels)
}

fn cmd_count_params(args: &CountParamsArgs) -> Result<(), Error> {
    let cfg = args.common.resolve()?;
    let net = Network::build(&cfg.network, cfg.train.seed)?;
    let census = net.count_parameters();
    println!(
        "arch = {} depth = {}\nbackbone = {}\nawm = {}\ntotal = {}",
        cfg.network.kind.as_str(),
        cfg.network.depth,
        census.backbone,
        census.awm,
        census.total
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Error> {
    let base = args.common.resolve()?;
    let values = parse_usize_list(&args.values)?;
    if values.is_empty() {
        return Err(Error::invalid("empty t value list"));
    }
    let (train_set, test_set) = load_data(&base)?;
    let norm = NormStats::compute(&train_set);
    let mut out = String::from("t,final_test_err\n");
    for &t in &values {
        let mut cfg = base.clone();
        cfg.train.alternation = t;
        let net = Network::build(&cfg.network, cfg.train.seed)?;
        let mut trainer = Trainer::new(net, cfg.train.clone())?;
        let bundle = DataBundle { train: &train_set, test: &test_set, norm };
        let history = trainer.train(&bundle, &mut ())?;
        let final_err = history.last().map(|r| r.test_err).unwrap_or(1.0);
        println!("t = {t}: final_test_err = {final_err:.4}");
        out.push_str(&format!("{t},{final_err}\n"));
    }
    std::fs::write(&args.out, out)?;
    Ok(())
}

fn cmd_plot(args: &PlotArgs) -> Result<(), Error> {
    let history_path = args.history.join("history.csv");
    let text = std::fs::read_to_string(&history_path)?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() || line.starts_with("epoch,") {
            continue;
        }
        records.push(EpochRecord::parse_csv_line(line)?);
    }
    let mut err_csv = String::from("epoch,phase,lr,train_err,test_err\n");
    for r in &records {
        err_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.phase.as_str(),
            r.lr,
            1.0 - r.train_acc,
            r.test_err
        ));
    }
    let err_path = args.history.join("plot_error.csv");
    std::fs::write(&err_path, err_csv)?;
    println!("wrote {}", err_path.display());

    let traces_path = args.history.join("traces.csv");
    if traces_path.exists() {
        let (_, _, traces) = analytics::traces_from_csv(&std::fs::read_to_string(&traces_path)?)?;
        let units = traces.first().map(|t| t.lambda1.len()).unwrap_or(0);
        let mut classes: Vec<usize> = traces.iter().map(|t| t.label).collect();
        classes.sort_unstable();
        classes.dedup();
        let mut csv = String::from("unit,class,mean,var\n");
        for u in 0..units {
            for &c in &classes {
                let vals: Vec<f64> = traces
                    .iter()
                    .filter(|t| t.label == c)
                    .map(|t| t.lambda1[u])
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                csv.push_str(&format!("{u},{c},{mean},{var}\n"));
            }
        }
        let lam_path = args.history.join("plot_lambda.csv");
        std::fs::write(&lam_path, csv)?;
        println!("wrote {}", lam_path.display());
    }
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::ShapeMismatch { .. } | Error::Parse { .. } | Error::Checkpoint(_) | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
        Command::AnalyzeLda(a) => cmd_analyze(a),
        Command::CountParams(a) => cmd_count_params(a),
        Command::SweepT(a) => cmd_sweep(a),
        Command::PlotData(a) => cmd_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
