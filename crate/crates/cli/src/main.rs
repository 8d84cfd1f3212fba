//! `dgtn`: synthesize data, train, evaluate, predict, verify the diffusion theory,
//! and time the diffusion step count.
//!
//! Exit codes: 0 ok, 1 usage, 2 data, 3 numeric, 4 failed verification.

mod run_config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgtn::model::{checkpoint, prepare_dataset, predict, Coupling, ModelConfig};
use dgtn::protein_io::{synthesize_dataset, Dataset, SyntheticSpec};
use dgtn::timing::{time_diffusion_steps, timing_tsv, DEFAULT_STEPS};
use dgtn::train::{evaluate, train_with, EPOCH_LOG_HEADER};
use dgtn::verify::{run_all, VerifyConfig};
use dgtn::{par, Error};

use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dgtn", version, about = "Diffused graph-transformer network for mutation ddG prediction")]
struct Cli {
    /// `key = value` config file (model.*, diffusion.*, features.*, graph.*, train.*)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch-parallel sections
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output path (directory for synth, file otherwise)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic structures (.dgs) and a mutation dataset (.dgm)
    Synth(SynthArgs),
    /// Train a model; streams the epoch log to stdout and writes a checkpoint
    Train(TrainArgs),
    /// Print metrics of a checkpoint on a labelled dataset
    Eval(DataArgs),
    /// Write predictions as TSV
    Predict(DataArgs),
    /// Run the fixed-point, rate, Lipschitz and gradient checks
    Verify(VerifyArgs),
    /// Time one forward pass per diffusion step count
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Protein length (minimum of the range when --len-max is given)
    #[arg(long, default_value_t = 24)]
    len: usize,
    #[arg(long)]
    len_max: Option<usize>,
    /// Weight of the sequence-structure cross term
    #[arg(long, default_value_t = 1.0)]
    coupling: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Mutation dataset (.dgm); structures are read from the same directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// learned, bypass, or fixed(beta,gamma)
    #[arg(long)]
    coupling: Option<Coupling>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    sizes: Vec<usize>,
    /// Random instances per suite
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Diffusion rates of the fixed-point and rate suites
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,0.8")]
    beta: Vec<f64>,
    /// Spectral radius imposed on the operator in the literal rate check
    #[arg(long, default_value_t = 0.9)]
    force_spectral: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_STEPS)]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    len: usize,
    /// Timed passes per step count (median reported)
    #[arg(long, default_value_t = 15)]
    repeats: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Verify(_) => 4,
            Failure::Core(e) => match e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) => 1,
                Error::NonFinite(_)
                | Error::Singular { .. }
                | Error::NoConvergence { .. }
                | Error::ZeroDegree(_)
                | Error::AllBelowThreshold
                | Error::DegenerateResidual(_)
                | Error::BoundViolated { .. }
                | Error::NonStochasticOverride { .. }
                | Error::ShapeMismatch { .. }
                | Error::MissingParam(_)
                | Error::EmptyBatch => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Verify(n) => write!(f, "{n} check(s) failed"),
        }
    }
}

type CliResult = Result<(), Failure>;

fn require_file(path: &Path, what: &str) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult {
    let spec = SyntheticSpec {
        seed: cli.seed.unwrap_or(0),
        n_samples: a.n,
        len_min: a.len,
        len_max: a.len_max.unwrap_or(a.len),
        coupling: a.coupling,
        noise_sd: a.noise,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    for p in synthesize_dataset(&spec)?.write(&dir, "dataset.dgm")? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_config(cli: &Cli) -> Result<RunConfig, Failure> {
    if let Some(p) = &cli.config {
        require_file(p, "config file")?;
    }
    let mut rc = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        rc.model.seed = s;
        rc.train.seed = s;
    }
    Ok(rc)
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult {
    let mut rc = run_config(cli)?;
    if let Some(v) = a.epochs {
        rc.train.max_epochs = v;
        rc.train.patience = rc.train.patience.min(v);
    }
    if let Some(v) = a.lr {
        rc.train.lr = v;
    }
    if let Some(v) = a.batch {
        rc.train.batch = v;
    }
    if let Some(v) = a.patience {
        rc.train.patience = v;
    }
    if let Some(v) = a.dropout {
        rc.model.dropout = v;
    }
    if let Some(v) = a.coupling {
        rc.model.coupling = v;
    }
    rc.validate()?;
    require_file(&a.data, "dataset")?;
    let data = Dataset::load(&a.data)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{EPOCH_LOG_HEADER}")?;
    let outcome = train_with(&data, &rc.model, &rc.train, |e| {
        let _ = writeln!(stdout, "{}", e.tsv_line());
        let _ = stdout.flush();
    })?;
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("model.dgt"));
    checkpoint::save(&path, &outcome.params, &outcome.model)?;
    eprintln!("best epoch {} of {}, {} steps; wrote {}", outcome.best_epoch, outcome.log.len(), outcome.steps, path.display());
    Ok(())
}

fn load_model(a: &DataArgs) -> Result<(dgtn::numerics::ParamStore, ModelConfig, Dataset), Failure> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.data, "dataset")?;
    let (params, model) = checkpoint::load(&a.checkpoint)?;
    Ok((params, model, Dataset::load(&a.data)?))
}

fn eval(cli: &Cli, a: &DataArgs) -> CliResult {
    let (params, model, data) = load_model(a)?;
    emit(cli.out.as_deref(), &format!("{}\n", evaluate(&data, &params, &model)?))
}

fn predict_cmd(cli: &Cli, a: &DataArgs) -> CliResult {
    let (params, model, data) = load_model(a)?;
    let prepared = prepare_dataset(&data, &model)?;
    let mut out = String::from("structure_id\tposition\twt\tmut\tddg_pred\n");
    for r in &data.records {
        let y = predict(&params, &model, &prepared[&r.structure_id], r)?;
        out.push_str(&format!("{}\t{}\t{}\t{}\t{y}\n", r.structure_id, r.position, r.wt.letter(), r.mutant.letter()));
    }
    emit(cli.out.as_deref(), &out)
}

fn verify(cli: &Cli, a: &VerifyArgs) -> CliResult {
    if a.trials == 0 {
        return Err(Failure::Usage("--trials must be positive".into()));
    }
    let cfg = VerifyConfig {
        seed: cli.seed.unwrap_or(0),
        instances: a.trials,
        sizes: a.sizes.clone(),
        betas: a.beta.clone(),
        lipschitz_pairs: 2 * a.trials,
        force_spectral: a.force_spectral,
        ..VerifyConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = run_all(&cfg)?;
    emit(cli.out.as_deref(), &report.to_string())?;
    let failed = report.tally("").1;
    if failed > 0 {
        return Err(Failure::Verify(failed));
    }
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> CliResult {
    let rc = run_config(cli)?;
    rc.validate()?;
    let rows = time_diffusion_steps(&rc.model, &a.steps, a.len, a.repeats, cli.seed.unwrap_or(0))
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Core(other),
        })?;
    emit(cli.out.as_deref(), &timing_tsv(&rows))
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Predict(a) => predict_cmd(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Bench(a) => bench(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.threads == 0 {
        eprintln!("usage: --threads must be positive");
        return ExitCode::from(1);
    }
    match par::with_threads(cli.threads, || run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dgtn: {f}");
            ExitCode::from(f.code())
        }
    }
}
