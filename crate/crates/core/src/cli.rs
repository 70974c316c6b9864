//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure
//! (I/O, non-finite loss, failed gradient check).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::MiplDataset;
use crate::error::Error;
use crate::eval::{
    self, ablation_table, attention_rows, r_sweep, run_experiment, write_attention_csv, ExperimentConfig, Experiment,
};
use crate::gradcheck::{random_case, DEFAULT_FD_STEP, GRAD_CHECK_TOL};
use crate::losses::{LossCoefficients, Variant};
use crate::model::{ModelParams, Psi1Kind};
use crate::synth::{generate, provenance_path, Provenance, SynthConfig};
use crate::trainer::{train_with_eval, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (dataset format mipl-v1, checkpoint format elimipl-ckpt-v1)"
);

#[derive(Parser, Debug)]
#[command(name = "elimipl", version = VERSION, about = "Multi-instance partial-label learning")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its provenance sidecar.
    Generate(GenerateArgs),
    /// Train one model and write a checkpoint and per-epoch log.
    Train(TrainCmd),
    /// Evaluate a checkpoint, or run a repeated-split experiment.
    Eval(EvalCmd),
    /// Compare loss variants under identical seeds and splits.
    Ablate(AblateCmd),
    /// Repeat an experiment over false-positive counts on synthetic data.
    SweepR(SweepCmd),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckCmd),
    /// Write per-instance attention scores of a trained model.
    ExportAttention(ExportCmd),
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    /// Number of classes
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Instance feature dimension
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// Number of bags
    #[arg(long, default_value_t = 500)]
    m: usize,
    /// False-positive labels per bag
    #[arg(long, default_value_t = 1)]
    r: usize,
    #[arg(long, default_value_t = 35)]
    min_bag: usize,
    #[arg(long, default_value_t = 48)]
    max_bag: usize,
    /// Fraction of each bag drawn from the true class
    #[arg(long, default_value_t = 0.5)]
    pos_fraction: f64,
    /// Minimum distance between class centroids
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    /// Instance noise standard deviation
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Classes outside the label space that supply negative instances (0: use non-candidate labels)
    #[arg(long, default_value_t = 0)]
    background_classes: usize,
    #[arg(long, default_value = "synth")]
    name: String,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            name: self.name.clone(),
            k: self.k,
            d: self.d,
            m: self.m,
            r: self.r,
            bag_size: (self.min_bag, self.max_bag),
            pos_fraction: self.pos_fraction,
            cluster_separation: self.separation,
            noise_sigma: self.sigma,
            background_classes: self.background_classes,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset path; provenance goes to `<stem>.provenance.jsonl` next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// cli | ma_sp | ma_in | ma | ce_sp_in | ce
    #[arg(long, default_value = "cli")]
    variant: Variant,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Initial learning rate
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Sparsity loss weight
    #[arg(long, default_value_t = 0.1)]
    mu: f64,
    /// Inhibition loss weight
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Embedding width l
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    /// Attention hidden width (defaults to the embedding width)
    #[arg(long)]
    attention_dim: Option<usize>,
    /// identity | conv
    #[arg(long, default_value = "identity")]
    psi1: Psi1Kind,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            mu: self.mu,
            gamma: self.gamma,
            embed_dim: self.embed_dim,
            attention_dim: self.attention_dim,
            psi1: self.psi1,
            variant: self.variant,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Optional held-out set evaluated after every epoch
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch CSV log output
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ExperimentArgs {
    /// Number of runs; run i uses seed `seed + i`
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// First run seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training fraction of each split
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    /// Per-run results CSV
    #[arg(long)]
    results: Option<PathBuf>,
    /// mean/std summary CSV
    #[arg(long)]
    summary: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self, train: TrainConfig) -> ExperimentConfig {
        ExperimentConfig {
            train,
            ratio: self.ratio,
            seeds: (self.seed..self.seed + self.seeds).collect(),
        }
    }
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    /// Evaluate this checkpoint on the whole dataset instead of running an experiment
    #[arg(long, conflicts_with_all = ["seeds", "ratio"])]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variants
    #[arg(long, value_delimiter = ',', default_value = "cli,ma_sp,ma_in,ma,ce_sp_in,ce")]
    variants: Vec<Variant>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args, Debug)]
struct SweepCmd {
    /// Comma-separated false-positive counts
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    r_values: Vec<usize>,
    /// Seed for data generation
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[command(flatten)]
    synth: SweepSynthArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    exp: ExperimentArgs,
}

/// Synthetic settings for sweeps; `r` comes from `--r-values`.
#[derive(Args, Debug, Clone)]
struct SweepSynthArgs {
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 500)]
    m: usize,
    #[arg(long, default_value_t = 35)]
    min_bag: usize,
    #[arg(long, default_value_t = 48)]
    max_bag: usize,
    #[arg(long, default_value_t = 0.5)]
    pos_fraction: f64,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Classes outside the label space that supply negative instances (0: use non-candidate labels)
    #[arg(long, default_value_t = 0)]
    background_classes: usize,
    #[arg(long, default_value = "synth")]
    name: String,
}

#[derive(Args, Debug)]
struct GradcheckCmd {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random small configurations
    #[arg(long, default_value_t = 20)]
    cases: u64,
    #[arg(long, default_value_t = DEFAULT_FD_STEP)]
    fd_step: f64,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Args, Debug)]
struct ExportCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Provenance sidecar; adds a provenance_class column
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_runtime() {
            Failure::Runtime(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Turns `key=value` lines into `--key=value` arguments.
fn config_file_args(path: &Path) -> std::result::Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("config file {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Failure::Invalid(format!("{}:{}: expected key=value, got {line:?}", path.display(), i + 1))
        })?;
        let key = key.trim().trim_start_matches("--");
        if key.is_empty() || key == "config" {
            return Err(Failure::Invalid(format!("{}:{}: invalid key {key:?}", path.display(), i + 1)));
        }
        out.push(format!("--{key}={}", value.trim()));
    }
    Ok(out)
}

/// Splices `--config FILE` contents in right after the subcommand, so that
/// flags given on the command line (which come later) take precedence.
fn expand_config(argv: Vec<String>) -> std::result::Result<Vec<String>, Failure> {
    let mut config = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--config" {
            let v = it.next().ok_or_else(|| Failure::Invalid("--config needs a path".into()))?;
            config = Some(PathBuf::from(v));
        } else if let Some(v) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else {
            rest.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let extra = config_file_args(&path)?;
    let sub = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 2);
    let at = sub.ok_or_else(|| Failure::Invalid("--config given without a subcommand".into()))?;
    rest.splice(at..at, extra);
    Ok(rest)
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let result = expand_config(argv).and_then(|argv| match Cli::try_parse_from(argv) {
        Ok(cli) => run(cli.command),
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(()),
                _ => Err(Failure::Invalid(String::new())),
            }
        }
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            EXIT_INVALID
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepR(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportAttention(a) => cmd_export(a),
    }
}

fn cmd_generate(a: GenerateArgs) -> CmdResult {
    let out = generate(&a.synth.config(a.seed))?;
    out.dataset.save(&a.out)?;
    let prov = provenance_path(&a.out);
    out.provenance.save(&prov)?;
    println!(
        "wrote {} bags (k={}, d={}, r={}) to {} and provenance to {}",
        out.dataset.len(),
        out.dataset.k(),
        out.dataset.d(),
        a.synth.r,
        a.out.display(),
        prov.display()
    );
    Ok(())
}

fn cmd_train(a: TrainCmd) -> CmdResult {
    let data = MiplDataset::load(&a.data)?;
    let test = a.test.as_ref().map(MiplDataset::load).transpose()?;
    let cfg = a.train.config(a.seed);
    cfg.validate()?;
    let model = cfg.init_model(&data, a.seed)?;
    let report = train_with_eval(&data, model, &cfg, test.as_ref())?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3} lr {:.5} loss {:.5} (ma {:.5} sp {:.5} in {:.5}){}{}",
            e.epoch,
            e.lr,
            e.loss.total,
            e.loss.ma,
            e.loss.sp,
            e.loss.in_,
            e.train.map(|x| format!(" train_acc {:.3}", x.accuracy)).unwrap_or_default(),
            e.test.map(|x| format!(" test_acc {:.3}", x.accuracy)).unwrap_or_default(),
        );
    }
    if let Some(path) = &a.out {
        report.params.save(path)?;
    }
    if let Some(path) = &a.log {
        report.save_log(path)?;
    }
    let last = report.last();
    println!(
        "trained {} epochs ({} steps) final loss {}{}",
        report.epochs.len(),
        report.optimizer_steps,
        last.loss.total,
        last.test.map(|x| format!(" test_acc {}", x.accuracy)).unwrap_or_default()
    );
    Ok(())
}

fn create(path: &Path) -> std::result::Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| io_fail(path, e))
}

/// Writes results and summary CSVs for experiments in the given order.
fn emit(exps: &[&Experiment], results: Option<&PathBuf>, summary: Option<&PathBuf>) -> CmdResult {
    if let Some(path) = results {
        let mut w = create(path)?;
        let mut write = || -> std::io::Result<()> {
            eval::write_results_header(&mut w)?;
            for e in exps {
                eval::write_result_rows(&mut w, &e.runs)?;
            }
            w.flush()
        };
        write().map_err(|e| io_fail(path, e))?;
    }
    let mut stdout = std::io::stdout().lock();
    let write_summary = |w: &mut dyn Write| -> std::io::Result<()> {
        eval::write_summary_header(&mut *w)?;
        for e in exps {
            eval::write_summary_rows(&mut *w, e)?;
        }
        w.flush()
    };
    match summary {
        Some(path) => {
            let mut w = create(path)?;
            write_summary(&mut w).map_err(|e| io_fail(path, e))?;
        }
        None => write_summary(&mut stdout).map_err(|e| Failure::Runtime(e.to_string()))?,
    }
    Ok(())
}

fn cmd_eval(a: EvalCmd) -> CmdResult {
    let data = MiplDataset::load(&a.data)?;
    if let Some(ckpt) = &a.ckpt {
        let params = ModelParams::load(ckpt)?;
        let e = eval::evaluate(&params, &data)?;
        println!("accuracy,mean_prob_true,mean_prob_false_cand,mean_prob_noncand");
        println!(
            "{},{},{},{}",
            e.accuracy, e.diagnostics.mean_prob_true, e.diagnostics.mean_prob_false_cand, e.diagnostics.mean_prob_noncand
        );
        return Ok(());
    }
    let cfg = a.exp.config(a.train.config(a.exp.seed));
    let exp = run_experiment(&data, &cfg)?;
    emit(&[&exp], a.exp.results.as_ref(), a.exp.summary.as_ref())
}

fn cmd_ablate(a: AblateCmd) -> CmdResult {
    if a.variants.is_empty() {
        return Err(Failure::Invalid("no variants given".into()));
    }
    let data = MiplDataset::load(&a.data)?;
    let cfg = a.exp.config(a.train.config(a.exp.seed));
    let table = ablation_table(&data, &a.variants, &cfg)?;
    let exps: Vec<&Experiment> = table.iter().map(|(_, e)| e).collect();
    emit(&exps, a.exp.results.as_ref(), a.exp.summary.as_ref())
}

fn cmd_sweep(a: SweepCmd) -> CmdResult {
    let s = &a.synth;
    let base = SynthConfig {
        name: s.name.clone(),
        k: s.k,
        d: s.d,
        m: s.m,
        r: 1,
        bag_size: (s.min_bag, s.max_bag),
        pos_fraction: s.pos_fraction,
        cluster_separation: s.separation,
        noise_sigma: s.sigma,
        background_classes: s.background_classes,
        seed: a.data_seed,
    };
    let cfg = a.exp.config(a.train.config(a.exp.seed));
    let table = r_sweep(&base, &a.r_values, &cfg)?;
    let exps: Vec<&Experiment> = table.iter().map(|(_, e)| e).collect();
    emit(&exps, a.exp.results.as_ref(), a.exp.summary.as_ref())?;
    let means: Vec<f64> = table.iter().map(|(_, e)| e.summary.mean_acc).collect();
    if means.windows(2).any(|w| w[1] > w[0]) {
        eprintln!("note: mean accuracy is not monotonically nonincreasing in r: {means:?}");
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckCmd) -> CmdResult {
    if !(a.fd_step > 0.0) {
        return Err(Failure::Invalid(format!("--fd-step must be > 0, got {}", a.fd_step)));
    }
    let objectives = [
        ("mapping", LossCoefficients { ma: 1.0, mu: 0.0, gamma: 0.0 }),
        ("sparsity", LossCoefficients { ma: 0.0, mu: 1.0, gamma: 0.0 }),
        ("inhibition", LossCoefficients { ma: 0.0, mu: 0.0, gamma: 1.0 }),
        ("fused", LossCoefficients::fused(a.mu, a.gamma)),
    ];
    let mut worst = (0.0f64, String::new());
    for s in a.seed..a.seed + a.cases {
        let case = random_case(s)?;
        for (name, coef) in objectives {
            let rep = case.check(coef, a.fd_step);
            if rep.max_rel_error >= worst.0 {
                worst = (rep.max_rel_error, format!("case {s}, {name} loss, {}", rep.worst));
            }
        }
    }
    println!("max relative error {:e} ({})", worst.0, worst.1);
    if worst.0 < GRAD_CHECK_TOL {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {:e} >= {GRAD_CHECK_TOL:e}", worst.0)))
    }
}

fn cmd_export(a: ExportCmd) -> CmdResult {
    let data = MiplDataset::load(&a.data)?;
    let params = ModelParams::load(&a.ckpt)?;
    let prov = a.provenance.as_ref().map(Provenance::load).transpose()?;
    let rows = attention_rows(&params, &data, prov.as_ref())?;
    let mut w = create(&a.out)?;
    write_attention_csv(&mut w, &rows).map_err(|e| io_fail(&a.out, e))?;
    println!("wrote {} attention scores to {}", rows.len(), a.out.display());
    Ok(())
}
