use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgc_core::analysis;
use cgc_core::arch::{count_macs, ArchDescriptor, MacConvention};
use cgc_core::cgc::GateOptions;
use cgc_core::gradcheck;
use cgc_core::serialize::Checkpoint;
use cgc_core::train::{self, load_data, Model, TrainConfig};
use cgc_core::Error;

#[derive(Parser)]
#[command(name = "cgc", version, about = "Context-gated convolution: accounting, gradient checks, training, gate analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the parameter and MAC report of an architecture.
    Count(CountArgs),
    /// Run the gradient suite over the gate variants and the sequence layer.
    Gradcheck(GradcheckArgs),
    /// Train a network from a `key = value` config file.
    Train(TrainArgs),
    /// Cluster the gated kernels of a trained checkpoint by class.
    AnalyzeGates(AnalyzeArgs),
}

#[derive(Args)]
struct CountArgs {
    /// Architecture descriptor (JSON).
    #[arg(long)]
    arch: PathBuf,
    /// Gate every convolution with a spatial kernel.
    #[arg(long)]
    cgc: bool,
    /// Gate variant; implies --cgc.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<String>,
    /// Comma-separated stages to gate; implies --cgc.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Per-layer CSV instead of the text table.
    #[arg(long)]
    csv: bool,
    /// Also count the gate multiplication and report every gate MAC.
    #[arg(long)]
    all_macs: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only check this gate variant (plus the sequence layer and linear blocks).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// CIFAR-10 binary directory, for `data = cifar10`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for metrics.csv and model.ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Architecture descriptor; defaults to the one stored in the checkpoint.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// CIFAR-10 binary directory when the checkpoint was trained on CIFAR-10;
    /// synthetic data is regenerated from the checkpoint settings.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Gated layer id; defaults to the deepest one.
    #[arg(long)]
    layer: Option<String>,
    /// Output CSV of the distance matrices.
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<String, String> {
    GateOptions::variant(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn count(a: &CountArgs) -> Result<(), Failure> {
    let net = ArchDescriptor::load(&a.arch)?.build()?;
    let gated = a.cgc || a.variant.is_some() || a.stages.is_some();
    let net = if gated {
        let opts = GateOptions::variant(a.variant.as_deref().unwrap_or("default"))?;
        let stages: Option<BTreeSet<String>> = a.stages.as_ref().map(|s| s.iter().map(|v| v.trim().to_string()).collect());
        net.with_cgc(&opts, stages.as_ref())?
    } else {
        net
    };
    let conv = if a.all_macs { MacConvention::ALL } else { MacConvention::CALIBRATED };
    let report = count_macs(&net, conv);
    print!("{}", if a.csv { report.to_csv() } else { report.to_table() });
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let entries = gradcheck::suite(a.seed)?;
    let keep = |name: &str| match &a.variant {
        Some(v) => !name.starts_with("cgc/") || name == format!("cgc/{v}") || name.starts_with(&format!("cgc/{v}/")),
        None => true,
    };
    let mut failed = Vec::new();
    for e in entries.iter().filter(|e| keep(&e.name)) {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>6} elements  max_rel_error {:.3e}  tol {:.0e}  {verdict}", e.name, e.elements, e.max_rel_error, e.tol);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run_train(a: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = TrainConfig::load(&a.config)?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let out = train::train(&cfg, a.data.as_deref(), a.out.as_deref())?;
    print!("{}", train::metrics_csv(&out.metrics));
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<(), Failure> {
    let ck: Checkpoint<f32> = Checkpoint::load(&a.ckpt)?;
    let desc = match &a.arch {
        Some(p) => ArchDescriptor::load(p)?,
        None => {
            let json = ck.config.get("arch").ok_or_else(|| Failure::Usage("checkpoint has no architecture; pass --arch".into()))?;
            ArchDescriptor::from_json(json)?
        }
    };
    let mut cfg = TrainConfig::default();
    for (k, v) in &ck.config {
        if let Some(key) = k.strip_prefix("train.") {
            cfg.set(key, v)?;
        }
    }
    let net = cfg.network(&desc)?;
    let model = Model::from_checkpoint(&net, &ck)?;
    let (data, _) = load_data::<f32>(&cfg, a.data.as_deref())?;
    let stats = analysis::analyze(&model, &data, a.layer.as_deref())?;
    analysis::export_stats(&stats, &a.out)?;
    println!("classes {}", stats.intra.len());
    println!("frac_inter_gt_intra {:.4}", stats.frac_inter_gt_intra);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Count(a) => count(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Train(a) => run_train(a),
        Command::AnalyzeGates(a) => analyze(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error");
            eprintln!("{}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("{}", m.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
