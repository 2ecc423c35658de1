use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradleak::attack::{AttackConfig, Method, Optimizer, DEFAULT_THRESHOLDS};
use gradleak::harness::{export_image, extract_sample_label, run_bench, run_trial, BenchConfig, DatasetSpec};
use gradleak::Error;

/// Label extraction and image reconstruction from shared gradients.
#[derive(Parser, Debug)]
#[command(name = "gradleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the label recovered from the gradients of one sample.
    ExtractLabel {
        #[arg(long)]
        dataset: DatasetSpec,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
    },
    /// Reconstruct one sample; writes trajectory.csv and snapshot images.
    Attack(AttackArgs),
    /// Run many trials and write summary.csv and trials.csv.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long, default_value = "idlg")]
    method: Method,
    #[arg(long)]
    dataset: DatasetSpec,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Trial seed: the model uses it, the dummy uses seed + 1.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value = "lbfgs")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    dataset: DatasetSpec,
    #[arg(long, value_delimiter = ',', default_value = "idlg,dlg")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, default_value = "lbfgs")]
    optimizer: Optimizer,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long)]
    out: PathBuf,
}

fn attack(args: AttackArgs) -> Result<(), Error> {
    let dataset = args.dataset.load()?;
    let (_, label) = dataset.sample(args.index)?;
    let template = AttackConfig {
        method: args.method,
        iterations: args.iters,
        optimizer: args.optimizer,
        learning_rate: args.lr,
        snapshot_every: args.snapshot_every,
        ..AttackConfig::default()
    };
    let report = run_trial(&dataset, args.index, args.seed, &template)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mses = report.mse_trajectory.as_deref().unwrap_or(&[]);
    let mut csv = String::from("iteration,loss,mse\n");
    for (t, loss) in report.loss_trajectory.iter().enumerate() {
        let _ = writeln!(csv, "{t},{loss},{}", mses[t]);
    }
    let path = args.out.join("trajectory.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;

    let ext = if dataset.channels == 1 { "pgm" } else { "ppm" };
    for (t, img) in &report.snapshots {
        export_image(img, args.out.join(format!("snapshot_{t:04}.{ext}")))?;
    }
    export_image(&report.final_dummy, args.out.join(format!("final.{ext}")))?;

    println!(
        "{} label {} (true {label}){}; final loss {:e}, final mse {:e}",
        report.method,
        report.extracted_label,
        if report.label_exact { "" } else { " [fallback rule]" },
        report.loss_trajectory.last().copied().unwrap_or(f64::NAN),
        report.final_mse().unwrap_or(f64::NAN),
    );
    if !report.fallback_steps.is_empty() {
        println!("line-search fallback at iterations {:?}", report.fallback_steps);
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), Error> {
    let mut config = BenchConfig::new(args.dataset, args.methods, args.trials);
    config.iterations = args.iters;
    config.base_seed = args.seed;
    config.thresholds = args.thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    config.attack.optimizer = args.optimizer;
    config.attack.learning_rate = args.lr;
    config.out_dir = Some(args.out);
    let result = run_bench(&config)?;
    print!("{}", result.summary_csv());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::ExtractLabel {
            dataset,
            index,
            model_seed,
        } => {
            let ds = dataset.load()?;
            let p = extract_sample_label(&ds, index, model_seed)?;
            println!("{}", p.label);
            if !p.exact {
                eprintln!("no unique row satisfied the sign rule; used the fallback ordering");
            }
            Ok(())
        }
        Command::Attack(args) => attack(args),
        Command::Bench(args) => bench(args),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
