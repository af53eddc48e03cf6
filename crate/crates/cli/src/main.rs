use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfdistill::config::{EvalConfig, RunConfig};
use selfdistill::data::{load_dataset_dir, write_dataset_dir, MultitaskDataset};
use selfdistill::engine::{run_generations, write_manifest, GenerationReport};
use selfdistill::evaluation::{evaluate, write_csvs, EvalOptions, UncertaintyReport};
use selfdistill::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const UNCERTAINTY_REPORT: &str = "uncertainty_report.json";

#[derive(Parser)]
#[command(
    name = "selfdistill",
    version,
    about = "Multi-generation self-distillation of multitask deep ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/OOD JSON-lines files and a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Generator seed; overrides `data_seed`/`seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; defaults to the config's `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the teacher ensemble and all student generations.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master training seed; overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory; defaults to the config's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Members trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score stored checkpoints and write the uncertainty report and CSVs.
    Evaluate(EvaluateArgs),
    /// Re-render the CSVs of a stored uncertainty report.
    Report {
        /// An `uncertainty_report.json`, or the directory holding one.
        #[arg(long)]
        input: PathBuf,
        /// Output directory; defaults to the report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvaluateArgs {
    /// Supplies defaults for the paths and evaluation options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding `gen{k}/member{t}.json`.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `<checkpoints>/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generation used for the OOD section and histograms; defaults to the last.
    #[arg(long)]
    generation: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mc_passes: Option<usize>,
    /// Seed of the validation half split and MC dropout passes.
    #[arg(long)]
    seed: Option<u64>,
}

fn gen_data(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> selfdistill::Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or_else(|| cfg.data_seed());
    let dir = out.unwrap_or(cfg.data_dir);
    let manifest = write_dataset_dir(&cfg.data, seed, &dir)?;
    for f in &manifest.files {
        println!("{}\t{} lines\t{}", dir.join(&f.path).display(), f.lines, f.sha256);
    }
    Ok(())
}

fn load_data(dir: &Path) -> selfdistill::Result<MultitaskDataset> {
    Ok(load_dataset_dir(dir)?.0)
}

fn print_generations(report: &GenerationReport) {
    println!("generation\tmethod\tau_nll\texpr_nll\tvalence_rmse\tarousal_rmse\temotion_total");
    for g in &report.generations {
        for (name, row) in [("single", &g.single_mean), ("ensemble", &g.ensemble)] {
            let u = &row.uncertainty;
            println!(
                "{}\t{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                g.generation, u.au_nll_mean, u.expr_nll, u.valence_rmse, u.arousal_rmse, row.emotion.total
            );
        }
    }
}

fn run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    data: Option<PathBuf>,
    workers: usize,
) -> selfdistill::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let dataset = load_data(data.as_deref().unwrap_or(&cfg.data_dir))?;
    if dataset.dim != cfg.data.dim {
        return Err(Error::Config(format!(
            "config says data.dim = {}, dataset has {} features",
            cfg.data.dim, dataset.dim
        )));
    }
    let report = run_generations(&cfg, &dataset, workers)?;
    print_generations(&report);
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> selfdistill::Result<()> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut eval = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    if let Some(t) = args.tau {
        eval.tau = t;
    }
    if let Some(p) = args.mc_passes {
        eval.mc_passes = p;
    }
    if let Some(s) = args.seed {
        eval.seed = s;
    }
    eval.validate()?;
    let missing = |what: &str| Error::Config(format!("--{what} is required without --config"));
    let checkpoints = match (args.checkpoints, &cfg) {
        (Some(p), _) => p,
        (None, Some(c)) => c.out_dir.clone(),
        (None, None) => return Err(missing("checkpoints")),
    };
    let data_dir = match (args.data, &cfg) {
        (Some(p), _) => p,
        (None, Some(c)) => c.data_dir.clone(),
        (None, None) => return Err(missing("data")),
    };
    let out = args.out.unwrap_or_else(|| checkpoints.join("eval"));

    let (dataset, ood, _) = load_dataset_dir(&data_dir)?;
    let mut opts = EvalOptions::from(&eval as &EvalConfig);
    opts.generation = args.generation;
    let report = evaluate(&checkpoints, &dataset, Some(&ood), &opts)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.write(&out.join(UNCERTAINTY_REPORT))?;
    for path in write_csvs(&report, &out)? {
        println!("wrote {}", path.display());
    }
    write_manifest(&out)?;
    if let Some(o) = &report.ood {
        println!(
            "OOD (generation {}, tau {}): EXPR epistemic below tau for {:.1}% in-domain, {:.1}% OOD",
            o.generation,
            o.expr.tau,
            100.0 * o.expr.in_domain_below,
            100.0 * o.expr.ood_below
        );
    }
    Ok(())
}

fn report(input: &Path, out: Option<PathBuf>) -> selfdistill::Result<()> {
    let path = if input.is_dir() {
        input.join(UNCERTAINTY_REPORT)
    } else {
        input.to_path_buf()
    };
    let report = UncertaintyReport::read(&path)?;
    let out = out.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
    for p in write_csvs(&report, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, seed, out } => gen_data(&config, seed, out),
        Command::Run {
            config,
            seed,
            out,
            data,
            workers,
        } => run(&config, seed, out, data, workers),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Report { input, out } => report(&input, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
