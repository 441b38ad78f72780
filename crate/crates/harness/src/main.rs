use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bilevel_harness::commands::{cmd_gradcheck, cmd_report, cmd_run, output_dir, DEFAULT_OUT};
use bilevel_harness::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "bilevel", version, about = "Run and check bilevel optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run block and write CSV traces plus summary.json.
    Run(Common),
    /// Compare hypergradient estimators with the exact gradient and finite differences.
    Gradcheck(Common),
    /// Run the acceptance suite (and the config's runs, if given).
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of runs executed concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Replace the seed of every run block.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => load(&a.config, a.seed).and_then(|cfg| {
            let out = output_dir(&cfg, a.out.as_deref());
            let summary = cmd_run(&cfg, &out, a.parallel)?;
            for r in &summary.runs {
                println!(
                    "{}: {} iterations, final oracle ||grad||^2 {}, trace {}",
                    r.label,
                    r.iterations,
                    r.final_grad_norm_sq_oracle.map_or("-".into(), |g| format!("{g:.4e}")),
                    out.join(&r.trace_file).display()
                );
            }
            Ok(true)
        }),
        Command::Gradcheck(a) => load(&a.config, a.seed).and_then(|cfg| {
            let report = cmd_gradcheck(&cfg)?;
            print!("{report}");
            for f in report.failures() {
                eprintln!(
                    "failed: {}: error {:.3e} above {:.1e}",
                    f.label(),
                    f.rel_err_oracle.unwrap_or(f.rel_err_fd),
                    f.threshold
                );
            }
            Ok(report.passed())
        }),
        Command::Report(a) => (|| {
            let cfg = a.config.as_ref().map(|p| load(p, a.seed)).transpose()?;
            let out = match &cfg {
                Some(c) => output_dir(c, a.out.as_deref()),
                None => a.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            };
            let report = cmd_report(cfg.as_ref(), &out, a.parallel)?;
            print!("{report}");
            println!("report written to {}", out.join("report.json").display());
            Ok(report.passed)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
