use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use meanfield_cli::config::Overrides;
use meanfield_cli::{prepare, validate};
use serde_json::json;

/// Runs one experiment recipe and writes its data and manifest.
#[derive(Parser)]
#[command(name = "meanfield", version)]
struct Cli {
    /// Recipe name, or `validate` to check a config without running it.
    recipe: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Use the full published sample sizes instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
}

fn fail(stage: &str, recipe: &str, err: anyhow::Error) -> ExitCode {
    eprintln!("error: {err}");
    for cause in err.chain().skip(1) {
        eprintln!("  caused by: {cause}");
    }
    let chain: Vec<String> = err.chain().map(|c| c.to_string()).collect();
    eprintln!(
        "{}",
        json!({ "error": { "stage": stage, "recipe": recipe, "message": format!("{err:#}"), "chain": chain } })
    );
    ExitCode::from(if stage == "run" { 1 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ov = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        paper_scale: cli.paper_scale,
    };
    if cli.recipe == "validate" {
        return match validate::validate(&cli.config, &ov) {
            Ok(report) => {
                println!("{report}");
                ExitCode::SUCCESS
            }
            Err(e) => fail("config", "validate", e),
        };
    }
    let prepared = match prepare(&cli.recipe, &cli.config, &ov) {
        Ok(p) => p,
        Err(e) => return fail("config", &cli.recipe, e),
    };
    if let Err(e) = validate::check(&prepared.recipe, &prepared.config) {
        return fail("config", &cli.recipe, e);
    }
    match prepared.run() {
        Ok(report) => {
            println!("{}", report.dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail("run", &cli.recipe, e),
    }
}
