use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nwave_cli::{run_path, Overrides};

/// Runs an nwave scenario described by a JSON config.
#[derive(Debug, Parser)]
#[command(name = "nwave", version)]
struct Args {
    /// Path to the JSON scenario config.
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random states and verification samples.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let overrides = Overrides {
        out_dir: args.out,
        seed: args.seed,
    };
    let (code, result) = run_path(&args.config, &overrides);
    match result {
        Ok(summary) => {
            if !args.quiet {
                for c in &summary.checks {
                    println!(
                        "{:<28} {:>12.4e}  tol {:.1e}  {}",
                        c.name,
                        c.value,
                        c.tolerance,
                        if c.pass { "ok" } else { "FAIL" }
                    );
                }
                println!("wrote {} to {}", summary.files.join(", "), summary.out_dir.display());
            }
            if code == 3 {
                eprintln!("numerical failure; see {}", summary.out_dir.join("report.json").display());
            }
        }
        Err(e) => eprintln!("nwave: {e}"),
    }
    ExitCode::from(code as u8)
}
