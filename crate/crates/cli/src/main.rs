use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use singd_core::harness::{
    bench, memory_report, model_shapes, run_training, verify, write_csv_file, RunConfig, Suite,
};
use singd_core::{Error, StructureKind};

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "singd",
    version,
    about = "Inverse-free Kronecker-factored optimizers: training, verification and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded training loop and write metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the CSV; the file name comes from `output.path`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite and print one line per property.
    Verify {
        #[arg(long, value_parser = parse_suite)]
        suite: Suite,
    },
    /// Time the projected congruence of a structure across dimensions.
    Bench {
        #[arg(long, value_parser = parse_structure)]
        structure: StructureKind,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
    },
    /// Print itemized optimizer-state scalar counts for a config's model.
    ReportMemory {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

fn parse_structure(s: &str) -> Result<StructureKind, String> {
    s.parse()
}

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            Error::Io { .. } | Error::Config { .. } => ExitCode::from(EXIT_CONFIG),
            _ => ExitCode::FAILURE,
        }
    })
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let outcome = match run_training(&cfg) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            let path = match out {
                Some(dir) => dir.join(cfg.output.file_name().unwrap_or("metrics.csv".as_ref())),
                None => cfg.output.clone(),
            };
            if let Err(e) = write_csv_file(&outcome.records, &path) {
                return fail(e);
            }
            println!(
                "wrote {} ({} records); steps={} initial_loss={} final_loss={} singular_events={}",
                path.display(),
                outcome.records.len(),
                outcome.steps_run,
                outcome.initial_loss,
                outcome.final_loss,
                outcome.singular_events
            );
            if outcome.diverged {
                eprintln!("run diverged: non-finite values encountered");
                return ExitCode::from(EXIT_DIVERGED);
            }
            ExitCode::SUCCESS
        }
        Command::Verify { suite } => {
            let checks = match verify(suite) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            }
        }
        Command::Bench {
            structure,
            dims,
            repetitions,
        } => match bench(structure, &dims, repetitions) {
            Ok(rows) => {
                println!("structure,dim,seconds,ratio");
                for r in rows {
                    let ratio = r.ratio.map_or(String::new(), |x| format!("{x:.3}"));
                    println!("{structure},{},{:e},{ratio}", r.dim, r.seconds);
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::ReportMemory { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match model_shapes(&cfg) {
                Ok(shapes) => {
                    println!("{}", memory_report(&shapes, &cfg.optimizer));
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
