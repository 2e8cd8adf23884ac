use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use safeopt::config::ExperimentConfig;
use safeopt::harness::{compare_runs, run_experiment, volume};
use safeopt::record::ExperimentRecord;
use safeopt::run::StopReason;
use safeopt::sampling::Sampler;
use safeopt::Error;

#[derive(Parser)]
#[command(name = "safeopt", version, about = "Safe Bayesian optimization experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    LatinHypercube,
    UniformRandom,
}

impl From<SamplerArg> for Sampler {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::LatinHypercube => Sampler::LatinHypercube,
            SamplerArg::UniformRandom => Sampler::UniformRandom,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Overrides the master seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate two or more records of the same plant.
    Compare {
        #[arg(required = true, num_args = 2..)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Estimate the safe-set volume fraction of a recorded run.
    Volume {
        record: PathBuf,
        #[arg(long, default_value_t = 500_000)]
        count: usize,
        #[arg(long, value_enum, default_value = "uniform-random")]
        sampler: SamplerArg,
        /// Defaults to the record's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output.dir = o.to_string_lossy().into_owned();
            }
            let record = run_experiment(&cfg)?;
            let paths = record.write(std::path::Path::new(&cfg.output.dir))?;
            println!("{}", paths.json.display());
            println!("{}", paths.csv.display());
            let s = &record.summary;
            match &s.stop {
                StopReason::Failed { message, exit_code } => {
                    eprintln!("run failed after {} iterations: {message}", s.iterations);
                    Ok(*exit_code)
                }
                stop => {
                    eprintln!(
                        "{} iterations, stop {:?}, best objective {:?}",
                        s.iterations, stop, s.best_objective
                    );
                    Ok(0)
                }
            }
        }
        Command::Compare { records, out } => {
            let recs = records
                .iter()
                .map(|p| ExperimentRecord::read(p))
                .collect::<Result<Vec<_>, _>>()?;
            let c = compare_runs(&recs)?;
            c.write(&out)?;
            print!("{}", c.algorithms);
            Ok(0)
        }
        Command::Volume {
            record,
            count,
            sampler,
            seed,
        } => {
            let rec = ExperimentRecord::read(&record)?;
            let v = volume(&rec, count, sampler.into(), seed.unwrap_or(rec.seed))?;
            println!("{v}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
