use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocgrid::model::{generate_default_scenario, ControllerArch, ObserverArch};
use ocgrid_cli::{
    cmd_compare, cmd_run, cmd_sweep, default_output_root, load_scenario, CliError, CliResult, Matrix, Overrides,
    OUTPUT_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "ocgrid", version, about = "Observer/controller experiments on a simulated energy community")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory; defaults to a per-run directory under the output root.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Root for default output directories.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    /// Replace the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the per-interval tick cap.
    #[arg(long)]
    tick_cap: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observer: Option<ObserverArch>,
        #[arg(long)]
        level: Option<u8>,
        #[arg(long)]
        controller: Option<ControllerArch>,
    },
    /// Run every cell of an architecture matrix with the same seed.
    Sweep {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Observer architectures, comma separated.
        #[arg(long, value_delimiter = ',')]
        observer: Vec<ObserverArch>,
        /// Information levels, comma separated.
        #[arg(long, value_delimiter = ',')]
        level: Vec<u8>,
        /// Controller architectures, comma separated.
        #[arg(long, value_delimiter = ',')]
        controller: Vec<ControllerArch>,
    },
    /// Compare completed runs of the same base scenario.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
    /// Write the default scenario for a seed and community size.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        agents: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check a scenario file and list every violation.
    Validate { scenario: PathBuf },
}

fn out_dir(common: &Common, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        common
            .output_root
            .clone()
            .unwrap_or_else(default_output_root)
            .join(name)
    })
}

fn stem(p: &std::path::Path) -> String {
    p.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run {
            scenario,
            common,
            observer,
            level,
            controller,
        } => {
            let o = Overrides {
                seed: common.seed,
                tick_cap: common.tick_cap,
                observer,
                level,
                controller,
            };
            let m = cmd_run(&scenario, &out_dir(&common, &stem(&scenario)), &o)?;
            println!("run {} complete in {}", m.run_id, m.output_dir.display());
        }
        Command::Sweep {
            scenario,
            common,
            observer,
            level,
            controller,
        } => {
            let o = Overrides {
                seed: common.seed,
                tick_cap: common.tick_cap,
                ..Overrides::default()
            };
            let matrix = Matrix {
                observers: observer,
                levels: level,
                controllers: controller,
            };
            let dir = out_dir(&common, &format!("{}-sweep", stem(&scenario)));
            let r = cmd_sweep(&scenario, &matrix, &dir, &o)?;
            print!("{}", r.summary);
        }
        Command::Compare { runs } => {
            let c = cmd_compare(&runs)?;
            print!("{}", c.report);
        }
        Command::Generate { seed, agents, out } => {
            let cfg = generate_default_scenario(seed, agents)?;
            cfg.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Validate { scenario } => {
            load_scenario(&scenario)?;
            println!("{} is valid", scenario.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Validation(v) = &e {
                for violation in v {
                    eprintln!("  {violation}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
