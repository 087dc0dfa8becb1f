//! Command-line front end: parses arguments, loads the problem file, and
//! hands off to the subcommand implementations in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use implicit_motion::cli::{
    cmd_check, cmd_degree, cmd_example, cmd_reactive, cmd_simulate, cmd_trace, parse_floats,
    CmdOutput, DegreeFlags, ExampleFlags, SimulateFlags, TraceFlags,
};
use implicit_motion::error::{Error, Result};
use implicit_motion::problem::ProblemFile;

#[derive(Parser)]
#[command(
    name = "implicit-motion",
    version,
    about = "Constrained second-order motion on implicitly defined manifolds"
)]
struct Cli {
    /// Print the structured JSON report instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Cap the worker threads used by the parallel searches.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a problem file and spot-check its declared structure.
    Check { file: PathBuf },

    /// Degree of the position field over the file's box.
    Degree {
        file: PathBuf,

        /// Map choice: F freezes the applied force, Phi averages the
        /// periodic perturbation.
        #[arg(long)]
        map: Option<String>,

        /// Cross-validate by winding number or a denser re-run.
        #[arg(long)]
        verify: bool,

        /// Multistart grid nodes per axis.
        #[arg(long)]
        grid: Option<usize>,

        /// Directory receiving degree.txt and zeros.csv.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },

    /// Integrate the constrained motion over the [integrate] span.
    Simulate {
        file: PathBuf,

        /// Integrate an x_only force along both the lifted and the
        /// projected route and report their largest position gap.
        #[arg(long)]
        twin: bool,

        /// End time override.
        #[arg(long, allow_hyphen_values = true)]
        t1: Option<f64>,

        /// Step size override.
        #[arg(long)]
        h: Option<f64>,

        /// Integrator override: rk4_proj or rk45_proj.
        #[arg(long)]
        method: Option<String>,

        /// Trajectory CSV path.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },

    /// Reactive force at a chart point.
    Reactive {
        file: PathBuf,

        /// Independent positions, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x: String,

        /// Independent velocities, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        u: String,
    },

    /// Trace the branch of forced periodic orbits from an equilibrium.
    Trace {
        file: PathBuf,

        /// `auto`, or a comma-separated chart point. Defaults to the
        /// file's declared origin, then to auto.
        #[arg(long, allow_hyphen_values = true)]
        origin: Option<String>,

        /// Accepted-point budget.
        #[arg(long)]
        steps: Option<usize>,

        /// Initial arclength step.
        #[arg(long)]
        ds0: Option<f64>,

        /// Branch CSV path.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },

    /// Materialize, list, or verify a built-in example.
    Example {
        name: Option<String>,

        /// List the built-in names and titles.
        #[arg(long)]
        list: bool,

        /// Run the example's recorded expectations.
        #[arg(long)]
        verify: bool,

        /// Directory receiving the problem file.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    ProblemFile::parse(&text)
}

fn run(command: &Command) -> Result<CmdOutput> {
    match command {
        Command::Check { file } => cmd_check(&load(file)?),
        Command::Degree {
            file,
            map,
            verify,
            grid,
            out,
        } => cmd_degree(
            &load(file)?,
            &DegreeFlags {
                map: map.as_deref(),
                verify: *verify,
                grid: *grid,
                out: out.as_deref(),
            },
        ),
        Command::Simulate {
            file,
            twin,
            t1,
            h,
            method,
            out,
        } => cmd_simulate(
            &load(file)?,
            &SimulateFlags {
                twin: *twin,
                t1: *t1,
                h: *h,
                method: method.as_deref(),
                out: out.as_deref(),
            },
        ),
        Command::Reactive { file, x, u } => {
            let x = parse_floats(x)?;
            let u = parse_floats(u)?;
            cmd_reactive(&load(file)?, &x, &u)
        }
        Command::Trace {
            file,
            origin,
            steps,
            ds0,
            out,
        } => cmd_trace(
            &load(file)?,
            &TraceFlags {
                origin: origin.as_deref(),
                steps: *steps,
                ds0: *ds0,
                out: out.as_deref(),
            },
        ),
        Command::Example {
            name,
            list,
            verify,
            out,
        } => cmd_example(
            name.as_deref(),
            &ExampleFlags {
                list: *list,
                verify: *verify,
                out: out.as_deref(),
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        if let Err(e) = pool {
            eprintln!("error: could not size the worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli.command) {
        Ok(output) => {
            if cli.json {
                println!("{:#}", output.json);
            } else {
                println!("{}", output.text);
            }
            ExitCode::from(u8::try_from(output.exit).unwrap_or(1))
        }
        Err(e) => {
            eprintln!("error: {e}");
            let class = if matches!(cli.command, Command::Check { .. }) {
                2
            } else {
                e.exit_class()
            };
            ExitCode::from(u8::try_from(class).unwrap_or(2))
        }
    }
}
