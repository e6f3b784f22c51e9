use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiertile::commands;
use hiertile::matrix_io::{read_matrix, write_matrix, Values};
use hiertile::script::{load, DimOverrides, Loaded};

#[derive(Parser)]
#[command(name = "hiertile", version, about = "Compile and check hierarchical GPU tiling schedules")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the spec reached after every step.
    Elaborate(Common),
    /// Emit CUDA C for the schedule.
    Codegen {
        #[command(flatten)]
        common: Common,
        /// Write the kernel here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the schedule on seeded inputs and print a digest of the result.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Input matrices in text form (A B, or SRC) instead of generated ones.
        #[arg(long, num_args = 1..=2)]
        inputs: Vec<PathBuf>,
        /// Write the result matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the shared-memory access log here.
        #[arg(long)]
        access_log: Option<PathBuf>,
    },
    /// Simulate, compare with the reference, and check races and ownership.
    Verify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Largest accepted absolute error.
        #[arg(long)]
        tolerance: Option<f32>,
    },
}

#[derive(Args)]
struct Common {
    script: PathBuf,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Print the elaboration trace first.
    #[arg(long)]
    dump_trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ValueKind {
    Int,
    Float,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ValueKind::Int)]
    values: ValueKind,
}

impl RunArgs {
    fn values(&self) -> Values {
        match self.values {
            ValueKind::Int => Values::Integer,
            ValueKind::Float => Values::Float,
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn open(c: &Common) -> Result<Loaded, String> {
    let text = read(&c.script)?;
    let l = load(&text, DimOverrides { m: c.m, n: c.n, k: c.k }).map_err(|e| format!("{}:{e}", c.script.display()))?;
    if c.dump_trace {
        print!("{}", commands::elaborate(&l));
    }
    Ok(l)
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.cmd {
        Cmd::Elaborate(c) => {
            let l = open(&Common { dump_trace: false, ..c })?;
            print!("{}", commands::elaborate(&l));
        }
        Cmd::Codegen { common, out } => {
            let l = open(&common)?;
            let src = commands::codegen(&l).map_err(|e| e.to_string())?;
            match out {
                Some(p) => write(&p, &src.source)?,
                None => print!("{}", src.source),
            }
        }
        Cmd::Simulate { common, run, inputs, out, access_log } => {
            let l = open(&common)?;
            let ins = if inputs.is_empty() {
                commands::inputs(&l, run.seed, run.values())
            } else {
                inputs
                    .iter()
                    .map(|p| read_matrix(&read(p)?).map_err(|e| format!("{}: {e}", p.display())))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let sim = commands::simulate(&l, ins, access_log.is_some()).map_err(|e| e.to_string())?;
            println!("digest {}", sim.digest);
            println!("races {}", sim.races.total);
            for r in &sim.races.races {
                println!("  {r}");
            }
            if let Some(p) = out {
                write(&p, &write_matrix(&sim.output))?;
            }
            if let Some(p) = access_log {
                let mut text = sim.access_log.join("\n");
                text.push('\n');
                write(&p, &text)?;
            }
            return Ok(sim.races.is_empty());
        }
        Cmd::Verify { common, run, tolerance } => {
            let l = open(&common)?;
            let tol = tolerance.unwrap_or(match run.values {
                ValueKind::Int => 0.0,
                ValueKind::Float => 1e-3,
            });
            let v = commands::verify(&l, run.seed, run.values(), tol);
            println!("{}", v.summary());
            return Ok(v.pass);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
