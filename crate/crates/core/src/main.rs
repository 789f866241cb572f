use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use krmcf::cli_io::{cmd_convergence, cmd_run, cmd_verify, exit_code_of, load_config, RunConfig};
use krmcf::Error;

/// Coupled Kähler–Ricci and mean curvature flow of graphs in products of
/// Riemann surfaces.
#[derive(Parser)]
#[command(name = "krmcf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a scenario and write its outputs.
    Run(Common),
    /// Integrate a scenario and check every residual and inequality.
    Verify(Common),
    /// Observed orders of the residuals over a sequence of grids.
    Convergence {
        #[command(flatten)]
        common: Common,
        /// Number of grids, halving down from the configured one.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file.
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of field snapshots.
    #[arg(long)]
    snapshots: Option<usize>,
    /// Seed of the perturbations.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = load_config(&self.config)?;
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(n) = self.snapshots {
            cfg.snapshots = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn fail(e: &Error) -> u8 {
    eprintln!("error: {e}");
    match e {
        Error::Parse { .. } | Error::Validation(_) => 2,
        Error::BlowUp { .. } | Error::GraphDegenerate { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(c) => match c.load().and_then(|cfg| cmd_run(&cfg).map(|r| (cfg, r))) {
            Ok((cfg, rec)) => {
                let t = &rec.trajectory;
                println!(
                    "{}: {} after {} steps, {} samples in {}",
                    t.name,
                    t.termination.label(),
                    t.steps,
                    t.rows.len(),
                    cfg.out.display()
                );
                exit_code_of(&t.termination) as u8
            }
            Err(e) => fail(&e),
        },
        Command::Verify(c) => match c.load().and_then(|cfg| cmd_verify(&cfg)) {
            Ok(rep) => {
                print!("{}", rep.render());
                rep.exit_code() as u8
            }
            Err(e) => fail(&e),
        },
        Command::Convergence { common, levels } => {
            match common.load().and_then(|cfg| cmd_convergence(&cfg, levels)) {
                Ok(table) => {
                    println!("{:<14} {:>5} {:>12} {:>12} {:>7}", "residual", "n", "linf", "l2", "order");
                    for r in table {
                        println!(
                            "{:<14} {:>5} {:>12.4e} {:>12.4e} {:>7}",
                            r.name,
                            r.n,
                            r.linf,
                            r.l2,
                            r.order.map_or("-".to_string(), |o| format!("{o:.2}"))
                        );
                    }
                    0
                }
                Err(e) => fail(&e),
            }
        }
    };
    ExitCode::from(code)
}
