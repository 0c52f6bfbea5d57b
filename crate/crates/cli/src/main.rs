use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hqnet::experiment::{self, Format, ResultTable, SweepResult};
use hqnet::protocol::ProtocolMessage;

#[derive(Parser)]
#[command(name = "hqnet", version, about = "Heterogeneous quantum network link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation of the configured network.
    Run {
        config: PathBuf,
        #[command(flatten)]
        opts: Opts,
    },
    /// Run every point of the config's [sweep] section.
    Sweep {
        config: PathBuf,
        #[command(flatten)]
        opts: Opts,
        /// Repetitions per sweep value (overrides sweep.reps).
        #[arg(long)]
        reps: Option<u32>,
    },
}

#[derive(clap::Args)]
struct Opts {
    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
    /// Dump classical protocol messages with timestamps.
    #[arg(long)]
    log_protocol: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

fn write_log(out: Option<&Path>, name: &str, messages: &[ProtocolMessage]) -> Result<()> {
    let mut text = String::new();
    for m in messages {
        text.push_str(&m.to_string());
        text.push('\n');
    }
    match out {
        Some(dir) => {
            let path = dir.join(name);
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            eprintln!("# protocol log: {name}");
            eprint!("{text}");
        }
    }
    Ok(())
}

fn finish(table: &ResultTable, opts: &Opts, stem: &str) -> Result<()> {
    let format = Format::from(opts.format);
    let out = opts.out.clone().or_else(|| table.config.output.clone());
    match out {
        Some(dir) => {
            let path = table.emit(&dir, stem, format)?;
            eprintln!("wrote {}", path.display());
        }
        None => {
            std::io::stdout()
                .write_all(table.render(format).as_bytes())
                .context("writing results")?;
        }
    }
    Ok(())
}

fn summary_line(r: &SweepResult) -> String {
    let fidelity = match (r.fidelity_bound, r.fidelity_stderr) {
        (Some(f), Some(se)) => format!("{f:.4} ± {se:.4}"),
        (Some(f), None) => format!("{f:.4}"),
        _ => "n/a".into(),
    };
    format!(
        "rate {:.4} Hz, fidelity bound {fidelity}, {} pairs in {:.2} s ({} attempts, {} false positives)",
        r.rate_hz, r.heralds, r.elapsed_s, r.attempts, r.false_positives
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, opts } => {
            let mut cfg = experiment::load_config(&config)?;
            if let Some(seed) = opts.seed {
                cfg.seed = seed;
            }
            let (table, messages) = experiment::run_single(&cfg, opts.log_protocol)?;
            if let Some(dir) = &opts.out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            if opts.log_protocol {
                write_log(opts.out.as_deref(), "protocol.log", &messages)?;
            }
            eprintln!("{}: {}", cfg.topology, summary_line(&table.rows[0]));
            finish(&table, &opts, "run")
        }
        Command::Sweep { config, opts, reps } => {
            let mut cfg = experiment::load_config(&config)?;
            if let Some(seed) = opts.seed {
                cfg.seed = seed;
            }
            let Some(sweep) = cfg.sweep.as_mut() else {
                bail!("{} has no [sweep] section", config.display());
            };
            if let Some(reps) = reps {
                if reps == 0 {
                    bail!("--reps must be at least 1");
                }
                sweep.reps = reps;
            }
            let parameter = sweep.parameter.clone();
            let points = experiment::run_sweep_points(&cfg, opts.log_protocol)?;
            if let Some(dir) = &opts.out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let mut rows = Vec::with_capacity(points.len());
            for (i, p) in points.iter().enumerate() {
                let row = SweepResult::from_summary(Some(p.value), p.rep, &p.summary);
                eprintln!("{parameter} = {} (rep {}): {}", p.value, p.rep, summary_line(&row));
                if opts.log_protocol {
                    write_log(opts.out.as_deref(), &format!("protocol_{i}.log"), &p.messages)?;
                }
                rows.push(row);
            }
            finish(&ResultTable::new(cfg, rows), &opts, "sweep")
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
