use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use forklab::host::AttackKind;
use forklab::protocols::{ProtocolId, Variant};
use forklab::scenarios::report::{export_report, render_matrix, render_scenario, render_trials, Format};
use forklab::scenarios::{load_corpus, run_matrix, run_scenario, run_trials, Expectation, ScenarioConfig};

#[derive(Parser)]
#[command(name = "forklab", version, about = "Rollback and cloning attacks on simulated TEE-backed blockchains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file, or a batch of trials of it.
    Run {
        scenario: PathBuf,
        /// Overrides both the file's seed and FORKLAB_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Exit with 1 unless the outcome matches; overrides the file's `expect`.
        #[arg(long, value_enum)]
        expect: Option<Expectation>,
        /// Also write the event log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the corpus and print the rollback/cloning matrix.
    Matrix {
        #[arg(long, default_value = "scenarios")]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Run every scenario under this seed instead of its own.
        #[arg(long)]
        seed: Option<u64>,
        /// Exit with 1 unless the matrix equals the expected one.
        #[arg(long)]
        expect: bool,
    },
    /// List protocols, variants and attacks.
    List,
}

enum Failure {
    Mismatch(String),
    Usage(String),
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { scenario, seed, trials, out, format, expect, log } => {
            let mut cfg = ScenarioConfig::load(&scenario).map_err(usage)?;
            cfg.apply_env_seed().map_err(usage)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = trials.or(cfg.trials) {
                if expect.is_some() || log.is_some() {
                    return Err(usage("--expect and --log apply to single runs, not trial batches"));
                }
                let t = run_trials(&cfg, n).map_err(usage)?;
                return export_report(out.as_deref(), &render_trials(&t, format)).map_err(usage);
            }
            let report = run_scenario(&cfg).map_err(usage)?;
            export_report(out.as_deref(), &render_scenario(&report, format)).map_err(usage)?;
            if let Some(path) = log {
                std::fs::write(&path, report.log.to_jsonl()).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            }
            match expect.or(cfg.expect) {
                Some(want) if want != report.cell() => {
                    Err(Failure::Mismatch(format!("{}: expected {want}, got {}", cfg.name, report.cell())))
                }
                _ => Ok(()),
            }
        }
        Command::Matrix { corpus, out, format, seed, expect } => {
            let mut configs: Vec<ScenarioConfig> = load_corpus(&corpus).map_err(usage)?.into_iter().map(|(_, c)| c).collect();
            if let Some(s) = seed {
                configs.iter_mut().for_each(|c| c.seed = s);
            }
            let m = run_matrix(&configs).map_err(usage)?;
            export_report(out.as_deref(), &render_matrix(&m, format)).map_err(usage)?;
            let bad = m.mismatches();
            if expect && !bad.is_empty() {
                return Err(Failure::Mismatch(bad.join("\n")));
            }
            Ok(())
        }
        Command::List => {
            println!("protocols:");
            for p in ProtocolId::ALL {
                let params = p.params().join(", ");
                println!("  {:<20} {:<18} params: {}", p.id(), p.display_name(), if params.is_empty() { "-" } else { &params });
            }
            println!("variants: {}, {}", Variant::Vulnerable, Variant::Patched);
            println!("attacks: {}, {}, {}", AttackKind::None, AttackKind::Rollback, AttackKind::Cloning);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch(m)) => {
            eprintln!("mismatch: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
