use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use streamdiff::run::{self, GenerateArgs};
use streamdiff::{distill, verify, CliError, RunConfig};

/// Streaming block-diffusion engine.
#[derive(Debug, Parser)]
#[command(name = "streamdiff", version)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a latent stream (JAVL) from an audio feature file (JAAF).
    Generate {
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        blocks: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines event log.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Time a fixed-seed run on synthetic audio.
    Bench {
        #[arg(long)]
        blocks: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the per-block timestep queues as TSV.
    Schedule,
    /// Run property suites (`all` or a suite name).
    Verify {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Distill the two-dimensional toy teacher into a one-step generator.
    DistillToy {
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run some blocks and print per-frame cache digests as JSON lines.
    CacheDump {
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 6)]
        blocks: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write seeded model parameters as a JADN checkpoint.
    InitParams {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn print_json(v: &serde_json::Value) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
    Ok(())
}

fn run_cli(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.command {
        Some(Command::Generate { audio, seed, blocks, out, events }) => {
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.blocks = blocks.unwrap_or(cfg.blocks);
            cfg.audio = audio.clone().or(cfg.audio);
            cfg.out = out.clone().or(cfg.out);
            cfg.events = events.clone().or(cfg.events);
        }
        Some(Command::Bench { blocks, seed }) => {
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.blocks = blocks.unwrap_or(cfg.blocks);
        }
        Some(Command::CacheDump { audio, seed, blocks, .. }) => {
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.blocks = *blocks;
            cfg.audio = audio.clone().or(cfg.audio);
        }
        Some(Command::InitParams { seed, .. }) => cfg.seed = seed.unwrap_or(cfg.seed),
        _ => {}
    }
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let Some(command) = cli.command else {
        use clap::CommandFactory;
        let _ = Cli::command().write_long_help(&mut std::io::stderr());
        return Err(CliError::Usage("no subcommand given".into()));
    };
    match command {
        Command::Generate { .. } => {
            let audio = cfg.audio.clone().ok_or_else(|| CliError::Usage("generate needs --audio".into()))?;
            let out = cfg.out.clone().ok_or_else(|| CliError::Usage("generate needs --out".into()))?;
            let events = cfg.events.clone();
            let summary = run::generate(
                &cfg,
                &GenerateArgs {
                    audio: &audio,
                    out: &out,
                    events: events.as_deref(),
                },
            )?;
            print_json(&summary)
        }
        Command::Bench { .. } => print_json(&run::bench(&cfg, cfg.blocks)?),
        Command::Schedule => {
            print!("{}", run::schedule_tsv());
            Ok(())
        }
        Command::Verify { suite } => {
            let results = verify::run(&suite, |r| {
                println!("{}", r.line());
                let _ = std::io::stdout().flush();
            })?;
            let failed: Vec<&str> = results.iter().filter(|r| r.outcome.is_err()).map(|r| r.name).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Verify(failed.join(", ")))
            }
        }
        Command::DistillToy { iters, seed, out } => {
            let report = distill::distill(iters, seed)?;
            distill::write_report(&report, &out)?;
            eprintln!(
                "KL {:.4} -> {:.4} over {} generator / {} fake updates",
                report.kl_initial(),
                report.kl_final(),
                report.generator_updates,
                report.fake_updates
            );
            Ok(())
        }
        Command::CacheDump { out, .. } => {
            let lines = run::cache_dump(&cfg, cfg.audio.as_deref(), cfg.blocks)?;
            let mut text = String::new();
            for l in &lines {
                text.push_str(&l.to_string());
                text.push('\n');
            }
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| CliError::io(&p, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::InitParams { out, .. } => run::init_params(&cfg, &out),
    }
}
