use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sentencekv_cli::{
    build_effective_config, run, write_outputs, CliError, CommandKind, MemcalcParams, Overrides,
    RunSpec,
};

/// Experiment runner for sentence-level KV-cache management.
#[derive(Parser)]
#[command(name = "sentencekv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the needle-retrieval policy matrix and write the summary CSV.
    Niah(RunArgs),
    /// Sweep keep factor x query strategy (x segmentation) accuracy rows.
    Ablate(RunArgs),
    /// Run one decode session and write trace and ledger CSVs.
    Decode(RunArgs),
    /// Print the KV-cache byte footprint of a model geometry.
    Memcalc(MemcalcArgs),
    /// Prefill one corpus and dump the tiered store and bucket table.
    PrefillDump(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the emitted files.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seed list.
    #[arg(long)]
    seed: Option<String>,
    /// Decode-time token budget.
    #[arg(long)]
    tau: Option<usize>,
    /// Semantic keeping factor.
    #[arg(long)]
    r: Option<f64>,
    /// Observation-window length.
    #[arg(long = "n-window")]
    n_window: Option<usize>,
    /// Cache policy: sentencekv, full, static_evict, h2o, or quest.
    #[arg(long)]
    policy: Option<String>,
    /// Page size for the quest policy.
    #[arg(long = "chunk-size")]
    chunk_size: Option<usize>,
    /// Retrieval query strategy: mean_sentence or current_token.
    #[arg(long = "query-strategy")]
    query_strategy: Option<String>,
    /// Segmentation mode: punctuation or equal_chunks:SIZE.
    #[arg(long)]
    segmentation: Option<String>,
    /// Decode steps for the decode subcommand.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct MemcalcArgs {
    /// Transformer layer count.
    #[arg(long)]
    m: u64,
    /// Attention head count.
    #[arg(long)]
    h: u64,
    /// Head dimension.
    #[arg(long)]
    d: u64,
    /// Prompt length in tokens.
    #[arg(long)]
    l: u64,
    /// Generated tokens.
    #[arg(long, default_value_t = 0)]
    t: u64,
    /// Bytes per stored scalar.
    #[arg(long = "element-bytes", default_value_t = 2)]
    element_bytes: u64,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seeds: self.seed.clone(),
            tau: self.tau,
            r: self.r,
            n_window: self.n_window,
            policy: self.policy.clone(),
            chunk_size: self.chunk_size,
            query_strategy: self.query_strategy.clone(),
            segmentation: self.segmentation.clone(),
            steps: self.steps,
        }
    }
}

fn execute(kind: CommandKind, args: &RunArgs) -> Result<(), CliError> {
    let config = build_effective_config(args.config.as_deref(), &args.overrides())?;
    let spec = RunSpec { command: kind, config, memcalc: None };
    let output = run(&spec)?;
    write_outputs(&output, &args.out)?;
    print!("{}", output.stdout);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Niah(args) => execute(CommandKind::Niah, args),
        Command::Ablate(args) => execute(CommandKind::Ablate, args),
        Command::Decode(args) => execute(CommandKind::Decode, args),
        Command::PrefillDump(args) => execute(CommandKind::PrefillDump, args),
        Command::Memcalc(args) => {
            let spec = RunSpec {
                command: CommandKind::Memcalc,
                config: match build_effective_config(None, &Overrides::default()) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("{e}");
                        return ExitCode::from(e.exit_code() as u8);
                    }
                },
                memcalc: Some(MemcalcParams {
                    layers: args.m,
                    heads: args.h,
                    head_dim: args.d,
                    prompt_len: args.l,
                    generated: args.t,
                    element_bytes: args.element_bytes,
                }),
            };
            run(&spec).map(|out| print!("{}", out.stdout))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
