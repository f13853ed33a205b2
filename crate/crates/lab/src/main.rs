use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use excitor_lab::commands::{self, AblateArgs, CompareArgs, EvalArgs, GenerateArgs, TrainArgs};
use excitor_lab::config::AdapterKind;
use excitor_lab::{LabError, Result};

/// Desk-scale Excitor experiments. Precision follows EXCITOR_PRECISION
/// (f32 or f64, default f32).
#[derive(Parser)]
#[command(name = "excitor", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fine-tune one adapter (pretraining the base first unless --base is
    /// given) and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = adapter)]
        adapter: AdapterKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Config override, `section.key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint of an already trained base model.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Train a base model on the pretraining task.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every trainable tensor, in f64.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = adapter)]
        adapter: AdapterKind,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Forgetting comparison across adapters and seeds.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "forgetting")]
        protocol: String,
        #[arg(long, value_delimiter = ',', value_parser = adapter, default_value = "excitor,lora,prefix,full")]
        adapters: Vec<AdapterKind>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sweep Excitor rank, layer count and projection placement.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Axes such as `rank=4,8,16 layers=1,2,3 proj=q,qkv,kv,v,none`.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sample a response from a checkpoint.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task input; wrapped in the checkpoint's prompt template.
        #[arg(long)]
        prompt: String,
        /// Instruction for the template; defaults to the checkpoint's task.
        #[arg(long)]
        instruction: Option<String>,
        /// Feed --prompt verbatim instead of templating it.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = excitor_core::sampling::DEFAULT_TEMPERATURE)]
        temperature: f64,
        #[arg(long, default_value_t = excitor_core::sampling::DEFAULT_TOP_P)]
        top_p: f64,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Raw 8x8 byte image or XCT1 visual feature file.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Exact match and perplexity of a checkpoint on a held-out set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn adapter(s: &str) -> std::result::Result<AdapterKind, String> {
    AdapterKind::parse(s).map_err(|e| e.to_string())
}

fn run(cmd: Cmd) -> Result<i32> {
    // gradcheck always runs in f64, but a bad setting is still an error.
    commands::Precision::from_env()?;
    match cmd {
        Cmd::Train {
            config,
            adapter,
            seed,
            out,
            steps,
            overrides,
            base,
        } => commands::train(&TrainArgs {
            config,
            adapter,
            seed,
            out,
            steps,
            overrides,
            base,
        }),
        Cmd::Pretrain { config, overrides, out } => commands::pretrain(config.as_deref(), &overrides, &out),
        Cmd::Gradcheck {
            config,
            adapter,
            overrides,
            corrupt_backward,
        } => commands::gradcheck(config.as_deref(), &overrides, adapter, corrupt_backward),
        Cmd::Compare {
            config,
            protocol,
            adapters,
            seeds,
            out,
            base,
            workers,
            overrides,
        } => {
            if protocol != "forgetting" {
                return Err(LabError::Config(format!("unknown protocol {protocol:?}; only \"forgetting\"")));
            }
            commands::compare(&CompareArgs {
                config,
                overrides,
                adapters,
                seeds,
                out,
                base,
                workers,
            })
        }
        Cmd::Ablate {
            config,
            grid,
            seed,
            out,
            base,
            workers,
            overrides,
        } => commands::ablate(&AblateArgs {
            config,
            overrides,
            grid,
            seed,
            out,
            base,
            workers,
        }),
        Cmd::Generate {
            ckpt,
            prompt,
            instruction,
            raw,
            temperature,
            top_p,
            max_new,
            seed,
            image,
        } => commands::generate(&GenerateArgs {
            ckpt,
            prompt,
            instruction,
            raw,
            temperature,
            top_p,
            max_new,
            seed,
            image,
        }),
        Cmd::Eval { ckpt, task, overrides } => commands::eval(&EvalArgs { ckpt, task, overrides }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
