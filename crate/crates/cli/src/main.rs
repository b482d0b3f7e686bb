use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cope_core::analysis::{dump_checkpoint, read_tokens, DumpMode};
use cope_core::harness::gradsuite::TOLERANCE;
use cope_core::harness::{
    gradcheck_suite, parse_config, parse_overrides, resume_train, run_eval, run_sweep, run_train,
    summarize, MetricsRecord, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "cope",
    version,
    about = "Contextual position encoding laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and print per-split error summaries.
    Train {
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, overriding train.seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory; each seed writes to OUT/seed_<s>/.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Stop after this many steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
        /// Continue the run stored in this checkpoint.
        #[arg(long, conflicts_with_all = ["config", "seeds"])]
        resume: Option<PathBuf>,
        /// Overrides, as key=value or --key value.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on its splits, optionally with changed task knobs.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite in double precision.
    Gradcheck {
        /// Print every case, not just failures and the summary.
        #[arg(long)]
        verbose: bool,
    },
    /// Dump position-only attention or gate values of one CoPE head.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        head: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Whitespace-separated token ids.
        #[arg(long)]
        input_file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one key and write OUT/sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Key to vary, e.g. data.train_pool.
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Position,
    Gates,
}

fn load_config(
    path: Option<&PathBuf>,
    overrides: &[String],
    extra: Vec<(String, String)>,
) -> Result<RunConfig> {
    let text = match path {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => String::new(),
    };
    let mut ov = parse_overrides(overrides)?;
    ov.extend(extra);
    Ok(parse_config(&text, &ov)?)
}

fn print_records(records: &[MetricsRecord]) {
    for r in records {
        println!(
            "{} step {} loss {:.4} error {:.2}%",
            r.split,
            r.step,
            r.loss,
            100.0 * r.error
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            seeds,
            out,
            stop_at,
            resume,
            overrides,
        } => {
            if let Some(ckpt) = resume {
                if !overrides.is_empty() {
                    bail!(
                        "--resume takes its configuration from the checkpoint; drop the overrides"
                    );
                }
                let run = resume_train(&ckpt, stop_at)?;
                println!("seed {} resumed to step {}", run.seed, run.steps);
                print_records(&run.final_records);
                return Ok(ExitCode::SUCCESS);
            }
            let extra = seeds
                .map(|s| vec![("train.seeds".to_string(), s)])
                .unwrap_or_default();
            let cfg = load_config(config.as_ref(), &overrides, extra)?;
            let runs = run_train(&cfg, &out, stop_at)?;
            for r in &runs {
                println!(
                    "seed {} stopped at step {} ({})",
                    r.seed,
                    r.steps,
                    r.dir.display()
                );
            }
            print!("{}", summarize(&runs));
        }
        Command::Eval { ckpt, overrides } => {
            let records = run_eval(&ckpt, &parse_overrides(&overrides)?)?;
            for r in &records {
                println!("{}", r.to_line());
            }
            print_records(&records);
        }
        Command::Gradcheck { verbose } => {
            let cases = gradcheck_suite()?;
            let mut failed = 0;
            let mut worst = 0.0f64;
            for c in &cases {
                worst = worst.max(c.report.max_rel_error);
                if !c.passes() {
                    failed += 1;
                }
                if verbose || !c.passes() {
                    println!(
                        "{} {} max_rel_error {:.3e}",
                        if c.passes() { "ok  " } else { "FAIL" },
                        c.name,
                        c.report.max_rel_error
                    );
                }
            }
            println!(
                "{} cases, {failed} failed, worst relative error {worst:.3e} (tolerance {TOLERANCE:e})",
                cases.len()
            );
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::DumpAttn {
            ckpt,
            layer,
            head,
            mode,
            input_file,
            out,
        } => {
            let text = std::fs::read_to_string(&input_file)
                .with_context(|| format!("reading {}", input_file.display()))?;
            let tokens = read_tokens(&text)?;
            let mode = match mode {
                Mode::Position => DumpMode::Position,
                Mode::Gates => DumpMode::Gates,
            };
            let dump = dump_checkpoint(&ckpt, &tokens, layer, head, mode)?;
            std::fs::write(&out, dump.to_text())
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} rows to {}", dump.rows.len(), out.display());
        }
        Command::Sweep {
            config,
            key,
            values,
            out,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides, Vec::new())?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let csv = run_sweep(&cfg, &key, &values, &out)?;
            print!("{csv}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
