use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use semsr_core::config::RunConfig;
use semsr_core::pipeline::{self, InferOptions};
use semsr_core::{Error, GuidanceMode};

/// Segmentation-guided diffusion super-resolution.
///
/// Settings come from built-in defaults, then `--config`, then `--set` and
/// command flags, in increasing precedence.
#[derive(Parser)]
#[command(name = "semsr", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Do not print the resolved configuration.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade HR images into LR/HR training pairs with a manifest.
    SynthPairs {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment LR images and cache masks, prompts and the embedding table.
    Preprocess {
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        cache: PathBuf,
    },
    /// Train on a pair directory; writes checkpoints and loss.csv into --run.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in --run.
        #[arg(long)]
        resume: bool,
    },
    /// Super-resolve every PNG in --lr.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Guidance reaching the fusion modules: full, no-mask, no-scmap or none.
        #[arg(long)]
        ablate: Option<GuidanceMode>,
        /// Dump per-image prompt, mask and fusion-site counters under <out>/debug.
        #[arg(long)]
        debug: bool,
    },
    /// Compute Y-channel PSNR/SSIM (and plugin metrics) for a directory.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        crop_border: Option<usize>,
    },
}

fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut v = Vec::new();
    match cmd {
        Command::SynthPairs { seed: Some(s), .. } => v.push(format!("seed={s}")),
        Command::Train { steps: Some(s), .. } => v.push(format!("train.steps={s}")),
        Command::Eval {
            crop_border: Some(c), ..
        } => v.push(format!("eval.crop_border={c}")),
        _ => {}
    }
    v
}

fn run(cli: Cli) -> semsr_core::Result<()> {
    let mut overrides = cli.common.overrides.clone();
    overrides.extend(flag_overrides(&cli.command));
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    if !cli.common.quiet {
        let source = match &cli.common.config {
            Some(p) => format!("defaults < {} < flags", p.display()),
            None => "defaults < flags".to_string(),
        };
        eprintln!("# resolved configuration ({source})\n{}", cfg.to_toml()?);
    }
    match cli.command {
        Command::SynthPairs { hr, out, .. } => {
            let m = pipeline::synth_pairs(&cfg, &hr, &out)?;
            println!(
                "{} pairs, {} errors, manifest sha256 {}",
                m.pairs.len(),
                m.errors.len(),
                pipeline::manifest_hash(&out)?
            );
        }
        Command::Preprocess { lr, cache } => {
            let r = pipeline::preprocess(&cfg, &lr, &cache)?;
            println!(
                "{} processed, {} cached, {} failed",
                r.processed.len(),
                r.skipped.len(),
                r.failed.len()
            );
            if !r.failed.is_empty() {
                return Err(Error::Validation(format!("{} images failed", r.failed.len())));
            }
        }
        Command::Train {
            data,
            cache,
            run,
            resume,
            ..
        } => {
            let r = pipeline::train(&cfg, &data, &cache, &run, resume)?;
            info!("{} parameters", r.parameters);
            println!(
                "steps {}..{} done, last loss {}, checkpoint {}",
                r.start_step + 1,
                r.final_step,
                r.losses.last().map(|l| format!("{:.5}", l.1)).unwrap_or_else(|| "-".into()),
                r.checkpoint.display()
            );
        }
        Command::Infer {
            checkpoint,
            lr,
            out,
            ablate,
            debug,
        } => {
            let r = pipeline::infer(&cfg, &checkpoint, &lr, &out, &InferOptions { debug, ablate })?;
            println!(
                "{} images written to {}, {} failed; fusion sites: mask {}, scmap {}, bypassed {}",
                r.outputs.len(),
                out.display(),
                r.failed.len(),
                r.sites.mask,
                r.sites.scmap,
                r.sites.bypassed
            );
            if !r.failed.is_empty() {
                return Err(Error::Validation(format!("{} images failed", r.failed.len())));
            }
        }
        Command::Eval { sr, hr, out, .. } => {
            let r = pipeline::eval(&cfg, &sr, hr.as_deref(), &out)?;
            println!("{}", serde_json::to_string_pretty(&r.aggregate)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
