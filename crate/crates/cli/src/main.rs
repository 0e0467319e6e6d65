use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use sketchanim::pipeline::{cmd_eval, cmd_pretrain, cmd_render, cmd_stage1, cmd_stage2, cmd_stage3, cmd_synth};
use sketchanim::{CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "sketchanim", version, about = "Animate a vector sketch with the motion of a reference clip")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser on the built-in synthetic mixture.
    Pretrain,
    /// Fit appearance adapters to the sketch.
    Stage1,
    /// Fit motion adapters to the reference clip.
    Stage2,
    /// Distill the merged prior into an animated sketch.
    Stage3,
    /// Score the animation against the sketch and the reference track.
    Eval {
        /// Also distill and score the variants without motion or appearance adapters.
        #[arg(long)]
        ablation: bool,
    },
    /// Write a synthetic reference clip, its track and the demo sketch.
    Synth {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        shape: Option<String>,
    },
    /// Rasterize an SVG to PGM frames.
    Render,
}

#[derive(Args, Debug)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    sketch: Option<PathBuf>,
    #[arg(long, global = true)]
    video_dir: Option<PathBuf>,
    /// Sketch prompt for stage1, motion prompt for stage2.
    #[arg(long, global = true)]
    prompt: Option<String>,
    /// Step count of the command being run.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    rank: Option<usize>,
    #[arg(long, global = true)]
    lambda_a: Option<f64>,
    #[arg(long, global = true)]
    lambda_m: Option<f64>,
    #[arg(long, global = true)]
    frames: Option<usize>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    snapshot_every: Option<usize>,
    /// Any config key, applied after everything else (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, CliError> {
    let f = &cli.flags;
    let mut kv: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    };
    push("seed", f.seed.map(|v| v.to_string()));
    push("out", f.out.as_ref().map(|p| p.display().to_string()));
    push("sketch", f.sketch.as_ref().map(|p| p.display().to_string()));
    push("video_dir", f.video_dir.as_ref().map(|p| p.display().to_string()));
    push("rank", f.rank.map(|v| v.to_string()));
    push("lambda_a", f.lambda_a.map(|v| v.to_string()));
    push("lambda_m", f.lambda_m.map(|v| v.to_string()));
    push("frames", f.frames.map(|v| v.to_string()));
    push("resolution", f.resolution.map(|v| v.to_string()));
    push("snapshot_every", f.snapshot_every.map(|v| v.to_string()));
    if let Command::Synth { kind, shape } = &cli.command {
        push("kind", kind.clone());
        push("shape", shape.clone());
    }
    if let Some(p) = &f.prompt {
        let key = match cli.command {
            Command::Stage1 => "sketch_prompt",
            Command::Stage2 => "motion_prompt",
            _ => return Err(CliError::Config("--prompt applies to stage1 and stage2 only".into())),
        };
        kv.push((key.into(), p.clone()));
    }
    if let Some(s) = f.steps {
        let key = match cli.command {
            Command::Pretrain => "pretrain_steps",
            Command::Stage1 | Command::Stage2 => "steps",
            Command::Stage3 | Command::Eval { .. } => "iterations",
            _ => return Err(CliError::Config("--steps does not apply to this command".into())),
        };
        kv.push((key.into(), s.to_string()));
    }
    for s in &f.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(kv)
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.flags.config {
        cfg.apply_file(path)?;
    }
    for (k, v) in overrides(cli)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Pretrain => {
            let s = cmd_pretrain(&cfg)?;
            println!("held-out loss {:.4} -> {:.4}", s.heldout_before, s.heldout_after);
        }
        Command::Stage1 => {
            cmd_stage1(&cfg)?;
        }
        Command::Stage2 => {
            cmd_stage2(&cfg)?;
        }
        Command::Stage3 => {
            cmd_stage3(&cfg)?;
        }
        Command::Eval { ablation } => {
            cmd_eval(&cfg, *ablation)?;
            print!("{}", std::fs::read_to_string(cfg.out.join("scores.txt")).unwrap_or_default());
        }
        Command::Synth { .. } => {
            cmd_synth(&cfg)?;
        }
        Command::Render => {
            cmd_render(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
