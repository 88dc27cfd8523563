use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovfs_core::pipeline;
use ovfs_core::pretrain::LossToggles;
use ovfs_core::{Error, Result, RunConfig};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(
    name = "ovfs",
    version,
    about = "Open-vocabulary food segmentation at desk scale"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Comma-separated prompt templates, each with one `{}`.
    #[arg(long, global = true, value_delimiter = ',')]
    templates: Option<Vec<String>>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Frozen encoder archive.
    #[arg(long, global = true)]
    clip: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpora and the base/novel split.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        /// Segmentation training samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Contrastively pre-train the toy image and text encoders.
    PretrainClip,
    /// Stage I: pre-train the query-token learner on image-caption pairs.
    Pretrain {
        /// Enabled objectives, e.g. `itc,itm`.
        #[arg(long)]
        loss_toggles: Option<String>,
        /// Stage-I archive to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage II: train the segmenter on base classes.
    TrainSeg {
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Train the baseline that uses plain class-name embeddings.
        #[arg(long)]
        static_text: bool,
        /// Start from a randomly initialised learner instead of Stage I.
        #[arg(long)]
        no_stage1: bool,
    },
    /// Segment one image into a class-index PNG and a JSON sidecar.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names; defaults to the training classes.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
    /// Score a checkpoint on the evaluation images.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config {
        /// Print the full-scale reference settings instead of the defaults.
        #[arg(long)]
        reference: bool,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = match (&g.config, &cli.command) {
        (_, Command::Config { reference: true }) => RunConfig::reference_scale(),
        (Some(p), _) => RunConfig::load(p)?,
        (None, _) => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = &g.templates {
        cfg.stage2.templates = t.clone();
    }
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.out, &g.out),
        (&mut paths.data, &g.data),
        (&mut paths.clip, &g.clip),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    match &cli.command {
        Command::GenData { classes, samples } => {
            if let Some(n) = classes {
                cfg.data.n_classes = *n;
            }
            if let Some(n) = samples {
                cfg.data.n_train = *n;
            }
        }
        Command::Pretrain {
            loss_toggles,
            resume,
        } => {
            if let Some(t) = loss_toggles {
                cfg.stage1.loss_toggles = t.parse::<LossToggles>()?;
            }
            if resume.is_some() {
                cfg.paths.resume.clone_from(resume);
            }
        }
        Command::TrainSeg {
            stage1,
            static_text,
            no_stage1,
        } => {
            if stage1.is_some() {
                cfg.paths.stage1.clone_from(stage1);
            }
            cfg.static_text |= static_text;
            cfg.no_stage1 |= no_stage1;
        }
        Command::Infer { checkpoint, .. } | Command::Eval { checkpoint } => {
            if checkpoint.is_some() {
                cfg.paths.checkpoint.clone_from(checkpoint);
            }
        }
        Command::PretrainClip | Command::Config { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    let force = cli.global.force;
    match &cli.command {
        Command::GenData { .. } => print_json(&pipeline::gen_data(&cfg, force)?),
        Command::PretrainClip => {
            let r = pipeline::pretrain_clip(&cfg, force)?;
            print_json(&serde_json::json!({
                "steps": r.steps,
                "final_loss": r.losses.last(),
                "heldout_r1": r.heldout_r1,
                "converged": r.converged,
            }))
        }
        Command::Pretrain { .. } => print_json(&pipeline::pretrain(&cfg, force)?),
        Command::TrainSeg { .. } => print_json(&pipeline::train_seg(&cfg, force)?),
        Command::Infer { image, classes, .. } => {
            print_json(&pipeline::infer(&cfg, image, classes.as_deref(), force)?)
        }
        Command::Eval { .. } => {
            let report = pipeline::eval(&cfg, force)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Config { .. } => {
            print!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("OVFS_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::invalid(format!(
            "OVFS_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
