//! Command-line surface: `gen`, `pretrain`, `adapt`, `eval`, `selftest`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    generate_frames, frames_to_samples, load_sequence, stock_domain_a, stock_domain_b,
    THING_CLASSES,
};
use crate::engine::{
    eval_protocol3, evaluate_set, load_checkpoint, param_hash, pretrain, run_multi_domain,
    save_checkpoint, EngineState, RunConfig,
};
use crate::error::{CodepsError, Result};
use crate::model::{gradient_check, CheckLoss, ModelConfig, ModelState};
use crate::replay::Sample;
use crate::Scalar;

#[derive(Parser)]
#[command(name = "codeps", about = "Online continual panoptic + depth adaptation, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainChoice {
    A,
    B,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic domain sequences to disk
    Gen {
        /// Dataset root directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        domain: DomainChoice,
        /// Frames per sequence
        #[arg(long, default_value_t = 120)]
        frames: usize,
    },
    /// Supervised source training; writes a checkpoint
    Pretrain {
        /// Source sequence directory
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Online adaptation over one or more target sequences
    Adapt {
        /// Pretrained checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled source sequence directory (replay + protocol 3)
        #[arg(long)]
        source: PathBuf,
        /// Target sequence directories, adapted in order
        #[arg(long, required = true, num_args = 1..)]
        target: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-step records here instead of stdout
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write protocol reports here as well as stdout
        #[arg(long)]
        report: Option<PathBuf>,
        /// Save the adapted model here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump mixed images and pseudo-labels per step into this directory
        #[arg(long)]
        debug_dump: Option<PathBuf>,
    },
    /// Frozen evaluation of a checkpoint on a labeled sequence
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Protocol number to stamp on the report
        #[arg(long, default_value_t = 2)]
        protocol: u8,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Gradient checks on a fresh model; exits nonzero on failure
    Selftest,
}

pub fn run_cli(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            out,
            domain,
            frames,
        } => cmd_gen(&out, domain, frames),
        Command::Pretrain { data, out, config } => cmd_pretrain(&data, &out, config.as_deref()),
        Command::Adapt {
            checkpoint,
            source,
            target,
            config,
            log,
            report,
            out,
            debug_dump,
        } => cmd_adapt(
            &checkpoint,
            &source,
            &target,
            config.as_deref(),
            log.as_deref(),
            report.as_deref(),
            out.as_deref(),
            debug_dump,
        ),
        Command::Eval {
            checkpoint,
            data,
            protocol,
            config,
        } => cmd_eval(&checkpoint, &data, protocol, config.as_deref()),
        Command::Selftest => cmd_selftest(),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CodepsError::io(p.display().to_string(), e))?;
            RunConfig::from_kv_text(&text, &p.display().to_string())
        }
        None => RunConfig::from_kv_text("", "<defaults>"),
    }
}

fn require_checkpoint(path: &Path) -> Result<ModelState<Scalar>> {
    if !path.exists() {
        return Err(CodepsError::invalid(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    load_checkpoint(path)
}

fn domain_tag(seq: &Path) -> String {
    seq.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "domain".to_string())
}

fn cmd_gen(out: &Path, domain: DomainChoice, frames: usize) -> Result<()> {
    let specs = match domain {
        DomainChoice::A => vec![stock_domain_a(frames)],
        DomainChoice::B => vec![stock_domain_b(frames)],
        DomainChoice::Both => vec![stock_domain_a(frames), stock_domain_b(frames)],
    };
    for spec in specs {
        let seq = crate::data::generate_domain::<Scalar>(&spec, out)?;
        println!("generated {} ({} frames)", seq.display(), frames);
    }
    Ok(())
}

fn cmd_pretrain(data: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let rc = load_run_config(config)?;
    let samples: Vec<Sample<Scalar>> = load_sequence(data, &domain_tag(data))?;
    let (model, losses) = pretrain(
        rc.model.clone(),
        &samples,
        rc.pretrain_steps,
        rc.pretrain_lr,
        &rc.adapt.weights(),
        rc.adapt.seed,
    )?;
    save_checkpoint(&model, out)?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "pretrained {} steps on {} samples, final loss {:.6}, hash {}",
        losses.len(),
        samples.len(),
        last,
        param_hash(&model)
    );
    println!("saved {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    checkpoint: &Path,
    source: &Path,
    targets: &[PathBuf],
    config: Option<&Path>,
    log: Option<&Path>,
    report: Option<&Path>,
    out: Option<&Path>,
    debug_dump: Option<PathBuf>,
) -> Result<()> {
    let mut rc = load_run_config(config)?;
    rc.adapt.debug_dump = debug_dump;
    let model = require_checkpoint(checkpoint)?;

    let source_samples: Vec<Sample<Scalar>> = load_sequence(source, &domain_tag(source))?;
    let split = ((rc.adapt.split_fraction * source_samples.len() as f64).ceil() as usize)
        .clamp(1, source_samples.len());
    let (source_train, source_val) = source_samples.split_at(split.min(source_samples.len() - 1));

    let mut domains = Vec::new();
    for t in targets {
        domains.push(load_sequence::<Scalar>(t, &domain_tag(t))?);
    }

    let mut engine = EngineState::new(model, source_train, &rc.adapt)?;
    let (reports, records) =
        run_multi_domain(&domains, &mut engine, source_val, &THING_CLASSES, &rc.adapt)?;

    let step_text: String = records.iter().map(|r| r.log_line() + "\n").collect();
    match log {
        Some(p) => {
            fs::write(p, &step_text).map_err(|e| CodepsError::io(p.display().to_string(), e))?
        }
        None => print!("{step_text}"),
    }
    let report_text: String = reports.iter().map(|r| r.log_line() + "\n").collect();
    print!("{report_text}");
    if let Some(p) = report {
        fs::write(p, &report_text).map_err(|e| CodepsError::io(p.display().to_string(), e))?;
    }
    println!("final hash {}", param_hash(&engine.student));
    if let Some(p) = out {
        save_checkpoint(&engine.student, p)?;
        println!("saved {}", p.display());
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, protocol: u8, config: Option<&Path>) -> Result<()> {
    let rc = load_run_config(config)?;
    let model = require_checkpoint(checkpoint)?;
    let samples: Vec<Sample<Scalar>> = load_sequence(data, &domain_tag(data))?;
    let report = if protocol == 3 {
        eval_protocol3(&model, &samples, &THING_CLASSES, &rc.adapt)?
    } else {
        evaluate_set(
            &model,
            &samples,
            &THING_CLASSES,
            &rc.adapt,
            protocol,
            &domain_tag(data),
        )?
    };
    println!("{}", report.log_line());
    Ok(())
}

fn cmd_selftest() -> Result<()> {
    // gradient checks run in f64; a small frame keeps this under a second
    let spec = crate::data::DomainSpec {
        height: 24,
        width: 32,
        fx: 30.0,
        fy: 30.0,
        cx: 16.0,
        cy: 12.0,
        num_frames: 5,
        ..stock_domain_a(5)
    };
    let frames = generate_frames::<f64>(&spec)?;
    let samples = frames_to_samples(&frames, spec.intrinsics()?, &spec.tag, true);
    let sample = &samples[0];
    let config = ModelConfig {
        height: 24,
        width: 32,
        enc_channels: [4, 6],
        seed: 3,
        ..ModelConfig::default()
    };
    let weights = crate::losses::LossWeights::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for loss in [CheckLoss::Photometric, CheckLoss::Semantic, CheckLoss::Instance] {
        let mut model = ModelState::<f64>::new(config.clone())?;
        let outcome = gradient_check(&mut model, sample, loss, &weights, 6, 1e-5, &mut rng)?;
        println!(
            "{loss:?}: max rel error {:.3e} over {} coords (worst {})",
            outcome.max_rel_error, outcome.coords_checked, outcome.worst_param
        );
        worst = worst.max(outcome.max_rel_error);
    }
    println!("max gradient-check error: {worst:.3e}");
    if worst >= 1e-4 {
        return Err(CodepsError::contract("gradient self-test exceeded 1e-4"));
    }
    Ok(())
}
