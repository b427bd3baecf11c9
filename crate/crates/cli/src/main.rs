//! `uasplat`: synthetic talking-head data, training, rendering, evaluation
//! and the fusion ablation from the command line.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;
use uasplat::features::load_wav;
use uasplat::train::{
    ablate_fusion, evaluate, init_model, inputs_for, render_frame, train, write_trace, Dataset,
    TrainError,
};

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(TrainError::Diverged { .. }) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "uasplat",
    version,
    about = "Uncertainty-aware deformable Gaussian splatting on a synthetic talking head"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// `key = value` config file; `--key value` overrides follow it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the synthetic scene and render its frames, masks and features.
    SynthScene(RunArgs),
    /// Two-stage training on a synthetic dataset.
    Train(RunArgs),
    /// Render every dataset frame from a trained run.
    Render(RunArgs),
    /// PSNR, SSIM and L1 of a trained run.
    Eval(RunArgs),
    /// Train with uncertainty and with uniform fusion and compare.
    AblateFusion(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SynthScene(_) => "synth-scene",
            Command::Train(_) => "train",
            Command::Render(_) => "render",
            Command::Eval(_) => "eval",
            Command::AblateFusion(_) => "ablate-fusion",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::SynthScene(a)
            | Command::Train(a)
            | Command::Render(a)
            | Command::Eval(a)
            | Command::AblateFusion(a) => a,
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))
}

fn read_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join("dataset.txt").is_file() {
        return Err(CliError::Usage(format!("no dataset at {}", dir.display())));
    }
    Ok(Dataset::read(dir)?)
}

fn feature_dims(ds: &Dataset) -> (usize, usize) {
    (
        ds.f_exp.first().map_or(0, Vec::len),
        ds.f_tone.first().map_or(0, Vec::len),
    )
}

fn synth_scene(cfg: &RunConfig) -> Result<String, CliError> {
    let (harness, dims) = cfg.harness()?;
    let audio = match cfg.str("wav") {
        "" => None,
        p => Some(load_wav(Path::new(p)).map_err(TrainError::from)?),
    };
    let ds = Dataset::generate(&harness, &dims, audio)?;
    let out = cfg.path("out");
    create_dir(&out)?;
    ds.write(&out)?;
    cfg.write(&out.join("synth-scene.config"))?;
    Ok(format!(
        "synth-scene: {} frames of {} primitives at {}x{} written to {}",
        ds.frames(),
        harness.primitives,
        harness.width,
        harness.height,
        out.display()
    ))
}

fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = read_dataset(&cfg.path("data"))?;
    let (e, t) = feature_dims(&ds);
    let tc = cfg.train(e, t)?;
    let out = cfg.path("out");
    create_dir(&out)?;
    cfg.write(&out.join("train.config"))?;
    let run = train(&ds, &tc)?;
    run.model.save(&out.join("model.bin"))?;
    write_trace(&out.join("trace.csv"), &run.trace)?;
    let last = run
        .trace
        .last()
        .map_or("none".to_string(), |r| format!("{:.6}", r.loss));
    Ok(format!(
        "train: {}+{} iterations, last loss {last}, checkpoint {}",
        tc.branch_iterations,
        tc.joint_iterations,
        out.join("model.bin").display()
    ))
}

/// Dataset, model and conditioning inputs of a finished training run.
fn load_run(
    cfg: &RunConfig,
) -> Result<
    (
        Dataset,
        uasplat::train::Model,
        Vec<uasplat::train::FrameInputs>,
    ),
    CliError,
> {
    let ds = read_dataset(&cfg.path("data"))?;
    let run = cfg.path("run");
    let train_cfg = run.join("train.config");
    let ckpt = run.join("model.bin");
    if !train_cfg.is_file() || !ckpt.is_file() {
        return Err(CliError::Usage(format!(
            "no trained run at {}",
            run.display()
        )));
    }
    let (e, t) = feature_dims(&ds);
    let tc = RunConfig::resolve("train", Some(&train_cfg), &[])?.train(e, t)?;
    let mut model = init_model(&ds, &tc)?;
    model.load(&ckpt)?;
    let inputs = inputs_for(&ds, &tc)?;
    Ok((ds, model, inputs))
}

fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let (ds, model, inputs) = load_run(cfg)?;
    let frames: Vec<usize> = match cfg.str("split") {
        "heldout" => ds.harness.heldout_frames().collect(),
        "train" => ds.harness.train_frames().collect(),
        "all" => (0..ds.frames()).collect(),
        other => {
            return Err(CliError::Usage(format!(
                "split must be heldout, train or all, got `{other}`"
            )))
        }
    };
    let report = evaluate(&model, &ds, &inputs, &frames)?;
    let out = cfg.path("out");
    create_dir(&out)?;
    cfg.write(&out.join("eval.config"))?;
    let path = out.join("eval.txt");
    std::fs::write(&path, report.to_text())
        .map_err(|e| CliError::Io(path.display().to_string(), e))?;
    Ok(format!(
        "eval: {} {} frames, psnr {:.3} dB, ssim {:.4}, l1 {:.5}",
        frames.len(),
        cfg.str("split"),
        report.psnr,
        report.ssim,
        report.l1
    ))
}

fn cmd_render(cfg: &RunConfig) -> Result<String, CliError> {
    let (ds, model, inputs) = load_run(cfg)?;
    let cam = ds.camera()?;
    let out = cfg.path("out");
    create_dir(&out)?;
    cfg.write(&out.join("render.config"))?;
    for (f, inp) in inputs.iter().enumerate() {
        let path = out.join(format!("frame_{f:04}.ppm"));
        render_frame(&model, inp, &cam)?
            .write_ppm(&path)
            .map_err(TrainError::from)?;
    }
    Ok(format!(
        "render: {} frames written to {}",
        inputs.len(),
        out.display()
    ))
}

fn cmd_ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let ds = read_dataset(&cfg.path("data"))?;
    let (e, t) = feature_dims(&ds);
    let tc = cfg.train(e, t)?;
    let out = cfg.path("out");
    create_dir(&out)?;
    cfg.write(&out.join("ablate-fusion.config"))?;
    let report = ablate_fusion(&ds, &tc)?;
    let path = out.join("ablation.txt");
    std::fs::write(&path, report.to_text())
        .map_err(|e| CliError::Io(path.display().to_string(), e))?;
    Ok(format!(
        "ablate-fusion: uncertainty {:.3} dB, uniform {:.3} dB, gain {:+.3} dB",
        report.rows[0].report.psnr,
        report.rows[1].report.psnr,
        report.psnr_gain()
    ))
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let name = cli.command.name();
    let args = cli.command.args();
    let cfg = RunConfig::resolve(name, args.config.as_deref(), &args.overrides)?;
    match cli.command {
        Command::SynthScene(_) => synth_scene(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Render(_) => cmd_render(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::AblateFusion(_) => cmd_ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
