//! Command-line interface: data generation, training, sampling, evaluation
//! and checkpoint inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array3, Array4, Axis};

use crate::config::{parse_size, RunConfig};
use crate::error::{Error, Result};
use crate::inference::{tryon_video, SampleOptions};
use crate::metrics::{evaluate_sample, summarize, write_eval_csv};
use crate::network::DpidmModel;
use crate::synthdata::{self, save_rgb, SceneSpec};
use crate::training::{self, Checkpoint, ClipArrays, TrainOutputs, Trainer};

pub const ENV_DETERMINISTIC: &str = "DPIDM_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "dpidm", version, about = "Pose-aware video virtual try-on with latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic try-on dataset.
    MakeData(MakeDataArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Try a garment on a video.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Print the contents of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Canvas as HxW.
    #[arg(long, default_value = "64x48")]
    pub size: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    /// Window length; defaults to the training clip length.
    #[arg(long)]
    pub window: Option<usize>,
    /// Window stride; defaults to half the window.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = crate::diffusion::DEFAULT_GUIDANCE)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sample directory providing the video, mask and poses.
    #[arg(long)]
    pub video: PathBuf,
    /// Sample directory whose garment is tried on; defaults to --video.
    #[arg(long)]
    pub garment: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Build the model from this config instead of the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset manifest of the test split.
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Score the ground truth against itself instead of sampling.
    #[arg(long)]
    pub bypass: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 3,
        Error::Incompatible(_) | Error::Format(_) => 4,
        Error::Tensor(_) => 1,
        _ => 2,
    }
}

/// Entry point used by the binary.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if std::env::var(ENV_DETERMINISTIC).is_ok_and(|v| v == "1") {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(a) => make_data(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a),
        Command::Inspect(a) => inspect(&a),
    }
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let size = parse_size(&a.size)?;
    synthdata::validate_canvas(size)?;
    if a.frames == 0 {
        return Err(Error::Config("--frames must be at least 1".into()));
    }
    let specs: Vec<SceneSpec> = (0..a.count)
        .map(|i| SceneSpec::random(crate::util::derive_seed(a.seed, i as u64), a.frames, size))
        .collect();
    let manifest = synthdata::write_dataset(&specs, &a.out)?;
    println!("{}", manifest.path().display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let (_, samples) = synthdata::read_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", a.data.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let config_text = cfg.to_text();
    let cfg_path = a.out.join("config.txt");
    std::fs::write(&cfg_path, &config_text).map_err(|e| Error::io(&cfg_path, e))?;
    let model = DpidmModel::new(cfg.model.clone(), cfg.train.seed, DType::F32)?;
    let mut trainer = Trainer::new(model, &samples, cfg.train.clone())?;
    let outputs = TrainOutputs {
        dir: a.out.clone(),
        config_text,
    };
    match trainer.run(Some(&outputs)) {
        Ok(records) => {
            if let Some(last) = records.last() {
                println!("finished {} iterations, last total loss {:.5}", trainer.iteration, last.total);
            }
            println!("{}", a.out.join(training::CHECKPOINT_FILE).display());
            Ok(())
        }
        Err(e) => {
            if let Ok(p) = training::write_failure_report(&a.out, &e) {
                eprintln!("diagnostics written to {}", p.display());
            }
            Err(e)
        }
    }
}

/// Rebuilds the model described by a checkpoint (or by `config`, which must
/// then be compatible with the stored parameters).
pub fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<(DpidmModel, RunConfig)> {
    let ck = Checkpoint::load(ckpt)?;
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse(&ck.config_text)
            .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?,
    };
    let model = DpidmModel::new(cfg.model.clone(), cfg.train.seed, DType::F32)?;
    ck.restore_params(&model.store)?;
    Ok((model, cfg))
}

fn options(s: &SamplingArgs, cfg: &RunConfig) -> SampleOptions {
    let window = s.window.unwrap_or(cfg.train.clip_length);
    SampleOptions {
        window,
        stride: s.stride.unwrap_or((window / 2).max(1)),
        steps: s.steps,
        guidance: s.guidance,
        seed: s.seed,
    }
}

/// Frames side by side in one row, `[3, H, T*W]`.
pub fn contact_sheet(frames: &Array4<f32>) -> Array3<f32> {
    let (t, c, h, w) = frames.dim();
    let mut sheet = Array3::zeros((c, h, t * w));
    for f in 0..t {
        sheet.slice_mut(s![.., .., f * w..(f + 1) * w]).assign(&frames.index_axis(Axis(0), f));
    }
    sheet
}

fn sample(a: &SampleArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt, a.config.as_deref())?;
    let video = synthdata::read_sample_dir(&a.video)?;
    let garment = match &a.garment {
        Some(g) => synthdata::read_sample_dir(g)?,
        None => video.clone(),
    };
    let inputs = ClipArrays {
        target: None,
        agnostic: &video.agnostic_video,
        mask: &video.agnostic_mask,
        garment_image: &garment.garment_image,
        human_pose: &video.human_pose,
        garment_pose: &garment.garment_pose,
    };
    let opts = options(&a.sampling, &cfg);
    let out = tryon_video(&model, &video.source_video, inputs, &opts, &cfg.train.schedule()?)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for f in 0..out.dim().0 {
        save_rgb(out.index_axis(Axis(0), f), &a.out.join(format!("frame_{f:04}.png")))?;
    }
    save_rgb(contact_sheet(&out).view(), &a.out.join("contact_sheet.png"))?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (model, cfg) = load_model(&a.ckpt, a.config.as_deref())?;
    let manifest = synthdata::read_manifest(&a.data)?;
    let opts = options(&a.sampling, &cfg);
    let schedule = cfg.train.schedule()?;
    let mut rows = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let sample = synthdata::read_sample(&manifest.sample_dir(i), e.garment_kind)?;
        rows.push(evaluate_sample(&model, &sample, &e.dir, &opts, &schedule, a.bypass)?);
    }
    write_eval_csv(&rows, &a.out)?;
    match summarize(&rows) {
        Some(m) => println!(
            "mean over {} samples: ssim {:.4} flicker_raw {:.4} flicker_excess {:.4} tra_stat {:.6}",
            rows.len(),
            m[0],
            m[1],
            m[2],
            m[3]
        ),
        None => println!("no samples evaluated"),
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let scalars: usize = ck.params.values().map(|e| e.data.len()).sum();
    println!("format: DPIDMCKP v{}", training::checkpoint::VERSION);
    println!("iteration: {}", ck.iteration);
    println!("parameters: {} arrays, {} scalars", ck.params.len(), scalars);
    println!("optimizer entries: {}", ck.optimizer.len());
    println!("config:");
    for line in ck.config_text.lines() {
        println!("  {line}");
    }
    for (name, e) in &ck.params {
        println!("{name} {:?}", e.dims);
    }
    Ok(())
}
