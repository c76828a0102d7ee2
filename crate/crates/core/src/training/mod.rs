//! Joint image-video training with alternating parameter groups.

pub mod adam;
pub mod checkpoint;
pub mod data;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, Entry};
pub use data::{assemble, Batch, ClipArrays, ClipTensors, TrainingData};

use std::fmt;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng as _;

use crate::attention::Mode;
use crate::diffusion::{self, LossConfig, NoiseSchedule, VIDEO_LAMBDA};
use crate::error::{Error, Result};
use crate::network::{Branch, DpidmModel, ParamStore};
use crate::synthdata::TryOnSample;
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub clip_length: usize,
    pub learning_rate: f64,
    pub total_iters: u64,
    pub lambda_image: f64,
    pub lambda_video: f64,
    pub keypoint_drop_prob: f64,
    pub garment_cond_drop_prob: f64,
    pub flip_prob: f64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Diffusion timesteps of the noise schedule.
    pub diffusion_steps: usize,
    pub codec_iters: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            clip_length: 8,
            learning_rate: 1e-3,
            total_iters: 2000,
            lambda_image: 0.0,
            lambda_video: VIDEO_LAMBDA,
            keypoint_drop_prob: 0.05,
            garment_cond_drop_prob: 0.1,
            flip_prob: 0.5,
            seed: 0,
            checkpoint_interval: 500,
            diffusion_steps: diffusion::DEFAULT_TRAIN_STEPS,
            codec_iters: 1200,
            codec_batch: 4,
            codec_lr: 5e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clip_length < 2 {
            return Err(Error::Config("clip_length must be at least 2 for video phases".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.codec_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_image < 0.0 || self.lambda_video < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.diffusion_steps < 2 {
            return Err(Error::Config("diffusion_steps must be at least 2".into()));
        }
        if self.codec_batch == 0 {
            return Err(Error::Config("codec_batch must be at least 1".into()));
        }
        prob("keypoint_drop_prob", self.keypoint_drop_prob)?;
        prob("garment_cond_drop_prob", self.garment_cond_drop_prob)?;
        prob("flip_prob", self.flip_prob)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, diffusion::BETA_START, diffusion::BETA_END)
    }
}

/// Image steps train the spatial attention; video steps the temporal one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Image,
    Video,
}

impl Phase {
    /// Phases alternate every iteration, starting with an image step.
    pub fn for_iteration(iter: u64) -> Self {
        if iter % 2 == 0 {
            Phase::Image
        } else {
            Phase::Video
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Phase::Image => Mode::Image,
            Phase::Video => Mode::Video,
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        matches!(
            (self, group),
            (_, ParamGroup::Shared) | (Phase::Image, ParamGroup::Spatial | ParamGroup::Backbone) | (Phase::Video, ParamGroup::Temporal)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Image => "image",
            Phase::Video => "video",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    /// PASA and CA sub-blocks with their adapters.
    Spatial,
    /// TSA and PATA sub-blocks with their adapters.
    Temporal,
    /// Pose encoder and garment encoder; train in both phases.
    Shared,
    /// Convolutional backbone of both U-Nets.
    Backbone,
    /// Latent codec.
    Frozen,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("codec.") {
            ParamGroup::Frozen
        } else if name.starts_with("pose_enc.") || name.starts_with("garment_enc.") {
            ParamGroup::Shared
        } else if name.contains(".tsa.") || name.contains(".pata.") {
            ParamGroup::Temporal
        } else if name.contains(".pasa.") || name.contains(".ca.") {
            ParamGroup::Spatial
        } else {
            ParamGroup::Backbone
        }
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iter: u64,
    pub phase: Phase,
    pub ldm: f64,
    pub tra: f64,
    pub total: f64,
}

/// Noise draw and timesteps of one step.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub timesteps: Vec<usize>,
    pub eps: Tensor,
}

/// Forward, backward and a gated optimizer update for one assembled batch.
#[allow(clippy::too_many_arguments)]
pub fn gradient_step(
    model: &DpidmModel,
    adam: &mut Adam,
    batch: &Batch,
    noise: &NoiseDraw,
    schedule: &NoiseSchedule,
    phase: Phase,
    lambda: f64,
    iter: u64,
) -> Result<StepRecord> {
    let z0 = batch
        .z0
        .as_ref()
        .ok_or_else(|| Error::Data("training batch has no target latents".into()))?;
    let frames = batch.cond.layout.frames;
    let z_t = diffusion::add_noise_batched(z0, &noise.eps, &noise.timesteps, frames, schedule)?;
    let prep = model.prepare(&batch.cond)?;
    let (pred, records) = model.denoise(&z_t, &noise.timesteps, &prep, phase.mode(), Branch::Conditional)?;
    let terms = diffusion::total_loss(&pred, &noise.eps, &records, &LossConfig::new(lambda))?;
    let rec = StepRecord {
        iter,
        phase,
        ldm: util::scalar_f64(&terms.ldm)?,
        tra: util::scalar_f64(&terms.tra)?,
        total: util::scalar_f64(&terms.total)?,
    };
    if !(rec.ldm.is_finite() && rec.tra.is_finite() && rec.total.is_finite()) {
        return Err(Error::NonFinite {
            step: iter,
            phase: phase.to_string(),
            ldm: rec.ldm,
            tra: rec.tra,
            total: rec.total,
        });
    }
    let grads = terms.total.backward()?;
    adam.step(&model.store, &grads, |name| phase.trains(ParamGroup::of(name)))?;
    Ok(rec)
}

/// Draws the batch, noise and timesteps of iteration `iter`. Everything is a
/// function of the seed and the iteration number, so resumed runs match.
pub fn draw_batch(
    data: &TrainingData,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    iter: u64,
    lambda_video: f64,
) -> Result<(Phase, Batch, NoiseDraw, f64)> {
    let phase = Phase::for_iteration(iter);
    let mut rng = util::rng(util::derive_seed(cfg.seed, iter));
    let frames = match phase {
        Phase::Image => 1,
        Phase::Video => cfg.clip_length,
    };
    if data.min_frames() < frames {
        return Err(Error::Data(format!(
            "clips need at least {frames} frames, shortest has {}",
            data.min_frames()
        )));
    }
    let mut clips = Vec::with_capacity(cfg.batch_size);
    let mut windows = Vec::with_capacity(cfg.batch_size);
    let mut keep = Vec::with_capacity(cfg.batch_size);
    let mut timesteps = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let i = rng.random_range(0..data.len());
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let clip = &data.clips[i][flip as usize];
        let start = rng.random_range(0..=clip.num_frames() - frames);
        clips.push(clip);
        windows.push((start, frames));
        keep.push(rng.random::<f64>() >= cfg.garment_cond_drop_prob);
        timesteps.push(rng.random_range(0..schedule.num_steps()));
    }
    let batch = assemble(&clips, &windows, keep, cfg.keypoint_drop_prob, rng.random())?;
    let like = &clips[0].agnostic_latent;
    let mut shape = like.dims().to_vec();
    shape[0] = cfg.batch_size * frames;
    let eps = util::randn(&mut rng, &shape, like.dtype(), like.device())?;
    let lambda = match phase {
        Phase::Image => cfg.lambda_image,
        Phase::Video => lambda_video,
    };
    Ok((phase, batch, NoiseDraw { timesteps, eps }, lambda))
}

/// Reconstruction pre-training of the latent codec, then fitting its scale
/// so encoded latents have unit standard deviation. Returns the final mean
/// absolute reconstruction error over `frames`.
pub fn pretrain_codec(model: &DpidmModel, frames: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let n = frames.dim(0)?;
    let mut adam = Adam::new(cfg.codec_lr);
    let mut rng = util::rng(util::derive_seed(cfg.seed, 0xc0dec));
    let is_codec = |name: &str| name.starts_with("codec.") && name != "codec.scale";
    for _ in 0..cfg.codec_iters {
        let idx: Vec<u32> = (0..cfg.codec_batch.min(n)).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::new(idx.as_slice(), frames.device())?;
        let x = frames.index_select(&idx, 0)?;
        let rec = model.codec.decode_raw(&model.codec.encode_raw(&x)?)?;
        let loss = (rec - &x)?.sqr()?.mean_all()?;
        let grads = loss.backward()?;
        adam.step(&model.store, &grads, is_codec)?;
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in 0..n.div_ceil(64) {
        let x = frames.narrow(0, chunk * 64, (n - chunk * 64).min(64))?;
        let z = model.codec.encode_raw(&x)?;
        sq += util::scalar_f64(&z.sqr()?.sum_all()?)?;
        count += z.elem_count();
    }
    let std = (sq / count as f64).sqrt().max(1e-6);
    model.store.assign("codec.scale", &Tensor::new(&[1.0 / std], frames.device())?)?;
    codec_mae(model, frames)
}

/// Mean absolute error of `decode(encode(x))` with outputs clamped to [0, 1].
pub fn codec_mae(model: &DpidmModel, frames: &Tensor) -> Result<f64> {
    let n = frames.dim(0)?;
    let mut total = 0.0;
    for chunk in 0..n.div_ceil(64) {
        let x = frames.narrow(0, chunk * 64, (n - chunk * 64).min(64))?;
        let rec = model.decode_latent(&model.encode_latent(&x)?)?.clamp(0.0, 1.0)?;
        total += util::scalar_f64(&(rec - &x)?.abs()?.sum_all()?)?;
    }
    Ok(total / frames.elem_count() as f64)
}

/// Where `train` writes its outputs.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
    /// Stored in every checkpoint so the model can be rebuilt.
    pub config_text: String,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Complete state of a training run.
pub struct Trainer {
    pub model: DpidmModel,
    pub adam: Adam,
    pub cfg: TrainConfig,
    pub schedule: NoiseSchedule,
    pub data: TrainingData,
    pub iteration: u64,
}

impl Trainer {
    /// Pre-trains the codec on `samples` (unless `codec_iters` is 0) and
    /// caches the encoded training clips.
    pub fn new(model: DpidmModel, samples: &[TryOnSample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if cfg.codec_iters > 0 {
            let frames = data::codec_frames(samples, model.dtype())?;
            let mae = pretrain_codec(&model, &frames, &cfg)?;
            log::info!("codec reconstruction MAE {mae:.4}");
        }
        let data = TrainingData::new(&model, samples)?;
        let adam = Adam::new(cfg.learning_rate);
        let schedule = cfg.schedule()?;
        Ok(Trainer {
            model,
            adam,
            cfg,
            schedule,
            data,
            iteration: 0,
        })
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let (phase, batch, noise, lambda) =
            draw_batch(&self.data, &self.cfg, &self.schedule, self.iteration, self.cfg.lambda_video)?;
        let rec = gradient_step(
            &self.model,
            &mut self.adam,
            &batch,
            &noise,
            &self.schedule,
            phase,
            lambda,
            self.iteration,
        )?;
        self.iteration += 1;
        Ok(rec)
    }

    pub fn checkpoint(&self, config_text: &str) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model.store, Some(&self.adam), self.iteration, config_text)
    }

    /// Runs until `total_iters`, appending `iter,phase,ldm,tra,total` rows to
    /// the log and writing checkpoints when `out` is given.
    pub fn run(&mut self, out: Option<&TrainOutputs>) -> Result<Vec<StepRecord>> {
        let mut log = match out {
            Some(o) => {
                let path = o.dir.join(LOG_FILE);
                let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "iter,phase,ldm,tra,total").map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < self.cfg.total_iters {
            let r = self.step()?;
            if let Some((f, path)) = log.as_mut() {
                writeln!(f, "{},{},{},{},{}", r.iter, r.phase, r.ldm, r.tra, r.total).map_err(|e| Error::io(&*path, e))?;
            }
            if r.iter % 100 == 0 {
                log::info!("iter {} {} total {:.5}", r.iter, r.phase, r.total);
            }
            records.push(r);
            if let Some(o) = out {
                let every = self.cfg.checkpoint_interval;
                if every > 0 && self.iteration % every == 0 && self.iteration < self.cfg.total_iters {
                    self.checkpoint(&o.config_text)?.save(&o.dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(o) = out {
            self.checkpoint(&o.config_text)?.save(&o.dir.join(CHECKPOINT_FILE))?;
        }
        Ok(records)
    }
}

/// Names of parameters whose values differ between two snapshots.
pub fn changed_params(
    before: &std::collections::BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    store: &ParamStore,
) -> Result<Vec<String>> {
    let after = store.snapshot()?;
    Ok(after
        .iter()
        .filter(|(k, (_, v))| {
            before
                .get(*k)
                .is_none_or(|(_, b)| b.iter().zip(v).any(|(x, y)| x.to_bits() != y.to_bits()))
        })
        .map(|(k, _)| k.clone())
        .collect())
}

/// Writes a diagnostic report for a failed run.
pub fn write_failure_report(dir: &Path, err: &Error) -> Result<PathBuf> {
    let path = dir.join("failure.txt");
    std::fs::write(&path, format!("{err}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_classification() {
        assert_eq!(ParamGroup::of("main.dec1.attn.pasa.q.weight"), ParamGroup::Spatial);
        assert_eq!(ParamGroup::of("main.dec1.attn.pasa.adapter.down.weight"), ParamGroup::Spatial);
        assert_eq!(ParamGroup::of("main.enc1.attn.ca.k.weight"), ParamGroup::Spatial);
        assert_eq!(ParamGroup::of("main.enc1.attn.tsa.norm.weight"), ParamGroup::Temporal);
        assert_eq!(ParamGroup::of("main.enc2.attn.pata.adapter.up.bias"), ParamGroup::Temporal);
        assert_eq!(ParamGroup::of("pose_enc.conv0.weight"), ParamGroup::Shared);
        assert_eq!(ParamGroup::of("garment_enc.null"), ParamGroup::Shared);
        assert_eq!(ParamGroup::of("codec.enc0.weight"), ParamGroup::Frozen);
        assert_eq!(ParamGroup::of("main.conv_in.weight"), ParamGroup::Backbone);
    }

    #[test]
    fn phase_gating_table() {
        assert_eq!(Phase::for_iteration(0), Phase::Image);
        assert_eq!(Phase::for_iteration(7), Phase::Video);
        assert!(Phase::Image.trains(ParamGroup::Spatial));
        assert!(!Phase::Image.trains(ParamGroup::Temporal));
        assert!(Phase::Video.trains(ParamGroup::Temporal));
        assert!(!Phase::Video.trains(ParamGroup::Spatial));
        assert!(!Phase::Video.trains(ParamGroup::Frozen) && !Phase::Image.trains(ParamGroup::Frozen));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { clip_length: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { flip_prob: 1.5, ..Default::default() }.validate().is_err());
    }
}
