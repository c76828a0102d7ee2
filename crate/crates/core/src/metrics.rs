//! Evaluation: SSIM, a masked flicker index, and the attention-map
//! temporal statistic.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, ArrayView3, Axis};

use crate::attention::Mode;
use crate::diffusion::{self, LossConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::network::{Branch, DpidmModel};
use crate::inference::{tryon_video, SampleOptions};
use crate::synthdata::TryOnSample;
use crate::training::{assemble, Batch, ClipArrays, ClipTensors};
use crate::util;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, xx)| (0..SSIM_WINDOW).map(|i| k[i] * x[[y, xx + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, xx)| (0..SSIM_WINDOW).map(|i| k[i] * rows[[y + i, xx]]).sum())
}

/// Local SSIM of one channel at every valid window position.
fn ssim_map(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f64> {
    let k = gaussian_kernel();
    let a = a.mapv(f64::from);
    let b = b.mapv(f64::from);
    let mu_a = filter(&a, &k);
    let mu_b = filter(&b, &k);
    let saa = filter(&(&a * &a), &k) - &mu_a * &mu_a;
    let sbb = filter(&(&b * &b), &k) - &mu_b * &mu_b;
    let sab = filter(&(&a * &b), &k) - &mu_a * &mu_b;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = (2.0 * &mu_a * &mu_b + c1) * (2.0 * &sab + c2);
    let den = (&mu_a * &mu_a + &mu_b * &mu_b + c1) * (saa + sbb + c2);
    num / den
}

fn check_image_pair(a: &ArrayView3<f32>, b: &ArrayView3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images {:?} and {:?} differ", a.dim(), b.dim())));
    }
    let (_, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    Ok(())
}

/// Mean local SSIM of two `[C, H, W]` images with values in [0, 1],
/// averaged over channels.
pub fn ssim(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    check_image_pair(&a, &b)?;
    let c = a.dim().0;
    let total: f64 = (0..c)
        .map(|i| ssim_map(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i)).mean().unwrap_or(0.0))
        .sum();
    Ok(total / c as f64)
}

/// SSIM averaged over windows whose centre pixel lies inside `mask`
/// (`[1, H, W]` or `[H, W]`-shaped, nonzero = inside).
pub fn masked_ssim(a: ArrayView3<f32>, b: ArrayView3<f32>, mask: ArrayView2<f32>) -> Result<f64> {
    check_image_pair(&a, &b)?;
    let (c, h, w) = a.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match image {h}x{w}", mask.dim())));
    }
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..c {
        let m = ssim_map(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i));
        for ((y, x), v) in m.indexed_iter() {
            if mask[[y + r, x + r]] != 0.0 {
                total += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("mask covers no SSIM window centre".into()));
    }
    Ok(total / count as f64)
}

/// Frame-averaged SSIM of two `[T, C, H, W]` videos.
pub fn video_ssim(a: &Array4<f32>, b: &Array4<f32>) -> Result<f64> {
    let t = a.dim().0;
    let mut s = 0.0;
    for f in 0..t {
        s += ssim(a.index_axis(Axis(0), f), b.index_axis(Axis(0), f))?;
    }
    Ok(s / t as f64)
}

/// Frame-averaged masked SSIM; `mask` is `[T, 1, H, W]`.
pub fn video_masked_ssim(a: &Array4<f32>, b: &Array4<f32>, mask: &Array4<f32>) -> Result<f64> {
    let t = a.dim().0;
    let mut s = 0.0;
    for f in 0..t {
        let m = mask.index_axis(Axis(0), f);
        s += masked_ssim(a.index_axis(Axis(0), f), b.index_axis(Axis(0), f), m.index_axis(Axis(0), 0))?;
    }
    Ok(s / t as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlickerIndex {
    pub raw: f64,
    /// `raw` minus the same statistic of the ground truth.
    pub excess: f64,
}

/// Mean over consecutive frame pairs of the mean absolute difference inside
/// the union of the two frames' masks.
fn flicker_raw(video: &Array4<f32>, mask: &Array4<f32>) -> Result<f64> {
    let (t, c, h, w) = video.dim();
    if t < 2 {
        return Err(Error::Validation("flicker index needs at least 2 frames".into()));
    }
    if mask.dim() != (t, 1, h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match video {:?}", mask.dim(), video.dim())));
    }
    let mut sum = 0.0;
    for j in 1..t {
        let mut diff = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask[[j, 0, y, x]] == 0.0 && mask[[j - 1, 0, y, x]] == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    diff += (video[[j, ch, y, x]] as f64 - video[[j - 1, ch, y, x]] as f64).abs();
                }
                n += c;
            }
        }
        if n > 0 {
            sum += diff / n as f64;
        }
    }
    Ok(sum / (t - 1) as f64)
}

pub fn flicker_index(video: &Array4<f32>, mask: &Array4<f32>, truth: &Array4<f32>) -> Result<FlickerIndex> {
    if video.dim() != truth.dim() {
        return Err(Error::Shape(format!("video {:?} vs truth {:?}", video.dim(), truth.dim())));
    }
    let raw = flicker_raw(video, mask)?;
    Ok(FlickerIndex {
        raw,
        excess: raw - flicker_raw(truth, mask)?,
    })
}

/// Timestep at which the attention statistic is measured.
pub fn tra_timestep(schedule: &NoiseSchedule) -> usize {
    schedule.num_steps() / 2
}

/// Temporal attention variation of a trained model: the regularizer's value
/// on `batch` noised to the middle of the schedule, using one noise draw per
/// clip shared by all its frames. No gradients are kept.
pub fn tra_statistic(model: &DpidmModel, batch: &Batch, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let z0 = batch
        .z0
        .as_ref()
        .ok_or_else(|| Error::Data("statistic needs clean latents".into()))?
        .detach();
    let layout = batch.cond.layout;
    let (_, c, h, w) = z0.dims4()?;
    let mut rng = util::rng(util::derive_seed(seed, 0x7a5));
    let per_clip = util::randn(&mut rng, &[layout.batch, 1, c, h, w], z0.dtype(), z0.device())?;
    let eps = per_clip
        .broadcast_as((layout.batch, layout.frames, c, h, w))?
        .reshape((layout.items(), c, h, w))?;
    let t = tra_timestep(schedule);
    let z_t = diffusion::add_noise(&z0, &eps, t, schedule)?;
    let prep = model.prepare(&batch.cond)?;
    let ts = vec![t; layout.batch];
    let (_, records) = model.denoise(&z_t, &ts, &prep, Mode::Video, Branch::Conditional)?;
    let records: Vec<_> = records
        .into_iter()
        .map(|mut r| {
            r.probs = r.probs.detach();
            r
        })
        .collect();
    util::scalar_f64(&diffusion::tra_loss(&records, &LossConfig::new(0.0))?).map_err(Into::into)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample_id: String,
    pub ssim: f64,
    pub flicker_raw: f64,
    pub flicker_excess: f64,
    pub tra_stat: f64,
}

pub const EVAL_HEADER: &str = "sample_id,ssim,flicker_raw,flicker_excess,tra_stat";

/// CSV text with a header, one row per sample.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.sample_id, r.ssim, r.flicker_raw, r.flicker_excess, r.tra_stat
        );
    }
    s
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    std::fs::write(path, eval_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Column means of the numeric fields, `None` for an empty table.
pub fn summarize(rows: &[EvalRow]) -> Option<[f64; 4]> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mut m = [0.0; 4];
    for r in rows {
        m[0] += r.ssim / n;
        m[1] += r.flicker_raw / n;
        m[2] += r.flicker_excess / n;
        m[3] += r.tra_stat / n;
    }
    Some(m)
}

/// Runs try-on on one sample (or, with `bypass`, scores the ground truth
/// against itself) and computes every metric.
pub fn evaluate_sample(
    model: &DpidmModel,
    sample: &TryOnSample,
    sample_id: &str,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
    bypass: bool,
) -> Result<EvalRow> {
    let generated = if bypass {
        sample.target_video.clone()
    } else {
        tryon_video(model, &sample.source_video, ClipArrays::from_sample(sample, false), opts, schedule)?
    };
    let ssim = video_ssim(&generated, &sample.target_video)?;
    let (flicker_raw, flicker_excess) = if sample.num_frames() >= 2 {
        let f = flicker_index(&generated, &sample.agnostic_mask, &sample.target_video)?;
        (f.raw, f.excess)
    } else {
        (0.0, 0.0)
    };
    let tra_stat = if sample.num_frames() >= 2 {
        let clip = ClipTensors::encode(model, ClipArrays::from_sample(sample, true), false)?;
        let batch = assemble(&[&clip], &[(0, clip.num_frames())], vec![true], 0.0, 0)?;
        tra_statistic(model, &batch, schedule, opts.seed)?
    } else {
        0.0
    };
    Ok(EvalRow {
        sample_id: sample_id.to_string(),
        ssim,
        flicker_raw,
        flicker_excess,
        tra_stat,
    })
}
