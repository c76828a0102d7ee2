//! Sliding-window try-on of videos of any length.

use candle_core::Tensor;
use ndarray::{Array4, Zip};

use crate::attention::Mode;
use crate::diffusion::{ddim_sample, NoiseSchedule, DEFAULT_GUIDANCE};
use crate::error::{Error, Result};
use crate::network::{Branch, DpidmModel};
use crate::training::{assemble, ClipArrays, ClipTensors};
use crate::util;

/// A window of frames `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub window: usize,
    pub stride: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

impl SampleOptions {
    /// Windows of `window` frames with half-window overlap.
    pub fn new(window: usize) -> Self {
        SampleOptions {
            window,
            stride: (window / 2).max(1),
            steps: 20,
            guidance: DEFAULT_GUIDANCE,
            seed: 0,
        }
    }
}

/// Windows start at 0, s, 2s, ...; the last one is aligned to the final
/// frame. Videos no longer than the window get a single window.
pub fn plan_windows(len: usize, window: usize, stride: usize) -> Result<Vec<Window>> {
    if len == 0 {
        return Err(Error::Config("video has no frames".into()));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be at least 1".into()));
    }
    if stride > window {
        return Err(Error::Config(format!("stride {stride} exceeds window {window}")));
    }
    let t = window.min(len);
    let mut out = Vec::new();
    let mut start = 0;
    while start + t < len {
        out.push(Window { start, len: t });
        start += stride;
    }
    out.push(Window { start: len - t, len: t });
    Ok(out)
}

pub fn coverage_counts(len: usize, windows: &[Window]) -> Vec<usize> {
    let mut c = vec![0; len];
    for w in windows {
        for n in &mut c[w.start..w.start + w.len] {
            *n += 1;
        }
    }
    c
}

/// Produces clean latents `[len, C, h, w]` for one window from its slice of
/// the shared initial noise.
pub trait WindowDenoiser {
    fn denoise_window(&self, window: Window, noise: &Tensor) -> Result<Tensor>;
}

impl<F> WindowDenoiser for F
where
    F: Fn(Window, &Tensor) -> Result<Tensor>,
{
    fn denoise_window(&self, window: Window, noise: &Tensor) -> Result<Tensor> {
        self(window, noise)
    }
}

/// Denoises every window from the per-frame noise `noise` (`[len, C, h, w]`,
/// so frames shared by windows start from identical noise) and averages
/// each frame over the windows covering it.
pub fn sliding_window_latents<D: WindowDenoiser + ?Sized>(den: &D, noise: &Tensor, windows: &[Window]) -> Result<Tensor> {
    let len = noise.dim(0)?;
    let mut acc: Vec<Option<Tensor>> = vec![None; len];
    for &w in windows {
        let out = den.denoise_window(w, &noise.narrow(0, w.start, w.len)?)?;
        if out.dim(0)? != w.len {
            return Err(Error::Shape(format!("window of {} frames returned {}", w.len, out.dim(0)?)));
        }
        for i in 0..w.len {
            let f = out.get(i)?;
            let slot = &mut acc[w.start + i];
            *slot = Some(match slot.take() {
                None => f,
                Some(s) => (s + f)?,
            });
        }
    }
    let counts = coverage_counts(len, windows);
    let frames = acc
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(i, (s, n))| {
            let s = s.ok_or_else(|| Error::Index(format!("frame {i} is not covered by any window")))?;
            Ok(if n == 1 { s } else { (s / n as f64)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&frames, 0)?)
}

/// `mask * generated + (1 - mask) * source` for `[T, C, H, W]` videos and a
/// binary `[T, 1, H, W]` mask; unmasked pixels are copied bit for bit.
pub fn composite(source: &Array4<f32>, generated: &Array4<f32>, mask: &Array4<f32>) -> Result<Array4<f32>> {
    if source.dim() != generated.dim() {
        return Err(Error::Shape(format!("source {:?} vs generated {:?}", source.dim(), generated.dim())));
    }
    let (t, _, h, w) = source.dim();
    if mask.dim() != (t, 1, h, w) {
        return Err(Error::Shape(format!("mask {:?} does not match frames {:?}", mask.dim(), source.dim())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Validation("composite mask must contain only 0 and 1".into()));
    }
    let mut out = source.clone();
    let m = mask.broadcast(source.dim()).expect("mask broadcasts over channels");
    Zip::from(&mut out).and(generated).and(&m).for_each(|o, &g, &m| {
        if m == 1.0 {
            *o = g;
        }
    });
    Ok(out)
}

/// Model-backed window denoiser over one encoded clip.
pub struct ModelDenoiser<'a> {
    pub model: &'a DpidmModel,
    pub clip: &'a ClipTensors,
    pub schedule: &'a NoiseSchedule,
    pub steps: usize,
    pub guidance: f64,
}

impl WindowDenoiser for ModelDenoiser<'_> {
    fn denoise_window(&self, w: Window, noise: &Tensor) -> Result<Tensor> {
        let batch = assemble(&[self.clip], &[(w.start, w.len)], vec![true], 0.0, 0)?;
        let prep = self.model.prepare(&batch.cond)?;
        let eps = |z: &Tensor, t: usize, branch: Branch| -> Result<Tensor> {
            Ok(self.model.denoise(z, &[t], &prep, Mode::Video, branch)?.0.detach())
        };
        ddim_sample(&eps, noise, self.schedule, self.steps, self.guidance)
    }
}

/// Per-frame initial noise for a whole video, `[len, C, h, w]`.
pub fn initial_noise(model: &DpidmModel, len: usize, seed: u64) -> Result<Tensor> {
    let (h, w) = model.config.latent_size();
    let mut rng = util::rng(util::derive_seed(seed, 0x9015e));
    Ok(util::randn(
        &mut rng,
        &[len, crate::network::LATENT_CHANNELS, h, w],
        model.dtype(),
        model.store.device(),
    )?)
}

/// Clean latents of a whole video by sliding-window sampling.
pub fn tryon_latents(model: &DpidmModel, clip: &ClipTensors, opts: &SampleOptions, schedule: &NoiseSchedule) -> Result<Tensor> {
    let windows = plan_windows(clip.num_frames(), opts.window, opts.stride)?;
    let noise = initial_noise(model, clip.num_frames(), opts.seed)?;
    let den = ModelDenoiser {
        model,
        clip,
        schedule,
        steps: opts.steps,
        guidance: opts.guidance,
    };
    sliding_window_latents(&den, &noise, &windows)
}

/// Full try-on: sample latents, decode, clamp to [0, 1], and composite the
/// generated garment region into the source frames.
pub fn tryon_video(
    model: &DpidmModel,
    source: &Array4<f32>,
    inputs: ClipArrays,
    opts: &SampleOptions,
    schedule: &NoiseSchedule,
) -> Result<Array4<f32>> {
    let clip = ClipTensors::encode(model, ClipArrays { target: None, ..inputs }, false)?;
    let z = tryon_latents(model, &clip, opts, schedule)?;
    let frames = model.decode_latent(&z)?.clamp(0.0, 1.0)?;
    composite(source, &util::tensor_to_array4(&frames)?, inputs.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn starts(w: &[Window]) -> Vec<usize> {
        w.iter().map(|w| w.start).collect()
    }

    #[test]
    fn window_plans() {
        let w = plan_windows(6, 4, 2).unwrap();
        assert_eq!(starts(&w), vec![0, 2]);
        assert_eq!(coverage_counts(6, &w), vec![1, 1, 2, 2, 1, 1]);
        assert_eq!(plan_windows(3, 4, 2).unwrap(), vec![Window { start: 0, len: 3 }]);
        assert_eq!(starts(&plan_windows(7, 4, 2).unwrap()), vec![0, 2, 3]);
        assert_eq!(starts(&plan_windows(8, 4, 4).unwrap()), vec![0, 4]);
        assert!(matches!(plan_windows(6, 2, 3), Err(Error::Config(_))));
        assert!(plan_windows(0, 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_every_frame(len in 1usize..40, window in 1usize..10, stride_frac in 0.0f64..1.0) {
            let stride = 1 + ((window - 1) as f64 * stride_frac) as usize;
            let w = plan_windows(len, window, stride).unwrap();
            let c = coverage_counts(len, &w);
            prop_assert!(c.iter().all(|&n| n >= 1));
            prop_assert_eq!(w.last().unwrap().start + w.last().unwrap().len, len);
            prop_assert!(w.iter().all(|x| x.len == window.min(len)));
        }
    }

    #[test]
    fn constant_window_average() {
        let dev = Device::Cpu;
        let noise = Tensor::zeros((6, 1, 1, 1), DType::F32, &dev).unwrap();
        let w = plan_windows(6, 4, 2).unwrap();
        let stub = |win: Window, n: &Tensor| -> Result<Tensor> { Ok((n.ones_like()? * (win.start as f64 + 1.0))?) };
        let out = sliding_window_latents(&stub, &noise, &w).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn composite_cases() {
        let src = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, y, x)| (c + 2 * y + x) as f32 * 0.1);
        let gen = Array4::from_elem((1, 3, 2, 2), 0.9f32);
        let zeros = Array4::zeros((1, 1, 2, 2));
        assert_eq!(composite(&src, &gen, &zeros).unwrap(), src);
        let ones = Array4::ones((1, 1, 2, 2));
        assert_eq!(composite(&src, &gen, &ones).unwrap(), gen);
        let half = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, _, x)| x as f32);
        let out = composite(&src, &gen, &half).unwrap();
        for ((c, y, x), v) in out.index_axis(ndarray::Axis(0), 0).indexed_iter() {
            let want = if x == 1 { gen[[0, c, y, x]] } else { src[[0, c, y, x]] };
            assert_eq!(v.to_bits(), want.to_bits());
        }
        let bad = Array4::from_elem((1, 1, 2, 2), 0.5f32);
        assert!(matches!(composite(&src, &gen, &bad), Err(Error::Validation(_))));
    }
}
