//! Per-sample tensors cached for training and sampling, and batch assembly.

use candle_core::{DType, Tensor};
use ndarray::{Array3, Array4};
use rand::Rng as _;

use crate::attention::FrameLayout;
use crate::error::{Error, Result};
use crate::network::{Conditions, DpidmModel, LATENT_DOWNSAMPLE};
use crate::pose::{drop_keypoints, pose_maps_tensor, rasterize, SkeletonPose};
use crate::synthdata::TryOnSample;
use crate::util;

/// Encoded conditioning of one clip in one orientation. Latents are
/// `[T, C, h, w]`; garment tensors carry a leading batch axis of 1.
#[derive(Debug, Clone)]
pub struct ClipTensors {
    pub target_latent: Option<Tensor>,
    pub agnostic_latent: Tensor,
    pub mask_latent: Tensor,
    pub garment_latent: Tensor,
    pub garment_image: Tensor,
    pub human_pose: Vec<SkeletonPose>,
    pub garment_pose: SkeletonPose,
    pub canvas: (usize, usize),
}

/// Pixel-space inputs of a try-on request.
#[derive(Debug, Clone, Copy)]
pub struct ClipArrays<'a> {
    pub target: Option<&'a Array4<f32>>,
    pub agnostic: &'a Array4<f32>,
    pub mask: &'a Array4<f32>,
    pub garment_image: &'a Array3<f32>,
    pub human_pose: &'a [SkeletonPose],
    pub garment_pose: &'a SkeletonPose,
}

impl<'a> ClipArrays<'a> {
    pub fn from_sample(s: &'a TryOnSample, with_target: bool) -> Self {
        ClipArrays {
            target: with_target.then_some(&s.target_video),
            agnostic: &s.agnostic_video,
            mask: &s.agnostic_mask,
            garment_image: &s.garment_image,
            human_pose: &s.human_pose,
            garment_pose: &s.garment_pose,
        }
    }
}

/// Latent-resolution mask: a latent cell is masked if any of its pixels is.
pub fn latent_mask(mask: &Tensor) -> Result<Tensor> {
    Ok(mask.max_pool2d(LATENT_DOWNSAMPLE)?)
}

impl ClipTensors {
    pub fn encode(model: &DpidmModel, a: ClipArrays, flip: bool) -> Result<Self> {
        let dtype = model.dtype();
        let (t, _, h, w) = a.agnostic.dim();
        if a.human_pose.len() != t || a.mask.dim() != (t, 1, h, w) {
            return Err(Error::Data(format!("clip of {t} frames has inconsistent poses or mask")));
        }
        let prep4 = |x: &Array4<f32>| -> Result<Tensor> {
            let x = if flip { util::flip_width(x) } else { x.clone() };
            Ok(util::array_to_tensor(x.view(), dtype)?)
        };
        let garment = if flip { util::flip_width(a.garment_image) } else { a.garment_image.clone() };
        let garment_image = util::array_to_tensor(garment.view(), dtype)?.unsqueeze(0)?;
        let target_latent = match a.target {
            Some(x) => Some(model.encode_latent(&prep4(x)?)?.detach()),
            None => None,
        };
        let pose_flip = |p: &SkeletonPose| if flip { p.flipped(w) } else { p.clone() };
        Ok(ClipTensors {
            target_latent,
            agnostic_latent: model.encode_latent(&prep4(a.agnostic)?)?.detach(),
            mask_latent: latent_mask(&prep4(a.mask)?)?,
            garment_latent: model.encode_latent(&garment_image)?.detach(),
            garment_image,
            human_pose: a.human_pose.iter().map(pose_flip).collect(),
            garment_pose: pose_flip(a.garment_pose),
            canvas: (h, w),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.human_pose.len()
    }
}

/// Both orientations of every training sample.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub clips: Vec<[ClipTensors; 2]>,
}

impl TrainingData {
    pub fn new(model: &DpidmModel, samples: &[TryOnSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let clips = samples
            .iter()
            .map(|s| {
                let a = ClipArrays::from_sample(s, true);
                Ok([ClipTensors::encode(model, a, false)?, ClipTensors::encode(model, a, true)?])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingData { clips })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn min_frames(&self) -> usize {
        self.clips.iter().map(|c| c[0].num_frames()).min().unwrap_or(0)
    }
}

/// A window of `frames` frames from one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pick {
    pub clip: usize,
    pub flip: bool,
    pub start: usize,
    pub frames: usize,
}

/// Model inputs for a batch plus the clean target latents (when known).
#[derive(Debug, Clone)]
pub struct Batch {
    pub cond: Conditions,
    pub z0: Option<Tensor>,
}

/// Stacks windows of clips into a batch, applying keypoint dropping with
/// probability `drop_prob` (seeded by `seed`) to every human and garment pose.
pub fn assemble(
    clips: &[&ClipTensors],
    windows: &[(usize, usize)],
    garment_keep: Vec<bool>,
    drop_prob: f64,
    seed: u64,
) -> Result<Batch> {
    if clips.is_empty() || clips.len() != windows.len() || garment_keep.len() != clips.len() {
        return Err(Error::Shape("batch needs one window and keep flag per clip".into()));
    }
    let frames = windows[0].1;
    if windows.iter().any(|w| w.1 != frames) || frames == 0 {
        return Err(Error::Shape("all windows of a batch must have the same non-zero length".into()));
    }
    let canvas = clips[0].canvas;
    let like = &clips[0].agnostic_latent;
    let mut seeds = util::rng(seed);
    let mut drop = |p: &SkeletonPose| -> Result<SkeletonPose> {
        if drop_prob == 0.0 {
            Ok(p.clone())
        } else {
            drop_keypoints(p, drop_prob, seeds.random())
        }
    };
    let (mut agn, mut mask, mut z0, mut human, mut garment, mut glat, mut gimg) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    for (c, &(start, len)) in clips.iter().zip(windows) {
        if start + len > c.num_frames() || c.canvas != canvas {
            return Err(Error::Shape(format!(
                "window {start}..{} outside clip of {} frames",
                start + len,
                c.num_frames()
            )));
        }
        agn.push(c.agnostic_latent.narrow(0, start, len)?);
        mask.push(c.mask_latent.narrow(0, start, len)?);
        if let Some(z) = &c.target_latent {
            z0.push(z.narrow(0, start, len)?);
        }
        for p in &c.human_pose[start..start + len] {
            human.push(rasterize(&drop(p)?, canvas));
        }
        garment.push(rasterize(&drop(&c.garment_pose)?, canvas));
        glat.push(c.garment_latent.clone());
        gimg.push(c.garment_image.clone());
    }
    let z0 = if z0.len() == clips.len() { Some(Tensor::cat(&z0, 0)?) } else { None };
    Ok(Batch {
        cond: Conditions {
            layout: FrameLayout::new(clips.len(), frames),
            agnostic_latent: Tensor::cat(&agn, 0)?,
            mask: Tensor::cat(&mask, 0)?,
            human_pose_maps: pose_maps_tensor(&human, like)?,
            garment_pose_maps: pose_maps_tensor(&garment, like)?,
            garment_latent: Tensor::cat(&glat, 0)?,
            garment_image: Tensor::cat(&gimg, 0)?,
            garment_keep,
        },
        z0,
    })
}

/// Every frame of the pixel-space videos, for codec training: `[N, 3, H, W]`.
pub fn codec_frames(samples: &[TryOnSample], dtype: DType) -> Result<Tensor> {
    let mut parts = Vec::new();
    for s in samples {
        parts.push(util::array_to_tensor(s.source_video.view(), dtype)?);
        parts.push(util::array_to_tensor(s.target_video.view(), dtype)?);
        parts.push(util::array_to_tensor(s.agnostic_video.view(), dtype)?);
        parts.push(util::array_to_tensor(s.garment_image.view(), dtype)?.unsqueeze(0)?);
    }
    if parts.is_empty() {
        return Err(Error::Data("no frames for codec training".into()));
    }
    Ok(Tensor::cat(&parts, 0)?)
}
