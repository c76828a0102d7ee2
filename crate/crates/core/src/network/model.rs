use candle_core::{DType, Tensor};

use super::codec::LatentCodec;
use super::config::{ModelConfig, LATENT_CHANNELS};
use super::garment_encoder::{GarmentEmbedding, GarmentEncoder};
use super::params::ParamStore;
use super::unet::{GarmentUNet, MainUNet, StageConditions, ATTN_STAGES};
use crate::attention::{repeat_frames, to_tokens, AttentionRecord, FrameLayout, Mode};
use crate::error::{Error, Result};
use crate::pose::PoseEncoder;

/// Which side of classifier-free guidance to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    /// Null garment embedding and zeroed garment-branch features.
    Unconditional,
}

/// Everything the denoiser is conditioned on for a batch of clips.
#[derive(Debug, Clone)]
pub struct Conditions {
    pub layout: FrameLayout,
    /// `[B*T, 4, h, w]`
    pub agnostic_latent: Tensor,
    /// `[B*T, 1, h, w]`, binary.
    pub mask: Tensor,
    /// `[B*T, C_p, H, W]`
    pub human_pose_maps: Tensor,
    /// `[B, C_p, H, W]`
    pub garment_pose_maps: Tensor,
    /// `[B, 4, h, w]`
    pub garment_latent: Tensor,
    /// `[B, 3, H, W]`
    pub garment_image: Tensor,
    /// Per clip; `false` drops the garment condition (null embedding, zero
    /// garment features), as in guidance training.
    pub garment_keep: Vec<bool>,
}

/// Conditioning that does not depend on the timestep, computed once per
/// sampling run (or once per training step).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub layout: FrameLayout,
    agnostic: Tensor,
    mask: Tensor,
    human_pose: Vec<Tensor>,
    garment_pose: Vec<Tensor>,
    context: Tensor,
    null_context: Tensor,
    garment_latent: Tensor,
    keep: Option<Tensor>,
    any_kept: bool,
}

/// The complete dual-branch try-on model and its parameters.
#[derive(Debug)]
pub struct DpidmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub main: MainUNet,
    pub garment_unet: GarmentUNet,
    pub pose_encoder: PoseEncoder,
    pub garment_encoder: GarmentEncoder,
    pub codec: LatentCodec,
}

fn check_binary(mask: &Tensor) -> Result<()> {
    let off = (mask * (1.0 - mask)?)?.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if off != 0.0 {
        return Err(Error::Validation("agnostic mask must contain only 0 and 1".into()));
    }
    Ok(())
}

impl DpidmModel {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let main = MainUNet::new(&mut root.pp("main"), &config)?;
        let garment_unet = GarmentUNet::new(&mut root.pp("garment_unet"), &config)?;
        let pose_encoder = PoseEncoder::new(&mut root.pp("pose_enc"), config.pose_widths)?;
        let garment_encoder =
            GarmentEncoder::new(&mut root.pp("garment_enc"), config.context_dim, config.context_tokens())?;
        let codec = LatentCodec::new(&mut root.pp("codec"), config.codec_width)?;
        Ok(DpidmModel {
            config,
            store,
            main,
            garment_unet,
            pose_encoder,
            garment_encoder,
            codec,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn embed_garment(&self, image: &Tensor) -> Result<GarmentEmbedding> {
        self.garment_encoder.embed(image)
    }

    pub fn encode_latent(&self, video: &Tensor) -> Result<Tensor> {
        self.codec.encode(video)
    }

    pub fn decode_latent(&self, latent: &Tensor) -> Result<Tensor> {
        self.codec.decode(latent)
    }

    fn pose_tokens(&self, maps: &Tensor) -> Result<Vec<Tensor>> {
        let e = self.pose_encoder.forward(maps)?;
        let half = to_tokens(&e.avg_pool2d(2)?)?;
        let quarter = to_tokens(&e.avg_pool2d(4)?)?;
        Ok(ATTN_STAGES
            .iter()
            .map(|&(_, f)| if f == 2 { half.clone() } else { quarter.clone() })
            .collect())
    }

    pub fn prepare(&self, cond: &Conditions) -> Result<Prepared> {
        let layout = cond.layout;
        let (b, t) = (layout.batch, layout.frames);
        let (h, w) = self.config.latent_size();
        let expect = |name: &str, x: &Tensor, dims: &[usize]| -> Result<()> {
            if x.dims() != dims {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected {dims:?}", x.dims())));
            }
            Ok(())
        };
        expect("agnostic latent", &cond.agnostic_latent, &[b * t, LATENT_CHANNELS, h, w])?;
        expect("mask", &cond.mask, &[b * t, 1, h, w])?;
        expect("garment latent", &cond.garment_latent, &[b, LATENT_CHANNELS, h, w])?;
        if cond.garment_keep.len() != b {
            return Err(Error::Shape("one garment-keep flag per clip is required".into()));
        }
        check_binary(&cond.mask)?;

        let human_pose = self.pose_tokens(&cond.human_pose_maps)?;
        let garment_pose = self
            .pose_tokens(&cond.garment_pose_maps)?
            .iter()
            .map(|p| repeat_frames(p, t))
            .collect::<Result<Vec<_>>>()?;

        let null = self.garment_encoder.null(b)?;
        let emb = self.garment_encoder.forward(&cond.garment_image)?;
        let any_kept = cond.garment_keep.iter().any(|&k| k);
        let (context, keep) = if cond.garment_keep.iter().all(|&k| k) {
            (emb, None)
        } else {
            let flags: Vec<f64> = cond.garment_keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            let keep = Tensor::from_vec(flags, (b, 1, 1), emb.device())?.to_dtype(emb.dtype())?;
            let mixed = (emb.broadcast_mul(&keep)? + null.broadcast_mul(&(1.0 - &keep)?)?)?;
            (mixed, Some(keep))
        };
        Ok(Prepared {
            layout,
            agnostic: cond.agnostic_latent.clone(),
            mask: cond.mask.clone(),
            human_pose,
            garment_pose,
            context: repeat_frames(&context, t)?,
            null_context: repeat_frames(&null, t)?,
            garment_latent: cond.garment_latent.clone(),
            keep,
            any_kept,
        })
    }

    /// Noise prediction for noisy latents `z_t` (`[B*T, 4, h, w]`) at one
    /// timestep per clip.
    pub fn denoise(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        prep: &Prepared,
        mode: Mode,
        branch: Branch,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let layout = prep.layout;
        if z_t.dims() != prep.agnostic.dims() {
            return Err(Error::Shape(format!(
                "noisy latent {:?} does not match conditioning {:?}",
                z_t.dims(),
                prep.agnostic.dims()
            )));
        }
        if timesteps.len() != layout.batch {
            return Err(Error::Shape("one timestep per clip is required".into()));
        }
        let frame_t: Vec<usize> = timesteps
            .iter()
            .flat_map(|&t| std::iter::repeat_n(t, layout.frames))
            .collect();

        let conditional = branch == Branch::Conditional && prep.any_kept;
        let garment_feats = if conditional {
            let feats = self.garment_unet.features(&prep.garment_latent, timesteps)?;
            feats
                .iter()
                .map(|f| {
                    let f = match &prep.keep {
                        Some(k) => f.broadcast_mul(k)?,
                        None => f.clone(),
                    };
                    repeat_frames(&f, layout.frames)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            prep.human_pose
                .iter()
                .zip(self.main.stage_widths())
                .map(|(p, &d)| {
                    let (n, s, _) = p.dims3()?;
                    Ok(Tensor::zeros((n, s, d), z_t.dtype(), z_t.device())?)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let context = match branch {
            Branch::Conditional => prep.context.clone(),
            Branch::Unconditional => prep.null_context.clone(),
        };
        let cond = StageConditions {
            garment_feats,
            human_pose: prep.human_pose.clone(),
            garment_pose: prep.garment_pose.clone(),
            context,
        };
        let x = Tensor::cat(&[z_t, &prep.agnostic, &prep.mask], 1)?;
        self.main.forward(&x, &frame_t, &cond, layout, mode)
    }

    /// One conditional denoiser evaluation from raw conditions.
    pub fn denoise_step(
        &self,
        z_t: &Tensor,
        timesteps: &[usize],
        cond: &Conditions,
        mode: Mode,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let prep = self.prepare(cond)?;
        self.denoise(z_t, timesteps, &prep, mode, Branch::Conditional)
    }
}
