//! The two U-Nets of the dual-branch denoiser.
//!
//! Both share one topology: three resolution stages (latent, /2, /4), with
//! attention after the residual block of the two lower stages on the way down
//! and up. The main U-Net's attention is the hierarchical pose-aware block;
//! the garment U-Net's is plain self-attention, and its pre-attention
//! features are what the main branch consumes.

use candle_core::{Module, Tensor};
use candle_nn::GroupNorm;

use super::config::{ModelConfig, LATENT_CHANNELS, MAIN_IN_CHANNELS};
use super::layers::{conv2d, group_norm, Conv2d, LayerNorm, ResBlock, TimeEmbedding, Upsample};
use super::params::Scope;
use crate::attention::{
    from_tokens, to_tokens, AttentionRecord, AttnProj, BlockInputs, FrameLayout, HierBlock,
    HierBlockConfig, Mode,
};
use crate::error::{Error, Result};

/// Attention-bearing stages in forward order, with their downsample factor
/// relative to the latent.
pub const ATTN_STAGES: [(&str, usize); 4] = [("enc1", 2), ("enc2", 4), ("dec2", 4), ("dec1", 2)];
/// Decoder stages whose PASA maps feed the temporal regularization.
pub const TRA_STAGES: [&str; 2] = ["dec2", "dec1"];

fn stage_width(cfg: &ModelConfig, stage: usize) -> usize {
    match ATTN_STAGES[stage].1 {
        2 => cfg.widths[1],
        _ => cfg.widths[2],
    }
}

/// Per-stage conditioning for the main U-Net's attention blocks.
#[derive(Debug, Clone)]
pub struct StageConditions {
    /// Garment U-Net features per attention stage, `[N, S, d]`.
    pub garment_feats: Vec<Tensor>,
    /// Human pose tokens per stage, `[N, S, d_p]`.
    pub human_pose: Vec<Tensor>,
    /// Garment pose tokens per stage, `[N, S, d_p]`.
    pub garment_pose: Vec<Tensor>,
    /// Garment embedding tokens, `[N, S_c, d_c]`.
    pub context: Tensor,
}

#[derive(Debug, Clone)]
pub struct MainUNet {
    conv_in: Conv2d,
    time: TimeEmbedding,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    down1: Conv2d,
    enc2: ResBlock,
    mid: ResBlock,
    dec2: ResBlock,
    up2: Upsample,
    dec1: ResBlock,
    up1: Upsample,
    dec0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    attn: Vec<HierBlock>,
    widths: Vec<usize>,
}

impl MainUNet {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let (td, g) = (cfg.time_dim, cfg.norm_groups);
        let mut attn = Vec::new();
        let mut widths = Vec::new();
        for (i, (name, _)) in ATTN_STAGES.iter().enumerate() {
            let dim = stage_width(cfg, i);
            widths.push(dim);
            attn.push(HierBlock::new(
                &mut s.pp(&format!("{name}.attn")),
                HierBlockConfig {
                    dim,
                    heads: cfg.heads,
                    pose_dim: cfg.pose_dim(),
                    context_dim: cfg.context_dim,
                    adapter_ratio: cfg.adapter_ratio,
                    shift: cfg.shift,
                },
            )?);
        }
        Ok(MainUNet {
            conv_in: conv2d(&mut s.pp("conv_in"), MAIN_IN_CHANNELS, w0, 3, 1, false)?,
            time: TimeEmbedding::new(&mut s.pp("time"), w0, td)?,
            enc0: ResBlock::new(&mut s.pp("enc0.res"), w0, w0, td, g)?,
            down0: conv2d(&mut s.pp("down0"), w0, w0, 3, 2, false)?,
            enc1: ResBlock::new(&mut s.pp("enc1.res"), w0, w1, td, g)?,
            down1: conv2d(&mut s.pp("down1"), w1, w1, 3, 2, false)?,
            enc2: ResBlock::new(&mut s.pp("enc2.res"), w1, w2, td, g)?,
            mid: ResBlock::new(&mut s.pp("mid.res"), w2, w2, td, g)?,
            dec2: ResBlock::new(&mut s.pp("dec2.res"), 2 * w2, w2, td, g)?,
            up2: Upsample::new(&mut s.pp("up2"), w2)?,
            dec1: ResBlock::new(&mut s.pp("dec1.res"), w2 + w1, w1, td, g)?,
            up1: Upsample::new(&mut s.pp("up1"), w1)?,
            dec0: ResBlock::new(&mut s.pp("dec0.res"), w1 + w0, w0, td, g)?,
            norm_out: group_norm(&mut s.pp("norm_out"), g, w0)?,
            conv_out: conv2d(&mut s.pp("conv_out"), w0, LATENT_CHANNELS, 3, 1, true)?,
            attn,
            widths,
        })
    }

    pub fn stage_widths(&self) -> &[usize] {
        &self.widths
    }

    fn attend(
        &self,
        stage: usize,
        x: &Tensor,
        cond: &StageConditions,
        layout: FrameLayout,
        mode: Mode,
    ) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let tokens = to_tokens(x)?;
        let f_g = &cond.garment_feats[stage];
        if f_g.dims() != tokens.dims() {
            return Err(Error::Config(format!(
                "garment U-Net stage {} yields {:?}, main U-Net expects {:?}",
                ATTN_STAGES[stage].0,
                f_g.dims(),
                tokens.dims()
            )));
        }
        let inputs = BlockInputs {
            f_g,
            p_h: &cond.human_pose[stage],
            p_g: &cond.garment_pose[stage],
            c_g: &cond.context,
            layout,
            mode,
        };
        let (y, probs) = self.attn[stage].forward(&tokens, &inputs)?;
        Ok((from_tokens(&y, h, w)?, probs))
    }

    /// `x`: `[N, 9, h, w]`, `timesteps`: one per item. Returns the noise
    /// prediction `[N, 4, h, w]` and the PASA maps of the TRA stages.
    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        cond: &StageConditions,
        layout: FrameLayout,
        mode: Mode,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let (n, c, _, _) = x.dims4()?;
        if c != MAIN_IN_CHANNELS {
            return Err(Error::Shape(format!("main U-Net takes {MAIN_IN_CHANNELS} channels, got {c}")));
        }
        if timesteps.len() != n || n != layout.items() {
            return Err(Error::Shape(format!(
                "{n} inputs, {} timesteps, layout {}x{}",
                timesteps.len(),
                layout.batch,
                layout.frames
            )));
        }
        let temb = self.time.forward(timesteps, x)?;
        let mut maps = Vec::new();

        let h0 = self.enc0.forward(&self.conv_in.forward(x)?, &temb)?;
        let h = self.enc1.forward(&self.down0.forward(&h0)?, &temb)?;
        let (h1, _) = self.attend(0, &h, cond, layout, mode)?;
        let h = self.enc2.forward(&self.down1.forward(&h1)?, &temb)?;
        let (h2, _) = self.attend(1, &h, cond, layout, mode)?;
        let m = self.mid.forward(&h2, &temb)?;

        let d = self.dec2.forward(&Tensor::cat(&[&m, &h2], 1)?, &temb)?;
        let (d, p) = self.attend(2, &d, cond, layout, mode)?;
        maps.push(p);
        let d = self.up2.forward(&d)?;
        let d = self.dec1.forward(&Tensor::cat(&[&d, &h1], 1)?, &temb)?;
        let (d, p) = self.attend(3, &d, cond, layout, mode)?;
        maps.push(p);
        let d = self.up1.forward(&d)?;
        let d = self.dec0.forward(&Tensor::cat(&[&d, &h0], 1)?, &temb)?;
        let eps = self.conv_out.forward(&self.norm_out.forward(&d)?.silu()?)?;

        let records = maps
            .into_iter()
            .zip(TRA_STAGES)
            .map(|(p, name)| {
                let (_, sq, sk) = p.dims3()?;
                Ok(AttentionRecord {
                    layer: name.to_string(),
                    probs: p.reshape((layout.batch, layout.frames, sq, sk))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((eps, records))
    }
}

/// Pre-normalized residual self-attention.
#[derive(Debug, Clone)]
struct SelfAttnBlock {
    norm: LayerNorm,
    proj: AttnProj,
}

impl SelfAttnBlock {
    fn new(s: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(SelfAttnBlock {
            norm: LayerNorm::new(&mut s.pp("norm"), dim)?,
            proj: AttnProj::new(s, dim, dim, heads)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(x)?;
        let n = self.norm.forward(&t)?;
        let a = crate::attention::cross_attn(&n, &n, &self.proj)?;
        Ok(from_tokens(&(t + a)?, h, w)?)
    }
}

/// Garment branch: same topology with a 4-channel input and no pose inputs.
/// Only the part of the network that produces the four stage features exists.
#[derive(Debug, Clone)]
pub struct GarmentUNet {
    conv_in: Conv2d,
    time: TimeEmbedding,
    enc0: ResBlock,
    down0: Conv2d,
    enc1: ResBlock,
    attn1: SelfAttnBlock,
    down1: Conv2d,
    enc2: ResBlock,
    attn2: SelfAttnBlock,
    mid: ResBlock,
    dec2: ResBlock,
    attn_dec2: SelfAttnBlock,
    up2: Upsample,
    dec1: ResBlock,
}

impl GarmentUNet {
    pub fn new(s: &mut Scope, cfg: &ModelConfig) -> Result<Self> {
        let [w0, w1, w2] = cfg.widths;
        let (td, g) = (cfg.time_dim, cfg.norm_groups);
        Ok(GarmentUNet {
            conv_in: conv2d(&mut s.pp("conv_in"), LATENT_CHANNELS, w0, 3, 1, false)?,
            time: TimeEmbedding::new(&mut s.pp("time"), w0, td)?,
            enc0: ResBlock::new(&mut s.pp("enc0.res"), w0, w0, td, g)?,
            down0: conv2d(&mut s.pp("down0"), w0, w0, 3, 2, false)?,
            enc1: ResBlock::new(&mut s.pp("enc1.res"), w0, w1, td, g)?,
            attn1: SelfAttnBlock::new(&mut s.pp("enc1.self_attn"), w1, cfg.heads)?,
            down1: conv2d(&mut s.pp("down1"), w1, w1, 3, 2, false)?,
            enc2: ResBlock::new(&mut s.pp("enc2.res"), w1, w2, td, g)?,
            attn2: SelfAttnBlock::new(&mut s.pp("enc2.self_attn"), w2, cfg.heads)?,
            mid: ResBlock::new(&mut s.pp("mid.res"), w2, w2, td, g)?,
            dec2: ResBlock::new(&mut s.pp("dec2.res"), 2 * w2, w2, td, g)?,
            attn_dec2: SelfAttnBlock::new(&mut s.pp("dec2.self_attn"), w2, cfg.heads)?,
            up2: Upsample::new(&mut s.pp("up2"), w2)?,
            dec1: ResBlock::new(&mut s.pp("dec1.res"), w2 + w1, w1, td, g)?,
        })
    }

    /// `x`: clean garment latent `[B, 4, h, w]`. Returns the pre-attention
    /// token features `[B, S, d]` of every attention stage, in forward order.
    pub fn features(&self, x: &Tensor, timesteps: &[usize]) -> Result<Vec<Tensor>> {
        let temb = self.time.forward(timesteps, x)?;
        let h0 = self.enc0.forward(&self.conv_in.forward(x)?, &temb)?;
        let f1 = self.enc1.forward(&self.down0.forward(&h0)?, &temb)?;
        let h1 = self.attn1.forward(&f1)?;
        let f2 = self.enc2.forward(&self.down1.forward(&h1)?, &temb)?;
        let h2 = self.attn2.forward(&f2)?;
        let m = self.mid.forward(&h2, &temb)?;
        let f3 = self.dec2.forward(&Tensor::cat(&[&m, &h2], 1)?, &temb)?;
        let d = self.up2.forward(&self.attn_dec2.forward(&f3)?)?;
        let f4 = self.dec1.forward(&Tensor::cat(&[&d, &h1], 1)?, &temb)?;
        [f1, f2, f3, f4].iter().map(to_tokens).collect()
    }
}
