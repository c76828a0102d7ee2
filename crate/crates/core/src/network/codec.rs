//! Small convolutional autoencoder standing in for a pretrained image VAE.

use candle_core::{Module, Tensor};

use super::config::{LATENT_CHANNELS, LATENT_DOWNSAMPLE};
use super::layers::{conv2d, Conv2d, Upsample};
use super::params::{Init, Scope};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LatentCodec {
    enc: [Conv2d; 4],
    dec_in: Conv2d,
    dec_up: [Upsample; 2],
    dec_out: Conv2d,
    /// Multiplier bringing latents to roughly unit variance; fitted after
    /// reconstruction training.
    scale: Tensor,
}

impl LatentCodec {
    pub fn new(s: &mut Scope, width: usize) -> Result<Self> {
        Ok(LatentCodec {
            enc: [
                conv2d(&mut s.pp("enc0"), 3, width, 3, 1, false)?,
                conv2d(&mut s.pp("enc1"), width, width, 3, 2, false)?,
                conv2d(&mut s.pp("enc2"), width, width, 3, 2, false)?,
                conv2d(&mut s.pp("enc3"), width, LATENT_CHANNELS, 3, 1, false)?,
            ],
            dec_in: conv2d(&mut s.pp("dec_in"), LATENT_CHANNELS, width, 3, 1, false)?,
            dec_up: [
                Upsample::new(&mut s.pp("dec_up0"), width)?,
                Upsample::new(&mut s.pp("dec_up1"), width)?,
            ],
            dec_out: conv2d(&mut s.pp("dec_out"), width, 3, 3, 1, false)?,
            scale: s.param("scale", &[1], Init::Ones)?,
        })
    }

    /// Unscaled latent.
    pub fn encode_raw(&self, video: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = video.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("codec encodes RGB frames, got {c} channels")));
        }
        if h % LATENT_DOWNSAMPLE != 0 || w % LATENT_DOWNSAMPLE != 0 {
            return Err(Error::Shape(format!(
                "frame {h}x{w} not divisible by latent factor {LATENT_DOWNSAMPLE}"
            )));
        }
        let mut x = video.clone();
        for (i, conv) in self.enc.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != 3 {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent has {c} channels, expected {LATENT_CHANNELS}")));
        }
        let mut x = self.dec_in.forward(z)?.silu()?;
        for up in &self.dec_up {
            x = up.forward(&x)?.silu()?;
        }
        Ok(self.dec_out.forward(&x)?)
    }

    /// `[T, 3, H, W]` -> `[T, 4, H/4, W/4]`.
    pub fn encode(&self, video: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(video)?.broadcast_mul(&self.scale)?)
    }

    /// `[T, 4, h, w]` -> `[T, 3, 4h, 4w]`, unclamped.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_raw(&z.broadcast_div(&self.scale)?)
    }
}
