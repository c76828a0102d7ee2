use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::layers::{conv2d, linear, Conv2d, LayerNorm};
use super::params::{Init, Scope};
use crate::attention::to_tokens;
use crate::error::{Error, Result};

/// Garment embedding tokens `[S_c, d_c]` (or `[B, S_c, d_c]` batched).
#[derive(Debug, Clone)]
pub struct GarmentEmbedding(pub Tensor);

/// Convolutional image encoder producing garment context tokens for
/// cross-attention, plus the learned "no garment" embedding used as the
/// unconditional branch of classifier-free guidance.
#[derive(Debug, Clone)]
pub struct GarmentEncoder {
    convs: [Conv2d; 4],
    norm: LayerNorm,
    proj: Linear,
    null: Tensor,
    tokens: usize,
    dim: usize,
}

impl GarmentEncoder {
    pub fn new(s: &mut Scope, dim: usize, tokens: usize) -> Result<Self> {
        let c = dim.max(8);
        Ok(GarmentEncoder {
            convs: [
                conv2d(&mut s.pp("conv0"), 3, c / 2, 3, 2, false)?,
                conv2d(&mut s.pp("conv1"), c / 2, c, 3, 2, false)?,
                conv2d(&mut s.pp("conv2"), c, c, 3, 2, false)?,
                conv2d(&mut s.pp("conv3"), c, dim, 3, 2, false)?,
            ],
            norm: LayerNorm::new(&mut s.pp("norm"), dim)?,
            proj: linear(&mut s.pp("proj"), dim, dim, true)?,
            null: s.param("null", &[tokens, dim], Init::Normal(0.5))?,
            tokens,
            dim,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[B, 3, H, W]` -> `[B, S_c, d_c]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("garment image must have 3 channels, got {c}")));
        }
        let mut x = images.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != 3 {
                x = x.silu()?;
            }
        }
        let t = to_tokens(&x)?;
        if t.dim(1)? != self.tokens {
            return Err(Error::Shape(format!(
                "garment image yields {} tokens, encoder configured for {}",
                t.dim(1)?,
                self.tokens
            )));
        }
        Ok(self.proj.forward(&self.norm.forward(&t)?)?)
    }

    /// Embeds one `[3, H, W]` image.
    pub fn embed(&self, image: &Tensor) -> Result<GarmentEmbedding> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.dims())));
        }
        Ok(GarmentEmbedding(self.forward(&image.unsqueeze(0)?)?.squeeze(0)?))
    }

    /// Null embedding repeated for `batch` items: `[B, S_c, d_c]`.
    pub fn null(&self, batch: usize) -> Result<Tensor> {
        Ok(self
            .null
            .unsqueeze(0)?
            .broadcast_as((batch, self.tokens, self.dim))?
            .contiguous()?)
    }
}
