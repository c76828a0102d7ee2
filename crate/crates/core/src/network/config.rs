use crate::attention::{DEFAULT_HEADS, DEFAULT_SHIFT};
use crate::error::{Error, Result};
use crate::pose::ADAPTER_RATIO;

/// Spatial factor between pixels and latents.
pub const LATENT_DOWNSAMPLE: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
/// Noisy latent + agnostic latent + mask.
pub const MAIN_IN_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
/// The U-Nets halve the latent twice.
pub const UNET_DOWNSAMPLE: usize = 4;

/// Architecture hyper-parameters of the whole try-on model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Pixel canvas `(height, width)`.
    pub canvas: (usize, usize),
    /// Channel widths of the three U-Net resolution stages.
    pub widths: [usize; 3],
    pub heads: usize,
    /// Output channels of the four pose-encoder layers; the last is d_p.
    pub pose_widths: [usize; 4],
    pub adapter_ratio: usize,
    /// Width d_c of the garment embedding tokens.
    pub context_dim: usize,
    pub time_dim: usize,
    pub norm_groups: usize,
    /// Frames borrowed by temporal-shift attention (L).
    pub shift: usize,
    pub codec_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas: (64, 48),
            widths: [32, 64, 128],
            heads: DEFAULT_HEADS,
            pose_widths: [16, 32, 64, 32],
            adapter_ratio: ADAPTER_RATIO,
            context_dim: 32,
            time_dim: 64,
            norm_groups: 8,
            shift: DEFAULT_SHIFT,
            codec_width: 32,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still has every component; used for smoke
    /// training and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            widths: [16, 32, 32],
            pose_widths: [8, 16, 16, 16],
            context_dim: 16,
            time_dim: 32,
            norm_groups: 4,
            codec_width: 16,
            ..ModelConfig::default()
        }
    }

    pub fn latent_size(&self) -> (usize, usize) {
        (self.canvas.0 / LATENT_DOWNSAMPLE, self.canvas.1 / LATENT_DOWNSAMPLE)
    }

    pub fn pose_dim(&self) -> usize {
        self.pose_widths[3]
    }

    /// Garment embedding token count S_c.
    pub fn context_tokens(&self) -> usize {
        let (h, w) = self.latent_size();
        (h / 4) * (w / 4)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        let m = LATENT_DOWNSAMPLE * UNET_DOWNSAMPLE;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "canvas {h}x{w} must be divisible by {m} (latent factor {LATENT_DOWNSAMPLE} times U-Net factor {UNET_DOWNSAMPLE})"
            )));
        }
        for &wd in &self.widths[1..] {
            if wd % self.heads != 0 {
                return Err(Error::Config(format!(
                    "attention width {wd} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.widths.iter().any(|&c| c % self.norm_groups.min(c) != 0) {
            return Err(Error::Config("widths must be divisible by norm_groups".into()));
        }
        if self.adapter_ratio == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("adapter_ratio must be > 0 and time_dim even".into()));
        }
        Ok(())
    }
}
