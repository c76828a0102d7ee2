//! The dual-branch denoising network: main U-Net with hierarchical attention,
//! garment U-Net, garment embedding encoder and latent codec.

pub mod codec;
pub mod config;
pub mod conv;
pub mod garment_encoder;
pub mod layers;
pub mod model;
pub mod params;
pub mod unet;

pub use codec::LatentCodec;
pub use config::{ModelConfig, LATENT_CHANNELS, LATENT_DOWNSAMPLE, MAIN_IN_CHANNELS};
pub use garment_encoder::{GarmentEmbedding, GarmentEncoder};
pub use model::{Branch, Conditions, DpidmModel, Prepared};
pub use params::{Init, ParamStore};
pub use unet::{ATTN_STAGES, TRA_STAGES};
