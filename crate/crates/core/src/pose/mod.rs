//! Pose representation, rasterization into conditioning maps, the pose
//! encoder, the zero-initialized pose adapter, and keypoint dropping.

pub mod adapter;
pub mod encoder;
pub mod raster;
pub mod skeleton;

pub use adapter::{adapt, PoseAdapter, ADAPTER_RATIO};
pub use encoder::{pose_maps_tensor, PoseEmbedding, PoseEncoder, POSE_ENCODER_STRIDE};
pub use raster::{rasterize, PoseMap, POSE_CHANNELS};
pub use skeleton::{drop_keypoints, Joint, SkeletonKind, SkeletonPose, HUMAN_JOINTS};
