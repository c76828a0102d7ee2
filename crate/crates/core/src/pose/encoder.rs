use candle_core::{Module, Tensor};

use super::raster::{PoseMap, POSE_CHANNELS};
use crate::error::{Error, Result};
use crate::network::layers::{conv2d, Conv2d};
use crate::network::params::Scope;

/// Total spatial reduction of the pose encoder.
pub const POSE_ENCODER_STRIDE: usize = 4;

/// Per-resolution pose features, `[d_p, h, w]` (or `[N, d_p, h, w]` when batched).
#[derive(Debug, Clone)]
pub struct PoseEmbedding(pub Tensor);

/// Four 3x3 convolutions with strides 2, 1, 2, 1 and SiLU in between, taking
/// a rasterized pose image down to latent resolution.
#[derive(Debug, Clone)]
pub struct PoseEncoder {
    convs: Vec<Conv2d>,
    out_channels: usize,
}

impl PoseEncoder {
    /// `widths` are the output channels of the four layers; the last one is d_p.
    pub fn new(s: &mut Scope, widths: [usize; 4]) -> Result<Self> {
        let strides = [2, 1, 2, 1];
        let mut cin = POSE_CHANNELS;
        let mut convs = Vec::with_capacity(4);
        for (i, (&w, &st)) in widths.iter().zip(strides.iter()).enumerate() {
            convs.push(conv2d(&mut s.pp(&format!("conv{i}")), cin, w, 3, st, false)?);
            cin = w;
        }
        Ok(PoseEncoder {
            convs,
            out_channels: widths[3],
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `maps`: `[N, POSE_CHANNELS, H, W]` -> `[N, d_p, H/4, W/4]`.
    pub fn forward(&self, maps: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = maps.dims4()?;
        if c != POSE_CHANNELS {
            return Err(Error::Shape(format!(
                "pose map has {c} channels, encoder expects {POSE_CHANNELS}"
            )));
        }
        if h % POSE_ENCODER_STRIDE != 0 || w % POSE_ENCODER_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "pose map {h}x{w} not divisible by encoder stride {POSE_ENCODER_STRIDE}"
            )));
        }
        let mut x = maps.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i != last {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    pub fn encode(&self, map: &PoseMap) -> Result<PoseEmbedding> {
        let t = pose_maps_tensor(std::slice::from_ref(map), self.convs[0].weight())?;
        Ok(PoseEmbedding(self.forward(&t)?.squeeze(0)?))
    }
}

/// Stacks pose maps into `[N, C, H, W]` with the dtype/device of `like`.
pub fn pose_maps_tensor(maps: &[PoseMap], like: &Tensor) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Shape("no pose maps to stack".into()))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(maps.len() * POSE_CHANNELS * h * w);
    for m in maps {
        if m.size() != (h, w) {
            return Err(Error::Shape("pose maps differ in size".into()));
        }
        data.extend(m.0.iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), POSE_CHANNELS, h, w), like.device())?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::ParamStore;
    use crate::pose::raster::rasterize;
    use crate::pose::skeleton::{Joint, SkeletonKind, SkeletonPose};
    use candle_core::DType;

    fn encoder(store: &mut ParamStore) -> PoseEncoder {
        PoseEncoder::new(&mut store.root().pp("pose_enc"), [16, 32, 64, 24]).unwrap()
    }

    #[test]
    fn stride_arithmetic() {
        let mut store = ParamStore::new(1, DType::F32);
        let enc = encoder(&mut store);
        let map = rasterize(&SkeletonPose::all_absent(SkeletonKind::Human), (64, 48));
        let e = enc.encode(&map).unwrap();
        assert_eq!(e.0.dims(), &[24, 16, 12]);
    }

    #[test]
    fn zero_map_zero_bias_gives_zero() {
        let mut store = ParamStore::new(1, DType::F32);
        let enc = encoder(&mut store);
        let names: Vec<String> = store.names().filter(|n| n.ends_with("bias")).cloned().collect();
        for n in names {
            let shape = store.get(&n).unwrap().dims().to_vec();
            store
                .assign(&n, &Tensor::zeros(shape, DType::F32, store.device()).unwrap())
                .unwrap();
        }
        let map = rasterize(&SkeletonPose::all_absent(SkeletonKind::Human), (64, 48));
        let e = enc.encode(&map).unwrap();
        let v = e.0.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn absent_joint_position_is_irrelevant() {
        let mut store = ParamStore::new(2, DType::F32);
        let enc = encoder(&mut store);
        let mut a = SkeletonPose::all_absent(SkeletonKind::Human);
        a.joints[0] = Joint::new(20.0, 20.0);
        let mut b = a.clone();
        a.joints[5] = Joint { x: 3.0, y: 4.0, present: false };
        b.joints[5] = Joint { x: 40.0, y: 50.0, present: false };
        let ea = enc.encode(&rasterize(&a, (64, 48))).unwrap().0;
        let eb = enc.encode(&rasterize(&b, (64, 48))).unwrap().0;
        assert_eq!(
            ea.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            eb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut store = ParamStore::new(1, DType::F32);
        let enc = encoder(&mut store);
        let map = rasterize(&SkeletonPose::all_absent(SkeletonKind::Human), (63, 48));
        assert!(matches!(enc.encode(&map), Err(Error::Shape(_))));
    }
}
