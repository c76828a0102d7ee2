use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::network::layers::{linear, linear_init};
use crate::network::params::{Init, Scope};

/// Default bottleneck ratio of the pose adapter.
pub const ADAPTER_RATIO: usize = 4;

/// Two-layer bottleneck MLP projecting pose tokens into an attention block's
/// feature space: `up(gelu(down(p)))`. The up projection starts at zero, so a
/// fresh adapter contributes nothing.
#[derive(Debug, Clone)]
pub struct PoseAdapter {
    down: Linear,
    up: Linear,
    in_dim: usize,
    out_dim: usize,
}

impl PoseAdapter {
    pub fn new(s: &mut Scope, in_dim: usize, out_dim: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Config("adapter ratio must be positive".into()));
        }
        let hidden = (out_dim / ratio).max(1);
        Ok(PoseAdapter {
            down: linear(&mut s.pp("down"), in_dim, hidden, true)?,
            up: linear_init(&mut s.pp("up"), hidden, out_dim, true, Init::Zeros)?,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `p`: `[..., in_dim]` -> `[..., out_dim]`.
    pub fn forward(&self, p: &Tensor) -> Result<Tensor> {
        let d = p.dim(D::Minus1)?;
        if d != self.in_dim {
            return Err(Error::Shape(format!(
                "pose tokens have width {d}, adapter expects {}",
                self.in_dim
            )));
        }
        Ok(self.up.forward(&self.down.forward(p)?.gelu_erf()?)?)
    }
}

/// Applies the adapter to pose tokens.
pub fn adapt(p: &Tensor, params: &PoseAdapter) -> Result<Tensor> {
    params.forward(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::ParamStore;
    use crate::util;
    use candle_core::DType;

    fn randomize(store: &ParamStore, seed: u64) {
        let mut rng = util::rng(seed);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let shape = store.get(&n).unwrap().dims().to_vec();
            let t = util::randn(&mut rng, &shape, store.dtype(), store.device()).unwrap();
            store.assign(&n, &t).unwrap();
        }
    }

    #[test]
    fn fresh_adapter_outputs_zero() {
        let mut store = ParamStore::new(3, DType::F32);
        let a = PoseAdapter::new(&mut store.root().pp("a"), 8, 16, 4).unwrap();
        let mut rng = util::rng(1);
        let p = util::randn(&mut rng, &[5, 8], DType::F32, store.device()).unwrap();
        let y = adapt(&p, &a).unwrap();
        assert_eq!(y.dims(), &[5, 16]);
        assert!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_zero_bias_outputs_zero() {
        let mut store = ParamStore::new(3, DType::F64);
        let a = PoseAdapter::new(&mut store.root().pp("a"), 4, 4, 4).unwrap();
        randomize(&store, 7);
        for n in ["a.down.bias", "a.up.bias"] {
            let shape = store.get(n).unwrap().dims().to_vec();
            store.assign(n, &Tensor::zeros(shape, DType::F64, store.device()).unwrap()).unwrap();
        }
        let p = Tensor::zeros((2, 4), DType::F64, store.device()).unwrap();
        let y = adapt(&p, &a).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_dense_oracle() {
        let mut store = ParamStore::new(3, DType::F64);
        let a = PoseAdapter::new(&mut store.root().pp("a"), 4, 4, 4).unwrap();
        randomize(&store, 11);
        let mut rng = util::rng(5);
        let p = util::randn(&mut rng, &[2, 4], DType::F64, store.device()).unwrap();
        let got = adapt(&p, &a).unwrap().to_vec2::<f64>().unwrap();

        let get = |n: &str| util::to_vec_f64(store.get(n).unwrap().as_tensor()).unwrap();
        let (wd, bd, wu, bu) = (get("a.down.weight"), get("a.down.bias"), get("a.up.weight"), get("a.up.bias"));
        let hidden = bd.len();
        let pv = p.to_vec2::<f64>().unwrap();
        for (row, out) in pv.iter().zip(got.iter()) {
            let mut h = vec![0.0; hidden];
            for (k, hk) in h.iter_mut().enumerate() {
                let z: f64 = (0..4).map(|i| wd[k * 4 + i] * row[i]).sum::<f64>() + bd[k];
                *hk = 0.5 * z * (1.0 + statrs::function::erf::erf(z / std::f64::consts::SQRT_2));
            }
            for o in 0..4 {
                let want: f64 = (0..hidden).map(|k| wu[o * hidden + k] * h[k]).sum::<f64>() + bu[o];
                assert!((out[o] - want).abs() < 1e-6, "{} vs {}", out[o], want);
            }
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut store = ParamStore::new(3, DType::F32);
        let a = PoseAdapter::new(&mut store.root().pp("a"), 4, 4, 4).unwrap();
        let p = Tensor::zeros((2, 5), DType::F32, store.device()).unwrap();
        assert!(matches!(adapt(&p, &a), Err(Error::Shape(_))));
    }
}
