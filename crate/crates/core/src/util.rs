//! Seeded randomness and small tensor helpers shared by several modules.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a tag into a seed (splitmix64 finalizer) so independent streams can
/// be derived from one user seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to derive per-parameter seeds from names.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn randn_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Standard-normal tensor drawn from `rng`; values are generated in f64 and
/// cast, so the stream is identical for every dtype.
pub fn randn(rng: &mut Rng, shape: &[usize], dtype: DType, device: &Device) -> candle_core::Result<Tensor> {
    let n = shape.iter().product();
    Tensor::from_vec(randn_vec(rng, n), shape, device)?.to_dtype(dtype)
}

pub fn scalar_f64(t: &Tensor) -> candle_core::Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}

pub fn to_vec_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

/// Copies an ndarray (any layout) into a CPU tensor of `dtype`.
pub fn array_to_tensor<D: ndarray::Dimension>(a: ndarray::ArrayView<f32, D>, dtype: DType) -> candle_core::Result<Tensor> {
    let shape = a.shape().to_vec();
    let data: Vec<f32> = a.iter().copied().collect();
    Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)
}

pub fn tensor_to_array4(t: &Tensor) -> candle_core::Result<ndarray::Array4<f32>> {
    let (a, b, c, d) = t.dims4()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(ndarray::Array4::from_shape_vec((a, b, c, d), data).expect("element count matches dims"))
}

/// Mirrors the last (width) axis.
pub fn flip_width<D: ndarray::Dimension + ndarray::RemoveAxis>(a: &ndarray::Array<f32, D>) -> ndarray::Array<f32, D> {
    let mut out = a.clone();
    out.invert_axis(ndarray::Axis(a.ndim() - 1));
    out.as_standard_layout().into_owned()
}
