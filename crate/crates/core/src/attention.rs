//! Hierarchical pose-aware attention: pose-aware spatial attention (PASA),
//! temporal-shift attention (TSA), garment cross-attention (CA) and pose-aware
//! temporal attention (PATA).
//!
//! Token tensors are laid out as `[B*T, S, d]`: the batch and frame axes are
//! merged so the per-frame blocks (PASA, CA) are plain batched attention, and
//! [`FrameLayout`] recovers the clip structure where TSA and PATA need it.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use crate::error::{Error, Result};
use crate::network::layers::{linear, LayerNorm};
use crate::network::params::Scope;
use crate::pose::PoseAdapter;

/// Default number of preceding frames whose tokens TSA borrows.
pub const DEFAULT_SHIFT: usize = 1;
pub const DEFAULT_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub batch: usize,
    pub frames: usize,
}

impl FrameLayout {
    pub fn new(batch: usize, frames: usize) -> Self {
        FrameLayout { batch, frames }
    }

    pub fn items(&self) -> usize {
        self.batch * self.frames
    }
}

/// Image mode skips TSA and PATA entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Image,
    Video,
}

/// Head-averaged post-softmax PASA probabilities for main-branch query rows,
/// `[B, T, S_h, S_h + S_g]`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: String,
    pub probs: Tensor,
}

/// Query/key/value/output projections of one attention sub-block.
#[derive(Debug, Clone)]
pub struct AttnProj {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl AttnProj {
    /// `kv_dim` differs from `dim` only for cross-attention.
    pub fn new(s: &mut Scope, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by head count {heads}"
            )));
        }
        Ok(AttnProj {
            q: linear(&mut s.pp("q"), dim, dim, false)?,
            k: linear(&mut s.pp("k"), kv_dim, dim, false)?,
            v: linear(&mut s.pp("v"), kv_dim, dim, false)?,
            out: linear(&mut s.pp("out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Attention of `queries` over `keys`, returning the output-projected result
    /// and the per-head probabilities `[N, heads, Sq, Sk]`.
    fn attend(&self, queries: &Tensor, keys: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(keys)?;
        let v = self.v.forward(keys)?;
        let (o, probs) = multi_head(&q, &k, &v, self.heads)?;
        Ok((self.out.forward(&o)?, probs))
    }
}

/// Scaled dot-product attention over already projected `[N, S, d]` tensors.
/// The scale is `1/sqrt(d / heads)`.
pub fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (n, sq, d) = q.dims3()?;
    let (nk, sk, dk) = k.dims3()?;
    if nk != n || dk != d || v.dims3()? != (nk, sk, dk) {
        return Err(Error::Shape(format!(
            "attention operands disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let dh = d / heads;
    let split = |x: &Tensor, s: usize| -> candle_core::Result<Tensor> {
        x.reshape((n, s, heads, dh))?.transpose(1, 2)?.contiguous()
    };
    let (qh, kh, vh) = (split(q, sq)?, split(k, sk)?, split(v, sk)?);
    let scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = probs
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, sq, d))?;
    Ok((out, probs))
}

fn check_tokens(name: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (na, sa, _) = a.dims3()?;
    let (nb, sb, _) = b.dims3()?;
    if na != nb || sa != sb {
        return Err(Error::Shape(format!(
            "{name}: features {:?} and pose tokens {:?} disagree",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Pose-aware spatial attention for every frame: human and garment tokens are
/// joined along the token axis, adapted pose tokens are added, and
/// self-attention is taken with only the human rows kept as queries.
///
/// `f_h`: `[N, S_h, d]`, `f_g`: `[N, S_g, d]` (already repeated per frame),
/// `p_h`: `[N, S_h, d_p]`, `p_g`: `[N, S_g, d_p]`.
/// Returns `[N, S_h, d]` and the head-averaged map `[N, S_h, S_h + S_g]`.
pub fn pasa(
    f_h: &Tensor,
    f_g: &Tensor,
    p_h: &Tensor,
    p_g: &Tensor,
    proj: &AttnProj,
    adapter: &PoseAdapter,
) -> Result<(Tensor, Tensor)> {
    check_tokens("pasa human", f_h, p_h)?;
    check_tokens("pasa garment", f_g, p_g)?;
    if f_h.dim(0)? != f_g.dim(0)? || f_h.dim(2)? != f_g.dim(2)? {
        return Err(Error::Shape(format!(
            "pasa: human {:?} and garment {:?} features disagree",
            f_h.dims(),
            f_g.dims()
        )));
    }
    let s_h = f_h.dim(1)?;
    let f = Tensor::cat(&[f_h, f_g], 1)?;
    let p = Tensor::cat(&[p_h, p_g], 1)?;
    let x = (f + adapter.forward(&p)?)?;
    let queries = x.narrow(1, 0, s_h)?;
    let (out, probs) = proj.attend(&queries, &x)?;
    Ok((out, probs.mean(1)?))
}

/// Number of key tokens TSA attends over per frame.
pub fn tsa_key_count(tokens: usize, shift: usize) -> usize {
    tokens * (1 + shift)
}

/// Keys/values for TSA: the current frame followed by frames t-1 .. t-L,
/// replicating frame 0 for indices before the clip start. `[N, S*(1+L), d]`.
pub fn shifted_keys(h: &Tensor, layout: FrameLayout, shift: usize) -> Result<Tensor> {
    let (n, s, d) = h.dims3()?;
    if n != layout.items() {
        return Err(Error::Shape(format!(
            "tsa: {n} token sets for layout {}x{}",
            layout.batch, layout.frames
        )));
    }
    let t = layout.frames;
    let h4 = h.reshape((layout.batch, t, s, d))?;
    let mut parts = vec![h4.clone()];
    for l in 1..=shift {
        let idx: Vec<u32> = (0..t).map(|f| f.saturating_sub(l) as u32).collect();
        let idx = Tensor::from_vec(idx, t, h.device())?;
        parts.push(h4.index_select(&idx, 1)?);
    }
    Ok(Tensor::cat(&parts, 2)?.reshape((n, tsa_key_count(s, shift), d))?)
}

/// Temporal-shift attention: queries from the current frame, keys and values
/// from the current frame joined with the tokens of the preceding `shift` frames.
pub fn tsa(h: &Tensor, layout: FrameLayout, shift: usize, proj: &AttnProj) -> Result<Tensor> {
    let kv = shifted_keys(h, layout, shift)?;
    Ok(proj.attend(h, &kv)?.0)
}

/// Cross-attention from frame tokens `[N, S, d]` to garment embedding tokens
/// `[N, S_c, d_c]`.
pub fn cross_attn(h: &Tensor, c_g: &Tensor, proj: &AttnProj) -> Result<Tensor> {
    if h.dim(0)? != c_g.dim(0)? {
        return Err(Error::Shape(format!(
            "cross attention: {:?} queries vs {:?} context",
            h.dims(),
            c_g.dims()
        )));
    }
    Ok(proj.attend(h, c_g)?.0)
}

/// Pose-aware temporal attention: adapted human pose tokens are added to the
/// features, then each spatial location attends across the clip's frames.
pub fn pata(
    h: &Tensor,
    p_h: &Tensor,
    layout: FrameLayout,
    proj: &AttnProj,
    adapter: &PoseAdapter,
) -> Result<Tensor> {
    check_tokens("pata", h, p_h)?;
    let (n, s, d) = h.dims3()?;
    if n != layout.items() {
        return Err(Error::Shape(format!(
            "pata: {n} token sets for layout {}x{}",
            layout.batch, layout.frames
        )));
    }
    let (b, t) = (layout.batch, layout.frames);
    let x = (h + adapter.forward(p_h)?)?;
    let seq = x
        .reshape((b, t, s, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * s, t, d))?;
    let (o, _) = proj.attend(&seq, &seq)?;
    Ok(o.reshape((b, s, t, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, s, d))?)
}

/// Inputs shared by every sub-block of one hierarchical attention block.
#[derive(Debug, Clone)]
pub struct BlockInputs<'a> {
    /// Garment U-Net features at this stage, `[N, S_g, d]`.
    pub f_g: &'a Tensor,
    /// Human pose tokens, `[N, S_h, d_p]`.
    pub p_h: &'a Tensor,
    /// Garment pose tokens, `[N, S_g, d_p]`.
    pub p_g: &'a Tensor,
    /// Garment embedding tokens, `[N, S_c, d_c]`.
    pub c_g: &'a Tensor,
    pub layout: FrameLayout,
    pub mode: Mode,
}

/// PASA -> TSA -> CA -> PATA, each pre-normalized and wrapped in a residual.
#[derive(Debug, Clone)]
pub struct HierBlock {
    pub pasa_norm: LayerNorm,
    pub pasa: AttnProj,
    pub pasa_adapter: PoseAdapter,
    pub tsa_norm: LayerNorm,
    pub tsa: AttnProj,
    pub ca_norm: LayerNorm,
    pub ca: AttnProj,
    pub pata_norm: LayerNorm,
    pub pata: AttnProj,
    pub pata_adapter: PoseAdapter,
    pub shift: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HierBlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub pose_dim: usize,
    pub context_dim: usize,
    pub adapter_ratio: usize,
    pub shift: usize,
}

impl HierBlock {
    pub fn new(s: &mut Scope, cfg: HierBlockConfig) -> Result<Self> {
        let HierBlockConfig {
            dim,
            heads,
            pose_dim,
            context_dim,
            adapter_ratio,
            shift,
        } = cfg;
        Ok(HierBlock {
            pasa_norm: LayerNorm::new(&mut s.pp("pasa.norm"), dim)?,
            pasa: AttnProj::new(&mut s.pp("pasa"), dim, dim, heads)?,
            pasa_adapter: PoseAdapter::new(&mut s.pp("pasa.adapter"), pose_dim, dim, adapter_ratio)?,
            tsa_norm: LayerNorm::new(&mut s.pp("tsa.norm"), dim)?,
            tsa: AttnProj::new(&mut s.pp("tsa"), dim, dim, heads)?,
            ca_norm: LayerNorm::new(&mut s.pp("ca.norm"), dim)?,
            ca: AttnProj::new(&mut s.pp("ca"), dim, context_dim, heads)?,
            pata_norm: LayerNorm::new(&mut s.pp("pata.norm"), dim)?,
            pata: AttnProj::new(&mut s.pp("pata"), dim, dim, heads)?,
            pata_adapter: PoseAdapter::new(&mut s.pp("pata.adapter"), pose_dim, dim, adapter_ratio)?,
            shift,
        })
    }

    /// `x`: `[N, S_h, d]`. Returns the updated tokens and the PASA map.
    pub fn forward(&self, x: &Tensor, inp: &BlockInputs) -> Result<(Tensor, Tensor)> {
        if inp.mode == Mode::Image && inp.layout.frames != 1 {
            return Err(Error::Config(format!(
                "image mode needs single frames, got {} per clip",
                inp.layout.frames
            )));
        }
        let (a, probs) = pasa(
            &self.pasa_norm.forward(x)?,
            &self.pasa_norm.forward(inp.f_g)?,
            inp.p_h,
            inp.p_g,
            &self.pasa,
            &self.pasa_adapter,
        )?;
        let mut x = (x + a)?;
        if inp.mode == Mode::Video {
            let t = tsa(&self.tsa_norm.forward(&x)?, inp.layout, self.shift, &self.tsa)?;
            x = (x + t)?;
        }
        let c = cross_attn(&self.ca_norm.forward(&x)?, inp.c_g, &self.ca)?;
        x = (x + c)?;
        if inp.mode == Mode::Video {
            let p = pata(
                &self.pata_norm.forward(&x)?,
                inp.p_h,
                inp.layout,
                &self.pata,
                &self.pata_adapter,
            )?;
            x = (x + p)?;
        }
        Ok((x, probs))
    }
}

/// Repeats per-clip tokens `[B, S, d]` for every frame: `[B*T, S, d]`.
pub fn repeat_frames(x: &Tensor, frames: usize) -> Result<Tensor> {
    let (b, s, d) = x.dims3()?;
    Ok(x.unsqueeze(1)?
        .broadcast_as((b, frames, s, d))?
        .contiguous()?
        .reshape((b * frames, s, d))?)
}

/// `[N, C, H, W]` feature map to `[N, H*W, C]` tokens.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, s, c) = x.dims3()?;
    if s != h * w {
        return Err(Error::Shape(format!("{s} tokens cannot form a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::params::ParamStore;
    use crate::util;
    use candle_core::{DType, Device};

    fn t3(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    /// Projections set to identity and output bias to zero.
    fn identity_block(store: &mut ParamStore, dim: usize, pose_dim: usize) -> (AttnProj, PoseAdapter) {
        let proj = AttnProj::new(&mut store.root().pp("b"), dim, dim, 1).unwrap();
        let adapter = PoseAdapter::new(&mut store.root().pp("b.adapter"), pose_dim, dim, 1).unwrap();
        let eye = Tensor::eye(dim, DType::F64, &Device::Cpu).unwrap();
        for n in ["b.q.weight", "b.k.weight", "b.v.weight", "b.out.weight"] {
            store.assign(n, &eye).unwrap();
        }
        store.assign("b.out.bias", &Tensor::zeros(dim, DType::F64, &Device::Cpu).unwrap()).unwrap();
        (proj, adapter)
    }

    #[test]
    fn pasa_hand_computed() {
        let mut store = ParamStore::new(0, DType::F64);
        let (proj, adapter) = identity_block(&mut store, 1, 1);
        let f_h = t3(&[2.0], (1, 1, 1));
        let f_g = t3(&[0.0], (1, 1, 1));
        let p = t3(&[0.7], (1, 1, 1));
        let (out, probs) = pasa(&f_h, &f_g, &p, &p, &proj, &adapter).unwrap();
        let sigma = 4f64.exp() / (4f64.exp() + 1.0);
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((got - 2.0 * sigma).abs() < 1e-12);
        assert!((got - 1.9640).abs() < 1e-4);
        let pr = probs.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((pr[0] + pr[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tsa_hand_computed() {
        let mut store = ParamStore::new(0, DType::F64);
        let (proj, _) = identity_block(&mut store, 1, 1);
        let h = t3(&[1.0, 2.0], (2, 1, 1));
        let out = tsa(&h, FrameLayout::new(1, 2), 1, &proj).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let w = 4f64.exp() / (4f64.exp() + 2f64.exp());
        assert!((v[1] - (2.0 * w + (1.0 - w))).abs() < 1e-12);
        assert!((v[1] - 1.8808).abs() < 1e-4);
    }

    #[test]
    fn tsa_key_count_grows_linearly() {
        let h = Tensor::zeros((6, 5, 4), DType::F32, &Device::Cpu).unwrap();
        for shift in 0..4 {
            let kv = shifted_keys(&h, FrameLayout::new(2, 3), shift).unwrap();
            assert_eq!(kv.dim(1).unwrap(), 5 * (1 + shift));
        }
    }

    #[test]
    fn tsa_without_shift_is_self_attention() {
        let mut store = ParamStore::new(4, DType::F64);
        let proj = AttnProj::new(&mut store.root().pp("t"), 8, 8, 2).unwrap();
        let mut rng = util::rng(2);
        let h = util::randn(&mut rng, &[6, 4, 8], DType::F64, &Device::Cpu).unwrap();
        let a = tsa(&h, FrameLayout::new(2, 3), 0, &proj).unwrap();
        let (b, _) = proj.attend(&h, &h).unwrap();
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn cross_attn_single_key_returns_value() {
        let mut store = ParamStore::new(4, DType::F64);
        let proj = AttnProj::new(&mut store.root().pp("c"), 8, 6, 2).unwrap();
        let mut rng = util::rng(3);
        let h = util::randn(&mut rng, &[2, 5, 8], DType::F64, &Device::Cpu).unwrap();
        let c = util::randn(&mut rng, &[2, 1, 6], DType::F64, &Device::Cpu).unwrap();
        let out = cross_attn(&h, &c, &proj).unwrap().to_vec3::<f64>().unwrap();
        let val = proj.out.forward(&proj.v.forward(&c).unwrap()).unwrap().to_vec3::<f64>().unwrap();
        for n in 0..2 {
            for s in 0..5 {
                for d in 0..8 {
                    assert!((out[n][s][d] - val[n][0][d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cross_attn_zero_value_projection_is_bias_only() {
        let mut store = ParamStore::new(4, DType::F64);
        let proj = AttnProj::new(&mut store.root().pp("c"), 4, 4, 1).unwrap();
        store.assign("c.v.weight", &Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap()).unwrap();
        store.assign("c.out.bias", &Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let mut rng = util::rng(3);
        let h = util::randn(&mut rng, &[1, 3, 4], DType::F64, &Device::Cpu).unwrap();
        let c = util::randn(&mut rng, &[1, 2, 4], DType::F64, &Device::Cpu).unwrap();
        let out = cross_attn(&h, &c, &proj).unwrap();
        assert!(util::to_vec_f64(&out).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pata_single_frame_is_linear() {
        let mut store = ParamStore::new(4, DType::F64);
        let proj = AttnProj::new(&mut store.root().pp("p"), 8, 8, 2).unwrap();
        let adapter = PoseAdapter::new(&mut store.root().pp("p.adapter"), 4, 8, 4).unwrap();
        let mut rng = util::rng(5);
        let h = util::randn(&mut rng, &[2, 3, 8], DType::F64, &Device::Cpu).unwrap();
        let p = util::randn(&mut rng, &[2, 3, 4], DType::F64, &Device::Cpu).unwrap();
        let out = pata(&h, &p, FrameLayout::new(2, 1), &proj, &adapter).unwrap();
        let lin = proj.out.forward(&proj.v.forward(&h).unwrap()).unwrap();
        let diff = (out - lin).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut store = ParamStore::new(0, DType::F64);
        let (proj, adapter) = identity_block(&mut store, 2, 2);
        let f = Tensor::zeros((1, 3, 2), DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(pasa(&f, &f, &p, &f, &proj, &adapter), Err(Error::Shape(_))));
        assert!(matches!(pata(&f, &p, FrameLayout::new(1, 1), &proj, &adapter), Err(Error::Shape(_))));
        assert!(matches!(tsa(&f, FrameLayout::new(1, 2), 1, &proj), Err(Error::Shape(_))));
    }

    #[test]
    fn token_round_trip() {
        let mut rng = util::rng(0);
        let x = util::randn(&mut rng, &[2, 3, 4, 5], DType::F32, &Device::Cpu).unwrap();
        let y = from_tokens(&to_tokens(&x).unwrap(), 4, 5).unwrap();
        assert_eq!(util::to_vec_f64(&x).unwrap(), util::to_vec_f64(&y).unwrap());
    }
}
