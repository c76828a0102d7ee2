//! Brute-force reference implementations in plain f64 loops. Nothing here
//! calls into the library's tensor code.

use candle_core::Tensor;
use dpidm::network::ParamStore;
use ndarray::{s, Array1, Array2, Array3, Axis};
use statrs::function::erf::erf;

pub fn mat(t: &Tensor) -> Array2<f64> {
    let v = t.to_dtype(candle_core::DType::F64).unwrap().to_vec2::<f64>().unwrap();
    let (r, c) = (v.len(), v[0].len());
    Array2::from_shape_vec((r, c), v.into_iter().flatten().collect()).unwrap()
}

pub fn vec1(t: &Tensor) -> Array1<f64> {
    Array1::from(t.to_dtype(candle_core::DType::F64).unwrap().to_vec1::<f64>().unwrap())
}

pub fn tokens(t: &Tensor) -> Array3<f64> {
    let (n, s, d) = t.dims3().unwrap();
    let v = t.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    Array3::from_shape_vec((n, s, d), v).unwrap()
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .as_tensor()
        .clone()
}

/// `x W^T + b`, row by row.
fn affine(x: &Array2<f64>, w: &Array2<f64>, b: Option<&Array1<f64>>) -> Array2<f64> {
    let (n, din) = x.dim();
    let dout = w.nrows();
    assert_eq!(w.ncols(), din);
    let mut y = Array2::zeros((n, dout));
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for k in 0..din {
                acc += x[[i, k]] * w[[o, k]];
            }
            y[[i, o]] = acc;
        }
    }
    y
}

pub struct Proj {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    out_w: Array2<f64>,
    out_b: Array1<f64>,
    heads: usize,
}

impl Proj {
    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Self {
        Proj {
            q: mat(&param(store, &format!("{prefix}.q.weight"))),
            k: mat(&param(store, &format!("{prefix}.k.weight"))),
            v: mat(&param(store, &format!("{prefix}.v.weight"))),
            out_w: mat(&param(store, &format!("{prefix}.out.weight"))),
            out_b: vec1(&param(store, &format!("{prefix}.out.bias"))),
            heads,
        }
    }

    /// Multi-head attention of each query row over every key row.
    pub fn attend(&self, queries: &Array2<f64>, keys: &Array2<f64>) -> Array2<f64> {
        let q = affine(queries, &self.q, None);
        let k = affine(keys, &self.k, None);
        let v = affine(keys, &self.v, None);
        let (sq, d) = q.dim();
        let sk = k.nrows();
        let dh = d / self.heads;
        let mut o = Array2::zeros((sq, d));
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..sq {
                let scores: Vec<f64> = (0..sk)
                    .map(|j| cols.clone().map(|c| q[[i, c]] * k[[j, c]]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    o[[i, c]] = (0..sk).map(|j| e[j] / z * v[[j, c]]).sum();
                }
            }
        }
        affine(&o, &self.out_w, Some(&self.out_b))
    }
}

pub struct Adapter {
    down_w: Array2<f64>,
    down_b: Array1<f64>,
    up_w: Array2<f64>,
    up_b: Array1<f64>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

impl Adapter {
    pub fn load(store: &ParamStore, prefix: &str) -> Self {
        Adapter {
            down_w: mat(&param(store, &format!("{prefix}.down.weight"))),
            down_b: vec1(&param(store, &format!("{prefix}.down.bias"))),
            up_w: mat(&param(store, &format!("{prefix}.up.weight"))),
            up_b: vec1(&param(store, &format!("{prefix}.up.bias"))),
        }
    }

    pub fn apply(&self, p: &Array2<f64>) -> Array2<f64> {
        let hidden = affine(p, &self.down_w, Some(&self.down_b)).mapv(gelu);
        affine(&hidden, &self.up_w, Some(&self.up_b))
    }
}

fn stack_rows(parts: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).unwrap()
}

/// Self-attention over human and garment tokens of one frame without any pose
/// term; only human rows are queries.
pub fn joint_attention(f_h: &Array2<f64>, f_g: &Array2<f64>, proj: &Proj) -> Array2<f64> {
    let x = stack_rows(&[f_h.clone(), f_g.clone()]);
    proj.attend(f_h, &x)
}

/// `[N, S_h, d]` output of pose-aware spatial attention, item by item.
pub fn pasa(
    f_h: &Array3<f64>,
    f_g: &Array3<f64>,
    p_h: &Array3<f64>,
    p_g: &Array3<f64>,
    proj: &Proj,
    adapter: &Adapter,
) -> Array3<f64> {
    let (n, s_h, d) = f_h.dim();
    let mut out = Array3::zeros((n, s_h, d));
    for i in 0..n {
        let f = stack_rows(&[f_h.slice(s![i, .., ..]).to_owned(), f_g.slice(s![i, .., ..]).to_owned()]);
        let p = stack_rows(&[p_h.slice(s![i, .., ..]).to_owned(), p_g.slice(s![i, .., ..]).to_owned()]);
        let x = f + adapter.apply(&p);
        let q = x.slice(s![..s_h, ..]).to_owned();
        out.slice_mut(s![i, .., ..]).assign(&proj.attend(&q, &x));
    }
    out
}

/// Temporal-shift attention with items ordered clip-major (`b * frames + t`).
pub fn tsa(h: &Array3<f64>, frames: usize, shift: usize, proj: &Proj) -> Array3<f64> {
    let (n, s, d) = h.dim();
    let mut out = Array3::zeros((n, s, d));
    for b in 0..n / frames {
        for t in 0..frames {
            let own = h.slice(s![b * frames + t, .., ..]).to_owned();
            let mut keys = vec![own.clone()];
            for l in 1..=shift {
                let src = if t >= l { t - l } else { 0 };
                keys.push(h.slice(s![b * frames + src, .., ..]).to_owned());
            }
            out.slice_mut(s![b * frames + t, .., ..])
                .assign(&proj.attend(&own, &stack_rows(&keys)));
        }
    }
    out
}

pub fn cross(h: &Array3<f64>, c: &Array3<f64>, proj: &Proj) -> Array3<f64> {
    let (n, s, d) = h.dim();
    let mut out = Array3::zeros((n, s, d));
    for i in 0..n {
        let q = h.slice(s![i, .., ..]).to_owned();
        let k = c.slice(s![i, .., ..]).to_owned();
        out.slice_mut(s![i, .., ..]).assign(&proj.attend(&q, &k));
    }
    out
}

/// Pose-aware temporal attention: every spatial location attends over the
/// frames of its clip.
pub fn pata(h: &Array3<f64>, p_h: &Array3<f64>, frames: usize, proj: &Proj, adapter: &Adapter) -> Array3<f64> {
    let (n, s, d) = h.dim();
    let mut x = h.clone();
    for i in 0..n {
        let a = adapter.apply(&p_h.slice(s![i, .., ..]).to_owned());
        let mut xi = x.slice_mut(s![i, .., ..]);
        xi += &a;
    }
    let mut out = Array3::zeros((n, s, d));
    for b in 0..n / frames {
        for loc in 0..s {
            let seq = Array2::from_shape_fn((frames, d), |(t, c)| x[[b * frames + t, loc, c]]);
            let o = proj.attend(&seq, &seq);
            for t in 0..frames {
                out.slice_mut(s![b * frames + t, loc, ..]).assign(&o.row(t));
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Max absolute difference divided by the largest reference magnitude.
pub fn max_rel_diff(a: &Array3<f64>, reference: &Array3<f64>) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    max_abs_diff(a, reference) / scale
}

/// Window coverage by direct enumeration: frame `f` is covered by every start
/// `0, stride, 2*stride, ...` whose window contains it, plus the right-aligned
/// final window.
pub fn enumerate_windows(len: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    let w = window.min(len);
    let mut starts: Vec<usize> = (0..len).step_by(stride).filter(|&s| s + w < len).collect();
    starts.push(len - w);
    starts.into_iter().map(|s| (s, w)).collect()
}
