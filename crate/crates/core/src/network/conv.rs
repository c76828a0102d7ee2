//! 2-D convolution as patch extraction followed by a matrix product. The
//! patch op carries its own backward pass, so both directions run through
//! gemm instead of candle's direct convolution kernels.

use candle_core::{CpuStorage, CustomOp1, Layout, Module, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((self.n, self.c * self.k * self.k, self.out_h() * self.out_w()))
    }

    /// Calls `f(image_start, column_start, len)` for every run of in-bounds
    /// taps; within a run the image index advances by `stride` and the column
    /// index by one.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let kk = self.k * self.k;
        let (s, p) = (self.stride, self.pad);
        for kx in 0..self.k {
            // ox range with 0 <= ox*s + kx - p < w
            let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
            let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(wo) } else { 0 };
            if lo >= hi {
                continue;
            }
            for bc in 0..self.n * self.c {
                let img = bc * self.h * self.w;
                for ky in 0..self.k {
                    let row = (bc * kk + ky * self.k + kx) * ho * wo;
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= self.h {
                            continue;
                        }
                        let ix = lo * s + kx - p;
                        f(img + (iy - p) * self.w + ix, row + oy * wo + lo, hi - lo);
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv patch op expects a contiguous input"),
    }
}

/// `[N, C, H, W]` to `[N, C*k*k, Ho*Wo]` patch columns.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters columns back onto the image, summing
/// overlapping taps.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = g.cols_shape();
        let out = match storage {
            CpuStorage::F32(d) => {
                let src = contiguous(d, layout)?;
                let mut dst = vec![0f32; shape.elem_count()];
                g.for_each_run(|i, j, n| {
                    for t in 0..n {
                        dst[j + t] = src[i + t * g.stride];
                    }
                });
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(d) => {
                let src = contiguous(d, layout)?;
                let mut dst = vec![0f64; shape.elem_count()];
                g.for_each_run(|i, j, n| {
                    for t in 0..n {
                        dst[j + t] = src[i + t * g.stride];
                    }
                });
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.n, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(d) => {
                let src = contiguous(d, layout)?;
                let mut dst = vec![0f32; shape.elem_count()];
                g.for_each_run(|i, j, n| {
                    for t in 0..n {
                        dst[i + t * g.stride] += src[j + t];
                    }
                });
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(d) => {
                let src = contiguous(d, layout)?;
                let mut dst = vec![0f64; shape.elem_count()];
                g.for_each_run(|i, j, n| {
                    for t in 0..n {
                        dst[i + t * g.stride] += src[j + t];
                    }
                });
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}

/// Square-kernel convolution with "same"-style padding `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize) -> Self {
        Conv2d { weight, bias, stride }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let g = Geometry {
            n,
            c,
            h,
            w,
            k,
            stride: self.stride,
            pad: k / 2,
        };
        let (ho, wo) = (g.out_h(), g.out_w());
        let y = if k == 1 && self.stride == 1 {
            let wm = self.weight.reshape((o, c))?;
            wm.broadcast_matmul(&x.reshape((n, c, h * w))?)?
        } else {
            let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
            let wm = self.weight.reshape((o, c * k * k))?;
            wm.broadcast_matmul(&cols)?
        };
        let y = y.reshape((n, o, ho, wo))?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, o, 1, 1))?),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn reference(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let k = w.dim(2).unwrap();
        let o = w.dim(0).unwrap();
        x.conv2d(w, k / 2, stride, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, o, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn matches_direct_convolution_and_its_gradients() {
        let dev = Device::Cpu;
        for &(c, o, h, w, k, s) in &[(3, 5, 8, 6, 3, 1), (4, 2, 8, 6, 3, 2), (3, 4, 5, 7, 3, 2), (2, 3, 4, 4, 1, 1)] {
            let x = Var::randn(0f64, 1.0, (2, c, h, w), &dev).unwrap();
            let wt = Var::randn(0f64, 1.0, (o, c, k, k), &dev).unwrap();
            let b = Var::randn(0f64, 1.0, o, &dev).unwrap();
            let conv = Conv2d::new(wt.as_tensor().clone(), Some(b.as_tensor().clone()), s);
            let ours = conv.forward(x.as_tensor()).unwrap();
            let theirs = reference(x.as_tensor(), wt.as_tensor(), b.as_tensor(), s);
            assert_eq!(ours.dims(), theirs.dims());
            let diff = (&ours - &theirs).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);

            let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = theirs.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt, &b] {
                let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
                assert!(d.to_scalar::<f64>().unwrap() < 1e-9, "{c} {o} {h} {w} {k} {s}");
            }
        }
    }
}
