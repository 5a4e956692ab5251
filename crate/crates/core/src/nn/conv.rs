use super::{join, nchw, Module, ParamKind};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Square-kernel convolution weights.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    /// `[e, c, k, k]`
    pub weight: Tensor,
    /// `[e]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Config(format!("conv weight must be [e,c,k,k] with odd k, got {s:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [s[0]] {
                return Err(Error::shape("conv2d bias", b.shape(), &[s[0]]));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self)
    }
}

impl Module for Conv2dParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    conv2d_general(x, &p.weight, p.bias.as_ref(), p.stride, p.padding, p.padding)
}

fn geometry(op: &'static str, x: &Tensor, w: &Tensor, stride: usize, pad_h: usize, pad_w: usize) -> Result<ConvGeom> {
    let (_, c, h, wd) = nchw(op, x)?;
    let ws = w.shape();
    if ws.len() != 4 {
        return Err(Error::shape(op, x.shape(), ws));
    }
    if stride == 0 {
        return Err(Error::Config(format!("{op}: stride must be >= 1")));
    }
    let (kh, kw) = (ws[2], ws[3]);
    if h + 2 * pad_h < kh || wd + 2 * pad_w < kw {
        return Err(Error::Config(format!(
            "{op}: {kh}x{kw} window does not fit a {h}x{wd} input with padding ({pad_h},{pad_w})"
        )));
    }
    Ok(ConvGeom {
        channels: c,
        height: h,
        width: wd,
        kh,
        kw,
        stride,
        pad_h,
        pad_w,
    })
}

/// Dense convolution with an arbitrary `[e, c, kh, kw]` kernel, realized as
/// im2col followed by a matrix product. Output size uses floor division.
pub fn conv2d_general(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Result<Tensor> {
    let g = geometry("conv2d", x, weight, stride, pad_h, pad_w)?;
    let n = x.dim(0);
    let (e, wc) = (weight.dim(0), weight.dim(1));
    if wc != g.channels {
        return Err(Error::shape("conv2d", x.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [e] {
            return Err(Error::shape("conv2d bias", b.shape(), &[e]));
        }
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let (plane_in, plane_out) = (g.channels * g.height * g.width, oh * ow);
    let kdim = g.channels * g.kh * g.kw;
    let exec = Exec::default();

    let mut out = vec![0.0; n * e * plane_out];
    for b in 0..n {
        let xb = &x.data()[b * plane_in..(b + 1) * plane_in];
        let dst = &mut out[b * e * plane_out..(b + 1) * e * plane_out];
        if let Some(bias) = bias {
            for (row, &bv) in dst.chunks_mut(plane_out).zip(bias.data()) {
                row.fill(bv);
            }
        }
        if g.is_pointwise() {
            kernels::gemm_into(exec, weight.data(), xb, e, kdim, plane_out, dst);
        } else {
            let cols = kernels::im2col(xb, &g);
            kernels::gemm_into(exec, weight.data(), &cols, e, kdim, plane_out, dst);
        }
    }

    let (xs, ws) = (x.clone(), weight.clone());
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out,
        vec![n, e, oh, ow],
        parents,
        Box::new(move |gout, need| {
            let mut gx = need[0].then(|| vec![0.0; n * plane_in]);
            let mut gw = need[1].then(|| vec![0.0; e * kdim]);
            let wt = gx.as_ref().map(|_| kernels::transpose(ws.data(), e, kdim));
            for b in 0..n {
                let gb = &gout[b * e * plane_out..(b + 1) * e * plane_out];
                let xb = &xs.data()[b * plane_in..(b + 1) * plane_in];
                if let Some(gw) = gw.as_mut() {
                    let cols_t = if g.is_pointwise() {
                        kernels::transpose(xb, kdim, plane_out)
                    } else {
                        kernels::transpose(&kernels::im2col(xb, &g), kdim, plane_out)
                    };
                    kernels::gemm_into(exec, gb, &cols_t, e, plane_out, kdim, gw);
                }
                if let (Some(gx), Some(wt)) = (gx.as_mut(), wt.as_ref()) {
                    let dst = &mut gx[b * plane_in..(b + 1) * plane_in];
                    if g.is_pointwise() {
                        kernels::gemm_into(exec, wt, gb, kdim, e, plane_out, dst);
                    } else {
                        let dcols = kernels::gemm(exec, wt, gb, kdim, e, plane_out);
                        kernels::col2im(&dcols, &g, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut gbias = vec![0.0; e];
                    for b in 0..n {
                        for (o, row) in gbias.iter_mut().zip(gout[b * e * plane_out..].chunks(plane_out).take(e)) {
                            *o += row.iter().sum::<f64>();
                        }
                    }
                    gbias
                }));
            }
            grads
        }),
    ))
}

/// Per-channel spatial convolution with square kernel, weight `[C,1,k,k]`.
pub fn depthwise_conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    depthwise_general(x, weight, stride, pad, pad)
}

/// Per-channel convolution with a `[C,1,kh,kw]` kernel.
pub(crate) fn depthwise_general(x: &Tensor, weight: &Tensor, stride: usize, pad_h: usize, pad_w: usize) -> Result<Tensor> {
    let g = geometry("depthwise_conv2d", x, weight, stride, pad_h, pad_w)?;
    let n = x.dim(0);
    let c = g.channels;
    let ws = weight.shape();
    if ws[0] != c || ws[1] != 1 {
        return Err(Error::shape("depthwise_conv2d", x.shape(), ws));
    }
    let (h, w, kh, kw) = (g.height, g.width, g.kh, g.kw);
    let (oh, ow) = (g.out_h(), g.out_w());
    let exec = Exec::default();
    let tap = move |o: usize, k: usize, pad: usize, lim: usize| -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        (i >= 0 && (i as usize) < lim).then_some(i as usize)
    };

    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; n * c * oh * ow];
    par::for_each_chunk(exec, &mut out, oh * ow, |plane, dst| {
        let ch = plane % c;
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let ker = &wd[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ki in 0..kh {
                    let Some(iy) = tap(oy, ki, pad_h, h) else { continue };
                    for kj in 0..kw {
                        if let Some(ix) = tap(ox, kj, pad_w, w) {
                            acc += ker[ki * kw + kj] * src[iy * w + ix];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });

    let (xs, wsv) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![x.clone(), weight.clone()],
        Box::new(move |gout, need| {
            let xd = xs.data();
            let wd = wsv.data();
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; n * c * h * w];
                par::for_each_chunk(exec, &mut gx, h * w, |plane, dst| {
                    let ch = plane % c;
                    let gsrc = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                    let ker = &wd[ch * kh * kw..(ch + 1) * kh * kw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gsrc[oy * ow + ox];
                            for ki in 0..kh {
                                let Some(iy) = tap(oy, ki, pad_h, h) else { continue };
                                for kj in 0..kw {
                                    if let Some(ix) = tap(ox, kj, pad_w, w) {
                                        dst[iy * w + ix] += ker[ki * kw + kj] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; c * kh * kw];
                par::for_each_chunk(exec, &mut gw, kh * kw, |ch, dst| {
                    for b in 0..n {
                        let plane = b * c + ch;
                        let src = &xd[plane * h * w..(plane + 1) * h * w];
                        let gsrc = &gout[plane * oh * ow..(plane + 1) * oh * ow];
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let Some(iy) = tap(oy, ki, pad_h, h) else { continue };
                                    for ox in 0..ow {
                                        if let Some(ix) = tap(ox, kj, pad_w, w) {
                                            acc += gsrc[oy * ow + ox] * src[iy * w + ix];
                                        }
                                    }
                                }
                                dst[ki * kw + kj] += acc;
                            }
                        }
                    }
                });
                gw
            });
            vec![gx, gw]
        }),
    ))
}

/// Per-pixel linear map across channels, weight `[e,C,1,1]`.
pub fn pointwise_conv2d(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::shape("pointwise_conv2d", x.shape(), ws));
    }
    conv2d_general(x, weight, None, 1, 0, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    /// Direct sliding-window evaluation of the response dot product.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (e, k) = (w.dim(0), w.dim(2));
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Vec::new();
        for bi in 0..n {
            for f in 0..e {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map(|b| b.data()[f]).unwrap_or(0.0);
                        for ch in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * c + ch) * h + iy as usize) * wd + ix as usize];
                                    acc += w.data()[((f * c + ch) * k + ki) * k + kj] * xv;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_on_ones_input() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 3, 3]), None, 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut init = Init::new(3);
        let x = init.uniform(&[2, 3, 4, 5], 1.0);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let p = Conv2dParams::new(Tensor::new(w, &[3, 3, 1, 1]).unwrap(), None, 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn matches_sliding_window_oracle() {
        let mut init = Init::new(11);
        let x = init.uniform(&[1, 2, 5, 5], 1.0);
        let w = init.uniform(&[3, 2, 3, 3], 1.0);
        let b = init.uniform(&[3], 1.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let p = Conv2dParams::new(w.clone(), Some(b.clone()), stride, pad).unwrap();
            let y = conv2d(&x, &p).unwrap();
            let want = naive_conv(&x, &w, Some(&b), stride, pad);
            let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn output_size_uses_floor() {
        let x = Tensor::ones(&[1, 1, 64, 64]);
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().shape(), &[1, 1, 32, 32]);
        let too_small = Tensor::ones(&[1, 1, 2, 2]);
        let p0 = Conv2dParams::new(Tensor::ones(&[1, 1, 3, 3]), None, 1, 0).unwrap();
        assert!(matches!(conv2d(&too_small, &p0), Err(Error::Config(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Conv2dParams::new(Tensor::ones(&[1, 1, 2, 2]), None, 1, 0).is_err());
    }

    #[test]
    fn depthwise_center_one_is_identity() {
        let mut init = Init::new(5);
        let x = init.uniform(&[2, 3, 4, 4], 1.0);
        let mut w = vec![0.0; 27];
        for c in 0..3 {
            w[c * 9 + 4] = 1.0;
        }
        let y = depthwise_conv2d(&x, &Tensor::new(w, &[3, 1, 3, 3]).unwrap(), 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_ones_on_constant() {
        let x = Tensor::full(&[1, 2, 5, 5], 0.7);
        let y = depthwise_conv2d(&x, &Tensor::ones(&[2, 1, 3, 3]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|v| (v - 6.3).abs() < 1e-12));
    }

    #[test]
    fn depthwise_equals_block_diagonal_conv() {
        let mut init = Init::new(9);
        let x = init.uniform(&[2, 3, 6, 5], 1.0);
        let w = init.uniform(&[3, 1, 3, 3], 1.0);
        let mut full = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            full[(c * 3 + c) * 9..(c * 3 + c + 1) * 9].copy_from_slice(&w.data()[c * 9..(c + 1) * 9]);
        }
        let full = Tensor::new(full, &[3, 3, 3, 3]).unwrap();
        for stride in [1, 2] {
            let a = depthwise_conv2d(&x, &w, stride, 1).unwrap();
            let b = conv2d_general(&x, &full, None, stride, 1, 1).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
        assert!(depthwise_conv2d(&x, &Tensor::ones(&[2, 1, 3, 3]), 1, 1).is_err());
    }

    #[test]
    fn pointwise_cases() {
        let mut init = Init::new(2);
        let x = init.uniform(&[1, 3, 2, 2], 1.0);
        let y = pointwise_conv2d(&x, &Tensor::ones(&[1, 3, 1, 1])).unwrap();
        for p in 0..4 {
            let s: f64 = (0..3).map(|c| x.data()[c * 4 + p]).sum();
            assert!((y.data()[p] - s).abs() < 1e-15);
        }
        let w = init.uniform(&[4, 3, 1, 1], 1.0);
        let a = pointwise_conv2d(&x, &w).unwrap();
        let b = naive_conv(&x, &w, None, 1, 0);
        assert!(a.data().iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}
