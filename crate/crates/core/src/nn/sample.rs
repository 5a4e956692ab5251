use super::nchw;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four bilinear corner taps of a point in pixel coordinates, where pixel
/// `(i, j)` sits at `(x = j, y = i)`. Out-of-bounds corners have `idx = None`
/// and contribute zero. `dx`/`dy` are the weight derivatives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Taps {
    pub idx: [Option<usize>; 4],
    pub w: [f64; 4],
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

pub(crate) fn taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |yy: i64, xx: i64| {
        (yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w).then(|| yy as usize * w + xx as usize)
    };
    Taps {
        idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

/// Bilinear sampling of `feat [N,C,H,W]` at `pts [N,Q,2]` (`(x, y)` pixel
/// coordinates) with zero padding, giving `[N,Q,C]`. Differentiable in both
/// the features and the points.
pub fn bilinear_sample(feat: &Tensor, pts: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw("bilinear_sample", feat)?;
    let q = match *pts.shape() {
        [pn, q, 2] if pn == n => q,
        _ => return Err(Error::shape("bilinear_sample", feat.shape(), pts.shape())),
    };
    let plane = h * w;
    let fd = feat.data();
    let pd = pts.data();
    let all_taps: Vec<Taps> = (0..n * q).map(|i| taps(pd[2 * i], pd[2 * i + 1], h, w)).collect();
    let mut out = vec![0.0; n * q * c];
    for b in 0..n {
        for qi in 0..q {
            let t = &all_taps[b * q + qi];
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let mut v = 0.0;
                for k in 0..4 {
                    if let Some(i) = t.idx[k] {
                        v += t.w[k] * fd[base + i];
                    }
                }
                out[(b * q + qi) * c + ch] = v;
            }
        }
    }
    let fc = feat.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, q, c],
        vec![feat.clone(), pts.clone()],
        Box::new(move |g, need| {
            let fd = fc.data();
            let mut gf = need[0].then(|| vec![0.0; n * c * plane]);
            let mut gp = need[1].then(|| vec![0.0; n * q * 2]);
            for b in 0..n {
                for qi in 0..q {
                    let t = &all_taps[b * q + qi];
                    for ch in 0..c {
                        let go = g[(b * q + qi) * c + ch];
                        if go == 0.0 {
                            continue;
                        }
                        let base = (b * c + ch) * plane;
                        for k in 0..4 {
                            if let Some(i) = t.idx[k] {
                                if let Some(gf) = gf.as_mut() {
                                    gf[base + i] += t.w[k] * go;
                                }
                                if let Some(gp) = gp.as_mut() {
                                    gp[(b * q + qi) * 2] += t.dx[k] * fd[base + i] * go;
                                    gp[(b * q + qi) * 2 + 1] += t.dy[k] * fd[base + i] * go;
                                }
                            }
                        }
                    }
                }
            }
            vec![gf, gp]
        }),
    ))
}

/// Source index pair and weights for each of the `2·len` output positions
/// along one axis, half-pixel (align_corners = false) convention with the
/// source coordinate clamped at the borders.
fn upsample_axis(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Bilinear 2× upsampling `[N,C,H,W] → [N,C,2H,2W]`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw("upsample2x", x)?;
    if h == 0 || w == 0 {
        return Ok(Tensor::zeros(&[n, c, 2 * h, 2 * w]));
    }
    let rows = upsample_axis(h);
    let cols = upsample_axis(w);
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                dst[oi * ow + oj] = wr0 * (wc0 * src[r0 * w + c0] + wc1 * src[r0 * w + c1])
                    + wr1 * (wc0 * src[r1 * w + c0] + wc1 * src[r1 * w + c1]);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, oh, ow],
        vec![x.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for p in 0..n * c {
                let go = &g[p * oh * ow..(p + 1) * oh * ow];
                let gs = &mut gx[p * h * w..(p + 1) * h * w];
                for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
                    for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                        let v = go[oi * ow + oj];
                        gs[r0 * w + c0] += wr0 * wc0 * v;
                        gs[r0 * w + c1] += wr0 * wc1 * v;
                        gs[r1 * w + c0] += wr1 * wc0 * v;
                        gs[r1 * w + c1] += wr1 * wc1 * v;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
