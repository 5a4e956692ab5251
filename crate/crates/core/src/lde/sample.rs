use crate::error::{Error, Result};
use crate::nn::sample::{taps, Taps};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Layout of a flattened multi-level value sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Levels {
    /// `(H_c, W_c)` per level.
    pub shapes: Vec<(usize, usize)>,
    /// First token index of each level.
    pub starts: Vec<usize>,
}

impl Levels {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            starts.push(acc);
            acc += h * w;
        }
        Self { shapes, starts }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }
}

/// Multi-head, multi-level, multi-point bilinear sampling with weighted sum.
///
/// `value` is `[N, Q_v, d]` laid out per [`Levels`], split into `heads`
/// contiguous channel groups. `locs` is `[N, Q, H, C, T, 2]` in pixel
/// coordinates of each level, `weights` is `[N, Q, H, C, T]`. The result is
/// `[N, Q, d]` with head outputs concatenated. Out-of-bounds taps read zero.
pub fn ms_deform_sample(value: &Tensor, levels: &Levels, locs: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (n, qv, d) = match *value.shape() {
        [n, qv, d] => (n, qv, d),
        _ => return Err(Error::Contract(format!("value must be [N,Q,d], got {:?}", value.shape()))),
    };
    if qv != levels.tokens() {
        return Err(Error::Contract(format!(
            "value has {qv} tokens but the level shapes describe {}",
            levels.tokens()
        )));
    }
    let ws = weights.shape();
    if ws.len() != 5 || ws[0] != n || ws[3] != levels.len() {
        return Err(Error::shape("ms_deform_sample weights", ws, value.shape()));
    }
    let (q, heads, nl, npts) = (ws[1], ws[2], ws[3], ws[4]);
    if locs.shape() != [n, q, heads, nl, npts, 2] {
        return Err(Error::shape("ms_deform_sample locs", locs.shape(), ws));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let per_query = heads * nl * npts;
    let ld = locs.data();
    let tap_list: Vec<Taps> = (0..n * q * per_query)
        .map(|i| {
            let c = (i / npts) % nl;
            let (h, w) = levels.shapes[c];
            taps(ld[2 * i], ld[2 * i + 1], h, w)
        })
        .collect();
    let starts = levels.starts.clone();
    let exec = Exec::default();

    let vd = value.data();
    let wd = weights.data();
    let mut out = vec![0.0; n * q * d];
    par::for_each_chunk(exec, &mut out, d, |nq, dst| {
        let b = nq / q;
        let vbase = b * qv;
        for head in 0..heads {
            let acc = &mut dst[head * dh..(head + 1) * dh];
            for c in 0..nl {
                for t in 0..npts {
                    let s = (nq * heads + head) * nl * npts + c * npts + t;
                    let a = wd[s];
                    let tp = &tap_list[s];
                    for k in 0..4 {
                        if let Some(pix) = tp.idx[k] {
                            let coef = a * tp.w[k];
                            let row = &vd[(vbase + starts[c] + pix) * d + head * dh..][..dh];
                            acc.iter_mut().zip(row).for_each(|(o, v)| *o += coef * v);
                        }
                    }
                }
            }
        }
    });

    let (vc, wc) = (value.clone(), weights.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, q, d],
        vec![value.clone(), locs.clone(), weights.clone()],
        Box::new(move |g, need| {
            let vd = vc.data();
            let wd = wc.data();
            // Per-sample gradients for locations and weights do not overlap
            // between queries, so they are computed in parallel.
            let mut per = vec![0.0; n * q * per_query * 3];
            if need[1] || need[2] {
                par::for_each_chunk(exec, &mut per, per_query * 3, |nq, dst| {
                    let b = nq / q;
                    let go = &g[nq * d..(nq + 1) * d];
                    for head in 0..heads {
                        let gh = &go[head * dh..(head + 1) * dh];
                        for c in 0..nl {
                            for t in 0..npts {
                                let local = (head * nl + c) * npts + t;
                                let s = nq * per_query + local;
                                let tp = &tap_list[s];
                                let (mut gw, mut gx, mut gy) = (0.0, 0.0, 0.0);
                                for k in 0..4 {
                                    if let Some(pix) = tp.idx[k] {
                                        let row = &vd[(b * qv + starts[c] + pix) * d + head * dh..][..dh];
                                        let dot: f64 = row.iter().zip(gh).map(|(v, g)| v * g).sum();
                                        gw += tp.w[k] * dot;
                                        gx += tp.dx[k] * dot;
                                        gy += tp.dy[k] * dot;
                                    }
                                }
                                dst[local * 3] = gw;
                                dst[local * 3 + 1] = wd[s] * gx;
                                dst[local * 3 + 2] = wd[s] * gy;
                            }
                        }
                    }
                });
            }
            let gvalue = need[0].then(|| {
                let mut gv = vec![0.0; n * qv * d];
                for nq in 0..n * q {
                    let b = nq / q;
                    let go = &g[nq * d..(nq + 1) * d];
                    for head in 0..heads {
                        for s in nq * per_query + head * nl * npts..nq * per_query + (head + 1) * nl * npts {
                            let c = (s / npts) % nl;
                            let tp = &tap_list[s];
                            for k in 0..4 {
                                if let Some(pix) = tp.idx[k] {
                                    let coef = wd[s] * tp.w[k];
                                    let dst = &mut gv[(b * qv + starts[c] + pix) * d + head * dh..][..dh];
                                    dst.iter_mut().zip(&go[head * dh..(head + 1) * dh]).for_each(|(o, g)| *o += coef * g);
                                }
                            }
                        }
                    }
                }
                gv
            });
            let glocs = need[1].then(|| {
                let mut gl = vec![0.0; n * q * per_query * 2];
                for s in 0..n * q * per_query {
                    gl[2 * s] = per[3 * s + 1];
                    gl[2 * s + 1] = per[3 * s + 2];
                }
                gl
            });
            let gweights = need[2].then(|| (0..n * q * per_query).map(|s| per[3 * s]).collect());
            vec![gvalue, glocs, gweights]
        }),
    ))
}
