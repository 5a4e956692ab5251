use super::{join, nchw, Init, Module, ParamKind};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::{kernels, Tensor};

/// Dense affine layer over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[d_out, d_in]`
    pub weight: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, init: &mut Init) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Self {
            weight: init.uniform(&[d_out, d_in], bound).param(),
            bias: Tensor::zeros(&[d_out]).param(),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

/// `y = x·Wᵀ + b` over the last axis of `x` (`[*, d_in]` → `[*, d_out]`).
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let ws = weight.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
        return Err(Error::shape("linear", xs, ws));
    }
    let (d_out, d_in) = (ws[0], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(Error::shape("linear bias", b.shape(), &[d_out]));
        }
    }
    let rows = x.numel() / d_in.max(1);
    let exec = Exec::default();
    let wt = kernels::transpose(weight.data(), d_out, d_in);
    let mut out = vec![0.0; rows * d_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(d_out.max(1)) {
            row.copy_from_slice(b.data());
        }
    }
    kernels::gemm_into(exec, x.data(), &wt, rows, d_in, d_out, &mut out);
    let mut shape = xs.to_vec();
    *shape.last_mut().expect("non-empty shape") = d_out;

    let (xc, wc) = (x.clone(), weight.clone());
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        out,
        shape,
        parents,
        Box::new(move |g, need| {
            let gx = need[0].then(|| kernels::gemm(exec, g, wc.data(), rows, d_out, d_in));
            let gw = need[1].then(|| {
                let gt = kernels::transpose(g, rows, d_out);
                kernels::gemm(exec, &gt, xc.data(), d_out, rows, d_in)
            });
            let mut grads = vec![gx, gw];
            if need.len() == 3 {
                grads.push(need[2].then(|| {
                    let mut gb = vec![0.0; d_out];
                    for row in g.chunks(d_out.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Add a per-channel bias `[C]` to an NCHW tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = nchw("add_channel_bias", x)?;
    if bias.shape() != [c] {
        return Err(Error::shape("add_channel_bias", x.shape(), bias.shape()));
    }
    let plane = h * w;
    let b = bias.data();
    let data: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + b[(i / plane) % c])
        .collect();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone(), bias.clone()],
        Box::new(move |g, need| {
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; c];
                for (i, row) in g.chunks(plane.max(1)).enumerate().take(n * c) {
                    gb[i % c] += row.iter().sum::<f64>();
                }
                gb
            });
            vec![need[0].then(|| g.to_vec()), gb]
        }),
    ))
}
