//! Reduce → depthwise → pointwise → expand convolution blocks, the low-rank
//! linear layer, interchangeable convolution realizations, and the SVD
//! response factorization used to verify the low-rank argument.

mod lowrank;
mod unit;

pub use lowrank::{factorize_response, lr_cost, lrds_cost, LowRankFactorization, LrCost};
pub use unit::{ConvKind, ConvSpec, ConvUnit, Post};

use crate::error::{Error, Result};
use crate::nn::{conv2d, depthwise_conv2d, join, linear, Conv2dParams, Init, Module, NormMode, ParamKind};
use crate::tensor::Tensor;

/// Default bottleneck width for a block mapping `c_in → c_out`.
///
/// A quarter of the narrower side, and at least 4.
pub fn default_mid(c_in: usize, c_out: usize) -> usize {
    (c_in.min(c_out) / 4).max(4)
}

/// Where batch norm and ReLU sit inside an LRDS block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LrdsFlags {
    pub reduce_norm: bool,
    pub reduce_act: bool,
    pub expand_norm: bool,
    pub expand_act: bool,
}

impl LrdsFlags {
    pub const STANDARD: Self = Self {
        reduce_norm: true,
        reduce_act: true,
        expand_norm: true,
        expand_act: true,
    };
    pub const LINEAR: Self = Self {
        reduce_norm: false,
        reduce_act: false,
        expand_norm: false,
        expand_act: false,
    };
}

/// Weights of one reduce/depthwise/pointwise/expand block.
#[derive(Debug, Clone)]
pub struct LRDSParams {
    /// 1×1 `c → C_m`.
    pub reduce: Conv2dParams,
    pub reduce_post: Post,
    /// `[C_m, 1, k, k]`.
    pub depthwise: Tensor,
    pub stride: usize,
    /// 1×1 `C_m → C_m`.
    pub pointwise: Conv2dParams,
    /// 1×1 `C_m → C_d`; carries a bias only when no norm follows.
    pub expand: Conv2dParams,
    pub expand_post: Post,
}

impl LRDSParams {
    pub fn new(c_in: usize, mid: usize, c_out: usize, k: usize, stride: usize, flags: LrdsFlags, init: &mut Init) -> Result<Self> {
        if c_in == 0 || mid == 0 || c_out == 0 {
            return Err(Error::Config("LRDS channel counts must be positive".into()));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("LRDS kernel must be odd, got {k}")));
        }
        if mid >= c_in.min(c_out) {
            log::warn!("LRDS {c_in}->{mid}->{c_out}: mid width is not a bottleneck");
        }
        let expand_bias = (!flags.expand_norm).then(|| Tensor::zeros(&[c_out]).param());
        Ok(Self {
            reduce: Conv2dParams::new(init.kaiming(&[mid, c_in, 1, 1], c_in), None, 1, 0)?,
            reduce_post: Post::new(mid, flags.reduce_norm, flags.reduce_act),
            depthwise: init.lecun(&[mid, 1, k, k], k * k),
            stride,
            pointwise: Conv2dParams::new(init.lecun(&[mid, mid, 1, 1], mid), None, 1, 0)?,
            expand: Conv2dParams::new(init.kaiming(&[c_out, mid, 1, 1], mid), expand_bias, 1, 0)?,
            expand_post: Post::new(c_out, flags.expand_norm, flags.expand_act),
        })
    }

    /// `c → c → c` block whose every stage is the identity map.
    pub fn identity(c: usize, k: usize) -> Self {
        let eye = Tensor::new(eye(c), &[c, c, 1, 1]).expect("square").param();
        let mut center = vec![0.0; c * k * k];
        for ch in 0..c {
            center[ch * k * k + (k * k) / 2] = 1.0;
        }
        let conv = |w: &Tensor, bias: Option<Tensor>| Conv2dParams::new(w.detach().param(), bias, 1, 0).expect("1x1");
        Self {
            reduce: conv(&eye, None),
            reduce_post: Post::new(c, false, false),
            depthwise: Tensor::new(center, &[c, 1, k, k]).expect("shape").param(),
            stride: 1,
            pointwise: conv(&eye, None),
            expand: conv(&eye, Some(Tensor::zeros(&[c]).param())),
            expand_post: Post::new(c, false, false),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels()
    }

    pub fn mid_channels(&self) -> usize {
        self.reduce.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.expand.out_channels()
    }

    pub fn kernel(&self) -> usize {
        self.depthwise.dim(2)
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        lrds_forward(x, self, mode)
    }
}

fn eye(c: usize) -> Vec<f64> {
    let mut m = vec![0.0; c * c];
    for i in 0..c {
        m[i * c + i] = 1.0;
    }
    m
}

impl Module for LRDSParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.reduce_post.visit(&join(prefix, "reduce_norm"), f);
        f(&join(prefix, "depthwise"), &self.depthwise, ParamKind::Trainable);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        self.expand_post.visit(&join(prefix, "expand_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.reduce_post.visit_mut(&join(prefix, "reduce_norm"), f);
        f(&join(prefix, "depthwise"), &mut self.depthwise, ParamKind::Trainable);
        self.pointwise.visit_mut(&join(prefix, "pointwise"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.expand_post.visit_mut(&join(prefix, "expand_norm"), f);
    }
}

/// Channel path `c → C_m → C_m → C_m → C_d`; only the depthwise stage strides.
pub fn lrds_forward(x: &Tensor, p: &LRDSParams, mode: NormMode) -> Result<Tensor> {
    let k = p.kernel();
    let y = conv2d(x, &p.reduce)?;
    let y = p.reduce_post.apply(&y, mode)?;
    let y = depthwise_conv2d(&y, &p.depthwise, p.stride, k / 2)?;
    let y = conv2d(&y, &p.pointwise)?;
    let y = conv2d(&y, &p.expand)?;
    p.expand_post.apply(&y, mode)
}

/// Dense linear layer factored through `m` middle units.
#[derive(Debug, Clone)]
pub struct LRLinearParams {
    /// `[m, d_in]`
    pub reduce: Tensor,
    /// `[d_out, m]`
    pub expand: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
}

impl LRLinearParams {
    pub const DEFAULT_MID: usize = 4;

    pub fn new(d_in: usize, d_out: usize, m: usize, init: &mut Init) -> Self {
        Self {
            reduce: init.uniform(&[m, d_in], 1.0 / (d_in.max(1) as f64).sqrt()).param(),
            expand: init.uniform(&[d_out, m], 1.0 / (m.max(1) as f64).sqrt()).param(),
            bias: Tensor::zeros(&[d_out]).param(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.reduce.dim(1)
    }

    pub fn d_out(&self) -> usize {
        self.expand.dim(0)
    }

    pub fn mid(&self) -> usize {
        self.reduce.dim(0)
    }

    /// Zero the expand weights (and bias), making the layer output zero.
    pub fn zero_expand(&mut self) {
        self.expand = Tensor::zeros(self.expand.shape()).param();
        self.bias = Tensor::zeros(self.bias.shape()).param();
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        lr_linear(x, self)
    }
}

impl Module for LRLinearParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "reduce"), &self.reduce, ParamKind::Trainable);
        f(&join(prefix, "expand"), &self.expand, ParamKind::Trainable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "reduce"), &mut self.reduce, ParamKind::Trainable);
        f(&join(prefix, "expand"), &mut self.expand, ParamKind::Trainable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Trainable);
    }
}

pub fn lr_linear(x: &Tensor, p: &LRLinearParams) -> Result<Tensor> {
    let mid = linear(x, &p.reduce, None)?;
    linear(&mid, &p.expand, Some(&p.bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{batch_norm, pointwise_conv2d};

    #[test]
    fn identity_block_passes_input_through() {
        let mut init = Init::new(1);
        let x = init.uniform(&[2, 5, 6, 6], 1.0);
        let p = LRDSParams::identity(5, 3);
        let y = lrds_forward(&x, &p, NormMode::Train).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_expand_gives_zero_output() {
        let mut init = Init::new(2);
        for flags in [LrdsFlags::STANDARD, LrdsFlags::LINEAR] {
            let mut p = LRDSParams::new(8, 4, 12, 3, 2, flags, &mut init).unwrap();
            p.expand.weight = Tensor::zeros(p.expand.weight.shape()).param();
            let y = lrds_forward(&init.uniform(&[2, 8, 8, 8], 3.0), &p, NormMode::Train).unwrap();
            assert_eq!(y.shape(), &[2, 12, 4, 4]);
            assert!(y.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn equals_manual_composition() {
        let mut init = Init::new(3);
        let p = LRDSParams::new(6, 4, 10, 3, 2, LrdsFlags::STANDARD, &mut init).unwrap();
        let x = init.uniform(&[2, 6, 7, 7], 1.0);
        let y = lrds_forward(&x, &p, NormMode::Train).unwrap();

        let bn1 = p.reduce_post.norm.clone().unwrap();
        let bn2 = p.expand_post.norm.clone().unwrap();
        let z = pointwise_conv2d(&x, &p.reduce.weight).unwrap();
        let z = batch_norm(&z, &bn1, NormMode::Train).unwrap().relu();
        let z = depthwise_conv2d(&z, &p.depthwise, 2, 1).unwrap();
        let z = pointwise_conv2d(&z, &p.pointwise.weight).unwrap();
        let z = pointwise_conv2d(&z, &p.expand.weight).unwrap();
        let z = batch_norm(&z, &bn2, NormMode::Train).unwrap().relu();
        assert_eq!(y.shape(), &[2, 10, 4, 4]);
        assert_eq!(y.data(), z.data());
    }

    #[test]
    fn default_mid_is_a_bottleneck_for_wide_layers() {
        assert_eq!(default_mid(64, 256), 16);
        assert_eq!(default_mid(256, 64), 16);
        assert_eq!(default_mid(3, 16), 4);
    }

    #[test]
    fn lr_linear_identity_truncation() {
        let (d, m) = (8, 4);
        let mut reduce = vec![0.0; m * d];
        let mut expand = vec![0.0; d * m];
        for i in 0..m {
            reduce[i * d + i] = 1.0;
            expand[i * m + i] = 1.0;
        }
        let p = LRLinearParams {
            reduce: Tensor::new(reduce, &[m, d]).unwrap(),
            expand: Tensor::new(expand, &[d, m]).unwrap(),
            bias: Tensor::zeros(&[d]),
        };
        let x = Tensor::new((1..=8).map(f64::from).collect(), &[1, 8]).unwrap();
        let y = lr_linear(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lr_linear_zero_input_gives_bias() {
        let mut init = Init::new(4);
        let mut p = LRLinearParams::new(6, 3, 4, &mut init);
        p.bias = Tensor::new(vec![0.5, -1.0, 2.0], &[3]).unwrap().param();
        let y = lr_linear(&Tensor::zeros(&[2, 6]), &p).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn lr_linear_param_count() {
        let mut init = Init::new(5);
        let p = LRLinearParams::new(256, 256, 4, &mut init);
        assert_eq!(p.num_params(), 2304);
        let dense = 256 * 256 + 256;
        assert_eq!(dense, 65792);
        assert!((1.0 - 2304.0 / dense as f64 - 0.965).abs() < 1e-3);
    }

    #[test]
    fn lr_linear_composite_rank_at_most_mid() {
        let mut init = Init::new(6);
        let p = LRLinearParams::new(7, 6, 2, &mut init);
        let r = nalgebra::DMatrix::from_row_slice(2, 7, p.reduce.data());
        let e = nalgebra::DMatrix::from_row_slice(6, 2, p.expand.data());
        let sv = (e * r).singular_values();
        let top = sv.max();
        assert_eq!(sv.iter().filter(|s| **s > 1e-10 * top).count(), 2);
    }
}
