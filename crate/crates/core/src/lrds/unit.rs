use serde::{Deserialize, Serialize};

use super::{default_mid, LRDSParams, LrdsFlags};
use crate::error::{Error, Result};
use crate::nn::{batch_norm, conv2d, depthwise_conv2d, join, BatchNormParams, Conv2dParams, Init, Module, NormMode, ParamKind};
use crate::tensor::Tensor;

/// Optional batch norm followed by optional ReLU.
#[derive(Debug, Clone)]
pub struct Post {
    pub norm: Option<BatchNormParams>,
    pub act: bool,
}

impl Post {
    pub fn new(channels: usize, norm: bool, act: bool) -> Self {
        Self {
            norm: norm.then(|| BatchNormParams::new(channels)),
            act,
        }
    }

    pub fn apply(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let y = match &self.norm {
            Some(bn) => batch_norm(x, bn, mode)?,
            None => x.clone(),
        };
        Ok(if self.act { y.relu() } else { y })
    }
}

impl Module for Post {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.norm.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.norm.visit_mut(prefix, f)
    }
}

/// How a `k×k` convolution is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// Plain dense convolution.
    #[serde(alias = "dense")]
    Original,
    /// Depthwise `k×k` followed by pointwise.
    Ds,
    /// `k×k` into `C_m` filters, then a 1×1 recombination.
    Lr,
    /// Reduce, depthwise, pointwise, expand.
    Lrds,
}

impl ConvKind {
    pub const ALL: [ConvKind; 4] = [ConvKind::Original, ConvKind::Ds, ConvKind::Lr, ConvKind::Lrds];

    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Original => "original",
            ConvKind::Ds => "ds",
            ConvKind::Lr => "lr",
            ConvKind::Lrds => "lrds",
        }
    }
}

impl std::str::FromStr for ConvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" | "dense" => Ok(ConvKind::Original),
            "ds" => Ok(ConvKind::Ds),
            "lr" => Ok(ConvKind::Lr),
            "lrds" => Ok(ConvKind::Lrds),
            other => Err(Error::Config(format!("unknown conv variant `{other}`"))),
        }
    }
}

/// Geometry and post-processing of one logical convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    /// Batch norm after the layer (and after the inner reduce, for LRDS).
    pub norm: bool,
    /// ReLU after the layer.
    pub act: bool,
    /// Bottleneck width; `None` picks [`default_mid`].
    pub mid: Option<usize>,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride,
            norm: true,
            act: true,
            mid: None,
        }
    }

    pub fn no_act(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn linear(mut self) -> Self {
        self.norm = false;
        self.act = false;
        self
    }

    pub fn mid_width(&self) -> usize {
        self.mid.unwrap_or_else(|| default_mid(self.c_in, self.c_out))
    }

    pub fn padding(&self) -> usize {
        self.k / 2
    }
}

/// A convolution in one of the four realizations of [`ConvKind`], all with
/// the same input/output geometry.
#[derive(Debug, Clone)]
pub enum ConvUnit {
    Original {
        conv: Conv2dParams,
        post: Post,
    },
    Ds {
        /// `[c, 1, k, k]`
        depthwise: Tensor,
        stride: usize,
        pointwise: Conv2dParams,
        post: Post,
    },
    Lr {
        spatial: Conv2dParams,
        combine: Conv2dParams,
        post: Post,
    },
    Lrds(LRDSParams),
}

impl ConvUnit {
    pub fn new(kind: ConvKind, spec: ConvSpec, init: &mut Init) -> Result<Self> {
        let ConvSpec {
            c_in, c_out, k, stride, ..
        } = spec;
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel must be odd, got {k}")));
        }
        let bias = || (!spec.norm).then(|| Tensor::zeros(&[c_out]).param());
        let post = Post::new(c_out, spec.norm, spec.act);
        Ok(match kind {
            ConvKind::Original => ConvUnit::Original {
                conv: Conv2dParams::new(init.kaiming(&[c_out, c_in, k, k], c_in * k * k), bias(), stride, spec.padding())?,
                post,
            },
            ConvKind::Ds => ConvUnit::Ds {
                depthwise: init.lecun(&[c_in, 1, k, k], k * k),
                stride,
                pointwise: Conv2dParams::new(init.kaiming(&[c_out, c_in, 1, 1], c_in), bias(), 1, 0)?,
                post,
            },
            ConvKind::Lr => {
                let mid = spec.mid_width();
                ConvUnit::Lr {
                    spatial: Conv2dParams::new(init.lecun(&[mid, c_in, k, k], c_in * k * k), None, stride, spec.padding())?,
                    combine: Conv2dParams::new(init.kaiming(&[c_out, mid, 1, 1], mid), bias(), 1, 0)?,
                    post,
                }
            }
            ConvKind::Lrds => {
                let flags = LrdsFlags {
                    reduce_norm: spec.norm,
                    reduce_act: spec.norm,
                    expand_norm: spec.norm,
                    expand_act: spec.act,
                };
                ConvUnit::Lrds(LRDSParams::new(c_in, spec.mid_width(), c_out, k, stride, flags, init)?)
            }
        })
    }

    /// Zero the scale of the final batch norm, so the unit starts out
    /// emitting its norm's shift only. No-op without a final norm.
    pub fn zero_final_norm(&mut self) {
        let post = match self {
            ConvUnit::Original { post, .. } | ConvUnit::Ds { post, .. } | ConvUnit::Lr { post, .. } => post,
            ConvUnit::Lrds(p) => &mut p.expand_post,
        };
        if let Some(bn) = &mut post.norm {
            bn.gamma = Tensor::zeros(bn.gamma.shape()).param();
        }
    }

    pub fn kind(&self) -> ConvKind {
        match self {
            ConvUnit::Original { .. } => ConvKind::Original,
            ConvUnit::Ds { .. } => ConvKind::Ds,
            ConvUnit::Lr { .. } => ConvKind::Lr,
            ConvUnit::Lrds(_) => ConvKind::Lrds,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvUnit::Original { conv, .. } => conv.out_channels(),
            ConvUnit::Ds { pointwise, .. } => pointwise.out_channels(),
            ConvUnit::Lr { combine, .. } => combine.out_channels(),
            ConvUnit::Lrds(p) => p.out_channels(),
        }
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        match self {
            ConvUnit::Original { conv, post } => post.apply(&conv2d(x, conv)?, mode),
            ConvUnit::Ds {
                depthwise,
                stride,
                pointwise,
                post,
            } => {
                let y = depthwise_conv2d(x, depthwise, *stride, depthwise.dim(2) / 2)?;
                post.apply(&conv2d(&y, pointwise)?, mode)
            }
            ConvUnit::Lr { spatial, combine, post } => {
                let y = conv2d(x, spatial)?;
                post.apply(&conv2d(&y, combine)?, mode)
            }
            ConvUnit::Lrds(p) => p.forward(x, mode),
        }
    }
}

impl Module for ConvUnit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            ConvUnit::Original { conv, post } => {
                conv.visit(&join(prefix, "conv"), f);
                post.visit(&join(prefix, "norm"), f);
            }
            ConvUnit::Ds {
                depthwise,
                pointwise,
                post,
                ..
            } => {
                f(&join(prefix, "depthwise"), depthwise, ParamKind::Trainable);
                pointwise.visit(&join(prefix, "pointwise"), f);
                post.visit(&join(prefix, "norm"), f);
            }
            ConvUnit::Lr { spatial, combine, post } => {
                spatial.visit(&join(prefix, "spatial"), f);
                combine.visit(&join(prefix, "combine"), f);
                post.visit(&join(prefix, "norm"), f);
            }
            ConvUnit::Lrds(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            ConvUnit::Original { conv, post } => {
                conv.visit_mut(&join(prefix, "conv"), f);
                post.visit_mut(&join(prefix, "norm"), f);
            }
            ConvUnit::Ds {
                depthwise,
                pointwise,
                post,
                ..
            } => {
                f(&join(prefix, "depthwise"), depthwise, ParamKind::Trainable);
                pointwise.visit_mut(&join(prefix, "pointwise"), f);
                post.visit_mut(&join(prefix, "norm"), f);
            }
            ConvUnit::Lr { spatial, combine, post } => {
                spatial.visit_mut(&join(prefix, "spatial"), f);
                combine.visit_mut(&join(prefix, "combine"), f);
                post.visit_mut(&join(prefix, "norm"), f);
            }
            ConvUnit::Lrds(p) => p.visit_mut(prefix, f),
        }
    }
}
