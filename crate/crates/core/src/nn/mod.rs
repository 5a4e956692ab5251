//! Neural-network primitives with forward and backward passes.

mod conv;
mod init;
mod linear;
mod norm;
mod pool;
pub(crate) mod sample;

pub use conv::{conv2d, conv2d_general, depthwise_conv2d, pointwise_conv2d, Conv2dParams};
pub use init::Init;
pub use linear::{add_channel_bias, linear, Linear};
pub use norm::{batch_norm, layer_norm, BatchNormParams, LayerNormParams, NormMode};
pub use pool::{strip_context, strip_means, strip_pool, StripPoolParams};
pub use sample::{bilinear_sample, upsample2x};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a visited tensor is optimized or only carried along (running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

/// Anything that owns named tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k == ParamKind::Trainable {
                n += t.numel()
            }
        });
        n
    }

    /// Trainable tensors with their paths, in visiting order.
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, k| {
            if k == ParamKind::Trainable {
                out.push((name.to_string(), t.clone()))
            }
        });
        out
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Elementwise activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
    }
}

/// Check a tensor is NCHW and return its dims.
pub(crate) fn nchw(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Contract(format!("{op}: expected an NCHW tensor, got {:?}", x.shape()))),
    }
}
