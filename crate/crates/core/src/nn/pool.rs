use super::conv::depthwise_general;
use super::{conv2d, join, nchw, Conv2dParams, Init, Module, ParamKind};
use crate::error::Result;
use crate::tensor::Tensor;

/// Strip-pooling gate parameters for a `C`-channel map.
#[derive(Debug, Clone)]
pub struct StripPoolParams {
    /// `[C, 1, 3, 1]`, applied along H to the row means.
    pub row_filter: Tensor,
    /// `[C, 1, 1, 3]`, applied along W to the column means.
    pub col_filter: Tensor,
    /// 1×1 `C → C` fuse with bias.
    pub fuse: Conv2dParams,
}

impl StripPoolParams {
    pub fn new(channels: usize, init: &mut Init) -> Self {
        Self {
            row_filter: init.kaiming(&[channels, 1, 3, 1], 3),
            col_filter: init.kaiming(&[channels, 1, 1, 3], 3),
            fuse: Conv2dParams::new(
                init.kaiming(&[channels, channels, 1, 1], channels),
                Some(Tensor::zeros(&[channels]).param()),
                1,
                0,
            )
            .expect("valid 1x1 conv"),
        }
    }

    /// Center-tap 1-D filters and an identity fuse.
    pub fn identity(channels: usize) -> Self {
        let mut center = vec![0.0; channels * 3];
        for c in 0..channels {
            center[c * 3 + 1] = 1.0;
        }
        let mut eye = vec![0.0; channels * channels];
        for c in 0..channels {
            eye[c * channels + c] = 1.0;
        }
        Self {
            row_filter: Tensor::new(center.clone(), &[channels, 1, 3, 1]).expect("shape").param(),
            col_filter: Tensor::new(center, &[channels, 1, 1, 3]).expect("shape").param(),
            fuse: Conv2dParams::new(
                Tensor::new(eye, &[channels, channels, 1, 1]).expect("shape").param(),
                Some(Tensor::zeros(&[channels]).param()),
                1,
                0,
            )
            .expect("valid 1x1 conv"),
        }
    }

    pub fn channels(&self) -> usize {
        self.row_filter.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        strip_pool(x, self)
    }
}

impl Module for StripPoolParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "row_filter"), &self.row_filter, ParamKind::Trainable);
        f(&join(prefix, "col_filter"), &self.col_filter, ParamKind::Trainable);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "row_filter"), &mut self.row_filter, ParamKind::Trainable);
        f(&join(prefix, "col_filter"), &mut self.col_filter, ParamKind::Trainable);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Row-mean `[N,C,H,1]` and column-mean `[N,C,1,W]` of an NCHW map.
pub fn strip_means(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = nchw("strip_pool", x)?;
    let rows = x.sum_axis(3)?.scale(1.0 / w as f64);
    let cols = x.sum_axis(2)?.scale(1.0 / h as f64);
    Ok((rows, cols))
}

/// Gate `x` by `sigmoid(fuse(row_branch + col_branch))`, where each branch
/// is a strip mean filtered along its remaining axis and broadcast back.
pub fn strip_pool(x: &Tensor, p: &StripPoolParams) -> Result<Tensor> {
    let mixed = strip_context(x, &p.row_filter, &p.col_filter)?;
    x.mul(&conv2d(&mixed, &p.fuse)?.sigmoid())
}

/// Filtered row and column strip means, broadcast back and summed: the
/// input of the strip-pooling fuse.
pub fn strip_context(x: &Tensor, row_filter: &Tensor, col_filter: &Tensor) -> Result<Tensor> {
    let (rows, cols) = strip_means(x)?;
    let rows = depthwise_general(&rows, row_filter, 1, 1, 0)?;
    let cols = depthwise_general(&cols, col_filter, 1, 0, 1)?;
    rows.expand(x.shape())?.add(&cols.expand(x.shape())?)
}
