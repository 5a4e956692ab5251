//! Multi-scale feature extractor: a bottleneck backbone built from
//! interchangeable convolution units with strip pooling in every block, and
//! the projection of its stage maps onto a five-level pyramid of equal width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrds::{ConvKind, ConvSpec, ConvUnit};
use crate::nn::{join, strip_context, Init, Module, NormMode, ParamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stem_channels: usize,
    pub unified_channels: usize,
    /// `[H, W]` of the network input.
    pub input_size: [usize; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            stage_blocks: [2, 2, 2, 2],
            stage_channels: [16, 32, 64, 128],
            stem_channels: 16,
            unified_channels: 64,
            input_size: [64, 64],
        }
    }

    /// ResNet50-shaped depths and widths, used for cost modelling.
    pub fn full_scale() -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [256, 512, 1024, 2048],
            stem_channels: 64,
            unified_channels: 256,
            input_size: [512, 512],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config("every backbone stage needs at least one block".into()));
        }
        if self.stem_channels == 0 || self.unified_channels == 0 || self.stage_channels[0] == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage widths must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        let [h, w] = self.input_size;
        check_input(h, w)
    }

    /// Bottleneck width of blocks in stage `s`.
    pub fn block_mid(&self, s: usize) -> usize {
        (self.stage_channels[s] / 4).max(1)
    }
}

/// The deepest encoder level sits at stride 64 and is upsampled back by
/// exact doublings, so both sides must divide by 64.
pub(crate) fn check_input(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
        return Err(Error::Config(format!("input size {h}x{w} must be a positive multiple of 64")));
    }
    Ok(())
}

/// Strip-pooling gate whose 1×1 fuse is realized like the block's other
/// convolutions: `x ⊙ sigmoid(fuse(context(x)))`.
#[derive(Debug, Clone)]
pub struct StripGate {
    /// `[C, 1, 3, 1]`
    pub row_filter: Tensor,
    /// `[C, 1, 1, 3]`
    pub col_filter: Tensor,
    pub fuse: ConvUnit,
}

impl StripGate {
    pub fn new(kind: ConvKind, channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            row_filter: init.kaiming(&[channels, 1, 3, 1], 3),
            col_filter: init.kaiming(&[channels, 1, 1, 3], 3),
            fuse: ConvUnit::new(kind, ConvSpec::new(channels, channels, 1, 1).linear(), init)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mixed = strip_context(x, &self.row_filter, &self.col_filter)?;
        x.mul(&self.fuse.forward(&mixed, mode)?.sigmoid())
    }
}

impl Module for StripGate {
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

/// Residual bottleneck: 1×1 reduce, 3×3 (strided) with strip pooling, 1×1
/// expand, plus an identity or projected shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
    pub strip: StripGate,
    pub conv3: ConvUnit,
    pub shortcut: Option<ConvUnit>,
}

impl Bottleneck {
    pub fn new(kind: ConvKind, c_in: usize, mid: usize, c_out: usize, stride: usize, init: &mut Init) -> Result<Self> {
        let shortcut = (stride != 1 || c_in != c_out)
            .then(|| ConvUnit::new(kind, ConvSpec::new(c_in, c_out, 1, stride).no_act(), init))
            .transpose()?;
        let conv1 = ConvUnit::new(kind, ConvSpec::new(c_in, mid, 1, 1), init)?;
        let conv2 = ConvUnit::new(kind, ConvSpec::new(mid, mid, 3, stride), init)?;
        let strip = StripGate::new(kind, mid, init)?;
        // The residual branch starts at zero, so each block begins as its shortcut.
        let mut conv3 = ConvUnit::new(kind, ConvSpec::new(mid, c_out, 1, 1).no_act(), init)?;
        conv3.zero_final_norm();
        Ok(Self {
            conv1,
            conv2,
            strip,
            conv3,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let y = self.strip.forward(&y, mode)?;
        let y = self.conv3.forward(&y, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(y.add(&skip)?.relu())
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.strip.visit(&join(prefix, "strip"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.shortcut.visit(&join(prefix, "shortcut"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.strip.visit_mut(&join(prefix, "strip"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.shortcut.visit_mut(&join(prefix, "shortcut"), f);
    }
}

/// Stage maps at strides 4, 8, 16, 32 plus the stride-2 stem output.
#[derive(Debug, Clone)]
pub struct MfeOutput {
    pub stem: Tensor,
    pub stages: [Tensor; 4],
}

#[derive(Debug, Clone)]
pub struct Mfe {
    /// Two stride-2 units: `3 → stem → stem`.
    pub stem: Vec<ConvUnit>,
    pub stages: Vec<Vec<Bottleneck>>,
}

impl Mfe {
    pub fn new(cfg: &BackboneConfig, kind: ConvKind, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let stem = vec![
            ConvUnit::new(kind, ConvSpec::new(3, cfg.stem_channels, 3, 2), init)?,
            ConvUnit::new(kind, ConvSpec::new(cfg.stem_channels, cfg.stem_channels, 3, 2), init)?,
        ];
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c_out = cfg.stage_channels[s];
            let mut blocks = Vec::with_capacity(cfg.stage_blocks[s]);
            for b in 0..cfg.stage_blocks[s] {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(kind, c_in, cfg.block_mid(s), c_out, stride, init)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    pub fn forward(&self, image: &Tensor, mode: NormMode) -> Result<MfeOutput> {
        match *image.shape() {
            [_, 3, h, w] => check_input(h, w)?,
            _ => return Err(Error::Contract(format!("mfe expects [N,3,H,W], got {:?}", image.shape()))),
        }
        let stem = self.stem[0].forward(image, mode)?;
        let mut x = self.stem[1].forward(&stem, mode)?;
        let mut maps = Vec::with_capacity(4);
        for blocks in &self.stages {
            for b in blocks {
                x = b.forward(&x, mode)?;
            }
            maps.push(x.clone());
        }
        let stages: [Tensor; 4] = maps.try_into().expect("four stages");
        Ok(MfeOutput { stem, stages })
    }
}

impl Module for Mfe {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.visit(&join(prefix, "stages"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stages.visit_mut(&join(prefix, "stages"), f);
    }
}

/// Equal-width maps at strides 4, 8, 16, 32, 64.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// 1×1 projections of the four stage maps to the unified width, and a
/// stride-2 3×3 unit on the deepest stage map for the fifth level.
#[derive(Debug, Clone)]
pub struct FeatureEnhance {
    pub proj: Vec<ConvUnit>,
    pub extra: ConvUnit,
}

impl FeatureEnhance {
    pub fn new(cfg: &BackboneConfig, kind: ConvKind, init: &mut Init) -> Result<Self> {
        let u = cfg.unified_channels;
        let proj = cfg
            .stage_channels
            .iter()
            .map(|&c| ConvUnit::new(kind, ConvSpec::new(c, u, 1, 1).linear(), init))
            .collect::<Result<Vec<_>>>()?;
        let extra = ConvUnit::new(kind, ConvSpec::new(cfg.stage_channels[3], u, 3, 2).linear(), init)?;
        Ok(Self { proj, extra })
    }

    pub fn forward(&self, stages: &[Tensor; 4], mode: NormMode) -> Result<FeaturePyramid> {
        let mut levels = Vec::with_capacity(5);
        for (p, x) in self.proj.iter().zip(stages) {
            levels.push(p.forward(x, mode)?);
        }
        levels.push(self.extra.forward(&stages[3], mode)?);
        Ok(FeaturePyramid { levels })
    }
}

impl Module for FeatureEnhance {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.proj.visit(&join(prefix, "proj"), f);
        self.extra.visit(&join(prefix, "extra"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.extra.visit_mut(&join(prefix, "extra"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lrds::LRDSParams;

    #[test]
    fn toy_stage_shapes() {
        let cfg = BackboneConfig::toy();
        let mut init = Init::new(1);
        let mfe = Mfe::new(&cfg, ConvKind::Lrds, &mut init).unwrap();
        let x = init.uniform(&[1, 3, 64, 64], 1.0);
        let out = mfe.forward(&x, NormMode::Train).unwrap();
        let shapes: Vec<&[usize]> = out.stages.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[1, 16, 16, 16][..], &[1, 32, 8, 8], &[1, 64, 4, 4], &[1, 128, 2, 2]]);
        assert_eq!(out.stem.shape(), &[1, 16, 32, 32]);

        let fe = FeatureEnhance::new(&cfg, ConvKind::Lrds, &mut init).unwrap();
        let pyr = fe.forward(&out.stages, NormMode::Train).unwrap();
        let sides: Vec<usize> = pyr.levels.iter().map(|l| l.dim(2)).collect();
        assert_eq!(sides, vec![16, 8, 4, 2, 1]);
        assert!(pyr.levels.iter().all(|l| l.dim(1) == cfg.unified_channels));
    }

    #[test]
    fn zero_input_gives_zero_maps() {
        let cfg = BackboneConfig::toy();
        let mfe = Mfe::new(&cfg, ConvKind::Lrds, &mut Init::new(2)).unwrap();
        let out = mfe.forward(&Tensor::zeros(&[1, 3, 64, 64]), NormMode::Train).unwrap();
        assert!(out.stages.iter().all(|m| m.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = BackboneConfig::toy();
        let mfe = Mfe::new(&cfg, ConvKind::Lrds, &mut Init::new(3)).unwrap();
        assert!(matches!(mfe.forward(&Tensor::zeros(&[1, 3, 48, 64]), NormMode::Train), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.input_size = [60, 64];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn variants_keep_shapes() {
        let cfg = BackboneConfig {
            stage_blocks: [1, 1, 1, 1],
            ..BackboneConfig::toy()
        };
        let mut init = Init::new(4);
        let x = init.uniform(&[1, 3, 64, 64], 1.0);
        for kind in ConvKind::ALL {
            let mfe = Mfe::new(&cfg, kind, &mut init).unwrap();
            let out = mfe.forward(&x, NormMode::Train).unwrap();
            assert_eq!(out.stages[3].shape(), &[1, 128, 2, 2]);
        }
    }

    #[test]
    fn identity_projection_passes_stage_maps() {
        let cfg = BackboneConfig {
            stage_channels: [8, 16, 24, 32],
            unified_channels: 8,
            ..BackboneConfig::toy()
        };
        let mut init = Init::new(5);
        let mut fe = FeatureEnhance::new(&cfg, ConvKind::Lrds, &mut init).unwrap();
        fe.proj[0] = ConvUnit::Lrds(LRDSParams::identity(8, 1));
        let stages = [
            init.uniform(&[1, 8, 8, 8], 1.0),
            init.uniform(&[1, 16, 4, 4], 1.0),
            init.uniform(&[1, 24, 2, 2], 1.0),
            init.uniform(&[1, 32, 1, 1], 1.0),
        ];
        let pyr = fe.forward(&stages, NormMode::Running).unwrap();
        assert_eq!(pyr.levels[0].data(), stages[0].data());
        for s in 1..4 {
            let alone = fe.proj[s].forward(&stages[s], NormMode::Running).unwrap();
            assert_eq!(pyr.levels[s].data(), alone.data());
        }
    }
}
