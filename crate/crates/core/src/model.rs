//! The assembled segmentation network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lde::{flatten_pyramid, lde_encode, EncoderConfig, Lde};
use crate::lrds::ConvKind;
use crate::mfe::{BackboneConfig, FeatureEnhance, Mfe};
use crate::nn::{join, Init, Module, NormMode, ParamKind};
use crate::scfm::{scfm_forward, stage_configs, Scfm, ScfmOutput};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv: ConvKind,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    /// Normalization statistics used outside training.
    pub eval_norm: NormMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv: ConvKind::Lrds,
            backbone: BackboneConfig::toy(),
            encoder: EncoderConfig::default(),
            eval_norm: NormMode::Batch,
        }
    }
}

/// Number of pyramid levels fed to the encoder.
pub const PYRAMID_LEVELS: usize = 5;

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self {
            backbone: BackboneConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn with_conv(&self, conv: ConvKind) -> Self {
        Self { conv, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let e = &self.encoder;
        let d = self.backbone.unified_channels;
        if e.heads == 0 || d % e.heads != 0 {
            return Err(Error::Config(format!("unified width {d} not divisible by {} heads", e.heads)));
        }
        if e.points == 0 || e.lr_mid == 0 || e.ffn_ratio == 0 {
            return Err(Error::Config("encoder points, lr_mid and ffn_ratio must be positive".into()));
        }
        stage_configs(d)?;
        if self.eval_norm == NormMode::Train {
            return Err(Error::Config("eval_norm must be `running` or `batch`".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub mfe: Mfe,
    pub enhance: FeatureEnhance,
    pub lde: Lde,
    pub scfm: Scfm,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let b = &config.backbone;
        let k = config.conv;
        Ok(Self {
            config: config.clone(),
            mfe: Mfe::new(b, k, &mut init)?,
            enhance: FeatureEnhance::new(b, k, &mut init)?,
            lde: Lde::new(b.unified_channels, PYRAMID_LEVELS, &config.encoder, &mut init)?,
            scfm: Scfm::new(k, b.unified_channels, b.stage_channels, b.stem_channels, &mut init)?,
        })
    }

    pub fn forward_full(&self, image: &Tensor, mode: NormMode) -> Result<ScfmOutput> {
        let (h, w) = match *image.shape() {
            [_, 3, h, w] => (h, w),
            _ => return Err(Error::Contract(format!("model expects [N,3,H,W], got {:?}", image.shape()))),
        };
        let m = self.mfe.forward(image, mode)?;
        let pyr = self.enhance.forward(&m.stages, mode)?;
        let seq = flatten_pyramid(&pyr.levels)?;
        let enc = lde_encode(&seq, self.lde.layers.len(), &self.lde)?;
        scfm_forward(&enc, &m, &self.scfm, (h, w), mode)
    }

    /// Logits `[N, 1, H, W]`.
    pub fn forward(&self, image: &Tensor, mode: NormMode) -> Result<Tensor> {
        Ok(self.forward_full(image, mode)?.logits)
    }

    /// Logits for inference, with the configured normalization statistics.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        self.forward(image, self.config.eval_norm)
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.mfe.visit(&join(prefix, "mfe"), f);
        self.enhance.visit(&join(prefix, "enhance"), f);
        self.lde.visit(&join(prefix, "lde"), f);
        self.scfm.visit(&join(prefix, "scfm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.mfe.visit_mut(&join(prefix, "mfe"), f);
        self.enhance.visit_mut(&join(prefix, "enhance"), f);
        self.lde.visit_mut(&join(prefix, "lde"), f);
        self.scfm.visit_mut(&join(prefix, "scfm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward;

    #[test]
    fn toy_stage_and_logit_shapes() {
        let model = Model::new(&ModelConfig::default(), 3).unwrap();
        let x = Init::new(9).uniform(&[1, 3, 64, 64], 1.0);
        let out = model.forward_full(&x, NormMode::Train).unwrap();
        let shapes: Vec<&[usize]> = out.stages.iter().map(|t| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[1, 64, 8, 8][..], &[1, 32, 16, 16], &[1, 16, 32, 32], &[1, 8, 64, 64]]
        );
        assert_eq!(out.logits.shape(), &[1, 1, 64, 64]);
        assert!(out.logits.all_finite());
    }

    #[test]
    fn every_trainable_parameter_gets_a_gradient() {
        let model = Model::new(&ModelConfig::default(), 4).unwrap();
        let x = Init::new(1).uniform(&[2, 3, 64, 64], 1.0);
        let loss = model.forward(&x, NormMode::Train).unwrap().square().mean();
        let g = backward(&loss).unwrap();
        let mut missing = Vec::new();
        model.visit("", &mut |name, t, kind| {
            if kind == ParamKind::Trainable && !g.contains(t) {
                missing.push(name.to_string());
            }
        });
        assert!(missing.is_empty(), "no gradient for {missing:?}");
    }

    #[test]
    fn variants_build_and_run() {
        let x = Init::new(2).uniform(&[1, 3, 64, 64], 1.0);
        for kind in ConvKind::ALL {
            let model = Model::new(&ModelConfig::default().with_conv(kind), 5).unwrap();
            assert_eq!(model.forward(&x, NormMode::Running).unwrap().shape(), &[1, 1, 64, 64]);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.encoder.heads = 3;
        assert!(matches!(Model::new(&c, 0), Err(Error::Config(_))));
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        assert!(model.forward(&Tensor::zeros(&[1, 3, 48, 64]), NormMode::Running).is_err());
    }
}
