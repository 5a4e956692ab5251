//! Staircase cascaded fusion: four stages, deepest first, that merge the
//! encoder's token maps with backbone maps through a concatenation branch
//! and pixel-attention fusion, select among fused maps per pixel, and
//! double the resolution while halving the width.

use crate::error::{Error, Result};
use crate::lde::{unflatten, TokenSequence};
use crate::lrds::{ConvKind, ConvSpec, ConvUnit};
use crate::mfe::MfeOutput;
use crate::nn::{conv2d, join, nchw, upsample2x, Conv2dParams, Init, Module, NormMode, ParamKind};
use crate::tensor::Tensor;

/// Gate projections of a pixel-attention fusion: a pointwise convolution
/// with batch norm on each input, realized like every other convolution.
#[derive(Debug, Clone)]
pub struct PAFParams {
    /// 1×1 `C → G` applied to the first input.
    pub f_c: ConvUnit,
    /// 1×1 `C → G` applied to the second input.
    pub f_d: ConvUnit,
}

impl PAFParams {
    pub fn new(kind: ConvKind, channels: usize, init: &mut Init) -> Result<Self> {
        let spec = ConvSpec::new(channels, (channels / 2).max(1), 1, 1).no_act();
        Ok(Self {
            f_c: ConvUnit::new(kind, spec, init)?,
            f_d: ConvUnit::new(kind, spec, init)?,
        })
    }

    pub fn gate_channels(&self) -> usize {
        self.f_c.out_channels()
    }
}

impl Module for PAFParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.f_c.visit(&join(prefix, "f_c"), f);
        self.f_d.visit(&join(prefix, "f_d"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.f_c.visit_mut(&join(prefix, "f_c"), f);
        self.f_d.visit_mut(&join(prefix, "f_d"), f);
    }
}

/// Per-pixel gate `σ = sigmoid(Σ_g f_c(v_c) · f_d(v_d))`, `[N,1,H,W]`.
pub fn paf_gate(v_c: &Tensor, v_d: &Tensor, p: &PAFParams, mode: NormMode) -> Result<Tensor> {
    if v_c.shape() != v_d.shape() {
        return Err(Error::shape("paf_fuse", v_c.shape(), v_d.shape()));
    }
    let a = p.f_c.forward(v_c, mode)?;
    let b = p.f_d.forward(v_d, mode)?;
    Ok(a.mul(&b)?.sum_axis(1)?.sigmoid())
}

/// `σ·v_c + (1 − σ)·v_d` with σ shared across channels.
pub fn paf_fuse(v_c: &Tensor, v_d: &Tensor, p: &PAFParams, mode: NormMode) -> Result<Tensor> {
    let sigma = paf_gate(v_c, v_d, p, mode)?.expand(v_c.shape())?;
    // v_d + σ·(v_c − v_d)
    v_d.add(&sigma.mul(&v_c.sub(v_d)?)?)
}

/// Per-pixel softmax selection over several maps followed by a refinement.
#[derive(Debug, Clone)]
pub struct SeFuParams {
    /// One 1×1 `C → 1` scorer per input.
    pub scorers: Vec<Conv2dParams>,
    pub refine: ConvUnit,
}

impl SeFuParams {
    pub fn new(kind: ConvKind, channels: usize, inputs: usize, init: &mut Init) -> Result<Self> {
        let scorers = (0..inputs)
            .map(|_| Conv2dParams::new(init.lecun(&[1, channels, 1, 1], channels), Some(Tensor::zeros(&[1]).param()), 1, 0))
            .collect::<Result<_>>()?;
        Ok(Self {
            scorers,
            refine: ConvUnit::new(kind, ConvSpec::new(channels, channels, 3, 1), init)?,
        })
    }
}

impl Module for SeFuParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.scorers.visit(&join(prefix, "scorers"), f);
        self.refine.visit(&join(prefix, "refine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.scorers.visit_mut(&join(prefix, "scorers"), f);
        self.refine.visit_mut(&join(prefix, "refine"), f);
    }
}

/// Selection weights `[N, K, H, W]`, summing to one over `K` at each pixel.
pub fn sefu_weights(inputs: &[Tensor], p: &SeFuParams) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Contract("sefu needs at least one input".into()));
    }
    if inputs.len() != p.scorers.len() {
        return Err(Error::Contract(format!("sefu built for {} inputs, got {}", p.scorers.len(), inputs.len())));
    }
    let mut scores = Vec::with_capacity(inputs.len());
    for (x, s) in inputs.iter().zip(&p.scorers) {
        if x.shape() != inputs[0].shape() {
            return Err(Error::shape("sefu", inputs[0].shape(), x.shape()));
        }
        scores.push(conv2d(x, s)?);
    }
    Tensor::concat(&scores, 1)?.softmax(1)
}

pub fn sefu(inputs: &[Tensor], p: &SeFuParams, mode: NormMode) -> Result<Tensor> {
    let w = sefu_weights(inputs, p)?;
    let shape = inputs[0].shape();
    let mut acc: Option<Tensor> = None;
    for (k, x) in inputs.iter().enumerate() {
        let term = w.narrow(1, k, 1)?.expand(shape)?.mul(x)?;
        acc = Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        });
    }
    p.refine.forward(&acc.expect("non-empty"), mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub uses_prior_stage: bool,
}

/// Stage widths for a pyramid of width `unified`: the first stage works at
/// twice that width and every stage halves it.
pub fn stage_configs(unified: usize) -> Result<[StageConfig; 4]> {
    if unified < 8 {
        return Err(Error::Config(format!("unified width {unified} too small for four halvings")));
    }
    let mut width = 2 * unified;
    Ok(std::array::from_fn(|s| {
        let c = StageConfig {
            in_channels: width,
            out_channels: width / 2,
            uses_prior_stage: s > 0,
        };
        width /= 2;
        c
    }))
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub cfg: StageConfig,
    pub align_lde: ConvUnit,
    pub align_mfe: ConvUnit,
    /// Concatenated inputs back to the stage width.
    pub concat_proj: ConvUnit,
    pub paf_lde: PAFParams,
    pub paf_prior: Option<PAFParams>,
    pub sefu: SeFuParams,
    /// Channel-halving unit after upsampling.
    pub out: ConvUnit,
}

impl Stage {
    pub fn new(kind: ConvKind, cfg: StageConfig, lde_channels: usize, mfe_channels: usize, init: &mut Init) -> Result<Self> {
        let w = cfg.in_channels;
        let n_in = if cfg.uses_prior_stage { 3 } else { 2 };
        Ok(Self {
            cfg,
            align_lde: ConvUnit::new(kind, ConvSpec::new(lde_channels, w, 1, 1), init)?,
            align_mfe: ConvUnit::new(kind, ConvSpec::new(mfe_channels, w, 1, 1), init)?,
            concat_proj: ConvUnit::new(kind, ConvSpec::new(n_in * w, w, 1, 1), init)?,
            paf_lde: PAFParams::new(kind, w, init)?,
            paf_prior: cfg.uses_prior_stage.then(|| PAFParams::new(kind, w, init)).transpose()?,
            sefu: SeFuParams::new(kind, w, n_in - 1, init)?,
            out: ConvUnit::new(kind, ConvSpec::new(w, cfg.out_channels, 3, 1), init)?,
        })
    }

    /// Fuse one stage. `prior` is the previous stage's output (required for
    /// stages that use it) at this stage's resolution and width.
    pub fn forward(&self, id: usize, lde: &Tensor, mfe: &Tensor, prior: Option<&Tensor>, mode: NormMode) -> Result<Tensor> {
        let misaligned = |what: &str, a: &[usize], b: &[usize]| {
            Error::Contract(format!("scfm stage {id}: {what} {a:?} does not align with {b:?}"))
        };
        let (_, _, h, w) = nchw("scfm stage", lde)?;
        if mfe.ndim() != 4 || mfe.dim(2) != h || mfe.dim(3) != w {
            return Err(misaligned("backbone map", mfe.shape(), lde.shape()));
        }
        let l = self.align_lde.forward(lde, mode)?;
        let m = self.align_mfe.forward(mfe, mode)?;
        let mut cat = vec![l.clone(), m.clone()];
        let mut fused = vec![paf_fuse(&l, &m, &self.paf_lde, mode)?];
        match (&self.paf_prior, prior) {
            (Some(pp), Some(prior)) => {
                if prior.shape() != l.shape() {
                    return Err(misaligned("previous stage output", prior.shape(), l.shape()));
                }
                cat.push(prior.clone());
                fused.push(paf_fuse(prior, &m, pp, mode)?);
            }
            (None, None) => {}
            _ => return Err(Error::Contract(format!("scfm stage {id}: previous-stage input mismatch"))),
        }
        let c = self.concat_proj.forward(&Tensor::concat(&cat, 1)?, mode)?;
        let y = c.add(&sefu(&fused, &self.sefu, mode)?)?;
        self.out.forward(&upsample2x(&y)?, mode)
    }
}

impl Module for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.align_lde.visit(&join(prefix, "align_lde"), f);
        self.align_mfe.visit(&join(prefix, "align_mfe"), f);
        self.concat_proj.visit(&join(prefix, "concat_proj"), f);
        self.paf_lde.visit(&join(prefix, "paf_lde"), f);
        self.paf_prior.visit(&join(prefix, "paf_prior"), f);
        self.sefu.visit(&join(prefix, "sefu"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.align_lde.visit_mut(&join(prefix, "align_lde"), f);
        self.align_mfe.visit_mut(&join(prefix, "align_mfe"), f);
        self.concat_proj.visit_mut(&join(prefix, "concat_proj"), f);
        self.paf_lde.visit_mut(&join(prefix, "paf_lde"), f);
        self.paf_prior.visit_mut(&join(prefix, "paf_prior"), f);
        self.sefu.visit_mut(&join(prefix, "sefu"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The four stages and the 1-channel logit head.
#[derive(Debug, Clone)]
pub struct Scfm {
    pub stages: Vec<Stage>,
    pub head: Conv2dParams,
}

/// Widths of the backbone maps feeding stages 1–4: stage maps at strides
/// 16, 8, 4 and the stride-2 stem output.
pub fn mfe_feeds(stage_channels: [usize; 4], stem_channels: usize) -> [usize; 4] {
    [stage_channels[2], stage_channels[1], stage_channels[0], stem_channels]
}

/// Initial crack probability of the head; thin structures cover a few
/// percent of an image.
pub const CRACK_PRIOR: f64 = 0.03;

impl Scfm {
    pub fn new(kind: ConvKind, unified: usize, stage_channels: [usize; 4], stem_channels: usize, init: &mut Init) -> Result<Self> {
        let cfgs = stage_configs(unified)?;
        let feeds = mfe_feeds(stage_channels, stem_channels);
        let stages = cfgs
            .iter()
            .zip(feeds)
            .map(|(&c, m)| Stage::new(kind, c, unified, m, init))
            .collect::<Result<Vec<_>>>()?;
        let last = cfgs[3].out_channels;
        let prior = (CRACK_PRIOR / (1.0 - CRACK_PRIOR)).ln();
        let head = Conv2dParams::new(init.lecun(&[1, last, 1, 1], last), Some(Tensor::full(&[1], prior).param()), 1, 0)?;
        Ok(Self { stages, head })
    }
}

impl Module for Scfm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.stages.visit(&join(prefix, "stages"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.stages.visit_mut(&join(prefix, "stages"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct ScfmOutput {
    pub stages: Vec<Tensor>,
    /// `[N, 1, H, W]` at input resolution.
    pub logits: Tensor,
}

/// Encoder inputs of stages 1–4 from the five token maps (strides 4…64):
/// the three deepest merged at stride 16, then strides 8, 4 and an
/// upsampled stride-4 map for stride 2.
pub fn lde_feeds(maps: &[Tensor]) -> Result<[Tensor; 4]> {
    if maps.len() != 5 {
        return Err(Error::Contract(format!("scfm expects 5 encoder levels, got {}", maps.len())));
    }
    let deep = upsample2x(&upsample2x(&maps[4])?)?;
    let first = maps[2].add(&upsample2x(&maps[3])?)?.add(&deep)?;
    Ok([first, maps[1].clone(), maps[0].clone(), upsample2x(&maps[0])?])
}

pub fn scfm_forward(seq: &TokenSequence, mfe: &MfeOutput, p: &Scfm, input_hw: (usize, usize), mode: NormMode) -> Result<ScfmOutput> {
    let maps = unflatten(&seq.tokens, &seq.levels)?;
    let lde_in = lde_feeds(&maps)?;
    let mfe_in = [&mfe.stages[2], &mfe.stages[1], &mfe.stages[0], &mfe.stem];
    let mut prior: Option<Tensor> = None;
    let mut outs = Vec::with_capacity(4);
    for (s, stage) in p.stages.iter().enumerate() {
        let y = stage.forward(s + 1, &lde_in[s], mfe_in[s], prior.as_ref(), mode)?;
        outs.push(y.clone());
        prior = Some(y);
    }
    let mut logits = conv2d(outs.last().expect("four stages"), &p.head)?;
    while logits.dim(2) < input_hw.0 {
        logits = upsample2x(&logits)?;
    }
    if (logits.dim(2), logits.dim(3)) != input_hw {
        return Err(Error::Contract(format!(
            "logits {:?} cannot reach input size {input_hw:?}",
            logits.shape()
        )));
    }
    Ok(ScfmOutput { stages: outs, logits })
}

/// `sigmoid(logits) ≥ t`, as 0/1 values.
pub fn predict_mask(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
    }
    let data = logits
        .data()
        .iter()
        .map(|&z| if crate::tensor::sigmoid(z) >= t { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(data, logits.shape())
}
