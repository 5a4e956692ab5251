//! Named finite-difference checks over the differentiable building blocks,
//! grouped by module. Each case perturbs every trainable tensor away from
//! its initial value, projects the output onto a fixed random probe and
//! checks gradients for the inputs and all parameters.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::lde::{flatten_pyramid, lde_encode, msdeform_attn, DeformAttnParams, EncoderConfig, EncoderLayer, Lde, TokenSequence};
use crate::lrds::{ConvKind, ConvSpec, ConvUnit, LRDSParams, LRLinearParams, LrdsFlags};
use crate::mfe::StripGate;
use crate::nn::{
    bilinear_sample, conv2d, depthwise_conv2d, pointwise_conv2d, strip_context, upsample2x, BatchNormParams, Conv2dParams,
    Init, LayerNormParams, Linear, Module, NormMode, ParamKind,
};
use crate::scfm::{paf_fuse, sefu, PAFParams, SeFuParams, Stage, StageConfig};
use crate::tensor::{gradient_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::train::{bce_loss, combined_loss, dice_loss, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SuiteModule {
    Tensor,
    Nn,
    Lrds,
    Lde,
    Scfm,
    Loss,
}

impl SuiteModule {
    pub const ALL: [SuiteModule; 6] = [Self::Tensor, Self::Nn, Self::Lrds, Self::Lde, Self::Scfm, Self::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tensor => "tensor",
            Self::Nn => "nn",
            Self::Lrds => "lrds",
            Self::Lde => "lde",
            Self::Scfm => "scfm",
            Self::Loss => "loss",
        }
    }
}

impl fmt::Display for SuiteModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SuiteModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck module `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub module: SuiteModule,
    pub name: &'static str,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

/// Options used by [`run_suite`]: every coordinate of the small inputs,
/// a sample of larger parameter tensors.
pub fn suite_options() -> GradCheckOptions {
    GradCheckOptions {
        max_coords_per_input: Some(16),
        ..Default::default()
    }
}

type Case = (&'static str, fn(&GradCheckOptions) -> Result<GradCheckReport>);

fn cases(module: SuiteModule) -> Vec<Case> {
    match module {
        SuiteModule::Tensor => vec![
            ("matmul_softmax", tensor_matmul_softmax as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("broadcast_elementwise", tensor_broadcast),
            ("shape_ops", tensor_shape_ops),
        ],
        SuiteModule::Nn => vec![
            ("conv2d", nn_conv2d as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("depthwise_conv2d", nn_depthwise),
            ("pointwise_conv2d", nn_pointwise),
            ("batch_norm", nn_batch_norm),
            ("layer_norm", nn_layer_norm),
            ("linear", nn_linear),
            ("bilinear_sample", nn_bilinear),
            ("upsample2x", nn_upsample),
            ("strip_context", nn_strip_context),
        ],
        SuiteModule::Lrds => vec![
            ("lrds_block", lrds_block as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("lr_linear", lrds_lr_linear),
            ("unit_original", |o| lrds_unit(ConvKind::Original, o)),
            ("unit_ds", |o| lrds_unit(ConvKind::Ds, o)),
            ("unit_lr", |o| lrds_unit(ConvKind::Lr, o)),
            ("unit_lrds", |o| lrds_unit(ConvKind::Lrds, o)),
            ("strip_gate", lrds_strip_gate),
        ],
        SuiteModule::Lde => vec![
            ("msdeform_attn", lde_attention as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("encoder_layer", lde_layer),
            ("encoder", lde_full),
        ],
        SuiteModule::Scfm => vec![
            ("paf_fuse", scfm_paf as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("sefu", scfm_sefu),
            ("stage", scfm_stage),
        ],
        SuiteModule::Loss => vec![
            ("bce", loss_bce as fn(&GradCheckOptions) -> Result<GradCheckReport>),
            ("dice", loss_dice),
            ("combined", loss_combined),
        ],
    }
}

/// Run every case of `modules` (all modules when empty).
pub fn run_suite(modules: &[SuiteModule], opts: &GradCheckOptions) -> Result<Vec<CaseResult>> {
    let modules = if modules.is_empty() { &SuiteModule::ALL[..] } else { modules };
    let mut out = Vec::new();
    for &module in modules {
        for (name, case) in cases(module) {
            let t = Instant::now();
            let report = case(opts)?;
            log::debug!("gradcheck {module}/{name}: {:.3e}", report.max_rel_error);
            out.push(CaseResult {
                module,
                name,
                report,
                elapsed: t.elapsed(),
            });
        }
    }
    Ok(out)
}

/// Fixed random linear functional of `y`.
fn project(y: &Tensor) -> Result<Tensor> {
    let probe = Init::new(y.numel() as u64).uniform(y.shape(), 1.0);
    Ok(y.mul(&probe)?.sum())
}

fn perturb<M: Module>(m: &mut M, init: &mut Init, scale: f64) {
    m.visit_mut("", &mut |_, t, kind| {
        if kind == ParamKind::Trainable {
            let noise = init.uniform(t.shape(), scale);
            *t = t.add(&noise).expect("same shape").detach().param();
        }
    });
}

/// Check `f(module, xs)` in the inputs `xs` and every trainable tensor.
fn check_module<M, F>(m: &M, xs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Module + Clone,
    F: Fn(&M, &[Tensor]) -> Result<Tensor>,
{
    let mut inputs: Vec<Tensor> = xs.to_vec();
    inputs.extend(m.named_params().into_iter().map(|(_, t)| t.detach()));
    let n = xs.len();
    gradient_check(
        |t| {
            let mut mm = m.clone();
            let mut i = n;
            mm.visit_mut("", &mut |_, p, kind| {
                if kind == ParamKind::Trainable {
                    *p = t[i].clone();
                    i += 1;
                }
            });
            project(&f(&mm, &t[..n])?)
        },
        &inputs,
        opts,
    )
}

fn check_fn<F>(xs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    gradient_check(|t| project(&f(t)?), xs, opts)
}

fn tensor_matmul_softmax(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(1);
    let (a, b) = (init.uniform(&[3, 4], 1.0), init.uniform(&[4, 5], 1.0));
    check_fn(&[a, b], |t| t[0].matmul(&t[1])?.softmax(1), opts)
}

fn tensor_broadcast(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(2);
    let x = init.uniform(&[2, 3, 4], 1.0);
    let y = init.uniform(&[3, 4], 1.0);
    let z = init.uniform(&[1, 3, 1], 1.0);
    check_fn(
        &[x, y, z],
        |t| {
            let (x, y) = (&t[0], &t[1]);
            let z = t[2].expand(&[2, 3, 4])?;
            let a = x.mul(y)?.sub(&z.mul(x)?)?.add(&x.exp())?.div(&y.square().add_scalar(1.0))?;
            let b = x.square().add_scalar(1.0).sqrt().ln().sub(&x.sigmoid())?;
            a.add(&b)?.add(&x.neg().scale(0.5).clamp(-0.4, 0.4))
        },
        opts,
    )
}

fn tensor_shape_ops(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let x = Init::new(3).uniform(&[2, 3, 4], 1.0);
    check_fn(
        &[x],
        |t| {
            let x = &t[0];
            let p = x.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let n = p.narrow(1, 1, 4)?;
            let c = Tensor::concat(&[n.clone(), n.square()], 0)?;
            let s = x.sum_axis(1)?.reshape(&[2, 1, 4])?.expand(&[2, 3, 4])?;
            Tensor::concat(&[c.reshape(&[32])?, s.mul(x)?.reshape(&[24])?, x.mean().reshape(&[1])?], 0)
        },
        opts,
    )
}

fn nn_conv2d(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(4);
    let x = init.uniform(&[2, 3, 5, 6], 1.0);
    let p = Conv2dParams::new(init.uniform(&[4, 3, 3, 3], 0.5), Some(init.uniform(&[4], 0.5).param()), 2, 1)?;
    check_module(&p, &[x], |p, t| conv2d(&t[0], p), opts)
}

fn nn_depthwise(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(5);
    let x = init.uniform(&[2, 3, 5, 5], 1.0);
    let w = init.uniform(&[3, 1, 3, 3], 0.5);
    check_fn(&[x, w], |t| depthwise_conv2d(&t[0], &t[1], 2, 1), opts)
}

fn nn_pointwise(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(6);
    let x = init.uniform(&[2, 3, 3, 4], 1.0);
    let w = init.uniform(&[5, 3, 1, 1], 0.5);
    check_fn(&[x, w], |t| pointwise_conv2d(&t[0], &t[1]), opts)
}

fn nn_batch_norm(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(7);
    let x = init.uniform(&[3, 4, 2, 3], 1.0);
    let mut p = BatchNormParams::new(4);
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[x], |p, t| p.forward(&t[0], NormMode::Train), opts)
}

fn nn_layer_norm(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(8);
    let x = init.uniform(&[2, 3, 6], 1.0);
    let mut p = LayerNormParams::new(6);
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[x], |p, t| p.forward(&t[0]), opts)
}

fn nn_linear(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(9);
    let x = init.uniform(&[2, 3, 5], 1.0);
    let mut p = Linear::new(5, 4, &mut init);
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[x], |p, t| p.forward(&t[0]), opts)
}

fn nn_bilinear(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(10);
    let feat = init.uniform(&[2, 3, 4, 5], 1.0);
    // Points straddle the border so the zero-padded taps are exercised.
    let pts = init.uniform(&[2, 7, 2], 3.0).add_scalar(1.5);
    check_fn(&[feat, pts], |t| bilinear_sample(&t[0], &t[1]), opts)
}

fn nn_upsample(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let x = Init::new(11).uniform(&[1, 2, 3, 2], 1.0);
    check_fn(&[x], |t| upsample2x(&t[0]), opts)
}

fn nn_strip_context(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(12);
    let x = init.uniform(&[2, 3, 4, 5], 1.0);
    let row = init.uniform(&[3, 1, 3, 1], 0.5);
    let col = init.uniform(&[3, 1, 1, 3], 0.5);
    check_fn(&[x, row, col], |t| strip_context(&t[0], &t[1], &t[2]), opts)
}

fn lrds_block(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(13);
    let x = init.uniform(&[2, 6, 5, 5], 1.0);
    let mut p = LRDSParams::new(6, 3, 5, 3, 2, LrdsFlags::STANDARD, &mut init)?;
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[x], |p, t| p.forward(&t[0], NormMode::Train), opts)
}

fn lrds_lr_linear(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(14);
    let x = init.uniform(&[2, 4, 7], 1.0);
    let mut p = LRLinearParams::new(7, 5, 3, &mut init);
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[x], |p, t| p.forward(&t[0]), opts)
}

fn lrds_unit(kind: ConvKind, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(15);
    let x = init.uniform(&[2, 8, 4, 4], 1.0);
    let mut spec = ConvSpec::new(8, 6, 3, 1);
    spec.mid = Some(4);
    let mut u = ConvUnit::new(kind, spec, &mut init)?;
    perturb(&mut u, &mut init, 0.3);
    check_module(&u, &[x], |u, t| u.forward(&t[0], NormMode::Train), opts)
}

fn lrds_strip_gate(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(16);
    let x = init.uniform(&[2, 4, 3, 5], 1.0);
    let mut g = StripGate::new(ConvKind::Lrds, 4, &mut init)?;
    perturb(&mut g, &mut init, 0.3);
    check_module(&g, &[x], |g, t| g.forward(&t[0], NormMode::Train), opts)
}

fn tiny_pyramid(init: &mut Init, d: usize) -> Result<TokenSequence> {
    flatten_pyramid(&[init.uniform(&[2, d, 3, 3], 1.0), init.uniform(&[2, d, 2, 2], 1.0)])
}

fn lde_attention(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(17);
    let seq = tiny_pyramid(&mut init, 4)?;
    let mut p = DeformAttnParams::new(4, 2, 2, 2, 3, &mut init)?;
    perturb(&mut p, &mut init, 0.5);
    let query = init.uniform(&[2, seq.levels.tokens(), 4], 1.0);
    check_module(
        &p,
        &[query, seq.tokens.clone()],
        |p, t| msdeform_attn(&t[0], &seq.ref_points, &t[1], &seq.levels, p),
        opts,
    )
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        points: 2,
        lr_mid: 3,
        ffn_ratio: 2,
    }
}

fn lde_layer(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(18);
    let seq = tiny_pyramid(&mut init, 4)?;
    let mut layer = EncoderLayer::new(4, 2, &tiny_encoder(), &mut init)?;
    perturb(&mut layer, &mut init, 0.3);
    let pos = init.uniform(&[seq.levels.tokens(), 4], 0.5);
    check_module(&layer, &[seq.tokens.clone(), pos], |l, t| l.forward(&t[0], &t[1], &seq), opts)
}

fn lde_full(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(19);
    let seq = tiny_pyramid(&mut init, 4)?;
    let mut lde = Lde::new(4, 2, &tiny_encoder(), &mut init)?;
    perturb(&mut lde, &mut init, 0.3);
    check_module(
        &lde,
        &[seq.tokens.clone()],
        |p, t| {
            let s = TokenSequence {
                tokens: t[0].clone(),
                ..seq.clone()
            };
            Ok(lde_encode(&s, 2, p)?.tokens)
        },
        opts,
    )
}

fn scfm_paf(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(20);
    let (a, b) = (init.uniform(&[2, 4, 3, 3], 1.0), init.uniform(&[2, 4, 3, 3], 1.0));
    let mut p = PAFParams::new(ConvKind::Lrds, 4, &mut init)?;
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[a, b], |p, t| paf_fuse(&t[0], &t[1], p, NormMode::Train), opts)
}

fn scfm_sefu(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(21);
    let (a, b) = (init.uniform(&[2, 4, 3, 3], 1.0), init.uniform(&[2, 4, 3, 3], 1.0));
    let mut p = SeFuParams::new(ConvKind::Lrds, 4, 2, &mut init)?;
    perturb(&mut p, &mut init, 0.3);
    check_module(&p, &[a, b], |p, t| sefu(t, p, NormMode::Train), opts)
}

fn scfm_stage(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut init = Init::new(22);
    let cfg = StageConfig {
        in_channels: 8,
        out_channels: 4,
        uses_prior_stage: true,
    };
    let mut stage = Stage::new(ConvKind::Lrds, cfg, 4, 3, &mut init)?;
    perturb(&mut stage, &mut init, 0.3);
    let xs = [
        init.uniform(&[2, 4, 2, 3], 1.0),
        init.uniform(&[2, 3, 2, 3], 1.0),
        init.uniform(&[2, 8, 2, 3], 1.0),
    ];
    check_module(
        &stage,
        &xs,
        |s, t| s.forward(2, &t[0], &t[1], Some(&t[2]), NormMode::Train),
        opts,
    )
}

fn probs_and_labels(seed: u64) -> (Tensor, Tensor) {
    let mut init = Init::new(seed);
    let p = init.uniform(&[2, 1, 3, 4], 0.45).add_scalar(0.5);
    let y = init.uniform(&[2, 1, 3, 4], 1.0).data().iter().map(|&v| f64::from(v > 0.3)).collect();
    (p, Tensor::new(y, &[2, 1, 3, 4]).expect("sized"))
}

fn loss_bce(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (p, y) = probs_and_labels(23);
    gradient_check(|t| bce_loss(&t[0], &y), &[p], opts)
}

fn loss_dice(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (p, y) = probs_and_labels(24);
    gradient_check(|t| dice_loss(&t[0], &y, 1.0), &[p], opts)
}

fn loss_combined(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (p, y) = probs_and_labels(25);
    let cfg = LossConfig::default();
    gradient_check(|t| combined_loss(&t[0], &y, &cfg), &[p], opts)
}
