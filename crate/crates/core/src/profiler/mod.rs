//! Analytical parameter and multiply-accumulate accounting, computed from a
//! [`ModelConfig`] alone without building or running the network.
//!
//! MACs cover learned linear maps (every tap of every kernel position,
//! padding included) and the bilinear gather of deformable attention. Bias,
//! normalization and activation costs are excluded unless
//! [`CostOptions::elementwise`] is set.

mod report;

pub use report::{CostEntry, CostReport};

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lrds::{ConvKind, ConvSpec};
use crate::mfe::{check_input, BackboneConfig};
use crate::model::{ModelConfig, PYRAMID_LEVELS};
use crate::nn::join;
use crate::scfm::{mfe_feeds, stage_configs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostOptions {
    pub flop_per_mac: u64,
    /// Also count one MAC per element for biases, norms and ReLUs.
    pub elementwise: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            flop_per_mac: 2,
            elementwise: false,
        }
    }
}

/// `(H, W)` of a feature map.
pub type Hw = (usize, usize);

fn area((h, w): Hw) -> u64 {
    (h * w) as u64
}

/// Output length of a `k`-wide window with `k/2` padding.
fn out_len(n: usize, k: usize, stride: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n + 2 * (k / 2) - k) / stride + 1
    }
}

fn scaled((h, w): Hw, s: usize) -> Hw {
    (h / s, w / s)
}

fn doubled((h, w): Hw) -> Hw {
    (2 * h, 2 * w)
}

struct Walker {
    kind: ConvKind,
    opts: CostOptions,
    report: CostReport,
}

impl Walker {
    fn new(kind: ConvKind, opts: CostOptions) -> Self {
        Self {
            kind,
            opts,
            report: CostReport {
                entries: Vec::new(),
                flop_per_mac: opts.flop_per_mac,
            },
        }
    }

    fn push(&mut self, path: &str, kind: &str, params: usize, macs: u64) {
        self.report.push(CostEntry::new(path, kind, params as u64, macs));
    }

    fn extra(&self, c: usize, pos: u64) -> u64 {
        if self.opts.elementwise {
            c as u64 * pos
        } else {
            0
        }
    }

    fn dense(&mut self, path: &str, c_in: usize, c_out: usize, k: usize, bias: bool, out: Hw) {
        let weights = c_out * c_in * k * k;
        let mut macs = weights as u64 * area(out);
        if bias {
            macs += self.extra(c_out, area(out));
        }
        self.push(path, &format!("conv{k}x{k}"), weights + if bias { c_out } else { 0 }, macs);
    }

    fn depthwise(&mut self, path: &str, c: usize, k: usize, out: Hw) {
        let weights = c * k * k;
        self.push(path, "depthwise", weights, weights as u64 * area(out));
    }

    fn post(&mut self, path: &str, c: usize, norm: bool, act: bool, hw: Hw) {
        if norm {
            let macs = self.extra(c, area(hw));
            self.push(path, "batchnorm", 2 * c, macs);
        }
        if act && self.opts.elementwise {
            let macs = self.extra(c, area(hw));
            self.push(&join(path, "relu"), "relu", 0, macs);
        }
    }

    /// One [`crate::lrds::ConvUnit`] of the configured kind; returns the
    /// output size.
    fn unit(&mut self, path: &str, spec: ConvSpec, input: Hw) -> Hw {
        let ConvSpec {
            c_in,
            c_out,
            k,
            stride,
            norm,
            act,
            ..
        } = spec;
        let out = (out_len(input.0, k, stride), out_len(input.1, k, stride));
        let p = |name: &str| join(path, name);
        match self.kind {
            ConvKind::Original => {
                self.dense(&p("conv"), c_in, c_out, k, !norm, out);
                self.post(&p("norm"), c_out, norm, act, out);
            }
            ConvKind::Ds => {
                self.depthwise(&p("depthwise"), c_in, k, out);
                self.dense(&p("pointwise"), c_in, c_out, 1, !norm, out);
                self.post(&p("norm"), c_out, norm, act, out);
            }
            ConvKind::Lr => {
                let mid = spec.mid_width();
                self.dense(&p("spatial"), c_in, mid, k, false, out);
                self.dense(&p("combine"), mid, c_out, 1, !norm, out);
                self.post(&p("norm"), c_out, norm, act, out);
            }
            ConvKind::Lrds => {
                let mid = spec.mid_width();
                self.dense(&p("reduce"), c_in, mid, 1, false, input);
                self.post(&p("reduce_norm"), mid, norm, norm, input);
                self.depthwise(&p("depthwise"), mid, k, out);
                self.dense(&p("pointwise"), mid, mid, 1, false, out);
                self.dense(&p("expand"), mid, c_out, 1, !norm, out);
                self.post(&p("expand_norm"), c_out, norm, act, out);
            }
        }
        out
    }

    fn strip_pool(&mut self, path: &str, c: usize, hw: Hw) {
        self.push(&join(path, "row_filter"), "strip", 3 * c, (3 * c * hw.0) as u64);
        self.push(&join(path, "col_filter"), "strip", 3 * c, (3 * c * hw.1) as u64);
        self.unit(&join(path, "fuse"), ConvSpec::new(c, c, 1, 1).linear(), hw);
    }

    fn bottleneck(&mut self, path: &str, c_in: usize, mid: usize, c_out: usize, stride: usize, input: Hw) -> Hw {
        let p = |name: &str| join(path, name);
        let y = self.unit(&p("conv1"), ConvSpec::new(c_in, mid, 1, 1), input);
        let y = self.unit(&p("conv2"), ConvSpec::new(mid, mid, 3, stride), y);
        self.strip_pool(&p("strip"), mid, y);
        let out = self.unit(&p("conv3"), ConvSpec::new(mid, c_out, 1, 1).no_act(), y);
        if stride != 1 || c_in != c_out {
            self.unit(&p("shortcut"), ConvSpec::new(c_in, c_out, 1, stride).no_act(), input);
        }
        out
    }

    /// Backbone; returns the stem and four stage map sizes.
    fn mfe(&mut self, b: &BackboneConfig, input: Hw) -> (Hw, [Hw; 4]) {
        let stem = self.unit("mfe.stem.0", ConvSpec::new(3, b.stem_channels, 3, 2), input);
        let mut x = self.unit("mfe.stem.1", ConvSpec::new(b.stem_channels, b.stem_channels, 3, 2), stem);
        let mut c_in = b.stem_channels;
        let mut stages = [(0, 0); 4];
        for s in 0..4 {
            for i in 0..b.stage_blocks[s] {
                let stride = if i == 0 && s > 0 { 2 } else { 1 };
                let path = format!("mfe.stages.{s}.{i}");
                x = self.bottleneck(&path, c_in, b.block_mid(s), b.stage_channels[s], stride, x);
                c_in = b.stage_channels[s];
            }
            stages[s] = x;
        }
        (stem, stages)
    }

    fn enhance(&mut self, b: &BackboneConfig, stages: &[Hw; 4]) -> Vec<Hw> {
        let u = b.unified_channels;
        let mut levels: Vec<Hw> = (0..4)
            .map(|s| self.unit(&format!("enhance.proj.{s}"), ConvSpec::new(b.stage_channels[s], u, 1, 1).linear(), stages[s]))
            .collect();
        levels.push(self.unit("enhance.extra", ConvSpec::new(b.stage_channels[3], u, 3, 2).linear(), stages[3]));
        levels
    }

    fn lr_linear(&mut self, path: &str, d_in: usize, d_out: usize, m: usize, tokens: u64) {
        let macs = (m * (d_in + d_out)) as u64 * tokens + self.extra(d_out, tokens);
        self.push(path, "lr_linear", m * d_in + d_out * m + d_out, macs);
    }

    fn layer_norm(&mut self, path: &str, d: usize, tokens: u64) {
        let macs = self.extra(d, tokens);
        self.push(path, "layernorm", 2 * d, macs);
    }

    fn lde(&mut self, cfg: &ModelConfig, levels: &[Hw]) {
        let d = cfg.backbone.unified_channels;
        let e = &cfg.encoder;
        let m = e.lr_mid;
        let tokens: u64 = levels.iter().map(|&hw| area(hw)).sum();
        let hct = e.heads * levels.len() * e.points;
        let hidden = d * e.ffn_ratio.max(1);
        self.push("lde.level_embed", "embedding", levels.len() * d, self.extra(d, tokens));
        for l in 0..e.layers {
            let p = |name: &str| format!("lde.layers.{l}.{name}");
            self.layer_norm(&p("norm1"), d, tokens);
            self.lr_linear(&p("attn.value_proj"), d, d, m, tokens);
            self.lr_linear(&p("attn.offset_pred"), d, 2 * hct, m, tokens);
            self.lr_linear(&p("attn.weight_pred"), d, hct, m, tokens);
            // Four bilinear taps plus the attention weight, per head channel.
            let sample = tokens * (hct * 5 * (d / e.heads)) as u64;
            self.push(&p("attn.sample"), "deform_sample", 0, sample);
            self.lr_linear(&p("attn.output_proj"), d, d, m, tokens);
            self.layer_norm(&p("norm2"), d, tokens);
            self.lr_linear(&p("ffn1"), d, hidden, m, tokens);
            self.lr_linear(&p("ffn2"), hidden, d, m, tokens);
        }
    }

    fn paf(&mut self, path: &str, c: usize, hw: Hw) {
        let spec = ConvSpec::new(c, (c / 2).max(1), 1, 1).no_act();
        for f in ["f_c", "f_d"] {
            self.unit(&join(path, f), spec, hw);
        }
    }

    fn scfm(&mut self, b: &BackboneConfig, input: Hw) -> Result<()> {
        let u = b.unified_channels;
        let feeds = mfe_feeds(b.stage_channels, b.stem_channels);
        let mut hw = scaled(input, 16);
        for (s, cfg) in stage_configs(u)?.iter().enumerate() {
            let p = |name: &str| format!("scfm.stages.{s}.{name}");
            let w = cfg.in_channels;
            let n_in = if cfg.uses_prior_stage { 3 } else { 2 };
            self.unit(&p("align_lde"), ConvSpec::new(u, w, 1, 1), hw);
            self.unit(&p("align_mfe"), ConvSpec::new(feeds[s], w, 1, 1), hw);
            self.unit(&p("concat_proj"), ConvSpec::new(n_in * w, w, 1, 1), hw);
            self.paf(&p("paf_lde"), w, hw);
            if cfg.uses_prior_stage {
                self.paf(&p("paf_prior"), w, hw);
            }
            for i in 0..n_in - 1 {
                self.dense(&p(&format!("sefu.scorers.{i}")), w, 1, 1, true, hw);
            }
            self.unit(&p("sefu.refine"), ConvSpec::new(w, w, 3, 1), hw);
            hw = doubled(hw);
            self.unit(&p("out"), ConvSpec::new(w, cfg.out_channels, 3, 1), hw);
        }
        let last = stage_configs(u)?[3].out_channels;
        self.dense("scfm.head", last, 1, 1, true, hw);
        Ok(())
    }

    fn model(mut self, cfg: &ModelConfig, input: Hw) -> Result<CostReport> {
        let b = &cfg.backbone;
        let (_, stages) = self.mfe(b, input);
        let levels = self.enhance(b, &stages);
        debug_assert_eq!(levels.len(), PYRAMID_LEVELS);
        self.lde(cfg, &levels);
        self.scfm(b, input)?;
        Ok(self.report)
    }
}

/// Per-layer costs of `config` at `input` (`H, W`). A zero-sized input gives
/// zero MACs; otherwise both sides must be multiples of 64.
pub fn profile(config: &ModelConfig, input: Hw, opts: CostOptions) -> Result<CostReport> {
    config.validate()?;
    if opts.flop_per_mac == 0 {
        return Err(Error::Config("flop_per_mac must be positive".into()));
    }
    if input.0 != 0 && input.1 != 0 {
        check_input(input.0, input.1)?;
    } else if input != (0, 0) {
        return Err(Error::Config(format!("input size {}x{} has one zero side", input.0, input.1)));
    }
    Walker::new(config.conv, opts).model(config, input)
}

/// Cost of one convolution unit of `kind` on an `input`-sized map, with its
/// output size.
pub fn unit_cost(kind: ConvKind, spec: ConvSpec, input: Hw, opts: CostOptions) -> (CostReport, Hw) {
    let mut w = Walker::new(kind, opts);
    let out = w.unit("unit", spec, input);
    (w.report, out)
}

/// Every trainable scalar of `config`; MACs are left at zero.
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    profile(config, (0, 0), CostOptions::default())
}

pub fn count_flops(config: &ModelConfig, input: Hw) -> Result<CostReport> {
    profile(config, input, CostOptions::default())
}

/// Totals of one convolution realization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantCost {
    pub kind: ConvKind,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// `1 − params / params(original)`.
    pub param_reduction: f64,
    /// `1 − flops / flops(original)`.
    pub flop_reduction: f64,
}

/// The same architecture under each [`ConvKind`], original first.
pub fn compare_variants(config: &ModelConfig, input: Hw, opts: CostOptions) -> Result<Vec<VariantCost>> {
    let reports = ConvKind::ALL
        .iter()
        .map(|&k| Ok((k, profile(&config.with_conv(k), input, opts)?)))
        .collect::<Result<Vec<_>>>()?;
    let base = &reports[0].1;
    let (bp, bf) = (base.total_params() as f64, base.flops() as f64);
    let reduction = |v: u64, b: f64| if b > 0.0 { 1.0 - v as f64 / b } else { 0.0 };
    Ok(reports
        .iter()
        .map(|(kind, r)| VariantCost {
            kind: *kind,
            params: r.total_params(),
            macs: r.total_macs(),
            flops: r.flops(),
            param_reduction: reduction(r.total_params(), bp),
            flop_reduction: reduction(r.flops(), bf),
        })
        .collect())
}

pub fn variants_table(rows: &[VariantCost]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10}  {:>14}  {:>16}  {:>9}  {:>9}", "variant", "params", "flops", "-params", "-flops");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10}  {:>14}  {:>16}  {:>8.2}%  {:>8.2}%",
            r.kind.name(),
            r.params,
            r.flops,
            100.0 * r.param_reduction,
            100.0 * r.flop_reduction
        );
    }
    s
}
