//! Long-range dependency extractor: the feature pyramid flattened into one
//! token sequence and refined by a multi-scale deformable-attention encoder
//! whose linear layers are all low-rank.

mod sample;

pub use sample::{ms_deform_sample, Levels};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrds::{lr_linear, LRLinearParams};
use crate::nn::{join, layer_norm, Init, LayerNormParams, Module, ParamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    /// Middle width of every low-rank linear layer.
    pub lr_mid: usize,
    /// Hidden width of the feed-forward block, as a multiple of the model width.
    pub ffn_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            points: 4,
            lr_mid: LRLinearParams::DEFAULT_MID,
            ffn_ratio: 4,
        }
    }
}

/// Flattened pyramid.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[N, Q, d]`
    pub tokens: Tensor,
    /// Level of each token.
    pub level_index: Vec<usize>,
    /// Normalized `(x, y)` pixel-center reference point of each token.
    pub ref_points: Vec<[f64; 2]>,
    pub levels: Levels,
}

/// Concatenate the levels row-major, shallow to deep.
pub fn flatten_pyramid(levels: &[Tensor]) -> Result<TokenSequence> {
    if levels.is_empty() {
        return Err(Error::Contract("cannot flatten an empty pyramid".into()));
    }
    let (n, d) = (levels[0].dim(0), levels[0].dim(1));
    let mut parts = Vec::with_capacity(levels.len());
    let mut shapes = Vec::with_capacity(levels.len());
    let mut level_index = Vec::new();
    let mut ref_points = Vec::new();
    for (li, x) in levels.iter().enumerate() {
        let (h, w) = match *x.shape() {
            [xn, xd, h, w] if xn == n && xd == d => (h, w),
            _ => return Err(Error::shape("flatten_pyramid", levels[0].shape(), x.shape())),
        };
        parts.push(x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, d])?);
        shapes.push((h, w));
        for i in 0..h {
            for j in 0..w {
                level_index.push(li);
                ref_points.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
            }
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::concat(&parts, 1)?,
        level_index,
        ref_points,
        levels: Levels::new(shapes),
    })
}

/// Split `[N, Q, d]` tokens back into `[N, d, H_c, W_c]` maps.
pub fn unflatten(tokens: &Tensor, levels: &Levels) -> Result<Vec<Tensor>> {
    let (n, q, d) = match *tokens.shape() {
        [n, q, d] => (n, q, d),
        _ => return Err(Error::Contract(format!("tokens must be [N,Q,d], got {:?}", tokens.shape()))),
    };
    if q != levels.tokens() {
        return Err(Error::Contract(format!("{q} tokens do not match level shapes {:?}", levels.shapes)));
    }
    levels
        .shapes
        .iter()
        .zip(&levels.starts)
        .map(|(&(h, w), &s)| tokens.narrow(1, s, h * w)?.reshape(&[n, h, w, d])?.permute(&[0, 3, 1, 2]))
        .collect()
}

/// Projections and predictors of one deformable-attention layer.
#[derive(Debug, Clone)]
pub struct DeformAttnParams {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub value_proj: LRLinearParams,
    pub output_proj: LRLinearParams,
    /// `d → H·C·T·2` offsets in pixels of each level.
    pub offset_pred: LRLinearParams,
    /// `d → H·C·T` attention logits.
    pub weight_pred: LRLinearParams,
}

impl DeformAttnParams {
    /// Offsets start on a per-head ring of directions with radius growing
    /// with the point index; attention starts uniform.
    pub fn new(d: usize, heads: usize, levels: usize, points: usize, m: usize, init: &mut Init) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        let hct = heads * levels * points;
        let mut offset_pred = LRLinearParams::new(d, hct * 2, m, init);
        offset_pred.zero_expand();
        let mut bias = vec![0.0; hct * 2];
        for h in 0..heads {
            let theta = 2.0 * std::f64::consts::PI * h as f64 / heads as f64;
            let (s, c) = theta.sin_cos();
            let scale = s.abs().max(c.abs());
            for l in 0..levels {
                for t in 0..points {
                    let i = (h * levels + l) * points + t;
                    bias[2 * i] = c / scale * (t + 1) as f64;
                    bias[2 * i + 1] = s / scale * (t + 1) as f64;
                }
            }
        }
        offset_pred.bias = Tensor::new(bias, &[hct * 2])?.param();
        let mut weight_pred = LRLinearParams::new(d, hct, m, init);
        weight_pred.zero_expand();
        Ok(Self {
            heads,
            levels,
            points,
            value_proj: LRLinearParams::new(d, d, m, init),
            output_proj: LRLinearParams::new(d, d, m, init),
            offset_pred,
            weight_pred,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.value_proj.d_in()
    }
}

impl Module for DeformAttnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.value_proj.visit(&join(prefix, "value_proj"), f);
        self.output_proj.visit(&join(prefix, "output_proj"), f);
        self.offset_pred.visit(&join(prefix, "offset_pred"), f);
        self.weight_pred.visit(&join(prefix, "weight_pred"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.value_proj.visit_mut(&join(prefix, "value_proj"), f);
        self.output_proj.visit_mut(&join(prefix, "output_proj"), f);
        self.offset_pred.visit_mut(&join(prefix, "offset_pred"), f);
        self.weight_pred.visit_mut(&join(prefix, "weight_pred"), f);
    }
}

/// Softmax-normalized attention weights `[N, Q, H, C, T]` for `query`.
pub fn attention_weights(query: &Tensor, p: &DeformAttnParams) -> Result<Tensor> {
    let (n, q) = (query.dim(0), query.dim(1));
    let ct = p.levels * p.points;
    lr_linear(query, &p.weight_pred)?
        .reshape(&[n, q, p.heads, ct])?
        .softmax(3)?
        .reshape(&[n, q, p.heads, p.levels, p.points])
}

/// Sampling locations `[N, Q, H, C, T, 2]` in pixel coordinates: each
/// normalized reference point scaled to level `c`, shifted to pixel-index
/// coordinates, plus the predicted offsets.
pub fn sampling_locations(query: &Tensor, ref_points: &[[f64; 2]], levels: &Levels, p: &DeformAttnParams) -> Result<Tensor> {
    let (n, q) = (query.dim(0), query.dim(1));
    if ref_points.len() != q || levels.len() != p.levels {
        return Err(Error::Contract(format!(
            "{} reference points / {} levels for {q} queries / {} levels",
            ref_points.len(),
            levels.len(),
            p.levels
        )));
    }
    let shape = [n, q, p.heads, p.levels, p.points, 2];
    let mut base = vec![0.0; shape.iter().product()];
    for (i, v) in base.chunks_mut(2).enumerate() {
        let c = (i / p.points) % p.levels;
        let qi = (i / (p.points * p.levels * p.heads)) % q;
        let (h, w) = levels.shapes[c];
        v[0] = ref_points[qi][0] * w as f64 - 0.5;
        v[1] = ref_points[qi][1] * h as f64 - 0.5;
    }
    let offsets = lr_linear(query, &p.offset_pred)?.reshape(&shape)?;
    Tensor::new(base, &shape)?.add(&offsets)
}

/// Deformable attention of `query` (`[N, Q, d]`) over the multi-level
/// `value_input` (`[N, Q_v, d]`).
pub fn msdeform_attn(
    query: &Tensor,
    ref_points: &[[f64; 2]],
    value_input: &Tensor,
    levels: &Levels,
    p: &DeformAttnParams,
) -> Result<Tensor> {
    let value = lr_linear(value_input, &p.value_proj)?;
    let locs = sampling_locations(query, ref_points, levels, p)?;
    let weights = attention_weights(query, p)?;
    let sampled = ms_deform_sample(&value, levels, &locs, &weights)?;
    lr_linear(&sampled, &p.output_proj)
}

/// Pre-norm encoder layer: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNormParams,
    pub attn: DeformAttnParams,
    pub norm2: LayerNormParams,
    pub ffn1: LRLinearParams,
    pub ffn2: LRLinearParams,
}

impl EncoderLayer {
    pub fn new(d: usize, levels: usize, cfg: &EncoderConfig, init: &mut Init) -> Result<Self> {
        let hidden = d * cfg.ffn_ratio.max(1);
        Ok(Self {
            norm1: LayerNormParams::new(d),
            attn: DeformAttnParams::new(d, cfg.heads, levels, cfg.points, cfg.lr_mid, init)?,
            norm2: LayerNormParams::new(d),
            ffn1: LRLinearParams::new(d, hidden, cfg.lr_mid, init),
            ffn2: LRLinearParams::new(hidden, d, cfg.lr_mid, init),
        })
    }

    /// Attention sublayer: `x + attn(norm(x) + pos, values = norm(x))`.
    pub fn attn_block(&self, x: &Tensor, pos: &Tensor, seq: &TokenSequence) -> Result<Tensor> {
        let q = layer_norm(x, &self.norm1)?;
        let a = msdeform_attn(&q.add(pos)?, &seq.ref_points, &q, &seq.levels, &self.attn)?;
        x.add(&a)
    }

    /// Feed-forward sublayer: `x + ffn2(relu(ffn1(norm(x))))`.
    pub fn ffn_block(&self, x: &Tensor) -> Result<Tensor> {
        let h = lr_linear(&layer_norm(x, &self.norm2)?, &self.ffn1)?.relu();
        x.add(&lr_linear(&h, &self.ffn2)?)
    }

    pub fn forward(&self, x: &Tensor, pos: &Tensor, seq: &TokenSequence) -> Result<Tensor> {
        self.ffn_block(&self.attn_block(x, pos, seq)?)
    }
}

impl Module for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.ffn1.visit(&join(prefix, "ffn1"), f);
        self.ffn2.visit(&join(prefix, "ffn2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.ffn1.visit_mut(&join(prefix, "ffn1"), f);
        self.ffn2.visit_mut(&join(prefix, "ffn2"), f);
    }
}

/// Level embeddings plus a stack of encoder layers.
#[derive(Debug, Clone)]
pub struct Lde {
    /// `[C, d]`
    pub level_embed: Tensor,
    pub layers: Vec<EncoderLayer>,
}

impl Lde {
    pub fn new(d: usize, levels: usize, cfg: &EncoderConfig, init: &mut Init) -> Result<Self> {
        Ok(Self {
            level_embed: init.normal(&[levels, d], 0.02).param(),
            layers: (0..cfg.layers)
                .map(|_| EncoderLayer::new(d, levels, cfg, init))
                .collect::<Result<_>>()?,
        })
    }

    /// Per-token level embedding `[Q, d]`.
    pub fn positions(&self, levels: &Levels) -> Result<Tensor> {
        let d = self.level_embed.dim(1);
        if levels.len() != self.level_embed.dim(0) {
            return Err(Error::Contract(format!(
                "{} levels for {} level embeddings",
                levels.len(),
                self.level_embed.dim(0)
            )));
        }
        let parts = levels
            .shapes
            .iter()
            .enumerate()
            .map(|(c, &(h, w))| self.level_embed.narrow(0, c, 1)?.expand(&[h * w, d]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts, 0)
    }
}

impl Module for Lde {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "level_embed"), &self.level_embed, ParamKind::Trainable);
        self.layers.visit(&join(prefix, "layers"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "level_embed"), &mut self.level_embed, ParamKind::Trainable);
        self.layers.visit_mut(&join(prefix, "layers"), f);
    }
}

/// Run the first `layers` encoder layers over `seq`.
pub fn lde_encode(seq: &TokenSequence, layers: usize, p: &Lde) -> Result<TokenSequence> {
    if layers > p.layers.len() {
        return Err(Error::Config(format!("{layers} layers requested, {} available", p.layers.len())));
    }
    let pos = p.positions(&seq.levels)?;
    let mut x = seq.tokens.clone();
    for layer in &p.layers[..layers] {
        x = layer.forward(&x, &pos, seq)?;
    }
    Ok(TokenSequence {
        tokens: x,
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests;
