use super::*;
use crate::tensor::{gradient_check, GradCheckOptions};

fn row_affine(x: &[f64], w: &[f64], d_out: usize, b: Option<&[f64]>) -> Vec<f64> {
    let d_in = x.len();
    (0..d_out)
        .map(|o| b.map_or(0.0, |b| b[o]) + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn lr_row(x: &[f64], p: &LRLinearParams) -> Vec<f64> {
    let mid = row_affine(x, p.reduce.data(), p.mid(), None);
    row_affine(&mid, p.expand.data(), p.d_out(), Some(p.bias.data()))
}

/// Bilinear read of a `h×w` map stored as `at(i, j)`, zero outside.
fn bilinear(at: &dyn Fn(usize, usize) -> f64, h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 as i64 + dy, x0 as i64 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                acc += wy * wx * at(yy as usize, xx as usize);
            }
        }
    }
    acc
}

/// Per-query loop evaluation of deformable attention straight from the
/// parameter buffers.
fn brute_force(query: &Tensor, refs: &[[f64; 2]], value_in: &Tensor, levels: &Levels, p: &DeformAttnParams) -> Vec<f64> {
    let (n, q, d) = (query.dim(0), query.dim(1), query.dim(2));
    let qv = value_in.dim(1);
    let (nh, nl, nt) = (p.heads, p.levels, p.points);
    let dh = d / nh;
    let mut out = Vec::new();
    for b in 0..n {
        let values: Vec<Vec<f64>> = (0..qv)
            .map(|t| lr_row(&value_in.data()[(b * qv + t) * d..][..d], &p.value_proj))
            .collect();
        for qi in 0..q {
            let z = &query.data()[(b * q + qi) * d..][..d];
            let offs = lr_row(z, &p.offset_pred);
            let logits = lr_row(z, &p.weight_pred);
            let mut heads_out = vec![0.0; d];
            for h in 0..nh {
                let lg = &logits[h * nl * nt..(h + 1) * nl * nt];
                let mx = lg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = lg.iter().map(|v| (v - mx).exp()).sum();
                for c in 0..nl {
                    let (lh, lw) = levels.shapes[c];
                    let start = levels.starts[c];
                    for t in 0..nt {
                        let i = (h * nl + c) * nt + t;
                        let a = (lg[c * nt + t] - mx).exp() / z;
                        let x = refs[qi][0] * lw as f64 - 0.5 + offs[2 * i];
                        let y = refs[qi][1] * lh as f64 - 0.5 + offs[2 * i + 1];
                        for ch in 0..dh {
                            let at = |ii: usize, jj: usize| values[start + ii * lw + jj][h * dh + ch];
                            heads_out[h * dh + ch] += a * bilinear(&at, lh, lw, x, y);
                        }
                    }
                }
            }
            out.extend(lr_row(&heads_out, &p.output_proj));
        }
    }
    out
}

fn randomize(p: &mut DeformAttnParams, init: &mut Init) {
    for lin in [&mut p.offset_pred, &mut p.weight_pred] {
        lin.expand = init.uniform(lin.expand.shape(), 0.8).param();
        lin.bias = init.uniform(lin.bias.shape(), 1.5).param();
    }
}

fn tiny_setup(seed: u64) -> (Tensor, TokenSequence, DeformAttnParams) {
    let mut init = Init::new(seed);
    let maps = vec![init.uniform(&[2, 4, 3, 3], 1.0), init.uniform(&[2, 4, 2, 2], 1.0)];
    let seq = flatten_pyramid(&maps).unwrap();
    let mut p = DeformAttnParams::new(4, 2, 2, 2, 4, &mut init).unwrap();
    randomize(&mut p, &mut init);
    let query = init.uniform(&[2, seq.levels.tokens(), 4], 1.0);
    (query, seq, p)
}

#[test]
fn flatten_small_pyramid() {
    let a = Tensor::new((0..8).map(f64::from).collect(), &[1, 2, 2, 2]).unwrap();
    let b = Tensor::new(vec![10.0, 11.0], &[1, 2, 1, 1]).unwrap();
    let seq = flatten_pyramid(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(seq.tokens.shape(), &[1, 5, 2]);
    assert_eq!(seq.level_index, vec![0, 0, 0, 0, 1]);
    assert_eq!(seq.ref_points[0], [0.25, 0.25]);
    assert_eq!(seq.ref_points[4], [0.5, 0.5]);
    assert_eq!(&seq.tokens.data()[..4], &[0.0, 4.0, 1.0, 5.0]);
    let back = unflatten(&seq.tokens, &seq.levels).unwrap();
    assert_eq!(back[0].data(), a.data());
    assert_eq!(back[1].data(), b.data());
    assert!(flatten_pyramid(&[]).is_err());
}

#[test]
fn matches_brute_force_loop() {
    let (query, seq, p) = tiny_setup(1);
    let y = msdeform_attn(&query, &seq.ref_points, &seq.tokens, &seq.levels, &p).unwrap();
    let oracle = brute_force(&query, &seq.ref_points, &seq.tokens, &seq.levels, &p);
    let err = y.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn single_point_at_pixel_center_reads_projected_pixel() {
    let mut init = Init::new(2);
    let map = init.uniform(&[1, 3, 4, 5], 1.0);
    let seq = flatten_pyramid(std::slice::from_ref(&map)).unwrap();
    let mut p = DeformAttnParams::new(3, 1, 1, 1, 2, &mut init).unwrap();
    p.offset_pred.bias = Tensor::zeros(&[2]).param();
    let y = msdeform_attn(&seq.tokens, &seq.ref_points, &seq.tokens, &seq.levels, &p).unwrap();
    for qi in 0..20 {
        let x = &seq.tokens.data()[qi * 3..qi * 3 + 3];
        let expected = lr_row(&lr_row(x, &p.value_proj), &p.output_proj);
        for k in 0..3 {
            assert!((y.data()[qi * 3 + k] - expected[k]).abs() < 1e-14);
        }
    }
}

#[test]
fn coincident_points_match_single_point() {
    let mut init = Init::new(3);
    let map = init.uniform(&[1, 2, 3, 3], 1.0);
    let seq = flatten_pyramid(std::slice::from_ref(&map)).unwrap();
    let mut one = DeformAttnParams::new(2, 1, 1, 1, 2, &mut init).unwrap();
    one.offset_pred.bias = Tensor::full(&[2], 0.3).param();
    let mut two = DeformAttnParams::new(2, 1, 1, 2, 2, &mut init).unwrap();
    two.value_proj = one.value_proj.clone();
    two.output_proj = one.output_proj.clone();
    two.offset_pred.bias = Tensor::full(&[4], 0.3).param();
    two.weight_pred.bias = Tensor::new(vec![2.0, -1.0], &[2]).unwrap().param();
    let a = msdeform_attn(&seq.tokens, &seq.ref_points, &seq.tokens, &seq.levels, &one).unwrap();
    let b = msdeform_attn(&seq.tokens, &seq.ref_points, &seq.tokens, &seq.levels, &two).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-14);
}

#[test]
fn attention_weights_normalize() {
    let (query, _, p) = tiny_setup(4);
    let a = attention_weights(&query, &p).unwrap();
    let ct = p.levels * p.points;
    for group in a.data().chunks(ct) {
        assert!((group.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn permuting_points_leaves_output_unchanged() {
    let (query, seq, p) = tiny_setup(5);
    let y = msdeform_attn(&query, &seq.ref_points, &seq.tokens, &seq.levels, &p).unwrap();
    // Reverse the point order within every (head, level) group.
    let (nl, nt, m, d) = (p.levels, p.points, p.offset_pred.mid(), 4);
    let perm: Vec<usize> = (0..p.heads * nl * nt).map(|i| i - i % nt + (nt - 1 - i % nt)).collect();
    let permute_rows = |t: &Tensor, width: usize, group: usize| {
        let mut out = vec![0.0; t.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * group * width..(dst + 1) * group * width]
                .copy_from_slice(&t.data()[src * group * width..(src + 1) * group * width]);
        }
        Tensor::new(out, t.shape()).unwrap()
    };
    let mut q = p.clone();
    q.offset_pred.expand = permute_rows(&p.offset_pred.expand, m, 2);
    q.offset_pred.bias = permute_rows(&p.offset_pred.bias, 1, 2);
    q.weight_pred.expand = permute_rows(&p.weight_pred.expand, m, 1);
    q.weight_pred.bias = permute_rows(&p.weight_pred.bias, 1, 1);
    let z = msdeform_attn(&query, &seq.ref_points, &seq.tokens, &seq.levels, &q).unwrap();
    assert_eq!(z.shape(), &[2, 13, d]);
    assert!(y.max_abs_diff(&z) < 1e-13);
}

#[test]
fn in_bounds_head_output_is_convex() {
    let mut init = Init::new(6);
    let maps = vec![init.uniform(&[1, 2, 4, 4], 1.0).add_scalar(2.0)];
    let seq = flatten_pyramid(&maps).unwrap();
    let levels = &seq.levels;
    let q = seq.levels.tokens();
    let logits = init.uniform(&[1, q, 1, 1, 3], 2.0).softmax(4).unwrap();
    // Locations strictly inside the map.
    let locs = init.uniform(&[1, q, 1, 1, 3, 2], 1.4).add_scalar(1.5);
    let y = ms_deform_sample(&seq.tokens, levels, &locs, &logits).unwrap();
    assert!(y.data().iter().all(|v| (1.0..=3.0).contains(v)));
}

#[test]
fn zeroed_residual_branches_make_identity() {
    let mut init = Init::new(7);
    let maps = vec![init.uniform(&[1, 8, 4, 4], 1.0), init.uniform(&[1, 8, 2, 2], 1.0)];
    let seq = flatten_pyramid(&maps).unwrap();
    let mut lde = Lde::new(8, 2, &EncoderConfig::default(), &mut init).unwrap();
    for layer in &mut lde.layers {
        layer.attn.output_proj.zero_expand();
        layer.ffn2.zero_expand();
    }
    let out = lde_encode(&seq, 2, &lde).unwrap();
    assert_eq!(out.tokens.data(), seq.tokens.data());
}

#[test]
fn one_layer_equals_manual_composition() {
    let mut init = Init::new(8);
    let maps = vec![init.uniform(&[2, 8, 4, 4], 1.0), init.uniform(&[2, 8, 2, 2], 1.0)];
    let seq = flatten_pyramid(&maps).unwrap();
    let lde = Lde::new(8, 2, &EncoderConfig::default(), &mut init).unwrap();
    let out = lde_encode(&seq, 1, &lde).unwrap();

    let l = &lde.layers[0];
    let pos = lde.positions(&seq.levels).unwrap();
    let x = &seq.tokens;
    let qn = layer_norm(x, &l.norm1).unwrap();
    let a = msdeform_attn(&qn.add(&pos).unwrap(), &seq.ref_points, &qn, &seq.levels, &l.attn).unwrap();
    let x1 = x.add(&a).unwrap();
    let h = lr_linear(&layer_norm(&x1, &l.norm2).unwrap(), &l.ffn1).unwrap().relu();
    let x2 = x1.add(&lr_linear(&h, &l.ffn2).unwrap()).unwrap();
    assert_eq!(out.tokens.data(), x2.data());
}

#[test]
fn encoder_preserves_shape_for_any_depth() {
    let mut init = Init::new(9);
    let maps = vec![init.uniform(&[1, 8, 2, 2], 1.0)];
    let seq = flatten_pyramid(&maps).unwrap();
    let cfg = EncoderConfig {
        layers: 3,
        ..EncoderConfig::default()
    };
    let lde = Lde::new(8, 1, &cfg, &mut init).unwrap();
    for layers in 0..=3 {
        assert_eq!(lde_encode(&seq, layers, &lde).unwrap().tokens.shape(), &[1, 4, 8]);
    }
    assert!(lde_encode(&seq, 4, &lde).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let (query, seq, p) = tiny_setup(10);
    let mut init = Init::new(11);
    let probe = init.uniform(&[2, 13, 4], 1.0);
    let opts = GradCheckOptions::default();
    let r = gradient_check(
        |t| {
            let mut pp = p.clone();
            pp.offset_pred.expand = t[2].clone();
            let y = msdeform_attn(&t[0], &seq.ref_points, &t[1], &seq.levels, &pp)?;
            Ok(y.mul(&probe)?.sum())
        },
        &[query, seq.tokens.clone(), p.offset_pred.expand.detach()],
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
