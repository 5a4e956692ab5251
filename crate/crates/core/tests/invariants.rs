//! Property tests for the structural invariants of each module.

use std::path::Path;

use nalgebra::DMatrix;
use proptest::prelude::*;
use stairseg::data::{Checkpoint, Precision, RunConfig};
use stairseg::lde::{attention_weights, flatten_pyramid, unflatten, DeformAttnParams};
use stairseg::lrds::{default_mid, factorize_response, lr_linear, ConvKind, ConvSpec, ConvUnit, LRLinearParams};
use stairseg::model::{Model, ModelConfig};
use stairseg::nn::{Init, NormMode};
use stairseg::scfm::{paf_fuse, paf_gate, PAFParams};
use stairseg::train::{ConfusionCounts, LossConfig, OdsMode, OptimConfig, OptimState, ThresholdSweep};
use stairseg::{backward, Tensor};

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..5)
}

fn kind_strategy() -> impl Strategy<Value = ConvKind> {
    prop::sample::select(ConvKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_length_matches_shape(shape in shape_strategy(), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(vec![0.5; n], &shape).unwrap();
        prop_assert_eq!(t.numel(), t.data().len());
        prop_assert!(Tensor::new(vec![0.5; n + extra], &shape).is_err());
        prop_assert_eq!(t.reshape(&[n]).unwrap().numel(), n);
    }

    #[test]
    fn gradients_match_leaf_shapes(shape in shape_strategy(), seed in 0u64..1000) {
        let mut init = Init::new(seed);
        let x = init.uniform(&shape, 1.0).param();
        let y = init.uniform(&shape, 1.0).param();
        let c = init.uniform(&shape, 1.0);
        let loss = x.mul(&y).unwrap().add(&c).unwrap().sigmoid().sum();
        let g = backward(&loss).unwrap();
        for leaf in [&x, &y] {
            prop_assert_eq!(g.get(leaf).unwrap().shape(), leaf.shape());
        }
        // A constant input is never a differentiable leaf.
        prop_assert!(!g.contains(&c));
        prop_assert_eq!(g.len(), 2);
    }

    #[test]
    fn shared_subexpressions_accumulate_once(xs in prop::collection::vec(-3.0f64..3.0, 1..12)) {
        // f = Σ (x·x + x) reaches x along three paths; df/dx = 2x + 1.
        let x = Tensor::new(xs.clone(), &[xs.len()]).unwrap().param();
        let f = x.mul(&x).unwrap().add(&x).unwrap().sum();
        let g = backward(&f).unwrap();
        for (gv, xv) in g.get(&x).unwrap().data().iter().zip(&xs) {
            prop_assert!((gv - (2.0 * xv + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn default_bottleneck_is_narrower(c_in in 5usize..512, c_out in 5usize..512) {
        let m = default_mid(c_in, c_out);
        prop_assert!(m >= 4 && m < c_in.min(c_out));
        prop_assert_eq!(ConvSpec::new(c_in, c_out, 3, 1).mid_width(), m);
    }

    #[test]
    fn conv_units_keep_the_geometry_contract(
        kind in kind_strategy(),
        c_in in 1usize..9,
        c_out in 1usize..9,
        k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3,
        h in 5usize..10,
        w in 5usize..10,
        seed in 0u64..100,
    ) {
        let mut init = Init::new(seed);
        let mut spec = ConvSpec::new(c_in, c_out, k, stride);
        spec.mid = Some(c_in.min(c_out).max(2) / 2);
        let unit = ConvUnit::new(kind, spec, &mut init).unwrap();
        let y = unit.forward(&init.uniform(&[2, c_in, h, w], 1.0), NormMode::Train).unwrap();
        let out = |n: usize| (n + 2 * (k / 2) - k) / stride + 1;
        prop_assert_eq!(y.shape(), &[2, c_out, out(h), out(w)][..]);
        prop_assert!(y.all_finite());
    }

    #[test]
    fn low_rank_linear_shapes(d_in in 1usize..16, d_out in 1usize..16, m in 1usize..6, rows in 1usize..5) {
        let mut init = Init::new(1);
        let p = LRLinearParams::new(d_in, d_out, m, &mut init);
        prop_assert_eq!((p.d_in(), p.d_out(), p.mid()), (d_in, d_out, m));
        let y = lr_linear(&init.uniform(&[rows, d_in], 1.0), &p).unwrap();
        prop_assert_eq!(y.shape(), &[rows, d_out][..]);
    }

    #[test]
    fn factorization_rank_and_error(e in 1usize..7, c in 1usize..3, probes in 8usize..24, seed in 0u64..500) {
        let d = 9 * c + 1;
        let mut init = Init::new(seed);
        let w = DMatrix::from_row_slice(e, d, init.uniform(&[e, d], 1.0).data());
        let mut t = DMatrix::from_row_slice(d, probes, init.uniform(&[d, probes], 1.0).data());
        t.row_mut(d - 1).fill(1.0);
        prop_assert!(factorize_response(&w, &t, e + 1).is_err());
        let mut last = f64::INFINITY;
        for e0 in 1..=e {
            let f = factorize_response(&w, &t, e0).unwrap();
            prop_assert_eq!(f.rank(), e0);
            let err = f.mean_sq_error(&w, &t);
            prop_assert!(err >= -1e-12 && err <= last + 1e-9, "rank {} error {} after {}", e0, err, last);
            last = err;
            // The bias absorbs the mean response that the rank-e0 map drops.
            let r = f.reconstruct(&t);
            let y = &w * &t;
            let mean_gap = (r.column_mean() - y.column_mean()).abs().max();
            prop_assert!(mean_gap < 1e-9, "mean response off by {}", mean_gap);
        }
        prop_assert!(last < 1e-12);
    }

    #[test]
    fn token_sequences_cover_the_pyramid(
        dims in prop::collection::vec((1usize..6, 1usize..6), 1..5),
        ch in 1usize..5,
    ) {
        let mut init = Init::new(3);
        let maps: Vec<Tensor> = dims.iter().map(|&(h, w)| init.uniform(&[2, ch, h, w], 1.0)).collect();
        let seq = flatten_pyramid(&maps).unwrap();
        let q: usize = dims.iter().map(|(h, w)| h * w).sum();
        prop_assert_eq!(seq.tokens.shape(), &[2, q, ch][..]);
        prop_assert_eq!(seq.levels.tokens(), q);
        prop_assert_eq!(seq.ref_points.len(), q);
        prop_assert_eq!(seq.level_index.len(), q);
        for (i, r) in seq.ref_points.iter().enumerate() {
            prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            let l = seq.level_index[i];
            prop_assert!(i >= seq.levels.starts[l] && i < seq.levels.starts[l] + dims[l].0 * dims[l].1);
        }
        let back = unflatten(&seq.tokens, &seq.levels).unwrap();
        for (a, b) in maps.iter().zip(&back) {
            prop_assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn attention_weights_normalize_per_head(
        heads in 1usize..4,
        per_head in 1usize..4,
        levels in 1usize..4,
        points in 1usize..5,
        seed in 0u64..200,
    ) {
        let d = heads * per_head;
        let mut init = Init::new(seed);
        let mut p = DeformAttnParams::new(d, heads, levels, points, 3, &mut init).unwrap();
        p.weight_pred.expand = init.uniform(p.weight_pred.expand.shape(), 2.0).param();
        let a = attention_weights(&init.uniform(&[1, 7, d], 2.0), &p).unwrap();
        prop_assert_eq!(a.numel(), 7 * heads * levels * points);
        for chunk in a.data().chunks(levels * points) {
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(chunk.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pixel_attention_gate_and_bounds(kind in kind_strategy(), c in 1usize..6, seed in 0u64..300) {
        let mut init = Init::new(seed);
        let p = PAFParams::new(kind, c, &mut init).unwrap();
        let (a, b) = (init.uniform(&[2, c, 3, 4], 1.0), init.uniform(&[2, c, 3, 4], 1.0));
        let s = paf_gate(&a, &b, &p, NormMode::Train).unwrap();
        prop_assert_eq!(s.shape(), &[2, 1, 3, 4][..]);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let f = paf_fuse(&a, &b, &p, NormMode::Train).unwrap();
        for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(f.data()) {
            prop_assert!(z >= x.min(y) && z <= x.max(y));
        }
    }

    #[test]
    fn confusion_counts_partition_pixels(bits in prop::collection::vec((any::<bool>(), any::<bool>()), 0..200)) {
        let (mask, label): (Vec<bool>, Vec<bool>) = bits.iter().copied().unzip();
        let c = ConfusionCounts::from_masks(&mask, &label).unwrap();
        prop_assert_eq!(c.total(), bits.len() as u64);
        prop_assert_eq!(c.p_11 + c.p_10, label.iter().filter(|&&y| y).count() as u64);
        prop_assert_eq!(c.p_11 + c.p_01, mask.iter().filter(|&&m| m).count() as u64);
        for v in [c.precision(), c.recall(), c.f1(), c.miou()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn threshold_sweeps_are_sorted_and_bounded(
        images in prop::collection::vec(prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..40), 1..5),
        ts in prop::collection::vec(0.01f64..0.99, 1..20),
    ) {
        let probs: Vec<Vec<f64>> = images.iter().map(|im| im.iter().map(|p| p.0).collect()).collect();
        let labels: Vec<Vec<bool>> = images.iter().map(|im| im.iter().map(|p| p.1).collect()).collect();
        let pr: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let lr: Vec<&[bool]> = labels.iter().map(Vec::as_slice).collect();
        let s = ThresholdSweep::new(&pr, &lr, &ts).unwrap();
        prop_assert!(s.thresholds.windows(2).all(|w| w[0] < w[1]));
        for (img, n) in s.counts.iter().zip(&probs) {
            for c in img {
                prop_assert_eq!(c.total(), n.len() as u64);
                prop_assert!((0.0..=1.0).contains(&c.precision()) && (0.0..=1.0).contains(&c.recall()));
            }
            // Raising the threshold never adds predicted pixels.
            prop_assert!(img.windows(2).all(|w| w[1].p_11 + w[1].p_01 <= w[0].p_11 + w[0].p_01));
        }
        prop_assert!(s.ois() >= s.ods(OdsMode::MeanF1).0 - 1e-15);
    }

    #[test]
    fn loss_weights_validate(alpha in -1.0f64..2.0, beta in -1.0f64..2.0) {
        let cfg = LossConfig { alpha, beta, ..LossConfig::default() };
        prop_assert_eq!(cfg.validate().is_ok(), alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0);
    }

    #[test]
    fn optimizer_moments_follow_parameters(lens in prop::collection::vec(1usize..20, 1..5), steps in 1u64..4) {
        let mut state = OptimState::new(OptimConfig::default());
        let mut params: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.3; n]).collect();
        let grads: Vec<Vec<f64>> = lens.iter().map(|&n| vec![0.1; n]).collect();
        for _ in 0..steps {
            let mut views: Vec<&mut [f64]> = params.iter_mut().map(Vec::as_mut_slice).collect();
            let g: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            state.update(&mut views, &g).unwrap();
        }
        prop_assert_eq!(state.step, steps);
        for ((m, v), &n) in state.m.iter().zip(&state.v).zip(&lens) {
            prop_assert_eq!((m.len(), v.len()), (n, n));
            prop_assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn run_config_fields_override(
        lr in 1e-5f64..1e-2,
        epochs in 1usize..500,
        alpha in 0.0f64..1.0,
        threshold in 0.05f64..0.95,
        seed in 0u64..u64::from(u32::MAX),
    ) {
        let text = format!(
            "seed = {seed}\n[train]\nlr = {lr:e}\nepochs = {epochs}\ndecay_epoch = {epochs}\n[loss]\nalpha = {alpha:e}\n[eval]\nthreshold = {threshold:e}\n"
        );
        let cfg = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!((cfg.seed, cfg.train.lr, cfg.train.epochs), (seed, lr, epochs));
        prop_assert_eq!((cfg.loss.alpha, cfg.eval.threshold), (alpha, threshold));
        prop_assert_eq!(cfg.loss.beta, 0.25);
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_round_trip_reproduces_outputs(kind in kind_strategy(), seed in 0u64..1000) {
        let mut cfg = ModelConfig::default().with_conv(kind);
        cfg.backbone.stage_blocks = [1, 1, 1, 1];
        cfg.backbone.stage_channels = [8, 12, 16, 24];
        cfg.backbone.stem_channels = 8;
        cfg.backbone.unified_channels = 8;
        cfg.encoder.heads = 2;
        let model = Model::new(&cfg, seed).unwrap();
        let probe = Init::new(seed).uniform(&[1, 3, 64, 64], 0.5).add_scalar(0.5);
        model.forward(&probe, NormMode::Train).unwrap();
        let path = Path::new("probe.ckpt");
        let bytes = Checkpoint::from_model(&model, seed, Precision::F64).to_bytes();
        let mut back = Model::new(&cfg, seed + 1).unwrap();
        Checkpoint::from_bytes(&bytes, path).unwrap().apply(&mut back, path).unwrap();
        for mode in [NormMode::Running, NormMode::Batch] {
            let (a, b) = (model.forward(&probe, mode).unwrap(), back.forward(&probe, mode).unwrap());
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
