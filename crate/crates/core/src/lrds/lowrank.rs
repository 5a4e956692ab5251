use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::profiler::{CostEntry, CostReport};

/// Rank-`e0` factorization of a layer's responses: `ŷ = J·W1·t + b`.
#[derive(Debug, Clone)]
pub struct LowRankFactorization {
    /// `[e, e0]`
    pub j: DMatrix<f64>,
    /// `[e0, k²c+1]`, a bank of `e0` filters.
    pub w1: DMatrix<f64>,
    /// `[e]`
    pub b: DVector<f64>,
    /// Mean response over the probes.
    pub mean: DVector<f64>,
    /// Singular values of the centered responses, descending.
    pub singular_values: Vec<f64>,
}

impl LowRankFactorization {
    pub fn rank(&self) -> usize {
        self.j.ncols()
    }

    /// Approximate responses for the probe columns `t` (`[k²c+1, P]`).
    pub fn reconstruct(&self, t: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.j * (&self.w1 * t);
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    /// `‖Ŷ − Y‖²_F / P` against the exact responses `W·T`.
    pub fn mean_sq_error(&self, w: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
        let diff = self.reconstruct(t) - w * t;
        diff.norm_squared() / t.ncols().max(1) as f64
    }
}

/// Factor the filter bank `w` (`[e, k²c+1]`, bias in the last column) into
/// `e0` filters plus a recombination, from its responses on the probe
/// columns `t` (`[k²c+1, P]`).
///
/// The subspace is spanned by the top `e0` left singular vectors `K` of the
/// centered responses, with `J = K`, `W1 = Kᵀ·W` and `b = y1 − J·Kᵀ·y1`.
/// With fewer independent probes than `e0`, the surplus directions are an
/// arbitrary orthonormal completion.
pub fn factorize_response(w: &DMatrix<f64>, t: &DMatrix<f64>, e0: usize) -> Result<LowRankFactorization> {
    let e = w.nrows();
    if w.ncols() != t.nrows() {
        return Err(Error::shape("factorize_response", &[e, w.ncols()], &[t.nrows(), t.ncols()]));
    }
    if e0 == 0 || e0 > e {
        return Err(Error::Contract(format!("rank {e0} must be in 1..={e}")));
    }
    if t.ncols() == 0 {
        return Err(Error::Contract("factorize_response needs at least one probe".into()));
    }
    let y = w * t;
    let mean = y.column_mean();
    let mut centered = y.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    // Pad with zero columns so the left factor is always a full e×e basis.
    if centered.ncols() < e {
        centered = centered.resize_horizontally(e, 0.0);
    }
    let svd = centered.svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = DMatrix::from_fn(e, e0, |r, c| u[(r, order[c])]);
    let w1 = k.transpose() * w;
    let b = &mean - &k * (k.transpose() * &mean);
    Ok(LowRankFactorization {
        j: k,
        w1,
        b,
        mean,
        singular_values: order.iter().map(|&i| svd.singular_values[i]).collect(),
    })
}

/// Multiply-accumulates per output position of a `k×k`, `c → e` layer,
/// direct versus factored through `e0` filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrCost {
    pub full: u64,
    pub lr: u64,
    pub ratio: f64,
}

pub fn lr_cost(e: usize, e0: usize, k: usize, c: usize) -> LrCost {
    let full = (e * k * k * c) as u64;
    let lr = (e0 * k * k * c + e * e0) as u64;
    LrCost {
        full,
        lr,
        ratio: lr as f64 / full as f64,
    }
}

/// Per-stage parameters and MACs of a stride-1 LRDS block producing an
/// `h_out × w_out` map, bias adds excluded.
pub fn lrds_cost(c: usize, mid: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> CostReport {
    let hw = (h_out * w_out) as u64;
    let stage = |path: &str, kind: &str, params: usize| CostEntry::new(path, kind, params as u64, params as u64 * hw);
    let mut r = CostReport::default();
    r.push(stage("reduce", "conv1x1", c * mid));
    r.push(stage("depthwise", "depthwise", mid * k * k));
    r.push(stage("pointwise", "conv1x1", mid * mid));
    r.push(stage("expand", "conv1x1", mid * c_out));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn probes(d: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut t = random(d, p, seed);
        t.row_mut(d - 1).fill(1.0);
        t
    }

    #[test]
    fn full_rank_is_exact() {
        let w = random(6, 13, 1);
        let t = probes(13, 40, 2);
        let f = factorize_response(&w, &t, 6).unwrap();
        let err = (f.reconstruct(&t) - &w * &t).abs().max();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn constant_responses_reconstruct_to_mean() {
        let mut w = DMatrix::zeros(5, 10);
        for r in 0..5 {
            w[(r, 9)] = r as f64 - 1.5;
        }
        let t = probes(10, 12, 3);
        for e0 in 1..=5 {
            let f = factorize_response(&w, &t, e0).unwrap();
            let y = f.reconstruct(&t);
            for col in y.column_iter() {
                assert!((col - &f.mean).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_out_of_range_is_a_contract_error() {
        let w = random(4, 5, 4);
        let t = probes(5, 8, 5);
        assert!(matches!(factorize_response(&w, &t, 5), Err(Error::Contract(_))));
        assert!(matches!(factorize_response(&w, &t, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn few_probes_still_factor() {
        let w = random(8, 10, 6);
        let t = probes(10, 3, 7);
        let f = factorize_response(&w, &t, 6).unwrap();
        assert_eq!(f.rank(), 6);
        assert!(f.mean_sq_error(&w, &t) < 1e-20);
    }

    #[test]
    fn cost_formulas() {
        let c = lr_cost(64, 16, 3, 64);
        assert_eq!((c.full, c.lr), (36864, 10240));
        assert!((c.ratio - 0.2778).abs() < 1e-4);
        assert!((c.ratio - (16.0 / 64.0 + 16.0 / (9.0 * 64.0))).abs() < 1e-12);
        // e0 = e: ratio is 1 + e/(k²c), never a saving.
        let full_rank = lr_cost(8, 8, 3, 5);
        assert!((full_rank.ratio - (1.0 + 8.0 / 45.0)).abs() < 1e-12);
        assert!(full_rank.ratio >= 1.0);
        let tiny = lr_cost(4, 1, 1, 1);
        assert_eq!((tiny.full, tiny.lr), (4, 5));
    }

    #[test]
    fn lrds_cost_per_position() {
        let r = lrds_cost(64, 16, 64, 3, 1, 1);
        assert_eq!(r.total_macs(), 2448);
        let r8 = lrds_cost(64, 16, 64, 3, 8, 8);
        assert_eq!(r8.total_macs(), 2448 * 64);
        assert_eq!(r8.total_params(), 2448);
    }
}
