use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{backward, Tensor};
use crate::error::{Error, Result};

/// Settings for [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per input (sampled with `seed`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// A coordinate is treated as a kink (and skipped) when the forward and
    /// backward one-sided differences disagree by more than this, relative.
    pub kink_tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: None,
            seed: 0,
            kink_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compare reverse-mode gradients of the scalar function `f` against
/// central differences at `inputs`.
///
/// The error of a coordinate is `|analytic − cd| / max(|analytic|, |cd|, 1e-8)`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::param).collect();
    let out = f(&leaves)?;
    let f0 = out.item()?;
    if !f0.is_finite() {
        return Err(Error::Numeric(format!("gradient_check: f(x) = {f0}")));
    }
    let grads = backward(&out)?;

    let h = opts.step;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let consts: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();

    for (idx, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[idx]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < x.numel() => {
                let mut c = sample(&mut rng, x.numel(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..x.numel()).collect(),
        };
        for j in coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = x.to_vec();
                data[j] += delta;
                let mut args = consts.clone();
                args[idx] = Tensor::new(data, x.shape())?;
                let v = f(&args)?.item()?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Numeric(format!("gradient_check: non-finite value at input {idx}[{j}]")))
                }
            };
            let (fp, fm) = (eval(h)?, eval(-h)?);
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            if (fwd - bwd).abs() > opts.kink_tolerance * fwd.abs().max(bwd.abs()).max(1.0) {
                report.skipped_kinks += 1;
                continue;
            }
            let cd = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((idx, j));
            }
        }
    }
    Ok(report)
}
