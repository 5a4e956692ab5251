use std::sync::Mutex;

use super::{join, nchw, Module, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Batch statistics; running estimates are updated.
    #[default]
    Train,
    /// Stored running estimates.
    Running,
    /// Batch statistics without touching the running estimates.
    Batch,
}

impl NormMode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, NormMode::Train | NormMode::Batch)
    }
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Tensor,
    var: Tensor,
}

/// Per-channel batch normalization. Running statistics live behind a mutex
/// so forward passes only need `&self`; they are updated in training mode.
#[derive(Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
    stats: Mutex<RunningStats>,
}

impl Clone for BatchNormParams {
    fn clone(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            eps: self.eps,
            momentum: self.momentum,
            stats: Mutex::new(self.stats.lock().expect("bn stats").clone()),
        }
    }
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]).param(),
            beta: Tensor::zeros(&[channels]).param(),
            eps: 1e-5,
            momentum: 0.1,
            stats: Mutex::new(RunningStats {
                mean: Tensor::zeros(&[channels]),
                var: Tensor::ones(&[channels]),
            }),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn running_mean(&self) -> Vec<f64> {
        self.stats.lock().expect("bn stats").mean.to_vec()
    }

    pub fn running_var(&self) -> Vec<f64> {
        self.stats.lock().expect("bn stats").var.to_vec()
    }

    /// Fold batch statistics over `count` values into the running estimates.
    fn update_running(&self, mean: &[f64], var: &[f64], count: usize) -> Result<()> {
        let mut stats = self.stats.lock().expect("bn stats");
        let mom = self.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        let rm: Vec<f64> = stats.mean.data().iter().zip(mean).map(|(r, m)| (1.0 - mom) * r + mom * m).collect();
        let rv: Vec<f64> = stats.var.data().iter().zip(var).map(|(r, v)| (1.0 - mom) * r + mom * v * unbias).collect();
        stats.mean = Tensor::new(rm, &[mean.len()])?;
        stats.var = Tensor::new(rv, &[var.len()])?;
        Ok(())
    }

    pub fn set_running(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract("running variance must be non-negative".into()));
        }
        let mut s = self.stats.lock().expect("bn stats");
        s.mean = Tensor::new(mean, &[c])?;
        s.var = Tensor::new(var, &[c])?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        batch_norm(x, self, mode)
    }
}

impl Module for BatchNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        let s = self.stats.lock().expect("bn stats");
        f(&join(prefix, "running_mean"), &s.mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &s.var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
        let s = self.stats.get_mut().expect("bn stats");
        f(&join(prefix, "running_mean"), &mut s.mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut s.var, ParamKind::Buffer);
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Batch-statistic modes normalize with the biased batch variance; `Train`
/// also folds the unbiased variance into the running estimates, `Running`
/// uses those estimates.
pub fn batch_norm(x: &Tensor, p: &BatchNormParams, mode: NormMode) -> Result<Tensor> {
    let (n, c, h, w) = nchw("batch_norm", x)?;
    if c != p.channels() {
        return Err(Error::shape("batch_norm", x.shape(), p.gamma.shape()));
    }
    let plane = h * w;
    let count = n * plane;
    if count == 0 {
        return Err(Error::Contract("batch_norm on an empty batch".into()));
    }
    let xd = x.data();
    let at = move |b: usize, ch: usize| (b * c + ch) * plane;

    let batch_stats = mode.uses_batch_stats();
    let (mean, var) = if batch_stats {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xd[at(b, ch)..at(b, ch) + plane].iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for b in 0..n {
                v += xd[at(b, ch)..at(b, ch) + plane].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count as f64;
        }
        if mode == NormMode::Train {
            p.update_running(&mean, &var, count)?;
        }
        (mean, var)
    } else {
        let stats = p.stats.lock().expect("bn stats");
        (stats.mean.to_vec(), stats.var.to_vec())
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let gamma = p.gamma.data();
    let beta = p.beta.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = at(b, ch)..at(b, ch) + plane;
            for i in r {
                let xh = (xd[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }

    let gamma_t = p.gamma.clone();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        Box::new(move |g, need| {
            let gamma = gamma_t.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    for i in at(b, ch)..at(b, ch) + plane {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                let m = count as f64;
                for ch in 0..c {
                    let k = gamma[ch] * inv_std[ch];
                    for b in 0..n {
                        for i in at(b, ch)..at(b, ch) + plane {
                            gx[i] = if batch_stats {
                                k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                gx
            });
            vec![gx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
        }),
    ))
}

/// Affine layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[dim]).param(),
            beta: Tensor::zeros(&[dim]).param(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self)
    }
}

impl Module for LayerNormParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Trainable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Trainable);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Trainable);
    }
}

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let d = p.gamma.numel();
    if x.shape().last() != Some(&d) {
        return Err(Error::shape("layer_norm", x.shape(), p.gamma.shape()));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut inv = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let m = row.iter().sum::<f64>() / d as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d as f64;
        let is = 1.0 / (v + p.eps).sqrt();
        inv[r] = is;
        for j in 0..d {
            let xh = (row[j] - m) * is;
            xhat[r * d + j] = xh;
            out[r * d + j] = gamma[j] * xh + beta[j];
        }
    }
    let gamma_t = p.gamma.clone();
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), p.gamma.clone(), p.beta.clone()],
        Box::new(move |g, need| {
            let gamma = gamma_t.data();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut gx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for j in 0..d {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gamma[j];
                    s1 += dxh;
                    s2 += dxh * xr[j];
                }
                for j in 0..d {
                    let dxh = gr[j] * gamma[j];
                    gx[r * d + j] = inv[r] * (dxh - s1 / d as f64 - xr[j] * s2 / d as f64);
                }
            }
            vec![need[0].then_some(gx), need[1].then_some(dgamma), need[2].then_some(dbeta)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn training_stats_are_standardized() {
        let mut init = Init::new(4);
        let x = init.uniform(&[2, 3, 4, 5], 3.0).add_scalar(1.5);
        let p = BatchNormParams::new(3);
        let y = batch_norm(&x, &p, NormMode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 3 + ch) * 20..(b * 3 + ch + 1) * 20].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 40.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
        // running stats moved toward the batch statistics
        assert!(p.running_mean().iter().all(|m| *m != 0.0));
    }

    #[test]
    fn eval_identity_stats() {
        let mut init = Init::new(5);
        let x = init.uniform(&[1, 2, 3, 3], 1.0);
        let p = BatchNormParams::new(2);
        let y = batch_norm(&x, &p, NormMode::Running).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut init = Init::new(6);
        let x = init.uniform(&[1, 2, 3, 3], 1.0);
        let mut p = BatchNormParams::new(2);
        p.gamma = Tensor::zeros(&[2]).param();
        p.beta = Tensor::new(vec![0.25, -4.0], &[2]).unwrap().param();
        let y = batch_norm(&x, &p, NormMode::Train).unwrap();
        assert!(y.data()[..9].iter().all(|v| *v == 0.25));
        assert!(y.data()[9..].iter().all(|v| *v == -4.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let p = BatchNormParams::new(2);
        assert!(matches!(batch_norm(&Tensor::zeros(&[0, 2, 3, 3]), &p, NormMode::Train), Err(Error::Contract(_))));
        assert!(batch_norm(&Tensor::zeros(&[1, 3, 3, 3]), &p, NormMode::Train).is_err());
    }

    #[test]
    fn layer_norm_rows() {
        let mut init = Init::new(8);
        let x = init.uniform(&[3, 6], 2.0);
        let y = layer_norm(&x, &LayerNormParams::new(6)).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 6..(r + 1) * 6];
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
