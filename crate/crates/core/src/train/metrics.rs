//! Pixel-count metrics. Every ratio with a zero denominator is defined as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `p_ab`: pixels of true class `a` predicted as class `b` (1 = crack).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub p_00: u64,
    pub p_01: u64,
    pub p_10: u64,
    pub p_11: u64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall.
pub fn f1_score(p: f64, r: f64) -> f64 {
    ratio(2.0 * p * r, p + r)
}

impl ConfusionCounts {
    pub fn from_masks(mask: &[bool], label: &[bool]) -> Result<Self> {
        if mask.len() != label.len() {
            return Err(Error::shape("confusion counts", &[mask.len()], &[label.len()]));
        }
        let mut c = Self::default();
        for (&m, &y) in mask.iter().zip(label) {
            match (y, m) {
                (false, false) => c.p_00 += 1,
                (false, true) => c.p_01 += 1,
                (true, false) => c.p_10 += 1,
                (true, true) => c.p_11 += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.p_00 + self.p_01 + self.p_10 + self.p_11
    }

    pub fn precision(&self) -> f64 {
        ratio(self.p_11 as f64, (self.p_11 + self.p_01) as f64)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.p_11 as f64, (self.p_11 + self.p_10) as f64)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }

    /// Mean of background and crack intersection-over-union.
    pub fn miou(&self) -> f64 {
        let bg = ratio(self.p_00 as f64, (self.p_00 + self.p_01 + self.p_10) as f64);
        let fg = ratio(self.p_11 as f64, (self.p_11 + self.p_10 + self.p_01) as f64);
        (bg + fg) / 2.0
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.p_00 += o.p_00;
        self.p_01 += o.p_01;
        self.p_10 += o.p_10;
        self.p_11 += o.p_11;
    }
}

/// `(P, R, F1)` of a binary mask against a label.
pub fn prf1(mask: &[bool], label: &[bool]) -> Result<(f64, f64, f64)> {
    let c = ConfusionCounts::from_masks(mask, label)?;
    Ok((c.precision(), c.recall(), c.f1()))
}

pub fn miou(mask: &[bool], label: &[bool]) -> Result<f64> {
    Ok(ConfusionCounts::from_masks(mask, label)?.miou())
}

/// `0.01, 0.02, …, 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

/// How the dataset-level F1 at a shared threshold is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdsMode {
    /// F1 of the confusion counts pooled over all images.
    #[default]
    Pooled,
    /// Mean of per-image F1 scores.
    MeanF1,
}

/// Confusion counts of every image at every threshold, `mask = prob ≥ t`.
#[derive(Debug, Clone)]
pub struct ThresholdSweep {
    /// Ascending, distinct.
    pub thresholds: Vec<f64>,
    /// `counts[image][threshold]`
    pub counts: Vec<Vec<ConfusionCounts>>,
}

impl ThresholdSweep {
    /// Counts are obtained in one pass per image: each pixel is binned by
    /// the number of thresholds it clears, and cumulative sums over the bins
    /// give the counts at every threshold.
    pub fn new(probs: &[&[f64]], labels: &[&[bool]], thresholds: &[f64]) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::Contract("threshold list is empty".into()));
        }
        if thresholds.iter().any(|t| t.is_nan()) {
            return Err(Error::Contract("threshold list contains NaN".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::Contract(format!("{} probability maps for {} labels", probs.len(), labels.len())));
        }
        let mut ts = thresholds.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let nt = ts.len();
        let counts = probs
            .iter()
            .zip(labels)
            .map(|(p, y)| {
                if p.len() != y.len() {
                    return Err(Error::shape("threshold sweep", &[p.len()], &[y.len()]));
                }
                // bins[k][class]: pixels that clear exactly the first k thresholds
                let mut bins = vec![[0u64; 2]; nt + 1];
                for (&pv, &yv) in p.iter().zip(*y) {
                    let k = ts.partition_point(|&t| t <= pv);
                    bins[k][yv as usize] += 1;
                }
                let (neg, pos) = bins.iter().fold((0, 0), |(a, b), c| (a + c[0], b + c[1]));
                let mut out = vec![ConfusionCounts::default(); nt];
                let (mut fp, mut tp) = (0, 0);
                for i in (0..nt).rev() {
                    fp += bins[i + 1][0];
                    tp += bins[i + 1][1];
                    out[i] = ConfusionCounts {
                        p_00: neg - fp,
                        p_01: fp,
                        p_10: pos - tp,
                        p_11: tp,
                    };
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(Self { thresholds: ts, counts })
    }

    pub fn images(&self) -> usize {
        self.counts.len()
    }

    /// Dataset F1 at threshold index `i`.
    pub fn dataset_f1(&self, i: usize, mode: OdsMode) -> f64 {
        match mode {
            OdsMode::Pooled => {
                let mut c = ConfusionCounts::default();
                for img in &self.counts {
                    c += img[i];
                }
                c.f1()
            }
            OdsMode::MeanF1 => {
                if self.counts.is_empty() {
                    return 0.0;
                }
                self.counts.iter().map(|img| img[i].f1()).sum::<f64>() / self.counts.len() as f64
            }
        }
    }

    /// Best shared threshold: `(F1, t)`.
    pub fn ods(&self, mode: OdsMode) -> (f64, f64) {
        (0..self.thresholds.len())
            .map(|i| (self.dataset_f1(i, mode), self.thresholds[i]))
            .fold((f64::NEG_INFINITY, 0.0), |best, x| if x.0 > best.0 { x } else { best })
    }

    /// Mean over images of each image's best F1.
    pub fn ois(&self) -> f64 {
        if self.counts.is_empty() {
            return 0.0;
        }
        let sum: f64 = self
            .counts
            .iter()
            .map(|img| img.iter().map(ConfusionCounts::f1).fold(f64::NEG_INFINITY, f64::max))
            .sum();
        sum / self.counts.len() as f64
    }
}

pub fn ods(probs: &[&[f64]], labels: &[&[bool]], thresholds: &[f64], mode: OdsMode) -> Result<f64> {
    Ok(ThresholdSweep::new(probs, labels, thresholds)?.ods(mode).0)
}

pub fn ois(probs: &[&[f64]], labels: &[&[bool]], thresholds: &[f64]) -> Result<f64> {
    Ok(ThresholdSweep::new(probs, labels, thresholds)?.ois())
}

/// Everything reported for a set of probability maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub miou: f64,
    pub ods: f64,
    pub ods_threshold: f64,
    pub ois: f64,
}

/// P/R/F1/mIoU from pooled counts at `threshold`, plus ODS and OIS.
pub fn evaluate(probs: &[&[f64]], labels: &[&[bool]], threshold: f64, thresholds: &[f64], mode: OdsMode) -> Result<MetricReport> {
    let sweep = ThresholdSweep::new(probs, labels, thresholds)?;
    let mut c = ConfusionCounts::default();
    for (p, y) in probs.iter().zip(labels) {
        let mask: Vec<bool> = p.iter().map(|&v| v >= threshold).collect();
        c += ConfusionCounts::from_masks(&mask, y)?;
    }
    let (ods, ods_threshold) = sweep.ods(mode);
    Ok(MetricReport {
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        miou: c.miou(),
        ods,
        ods_threshold,
        ois: sweep.ois(),
    })
}
