//! Domain features from convolutional statistics.
//!
//! A sample's domain feature stacks, for each extractor block, the per-channel
//! spatial mean and standard deviation of the low-attention half of `F−`.
//! The same module owns the domain enhancement entropy loss that pushes the
//! class readout of `F−` towards 0.5.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ExtractorTrace;
use crate::real::Real;
use crate::tensor::FeatureMap;

pub const STATS_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean and `sqrt(var + eps)` per channel.
pub fn channel_stats(f: &FeatureMap, eps: f64) -> ChannelStats {
    let n = f.plane_len() as f64;
    let mut mean = Vec::with_capacity(f.channels);
    let mut std = Vec::with_capacity(f.channels);
    for c in 0..f.channels {
        let x = f.channel(c);
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        mean.push(m);
        std.push((v + eps).sqrt());
    }
    ChannelStats { mean, std }
}

/// Indices of the `C/2` smallest attention values, in ascending attention
/// order; ties go to the lower channel index.
pub fn select_low_attention(attention: &[f64]) -> Result<Vec<usize>> {
    let c = attention.len();
    if c % 2 != 0 {
        return Err(Error::Config(format!(
            "low-attention selection needs an even channel count, got {c}"
        )));
    }
    let mut idx: Vec<usize> = (0..c).collect();
    idx.sort_by(|&i, &j| attention[i].total_cmp(&attention[j]).then(i.cmp(&j)));
    idx.truncate(c / 2);
    Ok(idx)
}

/// `df(x)`: block 1 means, block 1 stds, block 2 means, … computed on the
/// selected channels of `F−` (all channels when `select` is false).
pub fn domain_feature(trace: &ExtractorTrace, eps: f64, select: bool) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for b in &trace.blocks {
        let fm = b.f_minus();
        let stats = channel_stats(fm, eps);
        let chans: Vec<usize> = if select {
            select_low_attention(b.attention())?
        } else {
            (0..fm.channels).collect()
        };
        out.extend(chans.iter().map(|&c| stats.mean[c]));
        out.extend(chans.iter().map(|&c| stats.std[c]));
    }
    Ok(out)
}

/// Per-dimension z-score fitted on one epoch's full domain-feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::Clustering("cannot fit normalizer on empty set".into()));
        };
        let d = first.len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            if f.len() != d {
                return Err(Error::shape("ZScore::fit", d, f.len()));
            }
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                // Constant dimensions carry no information; leave them centred.
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(ZScore { mean, std })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, fs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        fs.iter().map(|f| self.apply(f)).collect()
    }
}

/// Form of the domain enhancement entropy loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `p ln p + (1−p) ln(1−p)`, minimized at `p = 0.5`.
    #[default]
    Symmetric,
    /// `p ln p` as literally written, minimized at `p = 1/e`.
    Literal,
}

const ENTROPY_CLAMP: f64 = 1e-7;

/// Per-sample loss and its derivative w.r.t. the logit `z`, `p = sigmoid(z)`.
pub fn entropy_loss_from_logit(z: f64, form: EntropyForm) -> (f64, f64) {
    let p = z.sigmoid();
    let pc = p.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
    let inside = pc == p;
    let (loss, dldp) = match form {
        EntropyForm::Symmetric => (
            pc * pc.ln() + (1.0 - pc) * (1.0 - pc).ln(),
            pc.ln() - (1.0 - pc).ln(),
        ),
        EntropyForm::Literal => (pc * pc.ln(), pc.ln() + 1.0),
    };
    let grad = if inside { dldp * p * (1.0 - p) } else { 0.0 };
    (loss, grad)
}

/// Batch-mean entropy loss on `F−` maps with head weights `wp`.
pub fn domain_entropy_loss(f_minus: &[FeatureMap], wp: &[f64], form: EntropyForm) -> Result<f64> {
    if f_minus.is_empty() {
        return Err(Error::shape("domain_entropy_loss", "non-empty batch", 0));
    }
    let mut total = 0.0;
    for f in f_minus {
        if f.channels != wp.len() {
            return Err(Error::shape("domain_entropy_loss", wp.len(), f.channels));
        }
        let z: f64 = f.gap().iter().zip(wp).map(|(q, w)| q * w).sum();
        total += entropy_loss_from_logit(z, form).0;
    }
    Ok(total / f_minus.len() as f64)
}
