//! Labels, training losses, depth decoding and evaluation metrics.
//!
//! Bin indices are 0-based everywhere. Decoding a distribution to depth sums
//! `(k + 1) * p_k`, so a one-hot label at bin `y` decodes to
//! `(y + 1) * bin_depth_width`, the far edge of the bin that contains the
//! true depth.

use crate::domain::{DepthImage, DetectorConfig, ProbCube};
use crate::error::{invalid, shape_mismatch, Result};

/// Floor applied inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Depth to 0-based bin index, `floor(2 z / (bin_width * c))` clamped to the
/// cube.
pub fn depth_to_bin(z: f64, cfg: &DetectorConfig) -> Result<usize> {
    if !(z >= 0.0 && z.is_finite()) {
        return Err(invalid(
            "depth",
            format!("must be finite and >= 0, got {z}"),
        ));
    }
    let k = (z / cfg.bin_depth_width()).floor();
    Ok((k as usize).min(cfg.bins() - 1))
}

/// Decodes a 0-based bin index with the same convention as [`soft_argmax`].
pub fn bin_to_depth(k: usize, bin_depth_width: f64) -> f64 {
    (k + 1) as f64 * bin_depth_width
}

/// Per-pixel class labels over `bins` time bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCube {
    pub bins: usize,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<usize>,
}

impl LabelCube {
    pub fn from_depth(depth: &DepthImage, cfg: &DetectorConfig) -> Result<Self> {
        let labels = depth
            .values()
            .iter()
            .map(|&z| depth_to_bin(z, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bins: cfg.bins(),
            rows: depth.rows(),
            cols: depth.cols(),
            labels,
        })
    }

    /// One-hot expansion, pixel-major.
    pub fn one_hot(&self) -> ProbCube {
        let mut p = vec![0.0; self.labels.len() * self.bins];
        for (pixel, &y) in self.labels.iter().enumerate() {
            p[pixel * self.bins + y] = 1.0;
        }
        ProbCube {
            bins: self.bins,
            rows: self.rows,
            cols: self.cols,
            p,
        }
    }
}

fn check_same(a: &ProbCube, b: &ProbCube) -> Result<()> {
    if (a.bins, a.rows, a.cols) != (b.bins, b.rows, b.cols) {
        return Err(shape_mismatch(
            (a.bins, a.rows, a.cols),
            (b.bins, b.rows, b.cols),
        ));
    }
    Ok(())
}

/// Loss value together with its gradient w.r.t. the pre-softmax logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    /// Pixel-major, same layout as the probabilities.
    pub grad_logits: Vec<f64>,
}

/// Pixel-mean cross entropy against hard labels.
pub fn ce_loss(labels: &LabelCube, probs: &ProbCube) -> Result<LossGrad> {
    if (labels.bins, labels.rows, labels.cols) != (probs.bins, probs.rows, probs.cols) {
        return Err(shape_mismatch(
            (labels.bins, labels.rows, labels.cols),
            (probs.bins, probs.rows, probs.cols),
        ));
    }
    let pixels = probs.pixels();
    let inv = 1.0 / pixels as f64;
    let mut value = 0.0;
    let mut grad_logits: Vec<f64> = probs.p.iter().map(|p| p * inv).collect();
    for (pixel, &y) in labels.labels.iter().enumerate() {
        let idx = pixel * probs.bins + y;
        value -= probs.p[idx].max(LOG_EPS).ln();
        grad_logits[idx] -= inv;
    }
    Ok(LossGrad {
        value: value * inv,
        grad_logits,
    })
}

/// Pixel-mean `KL(target || probs)` against soft target distributions.
pub fn kl_loss(target: &ProbCube, probs: &ProbCube) -> Result<LossGrad> {
    check_same(target, probs)?;
    let inv = 1.0 / probs.pixels() as f64;
    let mut value = 0.0;
    for (q, p) in target.p.iter().zip(&probs.p) {
        if *q > 0.0 {
            value += q * (q.ln() - p.max(LOG_EPS).ln());
        }
    }
    // per pixel the targets sum to one, so d/dlogits = p - q
    let grad_logits = probs
        .p
        .iter()
        .zip(&target.p)
        .map(|(p, q)| (p - q) * inv)
        .collect();
    Ok(LossGrad {
        value: value * inv,
        grad_logits,
    })
}

/// Anisotropic total variation over in-image neighbour pairs, with its
/// subgradient (zero at ties).
pub fn tv_loss(z: &DepthImage) -> (f64, Vec<f64>) {
    let (m, n) = (z.rows(), z.cols());
    let v = z.values();
    let mut value = 0.0;
    let mut grad = vec![0.0; v.len()];
    for i in 0..m {
        for j in 0..n {
            let here = i * n + j;
            if i + 1 < m {
                let d = v[here + n] - v[here];
                value += d.abs();
                let s = sign(d);
                grad[here + n] += s;
                grad[here] -= s;
            }
            if j + 1 < n {
                let d = v[here + 1] - v[here];
                value += d.abs();
                let s = sign(d);
                grad[here + 1] += s;
                grad[here] -= s;
            }
        }
    }
    (value, grad)
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Expected depth of every pixel, `bin_depth_width * sum_k (k + 1) p_k`.
pub fn soft_argmax(probs: &ProbCube, cfg: &DetectorConfig) -> Result<DepthImage> {
    soft_argmax_with_width(probs, cfg.bin_depth_width())
}

pub fn soft_argmax_with_width(probs: &ProbCube, bin_depth_width: f64) -> Result<DepthImage> {
    let z = probs
        .dists()
        .map(|d| {
            let e: f64 = d.iter().enumerate().map(|(k, p)| (k + 1) as f64 * p).sum();
            bin_depth_width * e.max(0.0)
        })
        .collect();
    DepthImage::new(probs.rows, probs.cols, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_tv: f64,
}

impl LossConfig {
    /// TV weight used for training at full scale.
    pub const DEFAULT_LAMBDA_TV: f64 = 1e-6;

    pub fn new(lambda_tv: f64) -> Result<Self> {
        if !(lambda_tv.is_finite() && lambda_tv >= 0.0) {
            return Err(invalid(
                "lambda_tv",
                format!("must be >= 0, got {lambda_tv}"),
            ));
        }
        Ok(Self { lambda_tv })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_tv: Self::DEFAULT_LAMBDA_TV,
        }
    }
}

/// Breakdown of [`total_loss`].
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub data_term: f64,
    pub tv: f64,
    pub grad_logits: Vec<f64>,
}

/// Which data term drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DataTerm {
    /// Hard-label cross entropy.
    #[default]
    CrossEntropy,
    /// KL divergence to a pulse-shaped target waveform (ablation).
    Kl,
}

/// Training target for one cube: hard labels and, for the KL ablation, the
/// normalised pulse waveform of each pixel.
#[derive(Debug, Clone)]
pub struct Target {
    pub labels: LabelCube,
    pub waveform: Option<ProbCube>,
}

/// `data term + lambda * TV(soft_argmax(probs))` and its gradient w.r.t. the
/// logits that produced `probs` through a softmax over time.
pub fn total_loss(
    target: &Target,
    probs: &ProbCube,
    term: DataTerm,
    loss_cfg: &LossConfig,
    bin_depth_width: f64,
) -> Result<TotalLoss> {
    let LossGrad {
        value: data_term,
        mut grad_logits,
    } = match term {
        DataTerm::CrossEntropy => ce_loss(&target.labels, probs)?,
        DataTerm::Kl => {
            let wave = target
                .waveform
                .as_ref()
                .ok_or_else(|| invalid("target", "KL training needs a waveform target"))?;
            kl_loss(wave, probs)?
        }
    };
    let mut tv = 0.0;
    if loss_cfg.lambda_tv > 0.0 {
        let z = soft_argmax_with_width(probs, bin_depth_width)?;
        let (value, grad_z) = tv_loss(&z);
        tv = value;
        let t = probs.bins;
        for (pixel, gz) in grad_z.iter().enumerate() {
            let g = loss_cfg.lambda_tv * gz * bin_depth_width;
            if g == 0.0 {
                continue;
            }
            let p = probs.dist(pixel);
            // dL/dp_k = g (k + 1); softmax Jacobian: p_k (dL/dp_k - sum_l p_l dL/dp_l)
            let mean: f64 = p
                .iter()
                .enumerate()
                .map(|(k, pk)| pk * (k + 1) as f64)
                .sum();
            for (k, pk) in p.iter().enumerate() {
                grad_logits[pixel * t + k] += g * pk * ((k + 1) as f64 - mean);
            }
        }
    }
    Ok(TotalLoss {
        value: data_term + loss_cfg.lambda_tv * tv,
        data_term,
        tv,
        grad_logits,
    })
}

/// Root mean square depth error.
pub fn rmse(truth: &DepthImage, estimate: &DepthImage) -> Result<f64> {
    truth.same_shape(estimate)?;
    let n = truth.values().len() as f64;
    let sse: f64 = truth
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sse / n).sqrt())
}

/// Fraction of pixels with `max(est / truth, truth / est) < delta`.
pub fn accuracy_delta(truth: &DepthImage, estimate: &DepthImage, delta: f64) -> Result<f64> {
    truth.same_shape(estimate)?;
    let mut hits = 0usize;
    for (&z, &e) in truth.values().iter().zip(estimate.values()) {
        if !(z > 0.0 && e > 0.0) {
            return Err(invalid(
                "depth",
                format!("accuracy needs positive depths, got {z} and {e}"),
            ));
        }
        if (e / z).max(z / e) < delta {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.values().len() as f64)
}

/// Mean and variance (in bins) of each pixel's distribution.
pub fn moments(probs: &ProbCube) -> Vec<(f64, f64)> {
    probs
        .dists()
        .map(|d| {
            let mean: f64 = d.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
            let var: f64 = d
                .iter()
                .enumerate()
                .map(|(k, p)| p * (k as f64 - mean).powi(2))
                .sum();
            (mean, var)
        })
        .collect()
}

/// Pixel-averaged variance of the distributions, in bins squared.
pub fn avg_variance(probs: &ProbCube) -> f64 {
    let m = moments(probs);
    m.iter().map(|(_, v)| v).sum::<f64>() / m.len() as f64
}

/// Standard accuracy thresholds reported alongside RMSE.
pub const DEFAULT_DELTAS: [f64; 3] = [1.01, 1.02, 1.03];

/// One evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rmse: f64,
    pub accuracy: Vec<(f64, f64)>,
    pub avg_variance: Option<f64>,
}

impl Metrics {
    pub fn compute(
        truth: &DepthImage,
        estimate: &DepthImage,
        deltas: &[f64],
        probs: Option<&ProbCube>,
    ) -> Result<Self> {
        let accuracy = deltas
            .iter()
            .map(|&d| accuracy_delta(truth, estimate, d).map(|a| (d, a)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rmse: rmse(truth, estimate)?,
            accuracy,
            avg_variance: probs.map(avg_variance),
        })
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["rmse".to_string()];
        cols.extend(self.accuracy.iter().map(|(d, _)| format!("acc_{d}")));
        cols.push("avg_var".to_string());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.rmse)];
        cols.extend(self.accuracy.iter().map(|(_, a)| format!("{a}")));
        cols.push(match self.avg_variance {
            Some(v) => format!("{v}"),
            None => "nan".to_string(),
        });
        cols.join(",")
    }

    /// `key=value` lines.
    pub fn report(&self) -> String {
        let mut out = format!("rmse={}\n", self.rmse);
        for (d, a) in &self.accuracy {
            out.push_str(&format!("acc_{d}={a}\n"));
        }
        match self.avg_variance {
            Some(v) => out.push_str(&format!("avg_var={v}\n")),
            None => out.push_str("avg_var=nan\n"),
        }
        out
    }
}
