//! Pixel-wise soft-threshold shrinkage.
//!
//! A feature tensor `(B, C, T, M, N)` is viewed as `B * C` planes of
//! `T x M x N` values. Every `(plane, row, col)` position owns one threshold
//! shared by its whole time series. The same maths backs the learned PRS block
//! and the non-learned [`classic_denoise`].

use crate::domain::{PhotonCube, RealCube};
use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::FeatureTensor;
use crate::windowing::{temporal_window, WindowConfig};

/// Default scaling used by [`classic_denoise`] when none is given.
pub const DEFAULT_CLASSIC_SCALE: f64 = 0.5;

/// Soft threshold of a single value. `tau` must be non-negative.
pub fn soft_threshold(x: f64, tau: f64) -> Result<f64> {
    if !(tau >= 0.0) {
        return Err(invalid("tau", format!("must be non-negative, got {tau}")));
    }
    Ok(shrink(x, tau))
}

#[inline]
pub(crate) fn shrink(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

/// Partial derivatives of [`soft_threshold`] scaled by `upstream`, returned as
/// `(d/dx, d/dtau)`. The kinks `|x| == tau` take the dead-zone branch.
#[inline]
pub fn soft_threshold_backward(x: f64, tau: f64, upstream: f64) -> (f64, f64) {
    if x > tau {
        (upstream, -upstream)
    } else if x < -tau {
        (upstream, upstream)
    } else {
        (0.0, 0.0)
    }
}

/// Scaling map `S` and thresholds `tau`, one entry per `(plane, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap {
    pub planes: usize,
    pub rows: usize,
    pub cols: usize,
    pub scale: Vec<f64>,
    /// Time average of `|x|` for every position.
    pub mean_abs: Vec<f64>,
    pub tau: Vec<f64>,
}

/// `tau[p, i, j] = scale[p, i, j] * mean_t |x[p, t, i, j]|`.
pub fn pixel_thresholds(x: &FeatureTensor, scale: &[f64]) -> Result<ThresholdMap> {
    let [b, c, t, m, n] = x.shape();
    let planes = b * c;
    if scale.len() != planes * m * n {
        return Err(shape_mismatch(planes * m * n, scale.len()));
    }
    if let Some(s) = scale.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(invalid(
            "scale",
            format!("entries must lie in [0, 1], got {s}"),
        ));
    }
    let plane_len = m * n;
    let data = x.data();
    let mut mean_abs = vec![0.0; planes * plane_len];
    for p in 0..planes {
        let acc = &mut mean_abs[p * plane_len..(p + 1) * plane_len];
        for k in 0..t {
            let row = &data[(p * t + k) * plane_len..][..plane_len];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.abs();
            }
        }
        let inv = 1.0 / t as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    let tau = scale.iter().zip(&mean_abs).map(|(s, a)| s * a).collect();
    Ok(ThresholdMap {
        planes,
        rows: m,
        cols: n,
        scale: scale.to_vec(),
        mean_abs,
        tau,
    })
}

/// Elementwise shrinkage of `x` with the per-position thresholds.
pub fn apply_thresholds(x: &FeatureTensor, map: &ThresholdMap) -> Result<FeatureTensor> {
    let [b, c, t, m, n] = x.shape();
    if (b * c, m, n) != (map.planes, map.rows, map.cols) {
        return Err(shape_mismatch(
            (map.planes, map.rows, map.cols),
            (b * c, m, n),
        ));
    }
    let plane_len = m * n;
    let mut out = FeatureTensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..b * c {
        let tau = &map.tau[p * plane_len..(p + 1) * plane_len];
        for k in 0..t {
            let o = (p * t + k) * plane_len;
            for q in 0..plane_len {
                dst[o + q] = shrink(src[o + q], tau[q]);
            }
        }
    }
    Ok(out)
}

/// Residual combination `x + xd`.
pub fn residual_denoise(x: &FeatureTensor, xd: &FeatureTensor) -> Result<FeatureTensor> {
    x.add(xd)
}

/// Non-learned denoiser: temporal window, then per-pixel shrinkage with a
/// uniform scaling `s0`. The result is non-negative.
pub fn classic_denoise(cube: &PhotonCube, w: WindowConfig, s0: f64) -> Result<RealCube> {
    if !(0.0..=1.0).contains(&s0) {
        return Err(invalid("s0", format!("must lie in [0, 1], got {s0}")));
    }
    let mut out = temporal_window(&cube.to_real(), w);
    if out.bins == 0 {
        return Ok(out);
    }
    let inv = 1.0 / out.bins as f64;
    for series in out.data.chunks_exact_mut(cube.bins()) {
        let tau = s0 * series.iter().map(|v| v.abs()).sum::<f64>() * inv;
        series.iter_mut().for_each(|v| *v = shrink(*v, tau));
    }
    Ok(out)
}
