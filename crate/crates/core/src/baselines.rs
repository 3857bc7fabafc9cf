//! Classical per-pixel depth estimators.

use crate::domain::{depth_per_bin, DepthImage, PhotonCube, PulseModel};
use crate::error::{invalid, Result};
use crate::loss::bin_to_depth;
use crate::simulator::pulse_fractions;
use crate::windowing::{window_series, WindowConfig};

/// Floor on the background level inside the log-likelihood ratio.
pub const BACKGROUND_FLOOR: f64 = 1e-12;

/// Index of the largest element; ties go to the lowest index. Returns 0 for
/// an empty or all-NaN slice.
pub fn argmax_index<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Bin with the most counts in every pixel, decoded to depth.
pub fn argmax_depth(cube: &PhotonCube) -> DepthImage {
    let w = depth_per_bin(cube.bin_width());
    let z = cube
        .histograms()
        .map(|h| bin_to_depth(argmax_index(h), w))
        .collect();
    DepthImage::new(cube.rows(), cube.cols(), z).expect("decoded depths are finite")
}

/// Signal and background levels assumed by the log-matched filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmParams {
    /// Expected signal photons per pixel.
    pub signal: f64,
    /// Expected background counts per bin.
    pub background_per_bin: f64,
}

impl LmParams {
    /// Crude per-cube estimate: the background level is the mean count
    /// outside a guard band around each pixel's strongest window, the signal
    /// is whatever remains.
    pub fn estimate(cube: &PhotonCube, pulse: &PulseModel) -> Self {
        let bins = cube.bins();
        let sigma = pulse.sigma() / cube.bin_width().max(f64::MIN_POSITIVE);
        let guard = (PulseModel::TRUNCATION_SIGMAS * sigma).ceil() as usize + 1;
        let w = WindowConfig::new(2 * guard + 1).expect("odd");
        let mut series = vec![0.0; bins];
        let mut windowed = vec![0.0; bins];
        let (mut outside, mut outside_bins, mut total) = (0.0, 0usize, 0.0);
        for h in cube.histograms() {
            for (s, &c) in series.iter_mut().zip(h) {
                *s = c as f64;
            }
            total += series.iter().sum::<f64>();
            window_series(&series, w, &mut windowed);
            let peak = argmax_index(&windowed);
            for (k, &v) in series.iter().enumerate() {
                if k + guard < peak || k > peak + guard {
                    outside += v;
                    outside_bins += 1;
                }
            }
        }
        let pixels = cube.pixels().max(1) as f64;
        let background_per_bin = if outside_bins > 0 {
            outside / outside_bins as f64
        } else {
            0.0
        };
        let signal = (total / pixels - background_per_bin * bins as f64).max(1e-3);
        Self {
            signal,
            background_per_bin,
        }
    }
}

/// Poisson log-likelihood-ratio template of a pulse centred in a bin.
#[derive(Debug, Clone, PartialEq)]
pub struct LmTemplate {
    /// Weights for offsets `-radius..=radius` around the hypothesised bin.
    pub weights: Vec<f64>,
    pub radius: usize,
}

impl LmTemplate {
    pub fn new(pulse: &PulseModel, bin_width: f64, params: &LmParams) -> Result<Self> {
        if !(bin_width > 0.0) {
            return Err(invalid(
                "bin_width",
                format!("must be positive, got {bin_width}"),
            ));
        }
        if !(params.signal >= 0.0 && params.background_per_bin >= 0.0) {
            return Err(invalid("lm params", format!("{params:?}")));
        }
        let sigma = pulse.sigma() / bin_width;
        let radius = (PulseModel::TRUNCATION_SIGMAS * sigma + 0.5).ceil() as usize;
        let span = 2 * radius + 1;
        let shape = pulse_fractions(radius as f64 + 0.5, sigma, span);
        let b = params.background_per_bin.max(BACKGROUND_FLOOR);
        let weights = shape
            .iter()
            .map(|s| (params.signal * s + b).ln() - b.ln())
            .collect();
        Ok(Self { weights, radius })
    }

    /// Correlation score of each shift with the histogram; shifts whose
    /// template overhangs the window only use the part inside it.
    pub fn scores(&self, hist: &[u32]) -> Vec<f64> {
        let t = hist.len() as isize;
        let r = self.radius as isize;
        (0..t)
            .map(|m| {
                let mut s = 0.0;
                for (d, w) in self.weights.iter().enumerate() {
                    let k = m + d as isize - r;
                    if k >= 0 && k < t {
                        s += hist[k as usize] as f64 * w;
                    }
                }
                s
            })
            .collect()
    }

    pub fn estimate_bin(&self, hist: &[u32]) -> usize {
        argmax_index(&self.scores(hist))
    }
}

/// Log-matched filter: per pixel, the shift maximising the Poisson
/// log-likelihood ratio of a pulse against flat background.
pub fn log_matched_filter(
    cube: &PhotonCube,
    pulse: &PulseModel,
    params: &LmParams,
) -> Result<DepthImage> {
    let template = LmTemplate::new(pulse, cube.bin_width(), params)?;
    let w = depth_per_bin(cube.bin_width());
    let z = cube
        .histograms()
        .map(|h| bin_to_depth(template.estimate_bin(h), w))
        .collect();
    DepthImage::new(cube.rows(), cube.cols(), z)
}
