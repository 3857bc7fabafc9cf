//! Temporal windowing: a fixed all-ones moving sum along time.

use crate::domain::{DetectorConfig, PulseModel, RealCube};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowConfig {
    length: usize,
}

impl WindowConfig {
    pub fn new(length: usize) -> Result<Self> {
        if length == 0 || length.is_multiple_of(2) {
            return Err(invalid(
                "window length",
                format!("must be odd and positive, got {length}"),
            ));
        }
        Ok(Self { length })
    }

    pub fn length(&self) -> usize {
        self.length
    }

    /// Bins on each side of the centre, `floor(length / 2)`.
    pub fn half(&self) -> usize {
        self.length / 2
    }
}

/// Odd window length closest to the pulse FWHM measured in bins.
pub fn default_window(cfg: &DetectorConfig, pulse: &PulseModel) -> WindowConfig {
    let width = pulse.fwhm() / cfg.bin_width();
    let k = 2.0 * ((width - 1.0) / 2.0).round() + 1.0;
    let length = if k.is_finite() && k >= 1.0 {
        k as usize
    } else {
        1
    };
    WindowConfig { length }
}

/// Moving sum of one series with zero padding outside `[0, len)`.
pub fn window_series(input: &[f64], w: WindowConfig, out: &mut [f64]) {
    let u = w.half() as isize;
    let n = input.len() as isize;
    for (k, o) in out.iter_mut().enumerate() {
        let k = k as isize;
        let lo = (k - u).max(0) as usize;
        let hi = (k + u).min(n - 1);
        *o = if hi < lo as isize {
            0.0
        } else {
            input[lo..=hi as usize].iter().sum()
        };
    }
}

/// Applies [`window_series`] to every pixel of the cube.
pub fn temporal_window(cube: &RealCube, w: WindowConfig) -> RealCube {
    let mut out = RealCube::zeros(cube.bins, cube.rows, cube.cols);
    if cube.bins == 0 {
        return out;
    }
    for (src, dst) in cube
        .data
        .chunks_exact(cube.bins)
        .zip(out.data.chunks_exact_mut(cube.bins))
    {
        window_series(src, w, dst);
    }
    out
}
