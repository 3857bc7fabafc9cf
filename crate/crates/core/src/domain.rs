//! Physical constants and the value types shared by every stage of the
//! pipeline.
//!
//! All cubes use a pixel-major layout: the histogram of pixel `(i, j)` is the
//! contiguous run `[((i * cols) + j) * bins ..][..bins]`.

use crate::error::{invalid, shape_mismatch, Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Conversion factor between a Gaussian standard deviation and its FWHM.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Depth spanned by one time bin for a bin duration in seconds.
pub fn depth_per_bin(bin_width: f64) -> f64 {
    bin_width * SPEED_OF_LIGHT / 2.0
}

/// Detector and acquisition parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    bins: usize,
    bin_width: f64,
    quantum_efficiency: f64,
    background_rate: f64,
    illuminations: u32,
}

impl DetectorConfig {
    /// A detector with unit quantum efficiency, a single illumination and no
    /// background.
    pub fn new(bins: usize, bin_width: f64) -> Result<Self> {
        Self::with_all(bins, bin_width, 1.0, 0.0, 1)
    }

    pub fn with_all(
        bins: usize,
        bin_width: f64,
        quantum_efficiency: f64,
        background_rate: f64,
        illuminations: u32,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(invalid("bins", "must be at least 1"));
        }
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(invalid(
                "bin_width",
                format!("must be positive, got {bin_width}"),
            ));
        }
        if !(quantum_efficiency > 0.0 && quantum_efficiency <= 1.0) {
            return Err(invalid(
                "quantum_efficiency",
                format!("must lie in (0, 1], got {quantum_efficiency}"),
            ));
        }
        if !(background_rate.is_finite() && background_rate >= 0.0) {
            return Err(invalid(
                "background_rate",
                format!("must be non-negative, got {background_rate}"),
            ));
        }
        if illuminations == 0 {
            return Err(invalid("illuminations", "must be at least 1"));
        }
        Ok(Self {
            bins,
            bin_width,
            quantum_efficiency,
            background_rate,
            illuminations,
        })
    }

    /// Bin duration given in picoseconds.
    pub fn from_picoseconds(bins: usize, bin_ps: f64) -> Result<Self> {
        Self::new(bins, bin_ps * 1e-12)
    }

    pub fn with_background_rate(self, rate: f64) -> Result<Self> {
        Self::with_all(
            self.bins,
            self.bin_width,
            self.quantum_efficiency,
            rate,
            self.illuminations,
        )
    }

    pub fn with_quantum_efficiency(self, eta: f64) -> Result<Self> {
        Self::with_all(
            self.bins,
            self.bin_width,
            eta,
            self.background_rate,
            self.illuminations,
        )
    }

    pub fn with_illuminations(self, n: u32) -> Result<Self> {
        Self::with_all(
            self.bins,
            self.bin_width,
            self.quantum_efficiency,
            self.background_rate,
            n,
        )
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Bin duration in seconds.
    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn quantum_efficiency(&self) -> f64 {
        self.quantum_efficiency
    }

    /// Background plus dark-count rate in counts per second.
    pub fn background_rate(&self) -> f64 {
        self.background_rate
    }

    pub fn illuminations(&self) -> u32 {
        self.illuminations
    }

    /// Depth covered by one time bin, `bin_width * c / 2`.
    pub fn bin_depth_width(&self) -> f64 {
        depth_per_bin(self.bin_width)
    }

    /// Largest depth that does not alias, `bins * bin_width * c / 2`.
    pub fn max_range(&self) -> f64 {
        self.bins as f64 * self.bin_depth_width()
    }

    /// Expected background counts in a single bin over all illuminations.
    pub fn background_per_bin(&self) -> f64 {
        self.illuminations as f64 * self.background_rate * self.bin_width
    }
}

/// Truncated Gaussian laser pulse with unit area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseModel {
    fwhm: f64,
}

impl PulseModel {
    /// Number of standard deviations kept on each side of the pulse centre.
    pub const TRUNCATION_SIGMAS: f64 = 3.0;

    /// `fwhm` in seconds. Zero is accepted and treated as an ideal impulse.
    pub fn new(fwhm: f64) -> Result<Self> {
        if !(fwhm.is_finite() && fwhm >= 0.0) {
            return Err(invalid("fwhm", format!("must be non-negative, got {fwhm}")));
        }
        Ok(Self { fwhm })
    }

    pub fn from_picoseconds(fwhm_ps: f64) -> Result<Self> {
        Self::new(fwhm_ps * 1e-12)
    }

    pub fn fwhm(&self) -> f64 {
        self.fwhm
    }

    pub fn sigma(&self) -> f64 {
        fwhm_to_sigma(self.fwhm)
    }

    /// Half-width of the truncated support in seconds.
    pub fn half_support(&self) -> f64 {
        Self::TRUNCATION_SIGMAS * self.sigma()
    }
}

/// Ground-truth depth and reflectivity, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    rows: usize,
    cols: usize,
    depth: Vec<f64>,
    reflectivity: Vec<f64>,
}

impl Scene {
    pub fn new(rows: usize, cols: usize, depth: Vec<f64>, reflectivity: Vec<f64>) -> Result<Self> {
        let n = rows * cols;
        if depth.len() != n {
            return Err(shape_mismatch(n, depth.len()));
        }
        if reflectivity.len() != n {
            return Err(shape_mismatch(n, reflectivity.len()));
        }
        if let Some(a) = reflectivity.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid("reflectivity", format!("{a} outside [0, 1]")));
        }
        if let Some(z) = depth.iter().find(|z| !z.is_finite()) {
            return Err(invalid("depth", format!("non-finite depth {z}")));
        }
        Ok(Self {
            rows,
            cols,
            depth,
            reflectivity,
        })
    }

    /// A scene with every pixel fully reflective.
    pub fn with_unit_reflectivity(rows: usize, cols: usize, depth: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, depth, vec![1.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn reflectivity(&self) -> &[f64] {
        &self.reflectivity
    }

    pub fn depth_image(&self) -> DepthImage {
        DepthImage {
            rows: self.rows,
            cols: self.cols,
            z: self.depth.clone(),
        }
    }

    /// Checks that every depth lies strictly inside the detector's range.
    pub fn check_range(&self, cfg: &DetectorConfig) -> Result<()> {
        let max = cfg.max_range();
        match self.depth.iter().find(|&&z| !(z > 0.0 && z < max)) {
            Some(&depth) => Err(Error::DepthOutOfRange { depth, max }),
            None => Ok(()),
        }
    }
}

/// Integer photon-count histogram cube.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhotonCube {
    bins: usize,
    rows: usize,
    cols: usize,
    bin_width_ps: u32,
    counts: Vec<u32>,
}

impl PhotonCube {
    pub fn new(
        bins: usize,
        rows: usize,
        cols: usize,
        bin_width_ps: u32,
        counts: Vec<u32>,
    ) -> Result<Self> {
        let n = checked_volume(bins, rows, cols)?;
        if counts.len() != n {
            return Err(shape_mismatch((bins, rows, cols), counts.len()));
        }
        Ok(Self {
            bins,
            rows,
            cols,
            bin_width_ps,
            counts,
        })
    }

    pub fn zeros(bins: usize, rows: usize, cols: usize, bin_width_ps: u32) -> Result<Self> {
        let n = checked_volume(bins, rows, cols)?;
        Self::new(bins, rows, cols, bin_width_ps, vec![0; n])
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn bin_width_ps(&self) -> u32 {
        self.bin_width_ps
    }

    /// Bin duration in seconds.
    pub fn bin_width(&self) -> f64 {
        self.bin_width_ps as f64 * 1e-12
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn counts_mut(&mut self) -> &mut [u32] {
        &mut self.counts
    }

    pub fn into_counts(self) -> Vec<u32> {
        self.counts
    }

    pub fn histogram(&self, i: usize, j: usize) -> &[u32] {
        let start = (i * self.cols + j) * self.bins;
        &self.counts[start..start + self.bins]
    }

    pub fn histograms(&self) -> std::slice::ChunksExact<'_, u32> {
        self.counts.chunks_exact(self.bins)
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> u32 {
        self.counts[(i * self.cols + j) * self.bins + t]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn to_real(&self) -> RealCube {
        RealCube {
            bins: self.bins,
            rows: self.rows,
            cols: self.cols,
            data: self.counts.iter().map(|&c| c as f64).collect(),
        }
    }

    /// Copies the spatial window `rows x cols` starting at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(shape_mismatch(
                (self.rows, self.cols),
                (row0 + rows, col0 + cols),
            ));
        }
        let mut counts = Vec::with_capacity(rows * cols * self.bins);
        for i in row0..row0 + rows {
            for j in col0..col0 + cols {
                counts.extend_from_slice(self.histogram(i, j));
            }
        }
        Self::new(self.bins, rows, cols, self.bin_width_ps, counts)
    }
}

pub(crate) fn checked_volume(bins: usize, rows: usize, cols: usize) -> Result<usize> {
    bins.checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::DimOverflow(format!("{bins}x{rows}x{cols}")))
}

/// Real-valued cube in the same pixel-major layout as [`PhotonCube`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealCube {
    pub bins: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealCube {
    pub fn zeros(bins: usize, rows: usize, cols: usize) -> Self {
        Self {
            bins,
            rows,
            cols,
            data: vec![0.0; bins * rows * cols],
        }
    }

    pub fn from_vec(bins: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != bins * rows * cols {
            return Err(shape_mismatch((bins, rows, cols), data.len()));
        }
        Ok(Self {
            bins,
            rows,
            cols,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * self.bins;
        &self.data[start..start + self.bins]
    }
}

/// Depth image in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    rows: usize,
    cols: usize,
    z: Vec<f64>,
}

impl DepthImage {
    pub fn new(rows: usize, cols: usize, z: Vec<f64>) -> Result<Self> {
        if z.len() != rows * cols {
            return Err(shape_mismatch(rows * cols, z.len()));
        }
        if let Some(v) = z.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(
                "depth",
                format!("entries must be finite and >= 0, got {v}"),
            ));
        }
        Ok(Self { rows, cols, z })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.cols + j]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.z
    }

    pub fn same_shape(&self, other: &DepthImage) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(shape_mismatch(
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// Per-pixel probability vectors over time bins, pixel-major like the cubes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbCube {
    pub bins: usize,
    pub rows: usize,
    pub cols: usize,
    pub p: Vec<f64>,
}

impl ProbCube {
    pub fn new(bins: usize, rows: usize, cols: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != bins * rows * cols {
            return Err(shape_mismatch((bins, rows, cols), p.len()));
        }
        Ok(Self {
            bins,
            rows,
            cols,
            p,
        })
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dist(&self, pixel: usize) -> &[f64] {
        &self.p[pixel * self.bins..(pixel + 1) * self.bins]
    }

    pub fn dists(&self) -> std::slice::ChunksExact<'_, f64> {
        self.p.chunks_exact(self.bins)
    }

    /// Largest deviation of any pixel's total probability from one.
    pub fn max_normalization_error(&self) -> f64 {
        self.dists()
            .map(|d| (d.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Network output: the distribution, its decoded depth and dispersion.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: ProbCube,
    pub depth: DepthImage,
    /// Per-pixel expected bin index (0-based).
    pub mean_bin: Vec<f64>,
    /// Pixel-averaged variance of the distributions, in bins squared.
    pub avg_variance: f64,
}

/// First invariant violation found by [`validate_cube`] or [`validate_raw`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch {
        expected: usize,
        actual: usize,
    },
    BinsMismatch {
        cube: usize,
        config: usize,
    },
    BinWidthMismatch {
        cube_ps: u32,
        config_ps: f64,
    },
    NegativeCount {
        t: usize,
        i: usize,
        j: usize,
        value: i64,
    },
}

/// Checks a cube against the detector it claims to come from.
pub fn validate_cube(cube: &PhotonCube, cfg: &DetectorConfig) -> Result<(), Violation> {
    if cube.bins() != cfg.bins() {
        return Err(Violation::BinsMismatch {
            cube: cube.bins(),
            config: cfg.bins(),
        });
    }
    let config_ps = cfg.bin_width() * 1e12;
    if (cube.bin_width_ps() as f64 - config_ps).abs() > 0.5 {
        return Err(Violation::BinWidthMismatch {
            cube_ps: cube.bin_width_ps(),
            config_ps,
        });
    }
    let expected = cube.bins() * cube.pixels();
    if cube.counts().len() != expected {
        return Err(Violation::LengthMismatch {
            expected,
            actual: cube.counts().len(),
        });
    }
    Ok(())
}

/// Checks signed counts (as handed over by foreign callers) before they are
/// turned into a [`PhotonCube`].
pub fn validate_raw(
    counts: &[i64],
    bins: usize,
    rows: usize,
    cols: usize,
    cfg: &DetectorConfig,
) -> Result<(), Violation> {
    if bins != cfg.bins() {
        return Err(Violation::BinsMismatch {
            cube: bins,
            config: cfg.bins(),
        });
    }
    let expected = bins * rows * cols;
    if counts.len() != expected {
        return Err(Violation::LengthMismatch {
            expected,
            actual: counts.len(),
        });
    }
    if let Some((idx, &value)) = counts.iter().enumerate().find(|(_, &c)| c < 0) {
        let t = idx % bins;
        let pixel = idx / bins;
        return Err(Violation::NegativeCount {
            t,
            i: pixel / cols,
            j: pixel % cols,
            value,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bin_depth_width_at_80ps() {
        let cfg = DetectorConfig::from_picoseconds(1024, 80.0).unwrap();
        assert!((cfg.bin_depth_width() - 0.011_991_698_32).abs() < 1e-12);
        assert!((cfg.bin_depth_width() - 0.0119917).abs() < 5e-8);
    }

    #[test]
    fn bin_depth_width_at_52ps() {
        let cfg = DetectorConfig::from_picoseconds(1024, 52.0).unwrap();
        assert!((cfg.bin_depth_width() - 0.0077946).abs() < 5e-8);
    }

    #[test]
    fn zero_bin_width_is_rejected() {
        assert!(DetectorConfig::new(1024, 0.0).is_err());
        assert!(DetectorConfig::new(1024, -1e-12).is_err());
        assert!(DetectorConfig::new(0, 80e-12).is_err());
        assert!(DetectorConfig::with_all(8, 80e-12, 0.0, 0.0, 1).is_err());
        assert!(DetectorConfig::with_all(8, 80e-12, 1.0, -1.0, 1).is_err());
        assert!(DetectorConfig::with_all(8, 80e-12, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn bin_depth_width_is_monotone() {
        let mut last = 0.0;
        for ps in 1..200 {
            let w = DetectorConfig::from_picoseconds(16, ps as f64)
                .unwrap()
                .bin_depth_width();
            assert!(w > last);
            last = w;
        }
    }

    #[test]
    fn all_zero_cube_is_valid() {
        let cfg = DetectorConfig::from_picoseconds(8, 80.0).unwrap();
        let cube = PhotonCube::zeros(8, 3, 2, 80).unwrap();
        assert_eq!(validate_cube(&cube, &cfg), Ok(()));
    }

    #[test]
    fn negative_count_is_located() {
        let cfg = DetectorConfig::from_picoseconds(4, 80.0).unwrap();
        let mut counts = vec![0i64; 4 * 2 * 3];
        // t = 2, i = 1, j = 0
        counts[((1 * 3) + 0) * 4 + 2] = -5;
        assert_eq!(
            validate_raw(&counts, 4, 2, 3, &cfg),
            Err(Violation::NegativeCount {
                t: 2,
                i: 1,
                j: 0,
                value: -5
            })
        );
    }

    #[test]
    fn dims_mismatch_is_reported() {
        let cfg = DetectorConfig::from_picoseconds(16, 80.0).unwrap();
        let cube = PhotonCube::zeros(8, 2, 2, 80).unwrap();
        assert_eq!(
            validate_cube(&cube, &cfg),
            Err(Violation::BinsMismatch {
                cube: 8,
                config: 16
            })
        );
        let raw = vec![0i64; 10];
        assert_eq!(
            validate_raw(&raw, 16, 1, 1, &cfg),
            Err(Violation::LengthMismatch {
                expected: 16,
                actual: 10
            })
        );
        assert!(PhotonCube::new(8, 2, 2, 80, vec![0; 31]).is_err());
    }

    #[test]
    fn scene_range_check() {
        let cfg = DetectorConfig::from_picoseconds(64, 80.0).unwrap();
        let max = cfg.max_range();
        let ok = Scene::with_unit_reflectivity(1, 2, vec![0.1, max * 0.99]).unwrap();
        assert!(ok.check_range(&cfg).is_ok());
        let bad = Scene::with_unit_reflectivity(1, 2, vec![0.1, max]).unwrap();
        assert!(matches!(
            bad.check_range(&cfg),
            Err(Error::DepthOutOfRange { .. })
        ));
        assert!(Scene::new(1, 1, vec![1.0], vec![1.5]).is_err());
    }

    #[test]
    fn crop_copies_histograms() {
        let counts: Vec<u32> = (0..2 * 3 * 3).collect();
        let cube = PhotonCube::new(2, 3, 3, 80, counts).unwrap();
        let c = cube.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.histogram(0, 0), cube.histogram(1, 1));
        assert_eq!(c.histogram(1, 1), cube.histogram(2, 2));
        assert!(cube.crop(2, 2, 2, 2).is_err());
    }
}
