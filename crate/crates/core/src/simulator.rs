//! Poisson observation model: expected-count cubes from a scene and sampled
//! photon cubes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::domain::{DetectorConfig, PhotonCube, PulseModel, Scene};
use crate::error::{invalid, Error, Result};

/// Photon budget per pixel: mean detected signal photons and total background
/// counts summed over all bins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbrTarget {
    pub signal_photons: f64,
    pub background_photons: f64,
}

impl SbrTarget {
    pub fn new(signal_photons: f64, background_photons: f64) -> Result<Self> {
        if !(signal_photons.is_finite() && signal_photons > 0.0) {
            return Err(invalid(
                "signal_photons",
                format!("must be positive, got {signal_photons}"),
            ));
        }
        if !(background_photons.is_finite() && background_photons >= 0.0) {
            return Err(invalid(
                "background_photons",
                format!("must be non-negative, got {background_photons}"),
            ));
        }
        Ok(Self {
            signal_photons,
            background_photons,
        })
    }

    /// Signal-to-background ratio; infinite when there is no background.
    pub fn ratio(&self) -> f64 {
        self.signal_photons / self.background_photons
    }
}

/// Expected counts per bin, pixel-major like [`PhotonCube`].
#[derive(Debug, Clone, PartialEq)]
pub struct RateCube {
    pub bins: usize,
    pub rows: usize,
    pub cols: usize,
    pub bin_width_ps: u32,
    pub expected: Vec<f64>,
}

impl RateCube {
    pub fn series(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * self.bins;
        &self.expected[start..start + self.bins]
    }

    pub fn pixel_totals(&self) -> Vec<f64> {
        self.expected
            .chunks_exact(self.bins)
            .map(|s| s.iter().sum())
            .collect()
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Fraction of the pulse energy landing in each bin for a surface at `depth`.
///
/// Bin `k` spans `[k, k + 1)` in units of bin width and the pulse is centred
/// at `2 * depth / (c * bin_width)`. Energy outside the cube window is lost.
pub fn discretize_pulse(pulse: &PulseModel, cfg: &DetectorConfig, depth: f64) -> Result<Vec<f64>> {
    let max = cfg.max_range();
    if !(depth > 0.0 && depth < max) {
        return Err(Error::DepthOutOfRange { depth, max });
    }
    let sigma = pulse.sigma() / cfg.bin_width();
    Ok(pulse_fractions(
        depth / cfg.bin_depth_width(),
        sigma,
        cfg.bins(),
    ))
}

/// Truncated-Gaussian energy per bin for a pulse centred at `center` (in bin
/// units, bin `k` spanning `[k, k + 1)`) with standard deviation `sigma` bins.
pub(crate) fn pulse_fractions(center: f64, sigma: f64, bins: usize) -> Vec<f64> {
    let mut out = vec![0.0; bins];
    if sigma == 0.0 {
        if center >= 0.0 && (center.floor() as usize) < bins {
            out[center.floor() as usize] = 1.0;
        }
        return out;
    }
    let cut = PulseModel::TRUNCATION_SIGMAS;
    let norm = std_normal_cdf(cut) - std_normal_cdf(-cut);
    let half = cut * sigma;
    let lo = (center - half).floor().max(0.0) as usize;
    let hi = ((center + half).ceil().max(0.0) as usize).min(bins);
    for (k, slot) in out.iter_mut().enumerate().take(hi).skip(lo) {
        let a = (k as f64).max(center - half);
        let b = ((k + 1) as f64).min(center + half);
        if b > a {
            let mass = std_normal_cdf((b - center) / sigma) - std_normal_cdf((a - center) / sigma);
            *slot = (mass / norm).max(0.0);
        }
    }
    out
}

/// Expected counts `gain * eta * alpha * s_k * N + N * n_b * bin_width`.
pub fn build_rate_cube(
    scene: &Scene,
    cfg: &DetectorConfig,
    pulse: &PulseModel,
    gain: f64,
) -> Result<RateCube> {
    if !(gain.is_finite() && gain >= 0.0) {
        return Err(invalid("gain", format!("must be non-negative, got {gain}")));
    }
    scene.check_range(cfg)?;
    let bins = cfg.bins();
    let n_illum = cfg.illuminations() as f64;
    let background = cfg.background_per_bin();
    let scale = gain * cfg.quantum_efficiency() * n_illum;
    let mut expected = Vec::with_capacity(bins * scene.rows() * scene.cols());
    for (&z, &alpha) in scene.depth().iter().zip(scene.reflectivity()) {
        let fractions = discretize_pulse(pulse, cfg, z)?;
        expected.extend(fractions.iter().map(|s| scale * alpha * s + background));
    }
    Ok(RateCube {
        bins,
        rows: scene.rows(),
        cols: scene.cols(),
        bin_width_ps: (cfg.bin_width() * 1e12).round() as u32,
        expected,
    })
}

/// Result of [`calibrate`]: the signal gain and the background rate that
/// realise a photon budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub gain: f64,
    pub background_rate: f64,
}

impl Calibration {
    /// `cfg` with the calibrated background rate installed.
    pub fn apply(&self, cfg: &DetectorConfig) -> Result<DetectorConfig> {
        cfg.with_background_rate(self.background_rate)
    }
}

/// Chooses the gain so the scene-mean expected signal per pixel equals
/// `target.signal_photons`, and the background rate so each pixel receives
/// `target.background_photons` background counts in total.
pub fn calibrate(
    scene: &Scene,
    cfg: &DetectorConfig,
    pulse: &PulseModel,
    target: &SbrTarget,
) -> Result<Calibration> {
    scene.check_range(cfg)?;
    let mut weighted = 0.0;
    for (&z, &alpha) in scene.depth().iter().zip(scene.reflectivity()) {
        if alpha > 0.0 {
            let captured: f64 = discretize_pulse(pulse, cfg, z)?.iter().sum();
            weighted += alpha * captured;
        }
    }
    let pixels = (scene.rows() * scene.cols()) as f64;
    let mean = weighted / pixels;
    if !(mean > 0.0) {
        return Err(Error::ZeroReflectivity);
    }
    let n_illum = cfg.illuminations() as f64;
    let gain = target.signal_photons / (cfg.quantum_efficiency() * n_illum * mean);
    let background_rate =
        target.background_photons / (n_illum * cfg.bins() as f64 * cfg.bin_width());
    Ok(Calibration {
        gain,
        background_rate,
    })
}

/// Random stream for pixel `(i, j)` under `seed`, independent of image size
/// and evaluation order.
pub fn pixel_rng(seed: u64, i: usize, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((i as u64) << 32) | j as u64);
    rng
}

/// Draws every count independently from `Poisson(expected)`.
pub fn sample_cube(rates: &RateCube, seed: u64) -> Result<PhotonCube> {
    if let Some(v) = rates
        .expected
        .iter()
        .find(|v| !(v.is_finite() && **v >= 0.0))
    {
        return Err(invalid(
            "rates",
            format!("expected counts must be finite and >= 0, got {v}"),
        ));
    }
    let bins = rates.bins;
    let mut counts = vec![0u32; rates.expected.len()];
    for (pixel, (out, lambdas)) in counts
        .chunks_exact_mut(bins)
        .zip(rates.expected.chunks_exact(bins))
        .enumerate()
    {
        let mut rng = pixel_rng(seed, pixel / rates.cols, pixel % rates.cols);
        for (c, &lambda) in out.iter_mut().zip(lambdas) {
            *c = if lambda > 0.0 {
                let draw: f64 = Poisson::new(lambda)
                    .map_err(|e| invalid("rates", e.to_string()))?
                    .sample(&mut rng);
                draw.min(u32::MAX as f64) as u32
            } else {
                0
            };
        }
    }
    PhotonCube::new(bins, rates.rows, rates.cols, rates.bin_width_ps, counts)
}

/// A simulated acquisition together with the quantities that produced it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cube: PhotonCube,
    pub rates: RateCube,
    pub config: DetectorConfig,
    pub calibration: Calibration,
}

/// Calibrate, build the rate cube and sample it in one go.
pub fn simulate(
    scene: &Scene,
    cfg: &DetectorConfig,
    pulse: &PulseModel,
    target: &SbrTarget,
    seed: u64,
) -> Result<Simulation> {
    let calibration = calibrate(scene, cfg, pulse, target)?;
    let config = calibration.apply(cfg)?;
    let rates = build_rate_cube(scene, &config, pulse, calibration.gain)?;
    let cube = sample_cube(&rates, seed)?;
    Ok(Simulation {
        cube,
        rates,
        config,
        calibration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg80(bins: usize) -> DetectorConfig {
        DetectorConfig::from_picoseconds(bins, 80.0).unwrap()
    }

    /// Composite Simpson integral of the Gaussian density, used as an
    /// independent reference for the erf-based bin masses.
    fn simpson_gauss(a: f64, b: f64, mu: f64, sigma: f64) -> f64 {
        let n = 2000;
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut s = f(a) + f(b);
        for k in 1..n {
            let x = a + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn pulse_centred_in_bin_100_is_symmetric() {
        let cfg = cfg80(1024);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let depth = 100.5 * cfg.bin_depth_width();
        let s = discretize_pulse(&pulse, &cfg, depth).unwrap();
        let support: Vec<usize> = (0..1024).filter(|&k| s[k] > 0.0).collect();
        assert_eq!(support.len(), 13);
        assert_eq!(support.first(), Some(&94));
        assert_eq!(support.last(), Some(&106));
        let peak = (0..1024)
            .max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap())
            .unwrap();
        assert_eq!(peak, 100);
        for d in 1..=6 {
            assert!((s[100 - d] - s[100 + d]).abs() < 1e-12);
        }
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // independent quadrature over each clipped bin interval
        let sigma = pulse.sigma() / cfg.bin_width();
        let half = 3.0 * sigma;
        let norm = simpson_gauss(100.5 - half, 100.5 + half, 100.5, sigma);
        for k in 94..=106usize {
            let a = (k as f64).max(100.5 - half);
            let b = ((k + 1) as f64).min(100.5 + half);
            let reference = simpson_gauss(a, b, 100.5, sigma) / norm;
            assert!(
                (s[k] - reference).abs() < 1e-10,
                "bin {k}: {} vs {}",
                s[k],
                reference
            );
        }
    }

    #[test]
    fn narrow_pulse_concentrates_in_one_bin() {
        let cfg = cfg80(64);
        // sigma <= delta / 100
        let fwhm = 0.8e-12 * 2.0 * (2.0 * std::f64::consts::LN_2).sqrt();
        let pulse = PulseModel::new(fwhm).unwrap();
        let s = discretize_pulse(&pulse, &cfg, 20.5 * cfg.bin_depth_width()).unwrap();
        assert!(s[20] >= 0.99);
        let ideal = PulseModel::new(0.0).unwrap();
        let s = discretize_pulse(&ideal, &cfg, 20.3 * cfg.bin_depth_width()).unwrap();
        assert_eq!(s[20], 1.0);
    }

    #[test]
    fn boundary_depth_splits_evenly() {
        let cfg = cfg80(64);
        let pulse = PulseModel::from_picoseconds(80.0).unwrap();
        let s = discretize_pulse(&pulse, &cfg, 30.0 * cfg.bin_depth_width()).unwrap();
        assert!(s[29] > 0.3);
        assert_eq!(s[29], s[30]);
    }

    #[test]
    fn out_of_range_depth_is_rejected() {
        let cfg = cfg80(64);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        assert!(discretize_pulse(&pulse, &cfg, 0.0).is_err());
        assert!(discretize_pulse(&pulse, &cfg, cfg.max_range()).is_err());
    }

    #[test]
    fn truncated_at_window_edge_loses_mass() {
        let cfg = cfg80(64);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let s = discretize_pulse(&pulse, &cfg, 1.0 * cfg.bin_depth_width()).unwrap();
        let total: f64 = s.iter().sum();
        assert!(total < 1.0 && total > 0.5);
    }

    #[test]
    fn rate_cube_zero_and_background_cases() {
        let cfg = cfg80(32);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let scene = Scene::new(2, 2, vec![0.1; 4], vec![0.0; 4]).unwrap();
        let r = build_rate_cube(&scene, &cfg, &pulse, 3.0).unwrap();
        assert!(r.expected.iter().all(|&v| v == 0.0));

        let cfg_bg = DetectorConfig::with_all(32, 80e-12, 0.5, 1e9, 10).unwrap();
        let scene = Scene::with_unit_reflectivity(2, 2, vec![0.1; 4]).unwrap();
        let r = build_rate_cube(&scene, &cfg_bg, &pulse, 0.0).unwrap();
        let bg = 10.0 * 1e9 * 80e-12;
        assert!(r.expected.iter().all(|&v| v == bg));
    }

    #[test]
    fn rate_cube_is_linear_in_gain() {
        let cfg = DetectorConfig::with_all(32, 80e-12, 0.7, 2e8, 3).unwrap();
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let scene = Scene::new(1, 3, vec![0.1, 0.12, 0.15], vec![1.0, 0.5, 0.2]).unwrap();
        let bg = cfg.background_per_bin();
        let a = build_rate_cube(&scene, &cfg, &pulse, 1.5).unwrap();
        let b = build_rate_cube(&scene, &cfg, &pulse, 3.0).unwrap();
        for (x, y) in a.expected.iter().zip(&b.expected) {
            assert!(((y - bg) - 2.0 * (x - bg)).abs() < 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn calibration_hits_budget_for_unit_reflectivity() {
        let cfg = cfg80(128);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let w = cfg.bin_depth_width();
        let depth: Vec<f64> = (0..16).map(|k| (20.0 + 5.0 * k as f64 + 0.3) * w).collect();
        let scene = Scene::with_unit_reflectivity(4, 4, depth).unwrap();
        let target = SbrTarget::new(2.0, 50.0).unwrap();
        let cal = calibrate(&scene, &cfg, &pulse, &target).unwrap();
        let cfg_bg = cal.apply(&cfg).unwrap();
        let rates = build_rate_cube(&scene, &cfg_bg, &pulse, cal.gain).unwrap();
        for total in rates.pixel_totals() {
            assert!((total - 52.0).abs() < 1e-9 * 52.0);
        }
    }

    #[test]
    fn calibration_with_reflectivity_ramp() {
        let cfg = cfg80(128);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let w = cfg.bin_depth_width();
        let n = 11;
        let depth = vec![60.5 * w; n];
        let alpha: Vec<f64> = (0..n)
            .map(|k| 0.5 + 0.5 * k as f64 / (n - 1) as f64)
            .collect();
        let scene = Scene::new(1, n, depth, alpha).unwrap();
        let target = SbrTarget::new(1.0, 100.0).unwrap();
        let cal = calibrate(&scene, &cfg, &pulse, &target).unwrap();
        let rates = build_rate_cube(&scene, &cfg, &pulse, cal.gain).unwrap();
        let totals = rates.pixel_totals();
        let mean = totals.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((totals[0] / mean - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cal.background_rate, 100.0 / (128.0 * 80e-12));
    }

    #[test]
    fn zero_background_target() {
        let cfg = cfg80(64);
        let pulse = PulseModel::from_picoseconds(400.0).unwrap();
        let scene = Scene::with_unit_reflectivity(1, 1, vec![0.3]).unwrap();
        let cal = calibrate(&scene, &cfg, &pulse, &SbrTarget::new(5.0, 0.0).unwrap()).unwrap();
        assert_eq!(cal.background_rate, 0.0);
        let dark = Scene::new(1, 1, vec![0.3], vec![0.0]).unwrap();
        assert!(matches!(
            calibrate(&dark, &cfg, &pulse, &SbrTarget::new(5.0, 0.0).unwrap()),
            Err(Error::ZeroReflectivity)
        ));
    }

    fn constant_rates(rate: f64, rows: usize, cols: usize, bins: usize) -> RateCube {
        RateCube {
            bins,
            rows,
            cols,
            bin_width_ps: 80,
            expected: vec![rate; rows * cols * bins],
        }
    }

    #[test]
    fn zero_rates_sample_to_zero() {
        let cube = sample_cube(&constant_rates(0.0, 3, 3, 8), 1).unwrap();
        assert_eq!(cube.total(), 0);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let rates = constant_rates(2.5, 8, 8, 16);
        let a = sample_cube(&rates, 7).unwrap();
        let b = sample_cube(&rates, 7).unwrap();
        let c = sample_cube(&rates, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn pixel_streams_do_not_depend_on_image_width() {
        let narrow = sample_cube(&constant_rates(3.0, 2, 2, 16), 11).unwrap();
        let wide = sample_cube(&constant_rates(3.0, 2, 5, 16), 11).unwrap();
        assert_eq!(narrow.histogram(1, 1), wide.histogram(1, 1));
    }

    #[test]
    fn sampled_mean_matches_rate() {
        let cube = sample_cube(&constant_rates(4.0, 100, 100, 1), 3).unwrap();
        let mean = cube.total() as f64 / 10_000.0;
        assert!((3.94..=4.06).contains(&mean), "mean {mean}");
    }
}
