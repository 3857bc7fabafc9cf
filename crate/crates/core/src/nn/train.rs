//! Mini-batch Adam training on simulated cubes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Mode;
use super::model::{PrsNet, PrsNetConfig};
use super::params::{adam_step, AdamConfig, AdamState, LrSchedule};
use crate::domain::{depth_per_bin, DetectorConfig, PhotonCube, ProbCube, PulseModel, Scene};
use crate::error::{invalid, shape_mismatch, Result};
use crate::io::synth::random_scene;
use crate::loss::{total_loss, DataTerm, LabelCube, LossConfig, Target};
use crate::simulator::{discretize_pulse, simulate, SbrTarget};
use crate::tensor::FeatureTensor;
use crate::windowing::temporal_window;

/// One training cube with its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cube: PhotonCube,
    pub target: Target,
}

impl Sample {
    /// Hard labels from the scene depth and, per pixel, the normalised pulse
    /// waveform (one-hot where the pulse falls outside the window).
    pub fn new(
        cube: PhotonCube,
        scene: &Scene,
        cfg: &DetectorConfig,
        pulse: &PulseModel,
    ) -> Result<Self> {
        if (cube.rows(), cube.cols(), cube.bins()) != (scene.rows(), scene.cols(), cfg.bins()) {
            return Err(shape_mismatch(
                (scene.rows(), scene.cols(), cfg.bins()),
                (cube.rows(), cube.cols(), cube.bins()),
            ));
        }
        let labels = LabelCube::from_depth(&scene.depth_image(), cfg)?;
        let mut p = Vec::with_capacity(cube.pixels() * cfg.bins());
        for (&z, &y) in scene.depth().iter().zip(&labels.labels) {
            let mut w = discretize_pulse(pulse, cfg, z)?;
            let mass: f64 = w.iter().sum();
            if mass > 0.0 {
                w.iter_mut().for_each(|v| *v /= mass);
            } else {
                w[y] = 1.0;
            }
            p.extend(w);
        }
        let waveform = ProbCube::new(cfg.bins(), scene.rows(), scene.cols(), p)?;
        Ok(Self {
            cube,
            target: Target {
                labels,
                waveform: Some(waveform),
            },
        })
    }
}

/// Recipe for a simulated training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub samples: usize,
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
    pub bin_ps: f64,
    pub fwhm_ps: f64,
    /// `(signal, background)` photon budgets drawn uniformly per sample.
    pub sbr: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            samples: 32,
            rows: 16,
            cols: 16,
            bins: 64,
            bin_ps: 80.0,
            fwhm_ps: 240.0,
            sbr: vec![(2.0, 50.0), (5.0, 50.0), (10.0, 50.0)],
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Depths keep the whole pulse inside the window.
    pub fn depth_range(&self) -> Result<(f64, f64)> {
        let cfg = DetectorConfig::from_picoseconds(self.bins, self.bin_ps)?;
        let pulse = PulseModel::from_picoseconds(self.fwhm_ps)?;
        let margin = depth_per_bin(pulse.half_support()) + 2.0 * cfg.bin_depth_width();
        let (near, far) = (margin, cfg.max_range() - margin);
        if !(near < far) {
            return Err(invalid("dataset", "pulse too wide for the time window"));
        }
        Ok((near, far))
    }
}

/// Simulates `spec.samples` random scenes.
pub fn synthetic_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    if spec.sbr.is_empty() {
        return Err(invalid("sbr", "need at least one signal/background pair"));
    }
    let cfg = DetectorConfig::from_picoseconds(spec.bins, spec.bin_ps)?;
    let pulse = PulseModel::from_picoseconds(spec.fwhm_ps)?;
    let range = spec.depth_range()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.samples)
        .map(|k| {
            let scene = random_scene(spec.rows, spec.cols, range, &mut rng)?;
            let (s, b) = *spec.sbr.choose(&mut rng).expect("non-empty");
            let target = SbrTarget::new(s, b)?;
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let sim = simulate(&scene, &cfg, &pulse, &target, seed)?;
            Sample::new(sim.cube, &scene, &cfg, &pulse)
        })
        .collect()
}

/// Optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: PrsNetConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub data_term: DataTerm,
    pub loss: LossConfig,
    /// Seeds the weights and the sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: PrsNetConfig::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 4,
            data_term: DataTerm::CrossEntropy,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// A network together with its optimiser state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: PrsNet,
    pub adam: AdamState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let net = PrsNet::new(config.net, config.seed)?;
        Ok(Self::from_net(net, config))
    }

    pub fn from_net(net: PrsNet, config: TrainConfig) -> Self {
        let adam = AdamState::new(&net.store, config.adam);
        Self { net, adam, config }
    }

    /// Windowed inputs for a batch.
    fn batch_input(&self, batch: &[&Sample]) -> Result<FeatureTensor> {
        let cubes = batch
            .iter()
            .map(|s| {
                if s.cube.bins() != self.net.config.bins {
                    return Err(shape_mismatch(self.net.config.bins, s.cube.bins()));
                }
                Ok(temporal_window(&s.cube.to_real(), self.net.config.window))
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureTensor::from_real_cubes(&cubes)
    }

    /// Batch-mean loss at the current parameters without updating anything.
    pub fn evaluate(&mut self, batch: &[&Sample]) -> Result<f64> {
        let input = self.batch_input(batch)?;
        let mut scratch = self.net.clone();
        let cache = scratch.forward(&input, Mode::Train)?;
        let mut total = 0.0;
        for (b, s) in batch.iter().enumerate() {
            let probs = cache.probs.plane_to_probs(b, 0);
            let w = depth_per_bin(s.cube.bin_width());
            total += total_loss(
                &s.target,
                &probs,
                self.config.data_term,
                &self.config.loss,
                w,
            )?
            .value;
        }
        Ok(total / batch.len() as f64)
    }

    /// One Adam step on a batch; returns the batch-mean loss before the step.
    pub fn step(&mut self, batch: &[&Sample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("batch", "empty"));
        }
        let input = self.batch_input(batch)?;
        let cache = self.net.forward(&input, Mode::Train)?;
        let inv = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut grad_rows = Vec::with_capacity(batch.len());
        for (b, s) in batch.iter().enumerate() {
            let probs = cache.probs.plane_to_probs(b, 0);
            let w = depth_per_bin(s.cube.bin_width());
            let l = total_loss(
                &s.target,
                &probs,
                self.config.data_term,
                &self.config.loss,
                w,
            )?;
            total += l.value;
            grad_rows.push(
                l.grad_logits
                    .into_iter()
                    .map(|g| g * inv)
                    .collect::<Vec<f64>>(),
            );
        }
        let [_, _, t, m, n] = cache.probs.shape();
        let refs: Vec<&[f64]> = grad_rows.iter().map(|v| v.as_slice()).collect();
        let grad = FeatureTensor::from_pixel_major(&refs, t, m, n)?;
        let grads = self.net.backward(&cache, &grad)?;
        adam_step(&mut self.net.store, &grads, lr, &mut self.adam)?;
        Ok(total * inv)
    }

    /// Full training run; `on_epoch` sees the statistics of every epoch.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if data.is_empty() {
            return Err(invalid("dataset", "empty"));
        }
        let bs = self.config.batch_size.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x05ee_d0f0_d3e5);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut rng);
            let lr = self.config.schedule.at_epoch(epoch);
            let (mut sum, mut batches) = (0.0, 0);
            for chunk in order.chunks(bs) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
                sum += self.step(&batch, lr)?;
                batches += 1;
            }
            let stats = EpochStats {
                epoch,
                lr,
                mean_loss: sum / batches as f64,
            };
            on_epoch(&stats);
            history.push(stats);
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::WindowConfig;

    fn tiny() -> (TrainConfig, Vec<Sample>) {
        let spec = DatasetSpec {
            samples: 3,
            rows: 4,
            cols: 4,
            bins: 16,
            bin_ps: 80.0,
            fwhm_ps: 80.0,
            sbr: vec![(20.0, 4.0)],
            seed: 1,
        };
        let cfg = TrainConfig {
            net: PrsNetConfig {
                bins: 16,
                window: WindowConfig::new(3).unwrap(),
                encoder_stages: 1,
                base_channels: 2,
                num_prs_blocks: 1,
            },
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        (cfg, synthetic_dataset(&spec).unwrap())
    }

    #[test]
    fn waveform_targets_are_distributions() {
        let (_, data) = tiny();
        for s in &data {
            let w = s.target.waveform.as_ref().unwrap();
            assert!(w.max_normalization_error() < 1e-12);
            for (d, &y) in w.dists().zip(&s.target.labels.labels) {
                let peak = crate::baselines::argmax_index(d);
                assert!(peak.abs_diff(y) <= 1);
            }
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (cfg, data) = tiny();
        let run = || {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            let h = t.fit(&data, |_| {}).unwrap();
            (t.net.store, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert!(a.all_finite());
    }

    #[test]
    fn repeated_steps_reduce_loss_on_one_sample() {
        let (cfg, data) = tiny();
        let mut t = Trainer::new(cfg).unwrap();
        let batch = [&data[0]];
        let first = t.step(&batch, 1e-2).unwrap();
        for _ in 0..30 {
            t.step(&batch, 1e-2).unwrap();
        }
        assert!(t.evaluate(&batch).unwrap() < first);
    }
}
