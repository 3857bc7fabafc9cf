//! The full network: temporal window, strided encoder, PRS blocks,
//! transposed-convolution decoder and a time softmax head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    relu_backward, relu_forward, softmax_time, softmax_time_backward, ConvGeom, Mode,
};
use super::params::{ConvLayer, Grads, LayerSpec, ParamStore};
use super::prs::{PrsBlock, PrsCache};
use crate::domain::{depth_per_bin, PhotonCube, Prediction, ProbCube};
use crate::error::{invalid, shape_mismatch, Result};
use crate::loss::{avg_variance, moments, soft_argmax_with_width};
use crate::tensor::FeatureTensor;
use crate::windowing::{temporal_window, WindowConfig};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrsNetConfig {
    /// Time bins of the input cube.
    pub bins: usize,
    pub window: WindowConfig,
    /// Number of stride-2 temporal stages in the encoder (and decoder).
    pub encoder_stages: usize,
    pub base_channels: usize,
    pub num_prs_blocks: usize,
}

impl Default for PrsNetConfig {
    fn default() -> Self {
        Self {
            bins: 64,
            window: WindowConfig::new(5).expect("odd"),
            encoder_stages: 2,
            base_channels: 8,
            num_prs_blocks: 2,
        }
    }
}

impl PrsNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(invalid("base_channels", "must be positive"));
        }
        if self.encoder_stages > 16 {
            return Err(invalid(
                "encoder_stages",
                format!("too many: {}", self.encoder_stages),
            ));
        }
        let factor = 1usize << self.encoder_stages;
        if self.bins == 0 || !self.bins.is_multiple_of(factor) {
            return Err(invalid(
                "bins",
                format!(
                    "{} is not a positive multiple of 2^{}",
                    self.bins, self.encoder_stages
                ),
            ));
        }
        if self.bins / factor < 2 {
            return Err(invalid(
                "bins",
                "compressed time axis needs at least 2 bins",
            ));
        }
        Ok(())
    }

    /// Channels and time bins inside the PRS blocks.
    pub fn bottleneck(&self) -> (usize, usize) {
        (
            self.base_channels << self.encoder_stages,
            self.bins >> self.encoder_stages,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Conv(ConvLayer),
    Relu,
    Prs(Box<PrsBlock>),
}

#[derive(Debug, Clone)]
enum OpCache {
    Input(FeatureTensor),
    Prs(Box<PrsCache>),
}

/// Values kept by [`PrsNet::forward`] for [`PrsNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    ops: Vec<OpCache>,
    /// Softmax output `(B, 1, T, M, N)`.
    pub probs: FeatureTensor,
}

/// Network weights, running statistics and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PrsNet {
    pub config: PrsNetConfig,
    pub store: ParamStore,
    ops: Vec<Op>,
}

impl PrsNet {
    /// Freshly initialised network; the seed fixes every weight.
    pub fn new(config: PrsNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ops = Vec::new();
        let base = config.base_channels;
        let mut conv =
            |store: &mut ParamStore, ops: &mut Vec<Op>, name: String, spec: LayerSpec| {
                ops.push(Op::Conv(ConvLayer::new(store, &name, spec, &mut rng)));
                ops.push(Op::Relu);
            };
        conv(
            &mut store,
            &mut ops,
            "stem".into(),
            LayerSpec::conv(1, base, ConvGeom::same([3, 3, 3])),
        );
        let mut ch = base;
        for s in 0..config.encoder_stages {
            let down = ConvGeom::new([3, 3, 3], [2, 1, 1], [1, 1, 1], [1, 1, 1]);
            conv(
                &mut store,
                &mut ops,
                format!("enc{s}.down"),
                LayerSpec::conv(ch, 2 * ch, down),
            );
            let dilated = ConvGeom::new([3, 3, 3], [1, 1, 1], [2, 2, 2], [2, 2, 2]);
            conv(
                &mut store,
                &mut ops,
                format!("enc{s}.dilated"),
                LayerSpec::conv(2 * ch, 2 * ch, dilated),
            );
            ch *= 2;
        }
        let (_, t_mid) = config.bottleneck();
        for k in 0..config.num_prs_blocks {
            let blk = PrsBlock::new(&mut store, &format!("prs{k}"), ch, t_mid, &mut rng);
            ops.push(Op::Prs(Box::new(blk)));
        }
        for s in 0..config.encoder_stages {
            let up = ConvGeom::new([6, 3, 3], [2, 1, 1], [2, 1, 1], [1, 1, 1]);
            let spec = LayerSpec::conv_transpose(ch, ch / 2, up);
            ops.push(Op::Conv(ConvLayer::new(
                &mut store,
                &format!("dec{s}"),
                spec,
                &mut rng,
            )));
            ops.push(Op::Relu);
            ch /= 2;
        }
        ops.push(Op::Conv(ConvLayer::new(
            &mut store,
            "head",
            LayerSpec::pointwise(ch, 1),
            &mut rng,
        )));
        Ok(Self { config, store, ops })
    }

    /// Windowed network input `(1, 1, T, M, N)` for a cube.
    pub fn prepare_input(&self, cube: &PhotonCube) -> Result<FeatureTensor> {
        if cube.bins() != self.config.bins {
            return Err(shape_mismatch(self.config.bins, cube.bins()));
        }
        Ok(FeatureTensor::from_real_cube(&temporal_window(
            &cube.to_real(),
            self.config.window,
        )))
    }

    /// Runs the network on windowed input and returns the time softmax.
    pub fn forward(&mut self, input: &FeatureTensor, mode: Mode) -> Result<ForwardCache> {
        let [_, c, t, ..] = input.shape();
        if (c, t) != (1, self.config.bins) {
            return Err(shape_mismatch((1, self.config.bins), (c, t)));
        }
        input.ensure_finite("network input")?;
        let mut caches = Vec::with_capacity(self.ops.len());
        let mut h = input.clone();
        for op in &self.ops {
            let next = match op {
                Op::Conv(l) => l.forward(&self.store, &h)?,
                Op::Relu => relu_forward(&h),
                Op::Prs(blk) => {
                    let (y, cache) = blk.forward(&mut self.store, &h, mode)?;
                    caches.push(OpCache::Prs(Box::new(cache)));
                    h = y;
                    continue;
                }
            };
            caches.push(OpCache::Input(std::mem::replace(&mut h, next)));
        }
        let probs = softmax_time(&h);
        Ok(ForwardCache { ops: caches, probs })
    }

    /// Parameter gradients given the gradient w.r.t. the softmax output.
    pub fn backward_probs(
        &self,
        cache: &ForwardCache,
        grad_probs: &FeatureTensor,
    ) -> Result<Grads> {
        let g = softmax_time_backward(&cache.probs, grad_probs);
        self.backward(cache, &g)
    }

    /// Parameter gradients given the gradient w.r.t. the pre-softmax logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &FeatureTensor) -> Result<Grads> {
        grad_logits.check_shape(cache.probs.shape())?;
        let mut grads = self.store.zero_grads();
        let mut g = grad_logits.clone();
        for (op, c) in self.ops.iter().zip(&cache.ops).rev() {
            g = match (op, c) {
                (Op::Conv(l), OpCache::Input(x)) => l.backward(&self.store, x, &g, &mut grads)?,
                (Op::Relu, OpCache::Input(x)) => relu_backward(x, &g),
                (Op::Prs(blk), OpCache::Prs(pc)) => {
                    blk.backward(&self.store, pc, &g, &mut grads)?
                }
                _ => unreachable!("cache built by forward"),
            };
        }
        Ok(grads)
    }

    /// Per-pixel distributions and depth estimate for one cube.
    pub fn predict(&mut self, cube: &PhotonCube) -> Result<Prediction> {
        let input = self.prepare_input(cube)?;
        let cache = self.forward(&input, Mode::Eval)?;
        let probs = cache.probs.plane_to_probs(0, 0);
        prediction_from_probs(probs, depth_per_bin(cube.bin_width()))
    }
}

/// Decodes a distribution cube into a [`Prediction`].
pub fn prediction_from_probs(probs: ProbCube, bin_depth_width: f64) -> Result<Prediction> {
    let depth = soft_argmax_with_width(&probs, bin_depth_width)?;
    let mean_bin = moments(&probs).into_iter().map(|(m, _)| m).collect();
    let avg_variance = avg_variance(&probs);
    Ok(Prediction {
        probs,
        depth,
        mean_bin,
        avg_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PrsNetConfig {
        PrsNetConfig {
            bins: 16,
            window: WindowConfig::new(3).unwrap(),
            encoder_stages: 2,
            base_channels: 2,
            num_prs_blocks: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(PrsNetConfig::default().validate().is_ok());
        assert_eq!(PrsNetConfig::default().bottleneck(), (32, 16));
        let bad = PrsNetConfig {
            bins: 18,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = PrsNetConfig {
            base_channels: 0,
            ..small()
        };
        assert!(PrsNet::new(bad, 0).is_err());
    }

    #[test]
    fn output_is_distribution_over_input_bins() {
        for d in 0..=3 {
            let cfg = PrsNetConfig {
                bins: 32,
                encoder_stages: d,
                ..small()
            };
            let mut net = PrsNet::new(cfg, 3).unwrap();
            let counts: Vec<u32> = (0..32 * 3 * 4).map(|k| ((k * 37) % 5) as u32).collect();
            let cube = PhotonCube::new(32, 3, 4, 80, counts).unwrap();
            let pred = net.predict(&cube).unwrap();
            assert_eq!(pred.probs.bins, 32);
            assert!(pred.probs.max_normalization_error() < 1e-6);
            assert_eq!(pred.depth.rows(), 3);
            assert_eq!(pred.mean_bin.len(), 12);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = PrsNet::new(small(), 9).unwrap();
        let b = PrsNet::new(small(), 9).unwrap();
        let c = PrsNet::new(small(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn wrong_bins_rejected() {
        let mut net = PrsNet::new(small(), 0).unwrap();
        let cube = PhotonCube::zeros(8, 2, 2, 80).unwrap();
        assert!(net.predict(&cube).is_err());
    }
}
