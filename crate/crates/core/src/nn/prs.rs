//! Pixel-wise residual shrinkage block.
//!
//! `X -> conv -> ReLU -> conv -> X^r`, viewed as `(B*C, T, 1, M, N)` so time
//! becomes the channel axis. One branch computes the scaling map `S` with
//! batch norm, three pointwise convolutions and a sigmoid; the other averages
//! `|X^r|` over time. `tau = S * mean|X^r|`, `X^d = shrink(X^r, tau)` and the
//! block returns `X + X^d`.

use rand_chacha::ChaCha8Rng;

use super::layers::{
    batchnorm_backward, batchnorm_forward, relu_backward, relu_forward, sigmoid_backward,
    sigmoid_forward, BatchNormCache, BatchNormSpec, ConvGeom, Mode,
};
use super::params::{ConvLayer, Grads, LayerSpec, ParamId, ParamStore};
use crate::error::{shape_mismatch, Result};
use crate::shrinkage::{apply_thresholds, pixel_thresholds, soft_threshold_backward, ThresholdMap};
use crate::tensor::FeatureTensor;

/// Per-channel batch norm bound to a store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub spec: BatchNormSpec,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            channels,
            spec: BatchNormSpec::default(),
            gamma: store.add(
                format!("{name}.gamma"),
                vec![channels],
                vec![1.0; channels],
                true,
            ),
            beta: store.add(
                format!("{name}.beta"),
                vec![channels],
                vec![0.0; channels],
                true,
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                vec![channels],
                vec![0.0; channels],
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                vec![channels],
                vec![1.0; channels],
                false,
            ),
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &FeatureTensor,
        mode: Mode,
    ) -> Result<(FeatureTensor, BatchNormCache)> {
        let gamma = store.get(self.gamma).to_vec();
        let beta = store.get(self.beta).to_vec();
        let mut rm = store.get(self.running_mean).to_vec();
        let mut rv = store.get(self.running_var).to_vec();
        let out = batchnorm_forward(x, &gamma, &beta, &mut rm, &mut rv, &self.spec, mode)?;
        store.get_mut(self.running_mean).copy_from_slice(&rm);
        store.get_mut(self.running_var).copy_from_slice(&rv);
        Ok(out)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &BatchNormCache,
        upstream: &FeatureTensor,
        grads: &mut Grads,
    ) -> Result<FeatureTensor> {
        let (gx, gg, gb) = batchnorm_backward(cache, store.get(self.gamma), upstream)?;
        grads.accumulate(self.gamma, &gg);
        grads.accumulate(self.beta, &gb);
        Ok(gx)
    }
}

/// Parameters of one block operating on `channels` feature maps of `time`
/// bins.
#[derive(Debug, Clone, PartialEq)]
pub struct PrsBlock {
    pub channels: usize,
    pub time: usize,
    pub conv_a: ConvLayer,
    pub conv_b: ConvLayer,
    pub norm: BatchNormLayer,
    /// Pointwise convolutions `T -> T -> T -> 1`.
    pub fc: [ConvLayer; 3],
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PrsCache {
    x: FeatureTensor,
    a: FeatureTensor,
    r: FeatureTensor,
    xr: FeatureTensor,
    norm: BatchNormCache,
    fc_in: [FeatureTensor; 3],
    scale: FeatureTensor,
    map: ThresholdMap,
}

impl PrsCache {
    pub fn threshold_map(&self) -> &ThresholdMap {
        &self.map
    }
}

impl PrsBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        time: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = LayerSpec::conv(channels, channels, ConvGeom::same([3, 3, 3]));
        let conv_a = ConvLayer::new(store, &format!("{name}.conv_a"), conv, rng);
        let conv_b = ConvLayer::new(store, &format!("{name}.conv_b"), conv, rng);
        let norm = BatchNormLayer::new(store, &format!("{name}.norm"), time);
        let fc = [
            ConvLayer::new(
                store,
                &format!("{name}.fc0"),
                LayerSpec::pointwise(time, time),
                rng,
            ),
            ConvLayer::new(
                store,
                &format!("{name}.fc1"),
                LayerSpec::pointwise(time, time),
                rng,
            ),
            ConvLayer::new(
                store,
                &format!("{name}.fc2"),
                LayerSpec::pointwise(time, 1),
                rng,
            ),
        ];
        Self {
            channels,
            time,
            conv_a,
            conv_b,
            norm,
            fc,
        }
    }

    pub fn forward(
        &self,
        store: &mut ParamStore,
        x: &FeatureTensor,
        mode: Mode,
    ) -> Result<(FeatureTensor, PrsCache)> {
        let [b, c, t, m, n] = x.shape();
        if (c, t) != (self.channels, self.time) {
            return Err(shape_mismatch((self.channels, self.time), (c, t)));
        }
        let a = self.conv_a.forward(store, x)?;
        let r = relu_forward(&a);
        let xr = self.conv_b.forward(store, &r)?;
        // time becomes the channel axis of B*C single-frame maps
        let view = xr.clone().reshape([b * c, t, 1, m, n])?;
        let (h0, norm) = self.norm.forward(store, &view, mode)?;
        let h1 = self.fc[0].forward(store, &h0)?;
        let h2 = self.fc[1].forward(store, &h1)?;
        let logits = self.fc[2].forward(store, &h2)?;
        let scale = sigmoid_forward(&logits);
        let map = pixel_thresholds(&xr, scale.data())?;
        let xd = apply_thresholds(&xr, &map)?;
        let out = x.add(&xd)?;
        Ok((
            out,
            PrsCache {
                x: x.clone(),
                a,
                r,
                xr,
                norm,
                fc_in: [h0, h1, h2],
                scale,
                map,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &PrsCache,
        upstream: &FeatureTensor,
        grads: &mut Grads,
    ) -> Result<FeatureTensor> {
        let [b, c, t, m, n] = cache.xr.shape();
        upstream.check_shape(cache.xr.shape())?;
        let plane = m * n;
        let (xr, up) = (cache.xr.data(), upstream.data());
        let map = &cache.map;

        // shrinkage: gradients w.r.t. X^r and tau
        let mut g_xr = FeatureTensor::zeros(cache.xr.shape());
        let mut g_tau = vec![0.0; b * c * plane];
        {
            let gx = g_xr.data_mut();
            for p in 0..b * c {
                for k in 0..t {
                    let base = (p * t + k) * plane;
                    for q in 0..plane {
                        let (dx, dt) = soft_threshold_backward(
                            xr[base + q],
                            map.tau[p * plane + q],
                            up[base + q],
                        );
                        gx[base + q] += dx;
                        g_tau[p * plane + q] += dt;
                    }
                }
            }
            // tau = S * mean|X^r|
            let inv_t = 1.0 / t as f64;
            for p in 0..b * c {
                for q in 0..plane {
                    let g_mean = g_tau[p * plane + q] * map.scale[p * plane + q] * inv_t;
                    if g_mean == 0.0 {
                        continue;
                    }
                    for k in 0..t {
                        let idx = (p * t + k) * plane + q;
                        gx[idx] += g_mean * sign(xr[idx]);
                    }
                }
            }
        }
        let g_scale: Vec<f64> = g_tau
            .iter()
            .zip(&map.mean_abs)
            .map(|(g, a)| g * a)
            .collect();
        let g_scale = FeatureTensor::from_vec(cache.scale.shape(), g_scale)?;
        let g_logits = sigmoid_backward(&cache.scale, &g_scale);
        let g_h2 = self.fc[2].backward(store, &cache.fc_in[2], &g_logits, grads)?;
        let g_h1 = self.fc[1].backward(store, &cache.fc_in[1], &g_h2, grads)?;
        let g_h0 = self.fc[0].backward(store, &cache.fc_in[0], &g_h1, grads)?;
        let g_view = self.norm.backward(store, &cache.norm, &g_h0, grads)?;
        g_xr.add_assign(&g_view.reshape(cache.xr.shape())?)?;

        let g_r = self.conv_b.backward(store, &cache.r, &g_xr, grads)?;
        let g_a = relu_backward(&cache.a, &g_r);
        let mut g_x = self.conv_a.backward(store, &cache.x, &g_a, grads)?;
        g_x.add_assign(upstream)?;
        Ok(g_x)
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
