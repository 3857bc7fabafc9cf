//! Layer descriptions, the flat parameter store and the Adam optimiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward, ConvGeom,
};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tensor::FeatureTensor;

/// Operator kinds a network is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3d,
    ConvTranspose3d,
    /// Pointwise convolution over channels.
    Conv2d1x1,
    BatchNorm,
    Sigmoid,
    Relu,
    SoftmaxTime,
    Reshape,
    SoftShrinkage,
}

/// Shape description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, geom: ConvGeom) -> Self {
        Self::with_geom(LayerKind::Conv3d, in_channels, out_channels, geom)
    }

    pub fn conv_transpose(in_channels: usize, out_channels: usize, geom: ConvGeom) -> Self {
        Self::with_geom(LayerKind::ConvTranspose3d, in_channels, out_channels, geom)
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::with_geom(
            LayerKind::Conv2d1x1,
            in_channels,
            out_channels,
            ConvGeom::pointwise(),
        )
    }

    /// Parameter-free or per-channel layers.
    pub fn elementwise(kind: LayerKind, channels: usize) -> Self {
        Self::with_geom(kind, channels, channels, ConvGeom::pointwise())
    }

    fn with_geom(kind: LayerKind, in_channels: usize, out_channels: usize, g: ConvGeom) -> Self {
        Self {
            kind,
            in_channels,
            out_channels,
            kernel: g.kernel,
            stride: g.stride,
            padding: g.padding,
            dilation: g.dilation,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.kernel, self.stride, self.padding, self.dilation)
    }

    /// Output `(channels, time, rows, cols)` for an input of the given extent.
    pub fn output_dims(&self, input: [usize; 4]) -> Result<[usize; 4]> {
        let [c, t, m, n] = input;
        if c != self.in_channels {
            return Err(shape_mismatch(self.in_channels, c));
        }
        let o = match self.kind {
            LayerKind::Conv3d | LayerKind::Conv2d1x1 => self.geom().out_dims([t, m, n])?,
            LayerKind::ConvTranspose3d => self.geom().transposed_out_dims([t, m, n])?,
            _ => [t, m, n],
        };
        if o.contains(&0) {
            return Err(shape_mismatch("positive output extent", o));
        }
        Ok([self.out_channels, o[0], o[1], o[2]])
    }

    fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.geom().taps()
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.geom().taps()
    }
}

/// Handle to one entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One named tensor. Non-trainable entries hold running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

/// Flat, ordered collection of every weight, bias and statistic of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Replaces every value with the same-named entry of `other`; names,
    /// shapes and order must agree.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.value.clone_from(&theirs.value);
        }
        Ok(())
    }

    /// Zero gradient buffers aligned with the store.
    pub fn zero_grads(&self) -> Grads {
        Grads(
            self.params
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
        )
    }
}

/// Gradient buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.0[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Uniform `[-sqrt(1/fan_in), sqrt(1/fan_in)]` values.
pub fn fan_in_uniform(len: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

/// A convolution (regular, transposed or pointwise) bound to its weight and
/// bias in a store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    pub fn new(store: &mut ParamStore, name: &str, spec: LayerSpec, rng: &mut ChaCha8Rng) -> Self {
        let wshape = match spec.kind {
            LayerKind::ConvTranspose3d => vec![spec.in_channels, spec.out_channels],
            _ => vec![spec.out_channels, spec.in_channels],
        }
        .into_iter()
        .chain(spec.kernel)
        .collect();
        let weight = store.add(
            format!("{name}.weight"),
            wshape,
            fan_in_uniform(spec.weight_len(), spec.fan_in(), rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            vec![spec.out_channels],
            fan_in_uniform(spec.out_channels, spec.fan_in(), rng),
            true,
        );
        Self { spec, weight, bias }
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureTensor) -> Result<FeatureTensor> {
        let (w, b, g) = (
            store.get(self.weight),
            store.get(self.bias),
            self.spec.geom(),
        );
        check_input(&self.spec, x)?;
        match self.spec.kind {
            LayerKind::ConvTranspose3d => {
                conv_transpose3d_forward(x, w, b, self.spec.out_channels, &g)
            }
            _ => conv3d_forward(x, w, b, self.spec.out_channels, &g),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &FeatureTensor,
        upstream: &FeatureTensor,
        grads: &mut Grads,
    ) -> Result<FeatureTensor> {
        let (w, g) = (store.get(self.weight), self.spec.geom());
        let r = match self.spec.kind {
            LayerKind::ConvTranspose3d => {
                conv_transpose3d_backward(x, w, self.spec.out_channels, &g, upstream)?
            }
            _ => conv3d_backward(x, w, self.spec.out_channels, &g, upstream)?,
        };
        grads.accumulate(self.weight, &r.weight);
        grads.accumulate(self.bias, &r.bias);
        Ok(r.input)
    }
}

fn check_input(spec: &LayerSpec, x: &FeatureTensor) -> Result<()> {
    let [_, c, t, m, n] = x.shape();
    spec.output_dims([c, t, m, n]).map(|_| ())
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter. Non-finite
/// gradients abort the step and leave the parameters untouched.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Grads,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    if grads.0.len() != store.len() || state.m.len() != store.len() {
        return Err(shape_mismatch(store.len(), grads.0.len()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid("lr", format!("must be finite and >= 0, got {lr}")));
    }
    for (p, g) in store.params.iter().zip(&grads.0) {
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}[{k}] = {}",
                p.name, g[k]
            )));
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (idx, p) in store.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v, g) = (&mut state.m[idx], &mut state.v[idx], &grads.0[idx]);
        for k in 0..p.value.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            p.value[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    if !store.all_finite() {
        return Err(Error::NonFinite("parameters after Adam step".into()));
    }
    Ok(())
}

/// Step decay: `lr0 * factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            factor: 0.6,
            every_epochs: 5,
        }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        self.initial * self.factor.powi((epoch / self.every_epochs.max(1)) as i32)
    }
}
