//! Hand-written forward and backward passes for the network's building
//! blocks. All tensors are `(batch, channel, time, row, col)`.
//!
//! Convolution weights are stored `[out, in, kt, kh, kw]`; transposed
//! convolution weights are stored `[in, out, kt, kh, kw]`.

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::tensor::FeatureTensor;

/// Kernel, stride, padding and dilation along `(time, row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        dilation: [usize; 3],
    ) -> Self {
        Self {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// Unit stride, no dilation, padding that preserves size for odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self::new(kernel, [1; 3], kernel.map(|k| k / 2), [1; 3])
    }

    pub fn pointwise() -> Self {
        Self::same([1, 1, 1])
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output extent of a regular convolution.
    pub fn out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(invalid("conv geometry", format!("{self:?}")));
            }
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < span {
                return Err(shape_mismatch(
                    format!("extent >= {span} along axis {a}"),
                    input,
                ));
            }
            out[a] = (padded - span) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extent of a transposed convolution,
    /// `(n - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1`.
    pub fn transposed_out_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if input[a] == 0 || self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0
            {
                return Err(invalid("conv geometry", format!("{self:?} on {input:?}")));
            }
            let full =
                (input[a] - 1) * self.stride[a] + self.dilation[a] * (self.kernel[a] - 1) + 1;
            if full <= 2 * self.padding[a] {
                return Err(shape_mismatch("positive transposed extent", input));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Index correspondences between a convolution's input ("big") and output
/// ("small") volumes for every kernel tap.
struct TapMap {
    big: [usize; 3],
    small: [usize; 3],
    kernel: [usize; 3],
    /// For each `(kt, kh)`: pairs of `(small row, big row)` where a row is a
    /// `(t, h)` line of the volume.
    rows: Vec<Vec<(usize, usize)>>,
    /// For each `kw`: `(first small col, end small col, first big col)`.
    spans: Vec<(usize, usize, usize)>,
    stride_w: usize,
}

impl TapMap {
    fn new(g: &ConvGeom, big: [usize; 3], small: [usize; 3]) -> Self {
        let pos = |o: usize, k: usize, a: usize| -> Option<usize> {
            let v = (o * g.stride[a] + k * g.dilation[a]) as isize - g.padding[a] as isize;
            (v >= 0 && (v as usize) < big[a]).then_some(v as usize)
        };
        let mut rows = Vec::with_capacity(g.kernel[0] * g.kernel[1]);
        for kt in 0..g.kernel[0] {
            for kh in 0..g.kernel[1] {
                let mut pairs = Vec::new();
                for ot in 0..small[0] {
                    let Some(it) = pos(ot, kt, 0) else { continue };
                    for oh in 0..small[1] {
                        let Some(ih) = pos(oh, kh, 1) else { continue };
                        pairs.push((ot * small[1] + oh, it * big[1] + ih));
                    }
                }
                rows.push(pairs);
            }
        }
        let spans = (0..g.kernel[2])
            .map(|kw| {
                let valid: Vec<(usize, usize)> = (0..small[2])
                    .filter_map(|ow| pos(ow, kw, 2).map(|iw| (ow, iw)))
                    .collect();
                match (valid.first(), valid.last()) {
                    (Some(&(lo, iw)), Some(&(hi, _))) => (lo, hi + 1, iw),
                    _ => (0, 0, 0),
                }
            })
            .collect();
        Self {
            big,
            small,
            kernel: g.kernel,
            rows,
            spans,
            stride_w: g.stride[2],
        }
    }

    fn big_len(&self) -> usize {
        self.big.iter().product()
    }

    fn small_len(&self) -> usize {
        self.small.iter().product()
    }

    #[inline]
    fn tap(&self, kt: usize, kh: usize, kw: usize) -> (&[(usize, usize)], (usize, usize, usize)) {
        (&self.rows[kt * self.kernel[1] + kh], self.spans[kw])
    }

    /// `small[o] = big[i]` over every correspondence of one tap; other
    /// entries of `small` are left untouched.
    #[inline]
    fn gather(&self, kt: usize, kh: usize, kw: usize, small: &mut [f64], big: &[f64]) {
        let (pairs, (lo, hi, iw0)) = self.tap(kt, kh, kw);
        if hi == lo {
            return;
        }
        let (sn, bn, len) = (self.small[2], self.big[2], hi - lo);
        for &(orow, irow) in pairs {
            let out = &mut small[orow * sn + lo..orow * sn + hi];
            if self.stride_w == 1 {
                out.copy_from_slice(&big[irow * bn + iw0..irow * bn + iw0 + len]);
            } else {
                for (q, o) in out.iter_mut().enumerate() {
                    *o = big[irow * bn + iw0 + q * self.stride_w];
                }
            }
        }
    }

    /// `big[i] += small[o]`, the adjoint of [`gather`](Self::gather).
    #[inline]
    fn scatter(&self, kt: usize, kh: usize, kw: usize, big: &mut [f64], small: &[f64]) {
        let (pairs, (lo, hi, iw0)) = self.tap(kt, kh, kw);
        if hi == lo {
            return;
        }
        let (sn, bn) = (self.small[2], self.big[2]);
        for &(orow, irow) in pairs {
            let src = &small[orow * sn + lo..orow * sn + hi];
            if self.stride_w == 1 {
                let dst = &mut big[irow * bn + iw0..irow * bn + iw0 + (hi - lo)];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                for (q, s) in src.iter().enumerate() {
                    big[irow * bn + iw0 + q * self.stride_w] += s;
                }
            }
        }
    }

    /// Unfolds `channels` big planes into a `(channels * taps) x small_len`
    /// row-major matrix.
    fn im2col(&self, big: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
        let (bl, sl, taps) = (self.big_len(), self.small_len(), g.taps());
        let mut cols = vec![0.0; channels * taps * sl];
        for c in 0..channels {
            let src = &big[c * bl..][..bl];
            for_each_tap(g, |tap, kt, kh, kw| {
                self.gather(kt, kh, kw, &mut cols[(c * taps + tap) * sl..][..sl], src)
            });
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): folds the matrix back, summing
    /// into `big`.
    fn col2im(&self, cols: &[f64], channels: usize, g: &ConvGeom, big: &mut [f64]) {
        let (bl, sl, taps) = (self.big_len(), self.small_len(), g.taps());
        for c in 0..channels {
            let dst = &mut big[c * bl..][..bl];
            for_each_tap(g, |tap, kt, kh, kw| {
                self.scatter(kt, kh, kw, dst, &cols[(c * taps + tap) * sl..][..sl])
            });
        }
    }
}

/// Row-major operand of [`gemm`], optionally read transposed.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    transposed: bool,
}

impl<'a> Mat<'a> {
    fn n(data: &'a [f64]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    fn t(data: &'a [f64]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }

    /// Row and column strides of the logical `rows x cols` matrix.
    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides of an m x k, k x n and m x n matrix respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients returned by the convolution backward passes.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: FeatureTensor,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn spatial(shape: [usize; 5]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn check_weight(
    weight: &[f64],
    bias: &[f64],
    a: usize,
    b: usize,
    g: &ConvGeom,
    out_ch: usize,
) -> Result<()> {
    let expected = a * b * g.taps();
    if weight.len() != expected {
        return Err(shape_mismatch(expected, weight.len()));
    }
    if bias.len() != out_ch {
        return Err(shape_mismatch(out_ch, bias.len()));
    }
    Ok(())
}

fn fill_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
        chunk.fill(bias[c % bias.len()]);
    }
}

fn bias_grad(upstream: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for (c, chunk) in upstream.chunks_exact(plane).enumerate() {
        gb[c % channels] += chunk.iter().sum::<f64>();
    }
    gb
}

/// Cross-correlation with stride, zero padding and dilation.
pub fn conv3d_forward(
    x: &FeatureTensor,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    g: &ConvGeom,
) -> Result<FeatureTensor> {
    let [b, in_ch, ..] = x.shape();
    check_weight(weight, bias, out_ch, in_ch, g, out_ch)?;
    let o = g.out_dims(spatial(x.shape()))?;
    let map = TapMap::new(g, spatial(x.shape()), o);
    let (bl, sl, k) = (map.big_len(), map.small_len(), in_ch * g.taps());
    let mut out = FeatureTensor::zeros([b, out_ch, o[0], o[1], o[2]]);
    fill_bias(out.data_mut(), bias, sl);
    for bi in 0..b {
        let cols = map.im2col(&x.data()[bi * in_ch * bl..][..in_ch * bl], in_ch, g);
        let dst = &mut out.data_mut()[bi * out_ch * sl..][..out_ch * sl];
        gemm(out_ch, k, sl, Mat::n(weight), Mat::n(&cols), 1.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv3d_forward`] for a given upstream gradient.
pub fn conv3d_backward(
    x: &FeatureTensor,
    weight: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    upstream: &FeatureTensor,
) -> Result<ConvGrads> {
    let [b, in_ch, ..] = x.shape();
    let o = g.out_dims(spatial(x.shape()))?;
    upstream.check_shape([b, out_ch, o[0], o[1], o[2]])?;
    let k = in_ch * g.taps();
    if weight.len() != out_ch * k {
        return Err(shape_mismatch(out_ch * k, weight.len()));
    }
    let map = TapMap::new(g, spatial(x.shape()), o);
    let (bl, sl) = (map.big_len(), map.small_len());
    let mut gx = FeatureTensor::zeros(x.shape());
    let mut gw = vec![0.0; weight.len()];
    let mut gcols = vec![0.0; k * sl];
    for bi in 0..b {
        let up = &upstream.data()[bi * out_ch * sl..][..out_ch * sl];
        let cols = map.im2col(&x.data()[bi * in_ch * bl..][..in_ch * bl], in_ch, g);
        gemm(out_ch, sl, k, Mat::n(up), Mat::t(&cols), 1.0, &mut gw);
        gemm(k, out_ch, sl, Mat::t(weight), Mat::n(up), 0.0, &mut gcols);
        map.col2im(
            &gcols,
            in_ch,
            g,
            &mut gx.data_mut()[bi * in_ch * bl..][..in_ch * bl],
        );
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: bias_grad(upstream.data(), out_ch, sl),
    })
}

/// Transposed convolution: the adjoint of [`conv3d_forward`] w.r.t. its
/// input, plus a bias.
pub fn conv_transpose3d_forward(
    x: &FeatureTensor,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    g: &ConvGeom,
) -> Result<FeatureTensor> {
    let [b, in_ch, ..] = x.shape();
    check_weight(weight, bias, in_ch, out_ch, g, out_ch)?;
    let o = g.transposed_out_dims(spatial(x.shape()))?;
    let map = transposed_map(g, o, spatial(x.shape()))?;
    let (bl, sl, k) = (map.big_len(), map.small_len(), out_ch * g.taps());
    let mut out = FeatureTensor::zeros([b, out_ch, o[0], o[1], o[2]]);
    fill_bias(out.data_mut(), bias, bl);
    let mut cols = vec![0.0; k * sl];
    for bi in 0..b {
        let src = &x.data()[bi * in_ch * sl..][..in_ch * sl];
        gemm(k, in_ch, sl, Mat::t(weight), Mat::n(src), 0.0, &mut cols);
        map.col2im(
            &cols,
            out_ch,
            g,
            &mut out.data_mut()[bi * out_ch * bl..][..out_ch * bl],
        );
    }
    Ok(out)
}

pub fn conv_transpose3d_backward(
    x: &FeatureTensor,
    weight: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    upstream: &FeatureTensor,
) -> Result<ConvGrads> {
    let [b, in_ch, ..] = x.shape();
    let o = g.transposed_out_dims(spatial(x.shape()))?;
    upstream.check_shape([b, out_ch, o[0], o[1], o[2]])?;
    let k = out_ch * g.taps();
    if weight.len() != in_ch * k {
        return Err(shape_mismatch(in_ch * k, weight.len()));
    }
    let map = transposed_map(g, o, spatial(x.shape()))?;
    let (bl, sl) = (map.big_len(), map.small_len());
    let mut gx = FeatureTensor::zeros(x.shape());
    let mut gw = vec![0.0; weight.len()];
    for bi in 0..b {
        let cols = map.im2col(
            &upstream.data()[bi * out_ch * bl..][..out_ch * bl],
            out_ch,
            g,
        );
        let src = &x.data()[bi * in_ch * sl..][..in_ch * sl];
        gemm(
            in_ch,
            k,
            sl,
            Mat::n(weight),
            Mat::n(&cols),
            0.0,
            &mut gx.data_mut()[bi * in_ch * sl..][..in_ch * sl],
        );
        gemm(in_ch, sl, k, Mat::n(src), Mat::t(&cols), 1.0, &mut gw);
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: bias_grad(upstream.data(), out_ch, bl),
    })
}

fn transposed_map(g: &ConvGeom, big: [usize; 3], small: [usize; 3]) -> Result<TapMap> {
    // the regular convolution over the transposed output must land exactly
    // on the transposed input
    if g.out_dims(big)? != small {
        return Err(Error::ShapeMismatch {
            expected: format!("{small:?}"),
            actual: format!("{:?}", g.out_dims(big)?),
        });
    }
    Ok(TapMap::new(g, big, small))
}

#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let mut tap = 0;
    for kt in 0..g.kernel[0] {
        for kh in 0..g.kernel[1] {
            for kw in 0..g.kernel[2] {
                f(tap, kt, kh, kw);
                tap += 1;
            }
        }
    }
}

pub fn relu_forward(x: &FeatureTensor) -> FeatureTensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU; the kink at zero passes no gradient.
pub fn relu_backward(x: &FeatureTensor, upstream: &FeatureTensor) -> FeatureTensor {
    let mut g = upstream.clone();
    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
        if *xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_forward(x: &FeatureTensor) -> FeatureTensor {
    x.map(sigmoid)
}

/// Gradient of the sigmoid expressed through its output `y`.
pub fn sigmoid_backward(y: &FeatureTensor, upstream: &FeatureTensor) -> FeatureTensor {
    let mut g = upstream.clone();
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv *= yv * (1.0 - yv);
    }
    g
}

/// Softmax along the time axis for every `(batch, channel, row, col)`.
pub fn softmax_time(x: &FeatureTensor) -> FeatureTensor {
    let [b, c, t, m, n] = x.shape();
    let plane = m * n;
    let mut out = FeatureTensor::zeros(x.shape());
    let (xd, od) = (x.data(), out.data_mut());
    for bc in 0..b * c {
        let base = bc * t * plane;
        for q in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for k in 0..t {
                max = max.max(xd[base + k * plane + q]);
            }
            let mut sum = 0.0;
            for k in 0..t {
                let e = (xd[base + k * plane + q] - max).exp();
                od[base + k * plane + q] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for k in 0..t {
                od[base + k * plane + q] *= inv;
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`softmax_time`] given its output `p`.
pub fn softmax_time_backward(p: &FeatureTensor, upstream: &FeatureTensor) -> FeatureTensor {
    let [b, c, t, m, n] = p.shape();
    let plane = m * n;
    let mut g = FeatureTensor::zeros(p.shape());
    let (pd, ud) = (p.data(), upstream.data());
    let gd = g.data_mut();
    for bc in 0..b * c {
        let base = bc * t * plane;
        for q in 0..plane {
            let dot: f64 = (0..t)
                .map(|k| pd[base + k * plane + q] * ud[base + k * plane + q])
                .sum();
            for k in 0..t {
                let idx = base + k * plane + q;
                gd[idx] = pd[idx] * (ud[idx] - dot);
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormSpec {
    pub eps: f64,
    /// Weight kept on the running statistics at every training step.
    pub momentum: f64,
}

impl Default for BatchNormSpec {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Values saved by [`batchnorm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub mode: Mode,
    pub normalized: FeatureTensor,
    pub inv_std: Vec<f64>,
}

fn channel_iter(shape: [usize; 5]) -> (usize, usize, usize) {
    let [b, c, t, m, n] = shape;
    (b, c, t * m * n)
}

/// Per-channel normalisation over `(batch, time, row, col)`.
///
/// In training mode the batch statistics are used and the running
/// statistics are updated in place; in evaluation mode the running
/// statistics are used.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: &FeatureTensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
    spec: &BatchNormSpec,
    mode: Mode,
) -> Result<(FeatureTensor, BatchNormCache)> {
    let (b, c, inner) = channel_iter(x.shape());
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(invalid(name, format!("expected {c} entries, got {len}")));
        }
    }
    let count = b * inner;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    match mode {
        Mode::Train => {
            if count < 2 {
                return Err(invalid(
                    "batch",
                    format!("batch norm needs >= 2 values per channel, got {count}"),
                ));
            }
            for ch in 0..c {
                let mut s = 0.0;
                for bi in 0..b {
                    s += xd[(bi * c + ch) * inner..][..inner].iter().sum::<f64>();
                }
                mean[ch] = s / count as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    v += xd[(bi * c + ch) * inner..][..inner]
                        .iter()
                        .map(|x| (x - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = v / count as f64;
                let unbiased = v / (count - 1) as f64;
                running_mean[ch] =
                    spec.momentum * running_mean[ch] + (1.0 - spec.momentum) * mean[ch];
                running_var[ch] =
                    spec.momentum * running_var[ch] + (1.0 - spec.momentum) * unbiased;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + spec.eps).sqrt()).collect();
    let mut normalized = FeatureTensor::zeros(x.shape());
    let mut out = FeatureTensor::zeros(x.shape());
    {
        let nd = normalized.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for q in off..off + inner {
                    nd[q] = (xd[q] - mean[ch]) * inv_std[ch];
                }
            }
        }
    }
    {
        let (nd, od) = (normalized.data(), out.data_mut());
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                for q in off..off + inner {
                    od[q] = gamma[ch] * nd[q] + beta[ch];
                }
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            mode,
            normalized,
            inv_std,
        },
    ))
}

/// Gradients of [`batchnorm_forward`]: `(input, gamma, beta)`.
pub fn batchnorm_backward(
    cache: &BatchNormCache,
    gamma: &[f64],
    upstream: &FeatureTensor,
) -> Result<(FeatureTensor, Vec<f64>, Vec<f64>)> {
    upstream.check_shape(cache.normalized.shape())?;
    let (b, c, inner) = channel_iter(upstream.shape());
    let count = (b * inner) as f64;
    let (nd, ud) = (cache.normalized.data(), upstream.data());
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            for q in off..off + inner {
                ggamma[ch] += ud[q] * nd[q];
                gbeta[ch] += ud[q];
            }
        }
    }
    let mut gx = FeatureTensor::zeros(upstream.shape());
    let gd = gx.data_mut();
    for ch in 0..c {
        let k = gamma[ch] * cache.inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for q in off..off + inner {
                gd[q] = match cache.mode {
                    Mode::Train => k * (ud[q] - gbeta[ch] / count - nd[q] * ggamma[ch] / count),
                    Mode::Eval => k * ud[q],
                };
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windowing::{temporal_window, WindowConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], rng: &mut ChaCha8Rng) -> FeatureTensor {
        let n = shape.iter().product();
        FeatureTensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Direct six-loop reference convolution.
    fn naive_conv(
        x: &FeatureTensor,
        w: &[f64],
        bias: &[f64],
        oc_n: usize,
        g: &ConvGeom,
    ) -> FeatureTensor {
        let [b, ic_n, t, m, n] = x.shape();
        let o = g.out_dims([t, m, n]).unwrap();
        let mut out = FeatureTensor::zeros([b, oc_n, o[0], o[1], o[2]]);
        let [kt_n, kh_n, kw_n] = g.kernel;
        for bi in 0..b {
            for oc in 0..oc_n {
                for ot in 0..o[0] {
                    for oh in 0..o[1] {
                        for ow in 0..o[2] {
                            let mut s = bias[oc];
                            for ic in 0..ic_n {
                                for kt in 0..kt_n {
                                    for kh in 0..kh_n {
                                        for kw in 0..kw_n {
                                            let it = (ot * g.stride[0] + kt * g.dilation[0])
                                                as isize
                                                - g.padding[0] as isize;
                                            let ih = (oh * g.stride[1] + kh * g.dilation[1])
                                                as isize
                                                - g.padding[1] as isize;
                                            let iw = (ow * g.stride[2] + kw * g.dilation[2])
                                                as isize
                                                - g.padding[2] as isize;
                                            if it < 0
                                                || ih < 0
                                                || iw < 0
                                                || it >= t as isize
                                                || ih >= m as isize
                                                || iw >= n as isize
                                            {
                                                continue;
                                            }
                                            let wi = (((oc * ic_n + ic) * kt_n + kt) * kh_n + kh)
                                                * kw_n
                                                + kw;
                                            s += w[wi]
                                                * x.get(
                                                    bi,
                                                    ic,
                                                    it as usize,
                                                    ih as usize,
                                                    iw as usize,
                                                );
                                        }
                                    }
                                }
                            }
                            out.set(bi, oc, ot, oh, ow, s);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [
            ConvGeom::same([3, 3, 3]),
            ConvGeom::new([2, 3, 3], [2, 1, 1], [0, 1, 1], [1, 1, 1]),
            ConvGeom::new([3, 3, 3], [2, 1, 2], [1, 1, 1], [1, 1, 1]),
            ConvGeom::new([3, 3, 3], [1, 1, 1], [2, 2, 2], [2, 2, 2]),
        ] {
            let x = random([2, 2, 8, 5, 6], &mut rng);
            let w: Vec<f64> = (0..3 * 2 * g.taps())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let bias = vec![0.1, -0.2, 0.3];
            let fast = conv3d_forward(&x, &w, &bias, 3, &g).unwrap();
            let slow = naive_conv(&x, &w, &bias, 3, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([1, 1, 6, 3, 3], &mut rng);
        let y = conv3d_forward(&x, &[1.0], &[0.0], 1, &ConvGeom::pointwise()).unwrap();
        assert_eq!(y, x);
        let y = conv_transpose3d_forward(&x, &[1.0], &[0.0], 1, &ConvGeom::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_equals_temporal_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([1, 1, 10, 2, 3], &mut rng);
        let g = ConvGeom::new([3, 1, 1], [1; 3], [1, 0, 0], [1; 3]);
        let y = conv3d_forward(&x, &[1.0; 3], &[0.0], 1, &g).unwrap();
        let w = temporal_window(&x.plane_to_cube(0, 0), WindowConfig::new(3).unwrap());
        let expected = FeatureTensor::from_real_cube(&w);
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_shape_arithmetic() {
        let g = ConvGeom::new([2, 3, 3], [2, 1, 1], [0, 1, 1], [1, 1, 1]);
        let x = FeatureTensor::zeros([1, 1, 8, 4, 4]);
        let y = conv3d_forward(&x, &vec![0.0; 5 * 18], &[0.0; 5], 5, &g).unwrap();
        assert_eq!(y.shape(), [1, 5, 4, 4, 4]);
        assert!(conv3d_forward(&x, &[0.0; 3], &[0.0], 1, &g).is_err());
    }

    #[test]
    fn transposed_doubles_time() {
        let g = ConvGeom::new([6, 3, 3], [2, 1, 1], [2, 1, 1], [1; 3]);
        assert_eq!(g.transposed_out_dims([4, 5, 5]).unwrap(), [8, 5, 5]);
        assert_eq!(g.transposed_out_dims([16, 16, 16]).unwrap(), [32, 16, 16]);
    }

    #[test]
    fn transposed_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom::new([6, 3, 3], [2, 1, 1], [2, 1, 1], [1; 3]);
        let small = random([1, 3, 4, 3, 3], &mut rng);
        let big = random([1, 2, 8, 3, 3], &mut rng);
        // conv weight [out=3, in=2], transposed weight [in=3, out=2] share storage
        let w: Vec<f64> = (0..6 * g.taps())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let conv = conv3d_forward(&big, &w, &[0.0; 3], 3, &g).unwrap();
        let tconv = conv_transpose3d_forward(&small, &w, &[0.0; 2], 2, &g).unwrap();
        assert!((conv.dot(&small) - tconv.dot(&big)).abs() < 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_grads_and_backward_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeom::same([3, 3, 3]);
        let x = random([1, 2, 6, 3, 3], &mut rng);
        let w: Vec<f64> = (0..4 * g.taps())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let zero = FeatureTensor::zeros([1, 2, 6, 3, 3]);
        let gz = conv3d_backward(&x, &w, 2, &g, &zero).unwrap();
        assert!(gz
            .weight
            .iter()
            .chain(&gz.bias)
            .chain(gz.input.data())
            .all(|&v| v == 0.0));
        let u1 = random([1, 2, 6, 3, 3], &mut rng);
        let u2 = random([1, 2, 6, 3, 3], &mut rng);
        let g1 = conv3d_backward(&x, &w, 2, &g, &u1).unwrap();
        let g2 = conv3d_backward(&x, &w, 2, &g, &u2).unwrap();
        let g12 = conv3d_backward(&x, &w, 2, &g, &u1.add(&u2).unwrap()).unwrap();
        for k in 0..w.len() {
            assert!((g12.weight[k] - g1.weight[k] - g2.weight[k]).abs() < 1e-10);
        }
        for k in 0..x.len() {
            assert!((g12.input.data()[k] - g1.input.data()[k] - g2.input.data()[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random([2, 1, 7, 3, 2], &mut rng).scale(50.0);
        let p = softmax_time(&x);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    let s: f64 = (0..7).map(|k| p.get(b, 0, k, i, j)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                    assert!((0..7).all(|k| p.get(b, 0, k, i, j) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn batchnorm_constant_channel_and_standardized_input() {
        let spec = BatchNormSpec::default();
        let x = FeatureTensor::filled([2, 1, 3, 2, 2], 4.2);
        let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
        let (y, _) =
            batchnorm_forward(&x, &[1.7], &[0.3], &mut rm, &mut rv, &spec, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!((rm[0] - 0.42).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = random([4, 2, 4, 3, 3], &mut rng);
        // standardise each channel exactly
        let (z, _) = batchnorm_forward(
            &raw,
            &[1.0; 2],
            &[0.0; 2],
            &mut [0.0; 2],
            &mut [1.0; 2],
            &BatchNormSpec {
                eps: 0.0,
                momentum: 0.9,
            },
            Mode::Train,
        )
        .unwrap();
        let (y, _) = batchnorm_forward(
            &z,
            &[1.0; 2],
            &[0.0; 2],
            &mut [0.0; 2],
            &mut [1.0; 2],
            &spec,
            Mode::Train,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_rejects_degenerate_batch() {
        let x = FeatureTensor::zeros([1, 2, 1, 1, 1]);
        let r = batchnorm_forward(
            &x,
            &[1.0; 2],
            &[0.0; 2],
            &mut [0.0; 2],
            &mut [1.0; 2],
            &BatchNormSpec::default(),
            Mode::Train,
        );
        assert!(r.is_err());
        let r = batchnorm_forward(
            &x,
            &[1.0; 2],
            &[0.0; 2],
            &mut [0.0; 2],
            &mut [1.0; 2],
            &BatchNormSpec::default(),
            Mode::Eval,
        );
        assert!(r.is_ok());
    }
}
