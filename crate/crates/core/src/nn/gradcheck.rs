//! Central finite-difference verification of the hand-written gradients.
//!
//! Every case reduces its operator to a scalar with a fixed random projection
//! of the output, perturbs a random subset of coordinates (parameters and
//! inputs) and compares against the analytic backward pass. Coordinates whose
//! two central differences (step `h` and `h / 2`) disagree are treated as
//! lying on a kink and skipped; the report counts them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward,
    conv_transpose3d_backward, conv_transpose3d_forward, softmax_time, BatchNormSpec, ConvGeom,
    Mode,
};
use super::model::{PrsNet, PrsNetConfig};
use super::params::{Grads, ParamStore};
use super::prs::PrsBlock;
use crate::error::{invalid, Result};
use crate::loss::{total_loss, DataTerm, LabelCube, LossConfig, Target, TotalLoss};
use crate::shrinkage::{soft_threshold, soft_threshold_backward};
use crate::tensor::FeatureTensor;
use crate::windowing::WindowConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Coordinates to compare (all of them if fewer exist).
    pub coords: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn new(h: f64, tolerance: f64) -> Self {
        Self {
            h,
            tolerance,
            coords: 200,
            floor: 1e-4,
            seed: 0,
        }
    }
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} checked={:<4} skipped={:<3} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.checked,
            self.skipped,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Compares `analytic[c]` with central differences of `eval(c, delta)`, the
/// objective with coordinate `c` shifted by `delta`.
pub fn check(
    name: &str,
    analytic: &[f64],
    coords: &[usize],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<GradReport> {
    if !(cfg.h > 0.0 && cfg.tolerance > 0.0) {
        return Err(invalid(
            "grad check",
            format!("h and tolerance must be positive: {cfg:?}"),
        ));
    }
    let h = cfg.h;
    let (mut checked, mut skipped, mut worst, mut worst_coord) = (0, 0, 0.0f64, None);
    for &c in coords {
        let wide = (eval(c, h)? - eval(c, -h)?) / (2.0 * h);
        let narrow = (eval(c, h / 2.0)? - eval(c, -h / 2.0)?) / h;
        let scale = wide.abs().max(narrow.abs()).max(cfg.floor);
        if (wide - narrow).abs() > cfg.tolerance * scale {
            skipped += 1;
            continue;
        }
        let a = analytic[c];
        let err = (a - narrow).abs() / a.abs().max(narrow.abs()).max(cfg.floor);
        checked += 1;
        if err > worst || !err.is_finite() {
            worst = if err.is_finite() { err } else { f64::INFINITY };
            worst_coord = Some(c);
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        checked,
        skipped,
        max_rel_error: worst,
        worst_coord,
        tolerance: cfg.tolerance,
    })
}

/// Up to `n` distinct indices below `len`, in increasing order.
pub fn sample_coords(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = sample(rng, len, n.min(len)).into_vec();
    v.sort_unstable();
    v
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> FeatureTensor {
    FeatureTensor::from_vec(shape, random_vec(shape.iter().product(), rng)).expect("sized")
}

/// Flat view over the trainable values of a store followed by an input.
struct Flat {
    slots: Vec<(usize, usize)>,
}

impl Flat {
    fn new(store: &ParamStore) -> Self {
        let slots = store
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(i, p)| (0..p.value.len()).map(move |k| (i, k)))
            .collect();
        Self { slots }
    }

    fn analytic(&self, grads: &Grads, input_grad: &[f64]) -> Vec<f64> {
        self.slots
            .iter()
            .map(|&(i, k)| grads.0[i][k])
            .chain(input_grad.iter().copied())
            .collect()
    }

    fn shifted(
        &self,
        store: &ParamStore,
        input: &FeatureTensor,
        c: usize,
        delta: f64,
    ) -> (ParamStore, FeatureTensor) {
        let mut s = store.clone();
        let mut x = input.clone();
        if let Some(&(i, k)) = self.slots.get(c) {
            s.get_mut(super::params::ParamId(i))[k] += delta;
        } else {
            x.data_mut()[c - self.slots.len()] += delta;
        }
        (s, x)
    }
}

/// Pointwise convolution: the objective is linear in the weights.
pub fn linear_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let x = random_tensor([2, 12, 4, 3, 3], &mut rng);
    let w = random_vec(16 * 12, &mut rng);
    let b = random_vec(16, &mut rng);
    let g = ConvGeom::pointwise();
    let u = random_tensor([2, 16, 4, 3, 3], &mut rng);
    let grads = conv3d_backward(&x, &w, 16, &g, &u)?;
    let analytic: Vec<f64> = grads.weight.iter().chain(&grads.bias).copied().collect();
    let coords = sample_coords(analytic.len(), cfg.coords, &mut rng);
    check("linear", &analytic, &coords, cfg, |c, d| {
        let (mut w, mut b) = (w.clone(), b.clone());
        if c < w.len() {
            w[c] += d;
        } else {
            b[c - w.len()] += d;
        }
        Ok(conv3d_forward(&x, &w, &b, 16, &g)?.dot(&u))
    })
}

fn conv_like(cfg: &GradCheckConfig, transposed: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (g, x_shape, out_ch, in_ch) = if transposed {
        (
            ConvGeom::new([6, 3, 3], [2, 1, 1], [2, 1, 1], [1; 3]),
            [1, 2, 4, 3, 3],
            2,
            2,
        )
    } else {
        (ConvGeom::same([3, 3, 3]), [1, 1, 6, 3, 3], 8, 1)
    };
    let x = random_tensor(x_shape, &mut rng);
    let w = random_vec(in_ch * out_ch * g.taps(), &mut rng);
    let b = random_vec(out_ch, &mut rng);
    let fwd = |x: &FeatureTensor, w: &[f64]| {
        if transposed {
            conv_transpose3d_forward(x, w, &b, out_ch, &g)
        } else {
            conv3d_forward(x, w, &b, out_ch, &g)
        }
    };
    let y = fwd(&x, &w)?;
    let u = random_tensor(y.shape(), &mut rng);
    let r = if transposed {
        conv_transpose3d_backward(&x, &w, out_ch, &g, &u)?
    } else {
        conv3d_backward(&x, &w, out_ch, &g, &u)?
    };
    let analytic: Vec<f64> = r.weight.iter().chain(r.input.data()).copied().collect();
    // every weight plus a sample of inputs
    let mut coords: Vec<usize> = (0..w.len()).collect();
    coords.extend(
        sample_coords(x.len(), cfg.coords, &mut rng)
            .into_iter()
            .map(|c| c + w.len()),
    );
    let name = if transposed {
        "conv_transpose3d"
    } else {
        "conv3d"
    };
    check(name, &analytic, &coords, cfg, |c, d| {
        let (mut w, mut x) = (w.clone(), x.clone());
        if c < w.len() {
            w[c] += d;
        } else {
            x.data_mut()[c - w.len()] += d;
        }
        Ok(fwd(&x, &w)?.dot(&u))
    })
}

pub fn conv_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    conv_like(cfg, false)
}

pub fn conv_transpose_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    conv_like(cfg, true)
}

/// Training-mode batch norm, input and affine gradients.
pub fn batchnorm_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let spec = BatchNormSpec::default();
    let x = random_tensor([2, 3, 6, 2, 3], &mut rng);
    let gamma = random_vec(3, &mut rng);
    let beta = random_vec(3, &mut rng);
    let u = random_tensor(x.shape(), &mut rng);
    let run = |x: &FeatureTensor, gamma: &[f64], beta: &[f64]| {
        batchnorm_forward(
            x,
            gamma,
            beta,
            &mut [0.0; 3],
            &mut [1.0; 3],
            &spec,
            Mode::Train,
        )
    };
    let (_, cache) = run(&x, &gamma, &beta)?;
    let (gx, gg, gb) = batchnorm_backward(&cache, &gamma, &u)?;
    let analytic: Vec<f64> = gx.data().iter().chain(&gg).chain(&gb).copied().collect();
    let coords = sample_coords(analytic.len(), cfg.coords, &mut rng);
    let n = x.len();
    check("batchnorm", &analytic, &coords, cfg, |c, d| {
        let (mut x, mut gamma, mut beta) = (x.clone(), gamma.clone(), beta.clone());
        match c {
            c if c < n => x.data_mut()[c] += d,
            c if c < n + 3 => gamma[c - n] += d,
            c => beta[c - n - 3] += d,
        }
        Ok(run(&x, &gamma, &beta)?.0.dot(&u))
    })
}

/// Whole PRS block on a `(1, 2, 8, 3, 3)` input.
pub fn prs_block_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut store = ParamStore::new();
    let blk = PrsBlock::new(&mut store, "prs", 2, 8, &mut rng);
    let x = random_tensor([1, 2, 8, 3, 3], &mut rng);
    let u = random_tensor(x.shape(), &mut rng);
    let (_, cache) = blk.forward(&mut store.clone(), &x, Mode::Train)?;
    let mut grads = store.zero_grads();
    let gx = blk.backward(&store, &cache, &u, &mut grads)?;
    let flat = Flat::new(&store);
    let analytic = flat.analytic(&grads, gx.data());
    let coords = sample_coords(analytic.len(), cfg.coords, &mut rng);
    check("prs_block", &analytic, &coords, cfg, |c, d| {
        let (mut s, x) = flat.shifted(&store, &x, c, d);
        Ok(blk.forward(&mut s, &x, Mode::Train)?.0.dot(&u))
    })
}

/// Small configuration used by the full-network check.
pub fn toy_config() -> PrsNetConfig {
    PrsNetConfig {
        bins: 16,
        window: WindowConfig::new(3).expect("odd"),
        encoder_stages: 2,
        base_channels: 2,
        num_prs_blocks: 1,
    }
}

/// End-to-end network gradient w.r.t. every trainable parameter.
pub fn prsnet_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let mut net = PrsNet::new(toy_config(), cfg.seed)?;
    let x = random_tensor([2, 1, 16, 3, 3], &mut rng).map(|v| 2.0 * v.abs());
    let u = random_tensor(x.shape(), &mut rng);
    let cache = net.forward(&x, Mode::Train)?;
    let grads = net.backward_probs(&cache, &u)?;
    let flat = Flat::new(&net.store);
    let analytic = flat.analytic(&grads, &[]);
    let coords = sample_coords(analytic.len(), cfg.coords, &mut rng);
    let base = net.store.clone();
    check("prsnet", &analytic, &coords, cfg, |c, d| {
        let (s, _) = flat.shifted(&base, &x, c, d);
        net.store = s;
        Ok(net.forward(&x, Mode::Train)?.probs.dot(&u))
    })
}

/// Soft threshold with respect to both the value and the threshold.
pub fn soft_threshold_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(6));
    let n = 150;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tau: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let u = random_vec(n, &mut rng);
    let (mut gx, mut gt) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        (gx[i], gt[i]) = soft_threshold_backward(x[i], tau[i], u[i]);
    }
    let analytic: Vec<f64> = gx.into_iter().chain(gt).collect();
    let coords: Vec<usize> = (0..2 * n).collect();
    check("soft_threshold", &analytic, &coords, cfg, |c, d| {
        let (mut x, mut tau) = (x.clone(), tau.clone());
        if c < n {
            x[c] += d;
        } else {
            tau[c - n] += d;
        }
        let mut total = 0.0;
        for i in 0..n {
            total += u[i] * soft_threshold(x[i], tau[i])?;
        }
        Ok(total)
    })
}

/// Loss of pixel-major logits `(4 x 4 pixels, 16 bins)` through a softmax
/// over time, with random labels and waveform targets.
fn loss_case(name: &str, lambda_tv: f64, cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let (t, m, n) = (16, 4, 4);
    let logits: Vec<f64> = (0..t * m * n)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let labels = LabelCube {
        bins: t,
        rows: m,
        cols: n,
        labels: (0..m * n).map(|_| rng.random_range(0..t)).collect(),
    };
    let target = Target {
        labels,
        waveform: None,
    };
    let loss_cfg = LossConfig::new(lambda_tv)?;
    // unit bin width keeps the TV term comparable to the data term
    let objective = |v: &[f64]| -> Result<TotalLoss> {
        let probs =
            softmax_time(&FeatureTensor::from_pixel_major(&[v], t, m, n)?).plane_to_probs(0, 0);
        total_loss(&target, &probs, DataTerm::CrossEntropy, &loss_cfg, 1.0)
    };
    let analytic = objective(&logits)?.grad_logits;
    let coords = sample_coords(analytic.len(), cfg.coords, &mut rng);
    check(name, &analytic, &coords, cfg, |c, d| {
        let mut v = logits.clone();
        v[c] += d;
        Ok(objective(&v)?.value)
    })
}

/// Cross entropy alone.
pub fn cross_entropy_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    loss_case("cross_entropy", 0.0, cfg)
}

/// Cross entropy plus total variation of the soft-argmax depth.
pub fn tv_soft_argmax_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    loss_case("ce+tv(soft_argmax)", 1.0, cfg)
}

/// Negative control: a convolution backward with a 5 % error in the weight
/// gradient. Passing this check would mean the checker is blind.
pub fn corrupted_case(cfg: &GradCheckConfig) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(5));
    let g = ConvGeom::same([3, 3, 3]);
    let x = random_tensor([1, 1, 6, 3, 3], &mut rng);
    let w = random_vec(g.taps(), &mut rng);
    let b = [0.0];
    let u = random_tensor(x.shape(), &mut rng);
    let mut r = conv3d_backward(&x, &w, 1, &g, &u)?;
    r.weight.iter_mut().for_each(|v| *v *= 1.05);
    let coords: Vec<usize> = (0..w.len()).collect();
    check("corrupted_conv3d", &r.weight, &coords, cfg, |c, d| {
        let mut w = w.clone();
        w[c] += d;
        Ok(conv3d_forward(&x, &w, &b, 1, &g)?.dot(&u))
    })
}

/// Every check with its required tolerance. The last entry is the negative
/// control and is expected to fail.
pub fn standard_suite(seed: u64) -> Result<Vec<GradReport>> {
    let with = |h: f64, tol: f64| GradCheckConfig {
        seed,
        ..GradCheckConfig::new(h, tol)
    };
    Ok(vec![
        soft_threshold_case(&with(1e-5, 1e-7))?,
        linear_case(&with(1e-5, 1e-7))?,
        conv_case(&with(1e-5, 1e-5))?,
        conv_transpose_case(&with(1e-5, 1e-5))?,
        batchnorm_case(&with(1e-5, 1e-4))?,
        prs_block_case(&with(1e-5, 1e-4))?,
        cross_entropy_case(&with(1e-5, 1e-6))?,
        tv_soft_argmax_case(&with(1e-5, 1e-5))?,
        prsnet_case(&with(1e-5, 1e-4))?,
        corrupted_case(&with(1e-5, 1e-5))?,
    ])
}
