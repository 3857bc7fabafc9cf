//! Temporal rebinning and patch-wise reconstruction.

use crate::domain::{DepthImage, PhotonCube};
use crate::error::{invalid, Error, Result};

/// Sums neighbouring bin pairs (`out[k] = in[2k] + in[2k+1]`, a trailing
/// odd bin is kept alone) and appends zero bins up to `target`. The bin
/// width doubles.
pub fn rebin_pairs(cube: &PhotonCube, target: usize) -> Result<PhotonCube> {
    let t = cube.bins();
    let half = t.div_ceil(2);
    if target < half {
        return Err(invalid(
            "target bins",
            format!("{target} < {half} summed bins"),
        ));
    }
    let bin_ps = cube.bin_width_ps().checked_mul(2).ok_or_else(|| {
        Error::DimOverflow(format!("bin width {} ps doubled", cube.bin_width_ps()))
    })?;
    let mut counts = vec![0u32; cube.pixels() * target];
    for (h, out) in cube.histograms().zip(counts.chunks_exact_mut(target)) {
        for (k, pair) in h.chunks(2).enumerate() {
            out[k] = pair
                .iter()
                .try_fold(0u32, |a, &c| a.checked_add(c))
                .ok_or_else(|| Error::DimOverflow("summed count exceeds u32".into()))?;
        }
    }
    PhotonCube::new(target, cube.rows(), cube.cols(), bin_ps, counts)
}

/// Square patch size and stride for patch-wise reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(invalid(
                "patch",
                format!("size {size} and stride {stride} must be positive"),
            ));
        }
        if stride > size {
            return Err(invalid(
                "patch",
                format!("stride {stride} > size {size} leaves gaps"),
            ));
        }
        Ok(Self { size, stride })
    }
}

/// Start offsets along one axis of length `len`: multiples of `stride`, plus
/// a final patch flush with the far edge. Patches larger than the axis are
/// clipped to it.
pub fn patch_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if size >= len {
        return vec![0];
    }
    let last = len - size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("non-empty") != last {
        v.push(last);
    }
    v
}

/// Runs `estimate` on every patch and averages overlapping predictions.
pub fn reconstruct_patches(
    cube: &PhotonCube,
    spec: PatchSpec,
    mut estimate: impl FnMut(&PhotonCube) -> Result<DepthImage>,
) -> Result<DepthImage> {
    let (m, n) = (cube.rows(), cube.cols());
    let (ph, pw) = (spec.size.min(m), spec.size.min(n));
    let mut sum = vec![0.0; m * n];
    let mut hits = vec![0u32; m * n];
    for &i0 in &patch_origins(m, spec.size, spec.stride) {
        for &j0 in &patch_origins(n, spec.size, spec.stride) {
            let patch = cube.crop(i0, j0, ph, pw)?;
            let z = estimate(&patch)?;
            if (z.rows(), z.cols()) != (ph, pw) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{ph}x{pw}"),
                    actual: format!("{}x{}", z.rows(), z.cols()),
                });
            }
            for i in 0..ph {
                for j in 0..pw {
                    sum[(i0 + i) * n + j0 + j] += z.get(i, j);
                    hits[(i0 + i) * n + j0 + j] += 1;
                }
            }
        }
    }
    let z = sum.iter().zip(&hits).map(|(s, &h)| s / h as f64).collect();
    DepthImage::new(m, n, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::argmax_depth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rebin_example() {
        let cube = PhotonCube::new(4, 1, 1, 80, vec![1, 2, 3, 4]).unwrap();
        let r = rebin_pairs(&cube, 4).unwrap();
        assert_eq!(r.counts(), &[3, 7, 0, 0]);
        assert_eq!(r.bin_width_ps(), 160);
        assert!(rebin_pairs(&cube, 1).is_err());
        let odd = PhotonCube::new(3, 1, 1, 80, vec![1, 2, 5]).unwrap();
        assert_eq!(rebin_pairs(&odd, 2).unwrap().counts(), &[3, 5]);
    }

    #[test]
    fn rebin_full_length_layout_and_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let counts = (0..1536 * 2 * 3).map(|_| rng.random_range(0..4)).collect();
        let cube = PhotonCube::new(1536, 2, 3, 40, counts).unwrap();
        let r = rebin_pairs(&cube, 1024).unwrap();
        assert_eq!(r.bins(), 1024);
        assert_eq!(r.total(), cube.total());
        for h in r.histograms() {
            assert!(h[768..].iter().all(|&c| c == 0));
        }
        assert_eq!(r.get(5, 1, 2), cube.get(10, 1, 2) + cube.get(11, 1, 2));
    }

    #[test]
    fn origins_cover_axis() {
        assert_eq!(patch_origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(patch_origins(8, 4, 4), vec![0, 4]);
        assert_eq!(patch_origins(8, 4, 2), vec![0, 2, 4]);
        assert_eq!(patch_origins(3, 4, 2), vec![0]);
        assert!(PatchSpec::new(4, 5).is_err());
    }

    #[test]
    fn tiling_matches_whole_image_for_per_pixel_methods() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let counts = (0..16 * 8 * 8).map(|_| rng.random_range(0..6)).collect();
        let cube = PhotonCube::new(16, 8, 8, 80, counts).unwrap();
        let whole = argmax_depth(&cube);
        for spec in [
            PatchSpec::new(4, 4).unwrap(),
            PatchSpec::new(4, 2).unwrap(),
            PatchSpec::new(3, 3).unwrap(),
        ] {
            let tiled = reconstruct_patches(&cube, spec, |p| Ok(argmax_depth(p))).unwrap();
            for (a, b) in tiled.values().iter().zip(whole.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overlaps_are_averaged() {
        let cube = PhotonCube::zeros(4, 1, 3, 80).unwrap();
        let mut calls = 0.0;
        let z = reconstruct_patches(&cube, PatchSpec::new(2, 1).unwrap(), |p| {
            calls += 1.0;
            DepthImage::filled(p.rows(), p.cols(), calls)
        })
        .unwrap();
        // patches [0,1] -> 1 and [1,2] -> 2
        assert_eq!(z.values(), &[1.0, 1.5, 2.0]);
    }
}
