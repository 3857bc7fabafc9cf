//! Dense 5-D feature tensor, laid out row-major as `(batch, channel, time,
//! row, col)`.

use crate::domain::{PhotonCube, ProbCube, RealCube};
use crate::error::{shape_mismatch, Error, Result};

pub type Shape = [usize; 5];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(shape_mismatch(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn time(&self) -> usize {
        self.shape[2]
    }

    pub fn rows(&self) -> usize {
        self.shape[3]
    }

    pub fn cols(&self) -> usize {
        self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, t: usize, i: usize, j: usize) -> usize {
        let [_, cs, ts, ms, ns] = self.shape;
        (((b * cs + c) * ts + t) * ms + i) * ns + j
    }

    pub fn get(&self, b: usize, c: usize, t: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(b, c, t, i, j)]
    }

    pub fn set(&mut self, b: usize, c: usize, t: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(b, c, t, i, j);
        self.data[o] = v;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(shape_mismatch(shape, self.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &FeatureTensor) -> Result<FeatureTensor> {
        other.check_shape(self.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &FeatureTensor) -> Result<()> {
        other.check_shape(self.shape)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, k: f64) -> FeatureTensor {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureTensor {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &FeatureTensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Single-sample, single-channel tensor `(1, 1, T, M, N)` from a cube.
    pub fn from_real_cube(cube: &RealCube) -> Self {
        Self::from_real_cubes(std::slice::from_ref(cube)).expect("single cube")
    }

    /// Stacks equally-shaped cubes along the batch axis.
    pub fn from_real_cubes(cubes: &[RealCube]) -> Result<Self> {
        let first = cubes
            .first()
            .ok_or_else(|| shape_mismatch("non-empty batch", 0))?;
        let (t, m, n) = (first.bins, first.rows, first.cols);
        let mut out = Self::zeros([cubes.len(), 1, t, m, n]);
        for (b, cube) in cubes.iter().enumerate() {
            if (cube.bins, cube.rows, cube.cols) != (t, m, n) {
                return Err(shape_mismatch((t, m, n), (cube.bins, cube.rows, cube.cols)));
            }
            for i in 0..m {
                for j in 0..n {
                    for (k, &v) in cube.series(i, j).iter().enumerate() {
                        out.set(b, 0, k, i, j, v);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_photon_cube(cube: &PhotonCube) -> Self {
        Self::from_real_cube(&cube.to_real())
    }

    /// Pixel-major cube of one `(batch, channel)` plane.
    pub fn plane_to_cube(&self, b: usize, c: usize) -> RealCube {
        let [_, _, t, m, n] = self.shape;
        let mut out = RealCube::zeros(t, m, n);
        for k in 0..t {
            for i in 0..m {
                for j in 0..n {
                    out.data[(i * n + j) * t + k] = self.get(b, c, k, i, j);
                }
            }
        }
        out
    }

    pub fn plane_to_probs(&self, b: usize, c: usize) -> ProbCube {
        let cube = self.plane_to_cube(b, c);
        ProbCube {
            bins: cube.bins,
            rows: cube.rows,
            cols: cube.cols,
            p: cube.data,
        }
    }

    /// Inverse of [`plane_to_cube`](Self::plane_to_cube) for a whole batch of
    /// single-channel planes.
    pub fn from_pixel_major(batch: &[&[f64]], t: usize, m: usize, n: usize) -> Result<Self> {
        let mut out = Self::zeros([batch.len(), 1, t, m, n]);
        for (b, data) in batch.iter().enumerate() {
            if data.len() != t * m * n {
                return Err(shape_mismatch(t * m * n, data.len()));
            }
            for i in 0..m {
                for j in 0..n {
                    for k in 0..t {
                        out.set(b, 0, k, i, j, data[(i * n + j) * t + k]);
                    }
                }
            }
        }
        Ok(out)
    }
}
