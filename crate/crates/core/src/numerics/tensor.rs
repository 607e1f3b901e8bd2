use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Dense row-major `f64` array with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(contract!("tensor dimensions must be positive, got {:?}", shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(contract!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics on zero-sized dimensions; use [`Tensor::new`] for untrusted shapes.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// `n x n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(contract!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(contract!("{what}: expected shape {:?}, got {:?}", shape, self.shape));
        }
        Ok(())
    }

    pub fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.ndim() != ndim {
            return Err(contract!(
                "{what}: expected a {ndim}-D tensor, got shape {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Element at a 2-D index. Panics when out of range.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let cols = self.shape[1];
        &mut self.data[i * cols + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        other.expect_shape(&self.shape, "elementwise operand")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor) -> Result<()> {
        other.expect_shape(&self.shape, "axpy operand")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        other.expect_shape(&self.shape, "dot operand")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        other.expect_shape(&self.shape, "comparison operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Result<Self> {
        self.expect_ndim(2, "transpose")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        self.expect_ndim(2, "matmul lhs")?;
        rhs.expect_ndim(2, "matmul rhs")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(contract!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                rhs.shape
            ));
        }
        let mut out = Self::zeros(&[m, n]);
        for i in 0..m {
            let row = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rrow = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Channel slice `[c, ..]` of a tensor whose leading axis is channels.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane: usize = self.shape[1..].iter().product();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Stacks same-shaped `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| contract!("concat of zero tensors"))?;
        first.expect_ndim(3, "concat part")?;
        let (h, w) = (first.shape[1], first.shape[2]);
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            p.expect_ndim(3, "concat part")?;
            if p.shape[1] != h || p.shape[2] != w {
                return Err(contract!("concat spatial mismatch: {:?} vs {:?}", first.shape, p.shape));
            }
            channels += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![channels, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        self.expect_ndim(3, "split")?;
        if sizes.iter().sum::<usize>() != self.shape[0] {
            return Err(contract!(
                "split sizes {:?} do not cover {} channels",
                sizes,
                self.shape[0]
            ));
        }
        let plane = self.shape[1] * self.shape[2];
        let mut offset = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Tensor::new(
                    vec![c, self.shape[1], self.shape[2]],
                    self.data[offset * plane..(offset + c) * plane].to_vec(),
                );
                offset += c;
                t
            })
            .collect()
    }
}

/// Stops non-finite values escaping a public operation.
pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(contract!("{what} produced a non-finite value"))
    }
}
