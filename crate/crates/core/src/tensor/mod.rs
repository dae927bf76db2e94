//! Minimal dense tensor substrate: row-major `f32` storage plus the kernels
//! the denoiser and toy trainer use.

mod rng;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub use rng::Rng;

/// RMS normalization epsilon.
pub const RMS_EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. standard normal values drawn from `rng` in flat order.
    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        rng.fill_normal(&mut t.data);
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("add", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(max_abs_diff(&self.data, &other.data))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// `[m×k] × [k×n] → [m×n]`, accumulated in ascending `k` order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::dim("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    matmul_into(&a.data, &b.data, m, k, n, &mut out);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Raw-slice kernel behind [`matmul`]; `out` is overwritten.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    if x.data.is_empty() || x.last_dim() == 0 {
        return Err(Error::dim("softmax_lastdim", &x.shape, &[]));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(x.last_dim()) {
        softmax_in_place(row);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = libm::expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `x / sqrt(mean(x²) + 1e-6) * gain` over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    if gain.shape.len() != 1 || gain.shape[0] != x.last_dim() || x.shape.is_empty() {
        return Err(Error::dim("rms_norm", &x.shape, &gain.shape));
    }
    let mut out = x.data.clone();
    rms_norm_rows(&mut out, &gain.data);
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn rms_norm_rows(rows: &mut [f32], gain: &[f32]) {
    let d = gain.len();
    for row in rows.chunks_mut(d) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / libm::sqrtf(ms + RMS_EPS);
        for (v, g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
}

#[inline]
pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = Rng::new(3);
        let b = Tensor::randn(&mut rng, &[3, 5]);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
    }

    #[test]
    fn softmax_edge_cases() {
        let x = Tensor::new(&[3], vec![0.0; 3]).unwrap();
        for v in softmax_lastdim(&x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
        let x = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap();
        let s = softmax_lastdim(&x).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6 && s.data()[1].abs() < 1e-6);
        assert!(softmax_lastdim(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn rms_norm_edge_cases() {
        let ones = Tensor::full(&[2, 4], 1.0);
        let out = rms_norm(&ones, &Tensor::full(&[4], 1.0)).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.0).abs() < 1e-3));
        let zeros = Tensor::zeros(&[2, 4]);
        let out = rms_norm(&zeros, &Tensor::full(&[4], 1.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(rms_norm(&ones, &Tensor::full(&[3], 1.0)).is_err());
    }

    #[test]
    fn rng_reseed_reproduces() {
        let mut a = Rng::new(0);
        let x = Tensor::randn(&mut a, &[2]);
        let y = Tensor::randn(&mut a, &[2]);
        assert_ne!(x, y);
        let mut b = Rng::new(0);
        assert_eq!(Tensor::randn(&mut b, &[2]), x);
    }

    #[test]
    fn rng_chunking_does_not_matter() {
        let mut a = Rng::new(17);
        let whole = Tensor::randn(&mut a, &[12]);
        let mut b = Rng::new(17);
        let mut parts = Tensor::randn(&mut b, &[3, 2]).into_data();
        parts.extend(Tensor::randn(&mut b, &[6]).into_data());
        assert_eq!(whole.data(), &parts[..]);
    }

    #[test]
    fn derived_streams_differ() {
        let r = Rng::new(5);
        let mut a = r.derive(1);
        let mut b = r.derive(2);
        assert_ne!(a.next_u64(), b.next_u64());
        assert_eq!(r.position(), 0);
    }
}
