//! A small CPU training engine: batched NCHW tensors, the handful of layers a
//! U-Net needs (3x3/1x1 convolution, batch norm, ReLU, max-pool, nearest
//! upsampling), hand-written backward passes and AdamW.
//!
//! Everything runs single-threaded in a fixed order, so a given seed always
//! reproduces the same parameters bit for bit.

mod layers;
mod optim;
mod unet;

pub use layers::{BatchNorm2d, Conv2d, ConvBnRelu};
pub use optim::{AdamW, AdamWConfig};
pub use unet::{UNet, UNetCache, UNetConfig};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Dense `N x C x H x W` tensor in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fit {n}x{c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Stacks equally shaped `C x H x W` buffers into one batch.
    pub fn stack(samples: &[&[f32]], c: usize, h: usize, w: usize) -> Result<Self> {
        let len = c * h * w;
        let mut data = Vec::with_capacity(samples.len() * len);
        for s in samples {
            if s.len() != len {
                return Err(Error::Shape(format!(
                    "cannot stack a {}-value sample into {c}x{h}x{w}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        Ok(Self {
            n: samples.len(),
            c,
            h,
            w,
            data,
        })
    }

    /// Batch made of the listed samples, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            n: indices.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Channel-wise concatenation of two batches with equal `N`, `H`, `W`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Self {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Self {
            n: a.n,
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `c_first` channels and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        assert!(c_first <= self.c);
        let plane = self.plane();
        let mut a = Tensor::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_first, self.h, self.w);
        for i in 0..self.n {
            let s = self.sample(i);
            a.sample_mut(i).copy_from_slice(&s[..c_first * plane]);
            b.sample_mut(i).copy_from_slice(&s[c_first * plane..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable parameter and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named parameter and buffer storage used for checkpoints.
pub type StateDict = BTreeMap<String, Vec<f32>>;

/// Anything that owns parameters and persistent buffers.
pub trait Module {
    /// Trainable parameters in a fixed traversal order.
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn save_state(&self, prefix: &str, out: &mut StateDict);

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()>;

    fn num_params(&mut self) -> usize {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        ps.iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut(&mut ps);
        for p in ps {
            p.zero_grad();
        }
    }
}

pub(crate) fn take_state(state: &StateDict, key: &str, len: usize) -> Result<Vec<f32>> {
    let v = state
        .get(key)
        .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{key}`")))?;
    if v.len() != len {
        return Err(Error::Format(format!(
            "tensor `{key}` has {} values, expected {len}",
            v.len()
        )));
    }
    Ok(v.clone())
}

/// `C = A·B + beta·C` for row-major operands, optionally reading A or B transposed.
///
/// `a` is `m x k` (or `k x m` when `a_t`), `b` is `k x n` (or `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
