use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{gemm, take_state, Module, Param, StateDict, Tensor};
use crate::error::Result;

/// Square-kernel convolution with stride 1 and "same" zero padding.
/// Only kernel sizes 1 and 3 are supported.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x (in * k * k)`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let weight = (0..out_channels * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(vec![0.0; out_channels])),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let hw = x.plane();
        let mut y = Tensor::zeros(x.n, self.out_channels, x.h, x.w);
        let mut cols = if self.kernel == 3 {
            vec![0.0; self.patch_len() * hw]
        } else {
            Vec::new()
        };
        for i in 0..x.n {
            let xs = x.sample(i);
            let cols: &[f32] = if self.kernel == 3 {
                im2col3(xs, x.c, x.h, x.w, &mut cols);
                &cols
            } else {
                xs
            };
            let ys = y.sample_mut(i);
            gemm(
                self.out_channels,
                self.patch_len(),
                hw,
                &self.weight.value,
                false,
                cols,
                false,
                0.0,
                ys,
            );
            if let Some(b) = &self.bias {
                for (o, &bo) in b.value.iter().enumerate() {
                    ys[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients for `dy` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let hw = x.plane();
        let k = self.patch_len();
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut cols = if self.kernel == 3 {
            vec![0.0; k * hw]
        } else {
            Vec::new()
        };
        let mut dcols = vec![0.0; k * hw];
        for i in 0..x.n {
            let xs = x.sample(i);
            let dys = dy.sample(i);
            let cols: &[f32] = if self.kernel == 3 {
                im2col3(xs, x.c, x.h, x.w, &mut cols);
                &cols
            } else {
                xs
            };
            weight_grad(self.out_channels, k, hw, dys, cols, &mut self.weight.grad);
            if let Some(b) = &mut self.bias {
                for (o, g) in b.grad.iter_mut().enumerate() {
                    *g += dys[o * hw..(o + 1) * hw].iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = dx.sample_mut(i);
                if self.kernel == 3 {
                    gemm(
                        k,
                        self.out_channels,
                        hw,
                        &self.weight.value,
                        true,
                        dys,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    col2im3(&dcols, x.c, x.h, x.w, dxs);
                } else {
                    gemm(
                        k,
                        self.out_channels,
                        hw,
                        &self.weight.value,
                        true,
                        dys,
                        false,
                        0.0,
                        dxs,
                    );
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
    }

    fn save_state(&self, prefix: &str, out: &mut StateDict) {
        out.insert(format!("{prefix}.weight"), self.weight.value.clone());
        if let Some(b) = &self.bias {
            out.insert(format!("{prefix}.bias"), b.value.clone());
        }
    }

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        self.weight = Param::new(take_state(
            state,
            &format!("{prefix}.weight"),
            self.weight.value.len(),
        )?);
        if let Some(b) = &mut self.bias {
            *b = Param::new(take_state(state, &format!("{prefix}.bias"), b.value.len())?);
        }
        Ok(())
    }
}

/// `dw[o][p] += <dy[o], cols[p]>`. The reduction runs over the long pixel
/// axis, where row-wise dot products beat a packed gemm by a wide margin.
fn weight_grad(out: usize, k: usize, hw: usize, dy: &[f32], cols: &[f32], dw: &mut [f32]) {
    for o in 0..out {
        let row = &dy[o * hw..(o + 1) * hw];
        for p in 0..k {
            dw[o * k + p] += dot(row, &cols[p * hw..(p + 1) * hw]);
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 16;
    let mut acc = [0.0f32; LANES];
    let split = a.len() / LANES * LANES;
    for (x, y) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        s += x * y;
    }
    s
}

/// Unfolds 3x3 zero-padded neighbourhoods: row `(ci*9 + ky*3 + kx)` of `cols`
/// holds channel `ci` shifted by `(ky-1, kx-1)`.
fn im2col3(x: &[f32], c: usize, h: usize, w: usize, cols: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &src[yy as usize * w..][..w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]; overwrites `dx`.
fn col2im3(cols: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    dx.fill(0.0);
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[yy as usize * w..][..w];
                    match kx {
                        0 => {
                            for (d, s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in drow.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

#[derive(Clone, Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let hw = x.plane();
        let count = (x.n * hw) as f64;
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![0.0f32; x.c];
        for ch in 0..x.c {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                sum += x.sample(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                sq += x.sample(i)[ch * hw..(ch + 1) * hw]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = istd as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * hw;
                for p in off..off + hw {
                    let xh = ((x.data[p] as f64 - mean) * istd) as f32;
                    xhat.data[p] = xh;
                    y.data[p] = g * xh + b;
                }
            }
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean as f32;
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased as f32;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let hw = x.plane();
        let mut y = x.clone();
        for ch in 0..x.c {
            let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let scale = self.gamma.value[ch] * istd;
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * hw;
                y.data[off..off + hw]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let hw = dy.plane();
        let count = (dy.n * hw) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for ch in 0..dy.c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..dy.n {
                let off = i * dy.sample_len() + ch * hw;
                for p in off..off + hw {
                    sum_dy += dy.data[p] as f64;
                    sum_dy_xhat += (dy.data[p] * cache.xhat.data[p]) as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let k = self.gamma.value[ch] as f64 * cache.inv_std[ch] as f64 / count;
            for i in 0..dy.n {
                let off = i * dy.sample_len() + ch * hw;
                for p in off..off + hw {
                    dx.data[p] = (k
                        * (count * dy.data[p] as f64
                            - sum_dy
                            - cache.xhat.data[p] as f64 * sum_dy_xhat))
                        as f32;
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }

    fn save_state(&self, prefix: &str, out: &mut StateDict) {
        out.insert(format!("{prefix}.gamma"), self.gamma.value.clone());
        out.insert(format!("{prefix}.beta"), self.beta.value.clone());
        out.insert(format!("{prefix}.running_mean"), self.running_mean.clone());
        out.insert(format!("{prefix}.running_var"), self.running_var.clone());
    }

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        let c = self.channels;
        self.gamma = Param::new(take_state(state, &format!("{prefix}.gamma"), c)?);
        self.beta = Param::new(take_state(state, &format!("{prefix}.beta"), c)?);
        self.running_mean = take_state(state, &format!("{prefix}.running_mean"), c)?;
        self.running_var = take_state(state, &format!("{prefix}.running_var"), c)?;
        Ok(())
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2x2 max-pool with stride 2. Returns the argmax offsets within each plane.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut idx = vec![0u32; y.data.len()];
    let planes = x.n * x.c;
    for p in 0..planes {
        let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (2 * oy) * x.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = (2 * oy + dy) * x.w + 2 * ox + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                y.data[o] = src[best];
                idx[o] = best as u32;
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
    let plane_in = in_h * in_w;
    let plane_out = dy.plane();
    for p in 0..dy.n * dy.c {
        for o in 0..plane_out {
            let g = p * plane_out + o;
            dx.data[p * plane_in + idx[g] as usize] += dy.data[g];
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for p in 0..x.n * x.c {
        let src = &x.data[p * x.plane()..(p + 1) * x.plane()];
        let dst = &mut y.data[p * oh * ow..(p + 1) * oh * ow];
        for yy in 0..oh {
            let srow = &src[(yy / 2) * x.w..][..x.w];
            let drow = &mut dst[yy * ow..(yy + 1) * ow];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for p in 0..dy.n * dy.c {
        let src = &dy.data[p * dy.plane()..(p + 1) * dy.plane()];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// `conv3x3 -> batch norm -> ReLU`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct ConvBnReluCache {
    input: Tensor,
    bn: BnCache,
    output: Tensor,
}

impl ConvBnRelu {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, 3, false, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    pub fn forward_train(&mut self, x: Tensor) -> (Tensor, ConvBnReluCache) {
        let z = self.conv.forward(&x);
        let (mut y, bn) = self.bn.forward_train(&z);
        relu_inplace(&mut y);
        let cache = ConvBnReluCache {
            input: x,
            bn,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let z = self.conv.forward(x);
        let mut y = self.bn.forward_eval(&z);
        relu_inplace(&mut y);
        y
    }

    pub fn backward(&mut self, cache: &ConvBnReluCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dz = relu_backward(&cache.output, dy);
        let dz = self.bn.backward(&cache.bn, &dz);
        self.conv.backward(&cache.input, &dz, need_dx)
    }
}

impl Module for ConvBnRelu {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.conv.params_mut(out);
        self.bn.params_mut(out);
    }

    fn save_state(&self, prefix: &str, out: &mut StateDict) {
        self.conv.save_state(&format!("{prefix}.conv"), out);
        self.bn.save_state(&format!("{prefix}.bn"), out);
    }

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        self.conv.load_state(&format!("{prefix}.conv"), state)?;
        self.bn.load_state(&format!("{prefix}.bn"), state)
    }
}
