use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    maxpool2, maxpool2_backward, relu_backward, relu_inplace, upsample2, upsample2_backward,
    ConvBnReluCache,
};
use super::{Conv2d, ConvBnRelu, Module, Param, StateDict, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("U-Net depth must be at least 1".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("U-Net depth {} is too large", self.depth)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("U-Net channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DoubleConv {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

struct DoubleConvCache {
    a: ConvBnReluCache,
    b: ConvBnReluCache,
}

impl DoubleConv {
    fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            a: ConvBnRelu::new(cin, cout, rng),
            b: ConvBnRelu::new(cout, cout, rng),
        }
    }

    fn forward_train(&mut self, x: Tensor) -> (Tensor, DoubleConvCache) {
        let (h, a) = self.a.forward_train(x);
        let (y, b) = self.b.forward_train(h);
        (y, DoubleConvCache { a, b })
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        self.b.forward_eval(&self.a.forward_eval(x))
    }

    fn backward(&mut self, cache: &DoubleConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dh = self
            .b
            .backward(&cache.b, dy, true)
            .expect("inner gradient requested");
        self.a.backward(&cache.a, &dh, need_dx)
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.a.params_mut(out);
        self.b.params_mut(out);
    }

    fn save_state(&self, prefix: &str, out: &mut StateDict) {
        self.a.save_state(&format!("{prefix}.0"), out);
        self.b.save_state(&format!("{prefix}.1"), out);
    }

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        self.a.load_state(&format!("{prefix}.0"), state)?;
        self.b.load_state(&format!("{prefix}.1"), state)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock {
    up_conv: ConvBnRelu,
    double: DoubleConv,
}

/// Encoder-decoder with skip connections. Each encoder stage is two
/// conv-BN-ReLU layers followed by 2x max-pooling; each decoder stage
/// upsamples (nearest), applies conv-BN-ReLU, concatenates the matching
/// encoder output and applies two more conv-BN-ReLU layers. A 1x1
/// convolution and ReLU map the last decoder activations to the output
/// feature map, which keeps the input's spatial size.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    downs: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    /// Deepest level first, i.e. in execution order.
    ups: Vec<UpBlock>,
    pub(crate) head: Conv2d,
}

pub struct UNetCache {
    downs: Vec<(DoubleConvCache, Vec<u32>, usize, usize)>,
    bottleneck: DoubleConvCache,
    ups: Vec<(ConvBnReluCache, DoubleConvCache)>,
    head_input: Tensor,
    output: Tensor,
}

impl UNet {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.depth;
        let downs = (0..d)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { config.width(i - 1) };
                DoubleConv::new(cin, config.width(i), rng)
            })
            .collect();
        let bottleneck = DoubleConv::new(config.width(d - 1), config.width(d), rng);
        let ups = (0..d)
            .rev()
            .map(|lvl| UpBlock {
                up_conv: ConvBnRelu::new(config.width(lvl + 1), config.width(lvl), rng),
                double: DoubleConv::new(2 * config.width(lvl), config.width(lvl), rng),
            })
            .collect();
        let head = Conv2d::new(config.width(0), config.out_channels, 1, true, rng);
        Ok(Self {
            config,
            downs,
            bottleneck,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let m = self.config.size_multiple();
        if x.c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        if x.h % m != 0 || x.w % m != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::Shape(format!(
                "spatial size {}x{} is not a positive multiple of {m} (depth {})",
                x.h, x.w, self.config.depth
            )));
        }
        Ok(())
    }

    /// Inference pass using running batch-norm statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        let mut h = x.clone();
        for down in &self.downs {
            let s = down.forward_eval(&h);
            h = maxpool2(&s).0;
            skips.push(s);
        }
        h = self.bottleneck.forward_eval(&h);
        for up in &self.ups {
            let u = up.up_conv.forward_eval(&upsample2(&h));
            let skip = skips.pop().expect("one skip per level");
            h = up.double.forward_eval(&Tensor::concat_channels(&u, &skip));
        }
        let mut y = self.head.forward(&h);
        relu_inplace(&mut y);
        Ok(y)
    }

    /// Training pass with batch statistics; updates running statistics.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, UNetCache)> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.downs.len());
        let mut down_caches = Vec::with_capacity(self.downs.len());
        let mut h = x.clone();
        for down in &mut self.downs {
            let (s, c) = down.forward_train(h);
            let (p, idx) = maxpool2(&s);
            down_caches.push((c, idx, s.h, s.w));
            skips.push(s);
            h = p;
        }
        let (b, bottleneck) = self.bottleneck.forward_train(h);
        h = b;
        let mut up_caches = Vec::with_capacity(self.ups.len());
        for up in &mut self.ups {
            let (u, uc) = up.up_conv.forward_train(upsample2(&h));
            let skip = skips.pop().expect("one skip per level");
            let (d, dc) = up.double.forward_train(Tensor::concat_channels(&u, &skip));
            up_caches.push((uc, dc));
            h = d;
        }
        let mut y = self.head.forward(&h);
        relu_inplace(&mut y);
        let cache = UNetCache {
            downs: down_caches,
            bottleneck,
            ups: up_caches,
            head_input: h,
            output: y.clone(),
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients. The gradient with respect to the
    /// network input is never needed here and is not computed.
    pub fn backward(&mut self, cache: &UNetCache, dy: &Tensor) {
        let dz = relu_backward(&cache.output, dy);
        let mut d = self
            .head
            .backward(&cache.head_input, &dz, true)
            .expect("gradient requested");
        let depth = self.config.depth;
        let mut skip_grads: Vec<Option<Tensor>> = (0..depth).map(|_| None).collect();
        for (j, (up, (uc, dc))) in self.ups.iter_mut().zip(&cache.ups).enumerate().rev() {
            let level = depth - 1 - j;
            let dcat = up.double.backward(dc, &d, true).expect("gradient requested");
            let (du, dskip) = dcat.split_channels(self.config.width(level));
            skip_grads[level] = Some(dskip);
            let dup = up.up_conv.backward(uc, &du, true).expect("gradient requested");
            d = upsample2_backward(&dup);
        }
        d = self
            .bottleneck
            .backward(&cache.bottleneck, &d, true)
            .expect("gradient requested");
        for level in (0..depth).rev() {
            let (dc, idx, h, w) = &cache.downs[level];
            let mut ds = maxpool2_backward(&d, idx, *h, *w);
            ds.add_assign(skip_grads[level].as_ref().expect("skip gradient"));
            match self.downs[level].backward(dc, &ds, level > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

impl Module for UNet {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for d in &mut self.downs {
            d.params_mut(out);
        }
        self.bottleneck.params_mut(out);
        for u in &mut self.ups {
            u.up_conv.params_mut(out);
            u.double.params_mut(out);
        }
        self.head.params_mut(out);
    }

    fn save_state(&self, prefix: &str, out: &mut StateDict) {
        for (i, d) in self.downs.iter().enumerate() {
            d.save_state(&format!("{prefix}.down{i}"), out);
        }
        self.bottleneck.save_state(&format!("{prefix}.bottleneck"), out);
        for (i, u) in self.ups.iter().enumerate() {
            u.up_conv.save_state(&format!("{prefix}.up{i}.conv"), out);
            u.double.save_state(&format!("{prefix}.up{i}.double"), out);
        }
        self.head.save_state(&format!("{prefix}.head"), out);
    }

    fn load_state(&mut self, prefix: &str, state: &StateDict) -> Result<()> {
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.load_state(&format!("{prefix}.down{i}"), state)?;
        }
        self.bottleneck.load_state(&format!("{prefix}.bottleneck"), state)?;
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.up_conv.load_state(&format!("{prefix}.up{i}.conv"), state)?;
            u.double.load_state(&format!("{prefix}.up{i}.double"), state)?;
        }
        self.head.load_state(&format!("{prefix}.head"), state)
    }
}
