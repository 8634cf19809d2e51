//! Layers with hand-written forward and backward passes.
//!
//! Forward passes take `&self` and return a cache holding whatever the backward
//! pass needs, so evaluation can run concurrently on a shared network. Batch
//! statistics computed in training mode are stored in the cache and folded into
//! the running statistics separately by [`Layer::commit_running_stats`].

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches kept for backward.
    Train,
    /// Running statistics; caches kept for backward (input gradients).
    Eval,
    /// Running statistics; no caches.
    Infer,
}

/// A trainable parameter tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Whether weight decay applies. Off for normalization scale and shift.
    pub decay: bool,
}

impl Param {
    pub fn new(value: Vec<f64>, decay: bool) -> Self {
        let grad = vec![0.0; value.len()];
        Param { value, grad, decay }
    }

    /// He-style fan-in initialization: `N(0, 2 / fan_in)`.
    fn he(len: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Param::new(value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(out, in, k, k)`.
    pub weight: Param,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::he(out_channels * fan_in, fan_in, rng),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Unfolds one sample into a `(in * k * k, ho * wo)` matrix.
    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_channels);
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![0.0; rows * ho * wo];
        let mut y = Tensor::zeros(x.n, self.out_channels, ho, wo);
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, &mut cols);
            gemm(
                self.out_channels,
                rows,
                ho * wo,
                1.0,
                &self.weight.value,
                false,
                &cols,
                false,
                0.0,
                y.sample_mut(i),
            );
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (ho, wo) = (dy.h, dy.w);
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut cols = vec![0.0; rows * ho * wo];
        let mut dcols = vec![0.0; rows * ho * wo];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for i in 0..x.n {
            self.im2col(x.sample(i), x.h, x.w, &mut cols);
            gemm(
                self.out_channels,
                ho * wo,
                rows,
                1.0,
                dy.sample(i),
                false,
                &cols,
                true,
                1.0,
                &mut self.weight.grad,
            );
            gemm(
                rows,
                self.out_channels,
                ho * wo,
                1.0,
                &self.weight.value,
                true,
                dy.sample(i),
                false,
                0.0,
                &mut dcols,
            );
            self.col2im(&dcols, x.h, x.w, dx.sample_mut(i));
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// Batch mean and unbiased batch variance, present in training mode.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::new(vec![1.0; channels], false),
            beta: Param::new(vec![0.0; channels], false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, Option<BnCache>) {
        let plane = x.plane();
        let count = x.n * plane;
        let (mean, var, batch_stats) = if mode == Mode::Train {
            let mut mean = vec![0.0; self.channels];
            let mut var = vec![0.0; self.channels];
            for c in 0..self.channels {
                let mut s = 0.0;
                for i in 0..x.n {
                    let off = (i * self.channels + c) * plane;
                    s += x.data[off..off + plane].iter().sum::<f64>();
                }
                mean[c] = s / count as f64;
                let mut v = 0.0;
                for i in 0..x.n {
                    let off = (i * self.channels + c) * plane;
                    v += x.data[off..off + plane]
                        .iter()
                        .map(|a| (a - mean[c]).powi(2))
                        .sum::<f64>();
                }
                var[c] = v / count as f64;
            }
            let unbiased = if count > 1 {
                var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
            } else {
                var.clone()
            };
            (mean.clone(), var, Some((mean, unbiased)))
        } else {
            (self.running_mean.clone(), self.running_var.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = if mode == Mode::Infer {
            None
        } else {
            Some(Tensor::zeros(x.n, x.c, x.h, x.w))
        };
        for i in 0..x.n {
            for c in 0..self.channels {
                let off = (i * self.channels + c) * plane;
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for p in off..off + plane {
                    let h = (x.data[p] - mean[c]) * inv_std[c];
                    y.data[p] = g * h + b;
                    if let Some(xh) = xhat.as_mut() {
                        xh.data[p] = h;
                    }
                }
            }
        }
        let cache = xhat.map(|xhat| BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let plane = dy.plane();
        let count = (dy.n * plane) as f64;
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for c in 0..self.channels {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..dy.n {
                let off = (i * self.channels + c) * plane;
                for p in off..off + plane {
                    sum_dy += dy.data[p];
                    sum_dy_xhat += dy.data[p] * cache.xhat.data[p];
                }
            }
            self.beta.grad[c] += sum_dy;
            self.gamma.grad[c] += sum_dy_xhat;
            let scale = self.gamma.value[c] * cache.inv_std[c];
            for i in 0..dy.n {
                let off = (i * self.channels + c) * plane;
                for p in off..off + plane {
                    dx.data[p] = if cache.batch_stats.is_some() {
                        scale / count * (count * dy.data[p] - sum_dy - cache.xhat.data[p] * sum_dy_xhat)
                    } else {
                        scale * dy.data[p]
                    };
                }
            }
        }
        dx
    }

    fn commit(&mut self, cache: &BnCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            for c in 0..self.channels {
                self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
                self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `(out, in)`.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::he(out_features * in_features, in_features, rng),
            bias: Param::new(vec![0.0; out_features], true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.sample_len(), self.in_features);
        let mut y = Tensor::zeros(x.n, self.out_features, 1, 1);
        gemm(
            x.n,
            self.in_features,
            self.out_features,
            1.0,
            &x.data,
            false,
            &self.weight.value,
            true,
            0.0,
            &mut y.data,
        );
        for row in y.data.chunks_mut(self.out_features) {
            for (v, b) in row.iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        gemm(
            self.out_features,
            x.n,
            self.in_features,
            1.0,
            &dy.data,
            true,
            &x.data,
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.data.chunks(self.out_features) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        gemm(
            x.n,
            self.out_features,
            self.in_features,
            1.0,
            &dy.data,
            false,
            &self.weight.value,
            false,
            0.0,
            &mut dx.data,
        );
        dx
    }
}

fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through a ReLU given its output.
fn relu_backward(out: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

fn avg_pool(x: &Tensor) -> Tensor {
    let plane = x.plane();
    let mut y = Tensor::zeros(x.n, x.c, 1, 1);
    for (dst, src) in y.data.iter_mut().zip(x.data.chunks(plane)) {
        *dst = src.iter().sum::<f64>() / plane as f64;
    }
    y
}

fn avg_pool_backward(n: usize, c: usize, h: usize, w: usize, dy: &Tensor) -> Tensor {
    let plane = h * w;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (dst, g) in dx.data.chunks_mut(plane).zip(&dy.data) {
        dst.iter_mut().for_each(|v| *v = g / plane as f64);
    }
    dx
}

/// Two 3x3 conv-BN stages with an identity or projection shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    bn1: BnCache,
    r1: Tensor,
    bn2: BnCache,
    shortcut_bn: Option<BnCache>,
    out: Tensor,
}

impl BasicBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut Rng) -> Self {
        let conv1 = Conv2d::new(in_channels, out_channels, 3, stride, rng);
        let conv2 = Conv2d::new(out_channels, out_channels, 3, 1, rng);
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, rng),
                BatchNorm2d::new(out_channels),
            )
        });
        BasicBlock {
            conv1,
            bn1: BatchNorm2d::new(out_channels),
            conv2,
            bn2: BatchNorm2d::new(out_channels),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, Option<BlockCache>) {
        let a1 = self.conv1.forward(x);
        let (b1, bn1) = self.bn1.forward(&a1, mode);
        let r1 = relu(&b1);
        let a2 = self.conv2.forward(&r1);
        let (mut sum, bn2) = self.bn2.forward(&a2, mode);
        let shortcut_bn = match &self.shortcut {
            Some((conv, bn)) => {
                let (s, cache) = bn.forward(&conv.forward(x), mode);
                sum.add_assign(&s);
                cache
            }
            None => {
                sum.add_assign(x);
                None
            }
        };
        let out = relu(&sum);
        let cache = match (bn1, bn2) {
            (Some(bn1), Some(bn2)) => Some(BlockCache {
                x: x.clone(),
                bn1,
                r1,
                bn2,
                shortcut_bn,
                out: out.clone(),
            }),
            _ => None,
        };
        (out, cache)
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let dsum = relu_backward(&cache.out, dy);
        let da2 = self.bn2.backward(&cache.bn2, &dsum);
        let dr1 = self.conv2.backward(&cache.r1, &da2);
        let db1 = relu_backward(&cache.r1, &dr1);
        let da1 = self.bn1.backward(&cache.bn1, &db1);
        let mut dx = self.conv1.backward(&cache.x, &da1);
        match (&mut self.shortcut, &cache.shortcut_bn) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let ds = bn.backward(bn_cache, &dsum);
                dx.add_assign(&conv.backward(&cache.x, &ds));
            }
            _ => dx.add_assign(&dsum),
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Linear(Linear),
    AvgPool,
    Block(Box<BasicBlock>),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Input(Tensor),
    Bn(BnCache),
    Output(Tensor),
    Shape(usize, usize, usize, usize),
    Block(Box<BlockCache>),
    None,
}

impl Layer {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
        let keep = mode != Mode::Infer;
        match self {
            Layer::Conv(conv) => {
                let cache = if keep {
                    LayerCache::Input(x.clone())
                } else {
                    LayerCache::None
                };
                (conv.forward(x), cache)
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(x, mode);
                (y, cache.map_or(LayerCache::None, LayerCache::Bn))
            }
            Layer::Relu => {
                let y = relu(x);
                let cache = if keep {
                    LayerCache::Output(y.clone())
                } else {
                    LayerCache::None
                };
                (y, cache)
            }
            Layer::Linear(lin) => {
                let cache = if keep {
                    LayerCache::Input(x.clone())
                } else {
                    LayerCache::None
                };
                (lin.forward(x), cache)
            }
            Layer::AvgPool => (avg_pool(x), LayerCache::Shape(x.n, x.c, x.h, x.w)),
            Layer::Block(block) => {
                let (y, cache) = block.forward(x, mode);
                (y, cache.map_or(LayerCache::None, |c| LayerCache::Block(Box::new(c))))
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    ///
    /// Panics if `cache` was produced in [`Mode::Infer`].
    pub fn backward(&mut self, cache: &LayerCache, dy: &Tensor) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Input(x)) => conv.backward(x, dy),
            (Layer::BatchNorm(bn), LayerCache::Bn(c)) => bn.backward(c, dy),
            (Layer::Relu, LayerCache::Output(out)) => relu_backward(out, dy),
            (Layer::Linear(lin), LayerCache::Input(x)) => lin.backward(x, dy),
            (Layer::AvgPool, &LayerCache::Shape(n, c, h, w)) => avg_pool_backward(n, c, h, w, dy),
            (Layer::Block(block), LayerCache::Block(c)) => block.backward(c, dy),
            _ => panic!("backward called with a cache from a different layer or inference mode"),
        }
    }

    pub fn commit_running_stats(&mut self, cache: &LayerCache) {
        match (self, cache) {
            (Layer::BatchNorm(bn), LayerCache::Bn(c)) => bn.commit(c),
            (Layer::Block(block), LayerCache::Block(c)) => {
                block.bn1.commit(&c.bn1);
                block.bn2.commit(&c.bn2);
                if let (Some((_, bn)), Some(sc)) = (&mut block.shortcut, &c.shortcut_bn) {
                    bn.commit(sc);
                }
            }
            _ => {}
        }
    }

    /// Trainable parameters in traversal order: layer order, weight before bias,
    /// scale before shift.
    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(c) => vec![&c.weight],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Relu | Layer::AvgPool => vec![],
            Layer::Block(b) => {
                let mut out = vec![
                    &b.conv1.weight,
                    &b.bn1.gamma,
                    &b.bn1.beta,
                    &b.conv2.weight,
                    &b.bn2.gamma,
                    &b.bn2.beta,
                ];
                if let Some((conv, bn)) = &b.shortcut {
                    out.extend([&conv.weight, &bn.gamma, &bn.beta]);
                }
                out
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu | Layer::AvgPool => vec![],
            Layer::Block(b) => {
                let b = &mut **b;
                let mut out = vec![
                    &mut b.conv1.weight,
                    &mut b.bn1.gamma,
                    &mut b.bn1.beta,
                    &mut b.conv2.weight,
                    &mut b.bn2.gamma,
                    &mut b.bn2.beta,
                ];
                if let Some((conv, bn)) = &mut b.shortcut {
                    out.extend([&mut conv.weight, &mut bn.gamma, &mut bn.beta]);
                }
                out
            }
        }
    }

    /// Non-trainable running statistics.
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            Layer::Block(b) => {
                let mut out = vec![
                    &b.bn1.running_mean,
                    &b.bn1.running_var,
                    &b.bn2.running_mean,
                    &b.bn2.running_var,
                ];
                if let Some((_, bn)) = &b.shortcut {
                    out.extend([&bn.running_mean, &bn.running_var]);
                }
                out
            }
            _ => vec![],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::BatchNorm(bn) => vec![&mut bn.running_mean, &mut bn.running_var],
            Layer::Block(b) => {
                let b = &mut **b;
                let mut out = vec![
                    &mut b.bn1.running_mean,
                    &mut b.bn1.running_var,
                    &mut b.bn2.running_mean,
                    &mut b.bn2.running_var,
                ];
                if let Some((_, bn)) = &mut b.shortcut {
                    out.extend([&mut bn.running_mean, &mut bn.running_var]);
                }
                out
            }
            _ => vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(11)
    }

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut Rng) -> Tensor {
        let data = (0..n * c * h * w)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Loss = <forward(x), probe>; checks d/dx and d/dparams by central differences.
    fn check_layer(mut layer: Layer, x: Tensor, mode: Mode) {
        let mut r = Rng::seed_from_u64(5);
        let (y, cache) = layer.forward(&x, mode);
        let probe = random_tensor(y.n, y.c, y.h, y.w, &mut r);
        let loss = |layer: &Layer, x: &Tensor| -> f64 {
            let (y, _) = layer.forward(x, mode);
            y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
        };
        let dx = layer.backward(&cache, &probe);
        let h = 1e-6;
        for idx in (0..x.data.len()).step_by(1 + x.data.len() / 17) {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!(
                (fd - dx.data[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                "dx[{idx}]: {fd} vs {}",
                dx.data[idx]
            );
        }
        let analytic: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, grads) in analytic.iter().enumerate() {
            for idx in (0..grads.len()).step_by(1 + grads.len() / 7) {
                let mut lp = layer.clone();
                lp.params_mut()[pi].value[idx] += h;
                let mut lm = layer.clone();
                lm.params_mut()[pi].value[idx] -= h;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                assert!(
                    (fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{idx}]: {fd} vs {}",
                    grads[idx]
                );
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let conv = Conv2d::new(2, 3, 3, 2, &mut r);
        let x = random_tensor(2, 2, 5, 4, &mut r);
        check_layer(Layer::Conv(conv), x, Mode::Train);
    }

    #[test]
    fn batchnorm_gradients_train_and_eval() {
        let mut r = rng();
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        bn.running_mean = vec![0.2, -0.1, 0.0];
        bn.running_var = vec![0.8, 1.2, 2.0];
        let x = random_tensor(3, 3, 2, 2, &mut r);
        check_layer(Layer::BatchNorm(bn.clone()), x.clone(), Mode::Train);
        check_layer(Layer::BatchNorm(bn), x, Mode::Eval);
    }

    #[test]
    fn linear_gradients() {
        let mut r = rng();
        let lin = Linear::new(6, 4, &mut r);
        let x = random_tensor(3, 6, 1, 1, &mut r);
        check_layer(Layer::Linear(lin), x, Mode::Train);
    }

    #[test]
    fn block_gradients_with_projection() {
        let mut r = rng();
        let block = BasicBlock::new(2, 4, 2, &mut r);
        assert!(block.shortcut.is_some());
        let x = random_tensor(2, 2, 4, 4, &mut r);
        check_layer(Layer::Block(Box::new(block)), x, Mode::Train);
    }

    #[test]
    fn block_gradients_identity_shortcut() {
        let mut r = rng();
        let block = BasicBlock::new(3, 3, 1, &mut r);
        assert!(block.shortcut.is_none());
        let x = random_tensor(2, 3, 3, 3, &mut r);
        check_layer(Layer::Block(Box::new(block)), x, Mode::Train);
    }

    #[test]
    fn avgpool_gradients() {
        let mut r = rng();
        let x = random_tensor(2, 3, 2, 3, &mut r);
        check_layer(Layer::AvgPool, x, Mode::Train);
    }

    #[test]
    fn running_stats_follow_batch_moments() {
        let mut bn = Layer::BatchNorm(BatchNorm2d::new(1));
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train);
        bn.commit_running_stats(&cache);
        let bufs = bn.buffers();
        assert!((bufs[0][0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        assert!((bufs[1][0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn infer_matches_eval_output() {
        let mut r = rng();
        let block = Layer::Block(Box::new(BasicBlock::new(2, 2, 1, &mut r)));
        let x = random_tensor(2, 2, 3, 3, &mut r);
        let (a, _) = block.forward(&x, Mode::Eval);
        let (b, cache) = block.forward(&x, Mode::Infer);
        assert_eq!(a, b);
        assert!(matches!(cache, LayerCache::None));
    }
}
