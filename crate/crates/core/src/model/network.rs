//! A shared backbone followed by `L` structurally identical heads.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::layers::{BasicBlock, BatchNorm2d, Conv2d, Layer, LayerCache, Linear, Mode, Param};
use super::spec::{ArchitectureSpec, InputShape, LayerSpec};

/// Frozen per-channel normalization applied to inputs in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(channels: usize) -> Self {
        InputNorm {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::config("normalization mean and std differ in length"));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(InputNorm { mean, std })
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let mut y = x.clone();
        for (j, chunk) in y.data.chunks_mut(plane).enumerate() {
            let c = j % x.c;
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
        y
    }

    fn backward(&self, dy: &mut Tensor) {
        let plane = dy.plane();
        let channels = dy.c;
        for (j, chunk) in dy.data.chunks_mut(plane).enumerate() {
            let s = self.std[j % channels];
            chunk.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Per-sample, per-head logits laid out as `(batch, heads, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    pub batch: usize,
    pub heads: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl HeadLogits {
    pub fn zeros(batch: usize, heads: usize, classes: usize) -> Self {
        HeadLogits {
            batch,
            heads,
            classes,
            data: vec![0.0; batch * heads * classes],
        }
    }

    pub fn row(&self, sample: usize, head: usize) -> &[f64] {
        let off = (sample * self.heads + head) * self.classes;
        &self.data[off..off + self.classes]
    }

    pub fn row_mut(&mut self, sample: usize, head: usize) -> &mut [f64] {
        let off = (sample * self.heads + head) * self.classes;
        &mut self.data[off..off + self.classes]
    }

    /// `(heads, classes)` block for one sample.
    pub fn sample(&self, sample: usize) -> &[f64] {
        let len = self.heads * self.classes;
        &self.data[sample * len..(sample + 1) * len]
    }

    pub fn ensemble(&self, sample: usize) -> Vec<f64> {
        ensemble_logits(self.sample(sample), self.heads).expect("heads >= 1 by construction")
    }
}

/// Mean of `(heads, classes)` logits over the head axis.
pub fn ensemble_logits(head_logits: &[f64], heads: usize) -> Result<Vec<f64>> {
    if heads == 0 || head_logits.is_empty() {
        return Err(Error::input("ensemble over an empty head axis"));
    }
    if !head_logits.len().is_multiple_of(heads) {
        return Err(Error::input(format!(
            "{} logits do not split into {heads} heads",
            head_logits.len()
        )));
    }
    let classes = head_logits.len() / heads;
    let mut out = vec![0.0; classes];
    for row in head_logits.chunks(classes) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    Ok(out)
}

/// Caches from a training-mode forward pass.
pub struct ForwardCache {
    backbone: Vec<LayerCache>,
    heads: Vec<Vec<LayerCache>>,
    feature_shape: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadNetwork {
    spec: ArchitectureSpec,
    norm: InputNorm,
    backbone: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
}

fn build_layers(specs: &[LayerSpec], input: InputShape, rng: &mut rng::Rng) -> (Vec<Layer>, InputShape) {
    let mut layers = Vec::new();
    let mut cur = input;
    for spec in specs {
        match *spec {
            LayerSpec::ConvBnRelu {
                out_channels,
                kernel,
                stride,
            } => {
                layers.push(Layer::Conv(Conv2d::new(
                    cur.channels,
                    out_channels,
                    kernel,
                    stride,
                    rng,
                )));
                layers.push(Layer::BatchNorm(BatchNorm2d::new(out_channels)));
                layers.push(Layer::Relu);
                cur = super::spec::conv_out(cur, out_channels, kernel, stride);
            }
            LayerSpec::ResidualGroup {
                out_channels,
                blocks,
                stride,
            } => {
                for b in 0..blocks {
                    let (cin, s) = if b == 0 {
                        (cur.channels, stride)
                    } else {
                        (out_channels, 1)
                    };
                    layers.push(Layer::Block(Box::new(BasicBlock::new(cin, out_channels, s, rng))));
                }
                cur = super::spec::conv_out(cur, out_channels, 3, stride);
            }
            LayerSpec::Dense { out_features } => {
                layers.push(Layer::Linear(Linear::new(cur.len(), out_features, rng)));
                layers.push(Layer::Relu);
                cur = InputShape::new(out_features, 1, 1);
            }
            LayerSpec::AvgPool => {
                layers.push(Layer::AvgPool);
                cur = InputShape::new(cur.channels, 1, 1);
            }
        }
    }
    (layers, cur)
}

fn run_forward(layers: &[Layer], x: Tensor, mode: Mode) -> (Tensor, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x;
    for layer in layers {
        let (y, cache) = layer.forward(&cur, mode);
        caches.push(cache);
        cur = y;
    }
    (cur, caches)
}

fn run_backward(layers: &mut [Layer], caches: &[LayerCache], dy: Tensor) -> Tensor {
    let mut grad = dy;
    for (layer, cache) in layers.iter_mut().zip(caches).rev() {
        grad = layer.backward(cache, &grad);
    }
    grad
}

impl MultiHeadNetwork {
    /// Builds a network with deterministic parameters. The backbone and each
    /// head draw from separate sub-seeds of `seed`.
    pub fn build(spec: &ArchitectureSpec, norm: InputNorm, seed: u64) -> Result<Self> {
        spec.validate()?;
        if norm.mean.len() != spec.input_shape.channels {
            return Err(Error::config(format!(
                "normalization has {} channels, input has {}",
                norm.mean.len(),
                spec.input_shape.channels
            )));
        }
        let mut backbone_rng = rng::stream(seed, "init-backbone", &[]);
        let (backbone, feature) = build_layers(spec.backbone_layers(), spec.input_shape, &mut backbone_rng);
        let heads = (0..spec.num_heads)
            .map(|k| {
                let mut head_rng = rng::stream(seed, "init-head", &[k as u64]);
                let (mut layers, out) = build_layers(spec.head_layers(), feature, &mut head_rng);
                layers.push(Layer::Linear(Linear::new(out.len(), spec.num_classes, &mut head_rng)));
                layers
            })
            .collect();
        Ok(MultiHeadNetwork {
            spec: spec.clone(),
            norm,
            backbone,
            heads,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn norm(&self) -> &InputNorm {
        &self.norm
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.spec.input_shape;
        if x.c != s.channels || x.h != s.height || x.w != s.width {
            return Err(Error::input(format!(
                "input shape {}x{}x{} does not match network input {s}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    /// Builds a batch tensor from flat samples.
    pub fn batch_tensor(&self, flat: &[f64]) -> Result<Tensor> {
        let s = self.spec.input_shape;
        if !flat.len().is_multiple_of(s.len()) {
            return Err(Error::input(format!(
                "{} values are not a whole number of {s} inputs",
                flat.len()
            )));
        }
        Tensor::from_vec(flat.len() / s.len(), s.channels, s.height, s.width, flat.to_vec())
    }

    fn collect_logits(outputs: Vec<Tensor>, batch: usize, classes: usize) -> HeadLogits {
        let heads = outputs.len();
        let mut logits = HeadLogits::zeros(batch, heads, classes);
        for (k, out) in outputs.iter().enumerate() {
            for n in 0..batch {
                logits.row_mut(n, k).copy_from_slice(out.sample(n));
            }
        }
        logits
    }

    /// Inference-mode logits of every head. The backbone runs once per batch.
    pub fn forward_all_heads(&self, x: &Tensor) -> Result<HeadLogits> {
        self.check_input(x)?;
        let (feat, _) = run_forward(&self.backbone, self.norm.apply(x), Mode::Infer);
        let outputs = self
            .heads
            .iter()
            .map(|head| run_forward(head, feat.clone(), Mode::Infer).0)
            .collect();
        Ok(Self::collect_logits(outputs, x.n, self.spec.num_classes))
    }

    /// Inference-mode logits of a single head, computed on its own.
    pub fn forward_head(&self, x: &Tensor, head: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let layers = self
            .heads
            .get(head)
            .ok_or_else(|| Error::input(format!("head {head} out of range")))?;
        let (feat, _) = run_forward(&self.backbone, self.norm.apply(x), Mode::Infer);
        Ok(run_forward(layers, feat, Mode::Infer).0)
    }

    /// Ensemble prediction (argmax of the head-averaged logits, lowest index on ties).
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_all_heads(x)?;
        Ok((0..x.n).map(|n| argmax(&logits.ensemble(n))).collect())
    }

    /// Forward pass keeping caches for [`MultiHeadNetwork::backward`].
    /// `Mode::Train` uses batch statistics; `Mode::Eval` running statistics.
    pub fn forward_cached(&self, x: &Tensor, mode: Mode) -> Result<(HeadLogits, ForwardCache)> {
        self.check_input(x)?;
        assert!(mode != Mode::Infer, "cached forward needs Train or Eval mode");
        let (feat, backbone) = run_forward(&self.backbone, self.norm.apply(x), mode);
        let feature_shape = (feat.n, feat.c, feat.h, feat.w);
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (out, caches) = run_forward(head, feat.clone(), mode);
            outputs.push(out);
            heads.push(caches);
        }
        Ok((
            Self::collect_logits(outputs, x.n, self.spec.num_classes),
            ForwardCache {
                backbone,
                heads,
                feature_shape,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits` and returns the input gradient.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &HeadLogits) -> Tensor {
        let (n, c, h, w) = cache.feature_shape;
        let mut dfeat = Tensor::zeros(n, c, h, w);
        for (k, (head, caches)) in self.heads.iter_mut().zip(&cache.heads).enumerate() {
            let mut dy = Tensor::zeros(n, dlogits.classes, 1, 1);
            for s in 0..n {
                dy.sample_mut(s).copy_from_slice(dlogits.row(s, k));
            }
            dfeat.add_assign(&run_backward(head, caches, dy));
        }
        let mut dx = run_backward(&mut self.backbone, &cache.backbone, dfeat);
        self.norm.backward(&mut dx);
        dx
    }

    pub fn commit_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.backbone.iter_mut().zip(&cache.backbone) {
            layer.commit_running_stats(c);
        }
        for (head, caches) in self.heads.iter_mut().zip(&cache.heads) {
            for (layer, c) in head.iter_mut().zip(caches) {
                layer.commit_running_stats(c);
            }
        }
    }

    /// All trainable parameters: backbone first, then heads in order.
    pub fn params(&self) -> Vec<&Param> {
        self.backbone
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(Layer::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn head_params(&self, head: usize) -> Vec<&Param> {
        self.heads[head].iter().flat_map(Layer::params).collect()
    }

    pub fn head_params_mut(&mut self, head: usize) -> Vec<&mut Param> {
        self.heads[head].iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        self.backbone
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(Layer::buffers)
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.backbone
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
            .flat_map(Layer::buffers_mut)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Flattened trainable parameters of head `k` (zero-based) in traversal order.
    pub fn head_param_vector(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.heads.len() {
            return Err(Error::input(format!(
                "head index {k} out of range for {} heads",
                self.heads.len()
            )));
        }
        Ok(self
            .head_params(k)
            .into_iter()
            .flat_map(|p| p.value.iter().copied())
            .collect())
    }

    /// Adds `grad` (laid out like [`MultiHeadNetwork::head_param_vector`]) to head `k`'s gradients.
    pub fn add_head_grad(&mut self, k: usize, grad: &[f64]) {
        let mut off = 0;
        for p in self.head_params_mut(k) {
            let len = p.len();
            for (g, v) in p.grad.iter_mut().zip(&grad[off..off + len]) {
                *g += v;
            }
            off += len;
        }
        debug_assert_eq!(off, grad.len());
    }

    /// Overwrites head `dst`'s parameters and statistics with those of head `src`.
    pub fn copy_head(&mut self, src: usize, dst: usize) {
        let layers = self.heads[src].clone();
        self.heads[dst] = layers;
    }

    /// Every trainable value followed by every running statistic.
    pub fn state_vector(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params().iter().flat_map(|p| p.value.iter().copied()).collect();
        out.extend(self.buffers().iter().flat_map(|b| b.iter().copied()));
        out
    }

    /// Inverse of [`MultiHeadNetwork::state_vector`].
    pub fn load_state_vector(&mut self, values: &[f64]) -> Result<()> {
        let expected: usize = self.params().iter().map(|p| p.len()).sum::<usize>()
            + self.buffers().iter().map(|b| b.len()).sum::<usize>();
        if values.len() != expected {
            return Err(Error::input(format!(
                "state has {} values, network expects {expected}",
                values.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let len = p.len();
            p.value.copy_from_slice(&values[off..off + len]);
            off += len;
        }
        for b in self.buffers_mut() {
            let len = b.len();
            b.copy_from_slice(&values[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
