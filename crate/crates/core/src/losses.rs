//! Loss components: cross-entropy, head diversity, head weights, self-paced
//! sample weights with circular teaching, and the consistency / mix-up
//! regularizers.
//!
//! Logits from `m` noise draws of an `N`-sample batch are stored as a single
//! [`HeadLogits`] of batch `m * N`, draw-major: row `i * N + n` is draw `i` of
//! sample `n`.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{ForwardCache, HeadLogits, Mode, MultiHeadNetwork};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits in cross-entropy"));
    }
    Ok(-log_softmax(logits)[label])
}

/// `KL(p || q) = sum p log(p / q)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Pulls `dL/dp` back through softmax: `p * (g - <g, p>)`, scaled and added to `out`.
fn softmax_pullback(p: &[f64], g: &[f64], scale: f64, out: &mut [f64]) {
    let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    for ((o, pi), gi) in out.iter_mut().zip(p).zip(g) {
        *o += scale * pi * (gi - dot);
    }
}

/// Adds `scale * (softmax(logits) - onehot(label))` to `out`.
fn add_ce_grad(logits: &[f64], label: usize, scale: f64, out: &mut [f64]) {
    for (c, (o, p)) in out.iter_mut().zip(softmax(logits)).enumerate() {
        *o += scale * (p - if c == label { 1.0 } else { 0.0 });
    }
}

/// Value and per-head gradients of the pairwise cosine penalty.
#[derive(Debug, Clone)]
pub struct CosineLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// `sum_{i != j} <h_i, h_j>^2 / (|h_i| |h_j|)` over ordered pairs.
pub fn cosine_diversity_loss(heads: &[Vec<f64>]) -> Result<f64> {
    Ok(cosine_diversity(heads, false)?.value)
}

/// The pairwise penalty and its gradient. With `normalized`, the denominator
/// is squared, giving a scale-free sum of squared cosines.
///
/// Fewer than two heads is an empty sum.
pub fn cosine_diversity(heads: &[Vec<f64>], normalized: bool) -> Result<CosineLoss> {
    let mut grads: Vec<Vec<f64>> = heads.iter().map(|h| vec![0.0; h.len()]).collect();
    if heads.len() < 2 {
        return Ok(CosineLoss { value: 0.0, grads });
    }
    let len = heads[0].len();
    if heads.iter().any(|h| h.len() != len) {
        return Err(Error::input("head vectors differ in length"));
    }
    let norms: Vec<f64> = heads
        .iter()
        .map(|h| h.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(k) = norms.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::numeric(format!("head {k} has a zero-norm parameter vector")));
    }
    let mut value = 0.0;
    for i in 0..heads.len() {
        for j in i + 1..heads.len() {
            let (hi, hj) = (&heads[i], &heads[j]);
            let (ai, aj) = (norms[i], norms[j]);
            let d: f64 = hi.iter().zip(hj).map(|(a, b)| a * b).sum();
            // Each unordered pair appears twice in the ordered sum.
            let (term, ci, cj, si, sj) = if normalized {
                let den = ai * ai * aj * aj;
                (
                    d * d / den,
                    2.0 * d / den,
                    2.0 * d / den,
                    2.0 * d * d / (den * ai * ai),
                    2.0 * d * d / (den * aj * aj),
                )
            } else {
                let den = ai * aj;
                (
                    d * d / den,
                    2.0 * d / den,
                    2.0 * d / den,
                    d * d / (den * ai * ai),
                    d * d / (den * aj * aj),
                )
            };
            value += 2.0 * term;
            for t in 0..len {
                grads[i][t] += 2.0 * (ci * hj[t] - si * hi[t]);
                grads[j][t] += 2.0 * (cj * hi[t] - sj * hj[t]);
            }
        }
    }
    Ok(CosineLoss { value, grads })
}

/// Per-head coefficients of the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights(pub Vec<f64>);

impl HeadWeights {
    pub fn uniform(heads: usize) -> Self {
        HeadWeights(vec![1.0 / heads as f64; heads])
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = k;
        }
    }
    best
}

/// `1 - epsilon` for the head with the smallest loss (lowest index on ties),
/// `epsilon / (L - 1)` for the rest. A single head always gets weight 1.
pub fn head_weights(per_head_losses: &[f64], epsilon: f64) -> Result<HeadWeights> {
    let l = per_head_losses.len();
    if l == 0 {
        return Err(Error::input("head weights need at least one head"));
    }
    if let Some(k) = per_head_losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite loss for head {k}")));
    }
    if l == 1 {
        return Ok(HeadWeights(vec![1.0]));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::config(format!("epsilon {epsilon} must lie in (0, 1)")));
    }
    let best = argmin(per_head_losses);
    let mut w = vec![epsilon / (l - 1) as f64; l];
    w[best] = 1.0 - epsilon;
    Ok(HeadWeights(w))
}

/// Mean of per-draw losses.
pub fn smoothed_loss(per_draw_losses: &[f64]) -> Result<f64> {
    if per_draw_losses.is_empty() {
        return Err(Error::input("smoothed loss over zero draws"));
    }
    Ok(per_draw_losses.iter().sum::<f64>() / per_draw_losses.len() as f64)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Self-paced weight: 1 for `loss <= lambda`, otherwise
/// `(1 + e^-lambda) / (1 + e^(loss - lambda))`, evaluated in log space.
pub fn spl_weight(smoothed_loss: f64, lambda: f64) -> f64 {
    if smoothed_loss <= lambda {
        return 1.0;
    }
    (softplus(-lambda) - softplus(smoothed_loss - lambda)).exp()
}

/// A `samples x heads` table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleHeadMatrix {
    pub samples: usize,
    pub heads: usize,
    pub values: Vec<f64>,
}

impl SampleHeadMatrix {
    pub fn zeros(samples: usize, heads: usize) -> Self {
        SampleHeadMatrix {
            samples,
            heads,
            values: vec![0.0; samples * heads],
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let heads = columns.len();
        let samples = columns.first().map_or(0, Vec::len);
        let mut m = SampleHeadMatrix::zeros(samples, heads);
        for (k, col) in columns.iter().enumerate() {
            for (n, v) in col.iter().enumerate() {
                *m.get_mut(n, k) = *v;
            }
        }
        m
    }

    pub fn get(&self, sample: usize, head: usize) -> f64 {
        self.values[sample * self.heads + head]
    }

    pub fn get_mut(&mut self, sample: usize, head: usize) -> &mut f64 {
        &mut self.values[sample * self.heads + head]
    }

    pub fn column(&self, head: usize) -> Vec<f64> {
        (0..self.samples).map(|n| self.get(n, head)).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.heads)
            .map(|k| self.column(k).iter().sum::<f64>() / self.samples.max(1) as f64)
            .collect()
    }
}

/// `nu[n][k]`: the weight head `k` assigns to sample `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeachingWeights(pub SampleHeadMatrix);

impl TeachingWeights {
    pub fn from_smoothed_losses(losses: &SampleHeadMatrix, lambda: f64) -> Self {
        let mut m = losses.clone();
        m.values.iter_mut().for_each(|v| *v = spl_weight(*v, lambda));
        TeachingWeights(m)
    }

    pub fn ones(samples: usize, heads: usize) -> Self {
        let mut m = SampleHeadMatrix::zeros(samples, heads);
        m.values.iter_mut().for_each(|v| *v = 1.0);
        TeachingWeights(m)
    }

    /// Column given to head `k` is the one produced by head `k - 1`; head 0
    /// receives the last head's column.
    pub fn circular_shift(&self) -> Self {
        let src = &self.0;
        let l = src.heads;
        let mut out = SampleHeadMatrix::zeros(src.samples, l);
        for n in 0..src.samples {
            for k in 0..l {
                *out.get_mut(n, k) = src.get(n, (k + l - 1) % l);
            }
        }
        TeachingWeights(out)
    }

    pub fn get(&self, sample: usize, head: usize) -> f64 {
        self.0.get(sample, head)
    }

    /// Fraction of samples with weight exactly 1, per head.
    pub fn easy_fraction(&self) -> Vec<f64> {
        (0..self.0.heads)
            .map(|k| {
                let col = self.0.column(k);
                col.iter().filter(|v| **v == 1.0).count() as f64 / col.len().max(1) as f64
            })
            .collect()
    }
}

fn check_draw_layout(logits: &HeadLogits, draws: usize, labels: &[usize]) -> Result<usize> {
    if draws == 0 {
        return Err(Error::input("zero noise draws"));
    }
    let n = labels.len();
    if logits.batch != draws * n {
        return Err(Error::input(format!(
            "logit batch {} is not {draws} draws x {n} samples",
            logits.batch
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= logits.classes) {
        return Err(Error::input(format!(
            "label {y} out of range for {} classes",
            logits.classes
        )));
    }
    Ok(n)
}

/// Cross-entropy of every (draw, sample, head), laid out like `logits`
/// with one value per row. Non-finite values are reported with their indices.
pub fn per_draw_cross_entropy(logits: &HeadLogits, draws: usize, labels: &[usize]) -> Result<Vec<f64>> {
    let n = check_draw_layout(logits, draws, labels)?;
    let mut out = Vec::with_capacity(logits.batch * logits.heads);
    for i in 0..draws {
        for (s, &y) in labels.iter().enumerate() {
            for k in 0..logits.heads {
                let row = logits.row(i * n + s, k);
                let ce = cross_entropy(row, y)
                    .map_err(|_| Error::numeric(format!("non-finite logits at head {k}, sample {s}, draw {i}")))?;
                if !ce.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at head {k}, sample {s}, draw {i}"
                    )));
                }
                out.push(ce);
            }
        }
    }
    Ok(out)
}

/// Smoothed loss of each sample under each head: mean cross-entropy over the draws.
pub fn smoothed_losses(logits: &HeadLogits, draws: usize, labels: &[usize]) -> Result<SampleHeadMatrix> {
    let ce = per_draw_cross_entropy(logits, draws, labels)?;
    let (n, l) = (labels.len(), logits.heads);
    let mut out = SampleHeadMatrix::zeros(n, l);
    for i in 0..draws {
        for s in 0..n {
            for k in 0..l {
                *out.get_mut(s, k) += ce[(i * n + s) * l + k];
            }
        }
    }
    out.values.iter_mut().for_each(|v| *v /= draws as f64);
    Ok(out)
}

fn check_weights(n: usize, l: usize, shifted: &TeachingWeights, omega: &HeadWeights) -> Result<()> {
    if shifted.0.samples != n || shifted.0.heads != l || omega.0.len() != l {
        return Err(Error::input(format!(
            "weights are {}x{} and {} head weights for {n} samples and {l} heads",
            shifted.0.samples,
            shifted.0.heads,
            omega.0.len()
        )));
    }
    Ok(())
}

/// `1/(mNL) sum_k omega_k sum_n sum_i nu~[n][k] CE(f_k(x_n + delta_i), y_n) + cosine`,
/// where `nu~` is the already-shifted weight matrix.
pub fn spacte_objective(
    logits: &HeadLogits,
    draws: usize,
    labels: &[usize],
    shifted: &TeachingWeights,
    omega: &HeadWeights,
    cosine: f64,
) -> Result<f64> {
    let n = check_draw_layout(logits, draws, labels)?;
    let l = logits.heads;
    check_weights(n, l, shifted, omega)?;
    let ce = per_draw_cross_entropy(logits, draws, labels)?;
    let mut total = 0.0;
    for k in 0..l {
        let mut head = 0.0;
        for s in 0..n {
            for i in 0..draws {
                head += shifted.get(s, k) * ce[(i * n + s) * l + k];
            }
        }
        total += omega.0[k] * head;
    }
    Ok(total / (draws * n * l) as f64 + cosine)
}

/// Gradient of the classification part of [`spacte_objective`] with respect to the logits.
pub fn spacte_objective_grad(
    logits: &HeadLogits,
    draws: usize,
    labels: &[usize],
    shifted: &TeachingWeights,
    omega: &HeadWeights,
) -> Result<HeadLogits> {
    let n = check_draw_layout(logits, draws, labels)?;
    let l = logits.heads;
    check_weights(n, l, shifted, omega)?;
    let norm = (draws * n * l) as f64;
    let mut grad = HeadLogits::zeros(logits.batch, l, logits.classes);
    for i in 0..draws {
        for (s, &y) in labels.iter().enumerate() {
            for k in 0..l {
                let scale = omega.0[k] * shifted.get(s, k) / norm;
                add_ce_grad(logits.row(i * n + s, k), y, scale, grad.row_mut(i * n + s, k));
            }
        }
    }
    Ok(grad)
}

/// Training variant and its coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Gaussian,
    /// `c1` scales the KL to the mean prediction, `c2` its entropy.
    Consistency {
        c1: f64,
        c2: f64,
    },
    /// `c3` scales the mix-up KL; the adversarial point takes `steps`
    /// normalized gradient-ascent steps of length `step_size`.
    SmoothMix {
        c3: f64,
        steps: usize,
        step_size: f64,
    },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Gaussian => "gaussian",
            Variant::Consistency { .. } => "consistency",
            Variant::SmoothMix { .. } => "smoothmix",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Variant::Gaussian => true,
            Variant::Consistency { c1, c2 } => c1 >= 0.0 && c2 >= 0.0,
            Variant::SmoothMix { c3, step_size, .. } => c3 >= 0.0 && step_size >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{} coefficients must be non-negative",
                self.name()
            )))
        }
    }
}

fn mean_softmax(logits: &HeadLogits, draws: usize, n: usize, s: usize, k: usize) -> Vec<f64> {
    let mut mean = vec![0.0; logits.classes];
    for i in 0..draws {
        for (m, p) in mean.iter_mut().zip(softmax(logits.row(i * n + s, k))) {
            *m += p / draws as f64;
        }
    }
    mean
}

/// Per (sample, head): `c1 * mean_i KL(p_i || p_hat) + c2 * H(p_hat)`, where
/// `p_i` is the head's softmax on draw `i` and `p_hat` their mean.
pub fn consistency_terms(
    logits: &HeadLogits,
    draws: usize,
    samples: usize,
    c1: f64,
    c2: f64,
) -> Result<SampleHeadMatrix> {
    if draws < 2 {
        return Err(Error::config("the consistency variant needs at least 2 noise draws"));
    }
    if logits.batch != draws * samples {
        return Err(Error::input("logit batch does not match draws x samples"));
    }
    let mut out = SampleHeadMatrix::zeros(samples, logits.heads);
    for s in 0..samples {
        for k in 0..logits.heads {
            let mean = mean_softmax(logits, draws, samples, s, k);
            let kl: f64 = (0..draws)
                .map(|i| kl_divergence(&softmax(logits.row(i * samples + s, k)), &mean))
                .sum::<f64>()
                / draws as f64;
            *out.get_mut(s, k) = c1 * kl + c2 * entropy(&mean);
        }
    }
    Ok(out)
}

/// Adds `coef[s][k] * d(consistency term)/d(logits)` into `grad`.
pub fn consistency_grad(
    logits: &HeadLogits,
    draws: usize,
    samples: usize,
    c1: f64,
    c2: f64,
    coef: &SampleHeadMatrix,
    grad: &mut HeadLogits,
) -> Result<()> {
    if draws < 2 {
        return Err(Error::config("the consistency variant needs at least 2 noise draws"));
    }
    for s in 0..samples {
        for k in 0..logits.heads {
            let scale = coef.get(s, k);
            if scale == 0.0 {
                continue;
            }
            let log_mean: Vec<f64> = mean_softmax(logits, draws, samples, s, k)
                .iter()
                .map(|v| v.ln())
                .collect();
            for i in 0..draws {
                let row = logits.row(i * samples + s, k);
                let logp = log_softmax(row);
                let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
                let g: Vec<f64> = logp
                    .iter()
                    .zip(&log_mean)
                    .map(|(lp, lm)| (c1 * lp - (c1 + c2) * lm) / draws as f64)
                    .collect();
                softmax_pullback(&p, &g, scale, grad.row_mut(i * samples + s, k));
            }
        }
    }
    Ok(())
}

/// Softmax of the draw-averaged ensemble logits, per sample.
pub fn smoothed_ensemble_soft(logits: &HeadLogits, draws: usize, samples: usize) -> Vec<Vec<f64>> {
    (0..samples)
        .map(|s| {
            let mut avg = vec![0.0; logits.classes];
            for i in 0..draws {
                for (a, v) in avg.iter_mut().zip(logits.ensemble(i * samples + s)) {
                    *a += v / draws as f64;
                }
            }
            softmax(&avg)
        })
        .collect()
}

/// `(1 - c4) * soft + c4 / K`.
pub fn mixing_target(soft: &[f64], c4: f64) -> Vec<f64> {
    let k = soft.len() as f64;
    soft.iter().map(|p| (1.0 - c4) * p + c4 / k).collect()
}

/// `T` normalized L2 ascent steps on `-log mean_i softmax(f_ens(x + delta_i))_y`,
/// reusing the given draws at every step. The network is evaluated with running
/// statistics and its parameter gradients are cleared afterwards.
pub fn adversarial_inputs(
    net: &mut MultiHeadNetwork,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    draws: usize,
    steps: usize,
    step_size: f64,
) -> Result<Tensor> {
    let n = x.n;
    let d = x.sample_len();
    if noise.len() != draws * n * d {
        return Err(Error::input("noise does not match draws x batch"));
    }
    let mut adv = x.clone();
    for _ in 0..steps {
        let mut noisy = Tensor::zeros(draws * n, x.c, x.h, x.w);
        for i in 0..draws {
            for s in 0..n {
                let dst = noisy.sample_mut(i * n + s);
                for ((o, a), e) in dst
                    .iter_mut()
                    .zip(adv.sample(s))
                    .zip(&noise[(i * n + s) * d..(i * n + s + 1) * d])
                {
                    *o = a + e;
                }
            }
        }
        let (logits, cache) = net.forward_cached(&noisy, Mode::Eval)?;
        let l = logits.heads;
        let mut dlogits = HeadLogits::zeros(logits.batch, l, logits.classes);
        for (s, &y) in labels.iter().enumerate() {
            let probs: Vec<Vec<f64>> = (0..draws).map(|i| softmax(&logits.ensemble(i * n + s))).collect();
            let q_y = probs.iter().map(|p| p[y]).sum::<f64>() / draws as f64;
            for (i, p) in probs.iter().enumerate() {
                let coef = -p[y] / (draws as f64 * q_y.max(f64::MIN_POSITIVE));
                for k in 0..l {
                    let row = dlogits.row_mut(i * n + s, k);
                    for (c, r) in row.iter_mut().enumerate() {
                        let e = if c == y { 1.0 } else { 0.0 };
                        *r = coef * (e - p[c]) / l as f64;
                    }
                }
            }
        }
        let dx = net.backward(&cache, &dlogits);
        for s in 0..n {
            let mut g = vec![0.0; d];
            for i in 0..draws {
                for (gv, v) in g.iter_mut().zip(dx.sample(i * n + s)) {
                    *gv += v;
                }
            }
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (a, gv) in adv.sample_mut(s).iter_mut().zip(&g) {
                    *a += step_size * gv / norm;
                }
            }
        }
    }
    net.zero_grad();
    Ok(adv)
}

/// Mixed inputs and soft targets for the mix-up term.
#[derive(Debug, Clone)]
pub struct MixBatch {
    pub inputs: Tensor,
    pub targets: Vec<Vec<f64>>,
    pub c4: Vec<f64>,
}

/// Draws `c4 ~ U[0, 1/2]` per sample and forms `x_mix = (1-c4) x + c4 x_adv`
/// and `y_mix = (1-c4) soft + c4 / K`.
pub fn mix_batch(x: &Tensor, adv: &Tensor, soft: &[Vec<f64>], rng: &mut Rng) -> MixBatch {
    let mut inputs = x.clone();
    let mut c4 = Vec::with_capacity(x.n);
    let mut targets = Vec::with_capacity(x.n);
    for (s, soft_s) in soft.iter().enumerate().take(x.n) {
        let c = rng.random_range(0.0..=0.5);
        for (o, a) in inputs.sample_mut(s).iter_mut().zip(adv.sample(s)) {
            *o = (1.0 - c) * *o + c * a;
        }
        targets.push(mixing_target(soft_s, c));
        c4.push(c);
    }
    MixBatch { inputs, targets, c4 }
}

/// Per (sample, head): `c3 * KL(softmax f_k(x_mix) || y_mix)`.
pub fn mix_terms(logits: &HeadLogits, targets: &[Vec<f64>], c3: f64) -> SampleHeadMatrix {
    let mut out = SampleHeadMatrix::zeros(logits.batch, logits.heads);
    for (s, t) in targets.iter().enumerate() {
        for k in 0..logits.heads {
            *out.get_mut(s, k) = c3 * kl_divergence(&softmax(logits.row(s, k)), t);
        }
    }
    out
}

/// Adds `coef[s][k] * d(mix term)/d(logits)` into `grad`.
pub fn mix_grad(logits: &HeadLogits, targets: &[Vec<f64>], c3: f64, coef: &SampleHeadMatrix, grad: &mut HeadLogits) {
    for (s, t) in targets.iter().enumerate() {
        for k in 0..logits.heads {
            let logp = log_softmax(logits.row(s, k));
            let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            let g: Vec<f64> = logp.iter().zip(t).map(|(lp, q)| lp - q.ln()).collect();
            softmax_pullback(&p, &g, c3 * coef.get(s, k), grad.row_mut(s, k));
        }
    }
}

/// Mix-up terms for one batch.
pub struct SmoothMixTerms {
    pub mix: MixBatch,
    /// Train-mode logits at the mixed inputs, with the cache for backward.
    pub logits: HeadLogits,
    pub cache: ForwardCache,
    pub terms: SampleHeadMatrix,
}

/// Runs the adversarial search, mixes, and evaluates the per-(sample, head)
/// mix-up losses. `noisy_logits` are the draw-major logits of the batch's
/// noisy copies, which define the soft targets.
#[allow(clippy::too_many_arguments)]
pub fn smoothmix_terms(
    net: &mut MultiHeadNetwork,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    noisy_logits: &HeadLogits,
    draws: usize,
    c3: f64,
    steps: usize,
    step_size: f64,
    rng: &mut Rng,
) -> Result<SmoothMixTerms> {
    let adv = adversarial_inputs(net, x, labels, noise, draws, steps, step_size)?;
    let soft = smoothed_ensemble_soft(noisy_logits, draws, x.n);
    let mix = mix_batch(x, &adv, &soft, rng);
    let (logits, cache) = net.forward_cached(&mix.inputs, Mode::Train)?;
    let terms = mix_terms(&logits, &mix.targets, c3);
    Ok(SmoothMixTerms {
        mix,
        logits,
        cache,
        terms,
    })
}
