//! The training loop: shared noise draws, per-head smoothed losses,
//! self-paced weights handed around the heads in a ring, head weighting,
//! and one optimizer step per batch.

pub mod checkpoint;
pub mod optimizer;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    self, argmin, consistency_grad, consistency_terms, cosine_diversity, head_weights, smoothmix_terms,
    spacte_objective, spacte_objective_grad, HeadWeights, SampleHeadMatrix, TeachingWeights, Variant,
};
use crate::model::{HeadLogits, Mode, MultiHeadNetwork};
use crate::rng;
use crate::schedule::{LambdaSchedule, LrSchedule};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use optimizer::Sgd;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sigma: f64,
    /// Noise draws per sample (`m`).
    pub draws: usize,
    pub epsilon: f64,
    pub variant: Variant,
    pub lambda_ini: f64,
    pub lambda_lst: f64,
    /// When false every sample weight is 1.
    pub self_paced: bool,
    /// When false each head keeps its own sample weights.
    pub circular: bool,
    pub cosine: bool,
    pub cosine_normalized: bool,
    pub lr: LrSchedule,
    pub nesterov: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl TrainConfig {
    /// Defaults for a `classes`-way problem at noise level `sigma`.
    pub fn new(sigma: f64, classes: usize) -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 256,
            sigma,
            draws: 2,
            epsilon: 0.8,
            variant: Variant::Gaussian,
            lambda_ini: (classes as f64).ln(),
            lambda_lst: 1.0,
            self_paced: true,
            circular: true,
            cosine: true,
            cosine_normalized: false,
            lr: LrSchedule::default(),
            nesterov: true,
            seed: 0,
            checkpoint_every: 10,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.draws == 0 {
            return Err(Error::config("train.m must be at least 1"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("noise.sigma must be a finite value >= 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!(
                "train.epsilon {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if matches!(self.variant, Variant::Consistency { .. }) && self.draws < 2 {
            return Err(Error::config("train.m must be at least 2 for the consistency variant"));
        }
        self.variant.validate()?;
        self.lr.validate()
    }

    /// Stable fingerprint recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        rng::text_hash(&format!("{self:?}"))
    }

    pub fn lambda_schedule(&self) -> Result<Option<LambdaSchedule>> {
        if self.epochs < 2 {
            return Ok(None);
        }
        LambdaSchedule::new(self.lambda_ini, self.lambda_lst, self.epochs).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub network: MultiHeadNetwork,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean smoothed loss per head over the last completed epoch.
    pub head_loss: Vec<f64>,
}

impl TrainState {
    pub fn new(network: MultiHeadNetwork, config: &TrainConfig) -> Self {
        let optimizer = Sgd::new(
            &network.params(),
            config.lr.momentum,
            config.nesterov,
            config.lr.weight_decay,
        );
        let heads = network.num_heads();
        TrainState {
            network,
            optimizer,
            epoch: 0,
            head_loss: vec![0.0; heads],
        }
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            spec: self.network.spec().clone(),
            config_hash: config.fingerprint(),
            epoch: self.epoch,
            seed: config.seed,
            sigma: config.sigma,
            norm: self.network.norm().clone(),
            state: self.network.state_vector(),
            optimizer: self.optimizer.flat(),
            head_loss: self.head_loss.clone(),
        }
    }

    /// Rebuilds a state from a checkpoint written with the same configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        if ckpt.config_hash != config.fingerprint() {
            return Err(Error::config(
                "checkpoint was written with a different training configuration",
            ));
        }
        let mut state = TrainState::new(ckpt.network()?, config);
        state.optimizer.load_flat(&ckpt.optimizer)?;
        state.epoch = ckpt.epoch;
        state.head_loss = ckpt.head_loss.clone();
        Ok(state)
    }
}

/// What one update saw and did.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub objective: f64,
    /// Mean smoothed loss per head over the batch.
    pub head_loss: Vec<f64>,
    /// Fraction of samples with weight 1, per head, before the shift.
    pub easy_fraction: Vec<f64>,
    pub cosine: f64,
    /// Head receiving the large weight.
    pub best_head: usize,
    pub omega: HeadWeights,
    pub nu: TeachingWeights,
    pub shifted_nu: TeachingWeights,
}

/// `sigma * N(0, I)` for `draws` copies of `samples` inputs of length `dim`,
/// draw-major, from the iteration's own stream.
pub fn iteration_noise(
    seed: u64,
    epoch: usize,
    iteration: usize,
    draws: usize,
    samples: usize,
    dim: usize,
    sigma: f64,
) -> Vec<f64> {
    let mut r = rng::stream(seed, "noise", &[epoch as u64, iteration as u64]);
    (0..draws * samples * dim)
        .map(|_| sigma * r.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `draws` noisy copies of `x`, draw-major.
pub fn noisy_batch(x: &Tensor, noise: &[f64], draws: usize) -> Tensor {
    let mut out = Tensor::zeros(draws * x.n, x.c, x.h, x.w);
    let d = x.sample_len();
    for i in 0..draws {
        for s in 0..x.n {
            let row = i * x.n + s;
            for ((o, a), e) in out
                .sample_mut(row)
                .iter_mut()
                .zip(x.sample(s))
                .zip(&noise[row * d..(row + 1) * d])
            {
                *o = a + e;
            }
        }
    }
    out
}

fn grad_vector(net: &MultiHeadNetwork) -> Vec<f64> {
    net.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
}

/// Accumulates the full objective gradient into the network's parameter
/// gradients (which are cleared first) without stepping.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_gradients(
    net: &mut MultiHeadNetwork,
    config: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    lambda: f64,
    mix_rng: &mut rng::Rng,
) -> Result<IterationLog> {
    if x.n == 0 || labels.len() != x.n {
        return Err(Error::input("training batch is empty or mislabeled"));
    }
    net.zero_grad();
    let m = config.draws;
    let (n, l) = (x.n, net.num_heads());
    let noisy = noisy_batch(x, noise, m);
    let (logits, cache) = net.forward_cached(&noisy, Mode::Train)?;

    let smoothed = losses::smoothed_losses(&logits, m, labels)?;
    let nu = if config.self_paced {
        TeachingWeights::from_smoothed_losses(&smoothed, lambda)
    } else {
        TeachingWeights::ones(n, l)
    };
    let head_loss = smoothed.column_means();
    let omega = head_weights(&head_loss, config.epsilon)?;
    let shifted_nu = if config.circular {
        nu.circular_shift()
    } else {
        nu.clone()
    };

    let mut objective = spacte_objective(&logits, m, labels, &shifted_nu, &omega, 0.0)?;
    let mut dlogits = spacte_objective_grad(&logits, m, labels, &shifted_nu, &omega)?;
    let mut coef = SampleHeadMatrix::zeros(n, l);
    for s in 0..n {
        for k in 0..l {
            *coef.get_mut(s, k) = omega.0[k] * shifted_nu.get(s, k) / (n * l) as f64;
        }
    }
    let weighted =
        |terms: &SampleHeadMatrix| -> f64 { terms.values.iter().zip(&coef.values).map(|(a, b)| a * b).sum() };

    let mix = match config.variant {
        Variant::Gaussian => None,
        Variant::Consistency { c1, c2 } => {
            objective += weighted(&consistency_terms(&logits, m, n, c1, c2)?);
            consistency_grad(&logits, m, n, c1, c2, &coef, &mut dlogits)?;
            None
        }
        Variant::SmoothMix { c3, steps, step_size } => {
            let t = smoothmix_terms(net, x, labels, noise, &logits, m, c3, steps, step_size, mix_rng)?;
            objective += weighted(&t.terms);
            Some(t)
        }
    };

    net.backward(&cache, &dlogits);
    net.commit_running_stats(&cache);
    if let (Some(t), Variant::SmoothMix { c3, .. }) = (mix, config.variant) {
        let mut dmix = HeadLogits::zeros(t.logits.batch, l, t.logits.classes);
        losses::mix_grad(&t.logits, &t.mix.targets, c3, &coef, &mut dmix);
        net.backward(&t.cache, &dmix);
    }

    let mut cosine = 0.0;
    if config.cosine && l >= 2 {
        let heads: Vec<Vec<f64>> = (0..l).map(|k| net.head_param_vector(k)).collect::<Result<_>>()?;
        let c = cosine_diversity(&heads, config.cosine_normalized)?;
        for (k, g) in c.grads.iter().enumerate() {
            net.add_head_grad(k, g);
        }
        cosine = c.value;
    }
    objective += cosine;
    if !objective.is_finite() {
        return Err(Error::numeric("non-finite objective"));
    }
    if let Some(i) = net.params().iter().position(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::numeric(format!("non-finite gradient in parameter tensor {i}")));
    }

    Ok(IterationLog {
        objective,
        best_head: argmin(&head_loss),
        easy_fraction: nu.easy_fraction(),
        head_loss,
        cosine,
        omega,
        nu,
        shifted_nu,
    })
}

/// One full update on a batch: noise, weights, gradients, optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration(
    state: &mut TrainState,
    config: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    lambda: f64,
    lr: f64,
    epoch: usize,
    iteration: usize,
) -> Result<IterationLog> {
    let noise = iteration_noise(
        config.seed,
        epoch,
        iteration,
        config.draws,
        x.n,
        x.sample_len(),
        config.sigma,
    );
    let mut mix_rng = rng::stream(config.seed, "mix", &[epoch as u64, iteration as u64]);
    let log = accumulate_gradients(&mut state.network, config, x, labels, &noise, lambda, &mut mix_rng)?;
    state.optimizer.step(state.network.params_mut(), lr)?;
    Ok(log)
}

/// Gradient of the mean cross-entropy over every noisy copy and every head,
/// with no sample or head weighting: plain Gaussian data augmentation.
/// Returns the flattened parameter gradients; running statistics are left untouched.
pub fn gaussian_augmentation_gradients(
    net: &mut MultiHeadNetwork,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    draws: usize,
) -> Result<Vec<f64>> {
    net.zero_grad();
    let noisy = noisy_batch(x, noise, draws);
    let (logits, cache) = net.forward_cached(&noisy, Mode::Train)?;
    let rows = noisy.n;
    let scale = 1.0 / (rows * logits.heads) as f64;
    let mut dlogits = HeadLogits::zeros(rows, logits.heads, logits.classes);
    for r in 0..rows {
        let y = labels[r % x.n];
        for k in 0..logits.heads {
            let p = losses::softmax(logits.row(r, k));
            for (c, (d, pc)) in dlogits.row_mut(r, k).iter_mut().zip(p).enumerate() {
                *d = scale * (pc - if c == y { 1.0 } else { 0.0 });
            }
        }
    }
    net.backward(&cache, &dlogits);
    let g = grad_vector(net);
    net.zero_grad();
    Ok(g)
}

/// Flattened parameter gradients of one iteration, without stepping.
pub fn iteration_gradients(
    net: &mut MultiHeadNetwork,
    config: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    noise: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, IterationLog)> {
    let mut mix_rng = rng::stream(config.seed, "mix", &[0, 0]);
    let log = accumulate_gradients(net, config, x, labels, noise, lambda, &mut mix_rng)?;
    Ok((grad_vector(net), log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    pub head_loss: Vec<f64>,
    pub easy_fraction: Vec<f64>,
    pub cosine: f64,
    pub iterations: usize,
    pub seconds: f64,
}

impl EpochLog {
    pub fn mean_loss(&self) -> f64 {
        self.head_loss.iter().sum::<f64>() / self.head_loss.len().max(1) as f64
    }

    /// `epoch lambda lr loss_1 .. loss_L cosine`, tab separated.
    pub fn line(&self) -> String {
        let mut fields = vec![
            self.epoch.to_string(),
            format!("{:.6}", self.lambda),
            format!("{:.6}", self.lr),
        ];
        fields.extend(self.head_loss.iter().map(|v| format!("{v:.6}")));
        fields.push(format!("{:.6}", self.cosine));
        fields.join("\t")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub iterations: usize,
    /// Mean smoothed loss over heads on the first batch of the run.
    pub initial_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(EpochLog::mean_loss)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}.ckpt"))
}

/// Runs the remaining epochs of `state` (from `state.epoch + 1` to
/// `config.epochs`). Checkpoints go to `checkpoint_dir` at the configured
/// cadence and as `final.ckpt` at completion.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    mut state: TrainState,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainState, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    if dataset.shape != state.network.spec().input_shape {
        return Err(Error::config(format!(
            "dataset shape {} does not match model input {}",
            dataset.shape,
            state.network.spec().input_shape
        )));
    }
    let lambda_sched = config.lambda_schedule()?;
    let mut report = TrainReport::default();
    let heads = state.network.num_heads();
    for epoch in state.epoch + 1..=config.epochs {
        let start = Instant::now();
        let lambda = lambda_sched.map_or(config.lambda_ini, |s| s.at(epoch));
        let lr = config.lr.at(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = vec![0.0; heads];
        let mut easy_sum = vec![0.0; heads];
        let mut cosine_sum = 0.0;
        let mut iterations = 0;
        for (it, rows) in order.chunks(config.batch_size).enumerate() {
            let (mut x, labels) = dataset.batch(rows);
            if config.augment {
                augment_batch(
                    &mut x,
                    &mut rng::stream(config.seed, "augment", &[epoch as u64, it as u64]),
                );
            }
            let log = train_iteration(&mut state, config, &x, &labels, lambda, lr, epoch, it)
                .map_err(|e| Error::numeric(format!("epoch {epoch}, iteration {it}: {e}")))?;
            if report.initial_loss.is_none() {
                report.initial_loss = Some(log.head_loss.iter().sum::<f64>() / heads as f64);
            }
            let w = rows.len() as f64;
            for k in 0..heads {
                loss_sum[k] += w * log.head_loss[k];
                easy_sum[k] += w * log.easy_fraction[k];
            }
            cosine_sum += log.cosine;
            iterations += 1;
        }
        let total = dataset.len() as f64;
        state.epoch = epoch;
        state.head_loss = loss_sum.iter().map(|v| v / total).collect();
        let log = EpochLog {
            epoch,
            lambda,
            lr,
            head_loss: state.head_loss.clone(),
            easy_fraction: easy_sum.iter().map(|v| v / total).collect(),
            cosine: cosine_sum / iterations as f64,
            iterations,
            seconds: start.elapsed().as_secs_f64(),
        };
        report.iterations += iterations;
        on_epoch(&log);
        report.epochs.push(log);
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                let path = checkpoint_path(dir, epoch);
                state.checkpoint(config).save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.ckpt");
        state.checkpoint(config).save(&path)?;
        report.checkpoints.push(path);
    }
    Ok((state, report))
}
