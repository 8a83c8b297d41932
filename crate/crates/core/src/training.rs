//! Adam with step-halving schedule, the crop/augment/degrade batch pipeline,
//! and a resumable training loop.
//!
//! Randomness is split in two. A master generator picks which images make up
//! each batch (and the noise level in blind mode); its state is checkpointed.
//! Each batch item then gets its own stream keyed by (seed, step, item) for the
//! crop offset, augmentation mode and noise, so batch assembly can run in
//! parallel without changing results.

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::degradation::{Degradation, DegradationSpec, Rng};
use crate::error::{config_err, shape_err, Error, Result};
use crate::exec;
use crate::graph::Graph;
use crate::network::{l2_loss, Forward, Mode, ModelConfig, ModelWeights};
use crate::tensor::{ParamTensor, Real, Tensor};

/// Stream reserved for the master batch-composition generator.
const MASTER_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub halving_period_epochs: usize,
    /// Optimizer steps that make up one epoch.
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub total_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Max global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    /// Emit a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Draw the noise level per batch instead of using the fixed one.
    pub blind: bool,
    pub blind_sigma_min: f64,
    pub blind_sigma_max: f64,
    pub hetero_sigma_s_max: f64,
    pub hetero_sigma_c_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            halving_period_epochs: 200,
            steps_per_epoch: 100,
            batch_size: 32,
            crop: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            total_epochs: 1,
            seed: 0,
            augment: true,
            grad_clip: 0.0,
            checkpoint_every: 0,
            blind: false,
            blind_sigma_min: 10.0,
            blind_sigma_max: 50.0,
            hetero_sigma_s_max: 0.16,
            hetero_sigma_c_max: 0.06,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let positive = [
            ("halving_period_epochs", self.halving_period_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("crop", self.crop),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("train.{name} must be positive"));
            }
        }
        if !(self.base_lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(config_err!("train.base_lr and train.adam_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("adam betas must lie in [0,1)"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(config_err!("train.grad_clip must be non-negative"));
        }
        if !(0.0 <= self.blind_sigma_min && self.blind_sigma_min <= self.blind_sigma_max) {
            return Err(config_err!("blind sigma range [{}, {}] is invalid", self.blind_sigma_min, self.blind_sigma_max));
        }
        if !(self.hetero_sigma_s_max >= 0.0 && self.hetero_sigma_c_max >= 0.0) {
            return Err(config_err!("heteroscedastic ranges must be non-negative"));
        }
        if self.crop < model.patch_size {
            return Err(config_err!("train.crop {} is smaller than the patch size {}", self.crop, model.patch_size));
        }
        Ok(())
    }

    fn adam(&self) -> AdamParams {
        AdamParams { beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// `base_lr · 0.5^⌊epoch / halving_period⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let halvings = (epoch / cfg.halving_period_epochs.max(1)).min(i32::MAX as usize) as i32;
    cfg.base_lr * 0.5f64.powi(halvings)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update of `param` with gradient `grad` at step `t ≥ 1`.
pub fn adam_step<T: Real>(param: &mut ParamTensor<T>, grad: &[T], lr: f64, hp: AdamParams, t: u64) -> Result<()> {
    if t == 0 {
        return Err(config_err!("adam step counter starts at 1"));
    }
    if grad.len() != param.value.numel() {
        return Err(shape_err!(
            "gradient for '{}' has {} values, parameter has {}",
            param.name,
            grad.len(),
            param.value.numel()
        ));
    }
    let exp = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - hp.beta1.powi(exp);
    let c2 = 1.0 - hp.beta2.powi(exp);
    let (m, v) = param.moments_mut();
    let mut delta = vec![0.0f64; grad.len()];
    for (i, &g) in grad.iter().enumerate() {
        let g = g.as_f64();
        let mi = hp.beta1 * m.data()[i].as_f64() + (1.0 - hp.beta1) * g;
        let vi = hp.beta2 * v.data()[i].as_f64() + (1.0 - hp.beta2) * g * g;
        m.data_mut()[i] = T::lit(mi);
        v.data_mut()[i] = T::lit(vi);
        delta[i] = lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
    }
    param.value.data_mut().iter_mut().zip(&delta).for_each(|(p, &d)| *p = T::lit(p.as_f64() - d));
    Ok(())
}

/// Apply one of the eight dihedral transforms to the spatial axes of an
/// N×C×H×W tensor: `mode % 4` quarter turns counter-clockwise, then a
/// horizontal flip when `mode ≥ 4`. Odd turns need a square image.
pub fn augment<T: Real>(x: &Tensor<T>, mode: u8) -> Result<Tensor<T>> {
    if mode > 7 {
        return Err(config_err!("augmentation mode {mode} outside 0..=7"));
    }
    let (n, c, h, w) = x.dims4()?;
    let turns = mode % 4;
    if turns % 2 == 1 && h != w {
        return Err(shape_err!("quarter-turn augmentation needs a square image, got {h}×{w}"));
    }
    let flip = mode >= 4;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for plane in 0..n * c {
        let s = &src[plane * hw..(plane + 1) * hw];
        let d = &mut out[plane * hw..(plane + 1) * hw];
        for y in 0..h {
            for xx in 0..w {
                // source pixel of output (y, xx) after rotation, before the flip
                let xr = if flip { w - 1 - xx } else { xx };
                let (sy, sx) = match turns {
                    0 => (y, xr),
                    1 => (xr, w - 1 - y),
                    2 => (h - 1 - y, w - 1 - xr),
                    _ => (h - 1 - xr, y),
                };
                d[y * w + xx] = s[sy * w + sx];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// The mode that undoes `mode`.
pub fn inverse_mode(mode: u8) -> u8 {
    if mode < 4 {
        (4 - mode) % 4
    } else {
        mode
    }
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based step number.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// `step,lr,loss` with LF line endings. Learning rates and losses span many
/// orders of magnitude, so they are written in scientific notation with four
/// decimals.
pub fn loss_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in records {
        s.push_str(&format!("{},{:.4e},{:.4e}\n", r.step, r.lr, r.loss));
    }
    s
}

/// A resumable training run.
pub struct Trainer<'d> {
    dataset: &'d [Tensor<f32>],
    degradation: DegradationSpec,
    cfg: TrainConfig,
    weights: ModelWeights<f32>,
    step: u64,
    rng: Rng,
}

impl<'d> Trainer<'d> {
    /// Fresh run: weights initialized from `cfg.seed`.
    pub fn new(
        dataset: &'d [Tensor<f32>],
        degradation: DegradationSpec,
        model: &ModelConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let weights = ModelWeights::init(model, cfg.seed)?;
        let rng = Rng::new(cfg.seed, MASTER_STREAM);
        Self::assemble(dataset, degradation, cfg, weights, 0, rng)
    }

    /// Continue from a checkpoint that carries optimizer state.
    pub fn resume(
        dataset: &'d [Tensor<f32>],
        degradation: DegradationSpec,
        cfg: TrainConfig,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        let opt = checkpoint
            .optimizer
            .ok_or_else(|| config_err!("checkpoint has no optimizer state to resume from"))?;
        Self::assemble(dataset, degradation, cfg, checkpoint.weights, opt.step, Rng::from_state(&opt.rng))
    }

    fn assemble(
        dataset: &'d [Tensor<f32>],
        degradation: DegradationSpec,
        cfg: TrainConfig,
        weights: ModelWeights<f32>,
        step: u64,
        rng: Rng,
    ) -> Result<Self> {
        cfg.validate(&weights.config)?;
        degradation.validate()?;
        if dataset.is_empty() {
            return Err(config_err!("training dataset is empty"));
        }
        for (i, img) in dataset.iter().enumerate() {
            let (n, c, h, w) = img.dims4()?;
            if n != 1 || c != weights.config.in_channels {
                return Err(shape_err!(
                    "training image {i} is {n}×{c}×{h}×{w}; expected one image with {} channels",
                    weights.config.in_channels
                ));
            }
            if h < cfg.crop || w < cfg.crop {
                return Err(config_err!("training image {i} ({h}×{w}) is smaller than the {} crop", cfg.crop));
            }
        }
        Ok(Self { dataset, degradation, cfg, weights, step, rng })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> &ModelWeights<f32> {
        &self.weights
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut weights = self.weights.clone();
        weights.zero_grads();
        Checkpoint { weights, optimizer: Some(OptimizerState { step: self.step, rng: self.rng.state() }) }
    }

    /// Noisy and clean batches, both scaled to [0,1].
    fn batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let b = self.cfg.batch_size;
        let picks: Vec<usize> = (0..b).map(|_| self.rng.below(self.dataset.len())).collect();
        let kind = if self.cfg.blind { self.blind_kind() } else { self.degradation.kind };
        let step = self.step;
        let (seed, crop, augment) = (self.cfg.seed, self.cfg.crop, self.cfg.augment);
        let (dataset, spec) = (self.dataset, self.degradation);
        let items = exec::map_range(b, |item| -> Result<(Tensor<f32>, Tensor<f32>)> {
            let mut rng = Rng::new(seed, item_stream(step, item));
            let img = &dataset[picks[item]];
            let (_, c, h, w) = img.dims4()?;
            let top = rng.below(h - crop + 1);
            let left = rng.below(w - crop + 1);
            let mut data = Vec::with_capacity(c * crop * crop);
            for ch in 0..c {
                for y in top..top + crop {
                    let base = (ch * h + y) * w + left;
                    data.extend_from_slice(&img.data()[base..base + crop]);
                }
            }
            let clean = Tensor::new(&[1, c, crop, crop], data)?;
            let clean = if augment { self::augment(&clean, rng.below(8) as u8)? } else { clean };
            let noisy = spec.apply_kind(kind, &clean, &mut rng)?;
            let unit = |v: f32| v / 255.0;
            Ok((noisy.map(unit), clean.map(unit)))
        });
        let mut noisy = Vec::with_capacity(b);
        let mut clean = Vec::with_capacity(b);
        for it in items {
            let (n, c) = it?;
            noisy.push(n);
            clean.push(c);
        }
        Ok((Tensor::stack_batch(&noisy)?, Tensor::stack_batch(&clean)?))
    }

    fn blind_kind(&mut self) -> Degradation {
        match self.degradation.kind {
            Degradation::Awgn { .. } => Degradation::Awgn {
                sigma: self.rng.uniform_range(self.cfg.blind_sigma_min, self.cfg.blind_sigma_max),
            },
            Degradation::Hetero { .. } => Degradation::Hetero {
                sigma_s: self.rng.uniform_range(0.0, self.cfg.hetero_sigma_s_max),
                sigma_c: self.rng.uniform_range(0.0, self.cfg.hetero_sigma_c_max),
            },
            k @ Degradation::Jpeg { .. } => k,
        }
    }

    /// Run one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let epoch = (self.step / self.cfg.steps_per_epoch as u64) as usize;
        let lr = lr_at(epoch, &self.cfg);
        let (noisy, clean) = self.batch()?;

        let g = Graph::<f32>::new();
        let (loss, loss_value, vars, stats) = {
            let fwd = Forward::new(&g, &self.weights, Mode::Train);
            let x = g.input(noisy);
            let target = g.input(clean);
            let (pred, _) = fwd.cola_forward(x)?;
            let loss = l2_loss(&g, pred, target)?;
            let value = g.value(loss).data()[0] as f64;
            (loss, value, fwd.param_vars().to_vec(), fwd.take_batch_stats())
        };
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss_value} at step {}", self.step + 1)));
        }
        let grads = g.backward(loss)?;
        self.weights.zero_grads();
        self.weights.accumulate_grads(&vars, &grads)?;
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(self.weights.params_mut(), self.cfg.grad_clip)?;
        }
        let t = self.step + 1;
        let hp = self.cfg.adam();
        for p in self.weights.params_mut() {
            let Some(grad) = p.value.grad().map(<[f32]>::to_vec) else { continue };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for '{}' at step {t}", p.name)));
            }
            adam_step(p, &grad, lr, hp, t)?;
        }
        self.weights.zero_grads();
        self.weights.apply_batch_stats(&stats);
        self.step = t;
        Ok(StepRecord { step: t, lr, loss: loss_value })
    }

    /// Step until `total_steps`, handing each periodic checkpoint to `on_checkpoint`.
    pub fn run(
        &mut self,
        mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let total = self.cfg.total_steps();
        let mut curve = Vec::with_capacity(total.saturating_sub(self.step) as usize);
        while self.step < total {
            curve.push(self.step()?);
            let every = self.cfg.checkpoint_every as u64;
            if every > 0 && self.step % every == 0 {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(curve)
    }
}

fn item_stream(step: u64, item: usize) -> u64 {
    // stream 0 is the master generator
    ((step + 1) << 20) | item as u64
}

/// Scale every gradient so the global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Real>(params: &mut [ParamTensor<T>], max_norm: f64) -> Result<f64> {
    let norm = params
        .iter()
        .filter_map(|p| p.value.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            if let Some(g) = p.value.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * s).collect();
                p.value.zero_grad();
                p.value.accumulate_grad(&scaled)?;
            }
        }
    }
    Ok(norm)
}

/// Final state and loss curve of a completed run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepRecord>,
}

/// Train from scratch for `cfg.total_epochs` epochs.
pub fn train(
    dataset: &[Tensor<f32>],
    degradation: DegradationSpec,
    model: &ModelConfig,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, degradation, model, cfg)?;
    let curve = trainer.run(|_| Ok(()))?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), curve })
}

/// Synthetic periodic textures on the 0–255 scale.
pub mod fixtures {
    use crate::tensor::Tensor;

    const LO: f32 = 40.0;
    const HI: f32 = 215.0;

    /// Square-wave stripes with the given period, orientation (0 horizontal,
    /// 1 vertical, 2 and 3 the diagonals) and phase.
    pub fn stripes(size: usize, period: usize, orientation: u8, phase: usize) -> Tensor<f32> {
        let period = period.max(2);
        Tensor::from_fn(&[1, 1, size, size], |i| {
            let (y, x) = (i / size, i % size);
            let t = match orientation % 4 {
                0 => y,
                1 => x,
                2 => x + y,
                _ => x + size - y,
            };
            if (t + phase) % period < period / 2 {
                HI
            } else {
                LO
            }
        })
    }

    /// Checkerboard with square cells of side `cell`, shifted by `offset`.
    pub fn checker(size: usize, cell: usize, offset: usize) -> Tensor<f32> {
        let cell = cell.max(1);
        Tensor::from_fn(&[1, 1, size, size], |i| {
            let (y, x) = ((i / size + offset) / cell, (i % size + offset) / cell);
            if (y + x) % 2 == 0 {
                HI
            } else {
                LO
            }
        })
    }

    /// `count` images alternating between stripes and checkerboards with
    /// varied period, orientation and phase.
    pub fn texture_set(count: usize, size: usize) -> Vec<Tensor<f32>> {
        (0..count)
            .map(|i| {
                if i % 2 == 0 {
                    stripes(size, 6 + 2 * (i % 3), (i / 2) as u8, i)
                } else {
                    checker(size, 4 + i % 4, i)
                }
            })
            .collect()
    }
}
