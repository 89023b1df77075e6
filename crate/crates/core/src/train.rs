//! AdamW, cosine learning-rate schedule with linear warmup, and the
//! gradient-accumulated training loop.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub grad_accum: usize,
    /// Sequences per micro-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Fault injection: report a NaN loss at this optimizer step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverge_at_step: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-7,
            weight_decay: 0.01,
            warmup_steps: 20,
            total_steps: 200,
            grad_accum: 2,
            batch_size: 8,
            seed: 0,
            diverge_at_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!("warmup_steps {} must be < total_steps {}", self.warmup_steps, self.total_steps)));
        }
        if self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::config("grad_accum and batch_size must be >= 1"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        Ok(())
    }
}

/// Linear warmup reaching `lr_max` at `step == warmup`, then cosine decay to zero at
/// `step == total_steps`.
pub fn cosine_lr(step: usize, config: &TrainConfig) -> Result<f64> {
    let (warmup, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond total_steps {total}")));
    }
    if warmup >= total {
        return Err(Error::config(format!("warmup_steps {warmup} must be < total_steps {total}")));
    }
    if step < warmup {
        return Ok(config.lr_max * (step + 1) as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(config.lr_max * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone)]
pub struct OptimizerState<F: Real = f64> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        OptimizerState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One decoupled-weight-decay Adam update of every trainable parameter:
/// `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Grads are left for the caller to zero.
pub fn adamw_step<F: Real>(params: &mut ParamStore<F>, state: &mut OptimizerState<F>, lr: f64, config: &TrainConfig) -> Result<()> {
    if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && !p.grad.all_finite()) {
        return Err(Error::NonFiniteGradient(p.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::of(config.beta1), F::of(config.beta2));
    let bc1 = F::of(1.0 - config.beta1.powi(t));
    let bc2 = F::of(1.0 - config.beta2.powi(t));
    let (lr_f, eps) = (F::of(lr), F::of(config.eps));
    let decay = F::of(1.0 - lr * config.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((x, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (F::one() - b1) * g;
            *vi = b2 * *vi + (F::one() - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x * decay - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub wall_time_s: f64,
    pub final_train_loss: f64,
    pub step_losses: Vec<f64>,
    #[serde(default)]
    pub adapter_checkpoint: Option<std::path::PathBuf>,
    pub status: RunStatus,
    #[serde(default)]
    pub failure_reason: Option<String>,
}

impl RunResult {
    pub fn step_time_s(&self) -> f64 {
        self.wall_time_s / self.step_losses.len().max(1) as f64
    }
}

/// A training run that advances one optimizer step at a time.
///
/// Each step runs `grad_accum` micro-batch forward/backward passes with the loss
/// scaled by `1/grad_accum`, then one AdamW update. Only trainable parameters move.
/// The clock covers the body of [`TrainSession::step`] alone, so two sessions can be
/// interleaved on one thread without charging either for the other's work.
pub struct TrainSession<'a, F: Real> {
    model: &'a mut TransformerModel<F>,
    batches: &'a mut dyn Iterator<Item = Batch>,
    config: TrainConfig,
    state: OptimizerState<F>,
    inv_accum: F,
    step: usize,
    step_losses: Vec<f64>,
    elapsed: Duration,
    failure: Option<String>,
}

impl<'a, F: Real> TrainSession<'a, F> {
    pub fn new(model: &'a mut TransformerModel<F>, batches: &'a mut dyn Iterator<Item = Batch>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(model.params());
        model.params_mut().zero_grads();
        Ok(TrainSession {
            model,
            batches,
            config: config.clone(),
            state,
            inv_accum: F::of(1.0 / config.grad_accum as f64),
            step: 0,
            step_losses: Vec::with_capacity(config.total_steps),
            elapsed: Duration::ZERO,
            failure: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.failure.is_some() || self.step >= self.config.total_steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Run one optimizer step. A no-op once the session is done.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Ok(());
        }
        let start = Instant::now();
        let outcome = self.step_inner();
        self.elapsed += start.elapsed();
        self.step += 1;
        match outcome {
            Ok(()) => Ok(()),
            Err(e @ (Error::NonFiniteGradient(_) | Error::Diverged(_))) => {
                self.failure = Some(e.to_string());
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn step_inner(&mut self) -> Result<()> {
        let mut step_loss = 0.0;
        for _ in 0..self.config.grad_accum {
            let batch = self.batches.next().ok_or_else(|| Error::Missing("training stream exhausted".into()))?;
            let grads = {
                let mut g = Graph::with_params(self.model.params());
                let loss = self.model.loss(&mut g, &batch)?;
                let scaled = g.scale(loss, self.inv_accum);
                step_loss += g.value(scaled).item().as_f64();
                g.backward(scaled)?
            };
            self.model.params_mut().accumulate(&grads);
        }
        if self.config.diverge_at_step == Some(self.step) {
            step_loss = f64::NAN;
        }
        if !step_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {}", self.step)));
        }
        self.step_losses.push(step_loss);
        let lr = cosine_lr(self.step, &self.config)?;
        adamw_step(self.model.params_mut(), &mut self.state, lr, &self.config)?;
        self.model.params_mut().zero_grads();
        Ok(())
    }

    pub fn finish(self) -> RunResult {
        self.model.params_mut().zero_grads();
        let final_train_loss = self.step_losses.last().copied().unwrap_or(f64::NAN);
        let status = if self.failure.is_some() { RunStatus::Diverged } else { RunStatus::Ok };
        RunResult {
            wall_time_s: self.elapsed.as_secs_f64(),
            final_train_loss,
            step_losses: self.step_losses,
            adapter_checkpoint: None,
            status,
            failure_reason: self.failure,
        }
    }
}

/// Run `total_steps` optimizer steps on `batches`.
pub fn train<F: Real>(
    model: &mut TransformerModel<F>,
    batches: &mut dyn Iterator<Item = Batch>,
    config: &TrainConfig,
) -> Result<RunResult> {
    let mut session = TrainSession::new(model, batches, config)?;
    while !session.is_done() {
        session.step()?;
    }
    Ok(session.finish())
}

/// Advance two sessions in alternating steps until both finish, swapping which goes
/// first on every round.
///
/// Machine-wide slowdowns then land on both runs alike, which keeps the paired
/// step-time comparison stable on a shared host.
pub fn train_interleaved<F: Real>(a: &mut TrainSession<'_, F>, b: &mut TrainSession<'_, F>) -> Result<()> {
    let mut a_first = true;
    while !(a.is_done() && b.is_done()) {
        if a_first {
            a.step()?;
            b.step()?;
        } else {
            b.step()?;
            a.step()?;
        }
        a_first = !a_first;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub percent: f64,
    pub ratio: f64,
}

/// `percent = 100·(t_std − t_ale)/t_std`, `ratio = t_std/t_ale`.
pub fn speedup_from_times(t_std: f64, t_ale: f64) -> Result<Speedup> {
    if !(t_std > 0.0 && t_ale > 0.0) {
        return Err(Error::InvalidArgument(format!("speedup needs positive times, got {t_std} and {t_ale}")));
    }
    Ok(Speedup { percent: 100.0 * (t_std - t_ale) / t_std, ratio: t_std / t_ale })
}

pub fn measure_speedup(std: &RunResult, ale: &RunResult) -> Result<Speedup> {
    for r in [std, ale] {
        if r.status != RunStatus::Ok {
            return Err(Error::Diverged(r.failure_reason.clone().unwrap_or_else(|| "diverged run".into())));
        }
    }
    speedup_from_times(std.wall_time_s, ale.wall_time_s)
}
