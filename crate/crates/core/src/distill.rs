//! Training loops: teacher pre-training, student distillation, and the
//! one-step oracle that defines the difference term the sampler approximates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MaskedSequence, TransformerModel};
use crate::numerics::{Graph, ParamVector, Tensor};
use crate::tasks::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    /// Plain gradient descent (weight decay still decoupled).
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer_seed: u64,
    pub eval_interval_steps: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            warmup_fraction: 0.1,
            batch_size: 32,
            epochs: 4,
            optimizer_seed: 0,
            eval_interval_steps: 10,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and ≥ 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be ≥ 0"));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::invalid("gradient clip norm must be ≥ 0 (0 disables clipping)"));
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup fraction must lie in [0, 0.5]"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_interval_steps == 0 {
            return Err(Error::invalid("batch size, epochs and eval interval must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * examples.div_ceil(self.batch_size)
    }
}

/// Linear warm-up to `peak`, then cosine decay that would reach zero one step past `total` (1-indexed steps).
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        let warmup_steps = ((warmup_fraction * total_steps as f64).round() as usize).min(total_steps);
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak;
        }
        let progress = step.saturating_sub(self.warmup_steps + 1) as f64 / span as f64;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Entries that receive weight decay (matrices; not biases, gains or vectors).
    decay_mask: Vec<bool>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Optimizer {
    pub fn new(params: &ParamVector, cfg: &TrainConfig) -> Self {
        let mut decay_mask = vec![false; params.len()];
        for e in params.layout().entries() {
            if e.shape.len() >= 2 {
                decay_mask[e.range()].fill(true);
            }
        }
        Self {
            kind: cfg.optimizer,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            decay_mask,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let decay = 1.0 - lr * self.weight_decay;
        let p = params.values_mut();
        for i in 0..p.len() {
            let g = grad.values()[i];
            if self.decay_mask[i] {
                p[i] *= decay;
            }
            match self.kind {
                OptimizerKind::Sgd => p[i] -= lr * g,
                OptimizerKind::AdamW => {
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Rescales `grad` in place to norm at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grad: &mut ParamVector, max_norm: f64) -> f64 {
    let norm = grad.norm();
    if max_norm > 0.0 && norm > max_norm {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub train_loss: Vec<(usize, f64)>,
    pub holdout_loss: Vec<(usize, f64)>,
}

impl LossCurves {
    pub fn initial_holdout(&self) -> Option<f64> {
        self.holdout_loss.first().map(|p| p.1)
    }

    pub fn final_holdout(&self) -> Option<f64> {
        self.holdout_loss.last().map(|p| p.1)
    }

    /// Trailing moving average of the training loss over `window` steps.
    pub fn smoothed_train(&self, window: usize) -> Vec<(usize, f64)> {
        let w = window.max(1);
        let vals: Vec<f64> = self.train_loss.iter().map(|p| p.1).collect();
        self.train_loss
            .iter()
            .enumerate()
            .map(|(i, &(step, _))| {
                let lo = (i + 1).saturating_sub(w);
                let slice = &vals[lo..=i];
                (step, slice.iter().sum::<f64>() / slice.len() as f64)
            })
            .collect()
    }

    /// CSV with columns `step,train_loss,holdout_loss` (empty cell when absent).
    pub fn to_csv(&self) -> String {
        let mut steps: Vec<usize> = self
            .train_loss
            .iter()
            .chain(&self.holdout_loss)
            .map(|p| p.0)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        let find = |v: &[(usize, f64)], s: usize| {
            v.iter()
                .find(|p| p.0 == s)
                .map(|p| format!("{:.17e}", p.1))
                .unwrap_or_default()
        };
        let mut out = String::from("step,train_loss,holdout_loss\n");
        for s in steps {
            out.push_str(&format!("{s},{},{}\n", find(&self.train_loss, s), find(&self.holdout_loss, s)));
        }
        out
    }
}

/// Fine-tunes every parameter of `student` on `traces`, tracking held-out loss.
pub fn finetune(
    student: &TransformerModel,
    traces: &[MaskedSequence],
    holdout: &[MaskedSequence],
    cfg: &TrainConfig,
) -> Result<(TransformerModel, LossCurves)> {
    cfg.validate()?;
    if traces.is_empty() {
        return Err(Error::invalid("no training traces"));
    }
    let mut model = student.clone();
    let total = cfg.total_steps(traces.len());
    let schedule = CosineSchedule::new(cfg.learning_rate, cfg.warmup_fraction, total);
    let mut opt = Optimizer::new(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optimizer_seed);
    let mut curves = LossCurves::default();
    if !holdout.is_empty() {
        curves.holdout_loss.push((0, model.mean_nll(holdout)?));
    }

    let mut order: Vec<usize> = (0..traces.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<MaskedSequence> = chunk.iter().map(|&i| traces[i].clone()).collect();
            let (loss, mut grad) = model.accumulate_loss_grad(&batch).map_err(|e| Error::TrainingFailure {
                step,
                detail: e.to_string(),
            })?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::TrainingFailure {
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            clip_grad_norm(&mut grad, cfg.grad_clip_norm);
            opt.step(&mut model.params, &grad, schedule.lr(step));
            curves.train_loss.push((step, loss));
            if !holdout.is_empty() && (step % cfg.eval_interval_steps == 0 || step == total) {
                let h = model.mean_nll(holdout).map_err(|e| Error::TrainingFailure {
                    step,
                    detail: e.to_string(),
                })?;
                curves.holdout_loss.push((step, h));
            }
        }
    }
    Ok((model, curves))
}

/// `∇_θ log p(token | prefix; θ)`.
pub fn token_score(model: &TransformerModel, prefix: &[TokenId], token: TokenId) -> Result<ParamVector> {
    if prefix.is_empty() {
        return Err(Error::invalid("empty prefix"));
    }
    if token >= model.config.vocab_size {
        return Err(Error::invalid(format!("token id {token} out of range")));
    }
    let mut g = Graph::new(&model.params);
    let logits = model.build_logits(&mut g, prefix)?;
    let logp = g.log_softmax(logits);
    let shape = g.value(logp).shape().to_vec();
    let mut seed = Tensor::zeros(&shape);
    seed.data_mut()[(shape[0] - 1) * shape[1] + token] = 1.0;
    g.backward_with(logp, seed)
}

/// One gradient step of size `eta` on `−log p(token | prefix)` and the change
/// it causes in the held-out loss: `(θ⁺, ℓ(θ⁺) − ℓ(θ))`.
pub fn single_step_oracle(
    proxy: &TransformerModel,
    holdout: &[MaskedSequence],
    prefix: &[TokenId],
    token: TokenId,
    eta: f64,
) -> Result<(ParamVector, f64)> {
    if !(eta > 0.0) {
        return Err(Error::invalid("step size must be positive"));
    }
    let score = token_score(proxy, prefix, token)?;
    let mut stepped = proxy.clone();
    stepped.params.axpy(eta, &score)?;
    let before = proxy.mean_nll(holdout)?;
    let after = stepped.mean_nll(holdout)?;
    Ok((stepped.params, after - before))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(5e-4, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(10) - 5e-4).abs() < 1e-18);
        assert!((s.lr(5) - 2.5e-4).abs() < 1e-18);
        assert_eq!(s.lr(11), 5e-4);
        assert!(s.lr(100) > 0.0 && s.lr(100) < 2e-7);
        assert!((s.lr(56) - 2.5e-4).abs() < 1e-12);
        for step in 11..100 {
            assert!(s.lr(step + 1) <= s.lr(step));
        }
        let flat = CosineSchedule::new(1.0, 0.0, 4);
        assert_eq!(flat.lr(1), 1.0);
        assert!((flat.lr(4) - 0.5 * (1.0 + (0.75 * std::f64::consts::PI).cos())).abs() < 1e-15);
    }

    #[test]
    fn clip_scales_down_only() {
        let mut l = crate::numerics::Layout::new();
        l.push("w", &[2]).unwrap();
        let mut g = ParamVector::from_values(l.clone(), vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
        let mut small = ParamVector::from_values(l, vec![0.3, 0.4]).unwrap();
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small.values(), &[0.3, 0.4]);
    }

    #[test]
    fn adamw_first_step_matches_hand_computation() {
        let mut l = crate::numerics::Layout::new();
        l.push("w", &[1, 2]).unwrap();
        l.push("b", &[2]).unwrap();
        let cfg = TrainConfig::default();
        let mut p = ParamVector::from_values(l.clone(), vec![1.0, -2.0, 0.5, 0.5]).unwrap();
        let g = ParamVector::from_values(l, vec![0.2, -0.4, 1.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(&p, &cfg);
        let lr = 1e-2;
        opt.step(&mut p, &g, lr);
        // First bias-corrected Adam step is lr·g/(|g| + eps); matrices also decay.
        let expect = |x: f64, gi: f64, decay: bool| {
            let x = if decay { x * (1.0 - lr * 0.1) } else { x };
            x - lr * gi / (gi.abs() + 1e-8)
        };
        let want = [expect(1.0, 0.2, true), expect(-2.0, -0.4, true), expect(0.5, 1.0, false), 0.5];
        for (a, b) in p.values().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_fraction: 0.6, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_curve_csv() {
        let c = LossCurves {
            train_loss: vec![(1, 2.0), (2, 1.5)],
            holdout_loss: vec![(0, 3.0), (2, 2.5)],
        };
        let csv = c.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,train_loss,holdout_loss");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,,"));
        let smooth = c.smoothed_train(2);
        assert_eq!(smooth[1], (2, 1.75));
    }
}
