//! Lookahead-wrapped rectified Adam and the bag-at-a-time training loop.
//!
//! The RAdam step follows the rectification recurrences exactly:
//! moments update as in Adam, and the variance-adaptive step is applied
//! only once the rectification term rho_t exceeds 4; earlier steps use
//! the bias-corrected momentum alone. Decoupled weight decay multiplies
//! parameters by (1 - lr*wd) before the update and skips biases,
//! layer-norm affine terms and latent arrays. Lookahead keeps a slow copy
//! of every parameter and interpolates toward the fast weights every k
//! steps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::BagRecord;
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::loss::{sd_loss_graph, LossBreakdown, LossWeights};
use crate::metrics;
use crate::model::DqModel;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(CoreError::Parameter(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Parameter(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(CoreError::Parameter(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.lookahead_k == 0 {
            return Err(CoreError::Parameter("lookahead k must be >= 1".into()));
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return Err(CoreError::Parameter(format!(
                "lookahead alpha must lie in (0, 1], got {}",
                self.lookahead_alpha
            )));
        }
        Ok(())
    }
}

/// Per-parameter accumulators plus the lookahead slow weights.
pub struct OptimState<F: Scalar> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    slow: Vec<Vec<F>>,
    t: u64,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &crate::layers::ParamSet<F>) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![F::ZERO; p.value.numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| vec![F::ZERO; p.value.numel()])
            .collect();
        let slow = params
            .iter()
            .map(|(_, p)| p.value.data().to_vec())
            .collect();
        OptimState { m, v, slow, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One RAdam update over every parameter. `grads` is parallel to the
/// parameter set; a missing gradient is treated as zero.
pub fn radam_step<F: Scalar>(
    params: &mut crate::layers::ParamSet<F>,
    grads: &[Option<Vec<F>>],
    state: &mut OptimState<F>,
    config: &OptimConfig,
) -> Result<()> {
    config.validate()?;
    if grads.len() != params.len() {
        return Err(CoreError::Dimension(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.t += 1;
    let t = state.t;

    // Scalar bookkeeping in f64 regardless of the training precision.
    let beta1_t = libm::pow(config.beta1, t as f64);
    let beta2_t = libm::pow(config.beta2, t as f64);
    let rho_inf = 2.0 / (1.0 - config.beta2) - 1.0;
    let rho_t = rho_inf - 2.0 * (t as f64) * beta2_t / (1.0 - beta2_t);
    let rectified = rho_t > 4.0;
    let rect = if rectified {
        libm::sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
        )
    } else {
        0.0
    };

    let clip_scale = match config.grad_clip {
        Some(max_norm) => {
            let mut sq = 0.0f64;
            for g in grads.iter().flatten() {
                for &v in g {
                    sq += v.to_f64() * v.to_f64();
                }
            }
            let norm = libm::sqrt(sq);
            if norm > max_norm {
                max_norm / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    let lr = F::from_f64(config.lr);
    let b1 = F::from_f64(config.beta1);
    let b2 = F::from_f64(config.beta2);
    let one_m_b1 = F::ONE - b1;
    let one_m_b2 = F::ONE - b2;
    let inv_bias1 = F::from_f64(1.0 / (1.0 - beta1_t));
    let inv_sqrt_bias2 = F::from_f64(1.0 / libm::sqrt(1.0 - beta2_t));
    let eps = F::from_f64(config.eps);
    let rect_f = F::from_f64(rect);
    let decay_mul = F::from_f64(1.0 - config.lr * config.weight_decay);
    let clip = F::from_f64(clip_scale);

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let zero_grad;
        let g: &[F] = match &grads[slot] {
            Some(g) => g,
            None => {
                zero_grad = vec![F::ZERO; params.get(id).numel()];
                &zero_grad
            }
        };
        {
            let def = params.def(id);
            for &gv in g {
                if !gv.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "gradient of '{}' at step {t}",
                        def.name
                    )));
                }
            }
        }
        let apply_decay = params.def(id).decay && config.weight_decay > 0.0;
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let theta = params.get_mut(id).data_mut();
        for i in 0..theta.len() {
            let gv = g[i] * clip;
            if apply_decay {
                theta[i] *= decay_mul;
            }
            m[i] = b1 * m[i] + one_m_b1 * gv;
            v[i] = b2 * v[i] + one_m_b2 * gv * gv;
            let m_hat = m[i] * inv_bias1;
            if rectified {
                let v_hat = v[i].sqrt() * inv_sqrt_bias2;
                theta[i] -= lr * rect_f * m_hat / (v_hat + eps);
            } else {
                theta[i] -= lr * m_hat;
            }
        }
    }
    Ok(())
}

/// Every k-th step: slow += alpha * (fast - slow), then fast = slow.
pub fn lookahead_sync<F: Scalar>(
    params: &mut crate::layers::ParamSet<F>,
    state: &mut OptimState<F>,
    config: &OptimConfig,
) {
    if state.t == 0 || state.t % config.lookahead_k != 0 {
        return;
    }
    let alpha = F::from_f64(config.lookahead_alpha);
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (slot, id) in ids.into_iter().enumerate() {
        let slow = &mut state.slow[slot];
        let fast = params.get_mut(id).data_mut();
        for i in 0..fast.len() {
            let updated = slow[i] + alpha * (fast[i] - slow[i]);
            slow[i] = updated;
            fast[i] = updated;
        }
    }
}

// ── Training loop ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub seed: u64,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    /// Stop after this many epochs without validation AUC improvement.
    pub patience: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            seed: 7,
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            patience: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord<F: Scalar> {
    pub step: u64,
    pub epoch: u32,
    pub breakdown: LossBreakdown<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_loss: f64,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog<F: Scalar> {
    pub steps: Vec<StepRecord<F>>,
    pub epochs: Vec<EpochRecord>,
}

impl<F: Scalar> Default for TrainLog<F> {
    fn default() -> Self {
        TrainLog {
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }
}

/// Hooks for streaming logs and checkpoints out of the loop. `on_epoch`
/// fires after validation with `is_best` marking a new best validation
/// AUC.
pub trait TrainObserver<F: Scalar> {
    fn on_step(&mut self, _record: &StepRecord<F>) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &DqModel<F>, _is_best: bool) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing; the returned `TrainLog` still carries
/// everything.
pub struct NoopObserver;

impl<F: Scalar> TrainObserver<F> for NoopObserver {}

/// Train in place: one bag per step, shuffled bag order per epoch,
/// forward / loss / backward / RAdam / Lookahead.
pub fn train<F: Scalar>(
    model: &mut DqModel<F>,
    train_bags: &[BagRecord<F>],
    val_bags: &[BagRecord<F>],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainLog<F>> {
    if train_bags.is_empty() {
        return Err(CoreError::EmptyInput("training set is empty"));
    }
    config.optim.validate()?;
    config.loss.validate()?;

    let mut log = TrainLog::default();
    let mut state = OptimState::new(&model.params);
    let mut rng = Rng::new(config.seed);
    let variant = model.config.variant;
    let mut best_val = f64::NEG_INFINITY;
    let mut stale_epochs = 0u32;
    let mut step = 0u64;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for &idx in &order {
            let bag = &train_bags[idx];
            let mut g = Graph::new();
            let bind = model.params.bind(&mut g, true)?;
            let out = model.forward(&mut g, &bind, &bag.embeddings)?;
            let loss = sd_loss_graph(&mut g, &out, bag.label, &config.loss, variant)?;
            let breakdown = loss.breakdown(&g);
            if !breakdown.total.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "loss at step {} (epoch {epoch}, bag '{}')",
                    step + 1,
                    bag.id
                )));
            }
            g.backward(loss.total)?;
            let grads: Vec<Option<Vec<F>>> = bind
                .ids()
                .iter()
                .map(|&id| g.grad(id).map(|s| s.to_vec()))
                .collect();
            drop(g);
            radam_step(&mut model.params, &grads, &mut state, &config.optim)?;
            lookahead_sync(&mut model.params, &mut state, &config.optim);

            step += 1;
            loss_sum += breakdown.total.to_f64();
            let record = StepRecord {
                step,
                epoch,
                breakdown,
            };
            observer.on_step(&record)?;
            log.steps.push(record);
        }

        let (val_auc, val_accuracy) = if val_bags.is_empty() {
            (None, None)
        } else {
            let report = metrics::evaluate(model, val_bags)?;
            (Some(report.auc), Some(report.accuracy))
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / order.len() as f64,
            val_auc,
            val_accuracy,
        };
        let is_best = match val_auc {
            Some(auc) if auc > best_val => {
                best_val = auc;
                stale_epochs = 0;
                true
            }
            Some(_) => {
                stale_epochs += 1;
                false
            }
            None => false,
        };
        observer.on_epoch(&record, model, is_best)?;
        log.epochs.push(record);

        if let Some(patience) = config.patience {
            if val_auc.is_some() && stale_epochs >= patience {
                break;
            }
        }
    }
    Ok(log)
}
