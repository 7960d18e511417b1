//! Training-loop properties: the RAdam+Lookahead scalar oracle,
//! determinism, the empty-run contract, and a separable-data smoke test.

use dqmil_core::data::{generate_synthetic, BagRecord, SyntheticConfig};
use dqmil_core::dme::SourceSpec;
use dqmil_core::layers::ParamSet;
use dqmil_core::loss::LossWeights;
use dqmil_core::model::{DqConfig, DqModel, Variant};
use dqmil_core::optim::{
    lookahead_sync, radam_step, train, NoopObserver, OptimConfig, OptimState, TrainConfig,
};
use dqmil_core::tensor::Tensor;

/// Straight-line scalar implementation of the optimizer recurrences,
/// written independently of the library code paths.
struct ScalarOracle {
    theta: f64,
    m: f64,
    v: f64,
    slow: f64,
    t: u64,
}

impl ScalarOracle {
    fn new(theta0: f64) -> Self {
        ScalarOracle {
            theta: theta0,
            m: 0.0,
            v: 0.0,
            slow: theta0,
            t: 0,
        }
    }

    fn step(&mut self, g: f64, cfg: &OptimConfig, decay: bool) {
        self.t += 1;
        let t = self.t as f64;
        if decay && cfg.weight_decay > 0.0 {
            self.theta -= cfg.lr * cfg.weight_decay * self.theta;
        }
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * g;
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * g * g;
        let m_hat = self.m / (1.0 - cfg.beta1.powf(t));
        let rho_inf = 2.0 / (1.0 - cfg.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * cfg.beta2.powf(t) / (1.0 - cfg.beta2.powf(t));
        if rho_t > 4.0 {
            let rect = (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                .sqrt();
            let v_hat = (self.v / (1.0 - cfg.beta2.powf(t))).sqrt();
            self.theta -= cfg.lr * rect * m_hat / (v_hat + cfg.eps);
        } else {
            self.theta -= cfg.lr * m_hat;
        }
        if self.t % cfg.lookahead_k == 0 {
            self.slow += cfg.lookahead_alpha * (self.theta - self.slow);
            self.theta = self.slow;
        }
    }
}

#[test]
fn ten_step_scalar_trajectory_matches_oracle() {
    let cfg = OptimConfig {
        lr: 2e-4,
        weight_decay: 1e-2,
        ..OptimConfig::default()
    };
    // Fixed, sign-varying gradient stream.
    let grads = [1.0, -0.5, 0.25, 2.0, -1.5, 0.75, -0.25, 1.25, -2.0, 0.5];

    let mut ps = ParamSet::<f64>::new();
    let id = {
        let id = ps.add("w", Tensor::scalar(0.9), true);
        id
    };
    let mut state = OptimState::new(&ps);
    let mut oracle = ScalarOracle::new(0.9);

    // rho_1 = 1 <= 4 at beta2 = 0.999: the first step must take the
    // momentum branch, -lr * g with wd applied first.
    radam_step(&mut ps, &[Some(vec![grads[0]])], &mut state, &cfg).unwrap();
    lookahead_sync(&mut ps, &mut state, &cfg);
    oracle.step(grads[0], &cfg, true);
    let after_decay = 0.9 * (1.0 - cfg.lr * cfg.weight_decay);
    let expect_first = after_decay - cfg.lr * grads[0];
    assert!((ps.get(id).data()[0] - expect_first).abs() < 1e-15);

    for &g in &grads[1..] {
        radam_step(&mut ps, &[Some(vec![g])], &mut state, &cfg).unwrap();
        lookahead_sync(&mut ps, &mut state, &cfg);
        oracle.step(g, &cfg, true);
        let got = ps.get(id).data()[0];
        assert!(
            (got - oracle.theta).abs() < 1e-12,
            "step {}: {got} vs oracle {}",
            state.step_count(),
            oracle.theta
        );
    }
    // The stream must have crossed into the rectified branch.
    assert!(state.step_count() == 10);
}

fn toy_model(seed: u64) -> DqModel<f32> {
    let config = DqConfig {
        latents: 4,
        latent_width: 16,
        d_k: 8,
        depth: 1,
        heads: 2,
        classes: 2,
        tau: dqmil_core::attention::default_temperature(8),
        blend: 0.5,
        variant: Variant::DqSd,
    };
    let specs = vec![SourceSpec::new("src", 8, 16).unwrap()];
    DqModel::new(config, &specs, None, seed).unwrap()
}

fn toy_dataset() -> Vec<BagRecord<f32>> {
    let cfg = SyntheticConfig {
        bags: 20,
        n_min: 10,
        n_max: 10,
        source_widths: vec![8],
        witness_rate: 0.3,
        separation: 3.0,
        noise: 1.0,
        classes: 2,
        seed: 5,
    };
    generate_synthetic(&cfg).unwrap()
}

#[test]
fn zero_epochs_changes_nothing() {
    let mut model = toy_model(1);
    let before: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|(_, p)| p.value.data().to_vec())
        .collect();
    let bags = toy_dataset();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &bags, &[], &cfg, &mut NoopObserver).unwrap();
    assert!(log.steps.is_empty());
    assert!(log.epochs.is_empty());
    let after: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|(_, p)| p.value.data().to_vec())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn training_is_bit_deterministic() {
    let bags = toy_dataset();
    let run = || {
        let mut model = toy_model(3);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        train(&mut model, &bags, &[], &cfg, &mut NoopObserver).unwrap();
        let flat: Vec<u32> = model
            .params
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()))
            .collect();
        flat
    };
    assert_eq!(run(), run());
}

#[test]
fn step_counter_is_epochs_times_bags() {
    let bags = toy_dataset();
    let mut model = toy_model(5);
    let cfg = TrainConfig {
        epochs: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let log = train(&mut model, &bags, &[], &cfg, &mut NoopObserver).unwrap();
    assert_eq!(log.steps.len(), 4 * bags.len());
    assert_eq!(log.steps.last().unwrap().step, (4 * bags.len()) as u64);
    assert_eq!(log.epochs.len(), 4);
}

#[test]
fn loss_breakdown_identity_holds_every_step() {
    let bags = toy_dataset();
    let mut model = toy_model(7);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let weights = cfg.loss;
    let log = train(&mut model, &bags, &[], &cfg, &mut NoopObserver).unwrap();
    let (alpha, lambda) =
        dqmil_core::loss::effective_weights(Variant::DqSd, &weights);
    for rec in &log.steps {
        let b = rec.breakdown;
        let recomposed = b.ce_sa as f64
            + alpha * b.ce_mil as f64
            + (1.0 - alpha) * b.kl as f64
            + lambda * b.hint as f64;
        assert!(
            (b.total as f64 - recomposed).abs() < 1e-6,
            "step {}: total {} vs parts {recomposed}",
            rec.step,
            b.total
        );
        assert!(b.total >= 0.0);
    }
}

#[test]
fn separable_toy_training_drives_loss_down() {
    // Regression bound: mean epoch loss after 50 epochs under 10% of the
    // first epoch's mean.
    let bags = toy_dataset();
    let mut model = toy_model(9);
    let cfg = TrainConfig {
        epochs: 50,
        seed: 4,
        optim: OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        },
        loss: LossWeights::default(),
        patience: None,
    };
    let log = train(&mut model, &bags, &[], &cfg, &mut NoopObserver).unwrap();
    let first = log.epochs.first().unwrap().mean_loss;
    let last = log.epochs.last().unwrap().mean_loss;
    assert!(
        last < 0.1 * first,
        "loss only moved from {first} to {last} in 50 epochs"
    );
}

#[test]
fn early_stopping_respects_patience() {
    let bags = toy_dataset();
    let (train_bags, val_bags) = bags.split_at(14);
    let mut model = toy_model(11);
    let cfg = TrainConfig {
        epochs: 40,
        seed: 6,
        optim: OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        },
        loss: LossWeights::default(),
        patience: Some(3),
    };
    let log = train(&mut model, train_bags, val_bags, &cfg, &mut NoopObserver).unwrap();
    assert!(log.epochs.len() <= 40);
    for rec in &log.epochs {
        assert!(rec.val_auc.is_some());
    }
}
