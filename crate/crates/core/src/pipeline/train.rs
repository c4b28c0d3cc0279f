//! Gradient steps and the epoch loop.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HeroModel;
use crate::autodiff::{Graph, ParamStore};
use crate::config::{OptimizerKind, TrainConfig};
use crate::scalar::Real;
use crate::tensor::{Result, TensorError};
use crate::world::Episode;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter update rule with whatever state it keeps between steps.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl Optimizer {
    pub fn new<R: Real>(kind: OptimizerKind, store: &ParamStore<R>) -> Self {
        let zeros: Vec<Vec<f64>> = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect(),
        };
        Self {
            kind,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    /// Applies the accumulated gradients of `store` with learning rate `lr`.
    pub fn apply<R: Real>(&mut self, store: &mut ParamStore<R>, lr: f64) {
        self.steps += 1;
        let ids: Vec<_> = store.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let (value, grad) = store.value_and_grad_mut(id);
                    for (v, &g) in value.iter_mut().zip(grad) {
                        *v -= R::lit(lr) * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.steps);
                let c2 = 1.0 - BETA2.powi(self.steps);
                for id in ids {
                    let (value, grad) = store.value_and_grad_mut(id);
                    let (m, s) = (&mut self.first[id.index()], &mut self.second[id.index()]);
                    for k in 0..value.len() {
                        let g = grad[k].to_f64_lossy();
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                        s[k] = BETA2 * s[k] + (1.0 - BETA2) * g * g;
                        let step = lr * (m[k] / c1) / ((s[k] / c2).sqrt() + ADAM_EPS);
                        value[k] -= R::lit(step);
                    }
                }
            }
        }
    }
}

/// Loss values of one step, recorded before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub det: f64,
    pub retr: f64,
}

/// One forward/backward pass on `episode` with `negative` as the contrastive
/// partner, followed by an update at rate `lr`.
pub fn train_step<R: Real>(
    model: &mut HeroModel<R>,
    episode: &Episode<R>,
    negative: &Episode<R>,
    cfg: &TrainConfig,
    optimizer: &mut Optimizer,
    step: usize,
    lr: f64,
) -> Result<StepStats> {
    model.store.zero_grad();
    let mut g = Graph::new();
    let parts = model.net.loss(&mut g, &model.store, episode, negative, cfg)?;
    let read = |v| g.value(v).item().to_f64_lossy();
    let (loss, det, retr) = (read(parts.total), read(parts.det), read(parts.retr));
    if !loss.is_finite() {
        return Err(TensorError::NonFiniteLoss {
            step,
            detail: format!("detection {det}, retrieval {retr}, query {:?}", episode.meta.words),
        });
    }
    g.backward(parts.total, &mut model.store)?;
    if let Some(max_norm) = cfg.grad_clip {
        let norm = model.store.grad_norm().to_f64_lossy();
        if norm > max_norm {
            model.store.scale_grads(R::lit(max_norm / norm));
        }
    }
    optimizer.apply(&mut model.store, lr);
    Ok(StepStats {
        step,
        epoch: 0,
        lr,
        loss,
        det,
        retr,
    })
}

/// Trains on `pool` for the configured epochs (or step cap).
///
/// Each epoch visits the pool in a fresh shuffled order; the negative of each
/// step is another pool episode drawn uniformly. `on_step` sees every step's
/// statistics and the updated model and may stop training by returning an error.
pub fn train<R: Real>(
    model: &mut HeroModel<R>,
    pool: &[Episode<R>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepStats, &HeroModel<R>) -> Result<()>,
) -> Result<Vec<StepStats>> {
    cfg.validate()?;
    if pool.len() < 2 {
        return Err(TensorError::invalid("train", "the pool needs at least two episodes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut optimizer = Optimizer::new(cfg.optimizer, &model.store);
    let total = cfg.total_steps();
    let mut history = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at_epoch(epoch);
        info!("epoch {epoch}: learning rate {lr:e}");
        for &idx in &order {
            if history.len() >= total {
                break 'epochs;
            }
            let mut neg = rng.random_range(0..pool.len() - 1);
            if neg >= idx {
                neg += 1;
            }
            let mut stats = train_step(model, &pool[idx], &pool[neg], cfg, &mut optimizer, history.len(), lr)?;
            stats.epoch = epoch;
            debug!("step {} loss {:.6} det {:.6} retr {:.6}", stats.step, stats.loss, stats.det, stats.retr);
            on_step(&stats, model)?;
            history.push(stats);
        }
    }
    Ok(history)
}
