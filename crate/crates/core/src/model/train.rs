use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::tensor::{Tape, Tensor, Var};

use super::backbone::ToyBackbone;
use super::data::Split;
use super::optim::{lr_at, Adam};
use super::sampler::PkSampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub p: usize,
    pub k: usize,
    pub loss: LossConfig,
    /// Seeds batch sampling.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            epochs: 60,
            lr: 4e-4,
            milestones: vec![30, 45],
            lr_factor: 0.1,
            p: 8,
            k: 4,
            loss: LossConfig::with_classes(classes),
            seed: 0,
        }
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_cls: f64,
    pub l_tri: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    /// Mean `l_total` over the steps of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Map arbitrary identity ids onto `0..K` in ascending id order.
pub fn class_labels(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut uniq: Vec<usize> = ids.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let labels = ids.iter().map(|i| uniq.binary_search(i).unwrap()).collect();
    (labels, uniq.len())
}

/// Train `model` on `split` with PK batches, Adam and step decay.
/// `on_step` sees every step's losses; `on_epoch` runs after each epoch with
/// its 0-based index.
pub fn train(
    model: &mut ToyBackbone,
    split: &Split,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog) -> Result<()>,
    on_epoch: &mut dyn FnMut(usize, &ToyBackbone) -> Result<()>,
) -> Result<TrainSummary> {
    let (labels, classes) = class_labels(&split.ids);
    if classes != model.cfg.classes || cfg.loss.classes != classes {
        return Err(Error::Invalid(format!(
            "training split has {classes} identities; model has {} classes, loss expects {}",
            model.cfg.classes, cfg.loss.classes
        )));
    }
    cfg.loss.validate()?;
    let sampler = PkSampler::new(&labels, cfg.p, cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(&sizes);
    let mut tape = Tape::new();
    let mut step = 0;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, epoch, &cfg.milestones, cfg.lr_factor);
        let mut sum = 0.0;
        let batches = sampler.epoch(&mut rng);
        for batch in &batches {
            tape.reset();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = tape.constant(split.batch(batch));
            let vars: Vec<Var> = model
                .named_params()
                .into_iter()
                .map(|(_, t)| tape.param(t.clone()))
                .collect();
            let bound = model.bind_from(&vars);
            let out = model.forward_train(&mut tape, x, &bound)?;
            let parts = total_loss(&mut tape, out.embeddings, out.logits, &y, &cfg.loss)?;
            tape.backward(parts.total)?;
            let log = StepLog {
                step,
                l_cls: tape.value(parts.cls).item(),
                l_tri: tape.value(parts.tri).item(),
                l_total: tape.value(parts.total).item(),
            };
            if !log.l_total.is_finite() {
                return Err(Error::Invalid(format!("non-finite loss at step {step}")));
            }
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(&sizes)
                .map(|(&v, _)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
                .collect();
            let stats = out.batch_stats(&tape);
            model.update_running_stats(&stats);
            opt.step(model.params_mut(), &grads, lr);
            on_step(&log)?;
            sum += log.l_total;
            step += 1;
        }
        epoch_loss.push(sum / batches.len().max(1) as f64);
        on_epoch(epoch, model)?;
    }
    Ok(TrainSummary { steps: step, epoch_loss })
}
