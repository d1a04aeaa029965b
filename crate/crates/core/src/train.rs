//! Loss bookkeeping and the shared minibatch training loop.

use crate::data::BatchIterator;
use crate::error::Result;
use crate::mlp::MlpParams;
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-term loss values for one step (or an epoch mean). Terms a stage does
/// not use are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub ce: f64,
    pub ita: Option<f64>,
    pub mse: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn ce_only(ce: f64) -> Self {
        LossReport {
            ce,
            ita: None,
            mse: None,
            total: ce,
        }
    }

    fn accumulate(&mut self, other: &LossReport) {
        self.ce += other.ce;
        self.ita = sum_opt(self.ita, other.ita);
        self.mse = sum_opt(self.mse, other.mse);
        self.total += other.total;
    }

    fn divide(&mut self, n: f64) {
        self.ce /= n;
        self.ita = self.ita.map(|v| v / n);
        self.mse = self.mse.map(|v| v / n);
        self.total /= n;
    }
}

fn sum_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

/// Something with an ordered list of trainable tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Hook run after every optimizer step.
    fn after_step(&mut self) {}
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        MlpParams::tensors(self)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        MlpParams::tensors_mut(self)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch batch permutations.
    pub seed: u64,
}

/// Mean losses for one epoch. Epoch 0 is the full-set loss before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub report: LossReport,
}

/// Loss builder: `(model, tape, param vars, row indices, step) -> (loss, report)`.
/// Step 0 is the pre-training evaluation; optimizer steps count from 1.
pub trait LossFn<M>: FnMut(&M, &mut Tape, &[Var], &[usize], u64) -> Result<(Var, LossReport)> {}
impl<M, F> LossFn<M> for F where F: FnMut(&M, &mut Tape, &[Var], &[usize], u64) -> Result<(Var, LossReport)> {}

/// Adam minibatch training over `n` rows with drop-last batches.
pub fn train_loop<M: ParamSet>(
    model: &mut M,
    n: usize,
    settings: &TrainSettings,
    mut loss_fn: impl LossFn<M>,
) -> Result<Vec<EpochLog>> {
    let all: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(settings.epochs + 1);
    {
        let mut tape = Tape::new();
        let vars = tape.params(0, model.tensors());
        let (_, report) = loss_fn(model, &mut tape, &vars, &all, 0)?;
        logs.push(EpochLog { epoch: 0, report });
    }
    let mut adam = AdamState::new(settings.adam, model.tensors());
    let mut step = 0u64;
    for epoch in 1..=settings.epochs {
        let mut mean = LossReport::default();
        let mut count = 0usize;
        for batch in BatchIterator::new(n, settings.batch_size, settings.seed, epoch as u64)? {
            step += 1;
            let mut tape = Tape::new();
            let vars = tape.params(0, model.tensors());
            let (loss, report) = loss_fn(model, &mut tape, &vars, &batch, step)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut model.tensors_mut(), &grads)?;
            model.after_step();
            mean.accumulate(&report);
            count += 1;
        }
        mean.divide(count as f64);
        logs.push(EpochLog {
            epoch,
            report: mean,
        });
    }
    Ok(logs)
}
