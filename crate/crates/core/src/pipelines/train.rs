//! The optimization loop shared by every stage, and its log.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, Model};
use crate::optim::{adam_step, cosine_lr, OptimizerConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{}", r.step, r.lr, r.loss);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,metric_name,value\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.metric, r.value);
        }
        s
    }

    /// Writes `train_steps.csv` and `train_epochs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("train_steps.csv", self.steps_csv()), ("train_epochs.csv", self.epochs_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.epochs.iter().filter(|r| r.metric == name).map(|r| r.value).collect()
    }

    pub(crate) fn epoch(&mut self, epoch: usize, metric: &str, value: f64) {
        self.epochs.push(EpochRecord { epoch, metric: metric.to_string(), value });
    }
}

/// Optimization hyperparameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    /// 0 means one pass over the data per epoch.
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub crop_size: usize,
    pub seed: u64,
}

impl TrainParams {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            n.div_ceil(self.batch_size)
        }
    }

    pub fn optimizer(&self, n: usize) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.lr,
            total_steps: (self.epochs * self.steps_per_epoch(n)) as u64,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// Item indices of every batch in `epoch`. A full pass shuffles once and
/// ends with a short batch; a fixed step count draws whole batches from
/// back-to-back shuffles.
pub(crate) fn epoch_batches(tp: &TrainParams, n: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = rng::indexed(tp.seed, "epoch", epoch as u64);
    let need = if tp.steps_per_epoch > 0 { tp.steps_per_epoch * tp.batch_size } else { n };
    let mut order = Vec::with_capacity(need + n);
    while order.len() < need {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        order.extend(perm);
    }
    order.truncate(need);
    order.chunks(tp.batch_size).map(<[usize]>::to_vec).collect()
}

/// Runs `tp.epochs` epochs of Adam under the cosine schedule.
///
/// `loss` builds the loss of one batch on a fresh graph; `end_epoch`
/// receives the epoch's mean loss. Returns the number of steps taken.
pub(crate) fn optimize(
    model: &mut Model,
    tp: &TrainParams,
    n: usize,
    log: &mut TrainLog,
    mut loss: impl FnMut(&Model, &mut Graph, &Bound, &[usize], u64) -> Result<Var>,
    mut end_epoch: impl FnMut(&Model, usize, f64, &mut TrainLog) -> Result<()>,
) -> Result<u64> {
    if n == 0 {
        return Err(Error::invalid("no training items"));
    }
    if tp.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let opt = tp.optimizer(n);
    opt.validate()?;
    let mut step = 0u64;
    for epoch in 0..tp.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(tp, n, epoch);
        for idx in &batches {
            let lr = cosine_lr(step, &opt);
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let l = loss(model, &mut g, &bound, idx, step).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("step {step}: {m}")),
                other => other,
            })?;
            let value = g.scalar(l);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss is {value} at step {step} (epoch {epoch}, lr {lr})")));
            }
            let mut grads = g.backward(l)?;
            model.params.zero_grad();
            for (name, var) in &bound {
                let p = model.params.get_mut(name).expect("bound from this model");
                if p.trainable {
                    p.grad = Some(grads.take(*var).unwrap_or_else(|| Tensor::zeros(p.value.shape())));
                }
            }
            adam_step(&mut model.params, lr, &opt)?;
            log.steps.push(StepRecord { step, lr, loss: value });
            sum += value;
            step += 1;
        }
        end_epoch(model, epoch, sum / batches.len() as f64, log)?;
    }
    Ok(step)
}
