use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, Layer, Network};
use crate::data_io::{shuffled_batches, IdxDataset};
use crate::error::{Error, Result};
use crate::neuron::Firing;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" | "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            other => Err(Error::Input(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero, stepped per batch.
    #[default]
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Input(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            timesteps: 4,
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input(
                "timesteps, epochs and batch size must all be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Input(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Mean firing rate of each spiking layer over the epoch.
    pub spike_rates: Vec<f64>,
    /// Absent in reports meant for reproducibility comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub parameters: usize,
    pub epochs: Vec<EpochRecord>,
}

/// First record of a line-delimited run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: TrainConfig,
    pub parameters: usize,
}

impl RunReport {
    pub fn header(&self) -> RunHeader {
        RunHeader {
            config: self.config.clone(),
            parameters: self.parameters,
        }
    }

    /// The header followed by one JSON object per epoch, one per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header()).expect("serializable");
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    /// The same report without wall-clock fields.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.epochs {
            e.wall_time_s = None;
        }
        out
    }
}

enum Optimizer {
    Sgd { momentum: f64, velocity: Vec<Vec<f64>> },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    fn new(kind: OptimizerKind, net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.parameters().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                momentum: 0.9,
                velocity: zeros,
            },
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    fn apply(&mut self, net: &mut Network, grads: &super::Gradients, lr: f64) {
        let params = net.parameters_mut();
        match self {
            Optimizer::Sgd { momentum, velocity } => {
                for ((p, g), vel) in params.into_iter().zip(&grads.tensors).zip(velocity) {
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel) {
                        *v = *momentum * *v + g as f64;
                        *w = (*w as f64 - lr * *v) as f32;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((p, g), m), v) in params.into_iter().zip(&grads.tensors).zip(m).zip(v) {
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        let g = g as f64;
                        *m = *beta1 * *m + (1.0 - *beta1) * g;
                        *v = *beta2 * *v + (1.0 - *beta2) * g * g;
                        let update = lr * (*m / c1) / ((*v / c2).sqrt() + *eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
    }
}

/// Trains a copy of `net` with surrogate-gradient BPTT. The result depends
/// only on the starting parameters, the data and `cfg`.
pub fn train(
    net: &Network,
    train_set: &IdxDataset,
    test_set: Option<&IdxDataset>,
    cfg: &TrainConfig,
) -> Result<(Network, RunReport)> {
    train_with(net, train_set, test_set, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    net: &Network,
    train_set: &IdxDataset,
    test_set: Option<&IdxDataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Network, RunReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    check_dataset(net, train_set)?;
    if let Some(t) = test_set {
        check_dataset(net, t)?;
    }
    let mut net = net.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, &net);
    let mut records = Vec::with_capacity(cfg.epochs);
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let neurons = net.layers().iter().filter(|l| matches!(l, Layer::Neuron(_))).count();
        let mut spikes = vec![0.0f64; neurons];
        let mut slots = vec![0.0f64; neurons];
        for (b, batch) in shuffled_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .iter()
            .enumerate()
        {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| train_set.image(i)).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
            let result = net.batch_loss_and_grad(&inputs, &labels, cfg.timesteps, Firing::Heaviside)?;
            if !result.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: result.loss,
                });
            }
            loss_sum += result.loss * batch.len() as f64;
            correct += result.correct;
            for i in 0..neurons {
                spikes[i] += result.spike_counts[i];
                slots[i] += result.spike_totals[i];
            }
            let lr = cfg.schedule.rate(cfg.learning_rate, epoch * per_epoch + b, total_steps);
            optimizer.apply(&mut net, &result.gradients, lr);
        }
        let test_accuracy = test_set
            .map(|t| evaluate(&net, t, cfg.timesteps))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
            spike_rates: spikes
                .iter()
                .zip(&slots)
                .map(|(&s, &n)| if n > 0.0 { s / n } else { 0.0 })
                .collect(),
            wall_time_s: Some(start.elapsed().as_secs_f64()),
        };
        on_epoch(&record);
        records.push(record);
    }
    let report = RunReport {
        config: cfg.clone(),
        parameters: net.parameter_count(),
        epochs: records,
    };
    Ok((net, report))
}

fn check_dataset(net: &Network, ds: &IdxDataset) -> Result<()> {
    let per: usize = ds.image_shape().iter().product();
    if per != net.input_shape().iter().product::<usize>() {
        return Err(Error::dim("dataset", &ds.image_shape(), net.input_shape()));
    }
    let classes = net.num_classes();
    if let Some(&bad) = ds.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Logits for every sample, in dataset order.
pub fn predict(net: &Network, ds: &IdxDataset, timesteps: usize) -> Result<Vec<Vec<f32>>> {
    let per: usize = ds.image_shape().iter().product();
    if per != net.input_shape().iter().product::<usize>() {
        return Err(Error::dim("dataset", &ds.image_shape(), net.input_shape()));
    }
    if timesteps == 0 {
        return Err(Error::Input("timesteps must be at least 1".into()));
    }
    let scales = net.expanded_coefficients()?;
    Ok((0..ds.len())
        .into_par_iter()
        .map(|i| net.logits_raw(ds.image(i), timesteps, &scales))
        .collect())
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(net: &Network, ds: &IdxDataset, timesteps: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let logits = predict(net, ds, timesteps)?;
    let correct = logits
        .iter()
        .enumerate()
        .filter(|(i, l)| argmax(l) == ds.label(*i))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}
