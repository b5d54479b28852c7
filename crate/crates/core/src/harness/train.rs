use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{augment, prepare, shuffled, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::nnops::{blend_running_stats, BatchStats, Mode, DEFAULT_MOMENTUM};
use crate::res2net::{Graph, NetworkSpec, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and step decay.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between divisions of the learning rate by 10.
    pub lr_step: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random flips and 4-pixel pad-and-crop.
    pub augment: bool,
    /// Stop once eval-mode accuracy on the training set reaches this.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_step: 30,
            epochs: 90,
            batch_size: 64,
            seed: 42,
            augment: false,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    /// `lr0 · 10^(−⌊epoch / lr_step⌋)` for a zero-based epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 10f64.powi(-((epoch / self.lr_step.max(1)) as i32))
    }

    fn validate(&self) -> Result<()> {
        let positive = self.lr0 > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0;
        if !positive || self.lr_step == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "invalid training configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Accuracy of the training passes themselves.
    pub accuracy: f64,
    pub lr: f64,
    /// Eval-mode training-set accuracy, when a target is set.
    pub eval_accuracy: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>4}  loss {:.5}  acc {:.4}  lr {:.5}",
            self.epoch, self.loss, self.accuracy, self.lr
        )?;
        if let Some(a) = self.eval_accuracy {
            write!(f, "  eval-acc {a:.4}")?;
        }
        Ok(())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_dataset(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.classes != spec.classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, network head has {}",
            data.classes, spec.classes
        )));
    }
    if data.images.batch() != data.len() || data.images.channels() != spec.stem.in_channels {
        return Err(Error::shape(format!(
            "images {:?} for {} labels",
            data.images.shape(),
            data.len()
        )));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l >= data.classes) {
        return Err(Error::shape(format!("label {l} out of range")));
    }
    Ok(())
}

struct Step {
    loss: f64,
    correct: usize,
    grads: Vec<(String, Tensor<f32>)>,
    stats: Vec<(String, BatchStats<f32>)>,
}

fn step(
    spec: &NetworkSpec,
    params: &ParamStore<f32>,
    x: Tensor<f32>,
    labels: &[usize],
) -> Result<Step> {
    let mut g = Graph::new(params, Mode::Train);
    let xv = g.input(x);
    let logits = spec.forward(&mut g, xv)?;
    let loss = g.tape.softmax_cross_entropy(logits, labels)?;
    let k = spec.classes;
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = g.tape.backward(loss)?;
    let mut named: Vec<(String, Tensor<f32>)> = g
        .param_vars()
        .iter()
        .map(|(n, &v)| (n.clone(), grads.wrt(v)))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let stats = g
        .bn_outputs()
        .iter()
        .filter_map(|(p, y)| g.tape.batch_stats(*y).map(|s| (p.clone(), s.clone())))
        .collect();
    Ok(Step {
        loss: g.value(loss).data()[0] as f64,
        correct,
        grads: named,
        stats,
    })
}

/// Trains in place and returns one log entry per epoch run.
///
/// Stores input standardization statistics under `data.mean` / `data.std`
/// on the first epoch unless already present. Weight decay touches
/// convolution and fully-connected weights only. With zero epochs the
/// parameters are left untouched.
pub fn train(
    spec: &NetworkSpec,
    params: &mut ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    check_dataset(spec, data)?;
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if Standardizer::from_params(params).is_none() {
        Standardizer::fit(&data.images).store(params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: HashMap<String, Vec<f32>> = HashMap::new();
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let order = shuffled(n, &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let mut x = prepare(params, &data.images.gather_samples(batch));
            if cfg.augment {
                x = augment(&x, 4, &mut rng);
            }
            let out = step(spec, params, x, &labels)?;
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
            for (prefix, stats) in &out.stats {
                let mut mean = params.get(&format!("{prefix}.running_mean"))?.clone();
                let mut var = params.get(&format!("{prefix}.running_var"))?.clone();
                blend_running_stats(mean.data_mut(), var.data_mut(), stats, DEFAULT_MOMENTUM);
                params.insert(format!("{prefix}.running_mean"), mean);
                params.insert(format!("{prefix}.running_var"), var);
            }
            sgd_update(params, &out.grads, &mut velocity, lr, cfg);
        }
        let eval_accuracy = match cfg.target_accuracy {
            Some(_) => Some(accuracy(spec, params, data)?),
            None => None,
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
            eval_accuracy,
        });
        if let (Some(t), Some(a)) = (cfg.target_accuracy, eval_accuracy) {
            if a >= t {
                break;
            }
        }
    }
    Ok(log)
}

/// `v ← m·v + (g + wd·θ)`, `θ ← θ − lr·v` over every trainable tensor;
/// tensors without a gradient are treated as having a zero gradient.
pub fn sgd_update(
    params: &mut ParamStore<f32>,
    grads: &[(String, Tensor<f32>)],
    velocity: &mut HashMap<String, Vec<f32>>,
    lr: f64,
    cfg: &TrainConfig,
) {
    let by_name: HashMap<&str, &Tensor<f32>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let (m, lr) = (cfg.momentum as f32, lr as f32);
    for (name, theta) in params.iter_mut() {
        let kind = ParamKind::of(name);
        if !kind.trainable() {
            continue;
        }
        let wd = if kind.decays() {
            cfg.weight_decay as f32
        } else {
            0.0
        };
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; theta.len()]);
        let grad = by_name.get(name).map(|g| g.data());
        for (i, t) in theta.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i]);
            v[i] = m * v[i] + (g + wd * *t);
            *t -= lr * v[i];
        }
    }
}

/// Eval-mode logits `(N, classes, 1, 1)` for raw `[0, 1]` images.
pub fn predict(
    spec: &NetworkSpec,
    params: &ParamStore<f32>,
    images: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    const CHUNK: usize = 64;
    let n = images.batch();
    let mut out = Vec::with_capacity(n * spec.classes);
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let x = prepare(params, &images.gather_samples(&idx));
        let mut g = Graph::new(params, Mode::Eval);
        let xv = g.input(x);
        let y = spec.forward(&mut g, xv)?;
        out.extend_from_slice(g.value(y).data());
    }
    Tensor::new([n, spec.classes, 1, 1], out)
}

fn accuracy(spec: &NetworkSpec, params: &ParamStore<f32>, data: &Dataset) -> Result<f64> {
    let logits = predict(spec, params, &data.images)?;
    let hits = logits
        .data()
        .chunks(spec.classes)
        .zip(&data.labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub top1_error: f64,
    pub top5_error: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "samples {}  top-1 error {:.4}  top-5 error {:.4}",
            self.samples, self.top1_error, self.top5_error
        )
    }
}

/// Whether `label` is among the `k` best entries of `row`, where a class
/// outranks another on a larger logit or, on a tie, a lower index.
pub fn in_top_k(row: &[f32], label: usize, k: usize) -> bool {
    let target = row[label];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    ahead < k
}

/// Top-1 and top-5 error rates from logits.
pub fn score_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<EvalReport> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = logits.channels() * logits.spatial();
    if logits.batch() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.batch(),
            labels.len()
        )));
    }
    let (mut miss1, mut miss5) = (0, 0);
    for (row, &l) in logits.data().chunks(k).zip(labels) {
        miss1 += !in_top_k(row, l, 1) as usize;
        miss5 += !in_top_k(row, l, 5) as usize;
    }
    let n = labels.len() as f64;
    Ok(EvalReport {
        samples: labels.len(),
        top1_error: miss1 as f64 / n,
        top5_error: miss5 as f64 / n,
    })
}

pub fn evaluate(
    spec: &NetworkSpec,
    params: &ParamStore<f32>,
    data: &Dataset,
) -> Result<EvalReport> {
    check_dataset(spec, data)?;
    score_logits(&predict(spec, params, &data.images)?, &data.labels)
}
