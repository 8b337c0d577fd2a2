//! Mini-batch training with Adam and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphSat, Mode, ModelConfig, Params, Scaler};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::FlowGraph;
use crate::seed::derive_seed;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Share of training graphs held out for early stopping (stratified).
    pub validation_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 0.003,
            epochs: 100,
            patience: 10,
            validation_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Adam state for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    m: Params<F>,
    v: Params<F>,
    t: i32,
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: &ModelConfig, tc: &TrainConfig) -> Self {
        Adam {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            t: 0,
            lr: F::of(tc.learning_rate),
            beta1: F::of(tc.beta1),
            beta2: F::of(tc.beta2),
            eps: F::of(tc.epsilon),
        }
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>) {
        self.t += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            let iter = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice());
            for (((p, &g), m), v) in iter {
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Stratified holdout: roughly `fraction` of each class, at least one
/// sample left for training.
pub fn stratified_holdout(labels: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let k = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        held.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    (train, held)
}

struct GraphResult<F> {
    loss: f64,
    correct: bool,
    grads: Option<Params<F>>,
}

/// Index of the first maximum.
pub fn argmax<F: Real>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl<F: Real> GraphSat<F> {
    fn run_graph(&self, g: &FlowGraph, y: usize, seed: u64, mode: Mode, grad_scale: Option<F>) -> Result<GraphResult<F>> {
        let cache = match mode {
            Mode::Train => self.forward(g, mode, &mut ChaCha8Rng::seed_from_u64(seed))?,
            Mode::Infer => self.infer(g)?,
        };
        let loss = -cache.probs[y].as_f64().ln();
        let grads = grad_scale.map(|s| {
            let mut p = Params::zeros(&self.config);
            self.backward(&cache, y, s, &mut p);
            p
        });
        Ok(GraphResult {
            loss,
            correct: argmax(&cache.probs) == y,
            grads,
        })
    }

    /// Mean inference-mode loss and accuracy.
    pub fn evaluate_loss(&self, graphs: &[FlowGraph], labels: &[usize], idx: &[usize], exec: Exec) -> Result<(f64, f64)> {
        let results = exec.map(idx, |_, &i| self.run_graph(&graphs[i], labels[i], 0, Mode::Infer, None));
        let mut loss = 0.0;
        let mut correct = 0usize;
        for r in results {
            let r = r?;
            loss += r.loss;
            correct += r.correct as usize;
        }
        let n = idx.len().max(1) as f64;
        Ok((loss / n, correct as f64 / n))
    }
}

/// Train a model from scratch on `graphs` with class indices `labels`.
pub fn train<F: Real>(
    graphs: &[FlowGraph],
    labels: &[usize],
    model_config: ModelConfig,
    config: &TrainConfig,
) -> Result<(GraphSat<F>, TrainLog)> {
    if graphs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} graphs but {} labels",
            graphs.len(),
            labels.len()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Config("training data must contain at least 2 classes".into()));
    }
    if let Some(&c) = distinct.iter().find(|&&c| c >= model_config.num_classes) {
        return Err(Error::Contract(format!(
            "label {c} outside {} model classes",
            model_config.num_classes
        )));
    }
    if let Some(g) = graphs.iter().find(|g| g.dim != model_config.input_dim) {
        return Err(Error::Contract(format!(
            "graph dimension {} differs from model input {}",
            g.dim, model_config.input_dim
        )));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::Config("batch size and epoch count must be positive".into()));
    }

    let (train_idx, val_idx) = if config.validation_fraction > 0.0 {
        stratified_holdout(labels, config.validation_fraction, derive_seed(config.seed, &[1]))
    } else {
        ((0..graphs.len()).collect(), Vec::new())
    };

    let mut model = GraphSat::<F>::new(model_config, derive_seed(config.seed, &[0]))?;
    let fit_on: Vec<&FlowGraph> = train_idx.iter().map(|&i| &graphs[i]).collect();
    model.scaler = Scaler::fit(&fit_on, model_config.input_dim);

    let mut adam = Adam::new(&model_config, config);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Params<F>)> = None;
    let mut since_best = 0usize;
    let mut order = train_idx.clone();

    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, epoch as u64])));
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let scale = F::one() / F::of(batch.len() as f64);
            let results = config.exec.map(batch, |_, &i| {
                let seed = derive_seed(config.seed, &[3, epoch as u64, i as u64]);
                model.run_graph(&graphs[i], labels[i], seed, Mode::Train, Some(scale))
            });
            let mut grads = Params::zeros(&model_config);
            for r in results {
                let r = r?;
                if !r.loss.is_finite() {
                    return Err(Error::NonFinite(format!("non-finite loss at epoch {epoch}")));
                }
                epoch_loss += r.loss;
                epoch_correct += r.correct as usize;
                grads.add_assign(r.grads.as_ref().expect("gradients requested"));
            }
            adam.step(&mut model.params, &grads);
        }
        let n = order.len() as f64;
        let train_loss = epoch_loss / n;
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = model.evaluate_loss(graphs, labels, &val_idx, config.exec)?;
            (Some(l), Some(a))
        };
        log::debug!("epoch {epoch}: train loss {train_loss:.4}, val loss {val_loss:?}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            train_accuracy: epoch_correct as f64 / n,
            val_loss,
            val_accuracy,
        });

        let monitored = val_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::NonFinite(format!("non-finite validation loss at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(b, _)| monitored < *b) {
            best = Some((monitored, model.params.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..100).map(|i| i % 3).collect();
        let (tr, va) = stratified_holdout(&labels, 0.1, 5);
        assert_eq!(tr.len() + va.len(), 100);
        assert!(tr.iter().all(|i| !va.contains(i)));
        for c in 0..3 {
            let k = va.iter().filter(|&&i| labels[i] == c).count();
            assert!((3..=4).contains(&k));
        }
    }
}
