//! End-to-end training with AdamW.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::io::SplitData;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::VqaModel;
use crate::numerics::{Tape, Tensor2, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be finite and non-negative, got {v}")))
            }
        };
        finite_nonneg("learning_rate", self.learning_rate)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("train.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moments with decoupled weight decay. The decay step is scaled by
/// the learning rate, so `learning_rate = 0` leaves parameters untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    first: Vec<Tensor2>,
    second: Vec<Tensor2>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor2> = params.tensors().iter().map(|t| Tensor2::zeros(t.rows(), t.cols())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor2], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate;
        let shrink = 1.0 - lr * cfg.weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let update = (m[i] / bias1) / ((v[i] / bias2).sqrt() + cfg.epsilon);
                p[i] = p[i] * shrink - lr * update;
            }
        }
        Ok(())
    }
}

/// Token ids of one training item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedItem {
    pub volume: usize,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Items grouped by volume index, in volume order.
pub fn encode_items(data: &SplitData) -> Result<Vec<Vec<EncodedItem>>> {
    let vocab = Vocabulary::synthetic();
    let index = data.volume_index();
    let mut grouped = vec![Vec::new(); data.volumes.len()];
    for item in &data.items {
        let &volume = index
            .get(item.volume_id.as_str())
            .ok_or_else(|| Error::Data(format!("question refers to unknown volume '{}'", item.volume_id)))?;
        grouped[volume].push(EncodedItem {
            volume,
            question: vocab.encode(&item.question)?,
            answer: vocab.encode(&item.answer)?,
        });
    }
    Ok(grouped)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

pub fn train(model: &mut VqaModel, data: &SplitData, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_| {})
}

/// Trains on `data`, calling `on_epoch` after every epoch. Volumes are
/// shuffled each epoch and their questions are kept together so slice
/// encodings are shared within a batch.
pub fn train_with(
    model: &mut VqaModel,
    data: &SplitData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    let grouped = encode_items(data)?;
    if grouped.iter().all(Vec::is_empty) {
        return Err(Error::Data("training split has no questions".into()));
    }
    let slices: Vec<Vec<Tensor2>> = data
        .volumes
        .iter()
        .map(|v| (0..v.n_slices).map(|n| v.slice(n)).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(&model.params);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..grouped.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let items: Vec<&EncodedItem> = order.iter().flat_map(|&v| &grouped[v]).collect();
        let mut total = 0.0;
        let mut batches = 0;
        for (b, batch) in items.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(model, &slices, batch)?;
            let max_grad = grads.iter().map(Tensor2::max_abs).fold(0.0, f64::max);
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch} batch {b}: loss {loss}, max |grad| {max_grad}"
                )));
            }
            opt.step(&mut model.params, &grads, cfg)?;
            total += loss * batch.len() as f64;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: total / items.len() as f64,
            batches,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    report.steps = opt.steps();
    Ok(report)
}

/// Mean loss of a batch and its gradient for every parameter.
pub fn batch_gradients(
    model: &VqaModel,
    slices: &[Vec<Tensor2>],
    batch: &[&EncodedItem],
) -> Result<(f64, Vec<Tensor2>)> {
    let mut tape = Tape::new();
    let p = model.params.register(&mut tape);
    let mut encoded: HashMap<usize, Vec<Var>> = HashMap::new();
    let mut loss: Option<Var> = None;
    for item in batch {
        let e = match encoded.entry(item.volume) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(model.encode_slices(&mut tape, &p, &slices[item.volume])?),
        };
        let l = model.item_loss(&mut tape, &p, e, &item.question, &item.answer)?;
        loss = Some(match loss {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = loss.ok_or_else(|| Error::Input("empty batch".into()))?;
    let loss = tape.scale(loss, 1.0 / batch.len() as f64);
    let value = tape.value(loss).scalar();
    let mut grads = tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| grads.take(v)).collect();
    Ok((value, grads))
}
