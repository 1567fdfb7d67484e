use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::graph::Graph;
use super::layers::Model;
use crate::error::{Error, Result};
use crate::numerics::{Purpose, SeededRng, StreamId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v = mu*v + g; w -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[(Vec<f64>, Vec<f64>)]) {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()])).collect();
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((params, grad), vel) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            for (p, (g, v)) in [(params.0, (&grad.0, &mut vel.0)), (params.1, (&grad.1, &mut vel.1))] {
                for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halt {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Set when training stopped on a non-finite loss.
    pub halted: Option<Halt>,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Mini-batch SGD with cross-entropy loss.
///
/// Hardware layers compute their forward pass on the programmed crossbars
/// and are re-programmed after every optimizer step. Samples are reshuffled
/// each epoch from a stream keyed by the epoch number.
pub fn train(model: &mut Model, data: &Dataset, test: Option<&Dataset>, params: &TrainParams) -> Result<TrainLog> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::param("data", "training set is empty"));
    }
    if model.has_hardware() {
        model.update_weights()?;
    }
    let mut opt = Sgd::new(params.learning_rate, params.momentum);
    let mut log = TrainLog::default();
    for epoch in 0..params.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        SeededRng::new(params.seed, StreamId::new(Purpose::Data).cycle(epoch as u64)).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, idx) in order.chunks(params.batch_size).enumerate() {
            let (x, y) = data.batch(idx);
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let logits = model.forward(&mut g, xv)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                log.halted = Some(Halt { epoch, step, loss: lv });
                return Ok(log);
            }
            let out = g.value(logits);
            let k = out.shape()[1];
            correct += y
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(&out.data()[i * k..(i + 1) * k]) == l)
                .count();
            loss_sum += lv * idx.len() as f64;
            g.backward(loss)?;
            let grads = model.grads(&g)?;
            opt.step(model, &grads);
            if model.has_hardware() {
                model.update_weights()?;
            }
        }
        let test_acc = match test {
            Some(t) => Some(infer(model, t, params.batch_size)?.accuracy),
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
            test_acc,
        });
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub support: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassStats>,
    pub predictions: Vec<usize>,
}

/// Classifies a dataset with the model's current layer configuration.
pub fn infer(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<InferReport> {
    if batch_size == 0 {
        return Err(Error::param("batch_size", "must be >= 1"));
    }
    let mut predictions = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, _) = data.batch(chunk);
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let out = model.forward(&mut g, xv)?;
        let t = g.value(out);
        let k = t.shape()[1];
        predictions.extend(t.data().chunks(k).map(argmax));
    }
    let mut per_class: Vec<ClassStats> = (0..data.num_classes)
        .map(|class| ClassStats {
            class,
            support: 0,
            correct: 0,
            accuracy: 0.0,
        })
        .collect();
    for (&p, &l) in predictions.iter().zip(&data.labels) {
        per_class[l].support += 1;
        per_class[l].correct += usize::from(p == l);
    }
    for c in &mut per_class {
        c.accuracy = if c.support == 0 { 0.0 } else { c.correct as f64 / c.support as f64 };
    }
    let total: usize = per_class.iter().map(|c| c.correct).sum();
    Ok(InferReport {
        accuracy: if data.is_empty() { 0.0 } else { total as f64 / data.len() as f64 },
        per_class,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpe::EngineConfig;
    use crate::nn::data::synthetic_blobs;
    use crate::nn::layers::{Layer, MemLayerConfig};

    #[test]
    fn sgd_momentum_matches_hand_update() {
        let mut m = Model::mlp(&[1, 1], 0);
        let Layer::Linear(l) = &mut m.layers[0] else { unreachable!() };
        l.params_mut().0[0] = 1.0;
        let mut opt = Sgd::new(0.1, 0.9);
        let g = vec![(vec![2.0], vec![0.0])];
        opt.step(&mut m, &g);
        opt.step(&mut m, &g);
        let Layer::Linear(l) = &m.layers[0] else { unreachable!() };
        // v1 = 2, w1 = 0.8; v2 = 3.8, w2 = 0.42.
        assert!((l.weight().data()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn digital_mlp_learns_blobs() {
        let data = synthetic_blobs(300, 4, 3, 1).unwrap();
        let mut m = Model::mlp(&[4, 16, 3], 2);
        let p = TrainParams {
            epochs: 5,
            ..TrainParams::default()
        };
        let log = train(&mut m, &data, Some(&data), &p).unwrap();
        assert_eq!(log.epochs.len(), 5);
        assert!(log.epochs[4].loss < log.epochs[0].loss);
        assert!(log.epochs[4].test_acc.unwrap() > 0.9);
        let rep = infer(&mut m, &data, 64).unwrap();
        assert_eq!(rep.per_class.iter().map(|c| c.support).sum::<usize>(), 300);
        assert_eq!(Some(rep.accuracy), log.epochs[4].test_acc);
    }

    #[test]
    fn hardware_training_tracks_digital() {
        let data = synthetic_blobs(300, 4, 3, 1).unwrap();
        let p = TrainParams {
            epochs: 5,
            ..TrainParams::default()
        };
        let mut digital = Model::mlp(&[4, 16, 3], 2);
        let mut hw = digital.clone();
        hw.configure_all(&MemLayerConfig::hardware(EngineConfig::default())).unwrap();
        let d = train(&mut digital, &data, None, &p).unwrap();
        let h = train(&mut hw, &data, None, &p).unwrap();
        let (da, ha) = (d.epochs[4].train_acc, h.epochs[4].train_acc);
        assert!(ha > 0.85 && (da - ha).abs() < 0.1, "{da} vs {ha}");
    }

    #[test]
    fn separable_two_class_blobs_fit() {
        let data = synthetic_blobs(200, 2, 2, 11).unwrap();
        let mut m = Model::mlp(&[2, 2], 3);
        let p = TrainParams {
            epochs: 20,
            ..TrainParams::default()
        };
        let log = train(&mut m, &data, None, &p).unwrap();
        assert!(log.epochs[19].train_acc > 0.99, "{:?}", log.epochs[19]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_blobs(60, 3, 2, 5).unwrap();
        let run = || {
            let mut m = Model::mlp(&[3, 4, 2], 9);
            train(&mut m, &data, None, &TrainParams { epochs: 2, ..TrainParams::default() }).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diverging_loss_halts_gracefully() {
        let data = synthetic_blobs(40, 2, 2, 6).unwrap();
        let mut m = Model::mlp(&[2, 2], 1);
        for (w, _) in m.params_mut() {
            w.iter_mut().for_each(|x| *x = f64::INFINITY);
        }
        let log = train(&mut m, &data, None, &TrainParams::default()).unwrap();
        let h = log.halted.unwrap();
        assert_eq!((h.epoch, h.step), (0, 0));
        assert!(log.epochs.is_empty());
    }
}
