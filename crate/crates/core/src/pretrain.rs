//! Supervised backbone training on labelled data, used to produce the
//! frozen networks that branches are attached to.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::layer::Mode;
use crate::model::backbone_predict;
use crate::optim::{apply_bn_updates, Sgd};
use crate::params::ParameterStore;
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    /// Cosine-anneal the learning rate to zero over the run.
    #[serde(default)]
    pub cosine: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            cosine: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }

    pub(crate) fn lr_at(&self, epoch: usize) -> f32 {
        if !self.cosine || self.epochs == 0 {
            return self.learning_rate;
        }
        let t = epoch as f32 / self.epochs as f32;
        0.5 * self.learning_rate * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Running accuracy on the training batches, in train mode.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: ParameterStore,
    pub metrics: Vec<PretrainEpoch>,
}

/// Initializes from `config.seed` and trains.
pub fn pretrain(graph: &NetworkGraph, data: &Dataset, config: &PretrainConfig) -> Result<PretrainOutcome> {
    let params = graph.init_params(config.seed)?;
    pretrain_from(graph, params, data, config)
}

pub fn pretrain_from(
    graph: &NetworkGraph,
    mut params: ParameterStore,
    data: &Dataset,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let labels = data
        .labels()
        .ok_or_else(|| Error::invalid("backbone pre-training needs labelled data"))?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if data.sample_shape != graph.input_shape {
        return Err(Error::shape("training images", format!("{:?}", graph.input_shape), &data.sample_shape));
    }
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?.with_weight_decay(config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let last_good = params.clone();
        opt.learning_rate = config.lr_at(epoch).max(f32::MIN_POSITIVE);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(config.batch_size) {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.batch(idx));
            let probs = graph.forward(&mut tape, x, &params, Mode::Train)?;
            let ce = tape.cross_entropy(probs, &batch_labels)?;
            let loss = tape.mean(ce);
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: lv,
                    last_good: Some(Box::new(last_good)),
                });
            }
            loss_sum += lv * idx.len() as f64;
            let k = graph.num_classes;
            correct += tape
                .value(probs)
                .data()
                .chunks(k)
                .zip(&batch_labels)
                .filter(|(row, y)| argmax(row) == **y)
                .count();
            params.zero_grad();
            tape.backward(loss, &mut params)?;
            match opt.step(&mut params) {
                Err(Error::NonFiniteGradient { name }) => {
                    log::error!("non-finite gradient for `{name}` in epoch {epoch}");
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                        last_good: Some(Box::new(last_good)),
                    });
                }
                other => other?,
            }
            apply_bn_updates(&mut params, &tape.take_bn_updates())?;
        }
        let m = PretrainEpoch {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        log::info!(
            "pretrain epoch {epoch}: loss {:.4} train accuracy {:.4}",
            m.mean_loss,
            m.train_accuracy
        );
        metrics.push(m);
    }
    params.zero_grad();
    Ok(PretrainOutcome { params, metrics })
}

/// Backbone predictions (argmax, ties to the lowest class) in inference mode.
pub fn predict(graph: &NetworkGraph, params: &ParameterStore, data: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for idx in all.chunks(batch_size.max(1)) {
        let probs = backbone_predict(graph, params, &data.batch(idx))?;
        out.extend(probs.data().chunks(graph.num_classes).map(argmax));
    }
    Ok(out)
}

/// Fraction of samples whose backbone prediction matches the true label.
pub fn accuracy(graph: &NetworkGraph, params: &ParameterStore, data: &Dataset) -> Result<f64> {
    let labels = data.labels().ok_or_else(|| Error::invalid("accuracy needs labelled data"))?;
    let pred = predict(graph, params, data, 128)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / data.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobConfig};
    use crate::graph::{build_backbone, Architecture};

    fn tiny() -> (NetworkGraph, Dataset) {
        let mut cfg = BlobConfig::new(64, 2, 3);
        cfg.image_size = 8;
        let g = build_backbone(&Architecture::PlainCnnSmall, 2, &[3, 8, 8]).unwrap();
        (g, synthetic_blobs(&cfg).unwrap())
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (g, d) = tiny();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = pretrain(&g, &d, &cfg).unwrap();
        assert!(out.params.bit_identical(&g.init_params(cfg.seed).unwrap()));
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn same_seed_same_params() {
        let (g, d) = tiny();
        let cfg = PretrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let a = pretrain(&g, &d, &cfg).unwrap();
        let b = pretrain(&g, &d, &cfg).unwrap();
        assert!(a.params.bit_identical(&b.params));
    }

    #[test]
    fn huge_learning_rate_diverges_with_report() {
        let (g, d) = tiny();
        let cfg = PretrainConfig {
            epochs: 5,
            learning_rate: 1e30,
            cosine: false,
            ..Default::default()
        };
        match pretrain(&g, &d, &cfg) {
            Err(Error::Diverged { last_good, .. }) => assert!(last_good.is_some()),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn unlabelled_rejected() {
        let (g, d) = tiny();
        assert!(pretrain(&g, &d.without_labels(), &PretrainConfig::default()).is_err());
    }
}
