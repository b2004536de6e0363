use log::warn;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::batcher::RebalancedBatcher;
use super::mlp::MlpModel;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::types::VisitedSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-example loss weights, aligned with the dataset rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 128,
            learning_rate: AdamConfig::default().learning_rate,
            weights: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if let Some(w) = &self.weights {
            if w.len() != n_rows {
                return Err(invalid(format!("{} weights for {} rows", w.len(), n_rows)));
            }
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(invalid("weights must be positive and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Train `model` in place with Adam over class-rebalanced batches.
pub fn train(
    model: &mut MlpModel,
    data: &Dataset,
    config: &TrainingConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    config.validate(data.len())?;
    if data.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: data.dim(),
        });
    }
    let batcher = RebalancedBatcher::new(data.labels(), config.batch_size)?;
    let mut adam = AdamState::new(
        model.param_count(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut report = TrainReport::default();
    let mut labels = Vec::with_capacity(config.batch_size);
    let mut weights = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        let batches = batcher.epoch(rng);
        let mut total = 0.0;
        for batch in &batches {
            let x = data.x().select(Axis(0), batch);
            labels.clear();
            labels.extend(batch.iter().map(|&i| data.labels()[i]));
            let w = config.weights.as_ref().map(|all| {
                weights.clear();
                weights.extend(batch.iter().map(|&i| all[i]));
                weights.as_slice()
            });
            let (loss, grads) = model.loss_and_gradients(x.view(), &labels, w)?;
            adam.step(model.params_mut(), &grads);
            total += loss;
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    report.steps = adam.steps();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FineTuneOutcome {
    Trained(TrainReport),
    /// The visited set lacked one of the two classes; the model is unchanged.
    Skipped,
}

/// Continue training a pre-trained model on the visited set for exactly
/// `config.epochs` epochs. Skips (leaving the model untouched) when the
/// visited set does not yet contain both failures and successes.
pub fn fine_tune(
    model: &mut MlpModel,
    visited: &VisitedSet,
    config: &TrainingConfig,
    rng: &mut Rng,
) -> Result<FineTuneOutcome> {
    if !visited.has_both_classes() {
        warn!(
            "fine-tune skipped: visited set of {} records has {} failures",
            visited.len(),
            visited.failures()
        );
        return Ok(FineTuneOutcome::Skipped);
    }
    let data = Dataset::from_visited(visited)?;
    train(model, &data, config, rng).map(FineTuneOutcome::Trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;
    use crate::spm::init_model;
    use crate::types::{Outcome, PredictionModel, TestState, VisitedRecord};
    use ndarray::Array2;
    use rand::Rng as _;

    fn separable(n: usize, rng: &mut Rng) -> Dataset {
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let y = x.rows().into_iter().map(|r| r[0] + 0.5 * r[1] > 0.2).collect();
        Dataset::new(x, y).unwrap()
    }

    #[test]
    fn learns_linearly_separable_data() {
        let mut rng = make_rng(11);
        let data = separable(200, &mut rng);
        let mut m = init_model(2, &[16], &mut rng).unwrap();
        let cfg = TrainingConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-2,
            weights: None,
        };
        let report = train(&mut m, &data, &cfg, &mut rng).unwrap();
        assert_eq!(report.epoch_losses.len(), 100);
        let pred = m.predict_rows(data.x()).unwrap();
        let correct = pred
            .iter()
            .zip(data.labels())
            .filter(|(p, &y)| (**p > 0.5) == y)
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "accuracy {}", correct);
        assert!(report.epoch_losses[99] < report.epoch_losses[0]);
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut rng = make_rng(0);
        let data = separable(20, &mut rng);
        let mut m = init_model(2, &[4], &mut rng).unwrap();
        let cfg = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        assert!(train(&mut m, &data, &cfg, &mut rng).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let x = Array2::zeros((5, 2));
        let data = Dataset::new(x, vec![false; 5]).unwrap();
        let mut m = init_model(2, &[4], &mut make_rng(0)).unwrap();
        assert!(matches!(
            train(&mut m, &data, &TrainingConfig::default(), &mut make_rng(0)),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = make_rng(5);
            let data = separable(100, &mut rng);
            let mut m = init_model(2, &[8, 8], &mut rng).unwrap();
            let cfg = TrainingConfig {
                epochs: 3,
                batch_size: 16,
                ..TrainingConfig::default()
            };
            train(&mut m, &data, &cfg, &mut rng).unwrap();
            m
        };
        let a = run();
        let b = run();
        assert!(a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    fn visited_from(data: &Dataset) -> VisitedSet {
        let mut v = VisitedSet::new();
        for i in 0..data.len() {
            v.push(VisitedRecord {
                state: data.state(i),
                outcome: Outcome {
                    failed: data.labels()[i],
                },
                sampled_critical: false,
                round_index: 0,
            })
            .unwrap();
        }
        v
    }

    #[test]
    fn fine_tune_step_count_follows_batcher() {
        let mut rng = make_rng(8);
        let x = Array2::from_shape_fn((5000, 2), |_| rng.random_range(0.0..1.0));
        let y: Vec<bool> = x.rows().into_iter().map(|r| r[0] < 0.1).collect();
        let data = Dataset::new(x, y).unwrap();
        let visited = visited_from(&data);
        let n_major = data.len() - data.positives();
        let mut m = init_model(2, &[4], &mut rng).unwrap();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 64,
            ..TrainingConfig::default()
        };
        let FineTuneOutcome::Trained(r) = fine_tune(&mut m, &visited, &cfg, &mut rng).unwrap() else {
            panic!("expected training");
        };
        assert_eq!(r.steps as usize, 2 * (2 * n_major).div_ceil(64));
    }

    #[test]
    fn fine_tune_skips_degenerate_sets() {
        let mut m = init_model(2, &[4], &mut make_rng(1)).unwrap();
        let before = m.clone();
        let cfg = TrainingConfig::default();
        let out = fine_tune(&mut m, &VisitedSet::new(), &cfg, &mut make_rng(2)).unwrap();
        assert_eq!(out, FineTuneOutcome::Skipped);
        let mut only_neg = VisitedSet::new();
        only_neg
            .push(VisitedRecord {
                state: TestState::new(vec![0.1, 0.1]).unwrap(),
                outcome: Outcome::SUCCESS,
                sampled_critical: false,
                round_index: 0,
            })
            .unwrap();
        let out = fine_tune(&mut m, &only_neg, &cfg, &mut make_rng(2)).unwrap();
        assert_eq!(out, FineTuneOutcome::Skipped);
        assert_eq!(m, before);
        assert_eq!(m.predict(&TestState::new(vec![0.1, 0.1]).unwrap()), before.predict(&TestState::new(vec![0.1, 0.1]).unwrap()));
    }
}
