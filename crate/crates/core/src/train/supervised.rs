use rand::seq::SliceRandom;

use super::ewc::{ewc_penalty, TaskSnapshot};
use super::model::Model;
use super::{EpochRecord, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{adam_step, bce_value, AdamConfig, AdamState, Graph, ParamStore, Var};
use crate::preprocess::NormalizedCycle;
use crate::rng::rng_for;

pub const BCE_EPS: f64 = 1e-7;

/// Summed binary cross-entropy over `K` outputs, predictions clamped to `[ε, 1−ε]`.
pub fn bce_loss(y: &[u8], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::shape("bce_loss", &[y.len()], &[y_hat.len()]));
    }
    let t: Vec<f64> = y.iter().map(|&b| f64::from(b)).collect();
    Ok(bce_value(y_hat, &t, BCE_EPS))
}

fn check_labels(model: &Model, samples: &[Example]) -> Result<()> {
    check_label_width(model.num_classes(), samples)
}

pub(crate) fn check_label_width(k: usize, samples: &[Example]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no labeled samples"));
    }
    for (i, s) in samples.iter().enumerate() {
        if s.label.len() != k {
            return Err(Error::invalid(format!(
                "sample {i} has {} labels but the model has {k} outputs",
                s.label.len()
            )));
        }
    }
    Ok(())
}

/// Mean per-sample BCE of the model on `samples`.
pub fn mean_bce(model: &Model, samples: &[Example]) -> Result<f64> {
    check_labels(model, samples)?;
    let mut total = 0.0;
    for s in samples {
        total += bce_loss(&s.label, &model.probabilities(&s.cycle)?)?;
    }
    Ok(total / samples.len() as f64)
}

pub(crate) fn fit(
    model: &mut Model,
    samples: &[Example],
    cfg: &TrainConfig,
    penalty: Option<(&TaskSnapshot, f64)>,
) -> Result<Vec<EpochRecord>> {
    check_labels(model, samples)?;
    let arch = model.architecture().clone();
    fit_params(&mut model.params, samples, cfg, penalty, |g, c| arch.forward(g, c))
}

/// Minibatch Adam on the mean per-sample BCE, plus the EWC term when given.
/// `forward` maps a cycle to `K` probabilities using parameters from the graph.
pub fn fit_params<F>(
    params: &mut ParamStore,
    samples: &[Example],
    cfg: &TrainConfig,
    penalty: Option<(&TaskSnapshot, f64)>,
    forward: F,
) -> Result<Vec<EpochRecord>>
where
    F: Fn(&mut Graph, &NormalizedCycle) -> Result<Var>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("no labeled samples"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut rng = rng_for(cfg.seed, "train.shuffle");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let s = &samples[i];
                let mut g = Graph::new(params);
                let p = forward(&mut g, &s.cycle)?;
                let loss = g.bce(p, &s.target(), BCE_EPS)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}, sample {i}")));
                }
                epoch_loss += v;
                let scaled = g.scale(loss, inv);
                for (name, t) in g.backward(scaled)?.iter() {
                    grads.get_mut(name).expect("same store").add_assign(t);
                }
            }
            if let Some((snap, lambda)) = penalty {
                if lambda != 0.0 {
                    let mut g = Graph::new(params);
                    let pen = ewc_penalty(&mut g, snap, lambda)?;
                    for (name, t) in g.backward(pen)?.iter() {
                        grads.get_mut(name).expect("same store").add_assign(t);
                    }
                }
            }
            adam_step(params, &grads, &adam, &mut state)?;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / samples.len() as f64,
        });
    }
    Ok(log)
}

/// Fine-tunes the whole model; with `theta0` the front end starts from the
/// pretrained weights, otherwise from the model's own random initialisation.
pub fn train_supervised(
    model: &mut Model,
    samples: &[Example],
    cfg: &TrainConfig,
    theta0: Option<&ParamStore>,
    task_id: &str,
) -> Result<(TaskSnapshot, Vec<EpochRecord>)> {
    if let Some(t0) = theta0 {
        model.params.overwrite_from(t0)?;
    }
    let log = fit(model, samples, cfg, None)?;
    let fisher = fisher_diag(model, samples)?;
    Ok((
        TaskSnapshot {
            task_id: task_id.to_string(),
            theta_star: model.params.clone(),
            fisher,
        },
        log,
    ))
}

/// Empirical Fisher diagonal: mean over samples of the squared gradient of the log-likelihood.
pub fn fisher_diag(model: &Model, samples: &[Example]) -> Result<ParamStore> {
    check_labels(model, samples)?;
    let mut fisher = model.params.zeros_like();
    for s in samples {
        let mut g = Graph::new(&model.params);
        let p = model.forward(&mut g, &s.cycle)?;
        let loss = g.bce(p, &s.target(), BCE_EPS)?;
        let grads = g.backward(loss)?;
        for (name, t) in grads.iter() {
            let acc = fisher.get_mut(name).expect("same store");
            for (a, &d) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += d * d;
            }
        }
    }
    let inv = 1.0 / samples.len() as f64;
    for (_, t) in fisher.iter_mut() {
        for a in t.data_mut() {
            *a *= inv;
        }
    }
    Ok(fisher)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub on_off: Vec<u8>,
}

pub fn predict(model: &Model, cycle: &NormalizedCycle, threshold: f64) -> Result<Prediction> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let probabilities = model.probabilities(cycle)?;
    let on_off = probabilities.iter().map(|&p| u8::from(p >= threshold)).collect();
    Ok(Prediction { probabilities, on_off })
}
