use super::model::Model;
use super::supervised::{fisher_diag, fit};
use super::{EpochRecord, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor, Var};

/// Parameters after a task (Θ*) and their Fisher importance.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSnapshot {
    pub task_id: String,
    pub theta_star: ParamStore,
    pub fisher: ParamStore,
}

impl TaskSnapshot {
    pub fn validate(&self) -> Result<()> {
        self.theta_star.check_same_layout(&self.fisher)?;
        for (name, t) in self.fisher.iter() {
            if t.data().iter().any(|&f| !(f >= 0.0) || !f.is_finite()) {
                return Err(Error::invalid(format!("fisher entry {name} has negative or non-finite values")));
            }
        }
        Ok(())
    }
}

/// Current parameter restricted to the rows Θ* knows about. Rows appended to
/// axis 0 after the snapshot (new classes) carry no penalty.
fn aligned_param(g: &mut Graph, name: &str, old: &[usize]) -> Result<Var> {
    let v = g.param(name)?;
    let cur = g.shape(v).to_vec();
    if cur == old {
        return Ok(v);
    }
    if cur.len() == old.len() && cur[1..] == old[1..] && cur[0] > old[0] {
        return g.slice0(v, 0, old[0]);
    }
    Err(Error::shape("ewc_penalty", &cur, old))
}

/// `(λ/2)·Σ F·(Θ − Θ*)²` as a graph scalar.
pub fn ewc_penalty(g: &mut Graph, snap: &TaskSnapshot, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be ≥ 0, got {lambda}")));
    }
    snap.theta_star.check_same_layout(&snap.fisher)?;
    let mut terms = Vec::with_capacity(snap.theta_star.len());
    for (name, star) in snap.theta_star.iter() {
        let theta = aligned_param(g, name, star.shape())?;
        let star_v = g.constant(star.clone());
        let f = g.constant(snap.fisher.require(name)?.clone());
        let d = g.sub(theta, star_v)?;
        let d2 = g.square(d);
        let w = g.mul(f, d2)?;
        let s = g.sum(w);
        terms.push(s);
    }
    let total = match terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        _ => {
            let all = g.concat0(&terms)?;
            g.sum(all)
        }
    };
    Ok(g.scale(total, 0.5 * lambda))
}

/// `L_new + (λ/2)·Σ F·(Θ − Θ*)²`; with λ = 0 the new loss is returned unchanged.
pub fn ewc_total_loss(g: &mut Graph, new_loss: Var, snap: &TaskSnapshot, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(new_loss);
    }
    let p = ewc_penalty(g, snap, lambda)?;
    g.add(new_loss, p)
}

/// Elementwise max of two Fisher stores; a prior with fewer leading rows is zero-padded.
pub fn merge_fisher(prior: &ParamStore, fresh: &ParamStore) -> Result<ParamStore> {
    let mut out = fresh.clone();
    for (name, old) in prior.iter() {
        let cur = out
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("fisher entry {name} missing from the new store")))?;
        let (os, cs) = (old.shape(), cur.shape());
        let compatible = os == cs || (os.len() == cs.len() && os[1..] == cs[1..] && cs[0] > os[0]);
        if !compatible {
            return Err(Error::shape("merge_fisher", os, cs));
        }
        for (c, &o) in cur.data_mut().iter_mut().zip(old.data()) {
            *c = c.max(o);
        }
    }
    Ok(out)
}

/// Learns new data under the EWC penalty anchored at `snap`. The head is widened
/// when the labels carry more classes than the model.
pub fn continual_update(
    model: &mut Model,
    snap: &TaskSnapshot,
    new_samples: &[Example],
    cfg: &TrainConfig,
    task_id: &str,
) -> Result<(TaskSnapshot, Vec<EpochRecord>)> {
    cfg.validate()?;
    snap.validate()?;
    let k = new_samples
        .first()
        .map(|s| s.label.len())
        .ok_or_else(|| Error::invalid("no labeled samples"))?;
    model.widen_head(k, cfg.seed)?;
    let log = fit(model, new_samples, cfg, Some((snap, cfg.lambda_ewc)))?;
    let fresh = fisher_diag(model, new_samples)?;
    let fisher = merge_fisher(&snap.fisher, &fresh)?;
    Ok((
        TaskSnapshot {
            task_id: task_id.to_string(),
            theta_star: model.params.clone(),
            fisher,
        },
        log,
    ))
}
