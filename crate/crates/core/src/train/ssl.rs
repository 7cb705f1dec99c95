//! Half-cycle reconstruction pretraining of the extractor and fusion layers.

use rand::seq::SliceRandom;

use super::model::Model;
use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{adam_step, uniform_init, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::preprocess::NormalizedCycle;
use crate::rng::rng_for;
use crate::signature::SignatureNet;

const DECODER_WEIGHT: &str = "ssl.decoder.weight";
const DECODER_BIAS: &str = "ssl.decoder.bias";

/// Dense decoder from pooled half-cycle features to the three second halves.
pub fn init_decoder(model: &Model, seed: u64) -> ParamStore {
    let cfg = model.config();
    let half = cfg.signature.n_cyc / 2;
    let inputs = cfg.signature.d_fus * cfg.ssl_segments;
    let mut rng = rng_for(seed, "ssl.decoder");
    let mut p = ParamStore::new(seed);
    p.insert(DECODER_WEIGHT, uniform_init(&mut rng, &[3 * half, inputs], inputs, 3 * half));
    p.insert(DECODER_BIAS, Tensor::zeros(&[3 * half]));
    p
}

/// Predicted second halves `[3·N/2]` (current, voltage, power factor).
pub fn predict_second_half(g: &mut Graph, net: &SignatureNet, segments: usize, cycle: &NormalizedCycle) -> Result<Var> {
    let n = cycle.len();
    if n % 2 != 0 {
        return Err(Error::invalid(format!("cycle length {n} is odd; halves must be equal")));
    }
    let half = n / 2;
    let feats = net.extract_sequences(
        g,
        &cycle.current[..half],
        &cycle.voltage[..half],
        &cycle.power_factor[..half],
    )?;
    let fused = net.fuse(g, feats)?;
    let pooled = g.segment_mean(fused, segments)?;
    let d = g.shape(pooled)[0];
    let z = g.reshape(pooled, &[d * segments, 1])?;
    let w = g.param(DECODER_WEIGHT)?;
    let b = g.param(DECODER_BIAS)?;
    let y = g.matmul(w, z)?;
    let y = g.reshape(y, &[3 * half])?;
    g.add_row_bias(y, b)
}

/// Sum over the three channels of the mean squared error on the second half.
pub fn ssl_loss_from_prediction(g: &mut Graph, prediction: Var, cycle: &NormalizedCycle) -> Result<Var> {
    let n = cycle.len();
    if n % 2 != 0 {
        return Err(Error::invalid(format!("cycle length {n} is odd; halves must be equal")));
    }
    let half = n / 2;
    let truth: Vec<f64> = cycle
        .channels()
        .iter()
        .flat_map(|c| c[half..].iter().copied())
        .collect();
    if g.shape(prediction) != [3 * half] {
        return Err(Error::shape("ssl_loss", g.shape(prediction), &[3 * half]));
    }
    let t = g.constant(Tensor::vector(truth));
    let d = g.sub(prediction, t)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / half as f64))
}

pub fn ssl_loss(g: &mut Graph, model: &Model, cycle: &NormalizedCycle) -> Result<Var> {
    let pred = predict_second_half(g, model.net(), model.config().ssl_segments, cycle)?;
    ssl_loss_from_prediction(g, pred, cycle)
}

/// Mean reconstruction loss over `cycles` with the given front end and decoder.
pub fn mean_ssl_loss(model: &Model, store: &ParamStore, cycles: &[NormalizedCycle]) -> Result<f64> {
    let mut total = 0.0;
    for c in cycles {
        let mut g = Graph::new(store);
        let pred = predict_second_half(&mut g, model.net(), model.config().ssl_segments, c)?;
        let l = ssl_loss_from_prediction(&mut g, pred, c)?;
        total += g.value(l).item();
    }
    Ok(total / cycles.len() as f64)
}

/// Trains extractor, fusion and a throwaway decoder on unlabeled cycles.
/// Returns the pretrained front end (Θ₀) and per-epoch mean losses; the
/// model's front-end parameters are updated in place, the classifier is not touched.
pub fn pretrain(model: &mut Model, cycles: &[NormalizedCycle], cfg: &TrainConfig) -> Result<(ParamStore, Vec<EpochRecord>)> {
    if cycles.is_empty() {
        return Err(Error::invalid("pretraining needs at least one unlabeled cycle"));
    }
    cfg.validate()?;
    let mut store = model.frontend_params();
    store.overwrite_from(&init_decoder(model, cfg.seed))?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut rng = rng_for(cfg.seed, "ssl.shuffle");
    let mut order: Vec<usize> = (0..cycles.len()).collect();
    let mut log = Vec::with_capacity(cfg.ssl_epochs);
    let segments = model.config().ssl_segments;
    for epoch in 0..cfg.ssl_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = store.zeros_like();
            for &i in batch {
                let mut g = Graph::new(&store);
                let pred = predict_second_half(&mut g, model.net(), segments, &cycles[i])?;
                let loss = ssl_loss_from_prediction(&mut g, pred, &cycles[i])?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("ssl loss at epoch {epoch}, cycle {i}")));
                }
                epoch_loss += v;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                for (name, t) in g.backward(scaled)?.iter() {
                    grads.get_mut(name).expect("same store").add_assign(t);
                }
            }
            adam_step(&mut store, &grads, &adam, &mut state)?;
        }
        log.push(EpochRecord {
            epoch,
            loss: epoch_loss / cycles.len() as f64,
        });
    }
    let frontend = {
        let mut f = model.frontend_params();
        for name in f.names().map(str::to_string).collect::<Vec<_>>() {
            f.insert(name.clone(), store.require(&name)?.clone());
        }
        f
    };
    model.params.overwrite_from(&frontend)?;
    Ok((frontend, log))
}
