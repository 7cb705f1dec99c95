//! Variational power decomposition and energy integration.
//!
//! A shared encoder maps a window of per-cycle total power to a latent
//! Gaussian; one decoder per appliance maps the latent back to that
//! appliance's power. Outputs are masked by the on/off state, so an appliance
//! that is off contributes exactly zero.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, uniform_init, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::rng::rng_for;

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerWindow {
    /// watts, one value per cycle
    pub p_total: Vec<f64>,
    pub on_off: Vec<u8>,
}

impl PowerWindow {
    pub fn new(p_total: Vec<f64>, on_off: Vec<u8>) -> Result<Self> {
        let w = Self { p_total, on_off };
        w.validate()?;
        Ok(w)
    }

    /// Measured power can dip slightly below zero from noise when little is
    /// running; such values are clipped to zero.
    pub fn from_measured(p_total: &[f64], on_off: Vec<u8>) -> Result<Self> {
        Self::new(p_total.iter().map(|&p| p.max(0.0)).collect(), on_off)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_total.is_empty() {
            return Err(Error::invalid("power window must hold at least one cycle"));
        }
        if let Some(i) = self.p_total.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(format!(
                "total power at cycle {i} is {} (must be finite and ≥ 0)",
                self.p_total[i]
            )));
        }
        if self.on_off.iter().any(|&b| b > 1) {
            return Err(Error::invalid("on/off mask entries must be 0 or 1"));
        }
        Ok(())
    }
}

/// One appliance running alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoloWindow {
    pub appliance: usize,
    pub power: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// cycles per window
    pub window: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            window: 50,
            d_z: 8,
            hidden: 64,
            epochs: 300,
            lr: 3e-3,
            batch_size: 8,
            kl_weight: 1e-3,
            seed: 7,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.d_z == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::invalid("window, d_z, hidden and batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::invalid("kl_weight must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub cfg: VaeConfig,
    pub num_appliances: usize,
    /// watts per internal unit
    pub scale: f64,
    pub store: ParamStore,
}

fn dense(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    let n = g.shape(w)[0];
    let y = g.matmul(w, x)?;
    let y = g.reshape(y, &[n])?;
    let y = g.add_row_bias(y, b)?;
    g.reshape(y, &[n, 1])
}

fn insert_dense(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str, n_in: usize, n_out: usize) {
    store.insert(format!("{prefix}.weight"), uniform_init(rng, &[n_out, n_in], n_in, n_out));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[n_out]));
}

impl VaeParams {
    pub fn init(cfg: VaeConfig, num_appliances: usize, scale: f64) -> Result<Self> {
        cfg.validate()?;
        if num_appliances == 0 {
            return Err(Error::invalid("need at least one appliance"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("power scale must be positive, got {scale}")));
        }
        let mut rng = rng_for(cfg.seed, "vae.init");
        let mut store = ParamStore::new(cfg.seed);
        insert_dense(&mut store, &mut rng, "vae.encoder.hidden", cfg.window, cfg.hidden);
        insert_dense(&mut store, &mut rng, "vae.encoder.mu", cfg.hidden, cfg.d_z);
        insert_dense(&mut store, &mut rng, "vae.encoder.logvar", cfg.hidden, cfg.d_z);
        for i in 0..num_appliances {
            insert_dense(&mut store, &mut rng, &format!("vae.decoder.{i}.hidden"), cfg.d_z, cfg.hidden);
            insert_dense(&mut store, &mut rng, &format!("vae.decoder.{i}.out"), cfg.hidden, cfg.window);
        }
        Ok(Self {
            cfg,
            num_appliances,
            scale,
            store,
        })
    }

    fn check_window(&self, len: usize) -> Result<()> {
        if len != self.cfg.window {
            return Err(Error::invalid(format!(
                "window holds {len} cycles but the model expects {}",
                self.cfg.window
            )));
        }
        Ok(())
    }

    /// `(μ, log σ²)`, each `[d_z×1]`, for a window in watts.
    fn encode(&self, g: &mut Graph, p_total: &[f64]) -> Result<(Var, Var)> {
        self.check_window(p_total.len())?;
        let x: Vec<f64> = p_total.iter().map(|p| p / self.scale).collect();
        let x = g.constant(Tensor::new(vec![x.len(), 1], x)?);
        let h = dense(g, x, "vae.encoder.hidden")?;
        let h = g.relu(h);
        let mu = dense(g, h, "vae.encoder.mu")?;
        let lv = dense(g, h, "vae.encoder.logvar")?;
        Ok((mu, lv))
    }

    /// Appliance `i`'s power window in internal units, `[M]`.
    fn decode(&self, g: &mut Graph, z: Var, i: usize) -> Result<Var> {
        let h = dense(g, z, &format!("vae.decoder.{i}.hidden"))?;
        let h = g.relu(h);
        let y = dense(g, h, &format!("vae.decoder.{i}.out"))?;
        let y = g.softplus(y);
        g.reshape(y, &[self.cfg.window])
    }
}

/// `KL(N(μ, σ²) ‖ N(0, 1)) = −½ Σ (1 + log σ² − μ² − σ²)`.
pub fn kl_divergence(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let one = g.constant(Tensor::full(g.shape(logvar), 1.0));
    let a = g.add(one, logvar)?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum(a);
    Ok(g.scale(s, -0.5))
}

/// Closed-form KL on plain values.
pub fn kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

enum Item<'a> {
    Solo(&'a SoloWindow),
    Mix(&'a PowerWindow),
}

fn mse_to(g: &mut Graph, pred: Var, target: &[f64], scale: f64) -> Result<Var> {
    let t = g.constant(Tensor::vector(target.iter().map(|v| v / scale).collect()));
    let d = g.sub(pred, t)?;
    let d = g.square(d);
    Ok(g.mean(d))
}

fn item_loss(vae: &VaeParams, g: &mut Graph, item: &Item, eps: &[f64]) -> Result<Var> {
    let input = match item {
        Item::Solo(s) => &s.power,
        Item::Mix(w) => &w.p_total,
    };
    let (mu, lv) = vae.encode(g, input)?;
    let half = g.scale(lv, 0.5);
    let sd = g.exp(half);
    let e = g.constant(Tensor::new(vec![eps.len(), 1], eps.to_vec())?);
    let noise = g.mul(sd, e)?;
    let z = g.add(mu, noise)?;
    let data = match item {
        Item::Solo(s) => {
            let p = vae.decode(g, z, s.appliance)?;
            mse_to(g, p, &s.power, vae.scale)?
        }
        Item::Mix(w) => {
            let mut parts = Vec::new();
            for (i, &m) in w.on_off.iter().enumerate() {
                if m == 1 {
                    parts.push(vae.decode(g, z, i)?);
                }
            }
            match parts.split_first() {
                None => {
                    // nothing on: the reconstruction is identically zero
                    let zero = g.constant(Tensor::zeros(&[vae.cfg.window]));
                    mse_to(g, zero, &w.p_total, vae.scale)?
                }
                Some((&first, rest)) => {
                    let mut sum = first;
                    for &p in rest {
                        sum = g.add(sum, p)?;
                    }
                    mse_to(g, sum, &w.p_total, vae.scale)?
                }
            }
        }
    };
    let kl = kl_divergence(g, mu, lv)?;
    let kl = g.scale(kl, vae.cfg.kl_weight);
    g.add(data, kl)
}

/// Trains on solo windows (per-appliance supervision) and mixed windows
/// (masked sum reconstruction). Returns the trained parameters and per-epoch mean loss.
pub fn vae_train(
    solo: &[SoloWindow],
    mixes: &[PowerWindow],
    num_appliances: usize,
    cfg: &VaeConfig,
) -> Result<(VaeParams, Vec<f64>)> {
    cfg.validate()?;
    let missing: Vec<usize> = (0..num_appliances)
        .filter(|&i| !solo.iter().any(|s| s.appliance == i))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("no solo window for appliance(s) {missing:?}")));
    }
    for s in solo {
        if s.appliance >= num_appliances {
            return Err(Error::invalid(format!("solo window for unknown appliance {}", s.appliance)));
        }
        PowerWindow::new(s.power.clone(), vec![])?;
    }
    for w in mixes {
        w.validate()?;
        if w.on_off.len() != num_appliances {
            return Err(Error::invalid(format!(
                "mix window has {} on/off entries for {num_appliances} appliances",
                w.on_off.len()
            )));
        }
    }
    let peak = solo
        .iter()
        .flat_map(|s| s.power.iter())
        .chain(mixes.iter().flat_map(|w| w.p_total.iter()))
        .fold(0.0f64, |a, &b| a.max(b));
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let mut vae = VaeParams::init(cfg.clone(), num_appliances, scale)?;
    let items: Vec<Item> = solo.iter().map(Item::Solo).chain(mixes.iter().map(Item::Mix)).collect();
    for item in &items {
        match item {
            Item::Solo(s) => vae.check_window(s.power.len())?,
            Item::Mix(w) => vae.check_window(w.p_total.len())?,
        }
    }

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new();
    let mut shuffle = rng_for(cfg.seed, "vae.shuffle");
    let mut noise = rng_for(cfg.seed, "vae.noise");
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = vae.store.zeros_like();
            for &i in batch {
                let eps: Vec<f64> = (0..cfg.d_z).map(|_| StandardNormal.sample(&mut noise)).collect();
                let mut g = Graph::new(&vae.store);
                let loss = item_loss(&vae, &mut g, &items[i], &eps)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("vae loss at epoch {epoch}, window {i}")));
                }
                total += v;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                for (name, t) in g.backward(scaled)?.iter() {
                    grads.get_mut(name).expect("same store").add_assign(t);
                }
            }
            adam_step(&mut vae.store, &grads, &adam, &mut state)?;
        }
        log.push(total / items.len() as f64);
    }
    Ok((vae, log))
}

/// MAP decomposition: decoders evaluated at `μ_z`, masked by the on/off state.
/// Returns one `[M]` power series (watts) per appliance.
pub fn decompose(vae: &VaeParams, window: &PowerWindow) -> Result<Vec<Vec<f64>>> {
    window.validate()?;
    if window.on_off.len() != vae.num_appliances {
        return Err(Error::invalid(format!(
            "on/off mask has {} entries but the model knows {} appliances",
            window.on_off.len(),
            vae.num_appliances
        )));
    }
    let mut g = Graph::new(&vae.store);
    let (mu, _) = vae.encode(&mut g, &window.p_total)?;
    let mut out = Vec::with_capacity(vae.num_appliances);
    for (i, &m) in window.on_off.iter().enumerate() {
        if m == 0 {
            out.push(vec![0.0; vae.cfg.window]);
        } else {
            let p = vae.decode(&mut g, mu, i)?;
            out.push(g.value(p).data().iter().map(|v| v * vae.scale).collect());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energy {
    pub joules: f64,
    pub watt_hours: f64,
}

/// Rectangle rule over per-cycle power.
pub fn energy(power: &[f64], cycle_duration: f64) -> Result<Energy> {
    if !(cycle_duration > 0.0 && cycle_duration.is_finite()) {
        return Err(Error::invalid(format!("cycle duration must be positive, got {cycle_duration}")));
    }
    if let Some(i) = power.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("power at cycle {i} is {} (must be ≥ 0)", power[i])));
    }
    let joules = power.iter().sum::<f64>() * cycle_duration;
    Ok(Energy {
        joules,
        watt_hours: joules / SECONDS_PER_HOUR,
    })
}
