use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Graph, ParamStore, Tensor, Var};
use crate::preprocess::NormalizedCycle;
use crate::rng::rng_for;
use crate::signature::{SignatureConfig, SignatureNet, EXTRACTOR_PREFIX, FUSION_PREFIX};

pub const CLASSIFIER_PREFIX: &str = "classifier.";
const HEAD_WEIGHT: &str = "classifier.head.weight";
const HEAD_BIAS: &str = "classifier.head.bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub signature: SignatureConfig,
    /// output channels of the stride-2 conv2d stack
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    pub num_classes: usize,
    /// time segments pooled before the reconstruction decoder
    pub ssl_segments: usize,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            signature: SignatureConfig::default(),
            conv_channels: vec![8, 8, 8],
            hidden: 32,
            num_classes,
            ssl_segments: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.signature.validate()?;
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be ≥ 1"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) || self.hidden == 0 {
            return Err(Error::invalid("classifier widths must be ≥ 1"));
        }
        let half = self.signature.n_cyc / 2;
        if self.ssl_segments == 0 || half % self.ssl_segments != 0 {
            return Err(Error::invalid(format!(
                "ssl_segments ({}) must divide half a cycle ({half})",
                self.ssl_segments
            )));
        }
        Ok(())
    }

    /// Side length after the conv stack.
    fn conv_out_side(&self) -> usize {
        self.conv_channels
            .iter()
            .fold(self.signature.s, |side, _| (side + 2 - 3) / 2 + 1)
    }

    fn flat_features(&self) -> usize {
        let side = self.conv_out_side();
        self.conv_channels.last().copied().unwrap_or(1) * side * side
    }
}

/// Signature front end plus CNN classifier with `K` sigmoid outputs.
#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    pub params: ParamStore,
}

/// The parameter-free part of a model: layer layout and forward pass.
#[derive(Debug, Clone)]
pub struct Architecture {
    cfg: ModelConfig,
    net: SignatureNet,
}

impl Model {
    /// Random initialisation drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = SignatureNet::new(cfg.signature.clone())?;
        let mut params = ParamStore::new(seed);
        let mut rng = rng_for(seed, "model.frontend");
        net.init_params(&mut params, &mut rng);
        let mut rng = rng_for(seed, "model.classifier");
        init_classifier(&cfg, &mut params, &mut rng);
        Ok(Self {
            arch: Architecture { cfg, net },
            params,
        })
    }

    /// Rebuilds a model around stored parameters, checking their layout.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg.clone(), params.rng_seed())?;
        reference.params.check_same_layout(&params)?;
        Ok(Self {
            arch: reference.arch,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    pub fn net(&self) -> &SignatureNet {
        &self.arch.net
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.cfg.num_classes
    }

    /// Extractor and fusion parameters.
    pub fn frontend_params(&self) -> ParamStore {
        let mut out = self.params.filter_prefix(EXTRACTOR_PREFIX);
        out.overwrite_from(&self.params.filter_prefix(FUSION_PREFIX))
            .expect("disjoint prefixes");
        out
    }

    /// Class probabilities `[K]` for one cycle on the given graph.
    pub fn forward(&self, g: &mut Graph, cycle: &NormalizedCycle) -> Result<Var> {
        self.arch.forward(g, cycle)
    }

    pub fn probabilities(&self, cycle: &NormalizedCycle) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let p = self.forward(&mut g, cycle)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Adds `new_k − K` freshly initialised output rows; existing rows are kept.
    pub fn widen_head(&mut self, new_k: usize, seed: u64) -> Result<()> {
        let old_k = self.arch.cfg.num_classes;
        if new_k < old_k {
            return Err(Error::invalid(format!("cannot shrink the head from {old_k} to {new_k} classes")));
        }
        if new_k == old_k {
            return Ok(());
        }
        let hidden = self.arch.cfg.hidden;
        let mut rng = rng_for(seed, &format!("model.widen.{new_k}"));
        let fresh = uniform_init(&mut rng, &[new_k - old_k, hidden], hidden, new_k);
        let w = self.params.require(HEAD_WEIGHT)?;
        let mut data = w.data().to_vec();
        data.extend_from_slice(fresh.data());
        self.params.insert(HEAD_WEIGHT, Tensor::new(vec![new_k, hidden], data)?);
        let mut b = self.params.require(HEAD_BIAS)?.data().to_vec();
        b.resize(new_k, 0.0);
        self.params.insert(HEAD_BIAS, Tensor::vector(b));
        self.arch.cfg.num_classes = new_k;
        Ok(())
    }
}

impl Architecture {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, cycle: &NormalizedCycle) -> Result<Var> {
        let img = self.net.signature(g, cycle)?;
        self.classify(g, img)
    }

    /// CNN head on a `[C×S×S]` image.
    pub fn classify(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let mut x = image;
        for l in 0..self.cfg.conv_channels.len() {
            let w = g.param(&format!("classifier.conv.{l}.weight"))?;
            let b = g.param(&format!("classifier.conv.{l}.bias"))?;
            x = g.conv2d(x, w, 2, 1)?;
            x = g.add_row_bias(x, b)?;
            x = g.relu(x);
        }
        let flat = self.cfg.flat_features();
        let x = g.reshape(x, &[flat, 1])?;
        let wh = g.param("classifier.hidden.weight")?;
        let bh = g.param("classifier.hidden.bias")?;
        let h = g.matmul(wh, x)?;
        let h = g.reshape(h, &[self.cfg.hidden])?;
        let h = g.add_row_bias(h, bh)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[self.cfg.hidden, 1])?;
        let wo = g.param(HEAD_WEIGHT)?;
        let bo = g.param(HEAD_BIAS)?;
        let o = g.matmul(wo, h)?;
        let o = g.reshape(o, &[self.cfg.num_classes])?;
        let o = g.add_row_bias(o, bo)?;
        Ok(g.sigmoid(o))
    }

}

fn init_classifier(cfg: &ModelConfig, params: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut cin = cfg.signature.image_channels();
    for (l, &cout) in cfg.conv_channels.iter().enumerate() {
        params.insert(
            format!("classifier.conv.{l}.weight"),
            uniform_init(rng, &[cout, cin, 3, 3], cin * 9, cout * 9),
        );
        params.insert(format!("classifier.conv.{l}.bias"), Tensor::zeros(&[cout]));
        cin = cout;
    }
    let flat = cfg.flat_features();
    params.insert(
        "classifier.hidden.weight",
        uniform_init(rng, &[cfg.hidden, flat], flat, cfg.hidden),
    );
    params.insert("classifier.hidden.bias", Tensor::zeros(&[cfg.hidden]));
    params.insert(
        HEAD_WEIGHT,
        uniform_init(rng, &[cfg.num_classes, cfg.hidden], cfg.hidden, cfg.num_classes),
    );
    params.insert(HEAD_BIAS, Tensor::zeros(&[cfg.num_classes]));
}
