//! Image load signatures.
//!
//! Each normalised cycle passes through three modality-specific causal
//! convolution stacks, a column-wise fusion layer, and three 2-D maps built
//! from the fused features:
//!
//! * LRG, `R[i][j] = relu(W_r·[f_i; f_j] + b_r)` over every ordered column pair;
//! * LGM, `G′ = relu(F·Fᵀ)`, the Gram matrix of the feature channels;
//! * GG, an affine re-projection of the column-major flattening of `F` reshaped to `H×W`.
//!
//! The maps are bilinearly resized to `S×S`, min-max scaled per channel and
//! stacked in the order (LRG, LGM, GG).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Graph, ParamStore, Tensor, Var};
use crate::preprocess::NormalizedCycle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureChannels {
    /// LRG, LGM and GG stacked as three channels
    All,
    /// GG alone as a single channel
    GgOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignatureConfig {
    pub d_i: usize,
    pub d_v: usize,
    pub d_pf: usize,
    pub d_fus: usize,
    pub n_cyc: usize,
    pub tcn_dilations: Vec<usize>,
    pub tcn_kernel: usize,
    pub pf_layers: usize,
    pub pf_kernel: usize,
    /// hidden width of the pairwise LRG network; 0 means a single affine map
    pub lrg_hidden: usize,
    pub h: usize,
    pub w: usize,
    pub s: usize,
    pub channels: SignatureChannels,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self {
            d_i: 8,
            d_v: 8,
            d_pf: 4,
            d_fus: 8,
            n_cyc: 64,
            tcn_dilations: vec![1, 2, 4],
            tcn_kernel: 3,
            pf_layers: 2,
            pf_kernel: 3,
            lrg_hidden: 0,
            h: 16,
            w: 32,
            s: 64,
            channels: SignatureChannels::All,
        }
    }
}

impl SignatureConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_i", self.d_i),
            ("d_v", self.d_v),
            ("d_pf", self.d_pf),
            ("d_fus", self.d_fus),
            ("tcn_kernel", self.tcn_kernel),
            ("pf_layers", self.pf_layers),
            ("pf_kernel", self.pf_kernel),
            ("h", self.h),
            ("w", self.w),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("signature `{name}` must be ≥ 1")));
        }
        if self.tcn_dilations.is_empty() || self.tcn_dilations.contains(&0) {
            return Err(Error::invalid("tcn_dilations must be non-empty and ≥ 1"));
        }
        if self.n_cyc < 2 || self.n_cyc % 2 != 0 {
            return Err(Error::invalid(format!("n_cyc must be even and ≥ 2, got {}", self.n_cyc)));
        }
        if self.h * self.w != self.d_fus * self.n_cyc {
            return Err(Error::invalid(format!(
                "GG shape {}×{} must hold d_fus·n_cyc = {} values",
                self.h,
                self.w,
                self.d_fus * self.n_cyc
            )));
        }
        if self.s < 8 {
            return Err(Error::invalid(format!("signature side S must be ≥ 8, got {}", self.s)));
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        match self.channels {
            SignatureChannels::All => 3,
            SignatureChannels::GgOnly => 1,
        }
    }

    fn stacks(&self) -> [(&'static str, usize, usize, Vec<usize>); 3] {
        [
            ("current", self.d_i, self.tcn_kernel, self.tcn_dilations.clone()),
            ("voltage", self.d_v, self.tcn_kernel, self.tcn_dilations.clone()),
            ("pf", self.d_pf, self.pf_kernel, vec![1; self.pf_layers]),
        ]
    }
}

/// Feature maps of the three modalities, each `d×N`.
#[derive(Debug, Clone, Copy)]
pub struct ModalityFeatures {
    pub current: Var,
    pub voltage: Var,
    pub power_factor: Var,
}

/// Parameter layout and forward pass of the signature front end.
#[derive(Debug, Clone)]
pub struct SignatureNet {
    cfg: SignatureConfig,
}

pub const EXTRACTOR_PREFIX: &str = "extractor.";
pub const FUSION_PREFIX: &str = "fusion.";

impl SignatureNet {
    pub fn new(cfg: SignatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SignatureConfig {
        &self.cfg
    }

    /// Adds freshly initialised extractor, fusion and signature parameters.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (name, width, k, dilations) in self.cfg.stacks() {
            let mut cin = 1;
            for l in 0..dilations.len() {
                store.insert(
                    format!("extractor.{name}.{l}.weight"),
                    uniform_init(rng, &[width, cin, k], cin * k, width * k),
                );
                store.insert(format!("extractor.{name}.{l}.bias"), Tensor::zeros(&[width]));
                cin = width;
            }
        }
        let d_cat = self.cfg.d_i + self.cfg.d_v + self.cfg.d_pf;
        let d = self.cfg.d_fus;
        store.insert("fusion.weight", uniform_init(rng, &[d, d_cat], d_cat, d));
        store.insert("fusion.bias", Tensor::full(&[d], 0.01));
        if self.cfg.lrg_hidden > 0 {
            let hid = self.cfg.lrg_hidden;
            store.insert("signature.lrg.hidden.weight", uniform_init(rng, &[hid, 2 * d], 2 * d, hid));
            store.insert("signature.lrg.hidden.bias", Tensor::zeros(&[hid]));
            store.insert("signature.lrg.weight", uniform_init(rng, &[1, hid], hid, 1));
        } else {
            store.insert("signature.lrg.weight", uniform_init(rng, &[1, 2 * d], 2 * d, 1));
        }
        store.insert("signature.lrg.bias", Tensor::zeros(&[1]));
        let flat = d * self.cfg.n_cyc;
        let hw = self.cfg.h * self.cfg.w;
        store.insert("signature.gg.weight", uniform_init(rng, &[hw, flat], flat, hw));
        store.insert("signature.gg.bias", Tensor::zeros(&[hw]));
    }

    fn run_stack(&self, g: &mut Graph, name: &str, dilations: &[usize], input: &[f64]) -> Result<Var> {
        let mut x = g.constant(Tensor::new(vec![1, input.len()], input.to_vec())?);
        for (l, &dil) in dilations.iter().enumerate() {
            let w = g.param(&format!("extractor.{name}.{l}.weight"))?;
            let b = g.param(&format!("extractor.{name}.{l}.bias"))?;
            x = g.conv1d(x, w, dil, true)?;
            x = g.add_row_bias(x, b)?;
            if l + 1 < dilations.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Modality extractors on arbitrary-length sequences.
    pub fn extract_sequences(
        &self,
        g: &mut Graph,
        current: &[f64],
        voltage: &[f64],
        power_factor: &[f64],
    ) -> Result<ModalityFeatures> {
        if current.len() != voltage.len() || current.len() != power_factor.len() || current.is_empty() {
            return Err(Error::shape("extract", &[current.len(), voltage.len()], &[power_factor.len()]));
        }
        let [ci, cv, cp] = self.cfg.stacks();
        Ok(ModalityFeatures {
            current: self.run_stack(g, ci.0, &ci.3, current)?,
            voltage: self.run_stack(g, cv.0, &cv.3, voltage)?,
            power_factor: self.run_stack(g, cp.0, &cp.3, power_factor)?,
        })
    }

    pub fn extract(&self, g: &mut Graph, cycle: &NormalizedCycle) -> Result<ModalityFeatures> {
        if cycle.len() != self.cfg.n_cyc {
            return Err(Error::shape("extract", &[cycle.len()], &[self.cfg.n_cyc]));
        }
        self.extract_sequences(g, &cycle.current, &cycle.voltage, &cycle.power_factor)
    }

    /// `relu(W_f·[F_I; F_V; F_PF] + b_f)`, applied to every column.
    pub fn fuse(&self, g: &mut Graph, f: ModalityFeatures) -> Result<Var> {
        let n = g.shape(f.current)[1];
        for v in [f.voltage, f.power_factor] {
            if g.shape(v)[1] != n {
                return Err(Error::shape("fuse", g.shape(f.current), g.shape(v)));
            }
        }
        let cat = g.concat0(&[f.current, f.voltage, f.power_factor])?;
        let w = g.param("fusion.weight")?;
        let b = g.param("fusion.bias")?;
        let y = g.matmul(w, cat)?;
        let y = g.add_row_bias(y, b)?;
        Ok(g.relu(y))
    }

    /// Pairwise relation map over the columns of `fused`.
    pub fn lrg(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let (d, n) = (g.shape(fused)[0], g.shape(fused)[1]);
        let pair = |g: &mut Graph, w: Var| -> Result<Var> {
            // W·[f_i; f_j] = W_left·f_i + W_right·f_j
            let wt = g.transpose(w)?;
            let left = g.slice0(wt, 0, d)?;
            let right = g.slice0(wt, d, 2 * d)?;
            let left = g.transpose(left)?;
            let right = g.transpose(right)?;
            let a = g.matmul(left, fused)?;
            let b = g.matmul(right, fused)?;
            g.outer_sum(a, b)
        };
        let bias = g.param("signature.lrg.bias")?;
        if self.cfg.lrg_hidden > 0 {
            let hid = self.cfg.lrg_hidden;
            let wh = g.param("signature.lrg.hidden.weight")?;
            let bh = g.param("signature.lrg.hidden.bias")?;
            let pre = pair(g, wh)?;
            let pre = g.add_row_bias(pre, bh)?;
            let hidden = g.relu(pre);
            let hidden = g.reshape(hidden, &[hid, n * n])?;
            let wo = g.param("signature.lrg.weight")?;
            let r = g.matmul(wo, hidden)?;
            let r = g.add_scalar(r, bias)?;
            let r = g.relu(r);
            g.reshape(r, &[n, n])
        } else {
            let w = g.param("signature.lrg.weight")?;
            let r = pair(g, w)?;
            let r = g.add_scalar(r, bias)?;
            let r = g.relu(r);
            g.reshape(r, &[n, n])
        }
    }

    /// `relu(F·Fᵀ)` over the feature channels.
    pub fn lgm(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        lgm(g, fused)
    }

    /// Affine re-projection of the column-major flattening, reshaped row-major to `H×W`.
    pub fn gg(&self, g: &mut Graph, fused: Var) -> Result<Var> {
        let (d, n) = (g.shape(fused)[0], g.shape(fused)[1]);
        if self.cfg.h * self.cfg.w != d * n {
            return Err(Error::shape("gg", &[self.cfg.h, self.cfg.w], &[d, n]));
        }
        // row-major order of Fᵀ is column-major order of F
        let ft = g.transpose(fused)?;
        let z = g.reshape(ft, &[d * n, 1])?;
        let w = g.param("signature.gg.weight")?;
        let b = g.param("signature.gg.bias")?;
        let zp = g.matmul(w, z)?;
        let zp = g.reshape(zp, &[d * n])?;
        let zp = g.add_row_bias(zp, b)?;
        g.reshape(zp, &[self.cfg.h, self.cfg.w])
    }

    /// Full front end: cycle → signature image `[C×S×S]`.
    pub fn signature(&self, g: &mut Graph, cycle: &NormalizedCycle) -> Result<Var> {
        let feats = self.extract(g, cycle)?;
        let fused = self.fuse(g, feats)?;
        match self.cfg.channels {
            SignatureChannels::All => {
                let r = self.lrg(g, fused)?;
                let gm = self.lgm(g, fused)?;
                let gg = self.gg(g, fused)?;
                assemble(g, &[r, gm, gg], self.cfg.s)
            }
            SignatureChannels::GgOnly => {
                let gg = self.gg(g, fused)?;
                assemble(g, &[gg], self.cfg.s)
            }
        }
    }
}

pub fn lgm(g: &mut Graph, fused: Var) -> Result<Var> {
    let ft = g.transpose(fused)?;
    let gram = g.matmul(fused, ft)?;
    Ok(g.relu(gram))
}

/// Bilinear (corner-aligned) interpolation matrix from `n_in` to `n_out` samples.
pub fn resize_matrix(n_in: usize, n_out: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n_out, n_in]);
    let data = m.data_mut();
    for i in 0..n_out {
        if n_in == 1 {
            data[i * n_in] = 1.0;
            continue;
        }
        let pos = if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n_in - 2);
        let frac = pos - lo as f64;
        data[i * n_in + lo] += 1.0 - frac;
        data[i * n_in + lo + 1] += frac;
    }
    m
}

/// Resizes a matrix to `s×s`; the identity size is passed through unchanged.
pub fn resize_bilinear(g: &mut Graph, x: Var, s: usize) -> Result<Var> {
    let (h, w) = (g.shape(x)[0], g.shape(x)[1]);
    let mut y = x;
    if h != s {
        let ry = g.constant(resize_matrix(h, s));
        y = g.matmul(ry, y)?;
    }
    if w != s {
        let rxt = g.constant(resize_matrix(w, s).transpose2());
        y = g.matmul(y, rxt)?;
    }
    Ok(y)
}

/// Resize, min-max scale and stack 2-D maps into a `[C×S×S]` image.
pub fn assemble(g: &mut Graph, maps: &[Var], s: usize) -> Result<Var> {
    if s < 8 {
        return Err(Error::invalid(format!("signature side S must be ≥ 8, got {s}")));
    }
    let mut chans = Vec::with_capacity(maps.len());
    for &m in maps {
        if g.shape(m).len() != 2 {
            return Err(Error::shape("assemble", g.shape(m), &[s, s]));
        }
        let r = resize_bilinear(g, m, s)?;
        let scaled = g.min_max_scale(r);
        chans.push(g.reshape(scaled, &[1, s, s])?);
    }
    g.concat0(&chans)
}

/// Writes a `[0,1]` channel as an 8-bit binary PGM.
pub fn render_pgm(channel: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    if channel.len() != width * height {
        return Err(Error::shape("render_pgm", &[channel.len()], &[height, width]));
    }
    if let Some(v) = channel.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(channel.iter().map(|v| (v * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM back into `[0,1]` values with its width and height.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((pixels.iter().map(|&b| f64::from(b) / 255.0).collect(), w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net_with(cfg: SignatureConfig, store: &mut ParamStore) -> SignatureNet {
        let net = SignatureNet::new(cfg).unwrap();
        let mut rng = crate::rng::rng_for(1, "test");
        net.init_params(store, &mut rng);
        net
    }

    fn tiny_cfg() -> SignatureConfig {
        SignatureConfig {
            d_i: 1,
            d_v: 1,
            d_pf: 1,
            d_fus: 1,
            n_cyc: 2,
            tcn_dilations: vec![1],
            pf_layers: 1,
            h: 1,
            w: 2,
            s: 8,
            ..SignatureConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        SignatureConfig::default().validate().unwrap();
        let mut c = SignatureConfig::default();
        c.h = 10;
        assert!(c.validate().is_err());
        let mut c = SignatureConfig::default();
        c.n_cyc = 63;
        assert!(c.validate().is_err());
        let mut c = SignatureConfig::default();
        c.s = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fusion_hand_example() {
        let mut store = ParamStore::new(0);
        let net = net_with(tiny_cfg(), &mut store);
        store.insert("fusion.weight", Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap());
        store.insert("fusion.bias", Tensor::vector(vec![0.0]));
        let mut g = Graph::new(&store);
        let mk = |g: &mut Graph, v: f64| g.constant(Tensor::full(&[1, 5], v));
        let f = ModalityFeatures {
            current: mk(&mut g, 1.0),
            voltage: mk(&mut g, 2.0),
            power_factor: mk(&mut g, 3.0),
        };
        let y = net.fuse(&mut g, f).unwrap();
        assert_eq!(g.value(y).data(), &[6.0; 5]);
    }

    #[test]
    fn fusion_clamps_and_zeroes() {
        let mut store = ParamStore::new(0);
        let net = net_with(SignatureConfig::default(), &mut store);
        let mut g = Graph::new(&store);
        let f = ModalityFeatures {
            current: g.constant(Tensor::full(&[8, 64], 0.4)),
            voltage: g.constant(Tensor::full(&[8, 64], -0.9)),
            power_factor: g.constant(Tensor::full(&[4, 64], 2.0)),
        };
        let y = net.fuse(&mut g, f).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v >= 0.0));

        let mut s2 = store.clone();
        s2.insert("fusion.bias", Tensor::full(&[8], -1e6));
        let mut g = Graph::new(&s2);
        let f = ModalityFeatures {
            current: g.constant(Tensor::full(&[8, 64], 0.4)),
            voltage: g.constant(Tensor::full(&[8, 64], -0.9)),
            power_factor: g.constant(Tensor::full(&[4, 64], 2.0)),
        };
        let y = net.fuse(&mut g, f).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new(&store);
        let f = ModalityFeatures {
            current: g.constant(Tensor::full(&[8, 64], 0.4)),
            voltage: g.constant(Tensor::full(&[8, 63], 0.4)),
            power_factor: g.constant(Tensor::full(&[4, 64], 2.0)),
        };
        assert!(net.fuse(&mut g, f).is_err());
    }

    #[test]
    fn lrg_hand_example_and_zero_cases() {
        let mut store = ParamStore::new(0);
        let net = net_with(tiny_cfg(), &mut store);
        store.insert("signature.lrg.weight", Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        store.insert("signature.lrg.bias", Tensor::vector(vec![0.0]));
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let r = net.lrg(&mut g, f).unwrap();
        assert_eq!(g.shape(r), &[2, 2]);
        assert_eq!(g.value(r).data(), &[2.0, 3.0, 3.0, 4.0]);

        for bias in [0.0, -1.0] {
            store.insert("signature.lrg.weight", Tensor::zeros(&[1, 2]));
            store.insert("signature.lrg.bias", Tensor::vector(vec![bias]));
            let mut g = Graph::new(&store);
            let f = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
            let r = net.lrg(&mut g, f).unwrap();
            assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lrg_is_ordered_not_symmetric() {
        let mut store = ParamStore::new(0);
        let net = net_with(tiny_cfg(), &mut store);
        store.insert("signature.lrg.weight", Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap());
        store.insert("signature.lrg.bias", Tensor::vector(vec![5.0]));
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let r = net.lrg(&mut g, f).unwrap();
        let t = g.value(r);
        assert_ne!(t.at2(0, 1), t.at2(1, 0));
    }

    #[test]
    fn lgm_hand_example() {
        let mut g = Graph::detached();
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap());
        let gm = lgm(&mut g, f).unwrap();
        assert_eq!(g.value(gm).data(), &[2.0, 0.0, 0.0, 1.0]);
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let gz = lgm(&mut g, z).unwrap();
        assert!(g.value(gz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gg_flatten_convention() {
        let cfg = SignatureConfig {
            d_fus: 2,
            n_cyc: 2,
            h: 2,
            w: 2,
            ..tiny_cfg()
        };
        let mut store = ParamStore::new(0);
        let net = net_with(cfg, &mut store);
        store.insert("signature.gg.weight", Tensor::identity(4));
        store.insert("signature.gg.bias", Tensor::zeros(&[4]));
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = net.gg(&mut g, f).unwrap();
        assert_eq!(g.shape(out), &[2, 2]);
        assert_eq!(g.value(out).data(), &[1.0, 3.0, 2.0, 4.0]);

        store.insert("signature.gg.weight", Tensor::zeros(&[4, 4]));
        store.insert("signature.gg.bias", Tensor::full(&[4], 2.5));
        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = net.gg(&mut g, f).unwrap();
        assert_eq!(g.value(out).data(), &[2.5; 4]);

        let mut g = Graph::new(&store);
        let f = g.constant(Tensor::zeros(&[2, 3]));
        assert!(net.gg(&mut g, f).is_err());
    }

    #[test]
    fn identity_extractor_passes_current_through() {
        let cfg = SignatureConfig {
            d_i: 2,
            n_cyc: 8,
            h: 1,
            w: 8,
            ..tiny_cfg()
        };
        let mut store = ParamStore::new(0);
        let net = net_with(cfg, &mut store);
        let mut w = Tensor::zeros(&[2, 1, 3]);
        w.data_mut()[2] = 1.0; // output 0, input 0, newest tap
        store.insert("extractor.current.0.weight", w);
        let cycle = NormalizedCycle {
            current: vec![0.1, -0.4, 1.2, 0.3, -2.0, 0.7, 0.05, 0.05],
            voltage: vec![0.0; 8],
            power_factor: vec![0.0; 8],
            stats: [crate::preprocess::zscore(&[0.0, 1.0]).1; 3],
        };
        let mut g = Graph::new(&store);
        let f = net.extract(&mut g, &cycle).unwrap();
        assert_eq!(g.value(f.current).row(0), cycle.current.as_slice());
        assert_eq!(g.shape(f.voltage), &[1, 8]);
        // zero input through zero-bias stacks
        assert!(g.value(f.voltage).data().iter().all(|&v| v == 0.0));
        let short = NormalizedCycle { current: vec![0.0; 4], ..cycle };
        let mut g = Graph::new(&store);
        assert!(net.extract(&mut g, &short).is_err());
    }

    #[test]
    fn resize_matrix_rows_sum_to_one_and_identity() {
        let m = resize_matrix(16, 64);
        for r in 0..64 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(resize_matrix(8, 8), Tensor::identity(8));
    }

    #[test]
    fn assemble_zero_and_native_size() {
        let mut g = Graph::detached();
        let z = g.constant(Tensor::zeros(&[8, 8]));
        let img = assemble(&mut g, &[z, z, z], 8).unwrap();
        assert_eq!(g.shape(img), &[3, 8, 8]);
        assert!(g.value(img).data().iter().all(|&v| v == 0.0));

        let vals: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 * 0.5 - 3.0).collect();
        let gm = g.constant(Tensor::new(vec![8, 8], vals.clone()).unwrap());
        let img = assemble(&mut g, &[z, gm, z], 8).unwrap();
        let (lo, hi) = (-3.0, 63.0 * 0.5 - 3.0);
        let expect: Vec<f64> = vals.iter().map(|v| (v - lo) / (hi - lo)).collect();
        assert_eq!(g.value(img).row(1), expect.as_slice());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        render_pgm(&[0.0; 64], 8, 8, &p).unwrap();
        let (v, w, h) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (8, 8));
        assert!(v.iter().all(|&x| x == 0.0));
        render_pgm(&[1.0; 64], 8, 8, &p).unwrap();
        assert!(std::fs::read(&p).unwrap().ends_with(&[255u8; 64]));

        let ramp: Vec<f64> = (0..64).map(|i| (i % 8) as f64 / 7.0).collect();
        render_pgm(&ramp, 8, 8, &p).unwrap();
        let (v, _, _) = read_pgm(&p).unwrap();
        for row in v.chunks(8) {
            assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
        for (a, b) in v.iter().zip(&ramp) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        assert!(render_pgm(&[1.5; 4], 2, 2, &p).is_err());
        let missing = dir.path().join("no/such/dir/x.pgm");
        let err = render_pgm(&[0.0; 4], 2, 2, &missing).unwrap_err().to_string();
        assert!(err.contains("no/such/dir"), "{err}");
    }
}
