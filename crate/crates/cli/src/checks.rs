//! Property checks shared by `selftest` and the acceptance suite.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use nilm_core::eval::multilabel_metrics;
use nilm_core::nn::{grad_check, uniform_init, Graph, ParamStore, Tensor, Var};
use nilm_core::preprocess::{
    cycles_from_recording, detect_cycles, lowpass, FilterSpec, NormalizedCycle, PreprocessConfig, SeriesStats,
};
use nilm_core::rng::rng_for;
use nilm_core::signature::{lgm, SignatureConfig, SignatureNet};
use nilm_core::synth::{standard_profiles, synth_recording, Scenario, ScheduleEntry};
use nilm_core::train::{predict_second_half, ssl_loss_from_prediction, Model, ModelConfig};
use nilm_core::Result;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Uniform values in about ±1.7, reproducible per `stage`.
fn random(stage: &str, shape: &[usize]) -> Tensor {
    uniform_init(&mut rng_for(99, stage), shape, 1, 1)
}

fn readout(g: &mut Graph, y: Var, stage: &str) -> Result<Var> {
    let w = g.constant(random(stage, g.shape(y)));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn tiny_cycle() -> NormalizedCycle {
    let n = 8;
    let wave = |phase: f64, amp: f64| -> Vec<f64> {
        (0..n)
            .map(|t| amp * (2.0 * PI * t as f64 / n as f64 + phase).sin() + 0.1 * t as f64)
            .collect()
    };
    let s = SeriesStats {
        mean: 0.0,
        std: 1.0,
        degenerate: false,
    };
    NormalizedCycle {
        current: wave(0.3, 1.2),
        voltage: wave(0.2, 1.0),
        power_factor: wave(1.1, 0.4),
        stats: [s, s, s],
    }
}

fn tiny_model(lrg_hidden: usize) -> Result<Model> {
    let cfg = ModelConfig {
        signature: SignatureConfig {
            d_i: 2,
            d_v: 2,
            d_pf: 2,
            d_fus: 2,
            n_cyc: 8,
            tcn_dilations: vec![1, 2],
            pf_layers: 2,
            lrg_hidden,
            h: 4,
            w: 4,
            s: 8,
            ..SignatureConfig::default()
        },
        conv_channels: vec![2],
        hidden: 4,
        num_classes: 3,
        ssl_segments: 2,
    };
    let mut m = Model::new(cfg, 17)?;
    // zero biases would sit exactly on ReLU kinks
    let names: Vec<String> = m.params.names().filter(|n| n.ends_with("bias")).map(str::to_string).collect();
    for name in names {
        let t = m.params.get_mut(&name).expect("listed");
        let jitter = random(&format!("jitter.{name}"), t.shape());
        for (v, j) in t.data_mut().iter_mut().zip(jitter.data()) {
            *v += 0.1 * j;
        }
    }
    Ok(m)
}

type Case = (String, Result<f64>);

fn layer_cases() -> Vec<Case> {
    let mut out: Vec<Case> = Vec::new();

    let mut p = ParamStore::new(0);
    p.insert("w1", random("w1", &[6, 4]));
    p.insert("b1", random("b1", &[6]));
    p.insert("w2", random("w2", &[3, 6]));
    p.insert("b2", random("b2", &[3]));
    let x = random("x", &[4, 5]);
    out.push((
        "dense+relu+sigmoid".into(),
        grad_check(
            |g| {
                let x = g.constant(x.clone());
                let (w1, b1, w2, b2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?, g.param("b2")?);
                let h = g.matmul(w1, x)?;
                let h = g.add_row_bias(h, b1)?;
                let h = g.relu(h);
                let o = g.matmul(w2, h)?;
                let o = g.add_row_bias(o, b2)?;
                let o = g.sigmoid(o);
                readout(g, o, "r1")
            },
            &p,
            GRAD_EPS,
        ),
    ));

    let mut p = ParamStore::new(0);
    p.insert("k1", random("k1", &[3, 2, 3]));
    p.insert("k2", random("k2", &[2, 3, 3]));
    let x = random("x1d", &[2, 12]);
    out.push((
        "conv1d (causal, dilated)".into(),
        grad_check(
            |g| {
                let x = g.constant(x.clone());
                let k1 = g.param("k1")?;
                let h = g.conv1d(x, k1, 2, true)?;
                let h = g.softplus(h);
                let k2 = g.param("k2")?;
                let o = g.conv1d(h, k2, 4, true)?;
                let o2 = g.conv1d(x, k1, 1, false)?;
                let a = readout(g, o, "r2")?;
                let b = readout(g, o2, "r3")?;
                g.add(a, b)
            },
            &p,
            GRAD_EPS,
        ),
    ));

    let mut p = ParamStore::new(0);
    p.insert("k", random("k2d", &[4, 3, 3, 3]));
    let x = random("x2d", &[3, 7, 6]);
    out.push((
        "conv2d (stride 2)".into(),
        grad_check(
            |g| {
                let x = g.constant(x.clone());
                let k = g.param("k")?;
                let y = g.conv2d(x, k, 2, 1)?;
                let y = g.sigmoid(y);
                readout(g, y, "r4")
            },
            &p,
            GRAD_EPS,
        ),
    ));

    let mut p = ParamStore::new(0);
    p.insert("a", random("a", &[3, 8]));
    p.insert("c", random("c", &[1]));
    out.push((
        "structural ops".into(),
        grad_check(
            |g| {
                let a = g.param("a")?;
                let c = g.param("c")?;
                let t = g.transpose(a)?;
                let r = g.reshape(t, &[2, 12])?;
                let s = g.slice0(r, 1, 2)?;
                let s = g.reshape(s, &[3, 4])?;
                let pooled = g.segment_mean(a, 4)?;
                let cat = g.concat0(&[s, pooled])?;
                let os = g.outer_sum(cat, cat)?;
                let os = g.add_scalar(os, c)?;
                let mm = g.min_max_scale(os);
                let sq = g.square(a);
                let e = g.exp(sq);
                let m = g.mean(e);
                let l1 = readout(g, mm, "r5")?;
                g.add(l1, m)
            },
            &p,
            GRAD_EPS,
        ),
    ));

    let mut p = ParamStore::new(0);
    p.insert("z", Tensor::vector(vec![0.3, -1.2, 2.0, 0.05]));
    out.push((
        "bce".into(),
        grad_check(
            |g| {
                let z = g.param("z")?;
                let y = g.sigmoid(z);
                g.bce(y, &[1.0, 0.0, 1.0, 0.0], 1e-7)
            },
            &p,
            GRAD_EPS,
        ),
    ));

    let mut p = ParamStore::new(0);
    p.insert("mu", random("mu", &[4, 1]));
    p.insert("lv", random("lv", &[4, 1]));
    out.push((
        "kl".into(),
        grad_check(
            |g| {
                let mu = g.param("mu")?;
                let lv = g.param("lv")?;
                nilm_core::decompose::kl_divergence(g, mu, lv)
            },
            &p,
            GRAD_EPS,
        ),
    ));
    out
}

fn end_to_end_cases() -> Vec<Case> {
    let cycle = tiny_cycle();
    let mut out: Vec<Case> = Vec::new();
    for hidden in [0, 3] {
        let model = match tiny_model(hidden) {
            Ok(m) => m,
            Err(e) => {
                out.push((format!("model lrg_hidden={hidden}"), Err(e)));
                continue;
            }
        };
        out.push((
            format!("signature image, lrg_hidden={hidden}"),
            grad_check(
                |g| {
                    let img = model.net().signature(g, &cycle)?;
                    readout(g, img, "r6")
                },
                &model.params,
                GRAD_EPS,
            ),
        ));
        out.push((
            format!("classifier bce, lrg_hidden={hidden}"),
            grad_check(
                |g| {
                    let p = model.forward(g, &cycle)?;
                    g.bce(p, &[1.0, 0.0, 1.0], 1e-7)
                },
                &model.params,
                GRAD_EPS,
            ),
        ));
        if hidden == 0 {
            let mut store = model.frontend_params();
            store.insert("ssl.decoder.weight", random("dec.w", &[12, 4]));
            store.insert("ssl.decoder.bias", random("dec.b", &[12]));
            out.push((
                "ssl reconstruction".into(),
                grad_check(
                    |g| {
                        let pred = predict_second_half(g, model.net(), 2, &cycle)?;
                        ssl_loss_from_prediction(g, pred, &cycle)
                    },
                    &store,
                    GRAD_EPS,
                ),
            ));
        }
    }
    out
}

/// Central-difference agreement for every layer type and the end-to-end losses.
pub fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let mut cases = layer_cases();
    cases.extend(end_to_end_cases());
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for (name, r) in &cases {
        match r {
            Ok(err) if *err < GRAD_TOL => worst = worst.max(*err),
            Ok(err) => failed.push(format!("{name}={err:.2e}")),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let passed = failed.is_empty() && secs < 60.0;
    let detail = if failed.is_empty() {
        format!("{} cases, worst rel. error {worst:.2e} < {GRAD_TOL:.0e}, {secs:.1} s", cases.len())
    } else {
        format!("failing: {}", failed.join(", "))
    };
    Check::new("gradient integrity", passed, detail)
}

fn sine(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs + phase).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn preprocessing_inner() -> Result<(bool, String)> {
    let fs = 50_000.0;
    let v = sine(50.0, fs, 10_000, 0.0);
    let bounds = detect_cycles(&v, fs)?;
    let expect: Vec<usize> = (0..10).map(|k| k * 1000).collect();
    let crossings_ok = bounds == expect;

    let spec = FilterSpec::default_for(fs);
    let trim = 200..9_800;
    let gain = |freq: f64| -> Result<f64> {
        let x = sine(freq, fs, 10_000, 0.3);
        let y = lowpass(&x, fs, &spec)?;
        Ok(20.0 * (rms(&y[trim.clone()]) / rms(&x[trim.clone()])).log10())
    };
    let (db50, db5k) = (gain(50.0)?, gain(5_000.0)?);
    let filter_ok = db50.abs() <= 1.0 && db5k <= -20.0;

    let profiles = standard_profiles();
    let sc = Scenario {
        schedule: vec![
            ScheduleEntry { appliance: 0, on: 0.0, off: 0.3 },
            ScheduleEntry { appliance: 3, on: 0.1, off: 0.3 },
            ScheduleEntry { appliance: 5, on: 0.15, off: 0.25 },
        ],
        profiles,
        duration: 0.3,
        noise_std: 0.01,
        seed: 5,
        fs,
    };
    let samples = cycles_from_recording(&synth_recording(&sc)?, &PreprocessConfig::default_for(fs))?;
    let (mut worst_mu, mut worst_sigma) = (0.0f64, 0.0f64);
    let mut channels = 0;
    for s in &samples {
        for (ch, st) in s.cycle.channels().iter().zip(&s.cycle.stats) {
            if st.degenerate {
                continue;
            }
            let n = ch.len() as f64;
            let mu = ch.iter().sum::<f64>() / n;
            let sigma = (ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
            worst_mu = worst_mu.max(mu.abs());
            worst_sigma = worst_sigma.max((sigma - 1.0).abs());
            channels += 1;
        }
    }
    let norm_ok = channels > 0 && worst_mu < 1e-9 && worst_sigma < 1e-9;
    Ok((
        crossings_ok && filter_ok && norm_ok,
        format!(
            "crossings {} (first {:?}); 50 Hz {db50:+.3} dB, 5 kHz {db5k:+.1} dB; {channels} channels max|μ| {worst_mu:.1e} max|σ−1| {worst_sigma:.1e}",
            if crossings_ok { "exact" } else { "off" },
            &bounds[..bounds.len().min(4)]
        ),
    ))
}

/// Zero-crossing alignment, filter response and per-cycle normalisation.
pub fn preprocessing_exactness() -> Check {
    Check::from_result("preprocessing exactness", preprocessing_inner())
}

fn signature_inner() -> Result<(bool, String)> {
    let mut notes = Vec::new();
    let mut ok = true;

    // LGM: exact symmetry and PSD on nonnegative fused features
    let mut worst_asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for trial in 0..20 {
        let d = 2 + trial % 7;
        let n = 3 + trial % 11;
        let raw = random(&format!("lgm.{trial}"), &[d, n]);
        let f = Tensor::new(vec![d, n], raw.data().iter().map(|v| v.max(0.0)).collect())?;
        let mut g = Graph::detached();
        let fv = g.constant(f);
        let gm = lgm(&mut g, fv)?;
        let m = g.value(gm);
        for i in 0..d {
            for j in 0..d {
                worst_asym = worst_asym.max((m.at2(i, j) - m.at2(j, i)).abs());
            }
        }
        let e = DMatrix::from_row_slice(d, d, m.data()).symmetric_eigen();
        min_eig = min_eig.min(e.eigenvalues.min());
    }
    ok &= worst_asym == 0.0 && min_eig >= -1e-9;
    notes.push(format!("G asym {worst_asym}, min eig {min_eig:.2e}"));

    // LGM hand oracle
    let mut g = Graph::detached();
    let f = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]])?);
    let gm = lgm(&mut g, f)?;
    ok &= g.value(gm).data() == [2.0, 0.0, 0.0, 1.0];

    // LRG: nonnegative, and zero weights with zero bias give zero
    let cfg = SignatureConfig {
        d_i: 2,
        d_v: 2,
        d_pf: 2,
        d_fus: 3,
        n_cyc: 8,
        h: 4,
        w: 6,
        s: 8,
        ..SignatureConfig::default()
    };
    let net = SignatureNet::new(cfg)?;
    let mut store = ParamStore::new(3);
    net.init_params(&mut store, &mut rng_for(3, "check.lrg"));
    let f = random("lrg.f", &[3, 8]);
    let mut g = Graph::new(&store);
    let fv = g.constant(f.clone());
    let r = net.lrg(&mut g, fv)?;
    let r_min = g.value(r).data().iter().copied().fold(f64::INFINITY, f64::min);
    let mut zeroed = store.clone();
    zeroed.insert("signature.lrg.weight", Tensor::zeros(&[1, 6]));
    zeroed.insert("signature.lrg.bias", Tensor::zeros(&[1]));
    let mut g = Graph::new(&zeroed);
    let fv = g.constant(f.clone());
    let r0 = net.lrg(&mut g, fv)?;
    let r0_zero = g.value(r0).data().iter().all(|&v| v == 0.0);
    ok &= r_min >= 0.0 && r0_zero;
    notes.push(format!("R min {r_min:.3}, zero map {}", if r0_zero { "≡ 0" } else { "≠ 0" }));

    // LRG hand oracle: W = [1 1], b = 0, F = [1 2]
    let tiny = SignatureNet::new(SignatureConfig {
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
    })?;
    let mut ts = ParamStore::new(0);
    tiny.init_params(&mut ts, &mut rng_for(0, "check.tiny"));
    ts.insert("signature.lrg.weight", Tensor::from_rows(&[vec![1.0, 1.0]])?);
    ts.insert("signature.lrg.bias", Tensor::vector(vec![0.0]));
    let mut g = Graph::new(&ts);
    let fv = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]])?);
    let r = tiny.lrg(&mut g, fv)?;
    ok &= g.value(r).data() == [2.0, 3.0, 3.0, 4.0];

    // GG with identity weights: column-major flatten of F, row-major reshape
    store.insert("signature.gg.weight", Tensor::identity(24));
    store.insert("signature.gg.bias", Tensor::zeros(&[24]));
    let mut g = Graph::new(&store);
    let fv = g.constant(f.clone());
    let out = net.gg(&mut g, fv)?;
    let expect: Vec<f64> = (0..8).flat_map(|c| (0..3).map(move |r| (r, c))).map(|(r, c)| f.at2(r, c)).collect();
    let gg_ok = g.shape(out) == [4, 6] && g.value(out).data() == expect.as_slice();
    ok &= gg_ok;
    notes.push(format!("GG identity {}", if gg_ok { "= flatten" } else { "mismatch" }));
    Ok((ok, notes.join("; ")))
}

/// Symmetry/PSD of G, sign and zero cases of R, GG layout, hand oracles.
pub fn signature_algebra() -> Check {
    Check::from_result("signature algebra", signature_inner())
}

fn metric_inner() -> Result<(bool, String)> {
    let y = vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 1, 0], vec![0, 0, 0]];
    let perfect = multilabel_metrics(&y, &y)?;
    let mut ok = perfect.accuracy_jaccard == 1.0 && perfect.accuracy_exact == 1.0;
    ok &= perfect.per_class.iter().all(|c| c.f1 == 1.0);
    let y_hat = vec![vec![1, 0, 0], vec![0, 1, 1], vec![1, 1, 0], vec![1, 0, 0]];
    let m = multilabel_metrics(&y, &y_hat)?;
    // Jaccard per sample: 1/2, 1/2, 1, 0
    ok &= (m.accuracy_jaccard - 0.5).abs() < 1e-12;
    ok &= m.accuracy_exact == 0.25;
    ok &= m.accuracy_exact <= m.accuracy_jaccard;
    ok &= (m.recall_micro - 4.0 / 5.0).abs() < 1e-12;
    Ok((ok, format!("jaccard {:.3}, exact {:.3}, micro recall {:.3}", m.accuracy_jaccard, m.accuracy_exact, m.recall_micro)))
}

/// Hand-computed multi-label metric identities.
pub fn metric_identities() -> Check {
    Check::from_result("metric identities", metric_inner())
}

pub fn all() -> Vec<Check> {
    vec![
        gradient_integrity(),
        preprocessing_exactness(),
        signature_algebra(),
        metric_identities(),
    ]
}
