use nilm_core::nn::{compare_with_differences, grad_check, uniform_init, Graph, ParamStore, Tensor, Var};
use nilm_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed readout weights so the loss is a non-trivial function of every output.
fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new(1);
    p.insert("w", random(&mut rng, &[3, 4]));
    let err = grad_check(
        |g| {
            let w = g.param("w")?;
            let s = g.scale(w, 2.5);
            readout(g, s, 9)
        },
        &p,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn mse_of_dense_map() {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap());
    let f = |g: &mut Graph| {
        let w = g.param("w")?;
        let x = g.constant(Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap());
        let y = g.constant(Tensor::matrix(2, 1, vec![0.3, 1.0]).unwrap());
        let wx = g.matmul(w, x)?;
        let d = g.sub(wx, y)?;
        let sq = g.square(d);
        Ok(g.mean(sq))
    };
    assert!(grad_check(f, &p, EPS).unwrap() < 1e-4);
    // hand gradient: dL/dW = (W·x − y)·xᵀ
    let mut g = Graph::new(&p);
    let l = f(&mut g).unwrap();
    let grads = g.backward(l).unwrap();
    let r = [0.5 * 1.5 + 1.0 * 0.5 - 0.3, 2.0 * 1.5 - 0.25 * 0.5 - 1.0];
    let x = [1.5, -0.5];
    for i in 0..2 {
        for j in 0..2 {
            let expect = r[i] * x[j];
            assert!((grads.get("w").unwrap().at2(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn dense_relu_sigmoid_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::new(2);
    p.insert("w1", uniform_init(&mut rng, &[6, 4], 4, 6));
    p.insert("b1", random(&mut rng, &[6]));
    p.insert("w2", uniform_init(&mut rng, &[3, 6], 6, 3));
    p.insert("b2", random(&mut rng, &[3]));
    let x = random(&mut rng, &[4, 5]);
    let f = |g: &mut Graph| {
        let x = g.constant(x.clone());
        let (w1, b1, w2, b2) = (g.param("w1")?, g.param("b1")?, g.param("w2")?, g.param("b2")?);
        let h = g.matmul(w1, x)?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.relu(h);
        let o = g.matmul(w2, h)?;
        let o = g.add_row_bias(o, b2)?;
        let o = g.sigmoid(o);
        readout(g, o, 3)
    };
    let err = grad_check(f, &p, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn dilated_causal_conv1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamStore::new(4);
    p.insert("k1", random(&mut rng, &[3, 2, 3]));
    p.insert("b1", random(&mut rng, &[3]));
    p.insert("k2", random(&mut rng, &[2, 3, 3]));
    let x = random(&mut rng, &[2, 12]);
    let f = |g: &mut Graph| {
        let x = g.constant(x.clone());
        let k1 = g.param("k1")?;
        let h = g.conv1d(x, k1, 2, true)?;
        let b1 = g.param("b1")?;
        let h = g.add_row_bias(h, b1)?;
        let h = g.relu(h);
        let k2 = g.param("k2")?;
        let o = g.conv1d(h, k2, 4, true)?;
        // k1 again, symmetric padding
        let o2 = g.conv1d(x, k1, 1, false)?;
        let a = readout(g, o, 5)?;
        let b = readout(g, o2, 6)?;
        g.add(a, b)
    };
    let err = grad_check(f, &p, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn strided_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamStore::new(5);
    p.insert("k", random(&mut rng, &[4, 3, 3, 3]));
    p.insert("b", random(&mut rng, &[4]));
    let x = random(&mut rng, &[3, 7, 6]);
    let f = |g: &mut Graph| {
        let x = g.constant(x.clone());
        let (k, b) = (g.param("k")?, g.param("b")?);
        let y = g.conv2d(x, k, 2, 1)?;
        let y = g.add_row_bias(y, b)?;
        let y = g.sigmoid(y);
        readout(g, y, 8)
    };
    let err = grad_check(f, &p, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = ParamStore::new(6);
    p.insert("a", random(&mut rng, &[3, 8]));
    p.insert("c", random(&mut rng, &[1]));
    let f = |g: &mut Graph| {
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
        let sp = g.softplus(os);
        let mm = g.min_max_scale(sp);
        let e = g.exp(a);
        let l1 = readout(g, mm, 1)?;
        let l2 = readout(g, e, 2)?;
        g.add(l1, l2)
    };
    let err = grad_check(f, &p, EPS).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn corrupted_gradient_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamStore::new(7);
    p.insert("w", random(&mut rng, &[4, 3]));
    let x = random(&mut rng, &[3, 2]);
    let f = |g: &mut Graph| {
        let w = g.param("w")?;
        let x = g.constant(x.clone());
        let y = g.matmul(w, x)?;
        let y = g.sigmoid(y);
        readout(g, y, 4)
    };
    let mut g = Graph::new(&p);
    let l = f(&mut g).unwrap();
    let mut grads = g.backward(l).unwrap();
    for (_, t) in grads.iter_mut() {
        for v in t.data_mut() {
            *v *= 2.0;
        }
    }
    let err = compare_with_differences(&f, &grads, &p, EPS).unwrap();
    assert!(err > 0.3, "{err}");
}

#[test]
fn bad_epsilon_and_non_finite_are_errors() {
    let mut p = ParamStore::new(0);
    p.insert("w", Tensor::scalar(1.0));
    let f = |g: &mut Graph| {
        let w = g.param("w")?;
        Ok(g.sum(w))
    };
    assert!(grad_check(f, &p, 0.1).is_err());
    let blow = |g: &mut Graph| {
        let w = g.param("w")?;
        let big = g.scale(w, 1e3);
        let e = g.exp(big);
        Ok(g.sum(e))
    };
    assert!(grad_check(blow, &p, 1e-5).is_err());
}

#[test]
fn bce_gradient_wrt_logits() {
    let mut p = ParamStore::new(0);
    p.insert("z", Tensor::vector(vec![0.3, -1.2, 2.0, 0.05]));
    let target = [1.0, 0.0, 1.0, 0.0];
    let f = |g: &mut Graph| {
        let z = g.param("z")?;
        let y = g.sigmoid(z);
        g.bce(y, &target, 1e-7)
    };
    let err = grad_check(f, &p, EPS).unwrap();
    assert!(err < 1e-5, "{err}");
}

fn tiny_cycle() -> nilm_core::preprocess::NormalizedCycle {
    use nilm_core::preprocess::{NormalizedCycle, SeriesStats};
    let n = 8;
    let wave = |phase: f64, amp: f64| -> Vec<f64> {
        (0..n)
            .map(|t| amp * (2.0 * std::f64::consts::PI * t as f64 / n as f64 + phase).sin() + 0.1 * t as f64)
            .collect()
    };
    let s = SeriesStats { mean: 0.0, std: 1.0, degenerate: false };
    NormalizedCycle {
        current: wave(0.3, 1.2),
        voltage: wave(0.2, 1.0),
        power_factor: wave(1.1, 0.4),
        stats: [s, s, s],
    }
}

fn tiny_model(lrg_hidden: usize) -> nilm_core::train::Model {
    use nilm_core::signature::SignatureConfig;
    use nilm_core::train::{Model, ModelConfig};
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
    let mut m = Model::new(cfg, 17).unwrap();
    // zero biases would put pre-activations exactly on ReLU kinks
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
    }
    m
}

#[test]
fn end_to_end_signature_and_classifier() {
    let cycle = tiny_cycle();
    for hidden in [0, 3] {
        let model = tiny_model(hidden);
        // signature image alone, through assemble, LRG/LGM/GG, fusion and extractors
        let err = grad_check(
            |g| {
                let img = model.net().signature(g, &cycle)?;
                readout(g, img, 31)
            },
            &model.params,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "signature, lrg_hidden={hidden}: {err}");
        // classification loss through the whole model
        let err = grad_check(
            |g| {
                let p = model.forward(g, &cycle)?;
                g.bce(p, &[1.0, 0.0, 1.0], 1e-7)
            },
            &model.params,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "classifier, lrg_hidden={hidden}: {err}");
    }
}

#[test]
fn reconstruction_and_vae_losses() {
    use nilm_core::decompose::kl_divergence;
    use nilm_core::train::{predict_second_half, ssl_loss_from_prediction};
    let cycle = tiny_cycle();
    let model = tiny_model(0);
    let mut store = model.frontend_params();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    store.insert("ssl.decoder.weight", random(&mut rng, &[12, 4]));
    store.insert("ssl.decoder.bias", random(&mut rng, &[12]));
    let err = grad_check(
        |g| {
            let pred = predict_second_half(g, model.net(), 2, &cycle)?;
            ssl_loss_from_prediction(g, pred, &cycle)
        },
        &store,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "ssl: {err}");

    let mut p = ParamStore::new(0);
    p.insert("mu", random(&mut rng, &[4, 1]));
    p.insert("lv", random(&mut rng, &[4, 1]));
    let err = grad_check(
        |g| {
            let mu = g.param("mu")?;
            let lv = g.param("lv")?;
            kl_divergence(g, mu, lv)
        },
        &p,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "kl: {err}");
}
