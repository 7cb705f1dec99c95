//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Failing criteria are reported, not hidden. The process exits nonzero on a
//! FAIL only when `ACCEPTANCE_STRICT=1`, so the workspace test run still
//! completes and shows every line.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nilm_cli::checks::{self, Check};
use nilm_cli::commands::{run_decompose, simulate, MaskSource};
use nilm_core::bench::{classification_windows, examples, median, run_pipeline, DatasetConfig};
use nilm_core::decompose::{decompose, energy, vae_train, PowerWindow, SoloWindow, VaeConfig};
use nilm_core::eval::{baseline_rawseq, evaluate_model, multilabel_metrics, BaselineConfig};
use nilm_core::nn::ParamStore;
use nilm_core::preprocess::PreprocessConfig;
use nilm_core::rng::derive_seed;
use nilm_core::synth::{random_windows, split_dataset, standard_profiles, ApplianceProfile, Scenario};
use nilm_core::train::{continual_update, predict, train_supervised, Example, Model, ModelConfig, TrainConfig};

const SEEDS: [u64; 3] = [1, 2, 3];

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn fmt3(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

struct BenchSeed {
    full_f1: f64,
    base_f1: f64,
    ssl_f1: f64,
    rand_f1: f64,
    cycles: usize,
    pipeline_s: f64,
}

fn bench_seed(seed: u64) -> nilm_core::Result<BenchSeed> {
    let d = DatasetConfig::default();
    let profiles = standard_profiles();
    let (tr, te) = classification_windows(&d, &profiles, derive_seed(seed, "dataset"))?;
    let pre = PreprocessConfig::default_for(d.fs);
    let train = examples(&tr, &pre)?;
    let test = examples(&te, &pre)?;
    let tc = TrainConfig {
        seed: derive_seed(seed, "train"),
        ..TrainConfig::default()
    };
    let mc = ModelConfig::new(profiles.len());

    let t0 = Instant::now();
    let out = run_pipeline(&train, &test, &mc, &tc, true)?;
    let pipeline_s = t0.elapsed().as_secs_f64();

    let (base, _) = baseline_rawseq(&train, &test, &BaselineConfig::default(), &tc)?;

    // 10% of the labels; the front end was pretrained on every training cycle without labels
    let (few, _) = split_dataset(train.clone(), 0.1, derive_seed(seed, "few"))?;
    let theta0 = out.theta0.as_ref().expect("ssl run keeps theta0");
    let mut with_ssl = Model::new(mc.clone(), tc.seed)?;
    train_supervised(&mut with_ssl, &few, &tc, Some(theta0), "few.ssl")?;
    let mut random = Model::new(mc, tc.seed)?;
    train_supervised(&mut random, &few, &tc, None, "few.rand")?;
    Ok(BenchSeed {
        full_f1: out.report.f1_macro,
        base_f1: base.f1_macro,
        ssl_f1: evaluate_model(&with_ssl, &test, 0.5)?.0.f1_macro,
        rand_f1: evaluate_model(&random, &test, 0.5)?.0.f1_macro,
        cycles: train.len() + test.len(),
        pipeline_s,
    })
}

fn benchmark() -> Vec<Check> {
    let mut runs = Vec::new();
    for s in SEEDS {
        match bench_seed(s) {
            Ok(r) => runs.push(r),
            Err(e) => {
                let fail = |n: &str| check(n, false, format!("seed {s}: {e}"));
                return vec![fail("4 synthetic benchmark"), fail("5 ordering vs raw-sequence baseline"), fail("6 SSL benefit at 10% labels")];
            }
        }
    }
    let col = |f: fn(&BenchSeed) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let (full, base, ssl, rand) = (col(|r| r.full_f1), col(|r| r.base_f1), col(|r| r.ssl_f1), col(|r| r.rand_f1));
    let total_s: f64 = runs.iter().map(|r| r.pipeline_s).sum();
    let cycles = runs.iter().map(|r| r.cycles.to_string()).collect::<Vec<_>>().join("/");
    vec![
        check(
            "4 synthetic benchmark",
            median(&full) >= 0.90 && total_s <= 900.0,
            format!(
                "macro-F1 median {:.4} (seeds: {}) target ≥ 0.90; {cycles} labeled cycles; pipeline time {total_s:.0} s",
                median(&full),
                fmt3(&full)
            ),
        ),
        check(
            "5 ordering vs raw-sequence baseline",
            median(&full) >= median(&base),
            format!(
                "full {:.4} vs baseline {:.4} (baseline seeds: {})",
                median(&full),
                median(&base),
                fmt3(&base)
            ),
        ),
        check(
            "6 SSL benefit at 10% labels",
            median(&ssl) >= median(&rand),
            format!(
                "pretrained init {:.4} vs random init {:.4} (seeds: {} | {})",
                median(&ssl),
                median(&rand),
                fmt3(&ssl),
                fmt3(&rand)
            ),
        ),
    ]
}

struct EwcSeed {
    drop_0: f64,
    drop_100: f64,
    drift_all: f64,
    drift_informed: f64,
    within: f64,
}

fn windows_with(profiles: &[ApplianceProfile], count: usize, seed: u64, need: Option<usize>) -> Vec<Scenario> {
    let d = DatasetConfig::default();
    let pool = random_windows(profiles, count * 4, d.window_s, d.segments, d.min_active..=d.max_active, d.noise_std, d.fs, seed);
    pool.into_iter()
        .filter(|s| need.map_or(true, |a| s.schedule.iter().any(|e| e.appliance == a)))
        .take(count)
        .collect()
}

fn old_f1(model: &Model, test: &[Example], k_old: usize) -> nilm_core::Result<f64> {
    let mut preds = Vec::new();
    for e in test {
        preds.push(predict(model, &e.cycle, 0.5)?.on_off[..k_old].to_vec());
    }
    let truth: Vec<Vec<u8>> = test.iter().map(|e| e.label.clone()).collect();
    Ok(multilabel_metrics(&truth, &preds)?.f1_macro)
}

/// Largest |θ − θ*| over entries that existed before the head grew.
fn drift(after: &ParamStore, star: &ParamStore, fisher: &ParamStore, floor: f64) -> (f64, usize, usize) {
    let (mut worst, mut n, mut ok) = (0.0f64, 0, 0);
    for (name, old) in star.iter() {
        let new = after.get(name).expect("same names");
        let f = fisher.get(name).expect("same names");
        for i in 0..old.data().len() {
            if f.data()[i] <= floor {
                continue;
            }
            let d = (new.data()[i] - old.data()[i]).abs();
            worst = worst.max(d);
            n += 1;
            ok += usize::from(d <= 1e-3);
        }
    }
    (worst, n, ok)
}

fn ewc_seed(seed: u64) -> nilm_core::Result<EwcSeed> {
    let all = standard_profiles();
    let old = &all[..5];
    let pre = PreprocessConfig::default_for(DatasetConfig::default().fs);
    let a = windows_with(old, 40, derive_seed(seed, "phase_a"), None);
    let (a_train, a_test) = split_dataset(a, 0.8, derive_seed(seed, "phase_a.split"))?;
    let b = windows_with(&all, 16, derive_seed(seed, "phase_b"), Some(5));
    let (a_train, a_test, b_train) = (examples(&a_train, &pre)?, examples(&a_test, &pre)?, examples(&b, &pre)?);

    let tc = TrainConfig {
        seed: derive_seed(seed, "ewc"),
        epochs: 8,
        ..TrainConfig::default()
    };
    let mut base = Model::new(ModelConfig::new(5), tc.seed)?;
    let (snap, _) = train_supervised(&mut base, &a_train, &tc, None, "phase_a")?;
    let before = old_f1(&base, &a_test, 5)?;

    let mut drops = BTreeMap::new();
    for lambda in [0.0, 100.0] {
        let mut m = base.clone();
        let cfg = TrainConfig { lambda_ewc: lambda, ..tc.clone() };
        continual_update(&mut m, &snap, &b_train, &cfg, "phase_b")?;
        drops.insert(lambda.to_bits(), before - old_f1(&m, &a_test, 5)?);
    }
    let mut pinned = base.clone();
    let cfg = TrainConfig { lambda_ewc: 1e9, ..tc.clone() };
    continual_update(&mut pinned, &snap, &b_train, &cfg, "phase_b")?;
    let (drift_all, n, ok) = drift(&pinned.params, &snap.theta_star, &snap.fisher, -1.0);
    let (drift_informed, _, _) = drift(&pinned.params, &snap.theta_star, &snap.fisher, 1e-8);
    Ok(EwcSeed {
        drop_0: drops[&0.0f64.to_bits()],
        drop_100: drops[&100.0f64.to_bits()],
        drift_all,
        drift_informed,
        within: ok as f64 / n as f64,
    })
}

fn ewc() -> Check {
    let name = "7 EWC forgetting control";
    let t0 = Instant::now();
    let mut runs = Vec::new();
    for s in SEEDS {
        match ewc_seed(s) {
            Ok(r) => runs.push(r),
            Err(e) => return check(name, false, format!("seed {s}: {e}")),
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let col = |f: fn(&EwcSeed) -> f64| runs.iter().map(f).collect::<Vec<_>>();
    let (d0, d100) = (median(&col(|r| r.drop_0)), median(&col(|r| r.drop_100)));
    let drift_all = median(&col(|r| r.drift_all));
    let drift_informed = median(&col(|r| r.drift_informed));
    let within = median(&col(|r| r.within));
    let ordering = d100 <= d0;
    let pinned = drift_all <= 1e-3;
    check(
        name,
        ordering && pinned && secs <= 600.0,
        format!(
            "old-task drop λ=100 {d100:.4} vs λ=0 {d0:.4} ({}); λ=1e9 max drift {drift_all:.2e} ({}), \
             {:.2}% of entries within 1e-3, max drift where F > 1e-8 {drift_informed:.2e}; {secs:.0} s",
            if ordering { "ok" } else { "reversed" },
            if pinned { "≤ 1e-3" } else { "> 1e-3: entries with near-zero Fisher move freely under Adam" },
            100.0 * within
        ),
    )
}

fn decomposition() -> Check {
    let name = "8 decomposition";
    let r = (|| -> anyhow::Result<(bool, String)> {
        let tmp = tempfile::tempdir()?;
        let cfg_path = tmp.path().join("cfg.json");
        // only the solo and mix recordings matter here
        std::fs::write(&cfg_path, r#"{"seed": 5, "dataset": {"num_windows": 2}}"#)?;
        let run = tmp.path().join("run");
        simulate(&run, Some(&cfg_path), None)?;
        run_decompose(&run, MaskSource::Labels)?;
        let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("reports/decomposition.json"))?)?;
        let per = rep["per_appliance"].as_array().cloned().unwrap_or_default();
        let worst = per
            .iter()
            .map(|v| v["relative_mae"].as_f64().unwrap_or(f64::INFINITY))
            .fold(0.0f64, f64::max);
        let detail: Vec<String> = per
            .iter()
            .map(|v| format!("{} {:.1}%", v["appliance"].as_str().unwrap_or("?"), 100.0 * v["relative_mae"].as_f64().unwrap_or(f64::NAN)))
            .collect();

        // off appliances give exact zeros
        let solo: Vec<SoloWindow> = (0..2)
            .map(|a| SoloWindow {
                appliance: a,
                power: vec![100.0 * (a + 1) as f64; 10],
            })
            .collect();
        let vcfg = VaeConfig {
            window: 10,
            epochs: 5,
            ..VaeConfig::default()
        };
        let (vae, _) = vae_train(&solo, &[], 2, &vcfg)?;
        let parts = decompose(&vae, &PowerWindow::new(vec![150.0; 10], vec![1, 0])?)?;
        let zeros = parts[1].iter().all(|&v| v == 0.0);

        let e = energy(&vec![100.0; 180_000], 0.02)?;
        let hour = e.watt_hours == 100.0;
        Ok((
            !per.is_empty() && worst <= 0.10 && zeros && hour,
            format!(
                "held-out mix MAE / mean on-power: {} (worst {:.1}%, target ≤ 10%); off output exactly 0: {zeros}; 100 W × 1 h = {} Wh",
                detail.join(", "),
                100.0 * worst,
                e.watt_hours
            ),
        ))
    })();
    match r {
        Ok((p, d)) => check(name, p, d),
        Err(e) => check(name, false, format!("error: {e:#}")),
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = std::fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), bytes);
            }
        }
    }
    out
}

fn determinism() -> Check {
    let name = "9 determinism";
    let r = (|| -> anyhow::Result<(bool, String)> {
        let tmp = tempfile::tempdir()?;
        let cfg = tmp.path().join("cfg.json");
        std::fs::write(
            &cfg,
            r#"{
  "seed": 21,
  "dataset": {"num_windows": 8, "window_s": 0.3, "solo_s": 1.2, "num_mixes": 4, "mix_s": 0.8},
  "preprocess": {"filter": {"cutoff_hz": 1000.0, "taps": 31, "window": "hamming"}, "n_win": 5, "n_cyc": 16, "pf_window": null},
  "model": {"signature": {"d_i": 4, "d_v": 4, "d_pf": 2, "d_fus": 4, "n_cyc": 16, "tcn_dilations": [1, 2], "h": 8, "w": 8, "s": 16},
            "conv_channels": [4, 4], "hidden": 8, "ssl_segments": 2},
  "train": {"epochs": 2, "ssl_epochs": 1, "batch_size": 8},
  "vae": {"window": 10, "epochs": 20, "hidden": 16, "d_z": 4}
}"#,
        )?;
        let bin = env!("CARGO_BIN_EXE_nilm");
        let run_all = |dir: &Path, data: &Path| -> anyhow::Result<()> {
            let d = dir.to_str().unwrap();
            let steps: Vec<Vec<&str>> = vec![
                vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", d],
                vec!["pretrain", "--run", d],
                vec!["train", "--run", d],
                vec!["eval", "--run", d, "--baseline"],
                vec!["render-signature", "--run", d],
                vec!["decompose", "--run", d],
                vec!["learn-new", "--run", d, "--data", data.to_str().unwrap(), "--task", "again"],
            ];
            for s in steps {
                let out = Command::new(bin).args(&s).output()?;
                if !out.status.success() {
                    anyhow::bail!("{s:?}: {}", String::from_utf8_lossy(&out.stderr));
                }
            }
            Ok(())
        };
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        // learn-new reads the first run's own dataset, so it is simulated up front
        let data = tmp.path().join("data");
        let out = Command::new(bin)
            .args(["simulate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap(), "--seed", "22"])
            .output()?;
        anyhow::ensure!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        run_all(&a, &data)?;
        run_all(&b, &data)?;
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        let differing: Vec<&String> = sa.keys().filter(|k| sb.get(*k) != sa.get(*k)).collect();
        let same_set = sa.len() == sb.len();
        Ok((
            same_set && differing.is_empty(),
            format!(
                "{} files compared across two full runs of every subcommand; {} differ",
                sa.len(),
                differing.len()
            ),
        ))
    })();
    match r {
        Ok((p, d)) => check(name, p, d),
        Err(e) => check(name, false, format!("error: {e:#}")),
    }
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let mut results = Vec::new();
    let numbered = |n: &str, mut c: Check| {
        c.name = format!("{n} {}", c.name);
        c
    };
    let report = |c: &Check| println!("{}", c.line());
    for (n, c) in [
        ("1", checks::gradient_integrity as fn() -> Check),
        ("2", checks::preprocessing_exactness),
        ("3", checks::signature_algebra),
    ] {
        let c = numbered(n, c());
        report(&c);
        results.push(c);
    }
    for c in benchmark() {
        report(&c);
        results.push(c);
    }
    for f in [ewc as fn() -> Check, decomposition, determinism] {
        let c = f();
        report(&c);
        results.push(c);
    }
    let passed = results.iter().filter(|c| c.passed).count();
    println!(
        "acceptance: {passed}/{} criteria pass ({:.0} s)",
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
