#![allow(dead_code)]

use nilm_core::preprocess::{cycles_from_recording, PreprocessConfig};
use nilm_core::signature::SignatureConfig;
use nilm_core::synth::{standard_profiles, synth_recording, ApplianceProfile, Scenario, ScheduleEntry};
use nilm_core::train::{Example, ModelConfig, TrainConfig};

pub const FS: f64 = 10_000.0;

pub fn tiny_model(k: usize) -> ModelConfig {
    ModelConfig {
        signature: SignatureConfig {
            d_i: 4,
            d_v: 4,
            d_pf: 2,
            d_fus: 4,
            n_cyc: 16,
            tcn_dilations: vec![1, 2],
            h: 8,
            w: 8,
            s: 16,
            ..SignatureConfig::default()
        },
        conv_channels: vec![4, 4],
        hidden: 8,
        num_classes: k,
        ssl_segments: 2,
    }
}

pub fn quick_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        epochs,
        batch_size: 4,
        lambda_ewc: 0.0,
        seed,
        ssl_epochs: 0,
    }
}

/// Cycles of a recording in which each listed appliance runs for the whole window.
pub fn steady_examples(profiles: &[ApplianceProfile], on: &[usize], seconds: f64, seed: u64) -> Vec<Example> {
    let schedule = on
        .iter()
        .map(|&a| ScheduleEntry {
            appliance: a,
            on: 0.0,
            off: seconds,
        })
        .collect();
    let sc = Scenario {
        profiles: profiles.to_vec(),
        schedule,
        duration: seconds,
        noise_std: 0.01,
        seed,
        fs: FS,
    };
    let rec = synth_recording(&sc).expect("valid scenario");
    let mut pre = PreprocessConfig::default_for(FS);
    pre.n_cyc = 16;
    let samples = cycles_from_recording(&rec, &pre).expect("cycles");
    Example::from_samples(&samples)
}

/// Two archetypes (heater, charger), one at a time, labelled one-hot.
pub fn two_archetypes(seed: u64) -> Vec<Example> {
    let all = standard_profiles();
    let profiles = vec![all[0].clone(), all[2].clone()];
    let mut out = steady_examples(&profiles, &[0], 0.3, seed);
    out.extend(steady_examples(&profiles, &[1], 0.3, seed + 1));
    out
}

/// Per-cycle total power and per-appliance power (K series) of a steady recording.
pub fn steady_power(
    profiles: &[ApplianceProfile],
    on: &[usize],
    seconds: f64,
    seed: u64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let schedule = on
        .iter()
        .map(|&a| ScheduleEntry {
            appliance: a,
            on: 0.0,
            off: seconds,
        })
        .collect();
    let sc = Scenario {
        profiles: profiles.to_vec(),
        schedule,
        duration: seconds,
        noise_std: 0.01,
        seed,
        fs: FS,
    };
    let rec = synth_recording(&sc).expect("valid scenario");
    let mut pre = PreprocessConfig::default_for(FS);
    pre.n_cyc = 16;
    let samples = cycles_from_recording(&rec, &pre).expect("cycles");
    let total = samples.iter().map(|s| s.power).collect();
    let per = (0..profiles.len())
        .map(|k| samples.iter().map(|s| s.appliance_power.as_ref().unwrap()[k]).collect())
        .collect();
    (total, per)
}
