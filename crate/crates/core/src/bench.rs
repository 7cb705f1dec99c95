//! The standard synthetic benchmark: dataset layout and the end-to-end protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricReport};
use crate::preprocess::{cycles_from_recording, CycleSample, PreprocessConfig};
use crate::synth::{random_windows, split_dataset, synth_recording, ApplianceProfile, Scenario, ScheduleEntry};
use crate::train::{pretrain, train_supervised, EpochRecord, Example, Model, ModelConfig, TaskSnapshot, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub fs: f64,
    pub num_windows: usize,
    /// seconds per window
    pub window_s: f64,
    /// spans per window, each with its own active set
    pub segments: usize,
    pub min_active: usize,
    pub max_active: usize,
    pub noise_std: f64,
    pub split_ratio: f64,
    /// seconds of steady solo running per appliance, for decomposition priors
    pub solo_s: f64,
    /// steady two-appliance recordings for decomposition
    pub num_mixes: usize,
    pub mix_s: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            fs: 10_000.0,
            num_windows: 88,
            window_s: 0.5,
            segments: 3,
            min_active: 1,
            max_active: 3,
            noise_std: 0.01,
            split_ratio: 0.8,
            solo_s: 4.2,
            num_mixes: 10,
            mix_s: 2.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.window_s > 0.0 && self.solo_s > 0.0 && self.mix_s > 0.0) {
            return Err(Error::invalid("fs and durations must be positive"));
        }
        if self.num_windows < 2 || self.segments == 0 {
            return Err(Error::invalid("need ≥ 2 windows and ≥ 1 segment"));
        }
        if self.min_active == 0 || self.min_active > self.max_active {
            return Err(Error::invalid("need 1 ≤ min_active ≤ max_active"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::invalid("split_ratio must lie in (0, 1)"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be ≥ 0"));
        }
        Ok(())
    }
}

/// Classification windows split 8:2 by window, so no window feeds both sides.
pub fn classification_windows(
    cfg: &DatasetConfig,
    profiles: &[ApplianceProfile],
    seed: u64,
) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    cfg.validate()?;
    let windows = random_windows(
        profiles,
        cfg.num_windows,
        cfg.window_s,
        cfg.segments,
        cfg.min_active..=cfg.max_active,
        cfg.noise_std,
        cfg.fs,
        seed,
    );
    split_dataset(windows, cfg.split_ratio, seed)
}

fn steady(profiles: &[ApplianceProfile], on: &[usize], seconds: f64, cfg: &DatasetConfig, seed: u64) -> Scenario {
    Scenario {
        profiles: profiles.to_vec(),
        schedule: on
            .iter()
            .map(|&a| ScheduleEntry {
                appliance: a,
                on: 0.0,
                off: seconds,
            })
            .collect(),
        duration: seconds,
        noise_std: cfg.noise_std,
        seed,
        fs: cfg.fs,
    }
}

/// One steady recording per appliance.
pub fn solo_recordings(cfg: &DatasetConfig, profiles: &[ApplianceProfile], seed: u64) -> Vec<Scenario> {
    (0..profiles.len())
        .map(|a| steady(profiles, &[a], cfg.solo_s, cfg, crate::rng::derive_seed(seed, &format!("solo.{a}"))))
        .collect()
}

/// Steady recordings of distinct appliance pairs, cycling through all pairs.
pub fn mix_recordings(cfg: &DatasetConfig, profiles: &[ApplianceProfile], seed: u64) -> Vec<Scenario> {
    let k = profiles.len();
    let pairs: Vec<[usize; 2]> = (0..k).flat_map(|a| (a + 1..k).map(move |b| [a, b])).collect();
    if pairs.is_empty() {
        return Vec::new();
    }
    (0..cfg.num_mixes)
        .map(|j| {
            let p = pairs[j % pairs.len()];
            steady(profiles, &p, cfg.mix_s, cfg, crate::rng::derive_seed(seed, &format!("mix.{j}")))
        })
        .collect()
}

pub fn cycle_samples(scenarios: &[Scenario], pre: &PreprocessConfig) -> Result<Vec<Vec<CycleSample>>> {
    scenarios
        .iter()
        .map(|s| cycles_from_recording(&synth_recording(s)?, pre))
        .collect()
}

pub fn examples(scenarios: &[Scenario], pre: &PreprocessConfig) -> Result<Vec<Example>> {
    Ok(cycle_samples(scenarios, pre)?
        .iter()
        .flat_map(|s| Example::from_samples(s))
        .collect())
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub model: Model,
    pub snapshot: TaskSnapshot,
    pub theta0: Option<crate::nn::ParamStore>,
    pub ssl_log: Vec<EpochRecord>,
    pub train_log: Vec<EpochRecord>,
    pub report: MetricReport,
}

/// SSL pretraining on the training cycles (when `ssl`), then supervised
/// fine-tuning, then scoring on `test`.
pub fn run_pipeline(
    train: &[Example],
    test: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ssl: bool,
) -> Result<PipelineOutcome> {
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let (theta0, ssl_log) = if ssl {
        let cycles: Vec<_> = train.iter().map(|e| e.cycle.clone()).collect();
        let (t0, log) = pretrain(&mut model, &cycles, cfg)?;
        (Some(t0), log)
    } else {
        (None, Vec::new())
    };
    let (snapshot, train_log) = train_supervised(&mut model, train, cfg, theta0.as_ref(), "base")?;
    let (report, _) = evaluate_model(&model, test, 0.5)?;
    Ok(PipelineOutcome {
        model,
        snapshot,
        theta0,
        ssl_log,
        train_log,
        report,
    })
}

/// Median of a small sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
