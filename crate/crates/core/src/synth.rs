//! Synthetic bus recordings, CSV ingestion and dataset splitting.

use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

pub const GRID_HZ: f64 = 50.0;
pub const GRID_V_RMS: f64 = 230.0;
pub const DEFAULT_FS: f64 = 50_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplianceFamily {
    Resistive,
    Inductive,
    RectifierNonlinear,
    PhaseControlled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub order: u32,
    pub relative_amplitude: f64,
    /// radians
    pub phase: f64,
}

impl Harmonic {
    pub fn new(order: u32, relative_amplitude: f64, phase: f64) -> Self {
        Self {
            order,
            relative_amplitude,
            phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceProfile {
    pub id: String,
    pub family: ApplianceFamily,
    /// watts
    pub base_power: f64,
    pub current_harmonics: Vec<Harmonic>,
    /// Lag of the whole current waveform behind the voltage, radians.
    pub phase_shift: f64,
    pub on_transient_ms: f64,
}

impl ApplianceProfile {
    pub fn resistive(id: &str, base_power: f64) -> Self {
        Self {
            id: id.into(),
            family: ApplianceFamily::Resistive,
            base_power,
            current_harmonics: vec![Harmonic::new(1, 1.0, 0.0)],
            phase_shift: 0.0,
            on_transient_ms: 2.0,
        }
    }

    pub fn inductive(id: &str, base_power: f64, lag: f64, third: f64) -> Self {
        let mut current_harmonics = vec![Harmonic::new(1, 1.0, 0.0)];
        if third > 0.0 {
            current_harmonics.push(Harmonic::new(3, third, 0.0));
        }
        Self {
            id: id.into(),
            family: ApplianceFamily::Inductive,
            base_power,
            current_harmonics,
            phase_shift: lag,
            on_transient_ms: 40.0,
        }
    }

    /// Capacitor-input rectifier: narrow current pulses near the voltage peaks.
    pub fn rectifier(id: &str, base_power: f64, decay: f64) -> Self {
        let current_harmonics = (0..7)
            .map(|i| {
                let order = 2 * i + 1;
                let amp = decay.powi(i as i32);
                // alternate sign so the odd harmonics add up at the peaks
                let phase = if i % 2 == 0 { 0.0 } else { PI };
                Harmonic::new(order, amp, phase)
            })
            .collect();
        Self {
            id: id.into(),
            family: ApplianceFamily::RectifierNonlinear,
            base_power,
            current_harmonics,
            phase_shift: 0.0,
            on_transient_ms: 5.0,
        }
    }

    /// Leading-edge dimmer with the given firing angle in radians.
    pub fn phase_controlled(id: &str, base_power: f64, firing_angle: f64, max_order: u32) -> Self {
        Self {
            id: id.into(),
            family: ApplianceFamily::PhaseControlled,
            base_power,
            current_harmonics: chopped_sine_harmonics(firing_angle, max_order),
            phase_shift: 0.0,
            on_transient_ms: 1.0,
        }
    }

    pub fn highest_order(&self) -> u32 {
        self.current_harmonics.iter().map(|h| h.order).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("appliance `{}`: {m}", self.id)));
        if !(self.base_power > 0.0) {
            return bad(format!("base_power must be > 0, got {}", self.base_power));
        }
        if !(self.on_transient_ms >= 0.0) {
            return bad("on_transient_ms must be ≥ 0".into());
        }
        let mut orders: Vec<u32> = self.current_harmonics.iter().map(|h| h.order).collect();
        orders.sort_unstable();
        if orders.windows(2).any(|w| w[0] == w[1]) {
            return bad("harmonic orders must be unique".into());
        }
        if orders.first() == Some(&0) {
            return bad("harmonic orders must be ≥ 1".into());
        }
        if self.current_harmonics.iter().any(|h| !(h.relative_amplitude >= 0.0)) {
            return bad("relative amplitudes must be ≥ 0".into());
        }
        let Some(fund) = self.fundamental() else {
            return bad("a fundamental (order 1) with positive amplitude is required".into());
        };
        if (fund.phase - self.phase_shift).cos() <= 0.05 {
            return bad("fundamental is too far out of phase to draw active power".into());
        }
        Ok(())
    }

    fn fundamental(&self) -> Option<&Harmonic> {
        self.current_harmonics
            .iter()
            .find(|h| h.order == 1 && h.relative_amplitude > 0.0)
    }

    /// Current in amperes at grid angle `theta` (radians), fully switched on.
    fn steady_current(&self, theta: f64, amp_per_rel: f64) -> f64 {
        self.current_harmonics
            .iter()
            .map(|h| {
                let o = f64::from(h.order);
                amp_per_rel * h.relative_amplitude * (o * (theta - self.phase_shift) + h.phase).sin()
            })
            .sum()
    }

    /// Amperes of peak current per unit of relative amplitude that yields `base_power`.
    fn amp_per_rel(&self) -> f64 {
        let fund = self.fundamental().expect("validated");
        let pf = (fund.phase - self.phase_shift).cos();
        let i1_peak = 2.0 * self.base_power / (SQRT_2 * GRID_V_RMS * pf);
        i1_peak / fund.relative_amplitude
    }
}

/// Fourier series of a sine chopped before `firing_angle` in each half cycle,
/// odd orders up to `max_order`, relative to the fundamental.
pub fn chopped_sine_harmonics(firing_angle: f64, max_order: u32) -> Vec<Harmonic> {
    const STEPS: usize = 20_000;
    let dtheta = 2.0 * PI / STEPS as f64;
    let wave = |theta: f64| {
        let local = theta % PI;
        if local >= firing_angle {
            theta.sin()
        } else {
            0.0
        }
    };
    let coeff = |n: f64| {
        let (mut a, mut b) = (0.0, 0.0);
        for s in 0..STEPS {
            let th = (s as f64 + 0.5) * dtheta;
            let w = wave(th);
            a += w * (n * th).cos();
            b += w * (n * th).sin();
        }
        (a * dtheta / PI, b * dtheta / PI)
    };
    let (a1, b1) = coeff(1.0);
    let c1 = a1.hypot(b1);
    (1..=max_order)
        .step_by(2)
        .map(|n| {
            let (a, b) = if n == 1 { (a1, b1) } else { coeff(f64::from(n)) };
            Harmonic::new(n, a.hypot(b) / c1, a.atan2(b))
        })
        .collect()
}

/// The six archetypes of the standard benchmark.
pub fn standard_profiles() -> Vec<ApplianceProfile> {
    vec![
        ApplianceProfile::resistive("heater", 600.0),
        ApplianceProfile::inductive("pump", 350.0, 0.6, 0.05),
        ApplianceProfile::rectifier("charger", 200.0, 0.8),
        ApplianceProfile::phase_controlled("dimmer", 250.0, PI / 2.0, 13),
        ApplianceProfile::inductive("compressor", 300.0, 1.05, 0.12),
        {
            let mut p = ApplianceProfile::rectifier("microwave", 450.0, 0.45);
            p.phase_shift = -0.35;
            p
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub appliance: usize,
    /// seconds
    pub on: f64,
    /// seconds
    pub off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub profiles: Vec<ApplianceProfile>,
    pub schedule: Vec<ScheduleEntry>,
    /// seconds
    pub duration: f64,
    /// Noise standard deviation relative to nominal voltage and full-load current.
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_fs")]
    pub fs: f64,
}

fn default_fs() -> f64 {
    DEFAULT_FS
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::invalid("scenario needs at least one appliance profile"));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        if !(self.duration > 0.0) {
            return Err(Error::invalid("duration must be > 0"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be ≥ 0"));
        }
        for e in &self.schedule {
            if e.appliance >= self.profiles.len() {
                return Err(Error::invalid(format!(
                    "schedule refers to appliance {} but only {} profiles exist",
                    e.appliance,
                    self.profiles.len()
                )));
            }
            if !(0.0 <= e.on && e.on < e.off && e.off <= self.duration) {
                return Err(Error::invalid(format!(
                    "schedule entry {}..{} s violates 0 ≤ on < off ≤ {}",
                    e.on, e.off, self.duration
                )));
            }
        }
        let highest = self.profiles.iter().map(|p| p.highest_order()).max().unwrap_or(1);
        let nyquist_need = 2.0 * f64::from(highest) * GRID_HZ;
        if !(self.fs > nyquist_need) {
            return Err(Error::invalid(format!(
                "fs = {} Hz is too low for harmonic order {highest} (need > {nyquist_need} Hz)",
                self.fs
            )));
        }
        Ok(())
    }

    pub fn num_appliances(&self) -> usize {
        self.profiles.len()
    }
}

/// Synchronised bus measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub fs: f64,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    /// `labels[k][n]` is 1 while appliance `k` runs at sample `n`.
    pub labels: Option<Vec<Vec<u8>>>,
    /// `appliance_power[k][n]`: instantaneous power drawn by appliance `k`, watts.
    pub appliance_power: Option<Vec<Vec<f64>>>,
}

impl RawRecording {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn num_appliances(&self) -> Option<usize> {
        self.labels.as_ref().map(Vec::len)
    }

    pub fn label_at(&self, n: usize) -> Option<Vec<u8>> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().map(|l| l[n]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::invalid("fs must be > 0"));
        }
        if self.current.len() != self.voltage.len() {
            return Err(Error::invalid(format!(
                "current has {} samples but voltage has {}",
                self.current.len(),
                self.voltage.len()
            )));
        }
        let n = self.len();
        if let Some(ls) = &self.labels {
            if ls.iter().any(|l| l.len() != n) {
                return Err(Error::invalid("label series length differs from sample count"));
            }
        }
        if let Some(ps) = &self.appliance_power {
            if ps.iter().any(|p| p.len() != n) {
                return Err(Error::invalid("power series length differs from sample count"));
            }
            if let Some(ls) = &self.labels {
                if ls.len() != ps.len() {
                    return Err(Error::invalid("label and power series disagree on appliance count"));
                }
            }
        }
        Ok(())
    }

    /// Writes `t,current,voltage[,label_k…]` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let k = self.num_appliances().unwrap_or(0);
        write!(w, "t,current,voltage").map_err(io)?;
        for i in 0..k {
            write!(w, ",label_{i}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for n in 0..self.len() {
            write!(w, "{},{},{}", n as f64 / self.fs, self.current[n], self.voltage[n]).map_err(io)?;
            if let Some(ls) = &self.labels {
                for l in ls {
                    write!(w, ",{}", l[n]).map_err(io)?;
                }
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Renders the scenario's bus current and voltage.
pub fn synth_recording(scenario: &Scenario) -> Result<RawRecording> {
    scenario.validate()?;
    let fs = scenario.fs;
    let n = (scenario.duration * fs).round() as usize;
    let k = scenario.num_appliances();
    let omega = 2.0 * PI * GRID_HZ;
    let v_peak = SQRT_2 * GRID_V_RMS;

    let mut rng = rng_for(scenario.seed, "synth.noise");
    let full_load_current: f64 =
        scenario.profiles.iter().map(|p| p.base_power).sum::<f64>() / GRID_V_RMS;
    let v_noise = scenario.noise_std * v_peak;
    let i_noise = scenario.noise_std * full_load_current;

    let clean_v: Vec<f64> = (0..n).map(|s| v_peak * (omega * s as f64 / fs).sin()).collect();
    let mut labels = vec![vec![0u8; n]; k];
    let mut power = vec![vec![0.0; n]; k];
    let mut current = vec![0.0; n];

    for (a, profile) in scenario.profiles.iter().enumerate() {
        let amp = profile.amp_per_rel();
        let tau = profile.on_transient_ms / 1000.0;
        for entry in scenario.schedule.iter().filter(|e| e.appliance == a) {
            let first = (entry.on * fs).ceil() as usize;
            let last = ((entry.off * fs).ceil() as usize).min(n);
            for s in first..last {
                let t = s as f64 / fs;
                let envelope = if tau > 0.0 {
                    1.0 - (-(t - entry.on) / tau).exp()
                } else {
                    1.0
                };
                let i = envelope * profile.steady_current(omega * t, amp);
                labels[a][s] = 1;
                current[s] += i;
                power[a][s] += clean_v[s] * i;
            }
        }
    }

    let mut voltage = clean_v;
    if scenario.noise_std > 0.0 {
        let vn = Normal::new(0.0, v_noise).map_err(|e| Error::invalid(e.to_string()))?;
        let inoise = Normal::new(0.0, i_noise).map_err(|e| Error::invalid(e.to_string()))?;
        for s in 0..n {
            voltage[s] += vn.sample(&mut rng);
            current[s] += inoise.sample(&mut rng);
        }
    }

    let rec = RawRecording {
        fs,
        current,
        voltage,
        labels: Some(labels),
        appliance_power: Some(power),
    };
    rec.validate()?;
    Ok(rec)
}

/// Parses a `t,current,voltage[,label_0..label_{K-1}]` file sampled at `fs`.
pub fn ingest_csv(path: &Path, fs: f64) -> Result<RawRecording> {
    if !(fs > 0.0) {
        return Err(Error::invalid("fs must be > 0"));
    }
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ["t", "current", "voltage"] {
        return Err(parse_err(1, format!("expected header `t,current,voltage[,label_k…]`, found `{}`", cols.join(","))));
    }
    let k = cols.len() - 3;
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("label_{i}") {
            return Err(parse_err(1, format!("column {} should be `label_{i}`, found `{c}`", i + 4)));
        }
    }

    let dt = 1.0 / fs;
    let mut current = Vec::new();
    let mut voltage = Vec::new();
    let mut labels = vec![Vec::new(); k];
    let mut prev_t: Option<f64> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", cols.len(), record.len())));
        }
        let num = |idx: usize| -> Result<f64> {
            let cell = &record[idx];
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("column `{}`: `{cell}` is not a finite number", cols[idx])))
        };
        let t = num(0)?;
        if let Some(p) = prev_t {
            if ((t - p) - dt).abs() > 1e-6 * dt {
                return Err(parse_err(line, format!("timestamp step {} s deviates from 1/fs = {dt} s", t - p)));
            }
        }
        prev_t = Some(t);
        current.push(num(1)?);
        voltage.push(num(2)?);
        for (i, l) in labels.iter_mut().enumerate() {
            l.push(u8::from(num(3 + i)? > 0.5));
        }
    }
    let rec = RawRecording {
        fs,
        current,
        voltage,
        labels: (k > 0).then_some(labels),
        appliance_power: None,
    };
    rec.validate()?;
    Ok(rec)
}

/// Shuffles `items` with `seed` and cuts it at `round(ratio·n)`, keeping both sides non-empty.
pub fn split_dataset<T>(mut items: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 items to split, got {}", items.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = items.len();
    let mut rng = rng_for(seed, "split");
    items.shuffle(&mut rng);
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = items.split_off(n_train);
    Ok((items, test))
}

/// Random windows over `profiles` in which between `min_on` and `max_on`
/// appliances run at once. Each window is divided into `segments` spans with
/// an independently drawn active set.
pub fn random_windows(
    profiles: &[ApplianceProfile],
    count: usize,
    window_s: f64,
    segments: usize,
    active: std::ops::RangeInclusive<usize>,
    noise_std: f64,
    fs: f64,
    seed: u64,
) -> Vec<Scenario> {
    let mut rng = rng_for(seed, "windows");
    let k = profiles.len();
    let lo = (*active.start()).clamp(1, k);
    let hi = (*active.end()).clamp(lo, k);
    (0..count)
        .map(|w| {
            let mut schedule = Vec::new();
            let span = window_s / segments as f64;
            let mut prev: Vec<usize> = Vec::new();
            let mut open: Vec<(usize, f64)> = Vec::new();
            for s in 0..segments {
                let n_on = rng.gen_range(lo..=hi);
                let mut idx: Vec<usize> = (0..k).collect();
                idx.shuffle(&mut rng);
                let mut set: Vec<usize> = idx[..n_on].to_vec();
                set.sort_unstable();
                let start = s as f64 * span;
                // close appliances that leave the set
                for &a in &prev {
                    if !set.contains(&a) {
                        let pos = open.iter().position(|(x, _)| *x == a).expect("open");
                        let (_, on) = open.remove(pos);
                        schedule.push(ScheduleEntry { appliance: a, on, off: start });
                    }
                }
                for &a in &set {
                    if !prev.contains(&a) {
                        open.push((a, start));
                    }
                }
                prev = set;
            }
            for (a, on) in open {
                schedule.push(ScheduleEntry { appliance: a, on, off: window_s });
            }
            schedule.sort_by(|x, y| x.on.total_cmp(&y.on).then(x.appliance.cmp(&y.appliance)));
            Scenario {
                profiles: profiles.to_vec(),
                schedule,
                duration: window_s,
                noise_std,
                seed: crate::rng::derive_seed(seed, &format!("window.{w}")),
                fs,
            }
        })
        .collect()
}
