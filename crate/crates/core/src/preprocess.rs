//! Denoising, cycle division and per-cycle normalisation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{RawRecording, GRID_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hamming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub cutoff_hz: f64,
    pub taps: usize,
    pub window: Window,
}

impl FilterSpec {
    /// 1 kHz cutoff with a 4 ms kernel (201 taps at 50 kHz).
    pub fn default_for(fs: f64) -> Self {
        let half = (0.002 * fs).round().max(1.0) as usize;
        Self {
            cutoff_hz: 1_000.0,
            taps: 2 * half + 1,
            window: Window::Hamming,
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < fs / 2.0) {
            return Err(Error::invalid(format!(
                "cutoff {} Hz must lie in (0, fs/2 = {} Hz)",
                self.cutoff_hz,
                fs / 2.0
            )));
        }
        if self.taps == 0 || self.taps % 2 == 0 {
            return Err(Error::invalid(format!("taps must be odd and positive, got {}", self.taps)));
        }
        Ok(())
    }

    /// Windowed-sinc kernel normalised to unit DC gain.
    pub fn kernel(&self, fs: f64) -> Result<Vec<f64>> {
        self.validate(fs)?;
        let m = (self.taps - 1) as f64 / 2.0;
        let fc = self.cutoff_hz / fs;
        let mut h: Vec<f64> = (0..self.taps)
            .map(|n| {
                let x = n as f64 - m;
                let sinc = if x == 0.0 {
                    2.0 * fc
                } else {
                    (2.0 * PI * fc * x).sin() / (PI * x)
                };
                let w = match self.window {
                    Window::Hamming if self.taps > 1 => {
                        0.54 - 0.46 * (2.0 * PI * n as f64 / (self.taps - 1) as f64).cos()
                    }
                    Window::Hamming => 1.0,
                };
                sinc * w
            })
            .collect();
        let dc: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= dc);
        Ok(h)
    }
}

/// Zero-phase FIR low-pass: same-length output, kernel centred on each sample,
/// zero padding beyond the ends.
pub fn lowpass(x: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    let h = spec.kernel(fs)?;
    if x.len() < spec.taps {
        return Err(Error::invalid(format!(
            "series of {} samples is shorter than the {}-tap filter",
            x.len(),
            spec.taps
        )));
    }
    let m = spec.taps / 2;
    let n = x.len();
    let mut y = vec![0.0; n];
    for (t, out) in y.iter_mut().enumerate() {
        // y[t] = Σ_k h[k]·x[t + m − k]
        let k_lo = (t + m + 1).saturating_sub(n);
        let k_hi = (t + m).min(spec.taps - 1);
        let mut acc = 0.0;
        for k in k_lo..=k_hi {
            acc += h[k] * x[t + m - k];
        }
        *out = acc;
    }
    Ok(y)
}

/// Trailing moving average; the first `n_win − 1` outputs average the available prefix.
pub fn moving_mean(x: &[f64], n_win: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("moving_mean of an empty series"));
    }
    if n_win == 0 {
        return Err(Error::invalid("moving-mean window must be ≥ 1"));
    }
    Ok((0..x.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(n_win);
            let w = &x[lo..=t];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}

/// Sample indices where the voltage goes from negative to non-negative.
///
/// Samples within `1e-9·max|v|` of zero count as zero. Crossings closer than
/// half a nominal cycle to the previous boundary are ignored.
pub fn detect_cycles(v: &[f64], fs: f64) -> Result<Vec<usize>> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 || v.len() < 2 {
        return Err(Error::NoCrossing);
    }
    let snap = 1e-9 * peak;
    let s = |n: usize| if v[n].abs() <= snap { 0.0 } else { v[n] };
    let nominal = fs / GRID_HZ;
    let min_gap = (nominal / 2.0) as usize;
    let mut out: Vec<usize> = Vec::new();
    if s(0) == 0.0 && s(1) > 0.0 {
        out.push(0);
    }
    for n in 1..v.len() {
        if s(n - 1) < 0.0 && s(n) >= 0.0 {
            if let Some(&last) = out.last() {
                if n - last < min_gap {
                    continue;
                }
            }
            out.push(n);
        }
    }
    if out.is_empty() {
        return Err(Error::NoCrossing);
    }
    for (i, w) in out.windows(2).enumerate() {
        let gap = w[1] - w[0];
        if (gap as f64 - nominal).abs() > 0.1 * nominal {
            return Err(Error::IrregularCycle {
                index: i + 1,
                gap,
                nominal: nominal.round() as usize,
            });
        }
    }
    Ok(out)
}

/// One power-frequency cycle resampled to a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleTriple {
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub power_factor: Vec<f64>,
    /// first sample of the cycle in the source recording
    pub t0: usize,
    pub fs: f64,
}

/// Windowed power-factor proxy at every sample of `start..end`:
/// `mean(v·i) / (rms(v)·rms(i))` over the trailing `window` samples, clamped to [−1, 1].
pub fn power_factor_series(rec: &RawRecording, start: usize, end: usize, window: usize) -> Vec<f64> {
    let lo = start.saturating_sub(window - 1);
    let len = end - lo;
    let mut p = vec![0.0; len + 1];
    let mut vv = vec![0.0; len + 1];
    let mut ii = vec![0.0; len + 1];
    for k in 0..len {
        let (v, i) = (rec.voltage[lo + k], rec.current[lo + k]);
        p[k + 1] = p[k] + v * i;
        vv[k + 1] = vv[k] + v * v;
        ii[k + 1] = ii[k] + i * i;
    }
    (start..end)
        .map(|t| {
            let b = t + 1 - lo;
            let a = (t + 1).saturating_sub(window).max(lo) - lo;
            let n = (b - a) as f64;
            let mean_p = (p[b] - p[a]) / n;
            let rms_v = ((vv[b] - vv[a]) / n).max(0.0).sqrt();
            let rms_i = ((ii[b] - ii[a]) / n).max(0.0).sqrt();
            if rms_i < 1e-6 || rms_v == 0.0 {
                0.0
            } else {
                (mean_p / (rms_v * rms_i)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// Linear interpolation of `x` onto `n` points spanning its first and last sample.
pub fn resample_linear(x: &[f64], n: usize) -> Vec<f64> {
    if x.len() == 1 || n == 1 {
        return vec![x[0]; n];
    }
    let scale = (x.len() - 1) as f64 / (n - 1) as f64;
    (0..n)
        .map(|j| {
            let pos = j as f64 * scale;
            let i = (pos.floor() as usize).min(x.len() - 2);
            let frac = pos - i as f64;
            x[i] + (x[i + 1] - x[i]) * frac
        })
        .collect()
}

/// Slices `boundary..next_boundary` and builds the three per-cycle sequences.
pub fn build_cycle(
    rec: &RawRecording,
    boundary: usize,
    next_boundary: usize,
    pf_window: usize,
    n_cyc: usize,
) -> Result<CycleTriple> {
    if !(boundary < next_boundary && next_boundary <= rec.len()) {
        return Err(Error::invalid(format!(
            "cycle {boundary}..{next_boundary} lies outside a recording of {} samples",
            rec.len()
        )));
    }
    if next_boundary - boundary < 2 || n_cyc < 2 || pf_window == 0 {
        return Err(Error::invalid("cycle, n_cyc and pf_window must be non-trivial"));
    }
    let pf = power_factor_series(rec, boundary, next_boundary, pf_window);
    Ok(CycleTriple {
        current: resample_linear(&rec.current[boundary..next_boundary], n_cyc),
        voltage: resample_linear(&rec.voltage[boundary..next_boundary], n_cyc),
        power_factor: resample_linear(&pf, n_cyc),
        t0: boundary,
        fs: rec.fs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub mean: f64,
    pub std: f64,
    /// the population std fell below 1e-9 and was replaced by 1
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCycle {
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    pub power_factor: Vec<f64>,
    pub stats: [SeriesStats; 3],
}

impl NormalizedCycle {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn is_degenerate(&self) -> bool {
        self.stats.iter().any(|s| s.degenerate)
    }

    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.current, &self.voltage, &self.power_factor]
    }
}

/// z-score with population std; constant input keeps σ = 1 and is flagged.
pub fn zscore(x: &[f64]) -> (Vec<f64>, SeriesStats) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let raw_std = var.sqrt();
    let degenerate = raw_std < 1e-9;
    let std = if degenerate { 1.0 } else { raw_std };
    let mut z: Vec<f64> = x.iter().map(|v| (v - mean) / std).collect();
    if !degenerate {
        // one refinement pass absorbs rounding left by the first division
        let m2 = z.iter().sum::<f64>() / n;
        let s2 = (z.iter().map(|v| (v - m2) * (v - m2)).sum::<f64>() / n).sqrt();
        z.iter_mut().for_each(|v| *v = (*v - m2) / s2);
    } else {
        z.iter_mut().for_each(|v| *v = 0.0);
    }
    (z, SeriesStats { mean, std, degenerate })
}

pub fn normalize_cycle(c: &CycleTriple) -> Result<NormalizedCycle> {
    if c.current.len() < 2 || c.voltage.len() != c.current.len() || c.power_factor.len() != c.current.len() {
        return Err(Error::invalid("cycle sequences must share a length of at least 2"));
    }
    let (current, si) = zscore(&c.current);
    let (voltage, sv) = zscore(&c.voltage);
    let (power_factor, sp) = zscore(&c.power_factor);
    Ok(NormalizedCycle {
        current,
        voltage,
        power_factor,
        stats: [si, sv, sp],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub filter: FilterSpec,
    pub n_win: usize,
    pub n_cyc: usize,
    /// trailing power-factor window in samples; `None` means half a cycle
    pub pf_window: Option<usize>,
}

impl PreprocessConfig {
    pub fn default_for(fs: f64) -> Self {
        Self {
            filter: FilterSpec::default_for(fs),
            n_win: 5,
            n_cyc: 64,
            pf_window: None,
        }
    }

    pub fn pf_window_for(&self, fs: f64) -> usize {
        self.pf_window
            .unwrap_or_else(|| (fs / GRID_HZ / 2.0).round().max(1.0) as usize)
    }
}

/// A normalised cycle with its ground truth and aggregate power.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSample {
    pub cycle: NormalizedCycle,
    /// schedule state at the cycle midpoint, when known
    pub label: Option<Vec<u8>>,
    /// mean of v·i over the raw cycle, watts
    pub power: f64,
    /// per-appliance mean power over the cycle, watts
    pub appliance_power: Option<Vec<f64>>,
    pub start: usize,
    pub len: usize,
}

/// Applies both denoising stages to a channel.
pub fn denoise(x: &[f64], fs: f64, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    moving_mean(&lowpass(x, fs, &cfg.filter)?, cfg.n_win)
}

/// Full per-recording preprocessing. Cycles that overlap the filter's edge
/// zone are dropped.
pub fn cycles_from_recording(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<Vec<CycleSample>> {
    rec.validate()?;
    let filtered = RawRecording {
        fs: rec.fs,
        current: denoise(&rec.current, rec.fs, cfg)?,
        voltage: denoise(&rec.voltage, rec.fs, cfg)?,
        labels: None,
        appliance_power: None,
    };
    let bounds = detect_cycles(&filtered.voltage, rec.fs)?;
    let edge = cfg.filter.taps / 2 + cfg.n_win;
    let pf_window = cfg.pf_window_for(rec.fs);
    let mut out = Vec::new();
    for w in bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a < edge || b + edge > rec.len() {
            continue;
        }
        let triple = build_cycle(&filtered, a, b, pf_window, cfg.n_cyc)?;
        let cycle = normalize_cycle(&triple)?;
        let mid = (a + b) / 2;
        let len = b - a;
        let power = (a..b).map(|n| rec.voltage[n] * rec.current[n]).sum::<f64>() / len as f64;
        let appliance_power = rec
            .appliance_power
            .as_ref()
            .map(|ps| ps.iter().map(|p| p[a..b].iter().sum::<f64>() / len as f64).collect());
        out.push(CycleSample {
            cycle,
            label: rec.label_at(mid),
            power,
            appliance_power,
            start: a,
            len,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, n: usize, phase: f64, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs + phase).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn default_filter_matches_reference_design() {
        let spec = FilterSpec::default_for(50_000.0);
        assert_eq!(spec.taps, 201);
        assert_eq!(spec.cutoff_hz, 1_000.0);
        let h = spec.kernel(50_000.0).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // linear phase
        for k in 0..h.len() {
            assert!((h[k] - h[h.len() - 1 - k]).abs() < 1e-15);
        }
    }

    #[test]
    fn lowpass_constant_and_tones() {
        let fs = 50_000.0;
        let spec = FilterSpec::default_for(fs);
        let y = lowpass(&vec![3.25; 2000], fs, &spec).unwrap();
        for v in &y[100..1900] {
            assert!((v - 3.25).abs() < 1e-6);
        }
        let trim = 100..9_900;
        let x50 = sine(50.0, fs, 10_000, 0.3, 1.0);
        let y50 = lowpass(&x50, fs, &spec).unwrap();
        let db50 = 20.0 * (rms(&y50[trim.clone()]) / rms(&x50[trim.clone()])).log10();
        assert!(db50.abs() < 1.0, "{db50}");
        let x5k = sine(5_000.0, fs, 10_000, 0.0, 1.0);
        let y5k = lowpass(&x5k, fs, &spec).unwrap();
        let db5k = 20.0 * (rms(&y5k[trim.clone()]) / rms(&x5k[trim])).log10();
        assert!(db5k <= -20.0, "{db5k}");
    }

    #[test]
    fn lowpass_keeps_zero_crossings_aligned() {
        let fs = 50_000.0;
        let x = sine(50.0, fs, 5_000, 0.0, 325.0);
        let y = lowpass(&x, fs, &FilterSpec::default_for(fs)).unwrap();
        let b = detect_cycles(&y[500..4500], fs).unwrap();
        // true crossings at 1000, 2000, 3000, 4000 → 500, 1500, 2500, 3500 after slicing
        for (got, want) in b.iter().zip([500usize, 1500, 2500, 3500]) {
            assert!((*got as i64 - want as i64).abs() <= 1, "{got} vs {want}");
        }
    }

    #[test]
    fn lowpass_rejects_bad_specs() {
        let x = vec![0.0; 500];
        let bad_cut = FilterSpec { cutoff_hz: 25_000.0, taps: 11, window: Window::Hamming };
        assert!(lowpass(&x, 50_000.0, &bad_cut).is_err());
        let even = FilterSpec { cutoff_hz: 1_000.0, taps: 10, window: Window::Hamming };
        assert!(lowpass(&x, 50_000.0, &even).is_err());
        assert!(lowpass(&x[..5], 50_000.0, &FilterSpec::default_for(50_000.0)).is_err());
    }

    #[test]
    fn moving_mean_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_mean(&x, 1).unwrap(), x.to_vec());
        assert_eq!(moving_mean(&x, 2).unwrap(), vec![1.0, 1.5, 2.5, 3.5]);
        let c = vec![0.7; 20];
        for v in moving_mean(&c, 4).unwrap() {
            assert!((v - 0.7).abs() < 1e-15);
        }
        assert!(moving_mean(&[], 3).is_err());
        assert!(moving_mean(&x, 0).is_err());
    }

    #[test]
    fn zero_crossings_of_clean_sine() {
        let fs = 50_000.0;
        let v = sine(50.0, fs, 10_000, 0.0, 1.0);
        let b = detect_cycles(&v, fs).unwrap();
        assert_eq!(b, (0..10).map(|k| k * 1000).collect::<Vec<_>>());
        let v = sine(50.0, fs, 10_000, PI, 1.0);
        let b = detect_cycles(&v, fs).unwrap();
        assert_eq!(b[0], 500);
        assert!(b.windows(2).all(|w| w[1] - w[0] == 1000));
        assert!(matches!(detect_cycles(&vec![1.0; 3000], fs), Err(Error::NoCrossing)));
    }

    #[test]
    fn cycle_count_matches_duration() {
        let fs = 10_000.0;
        for d in [0.5, 1.0, 2.3] {
            let n = (d * fs) as usize;
            let v = sine(50.0, fs, n, 1.1, 325.0);
            let b = detect_cycles(&v, fs).unwrap();
            assert!((b.len() as f64 - 50.0 * d).abs() <= 1.0, "{} for {d}", b.len());
        }
    }

    #[test]
    fn irregular_gap_is_reported() {
        let fs = 10_000.0;
        let mut v = sine(50.0, fs, 2_000, 0.0, 1.0);
        // flatten one whole cycle so a crossing disappears
        for x in &mut v[600..1000] {
            *x = x.abs() + 0.1;
        }
        assert!(matches!(detect_cycles(&v, fs), Err(Error::IrregularCycle { .. })));
    }

    fn rec_from(v: Vec<f64>, i: Vec<f64>, fs: f64) -> RawRecording {
        RawRecording { fs, current: i, voltage: v, labels: None, appliance_power: None }
    }

    #[test]
    fn power_factor_of_sinusoidal_loads() {
        let fs = 10_000.0;
        let n = 1_000;
        let v = sine(50.0, fs, n, 0.0, 325.0);
        // half a cycle: the 2ω ripple of v·i averages out exactly
        let window = 100;
        let resistive = rec_from(v.clone(), sine(50.0, fs, n, 0.0, 2.0), fs);
        let c = build_cycle(&resistive, 200, 400, window, 64).unwrap();
        assert!(c.power_factor.iter().all(|p| (p - 1.0).abs() < 1e-9));

        let lagging = rec_from(v.clone(), sine(50.0, fs, n, -PI / 3.0, 2.0), fs);
        let pf = power_factor_series(&lagging, 200, 400, window);
        assert!(pf.iter().all(|p| (p - 0.5).abs() < 1e-9), "{:?}", &pf[..4]);

        let dead = rec_from(v, vec![0.0; n], fs);
        let c = build_cycle(&dead, 200, 400, window, 64).unwrap();
        assert!(c.power_factor.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn resampling_keeps_endpoints() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.05).sin()).collect();
        let y = resample_linear(&x, 64);
        assert_eq!(y[0], x[0]);
        assert!((y[63] - x[199]).abs() < 1e-12);
    }

    #[test]
    fn normalisation_and_degenerate_rule() {
        let c = CycleTriple {
            current: (0..64).map(|i| (i as f64 * 0.3).sin() * 4.0 + 1.0).collect(),
            voltage: (0..64).map(|i| (i as f64 * 0.1).cos() * 300.0).collect(),
            power_factor: vec![0.93; 64],
            t0: 0,
            fs: 10_000.0,
        };
        let n = normalize_cycle(&c).unwrap();
        for ch in [&n.current, &n.voltage] {
            let m = ch.iter().sum::<f64>() / 64.0;
            let s = (ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 64.0).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        assert!(n.power_factor.iter().all(|&v| v == 0.0));
        assert!(n.stats[2].degenerate && n.is_degenerate());
        assert!(!n.stats[0].degenerate);

        let mut affine = c.clone();
        affine.current.iter_mut().for_each(|v| *v = 2.5 * *v - 7.0);
        let m = normalize_cycle(&affine).unwrap();
        for (a, b) in m.current.iter().zip(&n.current) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
