//! Synthetic traffic: fractional Gaussian noise, cascade-modulated
//! multifractal traces and labelled attack bursts.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::mix_seed;

pub const MIN_TRACE_LEN: usize = 1 << 10;

fn default_tick_ms() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSpec {
    /// Number of slots; must be a power of two.
    pub length: usize,
    #[serde(default = "default_tick_ms")]
    pub tick_ms: f64,
    pub target_hurst: f64,
    /// Mean packets per slot.
    pub mean_rate: f64,
    /// Standard deviation of packets per slot before cascade modulation.
    pub std_rate: f64,
    /// Binomial cascade weight in `[0.5, 1)`; `None` yields a monofractal trace.
    #[serde(default)]
    pub cascade_weight: Option<f64>,
    pub seed: u64,
}

impl TraceSpec {
    pub fn fgn(length: usize, hurst: f64, mean_rate: f64, std_rate: f64, seed: u64) -> Self {
        Self {
            length,
            tick_ms: 1.0,
            target_hurst: hurst,
            mean_rate,
            std_rate,
            cascade_weight: None,
            seed,
        }
    }

    pub fn with_cascade(mut self, weight: f64) -> Self {
        self.cascade_weight = Some(weight);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length < MIN_TRACE_LEN || !self.length.is_power_of_two() {
            return Err(Error::InvalidSpec(format!(
                "length {} must be a power of two >= {MIN_TRACE_LEN}",
                self.length
            )));
        }
        if !(self.target_hurst > 0.0 && self.target_hurst < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "target_hurst {} outside (0, 1)",
                self.target_hurst
            )));
        }
        if !(self.mean_rate > 0.0) || !self.mean_rate.is_finite() {
            return Err(Error::InvalidSpec(format!("mean_rate {} must be > 0", self.mean_rate)));
        }
        if !(self.std_rate >= 0.0) || !self.std_rate.is_finite() {
            return Err(Error::InvalidSpec(format!("std_rate {} must be >= 0", self.std_rate)));
        }
        if !(self.tick_ms > 0.0) {
            return Err(Error::InvalidSpec(format!("tick_ms {} must be > 0", self.tick_ms)));
        }
        if let Some(p) = self.cascade_weight {
            if !(0.5..1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!("cascade_weight {p} outside [0.5, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotLabel {
    Normal,
    Attack,
}

impl SlotLabel {
    pub fn is_attack(self) -> bool {
        matches!(self, SlotLabel::Attack)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficTrace {
    pub counts: Vec<u64>,
    pub labels: Vec<SlotLabel>,
    pub tick_ms: f64,
    /// Present for generated traces, absent for ingested ones.
    pub spec: Option<TraceSpec>,
}

impl TrafficTrace {
    /// Wraps raw counts as an unlabelled (all-normal) trace.
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let labels = vec![SlotLabel::Normal; counts.len()];
        Self {
            counts,
            labels,
            tick_ms: 1.0,
            spec: None,
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn attack_slots(&self) -> usize {
        self.labels.iter().filter(|l| l.is_attack()).count()
    }

    /// Writes the `slot,count,label` CSV format.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "slot,count,label")?;
        for (slot, (count, label)) in self.counts.iter().zip(&self.labels).enumerate() {
            writeln!(w, "{slot},{count},{}", u8::from(label.is_attack()))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Config("empty trace file".into()))?;
        if header.trim() != "slot,count,label" {
            return Err(Error::Config(format!("unexpected trace header {header:?}")));
        }
        let mut counts = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Config(format!("malformed trace row {}: {line:?}", i + 2));
            let mut fields = line.trim().split(',');
            let slot: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let count: u64 = fields.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let label = match fields.next() {
                Some("0") => SlotLabel::Normal,
                Some("1") => SlotLabel::Attack,
                _ => return Err(bad()),
            };
            if fields.next().is_some() || slot != counts.len() {
                return Err(bad());
            }
            counts.push(count);
            labels.push(label);
        }
        Ok(Self {
            counts,
            labels,
            tick_ms: 1.0,
            spec: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Half-open `[start, end)` slot windows.
    pub windows: Vec<(usize, usize)>,
    #[serde(default = "default_intensity")]
    pub intensity_multiplier: f64,
}

fn default_intensity() -> f64 {
    10.0
}

impl AttackSpec {
    pub fn new(windows: Vec<(usize, usize)>) -> Self {
        Self {
            windows,
            intensity_multiplier: default_intensity(),
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if !(self.intensity_multiplier > 1.0) {
            return Err(Error::Config(format!(
                "intensity_multiplier {} must be > 1",
                self.intensity_multiplier
            )));
        }
        let mut sorted = self.windows.clone();
        sorted.sort_unstable();
        for &(start, end) in &sorted {
            if start >= end || end > len {
                return Err(Error::WindowOutOfBounds { start, end, len });
            }
        }
        for pair in sorted.windows(2) {
            let ((a0, a1), (b0, b1)) = (pair[0], pair[1]);
            if b0 < a1 {
                return Err(Error::OverlappingWindows(a0, a1, b0, b1));
            }
        }
        Ok(())
    }
}

/// Exact fractional Gaussian noise (zero mean, unit variance) by circulant
/// embedding of the fGn autocovariance.
pub fn fractional_gaussian_noise(n: usize, hurst: f64, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fgn_with_rng(n, hurst, &mut rng)
}

fn fgn_autocovariance(k: usize, hurst: f64) -> f64 {
    let k = k as f64;
    let h2 = 2.0 * hurst;
    0.5 * ((k + 1.0).powf(h2) - 2.0 * k.powf(h2) + (k - 1.0).abs().powf(h2))
}

fn fgn_with_rng(n: usize, hurst: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = vec![Complex::default(); m];
    for k in 0..=n {
        row[k].re = fgn_autocovariance(k, hurst);
    }
    for k in 1..n {
        row[m - k].re = row[k].re;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);

    let max_eig = row.iter().map(|c| c.re).fold(0.0f64, f64::max);
    // Eigenvalues are real for a symmetric row; anything below this bound is
    // a genuine failure of the embedding, not FFT round-off.
    let tol = 1e-9 * max_eig.max(1.0);
    let mut eig = Vec::with_capacity(m);
    for (index, c) in row.iter().enumerate() {
        if c.re < -tol {
            return Err(Error::GeneratorFailure { index, value: c.re });
        }
        eig.push(c.re.max(0.0));
    }

    let mut w: Vec<Complex<f64>> = eig
        .iter()
        .map(|&l| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            Complex::new(a, b) * (l / m as f64).sqrt()
        })
        .collect();
    fft.process(&mut w);
    Ok(w[..n].iter().map(|c| c.re).collect())
}

/// Conservative binomial cascade of `2^depth` cells normalised to unit mean.
pub fn binomial_cascade(depth: u32, weight: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = vec![1.0f64];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(cells.len() * 2);
        for &mass in &cells {
            let left = if rng.random::<bool>() { weight } else { 1.0 - weight };
            next.push(2.0 * left * mass);
            next.push(2.0 * (1.0 - left) * mass);
        }
        cells = next;
    }
    cells
}

fn to_counts(values: impl Iterator<Item = f64>) -> Vec<u64> {
    values.map(|v| v.round().max(0.0) as u64).collect()
}

pub fn generate_fgn_trace(spec: &TraceSpec) -> Result<TrafficTrace> {
    spec.validate()?;
    if spec.cascade_weight.is_some() {
        return Err(Error::InvalidSpec(
            "cascade_weight set; use generate_cascade_trace".into(),
        ));
    }
    let noise = fractional_gaussian_noise(spec.length, spec.target_hurst, spec.seed)?;
    let counts = to_counts(noise.iter().map(|x| spec.mean_rate + spec.std_rate * x));
    Ok(TrafficTrace {
        labels: vec![SlotLabel::Normal; counts.len()],
        counts,
        tick_ms: spec.tick_ms,
        spec: Some(spec.clone()),
    })
}

/// fGn of the target Hurst parameter, multiplied slot-by-slot by a unit-mean
/// binomial cascade. Weight 0.5 reproduces [`generate_fgn_trace`] exactly.
pub fn generate_cascade_trace(spec: &TraceSpec) -> Result<TrafficTrace> {
    spec.validate()?;
    let weight = spec
        .cascade_weight
        .ok_or_else(|| Error::InvalidSpec("cascade_weight required".into()))?;
    let noise = fractional_gaussian_noise(spec.length, spec.target_hurst, spec.seed)?;
    let depth = spec.length.trailing_zeros();
    let cascade = binomial_cascade(depth, weight, mix_seed(spec.seed, 1));
    let counts = to_counts(
        noise
            .iter()
            .zip(&cascade)
            .map(|(x, m)| m * (spec.mean_rate + spec.std_rate * x)),
    );
    Ok(TrafficTrace {
        labels: vec![SlotLabel::Normal; counts.len()],
        counts,
        tick_ms: spec.tick_ms,
        spec: Some(spec.clone()),
    })
}

/// Dispatches on `cascade_weight`.
pub fn generate_trace(spec: &TraceSpec) -> Result<TrafficTrace> {
    if spec.cascade_weight.is_some() {
        generate_cascade_trace(spec)
    } else {
        generate_fgn_trace(spec)
    }
}

pub fn inject_attacks(trace: &TrafficTrace, attack: &AttackSpec) -> Result<TrafficTrace> {
    attack.validate(trace.len())?;
    let mut out = trace.clone();
    for &(start, end) in &attack.windows {
        for slot in start..end {
            out.counts[slot] = (trace.counts[slot] as f64 * attack.intensity_multiplier).round() as u64;
            out.labels[slot] = SlotLabel::Attack;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_constant_trace() {
        let t = generate_fgn_trace(&TraceSpec::fgn(1 << 10, 0.8, 100.4, 0.0, 3)).unwrap();
        assert!(t.counts.iter().all(|&c| c == 100));
        assert!(t.labels.iter().all(|l| !l.is_attack()));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(
            generate_fgn_trace(&TraceSpec::fgn(1000, 0.8, 10.0, 1.0, 0)),
            Err(Error::InvalidSpec(_))
        ));
        assert!(generate_fgn_trace(&TraceSpec::fgn(1024, 1.0, 10.0, 1.0, 0)).is_err());
        assert!(generate_fgn_trace(&TraceSpec::fgn(1024, 0.0, 10.0, 1.0, 0)).is_err());
        assert!(generate_fgn_trace(&TraceSpec::fgn(1024, 0.5, 0.0, 1.0, 0)).is_err());
        assert!(generate_cascade_trace(&TraceSpec::fgn(1024, 0.5, 1.0, 1.0, 0).with_cascade(0.4)).is_err());
        assert!(generate_cascade_trace(&TraceSpec::fgn(1024, 0.5, 1.0, 1.0, 0)).is_err());
    }

    #[test]
    fn fgn_has_unit_variance_and_fgn_lag_one_correlation() {
        let h = 0.8;
        let x = fractional_gaussian_noise(1 << 16, h, 7).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let lag1 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n - 1.0) / var;
        let expected = 0.5 * (2f64.powf(2.0 * h) - 2.0);
        assert!((var - 1.0).abs() < 0.1, "var {var}");
        assert!((lag1 - expected).abs() < 0.03, "lag1 {lag1} vs {expected}");
    }

    #[test]
    fn cascade_is_conservative() {
        let c = binomial_cascade(12, 0.8, 5);
        let total: f64 = c.iter().sum();
        assert!((total - 4096.0).abs() < 1e-6);
        assert!(binomial_cascade(10, 0.5, 1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_weight_cascade_is_the_fgn_trace() {
        let spec = TraceSpec::fgn(1 << 12, 0.7, 50.0, 10.0, 11);
        let a = generate_fgn_trace(&spec).unwrap();
        let b = generate_cascade_trace(&spec.clone().with_cascade(0.5)).unwrap();
        assert_eq!(a.counts, b.counts);
    }

    #[test]
    fn attack_injection_scales_only_windows() {
        let t = TrafficTrace::from_counts(vec![100; 1024]);
        let atk = AttackSpec::new(vec![(100, 200)]);
        let out = inject_attacks(&t, &atk).unwrap();
        assert!(out.counts[100..200].iter().all(|&c| c == 1000));
        assert!(out.labels[100..200].iter().all(|l| l.is_attack()));
        assert_eq!(out.counts[..100], t.counts[..100]);
        assert_eq!(out.counts[200..], t.counts[200..]);
        assert_eq!(out.attack_slots(), 100);
    }

    #[test]
    fn empty_attack_list_is_identity() {
        let t = generate_fgn_trace(&TraceSpec::fgn(1024, 0.7, 20.0, 5.0, 2)).unwrap();
        assert_eq!(inject_attacks(&t, &AttackSpec::new(vec![])).unwrap(), t);
    }

    #[test]
    fn attack_window_errors() {
        let t = TrafficTrace::from_counts(vec![1; 100]);
        assert!(matches!(
            inject_attacks(&t, &AttackSpec::new(vec![(10, 30), (20, 40)])),
            Err(Error::OverlappingWindows(..))
        ));
        assert!(matches!(
            inject_attacks(&t, &AttackSpec::new(vec![(90, 101)])),
            Err(Error::WindowOutOfBounds { .. })
        ));
        assert!(inject_attacks(&t, &AttackSpec::new(vec![(5, 5)])).is_err());
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let t = inject_attacks(
            &TrafficTrace::from_counts(vec![3, 0, 7, 9]),
            &AttackSpec::new(vec![(1, 3)]),
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("slot,count,label\n0,3,0\n1,0,1\n"));
        let back = TrafficTrace::read_csv(&buf[..]).unwrap();
        assert_eq!(back.counts, t.counts);
        assert_eq!(back.labels, t.labels);
        assert!(TrafficTrace::read_csv(&b"a,b\n"[..]).is_err());
        assert!(TrafficTrace::read_csv(&b"slot,count,label\n0,1,2\n"[..]).is_err());
    }
}
