//! Sliding-window volumetric attack detector and confusion-matrix tallies.
//!
//! Each window is scored on two features: the one-sided z-score of its mean
//! rate against a robust baseline (median/MAD of earlier windows that were
//! not flagged), and the shift of its local Hurst estimate away from the
//! trace-wide reference. Either feature crossing its threshold flags the
//! window.

use serde::{Deserialize, Serialize};

use crate::analysis::aggregated_variance_hurst;
use crate::error::{Error, Result};
use crate::stats::{mad, mean, median};
use crate::traffic::TrafficTrace;

/// Windows needed in the baseline before the rate feature is armed.
const MIN_BASELINE: usize = 4;
const MAD_TO_SIGMA: f64 = 1.4826;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub window: usize,
    pub stride: usize,
    pub rate_z_threshold: f64,
    pub hurst_shift_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window: 256,
            stride: 64,
            rate_z_threshold: 3.0,
            hurst_shift_threshold: 0.15,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 64 {
            return Err(Error::Config(format!("detector window {} < 64", self.window)));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "detector stride {} must be in 1..={}",
                self.stride, self.window
            )));
        }
        Ok(())
    }
}

/// Confusion counts with the derived rates.
///
/// Attack-class rates (`p_tp`, `p_fn`) are absent when no window was truly an
/// attack; normal-class rates likewise when no window was normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityProfile {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub p_tp: Option<f64>,
    pub p_fp: Option<f64>,
    pub p_tn: Option<f64>,
    pub p_fn: Option<f64>,
    /// Scalar reduction compared against the 0.6 gates.
    pub scalar: f64,
}

impl Default for SecurityProfile {
    fn default() -> Self {
        Self::from_counts(0, 0, 0, 0)
    }
}

impl SecurityProfile {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let attacks = tp + fn_;
        let normals = fp + tn;
        let rate = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let p_tp = rate(tp, attacks);
        let p_fp = rate(fp, normals);
        // Detection rate when attacks were observed, specificity otherwise.
        let scalar = match (p_tp, p_fp) {
            (Some(tpr), _) => tpr,
            (None, Some(fpr)) => 1.0 - fpr,
            (None, None) => 0.0,
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            p_tp,
            p_fp,
            p_tn: rate(tn, normals),
            p_fn: rate(fn_, attacks),
            scalar,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn merge_profiles(a: &SecurityProfile, b: &SecurityProfile) -> SecurityProfile {
    SecurityProfile::from_counts(a.tp + b.tp, a.fp + b.fp, a.tn + b.tn, a.fn_ + b.fn_)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowVerdict {
    pub start: usize,
    pub flagged: bool,
    pub truth_attack: bool,
    pub rate_z: f64,
    pub local_hurst: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub windows: Vec<WindowVerdict>,
    pub profile: SecurityProfile,
}

/// Plain aggregated-variance slope over block sizes `1 .. window/16`; the
/// small blocks keep the per-window spread near 0.06 at 256 slots.
fn local_hurst(xs: &[f64]) -> Option<f64> {
    let blocks: Vec<usize> = (0..)
        .map(|e| 1usize << e)
        .take_while(|&m| m <= xs.len() / 16)
        .collect();
    aggregated_variance_hurst(xs, &blocks, false).ok()
}

pub fn detect(trace: &TrafficTrace, cfg: &DetectorConfig) -> Result<Detection> {
    cfg.validate()?;
    let n = trace.len();
    if n < cfg.window {
        return Err(Error::TraceTooShort {
            len: n,
            min: cfg.window,
        });
    }
    let xs = trace.as_f64();
    let starts: Vec<usize> = (0..=n - cfg.window).step_by(cfg.stride).collect();
    let hursts: Vec<Option<f64>> = starts
        .iter()
        .map(|&s| local_hurst(&xs[s..s + cfg.window]))
        .collect();
    let known: Vec<f64> = hursts.iter().flatten().copied().collect();
    // Same small-window estimator on both sides, so its bias cancels.
    let reference = (!known.is_empty()).then(|| median(&known));

    let mut baseline: Vec<f64> = Vec::new();
    let mut windows = Vec::with_capacity(starts.len());
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&start, &hurst) in starts.iter().zip(&hursts) {
        let slice = &xs[start..start + cfg.window];
        let rate = mean(slice);
        let rate_z = if baseline.len() >= MIN_BASELINE {
            let center = median(&baseline);
            let sigma = MAD_TO_SIGMA * mad(&baseline, center);
            if sigma > 0.0 {
                (rate - center) / sigma
            } else if rate > center {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            0.0
        };
        let hurst_shift = match (hurst, reference) {
            (Some(h), Some(r)) => (h - r).abs(),
            _ => 0.0,
        };
        let flagged = rate_z > cfg.rate_z_threshold || hurst_shift > cfg.hurst_shift_threshold;
        let attack_slots = trace.labels[start..start + cfg.window]
            .iter()
            .filter(|l| l.is_attack())
            .count();
        // strict majority; ties count as normal
        let truth_attack = 2 * attack_slots > cfg.window;
        match (truth_attack, flagged) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
        if !flagged {
            baseline.push(rate);
        }
        windows.push(WindowVerdict {
            start,
            flagged,
            truth_attack,
            rate_z,
            local_hurst: hurst,
        });
    }
    Ok(Detection {
        windows,
        profile: SecurityProfile::from_counts(tp, fp, tn, fn_),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::{inject_attacks, AttackSpec, SlotLabel};

    #[test]
    fn zero_profile_is_merge_identity() {
        let x = SecurityProfile::from_counts(3, 1, 7, 2);
        assert_eq!(merge_profiles(&x, &SecurityProfile::zero()), x);
        assert_eq!(merge_profiles(&SecurityProfile::zero(), &x), x);
    }

    #[test]
    fn merge_sums_counts() {
        let a = SecurityProfile::from_counts(1, 0, 0, 1);
        let b = SecurityProfile::from_counts(1, 0, 0, 0);
        let m = merge_profiles(&a, &b);
        assert!((m.p_tp.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m, merge_profiles(&b, &a));
    }

    #[test]
    fn scalar_falls_back_to_specificity() {
        let p = SecurityProfile::from_counts(0, 1, 9, 0);
        assert_eq!(p.p_tp, None);
        assert_eq!(p.p_fn, None);
        assert!((p.scalar - 0.9).abs() < 1e-12);
        let p = SecurityProfile::from_counts(4, 1, 9, 1);
        assert_eq!(p.scalar, p.p_tp.unwrap());
    }

    #[test]
    fn json_keys() {
        let json = serde_json::to_value(SecurityProfile::from_counts(1, 2, 3, 4)).unwrap();
        for key in ["tp", "fp", "tn", "fn", "p_tp", "p_fp", "p_tn", "p_fn", "scalar"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn never_firing_detector_on_all_attack_trace() {
        let mut t = TrafficTrace::from_counts((0..2048).map(|i| 50 + (i * 7919 % 13) as u64).collect());
        t.labels = vec![SlotLabel::Attack; t.len()];
        let cfg = DetectorConfig {
            rate_z_threshold: f64::INFINITY,
            hurst_shift_threshold: f64::INFINITY,
            ..DetectorConfig::default()
        };
        let d = detect(&t, &cfg).unwrap();
        assert_eq!(d.profile.p_tp, Some(0.0));
        assert_eq!(d.profile.p_fn, Some(1.0));
        assert_eq!(d.profile.tp + d.profile.fn_, d.windows.len() as u64);
    }

    #[test]
    fn short_trace_and_bad_config() {
        let t = TrafficTrace::from_counts(vec![1; 100]);
        assert!(matches!(detect(&t, &DetectorConfig::default()), Err(Error::TraceTooShort { .. })));
        let cfg = DetectorConfig {
            window: 32,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DetectorConfig {
            stride: 300,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_burst_is_caught_by_rate() {
        let base: Vec<u64> = (0..4096).map(|i| 40 + (i * 2654435761u64 % 11)).collect();
        let t = inject_attacks(&TrafficTrace::from_counts(base), &AttackSpec::new(vec![(2048, 2560)])).unwrap();
        let d = detect(&t, &DetectorConfig::default()).unwrap();
        assert!(d.profile.p_tp.unwrap() >= 0.9);
    }
}
