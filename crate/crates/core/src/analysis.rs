//! Estimators for the traffic characterization `(λ, H, σ_var, Δh)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{mean, ols, variance};
use crate::traffic::{TrafficTrace, MIN_TRACE_LEN};

pub const DEFAULT_Q_GRID: [f64; 7] = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0];
pub const DEFAULT_CV_WINDOW: usize = 100;
/// Shortest trace accepted by the structure-function estimator.
pub const MIN_MULTIFRACTAL_LEN: usize = 1 << 12;

const HURST_FLOOR: f64 = 0.01;
const HURST_CEIL: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub lambda: f64,
    pub hurst: f64,
    pub sigma_var: f64,
    /// Clamped range of h(q); absent when the series was too short to fit it.
    pub delta_h: Option<f64>,
    pub delta_h_raw: Option<f64>,
    /// Window (slots) used for `sigma_var`.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentScaling {
    pub q_grid: Vec<f64>,
    pub h_of_q: Vec<f64>,
    pub c_of_q: Vec<f64>,
    pub fit_r2: Vec<f64>,
}

impl MomentScaling {
    pub fn h_at(&self, q: f64) -> Option<f64> {
        self.q_grid
            .iter()
            .position(|&g| (g - q).abs() < 1e-12)
            .map(|i| self.h_of_q[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaH {
    pub value: f64,
    pub raw: f64,
}

/// Serialized analysis report with fixed key order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub lambda: f64,
    pub hurst: f64,
    pub sigma_var: f64,
    pub delta_h: f64,
    pub h_of_q: Vec<[f64; 2]>,
    pub fit_r2: Vec<f64>,
}

/// Aggregated-variance Hurst estimate over block sizes `4 .. n/16`.
pub fn estimate_hurst(trace: &TrafficTrace) -> Result<f64> {
    estimate_hurst_series(&trace.as_f64())
}

pub fn estimate_hurst_series(xs: &[f64]) -> Result<f64> {
    if xs.len() < MIN_TRACE_LEN {
        return Err(Error::TraceTooShort {
            len: xs.len(),
            min: MIN_TRACE_LEN,
        });
    }
    let top = usize::BITS - 1 - xs.len().leading_zeros();
    let blocks: Vec<usize> = (2..=top - 4).map(|e| 1usize << e).collect();
    aggregated_variance_hurst(xs, &blocks, true)
}

/// Variance of block means regressed on block size, slope `2H - 2`.
///
/// The sample variance of `k` block means around the grand mean has
/// expectation `σ² m^{2H-2} (k - k^{2H-1}) / (k - 1)` for an exactly
/// self-similar series, so the fit is iterated with that factor divided out
/// until H settles. `bias_correct = false` returns the plain slope estimate.
pub(crate) fn aggregated_variance_hurst(
    xs: &[f64],
    blocks: &[usize],
    bias_correct: bool,
) -> Result<f64> {
    if variance(xs) <= 0.0 {
        return Err(Error::DegenerateTrace);
    }
    let mut log_m = Vec::with_capacity(blocks.len());
    let mut log_v = Vec::with_capacity(blocks.len());
    let mut ks = Vec::with_capacity(blocks.len());
    for &m in blocks {
        let k = xs.len() / m;
        if m == 0 || k < 2 {
            continue;
        }
        let means: Vec<f64> = xs[..k * m].chunks_exact(m).map(mean).collect();
        let v = variance(&means) * k as f64 / (k as f64 - 1.0);
        if v > 0.0 {
            log_m.push((m as f64).ln());
            log_v.push(v.ln());
            ks.push(k as f64);
        }
    }
    if log_m.len() < 2 {
        return Err(Error::DegenerateTrace);
    }
    let mut h = (1.0 + ols(&log_m, &log_v).slope / 2.0).clamp(HURST_FLOOR, HURST_CEIL);
    if !bias_correct {
        return Ok(h);
    }
    for _ in 0..50 {
        let adjusted: Vec<f64> = log_v
            .iter()
            .zip(&ks)
            .map(|(lv, &k)| lv - ((k - k.powf(2.0 * h - 1.0)) / (k - 1.0)).ln())
            .collect();
        let next = (1.0 + ols(&log_m, &adjusted).slope / 2.0).clamp(HURST_FLOOR, HURST_CEIL);
        let done = (next - h).abs() < 1e-7;
        h = next;
        if done {
            break;
        }
    }
    Ok(h)
}

/// Structure functions of the centred cumulative process over dyadic lags.
pub fn estimate_generalized_hurst(trace: &TrafficTrace, q_grid: &[f64]) -> Result<MomentScaling> {
    generalized_hurst_series(&trace.as_f64(), q_grid)
}

pub fn generalized_hurst_series(xs: &[f64], q_grid: &[f64]) -> Result<MomentScaling> {
    if xs.len() < MIN_MULTIFRACTAL_LEN {
        return Err(Error::TraceTooShort {
            len: xs.len(),
            min: MIN_MULTIFRACTAL_LEN,
        });
    }
    if q_grid.is_empty() {
        return Err(Error::TooFewOrders(0));
    }
    for (i, &q) in q_grid.iter().enumerate() {
        if !(0.5..=5.0).contains(&q) {
            return Err(Error::InvalidQ(q));
        }
        if i > 0 && q <= q_grid[i - 1] {
            return Err(Error::InvalidQ(q));
        }
    }
    if variance(xs) <= 0.0 {
        return Err(Error::DegenerateTrace);
    }

    let mu = mean(xs);
    let mut y = Vec::with_capacity(xs.len() + 1);
    y.push(0.0);
    let mut acc = 0.0;
    for &x in xs {
        acc += x - mu;
        y.push(acc);
    }

    let top = usize::BITS - 1 - xs.len().leading_zeros();
    // Lags 2^0 .. 2^(top-2); the two smallest and two largest are edge scales.
    let lags: Vec<usize> = (2..=top - 4).map(|e| 1usize << e).collect();
    let log_tau: Vec<f64> = lags.iter().map(|&t| (t as f64).ln()).collect();
    let mut log_s = vec![Vec::with_capacity(lags.len()); q_grid.len()];
    let mut log_d = Vec::with_capacity(y.len());
    for &tau in &lags {
        log_d.clear();
        log_d.extend(
            y.iter()
                .zip(&y[tau..])
                .map(|(a, b)| (b - a).abs())
                .filter(|d| *d > 0.0)
                .map(f64::ln),
        );
        let pairs = (y.len() - tau) as f64;
        for (qi, &q) in q_grid.iter().enumerate() {
            let s = log_d.iter().map(|l| (q * l).exp()).sum::<f64>() / pairs;
            if s <= 0.0 {
                return Err(Error::DegenerateTrace);
            }
            log_s[qi].push(s.ln());
        }
    }

    let mut h_of_q = Vec::with_capacity(q_grid.len());
    let mut c_of_q = Vec::with_capacity(q_grid.len());
    let mut fit_r2 = Vec::with_capacity(q_grid.len());
    for (qi, &q) in q_grid.iter().enumerate() {
        let fit = ols(&log_tau, &log_s[qi]);
        h_of_q.push(fit.slope / q);
        c_of_q.push(fit.intercept.exp());
        fit_r2.push(fit.r2);
    }
    Ok(MomentScaling {
        q_grid: q_grid.to_vec(),
        h_of_q,
        c_of_q,
        fit_r2,
    })
}

/// `h(q_min) - h(q_max)`, clamped at zero with the raw value kept.
pub fn delta_h(ms: &MomentScaling) -> Result<DeltaH> {
    if ms.h_of_q.len() < 2 {
        return Err(Error::TooFewOrders(ms.h_of_q.len()));
    }
    let raw = ms.h_of_q[0] - ms.h_of_q[ms.h_of_q.len() - 1];
    Ok(DeltaH {
        value: raw.max(0.0),
        raw,
    })
}

/// σ/M of the per-window sums over `⌊n/T⌋` disjoint windows.
pub fn coefficient_of_variation(trace: &TrafficTrace, window: usize) -> Result<f64> {
    cv_series(&trace.as_f64(), window)
}

pub fn cv_series(xs: &[f64], window: usize) -> Result<f64> {
    if window == 0 || xs.len() < 2 * window {
        return Err(Error::WindowTooLarge {
            window,
            len: xs.len(),
        });
    }
    let sums: Vec<f64> = xs.chunks_exact(window).map(|c| c.iter().sum()).collect();
    let m = mean(&sums);
    if m <= 0.0 {
        return Err(Error::ZeroMean);
    }
    Ok(variance(&sums).sqrt() / m)
}

/// Full profile with the default σ_var window and q grid.
pub fn profile_flow(trace: &TrafficTrace) -> Result<FlowProfile> {
    let xs = trace.as_f64();
    let mut profile = profile_rate_scaling(&xs, DEFAULT_CV_WINDOW)?;
    let ms = generalized_hurst_series(&xs, &DEFAULT_Q_GRID)?;
    let dh = delta_h(&ms)?;
    profile.delta_h = Some(dh.value);
    profile.delta_h_raw = Some(dh.raw);
    Ok(profile)
}

/// λ, H and σ_var only; usable on series shorter than the multifractal fit needs.
pub fn profile_rate_scaling(xs: &[f64], window: usize) -> Result<FlowProfile> {
    let hurst = estimate_hurst_series(xs)?;
    let sigma_var = cv_series(xs, window)?;
    Ok(FlowProfile {
        lambda: mean(xs),
        hurst,
        sigma_var,
        delta_h: None,
        delta_h_raw: None,
        window,
    })
}

pub fn analysis_report(trace: &TrafficTrace) -> Result<AnalysisReport> {
    let xs = trace.as_f64();
    let profile = profile_rate_scaling(&xs, DEFAULT_CV_WINDOW)?;
    let ms = generalized_hurst_series(&xs, &DEFAULT_Q_GRID)?;
    let dh = delta_h(&ms)?;
    Ok(AnalysisReport {
        lambda: profile.lambda,
        hurst: profile.hurst,
        sigma_var: profile.sigma_var,
        delta_h: dh.value,
        h_of_q: ms.q_grid.iter().zip(&ms.h_of_q).map(|(&q, &h)| [q, h]).collect(),
        fit_r2: ms.fit_r2,
    })
}
