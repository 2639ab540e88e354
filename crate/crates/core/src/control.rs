//! Buffer and capacity dimensioning from an empirically calibrated loss
//! table, a persistence forecaster, and the security-gated grant policy.

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{cv_series, profile_rate_scaling, FlowProfile, DEFAULT_CV_WINDOW};
use crate::detection::SecurityProfile;
use crate::error::{Error, Result};
use crate::queue::{simulate_loss, NodeState, QosClass};
use crate::stats::{mean, mix_seed};
use crate::traffic::{binomial_cascade, fractional_gaussian_noise, MIN_TRACE_LEN};

pub const DEFAULT_P_SEC_GATE: f64 = 0.6;
/// Search ceiling for the buffer; a cell that still misses the target here is saturated.
pub const Q_W_UPPER: u64 = 1_000_000;
const CASCADE_WEIGHTS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationAxes {
    pub hurst: Vec<f64>,
    pub sigma_var: Vec<f64>,
    /// Load ratio λ/Net.
    pub rho: Vec<f64>,
}

impl Default for CalibrationAxes {
    fn default() -> Self {
        Self {
            hurst: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            sigma_var: vec![0.0, 0.1, 0.3, 1.0, 3.0],
            rho: vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl CalibrationAxes {
    fn validate(&self) -> Result<()> {
        for (name, axis) in [("hurst", &self.hurst), ("sigma_var", &self.sigma_var), ("rho", &self.rho)] {
            if axis.is_empty() {
                return Err(Error::Config(format!("calibration axis {name} is empty")));
            }
            if axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::Config(format!("calibration axis {name} must be strictly increasing")));
            }
        }
        if self.hurst.iter().any(|&h| !(h > 0.0 && h < 1.0)) {
            return Err(Error::Config("hurst axis values must lie in (0, 1)".into()));
        }
        if self.sigma_var[0] < 0.0 || self.rho[0] <= 0.0 {
            return Err(Error::Config("sigma_var axis must be >= 0 and rho axis > 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.hurst.len() * self.sigma_var.len() * self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn index(&self, h: usize, s: usize, r: usize) -> usize {
        (h * self.sigma_var.len() + s) * self.rho.len() + r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationGrid {
    pub axes: CalibrationAxes,
    pub trace_len: usize,
    pub seeds: usize,
    pub base_seed: u64,
    /// Service rate the cells are computed at; queries rescale linearly.
    pub reference_net: f64,
    pub cv_window: usize,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            axes: CalibrationAxes::default(),
            trace_len: 1 << 14,
            seeds: 5,
            base_seed: 0,
            reference_net: 10.0,
            cv_window: DEFAULT_CV_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationMeta {
    pub trace_len: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub loss_target: f64,
    pub reference_net: f64,
    pub cv_window: usize,
    /// Per H row: measured σ_var for each cascade weight in `cascade_weights`.
    pub cascade_weights: Vec<f64>,
    pub sigma_lookup: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

/// Minimal buffer per (H, σ_var, ρ) cell; `None` marks a saturated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTable {
    pub axes: CalibrationAxes,
    /// Isotonic cells, H-major then σ_var then ρ.
    pub cells: Vec<Option<f64>>,
    /// Values straight from the search, before the isotonic pass.
    pub raw_cells: Vec<Option<f64>>,
    pub meta: CalibrationMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferRequirement {
    pub q_w: f64,
    /// The query fell outside the table hull and was clamped to it.
    pub clamped: bool,
}

/// How a cell's σ_var is realised when generating its traces.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Burstiness {
    /// fGn with per-slot std as a fraction of λ.
    Gaussian { rel_std: f64 },
    /// fGn with std λ/3, modulated by a cascade of this weight.
    Cascade { weight: f64 },
}

const CASCADE_REL_STD: f64 = 1.0 / 3.0;

fn burstiness_for(sigma: f64, hurst: f64, cv_window: usize, lookup: &[f64]) -> Burstiness {
    let floor = lookup[0];
    if sigma <= floor {
        // window sums of fGn: std = s·T^H, mean = λ·T
        let rel_std = sigma * (cv_window as f64).powf(1.0 - hurst);
        return Burstiness::Gaussian {
            rel_std: rel_std.min(CASCADE_REL_STD),
        };
    }
    let last = lookup.len() - 1;
    if sigma >= lookup[last] {
        warn!("sigma_var {sigma} beyond cascade range at H={hurst}; using weight {}", CASCADE_WEIGHTS[last]);
        return Burstiness::Cascade {
            weight: CASCADE_WEIGHTS[last],
        };
    }
    let i = lookup.windows(2).position(|w| sigma >= w[0] && sigma < w[1]).unwrap_or(last - 1);
    let span = lookup[i + 1] - lookup[i];
    let t = if span > 0.0 { (sigma - lookup[i]) / span } else { 0.0 };
    Burstiness::Cascade {
        weight: CASCADE_WEIGHTS[i] + t * (CASCADE_WEIGHTS[i + 1] - CASCADE_WEIGHTS[i]),
    }
}

fn to_counts(noise: &[f64], modulation: Option<&[f64]>, lambda: f64, std: f64) -> Vec<u64> {
    match modulation {
        None => noise.iter().map(|x| (lambda + std * x).round().max(0.0) as u64).collect(),
        Some(m) => noise
            .iter()
            .zip(m)
            .map(|(x, m)| (m * (lambda + std * x)).round().max(0.0) as u64)
            .collect(),
    }
}

/// Smallest buffer whose seed-averaged loss meets the target, or `None`.
fn minimal_buffer(traces: &[Vec<u64>], net: f64, target: f64) -> Option<u64> {
    let mean_loss = |q: u64| {
        traces
            .iter()
            .map(|t| simulate_loss(t, q as usize, net).loss_fraction())
            .sum::<f64>()
            / traces.len() as f64
    };
    if mean_loss(Q_W_UPPER) > target {
        return None;
    }
    let (mut lo, mut hi) = (0u64, Q_W_UPPER);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if mean_loss(mid) <= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

/// Builds the table by simulation. Deterministic in the grid's seeds.
pub fn calibrate(targets: &[QosClass], grid: &CalibrationGrid) -> Result<CalibrationTable> {
    grid.axes.validate()?;
    if targets.is_empty() {
        return Err(Error::Config("calibration needs at least one QoS class".into()));
    }
    crate::queue::validate_classes(targets)?;
    if grid.seeds < 3 {
        return Err(Error::Config(format!("calibration needs >= 3 seeds, got {}", grid.seeds)));
    }
    if grid.trace_len < MIN_TRACE_LEN || !grid.trace_len.is_power_of_two() {
        return Err(Error::Config(format!(
            "trace_len {} must be a power of two >= {MIN_TRACE_LEN}",
            grid.trace_len
        )));
    }
    if !(grid.reference_net > 0.0) {
        return Err(Error::Config("reference_net must be > 0".into()));
    }
    let target = targets.iter().map(|c| c.max_loss).fold(f64::INFINITY, f64::min);
    let axes = &grid.axes;
    let seeds: Vec<u64> = (0..grid.seeds as u64).map(|k| mix_seed(grid.base_seed, k)).collect();
    let depth = grid.trace_len.trailing_zeros();

    let noise: Vec<Vec<Vec<f64>>> = axes
        .hurst
        .par_iter()
        .map(|&h| {
            seeds
                .iter()
                .map(|&s| fractional_gaussian_noise(grid.trace_len, h, s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    // σ_var reached by each cascade weight, per H row, forced monotone.
    let lookup_lambda = 100.0;
    let sigma_lookup: Vec<Vec<f64>> = noise
        .par_iter()
        .map(|row| {
            let mut acc = 0.0f64;
            CASCADE_WEIGHTS
                .iter()
                .map(|&p| {
                    let measured = row
                        .iter()
                        .zip(&seeds)
                        .map(|(x, &s)| {
                            let m = binomial_cascade(depth, p, mix_seed(s, 1));
                            let counts = to_counts(x, Some(&m), lookup_lambda, lookup_lambda * CASCADE_REL_STD);
                            let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
                            cv_series(&xs, grid.cv_window).unwrap_or(0.0)
                        })
                        .sum::<f64>()
                        / seeds.len() as f64;
                    acc = acc.max(measured);
                    acc
                })
                .collect()
        })
        .collect();

    let cells_spec: Vec<(usize, usize, usize)> = (0..axes.hurst.len())
        .flat_map(|h| (0..axes.sigma_var.len()).flat_map(move |s| (0..axes.rho.len()).map(move |r| (h, s, r))))
        .collect();

    let raw: Vec<Option<f64>> = cells_spec
        .par_iter()
        .map(|&(h, s, r)| {
            let rho = axes.rho[r];
            if rho >= 1.0 {
                return None;
            }
            let hurst = axes.hurst[h];
            let lambda = rho * grid.reference_net;
            let shape = burstiness_for(axes.sigma_var[s], hurst, grid.cv_window, &sigma_lookup[h]);
            let traces: Vec<Vec<u64>> = noise[h]
                .iter()
                .zip(&seeds)
                .map(|(x, &seed)| match shape {
                    Burstiness::Gaussian { rel_std } => to_counts(x, None, lambda, rel_std * lambda),
                    Burstiness::Cascade { weight } => {
                        let m = binomial_cascade(depth, weight, mix_seed(seed, 1));
                        to_counts(x, Some(&m), lambda, CASCADE_REL_STD * lambda)
                    }
                })
                .collect();
            let q = minimal_buffer(&traces, grid.reference_net, target);
            debug!("cell H={hurst} sigma={} rho={rho}: {q:?}", axes.sigma_var[s]);
            q.map(|q| q as f64)
        })
        .collect();

    let cells = isotonic(axes, &raw);
    Ok(CalibrationTable {
        axes: axes.clone(),
        cells,
        raw_cells: raw,
        meta: CalibrationMeta {
            trace_len: grid.trace_len,
            seeds: grid.seeds,
            base_seed: grid.base_seed,
            loss_target: target,
            reference_net: grid.reference_net,
            cv_window: grid.cv_window,
            cascade_weights: CASCADE_WEIGHTS.to_vec(),
            sigma_lookup,
            generated_at: None,
        },
    })
}

/// Running max along H, then running max of cell/ρ along ρ. Saturated cells
/// act as +∞.
fn isotonic(axes: &CalibrationAxes, raw: &[Option<f64>]) -> Vec<Option<f64>> {
    let inf = |c: Option<f64>| c.unwrap_or(f64::INFINITY);
    let mut v: Vec<f64> = raw.iter().map(|&c| inf(c)).collect();
    for s in 0..axes.sigma_var.len() {
        for r in 0..axes.rho.len() {
            for h in 1..axes.hurst.len() {
                let prev = v[axes.index(h - 1, s, r)];
                let i = axes.index(h, s, r);
                v[i] = v[i].max(prev);
            }
        }
    }
    for h in 0..axes.hurst.len() {
        for s in 0..axes.sigma_var.len() {
            let mut ratio = 0.0f64;
            for r in 0..axes.rho.len() {
                let i = axes.index(h, s, r);
                ratio = ratio.max(v[i] / axes.rho[r]);
                v[i] = ratio * axes.rho[r];
            }
        }
    }
    v.into_iter().map(|x| x.is_finite().then_some(x)).collect()
}

/// Bracketing index and weight of `x` on `axis`, clamped to its ends.
fn bracket(axis: &[f64], x: f64) -> (usize, f64, bool) {
    let last = axis.len() - 1;
    if last == 0 {
        return (0, 0.0, x != axis[0]);
    }
    if x <= axis[0] {
        return (0, 0.0, x < axis[0]);
    }
    if x >= axis[last] {
        return (last - 1, 1.0, x > axis[last]);
    }
    let i = axis.partition_point(|&a| a <= x) - 1;
    (i, (x - axis[i]) / (axis[i + 1] - axis[i]), false)
}

impl CalibrationTable {
    /// σ_var a trace generated from these parameters is expected to show,
    /// using the same mapping the calibration used to synthesise its cells.
    pub fn declared_sigma_var(&self, hurst: f64, rel_std: f64, cascade_weight: Option<f64>) -> f64 {
        let meta = &self.meta;
        let gaussian = rel_std.max(0.0) * (meta.cv_window as f64).powf(hurst - 1.0);
        let Some(p) = cascade_weight.filter(|&p| p > 0.5) else {
            return gaussian;
        };
        if meta.sigma_lookup.is_empty() || meta.cascade_weights.is_empty() {
            return gaussian;
        }
        let along = |axis: &[f64], x: f64, at: &dyn Fn(usize) -> f64| {
            if axis.len() == 1 {
                return at(0);
            }
            let (i, t, _) = bracket(axis, x);
            at(i) + t * (at(i + 1) - at(i))
        };
        let row = |h: usize| along(&meta.cascade_weights, p, &|w| meta.sigma_lookup[h][w]);
        along(&self.axes.hurst, hurst, &row).max(gaussian)
    }

    pub fn cell(&self, h: usize, s: usize, r: usize) -> Option<f64> {
        self.cells[self.axes.index(h, s, r)]
    }

    pub fn is_monotone(&self) -> bool {
        let a = &self.axes;
        let v = |h, s, r| self.cell(h, s, r).unwrap_or(f64::INFINITY);
        for h in 0..a.hurst.len() {
            for s in 0..a.sigma_var.len() {
                for r in 0..a.rho.len() {
                    if h > 0 && v(h, s, r) < v(h - 1, s, r) {
                        return false;
                    }
                    if r > 0 && v(h, s, r) < v(h, s, r - 1) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Multilinear interpolation of the cells at reference scale.
    pub fn interpolate(&self, hurst: f64, sigma_var: f64, rho: f64) -> Result<BufferRequirement> {
        let a = &self.axes;
        let (hi, ht, hc) = bracket(&a.hurst, hurst);
        let (si, st, sc) = bracket(&a.sigma_var, sigma_var);
        let (ri, rt, rc) = bracket(&a.rho, rho);
        let mut total = 0.0;
        for (dh, wh) in [(0, 1.0 - ht), (1, ht)] {
            for (ds, ws) in [(0, 1.0 - st), (1, st)] {
                for (dr, wr) in [(0, 1.0 - rt), (1, rt)] {
                    let w = wh * ws * wr;
                    if w == 0.0 {
                        continue;
                    }
                    let cell = self
                        .cell(hi + dh, si + ds, ri + dr)
                        .ok_or(Error::SaturatedRegion)?;
                    total += w * cell;
                }
            }
        }
        Ok(BufferRequirement {
            q_w: total,
            clamped: hc || sc || rc,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(s)?;
        table.axes.validate()?;
        if table.cells.len() != table.axes.len() || table.raw_cells.len() != table.axes.len() {
            return Err(Error::Config(format!(
                "calibration table has {} cells for a {}-cell grid",
                table.cells.len(),
                table.axes.len()
            )));
        }
        Ok(table)
    }
}

/// Buffer needed at service rate `net` for traffic described by `profile`.
pub fn required_buffer(table: &CalibrationTable, net: f64, profile: &FlowProfile) -> Result<BufferRequirement> {
    if profile.lambda <= 0.0 {
        return Ok(BufferRequirement { q_w: 0.0, clamped: false });
    }
    if !(net > 0.0) {
        return Err(Error::SaturatedRegion);
    }
    let rho = profile.lambda / net;
    if rho >= 1.0 {
        return Err(Error::SaturatedRegion);
    }
    let at_ref = table.interpolate(profile.hurst, profile.sigma_var, rho)?;
    Ok(BufferRequirement {
        q_w: at_ref.q_w * net / table.meta.reference_net,
        clamped: at_ref.clamped,
    })
}

/// Smallest service rate within the table's ρ range whose required buffer
/// fits in `q_w`. The scaled buffer is not monotone in the rate, so the ρ
/// axis points are scanned from the heaviest load down and the first
/// bracket that fits is bisected.
pub fn required_capacity(table: &CalibrationTable, q_w: f64, profile: &FlowProfile) -> Result<f64> {
    if profile.lambda <= 0.0 {
        return Ok(0.0);
    }
    let fits = |net: f64| required_buffer(table, net, profile).is_ok_and(|b| b.q_w <= q_w * (1.0 + 1e-9));
    let nets: Vec<f64> = table.axes.rho.iter().rev().map(|r| profile.lambda / r).collect();
    let Some(k) = nets.iter().position(|&n| fits(n)) else {
        return Err(Error::Infeasible(format!(
            "buffer {q_w} insufficient for λ={} at any net in [{}, {}]",
            profile.lambda,
            nets[0],
            nets[nets.len() - 1]
        )));
    };
    if k == 0 {
        return Ok(nets[0]);
    }
    let (mut a, mut b) = (nets[k - 1], nets[k]);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if fits(mid) {
            b = mid;
        } else {
            a = mid;
        }
        if b - a <= 1e-9 * b {
            break;
        }
    }
    Ok(b)
}

/// Predicts the traffic profile for the next `horizon` slots.
pub trait Forecaster {
    fn forecast(&self, history: &[f64], horizon: usize) -> Result<FlowProfile>;
}

/// Next interval looks like the recent past: λ from the trailing
/// `rate_window` slots, H and σ_var from the whole history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistenceForecast {
    pub rate_window: usize,
    pub cv_window: usize,
}

impl Default for PersistenceForecast {
    fn default() -> Self {
        Self {
            rate_window: 256,
            cv_window: DEFAULT_CV_WINDOW,
        }
    }
}

impl Forecaster for PersistenceForecast {
    fn forecast(&self, history: &[f64], _horizon: usize) -> Result<FlowProfile> {
        if history.len() < MIN_TRACE_LEN {
            return Err(Error::TraceTooShort {
                len: history.len(),
                min: MIN_TRACE_LEN,
            });
        }
        let mut profile = profile_rate_scaling(history, self.cv_window)?;
        let tail = &history[history.len() - self.rate_window.min(history.len())..];
        profile.lambda = mean(tail);
        Ok(profile)
    }
}

pub fn forecast_profile(history: &[f64], horizon: usize) -> Result<FlowProfile> {
    PersistenceForecast::default().forecast(history, horizon)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionKind {
    GrantBuffer,
    GrantCapacity,
    AlertDeny,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityTransfer {
    /// Sibling channel giving up capacity; `None` for the link's unassigned capacity.
    pub from_channel: Option<usize>,
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub kind: DecisionKind,
    pub requested: f64,
    pub granted: f64,
    pub p_sec_scalar: f64,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transfers: Vec<CapacityTransfer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpareCapacity {
    pub channel: usize,
    pub spare: f64,
    pub utilization: f64,
}

/// Capacity a channel may borrow on its link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkSpare {
    pub unassigned: f64,
    pub siblings: Vec<SpareCapacity>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceNeed {
    pub q_w: f64,
    /// Service rate that would cover the forecast with the current buffer.
    pub net: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub p_sec_gate: f64,
    pub max_buffer: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            p_sec_gate: DEFAULT_P_SEC_GATE,
            max_buffer: 10_000.0,
        }
    }
}

pub fn apply_policy(
    current: &NodeState,
    need: ResourceNeed,
    sec: &SecurityProfile,
    spare: &LinkSpare,
    cfg: &PolicyConfig,
) -> ControlDecision {
    let cur_q = current.buffer_capacity() as f64;
    let cur_net = current.service_rate();
    let scalar = sec.scalar;
    let decision = |kind, requested, granted, reason: String| ControlDecision {
        kind,
        requested,
        granted,
        p_sec_scalar: scalar,
        reason,
        transfers: Vec::new(),
    };

    let needed_q = need.q_w.ceil();
    if needed_q <= cur_q {
        return decision(DecisionKind::GrantBuffer, cur_q, cur_q, "current buffer suffices".into());
    }
    if scalar < cfg.p_sec_gate {
        return decision(
            DecisionKind::AlertDeny,
            needed_q,
            0.0,
            format!("P_sec {scalar:.3} below gate {}; buffer {needed_q} not allocated", cfg.p_sec_gate),
        );
    }

    if let Some(net) = need.net.filter(|&n| n > cur_net) {
        let deficit = net - cur_net;
        let available = spare.unassigned.max(0.0) + spare.siblings.iter().map(|s| s.spare.max(0.0)).sum::<f64>();
        if available >= deficit {
            let mut transfers = Vec::new();
            let mut left = deficit;
            let from_free = spare.unassigned.max(0.0).min(left);
            if from_free > 0.0 {
                transfers.push(CapacityTransfer {
                    from_channel: None,
                    amount: from_free,
                });
                left -= from_free;
            }
            let mut siblings = spare.siblings.clone();
            siblings.sort_by(|a, b| a.utilization.total_cmp(&b.utilization).then(a.channel.cmp(&b.channel)));
            for s in siblings {
                if left <= 0.0 {
                    break;
                }
                let take = s.spare.max(0.0).min(left);
                if take > 0.0 {
                    transfers.push(CapacityTransfer {
                        from_channel: Some(s.channel),
                        amount: take,
                    });
                    left -= take;
                }
            }
            let mut d = decision(
                DecisionKind::GrantCapacity,
                net,
                net,
                format!("service rate {cur_net} -> {net:.3}"),
            );
            d.transfers = transfers;
            return d;
        }
    }

    let granted = needed_q.min(cfg.max_buffer);
    decision(
        DecisionKind::GrantBuffer,
        needed_q,
        granted,
        format!("buffer {cur_q} -> {granted}"),
    )
}
