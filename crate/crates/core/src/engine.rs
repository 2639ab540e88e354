//! Deterministic slot-stepped network experiment: traffic sources, per
//! link-channel queues, firewall detection, buffer/capacity control and
//! fractal-aware routing.

use std::collections::BTreeMap;
use std::io::Write;

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{profile_rate_scaling, FlowProfile, DEFAULT_CV_WINDOW};
use crate::control::{
    apply_policy, required_buffer, required_capacity, CalibrationTable, DecisionKind, Forecaster, LinkSpare,
    PersistenceForecast, PolicyConfig, ResourceNeed, SpareCapacity,
};
use crate::detection::{detect, DetectorConfig, SecurityProfile};
use crate::error::{Error, Result};
use crate::queue::{validate_classes, DropReason, NodeState, Packet, QosClass};
use crate::routing::{
    capacity_conservation_check, AdmissionModel, Assignment, NetworkGraph, NodeRole, Path, RejectReason,
    RouteOutcome, RouteRequest, RoutingTable,
};
use crate::stats::mix_seed;
use crate::traffic::{generate_trace, inject_attacks, AttackSpec, SlotLabel, TraceSpec, TrafficTrace, MIN_TRACE_LEN};

pub const MIN_DURATION: usize = 1 << 12;
/// Longest arrival history handed to the estimators.
const PROFILE_SPAN: usize = 1 << 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodMode {
    None,
    Mbccc,
    Rm,
    Both,
}

impl MethodMode {
    pub const ALL: [MethodMode; 4] = [MethodMode::None, MethodMode::Mbccc, MethodMode::Rm, MethodMode::Both];

    pub fn controls_capacity(self) -> bool {
        matches!(self, MethodMode::Mbccc | MethodMode::Both)
    }

    pub fn routes_adaptively(self) -> bool {
        matches!(self, MethodMode::Rm | MethodMode::Both)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MethodMode::None => "none",
            MethodMode::Mbccc => "mbccc",
            MethodMode::Rm => "rm",
            MethodMode::Both => "both",
        }
    }
}

impl std::fmt::Display for MethodMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MethodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MethodMode::None),
            "mbccc" => Ok(MethodMode::Mbccc),
            "rm" => Ok(MethodMode::Rm),
            "both" => Ok(MethodMode::Both),
            other => Err(Error::Config(format!("unknown method mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default)]
    pub id: Option<String>,
    pub source: String,
    pub dest: String,
    /// Shape of the flow's traffic. `mean_rate`/`std_rate` are relative: the
    /// engine rescales all flows so their total meets the load ratio.
    /// `length` is replaced by the run length and `seed` is mixed with the
    /// run seed.
    pub traffic: TraceSpec,
    pub class: u8,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: Option<String>,
    /// Topology file, resolved by the caller.
    pub topology: String,
    /// Calibration table file, resolved by the caller.
    pub calibration: Option<String>,
    pub classes: Vec<QosClass>,
    pub flows: Vec<FlowConfig>,
    pub method_mode: MethodMode,
    /// Offered load as a fraction of the source-destination max flow.
    pub load_ratio: f64,
    /// Control horizon Δ in slots.
    pub horizon: usize,
    /// Route recalculation interval in slots.
    pub route_recalc: usize,
    pub duration: usize,
    pub seed: u64,
    pub tick_ms: f64,
    pub p_sec_gate: f64,
    pub c0: Option<f64>,
    /// Initial buffer of each link-channel queue, in slots of its service
    /// rate: `Q_w = ceil(buffer_slots · Net)`.
    pub buffer_slots: f64,
    pub max_buffer: f64,
    pub k_paths: usize,
    pub detector: DetectorConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: None,
            topology: String::new(),
            calibration: None,
            classes: Vec::new(),
            flows: Vec::new(),
            method_mode: MethodMode::Both,
            load_ratio: 0.7,
            horizon: 256,
            route_recalc: 1024,
            duration: 1 << 14,
            seed: 0,
            tick_ms: 1.0,
            p_sec_gate: crate::control::DEFAULT_P_SEC_GATE,
            c0: None,
            buffer_slots: 2.0,
            max_buffer: PolicyConfig::default().max_buffer,
            k_paths: crate::routing::DEFAULT_K_PATHS,
            detector: DetectorConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.2..=0.9).contains(&self.load_ratio) {
            return fail(format!("load_ratio {} outside [0.2, 0.9]", self.load_ratio));
        }
        if self.duration < MIN_DURATION {
            return fail(format!("duration {} < {MIN_DURATION}", self.duration));
        }
        if self.horizon == 0 || self.route_recalc == 0 {
            return fail("horizon and route_recalc must be >= 1".into());
        }
        if !(self.buffer_slots >= 0.0) || !self.buffer_slots.is_finite() {
            return fail(format!("buffer_slots {} must be finite and >= 0", self.buffer_slots));
        }
        if !(self.tick_ms > 0.0) {
            return fail("tick_ms must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.p_sec_gate) {
            return fail(format!("p_sec_gate {} outside [0, 1]", self.p_sec_gate));
        }
        if self.c0.is_some_and(|c| !(c >= 0.0)) {
            return fail("c0 must be >= 0".into());
        }
        if self.classes.is_empty() {
            return fail("at least one QoS class is required".into());
        }
        validate_classes(&self.classes)?;
        if self.flows.is_empty() {
            return fail("at least one flow is required".into());
        }
        for (i, f) in self.flows.iter().enumerate() {
            if !self.classes.iter().any(|c| c.id == f.class) {
                return fail(format!("flow {i}: unknown class {}", f.class));
            }
            let mut spec = f.traffic.clone();
            spec.length = trace_len(self.duration);
            spec.validate()?;
            if let Some(a) = &f.attack {
                a.validate(self.duration)?;
            }
        }
        self.detector.validate()?;
        if self.k_paths == 0 {
            return fail("k_paths must be >= 1".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn trace_len(duration: usize) -> usize {
    duration.max(MIN_TRACE_LEN).next_power_of_two()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Resize,
    Alert,
    Reroute,
    Rejection,
    Announcement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub slot: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<String>,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub alerts: u64,
    pub resizes: u64,
    pub reroutes: u64,
    pub rejections: u64,
    pub announcements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLoss {
    pub class: u8,
    pub lost_data_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow: String,
    pub class: u8,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub loss: f64,
    pub mean_delay_ms: f64,
    pub jitter_ms: f64,
    /// Admitted under the loss/delay constraint at the end of the run.
    pub admitted: bool,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub conservation: bool,
    pub loss_bound: bool,
    pub metric_ranges: bool,
    pub capacity: bool,
    pub quiet_baseline: bool,
    pub failures: Vec<String>,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: MethodMode,
    pub load_ratio: f64,
    pub seed: u64,
    pub channel_utilization: f64,
    pub lost_data_pct: f64,
    pub lost_per_class: Vec<ClassLoss>,
    pub jitter_ms: f64,
    pub p_sec: SecurityProfile,
    pub events: EventCounts,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
    pub flows: Vec<FlowReport>,
    pub audit: Audit,
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub report: SimReport,
    pub events: Vec<Event>,
}

impl SimRun {
    pub fn write_event_log<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

struct FlowRt {
    name: String,
    class_id: u8,
    rank: usize,
    channel: usize,
    src: usize,
    dst: usize,
    counts: Vec<u64>,
    attack: Vec<bool>,
    demand: f64,
    max_loss: f64,
    max_delay_ms: f64,
    deadline: Option<u64>,
    route: usize,
    /// Holds a reservation granted under the loss/delay constraint.
    admitted: bool,
    ever_admitted: bool,
    /// A reroute or alert was logged for this flow.
    flagged: bool,
    reserved_on: Vec<usize>,
    carried_on: Vec<usize>,
    /// (H, σ_var) from the flow's traffic descriptor, used before a link has history.
    declared: (f64, f64),
    injected: u64,
    delivered: u64,
    dropped: u64,
    delay_sum: f64,
    last_delay: Option<u64>,
    jitter_sum: f64,
    jitter_n: u64,
    interval_injected: u64,
    interval_dropped: u64,
}

struct Route {
    links: Vec<usize>,
    through_firewall: bool,
}

struct QueueRt {
    node: NodeState,
    link: usize,
    channel: usize,
    history: Vec<u32>,
    reserved: f64,
    /// Demand of best-effort flows routed through this queue.
    carried: f64,
    served: u64,
    interval_arrived: u64,
    interval_dropped: u64,
    interval_served: u64,
    interval_delay: f64,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    graph: &'a NetworkGraph,
    table: Option<&'a CalibrationTable>,
    k: usize,
    firewall: Option<usize>,
    classes: Vec<QosClass>,
    flows: Vec<FlowRt>,
    routes: Vec<Route>,
    queues: Vec<QueueRt>,
    routing: RoutingTable,
    sec: SecurityProfile,
    fw_series: Vec<u64>,
    fw_labels: Vec<SlotLabel>,
    events: Vec<Event>,
    next_packet: u64,
    capacity_ok: bool,
    capacity_failures: Vec<String>,
}

/// Admission prediction from recent queue tallies and, when a table is
/// present, the calibrated buffer requirement at the post-assignment load.
struct Admission<'e> {
    queues: &'e [QueueRt],
    flows: &'e [FlowRt],
    candidate: (f64, f64),
    profiles: &'e BTreeMap<(usize, usize), FlowProfile>,
    table: Option<&'e CalibrationTable>,
    k: usize,
    tick_ms: f64,
}

impl AdmissionModel for Admission<'_> {
    fn predict(&self, path: &Path, channel: usize, demand: f64) -> (f64, f64) {
        let mut loss = 0.0;
        let mut delay = 0.0;
        for &l in &path.links {
            let q = &self.queues[l * self.k + channel];
            let observed = if q.interval_arrived > 0 {
                q.interval_dropped as f64 / q.interval_arrived as f64
            } else {
                0.0
            };
            let mut predicted = 0.0;
            if let Some(table) = self.table {
                // Aggregate after assignment: measured profile if the channel has
                // history, never milder than any descriptor loaded on it.
                let (mut h, mut sigma) = self.candidate;
                for f in self.flows.iter().filter(|f| f.channel == channel) {
                    if f.reserved_on.contains(&l) || f.carried_on.contains(&l) {
                        h = h.max(f.declared.0);
                        sigma = sigma.max(f.declared.1);
                    }
                }
                if let Some(m) = self.profiles.get(&(l, channel)) {
                    h = h.max(m.hurst);
                    sigma = sigma.max(m.sigma_var);
                }
                let post = FlowProfile {
                    lambda: q.reserved + q.carried + demand,
                    hurst: h,
                    sigma_var: sigma,
                    delta_h: None,
                    delta_h_raw: None,
                    window: DEFAULT_CV_WINDOW,
                };
                let net = q.node.service_rate();
                let qw = q.node.buffer_capacity() as f64;
                predicted = match required_buffer(table, net, &post) {
                    Ok(b) if b.q_w <= qw => 0.0,
                    Ok(b) => (table.meta.loss_target * b.q_w / qw.max(1.0)).min(1.0),
                    Err(_) => 1.0,
                };
            }
            loss += f64::max(observed, predicted);
            delay += if q.interval_served > 0 {
                q.interval_delay / q.interval_served as f64
            } else {
                self.tick_ms
            };
        }
        (loss, delay)
    }
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ScenarioConfig, graph: &'a NetworkGraph, table: Option<&'a CalibrationTable>) -> Result<Self> {
        cfg.validate()?;
        if cfg.method_mode.controls_capacity() && table.is_none() {
            return Err(Error::CalibrationMissing);
        }
        let k = graph.channel_count();
        if k == 0 {
            return Err(Error::Topology("topology has no links".into()));
        }
        let mut classes = cfg.classes.clone();
        classes.sort_by_key(|c| c.id);
        let firewall = (0..graph.node_count()).find(|&n| graph.node_role(n) == NodeRole::Firewall);
        let c0 = cfg.c0.unwrap_or_else(|| graph.default_c0(cfg.k_paths));

        let queues = (0..graph.link_count())
            .flat_map(|l| (0..k).map(move |c| (l, c)))
            .map(|(link, channel)| QueueRt {
                node: NodeState::new(
                    classes.len(),
                    (cfg.buffer_slots * graph.channel_capacity(link, channel)).ceil() as usize,
                    graph.channel_capacity(link, channel),
                    cfg.tick_ms,
                ),
                link,
                channel,
                history: Vec::with_capacity(cfg.duration),
                reserved: 0.0,
                carried: 0.0,
                served: 0,
                interval_arrived: 0,
                interval_dropped: 0,
                interval_served: 0,
                interval_delay: 0.0,
            })
            .collect();

        let mut engine = Self {
            cfg,
            graph,
            table,
            k,
            firewall,
            flows: Vec::new(),
            routes: Vec::new(),
            queues,
            routing: RoutingTable::new(cfg.k_paths, c0),
            sec: SecurityProfile::zero(),
            fw_series: Vec::with_capacity(cfg.duration),
            fw_labels: Vec::with_capacity(cfg.duration),
            events: Vec::new(),
            next_packet: 0,
            capacity_ok: true,
            capacity_failures: Vec::new(),
            classes,
        };
        engine.build_flows()?;
        Ok(engine)
    }

    fn build_flows(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let len = trace_len(cfg.duration);
        let mut traces = Vec::with_capacity(cfg.flows.len());
        for (i, f) in cfg.flows.iter().enumerate() {
            let mut spec = f.traffic.clone();
            spec.length = len;
            spec.tick_ms = cfg.tick_ms;
            spec.seed = mix_seed(mix_seed(cfg.seed, i as u64), f.traffic.seed);
            traces.push(spec);
        }

        // Scale rates so each source-destination group offers load_ratio of its max flow.
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, f) in cfg.flows.iter().enumerate() {
            let src = self.graph.node_index(&f.source)?;
            let dst = self.graph.node_index(&f.dest)?;
            if src == dst {
                return Err(Error::Config(format!("flow {i}: source equals destination")));
            }
            groups.entry((src, dst)).or_default().push(i);
        }
        for (&(src, dst), members) in &groups {
            let graph = self.graph;
            let max_flow = graph.max_flow(src, dst, |l| graph.link(l).channels.iter().sum());
            if max_flow <= 0.0 {
                return Err(Error::EmptyAdmissibleSet(
                    graph.node_id(src).to_string(),
                    graph.node_id(dst).to_string(),
                ));
            }
            let weight: f64 = members.iter().map(|&i| traces[i].mean_rate).sum();
            let scale = cfg.load_ratio * max_flow / weight;
            for &i in members {
                traces[i].mean_rate *= scale;
                traces[i].std_rate *= scale;
            }
        }

        for (i, (f, spec)) in cfg.flows.iter().zip(traces).enumerate() {
            let mut trace = generate_trace(&spec)?;
            if let Some(a) = &f.attack {
                trace = inject_attacks(&trace, a)?;
            }
            let class = self.classes.iter().position(|c| c.id == f.class).expect("validated");
            let qos = &self.classes[class];
            let deadline = qos
                .expires
                .then(|| (qos.max_delay_ms / cfg.tick_ms).ceil() as u64);
            let rel_std = if spec.mean_rate > 0.0 { spec.std_rate / spec.mean_rate } else { 0.0 };
            let declared = (
                spec.target_hurst,
                self.table
                    .map_or(0.0, |t| t.declared_sigma_var(spec.target_hurst, rel_std, spec.cascade_weight)),
            );
            self.flows.push(FlowRt {
                name: f.id.clone().unwrap_or_else(|| format!("f{i}")),
                class_id: f.class,
                rank: class,
                channel: f.class as usize % self.k,
                src: self.graph.node_index(&f.source)?,
                dst: self.graph.node_index(&f.dest)?,
                counts: trace.counts[..cfg.duration].to_vec(),
                attack: trace.labels[..cfg.duration].iter().map(|l| l.is_attack()).collect(),
                demand: spec.mean_rate,
                max_loss: qos.max_loss,
                max_delay_ms: qos.max_delay_ms,
                deadline,
                route: usize::MAX,
                admitted: false,
                ever_admitted: false,
                flagged: false,
                reserved_on: Vec::new(),
                carried_on: Vec::new(),
                declared,
                injected: 0,
                delivered: 0,
                dropped: 0,
                delay_sum: 0.0,
                last_delay: None,
                jitter_sum: 0.0,
                jitter_n: 0,
                interval_injected: 0,
                interval_dropped: 0,
            });
        }
        Ok(())
    }

    fn queue_index(&self, link: usize, channel: usize) -> usize {
        link * self.k + channel
    }

    fn queue_label(&self, q: usize) -> String {
        let (link, channel) = (self.queues[q].link, self.queues[q].channel);
        let (a, b) = self.graph.link_ends(link);
        format!("{}->{}#{}", self.graph.node_id(a), self.graph.node_id(b), channel)
    }

    fn log(&mut self, slot: usize, kind: EventKind, node: Option<String>, flow: Option<String>, detail: String) {
        debug!("slot {slot} {kind:?} {node:?} {flow:?}: {detail}");
        self.events.push(Event {
            slot: slot as u64,
            kind,
            node,
            flow,
            detail,
        });
    }

    fn set_route(&mut self, f: usize, path: &Path) {
        let through_firewall = self.firewall.is_some_and(|fw| path.nodes.contains(&fw));
        self.routes.push(Route {
            links: path.links.clone(),
            through_firewall,
        });
        self.flows[f].route = self.routes.len() - 1;
    }

    fn reserve(&mut self, f: usize, links: &[usize]) {
        let (channel, demand) = (self.flows[f].channel, self.flows[f].demand);
        for &l in links {
            let q = self.queue_index(l, channel);
            self.queues[q].reserved += demand;
        }
        self.flows[f].reserved_on = links.to_vec();
    }

    fn release(&mut self, f: usize) {
        let (channel, demand) = (self.flows[f].channel, self.flows[f].demand);
        for l in std::mem::take(&mut self.flows[f].reserved_on) {
            let q = self.queue_index(l, channel);
            self.queues[q].reserved -= demand;
        }
    }

    fn carry(&mut self, f: usize, links: &[usize]) {
        let (channel, demand) = (self.flows[f].channel, self.flows[f].demand);
        for &l in links {
            let q = self.queue_index(l, channel);
            self.queues[q].carried += demand;
        }
        self.flows[f].carried_on = links.to_vec();
    }

    fn residual(&self, link: usize, channel: usize) -> f64 {
        let q = &self.queues[self.queue_index(link, channel)];
        q.node.service_rate() - q.reserved - q.carried
    }

    /// Admissible path with the largest bottleneck residual; carries flows
    /// that could not be admitted.
    fn most_free_path(&mut self, f: usize) -> Result<Path> {
        let (src, dst, channel) = (self.flows[f].src, self.flows[f].dst, self.flows[f].channel);
        let paths = self.routing.admissible(self.graph, src, dst)?.to_vec();
        let bottleneck = |p: &Path| {
            p.links
                .iter()
                .map(|&l| self.residual(l, channel))
                .fold(f64::INFINITY, f64::min)
        };
        let best = paths
            .iter()
            .max_by(|a, b| {
                bottleneck(a)
                    .total_cmp(&bottleneck(b))
                    .then(self.graph.path_base_cost(b).total_cmp(&self.graph.path_base_cost(a)))
            })
            .expect("admissible set is non-empty");
        Ok(best.clone())
    }

    fn request(&self, f: usize) -> RouteRequest {
        let flow = &self.flows[f];
        RouteRequest {
            src: flow.src,
            dst: flow.dst,
            channel: flow.channel,
            demand: flow.demand,
            max_loss: flow.max_loss,
            max_delay_ms: flow.max_delay_ms,
        }
    }

    fn route_once(&mut self, f: usize, profiles: &BTreeMap<(usize, usize), FlowProfile>) -> Result<RouteOutcome> {
        let req = self.request(f);
        let residuals: Vec<f64> = (0..self.queues.len())
            .map(|q| self.queues[q].node.service_rate() - self.queues[q].reserved - self.queues[q].carried)
            .collect();
        let k = self.k;
        let residual = |l: usize, c: usize| residuals[l * k + c];
        if self.cfg.method_mode.routes_adaptively() {
            let model = Admission {
                queues: &self.queues,
                flows: &self.flows,
                candidate: self.flows[f].declared,
                profiles,
                table: self.table,
                k,
                tick_ms: self.cfg.tick_ms,
            };
            self.routing.route_flow(self.graph, &req, residual, &model)
        } else {
            self.routing
                .route_flow(self.graph, &req, residual, &crate::routing::NoPrediction)
        }
    }

    fn initial_routing(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.flows.len()).collect();
        order.sort_by_key(|&f| (self.flows[f].rank, f));
        let empty = BTreeMap::new();
        for f in order {
            match self.route_once(f, &empty)? {
                RouteOutcome::Routed { path, .. } => {
                    self.set_route(f, &path);
                    self.reserve(f, &path.links);
                    let adaptive = self.cfg.method_mode.routes_adaptively();
                    self.flows[f].admitted = adaptive;
                    self.flows[f].ever_admitted = adaptive;
                }
                RouteOutcome::Rejected(reason) => {
                    let path = self.most_free_path(f)?;
                    self.set_route(f, &path);
                    self.carry(f, &path.links);
                    if self.cfg.method_mode.routes_adaptively() {
                        let name = self.flows[f].name.clone();
                        self.log(0, EventKind::Rejection, None, Some(name), format!("{reason:?}; carried best-effort"));
                    }
                }
            }
        }
        self.check_capacity(0);
        Ok(())
    }

    fn check_capacity(&mut self, slot: usize) {
        let assignments: Vec<Assignment> = self
            .flows
            .iter()
            .filter(|f| !f.reserved_on.is_empty())
            .map(|f| Assignment {
                links: f.reserved_on.clone(),
                channel: f.channel,
                demand: f.demand,
            })
            .collect();
        if !self.cfg.method_mode.controls_capacity() {
            if let Err(v) = capacity_conservation_check(self.graph, &assignments) {
                self.capacity_ok = false;
                self.capacity_failures.push(format!(
                    "slot {slot}: link {} channel {} assigned {} > {}",
                    v.link, v.channel, v.assigned, v.capacity
                ));
            }
            return;
        }
        // Control moves capacity between channels, so check against the live rates.
        let mut assigned: BTreeMap<usize, f64> = BTreeMap::new();
        for a in &assignments {
            for &l in &a.links {
                *assigned.entry(self.queue_index(l, a.channel)).or_default() += a.demand;
            }
        }
        for (&q, &sum) in &assigned {
            let rate = self.queues[q].node.service_rate();
            if sum > rate + 1e-9 * rate.max(1.0) {
                self.capacity_ok = false;
                self.capacity_failures
                    .push(format!("slot {slot}: {} reserved {sum} > rate {rate}", self.queue_label(q)));
            }
        }
        for l in 0..self.graph.link_count() {
            let total: f64 = (0..self.k).map(|c| self.queues[self.queue_index(l, c)].node.service_rate()).sum();
            let cap = self.graph.link(l).capacity;
            if total > cap + 1e-9 * cap.max(1.0) {
                self.capacity_ok = false;
                self.capacity_failures.push(format!("slot {slot}: link {l} channels sum {total} > {cap}"));
            }
        }
    }

    fn refresh_security(&mut self, slot: usize) {
        if slot < self.cfg.detector.window {
            return;
        }
        let trace = TrafficTrace {
            counts: self.fw_series[..slot].to_vec(),
            labels: self.fw_labels[..slot].to_vec(),
            tick_ms: self.cfg.tick_ms,
            spec: None,
        };
        match detect(&trace, &self.cfg.detector) {
            Ok(d) => self.sec = d.profile,
            Err(e) => debug!("detection skipped at slot {slot}: {e}"),
        }
    }

    fn recent_history(&self, q: usize) -> Vec<f64> {
        let h = &self.queues[q].history;
        h[h.len().saturating_sub(PROFILE_SPAN)..].iter().map(|&x| x as f64).collect()
    }

    fn profiles(&self) -> BTreeMap<(usize, usize), FlowProfile> {
        let mut out = BTreeMap::new();
        for (q, rt) in self.queues.iter().enumerate() {
            if rt.history.len() < MIN_TRACE_LEN {
                continue;
            }
            let xs = self.recent_history(q);
            if xs.iter().all(|&x| x == 0.0) {
                continue;
            }
            if let Ok(p) = profile_rate_scaling(&xs, DEFAULT_CV_WINDOW) {
                out.insert((rt.link, rt.channel), p);
            }
        }
        out
    }

    /// Largest buffer whose drain time fits the per-hop share of the tightest
    /// delay bound carried on this channel.
    fn delay_capped_buffer(&self, q: usize) -> f64 {
        let (link, channel) = (self.queues[q].link, self.queues[q].channel);
        let tau = self
            .classes
            .iter()
            .filter(|c| c.id as usize % self.k == channel)
            .map(|c| c.max_delay_ms)
            .fold(f64::INFINITY, f64::min);
        if !tau.is_finite() {
            return self.cfg.max_buffer;
        }
        let hops = self
            .flows
            .iter()
            .filter(|f| f.channel == channel)
            .map(|f| &self.routes[f.route].links)
            .filter(|links| links.contains(&link))
            .map(|links| links.len())
            .max()
            .unwrap_or(1);
        let per_hop = tau / (self.cfg.tick_ms * hops as f64);
        (per_hop * self.queues[q].node.service_rate())
            .floor()
            .min(self.cfg.max_buffer)
    }

    fn run_control(&mut self, slot: usize) {
        let table = self.table.expect("checked in new");
        let rho_cap = *table.axes.rho.last().expect("non-empty axis");
        let forecaster = PersistenceForecast::default();
        for q in 0..self.queues.len() {
            if self.queues[q].history.len() < MIN_TRACE_LEN {
                continue;
            }
            let xs = self.recent_history(q);
            if xs.iter().all(|&x| x == 0.0) {
                continue;
            }
            let Ok(forecast) = forecaster.forecast(&xs, self.cfg.horizon) else {
                continue;
            };
            let node = &self.queues[q].node;
            let (qw, net) = (node.buffer_capacity() as f64, node.service_rate());
            let policy = PolicyConfig {
                p_sec_gate: self.cfg.p_sec_gate,
                max_buffer: self.delay_capped_buffer(q).max(qw),
            };
            let need_q = match required_buffer(table, net, &forecast) {
                Ok(b) => b.q_w.min(policy.max_buffer),
                Err(Error::SaturatedRegion) => policy.max_buffer,
                Err(_) => continue,
            };
            if need_q.ceil() <= qw {
                continue;
            }
            let need_net = required_capacity(table, qw, &forecast).ok();

            let link = self.queues[q].link;
            let channel = self.queues[q].channel;
            let mut siblings = Vec::new();
            let mut assigned = 0.0;
            for c in 0..self.k {
                let sq = self.queue_index(link, c);
                let rate = self.queues[sq].node.service_rate();
                assigned += rate;
                if c == channel {
                    continue;
                }
                let h = &self.queues[sq].history;
                let tail = &h[h.len().saturating_sub(forecaster.rate_window)..];
                let lambda = tail.iter().map(|&x| x as f64).sum::<f64>() / tail.len().max(1) as f64;
                let floor = lambda.max(self.queues[sq].reserved) / rho_cap;
                siblings.push(SpareCapacity {
                    channel: c,
                    spare: (rate - floor).max(0.0),
                    utilization: if rate > 0.0 { lambda / rate } else { 1.0 },
                });
            }
            let spare = LinkSpare {
                unassigned: (self.graph.link(link).capacity - assigned).max(0.0),
                siblings,
            };
            let need = ResourceNeed {
                q_w: need_q,
                net: need_net,
            };
            let decision = apply_policy(&self.queues[q].node, need, &self.sec, &spare, &policy);
            let label = self.queue_label(q);
            match decision.kind {
                DecisionKind::GrantBuffer if decision.granted > qw => {
                    let evicted = self.queues[q].node.resize(decision.granted as usize, net);
                    debug_assert!(evicted.is_empty());
                    self.log(slot, EventKind::Resize, Some(label), None, decision.reason);
                }
                DecisionKind::GrantCapacity => {
                    for t in &decision.transfers {
                        if let Some(c) = t.from_channel {
                            let sq = self.queue_index(link, c);
                            let node = &mut self.queues[sq].node;
                            let (sq_w, s_net) = (node.buffer_capacity(), node.service_rate());
                            node.resize(sq_w, s_net - t.amount);
                        }
                    }
                    self.queues[q].node.resize(qw as usize, decision.granted);
                    self.log(slot, EventKind::Resize, Some(label), None, decision.reason);
                }
                DecisionKind::AlertDeny => {
                    self.log(slot, EventKind::Alert, Some(label), None, decision.reason);
                }
                DecisionKind::GrantBuffer => {}
            }
        }
    }

    fn run_routing(&mut self, slot: usize, final_check: bool) -> Result<()> {
        let profiles = self.profiles();
        if !final_check {
            let anns = self
                .routing
                .update_all_costs(self.graph, &profiles, &self.sec, slot as u64)?;
            for a in anns {
                let detail = format!("{} ch{}: {} -> {} ({:?})", a.path.join("-"), a.channel, a.old_cost, a.new_cost, a.branch);
                self.log(slot, EventKind::Announcement, None, None, detail);
            }
        }
        for f in 0..self.flows.len() {
            let flow = &self.flows[f];
            if !flow.admitted || flow.interval_injected == 0 {
                continue;
            }
            let loss = flow.interval_dropped as f64 / flow.interval_injected as f64;
            if loss <= flow.max_loss {
                continue;
            }
            let name = flow.name.clone();
            let old_links = self.routes[flow.route].links.clone();
            if final_check {
                self.flows[f].flagged = true;
                self.log(slot, EventKind::Alert, None, Some(name), format!("loss {loss:.4} above bound at end of run"));
                continue;
            }
            self.release(f);
            match self.route_once(f, &profiles)? {
                RouteOutcome::Routed { path, .. } if path.links != old_links => {
                    self.set_route(f, &path);
                    self.reserve(f, &path.links);
                    self.flows[f].flagged = true;
                    let ids = self.graph.path_ids(&path).join("-");
                    self.log(slot, EventKind::Reroute, None, Some(name), format!("loss {loss:.4}; now via {ids}"));
                }
                RouteOutcome::Routed { .. } => {
                    self.reserve(f, &old_links);
                    self.flows[f].flagged = true;
                    self.log(slot, EventKind::Alert, None, Some(name), format!("loss {loss:.4}; no better path"));
                }
                RouteOutcome::Rejected(reason) => {
                    self.carry(f, &old_links);
                    self.flows[f].admitted = false;
                    self.flows[f].flagged = true;
                    let why = match reason {
                        RejectReason::NoCapacity => "no capacity",
                        RejectReason::LossBound => "loss bound",
                        RejectReason::DelayBound => "delay bound",
                    };
                    self.log(slot, EventKind::Alert, None, Some(name), format!("loss {loss:.4}; {why}, demoted to best-effort"));
                }
            }
        }
        for flow in &mut self.flows {
            flow.interval_injected = 0;
            flow.interval_dropped = 0;
        }
        for q in &mut self.queues {
            q.interval_arrived = 0;
            q.interval_dropped = 0;
            q.interval_served = 0;
            q.interval_delay = 0.0;
        }
        self.check_capacity(slot);
        Ok(())
    }

    fn record_drop(&mut self, p: &Packet, _reason: DropReason) {
        let f = p.flow;
        self.flows[f].dropped += 1;
        self.flows[f].interval_dropped += 1;
    }

    fn run(mut self) -> Result<SimRun> {
        let cfg = self.cfg;
        let mode = cfg.method_mode;
        self.initial_routing()?;
        let nq = self.queues.len();
        let mut pending: Vec<Vec<Packet>> = vec![Vec::new(); nq];
        // Route of every packet by id; Packet.flow carries the flow index.
        let mut packet_route: Vec<u32> = Vec::new();
        let mut in_flight = 0u64;

        for t in 0..cfg.duration {
            if t > 0 {
                if mode.controls_capacity() && t % cfg.horizon == 0 {
                    self.refresh_security(t);
                    self.run_control(t);
                }
                if mode.routes_adaptively() && t % cfg.route_recalc == 0 {
                    self.refresh_security(t);
                    self.run_routing(t, false)?;
                }
            }

            let mut fw_count = 0;
            let mut fw_attack = false;
            for f in 0..self.flows.len() {
                let n = self.flows[f].counts[t];
                let route = self.flows[f].route;
                if self.routes[route].through_firewall {
                    fw_count += n;
                    fw_attack |= self.flows[f].attack[t];
                }
                if n == 0 {
                    continue;
                }
                let q = self.queue_index(self.routes[route].links[0], self.flows[f].channel);
                let flow = &mut self.flows[f];
                flow.injected += n;
                flow.interval_injected += n;
                for _ in 0..n {
                    let id = self.next_packet;
                    self.next_packet += 1;
                    packet_route.push(route as u32);
                    in_flight += 1;
                    pending[q].push(Packet {
                        id,
                        flow: f,
                        class: flow.rank,
                        born_slot: t as u64,
                        deadline_slot: flow.deadline.map(|d| t as u64 + d),
                    });
                }
            }
            self.fw_series.push(fw_count);
            self.fw_labels.push(if fw_attack { SlotLabel::Attack } else { SlotLabel::Normal });

            let mut next: Vec<Vec<Packet>> = vec![Vec::new(); nq];
            for q in 0..nq {
                let arrivals = std::mem::take(&mut pending[q]);
                let rt = &mut self.queues[q];
                rt.history.push(arrivals.len() as u32);
                rt.interval_arrived += arrivals.len() as u64;
                let out = rt.node.step_packets(arrivals);
                rt.served += out.served.len() as u64;
                rt.interval_served += out.served.len() as u64;
                rt.interval_delay += out.served.iter().map(|s| s.delay_ms).sum::<f64>();
                rt.interval_dropped += out.dropped.len() as u64;
                let link = rt.link;
                in_flight -= out.dropped.len() as u64;
                for (p, reason) in &out.dropped {
                    self.record_drop(p, *reason);
                }
                for s in out.served {
                    let route = packet_route[s.packet.id as usize] as usize;
                    let links = &self.routes[route].links;
                    let hop = links.iter().position(|&l| l == link).expect("packet on its route");
                    if hop + 1 == links.len() {
                        in_flight -= 1;
                        let flow = &mut self.flows[s.packet.flow];
                        let delay = t as u64 - s.packet.born_slot;
                        flow.delivered += 1;
                        flow.delay_sum += delay as f64 * cfg.tick_ms;
                        if let Some(prev) = flow.last_delay {
                            flow.jitter_sum += prev.abs_diff(delay) as f64 * cfg.tick_ms;
                            flow.jitter_n += 1;
                        }
                        flow.last_delay = Some(delay);
                    } else {
                        let nq_index = links[hop + 1] * self.k + self.queues[q].channel;
                        next[nq_index].push(s.packet);
                    }
                }
            }
            pending = next;
        }

        let end = cfg.duration;
        if mode.routes_adaptively() {
            self.refresh_security(end);
            self.run_routing(end, true)?;
        }
        // Final detection over the whole run for the report.
        self.refresh_security(end);
        Ok(self.report(in_flight))
    }

    fn report(self, in_flight: u64) -> SimRun {
        let cfg = self.cfg;
        let injected: u64 = self.flows.iter().map(|f| f.injected).sum();
        let delivered: u64 = self.flows.iter().map(|f| f.delivered).sum();
        let dropped: u64 = self.flows.iter().map(|f| f.dropped).sum();
        let pct = |d: u64, i: u64| if i == 0 { 0.0 } else { 100.0 * d as f64 / i as f64 };

        let lost_per_class = self
            .classes
            .iter()
            .map(|c| {
                let (d, i) = self
                    .flows
                    .iter()
                    .filter(|f| f.class_id == c.id)
                    .fold((0, 0), |(d, i), f| (d + f.dropped, i + f.injected));
                ClassLoss {
                    class: c.id,
                    lost_data_pct: pct(d, i),
                }
            })
            .collect();

        let jitters: Vec<f64> = self
            .flows
            .iter()
            .filter(|f| f.jitter_n > 0)
            .map(|f| f.jitter_sum / f.jitter_n as f64)
            .collect();
        let jitter_ms = if jitters.is_empty() {
            0.0
        } else {
            jitters.iter().sum::<f64>() / jitters.len() as f64
        };

        let mut link_served = vec![0u64; self.graph.link_count()];
        for q in &self.queues {
            link_served[q.link] += q.served;
        }
        let utilization: Vec<f64> = link_served
            .iter()
            .enumerate()
            .filter(|(l, _)| self.graph.link(*l).capacity > 0.0)
            .map(|(l, &s)| s as f64 / (self.graph.link(l).capacity * cfg.duration as f64))
            .collect();
        let channel_utilization = if utilization.is_empty() {
            0.0
        } else {
            utilization.iter().sum::<f64>() / utilization.len() as f64
        };

        let mut counts = EventCounts::default();
        for e in &self.events {
            match e.kind {
                EventKind::Alert => counts.alerts += 1,
                EventKind::Resize => counts.resizes += 1,
                EventKind::Reroute => counts.reroutes += 1,
                EventKind::Rejection => counts.rejections += 1,
                EventKind::Announcement => counts.announcements += 1,
            }
        }

        let flows: Vec<FlowReport> = self
            .flows
            .iter()
            .map(|f| FlowReport {
                flow: f.name.clone(),
                class: f.class_id,
                injected: f.injected,
                delivered: f.delivered,
                dropped: f.dropped,
                loss: if f.injected == 0 { 0.0 } else { f.dropped as f64 / f.injected as f64 },
                mean_delay_ms: if f.delivered == 0 { 0.0 } else { f.delay_sum / f.delivered as f64 },
                jitter_ms: if f.jitter_n == 0 { 0.0 } else { f.jitter_sum / f.jitter_n as f64 },
                admitted: f.admitted,
                path: self
                    .routes
                    .get(f.route)
                    .map(|r| {
                        let mut ids: Vec<String> = Vec::new();
                        for (i, &l) in r.links.iter().enumerate() {
                            let (a, b) = self.graph.link_ends(l);
                            if i == 0 {
                                ids.push(self.graph.node_id(a).to_string());
                            }
                            ids.push(self.graph.node_id(b).to_string());
                        }
                        ids
                    })
                    .unwrap_or_default(),
            })
            .collect();

        let mut audit = Audit {
            conservation: injected == delivered + dropped + in_flight,
            loss_bound: true,
            metric_ranges: true,
            capacity: self.capacity_ok,
            quiet_baseline: true,
            failures: Vec::new(),
        };
        if !audit.conservation {
            audit.failures.push(format!(
                "conservation: injected {injected} != delivered {delivered} + dropped {dropped} + in flight {in_flight}"
            ));
        }
        for f in &self.flows {
            let loss = if f.injected == 0 { 0.0 } else { f.dropped as f64 / f.injected as f64 };
            if f.ever_admitted && loss > f.max_loss && !f.flagged {
                audit.loss_bound = false;
                audit.failures.push(format!("loss bound: flow {} lost {loss:.4} > {} with no reroute or alert", f.name, f.max_loss));
            }
        }
        let lost_data_pct = pct(dropped, injected);
        if !(0.0..=1.0).contains(&channel_utilization) || !(0.0..=100.0).contains(&lost_data_pct) || !(jitter_ms >= 0.0) {
            audit.metric_ranges = false;
            audit.failures.push(format!(
                "metric ranges: utilization {channel_utilization}, loss {lost_data_pct}, jitter {jitter_ms}"
            ));
        }
        if !self.capacity_ok {
            audit.failures.extend(self.capacity_failures.iter().map(|f| format!("capacity: {f}")));
        }
        if cfg.method_mode == MethodMode::None && !self.events.is_empty() {
            audit.quiet_baseline = false;
            audit.failures.push(format!("baseline mode logged {} events", self.events.len()));
        }
        info!(
            "{} load {} seed {}: loss {:.3}% jitter {:.2} ms util {:.3}",
            cfg.method_mode, cfg.load_ratio, cfg.seed, lost_data_pct, jitter_ms, channel_utilization
        );

        SimRun {
            report: SimReport {
                mode: cfg.method_mode,
                load_ratio: cfg.load_ratio,
                seed: cfg.seed,
                channel_utilization,
                lost_data_pct,
                lost_per_class,
                jitter_ms,
                p_sec: self.sec,
                events: counts,
                injected,
                delivered,
                dropped,
                in_flight,
                flows,
                audit,
            },
            events: self.events,
        }
    }
}

/// Runs one scenario. Identical inputs give identical reports and event logs.
pub fn run(cfg: &ScenarioConfig, graph: &NetworkGraph, table: Option<&CalibrationTable>) -> Result<SimRun> {
    Engine::new(cfg, graph, table)?.run()
}

/// One row per (load, seed, mode), in that nesting order; rows run in parallel.
pub fn sweep(
    template: &ScenarioConfig,
    loads: &[f64],
    seeds: &[u64],
    modes: &[MethodMode],
    graph: &NetworkGraph,
    table: Option<&CalibrationTable>,
) -> Result<Vec<SimReport>> {
    let rows: Vec<ScenarioConfig> = loads
        .iter()
        .flat_map(|&load| {
            seeds.iter().flat_map(move |&seed| {
                modes.iter().map(move |&mode| ScenarioConfig {
                    load_ratio: load,
                    seed,
                    method_mode: mode,
                    ..template.clone()
                })
            })
        })
        .collect();
    rows.par_iter()
        .map(|cfg| run(cfg, graph, table).map(|r| r.report))
        .collect()
}

/// Flat report row; field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub mode: MethodMode,
    pub load: f64,
    pub seed: u64,
    pub channel_utilization: f64,
    pub lost_data_pct: f64,
    pub jitter_ms: f64,
    pub p_sec_tp: Option<f64>,
    pub p_sec_fp: Option<f64>,
    pub alerts: u64,
    pub resizes: u64,
    pub reroutes: u64,
    pub rejections: u64,
    pub audit: &'static str,
}

impl From<&SimReport> for ReportRow {
    fn from(r: &SimReport) -> Self {
        Self {
            mode: r.mode,
            load: r.load_ratio,
            seed: r.seed,
            channel_utilization: r.channel_utilization,
            lost_data_pct: r.lost_data_pct,
            jitter_ms: r.jitter_ms,
            p_sec_tp: r.p_sec.p_tp,
            p_sec_fp: r.p_sec.p_fp,
            alerts: r.events.alerts,
            resizes: r.events.resizes,
            reroutes: r.events.reroutes,
            rejections: r.events.rejections,
            audit: if r.audit.passed() { "pass" } else { "fail" },
        }
    }
}

/// Seed-averaged metrics for one (mode, load) point of a load curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesPoint {
    pub mode: MethodMode,
    pub load: f64,
    pub runs: usize,
    pub channel_utilization: f64,
    pub lost_data_pct: f64,
    pub jitter_ms: f64,
    /// Mean over the runs that saw attack windows.
    pub p_sec_tp: Option<f64>,
}

/// Groups reports by mode, then load, averaging over seeds.
pub fn load_series(reports: &[SimReport]) -> Vec<SeriesPoint> {
    let mut groups: BTreeMap<(MethodMode, u64), Vec<&SimReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.mode, r.load_ratio.to_bits())).or_default().push(r);
    }
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        (n > 0).then(|| s / n as f64)
    };
    groups
        .into_iter()
        .map(|((mode, load), rs)| SeriesPoint {
            mode,
            load: f64::from_bits(load),
            runs: rs.len(),
            channel_utilization: mean(&mut rs.iter().map(|r| r.channel_utilization)).unwrap_or(0.0),
            lost_data_pct: mean(&mut rs.iter().map(|r| r.lost_data_pct)).unwrap_or(0.0),
            jitter_ms: mean(&mut rs.iter().map(|r| r.jitter_ms)).unwrap_or(0.0),
            p_sec_tp: mean(&mut rs.iter().filter_map(|r| r.p_sec.p_tp)),
        })
        .collect()
}
