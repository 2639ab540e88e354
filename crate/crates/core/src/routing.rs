//! Topology, admissible path sets, fractal-aware path costs and
//! constrained route selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::analysis::FlowProfile;
use crate::detection::SecurityProfile;
use crate::error::{Error, Result};

pub const DEFAULT_K_PATHS: usize = 3;
pub const COST_GATE: f64 = 0.6;
const CAPACITY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Router,
    Host,
    Firewall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub role: NodeRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub from: String,
    pub to: String,
    /// Packets per slot.
    pub capacity: f64,
    pub cost: f64,
    /// Per-channel service rates; they may not sum past `capacity`.
    pub channels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Path {
    pub nodes: Vec<usize>,
    pub links: Vec<usize>,
}

impl Path {
    pub fn hops(&self) -> usize {
        self.links.len()
    }
}

#[derive(Debug, Clone)]
pub struct NetworkGraph {
    topology: Topology,
    index: HashMap<String, usize>,
    out_links: Vec<Vec<usize>>,
    link_ends: Vec<(usize, usize)>,
}

impl NetworkGraph {
    pub fn new(topology: Topology) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in topology.nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Topology(format!("duplicate node id {}", n.id)));
            }
        }
        let k = topology.links.first().map_or(0, |l| l.channels.len());
        let mut out_links = vec![Vec::new(); topology.nodes.len()];
        let mut link_ends = Vec::with_capacity(topology.links.len());
        for (li, l) in topology.links.iter().enumerate() {
            let from = *index
                .get(&l.from)
                .ok_or_else(|| Error::Topology(format!("link {li}: unknown node {}", l.from)))?;
            let to = *index
                .get(&l.to)
                .ok_or_else(|| Error::Topology(format!("link {li}: unknown node {}", l.to)))?;
            if from == to {
                return Err(Error::Topology(format!("link {li}: self loop at {}", l.from)));
            }
            if !(l.cost >= 0.0 && l.cost.is_finite()) {
                return Err(Error::Topology(format!("link {li}: cost must be finite and >= 0")));
            }
            if l.channels.is_empty() || l.channels.len() != k {
                return Err(Error::Topology(format!(
                    "link {li}: every link needs the same non-zero channel count ({k})"
                )));
            }
            if l.channels.iter().any(|&c| !(c >= 0.0)) {
                return Err(Error::Topology(format!("link {li}: negative channel capacity")));
            }
            let sum: f64 = l.channels.iter().sum();
            if sum > l.capacity + CAPACITY_EPS {
                return Err(Error::Topology(format!(
                    "link {}->{}: channels sum {sum} exceeds capacity {}",
                    l.from, l.to, l.capacity
                )));
            }
            out_links[from].push(li);
            link_ends.push((from, to));
        }
        Ok(Self {
            topology,
            index,
            out_links,
            link_ends,
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::new(serde_json::from_str(s)?)
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.topology.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.topology.links.len()
    }

    pub fn channel_count(&self) -> usize {
        self.topology.links.first().map_or(0, |l| l.channels.len())
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.topology.nodes[node].id
    }

    pub fn node_role(&self, node: usize) -> NodeRole {
        self.topology.nodes[node].role
    }

    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownEndpoint(id.to_string()))
    }

    pub fn link(&self, link: usize) -> &LinkSpec {
        &self.topology.links[link]
    }

    pub fn link_ends(&self, link: usize) -> (usize, usize) {
        self.link_ends[link]
    }

    pub fn channel_capacity(&self, link: usize, channel: usize) -> f64 {
        self.topology.links[link].channels[channel]
    }

    pub fn path_base_cost(&self, path: &Path) -> f64 {
        path.links.iter().map(|&l| self.topology.links[l].cost).sum()
    }

    pub fn path_ids(&self, path: &Path) -> Vec<&str> {
        path.nodes.iter().map(|&n| self.node_id(n)).collect()
    }

    fn path_order(&self, a: &Path, b: &Path) -> Ordering {
        self.path_base_cost(a)
            .total_cmp(&self.path_base_cost(b))
            .then(a.hops().cmp(&b.hops()))
            .then_with(|| self.path_ids(a).cmp(&self.path_ids(b)))
    }

    /// Cheapest path avoiding the banned nodes and links; ties go to fewer hops.
    fn shortest_path(&self, src: usize, dst: usize, banned_nodes: &[bool], banned_links: &[bool]) -> Option<Path> {
        #[derive(PartialEq)]
        struct Entry(f64, usize, usize);
        impl Eq for Entry {}
        impl Ord for Entry {
            fn cmp(&self, o: &Self) -> Ordering {
                o.0.total_cmp(&self.0).then(o.1.cmp(&self.1)).then(o.2.cmp(&self.2))
            }
        }
        impl PartialOrd for Entry {
            fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
                Some(self.cmp(o))
            }
        }

        let n = self.node_count();
        let mut best = vec![(f64::INFINITY, usize::MAX); n];
        let mut via: Vec<Option<usize>> = vec![None; n];
        let mut heap = BinaryHeap::new();
        best[src] = (0.0, 0);
        heap.push(Entry(0.0, 0, src));
        while let Some(Entry(cost, hops, u)) = heap.pop() {
            if (cost, hops) != best[u] {
                continue;
            }
            if u == dst {
                break;
            }
            for &l in &self.out_links[u] {
                let v = self.link_ends[l].1;
                if banned_links[l] || banned_nodes[v] {
                    continue;
                }
                let cand = (cost + self.topology.links[l].cost, hops + 1);
                let better = match cand.0.total_cmp(&best[v].0) {
                    Ordering::Less => true,
                    Ordering::Equal => cand.1 < best[v].1,
                    Ordering::Greater => false,
                };
                if better {
                    best[v] = cand;
                    via[v] = Some(l);
                    heap.push(Entry(cand.0, cand.1, v));
                }
            }
        }
        if !best[dst].0.is_finite() {
            return None;
        }
        let mut links = Vec::new();
        let mut at = dst;
        while at != src {
            let l = via[at]?;
            links.push(l);
            at = self.link_ends[l].0;
        }
        links.reverse();
        let mut nodes = vec![src];
        nodes.extend(links.iter().map(|&l| self.link_ends[l].1));
        Some(Path { nodes, links })
    }

    /// Up to `k` simple paths in order of base cost (Yen's algorithm).
    pub fn k_shortest_paths(&self, src: usize, dst: usize, k: usize) -> Vec<Path> {
        let n = self.node_count();
        let m = self.link_count();
        let mut accepted: Vec<Path> = Vec::new();
        if src == dst || k == 0 {
            return accepted;
        }
        let Some(first) = self.shortest_path(src, dst, &vec![false; n], &vec![false; m]) else {
            return accepted;
        };
        accepted.push(first);
        let mut candidates: Vec<Path> = Vec::new();
        while accepted.len() < k {
            let prev = accepted.last().expect("non-empty").clone();
            for i in 0..prev.links.len() {
                let spur = prev.nodes[i];
                let root_nodes = &prev.nodes[..=i];
                let mut banned_links = vec![false; m];
                for p in &accepted {
                    if p.nodes.len() > i && p.nodes[..=i] == *root_nodes {
                        banned_links[p.links[i]] = true;
                    }
                }
                let mut banned_nodes = vec![false; n];
                for &u in &prev.nodes[..i] {
                    banned_nodes[u] = true;
                }
                if let Some(spur_path) = self.shortest_path(spur, dst, &banned_nodes, &banned_links) {
                    let mut nodes = root_nodes.to_vec();
                    nodes.extend_from_slice(&spur_path.nodes[1..]);
                    let mut links = prev.links[..i].to_vec();
                    links.extend_from_slice(&spur_path.links);
                    let cand = Path { nodes, links };
                    if !accepted.contains(&cand) && !candidates.contains(&cand) {
                        candidates.push(cand);
                    }
                }
            }
            if candidates.is_empty() {
                break;
            }
            let best = (0..candidates.len())
                .min_by(|&a, &b| self.path_order(&candidates[a], &candidates[b]))
                .expect("non-empty");
            accepted.push(candidates.swap_remove(best));
        }
        accepted
    }

    /// Every simple path from `src` to `dst`; exponential, for small graphs and tests.
    pub fn all_simple_paths(&self, src: usize, dst: usize) -> Vec<Path> {
        let mut out = Vec::new();
        let mut on_path = vec![false; self.node_count()];
        let mut nodes = vec![src];
        let mut links = Vec::new();
        on_path[src] = true;
        self.dfs_paths(dst, &mut on_path, &mut nodes, &mut links, &mut out);
        out
    }

    fn dfs_paths(&self, dst: usize, on_path: &mut [bool], nodes: &mut Vec<usize>, links: &mut Vec<usize>, out: &mut Vec<Path>) {
        let u = *nodes.last().expect("non-empty");
        if u == dst {
            out.push(Path {
                nodes: nodes.clone(),
                links: links.clone(),
            });
            return;
        }
        for &l in &self.out_links[u] {
            let v = self.link_ends[l].1;
            if on_path[v] {
                continue;
            }
            on_path[v] = true;
            nodes.push(v);
            links.push(l);
            self.dfs_paths(dst, on_path, nodes, links, out);
            links.pop();
            nodes.pop();
            on_path[v] = false;
        }
    }

    /// Maximum `src`→`dst` flow with per-link capacities from `capacity(link)` (Edmonds–Karp).
    pub fn max_flow(&self, src: usize, dst: usize, capacity: impl Fn(usize) -> f64) -> f64 {
        let n = self.node_count();
        // residual[u][v] aggregated over parallel links
        let mut residual = vec![vec![0.0f64; n]; n];
        for l in 0..self.link_count() {
            let (u, v) = self.link_ends[l];
            residual[u][v] += capacity(l).max(0.0);
        }
        let mut total = 0.0;
        loop {
            let mut parent = vec![usize::MAX; n];
            parent[src] = src;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for v in 0..n {
                    if parent[v] == usize::MAX && residual[u][v] > CAPACITY_EPS {
                        parent[v] = u;
                        queue.push_back(v);
                    }
                }
            }
            if parent[dst] == usize::MAX {
                break;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = dst;
            while v != src {
                let u = parent[v];
                bottleneck = bottleneck.min(residual[u][v]);
                v = u;
            }
            let mut v = dst;
            while v != src {
                let u = parent[v];
                residual[u][v] -= bottleneck;
                residual[v][u] += bottleneck;
                v = u;
            }
            total += bottleneck;
        }
        total
    }

    /// Mean base cost of the admissible paths between every ordered pair of hosts.
    pub fn default_c0(&self, k: usize) -> f64 {
        let hosts: Vec<usize> = (0..self.node_count())
            .filter(|&n| self.node_role(n) == NodeRole::Host)
            .collect();
        let pool: Vec<usize> = if hosts.len() >= 2 {
            hosts
        } else {
            (0..self.node_count()).collect()
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for &a in &pool {
            for &b in &pool {
                if a == b {
                    continue;
                }
                for p in self.k_shortest_paths(a, b, k) {
                    sum += self.path_base_cost(&p);
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostBranch {
    /// H ≤ 0.5, P_sec < 0.6: base cost.
    Plain,
    /// 0.5 < H < 0.9, σ_var ≤ 1, P_sec > 0.6.
    Persistent,
    /// 0.5 < H < 0.9, 1 < σ_var < 3, P_sec > 0.6.
    Bursty,
    /// H ≥ 0.9 or (H > 0.5, σ_var ≥ 3), P_sec > 0.6.
    Extreme,
    /// None of the above; cost left unchanged.
    Default,
}

pub fn cost_branch(hurst: f64, sigma_var: f64, p_sec: f64) -> CostBranch {
    let secure = p_sec > COST_GATE;
    if hurst <= 0.5 && p_sec < COST_GATE {
        CostBranch::Plain
    } else if secure && (hurst >= 0.9 || (hurst > 0.5 && sigma_var >= 3.0)) {
        CostBranch::Extreme
    } else if secure && hurst > 0.5 && sigma_var <= 1.0 {
        CostBranch::Persistent
    } else if secure && hurst > 0.5 && sigma_var < 3.0 {
        CostBranch::Bursty
    } else {
        CostBranch::Default
    }
}

fn check_domain(hurst: f64, sigma_var: f64, p_sec: f64, c0: f64) -> Result<()> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::InvalidDomain(format!("H={hurst} outside (0, 1)")));
    }
    if !(sigma_var >= 0.0) || !sigma_var.is_finite() {
        return Err(Error::InvalidDomain(format!("sigma_var={sigma_var} must be finite and >= 0")));
    }
    if !(0.0..=1.0).contains(&p_sec) {
        return Err(Error::InvalidDomain(format!("p_sec={p_sec} outside [0, 1]")));
    }
    if !(c0 >= 0.0) || !c0.is_finite() {
        return Err(Error::InvalidDomain(format!("C_0={c0} must be finite and >= 0")));
    }
    Ok(())
}

/// Path cost after accounting for the traffic's fractal properties.
pub fn recalc_cost(base: f64, hurst: f64, sigma_var: f64, p_sec: f64, c0: f64) -> Result<f64> {
    Ok(recalc_cost_with_branch(base, hurst, sigma_var, p_sec, c0)?.0)
}

pub fn recalc_cost_with_branch(base: f64, hurst: f64, sigma_var: f64, p_sec: f64, c0: f64) -> Result<(f64, CostBranch)> {
    check_domain(hurst, sigma_var, p_sec, c0)?;
    let branch = cost_branch(hurst, sigma_var, p_sec);
    // H·C0 − 0.5·C0 rather than (H − 0.5)·C0 keeps decimal inputs exact
    let cost = match branch {
        CostBranch::Plain | CostBranch::Default => base,
        CostBranch::Persistent => base + (hurst * c0 - 0.5 * c0),
        CostBranch::Bursty => base + (hurst * c0 - 0.5 * c0) * (sigma_var - 1.0),
        CostBranch::Extreme => base + c0,
    };
    if branch == CostBranch::Default {
        debug!("no cost branch for H={hurst} sigma_var={sigma_var} p_sec={p_sec}; cost unchanged");
    }
    Ok((cost, branch))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathCost {
    pub path: Path,
    pub base_cost: f64,
    pub current_cost: f64,
    pub last_recalc: u64,
    pub branch: Option<CostBranch>,
}

/// Emitted whenever a path's cost changes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathAnnouncement {
    pub src: usize,
    pub dst: usize,
    pub channel: usize,
    pub path: Vec<String>,
    pub old_cost: f64,
    pub new_cost: f64,
    pub branch: CostBranch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoCapacity,
    LossBound,
    DelayBound,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouteOutcome {
    Routed { path_index: usize, path: Path, cost: f64 },
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteRequest {
    pub src: usize,
    pub dst: usize,
    pub channel: usize,
    pub demand: f64,
    pub max_loss: f64,
    pub max_delay_ms: f64,
}

/// Predicted per-path loss (Σ X_i) and queueing delay (Σ T_i, ms) for a
/// flow added to the path.
pub trait AdmissionModel {
    fn predict(&self, path: &Path, channel: usize, demand: f64) -> (f64, f64);
}

/// Predicts no loss and no delay; route choice then depends on cost and capacity only.
pub struct NoPrediction;

impl AdmissionModel for NoPrediction {
    fn predict(&self, _: &Path, _: usize, _: f64) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Admissible path sets and their per-channel costs.
#[derive(Debug, Clone)]
pub struct RoutingTable {
    k: usize,
    c0: f64,
    admissible: BTreeMap<(usize, usize), Vec<Path>>,
    costs: BTreeMap<(usize, usize, usize, usize), PathCost>,
}

impl RoutingTable {
    pub fn new(k: usize, c0: f64) -> Self {
        Self {
            k: k.max(1),
            c0,
            admissible: BTreeMap::new(),
            costs: BTreeMap::new(),
        }
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn admissible(&mut self, graph: &NetworkGraph, src: usize, dst: usize) -> Result<&[Path]> {
        if !self.admissible.contains_key(&(src, dst)) {
            let paths = graph.k_shortest_paths(src, dst, self.k);
            if paths.is_empty() {
                return Err(Error::EmptyAdmissibleSet(
                    graph.node_id(src).to_string(),
                    graph.node_id(dst).to_string(),
                ));
            }
            for channel in 0..graph.channel_count() {
                for (i, p) in paths.iter().enumerate() {
                    let base = graph.path_base_cost(p);
                    self.costs.insert(
                        (src, dst, channel, i),
                        PathCost {
                            path: p.clone(),
                            base_cost: base,
                            current_cost: base,
                            last_recalc: 0,
                            branch: None,
                        },
                    );
                }
            }
            self.admissible.insert((src, dst), paths);
        }
        Ok(&self.admissible[&(src, dst)])
    }

    pub fn path_cost(&self, src: usize, dst: usize, channel: usize, index: usize) -> Option<&PathCost> {
        self.costs.get(&(src, dst, channel, index))
    }

    pub fn path_costs(&self) -> impl Iterator<Item = (&(usize, usize, usize, usize), &PathCost)> {
        self.costs.iter()
    }

    /// Recomputes every known path cost from its base cost. A path's profile
    /// is the elementwise maximum of H and σ_var over its profiled links on
    /// that channel; paths with no profiled link keep their base cost.
    pub fn update_all_costs(
        &mut self,
        graph: &NetworkGraph,
        profiles: &BTreeMap<(usize, usize), FlowProfile>,
        sec: &SecurityProfile,
        slot: u64,
    ) -> Result<Vec<PathAnnouncement>> {
        let p_sec = sec.scalar;
        let mut out = Vec::new();
        for (&(src, dst, channel, _), pc) in self.costs.iter_mut() {
            let mut worst: Option<(f64, f64)> = None;
            for &l in &pc.path.links {
                if let Some(p) = profiles.get(&(l, channel)) {
                    let (h, s) = worst.unwrap_or((f64::MIN, f64::MIN));
                    worst = Some((h.max(p.hurst), s.max(p.sigma_var)));
                }
            }
            let (new_cost, branch) = match worst {
                Some((h, s)) => recalc_cost_with_branch(pc.base_cost, h, s, p_sec, self.c0)?,
                None => (pc.base_cost, CostBranch::Default),
            };
            pc.last_recalc = slot;
            pc.branch = Some(branch);
            if new_cost != pc.current_cost {
                let ann = PathAnnouncement {
                    src,
                    dst,
                    channel,
                    path: graph.path_ids(&pc.path).into_iter().map(String::from).collect(),
                    old_cost: pc.current_cost,
                    new_cost,
                    branch,
                };
                info!("path {:?} ch{channel}: cost {} -> {new_cost} ({branch:?})", ann.path, pc.current_cost);
                pc.current_cost = new_cost;
                out.push(ann);
            }
        }
        Ok(out)
    }

    /// Lowest-cost admissible path with enough residual channel capacity
    /// whose predicted loss and delay meet the request's bounds.
    pub fn route_flow(
        &mut self,
        graph: &NetworkGraph,
        req: &RouteRequest,
        residual: impl Fn(usize, usize) -> f64,
        model: &dyn AdmissionModel,
    ) -> Result<RouteOutcome> {
        if !(req.demand > 0.0) {
            return Err(Error::Config(format!("flow demand {} must be > 0", req.demand)));
        }
        if req.channel >= graph.channel_count() {
            return Err(Error::Config(format!("channel {} not on this graph", req.channel)));
        }
        let paths = self.admissible(graph, req.src, req.dst)?.to_vec();
        let mut feasible: Vec<(usize, f64)> = paths
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.links
                    .iter()
                    .all(|&l| residual(l, req.channel) + CAPACITY_EPS >= req.demand)
            })
            .map(|(i, _)| (i, self.costs[&(req.src, req.dst, req.channel, i)].current_cost))
            .collect();
        if feasible.is_empty() {
            return Ok(RouteOutcome::Rejected(RejectReason::NoCapacity));
        }
        feasible.sort_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(paths[a.0].hops().cmp(&paths[b.0].hops()))
                .then_with(|| graph.path_ids(&paths[a.0]).cmp(&graph.path_ids(&paths[b.0])))
        });
        let mut first_failure = None;
        for &(i, cost) in &feasible {
            let (loss, delay) = model.predict(&paths[i], req.channel, req.demand);
            let failure = if loss > req.max_loss {
                Some(RejectReason::LossBound)
            } else if delay > req.max_delay_ms {
                Some(RejectReason::DelayBound)
            } else {
                None
            };
            match failure {
                None => {
                    return Ok(RouteOutcome::Routed {
                        path_index: i,
                        path: paths[i].clone(),
                        cost,
                    })
                }
                Some(r) => {
                    first_failure.get_or_insert(r);
                }
            }
        }
        Ok(RouteOutcome::Rejected(first_failure.expect("feasible set non-empty")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub links: Vec<usize>,
    pub channel: usize,
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConservationViolation {
    pub link: usize,
    pub channel: usize,
    pub assigned: f64,
    pub capacity: f64,
}

/// Checks that assigned demand never exceeds any channel's capacity.
/// On success returns the fully allocated `(link, channel)` pairs.
pub fn capacity_conservation_check(
    graph: &NetworkGraph,
    assignments: &[Assignment],
) -> std::result::Result<Vec<(usize, usize)>, ConservationViolation> {
    let mut assigned: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for a in assignments {
        for &l in &a.links {
            *assigned.entry((l, a.channel)).or_default() += a.demand;
        }
    }
    let mut full = Vec::new();
    for (&(link, channel), &sum) in &assigned {
        let capacity = graph.channel_capacity(link, channel);
        let tol = CAPACITY_EPS * capacity.max(1.0);
        if sum > capacity + tol {
            return Err(ConservationViolation {
                link,
                channel,
                assigned: sum,
                capacity,
            });
        }
        if (sum - capacity).abs() <= tol {
            full.push((link, channel));
        }
    }
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(from: &str, to: &str, cost: f64, ch: f64) -> LinkSpec {
        LinkSpec {
            from: from.into(),
            to: to.into(),
            capacity: 3.0 * ch,
            cost,
            channels: vec![ch; 3],
        }
    }

    fn diamond() -> NetworkGraph {
        let nodes = ["A", "B", "C", "D"]
            .iter()
            .map(|id| NodeSpec {
                id: id.to_string(),
                role: if *id == "A" || *id == "D" { NodeRole::Host } else { NodeRole::Router },
            })
            .collect();
        NetworkGraph::new(Topology {
            nodes,
            links: vec![
                link("A", "B", 2.0, 10.0),
                link("B", "D", 3.0, 10.0),
                link("A", "C", 4.0, 10.0),
                link("C", "D", 4.0, 10.0),
            ],
        })
        .unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(recalc_cost(10.0, 0.4, 2.0, 0.3, 100.0).unwrap(), 10.0);
        assert_eq!(recalc_cost(10.0, 0.7, 0.8, 0.7, 100.0).unwrap(), 30.0);
        assert_eq!(recalc_cost(10.0, 0.7, 2.0, 0.7, 100.0).unwrap(), 30.0);
        assert_eq!(recalc_cost(10.0, 0.95, 0.5, 0.7, 100.0).unwrap(), 110.0);
        assert_eq!(recalc_cost(10.0, 0.7, 0.8, 0.4, 100.0).unwrap(), 10.0);
    }

    #[test]
    fn boundaries() {
        assert_eq!(cost_branch(0.7, 1.0, 0.7), CostBranch::Persistent);
        assert_eq!(cost_branch(0.7, 3.0, 0.7), CostBranch::Extreme);
        assert_eq!(cost_branch(0.7, 0.5, 0.6), CostBranch::Default);
        assert_eq!(cost_branch(0.5, 0.5, 0.7), CostBranch::Default);
        assert_eq!(cost_branch(0.9, 0.0, 0.61), CostBranch::Extreme);
    }

    #[test]
    fn domain_errors() {
        assert!(recalc_cost(1.0, 1.0, 0.0, 0.5, 1.0).is_err());
        assert!(recalc_cost(1.0, 0.5, -1.0, 0.5, 1.0).is_err());
        assert!(recalc_cost(1.0, 0.5, 0.0, 1.5, 1.0).is_err());
        assert!(recalc_cost(1.0, 0.5, 0.0, 0.5, -1.0).is_err());
    }

    #[test]
    fn diamond_reroutes_after_cost_update() {
        let g = diamond();
        let (a, d) = (g.node_index("A").unwrap(), g.node_index("D").unwrap());
        let mut rt = RoutingTable::new(3, 10.0);
        let req = RouteRequest {
            src: a,
            dst: d,
            channel: 0,
            demand: 1.0,
            max_loss: 1.0,
            max_delay_ms: 1e9,
        };
        let RouteOutcome::Routed { path, cost, .. } = rt.route_flow(&g, &req, |_, _| 10.0, &NoPrediction).unwrap() else {
            panic!("expected a route")
        };
        assert_eq!(g.path_ids(&path), ["A", "B", "D"]);
        assert_eq!(cost, 5.0);

        let mut profiles = BTreeMap::new();
        let hot = FlowProfile {
            lambda: 1.0,
            hurst: 0.95,
            sigma_var: 0.2,
            delta_h: None,
            delta_h_raw: None,
            window: 100,
        };
        profiles.insert((0, 0), hot);
        let sec = SecurityProfile::from_counts(9, 0, 10, 1);
        let ann = rt.update_all_costs(&g, &profiles, &sec, 1024).unwrap();
        assert_eq!(ann.len(), 1);
        assert_eq!((ann[0].old_cost, ann[0].new_cost), (5.0, 15.0));
        assert!(rt.update_all_costs(&g, &profiles, &sec, 2048).unwrap().is_empty());

        let RouteOutcome::Routed { path, .. } = rt.route_flow(&g, &req, |_, _| 10.0, &NoPrediction).unwrap() else {
            panic!("expected a route")
        };
        assert_eq!(g.path_ids(&path), ["A", "C", "D"]);
        // other channels untouched
        let other = RouteRequest { channel: 1, ..req };
        let RouteOutcome::Routed { path, .. } = rt.route_flow(&g, &other, |_, _| 10.0, &NoPrediction).unwrap() else {
            panic!("expected a route")
        };
        assert_eq!(g.path_ids(&path), ["A", "B", "D"]);
    }

    #[test]
    fn saturated_path_skipped_and_no_capacity() {
        let g = diamond();
        let (a, d) = (g.node_index("A").unwrap(), g.node_index("D").unwrap());
        let mut rt = RoutingTable::new(3, 10.0);
        let req = RouteRequest {
            src: a,
            dst: d,
            channel: 0,
            demand: 5.0,
            max_loss: 1.0,
            max_delay_ms: 1e9,
        };
        let residual = |l: usize, _| if l == 0 { 1.0 } else { 10.0 };
        let RouteOutcome::Routed { path, .. } = rt.route_flow(&g, &req, residual, &NoPrediction).unwrap() else {
            panic!("expected a route")
        };
        assert_eq!(g.path_ids(&path), ["A", "C", "D"]);
        let big = RouteRequest { demand: 50.0, ..req };
        assert_eq!(
            rt.route_flow(&g, &big, |_, _| 10.0, &NoPrediction).unwrap(),
            RouteOutcome::Rejected(RejectReason::NoCapacity)
        );
    }

    struct Lossy;
    impl AdmissionModel for Lossy {
        fn predict(&self, path: &Path, _: usize, _: f64) -> (f64, f64) {
            if path.nodes.contains(&1) {
                (0.5, 0.0)
            } else {
                (0.0, 100.0)
            }
        }
    }

    #[test]
    fn admission_bounds() {
        let g = diamond();
        let mut rt = RoutingTable::new(3, 10.0);
        let req = RouteRequest {
            src: 0,
            dst: 3,
            channel: 0,
            demand: 1.0,
            max_loss: 0.1,
            max_delay_ms: 1000.0,
        };
        let RouteOutcome::Routed { path, .. } = rt.route_flow(&g, &req, |_, _| 10.0, &Lossy).unwrap() else {
            panic!("expected a route")
        };
        assert_eq!(path.nodes, vec![0, 2, 3]);
        let strict = RouteRequest { max_delay_ms: 10.0, ..req };
        assert_eq!(
            rt.route_flow(&g, &strict, |_, _| 10.0, &Lossy).unwrap(),
            RouteOutcome::Rejected(RejectReason::LossBound)
        );
    }

    #[test]
    fn unknown_endpoint_and_empty_set() {
        let g = diamond();
        assert!(matches!(g.node_index("Z"), Err(Error::UnknownEndpoint(_))));
        let mut rt = RoutingTable::new(3, 1.0);
        assert!(matches!(rt.admissible(&g, 3, 0), Err(Error::EmptyAdmissibleSet(..))));
    }

    #[test]
    fn conservation_examples() {
        let g = diamond();
        assert_eq!(capacity_conservation_check(&g, &[]), Ok(vec![]));
        let full = Assignment { links: vec![0], channel: 0, demand: 10.0 };
        assert_eq!(capacity_conservation_check(&g, &[full]), Ok(vec![(0, 0)]));
        let part = Assignment { links: vec![0, 1], channel: 1, demand: 6.0 };
        let v = capacity_conservation_check(&g, &[part.clone(), part]).unwrap_err();
        assert_eq!((v.link, v.channel, v.assigned), (0, 1, 12.0));
    }

    #[test]
    fn max_flow_of_diamond() {
        let g = diamond();
        assert_eq!(g.max_flow(0, 3, |l| g.link(l).capacity), 60.0);
        assert_eq!(g.max_flow(0, 3, |l| if l == 1 { 5.0 } else { 30.0 }), 35.0);
    }

    #[test]
    fn topology_validation() {
        let mut bad = link("A", "B", 1.0, 10.0);
        bad.capacity = 20.0;
        let nodes = vec![
            NodeSpec { id: "A".into(), role: NodeRole::Host },
            NodeSpec { id: "B".into(), role: NodeRole::Host },
        ];
        assert!(NetworkGraph::new(Topology { nodes: nodes.clone(), links: vec![bad] }).is_err());
        let ghost = link("A", "Q", 1.0, 1.0);
        assert!(NetworkGraph::new(Topology { nodes, links: vec![ghost] }).is_err());
    }

    #[test]
    fn k_shortest_on_diamond() {
        let g = diamond();
        let paths = g.k_shortest_paths(0, 3, 3);
        assert_eq!(paths.len(), 2);
        assert_eq!(g.path_base_cost(&paths[0]), 5.0);
        assert_eq!(g.path_base_cost(&paths[1]), 8.0);
        assert_eq!(g.default_c0(3), 6.5);
    }
}
