//! Attack-stage correlation engine and campaign graph construction/export.
//!
//! The engine walks the chain C&C -> Discovery -> Lateral movement ->
//! Fieldbus scan -> CE spoofing, accepting each stage only when it
//! correlates with an already-accepted predecessor, and summarizes the
//! accepted stages as a directed graph over host addresses.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnc::check_cnc_stage;
use crate::ml::TrainedModel;
use crate::model::{
    AuthLoginEvent, EngineConfig, HostInventory, IdsAlert, StageDetection, StageEvidence,
    StageKind, TraceWindow,
};
use crate::stages::{
    check_ce_comm_stage, check_discovery_stage, check_fieldbus_scan_stage,
    check_lateral_movement_stage, StageError,
};

/// Whether a full campaign chain reached the CE stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetStatus {
    /// Engine is running or only a partial chain was found (early warning).
    AptDetStart,
    /// A full chain up to CE communication spoofing was detected.
    AptDetStop,
}

/// Role of a node, derived from the inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeRole {
    EntryHost,
    Intermediate,
    EdgeGateway,
    Ce,
    External,
}

impl NodeRole {
    pub fn name(self) -> &'static str {
        match self {
            NodeRole::EntryHost => "entry-host",
            NodeRole::Intermediate => "intermediate",
            NodeRole::EdgeGateway => "edge-gateway",
            NodeRole::Ce => "ce",
            NodeRole::External => "external",
        }
    }
}

/// Role annotation for an address, as a pure function of the inventory.
pub fn role_of(inv: &HostInventory, ip: Ipv4Addr) -> NodeRole {
    if ip == inv.edge_gateway_ip {
        NodeRole::EdgeGateway
    } else if inv.ce_endpoints.iter().any(|ce| ce.ip == ip) {
        NodeRole::Ce
    } else if inv.is_public(ip) {
        NodeRole::External
    } else if inv.internet_facing_hosts.contains(&ip) {
        NodeRole::EntryHost
    } else {
        NodeRole::Intermediate
    }
}

/// Directed campaign summary graph. Nodes are host addresses; each edge
/// carries the set of stages linking the pair, with the earliest detection
/// timestamp per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignGraph {
    pub nodes: BTreeMap<Ipv4Addr, NodeRole>,
    pub edges: BTreeMap<(Ipv4Addr, Ipv4Addr), BTreeMap<StageKind, f64>>,
    pub det_status: DetStatus,
}

impl CampaignGraph {
    pub fn empty() -> Self {
        CampaignGraph {
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            det_status: DetStatus::AptDetStart,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty()
    }

    /// Equality on node set (with roles), edge set, stage attribute sets,
    /// and status, ignoring timestamps.
    pub fn same_topology(&self, other: &CampaignGraph) -> bool {
        if self.det_status != other.det_status || self.nodes != other.nodes {
            return false;
        }
        if self.edges.len() != other.edges.len() {
            return false;
        }
        self.edges.iter().all(|(pair, stages)| {
            other.edges.get(pair).is_some_and(|os| {
                stages.keys().collect::<BTreeSet<_>>() == os.keys().collect::<BTreeSet<_>>()
            })
        })
    }

    /// Structural invariants: non-empty edge stage sets, every node on some
    /// edge, and temporal consistency (edge stage timestamps never precede
    /// the earliest timestamp entering the edge's source node).
    pub fn validate(&self) -> Result<(), String> {
        for ((src, dst), stages) in &self.edges {
            if stages.is_empty() {
                return Err(format!("edge {src}->{dst} has an empty stage set"));
            }
            if !self.nodes.contains_key(src) || !self.nodes.contains_key(dst) {
                return Err(format!("edge {src}->{dst} references a missing node"));
            }
        }
        for ip in self.nodes.keys() {
            let touched = self.edges.keys().any(|(s, d)| s == ip || d == ip);
            if !touched {
                return Err(format!("node {ip} participates in no edge"));
            }
        }
        for ((src, _), stages) in &self.edges {
            let earliest_in = self
                .edges
                .iter()
                .filter(|((_, d), _)| d == src)
                .flat_map(|(_, s)| s.values().copied())
                .fold(None::<f64>, |acc, t| Some(acc.map_or(t, |a| a.min(t))));
            if let Some(earliest_in) = earliest_in {
                for (&kind, &ts) in stages {
                    if ts < earliest_in {
                        return Err(format!(
                            "edge from {src} carries {kind} at {ts} before the node was reached at {earliest_in}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AsdcError {
    #[error("stage {index} ({kind}) does not correlate with any earlier accepted stage")]
    InconsistentChain { index: usize, kind: StageKind },
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("structured graph parse error: {0}")]
    BadGraphDocument(String),
}

/// The pairwise correlation conditions: (1) same source, or (2) stage `a`
/// moved the attacker and its destination is `b`'s source; and (3) `a`
/// precedes `b` in time.
pub fn correlate_pair(a: &StageDetection, b: &StageDetection) -> bool {
    if !a.detected || !b.detected {
        return false;
    }
    let linked = a.src_ip == b.src_ip
        || (a.kind == StageKind::LateralMovement && a.dst_ips.contains(&b.src_ip));
    linked && a.time_det < b.time_det
}

/// One audit record: a candidate stage and whether it was accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub stage: StageKind,
    pub src_ip: Ipv4Addr,
    pub accepted: bool,
    /// Violated condition when rejected, "accepted" otherwise.
    pub reason: String,
}

/// Everything the correlation engine consumes.
pub struct AsdcInputs<'a> {
    /// Interface traces keyed by observation host.
    pub windows: &'a BTreeMap<Ipv4Addr, Vec<TraceWindow>>,
    pub auth_events: &'a [AuthLoginEvent],
    pub alerts: &'a [IdsAlert],
    pub discovery_model: &'a TrainedModel,
    pub fieldbus_model: &'a TrainedModel,
    pub cfg: &'a EngineConfig,
}

/// Engine output: overall status, the merged graph, accepted stages in
/// acceptance order, and the audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct AsdcOutcome {
    pub det_status: DetStatus,
    pub graph: CampaignGraph,
    pub stages: Vec<StageDetection>,
    pub audit: Vec<AuditEntry>,
}

struct Engine<'a> {
    inputs: &'a AsdcInputs<'a>,
    accepted: Vec<StageDetection>,
    audit: Vec<AuditEntry>,
    full_chain: bool,
    /// Hosts whose discovery/movement chain has already been expanded.
    visited: BTreeSet<Ipv4Addr>,
}

impl<'a> Engine<'a> {
    fn log(&mut self, stage: StageKind, src: Ipv4Addr, accepted: bool, reason: &str) {
        self.audit.push(AuditEntry {
            stage,
            src_ip: src,
            accepted,
            reason: reason.to_string(),
        });
    }

    /// Accept `det` if it is detected and correlates with `prev`.
    fn try_accept(&mut self, det: &StageDetection, prev: &StageDetection) -> bool {
        if !det.detected {
            self.log(det.kind, det.src_ip, false, "stage not detected");
            return false;
        }
        if !correlate_pair(prev, det) {
            let reason = if det.time_det <= prev.time_det {
                "time-ordering condition violated"
            } else {
                "source/destination linkage condition violated"
            };
            self.log(det.kind, det.src_ip, false, reason);
            return false;
        }
        self.log(det.kind, det.src_ip, true, "accepted");
        self.accepted.push(det.clone());
        true
    }

    fn host_windows(&self, ip: Ipv4Addr) -> &'a [TraceWindow] {
        self.inputs
            .windows
            .get(&ip)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Discovery and onward movement from an already-compromised host.
    fn expand_host(&mut self, host: Ipv4Addr, prev: StageDetection) -> Result<(), AsdcError> {
        if !self.visited.insert(host) {
            return Ok(());
        }
        let cfg = self.inputs.cfg;
        let disc = check_discovery_stage(
            host,
            self.host_windows(host),
            self.inputs.discovery_model,
            self.inputs.alerts,
            cfg,
        )?;
        if !self.try_accept(&disc, &prev) {
            return Ok(());
        }
        let targets = disc.dst_ips.clone();
        for target in targets {
            let lm = check_lateral_movement_stage(
                host,
                target,
                self.inputs.auth_events,
                &self.accepted,
                self.host_windows(host),
                cfg,
            )?;
            if !self.try_accept(&lm, &disc) {
                continue;
            }
            if target == cfg.inventory.edge_gateway_ip {
                self.check_edge_tier(&lm)?;
            } else {
                self.expand_host(target, lm)?;
            }
        }
        Ok(())
    }

    /// Fieldbus scanning and CE spoofing once the edge gateway is reached.
    fn check_edge_tier(&mut self, lm: &StageDetection) -> Result<(), AsdcError> {
        let cfg = self.inputs.cfg;
        let gw = cfg.inventory.edge_gateway_ip;
        let gw_windows = self.host_windows(gw);
        let fb = check_fieldbus_scan_stage(
            gw_windows,
            self.inputs.fieldbus_model,
            self.inputs.alerts,
            cfg,
        )?;
        if !self.try_accept(&fb, lm) {
            return Ok(());
        }
        let ce = check_ce_comm_stage(gw_windows, &cfg.inventory)?;
        if self.try_accept(&ce, &fb) {
            self.full_chain = true;
        }
        Ok(())
    }
}

/// Run the full detection and correlation chain over all internet-facing
/// hosts, merging per-entry-host chains into one graph.
pub fn run_asdc(inputs: &AsdcInputs) -> Result<AsdcOutcome, AsdcError> {
    let cfg = inputs.cfg;
    let mut engine = Engine {
        inputs,
        accepted: Vec::new(),
        audit: Vec::new(),
        full_chain: false,
        visited: BTreeSet::new(),
    };
    let mut entry_hosts = cfg.inventory.internet_facing_hosts.clone();
    entry_hosts.sort_unstable();
    for host in entry_hosts {
        let windows = engine.host_windows(host);
        let cnc = check_cnc_stage(host, windows, &cfg.inventory, &cfg.periodicity);
        if !cnc.detected {
            engine.log(StageKind::Cnc, host, false, "stage not detected");
            continue;
        }
        engine.log(StageKind::Cnc, host, true, "accepted");
        engine.accepted.push(cnc.clone());
        engine.expand_host(host, cnc)?;
    }
    let det_status = if engine.full_chain {
        DetStatus::AptDetStop
    } else {
        DetStatus::AptDetStart
    };
    let graph = build_graph(&engine.accepted, det_status, &cfg.inventory)?;
    Ok(AsdcOutcome {
        det_status,
        graph,
        stages: engine.accepted,
        audit: engine.audit,
    })
}

/// Directed edges contributed by one accepted stage.
fn stage_edges(stage: &StageDetection) -> Vec<(Ipv4Addr, Ipv4Addr)> {
    match (&stage.kind, &stage.evidence) {
        (StageKind::Cnc, StageEvidence::Cnc { cnc_server_ip }) => {
            vec![(stage.src_ip, *cnc_server_ip)]
        }
        _ => stage
            .dst_ips
            .iter()
            .map(|&dst| (stage.src_ip, dst))
            .collect(),
    }
}

/// Summarize accepted stages as a graph. Each stage after the first must
/// correlate with some earlier stage in the list.
pub fn build_graph(
    stages: &[StageDetection],
    det_status: DetStatus,
    inv: &HostInventory,
) -> Result<CampaignGraph, AsdcError> {
    for (i, b) in stages.iter().enumerate().skip(1) {
        if !stages[..i].iter().any(|a| correlate_pair(a, b)) {
            return Err(AsdcError::InconsistentChain {
                index: i,
                kind: b.kind,
            });
        }
    }
    let mut graph = CampaignGraph::empty();
    graph.det_status = det_status;
    for stage in stages {
        for (src, dst) in stage_edges(stage) {
            graph.nodes.entry(src).or_insert_with(|| role_of(inv, src));
            graph.nodes.entry(dst).or_insert_with(|| role_of(inv, dst));
            let entry = graph
                .edges
                .entry((src, dst))
                .or_default()
                .entry(stage.kind)
                .or_insert(stage.time_det);
            if stage.time_det < *entry {
                *entry = stage.time_det;
            }
        }
    }
    Ok(graph)
}

/// Export formats for the campaign graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Structured,
}

const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphNodeDoc {
    ip: Ipv4Addr,
    role: NodeRole,
}

#[derive(Serialize, Deserialize)]
struct GraphStageDoc {
    kind: StageKind,
    time: f64,
}

#[derive(Serialize, Deserialize)]
struct GraphEdgeDoc {
    src: Ipv4Addr,
    dst: Ipv4Addr,
    stages: Vec<GraphStageDoc>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    det_status: DetStatus,
    nodes: Vec<GraphNodeDoc>,
    edges: Vec<GraphEdgeDoc>,
}

/// Render the graph as DOT or as the versioned JSON schema. Both outputs
/// are fully sorted, so identical graphs export byte-identically.
pub fn export_graph(g: &CampaignGraph, format: GraphFormat) -> String {
    match format {
        GraphFormat::Dot => {
            let mut out = String::from("digraph apt_campaign {\n");
            for (ip, role) in &g.nodes {
                out.push_str(&format!("  \"{ip}\" [label=\"{ip}\\n{}\"];\n", role.name()));
            }
            for ((src, dst), stages) in &g.edges {
                let label = stages
                    .keys()
                    .map(|k| k.name())
                    .collect::<Vec<_>>()
                    .join(",");
                out.push_str(&format!("  \"{src}\" -> \"{dst}\" [label=\"{label}\"];\n"));
            }
            out.push_str("}\n");
            out
        }
        GraphFormat::Structured => {
            let doc = GraphDoc {
                version: GRAPH_SCHEMA_VERSION,
                det_status: g.det_status,
                nodes: g
                    .nodes
                    .iter()
                    .map(|(&ip, &role)| GraphNodeDoc { ip, role })
                    .collect(),
                edges: g
                    .edges
                    .iter()
                    .map(|(&(src, dst), stages)| GraphEdgeDoc {
                        src,
                        dst,
                        stages: stages
                            .iter()
                            .map(|(&kind, &time)| GraphStageDoc { kind, time })
                            .collect(),
                    })
                    .collect(),
            };
            let mut text = serde_json::to_string_pretty(&doc).expect("graph serializes");
            text.push('\n');
            text
        }
    }
}

/// Parse a STRUCTURED export back into a graph.
pub fn parse_structured_graph(text: &str) -> Result<CampaignGraph, AsdcError> {
    let doc: GraphDoc =
        serde_json::from_str(text).map_err(|e| AsdcError::BadGraphDocument(e.to_string()))?;
    if doc.version != GRAPH_SCHEMA_VERSION {
        return Err(AsdcError::BadGraphDocument(format!(
            "unsupported schema version {}",
            doc.version
        )));
    }
    let mut g = CampaignGraph::empty();
    g.det_status = doc.det_status;
    for n in doc.nodes {
        g.nodes.insert(n.ip, n.role);
    }
    for e in doc.edges {
        let entry = g.edges.entry((e.src, e.dst)).or_default();
        for s in e.stages {
            entry.insert(s.kind, s.time);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CeEndpoint, IaProtocol, ScanType};

    fn det(kind: StageKind, src: &str, dsts: &[&str], t: f64) -> StageDetection {
        StageDetection {
            kind,
            detected: true,
            time_det: t,
            src_ip: src.parse().unwrap(),
            dst_ips: dsts.iter().map(|d| d.parse().unwrap()).collect(),
            evidence: match kind {
                StageKind::Cnc => StageEvidence::Cnc {
                    cnc_server_ip: "198.51.100.7".parse().unwrap(),
                },
                StageKind::Discovery => StageEvidence::Discovery {
                    scan_type: ScanType::Normal,
                },
                _ => StageEvidence::None,
            },
            score: 1.0,
        }
    }

    fn inv() -> HostInventory {
        HostInventory {
            internet_facing_hosts: vec!["10.0.1.10".parse().unwrap()],
            edge_gateway_ip: "10.0.3.1".parse().unwrap(),
            ce_endpoints: vec![CeEndpoint {
                ip: "10.0.4.50".parse().unwrap(),
                port: 502,
                protocol: IaProtocol::Modbus,
            }],
            vpn_server_ip: None,
            private_ranges: vec!["10.0.0.0/8".parse().unwrap()],
        }
    }

    #[test]
    fn correlate_same_source_in_order() {
        let a = det(StageKind::Cnc, "10.0.1.10", &[], 10.0);
        let b = det(StageKind::Discovery, "10.0.1.10", &["10.0.2.20"], 20.0);
        assert!(correlate_pair(&a, &b));
        assert!(!correlate_pair(&b, &a));
    }

    #[test]
    fn correlate_movement_destination() {
        let a = det(StageKind::LateralMovement, "10.0.1.10", &["10.0.3.1"], 10.0);
        let b = det(StageKind::Discovery, "10.0.3.1", &["10.0.4.50"], 20.0);
        assert!(correlate_pair(&a, &b));
    }

    #[test]
    fn correlate_rejects_reversed_time() {
        let a = det(StageKind::Cnc, "10.0.1.10", &[], 30.0);
        let b = det(StageKind::Discovery, "10.0.1.10", &["10.0.2.20"], 20.0);
        assert!(!correlate_pair(&a, &b));
    }

    fn chain() -> Vec<StageDetection> {
        vec![
            det(StageKind::Cnc, "10.0.1.10", &[], 10.0),
            det(
                StageKind::Discovery,
                "10.0.1.10",
                &["10.0.2.20", "10.0.3.1"],
                20.0,
            ),
            det(StageKind::LateralMovement, "10.0.1.10", &["10.0.3.1"], 30.0),
            det(StageKind::FieldbusScan, "10.0.3.1", &["10.0.4.50"], 40.0),
            det(StageKind::CeSpoof, "10.0.3.1", &["10.0.4.50"], 50.0),
        ]
    }

    #[test]
    fn graph_merges_stages_on_shared_pair() {
        let g = build_graph(&chain(), DetStatus::AptDetStop, &inv()).unwrap();
        let gw_ce = g
            .edges
            .get(&("10.0.3.1".parse().unwrap(), "10.0.4.50".parse().unwrap()))
            .unwrap();
        assert_eq!(gw_ce.len(), 2);
        assert!(gw_ce.contains_key(&StageKind::FieldbusScan));
        assert!(gw_ce.contains_key(&StageKind::CeSpoof));
        assert_eq!(g.nodes.len(), 5);
        g.validate().unwrap();
    }

    #[test]
    fn node_roles_follow_inventory() {
        let g = build_graph(&chain(), DetStatus::AptDetStop, &inv()).unwrap();
        assert_eq!(
            g.nodes[&"198.51.100.7".parse::<Ipv4Addr>().unwrap()],
            NodeRole::External
        );
        assert_eq!(
            g.nodes[&"10.0.1.10".parse::<Ipv4Addr>().unwrap()],
            NodeRole::EntryHost
        );
        assert_eq!(
            g.nodes[&"10.0.3.1".parse::<Ipv4Addr>().unwrap()],
            NodeRole::EdgeGateway
        );
        assert_eq!(
            g.nodes[&"10.0.4.50".parse::<Ipv4Addr>().unwrap()],
            NodeRole::Ce
        );
    }

    #[test]
    fn empty_stage_list_gives_empty_graph() {
        let g = build_graph(&[], DetStatus::AptDetStart, &inv()).unwrap();
        assert!(g.is_empty());
        assert_eq!(
            export_graph(&g, GraphFormat::Dot),
            "digraph apt_campaign {\n}\n"
        );
    }

    #[test]
    fn uncorrelated_stage_rejected() {
        let mut stages = chain();
        stages[2].time_det = 5.0; // movement before its discovery
        let err = build_graph(&stages, DetStatus::AptDetStop, &inv()).unwrap_err();
        assert!(matches!(err, AsdcError::InconsistentChain { index: 2, .. }));
    }

    #[test]
    fn exports_are_deterministic_and_round_trip() {
        let g = build_graph(&chain(), DetStatus::AptDetStop, &inv()).unwrap();
        let dot1 = export_graph(&g, GraphFormat::Dot);
        let dot2 = export_graph(&g, GraphFormat::Dot);
        assert_eq!(dot1, dot2);
        let json = export_graph(&g, GraphFormat::Structured);
        let back = parse_structured_graph(&json).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn temporal_inconsistency_caught_by_validate() {
        let mut g = build_graph(&chain(), DetStatus::AptDetStop, &inv()).unwrap();
        // Push the gateway edge's scan before the movement that reached it.
        let key = ("10.0.3.1".parse().unwrap(), "10.0.4.50".parse().unwrap());
        g.edges
            .get_mut(&key)
            .unwrap()
            .insert(StageKind::FieldbusScan, 1.0);
        assert!(g.validate().is_err());
    }
}
