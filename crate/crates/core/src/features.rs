//! Connection-state tracking and extraction of the per-window feature
//! vectors used to classify Discovery and Fieldbus-scanning traffic.
//! Features are computed from TCP/UDP headers only.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::model::{Protocol, TraceWindow};

/// Which classifier a feature vector feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStage {
    Discovery,
    Fieldbus,
}

impl FeatureStage {
    pub fn width(self) -> usize {
        match self {
            FeatureStage::Discovery => 12,
            FeatureStage::Fieldbus => 11,
        }
    }

    pub fn feature_names(self) -> &'static [&'static str] {
        match self {
            FeatureStage::Discovery => &[
                "uniq_syn_udp_dst_ips",
                "uniq_syn_udp_dst_ports_per_ip_max",
                "uniq_syn_udp_dst_ports_per_ip_min",
                "uniq_syn_udp_dst_ports_per_ip_mean",
                "half_open_tcp_connections",
                "tcp_rst_count",
                "packet_len_max",
                "packet_len_min",
                "packet_len_mean",
                "inter_arrival_max",
                "inter_arrival_min",
                "inter_arrival_mean",
            ],
            FeatureStage::Fieldbus => &[
                "tcp_handshakes_per_dst_ip_max",
                "tcp_handshakes_per_dst_ip_min",
                "tcp_handshakes_per_dst_ip_mean",
                "tcp_rst_count",
                "tcp_fin_count",
                "packet_len_max",
                "packet_len_min",
                "packet_len_mean",
                "inter_arrival_max",
                "inter_arrival_min",
                "inter_arrival_mean",
            ],
        }
    }
}

/// Class label for a featurized window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Scanning,
}

/// One featurized trace window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub stage: FeatureStage,
    pub values: Vec<f64>,
    pub label: Option<Label>,
}

/// Per-window connection-state counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConnectionSummary {
    /// Connections with a SYN sent but no completed three-way handshake
    /// inside the window.
    pub half_open: usize,
    /// Completed SYN -> SYN-ACK -> ACK triples per destination IP.
    pub handshakes_per_dst: BTreeMap<Ipv4Addr, usize>,
    pub rst_count: usize,
    pub fin_count: usize,
    /// Unique destination ports probed per destination IP, from TCP SYN
    /// (without ACK) and UDP packets.
    pub syn_udp_ports_per_dst: BTreeMap<Ipv4Addr, BTreeSet<u16>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ConnState {
    SynSent,
    SynAckSeen,
    Established,
}

type ConnKey = (Ipv4Addr, u16, Ipv4Addr, u16);

/// Track TCP connection state within one window. State never carries over
/// across windows.
pub fn track_connections(window: &TraceWindow) -> ConnectionSummary {
    let mut summary = ConnectionSummary::default();
    // Keyed by (initiator, initiator port, responder, responder port).
    let mut conns: BTreeMap<ConnKey, ConnState> = BTreeMap::new();
    let mut saw_syn: BTreeSet<ConnKey> = BTreeSet::new();
    let mut packets = window.packets.clone();
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    for pkt in &packets {
        match pkt.protocol {
            Protocol::Udp => {
                if let Some(port) = pkt.dst_port {
                    summary
                        .syn_udp_ports_per_dst
                        .entry(pkt.dst_ip)
                        .or_default()
                        .insert(port);
                }
            }
            Protocol::Tcp => {
                let flags = pkt.tcp_flags;
                if flags.rst() {
                    summary.rst_count += 1;
                }
                if flags.fin() {
                    summary.fin_count += 1;
                }
                let (Some(sport), Some(dport)) = (pkt.src_port, pkt.dst_port) else {
                    continue;
                };
                let fwd = (pkt.src_ip, sport, pkt.dst_ip, dport);
                let rev = (pkt.dst_ip, dport, pkt.src_ip, sport);
                if flags.syn() && !flags.ack() {
                    summary
                        .syn_udp_ports_per_dst
                        .entry(pkt.dst_ip)
                        .or_default()
                        .insert(dport);
                    conns.insert(fwd, ConnState::SynSent);
                    saw_syn.insert(fwd);
                } else if flags.syn() && flags.ack() {
                    if conns.get(&rev) == Some(&ConnState::SynSent) {
                        conns.insert(rev, ConnState::SynAckSeen);
                    }
                } else if flags.ack() && !flags.syn()
                    && conns.get(&fwd) == Some(&ConnState::SynAckSeen) {
                        conns.insert(fwd, ConnState::Established);
                        *summary.handshakes_per_dst.entry(pkt.dst_ip).or_insert(0) += 1;
                    }
            }
            Protocol::Other => {}
        }
    }

    summary.half_open = saw_syn
        .iter()
        .filter(|key| conns.get(*key) != Some(&ConnState::Established))
        .count();
    summary
}

fn max_min_mean<I: IntoIterator<Item = f64>>(values: I) -> (f64, f64, f64) {
    let vals: Vec<f64> = values.into_iter().collect();
    if vals.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (max, min, mean)
}

/// Packet length (on-wire) and inter-arrival statistics, each imputed to 0
/// when undefined.
fn length_and_iat_stats(window: &TraceWindow) -> [f64; 6] {
    let mut ts: Vec<f64> = window.packets.iter().map(|p| p.timestamp).collect();
    ts.sort_by(|a, b| a.total_cmp(b));
    let (lmax, lmin, lmean) = max_min_mean(window.packets.iter().map(|p| p.total_len as f64));
    let gaps: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    let (gmax, gmin, gmean) = max_min_mean(gaps);
    [lmax, lmin, lmean, gmax, gmin, gmean]
}

/// The 12 Discovery-stage features, in fixed order.
pub fn discovery_features(window: &TraceWindow) -> FeatureVector {
    let summary = track_connections(window);
    let uniq_ips = summary.syn_udp_ports_per_dst.len() as f64;
    let (pmax, pmin, pmean) = max_min_mean(
        summary
            .syn_udp_ports_per_dst
            .values()
            .map(|ports| ports.len() as f64),
    );
    let [lmax, lmin, lmean, gmax, gmin, gmean] = length_and_iat_stats(window);
    FeatureVector {
        stage: FeatureStage::Discovery,
        values: vec![
            uniq_ips,
            pmax,
            pmin,
            pmean,
            summary.half_open as f64,
            summary.rst_count as f64,
            lmax,
            lmin,
            lmean,
            gmax,
            gmin,
            gmean,
        ],
        label: None,
    }
}

/// The 11 Fieldbus-scanning features, in fixed order.
pub fn fieldbus_features(window: &TraceWindow) -> FeatureVector {
    let summary = track_connections(window);
    let (hmax, hmin, hmean) = max_min_mean(summary.handshakes_per_dst.values().map(|&c| c as f64));
    let [lmax, lmin, lmean, gmax, gmin, gmean] = length_and_iat_stats(window);
    FeatureVector {
        stage: FeatureStage::Fieldbus,
        values: vec![
            hmax,
            hmin,
            hmean,
            summary.rst_count as f64,
            summary.fin_count as f64,
            lmax,
            lmin,
            lmean,
            gmax,
            gmin,
            gmean,
        ],
        label: None,
    }
}
