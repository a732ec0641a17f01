//! Per-stage detection entry points and multi-source aggregate scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{discovery_features, fieldbus_features, track_connections, FeatureVector};
use crate::ml::{mode_smooth, MlError, TrainedModel};
use crate::model::{
    AuthLoginEvent, EngineConfig, HostInventory, IdsAlert, ScanType, ScoreConfig, StageDetection,
    StageEvidence, StageHint, StageKind, TraceWindow,
};

/// TCP ports treated as remote-access services for the lateral-movement
/// traffic cross-check.
pub const REMOTE_ACCESS_PORTS: [u16; 2] = [22, 3389];

/// A data source feeding a stage check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Traffic,
    IdsAlerts,
    AuthLogs,
}

impl DataSource {
    pub fn name(self) -> &'static str {
        match self {
            DataSource::Traffic => "traffic",
            DataSource::IdsAlerts => "ids_alerts",
            DataSource::AuthLogs => "auth_logs",
        }
    }
}

/// Binary verdict from one data source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceVerdict {
    pub source: DataSource,
    pub is_optimal: bool,
    /// Binary detection score in {0, 1}.
    pub d: u8,
    pub weight: f64,
}

/// Weighted aggregate of all source verdicts for one stage invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateScore {
    pub d_a: f64,
    pub tau: f64,
    pub detected: bool,
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("expected exactly one optimal source verdict, got {0}")]
    NoOptimalSource(usize),
    #[error("optimal weight {w_opt} must exceed secondary weight {w_secondary}")]
    WeightOrderViolation { w_opt: f64, w_secondary: f64 },
    #[error("inventory has no CE endpoints")]
    NoCeEndpoints,
    #[error(transparent)]
    Model(#[from] MlError),
}

/// Weighted mean of the source verdicts:
/// d_a = (w_opt d_opt + sum_i w_i d_i) / (w_opt + sum_i w_i).
/// Detection uses an inclusive threshold: detected iff d_a >= tau.
pub fn aggregate_score(
    verdicts: &[SourceVerdict],
    cfg: &ScoreConfig,
) -> Result<AggregateScore, StageError> {
    let optimal: Vec<&SourceVerdict> = verdicts.iter().filter(|v| v.is_optimal).collect();
    if optimal.len() != 1 {
        return Err(StageError::NoOptimalSource(optimal.len()));
    }
    let w_opt = optimal[0].weight;
    for v in verdicts.iter().filter(|v| !v.is_optimal) {
        if v.weight >= w_opt {
            return Err(StageError::WeightOrderViolation {
                w_opt,
                w_secondary: v.weight,
            });
        }
    }
    let num: f64 = verdicts.iter().map(|v| v.weight * v.d as f64).sum();
    let den: f64 = verdicts.iter().map(|v| v.weight).sum();
    let d_a = num / den;
    Ok(AggregateScore {
        d_a,
        tau: cfg.tau,
        detected: d_a >= cfg.tau,
    })
}

fn verdict(source: DataSource, is_optimal: bool, hit: bool, weight: f64) -> SourceVerdict {
    SourceVerdict {
        source,
        is_optimal,
        d: u8::from(hit),
        weight,
    }
}

/// Classify every window, smooth with mode voting, and report the indices
/// of positive windows.
fn classified_windows(
    windows: &[TraceWindow],
    model: &TrainedModel,
    extract: fn(&TraceWindow) -> FeatureVector,
    vote_n: usize,
) -> Vec<usize> {
    let preds: Vec<u8> = windows
        .iter()
        .map(|w| model.predict_raw(&extract(w).values))
        .collect();
    mode_smooth(&preds, vote_n)
        .into_iter()
        .enumerate()
        .filter(|(_, p)| *p == 1)
        .map(|(i, _)| i)
        .collect()
}

/// Discovery stage: optimal source is mode-voted traffic classification,
/// secondary source is IDS alerts carrying a discovery hint for this host.
pub fn check_discovery_stage(
    host_ip: Ipv4Addr,
    windows: &[TraceWindow],
    model: &TrainedModel,
    alerts: &[IdsAlert],
    cfg: &EngineConfig,
) -> Result<StageDetection, StageError> {
    let positives = classified_windows(windows, model, discovery_features, cfg.mode_vote_n);
    let traffic_hit = !positives.is_empty();
    let alert_hit = alerts
        .iter()
        .any(|a| a.stage_hint == StageHint::Discovery && a.src_ip == host_ip);

    let verdicts = [
        verdict(DataSource::Traffic, true, traffic_hit, cfg.score.w_opt),
        verdict(
            DataSource::IdsAlerts,
            false,
            alert_hit,
            cfg.score
                .secondary_weight(StageKind::Discovery, "ids_alerts"),
        ),
    ];
    let agg = aggregate_score(&verdicts, &cfg.score)?;
    if !agg.detected || !traffic_hit {
        let mut det = StageDetection::not_detected(StageKind::Discovery, host_ip);
        det.score = agg.d_a;
        return Ok(det);
    }

    // Scan targets: unique SYN/UDP destinations inside detected windows,
    // restricted to the internal network (scanning targets local hosts).
    let mut targets: BTreeSet<Ipv4Addr> = BTreeSet::new();
    for &i in &positives {
        let summary = track_connections(&windows[i]);
        for &dst in summary.syn_udp_ports_per_dst.keys() {
            if dst != host_ip && !cfg.inventory.is_public(dst) {
                targets.insert(dst);
            }
        }
    }

    let detected_minutes = positives.len() as f64 * windows[positives[0]].duration_s / 60.0;
    let rate = if detected_minutes > 0.0 {
        targets.len() as f64 / detected_minutes
    } else {
        0.0
    };
    let scan_type = if rate >= cfg.scan_rate_threshold {
        ScanType::Normal
    } else {
        ScanType::Slow
    };

    Ok(StageDetection {
        kind: StageKind::Discovery,
        detected: true,
        time_det: windows[positives[0]].start_time,
        src_ip: host_ip,
        dst_ips: targets.into_iter().collect(),
        evidence: StageEvidence::Discovery { scan_type },
        score: agg.d_a,
    })
}

/// Lateral movement: optimal source is the auth log. A successful remote
/// login src -> dst is suspicious when its source machine already carries a
/// detected stage that precedes movement (C&C or Discovery) earlier in time.
/// Secondary source is traffic on a remote-access port around the login.
pub fn check_lateral_movement_stage(
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    auth_events: &[AuthLoginEvent],
    prior: &[StageDetection],
    src_windows: &[TraceWindow],
    cfg: &EngineConfig,
) -> Result<StageDetection, StageError> {
    let precedes_movement = |kind: StageKind| matches!(kind, StageKind::Cnc | StageKind::Discovery);
    let login = auth_events.iter().find(|ev| {
        ev.success
            && ev.src_ip == src_ip
            && ev.dst_ip == dst_ip
            && prior.iter().any(|s| {
                s.detected
                    && s.src_ip == src_ip
                    && precedes_movement(s.kind)
                    && s.time_det < ev.timestamp
            })
    });

    let traffic_hit = login.is_some_and(|login| {
        let slack = cfg.window_duration_s;
        src_windows.iter().any(|w| {
            w.packets.iter().any(|p| {
                p.src_ip == src_ip
                    && p.dst_ip == dst_ip
                    && p.dst_port
                        .is_some_and(|port| REMOTE_ACCESS_PORTS.contains(&port))
                    && (p.timestamp - login.timestamp).abs() <= slack
            })
        })
    });

    let verdicts = [
        verdict(DataSource::AuthLogs, true, login.is_some(), cfg.score.w_opt),
        verdict(
            DataSource::Traffic,
            false,
            traffic_hit,
            cfg.score
                .secondary_weight(StageKind::LateralMovement, "traffic"),
        ),
    ];
    let agg = aggregate_score(&verdicts, &cfg.score)?;
    match login {
        Some(login) if agg.detected => Ok(StageDetection {
            kind: StageKind::LateralMovement,
            detected: true,
            time_det: login.timestamp,
            src_ip,
            dst_ips: vec![dst_ip],
            evidence: StageEvidence::None,
            score: agg.d_a,
        }),
        _ => {
            let mut det = StageDetection::not_detected(StageKind::LateralMovement, src_ip);
            det.score = agg.d_a;
            Ok(det)
        }
    }
}

/// Fieldbus scanning: optimal source is traffic classification of
/// gateway-side windows; secondary is IDS alerts with a fieldbus hint.
pub fn check_fieldbus_scan_stage(
    gateway_windows: &[TraceWindow],
    model: &TrainedModel,
    alerts: &[IdsAlert],
    cfg: &EngineConfig,
) -> Result<StageDetection, StageError> {
    let gw = cfg.inventory.edge_gateway_ip;
    let positives = classified_windows(gateway_windows, model, fieldbus_features, cfg.mode_vote_n);
    let traffic_hit = !positives.is_empty();
    let alert_hit = alerts
        .iter()
        .any(|a| a.stage_hint == StageHint::FieldbusScan && a.src_ip == gw);

    let verdicts = [
        verdict(DataSource::Traffic, true, traffic_hit, cfg.score.w_opt),
        verdict(
            DataSource::IdsAlerts,
            false,
            alert_hit,
            cfg.score
                .secondary_weight(StageKind::FieldbusScan, "ids_alerts"),
        ),
    ];
    let agg = aggregate_score(&verdicts, &cfg.score)?;
    if !agg.detected || !traffic_hit {
        let mut det = StageDetection::not_detected(StageKind::FieldbusScan, gw);
        det.score = agg.d_a;
        return Ok(det);
    }

    // Scanned control elements: CE endpoints receiving repeated connection
    // attempts (two or more SYNs) in the detected windows. A single SYN is
    // an ordinary handshake, not a probe sweep, so lone reconnects and
    // long-lived connections established earlier do not count.
    let mut syn_counts: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    for &i in &positives {
        for p in &gateway_windows[i].packets {
            if p.tcp_flags.syn() && !p.tcp_flags.ack() {
                if let Some(ce) = cfg
                    .inventory
                    .ce_endpoints
                    .iter()
                    .find(|ce| ce.ip == p.dst_ip)
                {
                    *syn_counts.entry(ce.ip).or_insert(0) += 1;
                }
            }
        }
    }
    let targets: BTreeSet<Ipv4Addr> = syn_counts
        .into_iter()
        .filter(|&(_, n)| n >= 2)
        .map(|(ip, _)| ip)
        .collect();

    Ok(StageDetection {
        kind: StageKind::FieldbusScan,
        detected: true,
        time_det: gateway_windows[positives[0]].start_time,
        src_ip: gw,
        dst_ips: targets.into_iter().collect(),
        evidence: StageEvidence::None,
        score: agg.d_a,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum CeConnState {
    Pending,
    SynAck,
    Live { established: f64 },
    Closed,
}

/// CE communication spoofing: detected when, for some CE endpoint, either
/// two TCP connections to it are live concurrently, or the pre-existing
/// connection was torn down (RST/FIN) and a new connection was completed
/// afterwards.
pub fn check_ce_comm_stage(
    gateway_windows: &[TraceWindow],
    inv: &HostInventory,
) -> Result<StageDetection, StageError> {
    if inv.ce_endpoints.is_empty() {
        return Err(StageError::NoCeEndpoints);
    }
    let mut packets: Vec<_> = gateway_windows
        .iter()
        .flat_map(|w| w.packets.iter().cloned())
        .collect();
    packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    for ce in &inv.ce_endpoints {
        // Connections keyed by (client ip, client port).
        let mut conns: std::collections::BTreeMap<(Ipv4Addr, u16), CeConnState> =
            std::collections::BTreeMap::new();
        let mut live: BTreeSet<(Ipv4Addr, u16)> = BTreeSet::new();
        let mut terminated_any = false;

        for p in &packets {
            let to_ce = p.dst_ip == ce.ip && p.dst_port == Some(ce.port);
            let from_ce = p.src_ip == ce.ip && p.src_port == Some(ce.port);
            if !to_ce && !from_ce {
                continue;
            }
            let key = if to_ce {
                (p.src_ip, p.src_port.unwrap_or(0))
            } else {
                (p.dst_ip, p.dst_port.unwrap_or(0))
            };
            let flags = p.tcp_flags;
            if flags.rst() || flags.fin() {
                if matches!(conns.get(&key), Some(CeConnState::Live { .. })) {
                    terminated_any = true;
                }
                conns.insert(key, CeConnState::Closed);
                live.remove(&key);
                continue;
            }
            if to_ce && flags.syn() && !flags.ack() {
                conns.insert(key, CeConnState::Pending);
            } else if from_ce && flags.syn() && flags.ack() {
                if conns.get(&key) == Some(&CeConnState::Pending) {
                    conns.insert(key, CeConnState::SynAck);
                }
            } else if to_ce && flags.ack() && !flags.syn()
                && conns.get(&key) == Some(&CeConnState::SynAck) {
                    conns.insert(
                        key,
                        CeConnState::Live {
                            established: p.timestamp,
                        },
                    );
                    live.insert(key);
                    // (a) two concurrently live connections, or (b) a fresh
                    // connection after the original was terminated.
                    if live.len() >= 2 || terminated_any {
                        return Ok(StageDetection {
                            kind: StageKind::CeSpoof,
                            detected: true,
                            time_det: p.timestamp,
                            src_ip: key.0,
                            dst_ips: vec![ce.ip],
                            evidence: StageEvidence::None,
                            score: 1.0,
                        });
                    }
                }
        }
    }
    let src = inv.edge_gateway_ip;
    Ok(StageDetection::not_detected(StageKind::CeSpoof, src))
}
