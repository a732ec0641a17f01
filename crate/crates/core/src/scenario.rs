//! Deterministic synthetic-data generator: benign IIoT traffic, the three
//! emulated attack campaigns, and labeled training datasets. Bundles written
//! to disk are byte-identical for identical seeds and serve as the test
//! oracle for the whole engine.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asdc::{build_graph, AsdcError, CampaignGraph, DetStatus};
use crate::features::{discovery_features, fieldbus_features, FeatureStage, FeatureVector, Label};
use crate::ingest::pcap::{frame_len, quantize_ts, write_capture, PcapError};
use crate::ingest::{format_auth_log, format_ids_alerts, parse_auth_log, parse_ids_alerts};
use crate::ml::Dataset;
use crate::model::{
    AuthLoginEvent, AuthMethod, CeEndpoint, EngineConfig, HostInventory, IaProtocol, IdsAlert,
    PacketRecord, PeriodicityConfig, Protocol, ScanType, ScoreConfig, SignatureMap, StageDetection,
    StageEvidence, StageHint, StageKind, TcpFlags, TraceWindow,
};

// Testbed addressing used by all generated scenarios.
pub const ENTRY_HOST: Ipv4Addr = Ipv4Addr::new(10, 0, 1, 10);
pub const OPS_HOST: Ipv4Addr = Ipv4Addr::new(10, 0, 1, 9);
pub const FIREWALL: Ipv4Addr = Ipv4Addr::new(10, 0, 1, 1);
pub const MQTT_SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 2, 20);
pub const API_SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 2, 21);
pub const SENSOR: Ipv4Addr = Ipv4Addr::new(10, 0, 2, 30);
pub const EDGE_GATEWAY: Ipv4Addr = Ipv4Addr::new(10, 0, 3, 1);
pub const CE_MODBUS: Ipv4Addr = Ipv4Addr::new(10, 0, 4, 50);
pub const CE_S7: Ipv4Addr = Ipv4Addr::new(10, 0, 4, 51);
pub const VPN_SERVER: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 5);
pub const CNC_SERVER: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 7);
pub const WEB_SERVER: Ipv4Addr = Ipv4Addr::new(93, 184, 216, 34);

/// Base epoch for generated timestamps.
pub const T0: f64 = 1_700_000_000.0;

pub const SIG_DISCOVERY: u32 = 1001;
pub const SIG_FIELDBUS: u32 = 2002;
pub const SIG_UNMAPPED: u32 = 3003;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("jitter {jitter_s} too large for beacon period {period_s}")]
    JitterTooLarge { period_s: f64, jitter_s: f64 },
    #[error("unknown campaign id {0} (valid: 1, 2, 3)")]
    UnknownCampaignId(u32),
    #[error("span must be positive, got {0}")]
    NonpositiveSpan(f64),
    #[error("bad traffic profile: {0}")]
    BadProfile(String),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    GroundTruth(#[from] AsdcError),
}

/// Fieldbus enumeration aggressiveness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldbusMode {
    Aggressive,
    NonAggressive,
}

/// Shapes of benign and attack traffic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficProfile {
    /// Web sessions per minute at the entry host.
    pub web_sessions_per_min: f64,
    pub mqtt_publish_period_s: f64,
    pub modbus_poll_period_s: f64,
    pub beacon_period_s: f64,
    pub beacon_jitter_s: f64,
    pub scan_mode: ScanType,
    pub fieldbus_mode: FieldbusMode,
    pub fieldbus_protocol: IaProtocol,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        TrafficProfile {
            web_sessions_per_min: 1.5,
            mqtt_publish_period_s: 10.0,
            modbus_poll_period_s: 2.0,
            beacon_period_s: 5.0,
            beacon_jitter_s: 0.15,
            scan_mode: ScanType::Normal,
            fieldbus_mode: FieldbusMode::Aggressive,
            fieldbus_protocol: IaProtocol::Modbus,
        }
    }
}

impl TrafficProfile {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let rates = [
            self.web_sessions_per_min,
            self.mqtt_publish_period_s,
            self.modbus_poll_period_s,
            self.beacon_period_s,
        ];
        if rates.iter().any(|&r| r <= 0.0) {
            return Err(ScenarioError::BadProfile("all rates must be > 0".into()));
        }
        if self.beacon_jitter_s >= self.beacon_period_s / 2.0 {
            return Err(ScenarioError::JitterTooLarge {
                period_s: self.beacon_period_s,
                jitter_s: self.beacon_jitter_s,
            });
        }
        Ok(())
    }
}

/// Inventory of the generated testbed.
pub fn default_inventory() -> HostInventory {
    HostInventory {
        internet_facing_hosts: vec![ENTRY_HOST],
        edge_gateway_ip: EDGE_GATEWAY,
        ce_endpoints: vec![
            CeEndpoint {
                ip: CE_MODBUS,
                port: 502,
                protocol: IaProtocol::Modbus,
            },
            CeEndpoint {
                ip: CE_S7,
                port: 102,
                protocol: IaProtocol::S7,
            },
        ],
        vpn_server_ip: Some(VPN_SERVER),
        private_ranges: vec![
            "10.0.0.0/8".parse().unwrap(),
            "172.16.0.0/12".parse().unwrap(),
            "192.168.0.0/16".parse().unwrap(),
        ],
    }
}

/// Engine configuration shipped inside every bundle. The periodicity
/// sampling frequency is set to 1 Hz so 1-second bins resolve the 5-second
/// beacon period; campaigns run compressed over a few minutes, so mode
/// voting is left at a single window.
pub fn default_config() -> EngineConfig {
    EngineConfig {
        window_duration_s: 60.0,
        mode_vote_n: 1,
        scan_rate_threshold: 30.0,
        inventory: default_inventory(),
        score: ScoreConfig::default(),
        periodicity: PeriodicityConfig {
            sampling_frequency: 1.0,
            ..PeriodicityConfig::default()
        },
        sig_map: SignatureMap::from([
            (SIG_DISCOVERY, StageHint::Discovery),
            (SIG_FIELDBUS, StageHint::FieldbusScan),
        ]),
    }
}

fn tcp(
    ts: f64,
    src: Ipv4Addr,
    sport: u16,
    dst: Ipv4Addr,
    dport: u16,
    flags: u8,
    payload: u32,
) -> PacketRecord {
    PacketRecord {
        timestamp: quantize_ts(ts),
        src_ip: src,
        dst_ip: dst,
        src_port: Some(sport),
        dst_port: Some(dport),
        protocol: Protocol::Tcp,
        tcp_flags: TcpFlags::new(flags),
        payload_len: payload,
        total_len: frame_len(Protocol::Tcp, payload),
    }
}

fn udp(
    ts: f64,
    src: Ipv4Addr,
    sport: u16,
    dst: Ipv4Addr,
    dport: u16,
    payload: u32,
) -> PacketRecord {
    PacketRecord {
        timestamp: quantize_ts(ts),
        src_ip: src,
        dst_ip: dst,
        src_port: Some(sport),
        dst_port: Some(dport),
        protocol: Protocol::Udp,
        tcp_flags: TcpFlags::empty(),
        payload_len: payload,
        total_len: frame_len(Protocol::Udp, payload),
    }
}

fn sort_by_time(packets: &mut [PacketRecord]) {
    packets.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.src_port.cmp(&b.src_port))
            .then_with(|| a.src_ip.cmp(&b.src_ip))
    });
}

/// C&C beacons from `host_ip` to `server_ip`: one datagram (or TCP push)
/// every `period_s` seconds, jittered but phase-locked to the middle of a
/// 1-second bin so jitter up to period/2 never splits a beacon across bins.
#[allow(clippy::too_many_arguments)]
pub fn gen_cnc(
    period_s: f64,
    jitter_s: f64,
    server_ip: Ipv4Addr,
    host_ip: Ipv4Addr,
    start: f64,
    span_s: f64,
    seed: u64,
    use_tcp: bool,
) -> Result<Vec<PacketRecord>, ScenarioError> {
    if span_s <= 0.0 {
        return Err(ScenarioError::NonpositiveSpan(span_s));
    }
    if jitter_s >= period_s / 2.0 {
        return Err(ScenarioError::JitterTooLarge { period_s, jitter_s });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut k = 0usize;
    while (k as f64) * period_s < span_s {
        let jitter = if jitter_s > 0.0 {
            rng.gen_range(-jitter_s..jitter_s)
        } else {
            0.0
        };
        let t = start + 0.5 + k as f64 * period_s + jitter;
        out.push(if use_tcp {
            tcp(
                t,
                host_ip,
                44321,
                server_ip,
                443,
                TcpFlags::PSH | TcpFlags::ACK,
                48,
            )
        } else {
            udp(t, host_ip, 5353, server_ip, 53, 48)
        });
        k += 1;
    }
    Ok(out)
}

/// SYN sweep over every (target, port) pair. NORMAL mode paces probes at
/// about 10 ms, SLOW at about 15 s. A fifth of the probes hit open ports
/// (SYN-ACK reply, scanner RST); the rest stay half-open.
pub fn gen_scan(
    mode: ScanType,
    src: Ipv4Addr,
    targets: &[Ipv4Addr],
    ports_per_target: &[u16],
    start: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let spacing = match mode {
        ScanType::Normal => 0.01,
        ScanType::Slow => 15.0,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = start;
    let mut probe = 0usize;
    for &target in targets {
        for &port in ports_per_target {
            let sport = 40000 + probe as u16;
            out.push(tcp(t, src, sport, target, port, TcpFlags::SYN, 0));
            if probe.is_multiple_of(5) {
                out.push(tcp(
                    t + 0.001,
                    target,
                    port,
                    src,
                    sport,
                    TcpFlags::SYN | TcpFlags::ACK,
                    0,
                ));
                out.push(tcp(t + 0.002, src, sport, target, port, TcpFlags::RST, 0));
            }
            t += spacing * rng.gen_range(0.8..1.2);
            probe += 1;
        }
    }
    sort_by_time(&mut out);
    out
}

/// Fieldbus enumeration from the gateway toward one CE endpoint: a couple of
/// unanswered connects, then connect/request/reset cycles. AGGRESSIVE mode
/// walks all 247 unit ids; NON_AGGRESSIVE stops after the first.
pub fn gen_fieldbus_scan(
    protocol: IaProtocol,
    mode: FieldbusMode,
    gw_ip: Ipv4Addr,
    ce_ip: Ipv4Addr,
    start: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let port = protocol.default_port();
    let cycles = match mode {
        FieldbusMode::Aggressive => 247,
        FieldbusMode::NonAggressive => 1,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    // Initial failed connects before the scanner finds the endpoint listening.
    out.push(tcp(start, gw_ip, 51000, ce_ip, port, TcpFlags::SYN, 0));
    out.push(tcp(
        start + 0.2,
        gw_ip,
        51001,
        ce_ip,
        port,
        TcpFlags::SYN,
        0,
    ));
    let mut t = start + 0.5;
    for cycle in 0..cycles {
        let sport = 52000 + cycle as u16;
        out.push(tcp(t, gw_ip, sport, ce_ip, port, TcpFlags::SYN, 0));
        out.push(tcp(
            t + 0.002,
            ce_ip,
            port,
            gw_ip,
            sport,
            TcpFlags::SYN | TcpFlags::ACK,
            0,
        ));
        out.push(tcp(t + 0.004, gw_ip, sport, ce_ip, port, TcpFlags::ACK, 0));
        out.push(tcp(
            t + 0.006,
            gw_ip,
            sport,
            ce_ip,
            port,
            TcpFlags::PSH | TcpFlags::ACK,
            12,
        ));
        out.push(tcp(
            t + 0.008,
            ce_ip,
            port,
            gw_ip,
            sport,
            TcpFlags::PSH | TcpFlags::ACK,
            16,
        ));
        out.push(tcp(t + 0.010, gw_ip, sport, ce_ip, port, TcpFlags::RST, 0));
        t += 0.08 * rng.gen_range(0.9..1.1);
    }
    sort_by_time(&mut out);
    out
}

/// One HTTPS-like session: handshake, a few irregular payload exchanges,
/// FIN teardown. Irregular gaps keep the chatter aperiodic so it only acts
/// as noise for the beacon detector.
fn web_session(
    host: Ipv4Addr,
    server: Ipv4Addr,
    start: f64,
    sport: u16,
    rng: &mut ChaCha20Rng,
) -> Vec<PacketRecord> {
    let mut out = Vec::new();
    out.push(tcp(start, host, sport, server, 443, TcpFlags::SYN, 0));
    out.push(tcp(
        start + 0.01,
        server,
        443,
        host,
        sport,
        TcpFlags::SYN | TcpFlags::ACK,
        0,
    ));
    out.push(tcp(
        start + 0.02,
        host,
        sport,
        server,
        443,
        TcpFlags::ACK,
        0,
    ));
    let mut t = start + 0.05;
    for i in 0..rng.gen_range(3..7) {
        let (src, sp, dst, dp) = if i % 2 == 0 {
            (host, sport, server, 443)
        } else {
            (server, 443, host, sport)
        };
        out.push(tcp(
            t,
            src,
            sp,
            dst,
            dp,
            TcpFlags::PSH | TcpFlags::ACK,
            rng.gen_range(120..1200),
        ));
        t += rng.gen_range(0.3..3.5);
    }
    out.push(tcp(
        t,
        host,
        sport,
        server,
        443,
        TcpFlags::FIN | TcpFlags::ACK,
        0,
    ));
    out.push(tcp(
        t + 0.01,
        server,
        443,
        host,
        sport,
        TcpFlags::FIN | TcpFlags::ACK,
        0,
    ));
    out
}

/// Benign web chatter at the entry host. The first session starts exactly
/// at `start` so window boundaries are anchored deterministically.
pub fn gen_benign_web(
    host: Ipv4Addr,
    server: Ipv4Addr,
    start: f64,
    span_s: f64,
    sessions_per_min: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mean_gap = 60.0 / sessions_per_min;
    let mut t = start;
    let mut sport = 36000u16;
    while t < start + span_s {
        out.extend(web_session(host, server, t, sport, &mut rng));
        sport = sport.wrapping_add(1).max(36000);
        t += mean_gap * rng.gen_range(0.4..1.6);
    }
    out.retain(|p| p.timestamp < start + span_s);
    sort_by_time(&mut out);
    out
}

/// Sensor publishes toward the MQTT broker, loosely periodic.
pub fn gen_benign_mqtt(
    sensor: Ipv4Addr,
    broker: Ipv4Addr,
    start: f64,
    span_s: f64,
    period_s: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    out.push(tcp(start, sensor, 47000, broker, 1883, TcpFlags::SYN, 0));
    out.push(tcp(
        start + 0.01,
        broker,
        1883,
        sensor,
        47000,
        TcpFlags::SYN | TcpFlags::ACK,
        0,
    ));
    out.push(tcp(
        start + 0.02,
        sensor,
        47000,
        broker,
        1883,
        TcpFlags::ACK,
        0,
    ));
    let mut t = start + 1.0;
    while t < start + span_s {
        out.push(tcp(
            t,
            sensor,
            47000,
            broker,
            1883,
            TcpFlags::PSH | TcpFlags::ACK,
            rng.gen_range(20..80),
        ));
        t += period_s * rng.gen_range(0.7..1.3);
    }
    sort_by_time(&mut out);
    out
}

/// One long-lived Modbus polling connection from the gateway to a CE:
/// handshake at `start`, then request/response pairs for the whole span.
pub fn gen_benign_modbus_poll(
    gw: Ipv4Addr,
    ce: Ipv4Addr,
    start: f64,
    span_s: f64,
    period_s: f64,
    seed: u64,
) -> Vec<PacketRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let sport = 45000;
    out.push(tcp(start, gw, sport, ce, 502, TcpFlags::SYN, 0));
    out.push(tcp(
        start + 0.005,
        ce,
        502,
        gw,
        sport,
        TcpFlags::SYN | TcpFlags::ACK,
        0,
    ));
    out.push(tcp(start + 0.01, gw, sport, ce, 502, TcpFlags::ACK, 0));
    let mut t = start + 0.5;
    while t < start + span_s {
        out.push(tcp(
            t,
            gw,
            sport,
            ce,
            502,
            TcpFlags::PSH | TcpFlags::ACK,
            12,
        ));
        out.push(tcp(
            t + 0.004,
            ce,
            502,
            gw,
            sport,
            TcpFlags::PSH | TcpFlags::ACK,
            14,
        ));
        t += period_s * rng.gen_range(0.95..1.05);
    }
    sort_by_time(&mut out);
    out
}

/// Benign traffic for the whole testbed: web chatter at the entry host,
/// sensor publishes at the broker, Modbus polling at the gateway.
pub fn gen_benign(
    profile: &TrafficProfile,
    start: f64,
    span_s: f64,
    seed: u64,
) -> Result<BTreeMap<Ipv4Addr, Vec<PacketRecord>>, ScenarioError> {
    profile.validate()?;
    if span_s <= 0.0 {
        return Err(ScenarioError::NonpositiveSpan(span_s));
    }
    let mut hosts = BTreeMap::new();
    hosts.insert(
        ENTRY_HOST,
        gen_benign_web(
            ENTRY_HOST,
            WEB_SERVER,
            start,
            span_s,
            profile.web_sessions_per_min,
            seed ^ 0x11,
        ),
    );
    hosts.insert(
        MQTT_SERVER,
        gen_benign_mqtt(
            SENSOR,
            MQTT_SERVER,
            start,
            span_s,
            profile.mqtt_publish_period_s,
            seed ^ 0x22,
        ),
    );
    hosts.insert(
        EDGE_GATEWAY,
        gen_benign_modbus_poll(
            EDGE_GATEWAY,
            CE_MODBUS,
            start,
            span_s,
            profile.modbus_poll_period_s,
            seed ^ 0x33,
        ),
    );
    Ok(hosts)
}

/// Ground-truth metadata carried with every bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Narrative of all campaign steps, including those with no network
    /// footprint.
    pub narrative: Vec<String>,
    /// Ordered stages the engine is expected to accept.
    pub expected_stages: Vec<StageDetection>,
    pub det_status: DetStatus,
}

impl GroundTruth {
    pub fn expected_kinds(&self) -> Vec<StageKind> {
        self.expected_stages.iter().map(|s| s.kind).collect()
    }
}

/// A fully generated scenario: per-host traces, logs, alerts, engine
/// configuration and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub seed: u64,
    pub config: EngineConfig,
    pub host_packets: BTreeMap<Ipv4Addr, Vec<PacketRecord>>,
    pub auth_events: Vec<AuthLoginEvent>,
    pub alerts: Vec<IdsAlert>,
    pub ground_truth: GroundTruth,
}

impl ScenarioBundle {
    /// Expected campaign graph, built from the expected stage detections
    /// with the same construction rules the engine uses.
    pub fn expected_graph(&self) -> Result<CampaignGraph, AsdcError> {
        build_graph(
            &self.ground_truth.expected_stages,
            self.ground_truth.det_status,
            &self.config.inventory,
        )
    }

    /// Split every host trace into engine windows.
    pub fn windows(&self) -> BTreeMap<Ipv4Addr, Vec<TraceWindow>> {
        self.host_packets
            .iter()
            .map(|(&ip, packets)| {
                let w = crate::ingest::split_windows(packets, ip, self.config.window_duration_s)
                    .expect("positive window duration");
                (ip, w)
            })
            .collect()
    }
}

fn benign_auth_events() -> Vec<AuthLoginEvent> {
    let login = |ts: f64, success: bool| AuthLoginEvent {
        timestamp: quantize_ts(ts),
        src_ip: OPS_HOST,
        dst_ip: API_SERVER,
        username: "ops".into(),
        success,
        method: AuthMethod::Ssh,
    };
    vec![
        login(T0 + 95.0, true),
        login(T0 + 350.0, false),
        login(T0 + 520.0, true),
    ]
}

/// A fully benign bundle over ten 60-second windows.
pub fn gen_benign_bundle(seed: u64) -> Result<ScenarioBundle, ScenarioError> {
    let profile = TrafficProfile::default();
    let host_packets = gen_benign(&profile, T0, 600.0, seed)?;
    let alerts = vec![IdsAlert {
        timestamp: quantize_ts(T0 + 200.0),
        signature_id: SIG_UNMAPPED,
        src_ip: OPS_HOST,
        dst_ip: API_SERVER,
        stage_hint: StageHint::None,
    }];
    Ok(ScenarioBundle {
        seed,
        config: default_config(),
        host_packets,
        auth_events: benign_auth_events(),
        alerts,
        ground_truth: GroundTruth {
            narrative: vec!["normal plant operation, no attack activity".into()],
            expected_stages: Vec::new(),
            det_status: DetStatus::AptDetStart,
        },
    })
}

/// Scan targets used by every campaign's discovery step, in address order.
pub fn campaign_scan_targets() -> Vec<Ipv4Addr> {
    vec![FIREWALL, MQTT_SERVER, API_SERVER, EDGE_GATEWAY]
}

struct CampaignPlan {
    narrative: Vec<String>,
    /// Lateral movement destination and method.
    lm_target: Ipv4Addr,
    lm_method: AuthMethod,
    /// Fieldbus scan target, when the campaign reaches the edge tier.
    fieldbus: Option<(IaProtocol, Ipv4Addr)>,
    /// CE spoofing style, when reached.
    spoof: Option<SpoofStyle>,
}

enum SpoofStyle {
    /// Second concurrent connection beside the benign polling connection.
    Overlap,
    /// Reset the polling connection, then reconnect and write.
    TerminateReconnect,
}

fn campaign_plan(id: u32) -> Result<CampaignPlan, ScenarioError> {
    match id {
        1 => Ok(CampaignPlan {
            narrative: vec![
                "spear-phishing email delivers implant to the maintenance machine".into(),
                "implant beacons to the external command server over DNS".into(),
                "SYN sweep of the operations subnet from the maintenance machine".into(),
                "SSH login from the maintenance machine to the edge gateway".into(),
                "aggressive Modbus unit-id enumeration against the PLC".into(),
                "parallel command connection opened to the PLC beside the poller".into(),
            ],
            lm_target: EDGE_GATEWAY,
            lm_method: AuthMethod::Ssh,
            fieldbus: Some((IaProtocol::Modbus, CE_MODBUS)),
            spoof: Some(SpoofStyle::Overlap),
        }),
        2 => Ok(CampaignPlan {
            narrative: vec![
                "malware installed on the maintenance machine".into(),
                "implant beacons to the external command server".into(),
                "network sweep of the operations subnet".into(),
                "RDP login from the maintenance machine to the API server".into(),
                "campaign interrupted before reaching the edge tier".into(),
            ],
            lm_target: API_SERVER,
            lm_method: AuthMethod::Rdp,
            fieldbus: None,
            spoof: None,
        }),
        3 => Ok(CampaignPlan {
            narrative: vec![
                "implant established on the maintenance machine".into(),
                "beaconing to the external command server".into(),
                "sweep of the operations subnet".into(),
                "hijacked SSH session from the maintenance machine to the edge gateway".into(),
                "S7 enumeration against the S7 controller".into(),
                "polling connection reset, reconnect, and controller re-program".into(),
            ],
            lm_target: EDGE_GATEWAY,
            lm_method: AuthMethod::Ssh,
            fieldbus: Some((IaProtocol::S7, CE_S7)),
            spoof: Some(SpoofStyle::TerminateReconnect),
        }),
        other => Err(ScenarioError::UnknownCampaignId(other)),
    }
}

/// Generate one of the three emulated campaigns, compressed to ten minutes.
pub fn gen_campaign(id: u32, seed: u64) -> Result<ScenarioBundle, ScenarioError> {
    let plan = campaign_plan(id)?;
    let config = default_config();
    let profile = TrafficProfile::default();
    let mut host_packets = gen_benign(&profile, T0, 600.0, seed)?;

    // C&C beaconing, windows 1..4 of the entry-host trace.
    let beacon_start = T0 + 60.0;
    let beacons = gen_cnc(
        profile.beacon_period_s,
        profile.beacon_jitter_s,
        CNC_SERVER,
        ENTRY_HOST,
        beacon_start,
        190.0,
        seed ^ 0x44,
        false,
    )?;
    let cnc_first = beacons[0].timestamp;
    host_packets.get_mut(&ENTRY_HOST).unwrap().extend(beacons);

    // Discovery sweep inside window 5.
    let scan_start = T0 + 300.5;
    let targets = campaign_scan_targets();
    let scan = gen_scan(
        ScanType::Normal,
        ENTRY_HOST,
        &targets,
        &[22, 80, 443],
        scan_start,
        seed ^ 0x55,
    );
    host_packets.get_mut(&ENTRY_HOST).unwrap().extend(scan);

    // Lateral movement: login plus remote-access traffic around it.
    let lm_time = T0 + 400.0;
    let lm_port = match plan.lm_method {
        AuthMethod::Rdp => 3389,
        _ => 22,
    };
    let mut lm_traffic = vec![
        tcp(
            lm_time - 0.5,
            ENTRY_HOST,
            48000,
            plan.lm_target,
            lm_port,
            TcpFlags::SYN,
            0,
        ),
        tcp(
            lm_time - 0.49,
            plan.lm_target,
            lm_port,
            ENTRY_HOST,
            48000,
            TcpFlags::SYN | TcpFlags::ACK,
            0,
        ),
        tcp(
            lm_time - 0.48,
            ENTRY_HOST,
            48000,
            plan.lm_target,
            lm_port,
            TcpFlags::ACK,
            0,
        ),
    ];
    for i in 0..6 {
        lm_traffic.push(tcp(
            lm_time + 0.5 + i as f64 * 1.7,
            ENTRY_HOST,
            48000,
            plan.lm_target,
            lm_port,
            TcpFlags::PSH | TcpFlags::ACK,
            96,
        ));
    }
    host_packets
        .get_mut(&ENTRY_HOST)
        .unwrap()
        .extend(lm_traffic);

    let mut auth_events = benign_auth_events();
    auth_events.push(AuthLoginEvent {
        timestamp: quantize_ts(lm_time),
        src_ip: ENTRY_HOST,
        dst_ip: plan.lm_target,
        username: "maint".into(),
        success: true,
        method: plan.lm_method,
    });
    auth_events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let mut alerts = vec![IdsAlert {
        timestamp: quantize_ts(scan_start),
        signature_id: SIG_DISCOVERY,
        src_ip: ENTRY_HOST,
        dst_ip: FIREWALL,
        stage_hint: StageHint::Discovery,
    }];

    // Edge-tier activity observed on the gateway trace.
    let fieldbus_start = T0 + 425.0;
    if let Some((protocol, ce_ip)) = plan.fieldbus {
        let scan = gen_fieldbus_scan(
            protocol,
            profile.fieldbus_mode,
            EDGE_GATEWAY,
            ce_ip,
            fieldbus_start,
            seed ^ 0x66,
        );
        host_packets.get_mut(&EDGE_GATEWAY).unwrap().extend(scan);
        alerts.push(IdsAlert {
            timestamp: quantize_ts(fieldbus_start),
            signature_id: SIG_FIELDBUS,
            src_ip: EDGE_GATEWAY,
            dst_ip: ce_ip,
            stage_hint: StageHint::FieldbusScan,
        });
    }

    if let Some(style) = &plan.spoof {
        let t = T0 + 500.0;
        let gw = EDGE_GATEWAY;
        let spoof = match style {
            SpoofStyle::Overlap => {
                // New connection beside the live poller, then writes.
                let sport = 46000;
                let mut v = vec![
                    tcp(t, gw, sport, CE_MODBUS, 502, TcpFlags::SYN, 0),
                    tcp(
                        t + 0.004,
                        CE_MODBUS,
                        502,
                        gw,
                        sport,
                        TcpFlags::SYN | TcpFlags::ACK,
                        0,
                    ),
                    tcp(t + 0.008, gw, sport, CE_MODBUS, 502, TcpFlags::ACK, 0),
                ];
                for i in 0..4 {
                    v.push(tcp(
                        t + 0.5 + i as f64 * 0.8,
                        gw,
                        sport,
                        CE_MODBUS,
                        502,
                        TcpFlags::PSH | TcpFlags::ACK,
                        24,
                    ));
                }
                v
            }
            SpoofStyle::TerminateReconnect => {
                let sport = 46001;
                let mut v = vec![
                    // Kill the legitimate polling connection (port 45000).
                    tcp(t, gw, 45000, CE_MODBUS, 502, TcpFlags::RST, 0),
                    tcp(t + 5.0, gw, sport, CE_MODBUS, 502, TcpFlags::SYN, 0),
                    tcp(
                        t + 5.004,
                        CE_MODBUS,
                        502,
                        gw,
                        sport,
                        TcpFlags::SYN | TcpFlags::ACK,
                        0,
                    ),
                    tcp(t + 5.008, gw, sport, CE_MODBUS, 502, TcpFlags::ACK, 0),
                ];
                for i in 0..6 {
                    v.push(tcp(
                        t + 6.0 + i as f64 * 0.6,
                        gw,
                        sport,
                        CE_MODBUS,
                        502,
                        TcpFlags::PSH | TcpFlags::ACK,
                        64,
                    ));
                }
                v
            }
        };
        host_packets.get_mut(&EDGE_GATEWAY).unwrap().extend(spoof);
    }

    for packets in host_packets.values_mut() {
        sort_by_time(packets);
    }

    // Expected stages, mirroring the engine's return attributes.
    let mut expected = vec![
        StageDetection {
            kind: StageKind::Cnc,
            detected: true,
            time_det: cnc_first,
            src_ip: ENTRY_HOST,
            dst_ips: vec![CNC_SERVER],
            evidence: StageEvidence::Cnc {
                cnc_server_ip: CNC_SERVER,
            },
            score: 1.0,
        },
        StageDetection {
            kind: StageKind::Discovery,
            detected: true,
            time_det: T0 + 300.0,
            src_ip: ENTRY_HOST,
            dst_ips: targets.clone(),
            evidence: StageEvidence::Discovery {
                scan_type: ScanType::Slow,
            },
            score: 1.0,
        },
        StageDetection {
            kind: StageKind::LateralMovement,
            detected: true,
            time_det: quantize_ts(lm_time),
            src_ip: ENTRY_HOST,
            dst_ips: vec![plan.lm_target],
            evidence: StageEvidence::None,
            score: 1.0,
        },
    ];
    let det_status = if let Some((_, ce_ip)) = plan.fieldbus {
        expected.push(StageDetection {
            kind: StageKind::FieldbusScan,
            detected: true,
            time_det: T0 + 420.0,
            src_ip: EDGE_GATEWAY,
            dst_ips: vec![ce_ip],
            evidence: StageEvidence::None,
            score: 1.0,
        });
        expected.push(StageDetection {
            kind: StageKind::CeSpoof,
            detected: true,
            time_det: T0 + 426.0,
            src_ip: EDGE_GATEWAY,
            dst_ips: vec![CE_MODBUS],
            evidence: StageEvidence::None,
            score: 1.0,
        });
        DetStatus::AptDetStop
    } else {
        DetStatus::AptDetStart
    };

    Ok(ScenarioBundle {
        seed,
        config,
        host_packets,
        auth_events,
        alerts,
        ground_truth: GroundTruth {
            narrative: plan.narrative,
            expected_stages: expected,
            det_status,
        },
    })
}

/// Insert one NORMAL-mode scan burst into a benign bundle's entry-host
/// trace, starting `at_s` seconds after the trace begins. Used to exercise
/// false-positive containment.
pub fn inject_scan_window(bundle: &mut ScenarioBundle, at_s: f64, seed: u64) {
    let start = T0 + at_s;
    let scan = gen_scan(
        ScanType::Normal,
        ENTRY_HOST,
        &campaign_scan_targets(),
        &[22, 80, 443],
        start,
        seed,
    );
    let entry = bundle.host_packets.get_mut(&ENTRY_HOST).unwrap();
    entry.extend(scan);
    sort_by_time(entry);
}

/// Insert C&C beacons into a benign bundle's entry-host trace. Combined
/// with `inject_scan_window` this builds a C&C + Discovery chain with no
/// lateral movement behind it.
pub fn inject_beacons(
    bundle: &mut ScenarioBundle,
    at_s: f64,
    span_s: f64,
    seed: u64,
) -> Result<(), ScenarioError> {
    let beacons = gen_cnc(
        5.0,
        0.15,
        CNC_SERVER,
        ENTRY_HOST,
        T0 + at_s,
        span_s,
        seed,
        false,
    )?;
    let entry = bundle.host_packets.get_mut(&ENTRY_HOST).unwrap();
    entry.extend(beacons);
    sort_by_time(entry);
    Ok(())
}

// ---------------------------------------------------------------------------
// Labeled training datasets.

fn window_features(stage: FeatureStage, packets: &[PacketRecord], label: Label) -> FeatureVector {
    let window = TraceWindow {
        host_ip: match stage {
            FeatureStage::Discovery => ENTRY_HOST,
            FeatureStage::Fieldbus => EDGE_GATEWAY,
        },
        start_time: T0,
        duration_s: 60.0,
        packets: packets.to_vec(),
    };
    let mut fv = match stage {
        FeatureStage::Discovery => discovery_features(&window),
        FeatureStage::Fieldbus => fieldbus_features(&window),
    };
    fv.label = Some(label);
    fv
}

fn discovery_window(mode: Option<ScanType>, rng: &mut ChaCha20Rng) -> FeatureVector {
    let seed = rng.gen::<u64>();
    let mut packets = gen_benign_web(
        ENTRY_HOST,
        WEB_SERVER,
        T0,
        60.0,
        rng.gen_range(0.8..2.5),
        seed,
    );
    let label = match mode {
        None => Label::Normal,
        Some(mode) => {
            let n_targets = rng.gen_range(3..12usize);
            let targets: Vec<Ipv4Addr> = (0..n_targets)
                .map(|i| Ipv4Addr::new(10, 0, rng.gen_range(1..5), 100 + i as u8))
                .collect();
            let ports: Vec<u16> = vec![22, 80, 443, 8080][..rng.gen_range(2..5)].to_vec();
            let scan_start = T0 + rng.gen_range(0.0..5.0);
            packets.extend(gen_scan(
                mode,
                ENTRY_HOST,
                &targets,
                &ports,
                scan_start,
                seed ^ 0x77,
            ));
            // Keep the labeled sample inside one window.
            packets.retain(|p| p.timestamp < T0 + 60.0);
            Label::Scanning
        }
    };
    sort_by_time(&mut packets);
    window_features(FeatureStage::Discovery, &packets, label)
}

fn fieldbus_window(
    attack: Option<(IaProtocol, FieldbusMode)>,
    rng: &mut ChaCha20Rng,
) -> FeatureVector {
    let seed = rng.gen::<u64>();
    let period = rng.gen_range(1.5..3.0);
    // Benign windows cover three legitimate poller shapes: a connection
    // established long ago, a connection freshly opened inside the window,
    // and a mid-window reconnect after a dropped link.
    let variant = rng.gen_range(0..10u32);
    let mut packets = if variant < 6 {
        let mut p =
            gen_benign_modbus_poll(EDGE_GATEWAY, CE_MODBUS, T0 - 120.0, 180.0, period, seed);
        p.retain(|q| q.timestamp >= T0 && q.timestamp < T0 + 60.0);
        p
    } else if variant < 8 {
        let mut p = gen_benign_modbus_poll(EDGE_GATEWAY, CE_MODBUS, T0, 60.0, period, seed);
        p.retain(|q| q.timestamp < T0 + 60.0);
        p
    } else {
        let mut p =
            gen_benign_modbus_poll(EDGE_GATEWAY, CE_MODBUS, T0 - 120.0, 145.0, period, seed);
        p.push(tcp(
            T0 + 25.5,
            EDGE_GATEWAY,
            45000,
            CE_MODBUS,
            502,
            TcpFlags::RST,
            0,
        ));
        let mut fresh = gen_benign_modbus_poll(
            EDGE_GATEWAY,
            CE_MODBUS,
            T0 + 26.0,
            34.0,
            period,
            seed ^ 0x99,
        );
        for q in &mut fresh {
            q.src_port = q.src_port.map(|p| if p == 45000 { 45001 } else { p });
            q.dst_port = q.dst_port.map(|p| if p == 45000 { 45001 } else { p });
        }
        p.extend(fresh);
        p.retain(|q| q.timestamp >= T0 && q.timestamp < T0 + 60.0);
        p
    };
    let label = match attack {
        None => Label::Normal,
        Some((protocol, mode)) => {
            let ce = if protocol == IaProtocol::S7 {
                CE_S7
            } else {
                CE_MODBUS
            };
            let scan_start = T0 + rng.gen_range(0.0..10.0);
            let mut scan =
                gen_fieldbus_scan(protocol, mode, EDGE_GATEWAY, ce, scan_start, seed ^ 0x88);
            scan.retain(|p| p.timestamp < T0 + 60.0);
            packets.extend(scan);
            Label::Scanning
        }
    };
    sort_by_time(&mut packets);
    window_features(FeatureStage::Fieldbus, &packets, label)
}

/// Labeled discovery dataset: `n_per_class` benign windows and as many
/// windows containing a scan of the given speed.
pub fn gen_discovery_dataset(n_per_class: usize, mode: ScanType, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        vectors.push(discovery_window(None, &mut rng));
    }
    for _ in 0..n_per_class {
        vectors.push(discovery_window(Some(mode), &mut rng));
    }
    Dataset::from_vectors(FeatureStage::Discovery, &vectors)
}

/// Discovery dataset mixing normal and slow scans, used for campaign runs.
pub fn gen_discovery_mixed_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        vectors.push(discovery_window(None, &mut rng));
    }
    for i in 0..n_per_class {
        let mode = if i % 2 == 0 {
            ScanType::Normal
        } else {
            ScanType::Slow
        };
        vectors.push(discovery_window(Some(mode), &mut rng));
    }
    Dataset::from_vectors(FeatureStage::Discovery, &vectors)
}

/// Labeled fieldbus dataset for one protocol and mode.
pub fn gen_fieldbus_dataset(
    n_per_class: usize,
    protocol: IaProtocol,
    mode: FieldbusMode,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        vectors.push(fieldbus_window(None, &mut rng));
    }
    for _ in 0..n_per_class {
        vectors.push(fieldbus_window(Some((protocol, mode)), &mut rng));
    }
    Dataset::from_vectors(FeatureStage::Fieldbus, &vectors)
}

/// Fieldbus dataset mixing protocols and modes, used for campaign runs.
pub fn gen_fieldbus_mixed_dataset(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        vectors.push(fieldbus_window(None, &mut rng));
    }
    let combos = [
        (IaProtocol::Modbus, FieldbusMode::Aggressive),
        (IaProtocol::Modbus, FieldbusMode::NonAggressive),
        (IaProtocol::S7, FieldbusMode::Aggressive),
        (IaProtocol::S7, FieldbusMode::NonAggressive),
    ];
    for i in 0..n_per_class {
        vectors.push(fieldbus_window(Some(combos[i % combos.len()]), &mut rng));
    }
    Dataset::from_vectors(FeatureStage::Fieldbus, &vectors)
}

// ---------------------------------------------------------------------------
// Bundle file IO.

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a bundle to `dir`: one capture per host, auth log, IDS alerts,
/// engine config, ground-truth stage list and expected graph.
pub fn write_bundle(bundle: &ScenarioBundle, dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (ip, packets) in &bundle.host_packets {
        let path = dir.join(format!("host_{ip}.pcap"));
        write_capture(&path, packets)?;
    }
    let auth = dir.join("auth.log");
    std::fs::write(&auth, format_auth_log(&bundle.auth_events)).map_err(io_err(&auth))?;
    let alerts = dir.join("alerts.log");
    std::fs::write(&alerts, format_ids_alerts(&bundle.alerts)).map_err(io_err(&alerts))?;
    let config = dir.join("config.toml");
    std::fs::write(&config, bundle.config.to_toml()).map_err(io_err(&config))?;
    let gt = dir.join("ground_truth.json");
    let gt_text =
        serde_json::to_string_pretty(&bundle.ground_truth).expect("ground truth serializes");
    std::fs::write(&gt, gt_text + "\n").map_err(io_err(&gt))?;
    let graph = bundle.expected_graph()?;
    let graph_path = dir.join("expected_graph.json");
    std::fs::write(
        &graph_path,
        crate::asdc::export_graph(&graph, crate::asdc::GraphFormat::Structured),
    )
    .map_err(io_err(&graph_path))?;
    Ok(())
}

/// Read a bundle directory back into memory. The seed is not recoverable
/// from disk and is reported as 0.
pub fn load_bundle(dir: &Path) -> Result<ScenarioBundle, ScenarioError> {
    let config_path = dir.join("config.toml");
    let config_text = std::fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let config = EngineConfig::from_toml(&config_text)
        .map_err(|e| ScenarioError::BadProfile(format!("{}: {e}", config_path.display())))?;
    let mut host_packets = BTreeMap::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(ip_text) = name
            .strip_prefix("host_")
            .and_then(|r| r.strip_suffix(".pcap"))
        {
            if let Ok(ip) = ip_text.parse::<Ipv4Addr>() {
                let (packets, _) = crate::ingest::read_capture(&path)?;
                host_packets.insert(ip, packets);
            }
        }
    }
    let (auth_events, _) = parse_auth_log(&dir.join("auth.log"))
        .map_err(|e| ScenarioError::BadProfile(e.to_string()))?;
    let (alerts, _) = parse_ids_alerts(&dir.join("alerts.log"), &config.sig_map)
        .map_err(|e| ScenarioError::BadProfile(e.to_string()))?;
    let gt_path = dir.join("ground_truth.json");
    let ground_truth = if gt_path.exists() {
        let text = std::fs::read_to_string(&gt_path).map_err(io_err(&gt_path))?;
        serde_json::from_str(&text)
            .map_err(|e| ScenarioError::BadProfile(format!("ground_truth.json: {e}")))?
    } else {
        GroundTruth {
            narrative: Vec::new(),
            expected_stages: Vec::new(),
            det_status: DetStatus::AptDetStart,
        }
    };
    Ok(ScenarioBundle {
        seed: 0,
        config,
        host_packets,
        auth_events,
        alerts,
        ground_truth,
    })
}
