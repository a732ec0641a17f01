//! Shared domain types, configuration, and the campaign state machine
//! referenced by every detector and the correlation engine.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Transport protocol of a parsed packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
    Other,
}

/// TCP flag bits we track. Stored as a bitset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const SYN: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const PSH: u8 = 0x04;
    pub const FIN: u8 = 0x08;
    pub const RST: u8 = 0x10;

    pub fn new(bits: u8) -> Self {
        TcpFlags(bits)
    }

    pub fn empty() -> Self {
        TcpFlags(0)
    }

    pub fn has(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn syn(self) -> bool {
        self.has(Self::SYN)
    }
    pub fn ack(self) -> bool {
        self.has(Self::ACK)
    }
    pub fn psh(self) -> bool {
        self.has(Self::PSH)
    }
    pub fn fin(self) -> bool {
        self.has(Self::FIN)
    }
    pub fn rst(self) -> bool {
        self.has(Self::RST)
    }

    /// Exactly the given bits, nothing else.
    pub fn is_exactly(self, bits: u8) -> bool {
        self.0 == bits
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names = Vec::new();
        if self.syn() {
            names.push("SYN");
        }
        if self.ack() {
            names.push("ACK");
        }
        if self.psh() {
            names.push("PSH");
        }
        if self.fin() {
            names.push("FIN");
        }
        if self.rst() {
            names.push("RST");
        }
        write!(f, "{}", names.join("+"))
    }
}

/// One parsed packet header. Timestamps are seconds since epoch with
/// microsecond resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Protocol,
    pub tcp_flags: TcpFlags,
    pub payload_len: u32,
    pub total_len: u32,
}

/// A fixed-duration slice of packets observed at one host interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceWindow {
    pub host_ip: Ipv4Addr,
    pub start_time: f64,
    pub duration_s: f64,
    pub packets: Vec<PacketRecord>,
}

impl TraceWindow {
    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration_s
    }
}

/// Remote-access method recorded in the auth log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuthMethod {
    Ssh,
    Rdp,
    Other,
}

/// A login event parsed from the canonical auth-log format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthLoginEvent {
    pub timestamp: f64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub username: String,
    pub success: bool,
    pub method: AuthMethod,
}

/// Which attack stage an IDS signature maps to, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageHint {
    Discovery,
    FieldbusScan,
    None,
}

/// An alert consumed from the IDS alert file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdsAlert {
    pub timestamp: f64,
    pub signature_id: u32,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub stage_hint: StageHint,
}

/// The five invariant attack tactics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Cnc,
    Discovery,
    LateralMovement,
    FieldbusScan,
    CeSpoof,
}

impl StageKind {
    pub const ALL: [StageKind; 5] = [
        StageKind::Cnc,
        StageKind::Discovery,
        StageKind::LateralMovement,
        StageKind::FieldbusScan,
        StageKind::CeSpoof,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Cnc => "cnc",
            StageKind::Discovery => "discovery",
            StageKind::LateralMovement => "lateral_movement",
            StageKind::FieldbusScan => "fieldbus_scan",
            StageKind::CeSpoof => "ce_spoof",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Speed class of a detected network scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanType {
    Normal,
    Slow,
}

/// Stage-specific evidence carried by a detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage_evidence", rename_all = "snake_case")]
pub enum StageEvidence {
    Cnc { cnc_server_ip: Ipv4Addr },
    Discovery { scan_type: ScanType },
    None,
}

/// A detected (or rejected) attack stage with its return attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDetection {
    pub kind: StageKind,
    pub detected: bool,
    /// Time of detection, seconds since epoch.
    pub time_det: f64,
    pub src_ip: Ipv4Addr,
    /// Targets; empty where inapplicable.
    pub dst_ips: Vec<Ipv4Addr>,
    pub evidence: StageEvidence,
    /// Aggregate detection score d in [0, 1].
    pub score: f64,
}

impl StageDetection {
    pub fn not_detected(kind: StageKind, src_ip: Ipv4Addr) -> Self {
        StageDetection {
            kind,
            detected: false,
            time_det: 0.0,
            src_ip,
            dst_ips: Vec::new(),
            evidence: StageEvidence::None,
            score: 0.0,
        }
    }
}

/// Industrial-automation protocol spoken by a control element endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IaProtocol {
    Modbus,
    S7,
    Dnp3,
    Other,
}

impl IaProtocol {
    /// Default TCP port for the protocol.
    pub fn default_port(self) -> u16 {
        match self {
            IaProtocol::Modbus => 502,
            IaProtocol::S7 => 102,
            IaProtocol::Dnp3 => 20000,
            IaProtocol::Other => 0,
        }
    }
}

/// A control element endpoint reachable from the edge gateway.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CeEndpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub protocol: IaProtocol,
}

/// An IPv4 CIDR block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cidr {
    pub network: Ipv4Addr,
    pub prefix_len: u8,
}

impl Cidr {
    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        if self.prefix_len == 0 {
            return true;
        }
        let mask = u32::MAX << (32 - self.prefix_len as u32);
        (u32::from(addr) & mask) == (u32::from(self.network) & mask)
    }
}

impl FromStr for Cidr {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (net, len) = s
            .split_once('/')
            .ok_or_else(|| ModelError::BadCidr(s.to_string()))?;
        let network: Ipv4Addr = net
            .parse()
            .map_err(|_| ModelError::BadCidr(s.to_string()))?;
        let prefix_len: u8 = len
            .parse()
            .map_err(|_| ModelError::BadCidr(s.to_string()))?;
        if prefix_len > 32 {
            return Err(ModelError::BadCidr(s.to_string()));
        }
        Ok(Cidr {
            network,
            prefix_len,
        })
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix_len)
    }
}

impl Serialize for Cidr {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Cidr {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_private_ranges() -> Vec<Cidr> {
    vec![
        "10.0.0.0/8".parse().unwrap(),
        "172.16.0.0/12".parse().unwrap(),
        "192.168.0.0/16".parse().unwrap(),
    ]
}

/// Network inventory the engine operates on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInventory {
    pub internet_facing_hosts: Vec<Ipv4Addr>,
    pub edge_gateway_ip: Ipv4Addr,
    #[serde(default)]
    pub ce_endpoints: Vec<CeEndpoint>,
    #[serde(default)]
    pub vpn_server_ip: Option<Ipv4Addr>,
    #[serde(default = "default_private_ranges")]
    pub private_ranges: Vec<Cidr>,
}

impl HostInventory {
    /// A "public" address is one outside every private range and distinct
    /// from the VPN server.
    pub fn is_public(&self, addr: Ipv4Addr) -> bool {
        if Some(addr) == self.vpn_server_ip {
            return false;
        }
        !self.private_ranges.iter().any(|r| r.contains(addr))
    }
}

/// Weights and threshold for the multi-source aggregate detection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Weight of the optimal data source, in (0, 1].
    pub w_opt: f64,
    /// Default weight for any secondary source not listed in `secondary_weights`.
    #[serde(default = "default_secondary_weight")]
    pub secondary_default: f64,
    /// Per-(stage, source) overrides, keyed "stage/source" (e.g. "discovery/ids_alerts").
    #[serde(default)]
    pub secondary_weights: BTreeMap<String, f64>,
    /// Detection threshold tau, in (0, 1].
    pub tau: f64,
}

fn default_secondary_weight() -> f64 {
    0.25
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            w_opt: 0.5,
            secondary_default: 0.25,
            secondary_weights: BTreeMap::new(),
            tau: 0.5,
        }
    }
}

impl ScoreConfig {
    pub fn secondary_weight(&self, stage: StageKind, source: &str) -> f64 {
        let key = format!("{}/{}", stage.name(), source);
        *self
            .secondary_weights
            .get(&key)
            .unwrap_or(&self.secondary_default)
    }

    /// The optimal-source weight must strictly dominate every secondary weight.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.w_opt > 0.0 && self.w_opt <= 1.0) {
            return Err(ModelError::BadScoreConfig(format!(
                "w_opt {} out of (0, 1]",
                self.w_opt
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ModelError::BadScoreConfig(format!(
                "tau {} out of (0, 1]",
                self.tau
            )));
        }
        let mut weights: Vec<f64> = self.secondary_weights.values().copied().collect();
        weights.push(self.secondary_default);
        for w in weights {
            if w <= 0.0 || w >= self.w_opt {
                return Err(ModelError::WeightOrderViolation {
                    w_opt: self.w_opt,
                    w_secondary: w,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("edge gateway {0} is also listed as internet-facing")]
    EdgeInFacingSet(Ipv4Addr),
    #[error("internet_facing_hosts is empty")]
    EmptyFacingSet,
    #[error("bad CIDR block: {0}")]
    BadCidr(String),
    #[error("bad CE endpoint port 0 for {0}")]
    BadCePort(Ipv4Addr),
    #[error("invalid score config: {0}")]
    BadScoreConfig(String),
    #[error("secondary weight {w_secondary} does not satisfy 0 < w < w_opt = {w_opt}")]
    WeightOrderViolation { w_opt: f64, w_secondary: f64 },
    #[error("illegal transition from {state:?} on {stage}")]
    IllegalTransition { state: IasmState, stage: StageKind },
}

/// Validate inventory invariants, returning every violation found.
pub fn validate_inventory(inv: &HostInventory) -> Result<(), Vec<ModelError>> {
    let mut errs = Vec::new();
    if inv.internet_facing_hosts.is_empty() {
        errs.push(ModelError::EmptyFacingSet);
    }
    if inv.internet_facing_hosts.contains(&inv.edge_gateway_ip) {
        errs.push(ModelError::EdgeInFacingSet(inv.edge_gateway_ip));
    }
    for ce in &inv.ce_endpoints {
        if ce.port == 0 {
            errs.push(ModelError::BadCePort(ce.ip));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}

/// States of the campaign progression state machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IasmState {
    ReadyForAttack,
    InfectedEntryHost,
    EstablishFoothold,
    InfectedNewHost,
    InfectedEdgeGateway,
    CollectIcsIntelligence,
    ExecuteCeCommands,
    GoalsAchievedOrDetected,
}

/// Successor state for a detected stage. `target_is_gateway` disambiguates
/// lateral movement into the edge tier from movement between peers.
pub fn iasm_next(
    state: IasmState,
    stage: StageKind,
    target_is_gateway: bool,
) -> Result<IasmState, ModelError> {
    use IasmState::*;
    use StageKind::*;
    let next = match (state, stage) {
        // C&C evidence at an internet-facing host implies the entry host is
        // already infected.
        (ReadyForAttack, Cnc) => InfectedEntryHost,
        (InfectedEntryHost, Cnc) => EstablishFoothold,
        (EstablishFoothold, Discovery) => EstablishFoothold,
        (EstablishFoothold, LateralMovement) => {
            if target_is_gateway {
                InfectedEdgeGateway
            } else {
                InfectedNewHost
            }
        }
        (InfectedNewHost, Discovery) => InfectedNewHost,
        // Repeated lateral movement keeps the machine in the same state.
        (InfectedNewHost, LateralMovement) => {
            if target_is_gateway {
                InfectedEdgeGateway
            } else {
                InfectedNewHost
            }
        }
        (InfectedEdgeGateway, FieldbusScan) => CollectIcsIntelligence,
        (CollectIcsIntelligence, CeSpoof) => ExecuteCeCommands,
        (ExecuteCeCommands, CeSpoof) => GoalsAchievedOrDetected,
        _ => return Err(ModelError::IllegalTransition { state, stage }),
    };
    Ok(next)
}

/// Parameters of the C&C periodicity detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityConfig {
    /// Samples per second used when encoding packet arrivals as a binary signal.
    pub sampling_frequency: f64,
    /// Peaks below this fraction of the tallest non-zero-lag peak are dropped.
    pub min_peak_fraction: f64,
    /// Upper bound on inter-peak gap variance normalized by squared mean gap.
    pub gap_variance_threshold: f64,
    /// Minimum candidate packets per public server before analysis runs.
    pub min_packets: usize,
}

impl Default for PeriodicityConfig {
    fn default() -> Self {
        PeriodicityConfig {
            sampling_frequency: 0.1,
            min_peak_fraction: 0.7,
            gap_variance_threshold: 0.01,
            min_packets: 4,
        }
    }
}

/// Mapping from IDS signature ids to stage hints.
pub type SignatureMap = BTreeMap<u32, StageHint>;

/// TOML tables require string keys, so signature ids are written as strings
/// on disk and parsed back to u32 on load.
mod sig_map_serde {
    use super::{SignatureMap, StageHint};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(map: &SignatureMap, ser: S) -> Result<S::Ok, S::Error> {
        let keyed: BTreeMap<String, StageHint> =
            map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        serde::Serialize::serialize(&keyed, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<SignatureMap, D::Error> {
        let keyed = BTreeMap::<String, StageHint>::deserialize(de)?;
        keyed
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|id| (id, v))
                    .map_err(|_| D::Error::custom(format!("bad signature id key {k:?}")))
            })
            .collect()
    }
}

fn default_window_duration() -> f64 {
    60.0
}

fn default_mode_vote_n() -> usize {
    5
}

fn default_scan_rate_threshold() -> f64 {
    30.0
}

/// Top-level engine configuration, loaded from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    #[serde(default = "default_window_duration")]
    pub window_duration_s: f64,
    /// Odd number of consecutive windows whose classification mode is taken.
    #[serde(default = "default_mode_vote_n")]
    pub mode_vote_n: usize,
    /// Unique scan-target IPs per minute at or above which a scan is NORMAL
    /// rather than SLOW.
    #[serde(default = "default_scan_rate_threshold")]
    pub scan_rate_threshold: f64,
    pub inventory: HostInventory,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub periodicity: PeriodicityConfig,
    /// IDS signature id -> stage hint.
    #[serde(default, with = "sig_map_serde")]
    pub sig_map: SignatureMap,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: EngineConfig = toml::from_str(text)
            .map_err(|e| ModelError::BadScoreConfig(format!("config parse error: {e}")))?;
        cfg.score.validate()?;
        validate_inventory(&cfg.inventory).map_err(|mut v| v.remove(0))?;
        if cfg.window_duration_s <= 0.0 {
            return Err(ModelError::BadScoreConfig(
                "window_duration_s must be positive".into(),
            ));
        }
        if cfg.mode_vote_n == 0 || cfg.mode_vote_n.is_multiple_of(2) {
            return Err(ModelError::BadScoreConfig(
                "mode_vote_n must be odd and positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inventory() -> HostInventory {
        HostInventory {
            internet_facing_hosts: vec!["10.0.1.10".parse().unwrap()],
            edge_gateway_ip: "10.0.3.1".parse().unwrap(),
            ce_endpoints: vec![CeEndpoint {
                ip: "10.0.4.50".parse().unwrap(),
                port: 502,
                protocol: IaProtocol::Modbus,
            }],
            vpn_server_ip: Some("203.0.113.5".parse().unwrap()),
            private_ranges: default_private_ranges(),
        }
    }

    #[test]
    fn valid_inventory_accepted() {
        assert!(validate_inventory(&inventory()).is_ok());
    }

    #[test]
    fn edge_gateway_in_facing_set_rejected() {
        let mut inv = inventory();
        inv.internet_facing_hosts.push(inv.edge_gateway_ip);
        let errs = validate_inventory(&inv).unwrap_err();
        assert!(errs
            .iter()
            .any(|e| matches!(e, ModelError::EdgeInFacingSet(_))));
    }

    #[test]
    fn empty_facing_set_rejected() {
        let mut inv = inventory();
        inv.internet_facing_hosts.clear();
        let errs = validate_inventory(&inv).unwrap_err();
        assert!(errs.iter().any(|e| matches!(e, ModelError::EmptyFacingSet)));
    }

    #[test]
    fn public_excludes_private_and_vpn() {
        let inv = inventory();
        assert!(!inv.is_public("10.0.1.10".parse().unwrap()));
        assert!(!inv.is_public("203.0.113.5".parse().unwrap()));
        assert!(inv.is_public("8.8.4.4".parse().unwrap()));
    }

    #[test]
    fn iasm_cnc_at_entry_host_establishes_foothold() {
        assert_eq!(
            iasm_next(IasmState::InfectedEntryHost, StageKind::Cnc, false).unwrap(),
            IasmState::EstablishFoothold
        );
    }

    #[test]
    fn iasm_lateral_movement_self_loop() {
        assert_eq!(
            iasm_next(
                IasmState::InfectedNewHost,
                StageKind::LateralMovement,
                false
            )
            .unwrap(),
            IasmState::InfectedNewHost
        );
    }

    #[test]
    fn iasm_rejects_unknown_pair() {
        let err = iasm_next(IasmState::EstablishFoothold, StageKind::CeSpoof, false).unwrap_err();
        assert!(matches!(err, ModelError::IllegalTransition { .. }));
    }

    #[test]
    fn iasm_has_full_path_using_all_stage_kinds() {
        use IasmState::*;
        use StageKind::*;
        // READY -> ... -> EXECUTE_CE_COMMANDS exercising all five kinds.
        let steps = [
            (Cnc, false),
            (Cnc, false),
            (Discovery, false),
            (LateralMovement, true),
            (FieldbusScan, false),
            (CeSpoof, false),
        ];
        let mut state = ReadyForAttack;
        let mut used = std::collections::BTreeSet::new();
        for (stage, gw) in steps {
            state = iasm_next(state, stage, gw).unwrap();
            used.insert(stage);
        }
        assert_eq!(state, ExecuteCeCommands);
        assert_eq!(used.len(), 5);
    }

    #[test]
    fn score_config_rejects_secondary_at_or_above_optimal() {
        let mut cfg = ScoreConfig::default();
        cfg.secondary_weights
            .insert("discovery/ids_alerts".into(), 0.5);
        assert!(matches!(
            cfg.validate(),
            Err(ModelError::WeightOrderViolation { .. })
        ));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = EngineConfig {
            window_duration_s: 60.0,
            mode_vote_n: 5,
            scan_rate_threshold: 30.0,
            inventory: inventory(),
            score: ScoreConfig::default(),
            periodicity: PeriodicityConfig::default(),
            sig_map: SignatureMap::from([(1001, StageHint::Discovery)]),
        };
        let text = cfg.to_toml();
        let back = EngineConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn cidr_membership() {
        let c: Cidr = "172.16.0.0/12".parse().unwrap();
        assert!(c.contains("172.20.1.1".parse().unwrap()));
        assert!(!c.contains("172.32.0.1".parse().unwrap()));
        assert!("300.0.0.0/8".parse::<Cidr>().is_err());
        assert!("10.0.0.0/33".parse::<Cidr>().is_err());
    }
}
