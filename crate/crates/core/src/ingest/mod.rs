//! Parsing of packet captures, authentication logs and IDS alert files,
//! plus splitting of packet streams into fixed-duration trace windows.

pub mod pcap;

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{
    AuthLoginEvent, AuthMethod, IdsAlert, PacketRecord, SignatureMap, StageHint, TraceWindow,
};

pub use pcap::{read_capture, write_capture, CaptureMeta, PcapError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("window duration must be positive, got {0}")]
    NonpositiveDuration(f64),
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A line that failed to parse, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedLine {
    pub line_number: usize,
    pub line: String,
}

/// Split a packet stream into fixed-width windows anchored at the first
/// packet timestamp. Empty windows inside the span are emitted.
pub fn split_windows(
    packets: &[PacketRecord],
    host_ip: Ipv4Addr,
    duration_s: f64,
) -> Result<Vec<TraceWindow>, IngestError> {
    if duration_s <= 0.0 {
        return Err(IngestError::NonpositiveDuration(duration_s));
    }
    if packets.is_empty() {
        return Ok(Vec::new());
    }
    let mut sorted: Vec<PacketRecord> = packets.to_vec();
    sorted.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let first = sorted[0].timestamp;
    let last = sorted[sorted.len() - 1].timestamp;
    let n_windows = ((last - first) / duration_s).floor() as usize + 1;

    let mut windows: Vec<TraceWindow> = (0..n_windows)
        .map(|i| TraceWindow {
            host_ip,
            start_time: first + i as f64 * duration_s,
            duration_s,
            packets: Vec::new(),
        })
        .collect();
    for pkt in sorted {
        let idx = (((pkt.timestamp - first) / duration_s).floor() as usize).min(n_windows - 1);
        windows[idx].packets.push(pkt);
    }
    Ok(windows)
}

fn read_lines(path: &Path) -> Result<Vec<String>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Parse the canonical auth-log format:
/// `epoch_seconds,src_ip,dst_ip,username,ok|fail,ssh|rdp|other`.
/// Malformed lines never abort the parse; they are collected with their
/// line numbers.
pub fn parse_auth_log(
    path: &Path,
) -> Result<(Vec<AuthLoginEvent>, Vec<RejectedLine>), IngestError> {
    let mut events = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_auth_line(&line) {
            Some(ev) => events.push(ev),
            None => rejects.push(RejectedLine {
                line_number: i + 1,
                line,
            }),
        }
    }
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok((events, rejects))
}

fn parse_auth_line(line: &str) -> Option<AuthLoginEvent> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return None;
    }
    let timestamp: f64 = fields[0].parse().ok().filter(|t: &f64| *t >= 0.0)?;
    let src_ip: Ipv4Addr = fields[1].parse().ok()?;
    let dst_ip: Ipv4Addr = fields[2].parse().ok()?;
    let username = fields[3].to_string();
    let success = match fields[4] {
        "ok" => true,
        "fail" => false,
        _ => return None,
    };
    let method = match fields[5] {
        "ssh" => AuthMethod::Ssh,
        "rdp" => AuthMethod::Rdp,
        "other" => AuthMethod::Other,
        _ => return None,
    };
    Some(AuthLoginEvent {
        timestamp,
        src_ip,
        dst_ip,
        username,
        success,
        method,
    })
}

/// Serialize auth events in the canonical format read by `parse_auth_log`.
pub fn format_auth_log(events: &[AuthLoginEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ev.timestamp,
            ev.src_ip,
            ev.dst_ip,
            ev.username,
            if ev.success { "ok" } else { "fail" },
            match ev.method {
                AuthMethod::Ssh => "ssh",
                AuthMethod::Rdp => "rdp",
                AuthMethod::Other => "other",
            }
        ));
    }
    out
}

/// Parse the canonical IDS alert format: `epoch_seconds,sig_id,src_ip,dst_ip`.
/// Stage hints come from the signature map; unmapped ids get `StageHint::None`.
pub fn parse_ids_alerts(
    path: &Path,
    sig_map: &SignatureMap,
) -> Result<(Vec<IdsAlert>, Vec<RejectedLine>), IngestError> {
    let mut alerts = Vec::new();
    let mut rejects = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_alert_line(&line, sig_map) {
            Some(alert) => alerts.push(alert),
            None => rejects.push(RejectedLine {
                line_number: i + 1,
                line,
            }),
        }
    }
    alerts.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok((alerts, rejects))
}

fn parse_alert_line(line: &str, sig_map: &SignatureMap) -> Option<IdsAlert> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 4 {
        return None;
    }
    let timestamp: f64 = fields[0].parse().ok().filter(|t: &f64| *t >= 0.0)?;
    let signature_id: u32 = fields[1].parse().ok()?;
    let src_ip: Ipv4Addr = fields[2].parse().ok()?;
    let dst_ip: Ipv4Addr = fields[3].parse().ok()?;
    let stage_hint = sig_map
        .get(&signature_id)
        .copied()
        .unwrap_or(StageHint::None);
    Some(IdsAlert {
        timestamp,
        signature_id,
        src_ip,
        dst_ip,
        stage_hint,
    })
}

/// Serialize alerts in the canonical format read by `parse_ids_alerts`.
pub fn format_ids_alerts(alerts: &[IdsAlert]) -> String {
    let mut out = String::new();
    for a in alerts {
        out.push_str(&format!(
            "{},{},{},{}\n",
            a.timestamp, a.signature_id, a.src_ip, a.dst_ip
        ));
    }
    out
}
