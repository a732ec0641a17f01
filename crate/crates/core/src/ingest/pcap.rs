//! Minimal libpcap-format reader/writer covering what the detectors need:
//! Ethernet and raw-IP link types, IPv4, TCP/UDP headers, microsecond
//! timestamps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use thiserror::Error;

use crate::model::{PacketRecord, Protocol, TcpFlags};

pub const MAGIC_LE: u32 = 0xa1b2_c3d4;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW_IP: u32 = 101;

const WIRE_FIN: u8 = 0x01;
const WIRE_SYN: u8 = 0x02;
const WIRE_RST: u8 = 0x04;
const WIRE_PSH: u8 = 0x08;
const WIRE_ACK: u8 = 0x10;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad capture magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated record at byte offset {offset}")]
    TruncatedRecord { offset: u64 },
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("packet not representable in capture: {0}")]
    Unwritable(String),
}

/// Summary of a parsed capture file.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureMeta {
    pub path: PathBuf,
    pub link_type: u32,
    pub packet_count: usize,
    /// Frames counted but skipped because they carry no IPv4 payload.
    pub non_ip_count: usize,
    /// (first, last) record timestamps; None for an empty capture.
    pub time_span: Option<(f64, f64)>,
}

/// Round a timestamp to the microsecond resolution the capture format stores.
pub fn quantize_ts(ts: f64) -> f64 {
    let sec = ts.floor();
    let usec = ((ts - sec) * 1e6).round();
    if usec >= 1e6 {
        sec + 1.0
    } else {
        sec + usec / 1e6
    }
}

fn wire_flags(raw: u8) -> TcpFlags {
    let mut bits = 0u8;
    if raw & WIRE_SYN != 0 {
        bits |= TcpFlags::SYN;
    }
    if raw & WIRE_ACK != 0 {
        bits |= TcpFlags::ACK;
    }
    if raw & WIRE_PSH != 0 {
        bits |= TcpFlags::PSH;
    }
    if raw & WIRE_FIN != 0 {
        bits |= TcpFlags::FIN;
    }
    if raw & WIRE_RST != 0 {
        bits |= TcpFlags::RST;
    }
    TcpFlags::new(bits)
}

fn flags_to_wire(flags: TcpFlags) -> u8 {
    let mut raw = 0u8;
    if flags.syn() {
        raw |= WIRE_SYN;
    }
    if flags.ack() {
        raw |= WIRE_ACK;
    }
    if flags.psh() {
        raw |= WIRE_PSH;
    }
    if flags.fin() {
        raw |= WIRE_FIN;
    }
    if flags.rst() {
        raw |= WIRE_RST;
    }
    raw
}

/// Parse an IPv4 packet (starting at the IP header) into a record.
/// Returns None for non-IPv4 data.
fn parse_ipv4(ts: f64, data: &[u8], frame_len: u32) -> Option<PacketRecord> {
    if data.len() < 20 || data[0] >> 4 != 4 {
        return None;
    }
    let ihl = ((data[0] & 0x0f) as usize) * 4;
    if ihl < 20 || data.len() < ihl {
        return None;
    }
    let ip_total = BigEndian::read_u16(&data[2..4]) as usize;
    let proto = data[9];
    let src_ip = Ipv4Addr::new(data[12], data[13], data[14], data[15]);
    let dst_ip = Ipv4Addr::new(data[16], data[17], data[18], data[19]);
    let transport = &data[ihl..];

    let (protocol, src_port, dst_port, tcp_flags, header_len) = match proto {
        6 if transport.len() >= 20 => {
            let sport = BigEndian::read_u16(&transport[0..2]);
            let dport = BigEndian::read_u16(&transport[2..4]);
            let data_off = ((transport[12] >> 4) as usize) * 4;
            let flags = wire_flags(transport[13]);
            (Protocol::Tcp, Some(sport), Some(dport), flags, data_off)
        }
        17 if transport.len() >= 8 => {
            let sport = BigEndian::read_u16(&transport[0..2]);
            let dport = BigEndian::read_u16(&transport[2..4]);
            (
                Protocol::Udp,
                Some(sport),
                Some(dport),
                TcpFlags::empty(),
                8,
            )
        }
        _ => (Protocol::Other, None, None, TcpFlags::empty(), 0),
    };

    let payload_len = ip_total.saturating_sub(ihl + header_len) as u32;
    Some(PacketRecord {
        timestamp: ts,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        tcp_flags,
        payload_len,
        total_len: frame_len,
    })
}

/// Read a capture file into packet records. Non-IP frames are counted and
/// skipped; record ordering in the file is preserved.
pub fn read_capture(path: &Path) -> Result<(Vec<PacketRecord>, CaptureMeta), PcapError> {
    let file = File::open(path).map_err(|source| PcapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let mut buf = Vec::new();
    reader
        .read_to_end(&mut buf)
        .map_err(|source| PcapError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if buf.len() < 24 {
        return Err(PcapError::TruncatedRecord { offset: 0 });
    }

    let magic = LittleEndian::read_u32(&buf[0..4]);
    let big_endian = match magic {
        MAGIC_LE => false,
        m if m.swap_bytes() == MAGIC_LE => true,
        m => return Err(PcapError::BadMagic(m)),
    };
    let read_u32 = |b: &[u8]| -> u32 {
        if big_endian {
            BigEndian::read_u32(b)
        } else {
            LittleEndian::read_u32(b)
        }
    };
    let link_type = read_u32(&buf[20..24]);
    if link_type != LINKTYPE_ETHERNET && link_type != LINKTYPE_RAW_IP {
        return Err(PcapError::UnsupportedLinkType(link_type));
    }

    let mut packets = Vec::new();
    let mut non_ip = 0usize;
    let mut span: Option<(f64, f64)> = None;
    let mut offset = 24usize;
    while offset < buf.len() {
        if offset + 16 > buf.len() {
            return Err(PcapError::TruncatedRecord {
                offset: offset as u64,
            });
        }
        let ts_sec = read_u32(&buf[offset..offset + 4]) as f64;
        let ts_usec = read_u32(&buf[offset + 4..offset + 8]) as f64;
        let incl_len = read_u32(&buf[offset + 8..offset + 12]) as usize;
        let orig_len = read_u32(&buf[offset + 12..offset + 16]);
        let data_start = offset + 16;
        if incl_len > buf.len().saturating_sub(data_start) {
            return Err(PcapError::TruncatedRecord {
                offset: offset as u64,
            });
        }
        let ts = ts_sec + ts_usec / 1e6;
        let data = &buf[data_start..data_start + incl_len];
        let ip_data = match link_type {
            LINKTYPE_ETHERNET => {
                if data.len() >= 14 && BigEndian::read_u16(&data[12..14]) == 0x0800 {
                    Some(&data[14..])
                } else {
                    None
                }
            }
            _ => Some(data),
        };
        match ip_data.and_then(|d| parse_ipv4(ts, d, orig_len)) {
            Some(rec) => {
                span = Some(match span {
                    None => (ts, ts),
                    Some((first, last)) => (first, last.max(ts)),
                });
                packets.push(rec);
            }
            None => non_ip += 1,
        }
        offset = data_start + incl_len;
    }

    let meta = CaptureMeta {
        path: path.to_path_buf(),
        link_type,
        packet_count: packets.len(),
        non_ip_count: non_ip,
        time_span: span,
    };
    Ok((packets, meta))
}

fn encode_ipv4(rec: &PacketRecord) -> Result<Vec<u8>, PcapError> {
    let (proto_num, header_len) = match rec.protocol {
        Protocol::Tcp => (6u8, 20usize),
        Protocol::Udp => (17, 8),
        Protocol::Other => (253, 0),
    };
    let ip_total = 20 + header_len + rec.payload_len as usize;
    if ip_total > u16::MAX as usize {
        return Err(PcapError::Unwritable(format!(
            "packet too large: {ip_total} bytes"
        )));
    }
    let mut out = vec![0u8; ip_total];
    out[0] = 0x45;
    BigEndian::write_u16(&mut out[2..4], ip_total as u16);
    out[8] = 64; // TTL
    out[9] = proto_num;
    out[12..16].copy_from_slice(&rec.src_ip.octets());
    out[16..20].copy_from_slice(&rec.dst_ip.octets());
    match rec.protocol {
        Protocol::Tcp => {
            let t = &mut out[20..40];
            BigEndian::write_u16(&mut t[0..2], rec.src_port.unwrap_or(0));
            BigEndian::write_u16(&mut t[2..4], rec.dst_port.unwrap_or(0));
            t[12] = 5 << 4; // data offset: 5 words
            t[13] = flags_to_wire(rec.tcp_flags);
            BigEndian::write_u16(&mut t[14..16], 0xffff); // window
        }
        Protocol::Udp => {
            let t = &mut out[20..28];
            BigEndian::write_u16(&mut t[0..2], rec.src_port.unwrap_or(0));
            BigEndian::write_u16(&mut t[2..4], rec.dst_port.unwrap_or(0));
            BigEndian::write_u16(&mut t[4..6], (8 + rec.payload_len) as u16);
        }
        Protocol::Other => {}
    }
    Ok(out)
}

/// Write packet records to a raw-IP capture file. Records must carry
/// `total_len` consistent with their headers plus payload so a re-read
/// reproduces them field-for-field.
pub fn write_capture(path: &Path, packets: &[PacketRecord]) -> Result<(), PcapError> {
    let file = File::create(path).map_err(|source| PcapError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source: std::io::Error| PcapError::Io {
        path: path.to_path_buf(),
        source,
    };
    w.write_u32::<LittleEndian>(MAGIC_LE).map_err(io_err)?;
    w.write_u16::<LittleEndian>(2).map_err(io_err)?;
    w.write_u16::<LittleEndian>(4).map_err(io_err)?;
    w.write_u32::<LittleEndian>(0).map_err(io_err)?; // thiszone
    w.write_u32::<LittleEndian>(0).map_err(io_err)?; // sigfigs
    w.write_u32::<LittleEndian>(65535).map_err(io_err)?; // snaplen
    w.write_u32::<LittleEndian>(LINKTYPE_RAW_IP)
        .map_err(io_err)?;

    for rec in packets {
        let data = encode_ipv4(rec)?;
        if data.len() as u32 != rec.total_len {
            return Err(PcapError::Unwritable(format!(
                "total_len {} does not match encoded length {}",
                rec.total_len,
                data.len()
            )));
        }
        let ts = quantize_ts(rec.timestamp);
        let sec = ts.floor();
        let usec = ((ts - sec) * 1e6).round() as u32;
        w.write_u32::<LittleEndian>(sec as u32).map_err(io_err)?;
        w.write_u32::<LittleEndian>(usec).map_err(io_err)?;
        w.write_u32::<LittleEndian>(data.len() as u32)
            .map_err(io_err)?;
        w.write_u32::<LittleEndian>(rec.total_len).map_err(io_err)?;
        w.write_all(&data).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// On-wire length of a packet with the given transport protocol and payload,
/// as produced by `write_capture`.
pub fn frame_len(protocol: Protocol, payload_len: u32) -> u32 {
    let header = match protocol {
        Protocol::Tcp => 40,
        Protocol::Udp => 28,
        Protocol::Other => 20,
    };
    header + payload_len
}
