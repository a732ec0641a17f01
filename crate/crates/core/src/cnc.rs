//! Command-and-control stage detection: periodic communication between a
//! host and a public server found via discrete-time signal encoding and
//! autocorrelation.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::model::{
    HostInventory, PeriodicityConfig, Protocol, StageDetection, StageEvidence, StageKind, TcpFlags,
    TraceWindow,
};

#[derive(Debug, Error, PartialEq)]
pub enum CncError {
    #[error("no timestamps to encode")]
    EmptyTimestamps,
    #[error("signal has zero variance")]
    ZeroVariance,
    #[error("signal too short for autocorrelation: {0} samples")]
    TooShort(usize),
}

/// Candidate beacon packets per public server: TCP packets whose flag set is
/// exactly {PSH, ACK} or exactly {ACK}, plus all UDP packets, exchanged with
/// public addresses.
pub fn filter_cnc_candidates(
    window: &TraceWindow,
    host_ip: Ipv4Addr,
    inv: &HostInventory,
) -> BTreeMap<Ipv4Addr, Vec<f64>> {
    let mut out: BTreeMap<Ipv4Addr, Vec<f64>> = BTreeMap::new();
    for pkt in &window.packets {
        let peer = if pkt.src_ip == host_ip {
            pkt.dst_ip
        } else if pkt.dst_ip == host_ip {
            pkt.src_ip
        } else {
            continue;
        };
        if !inv.is_public(peer) {
            continue;
        }
        let candidate = match pkt.protocol {
            Protocol::Udp => true,
            Protocol::Tcp => {
                pkt.tcp_flags.is_exactly(TcpFlags::ACK)
                    || pkt.tcp_flags.is_exactly(TcpFlags::PSH | TcpFlags::ACK)
            }
            Protocol::Other => false,
        };
        if candidate {
            out.entry(peer).or_default().push(pkt.timestamp);
        }
    }
    for ts in out.values_mut() {
        ts.sort_by(|a, b| a.total_cmp(b));
    }
    out
}

/// Encode arrival timestamps as a binary sample vector: sample i is 1 iff at
/// least one timestamp falls in bin i. Timestamps must already be rebased to
/// [0, span).
pub fn encode_signal(
    timestamps: &[f64],
    cfg: &PeriodicityConfig,
    span: f64,
) -> Result<Vec<f64>, CncError> {
    if timestamps.is_empty() {
        return Err(CncError::EmptyTimestamps);
    }
    let len = (span * cfg.sampling_frequency).ceil() as usize;
    let mut signal = vec![0.0; len.max(1)];
    for &t in timestamps {
        let bin = ((t * cfg.sampling_frequency).floor() as usize).min(signal.len() - 1);
        signal[bin] = 1.0;
    }
    Ok(signal)
}

/// Mean-removed, biased-estimator autocorrelation normalized so ACF(0) = 1.
/// Computed via FFT of the zero-padded signal.
pub fn autocorrelate(signal: &[f64]) -> Result<Vec<f64>, CncError> {
    let n = signal.len();
    if n < 2 {
        return Err(CncError::TooShort(n));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = signal.iter().map(|x| x - mean).collect();
    if centered.iter().all(|x| x.abs() < 1e-12) {
        return Err(CncError::ZeroVariance);
    }

    let m = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex<f64>> = centered
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    fft.process(&mut buf);
    for v in buf.iter_mut() {
        *v *= v.conj();
    }
    ifft.process(&mut buf);

    // buf[k].re / m is the raw lag-k autocovariance sum.
    let r0 = buf[0].re / m as f64;
    let acf: Vec<f64> = (0..n).map(|k| (buf[k].re / m as f64) / r0).collect();
    Ok(acf)
}

/// Result of the periodicity test on an ACF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Periodicity {
    pub periodic: bool,
    pub period_bins: Option<usize>,
}

/// Local maxima of the ACF at lags >= 1. Plateau ties keep the smallest lag.
fn acf_peaks(acf: &[f64]) -> Vec<usize> {
    let n = acf.len();
    let mut peaks = Vec::new();
    for lag in 1..n {
        let prev = acf[lag - 1];
        let next = if lag + 1 < n {
            acf[lag + 1]
        } else {
            f64::NEG_INFINITY
        };
        if acf[lag] > prev && acf[lag] >= next {
            peaks.push(lag);
        }
    }
    peaks
}

/// Periodicity test: retain ACF peaks at or above `min_peak_fraction` of the
/// tallest non-zero-lag peak, then require at least three retained peaks
/// whose consecutive gap variance, normalized by the squared mean gap, is at
/// most `gap_variance_threshold`. Two peaks form a single gap whose variance
/// is trivially zero, which lets aperiodic chatter through.
pub fn detect_periodicity(acf: &[f64], cfg: &PeriodicityConfig) -> Periodicity {
    let peaks = acf_peaks(acf);
    let not_periodic = Periodicity {
        periodic: false,
        period_bins: None,
    };
    let Some(max_height) = peaks.iter().map(|&l| acf[l]).max_by(f64::total_cmp) else {
        return not_periodic;
    };
    if max_height <= 0.0 {
        return not_periodic;
    }
    let kept: Vec<usize> = peaks
        .into_iter()
        .filter(|&l| acf[l] >= cfg.min_peak_fraction * max_height)
        .collect();

    if kept.len() < 3 {
        return not_periodic;
    }
    let gaps: Vec<f64> = kept.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let var = gaps.iter().map(|g| (g - mean_gap).powi(2)).sum::<f64>() / gaps.len() as f64;
    let normalized = var / (mean_gap * mean_gap);
    if normalized <= cfg.gap_variance_threshold {
        Periodicity {
            periodic: true,
            period_bins: Some(mean_gap.round() as usize),
        }
    } else {
        not_periodic
    }
}

/// Analyze one candidate timestamp series rebased to a window. Returns the
/// periodicity verdict, or None when the series cannot be analyzed (too few
/// bins, constant signal).
fn analyze_series(
    timestamps: &[f64],
    window_start: f64,
    span: f64,
    cfg: &PeriodicityConfig,
) -> Option<Periodicity> {
    let rebased: Vec<f64> = timestamps
        .iter()
        .map(|t| (t - window_start).clamp(0.0, span))
        .collect();
    let signal = encode_signal(&rebased, cfg, span).ok()?;
    let acf = autocorrelate(&signal).ok()?;
    Some(detect_periodicity(&acf, cfg))
}

/// Check the C&C stage for one host: for each public server with enough
/// candidate packets in any window, run encode -> ACF -> periodicity test.
/// The first periodic hit (in server order, then window order) wins. Noise
/// from other public servers cannot flip the result because each server is
/// analyzed in isolation.
pub fn check_cnc_stage(
    host_ip: Ipv4Addr,
    windows: &[TraceWindow],
    inv: &HostInventory,
    cfg: &PeriodicityConfig,
) -> StageDetection {
    // Earliest candidate timestamp per server across all windows.
    let mut first_seen: BTreeMap<Ipv4Addr, f64> = BTreeMap::new();
    let mut per_window: Vec<(f64, f64, BTreeMap<Ipv4Addr, Vec<f64>>)> = Vec::new();
    for w in windows {
        let candidates = filter_cnc_candidates(w, host_ip, inv);
        for (&server, ts) in &candidates {
            if let Some(&first) = ts.first() {
                first_seen
                    .entry(server)
                    .and_modify(|f| *f = f.min(first))
                    .or_insert(first);
            }
        }
        per_window.push((w.start_time, w.duration_s, candidates));
    }

    for (start, span, candidates) in &per_window {
        for (&server, ts) in candidates {
            if ts.len() < cfg.min_packets {
                continue;
            }
            if let Some(p) = analyze_series(ts, *start, *span, cfg) {
                if p.periodic {
                    return StageDetection {
                        kind: StageKind::Cnc,
                        detected: true,
                        time_det: first_seen[&server],
                        src_ip: host_ip,
                        dst_ips: vec![server],
                        evidence: StageEvidence::Cnc {
                            cnc_server_ip: server,
                        },
                        score: 1.0,
                    };
                }
            }
        }
    }
    StageDetection::not_detected(StageKind::Cnc, host_ip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CeEndpoint, IaProtocol, PacketRecord};

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
            private_ranges: vec!["10.0.0.0/8".parse().unwrap()],
        }
    }

    fn udp_pkt(ts: f64, src: &str, dst: &str) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_ip: src.parse().unwrap(),
            dst_ip: dst.parse().unwrap(),
            src_port: Some(5353),
            dst_port: Some(53),
            protocol: Protocol::Udp,
            tcp_flags: TcpFlags::empty(),
            payload_len: 32,
            total_len: 60,
        }
    }

    fn tcp_pkt(ts: f64, src: &str, dst: &str, flags: u8) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_ip: src.parse().unwrap(),
            dst_ip: dst.parse().unwrap(),
            src_port: Some(40000),
            dst_port: Some(443),
            protocol: Protocol::Tcp,
            tcp_flags: TcpFlags::new(flags),
            payload_len: 0,
            total_len: 40,
        }
    }

    fn window(host: &str, packets: Vec<PacketRecord>) -> TraceWindow {
        TraceWindow {
            host_ip: host.parse().unwrap(),
            start_time: 0.0,
            duration_s: 60.0,
            packets,
        }
    }

    /// Brute-force mean-removed biased ACF, the oracle the FFT path is
    /// checked against.
    pub fn acf_oracle(signal: &[f64]) -> Vec<f64> {
        let n = signal.len();
        let mean = signal.iter().sum::<f64>() / n as f64;
        let x: Vec<f64> = signal.iter().map(|v| v - mean).collect();
        let r0: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        (0..n)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..n - k {
                    s += x[i] * x[i + k];
                }
                (s / n as f64) / r0
            })
            .collect()
    }

    #[test]
    fn intra_subnet_traffic_yields_empty_map() {
        let w = window("10.0.1.10", vec![udp_pkt(1.0, "10.0.1.10", "10.0.2.9")]);
        let map = filter_cnc_candidates(&w, "10.0.1.10".parse().unwrap(), &inventory());
        assert!(map.is_empty());
    }

    #[test]
    fn udp_beacon_candidates_collected() {
        let packets: Vec<_> = (0..12)
            .map(|i| udp_pkt(i as f64 * 5.0, "10.0.1.10", "8.8.4.4"))
            .collect();
        let w = window("10.0.1.10", packets);
        let map = filter_cnc_candidates(&w, "10.0.1.10".parse().unwrap(), &inventory());
        assert_eq!(map.len(), 1);
        assert_eq!(map[&"8.8.4.4".parse::<Ipv4Addr>().unwrap()].len(), 12);
    }

    #[test]
    fn syn_packets_to_public_excluded() {
        let w = window(
            "10.0.1.10",
            vec![tcp_pkt(1.0, "10.0.1.10", "8.8.4.4", TcpFlags::SYN)],
        );
        let map = filter_cnc_candidates(&w, "10.0.1.10".parse().unwrap(), &inventory());
        assert!(map.is_empty());
    }

    #[test]
    fn vpn_server_excluded() {
        let w = window("10.0.1.10", vec![udp_pkt(1.0, "10.0.1.10", "203.0.113.5")]);
        let map = filter_cnc_candidates(&w, "10.0.1.10".parse().unwrap(), &inventory());
        assert!(map.is_empty());
    }

    #[test]
    fn encode_bins_by_sampling_frequency() {
        let cfg = PeriodicityConfig {
            sampling_frequency: 0.1,
            ..PeriodicityConfig::default()
        };
        let signal = encode_signal(&[0.0, 10.0, 20.0], &cfg, 60.0).unwrap();
        assert_eq!(signal, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_is_binary_not_counting() {
        let cfg = PeriodicityConfig {
            sampling_frequency: 0.1,
            ..PeriodicityConfig::default()
        };
        let signal = encode_signal(&[0.0, 1.0, 2.0], &cfg, 60.0).unwrap();
        assert_eq!(signal[0], 1.0);
    }

    #[test]
    fn encode_empty_rejected() {
        let cfg = PeriodicityConfig::default();
        assert_eq!(
            encode_signal(&[], &cfg, 60.0).unwrap_err(),
            CncError::EmptyTimestamps
        );
    }

    #[test]
    fn acf_matches_oracle_on_alternating_signal() {
        let signal: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let acf = autocorrelate(&signal).unwrap();
        let oracle = acf_oracle(&signal);
        for (a, b) in acf.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(acf[2] > acf[1]);
    }

    #[test]
    fn constant_signal_has_zero_variance() {
        assert_eq!(
            autocorrelate(&[1.0; 8]).unwrap_err(),
            CncError::ZeroVariance
        );
    }

    #[test]
    fn impulse_train_peaks_at_period_multiples() {
        let mut signal = vec![0.0; 60];
        for i in (0..60).step_by(5) {
            signal[i] = 1.0;
        }
        let acf = autocorrelate(&signal).unwrap();
        let oracle = acf_oracle(&signal);
        for (a, b) in acf.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let peaks = acf_peaks(&acf);
        assert!(peaks.contains(&5) && peaks.contains(&10) && peaks.contains(&15));
    }

    #[test]
    fn perfect_period_six_detected() {
        let mut signal = vec![0.0; 60];
        for i in (0..60).step_by(6) {
            signal[i] = 1.0;
        }
        let acf = autocorrelate(&signal).unwrap();
        let p = detect_periodicity(&acf, &PeriodicityConfig::default());
        assert!(p.periodic);
        assert_eq!(p.period_bins, Some(6));
    }

    #[test]
    fn single_peak_not_periodic() {
        // Two impulses produce a single non-zero-lag ACF peak.
        let mut signal = vec![0.0; 20];
        signal[2] = 1.0;
        signal[9] = 1.0;
        let acf = autocorrelate(&signal).unwrap();
        let p = detect_periodicity(&acf, &PeriodicityConfig::default());
        assert!(!p.periodic);
    }

    #[test]
    fn seeded_random_arrivals_not_periodic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let mut ts: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..60.0)).collect();
        ts.sort_by(|a, b| a.total_cmp(b));
        let cfg = PeriodicityConfig {
            sampling_frequency: 1.0,
            ..PeriodicityConfig::default()
        };
        let signal = encode_signal(&ts, &cfg, 60.0).unwrap();
        let acf = autocorrelate(&signal).unwrap();
        let p = detect_periodicity(&acf, &cfg);
        assert!(!p.periodic);
    }

    #[test]
    fn beacon_detected_amid_chatter_to_other_server() {
        let cfg = PeriodicityConfig {
            sampling_frequency: 1.0,
            ..PeriodicityConfig::default()
        };
        let mut packets: Vec<_> = (0..12)
            .map(|i| udp_pkt(0.5 + i as f64 * 5.0, "10.0.1.10", "198.51.100.7"))
            .collect();
        // HTTPS-like chatter to a different public server.
        for &t in &[0.3, 7.1, 13.9, 22.4, 31.0, 44.8, 55.5] {
            packets.push(tcp_pkt(t, "10.0.1.10", "93.184.216.34", TcpFlags::ACK));
        }
        packets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let w = window("10.0.1.10", packets);
        let det = check_cnc_stage(
            "10.0.1.10".parse().unwrap(),
            std::slice::from_ref(&w),
            &inventory(),
            &cfg,
        );
        assert!(det.detected);
        assert_eq!(
            det.evidence,
            StageEvidence::Cnc {
                cnc_server_ip: "198.51.100.7".parse().unwrap()
            }
        );
        assert_eq!(det.time_det, 0.5);
    }

    #[test]
    fn too_few_packets_not_detected() {
        let cfg = PeriodicityConfig {
            sampling_frequency: 1.0,
            ..PeriodicityConfig::default()
        };
        let packets: Vec<_> = (0..3)
            .map(|i| udp_pkt(i as f64 * 5.0, "10.0.1.10", "198.51.100.7"))
            .collect();
        let w = window("10.0.1.10", packets);
        let det = check_cnc_stage(
            "10.0.1.10".parse().unwrap(),
            std::slice::from_ref(&w),
            &inventory(),
            &cfg,
        );
        assert!(!det.detected);
        assert_eq!(det.score, 0.0);
    }
}
