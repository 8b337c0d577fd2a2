//! Classic libpcap reader and a small frame writer.
//!
//! Only Ethernet captures are accepted. Both byte orders and both timestamp
//! precisions are understood; timestamps are normalized to microseconds.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use serde::{Deserialize, Serialize};

use crate::attributes::{IpHeader, PacketHeaders, TcpFlags, TcpHeader, TransportHeader, UdpHeader};
use crate::error::{Error, Result};

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const PCAPNG_MAGIC: u32 = 0x0A0D_0D0A;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

/// Per-file counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub frames: u64,
    pub packets: u64,
    pub non_ip: u64,
    pub non_tcp_udp: u64,
    pub fragments: u64,
    pub malformed: u64,
}

impl std::ops::AddAssign for ParseStats {
    fn add_assign(&mut self, o: Self) {
        self.frames += o.frames;
        self.packets += o.packets;
        self.non_ip += o.non_ip;
        self.non_tcp_udp += o.non_tcp_udp;
        self.fragments += o.fragments;
        self.malformed += o.malformed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FileHeader {
    big_endian: bool,
    nanos: bool,
}

impl FileHeader {
    fn read(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(Error::Capture(format!(
                "file is {} bytes, shorter than the 24-byte pcap header",
                bytes.len()
            )));
        }
        let le = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let (big_endian, nanos) = match (le, be) {
            (MAGIC_MICROS, _) => (false, false),
            (MAGIC_NANOS, _) => (false, true),
            (_, MAGIC_MICROS) => (true, false),
            (_, MAGIC_NANOS) => (true, true),
            (PCAPNG_MAGIC, _) => {
                return Err(Error::Capture(
                    "pcapng captures are not supported; convert to classic pcap".into(),
                ))
            }
            _ => return Err(Error::Capture(format!("unknown magic number {le:#010x}"))),
        };
        let header = FileHeader { big_endian, nanos };
        let link = header.u32(&bytes[20..24]);
        if link != LINKTYPE_ETHERNET {
            return Err(Error::Capture(format!(
                "unsupported link type {link} (only Ethernet is accepted)"
            )));
        }
        Ok(header)
    }

    fn u32(&self, b: &[u8]) -> u32 {
        let arr: [u8; 4] = b.try_into().unwrap();
        if self.big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

enum FrameOutcome {
    Packet(PacketHeaders),
    NonIp,
    NonTcpUdp,
    Fragment,
    Malformed,
}

/// Parse every frame of a classic pcap byte stream.
///
/// A bad file header is fatal. Frames that cannot be decoded are skipped and
/// counted in [`ParseStats::malformed`]; a record cut short at end of file is
/// counted the same way.
pub fn parse_frames(bytes: &[u8]) -> Result<(Vec<PacketHeaders>, ParseStats)> {
    let header = FileHeader::read(bytes)?;
    let mut stats = ParseStats::default();
    let mut out = Vec::new();
    let mut pos = GLOBAL_HEADER_LEN;

    while pos < bytes.len() {
        if bytes.len() - pos < RECORD_HEADER_LEN {
            stats.malformed += 1;
            break;
        }
        let rec = &bytes[pos..pos + RECORD_HEADER_LEN];
        let ts_sec = header.u32(&rec[0..4]) as u64;
        let ts_frac = header.u32(&rec[4..8]) as u64;
        let incl_len = header.u32(&rec[8..12]) as usize;
        let orig_len = header.u32(&rec[12..16]);
        pos += RECORD_HEADER_LEN;
        stats.frames += 1;
        if bytes.len() - pos < incl_len {
            stats.malformed += 1;
            break;
        }
        let frame = &bytes[pos..pos + incl_len];
        pos += incl_len;

        let timestamp_us = ts_sec * 1_000_000 + if header.nanos { ts_frac / 1000 } else { ts_frac };
        match decode_ethernet(frame, timestamp_us, orig_len) {
            FrameOutcome::Packet(p) => {
                stats.packets += 1;
                out.push(p);
            }
            FrameOutcome::NonIp => stats.non_ip += 1,
            FrameOutcome::NonTcpUdp => stats.non_tcp_udp += 1,
            FrameOutcome::Fragment => stats.fragments += 1,
            FrameOutcome::Malformed => stats.malformed += 1,
        }
    }
    Ok((out, stats))
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn decode_ethernet(frame: &[u8], timestamp_us: u64, orig_len: u32) -> FrameOutcome {
    if frame.len() < 14 {
        return FrameOutcome::Malformed;
    }
    let mut ethertype = be16(frame, 12);
    let mut off = 14;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if frame.len() < off + 4 {
            return FrameOutcome::Malformed;
        }
        ethertype = be16(frame, off + 2);
        off += 4;
    }
    let ip = &frame[off..];
    let parsed = match ethertype {
        ETHERTYPE_IPV4 => decode_ipv4(ip),
        ETHERTYPE_IPV6 => decode_ipv6(ip),
        _ => return FrameOutcome::NonIp,
    };
    let (ip_header, l4) = match parsed {
        Ok(v) => v,
        Err(outcome) => return outcome,
    };
    // Transport payload length comes from the IP length fields, so a short
    // snaplen does not change it.
    let l4_len = (ip_header.total_length as usize).saturating_sub(ip_header.header_len as usize);
    let l4_len = if ip_header.version == 6 {
        ip_header.total_length as usize
    } else {
        l4_len
    };
    let (transport, payload_len) = match ip_header.protocol {
        PROTO_TCP => match decode_tcp(l4) {
            Some(t) => {
                let payload = l4_len.saturating_sub(t.header_len as usize) as u32;
                (TransportHeader::Tcp(t), payload)
            }
            None => return FrameOutcome::Malformed,
        },
        PROTO_UDP => {
            if l4.len() < 8 {
                return FrameOutcome::Malformed;
            }
            let u = UdpHeader {
                src_port: be16(l4, 0),
                dst_port: be16(l4, 2),
                length: be16(l4, 4),
                checksum: be16(l4, 6),
            };
            let payload = (u.length as u32).saturating_sub(8);
            (TransportHeader::Udp(u), payload)
        }
        _ => return FrameOutcome::NonTcpUdp,
    };
    FrameOutcome::Packet(PacketHeaders {
        timestamp_us,
        frame_len: orig_len,
        ip: ip_header,
        transport,
        payload_len,
    })
}

fn decode_ipv4(b: &[u8]) -> std::result::Result<(IpHeader, &[u8]), FrameOutcome> {
    if b.len() < 20 || b[0] >> 4 != 4 {
        return Err(FrameOutcome::Malformed);
    }
    let ihl = ((b[0] & 0x0f) as usize) * 4;
    if ihl < 20 || b.len() < ihl {
        return Err(FrameOutcome::Malformed);
    }
    let flags_frag = be16(b, 6);
    let fragment_offset = flags_frag & 0x1fff;
    if fragment_offset != 0 {
        return Err(FrameOutcome::Fragment);
    }
    let protocol = b[9];
    let header = IpHeader {
        version: 4,
        header_len: ihl as u16,
        ds_field: b[1],
        total_length: be16(b, 2),
        identification: be16(b, 4) as u32,
        dont_fragment: flags_frag & 0x4000 != 0,
        more_fragments: flags_frag & 0x2000 != 0,
        fragment_offset,
        ttl: b[8],
        protocol,
        src: IpAddr::V4(Ipv4Addr::new(b[12], b[13], b[14], b[15])),
        dst: IpAddr::V4(Ipv4Addr::new(b[16], b[17], b[18], b[19])),
    };
    if protocol != PROTO_TCP && protocol != PROTO_UDP {
        return Err(FrameOutcome::NonTcpUdp);
    }
    Ok((header, &b[ihl..]))
}

/// IPv6 without extension headers. `total_length` carries the payload
/// length field; a fragment header counts as a fragment.
fn decode_ipv6(b: &[u8]) -> std::result::Result<(IpHeader, &[u8]), FrameOutcome> {
    if b.len() < 40 || b[0] >> 4 != 6 {
        return Err(FrameOutcome::Malformed);
    }
    let next = b[6];
    if next == 44 {
        return Err(FrameOutcome::Fragment);
    }
    if next != PROTO_TCP && next != PROTO_UDP {
        return Err(FrameOutcome::NonTcpUdp);
    }
    let addr = |at: usize| {
        let arr: [u8; 16] = b[at..at + 16].try_into().unwrap();
        IpAddr::V6(Ipv6Addr::from(arr))
    };
    let header = IpHeader {
        version: 6,
        header_len: 40,
        ds_field: ((be16(b, 0) >> 4) & 0xff) as u8,
        total_length: be16(b, 4),
        identification: 0,
        dont_fragment: false,
        more_fragments: false,
        fragment_offset: 0,
        ttl: b[7],
        protocol: next,
        src: addr(8),
        dst: addr(24),
    };
    Ok((header, &b[40..]))
}

fn decode_tcp(b: &[u8]) -> Option<TcpHeader> {
    if b.len() < 20 {
        return None;
    }
    let header_len = ((b[12] >> 4) as usize) * 4;
    if header_len < 20 || b.len() < header_len {
        return None;
    }
    let mut t = TcpHeader {
        src_port: be16(b, 0),
        dst_port: be16(b, 2),
        seq: be32(b, 4),
        ack: be32(b, 8),
        header_len: header_len as u16,
        flags: TcpFlags(b[13]),
        window: be16(b, 14),
        urgent_pointer: be16(b, 18),
        options_len: (header_len - 20) as u16,
        ..Default::default()
    };
    let opts = &b[20..header_len];
    let mut i = 0;
    while i < opts.len() {
        match opts[i] {
            0 => break,
            1 => i += 1,
            kind => {
                let Some(&len) = opts.get(i + 1) else { break };
                let len = len as usize;
                if len < 2 || i + len > opts.len() {
                    break;
                }
                let body = &opts[i + 2..i + len];
                match (kind, body.len()) {
                    (2, 2) => t.mss = Some(be16(body, 0)),
                    (3, 1) => t.window_scale = Some(body[0]),
                    (4, _) => t.sack_permitted = true,
                    (8, _) => t.timestamp = true,
                    _ => {}
                }
                i += len;
            }
        }
    }
    Some(t)
}

/// Transport part of a [`FrameSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum TransportSpec {
    Tcp {
        src_port: u16,
        dst_port: u16,
        seq: u32,
        ack: u32,
        flags: u8,
        window: u16,
        /// Raw option bytes, zero-padded to a multiple of four.
        options: Vec<u8>,
    },
    Udp {
        src_port: u16,
        dst_port: u16,
        checksum: u16,
    },
}

/// Everything needed to synthesize one Ethernet frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSpec {
    pub timestamp_us: u64,
    pub src: IpAddr,
    pub dst: IpAddr,
    pub ttl: u8,
    pub ds_field: u8,
    pub identification: u16,
    pub dont_fragment: bool,
    pub transport: TransportSpec,
    pub payload_len: usize,
}

impl FrameSpec {
    /// Ethernet frame bytes. Payload is zero-filled.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut l4 = Vec::new();
        let proto = match &self.transport {
            TransportSpec::Tcp {
                src_port,
                dst_port,
                seq,
                ack,
                flags,
                window,
                options,
            } => {
                let mut opts = options.clone();
                while opts.len() % 4 != 0 {
                    opts.push(0);
                }
                let hlen = 20 + opts.len();
                l4.extend_from_slice(&src_port.to_be_bytes());
                l4.extend_from_slice(&dst_port.to_be_bytes());
                l4.extend_from_slice(&seq.to_be_bytes());
                l4.extend_from_slice(&ack.to_be_bytes());
                l4.push(((hlen / 4) as u8) << 4);
                l4.push(*flags);
                l4.extend_from_slice(&window.to_be_bytes());
                l4.extend_from_slice(&[0, 0, 0, 0]);
                l4.extend_from_slice(&opts);
                PROTO_TCP
            }
            TransportSpec::Udp {
                src_port,
                dst_port,
                checksum,
            } => {
                l4.extend_from_slice(&src_port.to_be_bytes());
                l4.extend_from_slice(&dst_port.to_be_bytes());
                l4.extend_from_slice(&((8 + self.payload_len) as u16).to_be_bytes());
                l4.extend_from_slice(&checksum.to_be_bytes());
                PROTO_UDP
            }
        };
        l4.resize(l4.len() + self.payload_len, 0);

        let mut frame = vec![0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01];
        match (self.src, self.dst) {
            (IpAddr::V4(s), IpAddr::V4(d)) => {
                frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
                let mut ip = [0u8; 20];
                ip[0] = 0x45;
                ip[1] = self.ds_field;
                ip[2..4].copy_from_slice(&((20 + l4.len()) as u16).to_be_bytes());
                ip[4..6].copy_from_slice(&self.identification.to_be_bytes());
                if self.dont_fragment {
                    ip[6] = 0x40;
                }
                ip[8] = self.ttl;
                ip[9] = proto;
                ip[12..16].copy_from_slice(&s.octets());
                ip[16..20].copy_from_slice(&d.octets());
                let sum = ipv4_checksum(&ip);
                ip[10..12].copy_from_slice(&sum.to_be_bytes());
                frame.extend_from_slice(&ip);
            }
            (IpAddr::V6(s), IpAddr::V6(d)) => {
                frame.extend_from_slice(&ETHERTYPE_IPV6.to_be_bytes());
                let mut ip = [0u8; 40];
                let vtc = (6u32 << 28) | ((self.ds_field as u32) << 20);
                ip[0..4].copy_from_slice(&vtc.to_be_bytes());
                ip[4..6].copy_from_slice(&(l4.len() as u16).to_be_bytes());
                ip[6] = proto;
                ip[7] = self.ttl;
                ip[8..24].copy_from_slice(&s.octets());
                ip[24..40].copy_from_slice(&d.octets());
                frame.extend_from_slice(&ip);
            }
            _ => panic!("source and destination address families differ"),
        }
        frame.extend_from_slice(&l4);
        frame
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes frames into a classic pcap stream.
#[derive(Debug, Clone)]
pub struct PcapWriter {
    big_endian: bool,
    nanos: bool,
    buf: Vec<u8>,
}

impl PcapWriter {
    pub fn new(big_endian: bool, nanos: bool) -> Self {
        let mut w = PcapWriter {
            big_endian,
            nanos,
            buf: Vec::new(),
        };
        let magic = if nanos { MAGIC_NANOS } else { MAGIC_MICROS };
        w.put32(magic);
        w.put16(2);
        w.put16(4);
        w.put32(0);
        w.put32(0);
        w.put32(65535);
        w.put32(LINKTYPE_ETHERNET);
        w
    }

    fn put16(&mut self, v: u16) {
        let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }

    fn put32(&mut self, v: u32) {
        let b = if self.big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        self.buf.extend_from_slice(&b);
    }

    /// Append raw frame bytes captured at `timestamp_us`.
    pub fn push_raw(&mut self, timestamp_us: u64, frame: &[u8]) {
        self.push_truncated(timestamp_us, frame, frame.len());
    }

    /// Append a frame of which only `captured` bytes are stored.
    pub fn push_truncated(&mut self, timestamp_us: u64, frame: &[u8], captured: usize) {
        let captured = captured.min(frame.len());
        self.put32((timestamp_us / 1_000_000) as u32);
        let frac = timestamp_us % 1_000_000;
        self.put32(if self.nanos { frac * 1000 } else { frac } as u32);
        self.put32(captured as u32);
        self.put32(frame.len() as u32);
        self.buf.extend_from_slice(&frame[..captured]);
    }

    pub fn push(&mut self, frame: &FrameSpec) {
        self.push_raw(frame.timestamp_us, &frame.to_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}
