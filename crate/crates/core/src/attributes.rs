//! The 39-field per-packet attribute vector.
//!
//! Field order is fixed and part of the on-disk formats. Fields that do not
//! apply to a packet's protocol are 0.
//!
//! | idx | name | idx | name |
//! |----:|------|----:|------|
//! | 0 | packet_length | 20 | tcp_flag_ece |
//! | 1 | inter_arrival_time_us | 21 | tcp_flag_cwr |
//! | 2 | direction | 22 | tcp_window_size |
//! | 3 | ip_version | 23 | tcp_urgent_pointer |
//! | 4 | ip_header_len | 24 | tcp_payload_len |
//! | 5 | ip_ds_field | 25 | tcp_options_len |
//! | 6 | ip_total_length | 26 | tcp_mss_option |
//! | 7 | ip_identification | 27 | tcp_window_scale_option |
//! | 8 | ip_flag_df | 28 | tcp_sack_permitted |
//! | 9 | ip_flag_mf | 29 | tcp_timestamp_present |
//! | 10 | ip_frag_offset | 30 | tcp_relative_seq |
//! | 11 | ip_ttl | 31 | tcp_relative_ack |
//! | 12 | ip_protocol | 32 | udp_length |
//! | 13 | tcp_header_len | 33 | udp_checksum_present |
//! | 14 | tcp_flag_fin | 34 | source_port |
//! | 15 | tcp_flag_syn | 35 | dest_port |
//! | 16 | tcp_flag_rst | 36 | is_tcp |
//! | 17 | tcp_flag_psh | 37 | cumulative_bytes_in_direction |
//! | 18 | tcp_flag_ack | 38 | packet_index_in_flow |
//! | 19 | tcp_flag_urg | | |
//!
//! `packet_length` is the original on-wire frame length. `direction` is 0 for
//! packets sent by the flow initiator and 1 otherwise. Relative sequence and
//! acknowledgment numbers are offsets (mod 2^32) from the first value observed
//! in the same direction of the flow. Header-length fields are in bytes.

use std::fmt;
use std::net::IpAddr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const ATTRIBUTE_COUNT: usize = 39;

pub const ATTRIBUTE_NAMES: [&str; ATTRIBUTE_COUNT] = [
    "packet_length",
    "inter_arrival_time_us",
    "direction",
    "ip_version",
    "ip_header_len",
    "ip_ds_field",
    "ip_total_length",
    "ip_identification",
    "ip_flag_df",
    "ip_flag_mf",
    "ip_frag_offset",
    "ip_ttl",
    "ip_protocol",
    "tcp_header_len",
    "tcp_flag_fin",
    "tcp_flag_syn",
    "tcp_flag_rst",
    "tcp_flag_psh",
    "tcp_flag_ack",
    "tcp_flag_urg",
    "tcp_flag_ece",
    "tcp_flag_cwr",
    "tcp_window_size",
    "tcp_urgent_pointer",
    "tcp_payload_len",
    "tcp_options_len",
    "tcp_mss_option",
    "tcp_window_scale_option",
    "tcp_sack_permitted",
    "tcp_timestamp_present",
    "tcp_relative_seq",
    "tcp_relative_ack",
    "udp_length",
    "udp_checksum_present",
    "source_port",
    "dest_port",
    "is_tcp",
    "cumulative_bytes_in_direction",
    "packet_index_in_flow",
];

/// Attribute positions.
pub mod idx {
    pub const PACKET_LENGTH: usize = 0;
    pub const INTER_ARRIVAL_TIME: usize = 1;
    pub const DIRECTION: usize = 2;
    pub const IP_VERSION: usize = 3;
    pub const IP_HEADER_LEN: usize = 4;
    pub const IP_DS_FIELD: usize = 5;
    pub const IP_TOTAL_LENGTH: usize = 6;
    pub const IP_IDENTIFICATION: usize = 7;
    pub const IP_FLAG_DF: usize = 8;
    pub const IP_FLAG_MF: usize = 9;
    pub const IP_FRAG_OFFSET: usize = 10;
    pub const IP_TTL: usize = 11;
    pub const IP_PROTOCOL: usize = 12;
    pub const TCP_HEADER_LEN: usize = 13;
    /// First of the eight flag bits (FIN, SYN, RST, PSH, ACK, URG, ECE, CWR).
    pub const TCP_FLAG_FIN: usize = 14;
    pub const TCP_WINDOW_SIZE: usize = 22;
    pub const TCP_URGENT_POINTER: usize = 23;
    pub const TCP_PAYLOAD_LEN: usize = 24;
    pub const TCP_OPTIONS_LEN: usize = 25;
    pub const TCP_MSS: usize = 26;
    pub const TCP_WINDOW_SCALE: usize = 27;
    pub const TCP_SACK_PERMITTED: usize = 28;
    pub const TCP_TIMESTAMP_PRESENT: usize = 29;
    pub const TCP_RELATIVE_SEQ: usize = 30;
    pub const TCP_RELATIVE_ACK: usize = 31;
    pub const UDP_LENGTH: usize = 32;
    pub const UDP_CHECKSUM_PRESENT: usize = 33;
    pub const SOURCE_PORT: usize = 34;
    pub const DEST_PORT: usize = 35;
    pub const IS_TCP: usize = 36;
    pub const CUMULATIVE_BYTES: usize = 37;
    pub const PACKET_INDEX: usize = 38;

    /// Every TCP-only position (cleared for UDP packets).
    pub const TCP_GROUP: std::ops::RangeInclusive<usize> = TCP_HEADER_LEN..=TCP_RELATIVE_ACK;
}

/// Fixed-length candidate feature vector of one packet.
#[derive(Clone, Copy, PartialEq)]
pub struct AttributeVector(pub [f64; ATTRIBUTE_COUNT]);

impl AttributeVector {
    pub fn zeros() -> Self {
        AttributeVector([0.0; ATTRIBUTE_COUNT])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Values at `features`, in the order given.
    pub fn project(&self, features: &[usize]) -> Vec<f64> {
        features.iter().map(|&f| self.0[f]).collect()
    }
}

impl Default for AttributeVector {
    fn default() -> Self {
        Self::zeros()
    }
}

impl std::ops::Index<usize> for AttributeVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for AttributeVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Debug for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Serialize for AttributeVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttributeVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        let arr: [f64; ATTRIBUTE_COUNT] = v.try_into().map_err(|v: Vec<f64>| {
            D::Error::custom(format!(
                "attribute vector has {} values, expected {ATTRIBUTE_COUNT}",
                v.len()
            ))
        })?;
        Ok(AttributeVector(arr))
    }
}

/// TCP flag byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ECE: u8 = 0x40;
    pub const CWR: u8 = 0x80;

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }
    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }
    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpHeader {
    pub version: u8,
    /// Bytes.
    pub header_len: u16,
    pub ds_field: u8,
    pub total_length: u16,
    pub identification: u32,
    pub dont_fragment: bool,
    pub more_fragments: bool,
    pub fragment_offset: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub src: IpAddr,
    pub dst: IpAddr,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Bytes.
    pub header_len: u16,
    pub flags: TcpFlags,
    pub window: u16,
    pub urgent_pointer: u16,
    pub options_len: u16,
    pub mss: Option<u16>,
    pub window_scale: Option<u8>,
    pub sack_permitted: bool,
    pub timestamp: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportHeader {
    Tcp(TcpHeader),
    Udp(UdpHeader),
}

/// Headers of one parsed frame, before flow context is known.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketHeaders {
    pub timestamp_us: u64,
    /// Original on-wire frame length.
    pub frame_len: u32,
    pub ip: IpHeader,
    pub transport: TransportHeader,
    pub payload_len: u32,
}

impl PacketHeaders {
    pub fn ports(&self) -> (u16, u16) {
        match &self.transport {
            TransportHeader::Tcp(t) => (t.src_port, t.dst_port),
            TransportHeader::Udp(u) => (u.src_port, u.dst_port),
        }
    }
}

/// Attributes that depend only on the packet itself. Flow-context positions
/// (inter-arrival, direction, relative seq/ack, cumulative bytes, index) are
/// left at 0; [`FlowContext::apply`] fills them.
pub fn header_attributes(h: &PacketHeaders) -> AttributeVector {
    let mut a = AttributeVector::zeros();
    a[idx::PACKET_LENGTH] = h.frame_len as f64;
    a[idx::IP_VERSION] = h.ip.version as f64;
    a[idx::IP_HEADER_LEN] = h.ip.header_len as f64;
    a[idx::IP_DS_FIELD] = h.ip.ds_field as f64;
    a[idx::IP_TOTAL_LENGTH] = h.ip.total_length as f64;
    a[idx::IP_IDENTIFICATION] = h.ip.identification as f64;
    a[idx::IP_FLAG_DF] = h.ip.dont_fragment as u8 as f64;
    a[idx::IP_FLAG_MF] = h.ip.more_fragments as u8 as f64;
    a[idx::IP_FRAG_OFFSET] = h.ip.fragment_offset as f64;
    a[idx::IP_TTL] = h.ip.ttl as f64;
    a[idx::IP_PROTOCOL] = h.ip.protocol as f64;
    match &h.transport {
        TransportHeader::Tcp(t) => {
            a[idx::TCP_HEADER_LEN] = t.header_len as f64;
            for bit in 0..8 {
                a[idx::TCP_FLAG_FIN + bit] = ((t.flags.0 >> bit) & 1) as f64;
            }
            a[idx::TCP_WINDOW_SIZE] = t.window as f64;
            a[idx::TCP_URGENT_POINTER] = t.urgent_pointer as f64;
            a[idx::TCP_PAYLOAD_LEN] = h.payload_len as f64;
            a[idx::TCP_OPTIONS_LEN] = t.options_len as f64;
            a[idx::TCP_MSS] = t.mss.unwrap_or(0) as f64;
            a[idx::TCP_WINDOW_SCALE] = t.window_scale.unwrap_or(0) as f64;
            a[idx::TCP_SACK_PERMITTED] = t.sack_permitted as u8 as f64;
            a[idx::TCP_TIMESTAMP_PRESENT] = t.timestamp as u8 as f64;
            a[idx::SOURCE_PORT] = t.src_port as f64;
            a[idx::DEST_PORT] = t.dst_port as f64;
            a[idx::IS_TCP] = 1.0;
        }
        TransportHeader::Udp(u) => {
            a[idx::UDP_LENGTH] = u.length as f64;
            a[idx::UDP_CHECKSUM_PRESENT] = (u.checksum != 0) as u8 as f64;
            a[idx::SOURCE_PORT] = u.src_port as f64;
            a[idx::DEST_PORT] = u.dst_port as f64;
        }
    }
    a
}

/// One endpoint of a conversation.
pub type Endpoint = (IpAddr, u16);

/// Running per-flow state used to fill the context-dependent attributes.
#[derive(Debug, Clone)]
pub struct FlowContext {
    initiator: Endpoint,
    last_timestamp: Option<u64>,
    next_index: u32,
    first_seq: [Option<u32>; 2],
    first_ack: [Option<u32>; 2],
    cumulative_bytes: [u64; 2],
}

/// The per-packet inputs [`FlowContext::apply`] needs.
#[derive(Debug, Clone, Copy)]
pub struct ContextInput {
    pub timestamp_us: u64,
    pub source: Endpoint,
    pub tcp_seq: Option<u32>,
    /// Present only when the ACK flag is set.
    pub tcp_ack: Option<u32>,
}

impl FlowContext {
    pub fn new(initiator: Endpoint) -> Self {
        FlowContext {
            initiator,
            last_timestamp: None,
            next_index: 0,
            first_seq: [None; 2],
            first_ack: [None; 2],
            cumulative_bytes: [0; 2],
        }
    }

    pub fn initiator(&self) -> Endpoint {
        self.initiator
    }

    /// Fill the context-dependent positions of `attrs` and advance the state.
    /// Returns whether the packet travels in the backward direction.
    pub fn apply(&mut self, input: ContextInput, attrs: &mut AttributeVector) -> bool {
        let backward = input.source != self.initiator;
        let dir = backward as usize;

        attrs[idx::DIRECTION] = dir as f64;
        attrs[idx::INTER_ARRIVAL_TIME] = match self.last_timestamp {
            Some(prev) => input.timestamp_us.saturating_sub(prev) as f64,
            None => 0.0,
        };
        self.last_timestamp = Some(input.timestamp_us);

        attrs[idx::PACKET_INDEX] = self.next_index as f64;
        self.next_index += 1;

        self.cumulative_bytes[dir] += attrs[idx::PACKET_LENGTH] as u64;
        attrs[idx::CUMULATIVE_BYTES] = self.cumulative_bytes[dir] as f64;

        attrs[idx::TCP_RELATIVE_SEQ] = match input.tcp_seq {
            Some(seq) => {
                let base = *self.first_seq[dir].get_or_insert(seq);
                seq.wrapping_sub(base) as f64
            }
            None => 0.0,
        };
        attrs[idx::TCP_RELATIVE_ACK] = match input.tcp_ack {
            Some(ack) => {
                let base = *self.first_ack[dir].get_or_insert(ack);
                ack.wrapping_sub(base) as f64
            }
            None => 0.0,
        };
        backward
    }
}

/// Full 39-field vector for a packet, advancing `ctx`.
pub fn extract_attributes(h: &PacketHeaders, ctx: &mut FlowContext) -> AttributeVector {
    let mut attrs = header_attributes(h);
    let (sport, _) = h.ports();
    let (tcp_seq, tcp_ack) = match &h.transport {
        TransportHeader::Tcp(t) => (Some(t.seq), t.flags.ack().then_some(t.ack)),
        TransportHeader::Udp(_) => (None, None),
    };
    ctx.apply(
        ContextInput {
            timestamp_us: h.timestamp_us,
            source: (h.ip.src, sport),
            tcp_seq,
            tcp_ack,
        },
        &mut attrs,
    );
    attrs
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;

    fn tcp_headers(ts: u64, window: u16) -> PacketHeaders {
        PacketHeaders {
            timestamp_us: ts,
            frame_len: 66,
            ip: IpHeader {
                version: 4,
                header_len: 20,
                ds_field: 0x20,
                total_length: 52,
                identification: 7,
                dont_fragment: true,
                more_fragments: false,
                fragment_offset: 0,
                ttl: 64,
                protocol: 6,
                src: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
                dst: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)),
            },
            transport: TransportHeader::Tcp(TcpHeader {
                src_port: 40000,
                dst_port: 443,
                seq: 1000,
                ack: 0,
                header_len: 32,
                flags: TcpFlags(TcpFlags::SYN),
                window,
                options_len: 12,
                ..Default::default()
            }),
            payload_len: 0,
        }
    }

    #[test]
    fn names_are_unique_and_complete() {
        let mut names = ATTRIBUTE_NAMES.to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), ATTRIBUTE_COUNT);
        assert_eq!(ATTRIBUTE_NAMES[idx::TCP_RELATIVE_ACK], "tcp_relative_ack");
        assert_eq!(ATTRIBUTE_NAMES[idx::PACKET_INDEX], "packet_index_in_flow");
        assert_eq!(ATTRIBUTE_NAMES[idx::TCP_FLAG_FIN + 7], "tcp_flag_cwr");
    }

    #[test]
    fn first_packet_has_zero_iat_and_index() {
        let h = tcp_headers(5_000, 65535);
        let mut ctx = FlowContext::new((h.ip.src, 40000));
        let a = extract_attributes(&h, &mut ctx);
        assert_eq!(a[idx::INTER_ARRIVAL_TIME], 0.0);
        assert_eq!(a[idx::PACKET_INDEX], 0.0);
        assert_eq!(a[idx::TCP_WINDOW_SIZE], 65535.0);
        assert_eq!(a[idx::IP_TTL], 64.0);
        assert_eq!(a[idx::IP_DS_FIELD], 32.0);
        assert_eq!(a[idx::TCP_FLAG_FIN + 1], 1.0);
        assert_eq!(a[idx::IS_TCP], 1.0);

        let b = extract_attributes(&tcp_headers(5_250, 1), &mut ctx);
        assert_eq!(b[idx::INTER_ARRIVAL_TIME], 250.0);
        assert_eq!(b[idx::PACKET_INDEX], 1.0);
        assert_eq!(b[idx::CUMULATIVE_BYTES], 132.0);
    }

    #[test]
    fn udp_zero_fills_tcp_group() {
        let mut h = tcp_headers(0, 100);
        h.ip.protocol = 17;
        h.transport = TransportHeader::Udp(UdpHeader {
            src_port: 5353,
            dst_port: 53,
            length: 40,
            checksum: 0xbeef,
        });
        let mut ctx = FlowContext::new((h.ip.src, 5353));
        let a = extract_attributes(&h, &mut ctx);
        for i in idx::TCP_GROUP {
            assert_eq!(a[i], 0.0, "position {i}");
        }
        assert_eq!(a[idx::IS_TCP], 0.0);
        assert_eq!(a[idx::UDP_LENGTH], 40.0);
        assert_eq!(a[idx::UDP_CHECKSUM_PRESENT], 1.0);
    }

    #[test]
    fn relative_seq_wraps() {
        let mut ctx = FlowContext::new((IpAddr::V4(Ipv4Addr::LOCALHOST), 1));
        let src = ctx.initiator();
        let mut a = AttributeVector::zeros();
        let input = |seq| ContextInput {
            timestamp_us: 0,
            source: src,
            tcp_seq: Some(seq),
            tcp_ack: None,
        };
        ctx.apply(input(u32::MAX - 9), &mut a);
        ctx.apply(input(10), &mut a);
        assert_eq!(a[idx::TCP_RELATIVE_SEQ], 20.0);
    }
}
