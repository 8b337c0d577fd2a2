//! Packet records, five-tuple flow assembly, manifests and the flow dataset
//! file.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::{
    extract_attributes, AttributeVector, ContextInput, FlowContext, PacketHeaders, TcpFlags,
    TransportHeader,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pcap::{parse_frames, ParseStats};

pub const FLOW_DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub src: IpAddr,
    pub dst: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Transport,
}

impl FiveTuple {
    pub fn reversed(&self) -> Self {
        FiveTuple {
            src: self.dst,
            dst: self.src,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    /// Orientation-insensitive grouping key: the lexicographically smaller
    /// endpoint comes first.
    pub fn key(&self) -> FiveTuple {
        if (self.src, self.src_port) <= (self.dst, self.dst_port) {
            *self
        } else {
            self.reversed()
        }
    }

    pub fn source(&self) -> (IpAddr, u16) {
        (self.src, self.src_port)
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} {}:{} -> {}:{}",
            self.protocol, self.src, self.src_port, self.dst, self.dst_port
        )
    }
}

/// One parsed TCP or UDP packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub timestamp_us: u64,
    /// As seen on the wire (not canonicalized).
    pub five_tuple: FiveTuple,
    pub direction: Direction,
    pub tcp_seq: Option<u32>,
    pub tcp_ack: Option<u32>,
    pub tcp_flags: Option<TcpFlags>,
    pub payload_len: u32,
    pub attributes: AttributeVector,
}

impl PacketRecord {
    /// Build a record from parsed headers, advancing the flow context.
    pub fn from_headers(h: &PacketHeaders, ctx: &mut FlowContext) -> Self {
        let (src_port, dst_port) = h.ports();
        let (protocol, tcp_seq, tcp_ack, tcp_flags) = match &h.transport {
            TransportHeader::Tcp(t) => (Transport::Tcp, Some(t.seq), Some(t.ack), Some(t.flags)),
            TransportHeader::Udp(_) => (Transport::Udp, None, None, None),
        };
        let five_tuple = FiveTuple {
            src: h.ip.src,
            dst: h.ip.dst,
            src_port,
            dst_port,
            protocol,
        };
        let direction = if five_tuple.source() == ctx.initiator() {
            Direction::Forward
        } else {
            Direction::Backward
        };
        PacketRecord {
            timestamp_us: h.timestamp_us,
            five_tuple,
            direction,
            tcp_seq,
            tcp_ack,
            tcp_flags,
            payload_len: h.payload_len,
            attributes: extract_attributes(h, ctx),
        }
    }

    /// Acknowledgment number, when the ACK flag makes it meaningful.
    pub fn valid_ack(&self) -> Option<u32> {
        match self.tcp_flags {
            Some(f) if f.ack() => self.tcp_ack,
            _ => None,
        }
    }

    /// Sequence space consumed: payload plus one for SYN and for FIN.
    pub fn sequence_len(&self) -> u32 {
        let flags = self.tcp_flags.unwrap_or_default();
        self.payload_len + flags.syn() as u32 + flags.fin() as u32
    }

    fn context_input(&self) -> ContextInput {
        ContextInput {
            timestamp_us: self.timestamp_us,
            source: self.five_tuple.source(),
            tcp_seq: self.tcp_seq,
            tcp_ack: self.valid_ack(),
        }
    }
}

/// Packets of one conversation, initiator first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub five_tuple: FiveTuple,
    pub packets: Vec<PacketRecord>,
    pub label: Option<String>,
    pub environment_label: Option<String>,
}

impl Flow {
    pub fn protocol(&self) -> Transport {
        self.five_tuple.protocol
    }

    /// Recompute direction and every flow-context attribute from the current
    /// packet order. The first packet's source becomes the initiator.
    pub fn refresh_context(&mut self) {
        let Some(first) = self.packets.first() else { return };
        let initiator = first.five_tuple.source();
        if self.five_tuple.source() != initiator {
            self.five_tuple = self.five_tuple.reversed();
        }
        let mut ctx = FlowContext::new(initiator);
        for p in &mut self.packets {
            let backward = ctx.apply(p.context_input(), &mut p.attributes);
            p.direction = if backward {
                Direction::Backward
            } else {
                Direction::Forward
            };
        }
    }
}

/// Result of parsing one capture.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub records: Vec<PacketRecord>,
    pub stats: ParseStats,
}

/// Parse a classic pcap byte stream into packet records.
///
/// Flow-context attributes are computed in file order; [`assemble_flows`]
/// recomputes them after sorting and truncation.
pub fn parse_capture(bytes: &[u8]) -> Result<Capture> {
    let (headers, stats) = parse_frames(bytes)?;
    let mut contexts: HashMap<FiveTuple, FlowContext> = HashMap::new();
    let records = headers
        .iter()
        .map(|h| {
            let (sp, dp) = h.ports();
            let protocol = match h.transport {
                TransportHeader::Tcp(_) => Transport::Tcp,
                TransportHeader::Udp(_) => Transport::Udp,
            };
            let tuple = FiveTuple {
                src: h.ip.src,
                dst: h.ip.dst,
                src_port: sp,
                dst_port: dp,
                protocol,
            };
            let ctx = contexts
                .entry(tuple.key())
                .or_insert_with(|| FlowContext::new(tuple.source()));
            PacketRecord::from_headers(h, ctx)
        })
        .collect();
    Ok(Capture { records, stats })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyStats {
    pub flows: u64,
    pub dropped_flows: u64,
    pub truncated_packets: u64,
}

/// Group packets into flows by orientation-insensitive five-tuple.
///
/// Within a flow packets are ordered by timestamp (ties keep input order) and
/// only the first `max_packets` are kept. Flows with fewer than two packets are
/// dropped. Output is ordered by first timestamp, then by key.
pub fn assemble_flows(
    packets: Vec<PacketRecord>,
    max_packets: usize,
) -> Result<(Vec<Flow>, AssemblyStats)> {
    if max_packets < 2 {
        return Err(Error::Config(format!(
            "max packet count must be at least 2, got {max_packets}"
        )));
    }
    let mut groups: HashMap<FiveTuple, Vec<PacketRecord>> = HashMap::new();
    for p in packets {
        groups.entry(p.five_tuple.key()).or_default().push(p);
    }
    let mut stats = AssemblyStats::default();
    let mut flows = Vec::with_capacity(groups.len());
    for (_, mut pkts) in groups {
        if pkts.len() < 2 {
            stats.dropped_flows += 1;
            continue;
        }
        pkts.sort_by_key(|p| p.timestamp_us);
        if pkts.len() > max_packets {
            stats.truncated_packets += (pkts.len() - max_packets) as u64;
            pkts.truncate(max_packets);
        }
        let mut flow = Flow {
            five_tuple: pkts[0].five_tuple,
            packets: pkts,
            label: None,
            environment_label: None,
        };
        flow.refresh_context();
        flows.push(flow);
    }
    flows.sort_by(|a, b| {
        (a.packets[0].timestamp_us, a.five_tuple.key())
            .cmp(&(b.packets[0].timestamp_us, b.five_tuple.key()))
    });
    stats.flows = flows.len() as u64;
    Ok((flows, stats))
}

/// One row of the ingest manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: String,
    pub environment_label: Option<String>,
}

/// Read a `path,label,environment_label` CSV. Relative paths are resolved
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["path", "label", "environment_label"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(Error::format(
            "manifest",
            format!("header must be `path,label,environment_label`, got `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let p = PathBuf::from(record[0].trim());
        let env = record[2].trim();
        rows.push(ManifestRow {
            path: if p.is_absolute() { p } else { base.join(p) },
            label: record[1].trim().to_string(),
            environment_label: (!env.is_empty()).then(|| env.to_string()),
        });
    }
    Ok(rows)
}

/// Outcome for one manifest row.
#[derive(Debug, Clone)]
pub struct FileReport {
    pub path: PathBuf,
    pub outcome: std::result::Result<(ParseStats, AssemblyStats), String>,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutput {
    pub flows: Vec<Flow>,
    pub files: Vec<FileReport>,
}

/// Parse and assemble every capture of a manifest. Unreadable rows are
/// reported individually and do not stop the others.
pub fn ingest_manifest(rows: &[ManifestRow], max_packets: usize, exec: Exec) -> Result<IngestOutput> {
    if max_packets < 2 {
        return Err(Error::Config(format!(
            "max packet count must be at least 2, got {max_packets}"
        )));
    }
    let results = exec.map(rows, |_, row| -> std::result::Result<_, String> {
        let bytes = std::fs::read(&row.path).map_err(|e| e.to_string())?;
        let capture = parse_capture(&bytes).map_err(|e| e.to_string())?;
        let (mut flows, astats) =
            assemble_flows(capture.records, max_packets).map_err(|e| e.to_string())?;
        for f in &mut flows {
            f.label = Some(row.label.clone());
            f.environment_label = row.environment_label.clone();
        }
        Ok((flows, capture.stats, astats))
    });
    let mut out = IngestOutput::default();
    for (row, res) in rows.iter().zip(results) {
        let outcome = match res {
            Ok((flows, pstats, astats)) => {
                out.flows.extend(flows);
                Ok((pstats, astats))
            }
            Err(e) => Err(e),
        };
        out.files.push(FileReport {
            path: row.path.clone(),
            outcome,
        });
    }
    Ok(out)
}

#[derive(Serialize)]
struct FlowLineRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    flow: &'a Flow,
}

#[derive(Deserialize)]
struct FlowLine {
    format_version: u32,
    #[serde(flatten)]
    flow: Flow,
}

/// Write flows as JSON lines, one flow per line.
pub fn write_flow_dataset<W: Write>(mut w: W, flows: &[Flow]) -> Result<()> {
    for flow in flows {
        serde_json::to_writer(
            &mut w,
            &FlowLineRef {
                format_version: FLOW_DATASET_VERSION,
                flow,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow_dataset<R: BufRead>(r: R) -> Result<Vec<Flow>> {
    let mut flows = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FlowLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("flow dataset", format!("line {}: {e}", n + 1)))?;
        if rec.format_version != FLOW_DATASET_VERSION {
            return Err(Error::FormatVersion {
                what: "flow dataset",
                found: rec.format_version,
                expected: FLOW_DATASET_VERSION,
            });
        }
        flows.push(rec.flow);
    }
    Ok(flows)
}

pub fn save_flows(path: &Path, flows: &[Flow]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_flow_dataset(std::io::BufWriter::new(f), flows)
}

pub fn load_flows(path: &Path) -> Result<Vec<Flow>> {
    let f = std::fs::File::open(path)?;
    read_flow_dataset(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::idx;
    use crate::pcap::{FrameSpec, PcapWriter, TransportSpec};

    fn udp(ts: u64, from_client: bool, sport: u16) -> FrameSpec {
        let (a, b): (IpAddr, IpAddr) = ("10.0.0.1".parse().unwrap(), "10.0.0.9".parse().unwrap());
        let (src, dst, s, d) = if from_client { (a, b, sport, 53) } else { (b, a, 53, sport) };
        FrameSpec {
            timestamp_us: ts,
            src,
            dst,
            ttl: 64,
            ds_field: 0,
            identification: 0,
            dont_fragment: false,
            transport: TransportSpec::Udp {
                src_port: s,
                dst_port: d,
                checksum: 0,
            },
            payload_len: 20,
        }
    }

    fn capture(frames: &[FrameSpec]) -> Vec<PacketRecord> {
        let mut w = PcapWriter::new(false, false);
        frames.iter().for_each(|f| w.push(f));
        parse_capture(&w.into_bytes()).unwrap().records
    }

    #[test]
    fn single_udp_datagram() {
        let recs = capture(&[udp(0, true, 1000)]);
        assert_eq!(recs.len(), 1);
        let r = &recs[0];
        assert_eq!(r.tcp_seq, None);
        assert_eq!(r.tcp_ack, None);
        assert_eq!(r.attributes[idx::IS_TCP], 0.0);
        assert!(idx::TCP_GROUP.clone().all(|i| r.attributes[i] == 0.0));
    }

    #[test]
    fn truncates_to_earliest_packets() {
        // written in reverse so sorting matters
        let frames: Vec<_> = (0..25).rev().map(|i| udp(i * 10, i % 2 == 0, 1000)).collect();
        let (flows, stats) = assemble_flows(capture(&frames), 20).unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].packets.len(), 20);
        assert_eq!(stats.truncated_packets, 5);
        let ts: Vec<u64> = flows[0].packets.iter().map(|p| p.timestamp_us).collect();
        assert_eq!(ts, (0..20).map(|i| i * 10).collect::<Vec<_>>());
        // initiator is the source of the earliest packet
        assert_eq!(flows[0].packets[0].direction, Direction::Forward);
        assert_eq!(flows[0].packets[1].direction, Direction::Backward);
        assert_eq!(flows[0].packets[0].attributes[idx::PACKET_INDEX], 0.0);
        assert_eq!(flows[0].packets[19].attributes[idx::PACKET_INDEX], 19.0);
        assert_eq!(flows[0].packets[1].attributes[idx::INTER_ARRIVAL_TIME], 10.0);
    }

    #[test]
    fn single_packet_flow_dropped() {
        let (flows, stats) = assemble_flows(capture(&[udp(0, true, 1)]), 20).unwrap();
        assert!(flows.is_empty());
        assert_eq!(stats.dropped_flows, 1);
        assert!(assemble_flows(vec![], 1).is_err());
    }

    #[test]
    fn interleaved_flows_grouped() {
        let frames = vec![
            udp(0, false, 1111), // B starts with the server side
            udp(1, true, 2222),  // A
            udp(2, true, 1111),  // B
            udp(3, false, 2222), // A
            udp(4, true, 2222),  // A
        ];
        let (flows, _) = assemble_flows(capture(&frames), 20).unwrap();
        assert_eq!(flows.len(), 2);
        let b = &flows[0];
        let a = &flows[1];
        assert_eq!(b.packets.len(), 2);
        assert_eq!(a.packets.len(), 3);
        assert_eq!(b.five_tuple.src_port, 53);
        assert_eq!(a.five_tuple.src_port, 2222);
        let dirs = |f: &Flow| f.packets.iter().map(|p| p.direction).collect::<Vec<_>>();
        use Direction::*;
        assert_eq!(dirs(a), vec![Forward, Backward, Forward]);
        assert_eq!(dirs(b), vec![Forward, Backward]);
    }

    #[test]
    fn key_is_orientation_insensitive() {
        let t = FiveTuple {
            src: "1.2.3.4".parse().unwrap(),
            dst: "5.6.7.8".parse().unwrap(),
            src_port: 9,
            dst_port: 10,
            protocol: Transport::Tcp,
        };
        assert_eq!(t.key(), t.reversed().key());
    }

    #[test]
    fn dataset_rejects_unknown_version() {
        let (flows, _) = assemble_flows(capture(&[udp(0, true, 1), udp(1, false, 1)]), 20).unwrap();
        let mut buf = Vec::new();
        write_flow_dataset(&mut buf, &flows).unwrap();
        let back = read_flow_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, flows);
        let text = String::from_utf8(buf).unwrap().replace("\"format_version\":1", "\"format_version\":9");
        assert!(matches!(
            read_flow_dataset(text.as_bytes()),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }
}
