//! Seeded traffic generators with known ground truth.
//!
//! [`structural_flows`] simulates TCP conversations whose classes differ only
//! in how data and acknowledgments interleave, so their flow graphs differ in
//! shape (wide acknowledgment fans, long alternating chains, or short bursts)
//! while packet sizes, timing and header values share one distribution.
//! The frames go through the real pcap writer, parser and flow assembler.
//!
//! [`shift_flows`] produces attribute vectors directly: a handful of planted
//! features depend on the class only, a few depend on the environment only,
//! and everything else is identically distributed noise.

use std::net::{IpAddr, Ipv4Addr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use crate::attributes::{AttributeVector, TcpFlags, ATTRIBUTE_COUNT};
use crate::error::Result;
use crate::ingest::{assemble_flows, parse_capture, Direction, FiveTuple, Flow, PacketRecord, Transport};
use crate::pcap::{FrameSpec, PcapWriter, TransportSpec};
use crate::seed::derive_seed;

/// Class names of [`structural_flows`], in class-index order.
pub const STRUCTURAL_CLASSES: [&str; 3] = ["bulk", "interactive", "balanced"];
pub const ENVIRONMENTS: [&str; 2] = ["env-a", "env-b"];

/// Packets generated per conversation before truncation.
const CONVERSATION_PACKETS: usize = 30;

struct Conversation {
    client: (IpAddr, u16),
    server: (IpAddr, u16),
    client_seq: u32,
    server_seq: u32,
    clock_us: u64,
    iat: Exp<f64>,
    ttl: [u8; 2],
    frames: Vec<FrameSpec>,
}

impl Conversation {
    fn new<R: Rng>(id: usize, start_us: u64, iat_mean_us: f64, rng: &mut R) -> Self {
        let host = id as u32 + 1;
        Conversation {
            client: (
                IpAddr::V4(Ipv4Addr::new(10, (host >> 16) as u8, (host >> 8) as u8, host as u8)),
                rng.gen_range(32768..61000),
            ),
            server: (IpAddr::V4(Ipv4Addr::new(172, 16, 0, 1)), 443),
            client_seq: rng.gen(),
            server_seq: rng.gen(),
            clock_us: start_us,
            iat: Exp::new(1.0 / iat_mean_us).expect("positive rate"),
            ttl: [[64, 128][rng.gen_range(0..2)], [52, 116][rng.gen_range(0..2)]],
            frames: Vec::new(),
        }
    }

    fn send<R: Rng>(&mut self, from_client: bool, payload: usize, flags: u8, rng: &mut R) {
        self.clock_us += 1 + self.iat.sample(rng) as u64;
        let (src, dst, seq, ack) = if from_client {
            (self.client, self.server, self.client_seq, self.server_seq)
        } else {
            (self.server, self.client, self.server_seq, self.client_seq)
        };
        let consumed = payload as u32
            + (flags & TcpFlags::SYN != 0) as u32
            + (flags & TcpFlags::FIN != 0) as u32;
        if from_client {
            self.client_seq = self.client_seq.wrapping_add(consumed);
        } else {
            self.server_seq = self.server_seq.wrapping_add(consumed);
        }
        let syn = flags & TcpFlags::SYN != 0;
        self.frames.push(FrameSpec {
            timestamp_us: self.clock_us,
            src: src.0,
            dst: dst.0,
            ttl: self.ttl[!from_client as usize],
            ds_field: 0,
            identification: rng.gen(),
            dont_fragment: true,
            transport: TransportSpec::Tcp {
                src_port: src.1,
                dst_port: dst.1,
                seq,
                ack: if flags & TcpFlags::ACK != 0 { ack } else { 0 },
                flags,
                window: rng.gen_range(500..65535),
                options: if syn { vec![2, 4, 0x05, 0xb4, 4, 2, 1, 1] } else { Vec::new() },
            },
            payload_len: payload,
        });
    }

    fn data<R: Rng>(&mut self, from_client: bool, rng: &mut R) {
        let len = rng.gen_range(60..1400);
        self.send(from_client, len, TcpFlags::ACK | TcpFlags::PSH, rng);
    }

    fn pure_ack<R: Rng>(&mut self, from_client: bool, rng: &mut R) {
        self.send(from_client, 0, TcpFlags::ACK, rng);
    }

    fn handshake<R: Rng>(&mut self, rng: &mut R) {
        self.send(true, 0, TcpFlags::SYN, rng);
        self.send(false, 0, TcpFlags::SYN | TcpFlags::ACK, rng);
        self.pure_ack(true, rng);
    }
}

/// Frames of one conversation of class `class`.
pub fn structural_conversation<R: Rng>(class: usize, id: usize, start_us: u64, iat_mean_us: f64, rng: &mut R) -> Vec<FrameSpec> {
    let mut c = Conversation::new(id, start_us, iat_mean_us, rng);
    c.handshake(rng);
    while c.frames.len() < CONVERSATION_PACKETS {
        match class {
            // request, long server burst, one cumulative ack
            0 => {
                c.data(true, rng);
                for _ in 0..rng.gen_range(5..=9) {
                    c.data(false, rng);
                }
                c.pure_ack(true, rng);
            }
            // strict ping-pong
            1 => {
                c.data(true, rng);
                c.data(false, rng);
            }
            // short bursts from both sides
            _ => {
                for _ in 0..rng.gen_range(2..=3) {
                    c.data(true, rng);
                }
                for _ in 0..rng.gen_range(2..=3) {
                    c.data(false, rng);
                }
            }
        }
    }
    c.frames
}

/// One pcap holding `flows` conversations of one class, back to back.
pub fn structural_capture(class: usize, flows: usize, environment: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[class as u64, environment as u64]));
    let iat_mean = [2_000.0, 8_000.0][environment % 2];
    let mut w = PcapWriter::new(false, false);
    let mut start = 1_700_000_000_000_000u64;
    for id in 0..flows {
        let frames = structural_conversation(class, id, start, iat_mean, &mut rng);
        start = frames.last().map_or(start, |f| f.timestamp_us) + 1_000;
        for f in &frames {
            w.push(f);
        }
    }
    w.into_bytes()
}

/// Labeled flows for every structural class, split evenly over the two
/// environments.
pub fn structural_flows(flows_per_class: usize, max_packets: usize, seed: u64) -> Result<Vec<Flow>> {
    let mut out = Vec::with_capacity(flows_per_class * STRUCTURAL_CLASSES.len());
    for (class, name) in STRUCTURAL_CLASSES.iter().enumerate() {
        for (env, env_name) in ENVIRONMENTS.iter().enumerate() {
            let count = flows_per_class / 2 + (env == 0) as usize * (flows_per_class % 2);
            let capture = parse_capture(&structural_capture(class, count, env, seed))?;
            let (flows, _) = assemble_flows(capture.records, max_packets)?;
            out.extend(flows.into_iter().map(|mut f| {
                f.label = Some(name.to_string());
                f.environment_label = Some(env_name.to_string());
                f
            }));
        }
    }
    Ok(out)
}

/// Planted layout of [`shift_flows`].
pub const SHIFT_STABLE: [usize; 5] = [5, 7, 11, 22, 34];
pub const SHIFT_INDICATORS: [usize; 3] = [0, 1, 24];
pub const SHIFT_CLASSES: [&str; 3] = ["browsing", "chat", "streaming"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftConfig {
    pub flows_per_cell: usize,
    pub packets_per_flow: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            flows_per_cell: 40,
            packets_per_flow: 20,
            seed: 0,
        }
    }
}

/// 3 classes × 2 environments of flows with planted attribute behavior.
///
/// * [`SHIFT_STABLE`]: `N(3·class, 1)`, unaffected by environment;
/// * [`SHIFT_INDICATORS`]: `N(4·environment, 1)`, unaffected by class;
/// * every other attribute: `N(0, 1)`.
pub fn shift_flows(cfg: &ShiftConfig) -> Vec<Flow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let tuple = FiveTuple {
        src: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 1)),
        dst: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 2)),
        src_port: 1000,
        dst_port: 443,
        protocol: Transport::Udp,
    };
    let mut flows = Vec::new();
    for (class, name) in SHIFT_CLASSES.iter().enumerate() {
        for (env, env_name) in ENVIRONMENTS.iter().enumerate() {
            for _ in 0..cfg.flows_per_cell {
                let packets = (0..cfg.packets_per_flow)
                    .map(|i| {
                        let mut a = AttributeVector::zeros();
                        for f in 0..ATTRIBUTE_COUNT {
                            let shift = if SHIFT_STABLE.contains(&f) {
                                3.0 * class as f64
                            } else if SHIFT_INDICATORS.contains(&f) {
                                4.0 * env as f64
                            } else {
                                0.0
                            };
                            a[f] = shift + unit.sample(&mut rng);
                        }
                        PacketRecord {
                            timestamp_us: i as u64,
                            five_tuple: if i % 2 == 0 { tuple } else { tuple.reversed() },
                            direction: if i % 2 == 0 { Direction::Forward } else { Direction::Backward },
                            tcp_seq: None,
                            tcp_ack: None,
                            tcp_flags: None,
                            payload_len: 0,
                            attributes: a,
                        }
                    })
                    .collect();
                flows.push(Flow {
                    five_tuple: tuple,
                    packets,
                    label: Some(name.to_string()),
                    environment_label: Some(env_name.to_string()),
                });
            }
        }
    }
    flows
}
