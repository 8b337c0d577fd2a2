//! Test-only trace builders and independent reference implementations.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::{IpAddr, Ipv4Addr};

use flowgraph_core::attributes::TcpFlags;
use flowgraph_core::graph::{EdgeKind, FlowGraph, GraphEdge};
use flowgraph_core::ingest::{assemble_flows, parse_capture, Direction, Flow};
use flowgraph_core::pcap::{FrameSpec, PcapWriter, TransportSpec};
use flowgraph_core::model::Neighborhoods;
use flowgraph_core::{GraphSat, ModelConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const A: u8 = TcpFlags::ACK;
pub const S: u8 = TcpFlags::SYN;
pub const F: u8 = TcpFlags::FIN;
pub const P: u8 = TcpFlags::PSH;

/// One packet of a hand-written trace.
#[derive(Debug, Clone, Copy)]
pub struct Pkt {
    pub from_client: bool,
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub payload: usize,
}

pub fn c(seq: u32, ack: u32, flags: u8, payload: usize) -> Pkt {
    Pkt { from_client: true, seq, ack, flags, payload }
}

pub fn s(seq: u32, ack: u32, flags: u8, payload: usize) -> Pkt {
    Pkt { from_client: false, seq, ack, flags, payload }
}

/// UDP packet; only the direction and size matter.
pub fn u(from_client: bool, payload: usize) -> Pkt {
    Pkt { from_client, seq: 0, ack: 0, flags: 0, payload }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub name: &'static str,
    pub udp: bool,
    pub packets: Vec<Pkt>,
}

const CLIENT: (u8, u16) = (1, 40000);
const SERVER: (u8, u16) = (2, 443);

fn frame(p: &Pkt, udp: bool, i: usize) -> FrameSpec {
    let (src, dst) = if p.from_client { (CLIENT, SERVER) } else { (SERVER, CLIENT) };
    FrameSpec {
        timestamp_us: 1_000_000 + 100 * i as u64,
        src: IpAddr::V4(Ipv4Addr::new(10, 0, 0, src.0)),
        dst: IpAddr::V4(Ipv4Addr::new(10, 0, 0, dst.0)),
        ttl: 64,
        ds_field: 0x20,
        identification: i as u16,
        dont_fragment: true,
        transport: if udp {
            TransportSpec::Udp { src_port: src.1, dst_port: dst.1, checksum: 0 }
        } else {
            TransportSpec::Tcp {
                src_port: src.1,
                dst_port: dst.1,
                seq: p.seq,
                ack: p.ack,
                flags: p.flags,
                window: 1024,
                options: Vec::new(),
            }
        },
        payload_len: p.payload,
    }
}

pub fn trace_pcap(t: &Trace) -> Vec<u8> {
    let mut w = PcapWriter::new(false, false);
    for (i, p) in t.packets.iter().enumerate() {
        w.push(&frame(p, t.udp, i));
    }
    w.into_bytes()
}

/// Run a trace through the pcap writer, parser and flow assembler.
pub fn trace_flow(t: &Trace) -> Flow {
    let cap = parse_capture(&trace_pcap(t)).expect("parse");
    let (mut flows, _) = assemble_flows(cap.records, 10_000).expect("assemble");
    assert_eq!(flows.len(), 1, "{}", t.name);
    flows.pop().unwrap()
}

fn seq_le(a: u32, b: u32) -> bool {
    let d = (b as u64 + (1u64 << 32) - a as u64) % (1u64 << 32);
    d < (1u64 << 31)
}

fn seq_len(p: &Pkt) -> u32 {
    p.payload as u32 + (p.flags & S != 0) as u32 + (p.flags & F != 0) as u32
}

/// Stateless reference: for every packet pair, decide the edge directly.
///
/// Ack rule: `p` is acknowledged by the first later opposite-direction ACK
/// packet whose ack number covers `seq + len`; an earlier same-direction
/// packet with the same range acknowledged by the same packet takes the edge
/// instead.
pub fn oracle_edges(t: &Trace) -> BTreeSet<(usize, usize, EdgeKind)> {
    let ps = &t.packets;
    let n = ps.len();
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            let same = ps[i].from_client == ps[j].from_client;
            if j == i + 1 && same && (t.udp || ps[i].ack == ps[j].ack) {
                out.insert((i, j, EdgeKind::Window));
            }
            if t.udp && j == i + 1 && !same {
                out.insert((i, j, EdgeKind::Ack));
            }
        }
    }
    if t.udp {
        return out;
    }
    let covers = |p: usize, q: usize| {
        ps[q].from_client != ps[p].from_client
            && ps[q].flags & A != 0
            && seq_le(ps[p].seq.wrapping_add(seq_len(&ps[p])), ps[q].ack)
    };
    let first_cover = |p: usize| (p + 1..n).find(|&q| covers(p, q));
    for p in 0..n {
        if seq_len(&ps[p]) == 0 {
            continue;
        }
        let Some(q) = first_cover(p) else { continue };
        let shadowed = (0..p).any(|e| {
            ps[e].from_client == ps[p].from_client
                && seq_len(&ps[e]) > 0
                && ps[e].seq == ps[p].seq
                && seq_len(&ps[e]) == seq_len(&ps[p])
                && first_cover(e) == Some(q)
        });
        if !shadowed {
            out.insert((p, q, EdgeKind::Ack));
        }
    }
    out
}

pub fn edge_set(g: &FlowGraph) -> BTreeSet<(usize, usize, EdgeKind)> {
    g.edges.iter().map(|e: &GraphEdge| (e.a, e.b, e.kind)).collect()
}

/// At least twenty traces covering the edge rules.
pub fn golden_traces() -> Vec<Trace> {
    let tcp = |name, packets| Trace { name, udp: false, packets };
    let udp = |name, packets| Trace { name, udp: true, packets };
    let wrap = u32::MAX - 149;
    vec![
        tcp("shared cumulative ack", vec![c(1000, 500, A, 100), c(1100, 500, A, 100), s(500, 1200, A, 0)]),
        tcp(
            "exact-ack chat",
            vec![
                c(1, 1, A | P, 10),
                s(1, 11, A | P, 20),
                c(11, 21, A | P, 10),
                s(21, 21, A | P, 20),
                c(21, 41, A, 0),
            ],
        ),
        tcp("one-way flood", (0..8).map(|i| c(100 + 50 * i, 7, A, 50)).collect()),
        tcp(
            "handshake and close",
            vec![
                c(99, 0, S, 0),
                s(499, 100, S | A, 0),
                c(100, 500, A, 0),
                c(100, 500, A | P, 40),
                s(500, 140, A | P, 60),
                c(140, 560, F | A, 0),
                s(560, 141, F | A, 0),
                c(141, 561, A, 0),
            ],
        ),
        tcp(
            "sequence wraparound",
            vec![
                c(wrap, 1, A, 100),
                c(wrap.wrapping_add(100), 1, A, 100),
                s(1, wrap.wrapping_add(100), A, 0),
                s(1, wrap.wrapping_add(200), A, 0),
            ],
        ),
        tcp("ack wraps past zero", vec![c(u32::MAX - 9, 5, A, 30), s(5, 20, A, 0)]),
        tcp(
            "retransmission",
            vec![c(1000, 1, A, 100), c(1000, 1, A, 100), s(1, 1100, A, 0), c(1100, 1, A, 100), s(1, 1200, A, 0)],
        ),
        tcp(
            "retransmission after ack",
            vec![c(1000, 1, A, 100), s(1, 1100, A, 0), c(1000, 1, A, 100), s(1, 1100, A, 0)],
        ),
        tcp(
            "partial ack",
            vec![c(0, 9, A, 100), c(100, 9, A, 100), s(9, 100, A, 0), s(9, 200, A, 0)],
        ),
        tcp("ack number without ACK flag", vec![c(10, 0, S, 0), s(20, 11, S, 0), c(11, 21, A, 0)]),
        tcp(
            "duplicate acks",
            vec![c(0, 1, A, 10), s(1, 10, A, 0), s(1, 10, A, 0), s(1, 10, A, 0)],
        ),
        tcp(
            "same direction, different acks",
            vec![s(0, 0, A, 10), c(0, 10, A, 5), c(5, 10, A, 5), c(10, 10, A, 5), s(10, 15, A, 10), c(15, 20, A, 5)],
        ),
        tcp("stale ack", vec![c(500, 1, A, 100), s(1, 400, A, 0), s(1, 550, A, 0), s(1, 600, A, 0)]),
        tcp(
            "piggybacked acks both ways",
            vec![
                c(0, 0, A | P, 100),
                s(0, 100, A | P, 200),
                c(100, 200, A | P, 100),
                c(200, 200, A | P, 100),
                s(200, 300, A | P, 200),
                c(300, 400, A, 0),
            ],
        ),
        tcp("pure acks only", vec![c(5, 5, A, 0), s(5, 5, A, 0), c(5, 5, A, 0), s(5, 5, A, 0)]),
        tcp(
            "long burst, one ack",
            (0..15).map(|i| s(1000 + 100 * i, 3, A, 100)).chain([c(3, 2500, A, 0)]).collect(),
        ),
        tcp(
            "fin only",
            vec![c(7, 1, A, 0), c(7, 1, F | A, 0), s(1, 8, A, 0), s(1, 8, F | A, 0), c(8, 2, A, 0)],
        ),
        tcp(
            "ack beyond any data",
            vec![c(0, 0, A, 10), c(10, 0, A, 10), s(0, 9999, A, 0)],
        ),
        tcp(
            "interleaved client bursts",
            vec![
                c(0, 0, A, 10),
                s(0, 10, A, 10),
                c(10, 10, A, 10),
                c(20, 10, A, 10),
                c(30, 10, A, 10),
                s(10, 30, A, 0),
                s(10, 40, A, 0),
            ],
        ),
        udp("udp alternation", vec![u(true, 10), u(false, 10), u(true, 10), u(false, 10)]),
        udp("udp run then reply", vec![u(true, 10), u(true, 10), u(false, 10), u(true, 10)]),
        udp("udp one direction", (0..5).map(|_| u(true, 64)).collect()),
        udp(
            "udp mixed runs",
            vec![u(true, 1), u(true, 2), u(true, 3), u(false, 4), u(false, 5), u(true, 6), u(false, 7)],
        ),
    ]
}

/// Random TCP conversation with plausible sequence bookkeeping, occasional
/// retransmissions and stale acknowledgments.
pub fn random_tcp_trace<R: Rng>(rng: &mut R, len: usize) -> Trace {
    let mut next = [rng.gen::<u32>(), rng.gen::<u32>()];
    let mut acked = next;
    let mut packets = Vec::new();
    for i in 0..len {
        let from_client = i == 0 || rng.gen_bool(0.5);
        let d = (!from_client) as usize;
        let earlier: Vec<&Pkt> = packets
            .iter()
            .filter(|p: &&Pkt| p.from_client == from_client && p.payload > 0)
            .collect();
        let (seq, payload) = if !earlier.is_empty() && rng.gen_bool(0.15) {
            let old = earlier[rng.gen_range(0..earlier.len())];
            (old.seq, old.payload)
        } else {
            let payload = if rng.gen_bool(0.3) { 0 } else { rng.gen_range(1..200) };
            let seq = next[d];
            next[d] = next[d].wrapping_add(payload as u32);
            (seq, payload)
        };
        if rng.gen_bool(0.7) {
            acked[1 - d] = next[1 - d];
        }
        packets.push(Pkt {
            from_client,
            seq,
            ack: acked[1 - d],
            flags: if rng.gen_bool(0.95) { A } else { 0 },
            payload,
        });
    }
    Trace { name: "random", udp: false, packets }
}

/// Random graph with attribute dimension `d`.
pub fn random_graph<R: Rng>(rng: &mut R, n: usize, d: usize, edge_p: f64) -> FlowGraph {
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(edge_p) {
                let kind = if rng.gen_bool(0.5) { EdgeKind::Window } else { EdgeKind::Ack };
                edges.insert(GraphEdge::new(i, j, kind));
            }
        }
    }
    FlowGraph {
        num_nodes: n,
        dim: d,
        attributes: (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        directions: (0..n)
            .map(|_| if rng.gen_bool(0.5) { Direction::Forward } else { Direction::Backward })
            .collect(),
        edges: edges.into_iter().collect(),
        label: None,
        environment_label: None,
    }
}

/// Dense neighbor lists (no self, ascending).
pub fn neighbors(g: &FlowGraph) -> Vec<Vec<usize>> {
    let mut m = vec![vec![false; g.num_nodes]; g.num_nodes];
    for e in &g.edges {
        m[e.a][e.b] = true;
        m[e.b][e.a] = true;
    }
    m.iter()
        .map(|row| row.iter().enumerate().filter(|(_, &x)| x).map(|(j, _)| j).collect())
        .collect()
}

/// One mean-aggregation layer over full neighborhoods, written with plain
/// loops: `relu(W · mean(x_v, x_u for u in N(v)) + b)`.
pub fn full_sage_layer(x: &[Vec<f64>], nbrs: &[Vec<usize>], w: &[Vec<f64>], b: &[f64]) -> Vec<Vec<f64>> {
    let out_dim = b.len();
    (0..x.len())
        .map(|v| {
            let members: Vec<usize> = std::iter::once(v).chain(nbrs[v].iter().copied()).collect();
            let mut mean = vec![0.0; x[v].len()];
            for &m in &members {
                for (k, val) in x[m].iter().enumerate() {
                    mean[k] += val;
                }
            }
            for val in &mut mean {
                *val /= members.len() as f64;
            }
            (0..out_dim)
                .map(|j| {
                    let mut acc = 0.0;
                    for (k, mk) in mean.iter().enumerate() {
                        if *mk != 0.0 {
                            acc += mk * w[k][j];
                        }
                    }
                    let z = acc + b[j];
                    if z > 0.0 {
                        z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Multi-head attention evaluated with dense masks.
/// Returns `(output, alpha[head][i][j])`.
pub fn dense_gat(
    h: &[Vec<f64>],
    nbrs: &[Vec<usize>],
    w: &[Vec<f64>],
    att: &[Vec<f64>],
    heads: usize,
    slope: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = h.len();
    let width = w[0].len();
    let hd = width / heads;
    let z: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..width).map(|j| (0..h[i].len()).map(|k| h[i][k] * w[k][j]).sum()).collect())
        .collect();
    let mut out = vec![vec![0.0; width]; n];
    let mut alphas = vec![vec![vec![0.0; n]; n]; heads];
    for k in 0..heads {
        let off = k * hd;
        for i in 0..n {
            let mask: Vec<bool> = (0..n).map(|j| j == i || nbrs[i].contains(&j)).collect();
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    let e: f64 = (0..hd).map(|t| att[k][t] * z[i][off + t] + att[k][hd + t] * z[j][off + t]).sum();
                    if e > 0.0 {
                        e
                    } else {
                        slope * e
                    }
                })
                .collect();
            let max = (0..n).filter(|&j| mask[j]).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&j| mask[j]).map(|j| (scores[j] - max).exp()).sum();
            for j in (0..n).filter(|&j| mask[j]) {
                alphas[k][i][j] = (scores[j] - max).exp() / denom;
            }
            for t in 0..hd {
                let v: f64 = (0..n).map(|j| alphas[k][i][j] * z[j][off + t]).sum();
                out[i][off + t] = if v > 0.0 { v } else { v.exp() - 1.0 };
            }
        }
    }
    (out, alphas)
}

/// Per-class counting reference for macro metrics.
pub fn counting_metrics(t: &[usize], p: &[usize]) -> (f64, f64, f64, f64) {
    let classes: BTreeSet<usize> = t.iter().copied().collect();
    let (mut pre, mut rec, mut f1) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let tp = t.iter().zip(p).filter(|(&a, &b)| a == c && b == c).count() as f64;
        let fp = t.iter().zip(p).filter(|(&a, &b)| a != c && b == c).count() as f64;
        let fnn = t.iter().zip(p).filter(|(&a, &b)| a == c && b != c).count() as f64;
        let pc = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let rc = if tp + fnn == 0.0 { 0.0 } else { tp / (tp + fnn) };
        pre += pc;
        rec += rc;
        f1 += if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
    }
    let k = classes.len() as f64;
    let acc = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
    (pre / k, rec / k, f1 / k, acc)
}

const STEP: f64 = 1e-5;

/// Relative error per parameter group between analytic and central
/// finite-difference gradients. `coords` limits how many entries per group
/// are probed (all when `None`).
pub fn gradient_errors(cfg: ModelConfig, seed: u64, coords: Option<usize>) -> Vec<(String, f64)> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut model = GraphSat::<f64>::new(cfg, seed).unwrap();
    // move biases off zero so every path carries gradient
    for t in model.params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let graphs: Vec<_> = (0..3).map(|i| random_graph(&mut rng, 4 + 3 * i, cfg.input_dim, 0.4)).collect();
    let batch: Vec<_> = graphs
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let nb = Neighborhoods::sample(&g.adjacency(), &cfg, &mut rng);
            (g, i % cfg.num_classes, nb, vec![1.0; cfg.hidden])
        })
        .collect();
    let (_, analytic) = model.loss_with(&batch).unwrap();
    let names: Vec<&str> = cfg.shapes().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::new();
    for (gi, name) in names.iter().enumerate() {
        let len = analytic.tensors()[gi].as_slice().len();
        let picks: Vec<usize> = match coords {
            Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let (mut diff, mut norm_a, mut norm_n) = (0.0f64, 0.0f64, 0.0f64);
        for &k in &picks {
            let orig = model.params.tensors()[gi].as_slice()[k];
            model.params.tensors_mut()[gi].as_mut_slice()[k] = orig + STEP;
            let plus = model.loss_with(&batch).unwrap().0;
            model.params.tensors_mut()[gi].as_mut_slice()[k] = orig - STEP;
            let minus = model.loss_with(&batch).unwrap().0;
            model.params.tensors_mut()[gi].as_mut_slice()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.tensors()[gi].as_slice()[k];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        let denom = norm_a.sqrt() + norm_n.sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push((name.to_string(), rel));
    }
    out
}
