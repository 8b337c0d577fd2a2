//! Per-flow graphs: packets are nodes, window and acknowledgment
//! relationships are edges.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::ingest::{Direction, Flow, PacketRecord, Transport};

pub const GRAPH_DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Window,
    Ack,
}

/// Undirected edge; `a < b` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize, EdgeKind)", into = "(usize, usize, EdgeKind)")]
pub struct GraphEdge {
    pub a: usize,
    pub b: usize,
    pub kind: EdgeKind,
}

impl GraphEdge {
    pub fn new(i: usize, j: usize, kind: EdgeKind) -> Self {
        debug_assert_ne!(i, j);
        GraphEdge {
            a: i.min(j),
            b: i.max(j),
            kind,
        }
    }
}

impl From<(usize, usize, EdgeKind)> for GraphEdge {
    fn from((i, j, kind): (usize, usize, EdgeKind)) -> Self {
        GraphEdge::new(i, j, kind)
    }
}

impl From<GraphEdge> for (usize, usize, EdgeKind) {
    fn from(e: GraphEdge) -> Self {
        (e.a, e.b, e.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGraph {
    pub num_nodes: usize,
    pub dim: usize,
    /// Row-major `num_nodes × dim` node attribute matrix.
    pub attributes: Vec<f64>,
    pub directions: Vec<Direction>,
    pub edges: Vec<GraphEdge>,
    pub label: Option<String>,
    pub environment_label: Option<String>,
}

impl FlowGraph {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.attributes[i * self.dim..(i + 1) * self.dim]
    }

    /// Sorted, de-duplicated neighbor lists, ignoring edge kind.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![BTreeSet::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.a].insert(e.b);
            adj[e.b].insert(e.a);
        }
        adj.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Check the structural invariants: endpoints in range, no duplicates,
    /// window edges same-direction, ack edges opposite-direction.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::format("flow graph", msg));
        if self.attributes.len() != self.num_nodes * self.dim {
            return bad(format!(
                "attribute matrix has {} values for {}×{}",
                self.attributes.len(),
                self.num_nodes,
                self.dim
            ));
        }
        if self.directions.len() != self.num_nodes {
            return bad("direction count differs from node count".into());
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.a >= e.b || e.b >= self.num_nodes {
                return bad(format!("edge ({}, {}) out of range", e.a, e.b));
            }
            if !seen.insert(*e) {
                return bad(format!("duplicate edge ({}, {}, {:?})", e.a, e.b, e.kind));
            }
            let same = self.directions[e.a] == self.directions[e.b];
            match e.kind {
                EdgeKind::Window if !same => {
                    return bad(format!("window edge ({}, {}) crosses directions", e.a, e.b))
                }
                EdgeKind::Ack if same => {
                    return bad(format!("ack edge ({}, {}) within one direction", e.a, e.b))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Chain consecutive same-direction packets (TCP: also equal ack number).
pub fn build_window_edges(flow: &Flow) -> Vec<GraphEdge> {
    let tcp = flow.protocol() == Transport::Tcp;
    flow.packets
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].direction == w[1].direction && (!tcp || w[0].tcp_ack == w[1].tcp_ack))
        .map(|(i, _)| GraphEdge::new(i, i + 1, EdgeKind::Window))
        .collect()
}

/// `a <= b` in 32-bit sequence space.
pub fn seq_leq(a: u32, b: u32) -> bool {
    (b.wrapping_sub(a) as i32) >= 0
}

/// Cumulative acknowledgment matching.
///
/// Each data packet (one consuming sequence space) waits in a per-direction
/// pending list until an opposite-direction ACK packet whose acknowledgment
/// number reaches `seq + len` arrives; that pair becomes an edge. One
/// acknowledging packet may close many pending packets. When several pending
/// packets carry the same sequence range (retransmissions), only the first of
/// them gets the edge.
pub fn build_ack_edges_tcp(flow: &Flow) -> Vec<GraphEdge> {
    let mut pending: [Vec<(usize, u32, u32)>; 2] = [Vec::new(), Vec::new()];
    let mut edges = Vec::new();
    for (q, pkt) in flow.packets.iter().enumerate() {
        let dir = dir_index(pkt);
        if let Some(ack) = pkt.valid_ack() {
            let mut attached: Vec<(u32, u32)> = Vec::new();
            pending[1 - dir].retain(|&(p, seq, len)| {
                if !seq_leq(seq.wrapping_add(len), ack) {
                    return true;
                }
                if !attached.contains(&(seq, len)) {
                    attached.push((seq, len));
                    edges.push(GraphEdge::new(p, q, EdgeKind::Ack));
                }
                false
            });
        }
        let len = pkt.sequence_len();
        if let (Some(seq), true) = (pkt.tcp_seq, len > 0) {
            pending[dir].push((q, seq, len));
        }
    }
    edges
}

/// Timestamp-adjacent packets travelling in opposite directions.
pub fn build_ack_edges_udp(flow: &Flow) -> Vec<GraphEdge> {
    flow.packets
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].direction != w[1].direction)
        .map(|(i, _)| GraphEdge::new(i, i + 1, EdgeKind::Ack))
        .collect()
}

fn dir_index(p: &PacketRecord) -> usize {
    match p.direction {
        Direction::Forward => 0,
        Direction::Backward => 1,
    }
}

/// Build the graph of `flow` with node attributes projected onto `features`.
pub fn build_flow_graph(flow: &Flow, features: &FeatureSet) -> Result<FlowGraph> {
    if features.is_empty() {
        return Err(Error::Config("selected feature set is empty".into()));
    }
    let mut edges: BTreeSet<GraphEdge> = build_window_edges(flow).into_iter().collect();
    match flow.protocol() {
        Transport::Tcp => edges.extend(build_ack_edges_tcp(flow)),
        Transport::Udp => edges.extend(build_ack_edges_udp(flow)),
    }
    let attributes = flow
        .packets
        .iter()
        .flat_map(|p| p.attributes.project(features.indices()))
        .collect();
    Ok(FlowGraph {
        num_nodes: flow.packets.len(),
        dim: features.len(),
        attributes,
        directions: flow.packets.iter().map(|p| p.direction).collect(),
        edges: edges.into_iter().collect(),
        label: flow.label.clone(),
        environment_label: flow.environment_label.clone(),
    })
}

#[derive(Serialize)]
struct GraphLineRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    graph: &'a FlowGraph,
}

#[derive(Deserialize)]
struct GraphLine {
    format_version: u32,
    #[serde(flatten)]
    graph: FlowGraph,
}

pub fn write_graph_dataset<W: Write>(mut w: W, graphs: &[FlowGraph]) -> Result<()> {
    for graph in graphs {
        serde_json::to_writer(
            &mut w,
            &GraphLineRef {
                format_version: GRAPH_DATASET_VERSION,
                graph,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_graph_dataset<R: BufRead>(r: R) -> Result<Vec<FlowGraph>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphLine = serde_json::from_str(&line)
            .map_err(|e| Error::format("graph dataset", format!("line {}: {e}", n + 1)))?;
        if rec.format_version != GRAPH_DATASET_VERSION {
            return Err(Error::FormatVersion {
                what: "graph dataset",
                found: rec.format_version,
                expected: GRAPH_DATASET_VERSION,
            });
        }
        rec.graph.validate()?;
        out.push(rec.graph);
    }
    Ok(out)
}

pub fn save_graphs(path: &Path, graphs: &[FlowGraph]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_graph_dataset(std::io::BufWriter::new(f), graphs)
}
