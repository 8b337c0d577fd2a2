mod common;

use common::*;
use flowgraph_core::graph::{build_flow_graph, EdgeKind};
use flowgraph_core::FeatureSet;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn golden_traces_match_brute_force() {
    let traces = golden_traces();
    assert!(traces.len() >= 20);
    for t in &traces {
        let g = build_flow_graph(&trace_flow(t), &FeatureSet::all()).unwrap();
        assert_eq!(g.num_nodes, t.packets.len(), "{}", t.name);
        assert_eq!(edge_set(&g), oracle_edges(t), "{}", t.name);
    }
}

#[test]
fn hand_traced_cases() {
    let by_name = |n: &str| golden_traces().into_iter().find(|t| t.name == n).unwrap();
    let edges = |n: &str| edge_set(&build_flow_graph(&trace_flow(&by_name(n)), &FeatureSet::all()).unwrap());
    use EdgeKind::*;
    assert_eq!(
        edges("shared cumulative ack").into_iter().collect::<Vec<_>>(),
        vec![(0, 1, Window), (0, 2, Ack), (1, 2, Ack)]
    );
    let chat = edges("exact-ack chat");
    assert_eq!(chat.iter().filter(|e| e.2 == Window).count(), 0);
    assert_eq!(chat.iter().filter(|e| e.2 == Ack).count(), 4);
    assert!(edges("one-way flood").iter().all(|e| e.2 == Window));
    assert_eq!(
        edges("udp run then reply").into_iter().collect::<Vec<_>>(),
        vec![(0, 1, Window), (1, 2, Ack), (2, 3, Ack)]
    );
    assert_eq!(edges("udp alternation").len(), 3);
    let mixed = edges("udp mixed runs");
    assert!(mixed.contains(&(0, 1, Window)) && mixed.contains(&(1, 2, Window)) && !mixed.contains(&(0, 2, Window)));
    assert!(edges("udp one direction").iter().all(|e| e.2 == Window));
    // the retransmitted copy does not get its own edge
    assert_eq!(
        edges("retransmission").into_iter().filter(|e| e.2 == Ack).collect::<Vec<_>>(),
        vec![(0, 2, Ack), (3, 4, Ack)]
    );
}

#[test]
fn edges_respect_direction_constraints() {
    for t in golden_traces() {
        let flow = trace_flow(&t);
        let g = build_flow_graph(&flow, &FeatureSet::all()).unwrap();
        g.validate().unwrap();
        for e in &g.edges {
            let same = g.directions[e.a] == g.directions[e.b];
            match e.kind {
                EdgeKind::Window => {
                    assert!(same && e.b == e.a + 1, "{}", t.name);
                    if !t.udp {
                        assert_eq!(flow.packets[e.a].tcp_ack, flow.packets[e.b].tcp_ack);
                    }
                }
                EdgeKind::Ack => assert!(!same, "{}", t.name),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn random_conversations_match_brute_force(seed in any::<u64>(), len in 2usize..40) {
        let t = random_tcp_trace(&mut StdRng::seed_from_u64(seed), len);
        let g = build_flow_graph(&trace_flow(&t), &FeatureSet::all()).unwrap();
        prop_assert_eq!(edge_set(&g), oracle_edges(&t));
    }

    #[test]
    fn construction_is_pure(seed in any::<u64>()) {
        let t = random_tcp_trace(&mut StdRng::seed_from_u64(seed), 20);
        let flow = trace_flow(&t);
        let fs = FeatureSet::new(vec![0, 3, 30]).unwrap();
        let g = build_flow_graph(&flow, &fs).unwrap();
        prop_assert_eq!(&g, &build_flow_graph(&flow, &fs).unwrap());
        prop_assert_eq!(g.dim, 3);
        prop_assert!(g.edges.len() <= g.num_nodes * (g.num_nodes - 1));
    }
}
