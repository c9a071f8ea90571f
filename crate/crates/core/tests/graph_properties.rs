mod common;

use std::collections::BTreeMap;

use common::brute_force_knn;
use patient_gnn::autodiff::Tensor;
use patient_gnn::graph::{build_knn_graph_from, parse_graph, split_nodes, write_graph, SimilarityGraph, Split, SplitSpec};
use proptest::collection::vec;
use proptest::prelude::*;

fn vectors(max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (5..=max_n, 1usize..6).prop_flat_map(|(n, d)| {
        vec(
            vec(prop_oneof![-1.0f64..1.0, (-2i8..3).prop_map(f64::from)], d)
                .prop_filter("non-zero", |v| v.iter().any(|x| *x != 0.0)),
            n,
        )
    })
}

fn graph_of(rows: &[Vec<f64>], k: usize) -> SimilarityGraph {
    let n = rows.len();
    build_knn_graph_from(
        (0..n).map(|i| format!("p{i}")).collect(),
        Tensor::from_rows(rows).unwrap(),
        (0..n).map(|i| (i % 2) as u8).collect(),
        k,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn knn_equals_brute_force(rows in vectors(60), k in 1usize..4) {
        prop_assume!(k < rows.len());
        let g = graph_of(&rows, k);
        let got: BTreeMap<(usize, usize), f64> = g.edges().map(|(u, v, s)| ((u, v), s)).collect();
        prop_assert_eq!(got, brute_force_knn(&rows, k));
    }

    #[test]
    fn knn_structure(rows in vectors(40), k in 1usize..4) {
        prop_assume!(k < rows.len());
        let g = graph_of(&rows, k);
        let n = g.n();
        prop_assert!(g.num_edges() >= n * k / 2 && g.num_edges() <= n * k);
        for v in 0..n {
            prop_assert!(g.degree(v) >= k);
            prop_assert!(!g.neighbors(v).contains(&v));
            for &u in g.neighbors(v) {
                prop_assert!(g.has_edge(u, v));
            }
        }
    }

    #[test]
    fn stratified_split_is_proportional(n in 20usize..400, pos_frac in 0.1f64..0.6, seed in any::<u64>()) {
        let pos = ((n as f64 * pos_frac) as usize).max(3);
        let g = SimilarityGraph::from_edges(
            (0..n).map(|i| i.to_string()).collect(),
            Tensor::zeros(n, 1),
            (0..n).map(|i| u8::from(i < pos)).collect(),
            1,
            &[],
        ).unwrap();
        let spec = SplitSpec { seed, ..SplitSpec::default() };
        let s = split_nodes(&g, &spec).unwrap();
        let mut total = 0;
        for (split, frac) in Split::ALL.iter().zip([0.6, 0.2, 0.2]) {
            let nodes = s.nodes_in(*split).unwrap();
            total += nodes.len();
            prop_assert!((nodes.len() as f64 - n as f64 * frac).abs() <= 1.0);
            let p = nodes.iter().filter(|&&v| s.labels()[v] == 1).count() as f64;
            prop_assert!((p - pos as f64 * nodes.len() as f64 / n as f64).abs() <= 1.0);
        }
        prop_assert_eq!(total, n);
        // same seed, same split
        prop_assert_eq!(split_nodes(&g, &spec).unwrap(), s);
    }

    #[test]
    fn graph_text_round_trip(seed in 0u64..1000) {
        let g = common::random_graph(seed, 12, 3, 0.3);
        let mut buf = Vec::new();
        write_graph(&g, &mut buf).unwrap();
        prop_assert_eq!(parse_graph(&buf[..], "mem").unwrap(), g);
    }
}

#[test]
fn table_scale_split_sizes() {
    let n = 4760;
    let g = SimilarityGraph::from_edges(
        (0..n).map(|i| i.to_string()).collect(),
        Tensor::zeros(n, 1),
        (0..n).map(|i| u8::from(i < 1062)).collect(),
        1,
        &[],
    )
    .unwrap();
    let s = split_nodes(&g, &SplitSpec::default()).unwrap();
    let sizes: Vec<usize> = Split::ALL.iter().map(|&x| s.nodes_in(x).unwrap().len()).collect();
    assert_eq!(sizes, [2856, 952, 952]);
}
