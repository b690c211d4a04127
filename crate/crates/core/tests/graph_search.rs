mod common;

use std::collections::HashSet;
use std::sync::OnceLock;

use annserve_core::embed::dot;
use annserve_core::graph::*;
use annserve_core::vectors::{VectorSet, VectorSource};
use annserve_core::Error;
use common::*;

struct Fixture {
    graph: VamanaGraph,
    queries: VectorSet,
    truth: Vec<Vec<(u64, f32)>>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (data, queries) = ten_k();
        let truth = queries.iter().map(|q| brute_force(&data, q, 10)).collect();
        let graph = build_vamana(data, &VamanaParams::new(32, 64, 1.2, 7)).unwrap();
        Fixture {
            graph,
            queries,
            truth,
        }
    })
}

fn mean_recall<G: GraphView>(g: &G, f: &Fixture, l: usize, w: usize) -> f64 {
    mean(f.queries.iter().zip(&f.truth).map(|(q, t)| {
        recall(&beam_search(g, q, &BeamSearchParams::new(l, w, 10)).unwrap(), t)
    }))
}

/// Single-expansion greedy best-first search written from scratch: keep the
/// best `l` seen, expand the best unexpanded one, stop when none remain.
fn greedy_reference<G: GraphView>(g: &G, q: &[f32], l: usize) -> Vec<(u64, f32)> {
    let mut visited = HashSet::from([g.entry_point()]);
    let mut list = vec![(g.entry_point(), dot(q, g.vector(g.entry_point())), false)];
    loop {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(l);
        let Some(next) = list.iter_mut().find(|c| !c.2) else {
            break;
        };
        next.2 = true;
        let node = next.0;
        for &nb in g.neighbors(node) {
            if visited.insert(nb) {
                list.push((nb, dot(q, g.vector(nb)), false));
            }
        }
    }
    list.iter().map(|c| (c.0 as u64, c.1)).collect()
}

#[test]
fn structure_of_10k_build() {
    let g = &fixture().graph;
    assert!(g.max_degree() <= 32);
    for (i, nbrs) in g.adjacency().iter().enumerate() {
        let set: HashSet<_> = nbrs.iter().collect();
        assert_eq!(set.len(), nbrs.len());
        assert!(!set.contains(&(i as u32)));
        assert!(nbrs.iter().all(|&n| (n as usize) < g.len()));
    }
    assert_eq!(reachable_fraction(g), 1.0);
}

#[test]
fn recall_at_l64_w4() {
    let r = mean_recall(&fixture().graph, fixture(), 64, 4);
    assert!(r >= 0.95, "recall@10 {r}");
}

#[test]
fn recall_monotone_in_l() {
    let f = fixture();
    let sweep: Vec<f64> = [16, 32, 64, 128].iter().map(|&l| mean_recall(&f.graph, f, l, 4)).collect();
    for pair in sweep.windows(2) {
        assert!(pair[1] >= pair[0] - 0.01, "{sweep:?}");
    }
}

#[test]
fn exhaustive_l_matches_brute_force() {
    let f = fixture();
    let n = f.graph.len();
    for (q, t) in f.queries.iter().zip(&f.truth) {
        let hits = beam_search(&f.graph, q, &BeamSearchParams::new(n, 4, 10)).unwrap();
        assert_eq!(&hits, t);
    }
}

#[test]
fn scores_are_exact_and_sorted() {
    let f = fixture();
    for q in f.queries.iter().take(20) {
        let hits = beam_search(&f.graph, q, &BeamSearchParams::new(32, 4, 10)).unwrap();
        assert_eq!(hits.len(), 10);
        for (id, s) in &hits {
            assert!((s - dot(q, f.graph.vectors().row(*id as usize))).abs() <= 1e-5);
        }
        assert!(hits.windows(2).all(|p| p[0].1 >= p[1].1));
    }
}

#[test]
fn indexed_vector_finds_itself() {
    let g = &fixture().graph;
    for id in [0usize, 1234, 9999] {
        let hits = beam_search(g, g.vectors().row(id), &BeamSearchParams::new(64, 4, 10)).unwrap();
        assert_eq!(hits[0].0, id as u64);
        assert!((hits[0].1 - 1.0).abs() < 1e-4);
    }
}

#[test]
fn beam_width_one_is_greedy_best_first() {
    let f = fixture();
    for q in f.queries.iter() {
        for l in [10, 40] {
            let hits = beam_search(&f.graph, q, &BeamSearchParams::new(l, 1, l)).unwrap();
            assert_eq!(hits, greedy_reference(&f.graph, q, l));
        }
    }
}

#[test]
fn mmap_serving_is_bit_identical() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.vmna");
    f.graph.save(&path).unwrap();
    let served = MmapGraph::open(&path).unwrap();
    assert_eq!(served.entry_point(), f.graph.entry_point());
    for q in f.queries.iter() {
        let p = BeamSearchParams::new(64, 4, 10);
        let a = beam_search(&f.graph, q, &p).unwrap();
        let b = beam_search(&served, q, &p).unwrap();
        assert_eq!(
            a.iter().map(|(i, s)| (*i, s.to_bits())).collect::<Vec<_>>(),
            b.iter().map(|(i, s)| (*i, s.to_bits())).collect::<Vec<_>>()
        );
    }
    assert_eq!(VamanaGraph::load(&path).unwrap(), f.graph);
}

#[test]
fn corrupted_adjacency_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.vmna");
    f.graph.save(&path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // first neighbor slot of node 5
    let rec = 64 * 4 + 4 + 32 * 4;
    let at = HEADER_LEN + 5 * rec + 64 * 4 + 4;
    bytes[at] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(MmapGraph::open(&path), Err(Error::CorruptIndex { .. })));

    bytes[at] ^= 0x01;
    bytes[4] = 99;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(MmapGraph::open(&path), Err(Error::Version { found: 99, .. })));
}

#[test]
fn same_seed_same_adjacency() {
    let (data, _) = annserve_core::synth::clustered(2000, 1, 32, 3);
    let p = VamanaParams::new(16, 32, 1.2, 11);
    let a = build_vamana(data.clone(), &p).unwrap();
    let b = build_vamana(data, &p).unwrap();
    assert_eq!(a.adjacency(), b.adjacency());
    assert_eq!(a.entry_point(), b.entry_point());
}
