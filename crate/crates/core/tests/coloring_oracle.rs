use std::collections::BTreeSet;

use porenet::coloring::{node_coloring, validate_pattern, EdgeKind, KindColoring, NodeKind};
use porenet::crystal::Permutation;
use porenet::dataset::builtin_framework;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::coloring::*;

#[test]
fn shipped_frameworks_match_union_find_oracle() {
    for (name, counts) in [("MOR", [4, 2, 14, 5, 5]), ("MFI", [12, 3, 48, 32, 32])] {
        let fw = builtin_framework(name).unwrap();
        let pattern = fw.sharing_pattern(true).unwrap();
        assert_matches_oracle(&pattern, name);
        assert!(validate_pattern(&pattern).is_empty());
        let e = &pattern.edges;
        let found = [
            pattern.nodes.atoms.count,
            pattern.nodes.pores.count,
            e.atom_atom.count,
            e.pore_atom.count,
            e.atom_pore.count,
        ];
        assert_eq!(found, counts, "{name}");
    }
}

#[test]
fn fuzzed_groups_match_oracle_and_validate() {
    for seed in 0..100 {
        let f = fuzz_case(seed);
        let pattern = derive(&f, &f.group);
        assert_matches_oracle(&pattern, &format!("seed {seed}"));
        assert!(validate_pattern(&pattern).is_empty(), "seed {seed}: violations");

        let g = f.group.len();
        for sizes in [pattern.nodes.atoms.class_sizes(), pattern.nodes.pores.class_sizes()] {
            assert!(sizes.iter().all(|s| g % s == 0), "seed {seed}: node class size");
        }
        for kind in EdgeKind::ALL {
            assert!(pattern.edges.get(kind).class_sizes().iter().all(|s| g % s == 0), "seed {seed}: edge class size");
        }

        // Subgroup generated by the first generator refines the full coloring.
        let sub = close(&f.gens[..1], f.n_atoms + f.n_pores, 16).unwrap();
        let sub_pattern = derive(&f, &sub);
        for (fine, coarse) in kind_colors(&sub_pattern).iter().zip(kind_colors(&pattern)) {
            assert!(refines(fine, &coarse), "seed {seed}: subgroup coloring does not refine");
        }

        // Trivial subgroup: one color per node and per edge.
        let trivial = derive(&f, &[(0..f.n_atoms + f.n_pores).collect()]);
        assert_eq!(trivial.nodes.atoms.count, f.n_atoms);
        assert_eq!(trivial.nodes.pores.count, f.n_pores);
        for kind in EdgeKind::ALL {
            assert_eq!(trivial.edges.get(kind).count, f.edges.get(kind).len());
        }
    }
}

#[test]
fn global_colors_keep_kinds_apart() {
    let fw = builtin_framework("MOR").unwrap();
    let p = fw.sharing_pattern(true).unwrap();
    let atom: BTreeSet<usize> = (0..p.n_atoms()).map(|i| p.nodes.color(NodeKind::Atom, i)).collect();
    let pore: BTreeSet<usize> = (0..p.n_pores()).map(|i| p.nodes.color(NodeKind::Pore, i)).collect();
    assert!(atom.is_disjoint(&pore));
    let ranges: Vec<std::ops::Range<usize>> =
        EdgeKind::ALL.iter().map(|&k| p.edges.offset(k)..p.edges.offset(k) + p.edges.get(k).count).collect();
    for a in 0..3 {
        for b in (a + 1)..3 {
            assert!(ranges[a].end <= ranges[b].start || ranges[b].end <= ranges[a].start);
        }
    }
}

fn cyclic_shift(n: usize, k: usize) -> Permutation {
    Permutation::new((0..n).map(|i| (i + k) % n).collect()).unwrap()
}

proptest! {
    #[test]
    fn node_color_count_ignores_relabeling(n in 2usize..24, step in 1usize..6, relabel in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(relabel);
        let k = step % n;
        let group: Vec<Permutation> = (0..n).map(|j| cyclic_shift(n, (j * k) % n)).collect();
        let base: KindColoring = node_coloring(&group, n).unwrap();
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(&mut rng);
        let sigma = Permutation::new(map).unwrap();
        let conj: Vec<Permutation> = group.iter().map(|g| sigma.compose(g).compose(&sigma.inverse())).collect();
        let relabeled = node_coloring(&conj, n).unwrap();
        prop_assert_eq!(base.count, relabeled.count);
        let moved: Vec<usize> = (0..n).map(|i| relabeled.colors[sigma.get(i)]).collect();
        prop_assert!(same_partition(&base.colors, &moved));
    }
}
