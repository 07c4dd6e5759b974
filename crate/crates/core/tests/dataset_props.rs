use std::collections::{BTreeSet, HashSet};

use porenet::dataset::{
    builtin_framework, parse_configurations, parse_framework, read_split_manifest, shuffle_indices, split,
    synth_generate, write_configurations_to, write_framework, write_split_manifest_to, Dataset, DatasetError,
    LabeledConfig, SynthOracle,
};
use porenet::graph::{Occupancy, Pore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reference SplitMix64 stream and Fisher–Yates, written from the published
/// constants.
fn reference_shuffle(n: usize, seed: u64) -> Vec<usize> {
    let mut state = seed;
    let mut next = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((next() as u128 * (i as u128 + 1)) >> 64) as usize;
        v.swap(i, j);
    }
    v
}

fn dataset(n: usize) -> Dataset {
    let configs = (0..n)
        .map(|i| LabeledConfig {
            id: format!("x{i}"),
            occupancy: Occupancy::from_al_sites(4, &[i % 4]),
            hoa: -(i as f64),
        })
        .collect();
    Dataset::new("toy", configs)
}

fn arb_configs() -> impl Strategy<Value = Vec<LabeledConfig>> {
    prop::collection::vec((prop::collection::vec(any::<bool>(), 48), -60.0f64..0.0), 0..30).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (al, hoa))| {
                let sites: Vec<usize> = al.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k).collect();
                LabeledConfig { id: format!("cfg-{i}"), occupancy: Occupancy::from_al_sites(48, &sites), hoa }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn shuffle_matches_reference_splitmix(n in 0usize..300, seed in any::<u64>()) {
        prop_assert_eq!(shuffle_indices(n, seed), reference_shuffle(n, seed));
    }

    #[test]
    fn split_is_a_partition_with_floor_size(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let ds = split(&dataset(n), frac, seed).unwrap();
        let s = ds.split.as_ref().unwrap();
        prop_assert_eq!(s.train.len(), (frac * n as f64).floor() as usize);
        prop_assert_eq!(s.train.len() + s.test.len(), n);
        let all: HashSet<&String> = s.train.iter().chain(&s.test).collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(split(&dataset(n), frac, seed).unwrap(), ds.clone());
        // Manifest round trip.
        let mut buf = Vec::new();
        write_split_manifest_to(&mut buf, s).unwrap();
        prop_assert_eq!(&read_split_manifest(buf.as_slice(), seed).unwrap(), s);
    }

    #[test]
    fn configurations_round_trip_exactly(configs in arb_configs()) {
        let mut buf = Vec::new();
        write_configurations_to(&mut buf, &configs).unwrap();
        let back = parse_configurations(buf.as_slice(), 48).unwrap();
        prop_assert_eq!(back.len(), configs.len());
        for (a, b) in back.iter().zip(&configs) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(&a.occupancy, &b.occupancy);
            prop_assert_eq!(a.hoa.to_bits(), b.hoa.to_bits());
        }
    }
}

#[test]
fn different_seeds_give_different_orders() {
    let a = split(&dataset(100), 0.9, 1).unwrap();
    let b = split(&dataset(100), 0.9, 2).unwrap();
    assert_ne!(a.split.unwrap().train, b.split.unwrap().train);
}

#[test]
fn framework_text_round_trips() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let text = write_framework(&fw);
        let back = parse_framework(&text).unwrap();
        assert_eq!(write_framework(&back), text, "{name}");
        assert_eq!(back.n_sites(), fw.n_sites());
        assert_eq!(back.group().order(), fw.group().order());
        assert_eq!(back.bonds(), fw.bonds());
        let centers = |ps: &[Pore]| ps.iter().map(|p| (p.boundary.clone(), p.area.to_bits())).collect::<Vec<_>>();
        assert_eq!(centers(back.pores()), centers(fw.pores()));
    }
}

#[test]
fn unclosed_bond_list_is_rejected_naming_the_bond() {
    let text = write_framework(&builtin_framework("MOR").unwrap());
    // Keep only the first explicit bond.
    let mut out = String::new();
    let mut in_bonds = false;
    let mut kept = false;
    for line in text.lines() {
        let head = line.split_whitespace().next().unwrap_or("");
        if in_bonds && head.chars().all(|c| c.is_ascii_digit()) && !head.is_empty() {
            if !kept {
                out.push_str(line);
                out.push('\n');
                kept = true;
            }
            continue;
        }
        in_bonds = head == "bonds" || (in_bonds && head.is_empty());
        out.push_str(line);
        out.push('\n');
    }
    if !text.contains("\nbonds") {
        out.push_str("bonds\n0 1\n");
    }
    let err = parse_framework(&out).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, DatasetError::Framework(_)), "{msg}");
    assert!(msg.contains("bond"), "{msg}");
}

#[test]
fn single_al_labels_take_one_value_per_atom_orbit() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let pattern = fw.sharing_pattern(true).unwrap();
        for pore_term in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let oracle = SynthOracle::sample(&pattern, pore_term, 0.0, &mut rng);
            let n = fw.n_sites();
            let values: Vec<f64> =
                (0..n).map(|i| oracle.label(&pattern, &Occupancy::from_al_sites(n, &[i])) - oracle.c0).collect();
            let distinct: BTreeSet<u64> = values.iter().map(|v| v.to_bits()).collect();
            if pore_term {
                // The pore term can only merge or keep classes, never split them.
                assert!(distinct.len() <= pattern.nodes.atoms.count);
            } else {
                assert_eq!(distinct.len(), pattern.nodes.atoms.count, "{name}");
            }
            assert_eq!(oracle.label(&pattern, &Occupancy::all_silicon(n)), oracle.c0);
        }
    }
}

#[test]
fn synthetic_labels_are_exactly_invariant() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let pattern = fw.sharing_pattern(true).unwrap();
        let (oracle, configs) = synth_generate(&pattern, 100, 24, 5, 0.0, true);
        for (k, c) in configs.iter().enumerate() {
            let g = &pattern.atom_perms[k % pattern.group_order()];
            let moved = oracle.label(&pattern, &c.occupancy.permuted(g));
            assert_eq!(moved.to_bits(), c.hoa.to_bits(), "{name} config {k}");
        }
        assert!(configs.iter().all(|c| c.occupancy.al_count() <= 24));
    }
}

#[test]
fn row_errors_name_the_row() {
    let ok = format!("id,occupancy,hoa\nc1,{},-20.5\n", "S".repeat(48));
    let rows = parse_configurations(ok.as_bytes(), 48).unwrap();
    assert_eq!(rows[0].occupancy.al_count(), 0);
    let short = format!("id,occupancy,hoa\nc1,{},-20.5\nc2,{},-1\n", "S".repeat(48), "S".repeat(47));
    match parse_configurations(short.as_bytes(), 48).unwrap_err() {
        DatasetError::Row { row, .. } => assert_eq!(row, 2),
        e => panic!("unexpected {e}"),
    }
    let nan = format!("id,occupancy,hoa\nc1,{},NaN\n", "S".repeat(48));
    assert!(matches!(parse_configurations(nan.as_bytes(), 48), Err(DatasetError::Row { row: 1, .. })));
    let bad = format!("id,occupancy,hoa\nc1,{}X,-1\n", "S".repeat(47));
    assert!(matches!(parse_configurations(bad.as_bytes(), 48), Err(DatasetError::Row { row: 1, .. })));
}
