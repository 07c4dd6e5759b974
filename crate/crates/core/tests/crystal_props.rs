use num_rational::Rational64;
use porenet::crystal::{
    apply_symmetry, close_group, compose, induced_site_permutation, min_image_distance, orbit_of_point,
    wrap_fractional, FracCoord, Lattice, Permutation, SymOp, DEFAULT_MAX_ORDER, TAU_SITE,
};
use porenet::dataset::builtin_framework;
use proptest::prelude::*;

fn circ(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 1.0;
    d.min(1.0 - d)
}

fn close_points(a: &FracCoord, b: &FracCoord, tol: f64) -> bool {
    (0..3).all(|k| circ(a[k], b[k]) <= tol)
}

/// Signed permutation matrices with determinant ±1: the point-group part of
/// every orthorhombic operation and then some.
fn signed_perm() -> impl Strategy<Value = [[i64; 3]; 3]> {
    (Just([0usize, 1, 2]).prop_shuffle(), prop::array::uniform3(prop::bool::ANY)).prop_map(|(p, s)| {
        let mut w = [[0i64; 3]; 3];
        for r in 0..3 {
            w[r][p[r]] = if s[r] { -1 } else { 1 };
        }
        w
    })
}

fn rational_translation() -> impl Strategy<Value = [Rational64; 3]> {
    prop::array::uniform3((0i64..24, prop::sample::select(vec![1i64, 2, 3, 4, 6, 8, 12, 24])))
        .prop_map(|t| t.map(|(n, d)| Rational64::new(n % d, d)))
}

fn sym_op() -> impl Strategy<Value = SymOp> {
    (signed_perm(), rational_translation()).prop_map(|(w, t)| SymOp::new(w, t).unwrap())
}

fn frac() -> impl Strategy<Value = FracCoord> {
    prop::array::uniform3(0.0f64..1.0).prop_map(|v| wrap_fractional(v).unwrap())
}

proptest! {
    #[test]
    fn wrap_lands_in_unit_interval_and_ignores_integer_shifts(
        v in prop::array::uniform3(-50.0f64..50.0),
        k in prop::array::uniform3(-5i32..5),
    ) {
        let w = wrap_fractional(v).unwrap();
        let shifted = wrap_fractional([v[0] + k[0] as f64, v[1] + k[1] as f64, v[2] + k[2] as f64]).unwrap();
        for c in 0..3 {
            prop_assert!((0.0..1.0).contains(&w[c]));
            prop_assert!(circ(w[c], v[c] - v[c].floor()) < 1e-9);
        }
        prop_assert!(close_points(&w, &shifted, 1e-9));
        prop_assert_eq!(wrap_fractional(w.components()).unwrap(), w);
    }

    #[test]
    fn compose_is_associative(a in sym_op(), b in sym_op(), c in sym_op()) {
        prop_assert_eq!(compose(&a, &compose(&b, &c)), compose(&compose(&a, &b), &c));
    }

    #[test]
    fn compose_agrees_with_sequential_application(g in sym_op(), h in sym_op(), x in frac()) {
        let direct = apply_symmetry(&compose(&g, &h), &x);
        let sequential = apply_symmetry(&g, &apply_symmetry(&h, &x));
        prop_assert!(close_points(&direct, &sequential, 1e-9));
    }

    #[test]
    fn inverse_composes_to_identity(g in sym_op()) {
        let inv = g.inverse().unwrap();
        prop_assert!(compose(&g, &inv).is_identity());
        prop_assert!(compose(&inv, &g).is_identity());
    }

    #[test]
    fn min_image_distance_is_a_metric_on_orthorhombic_cells(
        abc in prop::array::uniform3(3.0f64..25.0),
        x in frac(), y in frac(), z in frac(),
        k in prop::array::uniform3(-3i32..3),
    ) {
        let lat = Lattice::orthorhombic(abc[0], abc[1], abc[2]).unwrap();
        let dxy = min_image_distance(&lat, &x, &y);
        prop_assert!((dxy - min_image_distance(&lat, &y, &x)).abs() < 1e-12);
        let shifted = FracCoord::new([x[0] + k[0] as f64, x[1] + k[1] as f64, x[2] + k[2] as f64]).unwrap();
        prop_assert!((min_image_distance(&lat, &shifted, &y) - dxy).abs() < 1e-9);
        prop_assert!(dxy <= min_image_distance(&lat, &x, &z) + min_image_distance(&lat, &z, &y) + 1e-9);
        // Brute force over neighbouring images.
        let mut best = f64::INFINITY;
        for i in -1..=1 {
            for j in -1..=1 {
                for l in -1..=1 {
                    let d = [x[0] - y[0] + i as f64, x[1] - y[1] + j as f64, x[2] - y[2] + l as f64];
                    let c = [d[0] * abc[0], d[1] * abc[1], d[2] * abc[2]];
                    best = best.min((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt());
                }
            }
        }
        prop_assert!((best - dxy).abs() < 1e-9);
    }

    #[test]
    fn orbit_size_divides_group_order(x in frac()) {
        let fw = builtin_framework("MOR").unwrap();
        let g = fw.group();
        let orbit = orbit_of_point(g, &x, 1e-6);
        prop_assert!(!orbit.is_empty());
        prop_assert_eq!(g.order() % orbit.len(), 0);
    }
}

/// Order of the group generated by `gens`, enumerated on integer data:
/// translations scaled by 24 and reduced mod 24.
fn brute_force_order(gens: &[SymOp]) -> usize {
    type Op = ([[i64; 3]; 3], [i64; 3]);
    let to_int = |g: &SymOp| -> Op {
        let t = g.translation_part();
        let s = |r: Rational64| ((r * Rational64::from_integer(24)).to_integer()).rem_euclid(24);
        (*g.linear(), [s(t[0]), s(t[1]), s(t[2])])
    };
    let mul = |a: &Op, b: &Op| -> Op {
        let mut w = [[0i64; 3]; 3];
        let mut t = [0i64; 3];
        for r in 0..3 {
            for c in 0..3 {
                w[r][c] = (0..3).map(|k| a.0[r][k] * b.0[k][c]).sum();
            }
            t[r] = ((0..3).map(|k| a.0[r][k] * b.1[k]).sum::<i64>() + a.1[r]).rem_euclid(24);
        }
        (w, t)
    };
    let gens: Vec<Op> = gens.iter().map(to_int).collect();
    let mut seen: Vec<Op> = vec![([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0; 3])];
    let mut frontier = seen.clone();
    while let Some(x) = frontier.pop() {
        for g in &gens {
            let y = mul(g, &x);
            if !seen.contains(&y) {
                seen.push(y);
                frontier.push(y);
            }
        }
    }
    seen.len()
}

#[test]
fn three_mirrors_close_to_order_eight() {
    let mirrors = ["-x,y,z", "x,-y,z", "x,y,-z"].map(|s| SymOp::from_xyz(s).unwrap());
    let g = close_group(&mirrors, DEFAULT_MAX_ORDER).unwrap();
    assert_eq!(g.order(), brute_force_order(&mirrors));
    assert_eq!(g.order(), 8);
}

#[test]
fn shipped_groups_match_brute_force_closure() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let ops = fw.group().ops();
        assert_eq!(ops.len(), brute_force_order(ops), "{name}");
        for a in ops {
            for b in ops {
                assert!(fw.group().contains(&compose(a, b)), "{name}: {a} * {b} not in group");
            }
        }
    }
}

#[test]
fn generic_point_has_full_orbit_under_order_eight_group() {
    let mirrors = ["-x,y,z", "x,-y,z", "x,y,-z"].map(|s| SymOp::from_xyz(s).unwrap());
    let g = close_group(&mirrors, DEFAULT_MAX_ORDER).unwrap();
    let x = FracCoord::new([0.13, 0.27, 0.41]).unwrap();
    let orbit = orbit_of_point(&g, &x, 1e-6);
    // Direct enumeration of sign patterns.
    let mut direct: Vec<FracCoord> = Vec::new();
    for s in 0..8 {
        let sign = |bit: usize, v: f64| if s >> bit & 1 == 1 { -v } else { v };
        let p = FracCoord::new([sign(0, 0.13), sign(1, 0.27), sign(2, 0.41)]).unwrap();
        if !direct.iter().any(|q| close_points(q, &p, 1e-9)) {
            direct.push(p);
        }
    }
    assert_eq!(orbit.len(), 8);
    assert_eq!(direct.len(), 8);
    assert!(direct.iter().all(|p| orbit.iter().any(|q| close_points(p, q, 1e-9))));
}

#[test]
fn induced_permutations_form_a_homomorphic_image() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let ops = fw.group().ops();
        let perms: Vec<Permutation> =
            ops.iter().map(|g| induced_site_permutation(g, fw.sites(), TAU_SITE).unwrap()).collect();
        assert!(perms.iter().all(|p| p.len() == fw.n_sites()));
        for (a, pa) in ops.iter().zip(&perms) {
            for (b, pb) in ops.iter().zip(&perms) {
                let ab = induced_site_permutation(&compose(a, b), fw.sites(), TAU_SITE).unwrap();
                assert_eq!(ab, pa.compose(pb), "{name}: {a} * {b}");
                assert!(perms.contains(&ab));
            }
        }
    }
}

#[test]
fn group_elements_preserve_site_distances() {
    for name in ["MOR", "MFI"] {
        let fw = builtin_framework(name).unwrap();
        let sites = fw.sites().positions();
        for g in fw.group().ops() {
            for i in 0..sites.len() {
                for j in (i + 1)..sites.len() {
                    let d0 = min_image_distance(fw.lattice(), &sites[i], &sites[j]);
                    let d1 =
                        min_image_distance(fw.lattice(), &apply_symmetry(g, &sites[i]), &apply_symmetry(g, &sites[j]));
                    assert!((d0 - d1).abs() < 1e-9, "{name} {g}: {d0} vs {d1}");
                }
            }
        }
    }
}
