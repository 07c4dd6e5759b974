//! Brute-force union-find oracle for sharing patterns and a generator of
//! small random groups acting on atoms and pores.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use porenet::coloring::{EdgeKind, SharingPattern, TypedEdges};
use porenet::crystal::Permutation;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain union-find with path halving.
pub struct Dsu(Vec<usize>);

impl Dsu {
    pub fn new(n: usize) -> Self {
        Dsu((0..n).collect())
    }
    pub fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
    pub fn join(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
    }
}

/// Class label per item from the full action table `act[g][i]`.
pub fn oracle_classes(act: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut d = Dsu::new(n);
    for row in act {
        for (i, &j) in row.iter().enumerate() {
            d.join(i, j);
        }
    }
    (0..n).map(|i| d.find(i)).collect()
}

/// Two labelings describe the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.len() == b.len()
        && a.iter().zip(b).all(|(&x, &y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

pub fn edge_action(
    kind: EdgeKind,
    pa: &[Permutation],
    pp: &[Permutation],
    edges: &[(usize, usize)],
) -> Vec<Vec<usize>> {
    let index: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    pa.iter()
        .zip(pp)
        .map(|(a, p)| {
            edges
                .iter()
                .map(|&(s, r)| {
                    let image = match kind {
                        EdgeKind::AtomAtom => (a.get(s), a.get(r)),
                        EdgeKind::PoreAtom => (p.get(s), a.get(r)),
                        EdgeKind::AtomPore => (a.get(s), p.get(r)),
                    };
                    index[&image]
                })
                .collect()
        })
        .collect()
}

pub fn perm_table(perms: &[Permutation]) -> Vec<Vec<usize>> {
    perms.iter().map(|p| p.mapping().to_vec()).collect()
}

/// First disagreement between `pattern` and the oracle, if any.
pub fn oracle_mismatch(pattern: &SharingPattern) -> Option<String> {
    let (pa, pp) = (&pattern.atom_perms, &pattern.pore_perms);
    let atoms = oracle_classes(&perm_table(pa), pattern.n_atoms());
    if !same_partition(&atoms, &pattern.nodes.atoms.colors) {
        return Some("atom colors".into());
    }
    let pores = oracle_classes(&perm_table(pp), pattern.n_pores());
    if !same_partition(&pores, &pattern.nodes.pores.colors) {
        return Some("pore colors".into());
    }
    for kind in EdgeKind::ALL {
        let kc = pattern.edges.get(kind);
        let classes = oracle_classes(&edge_action(kind, pa, pp, &kc.edges), kc.edges.len());
        if !same_partition(&classes, &kc.colors) || kc.count != classes.iter().collect::<BTreeSet<_>>().len() {
            return Some(format!("{} edge colors", kind.tag()));
        }
    }
    None
}

pub fn assert_matches_oracle(pattern: &SharingPattern, what: &str) {
    if let Some(m) = oracle_mismatch(pattern) {
        panic!("{what}: {m}");
    }
}

/// Random permutation made of disjoint cycles of length ≤ 4 on `range`.
pub fn random_cycles(n_total: usize, range: std::ops::Range<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut map: Vec<usize> = (0..n_total).collect();
    let mut pts: Vec<usize> = range.collect();
    pts.shuffle(rng);
    let mut i = 0;
    while i < pts.len() {
        let len = rng.random_range(1..=4).min(pts.len() - i);
        for k in 0..len {
            map[pts[i + k]] = pts[i + (k + 1) % len];
        }
        i += len;
    }
    map
}

pub fn compose_maps(a: &[usize], b: &[usize]) -> Vec<usize> {
    b.iter().map(|&j| a[j]).collect()
}

/// Closure of generators acting on atoms ∪ pores, or None past `max`.
pub fn close(gens: &[Vec<usize>], n: usize, max: usize) -> Option<Vec<Vec<usize>>> {
    let mut seen = vec![(0..n).collect::<Vec<_>>()];
    let mut i = 0;
    while i < seen.len() {
        for g in gens {
            let y = compose_maps(g, &seen[i]);
            if !seen.contains(&y) {
                if seen.len() == max {
                    return None;
                }
                seen.push(y);
            }
        }
        i += 1;
    }
    Some(seen)
}

/// Union of the orbits of `seeds` under the pair action.
pub fn closed_edges(seeds: &[(usize, usize)], group: &[Vec<usize>], off_s: usize, off_r: usize) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for &(s, r) in seeds {
        for g in group {
            set.insert((g[s + off_s] - off_s, g[r + off_r] - off_r));
        }
    }
    set.into_iter().collect()
}

pub struct Fuzzed {
    pub group: Vec<Vec<usize>>,
    pub gens: Vec<Vec<usize>>,
    pub n_atoms: usize,
    pub n_pores: usize,
    pub edges: TypedEdges,
}

pub fn fuzz_case(seed: u64) -> Fuzzed {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n_atoms = rng.random_range(1..=24);
        let n_pores = rng.random_range(0..=6);
        let n = n_atoms + n_pores;
        let n_gens = rng.random_range(1..=3);
        let gens: Vec<Vec<usize>> = (0..n_gens)
            .map(|_| {
                let a = random_cycles(n, 0..n_atoms, &mut rng);
                let p = random_cycles(n, n_atoms..n, &mut rng);
                compose_maps(&a, &p)
            })
            .collect();
        let Some(group) = close(&gens, n, 16) else { continue };
        let mut h_seeds = Vec::new();
        for _ in 0..rng.random_range(0..=n_atoms) {
            let (i, j) = (rng.random_range(0..n_atoms), rng.random_range(0..n_atoms));
            if i != j {
                h_seeds.push((i, j));
            }
        }
        let mut k_seeds = Vec::new();
        let mut l_seeds = Vec::new();
        if n_pores > 0 {
            for _ in 0..rng.random_range(0..=n_atoms) {
                k_seeds.push((rng.random_range(0..n_pores), rng.random_range(0..n_atoms)));
                l_seeds.push((rng.random_range(0..n_atoms), rng.random_range(0..n_pores)));
            }
        }
        let edges = TypedEdges {
            atom_atom: closed_edges(&h_seeds, &group, 0, 0),
            pore_atom: closed_edges(&k_seeds, &group, n_atoms, 0),
            atom_pore: closed_edges(&l_seeds, &group, 0, n_atoms),
        };
        return Fuzzed { group, gens, n_atoms, n_pores, edges };
    }
}

pub fn split_perms(group: &[Vec<usize>], n_atoms: usize) -> (Vec<Permutation>, Vec<Permutation>) {
    let atoms = group.iter().map(|g| Permutation::new(g[..n_atoms].to_vec()).unwrap()).collect();
    let pores =
        group.iter().map(|g| Permutation::new(g[n_atoms..].iter().map(|&x| x - n_atoms).collect()).unwrap()).collect();
    (atoms, pores)
}

pub fn derive(f: &Fuzzed, group: &[Vec<usize>]) -> SharingPattern {
    let (pa, pp) = split_perms(group, f.n_atoms);
    SharingPattern::derive(pa, pp, f.n_atoms, f.n_pores, &f.edges).unwrap()
}

/// Every class of `coarse` is a union of classes of `fine`.
pub fn refines(fine: &[usize], coarse: &[usize]) -> bool {
    let mut to_coarse = HashMap::new();
    fine.iter().zip(coarse).all(|(&f, &c)| *to_coarse.entry(f).or_insert(c) == c)
}

pub fn kind_colors(p: &SharingPattern) -> Vec<Vec<usize>> {
    let mut out = vec![p.nodes.atoms.colors.clone(), p.nodes.pores.colors.clone()];
    out.extend(EdgeKind::ALL.iter().map(|&k| p.edges.get(k).colors.clone()));
    out
}
