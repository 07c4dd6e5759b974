//! Orbit colorings of nodes and typed directed edges.
//!
//! Two nodes (edges) share a color exactly when some group element maps one
//! onto the other. Colors are canonical: classes are numbered in the order
//! of their smallest member, so the same inputs always give the same
//! coloring and therefore the same parameter layout.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::Permutation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ColoringError {
    #[error("permutation {index} has length {found}, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, found: usize },
    #[error("edge set of kind {kind} is not closed: group element {element} maps {edge:?} to {image:?}")]
    NotClosed { kind: EdgeKind, element: usize, edge: (usize, usize), image: (usize, usize) },
    #[error("edge {edge:?} of kind {kind} references a node out of range")]
    EdgeOutOfRange { kind: EdgeKind, edge: (usize, usize) },
    #[error("atom and pore permutation lists differ in length ({0} vs {1})")]
    GroupSizeMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, ColoringError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeKind {
    Atom,
    Pore,
}

/// Directed edge kinds. Edges are stored as (sender, receiver).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    /// atom → atom
    AtomAtom,
    /// pore → atom
    PoreAtom,
    /// atom → pore
    AtomPore,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [EdgeKind::AtomAtom, EdgeKind::PoreAtom, EdgeKind::AtomPore];

    pub fn index(self) -> usize {
        match self {
            EdgeKind::AtomAtom => 0,
            EdgeKind::PoreAtom => 1,
            EdgeKind::AtomPore => 2,
        }
    }

    pub fn sender(self) -> NodeKind {
        match self {
            EdgeKind::AtomAtom | EdgeKind::AtomPore => NodeKind::Atom,
            EdgeKind::PoreAtom => NodeKind::Pore,
        }
    }

    pub fn receiver(self) -> NodeKind {
        match self {
            EdgeKind::AtomAtom | EdgeKind::PoreAtom => NodeKind::Atom,
            EdgeKind::AtomPore => NodeKind::Pore,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            EdgeKind::AtomAtom => "h",
            EdgeKind::PoreAtom => "k",
            EdgeKind::AtomPore => "l",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Directed edge lists, one per kind.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypedEdges {
    pub atom_atom: Vec<(usize, usize)>,
    pub pore_atom: Vec<(usize, usize)>,
    pub atom_pore: Vec<(usize, usize)>,
}

impl TypedEdges {
    pub fn get(&self, kind: EdgeKind) -> &[(usize, usize)] {
        match kind {
            EdgeKind::AtomAtom => &self.atom_atom,
            EdgeKind::PoreAtom => &self.pore_atom,
            EdgeKind::AtomPore => &self.atom_pore,
        }
    }

    pub fn get_mut(&mut self, kind: EdgeKind) -> &mut Vec<(usize, usize)> {
        match kind {
            EdgeKind::AtomAtom => &mut self.atom_atom,
            EdgeKind::PoreAtom => &mut self.pore_atom,
            EdgeKind::AtomPore => &mut self.atom_pore,
        }
    }

    pub fn total(&self) -> usize {
        self.atom_atom.len() + self.pore_atom.len() + self.atom_pore.len()
    }
}

/// Minimal disjoint-set forest with union by smaller root index.
#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Number classes of a union-find in order of first appearance.
fn canonical_classes(uf: &mut UnionFind, n: usize) -> (Vec<usize>, usize) {
    let mut label: HashMap<usize, usize> = HashMap::new();
    let mut colors = Vec::with_capacity(n);
    for i in 0..n {
        let root = uf.find(i);
        let next = label.len();
        colors.push(*label.entry(root).or_insert(next));
    }
    (colors, label.len())
}

/// Orbit coloring of one node kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindColoring {
    pub colors: Vec<usize>,
    pub count: usize,
}

impl KindColoring {
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &c in &self.colors {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Orbit coloring of {0..n−1} under the group generated by `perms`.
pub fn node_coloring(perms: &[Permutation], n: usize) -> Result<KindColoring> {
    let mut uf = UnionFind::new(n);
    for (index, p) in perms.iter().enumerate() {
        if p.len() != n {
            return Err(ColoringError::LengthMismatch { index, expected: n, found: p.len() });
        }
        for i in 0..n {
            uf.union(i, p.get(i));
        }
    }
    let (colors, count) = canonical_classes(&mut uf, n);
    Ok(KindColoring { colors, count })
}

/// Colors for the edges of one kind, aligned with the edge list order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindEdgeColoring {
    pub edges: Vec<(usize, usize)>,
    pub colors: Vec<usize>,
    pub count: usize,
}

impl KindEdgeColoring {
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &c in &self.colors {
            sizes[c] += 1;
        }
        sizes
    }
}

/// Edge colorings per kind. Each kind numbers its colors from zero; the
/// namespaces are disjoint because every kind gets its own weight banks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeColoring {
    pub atom_atom: KindEdgeColoring,
    pub pore_atom: KindEdgeColoring,
    pub atom_pore: KindEdgeColoring,
}

impl EdgeColoring {
    pub fn get(&self, kind: EdgeKind) -> &KindEdgeColoring {
        match kind {
            EdgeKind::AtomAtom => &self.atom_atom,
            EdgeKind::PoreAtom => &self.pore_atom,
            EdgeKind::AtomPore => &self.atom_pore,
        }
    }

    pub fn get_mut(&mut self, kind: EdgeKind) -> &mut KindEdgeColoring {
        match kind {
            EdgeKind::AtomAtom => &mut self.atom_atom,
            EdgeKind::PoreAtom => &mut self.pore_atom,
            EdgeKind::AtomPore => &mut self.atom_pore,
        }
    }

    pub fn total_colors(&self) -> usize {
        EdgeKind::ALL.iter().map(|&k| self.get(k).count).sum()
    }

    /// Offset of a kind's colors in the global edge-color numbering.
    pub fn offset(&self, kind: EdgeKind) -> usize {
        EdgeKind::ALL.iter().take_while(|&&k| k != kind).map(|&k| self.get(k).count).sum()
    }
}

/// The images of an edge of `kind` under group element `g`.
fn edge_image(kind: EdgeKind, atom: &Permutation, pore: &Permutation, e: (usize, usize)) -> (usize, usize) {
    let map = |nk: NodeKind, i: usize| match nk {
        NodeKind::Atom => atom.get(i),
        NodeKind::Pore => pore.get(i),
    };
    (map(kind.sender(), e.0), map(kind.receiver(), e.1))
}

fn color_edge_kind(
    kind: EdgeKind,
    atom_perms: &[Permutation],
    pore_perms: &[Permutation],
    edges: &[(usize, usize)],
) -> Result<KindEdgeColoring> {
    let n_of = |nk: NodeKind| match nk {
        NodeKind::Atom => atom_perms.first().map_or(0, |p| p.len()),
        NodeKind::Pore => pore_perms.first().map_or(0, |p| p.len()),
    };
    let index: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    for &e in edges {
        if e.0 >= n_of(kind.sender()) || e.1 >= n_of(kind.receiver()) {
            return Err(ColoringError::EdgeOutOfRange { kind, edge: e });
        }
    }
    // Visit edges in lexicographic order so classes are numbered by their
    // smallest member.
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by_key(|&i| edges[i]);
    let rank: Vec<usize> = {
        let mut r = vec![0; edges.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos;
        }
        r
    };
    let mut uf = UnionFind::new(edges.len());
    for (g, (pa, pp)) in atom_perms.iter().zip(pore_perms).enumerate() {
        for &e in edges {
            let image = edge_image(kind, pa, pp, e);
            let j = *index.get(&image).ok_or(ColoringError::NotClosed { kind, element: g, edge: e, image })?;
            uf.union(rank[index[&e]], rank[j]);
        }
    }
    let (sorted_colors, count) = canonical_classes(&mut uf, edges.len());
    let colors = (0..edges.len()).map(|i| sorted_colors[rank[i]]).collect();
    Ok(KindEdgeColoring { edges: edges.to_vec(), colors, count })
}

/// Orbit colorings of all three edge kinds under the pairs (π_atom, π_pore).
pub fn edge_coloring(
    atom_perms: &[Permutation],
    pore_perms: &[Permutation],
    edges: &TypedEdges,
) -> Result<EdgeColoring> {
    if atom_perms.len() != pore_perms.len() {
        return Err(ColoringError::GroupSizeMismatch(atom_perms.len(), pore_perms.len()));
    }
    Ok(EdgeColoring {
        atom_atom: color_edge_kind(EdgeKind::AtomAtom, atom_perms, pore_perms, &edges.atom_atom)?,
        pore_atom: color_edge_kind(EdgeKind::PoreAtom, atom_perms, pore_perms, &edges.pore_atom)?,
        atom_pore: color_edge_kind(EdgeKind::AtomPore, atom_perms, pore_perms, &edges.atom_pore)?,
    })
}

/// Node colors for atoms and pores in one namespace: atoms use
/// `[0, atoms.count)`, pores follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeColoring {
    pub atoms: KindColoring,
    pub pores: KindColoring,
}

impl NodeColoring {
    pub fn total_colors(&self) -> usize {
        self.atoms.count + self.pores.count
    }

    /// Global color of a node.
    pub fn color(&self, kind: NodeKind, i: usize) -> usize {
        match kind {
            NodeKind::Atom => self.atoms.colors[i],
            NodeKind::Pore => self.atoms.count + self.pores.colors[i],
        }
    }

    pub fn kind(&self, kind: NodeKind) -> &KindColoring {
        match kind {
            NodeKind::Atom => &self.atoms,
            NodeKind::Pore => &self.pores,
        }
    }
}

/// The colored parameter-sharing pattern together with the group action it
/// was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingPattern {
    pub nodes: NodeColoring,
    pub edges: EdgeColoring,
    pub atom_perms: Vec<Permutation>,
    pub pore_perms: Vec<Permutation>,
}

impl SharingPattern {
    pub fn derive(
        atom_perms: Vec<Permutation>,
        pore_perms: Vec<Permutation>,
        n_atoms: usize,
        n_pores: usize,
        edges: &TypedEdges,
    ) -> Result<Self> {
        if atom_perms.len() != pore_perms.len() {
            return Err(ColoringError::GroupSizeMismatch(atom_perms.len(), pore_perms.len()));
        }
        let nodes =
            NodeColoring { atoms: node_coloring(&atom_perms, n_atoms)?, pores: node_coloring(&pore_perms, n_pores)? };
        let edges = edge_coloring(&atom_perms, &pore_perms, edges)?;
        Ok(SharingPattern { nodes, edges, atom_perms, pore_perms })
    }

    pub fn group_order(&self) -> usize {
        self.atom_perms.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.nodes.atoms.colors.len()
    }

    pub fn n_pores(&self) -> usize {
        self.nodes.pores.colors.len()
    }
}

/// What kind of entity a violation concerns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Node(NodeKind),
    Edge(EdgeKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationReason {
    /// Some group element maps a member of the orbit to a node/edge of a
    /// different color.
    NotInvariant,
    /// A color class contains elements that no group element connects.
    SplitClass,
}

/// One violated coloring condition, reported per orbit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Violation {
    pub entity: Entity,
    pub reason: ViolationReason,
    /// Members of the affected orbit (node indices, or edge list positions).
    pub orbit: Vec<usize>,
}

fn orbits_of<F: Fn(usize, usize) -> usize>(n: usize, n_elements: usize, act: F) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(n);
    for g in 0..n_elements {
        for i in 0..n {
            uf.union(i, act(g, i));
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut root_class: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = uf.find(i);
        let next = classes.len();
        let c = *root_class.entry(root).or_insert(next);
        if c == classes.len() {
            classes.push(Vec::new());
        }
        classes[c].push(i);
    }
    classes
}

fn check_coloring<F: Fn(usize, usize) -> usize>(
    entity: Entity,
    colors: &[usize],
    n_elements: usize,
    act: F,
) -> Vec<Violation> {
    let n = colors.len();
    let orbits = orbits_of(n, n_elements, &act);
    let mut orbit_of = vec![0; n];
    for (o, members) in orbits.iter().enumerate() {
        for &m in members {
            orbit_of[m] = o;
        }
    }
    let mut bad: BTreeSet<(ViolationReason, usize)> = BTreeSet::new();
    // (a) colors constant along every group element.
    for g in 0..n_elements {
        for i in 0..n {
            if colors[act(g, i)] != colors[i] {
                bad.insert((ViolationReason::NotInvariant, orbit_of[i]));
            }
        }
    }
    // (b) members of one color class are connected by explicit group paths.
    let mut by_color: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, &c) in colors.iter().enumerate() {
        by_color.entry(c).or_default().push(i);
    }
    for members in by_color.values() {
        let start = members[0];
        let mut reached = vec![false; n];
        reached[start] = true;
        let mut stack = vec![start];
        while let Some(x) = stack.pop() {
            for g in 0..n_elements {
                let y = act(g, x);
                if !reached[y] {
                    reached[y] = true;
                    stack.push(y);
                }
            }
        }
        for &m in members {
            if !reached[m] {
                bad.insert((ViolationReason::SplitClass, orbit_of[m]));
            }
        }
    }
    bad.into_iter().map(|(reason, o)| Violation { entity, reason, orbit: orbits[o].clone() }).collect()
}

/// Check both directions of the coloring conditions; an empty list means
/// the pattern is valid.
pub fn validate_pattern(pattern: &SharingPattern) -> Vec<Violation> {
    let mut out = Vec::new();
    let g = pattern.group_order();
    out.extend(check_coloring(Entity::Node(NodeKind::Atom), &pattern.nodes.atoms.colors, g, |k, i| {
        pattern.atom_perms[k].get(i)
    }));
    out.extend(check_coloring(Entity::Node(NodeKind::Pore), &pattern.nodes.pores.colors, g, |k, i| {
        pattern.pore_perms[k].get(i)
    }));
    for kind in EdgeKind::ALL {
        let kc = pattern.edges.get(kind);
        let index: HashMap<(usize, usize), usize> = kc.edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut missing = false;
        let table: Vec<Vec<usize>> = (0..g)
            .map(|k| {
                kc.edges
                    .iter()
                    .enumerate()
                    .map(|(i, &e)| {
                        let image = edge_image(kind, &pattern.atom_perms[k], &pattern.pore_perms[k], e);
                        index.get(&image).copied().unwrap_or_else(|| {
                            missing = true;
                            i
                        })
                    })
                    .collect()
            })
            .collect();
        if missing {
            out.push(Violation {
                entity: Entity::Edge(kind),
                reason: ViolationReason::NotInvariant,
                orbit: Vec::new(),
            });
            continue;
        }
        out.extend(check_coloring(Entity::Edge(kind), &kc.colors, g, |k, i| table[k][i]));
    }
    out
}
