//! Frameworks and the per-configuration crystal graph.
//!
//! A [`Framework`] is one validated crystal topology: lattice, T-sites,
//! group, bonds and declared pores. Validation computes the site and pore
//! permutations of every group element and then snaps each orbit onto exact
//! images of its representative, so distances are constant along orbits to
//! rounding error rather than to the precision of the input file.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coloring::{ColoringError, EdgeKind, SharingPattern, TypedEdges};
use crate::crystal::{
    close_group, induced_permutation, min_image_delta, min_image_distance, wrap_fractional, CrystalError, FracCoord,
    Lattice, Permutation, SiteSet, SpaceGroup, SymOp, DEFAULT_MAX_ORDER,
};

/// Default T–T bond cutoff in Å.
pub const DEFAULT_BOND_CUTOFF: f64 = 3.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Coloring(#[from] ColoringError),
    #[error("operation {op} is not an isometry of the lattice")]
    NotIsometry { op: String },
    #[error("bond ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("bond ({0}, {1}) references a site out of range")]
    BondOutOfRange(usize, usize),
    #[error("bond ({0}, {1}) listed twice")]
    DuplicateBond(usize, usize),
    #[error("operation {op} maps bond {bond:?} to {image:?}, which is not a bond")]
    BondNotClosed { op: String, bond: (usize, usize), image: (usize, usize) },
    #[error("pore {pore}: {reason}")]
    InvalidPore { pore: usize, reason: String },
    #[error("operation {op} maps pore {pore} onto pore {image} but the boundaries differ")]
    PoreNotClosed { op: String, pore: usize, image: usize },
    #[error("occupancy has {found} sites, framework has {expected}")]
    OccupancyLength { expected: usize, found: usize },
    #[error("invalid occupancy character `{0}` (expected S or A)")]
    OccupancyChar(char),
    #[error("invalid RBF configuration: {0}")]
    Rbf(String),
    #[error("bond cutoff must be positive, got {0}")]
    Cutoff(f64),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// A declared pore: center, diffusion cross-section and boundary T-sites.
#[derive(Debug, Clone, PartialEq)]
pub struct Pore {
    pub center: FracCoord,
    /// Cross-sectional area in Å².
    pub area: f64,
    pub boundary: Vec<usize>,
}

/// Raw framework description before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameworkSpec {
    pub name: String,
    pub lattice: Lattice,
    pub site_labels: Vec<String>,
    pub sites: Vec<FracCoord>,
    pub generators: Vec<SymOp>,
    /// Explicit bonds; derived from `bond_cutoff` when `None`.
    pub bonds: Option<Vec<(usize, usize)>>,
    pub bond_cutoff: f64,
    pub pores: Vec<Pore>,
    pub tau_site: f64,
}

/// A validated crystal topology. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Framework {
    name: String,
    lattice: Lattice,
    site_labels: Vec<String>,
    sites: SiteSet,
    group: SpaceGroup,
    bonds: Vec<(usize, usize)>,
    bonds_explicit: bool,
    bond_cutoff: f64,
    pores: Vec<Pore>,
    atom_perms: Vec<Permutation>,
    pore_perms: Vec<Permutation>,
    tau_site: f64,
}

/// Result of distance-based bond derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct BondReport {
    pub bonds: Vec<(usize, usize)>,
    /// Sites without any neighbor inside the cutoff.
    pub isolated: Vec<usize>,
}

/// All unordered site pairs closer than `cutoff` under the minimum image
/// convention, as (i, j) with i < j in lexicographic order.
pub fn derive_bonds(lattice: &Lattice, sites: &[FracCoord], cutoff: f64) -> Result<BondReport> {
    if !(cutoff > 0.0) {
        return Err(GraphError::Cutoff(cutoff));
    }
    let n = sites.len();
    let mut bonds = Vec::new();
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if min_image_distance(lattice, &sites[i], &sites[j]) < cutoff {
                bonds.push((i, j));
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| degree[i] == 0).collect();
    if !isolated.is_empty() {
        log::warn!("{} site(s) have no neighbor within {cutoff} Å: {:?}", isolated.len(), isolated);
    }
    Ok(BondReport { bonds, isolated })
}

/// Replace every orbit by exact images of a stabilizer-averaged
/// representative.
fn symmetrize(group: &SpaceGroup, perms: &[Permutation], positions: &[FracCoord]) -> Result<Vec<FracCoord>> {
    let n = positions.len();
    let mut out: Vec<Option<FracCoord>> = vec![None; n];
    for rep in 0..n {
        if out[rep].is_some() {
            continue;
        }
        let x = positions[rep];
        let stabilizer: Vec<&SymOp> =
            group.ops().iter().zip(perms).filter(|(_, p)| p.get(rep) == rep).map(|(g, _)| g).collect();
        let mut shift = [0.0; 3];
        for g in &stabilizer {
            let d = min_image_delta(&g.apply(&x), &x);
            for k in 0..3 {
                shift[k] += d[k] / stabilizer.len() as f64;
            }
        }
        let c = x.components();
        let fixed = wrap_fractional([c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]])?;
        for (g, p) in group.ops().iter().zip(perms) {
            let j = p.get(rep);
            if out[j].is_none() {
                out[j] = Some(g.apply(&fixed));
            }
        }
    }
    Ok(out.into_iter().map(|x| x.expect("every site lies on some orbit")).collect())
}

fn normalize_bond(b: (usize, usize)) -> (usize, usize) {
    if b.0 <= b.1 {
        b
    } else {
        (b.1, b.0)
    }
}

impl Framework {
    pub fn new(spec: FrameworkSpec) -> Result<Self> {
        let FrameworkSpec { name, lattice, site_labels, sites, generators, bonds, bond_cutoff, pores, tau_site } = spec;
        let group = close_group(&generators, DEFAULT_MAX_ORDER)?;
        for op in group.ops() {
            if !op.is_isometry(&lattice, 1e-6) {
                return Err(GraphError::NotIsometry { op: op.to_string() });
            }
        }
        let raw_sites = SiteSet::new(sites, tau_site)?;
        let atom_perms = group
            .ops()
            .iter()
            .map(|op| induced_permutation(op, raw_sites.positions(), tau_site))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let sites = SiteSet::new(symmetrize(&group, &atom_perms, raw_sites.positions())?, tau_site)?;

        let n = sites.len();
        for (p, pore) in pores.iter().enumerate() {
            if pore.boundary.is_empty() {
                return Err(GraphError::InvalidPore { pore: p, reason: "empty boundary".into() });
            }
            if !(pore.area > 0.0) {
                return Err(GraphError::InvalidPore {
                    pore: p,
                    reason: format!("area must be positive, got {}", pore.area),
                });
            }
            if let Some(&bad) = pore.boundary.iter().find(|&&a| a >= n) {
                return Err(GraphError::InvalidPore { pore: p, reason: format!("boundary site {bad} out of range") });
            }
            let unique: HashSet<_> = pore.boundary.iter().collect();
            if unique.len() != pore.boundary.len() {
                return Err(GraphError::InvalidPore { pore: p, reason: "boundary lists a site twice".into() });
            }
        }
        let centers: Vec<FracCoord> = pores.iter().map(|p| p.center).collect();
        SiteSet::new(centers.clone(), tau_site)
            .map_err(|e| GraphError::InvalidPore { pore: 0, reason: format!("pore centers coincide: {e}") })?;
        let pore_perms = group
            .ops()
            .iter()
            .map(|op| induced_permutation(op, &centers, tau_site))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let boundary_sets: Vec<BTreeSet<usize>> = pores.iter().map(|p| p.boundary.iter().copied().collect()).collect();
        for ((op, pa), pp) in group.ops().iter().zip(&atom_perms).zip(&pore_perms) {
            for (p, set) in boundary_sets.iter().enumerate() {
                let image: BTreeSet<usize> = set.iter().map(|&a| pa.get(a)).collect();
                if image != boundary_sets[pp.get(p)] {
                    return Err(GraphError::PoreNotClosed { op: op.to_string(), pore: p, image: pp.get(p) });
                }
            }
        }
        let sym_centers = symmetrize(&group, &pore_perms, &centers)?;
        let pores: Vec<Pore> = pores.into_iter().zip(sym_centers).map(|(p, center)| Pore { center, ..p }).collect();

        let bonds_explicit = bonds.is_some();
        let bonds = match bonds {
            Some(list) => {
                let mut seen = HashSet::new();
                let mut out = Vec::with_capacity(list.len());
                for &(i, j) in &list {
                    if i == j {
                        return Err(GraphError::SelfLoop(i, j));
                    }
                    if i >= n || j >= n {
                        return Err(GraphError::BondOutOfRange(i, j));
                    }
                    let b = normalize_bond((i, j));
                    if !seen.insert(b) {
                        return Err(GraphError::DuplicateBond(b.0, b.1));
                    }
                    out.push(b);
                }
                out
            }
            None => derive_bonds(&lattice, sites.positions(), bond_cutoff)?.bonds,
        };
        let bond_set: HashSet<(usize, usize)> = bonds.iter().copied().collect();
        for (op, pa) in group.ops().iter().zip(&atom_perms) {
            for &b in &bonds {
                let image = normalize_bond((pa.get(b.0), pa.get(b.1)));
                if !bond_set.contains(&image) {
                    return Err(GraphError::BondNotClosed { op: op.to_string(), bond: b, image });
                }
            }
        }
        let site_labels =
            if site_labels.len() == n { site_labels } else { (0..n).map(|i| format!("T{}", i + 1)).collect() };
        Ok(Framework {
            name,
            lattice,
            site_labels,
            sites,
            group,
            bonds,
            bonds_explicit,
            bond_cutoff,
            pores,
            atom_perms,
            pore_perms,
            tau_site,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn site_labels(&self) -> &[String] {
        &self.site_labels
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn group(&self) -> &SpaceGroup {
        &self.group
    }

    pub fn bonds(&self) -> &[(usize, usize)] {
        &self.bonds
    }

    pub fn bonds_explicit(&self) -> bool {
        self.bonds_explicit
    }

    pub fn bond_cutoff(&self) -> f64 {
        self.bond_cutoff
    }

    pub fn pores(&self) -> &[Pore] {
        &self.pores
    }

    pub fn tau_site(&self) -> f64 {
        self.tau_site
    }

    /// Site permutation of each group element, aligned with `group().ops()`.
    pub fn atom_perms(&self) -> &[Permutation] {
        &self.atom_perms
    }

    /// Pore permutation of each group element, aligned with `group().ops()`.
    pub fn pore_perms(&self) -> &[Permutation] {
        &self.pore_perms
    }

    pub fn distance(&self, a: &FracCoord, b: &FracCoord) -> f64 {
        min_image_distance(&self.lattice, a, b)
    }

    /// A copy of the framework with its pores removed.
    pub fn without_pores(&self) -> Framework {
        Framework { pores: Vec::new(), pore_perms: vec![Permutation::identity(0); self.group.order()], ..self.clone() }
    }

    /// A copy restricted to the trivial group (identity only).
    pub fn with_trivial_group(&self) -> Framework {
        Framework {
            group: SpaceGroup::trivial(),
            atom_perms: vec![Permutation::identity(self.n_sites())],
            pore_perms: vec![Permutation::identity(self.pores.len())],
            ..self.clone()
        }
    }

    /// Derive the parameter-sharing pattern for graphs built with or without
    /// pore nodes.
    pub fn sharing_pattern(&self, with_pores: bool) -> Result<SharingPattern> {
        let edges = typed_edges(self, with_pores);
        let n_pores = if with_pores { self.pores.len() } else { 0 };
        let pore_perms =
            if with_pores { self.pore_perms.clone() } else { vec![Permutation::identity(0); self.group.order()] };
        Ok(SharingPattern::derive(self.atom_perms.clone(), pore_perms, self.n_sites(), n_pores, &edges)?)
    }
}

/// Gaussian radial basis expansion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfConfig {
    /// Centers μ in Å, strictly increasing.
    pub centers: Vec<f64>,
    /// Width γ in Å⁻².
    pub gamma: f64,
}

impl RbfConfig {
    pub fn new(centers: Vec<f64>, gamma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(GraphError::Rbf("at least one center required".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(GraphError::Rbf(format!("gamma must be positive, got {gamma}")));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(GraphError::Rbf("centers must be strictly increasing".into()));
        }
        Ok(RbfConfig { centers, gamma })
    }

    /// `k` centers evenly spaced on [lo, hi].
    pub fn evenly_spaced(k: usize, lo: f64, hi: f64, gamma: f64) -> Result<Self> {
        let centers = match k {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect(),
        };
        Self::new(centers, gamma)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

impl Default for RbfConfig {
    fn default() -> Self {
        RbfConfig::evenly_spaced(16, 0.0, 8.0, 10.0).expect("valid default")
    }
}

/// exp(−γ (d − μ_k)²) for every center.
pub fn rbf_embed(d: f64, cfg: &RbfConfig) -> Vec<f64> {
    cfg.centers.iter().map(|mu| (-cfg.gamma * (d - mu) * (d - mu)).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AtomType {
    Si,
    Al,
}

impl AtomType {
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            AtomType::Si => [1.0, 0.0],
            AtomType::Al => [0.0, 1.0],
        }
    }

    pub fn code(self) -> char {
        match self {
            AtomType::Si => 'S',
            AtomType::Al => 'A',
        }
    }
}

/// Si/Al assignment of every T-site, in framework site order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Occupancy {
    types: Vec<AtomType>,
}

impl Occupancy {
    pub fn new(types: Vec<AtomType>) -> Self {
        Occupancy { types }
    }

    pub fn all_silicon(n: usize) -> Self {
        Occupancy { types: vec![AtomType::Si; n] }
    }

    pub fn from_al_sites(n: usize, al: &[usize]) -> Self {
        let mut types = vec![AtomType::Si; n];
        for &i in al {
            types[i] = AtomType::Al;
        }
        Occupancy { types }
    }

    pub fn types(&self) -> &[AtomType] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn al_count(&self) -> usize {
        self.types.iter().filter(|&&t| t == AtomType::Al).count()
    }

    pub fn is_al(&self, i: usize) -> bool {
        self.types[i] == AtomType::Al
    }

    /// The occupancy g·x, with `(g·x)[π(i)] = x[i]`.
    pub fn permuted(&self, perm: &Permutation) -> Occupancy {
        Occupancy { types: perm.permute(&self.types) }
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(GraphError::OccupancyLength { expected: n, found: self.len() });
        }
        Ok(())
    }
}

impl FromStr for Occupancy {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                'S' => Ok(AtomType::Si),
                'A' => Ok(AtomType::Al),
                other => Err(GraphError::OccupancyChar(other)),
            })
            .collect::<Result<Vec<_>>>()
            .map(Occupancy::new)
    }
}

impl fmt::Display for Occupancy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.types {
            write!(f, "{}", t.code())?;
        }
        Ok(())
    }
}

/// Directed edges of every kind for a framework.
pub fn typed_edges(framework: &Framework, with_pores: bool) -> TypedEdges {
    let mut edges = TypedEdges::default();
    for &(i, j) in framework.bonds() {
        edges.atom_atom.push((i, j));
        edges.atom_atom.push((j, i));
    }
    if with_pores {
        for (p, pore) in framework.pores().iter().enumerate() {
            for &a in &pore.boundary {
                edges.pore_atom.push((p, a));
                edges.atom_pore.push((a, p));
            }
        }
    }
    edges
}

/// Configuration-independent part of a crystal graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    pub n_atoms: usize,
    pub n_pores: usize,
    pub edges: TypedEdges,
    /// Minimum-image length of each edge, per kind.
    pub edge_lengths: [Vec<f64>; 3],
    /// RBF rows, per kind, flattened with `rbf_dim` columns.
    pub edge_features: [Vec<f64>; 3],
    pub rbf_dim: usize,
    /// Raw (area Å², boundary count) per pore.
    pub pore_features: Vec<[f64; 2]>,
    pub with_pores: bool,
}

impl GraphTopology {
    pub fn build(framework: &Framework, cfg: &RbfConfig, with_pores: bool) -> Self {
        let edges = typed_edges(framework, with_pores);
        let sites = framework.sites().positions();
        let pores = framework.pores();
        let mut edge_lengths: [Vec<f64>; 3] = Default::default();
        let mut edge_features: [Vec<f64>; 3] = Default::default();
        for kind in EdgeKind::ALL {
            let lengths: Vec<f64> = edges
                .get(kind)
                .iter()
                .map(|&(s, r)| {
                    let (a, b) = match kind {
                        EdgeKind::AtomAtom => (&sites[s], &sites[r]),
                        EdgeKind::PoreAtom => (&pores[s].center, &sites[r]),
                        EdgeKind::AtomPore => (&sites[s], &pores[r].center),
                    };
                    framework.distance(a, b)
                })
                .collect();
            edge_features[kind.index()] = lengths.iter().flat_map(|&d| rbf_embed(d, cfg)).collect();
            edge_lengths[kind.index()] = lengths;
        }
        let pore_features =
            if with_pores { pores.iter().map(|p| [p.area, p.boundary.len() as f64]).collect() } else { Vec::new() };
        GraphTopology {
            n_atoms: framework.n_sites(),
            n_pores: if with_pores { pores.len() } else { 0 },
            edges,
            edge_lengths,
            edge_features,
            rbf_dim: cfg.len(),
            pore_features,
            with_pores,
        }
    }

    pub fn edge_feature(&self, kind: EdgeKind, e: usize) -> &[f64] {
        &self.edge_features[kind.index()][e * self.rbf_dim..(e + 1) * self.rbf_dim]
    }
}

/// One configuration's graph: shared topology plus atom one-hot features.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalGraph {
    pub topology: Arc<GraphTopology>,
    pub atom_features: Vec<[f64; 2]>,
}

impl CrystalGraph {
    pub fn from_topology(topology: Arc<GraphTopology>, occupancy: &Occupancy) -> Result<Self> {
        occupancy.check_len(topology.n_atoms)?;
        Ok(CrystalGraph { atom_features: occupancy.types().iter().map(|t| t.one_hot()).collect(), topology })
    }

    pub fn edges(&self, kind: EdgeKind) -> &[(usize, usize)] {
        self.topology.edges.get(kind)
    }

    pub fn pore_features(&self) -> &[[f64; 2]] {
        &self.topology.pore_features
    }
}

pub fn build_graph(
    framework: &Framework,
    occupancy: &Occupancy,
    cfg: &RbfConfig,
    with_pores: bool,
) -> Result<CrystalGraph> {
    occupancy.check_len(framework.n_sites())?;
    CrystalGraph::from_topology(Arc::new(GraphTopology::build(framework, cfg, with_pores)), occupancy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fc(x: f64, y: f64, z: f64) -> FracCoord {
        wrap_fractional([x, y, z]).unwrap()
    }

    /// Four sites on a square ring in the xy plane with a four-fold axis
    /// and one pore in the middle.
    pub(crate) fn square_framework() -> Framework {
        let lattice = Lattice::orthorhombic(10.0, 10.0, 5.0).unwrap();
        let sites = vec![fc(0.35, 0.5, 0.0), fc(0.5, 0.35, 0.0), fc(0.65, 0.5, 0.0), fc(0.5, 0.65, 0.0)];
        let four = SymOp::from_xyz("-y+1,x,z").unwrap();
        Framework::new(FrameworkSpec {
            name: "square".into(),
            lattice,
            site_labels: vec![],
            sites,
            generators: vec![four],
            bonds: Some(vec![(0, 1), (1, 2), (2, 3), (3, 0)]),
            bond_cutoff: DEFAULT_BOND_CUTOFF,
            pores: vec![Pore { center: fc(0.5, 0.5, 0.0), area: 20.0, boundary: vec![0, 1, 2, 3] }],
            tau_site: 1e-3,
        })
        .unwrap()
    }

    #[test]
    fn bond_cutoff_examples() {
        let lattice = Lattice::orthorhombic(20.0, 20.0, 20.0).unwrap();
        let sites = vec![fc(0.0, 0.0, 0.0), fc(3.1 / 20.0, 0.0, 0.0)];
        assert_eq!(derive_bonds(&lattice, &sites, 3.5).unwrap().bonds, vec![(0, 1)]);
        let r = derive_bonds(&lattice, &sites, 3.0).unwrap();
        assert!(r.bonds.is_empty());
        assert_eq!(r.isolated, vec![0, 1]);
        assert!(derive_bonds(&lattice, &sites, 0.0).is_err());
    }

    #[test]
    fn rbf_examples() {
        let cfg = RbfConfig::new(vec![0.0, 1.0, 2.0], 1.0).unwrap();
        let v = rbf_embed(0.0, &cfg);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-1f64).exp()).abs() < 1e-15);
        assert!((v[2] - (-4f64).exp()).abs() < 1e-15);
        assert!((v[1] - 0.3679).abs() < 1e-4 && (v[2] - 0.0183).abs() < 1e-4);
        assert_eq!(rbf_embed(2.0, &cfg)[2], 1.0);
        let mut prev = 2.0;
        for step in 0..20 {
            let d = 2.0 + 0.25 * step as f64;
            let x = rbf_embed(d, &cfg)[2];
            assert!(x < prev && x > 0.0);
            prev = x;
        }
        assert!(RbfConfig::new(vec![], 1.0).is_err());
        assert!(RbfConfig::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(RbfConfig::new(vec![1.0], 0.0).is_err());
        let d = RbfConfig::default();
        assert_eq!(d.len(), 16);
        assert_eq!(d.centers[15], 8.0);
    }

    #[test]
    fn square_framework_builds() {
        let fw = square_framework();
        assert_eq!(fw.group().order(), 4);
        let g = build_graph(&fw, &Occupancy::from_al_sites(4, &[1]), &RbfConfig::default(), true).unwrap();
        assert_eq!(g.edges(EdgeKind::AtomAtom).len(), 8);
        assert_eq!(g.edges(EdgeKind::PoreAtom).len(), 4);
        assert_eq!(g.edges(EdgeKind::AtomPore).len(), 4);
        assert_eq!(g.atom_features[1], [0.0, 1.0]);
        for row in &g.atom_features {
            assert_eq!(row[0] + row[1], 1.0);
        }
        let p = fw.sharing_pattern(true).unwrap();
        assert_eq!(p.nodes.atoms.count, 1);
        assert_eq!(p.edges.atom_atom.count, 2);
        assert_eq!(p.edges.pore_atom.count, 1);
    }

    #[test]
    fn without_pores_keeps_atom_subgraph() {
        let fw = square_framework();
        let occ = Occupancy::all_silicon(4);
        let a = build_graph(&fw, &occ, &RbfConfig::default(), true).unwrap();
        let b = build_graph(&fw, &occ, &RbfConfig::default(), false).unwrap();
        assert!(b.edges(EdgeKind::PoreAtom).is_empty() && b.edges(EdgeKind::AtomPore).is_empty());
        assert_eq!(a.edges(EdgeKind::AtomAtom), b.edges(EdgeKind::AtomAtom));
        assert_eq!(a.topology.edge_features[0], b.topology.edge_features[0]);
        assert_eq!(a.atom_features, b.atom_features);
    }

    #[test]
    fn occupancy_validation() {
        let fw = square_framework();
        let err = build_graph(&fw, &Occupancy::all_silicon(3), &RbfConfig::default(), true).unwrap_err();
        assert_eq!(err, GraphError::OccupancyLength { expected: 4, found: 3 });
        assert!("SSAX".parse::<Occupancy>().is_err());
        let occ: Occupancy = "SASA".parse().unwrap();
        assert_eq!(occ.al_count(), 2);
        assert_eq!(occ.to_string(), "SASA");
    }

    #[test]
    fn unclosed_bonds_rejected() {
        let lattice = Lattice::orthorhombic(10.0, 10.0, 5.0).unwrap();
        let sites = vec![fc(0.35, 0.5, 0.0), fc(0.5, 0.35, 0.0), fc(0.65, 0.5, 0.0), fc(0.5, 0.65, 0.0)];
        let err = Framework::new(FrameworkSpec {
            name: "bad".into(),
            lattice,
            site_labels: vec![],
            sites,
            generators: vec![SymOp::from_xyz("-y+1,x,z").unwrap()],
            bonds: Some(vec![(0, 1)]),
            bond_cutoff: DEFAULT_BOND_CUTOFF,
            pores: vec![],
            tau_site: 1e-3,
        })
        .unwrap_err();
        assert!(matches!(err, GraphError::BondNotClosed { bond: (0, 1), .. }));
    }

    #[test]
    fn symmetrization_snaps_rounded_sites() {
        let lattice = Lattice::orthorhombic(10.0, 10.0, 5.0).unwrap();
        // Slightly off-symmetric input within tolerance.
        let sites = vec![fc(0.3502, 0.5, 0.0), fc(0.5, 0.3499, 0.0), fc(0.6501, 0.5, 0.0), fc(0.5, 0.65, 0.0)];
        let fw = Framework::new(FrameworkSpec {
            name: "rounded".into(),
            lattice,
            site_labels: vec![],
            sites,
            generators: vec![SymOp::from_xyz("-y+1,x,z").unwrap()],
            bonds: None,
            bond_cutoff: 2.5,
            pores: vec![],
            tau_site: 1e-3,
        })
        .unwrap();
        let s = fw.sites().positions();
        let d01 = fw.distance(&s[0], &s[1]);
        for (i, j) in [(1, 2), (2, 3), (3, 0)] {
            assert!((fw.distance(&s[i], &s[j]) - d01).abs() < 1e-12);
        }
        assert_eq!(fw.bonds().len(), 4);
    }
}
