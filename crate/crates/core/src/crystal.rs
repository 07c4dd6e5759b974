//! Lattice geometry and space-group actions on fractional coordinates.
//!
//! Symmetry operations carry an integer linear part and exact rational
//! translations so that group closure never drifts. Floating point only
//! enters when an operation is applied to a coordinate.

use std::collections::VecDeque;
use std::fmt;

use num_rational::Rational64;
use num_traits::{Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Snapping tolerance for fractional wrapping.
pub const TAU_SNAP: f64 = 1e-9;
/// Default tolerance (fractional units) for matching transformed sites.
pub const TAU_SITE: f64 = 1e-3;
/// Default bound on the order of a closed group.
pub const DEFAULT_MAX_ORDER: usize = 192;
/// Largest translation denominator accepted in a symmetry operation.
pub const MAX_DENOMINATOR: i64 = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("non-finite coordinate component {0}")]
    NonFinite(f64),
    #[error("lattice basis is singular (|det| = {0:e} Å³)")]
    SingularLattice(f64),
    #[error("symmetry operation linear part is singular")]
    SingularOperation,
    #[error("symmetry operation has det(W) = {0}, expected ±1")]
    NotUnimodular(i64),
    #[error("translation denominator {0} exceeds {MAX_DENOMINATOR}")]
    Denominator(i64),
    #[error("cannot parse symmetry operation `{0}`")]
    Parse(String),
    #[error("group closure exceeded max order {0}; generators are inconsistent")]
    ClosureOverflow(usize),
    #[error("sites {0} and {1} coincide within tolerance")]
    CoincidentSites(usize, usize),
    #[error("operation {op} maps site {site} to a position with no matching site")]
    NoMatch { op: String, site: usize },
    #[error("operation {op} maps site {site} onto {count} sites within tolerance")]
    AmbiguousMatch { op: String, site: usize, count: usize },
    #[error("operation {op} does not induce a bijection on sites")]
    NotBijective { op: String },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

pub type Result<T> = std::result::Result<T, CrystalError>;

/// Three lattice basis vectors in Å, stored as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    basis: [[f64; 3]; 3],
}

impl Lattice {
    pub fn new(basis: [[f64; 3]; 3]) -> Result<Self> {
        for row in &basis {
            for &v in row {
                if !v.is_finite() {
                    return Err(CrystalError::NonFinite(v));
                }
            }
        }
        let det = det3(&basis);
        if det.abs() <= 1e-9 {
            return Err(CrystalError::SingularLattice(det));
        }
        let lattice = Lattice { basis };
        if !lattice.is_orthogonal() {
            log::warn!("lattice is not orthogonal; minimum image distances are approximate for skewed cells");
        }
        Ok(lattice)
    }

    pub fn orthorhombic(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    }

    pub fn basis(&self) -> &[[f64; 3]; 3] {
        &self.basis
    }

    pub fn volume(&self) -> f64 {
        det3(&self.basis).abs()
    }

    pub fn is_orthogonal(&self) -> bool {
        let b = &self.basis;
        let dot = |i: usize, j: usize| (0..3).map(|k| b[i][k] * b[j][k]).sum::<f64>();
        let scale = (0..3).map(|i| dot(i, i)).fold(0.0, f64::max);
        [(0, 1), (0, 2), (1, 2)].iter().all(|&(i, j)| dot(i, j).abs() <= 1e-9 * scale)
    }

    /// Cartesian vector of a fractional displacement.
    pub fn to_cartesian(&self, frac: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, row) in self.basis.iter().enumerate() {
            for k in 0..3 {
                out[k] += frac[i] * row[k];
            }
        }
        out
    }

    /// Metric tensor G = B Bᵀ.
    pub fn metric(&self) -> [[f64; 3]; 3] {
        let b = &self.basis;
        let mut g = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] = (0..3).map(|k| b[i][k] * b[j][k]).sum();
            }
        }
        g
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// A fractional coordinate with every component in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FracCoord([f64; 3]);

impl FracCoord {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        wrap_fractional(v)
    }

    pub fn components(&self) -> [f64; 3] {
        self.0
    }
}

impl std::ops::Index<usize> for FracCoord {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn wrap_component(x: f64) -> f64 {
    let mut r = x - x.floor();
    if r < TAU_SNAP || 1.0 - r < TAU_SNAP {
        r = 0.0;
    }
    r
}

/// Reduce each component into [0, 1), snapping values within `TAU_SNAP` of
/// an integer to zero.
pub fn wrap_fractional(v: [f64; 3]) -> Result<FracCoord> {
    let mut out = [0.0; 3];
    for k in 0..3 {
        if !v[k].is_finite() {
            return Err(CrystalError::NonFinite(v[k]));
        }
        out[k] = wrap_component(v[k]);
    }
    Ok(FracCoord(out))
}

/// Fractional displacement a − b with each component shifted into [−0.5, 0.5).
pub fn min_image_delta(a: &FracCoord, b: &FracCoord) -> [f64; 3] {
    let mut d = [0.0; 3];
    for k in 0..3 {
        let x = a.0[k] - b.0[k];
        d[k] = x - (x + 0.5).floor();
    }
    d
}

/// Largest component of the minimum-image fractional displacement.
pub fn frac_distance(a: &FracCoord, b: &FracCoord) -> f64 {
    min_image_delta(a, b).iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cartesian length (Å) of the minimum-image displacement between two points.
pub fn min_image_distance(lattice: &Lattice, a: &FracCoord, b: &FracCoord) -> f64 {
    let c = lattice.to_cartesian(min_image_delta(a, b));
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

fn wrap_rational(x: Rational64) -> Rational64 {
    x - x.floor()
}

/// A space-group element (W, t) acting as x ↦ W·x + t on fractional
/// coordinates. Translations are kept reduced modulo 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymOp {
    w: [[i64; 3]; 3],
    t: [Rational64; 3],
}

impl SymOp {
    pub fn new(w: [[i64; 3]; 3], t: [Rational64; 3]) -> Result<Self> {
        let det = idet3(&w);
        if det == 0 {
            return Err(CrystalError::SingularOperation);
        }
        for x in &t {
            if *x.denom() > MAX_DENOMINATOR {
                return Err(CrystalError::Denominator(*x.denom()));
            }
        }
        Ok(SymOp { w, t: t.map(wrap_rational) })
    }

    pub fn identity() -> Self {
        SymOp { w: [[1, 0, 0], [0, 1, 0], [0, 0, 1]], t: [Rational64::zero(); 3] }
    }

    pub fn translation(t: [Rational64; 3]) -> Self {
        SymOp::new([[1, 0, 0], [0, 1, 0], [0, 0, 1]], t).expect("identity linear part")
    }

    pub fn linear(&self) -> &[[i64; 3]; 3] {
        &self.w
    }

    pub fn translation_part(&self) -> &[Rational64; 3] {
        &self.t
    }

    pub fn det(&self) -> i64 {
        idet3(&self.w)
    }

    pub fn is_identity(&self) -> bool {
        *self == SymOp::identity()
    }

    /// Parse a Jones-faithful triplet such as `-x+1/2,y,z+1/4`.
    pub fn from_xyz(s: &str) -> Result<Self> {
        let err = || CrystalError::Parse(s.to_string());
        let rows: Vec<&str> = s.split(',').collect();
        if rows.len() != 3 {
            return Err(err());
        }
        let mut w = [[0i64; 3]; 3];
        let mut t = [Rational64::zero(); 3];
        for (r, expr) in rows.iter().enumerate() {
            let expr: String = expr.chars().filter(|c| !c.is_whitespace()).collect();
            if expr.is_empty() {
                return Err(err());
            }
            let mut terms = Vec::new();
            let mut cur = String::new();
            for ch in expr.chars() {
                if (ch == '+' || ch == '-') && !cur.is_empty() {
                    terms.push(std::mem::take(&mut cur));
                }
                cur.push(ch);
            }
            terms.push(cur);
            for term in terms {
                let (sign, body) = match term.strip_prefix('-') {
                    Some(b) => (-1, b),
                    None => (1, term.strip_prefix('+').unwrap_or(&term)),
                };
                let lower = body.to_ascii_lowercase();
                match lower.as_str() {
                    "x" => w[r][0] += sign,
                    "y" => w[r][1] += sign,
                    "z" => w[r][2] += sign,
                    _ => t[r] += parse_rational(body).ok_or_else(err)? * Rational64::from_integer(sign),
                }
            }
        }
        SymOp::new(w, t)
    }

    /// Parse twelve tokens forming the 3×4 matrix [W | t], row-major.
    pub fn from_rows(tokens: &[&str]) -> Result<Self> {
        let err = || CrystalError::Parse(tokens.join(" "));
        if tokens.len() != 12 {
            return Err(err());
        }
        let mut w = [[0i64; 3]; 3];
        let mut t = [Rational64::zero(); 3];
        for r in 0..3 {
            for c in 0..3 {
                w[r][c] = tokens[4 * r + c].parse().map_err(|_| err())?;
            }
            t[r] = parse_rational(tokens[4 * r + 3]).ok_or_else(err)?;
        }
        SymOp::new(w, t)
    }

    /// The 3×4 row form used by the framework file format.
    pub fn to_rows(&self) -> String {
        let mut parts = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                parts.push(self.w[r][c].to_string());
            }
            parts.push(self.t[r].to_string());
        }
        parts.join(" ")
    }

    pub fn apply(&self, x: &FracCoord) -> FracCoord {
        let mut y = [0.0; 3];
        for r in 0..3 {
            let mut acc = self.t[r].to_f64().unwrap_or(0.0);
            for c in 0..3 {
                acc += self.w[r][c] as f64 * x.0[c];
            }
            y[r] = wrap_component(acc);
        }
        FracCoord(y)
    }

    /// Apply to a raw vector without wrapping the result.
    pub fn apply_unwrapped(&self, x: [f64; 3]) -> [f64; 3] {
        let mut y = [0.0; 3];
        for r in 0..3 {
            y[r] = self.t[r].to_f64().unwrap_or(0.0);
            for c in 0..3 {
                y[r] += self.w[r][c] as f64 * x[c];
            }
        }
        y
    }

    pub fn inverse(&self) -> Result<SymOp> {
        let det = self.det();
        if det.abs() != 1 {
            return Err(CrystalError::NotUnimodular(det));
        }
        let m = &self.w;
        let mut inv = [[0i64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b) = ((j + 1) % 3, (j + 2) % 3);
                let (c, d) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) * det;
            }
        }
        let mut t = [Rational64::zero(); 3];
        for r in 0..3 {
            for c in 0..3 {
                t[r] -= Rational64::from_integer(inv[r][c]) * self.t[c];
            }
        }
        SymOp::new(inv, t)
    }

    /// Whether the linear part preserves the lattice metric within `tol`.
    pub fn is_isometry(&self, lattice: &Lattice, tol: f64) -> bool {
        let g = lattice.metric();
        let w = &self.w;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        v += w[a][i] as f64 * g[a][b] * w[b][j] as f64;
                    }
                }
                if (v - g[i][j]).abs() > tol * (1.0 + g[i][j].abs()) {
                    return false;
                }
            }
        }
        true
    }
}

impl fmt::Display for SymOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axes = ['x', 'y', 'z'];
        let mut rows = Vec::with_capacity(3);
        for r in 0..3 {
            let mut s = String::new();
            for c in 0..3 {
                let k = self.w[r][c];
                if k == 0 {
                    continue;
                }
                if k < 0 {
                    s.push('-');
                } else if !s.is_empty() {
                    s.push('+');
                }
                if k.abs() != 1 {
                    s.push_str(&k.abs().to_string());
                }
                s.push(axes[c]);
            }
            let t = self.t[r];
            if !t.is_zero() {
                if t.is_positive() && !s.is_empty() {
                    s.push('+');
                }
                s.push_str(&t.to_string());
            }
            if s.is_empty() {
                s.push('0');
            }
            rows.push(s);
        }
        write!(f, "{}", rows.join(","))
    }
}

pub fn parse_rational(s: &str) -> Option<Rational64> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: i64 = n.trim().parse().ok()?;
        let d: i64 = d.trim().parse().ok()?;
        if d == 0 {
            return None;
        }
        return Some(Rational64::new(n, d));
    }
    if let Ok(n) = s.parse::<i64>() {
        return Some(Rational64::from_integer(n));
    }
    // Decimal translations such as 0.25 are accepted when they are exact
    // small-denominator fractions.
    let v: f64 = s.parse().ok()?;
    (1..=MAX_DENOMINATOR).find_map(|d| {
        let n = (v * d as f64).round();
        ((n / d as f64 - v).abs() < 1e-9).then(|| Rational64::new(n as i64, d))
    })
}

fn idet3(m: &[[i64; 3]; 3]) -> i64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Composition `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &SymOp, b: &SymOp) -> SymOp {
    let mut w = [[0i64; 3]; 3];
    let mut t = a.t;
    for i in 0..3 {
        for j in 0..3 {
            w[i][j] = (0..3).map(|k| a.w[i][k] * b.w[k][j]).sum();
            t[i] += Rational64::from_integer(a.w[i][j]) * b.t[j];
        }
    }
    SymOp { w, t: t.map(wrap_rational) }
}

pub fn apply_symmetry(op: &SymOp, x: &FracCoord) -> FracCoord {
    op.apply(x)
}

/// A finite set of operations closed under composition modulo lattice
/// translations. The identity is always first.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGroup {
    ops: Vec<SymOp>,
}

impl SpaceGroup {
    pub fn trivial() -> Self {
        SpaceGroup { ops: vec![SymOp::identity()] }
    }

    pub fn ops(&self) -> &[SymOp] {
        &self.ops
    }

    pub fn order(&self) -> usize {
        self.ops.len()
    }

    pub fn contains(&self, op: &SymOp) -> bool {
        self.ops.contains(op)
    }
}

/// Smallest set containing the generators and the identity that is closed
/// under composition. Fails when the closure grows beyond `max_order`.
pub fn close_group(generators: &[SymOp], max_order: usize) -> Result<SpaceGroup> {
    let mut ops = vec![SymOp::identity()];
    let mut queue = VecDeque::new();
    for g in generators {
        if g.det().abs() != 1 {
            return Err(CrystalError::NotUnimodular(g.det()));
        }
        if !ops.contains(g) {
            ops.push(g.clone());
            queue.push_back(g.clone());
        }
    }
    if ops.len() > max_order {
        return Err(CrystalError::ClosureOverflow(max_order));
    }
    while let Some(g) = queue.pop_front() {
        for i in 0..ops.len() {
            for candidate in [compose(&g, &ops[i]), compose(&ops[i], &g)] {
                if !ops.contains(&candidate) {
                    if ops.len() >= max_order {
                        return Err(CrystalError::ClosureOverflow(max_order));
                    }
                    ops.push(candidate.clone());
                    queue.push_back(candidate);
                }
            }
        }
    }
    Ok(SpaceGroup { ops })
}

/// The distinct images {g·x | g ∈ G}, deduplicated within `tau` (fractional,
/// minimum-image max-norm).
pub fn orbit_of_point(group: &SpaceGroup, x: &FracCoord, tau: f64) -> Vec<FracCoord> {
    let mut out: Vec<FracCoord> = Vec::new();
    for op in group.ops() {
        let y = op.apply(x);
        if !out.iter().any(|p| frac_distance(p, &y) < tau) {
            out.push(y);
        }
    }
    out
}

/// Positions of the T-sites of one unit cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet {
    positions: Vec<FracCoord>,
}

impl SiteSet {
    pub fn new(positions: Vec<FracCoord>, tau: f64) -> Result<Self> {
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                if frac_distance(&positions[i], &positions[j]) < tau {
                    return Err(CrystalError::CoincidentSites(i, j));
                }
            }
        }
        Ok(SiteSet { positions })
    }

    pub fn positions(&self) -> &[FracCoord] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A bijection of {0, …, n−1}; `mapping[i]` is the image of `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n {
                return Err(CrystalError::InvalidPermutation(format!("index {m} out of range for length {n}")));
            }
            if std::mem::replace(&mut seen[m], true) {
                return Err(CrystalError::InvalidPermutation(format!("index {m} repeated")));
            }
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation { mapping: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn get(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &m)| i == m)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.len(), other.len(), "permutation lengths differ");
        Permutation { mapping: other.mapping.iter().map(|&j| self.mapping[j]).collect() }
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// Move data along the permutation: `out[π(i)] = data[i]`.
    pub fn permute<T: Clone>(&self, data: &[T]) -> Vec<T> {
        assert_eq!(data.len(), self.len(), "data length differs from permutation length");
        let mut out = data.to_vec();
        for (i, item) in data.iter().enumerate() {
            out[self.mapping[i]] = item.clone();
        }
        out
    }
}

/// The permutation of `positions` induced by `op`, matched within `tau`.
pub fn induced_permutation(op: &SymOp, positions: &[FracCoord], tau: f64) -> Result<Permutation> {
    let mut mapping = Vec::with_capacity(positions.len());
    for (i, x) in positions.iter().enumerate() {
        let y = op.apply(x);
        let mut hits = positions.iter().enumerate().filter(|(_, p)| frac_distance(p, &y) < tau).map(|(j, _)| j);
        let first = hits.next().ok_or_else(|| CrystalError::NoMatch { op: op.to_string(), site: i })?;
        let extra = hits.count();
        if extra > 0 {
            return Err(CrystalError::AmbiguousMatch { op: op.to_string(), site: i, count: extra + 1 });
        }
        mapping.push(first);
    }
    Permutation::new(mapping).map_err(|_| CrystalError::NotBijective { op: op.to_string() })
}

pub fn induced_site_permutation(op: &SymOp, sites: &SiteSet, tau: f64) -> Result<Permutation> {
    induced_permutation(op, sites.positions(), tau)
}
