//! Framework files, labeled configuration CSVs, splits and the synthetic
//! invariant oracle.
//!
//! # Framework file grammar
//!
//! Line oriented; `#` starts a comment. The first meaningful line is the
//! version header `porenet-framework 1`. Afterwards, in any order:
//!
//! ```text
//! name <word>
//! bond-cutoff <Å>            optional, default 3.5
//! tau-site <fractional>      optional, default 1e-3
//! lattice                    followed by three rows of three numbers (Å)
//! symops                     one generator per line, 12 tokens: W row, t, three times
//! sites                      one site per line: <label> x y z
//! bonds                      optional, one pair of 0-based site indices per line
//! pores                      one pore per line: x y z area : i j k ...
//! ```
//!
//! Coordinates and translations accept decimals or exact fractions (`1/4`).
//! Generators are closed into the full group by the loader, so listing every
//! element is allowed but not required. Explicit bonds take precedence over
//! the cutoff.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use thiserror::Error;

use crate::coloring::SharingPattern;
use crate::crystal::{parse_rational, wrap_fractional, FracCoord, Lattice, SymOp, TAU_SITE};
use crate::graph::{Framework, FrameworkSpec, GraphError, Occupancy, Pore, DEFAULT_BOND_CUTOFF};

pub const FRAMEWORK_HEADER: &str = "porenet-framework 1";

/// Shipped mordenite framework (48 T-sites).
pub const MOR_SOURCE: &str = include_str!("../data/mor.framework");
/// Shipped MFI framework (96 T-sites).
pub const MFI_SOURCE: &str = include_str!("../data/mfi.framework");

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("framework validation failed: {0}")]
    Framework(#[from] GraphError),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown builtin framework `{0}` (expected MOR or MFI)")]
    UnknownBuiltin(String),
    #[error("train fraction must be in (0, 1), got {0}")]
    Fraction(f64),
    #[error("duplicate configuration id `{0}`")]
    DuplicateId(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Decimal or exact fraction.
fn parse_number(tok: &str, line: usize) -> Result<f64> {
    if tok.contains('/') {
        let r = parse_rational(tok)
            .ok_or_else(|| DatasetError::Parse { line, msg: format!("invalid fraction `{tok}`") })?;
        return Ok(*r.numer() as f64 / *r.denom() as f64);
    }
    let v: f64 = tok.parse().map_err(|_| DatasetError::Parse { line, msg: format!("invalid number `{tok}`") })?;
    if !v.is_finite() {
        return Err(DatasetError::Parse { line, msg: format!("non-finite number `{tok}`") });
    }
    Ok(v)
}

fn parse_index(tok: &str, line: usize) -> Result<usize> {
    tok.parse().map_err(|_| DatasetError::Parse { line, msg: format!("invalid index `{tok}`") })
}

fn parse_coord(toks: &[&str], line: usize) -> Result<FracCoord> {
    let v = [parse_number(toks[0], line)?, parse_number(toks[1], line)?, parse_number(toks[2], line)?];
    wrap_fractional(v).map_err(|e| DatasetError::Parse { line, msg: e.to_string() })
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Lattice,
    Symops,
    Sites,
    Bonds,
    Pores,
}

/// Parse framework text into an unvalidated description.
pub fn parse_framework_spec(text: &str) -> Result<FrameworkSpec> {
    let mut header_seen = false;
    let mut section = Section::None;
    let mut name = None;
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut lattice_line = 0;
    let mut generators = Vec::new();
    let mut labels = Vec::new();
    let mut sites = Vec::new();
    let mut bonds: Option<Vec<(usize, usize)>> = None;
    let mut pores = Vec::new();
    let mut cutoff = DEFAULT_BOND_CUTOFF;
    let mut tau = TAU_SITE;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if !header_seen {
            if content != FRAMEWORK_HEADER {
                return Err(DatasetError::Parse {
                    line,
                    msg: format!("expected header `{FRAMEWORK_HEADER}`, found `{content}`"),
                });
            }
            header_seen = true;
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks[0] {
            "name" => {
                if toks.len() != 2 {
                    return Err(DatasetError::Parse { line, msg: "expected `name <word>`".into() });
                }
                name = Some(toks[1].to_string());
                section = Section::None;
                continue;
            }
            "bond-cutoff" | "tau-site" => {
                if toks.len() != 2 {
                    return Err(DatasetError::Parse { line, msg: format!("expected `{} <number>`", toks[0]) });
                }
                let v = parse_number(toks[1], line)?;
                if toks[0] == "bond-cutoff" {
                    cutoff = v;
                } else {
                    tau = v;
                }
                section = Section::None;
                continue;
            }
            "lattice" | "symops" | "sites" | "bonds" | "pores" if toks.len() == 1 => {
                section = match toks[0] {
                    "lattice" => {
                        lattice_line = line;
                        Section::Lattice
                    }
                    "symops" => Section::Symops,
                    "sites" => Section::Sites,
                    "bonds" => {
                        bonds.get_or_insert_with(Vec::new);
                        Section::Bonds
                    }
                    _ => Section::Pores,
                };
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => {
                return Err(DatasetError::Parse { line, msg: format!("unexpected `{content}` outside a section") })
            }
            Section::Lattice => {
                if toks.len() != 3 || rows.len() == 3 {
                    return Err(DatasetError::Parse {
                        line,
                        msg: "lattice takes exactly three rows of three numbers".into(),
                    });
                }
                rows.push([parse_number(toks[0], line)?, parse_number(toks[1], line)?, parse_number(toks[2], line)?]);
            }
            Section::Symops => {
                if toks.len() != 12 {
                    return Err(DatasetError::Parse {
                        line,
                        msg: format!("symop needs 12 tokens, found {}", toks.len()),
                    });
                }
                generators.push(SymOp::from_rows(&toks).map_err(|e| DatasetError::Parse { line, msg: e.to_string() })?);
            }
            Section::Sites => {
                if toks.len() != 4 {
                    return Err(DatasetError::Parse { line, msg: "site needs `<label> x y z`".into() });
                }
                labels.push(toks[0].to_string());
                sites.push(parse_coord(&toks[1..4], line)?);
            }
            Section::Bonds => {
                if toks.len() != 2 {
                    return Err(DatasetError::Parse { line, msg: "bond needs two site indices".into() });
                }
                let b = (parse_index(toks[0], line)?, parse_index(toks[1], line)?);
                bonds.get_or_insert_with(Vec::new).push(b);
            }
            Section::Pores => {
                if toks.len() < 6 || toks[4] != ":" {
                    return Err(DatasetError::Parse { line, msg: "pore needs `x y z area : i j ...`".into() });
                }
                let center = parse_coord(&toks[0..3], line)?;
                let area = parse_number(toks[3], line)?;
                let boundary = toks[5..].iter().map(|t| parse_index(t, line)).collect::<Result<Vec<_>>>()?;
                pores.push(Pore { center, area, boundary });
            }
        }
    }
    if !header_seen {
        return Err(DatasetError::Parse { line: 1, msg: "empty framework file".into() });
    }
    if rows.len() != 3 {
        return Err(DatasetError::Parse { line: lattice_line.max(1), msg: "missing or incomplete lattice".into() });
    }
    if sites.is_empty() {
        return Err(DatasetError::Parse { line: 1, msg: "no sites".into() });
    }
    let lattice = Lattice::new([rows[0], rows[1], rows[2]]).map_err(GraphError::from)?;
    Ok(FrameworkSpec {
        name: name.unwrap_or_else(|| "unnamed".into()),
        lattice,
        site_labels: labels,
        sites,
        generators,
        bonds,
        bond_cutoff: cutoff,
        pores,
        tau_site: tau,
    })
}

pub fn parse_framework(text: &str) -> Result<Framework> {
    Ok(Framework::new(parse_framework_spec(text)?)?)
}

pub fn load_framework(path: impl AsRef<Path>) -> Result<Framework> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_framework(&text)
}

/// Either a shipped framework name (`MOR`, `MFI`) or a path.
pub fn resolve_framework(name_or_path: &str) -> Result<Framework> {
    match builtin_framework(name_or_path) {
        Ok(fw) => Ok(fw),
        Err(DatasetError::UnknownBuiltin(_)) => load_framework(name_or_path),
        Err(e) => Err(e),
    }
}

pub fn builtin_framework(name: &str) -> Result<Framework> {
    match name.to_ascii_uppercase().as_str() {
        "MOR" => parse_framework(MOR_SOURCE),
        "MFI" => parse_framework(MFI_SOURCE),
        _ => Err(DatasetError::UnknownBuiltin(name.to_string())),
    }
}

/// Serialize a framework in the file grammar. Sites and pore centers are
/// written with round-trip precision and the full group is listed.
pub fn write_framework(fw: &Framework) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FRAMEWORK_HEADER}");
    let _ = writeln!(s, "name {}", fw.name());
    let _ = writeln!(s, "bond-cutoff {}", fw.bond_cutoff());
    let _ = writeln!(s, "tau-site {}", fw.tau_site());
    let _ = writeln!(s, "\nlattice");
    for row in fw.lattice().basis() {
        let _ = writeln!(s, "  {} {} {}", row[0], row[1], row[2]);
    }
    let _ = writeln!(s, "\nsymops");
    for op in fw.group().ops().iter().filter(|op| !op.is_identity()) {
        let _ = writeln!(s, "  {}    # {}", op.to_rows(), op);
    }
    let _ = writeln!(s, "\nsites");
    for (label, x) in fw.site_labels().iter().zip(fw.sites().positions()) {
        let c = x.components();
        let _ = writeln!(s, "  {label} {} {} {}", c[0], c[1], c[2]);
    }
    if fw.bonds_explicit() {
        let _ = writeln!(s, "\nbonds");
        for (i, j) in fw.bonds() {
            let _ = writeln!(s, "  {i} {j}");
        }
    }
    if !fw.pores().is_empty() {
        let _ = writeln!(s, "\npores");
        for p in fw.pores() {
            let c = p.center.components();
            let ids: Vec<String> = p.boundary.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "  {} {} {} {} : {}", c[0], c[1], c[2], p.area, ids.join(" "));
        }
    }
    s
}

/// One labeled Si/Al configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledConfig {
    pub id: String,
    pub occupancy: Occupancy,
    /// Heat of adsorption, kJ/mol.
    pub hoa: f64,
}

/// Train/test partition of configuration ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub framework: String,
    pub configs: Vec<LabeledConfig>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(framework: impl Into<String>, configs: Vec<LabeledConfig>) -> Self {
        Dataset { framework: framework.into(), configs, split: None }
    }

    /// Configurations of the train and test partitions, in split order.
    pub fn partitions(&self) -> Option<(Vec<&LabeledConfig>, Vec<&LabeledConfig>)> {
        let split = self.split.as_ref()?;
        let by_id: std::collections::HashMap<&str, &LabeledConfig> =
            self.configs.iter().map(|c| (c.id.as_str(), c)).collect();
        let pick = |ids: &[String]| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect();
        Some((pick(&split.train), pick(&split.test)))
    }
}

/// Parse an `id,occupancy,hoa` CSV. Rows are numbered from 1 after the
/// header.
pub fn parse_configurations<R: Read>(reader: R, n_sites: usize) -> Result<Vec<LabeledConfig>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["id", "occupancy", "hoa"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(DatasetError::Row {
            row: 0,
            msg: format!("header must be `id,occupancy,hoa`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| DatasetError::Row { row, msg: e.to_string() })?;
        if rec.len() != 3 {
            return Err(DatasetError::Row { row, msg: format!("expected 3 fields, found {}", rec.len()) });
        }
        let id = rec[0].to_string();
        let occupancy: Occupancy =
            rec[1].parse().map_err(|e: GraphError| DatasetError::Row { row, msg: e.to_string() })?;
        if occupancy.len() != n_sites {
            return Err(DatasetError::Row {
                row,
                msg: format!("occupancy has {} sites, framework has {n_sites}", occupancy.len()),
            });
        }
        let hoa: f64 =
            rec[2].parse().map_err(|_| DatasetError::Row { row, msg: format!("invalid label `{}`", &rec[2]) })?;
        if !hoa.is_finite() {
            return Err(DatasetError::Row { row, msg: format!("non-finite label `{}`", &rec[2]) });
        }
        if !ids.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        out.push(LabeledConfig { id, occupancy, hoa });
    }
    Ok(out)
}

pub fn load_configurations(path: impl AsRef<Path>, framework: &Framework) -> Result<Vec<LabeledConfig>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_configurations(file, framework.n_sites())
}

pub fn write_configurations_to<W: Write>(writer: W, configs: &[LabeledConfig]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "occupancy", "hoa"])?;
    for c in configs {
        w.write_record([c.id.clone(), c.occupancy.to_string(), format!("{}", c.hoa)])?;
    }
    w.flush().map_err(|source| DatasetError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn write_configurations(path: impl AsRef<Path>, configs: &[LabeledConfig]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_configurations_to(std::io::BufWriter::new(file), configs)
}

/// Fisher–Yates shuffle driven by SplitMix64. The swap index for position
/// i is `(next_u64 * (i + 1)) >> 64`.
pub fn shuffle_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = ((rng.next_u64() as u128 * (i as u128 + 1)) >> 64) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Seeded shuffle of ids; the first floor(train_frac·N) go to train.
pub fn split(dataset: &Dataset, train_frac: f64, seed: u64) -> Result<Dataset> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(DatasetError::Fraction(train_frac));
    }
    let n = dataset.configs.len();
    let order = shuffle_indices(n, seed);
    let n_train = (train_frac * n as f64).floor() as usize;
    let ids: Vec<String> = order.iter().map(|&i| dataset.configs[i].id.clone()).collect();
    Ok(Dataset {
        split: Some(Split { train: ids[..n_train].to_vec(), test: ids[n_train..].to_vec(), seed }),
        ..dataset.clone()
    })
}

pub fn write_split_manifest_to<W: Write>(writer: W, split: &Split) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "partition"])?;
    for id in &split.train {
        w.write_record([id.as_str(), "train"])?;
    }
    for id in &split.test {
        w.write_record([id.as_str(), "test"])?;
    }
    w.flush().map_err(|source| DatasetError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn write_split_manifest(path: impl AsRef<Path>, split: &Split) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    write_split_manifest_to(std::io::BufWriter::new(file), split)
}

pub fn read_split_manifest<R: Read>(reader: R, seed: u64) -> Result<Split> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut split = Split { train: Vec::new(), test: Vec::new(), seed };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match rec.get(1) {
            Some("train") => split.train.push(rec[0].to_string()),
            Some("test") => split.test.push(rec[0].to_string()),
            other => return Err(DatasetError::Row { row: i + 1, msg: format!("unknown partition {other:?}") }),
        }
    }
    Ok(split)
}

/// Invariant labeling function with weights indexed by color.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOracle {
    pub c0: f64,
    /// Per atom color.
    pub node_weights: Vec<f64>,
    /// Per atom–atom edge color; counted once per directed edge with both
    /// ends Al.
    pub edge_weights: Vec<f64>,
    /// Per pore color; multiplies the squared Al count on the pore boundary.
    /// Empty disables the pore term.
    pub pore_weights: Vec<f64>,
    pub noise: f64,
}

impl SynthOracle {
    /// Draw weights for a sharing pattern: c0 = −20, w ~ U(−2, −0.5),
    /// v ~ U(−0.5, 0.5), pore u ~ U(−0.4, −0.1) when `pore_term` is set.
    pub fn sample<R: Rng>(pattern: &SharingPattern, pore_term: bool, noise: f64, rng: &mut R) -> Self {
        let node_weights = (0..pattern.nodes.atoms.count).map(|_| rng.random_range(-2.0..-0.5)).collect();
        let edge_weights = (0..pattern.edges.atom_atom.count).map(|_| rng.random_range(-0.5..0.5)).collect();
        let pore_weights = if pore_term {
            (0..pattern.nodes.pores.count).map(|_| rng.random_range(-0.4..-0.1)).collect()
        } else {
            Vec::new()
        };
        SynthOracle { c0: -20.0, node_weights, edge_weights, pore_weights, noise }
    }

    /// Noise-free label of an occupancy. Terms are tallied per color as
    /// integers and summed in color order, so the result is bit-identical
    /// for any two occupancies in the same orbit.
    pub fn label(&self, pattern: &SharingPattern, occ: &Occupancy) -> f64 {
        let mut node_counts = vec![0u64; self.node_weights.len()];
        for (i, &c) in pattern.nodes.atoms.colors.iter().enumerate() {
            if occ.is_al(i) {
                node_counts[c] += 1;
            }
        }
        let mut edge_counts = vec![0u64; self.edge_weights.len()];
        let h = &pattern.edges.atom_atom;
        for (&(i, j), &c) in h.edges.iter().zip(&h.colors) {
            if occ.is_al(i) && occ.is_al(j) {
                edge_counts[c] += 1;
            }
        }
        let mut pore_counts = vec![0u64; self.pore_weights.len()];
        if !self.pore_weights.is_empty() {
            let mut al = vec![0u64; pattern.n_pores()];
            for &(p, a) in &pattern.edges.pore_atom.edges {
                if occ.is_al(a) {
                    al[p] += 1;
                }
            }
            for (p, &n) in al.iter().enumerate() {
                pore_counts[pattern.nodes.pores.colors[p]] += n * n;
            }
        }
        let mut y = self.c0;
        for (w, n) in
            [(&self.node_weights, node_counts), (&self.edge_weights, edge_counts), (&self.pore_weights, pore_counts)]
        {
            for (wc, nc) in w.iter().zip(n) {
                y += wc * nc as f64;
            }
        }
        y
    }
}

/// Occupancy with an Al count drawn uniformly from [0, max_al] and Al sites
/// drawn uniformly without replacement.
pub fn random_occupancy<R: Rng>(n_sites: usize, max_al: usize, rng: &mut R) -> Occupancy {
    let k = rng.random_range(0..=max_al.min(n_sites));
    let al: Vec<usize> = sample(rng, n_sites, k).into_iter().collect();
    Occupancy::from_al_sites(n_sites, &al)
}

/// Generate labeled configurations from an oracle.
pub fn synth_generate_with(
    oracle: &SynthOracle,
    pattern: &SharingPattern,
    n_configs: usize,
    max_al: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledConfig> {
    let normal = Normal::new(0.0, oracle.noise.max(0.0)).expect("finite noise");
    (0..n_configs)
        .map(|i| {
            let occupancy = random_occupancy(pattern.n_atoms(), max_al, rng);
            let mut hoa = oracle.label(pattern, &occupancy);
            if oracle.noise > 0.0 {
                hoa += normal.sample(rng);
            }
            LabeledConfig { id: format!("c{i:05}"), occupancy, hoa }
        })
        .collect()
}

/// Draw an oracle from `seed` and generate `n_configs` labeled
/// configurations with it.
pub fn synth_generate(
    pattern: &SharingPattern,
    n_configs: usize,
    max_al: usize,
    seed: u64,
    noise: f64,
    pore_term: bool,
) -> (SynthOracle, Vec<LabeledConfig>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = SynthOracle::sample(pattern, pore_term, noise, &mut rng);
    let configs = synth_generate_with(&oracle, pattern, n_configs, max_al, &mut rng);
    (oracle, configs)
}
