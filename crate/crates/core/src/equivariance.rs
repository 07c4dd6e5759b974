//! Numerical equivariance audit by explicit permutation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coloring::NodeKind;
use crate::crystal::Permutation;
use crate::graph::{Framework, GraphTopology, Occupancy};
use crate::model::{relabel_topology, Model, NodeStates, Result};

/// Worst deviation found by an equivariance or relabeling check.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivReport {
    pub tolerance: f64,
    pub max_deviation: f64,
    pub max_state_deviation: f64,
    pub max_prediction_deviation: f64,
    /// Index into the group (or relabeling number) of the worst case.
    pub worst_op: Option<usize>,
    pub worst_op_label: Option<String>,
    pub worst_node: Option<(NodeKind, usize)>,
    /// Orbits whose states already disagree after a single step for the
    /// worst element; empty when the check passes.
    pub offending_orbits: Vec<(NodeKind, Vec<usize>)>,
    pub n_elements: usize,
    pub n_configs: usize,
}

impl EquivReport {
    pub fn passes(&self) -> bool {
        self.max_deviation <= self.tolerance
    }

    fn new(tolerance: f64, n_elements: usize, n_configs: usize) -> Self {
        EquivReport {
            tolerance,
            max_deviation: 0.0,
            max_state_deviation: 0.0,
            max_prediction_deviation: 0.0,
            worst_op: None,
            worst_op_label: None,
            worst_node: None,
            offending_orbits: Vec::new(),
            n_elements,
            n_configs,
        }
    }
}

/// Largest |b[π(i)] − a[i]| over rows, with the row that attains it.
fn permuted_deviation(
    a: &NodeStates,
    b: &NodeStates,
    pa: &Permutation,
    pp: &Permutation,
) -> (f64, Option<(NodeKind, usize)>) {
    let mut worst = (0.0, None);
    for (kind, x, y, perm) in [(NodeKind::Atom, &a.t, &b.t, pa), (NodeKind::Pore, &a.p, &b.p, pp)] {
        let rows = x.shape()[0];
        for i in 0..rows {
            let d = x.row(i).iter().zip(y.row(perm.get(i))).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            if d > worst.0 || worst.1.is_none() {
                worst = (d.max(worst.0), if d >= worst.0 { Some((kind, i)) } else { worst.1 });
            }
        }
    }
    worst
}

fn record(report: &mut EquivReport, op: usize, state_dev: f64, node: Option<(NodeKind, usize)>, pred_dev: f64) {
    report.max_state_deviation = report.max_state_deviation.max(state_dev);
    report.max_prediction_deviation = report.max_prediction_deviation.max(pred_dev);
    let dev = state_dev.max(pred_dev);
    if dev > report.max_deviation || report.worst_op.is_none() {
        report.max_deviation = report.max_deviation.max(dev);
        report.worst_op = Some(op);
        report.worst_node = node;
    }
}

/// For every group element g of the model's pattern and every occupancy x,
/// compare the model on g·x with the model on x: final node states must
/// satisfy h(g·x)[π_g(i)] = h(x)[i] and predictions must agree.
pub fn equivariance_check(
    model: &Model,
    topo: &GraphTopology,
    occs: &[Occupancy],
    tolerance: f64,
) -> Result<EquivReport> {
    let pattern = model.pattern();
    let pore_perms: Vec<Permutation> = if model.config().with_pores {
        pattern.pore_perms.clone()
    } else {
        vec![Permutation::identity(0); pattern.atom_perms.len()]
    };
    let n_ops = pattern.atom_perms.len();
    let mut report = EquivReport::new(tolerance, n_ops, occs.len());
    for occ in occs {
        let images: Vec<Occupancy> = pattern.atom_perms.iter().map(|g| occ.permuted(g)).collect();
        let mut batch: Vec<&Occupancy> = vec![occ];
        batch.extend(images.iter());
        let (preds, states) = model.forward_batch(topo, &batch)?;
        for g in 0..n_ops {
            let (sd, node) = permuted_deviation(&states[0], &states[g + 1], &pattern.atom_perms[g], &pore_perms[g]);
            record(&mut report, g, sd, node, (preds[0] - preds[g + 1]).abs());
        }
    }
    if !report.passes() {
        if let (Some(g), Some(occ)) = (report.worst_op, occs.first()) {
            report.offending_orbits = localize(model, topo, occ, &pattern.atom_perms[g], &pore_perms[g], tolerance)?;
        }
    }
    Ok(report)
}

/// Orbits (as colored in the model's pattern) whose one-step states break
/// equivariance under one element.
fn localize(
    model: &Model,
    topo: &GraphTopology,
    occ: &Occupancy,
    pa: &Permutation,
    pp: &Permutation,
    tolerance: f64,
) -> Result<Vec<(NodeKind, Vec<usize>)>> {
    let one = model.with_steps(1);
    let image = occ.permuted(pa);
    let (_, states) = one.forward_batch(topo, &[occ, &image])?;
    let pattern = model.pattern();
    let mut colors = std::collections::BTreeSet::new();
    for (kind, x, y, perm) in
        [(NodeKind::Atom, &states[0].t, &states[1].t, pa), (NodeKind::Pore, &states[0].p, &states[1].p, pp)]
    {
        for i in 0..x.shape()[0] {
            let d = x.row(i).iter().zip(y.row(perm.get(i))).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            if d > tolerance {
                colors.insert((kind, pattern.nodes.kind(kind).colors[i]));
            }
        }
    }
    Ok(colors
        .into_iter()
        .map(|(kind, c)| {
            let members =
                pattern.nodes.kind(kind).colors.iter().enumerate().filter(|&(_, &x)| x == c).map(|(i, _)| i).collect();
            (kind, members)
        })
        .collect())
}

/// [`equivariance_check`] with the worst element named by its symmetry
/// operation.
pub fn equivariance_check_framework(
    model: &Model,
    framework: &Framework,
    topo: &GraphTopology,
    occs: &[Occupancy],
    tolerance: f64,
) -> Result<EquivReport> {
    let mut report = equivariance_check(model, topo, occs, tolerance)?;
    report.worst_op_label = report.worst_op.and_then(|g| framework.group().ops().get(g)).map(|op| op.to_string());
    Ok(report)
}

/// Invariance under arbitrary renaming of nodes with edges renamed
/// consistently. Applies to every model, including the single-bank
/// ablation, whose banks do not depend on node identity.
pub fn relabel_check(
    model: &Model,
    topo: &GraphTopology,
    occs: &[Occupancy],
    n_relabelings: usize,
    seed: u64,
    tolerance: f64,
) -> Result<EquivReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivReport::new(tolerance, n_relabelings, occs.len());
    let batch: Vec<&Occupancy> = occs.iter().collect();
    let (preds, states) = model.forward_batch(topo, &batch)?;
    for r in 0..n_relabelings {
        let mut a: Vec<usize> = (0..model.n_atoms()).collect();
        a.shuffle(&mut rng);
        let mut p: Vec<usize> = (0..model.n_pores()).collect();
        p.shuffle(&mut rng);
        let (pa, pp) = (Permutation::new(a)?, Permutation::new(p)?);
        let relabeled = model.relabeled(&pa, &pp)?;
        let topo2 = relabel_topology(topo, &pa, &pp);
        let images: Vec<Occupancy> = occs.iter().map(|o| o.permuted(&pa)).collect();
        let image_refs: Vec<&Occupancy> = images.iter().collect();
        let (preds2, states2) = relabeled.forward_batch(&topo2, &image_refs)?;
        for c in 0..occs.len() {
            let (sd, node) = permuted_deviation(&states[c], &states2[c], &pa, &pp);
            record(&mut report, r, sd, node, (preds[c] - preds2[c]).abs());
        }
    }
    Ok(report)
}
