//! Color-indexed message passing network over atoms and pores.
//!
//! Rows of every per-node and per-edge matrix are stored bank-major: all
//! rows that share a weight bank are contiguous (and within a bank, ordered
//! by batch item), so each bank is one dense matrix product.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{init_uniform, DiffError, ParamId, ParamStore, Segment, Tape, Tensor, Var};
use crate::coloring::{EdgeKind, NodeKind, SharingPattern, TypedEdges};
use crate::crystal::Permutation;
use crate::graph::{CrystalGraph, GraphError, GraphTopology, Occupancy, RbfConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Crystal(#[from] crate::crystal::CrystalError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("graph does not match the model's sharing pattern: {0}")]
    Mismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub steps: usize,
    pub readout_width: usize,
    /// Width of the hidden layer inside each two-layer update block.
    pub update_hidden: usize,
    pub with_pores: bool,
    pub with_symmetry: bool,
    pub aggregation: Aggregation,
    /// Reuse one set of message and update banks for every step.
    pub tie_steps: bool,
    pub leaky_slope: f64,
    pub rbf: RbfConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 16,
            steps: 6,
            readout_width: 24,
            update_hidden: 32,
            with_pores: true,
            with_symmetry: true,
            aggregation: Aggregation::Mean,
            tie_steps: true,
            leaky_slope: 0.01,
            rbf: RbfConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.readout_width == 0 || self.update_hidden == 0 {
            return Err(ModelError::Config("hidden, steps, readout_width and update_hidden must be at least 1".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(ModelError::Config(format!("invalid leaky slope {}", self.leaky_slope)));
        }
        Ok(())
    }
}

/// Affine map from network output to kJ/mol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { shift: 0.0, scale: 1.0 }
    }
}

impl Normalization {
    /// Mean and population standard deviation of the labels (scale 1 when
    /// the labels are constant).
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        Normalization { shift: mean, scale: if sd > 1e-12 { sd } else { 1.0 } }
    }
}

/// Weight-bank assignment of the items of one node or edge kind.
#[derive(Debug, Clone, PartialEq)]
struct Banks {
    bank: Vec<usize>,
    count: usize,
    start: Vec<usize>,
    size: Vec<usize>,
    offset: Vec<usize>,
}

impl Banks {
    fn new(bank: Vec<usize>, count: usize) -> Self {
        let mut size = vec![0; count];
        let mut offset = vec![0; bank.len()];
        for (i, &c) in bank.iter().enumerate() {
            offset[i] = size[c];
            size[c] += 1;
        }
        let mut start = vec![0; count];
        for c in 1..count {
            start[c] = start[c - 1] + size[c - 1];
        }
        Banks { bank, count, start, size, offset }
    }

    fn len(&self) -> usize {
        self.bank.len()
    }

    /// Row of item `i` of batch element `b` in a batch of `nb`.
    fn row(&self, nb: usize, b: usize, i: usize) -> usize {
        let c = self.bank[i];
        nb * self.start[c] + b * self.size[c] + self.offset[i]
    }

    fn segments(&self, nb: usize) -> Arc<[Segment]> {
        (0..self.count)
            .filter(|&c| self.size[c] > 0)
            .map(|c| Segment { start: nb * self.start[c], len: nb * self.size[c], bank: c })
            .collect()
    }

    /// (batch, item) for every row.
    fn row_items(&self, nb: usize) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); nb * self.len()];
        for i in 0..self.len() {
            for b in 0..nb {
                out[self.row(nb, b, i)] = (b, i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Lin {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StepIds {
    /// Indexed by `EdgeKind::index`; `None` for kinds without edges.
    msg: [Option<Lin>; 3],
    gate: [Option<Lin>; 3],
    atom_up: [Lin; 2],
    pore_up: Option<[Lin; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Ids {
    atom_embed: Lin,
    pore_embed: Option<Lin>,
    edge_embed: Lin,
    steps: Vec<StepIds>,
    readout: [Lin; 2],
    head: [Lin; 2],
}

/// Index arrays for one batch size.
struct Plan {
    nb: usize,
    atom_segments: Arc<[Segment]>,
    pore_segments: Arc<[Segment]>,
    atom_rows: Vec<(usize, usize)>,
    pore_rows: Vec<(usize, usize)>,
    /// Per-config pore row gather from the unbatched pore embedding.
    pore_feature_idx: Arc<[usize]>,
    edges: [EdgePlan; 3],
    pool_idx: Arc<[usize]>,
}

struct EdgePlan {
    segments: Arc<[Segment]>,
    sender: Arc<[usize]>,
    receiver: Arc<[usize]>,
    feature: Arc<[usize]>,
}

/// Atom and pore embeddings of one configuration, in framework order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub t: Tensor,
    pub p: Tensor,
    pub step: usize,
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    pattern: SharingPattern,
    atoms: Banks,
    pores: Banks,
    edges: [Banks; 3],
    edge_lists: TypedEdges,
    pub normalization: Normalization,
    plans: Mutex<HashMap<usize, Arc<Plan>>>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            pattern: self.pattern.clone(),
            atoms: self.atoms.clone(),
            pores: self.pores.clone(),
            edges: self.edges.clone(),
            edge_lists: self.edge_lists.clone(),
            normalization: self.normalization,
            plans: Mutex::new(HashMap::new()),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("parameters", &self.params.num_scalars()).finish()
    }
}

fn bank_assignments(pattern: &SharingPattern, cfg: &ModelConfig) -> (Banks, Banks, [Banks; 3], TypedEdges) {
    let collapse = |colors: &[usize], count: usize| {
        if cfg.with_symmetry {
            Banks::new(colors.to_vec(), count)
        } else {
            Banks::new(vec![0; colors.len()], usize::from(!colors.is_empty()))
        }
    };
    let atoms = collapse(&pattern.nodes.atoms.colors, pattern.nodes.atoms.count);
    let h = &pattern.edges.atom_atom;
    let mut lists = TypedEdges { atom_atom: h.edges.clone(), ..Default::default() };
    let (pores, k, l) = if cfg.with_pores {
        let k = &pattern.edges.pore_atom;
        let l = &pattern.edges.atom_pore;
        lists.pore_atom = k.edges.clone();
        lists.atom_pore = l.edges.clone();
        (
            collapse(&pattern.nodes.pores.colors, pattern.nodes.pores.count),
            collapse(&k.colors, k.count),
            collapse(&l.colors, l.count),
        )
    } else {
        (Banks::new(vec![], 0), Banks::new(vec![], 0), Banks::new(vec![], 0))
    };
    let h = collapse(&h.colors, h.count);
    (atoms, pores, [h, k, l], lists)
}

/// Add a weight stack of `banks` (fan_in × fan_out) blocks plus bias rows.
fn add_lin(
    store: &mut ParamStore,
    name: &str,
    banks: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Lin> {
    let mut data = Vec::with_capacity(banks * fan_in * fan_out);
    for _ in 0..banks {
        data.extend(init_uniform(fan_in, fan_out, fan_in, rng).into_data());
    }
    let w = store.add(format!("{name}.w"), Tensor::matrix(banks * fan_in, fan_out, data)?)?;
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[banks, fan_out]))?;
    Ok(Lin { w, b })
}

/// Build a model for a sharing pattern. With `with_pores` unset the pore
/// part of the pattern is ignored; with `with_symmetry` unset every kind
/// collapses to a single bank.
pub fn init_model(pattern: &SharingPattern, cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    if cfg.with_pores && pattern.n_pores() == 0 {
        return Err(ModelError::Config("with_pores is set but the pattern has no pore nodes".into()));
    }
    let (atoms, pores, edges, edge_lists) = bank_assignments(pattern, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let h = cfg.hidden;
    let k = cfg.rbf.len();
    let atom_embed = add_lin(&mut store, "embed.atom", 1, 2, h, &mut rng)?;
    let pore_embed = if cfg.with_pores { Some(add_lin(&mut store, "embed.pore", 1, 2, h, &mut rng)?) } else { None };
    let edge_embed = add_lin(&mut store, "embed.edge", 1, k, h, &mut rng)?;
    let n_step_sets = if cfg.tie_steps { 1 } else { cfg.steps };
    let mut steps = Vec::with_capacity(n_step_sets);
    for s in 0..n_step_sets {
        let prefix = if cfg.tie_steps { String::new() } else { format!("step{s}.") };
        let mut msg = [None; 3];
        let mut gate = [None; 3];
        for kind in EdgeKind::ALL {
            let banks = &edges[kind.index()];
            if banks.count == 0 {
                continue;
            }
            msg[kind.index()] =
                Some(add_lin(&mut store, &format!("{prefix}message.{}", kind.tag()), banks.count, 3 * h, h, &mut rng)?);
            gate[kind.index()] = Some(add_lin(&mut store, &format!("{prefix}gate.{}", kind.tag()), 1, h, 1, &mut rng)?);
        }
        let atom_in = if cfg.with_pores { 3 * h } else { 2 * h };
        let atom_up = [
            add_lin(&mut store, &format!("{prefix}update.atom.0"), atoms.count, atom_in, cfg.update_hidden, &mut rng)?,
            add_lin(&mut store, &format!("{prefix}update.atom.1"), atoms.count, cfg.update_hidden, h, &mut rng)?,
        ];
        let pore_up = if cfg.with_pores {
            Some([
                add_lin(
                    &mut store,
                    &format!("{prefix}update.pore.0"),
                    pores.count,
                    2 * h,
                    cfg.update_hidden,
                    &mut rng,
                )?,
                add_lin(&mut store, &format!("{prefix}update.pore.1"), pores.count, cfg.update_hidden, h, &mut rng)?,
            ])
        } else {
            None
        };
        steps.push(StepIds { msg, gate, atom_up, pore_up });
    }
    let r = cfg.readout_width;
    let readout_kind = if cfg.with_pores { "pore" } else { "atom" };
    let readout = [
        add_lin(&mut store, &format!("readout.{readout_kind}.0"), 1, h, r, &mut rng)?,
        add_lin(&mut store, &format!("readout.{readout_kind}.1"), 1, r, r, &mut rng)?,
    ];
    let head = [add_lin(&mut store, "head.0", 1, r, r, &mut rng)?, add_lin(&mut store, "head.1", 1, r, 1, &mut rng)?];
    Ok(Model {
        config: cfg.clone(),
        params: store,
        ids: Ids { atom_embed, pore_embed, edge_embed, steps, readout, head },
        pattern: pattern.clone(),
        atoms,
        pores,
        edges,
        edge_lists,
        normalization: Normalization::default(),
        plans: Mutex::new(HashMap::new()),
    })
}

/// Number of stored learnable scalars: embeddings, message banks, gates,
/// update banks, readout and head, weights and biases alike.
pub fn count_parameters(model: &Model) -> usize {
    model.params.num_scalars()
}

/// A bank that was split off an orbit by [`Model::inject_fault`].
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedFault {
    pub color: usize,
    pub orbit: Vec<usize>,
    pub moved: Vec<usize>,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn pattern(&self) -> &SharingPattern {
        &self.pattern
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn n_pores(&self) -> usize {
        self.pores.len()
    }

    /// Update banks for nodes of a kind.
    pub fn node_bank_count(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Atom => self.atoms.count,
            NodeKind::Pore => self.pores.count,
        }
    }

    /// Message banks for edges of a kind.
    pub fn edge_bank_count(&self, kind: EdgeKind) -> usize {
        self.edges[kind.index()].count
    }

    /// A copy running only the first `steps` message-passing rounds.
    pub fn with_steps(&self, steps: usize) -> Model {
        let mut m = self.clone();
        m.config.steps = steps;
        m
    }

    /// Replace all parameters, keeping names and shapes.
    pub fn load_params(&mut self, params: ParamStore) -> Result<()> {
        let same = params.len() == self.params.len()
            && params
                .iter()
                .zip(self.params.iter())
                .all(|((_, n1, t1), (_, n2, t2))| n1 == n2 && t1.shape() == t2.shape());
        if !same {
            return Err(ModelError::Checkpoint("parameter names or shapes differ from the model".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Split one atom orbit across two update banks: the first member of
    /// the first multi-member color gets its own perturbed copy of the bank.
    pub fn inject_fault(&mut self, seed: u64) -> Result<InjectedFault> {
        let color = (0..self.atoms.count)
            .find(|&c| self.atoms.size[c] > 1)
            .ok_or_else(|| ModelError::Config("no atom orbit with more than one member".into()))?;
        let orbit: Vec<usize> = (0..self.atoms.len()).filter(|&i| self.atoms.bank[i] == color).collect();
        let moved = vec![orbit[0]];
        let new_bank = self.atoms.count;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..self.ids.steps.len() {
            for lin in self.ids.steps[s].atom_up {
                for id in [lin.w, lin.b] {
                    let t = self.params.get(id);
                    let rows_per_bank = t.shape()[0] / self.atoms.count;
                    let cols = t.shape()[1];
                    let block = &t.data()[color * rows_per_bank * cols..(color + 1) * rows_per_bank * cols];
                    let mut data = t.data().to_vec();
                    data.extend(block.iter().map(|v| v + 0.1 + rand::Rng::random_range(&mut rng, -0.05..0.05)));
                    *self.params.get_mut(id) = Tensor::matrix((self.atoms.count + 1) * rows_per_bank, cols, data)?;
                }
            }
        }
        let mut bank = self.atoms.bank.clone();
        bank[moved[0]] = new_bank;
        self.atoms = Banks::new(bank, new_bank + 1);
        self.plans.lock().expect("plan cache").clear();
        Ok(InjectedFault { color, orbit, moved })
    }

    /// The same weights bound to a relabeled copy of the pattern.
    /// `atom_map[i]` and `pore_map[p]` give the new index of each node.
    pub fn relabeled(&self, atom_map: &Permutation, pore_map: &Permutation) -> Result<Model> {
        let pattern = relabel_pattern(&self.pattern, atom_map, pore_map);
        let (atoms, pores, edges, edge_lists) = bank_assignments(&pattern, &self.config);
        if atoms.count != self.atoms.count || pores.count != self.pores.count {
            return Err(ModelError::Mismatch("relabeling changed bank counts".into()));
        }
        Ok(Model { pattern, atoms, pores, edges, edge_lists, plans: Mutex::new(HashMap::new()), ..self.clone() })
    }

    fn check_topology(&self, topo: &GraphTopology) -> Result<()> {
        if topo.n_atoms != self.atoms.len() {
            return Err(ModelError::Mismatch(format!(
                "graph has {} atoms, model expects {}",
                topo.n_atoms,
                self.atoms.len()
            )));
        }
        if topo.n_pores != self.pores.len() {
            return Err(ModelError::Mismatch(format!(
                "graph has {} pores, model expects {}",
                topo.n_pores,
                self.pores.len()
            )));
        }
        for kind in EdgeKind::ALL {
            if topo.edges.get(kind) != self.edge_lists.get(kind) {
                return Err(ModelError::Mismatch(format!("{kind} edge lists differ")));
            }
        }
        if topo.rbf_dim != self.config.rbf.len() {
            return Err(ModelError::Mismatch(format!(
                "graph RBF width {} differs from model {}",
                topo.rbf_dim,
                self.config.rbf.len()
            )));
        }
        Ok(())
    }

    fn plan(&self, nb: usize) -> Arc<Plan> {
        let mut cache = self.plans.lock().expect("plan cache");
        if let Some(p) = cache.get(&nb) {
            return p.clone();
        }
        let atom_rows = self.atoms.row_items(nb);
        let pore_rows = self.pores.row_items(nb);
        let pore_feature_idx: Arc<[usize]> = pore_rows.iter().map(|&(_, p)| p).collect();
        let edges = EdgeKind::ALL.map(|kind| {
            let banks = &self.edges[kind.index()];
            let list = self.edge_lists.get(kind);
            let sender_rows = |b: usize, i: usize| match kind.sender() {
                NodeKind::Atom => self.atoms.row(nb, b, i),
                NodeKind::Pore => self.pores.row(nb, b, i),
            };
            let receiver_rows = |b: usize, i: usize| match kind.receiver() {
                NodeKind::Atom => self.atoms.row(nb, b, i),
                NodeKind::Pore => self.pores.row(nb, b, i),
            };
            let rows = banks.row_items(nb);
            EdgePlan {
                segments: banks.segments(nb),
                sender: rows.iter().map(|&(b, e)| sender_rows(b, list[e].0)).collect(),
                receiver: rows.iter().map(|&(b, e)| receiver_rows(b, list[e].1)).collect(),
                feature: rows.iter().map(|&(_, e)| e).collect(),
            }
        });
        let pooled = if self.config.with_pores { &pore_rows } else { &atom_rows };
        let plan = Arc::new(Plan {
            nb,
            atom_segments: self.atoms.segments(nb),
            pore_segments: self.pores.segments(nb),
            pool_idx: pooled.iter().map(|&(b, _)| b).collect(),
            atom_rows,
            pore_rows,
            pore_feature_idx,
            edges,
        });
        cache.insert(nb, plan.clone());
        plan
    }

    fn lin(&self, tape: &mut Tape, lin: Lin, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, lin.w);
        let b = tape.param(&self.params, lin.b);
        Ok(tape.linear(x, w, Some(b))?)
    }

    fn grouped(&self, tape: &mut Tape, lin: Lin, x: Var, seg: &Arc<[Segment]>) -> Result<Var> {
        let w = tape.param(&self.params, lin.w);
        let b = tape.param(&self.params, lin.b);
        Ok(tape.grouped_linear(x, w, b, seg.clone())?)
    }

    fn aggregate(&self, tape: &mut Tape, x: Var, idx: &Arc<[usize]>, n: usize) -> Result<Var> {
        Ok(match self.config.aggregation {
            Aggregation::Mean => tape.scatter_mean(x, idx.clone(), n)?,
            Aggregation::Sum => tape.scatter_sum(x, idx.clone(), n)?,
        })
    }

    /// Embed atoms, pores and edges of a batch sharing one topology.
    fn embed(&self, tape: &mut Tape, plan: &Plan, topo: &GraphTopology, occs: &[&Occupancy]) -> Result<Embedded> {
        let mut atom_x = Vec::with_capacity(plan.atom_rows.len() * 2);
        for &(b, i) in &plan.atom_rows {
            atom_x.extend_from_slice(&occs[b].types()[i].one_hot());
        }
        let ax = tape.constant(Tensor::matrix(plan.atom_rows.len(), 2, atom_x)?);
        let t = self.lin(tape, self.ids.atom_embed, ax)?;
        let p = match self.ids.pore_embed {
            Some(lin) => {
                let feats: Vec<f64> =
                    topo.pore_features.iter().flat_map(|&[area, count]| [area / 100.0, count / 12.0]).collect();
                let px = tape.constant(Tensor::matrix(topo.n_pores, 2, feats)?);
                let pe = self.lin(tape, lin, px)?;
                Some(tape.gather(pe, plan.pore_feature_idx.clone())?)
            }
            None => None,
        };
        let mut edges = [None; 3];
        for kind in EdgeKind::ALL {
            let ep = &plan.edges[kind.index()];
            if ep.feature.is_empty() {
                continue;
            }
            let n_e = topo.edges.get(kind).len();
            let raw = tape.constant(Tensor::matrix(n_e, topo.rbf_dim, topo.edge_features[kind.index()].clone())?);
            let emb = self.lin(tape, self.ids.edge_embed, raw)?;
            edges[kind.index()] = Some(tape.gather(emb, ep.feature.clone())?);
        }
        Ok(Embedded { t, p, edges })
    }

    /// Messages of one kind aggregated at their receivers.
    fn messages(
        &self,
        tape: &mut Tape,
        plan: &Plan,
        ids: &StepIds,
        kind: EdgeKind,
        senders: Var,
        receivers: Var,
        edge: Option<Var>,
        n_receivers: usize,
    ) -> Result<Option<Var>> {
        let (Some(msg), Some(gate), Some(edge)) = (ids.msg[kind.index()], ids.gate[kind.index()], edge) else {
            return Ok(None);
        };
        let ep = &plan.edges[kind.index()];
        let s = tape.gather(senders, ep.sender.clone())?;
        let r = tape.gather(receivers, ep.receiver.clone())?;
        let x = tape.concat(&[s, r, edge])?;
        let m = self.grouped(tape, msg, x, &ep.segments)?;
        let m = tape.leaky_relu(m, self.config.leaky_slope)?;
        let g = self.lin(tape, gate, m)?;
        let g = tape.sigmoid(g)?;
        let m = tape.mul_column(m, g)?;
        Ok(Some(self.aggregate(tape, m, &ep.receiver, n_receivers)?))
    }

    fn zeros(tape: &mut Tape, rows: usize, cols: usize) -> Var {
        tape.constant(Tensor::zeros(&[rows, cols]))
    }

    fn step(
        &self,
        tape: &mut Tape,
        plan: &Plan,
        s: usize,
        emb: &Embedded,
        t: Var,
        p: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let ids = &self.ids.steps[if self.config.tie_steps { 0 } else { s }];
        let h = self.config.hidden;
        let n_a = plan.atom_rows.len();
        let n_p = plan.pore_rows.len();
        let slope = self.config.leaky_slope;
        let m_h = self.messages(tape, plan, ids, EdgeKind::AtomAtom, t, t, emb.edges[0], n_a)?;
        let m_h = m_h.unwrap_or_else(|| Self::zeros(tape, n_a, h));
        let mut atom_in = vec![t, m_h];
        let mut new_p = None;
        if let Some(p) = p {
            let m_k = self.messages(tape, plan, ids, EdgeKind::PoreAtom, p, t, emb.edges[1], n_a)?;
            let m_k = m_k.unwrap_or_else(|| Self::zeros(tape, n_a, h));
            atom_in.push(m_k);
            let m_l = self.messages(tape, plan, ids, EdgeKind::AtomPore, t, p, emb.edges[2], n_p)?;
            let m_l = m_l.unwrap_or_else(|| Self::zeros(tape, n_p, h));
            let up = ids.pore_up.expect("pore banks exist when pores are modeled");
            let x = tape.concat(&[p, m_l])?;
            let u = self.grouped(tape, up[0], x, &plan.pore_segments)?;
            let u = tape.leaky_relu(u, slope)?;
            let u = self.grouped(tape, up[1], u, &plan.pore_segments)?;
            new_p = Some(tape.add(p, u)?);
        }
        let x = tape.concat(&atom_in)?;
        let u = self.grouped(tape, ids.atom_up[0], x, &plan.atom_segments)?;
        let u = tape.leaky_relu(u, slope)?;
        let u = self.grouped(tape, ids.atom_up[1], u, &plan.atom_segments)?;
        let new_t = tape.add(t, u)?;
        Ok((new_t, new_p))
    }

    /// Record the full network for a batch. Returns the tape, the normalized
    /// output column and the final atom and pore state vars.
    fn record(&self, topo: &GraphTopology, occs: &[&Occupancy]) -> Result<Recorded> {
        self.check_topology(topo)?;
        for occ in occs {
            occ.check_len(topo.n_atoms)?;
        }
        let plan = self.plan(occs.len());
        let mut tape = Tape::new();
        let emb = self.embed(&mut tape, &plan, topo, occs)?;
        let (mut t, mut p) = (emb.t, emb.p);
        for s in 0..self.config.steps {
            (t, p) = self.step(&mut tape, &plan, s, &emb, t, p)?;
        }
        let pooled_src = if self.config.with_pores { p.expect("pore states") } else { t };
        let slope = self.config.leaky_slope;
        let r = self.lin(&mut tape, self.ids.readout[0], pooled_src)?;
        let r = tape.leaky_relu(r, slope)?;
        let r = self.lin(&mut tape, self.ids.readout[1], r)?;
        let pooled = tape.scatter_sum(r, plan.pool_idx.clone(), plan.nb)?;
        let y = self.lin(&mut tape, self.ids.head[0], pooled)?;
        let y = tape.leaky_relu(y, slope)?;
        let out = self.lin(&mut tape, self.ids.head[1], y)?;
        Ok(Recorded { tape, out, t, p, plan })
    }

    /// Predictions in kJ/mol for configurations sharing one topology.
    pub fn predict_batch(&self, topo: &GraphTopology, occs: &[&Occupancy]) -> Result<Vec<f64>> {
        if occs.is_empty() {
            return Ok(Vec::new());
        }
        let rec = self.record(topo, occs)?;
        let n = self.normalization;
        Ok(rec.tape.value(rec.out).data().iter().map(|v| n.shift + n.scale * v).collect())
    }

    /// Predictions and final node states for a batch.
    pub fn forward_batch(&self, topo: &GraphTopology, occs: &[&Occupancy]) -> Result<(Vec<f64>, Vec<NodeStates>)> {
        let rec = self.record(topo, occs)?;
        let n = self.normalization;
        let preds = rec.tape.value(rec.out).data().iter().map(|v| n.shift + n.scale * v).collect();
        let states = self.unpack_states(&rec.tape, &rec.plan, rec.t, rec.p, self.config.steps);
        Ok((preds, states))
    }

    /// Prediction (kJ/mol) and final node states for one graph.
    pub fn forward(&self, graph: &CrystalGraph) -> Result<(f64, NodeStates)> {
        let occ = occupancy_of(graph);
        let (mut preds, mut states) = self.forward_batch(&graph.topology, &[&occ])?;
        Ok((preds.remove(0), states.remove(0)))
    }

    /// Initial embeddings of one graph.
    pub fn embed_states(&self, graph: &CrystalGraph) -> Result<NodeStates> {
        self.check_topology(&graph.topology)?;
        let occ = occupancy_of(graph);
        let plan = self.plan(1);
        let mut tape = Tape::new();
        let emb = self.embed(&mut tape, &plan, &graph.topology, &[&occ])?;
        Ok(self.unpack_states(&tape, &plan, emb.t, emb.p, 0).remove(0))
    }

    /// One message-passing round applied to explicit states.
    pub fn message_step(&self, step: usize, graph: &CrystalGraph, states: &NodeStates) -> Result<NodeStates> {
        self.check_topology(&graph.topology)?;
        let h = self.config.hidden;
        if states.t.shape() != [self.n_atoms(), h]
            || (self.config.with_pores && states.p.shape() != [self.n_pores(), h])
        {
            return Err(ModelError::Mismatch("state shapes do not match the graph".into()));
        }
        let occ = occupancy_of(graph);
        let plan = self.plan(1);
        let mut tape = Tape::new();
        let emb = self.embed(&mut tape, &plan, &graph.topology, &[&occ])?;
        let mut t_rows = vec![0.0; plan.atom_rows.len() * h];
        for (r, &(_, i)) in plan.atom_rows.iter().enumerate() {
            t_rows[r * h..(r + 1) * h].copy_from_slice(states.t.row(i));
        }
        let t = tape.constant(Tensor::matrix(plan.atom_rows.len(), h, t_rows)?);
        let p = if self.config.with_pores {
            let mut p_rows = vec![0.0; plan.pore_rows.len() * h];
            for (r, &(_, i)) in plan.pore_rows.iter().enumerate() {
                p_rows[r * h..(r + 1) * h].copy_from_slice(states.p.row(i));
            }
            Some(tape.constant(Tensor::matrix(plan.pore_rows.len(), h, p_rows)?))
        } else {
            None
        };
        let (t, p) = self.step(&mut tape, &plan, step, &emb, t, p)?;
        Ok(self.unpack_states(&tape, &plan, t, p, step + 1).remove(0))
    }

    fn unpack_states(&self, tape: &Tape, plan: &Plan, t: Var, p: Option<Var>, step: usize) -> Vec<NodeStates> {
        let h = self.config.hidden;
        let (na, np) = (self.n_atoms(), self.n_pores());
        let mut ts = vec![vec![0.0; na * h]; plan.nb];
        let mut ps = vec![vec![0.0; np * h]; plan.nb];
        let tv = tape.value(t);
        for (r, &(b, i)) in plan.atom_rows.iter().enumerate() {
            ts[b][i * h..(i + 1) * h].copy_from_slice(tv.row(r));
        }
        if let Some(p) = p {
            let pv = tape.value(p);
            for (r, &(b, i)) in plan.pore_rows.iter().enumerate() {
                ps[b][i * h..(i + 1) * h].copy_from_slice(pv.row(r));
            }
        }
        ts.into_iter()
            .zip(ps)
            .map(|(t, p)| NodeStates {
                t: Tensor::matrix(na, h, t).expect("atom state shape"),
                p: Tensor::matrix(
                    if self.config.with_pores { np } else { 0 },
                    h,
                    if self.config.with_pores { p } else { vec![] },
                )
                .expect("pore state shape"),
                step,
            })
            .collect()
    }

    /// Tape of the mean Huber loss on normalized targets.
    pub fn loss_tape(
        &self,
        topo: &GraphTopology,
        occs: &[&Occupancy],
        targets: &[f64],
        delta: f64,
    ) -> Result<(Tape, Var)> {
        let mut rec = self.record(topo, occs)?;
        let n = self.normalization;
        let normalized: Vec<f64> = targets.iter().map(|y| (y - n.shift) / n.scale).collect();
        let target = rec.tape.constant(Tensor::column(normalized));
        let loss = rec.tape.huber(rec.out, target, delta)?;
        Ok((rec.tape, loss))
    }

    /// The same loss recorded against an arbitrary parameter store (used by
    /// gradient checks).
    pub fn loss_tape_with(
        &self,
        params: &ParamStore,
        topo: &GraphTopology,
        occs: &[&Occupancy],
        targets: &[f64],
        delta: f64,
    ) -> Result<(Tape, Var)> {
        let mut m = self.clone();
        m.params = params.clone();
        m.loss_tape(topo, occs, targets, delta)
    }
}

struct Embedded {
    t: Var,
    p: Option<Var>,
    edges: [Option<Var>; 3],
}

struct Recorded {
    tape: Tape,
    out: Var,
    t: Var,
    p: Option<Var>,
    plan: Arc<Plan>,
}

fn occupancy_of(graph: &CrystalGraph) -> Occupancy {
    use crate::graph::AtomType;
    Occupancy::new(graph.atom_features.iter().map(|f| if f[1] > 0.5 { AtomType::Al } else { AtomType::Si }).collect())
}

/// Rename nodes of a pattern: node i becomes `atom_map[i]`, pore p becomes
/// `pore_map[p]`; edge lists keep their order with renamed endpoints.
pub fn relabel_pattern(pattern: &SharingPattern, atom_map: &Permutation, pore_map: &Permutation) -> SharingPattern {
    let mut out = pattern.clone();
    out.nodes.atoms.colors = atom_map.permute(&pattern.nodes.atoms.colors);
    out.nodes.pores.colors = pore_map.permute(&pattern.nodes.pores.colors);
    let map_node = |kind: NodeKind, i: usize| match kind {
        NodeKind::Atom => atom_map.get(i),
        NodeKind::Pore => pore_map.get(i),
    };
    for kind in EdgeKind::ALL {
        let ec = out.edges.get_mut(kind);
        for e in ec.edges.iter_mut() {
            *e = (map_node(kind.sender(), e.0), map_node(kind.receiver(), e.1));
        }
    }
    let (ai, pi) = (atom_map.inverse(), pore_map.inverse());
    out.atom_perms = pattern.atom_perms.iter().map(|g| atom_map.compose(&g.compose(&ai))).collect();
    out.pore_perms = pattern.pore_perms.iter().map(|g| pore_map.compose(&g.compose(&pi))).collect();
    out
}

/// Rename the nodes of a topology the same way as [`relabel_pattern`].
pub fn relabel_topology(topo: &GraphTopology, atom_map: &Permutation, pore_map: &Permutation) -> GraphTopology {
    let mut out = topo.clone();
    let map_node = |kind: NodeKind, i: usize| match kind {
        NodeKind::Atom => atom_map.get(i),
        NodeKind::Pore => pore_map.get(i),
    };
    for kind in EdgeKind::ALL {
        for e in out.edges.get_mut(kind).iter_mut() {
            *e = (map_node(kind.sender(), e.0), map_node(kind.receiver(), e.1));
        }
    }
    out.pore_features = pore_map.permute(&topo.pore_features);
    out
}
