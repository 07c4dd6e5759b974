//! Command-line definitions and the verbs behind them.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use porenet::coloring::{validate_pattern, EdgeKind, NodeKind, SharingPattern};
use porenet::dataset::{
    load_configurations, random_occupancy, resolve_framework, synth_generate, write_configurations,
    write_split_manifest,
};
use porenet::equivariance::{equivariance_check_framework, relabel_check, EquivReport};
use porenet::graph::{Framework, GraphTopology, Occupancy};
use porenet::model::{count_parameters, init_model, Aggregation, ModelConfig};
use porenet::train::{mae_mse, metrics_csv, predict, Checkpoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    data_efficiency, efficiency_csv, mean_std, prepare, run_seed, spearman, write_file, Ablation, CliError, Result,
    RunConfig, SynthSpec, FRACTIONS,
};

/// Version of the CSV layouts written by this tool.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const EQUIV_TOLERANCE: f64 = 1e-9;
pub const EQUIV_CONFIGS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "porenet", version, about = "Symmetry-shared message passing on porous crystals")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the symmetry group, colorings and parameter counts of a framework.
    Inspect(InspectArgs),
    /// Train one model per seed and write checkpoints and metrics.
    Train(RunArgs),
    /// Evaluate a checkpoint on labeled configurations.
    Eval(EvalArgs),
    /// Audit equivariance of a freshly initialized model.
    Equivcheck(EquivArgs),
    /// Generate configurations labeled by a random invariant oracle.
    GenSynth(GenSynthArgs),
    /// Train on nested fractions of the training split.
    DataEfficiency(EfficiencyArgs),
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Builtin name (MOR, MFI) or framework file.
    #[arg(long, default_value = "MOR")]
    pub framework: String,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub framework: Option<String>,
    /// Configurations CSV (`id,occupancy,hoa`).
    #[arg(long, conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Synthetic data, e.g. `n=1000,max_al=12,seed=7,noise=0,pore_term=false`.
    #[arg(long)]
    pub synth: Option<SynthSpec>,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    #[arg(long, value_enum)]
    pub agg: Option<AggArg>,
    /// Single seed; shorthand for `--seeds N`.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AggArg {
    Mean,
    Sum,
}

impl From<AggArg> for Aggregation {
    fn from(a: AggArg) -> Self {
        match a {
            AggArg::Mean => Aggregation::Mean,
            AggArg::Sum => Aggregation::Sum,
        }
    }
}

impl RunArgs {
    /// Config file (or defaults) with the flags applied on top.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(f) = &self.framework {
            run.framework = f.clone();
        }
        if let Some(d) = &self.data {
            run.data = Some(d.clone());
        }
        if let Some(s) = &self.synth {
            run.data = None;
            run.synth = s.clone();
        }
        if let Some(a) = self.ablate {
            run.ablate = a;
        }
        if let Some(a) = self.agg {
            run.model.aggregation = a.into();
        }
        if let Some(s) = self.seed {
            run.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            run.seeds = s.clone();
        }
        if let Some(s) = self.split_seed {
            run.split_seed = s;
        }
        if let Some(f) = self.train_frac {
            run.train_frac = f;
        }
        if let Some(e) = self.epochs {
            run.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            run.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            run.train.batch_size = b;
        }
        if let Some(h) = self.hidden {
            run.model.hidden = h;
        }
        if let Some(s) = self.steps {
            run.model.steps = s;
        }
        if let Some(o) = &self.out {
            run.out = o.clone();
        }
        run.validate()?;
        Ok(run)
    }
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut spec = SynthSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let bad = |e: &dyn std::fmt::Display| format!("{k}: {e}");
            match k.trim() {
                "n" | "n_configs" => spec.n_configs = v.parse().map_err(|e| bad(&e))?,
                "max_al" => spec.max_al = v.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = v.parse().map_err(|e| bad(&e))?,
                "noise" => spec.noise = v.parse().map_err(|e| bad(&e))?,
                "pore_term" => spec.pore_term = v.parse().map_err(|e| bad(&e))?,
                other => return Err(format!("unknown synth key `{other}`")),
            }
        }
        if !(spec.noise.is_finite() && spec.noise >= 0.0) {
            return Err(format!("noise must be finite and non-negative, got {}", spec.noise));
        }
        Ok(spec)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the framework named in the checkpoint.
    #[arg(long)]
    pub framework: Option<String>,
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub synth: Option<SynthSpec>,
    /// Per-configuration predictions CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    #[arg(long, default_value = "MOR")]
    pub framework: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "none")]
    pub ablate: Ablation,
    #[arg(long, value_enum, default_value = "mean")]
    pub agg: AggArg,
    /// Give one atom its own perturbed update bank before checking.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long, default_value_t = EQUIV_CONFIGS)]
    pub configs: usize,
    #[arg(long, default_value_t = EQUIV_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value = "MOR")]
    pub framework: String,
    #[arg(long, default_value = "")]
    pub synth: SynthSpec,
    #[arg(long, default_value = "synth.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EfficiencyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
}

pub fn run_command(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Inspect(a) => cmd_inspect(&a.framework, out),
        Command::Train(a) => cmd_train(&a.resolve()?, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(a, out).map(|_| ()),
        Command::Equivcheck(a) => cmd_equivcheck(a, out).map(|_| ()),
        Command::GenSynth(a) => cmd_gen_synth(a, out),
        Command::DataEfficiency(a) => {
            let fractions = a.fractions.clone().unwrap_or_else(|| FRACTIONS.to_vec());
            cmd_data_efficiency(&a.run.resolve()?, &fractions, out).map(|_| ())
        }
    }
}

fn io(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Structured text listing of a sharing pattern.
pub fn pattern_report(fw: &Framework, pattern: &SharingPattern) -> String {
    let mut s = String::new();
    s.push_str(&format!("group_order {}\n", pattern.group_order()));
    s.push_str(&format!("atoms {}\npores {}\n", pattern.n_atoms(), pattern.n_pores()));
    for kind in [NodeKind::Atom, NodeKind::Pore] {
        s.push_str(&format!("colors.{} {}\n", kind_name(kind), pattern.nodes.kind(kind).count));
    }
    for kind in EdgeKind::ALL {
        let e = pattern.edges.get(kind);
        s.push_str(&format!("edges.{} {}\ncolors.{} {}\n", kind.tag(), e.edges.len(), kind.tag(), e.count));
    }
    s.push_str("\n[atom-colors]\nindex,label,color,orbit_size\n");
    let atom_sizes = pattern.nodes.atoms.class_sizes();
    for (i, &c) in pattern.nodes.atoms.colors.iter().enumerate() {
        let label = fw.site_labels().get(i).map_or("", String::as_str);
        s.push_str(&format!("{i},{label},{c},{}\n", atom_sizes[c]));
    }
    s.push_str("\n[pore-colors]\nindex,color,area,boundary_atoms\n");
    for (p, &c) in pattern.nodes.pores.colors.iter().enumerate() {
        let pore = &fw.pores()[p];
        s.push_str(&format!("{p},{c},{},{}\n", pore.area, pore.boundary.len()));
    }
    for kind in EdgeKind::ALL {
        let e = pattern.edges.get(kind);
        s.push_str(&format!("\n[edge-colors.{}]\nsender,receiver,color\n", kind.tag()));
        for (&(a, b), &c) in e.edges.iter().zip(&e.colors) {
            s.push_str(&format!("{a},{b},{c}\n"));
        }
    }
    s
}

fn kind_name(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Atom => "atom",
        NodeKind::Pore => "pore",
    }
}

pub fn cmd_inspect(framework: &str, out: &mut dyn Write) -> Result<()> {
    let fw = resolve_framework(framework)?;
    let has_pores = !fw.pores().is_empty();
    let pattern = fw.sharing_pattern(has_pores)?;
    let violations = validate_pattern(&pattern);
    if !violations.is_empty() {
        let v = &violations[0];
        return Err(CliError::Validation(format!(
            "{} coloring violations; first: {:?} {:?} on orbit {:?}",
            violations.len(),
            v.entity,
            v.reason,
            v.orbit
        )));
    }
    writeln!(out, "framework {}", fw.name()).map_err(io)?;
    writeln!(out, "bonds {}", fw.bonds().len()).map_err(io)?;
    for ablate in [Ablation::None, Ablation::NoPores, Ablation::NoSyms] {
        let mut cfg = ablate.apply(&ModelConfig::default());
        cfg.with_pores &= has_pores;
        let p = fw.sharing_pattern(cfg.with_pores)?;
        let model = init_model(&p, &cfg, 0)?;
        writeln!(out, "parameters.{} {}", ablate.tag(), count_parameters(&model)).map_err(io)?;
    }
    out.write_all(pattern_report(&fw, &pattern).as_bytes()).map_err(io)?;
    Ok(())
}

/// Per-seed result row of `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_mae: f64,
    pub final_mae: f64,
    pub final_mse: f64,
    pub baseline_mae: f64,
}

/// Directory receiving the artifacts of a run: `<out>/<ablation tag>`.
pub fn artifact_dir(run: &RunConfig) -> PathBuf {
    run.out.join(run.ablate.tag())
}

fn write_resolved(run: &RunConfig, dir: &Path) -> Result<()> {
    let text = format!("# csv schema version {CSV_SCHEMA_VERSION}\n{}", run.to_toml());
    write_file(&dir.join("resolved-config.toml"), &text)
}

pub fn cmd_train(run: &RunConfig, out: &mut dyn Write) -> Result<Vec<SummaryRow>> {
    let prep = prepare(run)?;
    let dir = artifact_dir(run);
    create_dir(&dir)?;
    write_resolved(run, &dir)?;
    if run.data.is_none() {
        write_configurations(dir.join("data.csv"), &prep.dataset.configs)?;
    }
    let split = prep.dataset.split.as_ref().expect("prepared dataset is split");
    write_split_manifest(dir.join("split.csv"), split)?;
    let baseline = prep.baseline_mae();
    let mut rows = Vec::new();
    for &seed in &run.seeds {
        let r = run_seed(&prep, run, seed, None)?;
        let seed_dir = dir.join(format!("seed-{seed}"));
        create_dir(&seed_dir)?;
        write_file(&seed_dir.join("metrics.csv"), &metrics_csv(&r.outcome.history))?;
        let mut best = r.model.clone();
        best.load_params(r.outcome.best_params.clone())?;
        Checkpoint::new(&best, &prep.framework, r.outcome.best_epoch, None).save(seed_dir.join("best.json"))?;
        let last_epoch = r.outcome.history.len();
        Checkpoint::new(&r.model, &prep.framework, last_epoch, Some(r.outcome.optimizer.clone()))
            .save(seed_dir.join("last.json"))?;
        let row = SummaryRow {
            seed,
            best_epoch: r.outcome.best_epoch,
            best_mae: r.outcome.best_eval_mae,
            final_mae: r.final_mae(),
            final_mse: r.final_mse(),
            baseline_mae: baseline,
        };
        writeln!(
            out,
            "seed {seed}: final test MAE {:.6} MSE {:.6} (best {:.6} at epoch {}; constant baseline {:.6})",
            row.final_mae, row.final_mse, row.best_mae, row.best_epoch, baseline
        )
        .map_err(io)?;
        rows.push(row);
    }
    let mut csv = String::from("seed,best_epoch,best_test_mae,final_test_mae,final_test_mse,baseline_mae\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed, r.best_epoch, r.best_mae, r.final_mae, r.final_mse, r.baseline_mae
        ));
    }
    write_file(&dir.join("summary.csv"), &csv)?;
    let maes: Vec<f64> = rows.iter().map(|r| r.final_mae).collect();
    let mses: Vec<f64> = rows.iter().map(|r| r.final_mse).collect();
    let ((mae, mae_sd), (mse, mse_sd)) = (mean_std(&maes), mean_std(&mses));
    writeln!(
        out,
        "{} over {} seeds: MAE {mae:.4} ± {mae_sd:.4}, MSE {mse:.4} ± {mse_sd:.4}; artifacts in {}",
        run.ablate.tag(),
        rows.len(),
        dir.display()
    )
    .map_err(io)?;
    Ok(rows)
}

/// Metrics of `eval`, with the predictions CSV text.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mae: f64,
    pub mse: f64,
    pub predictions_csv: String,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalResult> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let fw = resolve_framework(args.framework.as_deref().unwrap_or(&ckpt.framework))?;
    let model = ckpt.restore(&fw)?;
    let configs = match (&args.data, &args.synth) {
        (Some(p), _) => load_configurations(p, &fw)?,
        (None, Some(s)) => {
            let pattern = fw.sharing_pattern(true)?;
            synth_generate(&pattern, s.n_configs, s.max_al, s.seed, s.noise, s.pore_term).1
        }
        (None, None) => return Err(CliError::Validation("eval needs --data or --synth".into())),
    };
    let topo = GraphTopology::build(&fw, &model.config().rbf, model.config().with_pores);
    let pred = predict(&model, &topo, &configs)?;
    let target: Vec<f64> = configs.iter().map(|c| c.hoa).collect();
    let (mae, mse) = mae_mse(&pred, &target);
    let mut csv = String::from("id,hoa,prediction,al_count\n");
    for (c, p) in configs.iter().zip(&pred) {
        csv.push_str(&format!("{},{},{},{}\n", c.id, c.hoa, p, c.occupancy.al_count()));
    }
    if let Some(path) = &args.out {
        write_file(path, &csv)?;
    }
    writeln!(out, "configs {}\nmae {mae}\nmse {mse}", configs.len()).map_err(io)?;
    Ok(EvalResult { mae, mse, predictions_csv: csv })
}

/// Random occupancies used by the audit: Al count uniform over all
/// compositions.
pub fn audit_occupancies(n_sites: usize, n: usize, seed: u64) -> Vec<Occupancy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_occupancy(n_sites, n_sites, &mut rng)).collect()
}

pub fn cmd_equivcheck(args: &EquivArgs, out: &mut dyn Write) -> Result<EquivReport> {
    let fw = resolve_framework(&args.framework)?;
    let mut cfg = args.ablate.apply(&ModelConfig::default());
    cfg.aggregation = args.agg.into();
    cfg.with_pores &= !fw.pores().is_empty();
    let pattern = fw.sharing_pattern(cfg.with_pores)?;
    let mut model = init_model(&pattern, &cfg, args.seed)?;
    let topo = GraphTopology::build(&fw, &cfg.rbf, cfg.with_pores);
    let occs = audit_occupancies(fw.n_sites(), args.configs, args.seed.wrapping_add(1));
    let mut fault = None;
    if args.inject_fault {
        fault = Some(model.inject_fault(args.seed)?);
    }
    let relabel_mode = args.ablate == Ablation::NoSyms && !args.inject_fault;
    let report = if relabel_mode {
        relabel_check(&model, &topo, &occs, 5, args.seed, args.tolerance)?
    } else {
        equivariance_check_framework(&model, &fw, &topo, &occs, args.tolerance)?
    };
    let mode = if relabel_mode { "relabel" } else { "group" };
    let verdict = if report.passes() { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "equivcheck {} ({mode}, {}): {verdict} max deviation {:.3e} (states {:.3e}, predictions {:.3e}; tolerance {:e}; {} elements x {} configs)",
        fw.name(),
        args.ablate.tag(),
        report.max_deviation,
        report.max_state_deviation,
        report.max_prediction_deviation,
        report.tolerance,
        report.n_elements,
        report.n_configs
    )
    .map_err(io)?;
    if let Some(f) = &fault {
        writeln!(out, "injected fault: atom {:?} split from orbit of color {}", f.moved, f.color).map_err(io)?;
    }
    if !report.passes() {
        if let Some(op) = &report.worst_op_label {
            writeln!(out, "worst element: {op}").map_err(io)?;
        }
        if let Some((kind, i)) = report.worst_node {
            writeln!(out, "worst node: {} {i}", kind_name(kind)).map_err(io)?;
        }
        for (kind, orbit) in &report.offending_orbits {
            writeln!(out, "offending {} orbit: {orbit:?}", kind_name(*kind)).map_err(io)?;
        }
        return Err(CliError::CheckFailed(format!(
            "max deviation {:.3e} exceeds {:e}",
            report.max_deviation, report.tolerance
        )));
    }
    Ok(report)
}

pub fn cmd_gen_synth(args: &GenSynthArgs, out: &mut dyn Write) -> Result<()> {
    let fw = resolve_framework(&args.framework)?;
    let pattern = fw.sharing_pattern(!fw.pores().is_empty())?;
    let s = &args.synth;
    let (oracle, configs) = synth_generate(&pattern, s.n_configs, s.max_al, s.seed, s.noise, s.pore_term);
    write_configurations(&args.out, &configs)?;
    writeln!(
        out,
        "wrote {} configurations to {} (oracle: {} node, {} edge, {} pore weights)",
        configs.len(),
        args.out.display(),
        oracle.node_weights.len(),
        oracle.edge_weights.len(),
        oracle.pore_weights.len()
    )
    .map_err(io)?;
    Ok(())
}

pub fn cmd_data_efficiency(
    run: &RunConfig,
    fractions: &[f64],
    out: &mut dyn Write,
) -> Result<Vec<crate::EfficiencyPoint>> {
    let prep = prepare(run)?;
    let dir = artifact_dir(run);
    create_dir(&dir)?;
    write_resolved(run, &dir)?;
    let split = prep.dataset.split.as_ref().expect("prepared dataset is split");
    write_split_manifest(dir.join("split.csv"), split)?;
    let points = data_efficiency(&prep, run, fractions)?;
    write_file(&dir.join("data-efficiency.csv"), &efficiency_csv(&points))?;
    for p in &points {
        writeln!(out, "fraction {} seed {} n_train {}: MAE {:.6}", p.fraction, p.seed, p.n_train, p.mae).map_err(io)?;
    }
    let f: Vec<f64> = points.iter().map(|p| p.fraction).collect();
    let neg: Vec<f64> = points.iter().map(|p| -p.mae).collect();
    writeln!(out, "spearman(fraction, -MAE) {:.4}", spearman(&f, &neg)).map_err(io)?;
    Ok(points)
}
