//! Run configuration, error mapping and experiment drivers shared by the
//! `porenet` binary and its tests.

pub mod commands;

use std::fmt;
use std::path::{Path, PathBuf};

use porenet::coloring::SharingPattern;
use porenet::dataset::{
    load_configurations, resolve_framework, split, synth_generate, Dataset, DatasetError, LabeledConfig,
};
use porenet::graph::{Framework, GraphError, GraphTopology};
use porenet::model::{init_model, Model, ModelConfig, ModelError};
use porenet::train::{constant_baseline_mae, train, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const VALIDATION: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const IO: i32 = 5;
    pub const CHECK_FAILED: i32 = 6;
    pub const MISMATCH: i32 = 7;
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Diverged(String),
    Io(String),
    CheckFailed(String),
    Mismatch(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Diverged(_) => exit::DIVERGED,
            CliError::Io(_) => exit::IO,
            CliError::CheckFailed(_) => exit::CHECK_FAILED,
            CliError::Mismatch(_) => exit::MISMATCH,
            CliError::Other(_) => exit::FAILURE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Mismatch(m) => write!(f, "mismatch: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CliError::Diverged(e.to_string()),
            ModelError::Checkpoint(m) if m.contains("hash mismatch") => CliError::Mismatch(m),
            ModelError::Checkpoint(m) => CliError::Io(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoPores,
    NoSyms,
}

impl Ablation {
    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoPores => "no-pores",
            Ablation::NoSyms => "no-syms",
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        let mut cfg = cfg.clone();
        match self {
            Ablation::None => {}
            Ablation::NoPores => cfg.with_pores = false,
            Ablation::NoSyms => cfg.with_symmetry = false,
        }
        cfg
    }
}

/// Parameters of the synthetic invariant oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_configs: usize,
    pub max_al: usize,
    pub seed: u64,
    pub noise: f64,
    /// Add the per-pore term to the labels.
    pub pore_term: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_configs: 1000, max_al: 12, seed: 7, noise: 0.0, pore_term: false }
    }
}

/// Everything a training run needs. Loaded from TOML, then overridden by
/// command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin name (`MOR`, `MFI`) or path to a framework file.
    pub framework: String,
    /// Configurations CSV; when absent, `synth` generates the data.
    pub data: Option<PathBuf>,
    pub synth: SynthSpec,
    pub ablate: Ablation,
    pub model: ModelConfig,
    /// `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
    pub train_frac: f64,
    pub split_seed: u64,
    /// One run per seed; each seed drives both initialization and shuffling.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            framework: "MOR".into(),
            data: None,
            synth: SynthSpec::default(),
            ablate: Ablation::None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_frac: 0.9,
            split_seed: 0,
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Model configuration after the ablation switch.
    pub fn effective_model(&self) -> ModelConfig {
        self.ablate.apply(&self.model)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.data {
            if !d.exists() {
                return Err(CliError::Io(format!("data file {} does not exist", d.display())));
            }
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(CliError::Validation(format!("train_frac must be in (0, 1), got {}", self.train_frac)));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Validation("at least one seed is required".into()));
        }
        self.effective_model().validate()?;
        Ok(())
    }
}

/// Loaded framework and split data of a run.
pub struct Prepared {
    pub framework: Framework,
    pub pattern: SharingPattern,
    pub topology: GraphTopology,
    pub dataset: Dataset,
    pub train: Vec<LabeledConfig>,
    pub test: Vec<LabeledConfig>,
}

impl Prepared {
    pub fn baseline_mae(&self) -> f64 {
        let fit: Vec<f64> = self.train.iter().map(|c| c.hoa).collect();
        let eval: Vec<f64> = self.test.iter().map(|c| c.hoa).collect();
        constant_baseline_mae(&fit, &eval)
    }
}

pub fn prepare(run: &RunConfig) -> Result<Prepared> {
    run.validate()?;
    let framework = resolve_framework(&run.framework)?;
    let cfg = run.effective_model();
    let configs = match &run.data {
        Some(path) => load_configurations(path, &framework)?,
        None => {
            let oracle_pattern = framework.sharing_pattern(true)?;
            let s = &run.synth;
            synth_generate(&oracle_pattern, s.n_configs, s.max_al, s.seed, s.noise, s.pore_term).1
        }
    };
    if configs.len() < 2 {
        return Err(CliError::Validation("need at least two configurations".into()));
    }
    let dataset = split(&Dataset::new(framework.name(), configs), run.train_frac, run.split_seed)?;
    let (tr, te) = dataset.partitions().expect("split was just assigned");
    let train: Vec<LabeledConfig> = tr.into_iter().cloned().collect();
    let test: Vec<LabeledConfig> = te.into_iter().cloned().collect();
    let pattern = framework.sharing_pattern(cfg.with_pores)?;
    let topology = GraphTopology::build(&framework, &cfg.rbf, cfg.with_pores);
    Ok(Prepared { framework, pattern, topology, dataset, train, test })
}

/// Result of one seed.
pub struct SeedRun {
    pub seed: u64,
    pub model: Model,
    pub outcome: TrainOutcome,
    pub n_train: usize,
}

impl SeedRun {
    pub fn final_mae(&self) -> f64 {
        self.outcome.final_metrics().map_or(f64::NAN, |m| m.eval_mae)
    }

    pub fn final_mse(&self) -> f64 {
        self.outcome.final_metrics().map_or(f64::NAN, |m| m.eval_mse)
    }
}

/// Train one seed on the first `n_train` training configurations (all when
/// `None`). The training split is already shuffled, so prefixes are random
/// nested subsets.
pub fn run_seed(prep: &Prepared, run: &RunConfig, seed: u64, n_train: Option<usize>) -> Result<SeedRun> {
    let cfg = run.effective_model();
    let mut model = init_model(&prep.pattern, &cfg, seed)?;
    let n = n_train.unwrap_or(prep.train.len()).clamp(1, prep.train.len());
    let tcfg = TrainConfig { seed, ..run.train.clone() };
    let outcome = train(&mut model, &prep.topology, &prep.train[..n], &prep.test, &tcfg)?;
    Ok(SeedRun { seed, model, outcome, n_train: n })
}

/// Default data-efficiency fractions.
pub const FRACTIONS: [f64; 5] = [0.125, 0.25, 0.5, 0.75, 1.0];

/// One point of a data-efficiency curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyPoint {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub mae: f64,
    pub mse: f64,
}

pub fn data_efficiency(prep: &Prepared, run: &RunConfig, fractions: &[f64]) -> Result<Vec<EfficiencyPoint>> {
    let mut out = Vec::new();
    for &seed in &run.seeds {
        for &f in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(CliError::Validation(format!("fraction {f} outside (0, 1]")));
            }
            let n = ((f * prep.train.len() as f64).floor() as usize).max(1);
            let r = run_seed(prep, run, seed, Some(n))?;
            log::info!("fraction {f} seed {seed}: n_train {n} mae {:.6}", r.final_mae());
            out.push(EfficiencyPoint { fraction: f, seed, n_train: n, mae: r.final_mae(), mse: r.final_mse() });
        }
    }
    Ok(out)
}

pub fn efficiency_csv(points: &[EfficiencyPoint]) -> String {
    let mut s = String::from("fraction,seed,n_train,test_mae,test_mse\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.fraction, p.seed, p.n_train, p.mae, p.mse));
    }
    s
}

/// Average ranks, ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
