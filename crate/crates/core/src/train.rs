//! Training loop, evaluation metrics and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamW, ParamStore};
use crate::dataset::{write_framework, LabeledConfig};
use crate::graph::{Framework, GraphTopology, Occupancy};
use crate::model::{init_model, Model, ModelConfig, ModelError, Normalization, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    pub weight_decay: f64,
    pub huber_delta: f64,
    /// Fit output shift/scale to the training labels before the first epoch.
    pub normalize_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            weight_decay: 0.01,
            huber_delta: 1.0,
            normalize_targets: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_mae: f64,
    pub eval_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_eval_mae: f64,
    /// Parameters at the epoch with the lowest evaluation MAE.
    pub best_params: ParamStore,
    pub optimizer: AdamW,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }
}

/// Mean absolute and mean squared error.
pub fn mae_mse(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let mut mae = 0.0;
    let mut mse = 0.0;
    for (p, t) in pred.iter().zip(target) {
        mae += (p - t).abs();
        mse += (p - t) * (p - t);
    }
    (mae / n, mse / n)
}

/// MAE of always predicting the mean of `fit_labels`.
pub fn constant_baseline_mae(fit_labels: &[f64], eval_labels: &[f64]) -> f64 {
    let mean = fit_labels.iter().sum::<f64>() / fit_labels.len().max(1) as f64;
    eval_labels.iter().map(|y| (y - mean).abs()).sum::<f64>() / eval_labels.len().max(1) as f64
}

const EVAL_BATCH: usize = 128;

/// Predictions for many configurations, in input order.
pub fn predict(model: &Model, topo: &GraphTopology, configs: &[LabeledConfig]) -> Result<Vec<f64>> {
    let occs: Vec<&Occupancy> = configs.iter().map(|c| &c.occupancy).collect();
    let mut out = Vec::with_capacity(occs.len());
    for chunk in occs.chunks(EVAL_BATCH) {
        out.extend(model.predict_batch(topo, chunk)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, topo: &GraphTopology, configs: &[LabeledConfig]) -> Result<(f64, f64)> {
    let pred = predict(model, topo, configs)?;
    let target: Vec<f64> = configs.iter().map(|c| c.hoa).collect();
    Ok(mae_mse(&pred, &target))
}

/// Train with seeded shuffling, Huber loss and AdamW. Metrics are computed
/// on `eval` after each epoch (on `train` when `eval` is empty).
pub fn train(
    model: &mut Model,
    topo: &GraphTopology,
    train: &[LabeledConfig],
    eval: &[LabeledConfig],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Config("batch size must be at least 1".into()));
    }
    if cfg.normalize_targets {
        let labels: Vec<f64> = train.iter().map(|c| c.hoa).collect();
        model.normalization = Normalization::fit(&labels);
    }
    let eval = if eval.is_empty() { train } else { eval };
    let mut opt = AdamW::new(model.params(), cfg.lr).with_weight_decay(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::INFINITY, model.params().clone());
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let occs: Vec<&Occupancy> = chunk.iter().map(|&i| &train[i].occupancy).collect();
            let ys: Vec<f64> = chunk.iter().map(|&i| train[i].hoa).collect();
            let (tape, loss) = model.loss_tape(topo, &occs, &ys, cfg.huber_delta)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(ModelError::Diverged { epoch, loss: value });
            }
            total += value * chunk.len() as f64;
            let grads = tape.backward(loss, model.params())?;
            opt.update(model.params_mut(), &grads);
        }
        let (eval_mae, eval_mse) = evaluate(model, topo, eval)?;
        if !eval_mae.is_finite() {
            return Err(ModelError::Diverged { epoch, loss: eval_mae });
        }
        let m = EpochMetrics { epoch, train_loss: total / train.len() as f64, eval_mae, eval_mse };
        log::info!(
            "epoch {:>4}  train_loss {:.6}  eval_mae {:.6}  eval_mse {:.6}",
            m.epoch,
            m.train_loss,
            m.eval_mae,
            m.eval_mse
        );
        if eval_mae < best.1 {
            best = (epoch, eval_mae, model.params().clone());
        }
        history.push(m);
    }
    Ok(TrainOutcome { history, best_epoch: best.0, best_eval_mae: best.1, best_params: best.2, optimizer: opt })
}

/// Metric history as CSV text: `epoch,train_loss,eval_mae,eval_mse`.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,eval_mae,eval_mse\n");
    for m in history {
        s.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.eval_mae, m.eval_mse));
    }
    s
}

pub const CHECKPOINT_FORMAT: &str = "porenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 over the canonical framework text and the model configuration.
pub fn config_hash(framework: &Framework, cfg: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(write_framework(framework).as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(cfg).expect("config serializes").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialized model state. Stored as JSON; `format` and `version` identify
/// the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub framework: String,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub normalization: Normalization,
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn new(model: &Model, framework: &Framework, epoch: usize, optimizer: Option<AdamW>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            framework: framework.name().to_string(),
            config_hash: config_hash(framework, model.config()),
            model_config: model.config().clone(),
            normalization: model.normalization,
            epoch,
            params: model.params().clone(),
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        ckpt.params.reindex()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_json())
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    /// Rebuild the model for `framework`; fails if the framework or
    /// configuration differ from the ones the checkpoint was trained on.
    pub fn restore(&self, framework: &Framework) -> Result<Model> {
        let hash = config_hash(framework, &self.model_config);
        if hash != self.config_hash {
            return Err(ModelError::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs framework {}",
                &self.config_hash[..12],
                &hash[..12]
            )));
        }
        let pattern = framework.sharing_pattern(self.model_config.with_pores)?;
        let mut model = init_model(&pattern, &self.model_config, 0)?;
        model.load_params(self.params.clone())?;
        model.normalization = self.normalization;
        Ok(model)
    }
}
