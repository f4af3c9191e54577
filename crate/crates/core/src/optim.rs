//! SGD and Adam with coupled L2 weight decay, deterministic epoch batching,
//! the training loop, and best-checkpoint retention.
//!
//! Videos keep their natural lengths: a batch is a list of per-video samples
//! whose gradients are averaged in sample order, so "batch size" only
//! controls update granularity and no padding or masking exists anywhere.
//! Training is a deterministic function of (dataset, dims, config).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::metrics::{self, MetricsError};
use crate::net::{self, Gradients, Mode, ModelDims, ModelParams, NetError, VideoLabels};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMetric {
    RecipeAccuracy,
    ActionF1,
}

impl SelectionMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMetric::RecipeAccuracy => "recipe_accuracy",
            SelectionMetric::ActionF1 => "action_f1",
        }
    }
}

/// Training hyperparameters. Defaults: 10000 epochs, batch size 16, Adam at
/// learning rate 1e-3, no weight decay, no dropout, lambda_act 1,
/// lambda_div 0, eval every 10 epochs, best checkpoint by recipe accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub lambda_act: f64,
    pub lambda_div: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10_000,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            weight_decay: 0.0,
            dropout_p: 0.0,
            lambda_act: 1.0,
            lambda_div: 0.0,
            seed: 0,
            eval_every: 10,
            selection_metric: SelectionMetric::RecipeAccuracy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.epochs == 0 {
            return Err(OptimError::BadConfig { reason: "epochs must be >= 1" });
        }
        if self.batch_size == 0 {
            return Err(OptimError::BadConfig { reason: "batch_size must be >= 1" });
        }
        if self.eval_every == 0 {
            return Err(OptimError::BadConfig { reason: "eval_every must be >= 1" });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::BadConfig { reason: "learning_rate must be positive" });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(OptimError::BadConfig { reason: "weight_decay must be >= 0" });
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(OptimError::BadConfig { reason: "dropout_p must be in [0, 1)" });
        }
        Ok(())
    }
}

/// One row of the metric history: (epoch, split, metric name, value).
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Model snapshot plus the configuration and metric history of the run that
/// produced it. Serialization lives in the `watn` companion crate and
/// round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    /// Epoch the retained parameters were snapshotted at.
    pub epoch: usize,
    pub metric_history: Vec<HistoryEntry>,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimError {
    BadConfig { reason: &'static str },
    EmptyDataset { split: &'static str },
    DimsMismatch { field: &'static str, expected: usize, actual: usize },
    NonFiniteGradient,
    /// Training produced a non-finite loss at this epoch.
    Diverged { epoch: usize },
    Net(NetError),
    Metrics(MetricsError),
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::BadConfig { reason } => write!(f, "invalid train config: {reason}"),
            OptimError::EmptyDataset { split } => write!(f, "{split} split is empty"),
            OptimError::DimsMismatch { field, expected, actual } => {
                write!(f, "dims mismatch on {field}: expected {expected}, got {actual}")
            }
            OptimError::NonFiniteGradient => write!(f, "non-finite gradient rejected"),
            OptimError::Diverged { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            OptimError::Net(e) => write!(f, "{e}"),
            OptimError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for OptimError {}

impl From<NetError> for OptimError {
    fn from(e: NetError) -> OptimError {
        OptimError::Net(e)
    }
}

impl From<MetricsError> for OptimError {
    fn from(e: MetricsError) -> OptimError {
        OptimError::Metrics(e)
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: step counter plus Adam moment estimates over the flat
/// parameter vector (unused by SGD).
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptState {
    pub fn new(config: &TrainConfig, dims: &ModelDims) -> OptState {
        let n = match config.optimizer {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => ModelParams::param_count(dims),
        };
        OptState { step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One parameter update. Weight decay is coupled L2: the effective gradient
/// is `g + weight_decay * theta`, fed to plain SGD or to Adam with bias
/// correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut OptState,
    config: &TrainConfig,
) -> Result<(), OptimError> {
    if params.dims != grads.dims {
        return Err(OptimError::DimsMismatch {
            field: "gradients",
            expected: ModelParams::param_count(&params.dims),
            actual: ModelParams::param_count(&grads.dims),
        });
    }
    if !grads.is_finite() {
        return Err(OptimError::NonFiniteGradient);
    }
    let mut theta = params.to_flat();
    let g_flat = grads.to_flat();
    state.step += 1;
    match config.optimizer {
        OptimizerKind::Sgd => {
            for (t, g) in theta.iter_mut().zip(&g_flat) {
                let eff = g + config.weight_decay * *t;
                *t -= config.learning_rate * eff;
            }
        }
        OptimizerKind::Adam => {
            let t_step = state.step as i32;
            let bc1 = 1.0 - libm::pow(ADAM_BETA1, f64::from(t_step));
            let bc2 = 1.0 - libm::pow(ADAM_BETA2, f64::from(t_step));
            for i in 0..theta.len() {
                let eff = g_flat[i] + config.weight_decay * theta[i];
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * eff;
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * eff * eff;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                theta[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + ADAM_EPS);
            }
        }
    }
    *params = ModelParams::from_flat(params.dims, &theta)?;
    Ok(())
}

/// Epoch-deterministic shuffled batches of sample indices: the order is a
/// pure function of (seed, epoch), and the final batch carries the
/// remainder.
pub fn batch_iter(
    num_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(num_samples >= 1, "batch_iter requires a non-empty dataset");
    assert!(batch_size >= 1, "batch_iter requires batch_size >= 1");
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"watn.bat");
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn selection_value(report: &metrics::EvalReport, metric: SelectionMetric) -> f64 {
    match metric {
        SelectionMetric::RecipeAccuracy => report.recipe_accuracy,
        SelectionMetric::ActionF1 => report.action_f1,
    }
}

/// Trains on the train split, evaluating on the val split every
/// `eval_every` epochs (and at the final epoch), and returns the checkpoint
/// that maximized the selection metric (ties keep the earliest epoch)
/// together with the full metric history.
pub fn train(
    train_split: &Dataset,
    val_split: &Dataset,
    dims: ModelDims,
    config: &TrainConfig,
) -> Result<(Checkpoint, Vec<HistoryEntry>), OptimError> {
    config.validate()?;
    dims.validate()?;
    if train_split.videos.is_empty() {
        return Err(OptimError::EmptyDataset { split: "train" });
    }
    if val_split.videos.is_empty() {
        return Err(OptimError::EmptyDataset { split: "val" });
    }
    for (field, expected, actual) in [
        ("feat_dim", dims.feat_dim, train_split.feat_dim),
        ("num_actions", dims.num_actions, train_split.num_actions),
        ("num_recipes", dims.num_recipes, train_split.num_recipes),
    ] {
        if expected != actual {
            return Err(OptimError::DimsMismatch { field, expected, actual });
        }
    }

    let mut params = net::init_params(dims, config.seed);
    let mut state = OptState::new(config, &dims);
    let mut dropout_key = [0u8; 32];
    dropout_key[..8].copy_from_slice(&config.seed.to_le_bytes());
    dropout_key[16..24].copy_from_slice(b"watn.drp");
    let mut dropout_rng = ChaCha8Rng::from_seed(dropout_key);

    let n = train_split.videos.len();
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for batch in batch_iter(n, config.batch_size, config.seed, epoch) {
            let mut grads = Gradients::zeros(dims);
            for &idx in &batch {
                let sample = &train_split.videos[idx];
                let result = net::backward(
                    sample,
                    &params,
                    &VideoLabels::of(sample),
                    config.lambda_act,
                    config.lambda_div,
                    Mode::Train { dropout_p: config.dropout_p, rng: &mut dropout_rng },
                );
                let (loss, sample_grads) = match result {
                    Ok(ok) => ok,
                    Err(NetError::NonFinite { .. }) => {
                        return Err(OptimError::Diverged { epoch })
                    }
                    Err(e) => return Err(e.into()),
                };
                if !loss.total.is_finite() {
                    return Err(OptimError::Diverged { epoch });
                }
                loss_sum += loss.total;
                grads.accumulate(&sample_grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer_step(&mut params, &grads, &mut state, config)?;
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            return Err(OptimError::Diverged { epoch });
        }
        history.push(HistoryEntry {
            epoch,
            split: String::from("train"),
            metric: String::from("loss"),
            value: mean_loss,
        });

        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let report = metrics::evaluate_params(&params, val_split)?;
            for (metric, value) in [
                ("recipe_accuracy", report.recipe_accuracy),
                ("action_f1", report.action_f1),
            ] {
                history.push(HistoryEntry {
                    epoch,
                    split: String::from("val"),
                    metric: String::from(metric),
                    value,
                });
            }
            let value = selection_value(&report, config.selection_metric);
            let improved = match &best {
                None => true,
                Some((_, _, incumbent)) => value > *incumbent,
            };
            if improved {
                best = Some((params.clone(), epoch, value));
            }
        }
    }

    let (best_params, best_epoch, _) = best.expect("at least one evaluation ran");
    let checkpoint = Checkpoint {
        params: best_params,
        config: config.clone(),
        epoch: best_epoch,
        metric_history: history.clone(),
        format_version: CHECKPOINT_FORMAT_VERSION,
    };
    Ok((checkpoint, history))
}
